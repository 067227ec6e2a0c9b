#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "coq/checkpoint.hpp"
#include "coq/latent.hpp"
#include "coq/objectives.hpp"
#include "coq/policy.hpp"
#include "coq/records.hpp"
#include "coq/rng.hpp"

namespace coq {

enum class LambdaScope { Global, Batch };

inline std::string lambda_scope_name(LambdaScope s) {
  return s == LambdaScope::Global ? "global" : "batch";
}
inline LambdaScope lambda_scope_from(std::string_view s) {
  if (s == "batch") return LambdaScope::Batch;
  return LambdaScope::Global;
}

struct TrainerConfig {
  int k = 25;
  int b = 5;
  int max_in_memory = 5;
  double reward_threshold = 0.8;
  double lr = 0.1;
  int batch_size = 4;
  int max_steps = 1000;
  std::uint64_t seed = 1;
  LambdaScope lambda_scope = LambdaScope::Global;
  std::size_t buffer_capacity = 16;
  bool use_mapo = true;   // false: pure Hard-EM ablation (lambda pinned to 0)
  bool use_regex = true;  // false: regex module ablation
  double clip_norm = 10.0;
  int checkpoint_every = 0;  // steps between intermediate checkpoints; 0 = final only

  void validate() const {
    if (b < 1 || k < b) throw std::invalid_argument("config requires k >= b >= 1");
    if (!(reward_threshold > 0.0 && reward_threshold < 1.0))
      throw std::invalid_argument("reward threshold must lie in (0,1)");
    if (batch_size < 1 || max_steps < 1 || max_in_memory < 1)
      throw std::invalid_argument("batch size, steps and in-memory cap must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"k", k},
            {"b", b},
            {"max_in_memory", max_in_memory},
            {"reward_threshold", reward_threshold},
            {"lr", lr},
            {"batch_size", batch_size},
            {"max_steps", max_steps},
            {"seed", seed},
            {"lambda_scope", lambda_scope_name(lambda_scope)},
            {"buffer_capacity", buffer_capacity},
            {"use_mapo", use_mapo},
            {"use_regex", use_regex},
            {"clip_norm", clip_norm}};
  }
};

struct LossBreakdown {
  double sup = 0.0;
  double hard = 0.0;
  double mapo = 0.0;
  double aux = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

struct StepRecord {
  int step = 0;
  LossBreakdown losses;
  double r_b_mean = 0.0;
  std::size_t buffer_examples = 0;
  std::size_t buffer_trajectories = 0;
  std::size_t seen_examples = 0;
  std::size_t skipped_examples = 0;  // examples whose hard path had no representable target

  nlohmann::json to_json() const {
    return {{"step", step},
            {"lambda", losses.lambda},
            {"r_b_mean", r_b_mean},
            {"sup", losses.sup},
            {"hard", losses.hard},
            {"mapo", losses.mapo},
            {"aux", losses.aux},
            {"total", losses.total},
            {"buffer_examples", buffer_examples},
            {"buffer_trajectories", buffer_trajectories},
            {"seen_examples", seen_examples},
            {"skipped_examples", skipped_examples}};
  }
};

// Chain-of-questions trainer: per step, free beam search feeds the replay
// buffer and the MAPO sample, a gold-final-answer beam feeds Hard-EM, and the
// two losses are mixed by the dynamic weight lambda (the fraction of training
// examples with at least one buffered trajectory). Single-threaded and
// bitwise deterministic under a fixed seed.
class Trainer {
public:
  using Observer =
      std::function<void(const StepRecord&, const ReplayBuffer&, const std::set<std::string>&)>;

  Trainer(ReferencePolicy& policy, TrainerConfig config)
      : policy_(policy), config_(config),
        buffer_(config.buffer_capacity, config.reward_threshold), rng_(config.seed) {
    config_.validate();
  }

  const ReplayBuffer& buffer() const { return buffer_; }
  ReplayBuffer& buffer() { return buffer_; }
  AuxHeads& aux_heads() { return aux_; }
  const std::set<std::string>& seen_ids() const { return seen_; }

  void register_examples(const std::vector<ExampleRecord>& records) {
    for (const auto& r : records) seen_.insert(r.id);
  }

  StepRecord train_step(const std::vector<const ExampleRecord*>& batch, int step_number) {
    const TokenProtocol& protocol = policy_.protocol();
    const std::size_t policy_dim = policy_.params().size();
    StepRecord record;
    record.step = step_number;

    struct ExampleState {
      const ExampleRecord* rec = nullptr;
      std::vector<std::string> q_subs;
      std::vector<Trajectory> free_beam;
      bool has_sample = false;
      TrainingSample sample;
    };
    std::vector<ExampleState> states;

    // Phase 1: beam search, rewards and buffer admissions for every example,
    // so lambda reflects this step's buffer state.
    for (const auto* rec : batch) {
      seen_.insert(rec->id);
      ExampleState st;
      st.rec = rec;
      if (!rec->qdmr) throw std::invalid_argument("example " + rec->id + " has no decomposition");
      for (const auto& step : parse_qdmr_text(*rec->qdmr).steps) st.q_subs.push_back(step.text);
      if (st.q_subs.size() > 1) {
        BeamOptions free_opts{config_.k, config_.b, config_.use_regex, std::nullopt};
        try {
          st.free_beam = beam_search_latents(policy_, rec->question, rec->context, st.q_subs,
                                             protocol, free_opts);
        } catch (const EmptyCandidateSet&) {
          st.free_beam.clear();
        }
        for (auto& t : st.free_beam) {
          t.reward = f1_reward(t.sub_answers.back(), rec->answer);
          buffer_.admit(rec->id, t);
        }
        if (!st.free_beam.empty()) {
          std::vector<Trajectory> top5(st.free_beam.begin(),
                                       st.free_beam.begin() +
                                           std::min<std::size_t>(5, st.free_beam.size()));
          try {
            st.sample = assemble_training_sample(buffer_, rec->id, top5, rng_,
                                                 static_cast<std::size_t>(config_.max_in_memory));
            st.has_sample = true;
          } catch (const DegenerateSample&) {
            st.has_sample = false;
          }
        }
      }
      states.push_back(std::move(st));
    }

    // Lambda over the full set of registered training examples (or over the
    // batch when so configured), pinned to 0 with MAPO disabled.
    double lambda = 0.0;
    if (config_.use_mapo) {
      std::vector<std::string> ids;
      if (config_.lambda_scope == LambdaScope::Global) {
        ids.assign(seen_.begin(), seen_.end());
      } else {
        for (const auto* rec : batch) ids.push_back(rec->id);
      }
      lambda = compute_lambda(buffer_, ids);
    }
    record.losses.lambda = lambda;

    // Phase 2: losses and gradient accumulation.
    LossValue policy_grad(policy_dim);
    LossValue aux_grad(AuxHeads::kParamCount);
    double r_b_sum = 0.0;
    std::size_t r_b_count = 0;

    for (auto& st : states) {
      const ExampleRecord& rec = *st.rec;
      LossValue hard_lv(policy_dim);
      double sup_value = 0.0;
      Trajectory selected;

      if (st.q_subs.size() == 1) {
        // Single-step examples skip the latent machinery: supervised
        // sub-question loss plus the gold answer's negative log-likelihood.
        const LossValue sup =
            supervised_loss(policy_, rec.question, rec.context, st.q_subs, {}, protocol);
        sup_value = sup.value;
        hard_lv.add_scaled(sup, 1.0);
        selected.sub_answers = {rec.answer};
        try {
          const LossValue ans = answer_nll(policy_, rec.question, rec.context, st.q_subs,
                                           selected.sub_answers, protocol, config_.use_regex);
          hard_lv.add_scaled(ans, 1.0);
        } catch (const UnrepresentableTarget&) {
          ++record.skipped_examples;
        }
      } else {
        BeamOptions forced_opts{config_.k, config_.b, config_.use_regex, rec.answer};
        bool have_selected = false;
        try {
          const auto forced_beam = beam_search_latents(policy_, rec.question, rec.context,
                                                       st.q_subs, protocol, forced_opts);
          selected = hard_em_select(forced_beam);
          have_selected = true;
        } catch (const EmptyCandidateSet&) {
        } catch (const UnrepresentableTarget&) {
        }
        if (have_selected) {
          hard_lv = hard_em_loss(policy_, rec.question, rec.context, st.q_subs, selected,
                                 protocol, config_.use_regex);
          sup_value =
              supervised_loss(policy_, rec.question, rec.context, st.q_subs,
                              selected.sub_answers, protocol)
                  .value;
        } else {
          // No trajectory can reach the gold answer under the current
          // candidate space; fall back to the supervised signal alone.
          ++record.skipped_examples;
          std::vector<std::string> proxy =
              st.free_beam.empty() ? std::vector<std::string>{}
                                   : st.free_beam.front().sub_answers;
          if (proxy.size() + 1 >= st.q_subs.size()) {
            const LossValue sup =
                supervised_loss(policy_, rec.question, rec.context, st.q_subs, proxy, protocol);
            sup_value = sup.value;
            hard_lv.add_scaled(sup, 1.0);
            selected.sub_answers = proxy;
          }
        }
      }

      // MAPO; examples without a usable sample contribute only the Hard-EM
      // loss, which the mixture identity realizes as mapo == hard.
      LossValue mapo_lv = hard_lv;
      if (config_.use_mapo && st.has_sample) {
        try {
          mapo_lv = mapo_loss(policy_, rec.question, rec.context, st.q_subs, st.sample, protocol,
                              config_.use_regex);
          r_b_sum += st.sample.r_b;
          ++r_b_count;
        } catch (const UnrepresentableTarget&) {
          // A replayed trajectory no longer fits the candidate space (config
          // changed between runs); contribute only the Hard-EM loss.
          mapo_lv = hard_lv;
          ++record.skipped_examples;
        }
      }

      const LossValue mixed = mixture_loss(hard_lv, mapo_lv, lambda);

      LossValue aux_lv(AuxHeads::kParamCount);
      if (rec.aux && !rec.aux->empty() && !selected.sub_answers.empty() &&
          selected.sub_answers.size() == st.q_subs.size()) {
        std::vector<RunContext> runs;
        std::vector<std::string> prefix;
        for (std::size_t j = 0; j < st.q_subs.size(); ++j) {
          RunContext run;
          run.subq_inlined = substitute_refs_text(st.q_subs[j], prefix);
          run.history_answers = prefix;
          runs.push_back(std::move(run));
          prefix.push_back(selected.sub_answers[j]);
        }
        aux_lv = auxiliary_losses(aux_, rec, runs);
      }

      record.losses.sup += sup_value;
      record.losses.hard += hard_lv.value;
      record.losses.mapo += mapo_lv.value;
      record.losses.aux += aux_lv.value;
      record.losses.total += mixed.value + aux_lv.value;
      policy_grad.add_scaled(mixed, 1.0);
      aux_grad.add_scaled(aux_lv, 1.0);
    }

    const double inv = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
    record.losses.sup *= inv;
    record.losses.hard *= inv;
    record.losses.mapo *= inv;
    record.losses.aux *= inv;
    record.losses.total *= inv;
    for (auto& g : policy_grad.grad) g *= inv;
    for (auto& g : aux_grad.grad) g *= inv;

    // Joint clip at clip_norm, then one SGD update.
    double norm_sq = 0.0;
    for (double g : policy_grad.grad) norm_sq += g * g;
    for (double g : aux_grad.grad) norm_sq += g * g;
    double scale = 1.0;
    const double norm = std::sqrt(norm_sq);
    if (config_.clip_norm > 0.0 && norm > config_.clip_norm) scale = config_.clip_norm / norm;
    auto& theta = policy_.params();
    for (std::size_t i = 0; i < theta.size(); ++i)
      theta[i] -= config_.lr * scale * policy_grad.grad[i];
    auto& aux_params = aux_.params();
    for (std::size_t i = 0; i < aux_params.size(); ++i)
      aux_params[i] -= config_.lr * scale * aux_grad.grad[i];

    record.r_b_mean = r_b_count > 0 ? r_b_sum / static_cast<double>(r_b_count) : 0.0;
    record.buffer_examples = buffer_.example_count();
    record.buffer_trajectories = buffer_.total_trajectories();
    record.seen_examples = seen_.size();
    return record;
  }

  Checkpoint make_checkpoint() const {
    Checkpoint cp = policy_.to_checkpoint();
    cp.metadata["config"] = config_.to_json();
    cp.metadata["aux_blocks"] = AuxHeads::param_block_names();
    cp.arrays["aux.params"] =
        std::vector<float>(aux_.params().begin(), aux_.params().end());
    return cp;
  }

  void load_checkpoint_state(const Checkpoint& cp) {
    policy_.load(cp);
    auto it = cp.arrays.find("aux.params");
    if (it != cp.arrays.end() && it->second.size() == static_cast<std::size_t>(AuxHeads::kParamCount))
      aux_.params().assign(it->second.begin(), it->second.end());
  }

  // Deterministic training run: one epoch-shuffle up front, cyclic batches,
  // one JSONL record per step. Examples without a decomposition are excluded
  // before training begins.
  std::vector<StepRecord> run(const std::vector<ExampleRecord>& records,
                              const std::string& log_path = "",
                              const std::string& checkpoint_path = "",
                              const Observer& observer = nullptr) {
    std::vector<const ExampleRecord*> usable;
    for (const auto& r : records)
      if (r.qdmr) usable.push_back(&r);
    if (usable.empty()) throw EmptyDataset("no decomposed examples to train on");
    for (const auto* r : usable) seen_.insert(r->id);

    std::vector<std::size_t> order(usable.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_.shuffle(order);

    std::ofstream log;
    if (!log_path.empty()) {
      log.open(log_path, std::ios::binary | std::ios::trunc);
      if (!log) throw std::runtime_error("cannot write training log " + log_path);
    }

    std::vector<StepRecord> history;
    history.reserve(static_cast<std::size_t>(config_.max_steps));
    std::size_t cursor = 0;
    for (int step = 1; step <= config_.max_steps; ++step) {
      std::vector<const ExampleRecord*> batch;
      for (int i = 0; i < config_.batch_size; ++i) {
        batch.push_back(usable[order[cursor]]);
        cursor = (cursor + 1) % order.size();
      }
      StepRecord rec = train_step(batch, step);
      if (log.is_open()) log << rec.to_json().dump() << "\n";
      if (observer) observer(rec, buffer_, seen_);
      if (!checkpoint_path.empty() && config_.checkpoint_every > 0 &&
          step % config_.checkpoint_every == 0 && step < config_.max_steps) {
        save_checkpoint(checkpoint_path + ".step" + std::to_string(step), make_checkpoint());
      }
      history.push_back(std::move(rec));
    }
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, make_checkpoint());
    return history;
  }

private:
  ReferencePolicy& policy_;
  TrainerConfig config_;
  ReplayBuffer buffer_;
  AuxHeads aux_;
  Rng rng_;
  std::set<std::string> seen_;
};

}  // namespace coq
