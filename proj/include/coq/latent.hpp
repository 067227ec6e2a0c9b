#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "coq/numexec.hpp"
#include "coq/policy.hpp"
#include "coq/qdmr.hpp"
#include "coq/rng.hpp"
#include "coq/text.hpp"

namespace coq {

struct EmptyCandidateSet : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyTrajectoryList : std::runtime_error {
  EmptyTrajectoryList() : std::runtime_error("no trajectories to select from") {}
};
struct DegenerateSample : std::runtime_error {
  DegenerateSample() : std::runtime_error("empty beam and empty buffer") {}
};

// One complete sequence of sub-answers with its per-step log-probabilities.
// loglik is the total trajectory log-likelihood (both the answer factors and
// the sub-question factors); reward is the token F1 of the final sub-answer.
struct Trajectory {
  std::vector<std::string> sub_answers;
  std::vector<double> q_logprobs;
  std::vector<double> a_logprobs;
  double loglik = 0.0;
  double reward = 0.0;

  double logprob_sum() const {
    double s = 0.0;
    for (double v : q_logprobs) s += v;
    for (double v : a_logprobs) s += v;
    return s;
  }
  // Answer factors only; the trajectory probability MAPO weights by reward.
  double answer_loglik() const {
    double s = 0.0;
    for (double v : a_logprobs) s += v;
    return s;
  }
};

// Per-step conditioning strings for one (question, context, gold
// sub-questions) example. History carries the gold sub-question text verbatim
// (placeholder form) with the trajectory's sub-answers; the pending
// sub-question is reference-substituted before regex matching and answer
// scoring.
struct StepConditioning {
  std::string q_input;      // encoder input for scoring the sub-question
  std::string q_target;     // formatted sub-question target (end token on last step)
  std::string a_input;      // conditioning for scoring the sub-answer
  std::string subq_inlined; // current sub-question with references substituted
  std::optional<ExecOutcome> regex;  // pipeline outcome on the final step
};

inline StepConditioning make_step_conditioning(
    const std::string& question, const std::string& context,
    const std::vector<std::string>& q_subs, std::size_t step,
    const std::vector<std::string>& answers_so_far, const TokenProtocol& protocol,
    bool use_regex = true, std::size_t max_input_len = 0) {
  StepConditioning out;
  PromptState state;
  state.question = question;
  state.context = context;
  for (std::size_t j = 0; j < step; ++j) state.history.emplace_back(q_subs[j], answers_so_far[j]);
  out.q_input = render_encoder_input(state, protocol, max_input_len);
  const bool is_last = step + 1 == q_subs.size();
  out.q_target = format_subq_target(q_subs[step], is_last, protocol);
  out.subq_inlined = substitute_refs_text(q_subs[step], answers_so_far);
  std::optional<std::string> regex_value;
  if (is_last && use_regex) {
    out.regex = try_regex_pipeline(out.subq_inlined);
    if (out.regex->ok()) regex_value = out.regex->value;
  }
  out.a_input =
      render_step_conditioning(out.q_input, out.subq_inlined, is_last, regex_value, protocol);
  return out;
}

// Total log-likelihood of one trajectory: all answer factors plus all
// sub-question factors, each conditioned on the prefix.
inline Trajectory trajectory_loglik(const PolicyModel& model, const std::string& question,
                                    const std::string& context,
                                    const std::vector<std::string>& q_subs,
                                    const std::vector<std::string>& sub_answers,
                                    const TokenProtocol& protocol, bool use_regex = true) {
  if (q_subs.size() != sub_answers.size())
    throw std::invalid_argument("trajectory_loglik: |sub_answers| must equal |q_subs|");
  Trajectory t;
  t.sub_answers = sub_answers;
  std::vector<std::string> prefix;
  for (std::size_t j = 0; j < q_subs.size(); ++j) {
    const auto cond =
        make_step_conditioning(question, context, q_subs, j, prefix, protocol, use_regex);
    t.q_logprobs.push_back(model.score_target(cond.q_input, cond.q_target));
    t.a_logprobs.push_back(model.score_target(cond.a_input, sub_answers[j]));
    prefix.push_back(sub_answers[j]);
  }
  t.loglik = t.logprob_sum();
  return t;
}

struct BeamOptions {
  int k = 25;
  int b = 5;
  bool use_regex = true;
  // When set, the final step is not searched: every beam is extended with
  // exactly this answer (the observed gold answer; intermediate sub-answers
  // stay latent while the final one is forced).
  std::optional<std::string> forced_final_answer;
};

namespace latent_detail {

inline std::string answer_key(const std::vector<std::string>& answers) {
  std::string key;
  for (const auto& a : answers) {
    key += normalize_answer(a);
    key.push_back('\x1f');
  }
  return key;
}

inline bool sub_answers_less(const std::vector<std::string>& a,
                             const std::vector<std::string>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace latent_detail

// Beam search over latent sub-answer sequences: each step expands every beam
// with the policy's top-b answers and keeps the top-k by partial trajectory
// log-likelihood. Duplicate (normalized) answer sequences are pruned keeping
// the higher-likelihood one; empty answers never enter a beam. The result is
// sorted by loglik descending.
inline std::vector<Trajectory> beam_search_latents(const PolicyModel& model,
                                                   const std::string& question,
                                                   const std::string& context,
                                                   const std::vector<std::string>& q_subs,
                                                   const TokenProtocol& protocol,
                                                   const BeamOptions& opts = {}) {
  if (opts.k < 1 || opts.b < 1) throw std::invalid_argument("beam search needs k >= 1, b >= 1");
  if (q_subs.empty()) throw std::invalid_argument("beam search needs at least one step");
  std::vector<Trajectory> beam(1);
  for (std::size_t j = 0; j < q_subs.size(); ++j) {
    const bool is_last = j + 1 == q_subs.size();
    std::vector<Trajectory> expanded;
    for (const auto& parent : beam) {
      const auto cond = make_step_conditioning(question, context, q_subs, j,
                                               parent.sub_answers, protocol, opts.use_regex);
      const double q_lp = model.score_target(cond.q_input, cond.q_target);
      std::vector<ScoredTarget> children;
      if (is_last && opts.forced_final_answer) {
        try {
          children.push_back(
              {*opts.forced_final_answer,
               model.score_target(cond.a_input, *opts.forced_final_answer)});
        } catch (const UnrepresentableTarget&) {
          continue;  // this prefix cannot reach the forced answer
        }
      } else {
        children = model.top_candidates(cond.a_input, opts.b);
      }
      for (const auto& child : children) {
        if (normalize_answer(child.target).empty()) continue;
        Trajectory t = parent;
        t.sub_answers.push_back(child.target);
        t.q_logprobs.push_back(q_lp);
        t.a_logprobs.push_back(child.logprob);
        t.loglik = t.logprob_sum();
        expanded.push_back(std::move(t));
      }
    }
    if (expanded.empty())
      throw EmptyCandidateSet("no candidates at step " + std::to_string(j + 1));
    std::stable_sort(expanded.begin(), expanded.end(), [](const Trajectory& a, const Trajectory& b) {
      if (a.loglik != b.loglik) return a.loglik > b.loglik;
      return latent_detail::sub_answers_less(a.sub_answers, b.sub_answers);
    });
    std::vector<Trajectory> next;
    std::unordered_map<std::string, std::size_t> seen;
    for (auto& t : expanded) {
      const std::string key = latent_detail::answer_key(t.sub_answers);
      if (seen.count(key)) continue;  // sorted: the first is the higher-likelihood one
      seen.emplace(key, next.size());
      next.push_back(std::move(t));
      if (next.size() >= static_cast<std::size_t>(opts.k)) break;
    }
    beam = std::move(next);
  }
  return beam;
}

// Hard-EM selection: the single trajectory with the largest likelihood, ties
// broken by lexicographically smallest sub-answer sequence.
inline const Trajectory& hard_em_select(const std::vector<Trajectory>& trajectories) {
  if (trajectories.empty()) throw EmptyTrajectoryList();
  const Trajectory* best = &trajectories[0];
  for (const auto& t : trajectories) {
    if (t.loglik > best->loglik ||
        (t.loglik == best->loglik &&
         latent_detail::sub_answers_less(t.sub_answers, best->sub_answers)))
      best = &t;
  }
  return *best;
}

// Token-level F1 after answer normalization; 1 when both sides normalize to
// nothing, 0 when exactly one does.
inline double f1_reward(std::string_view predicted, std::string_view gold) {
  const auto p_toks = normalize_answer_tokens(predicted);
  const auto g_toks = normalize_answer_tokens(gold);
  if (p_toks.empty() && g_toks.empty()) return 1.0;
  if (p_toks.empty() || g_toks.empty()) return 0.0;
  std::map<std::string, int> gold_counts;
  for (const auto& t : g_toks) ++gold_counts[t];
  int overlap = 0;
  for (const auto& t : p_toks) {
    auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      ++overlap;
      --it->second;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(p_toks.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(g_toks.size());
  return 2.0 * precision * recall / (precision + recall);
}

// Per-example store of high-reward trajectories. Admission requires
// reward > threshold (strict); duplicates (by sub-answer sequence) are
// rejected; on overflow the lowest-reward entry is evicted, and an incoming
// trajectory that would itself be the lowest is rejected.
class ReplayBuffer {
public:
  explicit ReplayBuffer(std::size_t capacity_per_example = 16, double reward_threshold = 0.8)
      : capacity_(capacity_per_example), threshold_(reward_threshold) {}

  bool admit(const std::string& example_id, const Trajectory& t) {
    if (!(t.reward > threshold_)) return false;
    auto& bucket = store_[example_id];
    for (const auto& held : bucket)
      if (held.sub_answers == t.sub_answers) return false;
    if (bucket.size() < capacity_) {
      bucket.push_back(t);
      return true;
    }
    std::size_t lowest = 0;
    for (std::size_t i = 1; i < bucket.size(); ++i)
      if (bucket[i].reward < bucket[lowest].reward) lowest = i;
    if (!(t.reward > bucket[lowest].reward)) return false;
    bucket.erase(bucket.begin() + static_cast<std::ptrdiff_t>(lowest));
    bucket.push_back(t);
    return true;
  }

  bool contains(const std::string& example_id, const std::vector<std::string>& sub_answers) const {
    auto it = store_.find(example_id);
    if (it == store_.end()) return false;
    for (const auto& t : it->second)
      if (t.sub_answers == sub_answers) return true;
    return false;
  }

  const std::vector<Trajectory>* bucket(const std::string& example_id) const {
    auto it = store_.find(example_id);
    return it == store_.end() ? nullptr : &it->second;
  }

  bool has_trajectories(const std::string& example_id) const {
    auto it = store_.find(example_id);
    return it != store_.end() && !it->second.empty();
  }

  std::size_t example_count() const {
    std::size_t n = 0;
    for (const auto& [id, bucket] : store_)
      if (!bucket.empty()) ++n;
    return n;
  }

  std::size_t total_trajectories() const {
    std::size_t n = 0;
    for (const auto& [id, bucket] : store_) n += bucket.size();
    return n;
  }

  double threshold() const { return threshold_; }
  std::size_t capacity() const { return capacity_; }
  const std::map<std::string, std::vector<Trajectory>>& store() const { return store_; }

  // Snapshot: one JSON record per stored trajectory, line-delimited,
  // reloadable to resume training.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write buffer snapshot " + path);
    for (const auto& [id, bucket] : store_) {
      for (const auto& t : bucket) {
        nlohmann::json rec;
        rec["example_id"] = id;
        rec["sub_answers"] = t.sub_answers;
        rec["reward"] = t.reward;
        rec["loglik"] = t.loglik;
        out << rec.dump() << "\n";
      }
    }
  }

  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read buffer snapshot " + path);
    store_.clear();
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      Trajectory t;
      t.sub_answers = rec.at("sub_answers").get<std::vector<std::string>>();
      t.reward = rec.at("reward").get<double>();
      t.loglik = rec.at("loglik").get<double>();
      store_[rec.at("example_id").get<std::string>()].push_back(std::move(t));
    }
  }

private:
  std::map<std::string, std::vector<Trajectory>> store_;
  std::size_t capacity_;
  double threshold_;
};

// MAPO's per-example stratified sample: up to 5 in-memory trajectories drawn
// uniformly from the buffer plus the out-of-memory remainder of the beam
// top-5. r_b = |in_memory| / m.
struct TrainingSample {
  std::vector<Trajectory> in_memory;
  std::vector<Trajectory> out_of_memory;
  std::size_t m = 0;
  double r_b = 0.0;
};

inline TrainingSample assemble_training_sample(const ReplayBuffer& buffer,
                                               const std::string& example_id,
                                               const std::vector<Trajectory>& beam_top5,
                                               Rng& rng, std::size_t max_in_memory = 5) {
  TrainingSample sample;
  for (const auto& t : beam_top5)
    if (!buffer.contains(example_id, t.sub_answers)) sample.out_of_memory.push_back(t);
  if (const auto* bucket = buffer.bucket(example_id); bucket && !bucket->empty()) {
    const auto picks = rng.sample_indices(bucket->size(), max_in_memory);
    for (std::size_t i : picks) sample.in_memory.push_back((*bucket)[i]);
  }
  sample.m = sample.in_memory.size() + sample.out_of_memory.size();
  if (sample.m == 0) throw DegenerateSample();
  sample.r_b = static_cast<double>(sample.in_memory.size()) / static_cast<double>(sample.m);
  return sample;
}

}  // namespace coq
