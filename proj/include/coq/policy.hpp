#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "coq/checkpoint.hpp"
#include "coq/decimal.hpp"
#include "coq/qdmr.hpp"
#include "coq/text.hpp"

namespace coq {

struct UnrepresentableTarget : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ScoredTarget {
  std::string target;
  double logprob = 0.0;
};

// The model contract f(.; theta) used by search, losses and inference:
// score one target under the current conditioning, or propose the top-b
// continuations. Log-probabilities are <= 0 and deterministic given
// (parameters, inputs); candidates returned by top_candidates score
// identically under score_target.
class PolicyModel {
public:
  virtual ~PolicyModel() = default;
  virtual double score_target(const std::string& encoder_input,
                              const std::string& target) const = 0;
  virtual std::vector<ScoredTarget> top_candidates(const std::string& encoder_input,
                                                   int budget) const = 0;
};

// A policy with explicit parameters and analytic log-probability gradients.
class TrainablePolicy : public PolicyModel {
public:
  virtual std::vector<double>& params() = 0;
  virtual const std::vector<double>& params() const = 0;
  virtual std::vector<double> grad_logprob(const std::string& encoder_input,
                                           const std::string& target) const = 0;
};

// Supplies the templated decompositions the reference policy selects
// sub-questions from. The first entry is the primary (oracle) decomposition;
// the rest are distractors.
using DecompositionProvider = std::function<std::vector<QdmrDecomposition>(
    const std::string& question, const std::string& context)>;

struct PolicyConfig {
  int span_cap = 8;          // max candidate span length in tokens
  double temperature = 1.0;  // softmax temperature
};

// Log-linear softmax policy over a closed per-step candidate space:
// all context spans up to span_cap tokens, all extracted numbers, the regex
// execution result when present, and (in question mode) the provider's
// templated sub-questions. score = theta . phi(input, candidate) / T.
class ReferencePolicy : public TrainablePolicy {
public:
  enum Feature : int {
    kAnsIsNumber = 0,
    kAnsIsRegex,
    kAnsSentenceOverlap,
    kAnsCandInSubq,
    kAnsCandInQuestion,
    kAnsPosition,
    kAnsLength,
    kAnsRepeatAnswer,
    kAnsNumInSubq,
    kAnsNoContent,
    kSubqTemplateNext,
    kSubqTemplateAny,
    kSubqRefsResolvable,
    kSubqRepeat,
    kSubqOverlapQuestion,
    kSubqEndMarker,
    kFeatureCount
  };

  static const std::vector<std::string>& feature_names() {
    static const std::vector<std::string> kNames = {
        "a_is_number",      "a_is_regex",      "a_sentence_overlap",
        "a_cand_in_subq",   "a_cand_in_question", "a_position",
        "a_length",         "a_repeat_answer", "a_num_in_subq",
        "a_no_content",     "q_template_next", "q_template_any",
        "q_refs_resolvable", "q_repeat",       "q_overlap_question",
        "q_end_marker"};
    return kNames;
  }

  explicit ReferencePolicy(PolicyConfig cfg = {}, DecompositionProvider provider = nullptr,
                           TokenProtocol protocol = {})
      : cfg_(cfg), provider_(std::move(provider)), protocol_(std::move(protocol)),
        theta_(kFeatureCount, 0.0) {}

  const PolicyConfig& config() const { return cfg_; }
  const TokenProtocol& protocol() const { return protocol_; }
  void set_provider(DecompositionProvider provider) { provider_ = std::move(provider); }

  std::vector<double>& params() override { return theta_; }
  const std::vector<double>& params() const override { return theta_; }

  double score_target(const std::string& encoder_input,
                      const std::string& target) const override {
    const auto table = table_for(encoder_input);
    const int idx = lookup(*table, target);
    const auto logprobs = compute_logprobs(*table);
    return logprobs[static_cast<std::size_t>(idx)];
  }

  std::vector<ScoredTarget> top_candidates(const std::string& encoder_input,
                                           int budget) const override {
    if (budget < 1) throw std::invalid_argument("budget must be >= 1");
    const auto table = table_for(encoder_input);
    const auto logprobs = compute_logprobs(*table);
    std::vector<int> order(table->texts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return logprobs[static_cast<std::size_t>(a)] > logprobs[static_cast<std::size_t>(b)];
    });
    std::vector<ScoredTarget> out;
    const std::size_t take = std::min<std::size_t>(order.size(), static_cast<std::size_t>(budget));
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
      out.push_back({table->texts[static_cast<std::size_t>(order[i])],
                     logprobs[static_cast<std::size_t>(order[i])]});
    return out;
  }

  std::vector<double> grad_logprob(const std::string& encoder_input,
                                   const std::string& target) const override {
    return score_and_grad(encoder_input, target).grad;
  }

  struct ScoredGrad {
    double logprob = 0.0;
    std::vector<double> grad;
  };

  // One softmax pass returning both the log-probability and its gradient
  // w.r.t. theta: (phi(target) - E_softmax[phi]) / temperature.
  ScoredGrad score_and_grad(const std::string& encoder_input, const std::string& target) const {
    const auto table = table_for(encoder_input);
    const int idx = lookup(*table, target);
    const auto logprobs = compute_logprobs(*table);
    ScoredGrad out;
    out.logprob = logprobs[static_cast<std::size_t>(idx)];
    out.grad.assign(kFeatureCount, 0.0);
    for (std::size_t c = 0; c < table->texts.size(); ++c) {
      const double pc = std::exp(logprobs[c]);
      const double* phi = &table->features[c * kFeatureCount];
      for (int f = 0; f < kFeatureCount; ++f) out.grad[static_cast<std::size_t>(f)] -= pc * phi[f];
    }
    const double* phi_t = &table->features[static_cast<std::size_t>(idx) * kFeatureCount];
    for (int f = 0; f < kFeatureCount; ++f) out.grad[static_cast<std::size_t>(f)] += phi_t[f];
    for (auto& g : out.grad) g /= cfg_.temperature;
    return out;
  }

  // Number of candidates for an input; exposed for tests and diagnostics.
  std::size_t candidate_count(const std::string& encoder_input) const {
    return table_for(encoder_input)->texts.size();
  }
  std::vector<std::string> candidate_texts(const std::string& encoder_input) const {
    return table_for(encoder_input)->texts;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint cp;
    cp.metadata["feature_names"] = feature_names();
    cp.metadata["span_cap"] = cfg_.span_cap;
    cp.metadata["temperature"] = cfg_.temperature;
    cp.arrays["policy.theta"] = std::vector<float>(theta_.begin(), theta_.end());
    return cp;
  }

  void load(const Checkpoint& cp) {
    const auto it = cp.arrays.find("policy.theta");
    if (it == cp.arrays.end() || it->second.size() != static_cast<std::size_t>(kFeatureCount))
      throw CheckpointError("checkpoint lacks a policy.theta of the expected size");
    theta_.assign(it->second.begin(), it->second.end());
    if (cp.metadata.contains("span_cap")) cfg_.span_cap = cp.metadata["span_cap"].get<int>();
    if (cp.metadata.contains("temperature"))
      cfg_.temperature = cp.metadata["temperature"].get<double>();
    invalidate_cache();
  }

  // Parameter updates invalidate nothing (features are theta-independent),
  // but config changes do; exposed for completeness.
  void invalidate_cache() const {
    std::lock_guard<std::mutex> lock(cache_mutex_);
    table_cache_.clear();
    table_order_.clear();
    context_cache_.clear();
    context_order_.clear();
  }

private:
  struct ContextInfo {
    std::vector<Token> tokens;
    std::vector<std::string> lower;          // lowercased token text
    std::vector<int> sentence_of;            // sentence index per token
    std::unordered_map<std::string, int> sentence_df;  // sentences containing each token
    std::vector<NumberLiteral> numbers;
    std::size_t length = 0;
  };

  struct CandidateTable {
    std::vector<std::string> texts;
    std::vector<double> features;  // texts.size() x kFeatureCount, row-major
    std::unordered_map<std::string, int> by_text;
    std::unordered_map<std::string, int> by_norm;
  };

  std::shared_ptr<const ContextInfo> context_for(const std::string& context) const {
    {
      std::lock_guard<std::mutex> lock(cache_mutex_);
      auto it = context_cache_.find(context);
      if (it != context_cache_.end()) return it->second;
    }
    auto info = std::make_shared<ContextInfo>();
    info->tokens = tokenize(context);
    info->length = context.size();
    info->lower.reserve(info->tokens.size());
    for (const auto& t : info->tokens) info->lower.push_back(token_norm(t.text));
    const auto sentences = split_sentences(context);
    info->sentence_of.assign(info->tokens.size(), 0);
    for (std::size_t i = 0; i < info->tokens.size(); ++i) {
      for (std::size_t s = 0; s < sentences.size(); ++s) {
        if (info->tokens[i].begin >= sentences[s].begin && info->tokens[i].begin < sentences[s].end) {
          info->sentence_of[i] = static_cast<int>(s);
          break;
        }
      }
    }
    info->numbers = extract_number_literals(context);
    {
      std::unordered_map<std::string, int> last_sentence;
      for (std::size_t i = 0; i < info->tokens.size(); ++i) {
        const int sent = info->sentence_of[i];
        auto [it, inserted] = last_sentence.emplace(info->lower[i], sent);
        if (inserted || it->second != sent) {
          it->second = sent;
          ++info->sentence_df[info->lower[i]];
        }
      }
    }
    std::lock_guard<std::mutex> lock(cache_mutex_);
    context_cache_.emplace(context, info);
    context_order_.push_back(context);
    if (context_order_.size() > kContextCacheCap) {
      context_cache_.erase(context_order_.front());
      context_order_.pop_front();
    }
    return info;
  }

  std::shared_ptr<const CandidateTable> table_for(const std::string& input) const {
    {
      std::lock_guard<std::mutex> lock(cache_mutex_);
      auto it = table_cache_.find(input);
      if (it != table_cache_.end()) return it->second;
    }
    const EncoderView view = parse_encoder_view(input, protocol_);
    auto table = view.pending_subq ? build_answer_table(view) : build_subq_table(view);
    std::lock_guard<std::mutex> lock(cache_mutex_);
    table_cache_.emplace(input, table);
    table_order_.push_back(input);
    if (table_order_.size() > kTableCacheCap) {
      table_cache_.erase(table_order_.front());
      table_order_.pop_front();
    }
    return table;
  }

  static double overlap_fraction(const std::vector<std::string>& needles,
                                 const std::unordered_set<std::string>& pool) {
    if (needles.empty()) return 0.0;
    std::unordered_set<std::string> distinct(needles.begin(), needles.end());
    std::size_t hits = 0;
    for (const auto& n : distinct)
      if (pool.count(n)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(distinct.size());
  }

  // All token ranges where `cand` appears in the context, by lowercased
  // token-sequence equality.
  static std::vector<std::pair<std::size_t, std::size_t>> occurrences(
      const ContextInfo& ctx, const std::vector<std::string>& cand) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (cand.empty() || cand.size() > ctx.lower.size()) return out;
    for (std::size_t i = 0; i + cand.size() <= ctx.lower.size(); ++i) {
      bool match = true;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        if (ctx.lower[i + k] != cand[k]) {
          match = false;
          break;
        }
      }
      if (match) out.emplace_back(i, i + cand.size());
    }
    return out;
  }

  std::shared_ptr<const CandidateTable> build_answer_table(const EncoderView& view) const {
    auto ctx = context_for(view.context);
    auto table = std::make_shared<CandidateTable>();

    struct Raw {
      std::string text;
      bool from_regex = false;
      std::optional<std::size_t> first_token;  // for spans: start token index
    };
    // Candidate spans stay within one sentence; an answer never straddles a
    // sentence boundary.
    std::vector<Raw> raws;
    const std::size_t n_tokens = ctx->tokens.size();
    for (std::size_t start = 0; start < n_tokens; ++start) {
      const std::size_t max_len =
          std::min<std::size_t>(static_cast<std::size_t>(cfg_.span_cap), n_tokens - start);
      for (std::size_t len = 1; len <= max_len; ++len) {
        if (ctx->sentence_of[start + len - 1] != ctx->sentence_of[start]) break;
        const std::size_t b = ctx->tokens[start].begin;
        const std::size_t e = ctx->tokens[start + len - 1].end;
        raws.push_back({view.context.substr(b, e - b), false, start});
      }
    }
    for (const auto& num : ctx->numbers) raws.push_back({num.canonical, false, std::nullopt});
    const std::string subq = view.pending_subq.value_or("");
    for (const auto& num : extract_number_literals(subq))
      raws.push_back({num.canonical, false, std::nullopt});
    if (view.pending_regex_value) raws.push_back({*view.pending_regex_value, true, std::nullopt});

    // Dedup by normalized answer, keeping the first occurrence and merging
    // the regex flag into it.
    std::unordered_map<std::string, int> norm_index;
    std::vector<Raw> kept;
    std::vector<bool> regex_flag;
    for (auto& raw : raws) {
      const std::string norm = normalize_answer(raw.text);
      if (norm.empty()) continue;
      auto it = norm_index.find(norm);
      if (it == norm_index.end()) {
        norm_index.emplace(norm, static_cast<int>(kept.size()));
        kept.push_back(raw);
        regex_flag.push_back(raw.from_regex);
      } else if (raw.from_regex) {
        regex_flag[static_cast<std::size_t>(it->second)] = true;
      }
    }

    // Shared question/sub-question context for the feature computations.
    const std::vector<std::string> subq_content = content_tokens(subq);
    const std::unordered_set<std::string> subq_set(subq_content.begin(), subq_content.end());
    const std::vector<std::string> question_content = content_tokens(view.question);
    const std::unordered_set<std::string> question_set(question_content.begin(),
                                                       question_content.end());
    std::unordered_set<std::string> history_answers;
    for (const auto& [hq, ha] : view.history) history_answers.insert(normalize_answer(ha));
    std::unordered_set<std::string> subq_numbers;
    for (const auto& num : extract_number_literals(subq)) subq_numbers.insert(num.canonical);

    table->texts.reserve(kept.size());
    table->features.assign(kept.size() * kFeatureCount, 0.0);
    for (std::size_t c = 0; c < kept.size(); ++c) {
      const Raw& raw = kept[c];
      double* phi = &table->features[c * kFeatureCount];
      const std::vector<Token> cand_tokens = tokenize(raw.text);
      std::vector<std::string> cand_lower;
      cand_lower.reserve(cand_tokens.size());
      for (const auto& t : cand_tokens) cand_lower.push_back(token_norm(t.text));

      const auto lits = extract_number_literals(raw.text);
      const bool numeric = lits.size() == 1 && normalize_answer(lits[0].canonical) ==
                                                   normalize_answer(raw.text);
      phi[kAnsIsNumber] = numeric ? 1.0 : 0.0;
      phi[kAnsIsRegex] = regex_flag[c] ? 1.0 : 0.0;
      if (numeric && subq_numbers.count(lits[0].canonical)) phi[kAnsNumInSubq] = 1.0;

      // Same-sentence lexical overlap with the pending sub-question, weighted
      // by inverse sentence frequency so rare tokens (entity names) dominate
      // tokens shared by every sentence.
      const auto occs = occurrences(*ctx, cand_lower);
      double best_overlap = 0.0;
      double idf_total = 0.0;
      for (const auto& w : subq_set) {
        const auto it = ctx->sentence_df.find(w);
        if (it != ctx->sentence_df.end()) idf_total += 1.0 / static_cast<double>(it->second);
      }
      for (const auto& [ob, oe] : occs) {
        if (idf_total <= 0.0) break;
        const int sent = ctx->sentence_of[ob];
        std::unordered_set<std::string> window;
        for (std::size_t t = 0; t < ctx->lower.size(); ++t) {
          if (ctx->sentence_of[t] != sent) continue;
          if (t >= ob && t < oe) continue;  // exclude the candidate itself
          window.insert(ctx->lower[t]);
        }
        double hit = 0.0;
        for (const auto& w : subq_set) {
          if (!window.count(w)) continue;
          const auto it = ctx->sentence_df.find(w);
          if (it != ctx->sentence_df.end()) hit += 1.0 / static_cast<double>(it->second);
        }
        best_overlap = std::max(best_overlap, hit / idf_total);
      }
      phi[kAnsSentenceOverlap] = best_overlap;

      std::vector<std::string> cand_content;
      for (const auto& t : cand_lower)
        if (!stopword_set().count(t)) cand_content.push_back(t);
      phi[kAnsCandInSubq] = overlap_fraction(cand_content, subq_set);
      phi[kAnsCandInQuestion] = overlap_fraction(cand_content, question_set);
      phi[kAnsNoContent] = cand_content.empty() ? 1.0 : 0.0;

      if (!occs.empty() && ctx->length > 0) {
        phi[kAnsPosition] = static_cast<double>(ctx->tokens[occs.front().first].begin) /
                            static_cast<double>(ctx->length);
      } else {
        phi[kAnsPosition] = 1.0;
      }
      phi[kAnsLength] =
          static_cast<double>(cand_tokens.size()) / static_cast<double>(std::max(1, cfg_.span_cap));
      phi[kAnsRepeatAnswer] = history_answers.count(normalize_answer(raw.text)) ? 1.0 : 0.0;

      table->texts.push_back(raw.text);
    }
    index_table(*table);
    return table;
  }

  std::shared_ptr<const CandidateTable> build_subq_table(const EncoderView& view) const {
    auto table = std::make_shared<CandidateTable>();
    std::vector<QdmrDecomposition> decomps;
    if (provider_) decomps = provider_(view.question, view.context);
    const std::size_t step_idx = view.history.size();  // 0-based index of the next step

    std::vector<std::string> pool;
    std::unordered_set<std::string> seen;
    for (const auto& d : decomps) {
      for (std::size_t j = 0; j < d.steps.size(); ++j) {
        std::string target =
            format_subq_target(d.steps[j].text, j + 1 == d.steps.size(), protocol_);
        if (seen.insert(target).second) pool.push_back(std::move(target));
      }
    }

    std::string next_primary;
    if (!decomps.empty() && step_idx < decomps[0].steps.size())
      next_primary = format_subq_target(decomps[0].steps[step_idx].text,
                                        step_idx + 1 == decomps[0].steps.size(), protocol_);
    std::unordered_set<std::string> next_any;
    for (const auto& d : decomps) {
      if (step_idx < d.steps.size())
        next_any.insert(format_subq_target(d.steps[step_idx].text,
                                           step_idx + 1 == d.steps.size(), protocol_));
    }
    const std::vector<std::string> question_content = content_tokens(view.question);
    const std::unordered_set<std::string> question_set(question_content.begin(),
                                                       question_content.end());
    std::unordered_set<std::string> history_subqs;
    for (const auto& [hq, ha] : view.history) history_subqs.insert(hq);

    table->texts.reserve(pool.size());
    table->features.assign(pool.size() * kFeatureCount, 0.0);
    for (std::size_t c = 0; c < pool.size(); ++c) {
      double* phi = &table->features[c * kFeatureCount];
      const auto [text, is_last] = parse_subq_target(pool[c], protocol_);
      phi[kSubqTemplateNext] = (!next_primary.empty() && pool[c] == next_primary) ? 1.0 : 0.0;
      phi[kSubqTemplateAny] = next_any.count(pool[c]) ? 1.0 : 0.0;
      bool resolvable = true;
      try {
        for (int k : qdmr_detail::collect_refs(text))
          if (static_cast<std::size_t>(k) > step_idx) resolvable = false;
      } catch (const MalformedRef&) {
        resolvable = false;
      }
      phi[kSubqRefsResolvable] = resolvable ? 1.0 : 0.0;
      phi[kSubqRepeat] = history_subqs.count(text) ? 1.0 : 0.0;
      phi[kSubqOverlapQuestion] = overlap_fraction(content_tokens(text), question_set);
      phi[kSubqEndMarker] = is_last ? 1.0 : 0.0;
      table->texts.push_back(pool[c]);
    }
    index_table(*table);
    return table;
  }

  static void index_table(CandidateTable& table) {
    for (std::size_t i = 0; i < table.texts.size(); ++i) {
      table.by_text.emplace(table.texts[i], static_cast<int>(i));
      table.by_norm.emplace(normalize_answer(table.texts[i]), static_cast<int>(i));
    }
  }

  static int lookup(const CandidateTable& table, const std::string& target) {
    auto it = table.by_text.find(target);
    if (it != table.by_text.end()) return it->second;
    auto nit = table.by_norm.find(normalize_answer(target));
    if (nit != table.by_norm.end()) return nit->second;
    throw UnrepresentableTarget("target not in candidate set: " + target);
  }

  std::vector<double> compute_logprobs(const CandidateTable& table) const {
    const std::size_t n = table.texts.size();
    std::vector<double> scores(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
      const double* phi = &table.features[c * kFeatureCount];
      double s = 0.0;
      for (int f = 0; f < kFeatureCount; ++f) s += theta_[static_cast<std::size_t>(f)] * phi[f];
      scores[c] = s / cfg_.temperature;
    }
    double max_score = -1e300;
    for (double s : scores) max_score = std::max(max_score, s);
    double sum = 0.0;
    for (double s : scores) sum += std::exp(s - max_score);
    const double lse = max_score + std::log(sum);
    for (double& s : scores) s -= lse;
    return scores;
  }

  static constexpr std::size_t kTableCacheCap = 1024;
  static constexpr std::size_t kContextCacheCap = 4096;

  PolicyConfig cfg_;
  DecompositionProvider provider_;
  TokenProtocol protocol_;
  std::vector<double> theta_;

  mutable std::mutex cache_mutex_;
  mutable std::unordered_map<std::string, std::shared_ptr<const CandidateTable>> table_cache_;
  mutable std::deque<std::string> table_order_;
  mutable std::unordered_map<std::string, std::shared_ptr<const ContextInfo>> context_cache_;
  mutable std::deque<std::string> context_order_;
};

inline void save_policy(const std::string& path, const ReferencePolicy& policy) {
  save_checkpoint(path, policy.to_checkpoint());
}

}  // namespace coq
