#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "coq/latent.hpp"
#include "coq/policy.hpp"
#include "coq/records.hpp"

namespace coq {

struct LengthMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LabelMisalignment : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A loss value with its gradient. The gradient covers the parameter block of
// whatever produced it: the policy's theta for the chain losses, the
// auxiliary heads' parameters for auxiliary_losses.
struct LossValue {
  double value = 0.0;
  std::vector<double> grad;

  LossValue() = default;
  explicit LossValue(std::size_t dim) : grad(dim, 0.0) {}

  void add_scaled(const LossValue& other, double w) {
    value += w * other.value;
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += w * other.grad[i];
  }
};

namespace objective_detail {

struct ScoredGrad {
  double logprob;
  std::vector<double> grad;
};

inline ScoredGrad score_with_grad(const TrainablePolicy& model, const std::string& input,
                                  const std::string& target) {
  return {model.score_target(input, target), model.grad_logprob(input, target)};
}

}  // namespace objective_detail

// Supervised sub-question loss: sum over steps of the negative log-likelihood
// of the gold next sub-question given the question, context and the supplied
// conditioning sub-answers. The gold sub-question is the target regardless of
// whether those sub-answers are correct.
inline LossValue supervised_loss(const TrainablePolicy& model, const std::string& question,
                                 const std::string& context,
                                 const std::vector<std::string>& q_subs,
                                 const std::vector<std::string>& sub_answers,
                                 const TokenProtocol& protocol) {
  const std::size_t n = q_subs.size();
  if (sub_answers.size() + 1 < n)
    throw LengthMismatch("supervised_loss: need at least n-1 conditioning sub-answers");
  LossValue out(model.params().size());
  for (std::size_t j = 0; j < n; ++j) {
    const auto cond =
        make_step_conditioning(question, context, q_subs, j, sub_answers, protocol, false);
    const auto sg = objective_detail::score_with_grad(model, cond.q_input, cond.q_target);
    out.value -= sg.logprob;
    for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] -= sg.grad[i];
  }
  return out;
}

// Negative log-likelihood of a trajectory's answer factors under the current
// parameters.
inline LossValue answer_nll(const TrainablePolicy& model, const std::string& question,
                            const std::string& context, const std::vector<std::string>& q_subs,
                            const std::vector<std::string>& sub_answers,
                            const TokenProtocol& protocol, bool use_regex) {
  if (sub_answers.size() != q_subs.size())
    throw LengthMismatch("answer_nll: |sub_answers| must equal |q_subs|");
  LossValue out(model.params().size());
  std::vector<std::string> prefix;
  for (std::size_t j = 0; j < q_subs.size(); ++j) {
    const auto cond =
        make_step_conditioning(question, context, q_subs, j, prefix, protocol, use_regex);
    const auto sg = objective_detail::score_with_grad(model, cond.a_input, sub_answers[j]);
    out.value -= sg.logprob;
    for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] -= sg.grad[i];
    prefix.push_back(sub_answers[j]);
  }
  return out;
}

// Hard-EM loss for the selected trajectory: the answer-factor NLL plus the
// supervised sub-question loss conditioned on the selected sub-answers.
// Numerically equal to -trajectory_loglik(selected).
inline LossValue hard_em_loss(const TrainablePolicy& model, const std::string& question,
                              const std::string& context,
                              const std::vector<std::string>& q_subs, const Trajectory& selected,
                              const TokenProtocol& protocol, bool use_regex = true) {
  LossValue out =
      answer_nll(model, question, context, q_subs, selected.sub_answers, protocol, use_regex);
  const LossValue sup =
      supervised_loss(model, question, context, q_subs, selected.sub_answers, protocol);
  out.add_scaled(sup, 1.0);
  return out;
}

// MAPO loss over a stratified training sample: reward-weighted answer-factor
// NLLs with weights r_B/m in memory and (1-r_B)/m out of memory, plus the
// averaged supervised loss conditioned on each sampled trajectory.
inline LossValue mapo_loss(const TrainablePolicy& model, const std::string& question,
                           const std::string& context, const std::vector<std::string>& q_subs,
                           const TrainingSample& sample, const TokenProtocol& protocol,
                           bool use_regex = true) {
  if (sample.m == 0) throw DegenerateSample();
  LossValue out(model.params().size());
  const double m = static_cast<double>(sample.m);
  for (const auto& t : sample.in_memory) {
    if (t.reward != 0.0) {
      const LossValue nll =
          answer_nll(model, question, context, q_subs, t.sub_answers, protocol, use_regex);
      out.add_scaled(nll, (sample.r_b / m) * t.reward);
    }
    out.add_scaled(supervised_loss(model, question, context, q_subs, t.sub_answers, protocol),
                   1.0 / m);
  }
  for (const auto& t : sample.out_of_memory) {
    if (t.reward != 0.0) {
      const LossValue nll =
          answer_nll(model, question, context, q_subs, t.sub_answers, protocol, use_regex);
      out.add_scaled(nll, ((1.0 - sample.r_b) / m) * t.reward);
    }
    out.add_scaled(supervised_loss(model, question, context, q_subs, t.sub_answers, protocol),
                   1.0 / m);
  }
  return out;
}

// lambda: the fraction of the given examples owning at least one buffered
// trajectory.
inline double compute_lambda(const ReplayBuffer& buffer, const std::vector<std::string>& ids) {
  if (ids.empty()) throw std::invalid_argument("compute_lambda: empty id list");
  std::size_t hit = 0;
  for (const auto& id : ids)
    if (buffer.has_trajectories(id)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(ids.size());
}

// Dynamic mixture  l = lambda * mapo + (1 - lambda) * hard.  The endpoints
// are exact: lambda 0 returns hard unchanged, lambda 1 returns mapo
// unchanged, bit for bit.
inline double mixture_loss(double hard, double mapo, double lambda) {
  if (lambda == 0.0) return hard;
  if (lambda == 1.0) return mapo;
  return lambda * mapo + (1.0 - lambda) * hard;
}

inline LossValue mixture_loss(const LossValue& hard, const LossValue& mapo, double lambda) {
  if (lambda == 0.0) return hard;
  if (lambda == 1.0) return mapo;
  LossValue out(hard.grad.size());
  out.add_scaled(mapo, lambda);
  out.add_scaled(hard, 1.0 - lambda);
  return out;
}

// ---------------------------------------------------------------------------
// Auxiliary supporting-fact and span-prediction heads. Both consume the same
// hand-coded feature encodings the reference policy family uses; their
// parameters are separate from the policy scorer's.

struct RunContext {
  std::string subq_inlined;                 // current sub-question, references resolved
  std::vector<std::string> history_answers; // sub-answers produced before this run
};

class AuxHeads {
public:
  static constexpr int kSentFeat = 6;
  static constexpr int kHidden = 4;
  static constexpr int kTokFeat = 5;
  // [W1 (kHidden x kSentFeat), b1, w2, b2, w_begin, b_begin, w_end, b_end]
  static constexpr int kParamCount =
      kHidden * kSentFeat + kHidden + kHidden + 1 + kTokFeat + 1 + kTokFeat + 1;

  AuxHeads() : params_(kParamCount, 0.0) {
    // Fixed small asymmetric init so the two-layer head is trainable.
    for (int i = 0; i < kParamCount; ++i)
      params_[static_cast<std::size_t>(i)] = 0.05 * static_cast<double>((i % 7) - 3);
  }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  static const std::vector<std::string>& param_block_names() {
    static const std::vector<std::string> kNames = {"sf.w1", "sf.b1", "sf.w2", "sf.b2",
                                                    "sp.w_begin", "sp.b_begin",
                                                    "sp.w_end", "sp.b_end"};
    return kNames;
  }

private:
  std::vector<double> params_;
};

namespace objective_detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Numerically stable binary cross-entropy of a logit against label y.
inline double bce(double logit, double y) {
  const double abs_logit = logit < 0 ? -logit : logit;
  return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-abs_logit));
}

inline std::vector<double> sentence_features(const Sentence& sentence, std::size_t index,
                                             std::size_t total,
                                             const std::unordered_set<std::string>& question_set,
                                             const std::unordered_set<std::string>& subq_set,
                                             const std::unordered_set<std::string>& answer_set) {
  std::vector<double> psi(AuxHeads::kSentFeat, 0.0);
  const auto content = content_tokens(sentence.text);
  std::unordered_set<std::string> distinct(content.begin(), content.end());
  if (!distinct.empty()) {
    std::size_t q_hits = 0, s_hits = 0, a_hits = 0;
    for (const auto& t : distinct) {
      if (question_set.count(t)) ++q_hits;
      if (subq_set.count(t)) ++s_hits;
      if (answer_set.count(t)) ++a_hits;
    }
    psi[0] = static_cast<double>(q_hits) / static_cast<double>(distinct.size());
    psi[1] = static_cast<double>(s_hits) / static_cast<double>(distinct.size());
    psi[5] = static_cast<double>(a_hits) / static_cast<double>(distinct.size());
  }
  psi[2] = total > 0 ? static_cast<double>(index) / static_cast<double>(total) : 0.0;
  psi[3] = std::min(1.0, static_cast<double>(tokenize(sentence.text).size()) / 20.0);
  psi[4] = extract_number_literals(sentence.text).empty() ? 0.0 : 1.0;
  return psi;
}

inline std::vector<double> token_features(const std::string& norm, std::size_t index,
                                          std::size_t total,
                                          const std::unordered_set<std::string>& question_set,
                                          const std::unordered_set<std::string>& subq_set,
                                          const std::unordered_set<std::string>& answer_set) {
  std::vector<double> psi(AuxHeads::kTokFeat, 0.0);
  psi[0] = question_set.count(norm) ? 1.0 : 0.0;
  bool numeric = !norm.empty();
  for (char c : norm)
    if (!is_ascii_digit(c)) numeric = false;
  psi[1] = numeric ? 1.0 : 0.0;
  psi[2] = total > 0 ? static_cast<double>(index) / static_cast<double>(total) : 0.0;
  psi[3] = subq_set.count(norm) ? 1.0 : 0.0;
  psi[4] = answer_set.count(norm) ? 1.0 : 0.0;
  return psi;
}

}  // namespace objective_detail

// Supporting-fact and span-prediction cross-entropies, summed over every run
// of the model (one run per chain step). Returns zero when the example
// carries no auxiliary labels; throws LabelMisalignment when label arrays do
// not match the context segmentation.
inline LossValue auxiliary_losses(const AuxHeads& heads, const ExampleRecord& record,
                                  const std::vector<RunContext>& runs) {
  LossValue out(AuxHeads::kParamCount);
  if (!record.aux || record.aux->empty()) return out;
  const AuxTargets& targets = *record.aux;

  const auto sentences = split_sentences(record.context);
  const auto tokens = tokenize(record.context);
  if (!targets.sf_labels.empty() && targets.sf_labels.size() != sentences.size())
    throw LabelMisalignment("sf_labels: " + std::to_string(targets.sf_labels.size()) +
                            " labels for " + std::to_string(sentences.size()) + " sentences");
  const bool has_span = !targets.span_begin.empty() || !targets.span_end.empty();
  if (has_span &&
      (targets.span_begin.size() != tokens.size() || targets.span_end.size() != tokens.size()))
    throw LabelMisalignment("span_labels do not align with the context tokens");

  const auto question_content = content_tokens(record.question);
  const std::unordered_set<std::string> question_set(question_content.begin(),
                                                     question_content.end());

  const auto& p = heads.params();
  const double* w1 = p.data();
  const double* b1 = w1 + AuxHeads::kHidden * AuxHeads::kSentFeat;
  const double* w2 = b1 + AuxHeads::kHidden;
  const double* b2 = w2 + AuxHeads::kHidden;
  const double* wb = b2 + 1;
  const double* bb = wb + AuxHeads::kTokFeat;
  const double* we = bb + 1;
  const double* be = we + AuxHeads::kTokFeat;
  double* g = out.grad.data();
  double* g_w1 = g;
  double* g_b1 = g_w1 + AuxHeads::kHidden * AuxHeads::kSentFeat;
  double* g_w2 = g_b1 + AuxHeads::kHidden;
  double* g_b2 = g_w2 + AuxHeads::kHidden;
  double* g_wb = g_b2 + 1;
  double* g_bb = g_wb + AuxHeads::kTokFeat;
  double* g_we = g_bb + 1;
  double* g_be = g_we + AuxHeads::kTokFeat;

  for (const auto& run : runs) {
    const auto subq_content = content_tokens(run.subq_inlined);
    const std::unordered_set<std::string> subq_set(subq_content.begin(), subq_content.end());
    std::unordered_set<std::string> answer_set;
    for (const auto& a : run.history_answers)
      for (const auto& t : content_tokens(a)) answer_set.insert(t);

    if (!targets.sf_labels.empty()) {
      for (std::size_t s = 0; s < sentences.size(); ++s) {
        const auto psi = objective_detail::sentence_features(sentences[s], s, sentences.size(),
                                                             question_set, subq_set, answer_set);
        double h[AuxHeads::kHidden];
        double logit = b2[0];
        for (int i = 0; i < AuxHeads::kHidden; ++i) {
          double z = b1[i];
          for (int f = 0; f < AuxHeads::kSentFeat; ++f)
            z += w1[i * AuxHeads::kSentFeat + f] * psi[static_cast<std::size_t>(f)];
          h[i] = std::tanh(z);
          logit += w2[i] * h[i];
        }
        const double y = targets.sf_labels[s] ? 1.0 : 0.0;
        out.value += objective_detail::bce(logit, y);
        const double dlogit = objective_detail::sigmoid(logit) - y;
        g_b2[0] += dlogit;
        for (int i = 0; i < AuxHeads::kHidden; ++i) {
          g_w2[i] += dlogit * h[i];
          const double dz = dlogit * w2[i] * (1.0 - h[i] * h[i]);
          g_b1[i] += dz;
          for (int f = 0; f < AuxHeads::kSentFeat; ++f)
            g_w1[i * AuxHeads::kSentFeat + f] += dz * psi[static_cast<std::size_t>(f)];
        }
      }
    }

    if (has_span) {
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto psi = objective_detail::token_features(token_norm(tokens[t].text), t,
                                                          tokens.size(), question_set, subq_set,
                                                          answer_set);
        double logit_b = bb[0], logit_e = be[0];
        for (int f = 0; f < AuxHeads::kTokFeat; ++f) {
          logit_b += wb[f] * psi[static_cast<std::size_t>(f)];
          logit_e += we[f] * psi[static_cast<std::size_t>(f)];
        }
        const double yb = targets.span_begin[t] ? 1.0 : 0.0;
        const double ye = targets.span_end[t] ? 1.0 : 0.0;
        out.value += objective_detail::bce(logit_b, yb) + objective_detail::bce(logit_e, ye);
        const double db = objective_detail::sigmoid(logit_b) - yb;
        const double de = objective_detail::sigmoid(logit_e) - ye;
        g_bb[0] += db;
        g_be[0] += de;
        for (int f = 0; f < AuxHeads::kTokFeat; ++f) {
          g_wb[f] += db * psi[static_cast<std::size_t>(f)];
          g_we[f] += de * psi[static_cast<std::size_t>(f)];
        }
      }
    }
  }
  return out;
}

}  // namespace coq
