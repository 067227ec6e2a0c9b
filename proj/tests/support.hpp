#pragma once

// Test-side oracles and fixtures. Everything here is deliberately independent
// of the library's implementation paths: the brute-force enumerator checks the
// beam, the boost-rational evaluator checks the executor, the reference F1
// checks the reward, and central finite differences check every gradient.

#include <boost/multiprecision/cpp_int.hpp>
#include <cctype>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "coq/latent.hpp"
#include "coq/numexec.hpp"
#include "coq/policy.hpp"
#include "coq/qdmr.hpp"
#include "coq/rng.hpp"

namespace coqtest {

// ---------------------------------------------------------------------------
// Tabular policy: fixed per-step answer candidates with fixed log-scores, and
// a fixed score for whatever sub-question target is requested. The step is
// recovered from the number of completed history pairs in the encoder input.
class TabularPolicy : public coq::PolicyModel {
public:
  // answers[j] = candidates for step j (text, logprob), already distinct.
  std::vector<std::vector<coq::ScoredTarget>> answers;
  // q_scores[j] = log-probability assigned to the step-j sub-question factor.
  std::vector<double> q_scores;
  coq::TokenProtocol protocol;

  double score_target(const std::string& encoder_input,
                      const std::string& target) const override {
    const auto view = coq::parse_encoder_view(encoder_input, protocol);
    const std::size_t step = view.history.size();
    if (!view.pending_subq) return q_scores.at(step);
    for (const auto& cand : answers.at(step))
      if (cand.target == target) return cand.logprob;
    throw coq::UnrepresentableTarget("tabular: " + target);
  }

  std::vector<coq::ScoredTarget> top_candidates(const std::string& encoder_input,
                                                int budget) const override {
    const auto view = coq::parse_encoder_view(encoder_input, protocol);
    if (!view.pending_subq) return {};
    auto cands = answers.at(view.history.size());
    std::stable_sort(cands.begin(), cands.end(),
                     [](const auto& a, const auto& b) { return a.logprob > b.logprob; });
    if (cands.size() > static_cast<std::size_t>(budget))
      cands.resize(static_cast<std::size_t>(budget));
    return cands;
  }
};

// Exhaustive argmax over all sub-answer combinations, scoring factors one by
// one through the model interface. Ties break toward the lexicographically
// smaller answer sequence, matching the documented beam contract.
inline std::vector<std::string> brute_force_best(const coq::PolicyModel& model,
                                                 const std::string& question,
                                                 const std::string& context,
                                                 const std::vector<std::string>& q_subs,
                                                 const TabularPolicy& table,
                                                 const coq::TokenProtocol& protocol,
                                                 std::optional<std::string> forced_final = {}) {
  std::vector<std::string> best;
  double best_score = -1e300;
  std::vector<std::string> current;
  const std::function<void(std::size_t, double)> recurse = [&](std::size_t step, double score) {
    if (step == q_subs.size()) {
      if (score > best_score ||
          (score == best_score &&
           std::lexicographical_compare(current.begin(), current.end(), best.begin(),
                                        best.end()))) {
        best_score = score;
        best = current;
      }
      return;
    }
    const auto cond = coq::make_step_conditioning(question, context, q_subs, step, current,
                                                  protocol, true);
    const double q_lp = model.score_target(cond.q_input, cond.q_target);
    const bool last = step + 1 == q_subs.size();
    std::vector<std::string> options;
    if (last && forced_final) {
      options.push_back(*forced_final);
    } else {
      for (const auto& cand : table.answers.at(step)) options.push_back(cand.target);
    }
    for (const auto& option : options) {
      const double a_lp = model.score_target(cond.a_input, option);
      current.push_back(option);
      recurse(step + 1, score + q_lp + a_lp);
      current.pop_back();
    }
  };
  recurse(0, 0.0);
  return best;
}

// ---------------------------------------------------------------------------
// Independent token F1: istringstream tokenization, multiset intersection.
inline double reference_token_f1(const std::string& a, const std::string& b) {
  const auto norm_tokens = [](const std::string& s) {
    std::string kept;
    for (char c : s) {
      if (std::isalnum(static_cast<unsigned char>(c)))
        kept.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      else if (std::isspace(static_cast<unsigned char>(c)))
        kept.push_back(' ');
    }
    std::istringstream in(kept);
    std::vector<std::string> toks;
    std::string tok;
    while (in >> tok)
      if (tok != "a" && tok != "an" && tok != "the") toks.push_back(tok);
    return toks;
  };
  const auto ta = norm_tokens(a);
  const auto tb = norm_tokens(b);
  if (ta.empty() && tb.empty()) return 1.0;
  if (ta.empty() || tb.empty()) return 0.0;
  std::multiset<std::string> sa(ta.begin(), ta.end());
  std::multiset<std::string> sb(tb.begin(), tb.end());
  std::vector<std::string> common;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
  if (common.empty()) return 0.0;
  const double p = static_cast<double>(common.size()) / static_cast<double>(ta.size());
  const double r = static_cast<double>(common.size()) / static_cast<double>(tb.size());
  return 2.0 * p * r / (p + r);
}

// ---------------------------------------------------------------------------
// Independent exact program evaluator over boost rationals. Mirrors the
// executor's contract from the operator definitions alone.
using BigRational = boost::multiprecision::cpp_rational;

struct OracleOutcome {
  bool ok = false;
  std::string value;
};

inline BigRational big_from_decimal(const std::string& digits_int, const std::string& digits_frac,
                                    bool negative) {
  boost::multiprecision::cpp_int mantissa = 0;
  for (char c : digits_int + digits_frac) mantissa = mantissa * 10 + (c - '0');
  boost::multiprecision::cpp_int den = 1;
  for (std::size_t i = 0; i < digits_frac.size(); ++i) den *= 10;
  BigRational r(mantissa, den);
  return negative ? -r : r;
}

inline std::string big_to_canonical(const BigRational& r) {
  using boost::multiprecision::cpp_int;
  cpp_int num = boost::multiprecision::numerator(r);
  cpp_int den = boost::multiprecision::denominator(r);
  int twos = 0, fives = 0;
  cpp_int d = den;
  while (d % 2 == 0) {
    d /= 2;
    ++twos;
  }
  while (d % 5 == 0) {
    d /= 5;
    ++fives;
  }
  if (d != 1) return "<nonfinite>";
  const int digits = std::max(twos, fives);
  cpp_int scale = 1;
  for (int i = 0; i < digits; ++i) scale *= 10;
  cpp_int mantissa = num * (scale / den);
  const bool neg = mantissa < 0;
  if (neg) mantissa = -mantissa;
  std::string s = mantissa.str();
  while (s.size() <= static_cast<std::size_t>(digits)) s.insert(s.begin(), '0');
  std::string intpart = s.substr(0, s.size() - static_cast<std::size_t>(digits));
  std::string frac = s.substr(s.size() - static_cast<std::size_t>(digits));
  while (!frac.empty() && frac.back() == '0') frac.pop_back();
  std::string out = neg ? "-" : "";
  out += intpart;
  if (!frac.empty()) out += "." + frac;
  return out;
}

inline OracleOutcome oracle_execute(coq::NumericOp op, const std::vector<BigRational>& ops) {
  if (ops.empty()) return {};
  BigRational acc;
  switch (op) {
    case coq::NumericOp::Max: {
      acc = ops[0];
      for (const auto& v : ops) acc = std::max(acc, v);
      break;
    }
    case coq::NumericOp::Min: {
      acc = ops[0];
      for (const auto& v : ops) acc = std::min(acc, v);
      break;
    }
    case coq::NumericOp::Sum: {
      acc = 0;
      for (const auto& v : ops) acc += v;
      break;
    }
    case coq::NumericOp::Mul: {
      acc = 1;
      for (const auto& v : ops) acc *= v;
      break;
    }
    case coq::NumericOp::Diff: {
      if (ops.size() != 2) return {};
      acc = ops[0] - ops[1];
      break;
    }
    case coq::NumericOp::Div: {
      if (ops.size() != 2 || ops[1] == 0) return {};
      acc = ops[0] / ops[1];
      break;
    }
    case coq::NumericOp::Or: {
      if (ops.size() < 2) return {};
      std::string joined;
      for (const auto& v : ops) {
        const std::string s = big_to_canonical(v);
        if (s == "<nonfinite>") return {};
        if (!joined.empty()) joined += " or ";
        joined += s;
      }
      return {true, joined};
    }
  }
  const std::string s = big_to_canonical(acc);
  if (s == "<nonfinite>") return {};
  return {true, s};
}

// ---------------------------------------------------------------------------
// Central finite differences at step h over a parameter vector.
inline double gradient_check(std::vector<double>& params, const std::vector<double>& analytic,
                             const std::function<double()>& eval, double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double up = eval();
    params[i] = keep - h;
    const double down = eval();
    params[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - fd) /
                       std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace coqtest
