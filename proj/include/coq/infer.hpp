#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "coq/latent.hpp"
#include "coq/numexec.hpp"
#include "coq/policy.hpp"
#include "coq/qdmr.hpp"
#include "coq/records.hpp"

namespace coq {

struct InferOptions {
  int max_steps = 8;
  bool use_regex = true;
  std::size_t max_input_len = 0;  // 0: unlimited
};

struct ChainStep {
  std::string sub_q;          // as generated (placeholder form)
  std::string sub_q_inlined;  // references substituted
  std::string sub_a;
  bool is_last = false;
  bool regex_fired = false;
  std::string regex_value;
};

struct ChainTranscript {
  std::string example_id;
  std::vector<ChainStep> steps;
  std::string answer;
  bool ended_with_token = false;
  bool flagged = false;  // fell back to direct answering after a malformed decode

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["id"] = example_id;
    j["answer"] = answer;
    j["ended_with_token"] = ended_with_token;
    j["flagged"] = flagged;
    j["steps"] = nlohmann::json::array();
    for (const auto& s : steps) {
      nlohmann::json js;
      js["sub_q"] = s.sub_q;
      js["sub_q_inlined"] = s.sub_q_inlined;
      js["sub_a"] = s.sub_a;
      js["is_last"] = s.is_last;
      js["regex_fired"] = s.regex_fired;
      if (s.regex_fired) js["regex_value"] = s.regex_value;
      j["steps"].push_back(js);
    }
    return j;
  }
};

namespace infer_detail {

// Direct single-shot answering, used when chain decoding breaks down: the
// question itself plays the final sub-question.
inline std::string direct_answer(const PolicyModel& model, const ExampleRecord& record,
                                 const TokenProtocol& protocol, const InferOptions& opts,
                                 const PromptState& state) {
  const std::string encoder = render_encoder_input(state, protocol, opts.max_input_len);
  std::optional<std::string> regex_value;
  if (opts.use_regex) {
    const auto outcome = try_regex_pipeline(record.question);
    if (outcome.ok()) regex_value = outcome.value;
  }
  const std::string a_input =
      render_step_conditioning(encoder, record.question, true, regex_value, protocol);
  const auto top = model.top_candidates(a_input, 1);
  return top.empty() ? std::string{} : top.front().target;
}

}  // namespace infer_detail

// Iterative chain decoding: render the encoder input, greedily decode one
// sub-question, run the regex pipeline when the end token was emitted,
// greedily decode the sub-answer under the (possibly regex-prefixed)
// conditioning, and append the pair to the history. Stops at the end token or
// after max_steps; the final sub-answer is the reported answer. A malformed
// decode falls back to the best-scoring direct answer and flags the
// transcript.
inline ChainTranscript infer_chain(const PolicyModel& model, const ExampleRecord& record,
                                   const TokenProtocol& protocol, const InferOptions& opts = {}) {
  ChainTranscript transcript;
  transcript.example_id = record.id;
  PromptState state;
  state.question = record.question;
  state.context = record.context;
  std::vector<std::string> answers;

  for (int step = 0; step < opts.max_steps; ++step) {
    const std::string q_input = render_encoder_input(state, protocol, opts.max_input_len);
    ChainStep chain_step;
    try {
      const auto q_top = model.top_candidates(q_input, 1);
      if (q_top.empty()) throw ProtocolViolation("no sub-question candidates");
      const auto [sub_q, is_last] = parse_subq_target(q_top.front().target, protocol);
      chain_step.sub_q = sub_q;
      chain_step.is_last = is_last;
      chain_step.sub_q_inlined = substitute_refs_text(sub_q, answers);
      std::optional<std::string> regex_value;
      if (is_last && opts.use_regex) {
        const auto outcome = try_regex_pipeline(chain_step.sub_q_inlined);
        if (outcome.ok()) {
          chain_step.regex_fired = true;
          chain_step.regex_value = outcome.value;
          regex_value = outcome.value;
        }
      }
      const std::string a_input = render_step_conditioning(q_input, chain_step.sub_q_inlined,
                                                           is_last, regex_value, protocol);
      const auto a_top = model.top_candidates(a_input, 1);
      if (a_top.empty()) throw ProtocolViolation("no sub-answer candidates");
      chain_step.sub_a = a_top.front().target;
    } catch (const QdmrError&) {
      transcript.flagged = true;
      transcript.answer = infer_detail::direct_answer(model, record, protocol, opts, state);
      return transcript;
    }
    state.history.emplace_back(chain_step.sub_q, chain_step.sub_a);
    answers.push_back(chain_step.sub_a);
    transcript.steps.push_back(chain_step);
    if (chain_step.is_last) {
      transcript.ended_with_token = true;
      break;
    }
  }
  if (transcript.steps.empty()) {
    transcript.flagged = true;
    transcript.answer = infer_detail::direct_answer(model, record, protocol, opts, state);
    return transcript;
  }
  transcript.answer = transcript.steps.back().sub_a;
  return transcript;
}

struct EvalReport {
  double exact_match = 0.0;
  double f1 = 0.0;
  double mean_chain_length = 0.0;
  double end_token_rate = 0.0;
  double regex_fire_rate = 0.0;
  std::size_t count = 0;

  nlohmann::json to_json() const {
    return {{"exact_match", exact_match},
            {"f1", f1},
            {"mean_chain_length", mean_chain_length},
            {"end_token_rate", end_token_rate},
            {"regex_fire_rate", regex_fire_rate},
            {"count", count}};
  }
};

// EM and mean token F1 over the records, using the same normalization as the
// training reward, plus chain diagnostics.
inline EvalReport evaluate(const PolicyModel& model, const std::vector<ExampleRecord>& records,
                           const TokenProtocol& protocol, const InferOptions& opts = {}) {
  if (records.empty()) throw EmptyDataset("evaluate: no records");
  EvalReport report;
  report.count = records.size();
  for (const auto& rec : records) {
    const ChainTranscript t = infer_chain(model, rec, protocol, opts);
    if (normalize_answer(t.answer) == normalize_answer(rec.answer)) report.exact_match += 1.0;
    report.f1 += f1_reward(t.answer, rec.answer);
    report.mean_chain_length += static_cast<double>(t.steps.size());
    if (t.ended_with_token) report.end_token_rate += 1.0;
    bool fired = false;
    for (const auto& s : t.steps) fired = fired || s.regex_fired;
    if (fired) report.regex_fire_rate += 1.0;
  }
  const double inv = 1.0 / static_cast<double>(records.size());
  report.exact_match *= inv;
  report.f1 *= inv;
  report.mean_chain_length *= inv;
  report.end_token_rate *= inv;
  report.regex_fire_rate *= inv;
  return report;
}

}  // namespace coq
