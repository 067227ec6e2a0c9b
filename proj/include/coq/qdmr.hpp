#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "coq/text.hpp"

namespace coq {

struct QdmrError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyDecomposition : QdmrError {
  EmptyDecomposition() : QdmrError("decomposition has no steps") {}
};
struct ForwardReference : QdmrError {
  using QdmrError::QdmrError;
};
struct MalformedRef : QdmrError {
  using QdmrError::QdmrError;
};
struct MissingAnswer : QdmrError {
  using QdmrError::QdmrError;
};
struct RegexOnNonFinalStep : QdmrError {
  RegexOnNonFinalStep() : QdmrError("regex result supplied on a non-final step") {}
};
struct ProtocolViolation : QdmrError {
  using QdmrError::QdmrError;
};

// Special tokens of the step-wise prompt protocol. Exact byte strings; they
// never appear inside rendered payload text (escape_payload guarantees it).
struct TokenProtocol {
  std::string qdmr_token = "[QDMR]";
  std::string answer_token = "[QDMR-ANS]";
  std::string end_token = "[END-QDMR]";
  std::string regex_token = "[REGEX]";

  bool valid() const {
    return qdmr_token != answer_token && qdmr_token != end_token &&
           qdmr_token != regex_token && answer_token != end_token &&
           answer_token != regex_token && end_token != regex_token;
  }
};

// One sub-question. `refs` lists the "#k" back-references in order of
// appearance; each k satisfies 1 <= k < index.
struct DecompositionStep {
  int index = 0;  // 1-based
  std::string text;
  std::vector<int> refs;
};

struct QdmrDecomposition {
  std::vector<DecompositionStep> steps;
  int n() const { return static_cast<int>(steps.size()); }
};

// Encoder-side prompt state: the question, the context, and the completed
// (sub-question, sub-answer) pairs so far.
struct PromptState {
  std::string question;
  std::string context;
  std::vector<std::pair<std::string, std::string>> history;
};

namespace protocol_detail {

inline constexpr std::string_view kZeroWidth = "\xE2\x80\x8B";  // U+200B

inline std::vector<std::string> token_names(const TokenProtocol& p) {
  std::vector<std::string> names;
  for (const std::string* t : {&p.qdmr_token, &p.answer_token, &p.end_token, &p.regex_token}) {
    if (t->size() >= 2 && t->front() == '[' && t->back() == ']')
      names.push_back(t->substr(1, t->size() - 2));
  }
  return names;
}

// Returns the end offset of "[" ZWSP{zw} NAME "]" starting at `i`, or npos.
inline std::size_t match_bracket_form(std::string_view s, std::size_t i,
                                      const std::vector<std::string>& names,
                                      std::size_t& zw_count) {
  if (s[i] != '[') return std::string::npos;
  std::size_t j = i + 1;
  zw_count = 0;
  while (s.substr(j, kZeroWidth.size()) == kZeroWidth) {
    j += kZeroWidth.size();
    ++zw_count;
  }
  for (const auto& name : names) {
    if (j + name.size() < s.size() && s.substr(j, name.size()) == name &&
        s[j + name.size()] == ']') {
      return j + name.size() + 1;
    }
  }
  return std::string::npos;
}

}  // namespace protocol_detail

// Escapes payload text so protocol tokens cannot appear verbatim: every
// "[NAME]"-shaped occurrence (possibly already escaped) gains one zero-width
// marker after the bracket. unescape_payload removes exactly one marker, so
// the two are inverse for every payload.
inline std::string escape_payload(std::string_view s, const TokenProtocol& p) {
  const auto names = protocol_detail::token_names(p);
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t zw = 0;
    std::size_t end = protocol_detail::match_bracket_form(s, i, names, zw);
    if (end != std::string::npos) {
      out.push_back('[');
      out.append(protocol_detail::kZeroWidth);
      out.append(s.substr(i + 1, end - i - 1));
      i = end;
    } else {
      out.push_back(s[i]);
      ++i;
    }
  }
  return out;
}

inline std::string unescape_payload(std::string_view s, const TokenProtocol& p) {
  const auto names = protocol_detail::token_names(p);
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t zw = 0;
    std::size_t end = protocol_detail::match_bracket_form(s, i, names, zw);
    if (end != std::string::npos && zw > 0) {
      out.push_back('[');
      out.append(s.substr(i + 1 + protocol_detail::kZeroWidth.size(),
                          end - i - 1 - protocol_detail::kZeroWidth.size()));
      i = end;
    } else {
      out.push_back(s[i]);
      ++i;
    }
  }
  return out;
}

namespace qdmr_detail {

// Collects "#k" references in order of appearance. Throws MalformedRef on a
// '#' not followed by a positive ordinal.
inline std::vector<int> collect_refs(std::string_view text) {
  std::vector<int> refs;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '#') continue;
    std::size_t j = i + 1;
    while (j < text.size() && is_ascii_digit(text[j])) ++j;
    if (j == i + 1) throw MalformedRef("non-numeric reference at '#" +
                                       std::string(text.substr(i + 1, 8)) + "'");
    int k = 0;
    for (std::size_t t = i + 1; t < j; ++t) k = k * 10 + (text[t] - '0');
    if (k == 0) throw MalformedRef("reference ordinal must be >= 1");
    refs.push_back(k);
    i = j - 1;
  }
  return refs;
}

}  // namespace qdmr_detail

inline DecompositionStep make_step(int index, std::string_view raw_text) {
  DecompositionStep step;
  step.index = index;
  std::string text = trim(raw_text);
  if (!starts_with(text, "return ") && text != "return") text = "return " + text;
  step.text = std::move(text);
  step.refs = qdmr_detail::collect_refs(step.text);
  for (int k : step.refs) {
    if (k >= index)
      throw ForwardReference("step " + std::to_string(index) + " references #" +
                             std::to_string(k));
  }
  return step;
}

// Parses the canonical serialization: steps separated by ';' (newlines also
// accepted), each optionally prefixed "return ".
inline QdmrDecomposition parse_qdmr_text(std::string_view raw) {
  QdmrDecomposition d;
  std::vector<std::string> pieces;
  std::string cur;
  for (char c : raw) {
    if (c == ';' || c == '\n') {
      pieces.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  pieces.push_back(cur);
  int index = 1;
  for (auto& piece : pieces) {
    std::string body = trim(piece);
    if (body.empty()) continue;
    d.steps.push_back(make_step(index, body));
    ++index;
  }
  if (d.steps.empty()) throw EmptyDecomposition();
  return d;
}

inline std::string to_qdmr_text(const QdmrDecomposition& d) {
  std::string out;
  for (const auto& step : d.steps) {
    if (!out.empty()) out += "; ";
    out += step.text;
  }
  return out;
}

// Replaces each "#k" in `text` with answers[k-1]. Throws MissingAnswer when a
// reference points past the available answers.
inline std::string substitute_refs_text(std::string_view text,
                                        const std::vector<std::string>& answers) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '#') {
      out.push_back(text[i]);
      continue;
    }
    std::size_t j = i + 1;
    while (j < text.size() && is_ascii_digit(text[j])) ++j;
    if (j == i + 1) throw MalformedRef("non-numeric reference in substitution");
    int k = 0;
    for (std::size_t t = i + 1; t < j; ++t) k = k * 10 + (text[t] - '0');
    if (k == 0) throw MalformedRef("reference ordinal must be >= 1");
    if (static_cast<std::size_t>(k) > answers.size())
      throw MissingAnswer("reference #" + std::to_string(k) + " beyond " +
                          std::to_string(answers.size()) + " answers");
    out += answers[static_cast<std::size_t>(k) - 1];
    i = j - 1;
  }
  return out;
}

inline std::string substitute_references(const DecompositionStep& step,
                                         const std::vector<std::string>& answers) {
  return substitute_refs_text(step.text, answers);
}

// Deterministic encoder layout: "question: {q} context: {c}" followed by one
// " [QDMR] {sub_q} [QDMR-ANS] {sub_a}" block per completed pair. When
// max_len > 0 and the rendered string would exceed it, the context is
// tail-truncated; the question and the history are never dropped.
inline std::string render_encoder_input(const PromptState& state, const TokenProtocol& p,
                                        std::size_t max_len = 0) {
  const std::string q = escape_payload(state.question, p);
  std::string c = escape_payload(state.context, p);
  std::string suffix;
  for (const auto& [sub_q, sub_a] : state.history) {
    suffix += " " + p.qdmr_token + " " + escape_payload(sub_q, p) + " " + p.answer_token +
              " " + escape_payload(sub_a, p);
  }
  const std::string head = "question: " + q + " context: ";
  if (max_len > 0) {
    const std::size_t overhead = head.size() + suffix.size();
    if (overhead + c.size() > max_len) {
      std::size_t keep = max_len > overhead ? max_len - overhead : 0;
      while (keep > 0 && (static_cast<unsigned char>(c[keep]) & 0xC0) == 0x80) --keep;
      c.resize(keep);
    }
  }
  return head + c + suffix;
}

// Decoder target for one step:
//   non-last:            "[QDMR] q [QDMR-ANS] a"
//   last, no regex:      "[QDMR] q [END-QDMR] [QDMR-ANS] a"
//   last, regex result r: "[QDMR] q [END-QDMR] [REGEX] r [QDMR-ANS] a"
inline std::string render_decoder_target(std::string_view sub_q, std::string_view sub_a,
                                         bool is_last,
                                         const std::optional<std::string>& regex_result,
                                         const TokenProtocol& p) {
  if (regex_result && !is_last) throw RegexOnNonFinalStep();
  std::string out = p.qdmr_token + " " + escape_payload(sub_q, p);
  if (is_last) out += " " + p.end_token;
  if (regex_result) out += " " + p.regex_token + " " + escape_payload(*regex_result, p);
  out += " " + p.answer_token + " " + escape_payload(sub_a, p);
  return out;
}

struct DecodedStep {
  std::string sub_q;
  std::string sub_a;
  bool is_last = false;
};

namespace qdmr_detail {

inline std::size_t count_occurrences(std::string_view s, std::string_view needle) {
  std::size_t count = 0, pos = 0;
  while ((pos = s.find(needle, pos)) != std::string_view::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

}  // namespace qdmr_detail

namespace qdmr_detail {

// Strips the single separator space the renderer added on either side; exact
// so payloads with their own leading/trailing whitespace survive the round
// trip.
inline std::string_view strip_left_sep(std::string_view s) {
  if (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}
inline std::string_view strip_right_sep(std::string_view s) {
  if (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  return s;
}

}  // namespace qdmr_detail

// Splits a decoded "[QDMR] ... [QDMR-ANS] ..." unit. is_last iff the end
// token sits between the two; any "[REGEX] ..." segment is stripped from the
// sub-question side.
inline DecodedStep detect_end(std::string_view decoded, const TokenProtocol& p) {
  if (qdmr_detail::count_occurrences(decoded, p.qdmr_token) != 1 ||
      qdmr_detail::count_occurrences(decoded, p.answer_token) != 1)
    throw ProtocolViolation("expected exactly one " + p.qdmr_token + " and one " +
                            p.answer_token);
  const std::size_t q_pos = decoded.find(p.qdmr_token);
  const std::size_t a_pos = decoded.find(p.answer_token);
  if (a_pos < q_pos) throw ProtocolViolation("answer token precedes question token");
  std::string_view between =
      decoded.substr(q_pos + p.qdmr_token.size(), a_pos - q_pos - p.qdmr_token.size());
  DecodedStep out;
  out.sub_a = unescape_payload(
      qdmr_detail::strip_left_sep(decoded.substr(a_pos + p.answer_token.size())), p);
  const std::size_t end_pos = between.find(p.end_token);
  if (end_pos != std::string_view::npos) {
    out.is_last = true;
    std::string_view tail = between.substr(end_pos + p.end_token.size());
    between = qdmr_detail::strip_right_sep(between.substr(0, end_pos));
    if (!tail.empty()) {
      const std::string regex_marker = " " + p.regex_token + " ";
      if (tail.substr(0, regex_marker.size()) != regex_marker && !trim(tail).empty())
        throw ProtocolViolation("unexpected text after end token");
    }
  } else {
    if (between.find(p.regex_token) != std::string_view::npos)
      throw ProtocolViolation("regex token without end token");
    between = qdmr_detail::strip_right_sep(between);
  }
  out.sub_q = unescape_payload(qdmr_detail::strip_left_sep(between), p);
  return out;
}

// Sub-question target string: the payload plus, on the final step, the end
// token. This is the exact string the policy scores in question mode.
inline std::string format_subq_target(std::string_view text, bool is_last,
                                      const TokenProtocol& p) {
  std::string out = escape_payload(text, p);
  if (is_last) out += " " + p.end_token;
  return out;
}

inline std::pair<std::string, bool> parse_subq_target(std::string_view target,
                                                      const TokenProtocol& p) {
  const std::string marker = " " + p.end_token;
  if (target.size() >= marker.size() &&
      target.substr(target.size() - marker.size()) == marker) {
    return {unescape_payload(trim(target.substr(0, target.size() - marker.size())), p), true};
  }
  return {unescape_payload(std::string(target), p), false};
}

// Conditioning prefix for scoring the sub-answer of the current step: the
// encoder input so far plus the pending (reference-substituted) sub-question,
// the end token when final, and the regex execution result when it fired.
inline std::string render_step_conditioning(std::string_view encoder_input,
                                            std::string_view subq_inlined, bool is_last,
                                            const std::optional<std::string>& regex_value,
                                            const TokenProtocol& p) {
  if (regex_value && !is_last) throw RegexOnNonFinalStep();
  std::string out(encoder_input);
  out += " " + p.qdmr_token + " " + escape_payload(subq_inlined, p);
  if (is_last) out += " " + p.end_token;
  if (regex_value) out += " " + p.regex_token + " " + escape_payload(*regex_value, p);
  return out;
}

// Parsed view of an encoder input, as produced by render_encoder_input plus
// an optional render_step_conditioning tail. The reference policy derives its
// candidate space from this.
struct EncoderView {
  std::string question;
  std::string context;
  std::vector<std::pair<std::string, std::string>> history;
  std::optional<std::string> pending_subq;  // set in answer-scoring mode
  bool pending_is_last = false;
  std::optional<std::string> pending_regex_value;
};

inline EncoderView parse_encoder_view(std::string_view input, const TokenProtocol& p) {
  EncoderView v;
  const std::string_view q_marker = "question: ";
  const std::string ctx_marker = " context: ";
  if (!starts_with(input, q_marker)) throw ProtocolViolation("missing question marker");
  const std::size_t ctx_pos = input.find(ctx_marker, q_marker.size());
  if (ctx_pos == std::string_view::npos) throw ProtocolViolation("missing context marker");
  v.question = unescape_payload(input.substr(q_marker.size(), ctx_pos - q_marker.size()), p);
  std::size_t body_start = ctx_pos + ctx_marker.size();

  const std::string q_sep = " " + p.qdmr_token + " ";
  std::size_t first_q = input.find(q_sep, body_start);
  v.context = unescape_payload(
      input.substr(body_start, (first_q == std::string_view::npos ? input.size() : first_q) -
                                   body_start),
      p);
  std::size_t pos = first_q;
  const std::string a_sep = " " + p.answer_token + " ";
  while (pos != std::string_view::npos) {
    const std::size_t seg_start = pos + q_sep.size();
    std::size_t next_q = input.find(q_sep, seg_start);
    const std::size_t seg_end = next_q == std::string_view::npos ? input.size() : next_q;
    std::string_view seg = input.substr(seg_start, seg_end - seg_start);
    const std::size_t ans = seg.find(a_sep);
    if (ans != std::string_view::npos) {
      v.history.emplace_back(unescape_payload(seg.substr(0, ans), p),
                             unescape_payload(seg.substr(ans + a_sep.size()), p));
    } else {
      // Pending tail: "subq[ END][ REGEX r]".
      std::string body(seg);
      const std::string regex_marker = " " + p.regex_token + " ";
      const std::size_t r_pos = body.find(regex_marker);
      if (r_pos != std::string::npos) {
        v.pending_regex_value = unescape_payload(body.substr(r_pos + regex_marker.size()), p);
        body = body.substr(0, r_pos);
      }
      const std::string end_marker = " " + p.end_token;
      if (body.size() >= end_marker.size() &&
          body.substr(body.size() - end_marker.size()) == end_marker) {
        v.pending_is_last = true;
        body = body.substr(0, body.size() - end_marker.size());
      }
      v.pending_subq = unescape_payload(body, p);
    }
    pos = next_q;
  }
  return v;
}

}  // namespace coq
