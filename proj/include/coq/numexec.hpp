#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coq/decimal.hpp"
#include "coq/text.hpp"

namespace coq {

// The DROP regex module's closed operator set.
enum class NumericOp { Max, Min, Sum, Diff, Mul, Div, Or };

inline std::string_view numeric_op_name(NumericOp op) {
  switch (op) {
    case NumericOp::Max: return "max";
    case NumericOp::Min: return "min";
    case NumericOp::Sum: return "sum";
    case NumericOp::Diff: return "diff";
    case NumericOp::Mul: return "mul";
    case NumericOp::Div: return "div";
    case NumericOp::Or: return "or";
  }
  return "?";
}

struct Program {
  NumericOp op = NumericOp::Max;
  std::vector<Rational> operands;
};

struct ExecOutcome {
  enum class Status { Success, ParseFailed, ExecFailed };
  Status status = Status::ParseFailed;
  std::string value;   // canonical rendering, set on Success
  std::string reason;  // set on ExecFailed

  bool ok() const { return status == Status::Success; }
  static ExecOutcome success(std::string v) {
    return ExecOutcome{Status::Success, std::move(v), {}};
  }
  static ExecOutcome parse_failed() { return ExecOutcome{Status::ParseFailed, {}, {}}; }
  static ExecOutcome exec_failed(std::string why) {
    return ExecOutcome{Status::ExecFailed, {}, std::move(why)};
  }
};

namespace numexec_detail {

struct KeywordEntry {
  std::vector<std::string> words;
  NumericOp op;
};

// Keyword table; multi-word keys take precedence over single words at the
// same position, and the earliest match in the sub-question wins.
inline const std::vector<KeywordEntry>& keyword_table() {
  static const std::vector<KeywordEntry> kTable = {
      {{"how", "many", "more"}, NumericOp::Diff},
      {{"how", "many", "fewer"}, NumericOp::Diff},
      {{"how", "much", "longer"}, NumericOp::Diff},
      {{"higher"}, NumericOp::Max},
      {{"highest"}, NumericOp::Max},
      {{"largest"}, NumericOp::Max},
      {{"most"}, NumericOp::Max},
      {{"longer"}, NumericOp::Max},
      {{"longest"}, NumericOp::Max},
      {{"more"}, NumericOp::Max},
      {{"later"}, NumericOp::Max},
      {{"latest"}, NumericOp::Max},
      {{"less"}, NumericOp::Min},
      {{"lower"}, NumericOp::Min},
      {{"lowest"}, NumericOp::Min},
      {{"smallest"}, NumericOp::Min},
      {{"fewest"}, NumericOp::Min},
      {{"shorter"}, NumericOp::Min},
      {{"shortest"}, NumericOp::Min},
      {{"earlier"}, NumericOp::Min},
      {{"earliest"}, NumericOp::Min},
      {{"total"}, NumericOp::Sum},
      {{"sum"}, NumericOp::Sum},
      {{"combined"}, NumericOp::Sum},
      {{"altogether"}, NumericOp::Sum},
      {{"difference"}, NumericOp::Diff},
      {{"product"}, NumericOp::Mul},
      {{"times"}, NumericOp::Mul},
      {{"multiplied"}, NumericOp::Mul},
      {{"divided"}, NumericOp::Div},
      {{"per"}, NumericOp::Div},
      {{"ratio"}, NumericOp::Div},
      {{"half"}, NumericOp::Div},
      {{"either"}, NumericOp::Or},
      {{"or"}, NumericOp::Or},
  };
  return kTable;
}

}  // namespace numexec_detail

// Maps the final sub-question to an operator by keyword, or nothing; absence
// is a valid outcome (the caller leaves decoding unchanged).
inline std::optional<NumericOp> match_operator(std::string_view final_sub_q) {
  std::vector<std::string> words;
  for (const auto& tok : tokenize(final_sub_q)) words.push_back(to_lower(tok.text));
  const auto& table = numexec_detail::keyword_table();
  for (std::size_t i = 0; i < words.size(); ++i) {
    const numexec_detail::KeywordEntry* best = nullptr;
    for (const auto& entry : table) {
      if (entry.words.size() > words.size() - i) continue;
      bool match = true;
      for (std::size_t k = 0; k < entry.words.size(); ++k) {
        if (words[i + k] != entry.words[k]) {
          match = false;
          break;
        }
      }
      if (match && (!best || entry.words.size() > best->words.size())) best = &entry;
    }
    if (best) return best->op;
  }
  return std::nullopt;
}

// All decimal literals in the sub-question, left to right, commas stripped.
inline std::vector<Rational> extract_operands(std::string_view final_sub_q) {
  std::vector<Rational> out;
  for (const auto& lit : extract_number_literals(final_sub_q)) out.push_back(lit.value);
  return out;
}

inline ExecOutcome execute(const Program& p) {
  std::vector<Rational> ops;
  ops.reserve(p.operands.size());
  for (const auto& r : p.operands) {
    auto n = rational_normalize(r);
    if (!n) return ExecOutcome::exec_failed("invalid operand");
    ops.push_back(*n);
  }
  const auto render = [](const Rational& r) -> ExecOutcome {
    auto s = rational_to_decimal_string(r);
    if (!s) return ExecOutcome::exec_failed("result has no finite decimal form");
    return ExecOutcome::success(*s);
  };
  switch (p.op) {
    case NumericOp::Max:
    case NumericOp::Min: {
      if (ops.empty()) return ExecOutcome::exec_failed("no operands");
      Rational best = ops[0];
      for (std::size_t i = 1; i < ops.size(); ++i) {
        auto lt = rational_less(ops[i], best);
        if (!lt) return ExecOutcome::exec_failed("overflow");
        const bool take = (p.op == NumericOp::Min) ? *lt : !*lt && !rational_eq(ops[i], best);
        if (take) best = ops[i];
      }
      return render(best);
    }
    case NumericOp::Sum:
    case NumericOp::Mul: {
      if (ops.empty()) return ExecOutcome::exec_failed("no operands");
      Rational acc = ops[0];
      for (std::size_t i = 1; i < ops.size(); ++i) {
        auto next = (p.op == NumericOp::Sum) ? rational_add(acc, ops[i])
                                             : rational_mul(acc, ops[i]);
        if (!next) return ExecOutcome::exec_failed("overflow");
        acc = *next;
      }
      return render(acc);
    }
    case NumericOp::Diff: {
      if (ops.size() != 2) return ExecOutcome::exec_failed("diff needs exactly 2 operands");
      auto r = rational_sub(ops[0], ops[1]);
      if (!r) return ExecOutcome::exec_failed("overflow");
      return render(*r);
    }
    case NumericOp::Div: {
      if (ops.size() != 2) return ExecOutcome::exec_failed("div needs exactly 2 operands");
      if (ops[1].num == 0) return ExecOutcome::exec_failed("division by zero");
      auto r = rational_div(ops[0], ops[1]);
      if (!r) return ExecOutcome::exec_failed("overflow");
      return render(*r);
    }
    case NumericOp::Or: {
      if (ops.size() < 2) return ExecOutcome::exec_failed("or needs at least 2 operands");
      std::string joined;
      for (const auto& r : ops) {
        auto s = rational_to_decimal_string(r);
        if (!s) return ExecOutcome::exec_failed("operand has no finite decimal form");
        if (!joined.empty()) joined += " or ";
        joined += *s;
      }
      return ExecOutcome::success(joined);
    }
  }
  return ExecOutcome::exec_failed("unknown operator");
}

// Keyword match + operand extraction + execution, as a total function.
// ParseFailed covers both a missing keyword and insufficient operands; DIFF
// and DIV take the first two literals, the other operators take all of them.
inline ExecOutcome try_regex_pipeline(std::string_view final_sub_q) {
  const auto op = match_operator(final_sub_q);
  if (!op) return ExecOutcome::parse_failed();
  std::vector<Rational> operands = extract_operands(final_sub_q);
  Program prog;
  prog.op = *op;
  switch (*op) {
    case NumericOp::Diff:
    case NumericOp::Div:
      if (operands.size() < 2) return ExecOutcome::parse_failed();
      prog.operands = {operands[0], operands[1]};
      break;
    case NumericOp::Or:
      if (operands.size() < 2) return ExecOutcome::parse_failed();
      prog.operands = std::move(operands);
      break;
    default:
      if (operands.empty()) return ExecOutcome::parse_failed();
      prog.operands = std::move(operands);
      break;
  }
  return execute(prog);
}

}  // namespace coq
