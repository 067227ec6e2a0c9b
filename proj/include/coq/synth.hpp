#pragma once

#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <vector>

#include "coq/policy.hpp"
#include "coq/qdmr.hpp"
#include "coq/records.hpp"
#include "coq/rng.hpp"

namespace coq {

struct UnknownRecipe : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct OracleFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Maps a question to a decomposition; the reference implementation is
// rule-based over the synthetic question templates.
class DecompositionOracle {
public:
  virtual ~DecompositionOracle() = default;
  virtual QdmrDecomposition decompose(const std::string& question) const = 0;
};

namespace synth_detail {

inline const std::vector<std::string>& team_names() {
  static const std::vector<std::string> kNames = {"Alpha", "Bravo",  "Delta", "Echo",  "Foxtrot",
                                                  "Sierra", "Tango", "Zulu",  "Omega", "Nova"};
  return kNames;
}
inline const std::vector<std::string>& person_names() {
  static const std::vector<std::string> kNames = {"Maya", "Liam", "Noah",  "Zara",  "Ravi",
                                                  "Kira", "Omar", "Lena",  "Felix", "Iris"};
  return kNames;
}
inline const std::vector<std::string>& company_names() {
  static const std::vector<std::string> kNames = {"Acme",   "Globex", "Initech", "Vortex",
                                                  "Zenith", "Nimbus", "Quanta",  "Polaris",
                                                  "Kestrel", "Hexcorp"};
  return kNames;
}
inline const std::vector<std::string>& city_names() {
  static const std::vector<std::string> kNames = {"Paris",  "Oslo",  "Lima",  "Cairo", "Quito",
                                                  "Boston", "Denver", "Malmo", "Kyoto", "Dublin"};
  return kNames;
}

inline std::string team_points_sentence(const std::string& team, int points, bool shifted) {
  if (shifted) return "Team " + team + " finished with " + std::to_string(points) + " points.";
  return "Team " + team + " scored " + std::to_string(points) + " points.";
}

inline std::vector<int> distinct_points(Rng& rng, std::size_t n) {
  std::vector<int> points;
  while (points.size() < n) {
    const int p = static_cast<int>(rng.uniform_int(3, 60));
    bool fresh = true;
    for (int q : points)
      if (q == p) fresh = false;
    if (fresh) points.push_back(p);
  }
  return points;
}

template <typename T>
inline std::vector<T> pick_distinct(Rng& rng, const std::vector<T>& bank, std::size_t n) {
  auto idx = rng.sample_indices(bank.size(), n);
  std::vector<T> out;
  for (auto i : idx) out.push_back(bank[i]);
  return out;
}

}  // namespace synth_detail

// Rule-based oracle over the synthetic question templates. Unknown questions
// throw OracleFailure.
class RuleOracle : public DecompositionOracle {
public:
  QdmrDecomposition decompose(const std::string& question) const override {
    std::smatch m;
    static const std::regex kLookup(R"(^How many points did Team (\w+) score\?$)");
    static const std::regex kDiff(
        R"(^How many more points did Team (\w+) score than Team (\w+)\?$)");
    static const std::regex kDiffShift(
        R"(^By how many points did Team (\w+) outscore Team (\w+)\?$)");
    static const std::regex kMax(
        R"(^What was the largest of the point totals of Team (\w+) and Team (\w+)\?$)");
    static const std::regex kMaxShift(
        R"(^Which was the largest point total between Team (\w+) and Team (\w+)\?$)");
    static const std::regex kTwoHop(
        R"(^In which city is the company that (\w+) works for based\?$)");
    static const std::regex kTwoHopShift(
        R"(^Which city hosts the headquarters of the company that (\w+) works for\?$)");

    if (std::regex_match(question, m, kLookup))
      return parse_qdmr_text("return the points that Team " + m[1].str() + " scored");
    if (std::regex_match(question, m, kDiff) || std::regex_match(question, m, kDiffShift))
      return parse_qdmr_text("return the points that Team " + m[2].str() +
                             " scored; return the points that Team " + m[1].str() +
                             " scored; return the difference of #2 and #1");
    if (std::regex_match(question, m, kMax) || std::regex_match(question, m, kMaxShift))
      return parse_qdmr_text("return the points that Team " + m[1].str() +
                             " scored; return the points that Team " + m[2].str() +
                             " scored; return the largest of #1 and #2");
    if (std::regex_match(question, m, kTwoHop) || std::regex_match(question, m, kTwoHopShift))
      return parse_qdmr_text("return the company that " + m[1].str() +
                             " works for; return the city where #1 is based");
    throw OracleFailure("no rule matches: " + question);
  }
};

// Synthetic multistep QA: numeric difference and superlative chains over team
// scores, and 2-hop entity lookups. Deterministic per seed; every answer is
// recomputable from the generated facts.
inline std::vector<ExampleRecord> generate_synthetic(std::uint64_t seed, int count,
                                                     const std::string& recipe) {
  using namespace synth_detail;
  const bool shifted = recipe.size() > 6 && recipe.substr(recipe.size() - 6) == "-shift";
  const std::string base = shifted ? recipe.substr(0, recipe.size() - 6) : recipe;
  const std::vector<std::string> kMixed = {"numeric-diff", "numeric-max", "2hop"};
  if (base != "lookup" && base != "numeric-diff" && base != "numeric-max" && base != "2hop" &&
      base != "mixed")
    throw UnknownRecipe("unknown recipe: " + recipe);
  if (count < 1) throw std::invalid_argument("count must be >= 1");

  Rng rng(seed);
  std::vector<ExampleRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::string kind =
        base == "mixed" ? kMixed[static_cast<std::size_t>(rng.uniform_int(0, 2))] : base;
    ExampleRecord rec;
    rec.id = recipe + "-" + std::to_string(i);
    rec.qdmr_source = QdmrSource::Gold;

    if (kind == "lookup" || kind == "numeric-diff" || kind == "numeric-max") {
      const auto teams = pick_distinct(rng, team_names(), 3);
      const auto points = distinct_points(rng, 3);
      std::vector<std::string> sentences;
      std::vector<int> owner;  // team index per sentence
      for (std::size_t t = 0; t < teams.size(); ++t) {
        sentences.push_back(team_points_sentence(teams[t], points[t], shifted));
        owner.push_back(static_cast<int>(t));
      }
      std::vector<std::size_t> order = {0, 1, 2};
      rng.shuffle(order);
      std::string context;
      std::vector<int> sentence_owner;
      for (std::size_t s : order) {
        if (!context.empty()) context += " ";
        context += sentences[s];
        sentence_owner.push_back(owner[s]);
      }
      rec.context = context;

      AuxTargets aux;
      const auto mark_sf = [&](std::initializer_list<int> relevant) {
        aux.sf_labels.assign(sentence_owner.size(), 0);
        for (std::size_t s = 0; s < sentence_owner.size(); ++s)
          for (int r : relevant)
            if (sentence_owner[s] == r) aux.sf_labels[s] = 1;
      };

      if (kind == "lookup") {
        rec.question = "How many points did Team " + teams[0] + " score?";
        rec.qdmr = "return the points that Team " + teams[0] + " scored";
        rec.answer = std::to_string(points[0]);
        mark_sf({0});
      } else if (kind == "numeric-diff") {
        // The first-mentioned team scored more, so the difference is positive.
        int hi = 0, lo = 1;
        if (points[hi] < points[lo]) std::swap(hi, lo);
        rec.question = shifted ? "By how many points did Team " + teams[static_cast<std::size_t>(hi)] +
                                     " outscore Team " + teams[static_cast<std::size_t>(lo)] + "?"
                               : "How many more points did Team " + teams[static_cast<std::size_t>(hi)] +
                                     " score than Team " + teams[static_cast<std::size_t>(lo)] + "?";
        rec.qdmr = "return the points that Team " + teams[static_cast<std::size_t>(lo)] +
                   " scored; return the points that Team " + teams[static_cast<std::size_t>(hi)] +
                   " scored; return the difference of #2 and #1";
        rec.answer = std::to_string(points[static_cast<std::size_t>(hi)] -
                                    points[static_cast<std::size_t>(lo)]);
        mark_sf({hi, lo});
      } else {
        rec.question = shifted ? "Which was the largest point total between Team " + teams[0] +
                                     " and Team " + teams[1] + "?"
                               : "What was the largest of the point totals of Team " + teams[0] +
                                     " and Team " + teams[1] + "?";
        rec.qdmr = "return the points that Team " + teams[0] +
                   " scored; return the points that Team " + teams[1] +
                   " scored; return the largest of #1 and #2";
        rec.answer = std::to_string(std::max(points[0], points[1]));
        mark_sf({0, 1});
      }
      rec.aux = std::move(aux);
    } else {  // 2hop
      const auto persons = pick_distinct(rng, person_names(), 3);
      const auto companies = pick_distinct(rng, company_names(), 3);
      const auto cities = pick_distinct(rng, city_names(), 3);
      std::vector<std::string> sentences;
      std::vector<int> owner;
      for (std::size_t t = 0; t < 3; ++t) {
        if (shifted) {
          sentences.push_back(persons[t] + " is employed by " + companies[t] + ".");
          sentences.push_back(companies[t] + " has its headquarters in " + cities[t] + ".");
        } else {
          sentences.push_back(persons[t] + " works for " + companies[t] + ".");
          sentences.push_back(companies[t] + " is based in " + cities[t] + ".");
        }
        owner.push_back(static_cast<int>(t));
        owner.push_back(static_cast<int>(t));
      }
      std::vector<std::size_t> order = {0, 1, 2, 3, 4, 5};
      rng.shuffle(order);
      std::string context;
      std::vector<int> sentence_owner;
      for (std::size_t s : order) {
        if (!context.empty()) context += " ";
        context += sentences[s];
        sentence_owner.push_back(owner[s]);
      }
      rec.context = context;
      rec.question = shifted ? "Which city hosts the headquarters of the company that " +
                                   persons[0] + " works for?"
                             : "In which city is the company that " + persons[0] +
                                   " works for based?";
      rec.qdmr = "return the company that " + persons[0] +
                 " works for; return the city where #1 is based";
      rec.answer = cities[0];

      AuxTargets aux;
      aux.sf_labels.assign(sentence_owner.size(), 0);
      for (std::size_t s = 0; s < sentence_owner.size(); ++s)
        if (sentence_owner[s] == 0) aux.sf_labels[s] = 1;
      const auto tokens = tokenize(context);
      aux.span_begin.assign(tokens.size(), 0);
      aux.span_end.assign(tokens.size(), 0);
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t].text == rec.answer) {
          aux.span_begin[t] = 1;
          aux.span_end[t] = 1;
        }
      }
      rec.aux = std::move(aux);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// Fills missing decompositions with oracle output (source: silver); gold is
// never overwritten, and a per-record oracle failure leaves the record
// undecomposed.
inline std::size_t silver_decompose(const DecompositionOracle& oracle,
                                    std::vector<ExampleRecord>& records) {
  std::size_t filled = 0;
  for (auto& rec : records) {
    if (rec.qdmr) continue;
    try {
      rec.qdmr = to_qdmr_text(oracle.decompose(rec.question));
      rec.qdmr_source = QdmrSource::Silver;
      ++filled;
    } catch (const OracleFailure&) {
      rec.qdmr_source = QdmrSource::None;
    }
  }
  return filled;
}

// Decomposition provider for the reference policy: the oracle's decomposition
// first, then distractor variants (prefix truncations, which move the end
// token earlier, and a first-two-step swap when legal). Questions the oracle
// cannot parse fall back to a single passthrough step.
inline DecompositionProvider make_oracle_provider(std::shared_ptr<const DecompositionOracle> oracle) {
  return [oracle](const std::string& question, const std::string& /*context*/) {
    std::vector<QdmrDecomposition> out;
    QdmrDecomposition primary;
    try {
      primary = oracle->decompose(question);
    } catch (const OracleFailure&) {
      std::string body = trim(question);
      if (!body.empty() && body.back() == '?') body.pop_back();
      primary = parse_qdmr_text("return " + std::string(trim(body)));
      out.push_back(primary);
      return out;
    }
    out.push_back(primary);
    for (int len = primary.n() - 1; len >= 1; --len) {
      QdmrDecomposition truncated;
      for (int j = 0; j < len; ++j) truncated.steps.push_back(primary.steps[static_cast<std::size_t>(j)]);
      out.push_back(std::move(truncated));
    }
    if (primary.n() >= 2 && primary.steps[0].refs.empty() && primary.steps[1].refs.empty()) {
      QdmrDecomposition swapped = primary;
      std::swap(swapped.steps[0].text, swapped.steps[1].text);
      std::swap(swapped.steps[0].refs, swapped.steps[1].refs);
      out.push_back(std::move(swapped));
    }
    return out;
  };
}

}  // namespace coq
