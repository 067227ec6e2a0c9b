#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>

#include "coq/policy.hpp"
#include "coq/rng.hpp"
#include "coq/synth.hpp"
#include "support.hpp"

using namespace coq;

namespace {

std::unique_ptr<ReferencePolicy> fresh_policy() {
  auto oracle = std::make_shared<RuleOracle>();
  return std::make_unique<ReferencePolicy>(PolicyConfig{}, make_oracle_provider(oracle));
}

// A deterministic answer-mode input over a small context.
std::string answer_input(const ReferencePolicy& policy, const std::string& subq,
                         bool is_last = false, std::optional<std::string> regex = {}) {
  PromptState state;
  state.question = "How many points did Team Alpha score?";
  state.context = "Team Alpha scored 17 points. Team Bravo scored 24 points.";
  const std::string base = render_encoder_input(state, policy.protocol());
  return render_step_conditioning(base, subq, is_last, regex, policy.protocol());
}

void randomize(std::vector<double>& theta, Rng& rng) {
  for (auto& x : theta) x = rng.uniform_real(-1.0, 1.0);
}

}  // namespace

TEST_CASE("candidate distribution is a normalized softmax") {
  auto policy = fresh_policy();
  Rng rng(5);
  const std::string input = answer_input(*policy, "return the points that Team Alpha scored");
  for (int trial = 0; trial < 20; ++trial) {
    randomize(policy->params(), rng);
    double total = 0.0;
    for (const auto& text : policy->candidate_texts(input))
      total += std::exp(policy->score_target(input, text));
    CHECK(std::abs(total - 1.0) <= 1e-9);
  }
}

TEST_CASE("uniform parameters give uniform log-probabilities") {
  auto policy = fresh_policy();
  const std::string input = answer_input(*policy, "return the points that Team Alpha scored");
  const auto texts = policy->candidate_texts(input);
  REQUIRE(texts.size() >= 4);
  const double expected = -std::log(static_cast<double>(texts.size()));
  for (const auto& text : texts)
    CHECK(policy->score_target(input, text) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("log-probabilities are never positive") {
  auto policy = fresh_policy();
  Rng rng(17);
  const std::string input = answer_input(*policy, "return the points that Team Bravo scored");
  for (int trial = 0; trial < 10; ++trial) {
    randomize(policy->params(), rng);
    for (const auto& c : policy->top_candidates(input, 1000)) CHECK(c.logprob <= 1e-12);
  }
}

TEST_CASE("unknown targets raise UnrepresentableTarget") {
  auto policy = fresh_policy();
  const std::string input = answer_input(*policy, "return the points that Team Alpha scored");
  CHECK_THROWS_AS(policy->score_target(input, "Zanzibar"), UnrepresentableTarget);
}

TEST_CASE("top_candidates matches an exhaustive sort") {
  auto policy = fresh_policy();
  Rng rng(23);
  const std::string input = answer_input(*policy, "return the points that Team Bravo scored");
  for (int trial = 0; trial < 10; ++trial) {
    randomize(policy->params(), rng);
    const auto texts = policy->candidate_texts(input);
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < texts.size(); ++i)
      scored.emplace_back(policy->score_target(input, texts[i]), i);
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first > b.first;
    });
    const auto top = policy->top_candidates(input, 3);
    REQUIRE(top.size() == 3);
    for (std::size_t i = 0; i < top.size(); ++i) {
      CHECK(top[i].target == texts[scored[i].second]);
      CHECK(top[i].logprob == scored[i].first);
    }
    // b >= |set| returns the whole set, sorted.
    CHECK(policy->top_candidates(input, static_cast<int>(texts.size()) + 50).size() ==
          texts.size());
  }
}

TEST_CASE("b=1 equals the argmax of score_target") {
  auto policy = fresh_policy();
  Rng rng(29);
  randomize(policy->params(), rng);
  const std::string input = answer_input(*policy, "return the points that Team Alpha scored");
  const auto top = policy->top_candidates(input, 1);
  REQUIRE(top.size() == 1);
  for (const auto& text : policy->candidate_texts(input))
    CHECK(policy->score_target(input, text) <= top[0].logprob);
}

TEST_CASE("grad_logprob matches central finite differences") {
  auto policy = fresh_policy();
  Rng rng(31);
  const std::string input = answer_input(*policy, "return the points that Team Bravo scored");
  const auto texts = policy->candidate_texts(input);
  for (int trial = 0; trial < 100; ++trial) {
    randomize(policy->params(), rng);
    const std::string& target =
        texts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(texts.size()) - 1))];
    const auto analytic = policy->grad_logprob(input, target);
    const double worst = coqtest::gradient_check(
        policy->params(), analytic,
        [&] { return policy->score_target(input, target); });
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("a one-candidate set pins probability to 1 with zero gradient") {
  auto oracle = std::make_shared<RuleOracle>();
  ReferencePolicy tiny(PolicyConfig{}, make_oracle_provider(oracle));
  PromptState state;
  state.question = "Q";
  state.context = "word";
  const std::string one = render_step_conditioning(
      render_encoder_input(state, tiny.protocol()), "return word", false, std::nullopt,
      tiny.protocol());
  REQUIRE(tiny.candidate_count(one) == 1);
  CHECK(tiny.score_target(one, "word") == 0.0);
  for (double g : tiny.grad_logprob(one, "word")) CHECK(g == 0.0);
}

TEST_CASE("scores are bitwise deterministic") {
  auto policy = fresh_policy();
  Rng rng(37);
  randomize(policy->params(), rng);
  const std::string input = answer_input(*policy, "return the points that Team Alpha scored");
  const double first = policy->score_target(input, "17");
  auto policy2 = fresh_policy();
  policy2->params() = policy->params();
  CHECK(policy2->score_target(input, "17") == first);
  policy->invalidate_cache();
  CHECK(policy->score_target(input, "17") == first);
}

TEST_CASE("regex result joins the candidate set with its flag") {
  auto policy = fresh_policy();
  const std::string without =
      answer_input(*policy, "return the difference of 24 and 17", true);
  const std::string with =
      answer_input(*policy, "return the difference of 24 and 17", true, std::string("7"));
  const auto texts_without = policy->candidate_texts(without);
  const auto texts_with = policy->candidate_texts(with);
  const auto has = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  CHECK_FALSE(has(texts_without, "7"));
  CHECK(has(texts_with, "7"));
  // Numbers in the sub-question are candidates even when absent from the
  // context.
  CHECK(has(texts_without, "24"));
}

TEST_CASE("question mode scores the provider's templated sub-questions") {
  auto policy = fresh_policy();
  PromptState state;
  state.question = "How many more points did Team Bravo score than Team Alpha?";
  state.context = "Team Alpha scored 17 points. Team Bravo scored 24 points.";
  const std::string input = render_encoder_input(state, policy->protocol());
  const auto texts = policy->candidate_texts(input);
  REQUIRE_FALSE(texts.empty());
  const std::string gold =
      format_subq_target("return the points that Team Alpha scored", false, policy->protocol());
  CHECK(std::find(texts.begin(), texts.end(), gold) != texts.end());
  // The end-marked singleton truncation is present too.
  const std::string truncated =
      format_subq_target("return the points that Team Alpha scored", true, policy->protocol());
  CHECK(std::find(texts.begin(), texts.end(), truncated) != texts.end());
  CHECK(policy->score_target(input, gold) < 0.0);
}

TEST_CASE("checkpoints round trip through disk") {
  auto policy = fresh_policy();
  Rng rng(41);
  randomize(policy->params(), rng);
  // Quantize to float32 so the round trip is exact.
  for (auto& x : policy->params()) x = static_cast<double>(static_cast<float>(x));
  const std::string path = "policy_ckpt_test.json";
  save_policy(path, *policy);
  auto restored = fresh_policy();
  restored->load(load_checkpoint(path));
  CHECK(restored->params() == policy->params());
  const auto cp = load_checkpoint(path);
  CHECK(cp.metadata["feature_names"].get<std::vector<std::string>>() ==
        ReferencePolicy::feature_names());
  std::remove(path.c_str());
}
