#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>

#include "coq/objectives.hpp"
#include "coq/synth.hpp"
#include "coq/trainer.hpp"
#include "support.hpp"

using namespace coq;

namespace {

struct Fixture {
  std::shared_ptr<RuleOracle> oracle = std::make_shared<RuleOracle>();
  std::unique_ptr<ReferencePolicy> policy;
  std::vector<ExampleRecord> examples;

  explicit Fixture(std::uint64_t seed = 7, int count = 12, const std::string& recipe = "mixed") {
    policy = std::make_unique<ReferencePolicy>(PolicyConfig{}, make_oracle_provider(oracle));
    examples = generate_synthetic(seed, count, recipe);
  }

  std::vector<std::string> q_subs(const ExampleRecord& rec) const {
    std::vector<std::string> out;
    for (const auto& s : parse_qdmr_text(*rec.qdmr).steps) out.push_back(s.text);
    return out;
  }
};

void randomize(std::vector<double>& params, Rng& rng, double span = 0.5) {
  for (auto& x : params) x = rng.uniform_real(-span, span);
}

}  // namespace

TEST_CASE("supervised loss of a single-step example is one question factor") {
  Fixture fx(3, 6, "lookup");
  const auto& rec = fx.examples[0];
  const auto q_subs = fx.q_subs(rec);
  REQUIRE(q_subs.size() == 1);
  const auto lv = supervised_loss(*fx.policy, rec.question, rec.context, q_subs, {},
                                  fx.policy->protocol());
  const auto cond = make_step_conditioning(rec.question, rec.context, q_subs, 0, {},
                                           fx.policy->protocol());
  CHECK(lv.value ==
        Catch::Approx(-fx.policy->score_target(cond.q_input, cond.q_target)).margin(1e-12));
}

TEST_CASE("uniform policy over a two-candidate sub-question pool gives 2 ln 2") {
  // A provider with a single two-step template yields exactly two formatted
  // sub-question candidates per step.
  DecompositionProvider provider = [](const std::string&, const std::string&) {
    return std::vector<QdmrDecomposition>{parse_qdmr_text("return alpha fact; return beta fact")};
  };
  ReferencePolicy policy(PolicyConfig{}, provider);
  const std::vector<std::string> q_subs = {"return alpha fact", "return beta fact"};
  const auto lv = supervised_loss(policy, "Q", "some context words", q_subs, {"x"},
                                  policy.protocol());
  CHECK(lv.value == Catch::Approx(2.0 * std::log(2.0)).margin(1e-12));
}

TEST_CASE("hard_em_loss equals the negative trajectory log-likelihood") {
  Fixture fx(11, 10, "mixed");
  Rng rng(5);
  for (const auto& rec : fx.examples) {
    const auto q_subs = fx.q_subs(rec);
    if (q_subs.size() < 2) continue;
    randomize(fx.policy->params(), rng);
    BeamOptions opts{25, 5, true, rec.answer};
    std::vector<Trajectory> beam;
    try {
      beam = beam_search_latents(*fx.policy, rec.question, rec.context, q_subs,
                                 fx.policy->protocol(), opts);
    } catch (const EmptyCandidateSet&) {
      continue;
    }
    const Trajectory selected = hard_em_select(beam);
    const auto lv = hard_em_loss(*fx.policy, rec.question, rec.context, q_subs, selected,
                                 fx.policy->protocol());
    const auto t = trajectory_loglik(*fx.policy, rec.question, rec.context, q_subs,
                                     selected.sub_answers, fx.policy->protocol());
    CHECK(lv.value == Catch::Approx(-t.loglik).margin(1e-9));
  }
}

TEST_CASE("mapo_loss special cases") {
  Fixture fx(13, 8, "numeric-max");
  const auto& rec = fx.examples[0];
  const auto q_subs = fx.q_subs(rec);
  Rng rng(9);
  randomize(fx.policy->params(), rng);
  const auto beam = beam_search_latents(*fx.policy, rec.question, rec.context, q_subs,
                                        fx.policy->protocol(), {25, 5, true});
  REQUIRE(beam.size() >= 3);

  SECTION("r_B = 0 leaves only out-of-memory terms with weight R/m") {
    TrainingSample sample;
    sample.out_of_memory = {beam[0], beam[1]};
    sample.out_of_memory[0].reward = 0.9;
    sample.out_of_memory[1].reward = 0.4;
    sample.m = 2;
    sample.r_b = 0.0;
    const auto lv = mapo_loss(*fx.policy, rec.question, rec.context, q_subs, sample,
                              fx.policy->protocol());
    double expected = 0.0;
    for (const auto& t : sample.out_of_memory) {
      expected += (1.0 / 2.0) * t.reward *
                  answer_nll(*fx.policy, rec.question, rec.context, q_subs, t.sub_answers,
                             fx.policy->protocol(), true)
                      .value;
      expected += 0.5 * supervised_loss(*fx.policy, rec.question, rec.context, q_subs,
                                        t.sub_answers, fx.policy->protocol())
                            .value;
    }
    CHECK(lv.value == Catch::Approx(expected).margin(1e-9));
  }

  SECTION("all rewards zero reduces to the averaged supervised loss") {
    TrainingSample sample;
    sample.out_of_memory = {beam[0], beam[1], beam[2]};
    for (auto& t : sample.out_of_memory) t.reward = 0.0;
    sample.m = 3;
    sample.r_b = 0.0;
    const auto lv = mapo_loss(*fx.policy, rec.question, rec.context, q_subs, sample,
                              fx.policy->protocol());
    double expected = 0.0;
    for (const auto& t : sample.out_of_memory)
      expected += supervised_loss(*fx.policy, rec.question, rec.context, q_subs, t.sub_answers,
                                  fx.policy->protocol())
                      .value /
                  3.0;
    CHECK(lv.value == Catch::Approx(expected).margin(1e-9));
  }

  SECTION("m = 0 is degenerate") {
    TrainingSample sample;
    CHECK_THROWS_AS(mapo_loss(*fx.policy, rec.question, rec.context, q_subs, sample,
                              fx.policy->protocol()),
                    DegenerateSample);
  }
}

TEST_CASE("loss gradients match finite differences") {
  Fixture fx(17, 30, "mixed");
  Rng rng(21);
  int checked = 0;
  for (const auto& rec : fx.examples) {
    const auto q_subs = fx.q_subs(rec);
    if (q_subs.size() < 2) continue;
    randomize(fx.policy->params(), rng);
    const auto& protocol = fx.policy->protocol();

    const auto sup = supervised_loss(*fx.policy, rec.question, rec.context, q_subs,
                                     std::vector<std::string>{"17", "24", "7"}, protocol);
    CHECK(coqtest::gradient_check(fx.policy->params(), sup.grad, [&] {
            return supervised_loss(*fx.policy, rec.question, rec.context, q_subs,
                                   std::vector<std::string>{"17", "24", "7"}, protocol)
                .value;
          }) <= 1e-4);

    std::vector<Trajectory> beam;
    try {
      beam = beam_search_latents(*fx.policy, rec.question, rec.context, q_subs, protocol,
                                 {25, 5, true, rec.answer});
    } catch (const EmptyCandidateSet&) {
      continue;
    }
    const Trajectory selected = hard_em_select(beam);
    const auto hard =
        hard_em_loss(*fx.policy, rec.question, rec.context, q_subs, selected, protocol);
    CHECK(coqtest::gradient_check(fx.policy->params(), hard.grad, [&] {
            return hard_em_loss(*fx.policy, rec.question, rec.context, q_subs, selected, protocol)
                .value;
          }) <= 1e-4);

    const auto free_beam = beam_search_latents(*fx.policy, rec.question, rec.context, q_subs,
                                               protocol, {25, 5, true});
    ReplayBuffer buffer(16, 0.8);
    for (auto t : free_beam) {
      t.reward = f1_reward(t.sub_answers.back(), rec.answer);
      buffer.admit(rec.id, t);
    }
    Rng sample_rng(3);
    std::vector<Trajectory> top5(free_beam.begin(),
                                 free_beam.begin() + std::min<std::size_t>(5, free_beam.size()));
    for (auto& t : top5) t.reward = f1_reward(t.sub_answers.back(), rec.answer);
    const auto sample = assemble_training_sample(buffer, rec.id, top5, sample_rng);
    const auto mapo =
        mapo_loss(*fx.policy, rec.question, rec.context, q_subs, sample, protocol);
    CHECK(coqtest::gradient_check(fx.policy->params(), mapo.grad, [&] {
            return mapo_loss(*fx.policy, rec.question, rec.context, q_subs, sample, protocol)
                .value;
          }) <= 1e-4);

    const double lambda = 0.4;
    const auto mixed = mixture_loss(hard, mapo, lambda);
    CHECK(coqtest::gradient_check(fx.policy->params(), mixed.grad, [&] {
            const auto h =
                hard_em_loss(*fx.policy, rec.question, rec.context, q_subs, selected, protocol);
            const auto m =
                mapo_loss(*fx.policy, rec.question, rec.context, q_subs, sample, protocol);
            return mixture_loss(h.value, m.value, lambda);
          }) <= 1e-4);
    if (++checked >= 4) break;
  }
  REQUIRE(checked >= 3);
}

TEST_CASE("auxiliary loss gradients match finite differences") {
  Fixture fx(19, 8, "2hop");
  Rng rng(23);
  AuxHeads heads;
  int checked = 0;
  for (const auto& rec : fx.examples) {
    if (!rec.aux) continue;
    randomize(heads.params(), rng, 0.8);
    std::vector<RunContext> runs;
    const auto q_subs = fx.q_subs(rec);
    std::vector<std::string> prefix;
    for (std::size_t j = 0; j < q_subs.size(); ++j) {
      runs.push_back({substitute_refs_text(q_subs[j], prefix), prefix});
      prefix.push_back("Acme");
    }
    const auto lv = auxiliary_losses(heads, rec, runs);
    REQUIRE(lv.value > 0.0);
    CHECK(coqtest::gradient_check(heads.params(), lv.grad, [&] {
            return auxiliary_losses(heads, rec, runs).value;
          }) <= 1e-4);
    if (++checked >= 5) break;
  }
  REQUIRE(checked >= 3);
}

TEST_CASE("auxiliary loss is zero without labels and vanishes with confidence") {
  AuxHeads heads;
  ExampleRecord rec;
  rec.id = "x";
  rec.question = "Q";
  rec.context = "Alpha helps. Bravo hurts.";
  rec.answer = "Alpha";
  const auto zero = auxiliary_losses(heads, rec, {{"return it", {}}});
  CHECK(zero.value == 0.0);
  for (double g : zero.grad) CHECK(g == 0.0);

  AuxTargets aux;
  aux.sf_labels = {1, 1};
  rec.aux = aux;
  // Only the output bias pushed up: confidence toward label 1 on every
  // sentence, so the loss falls toward zero as the bias grows.
  auto& p = heads.params();
  std::fill(p.begin(), p.end(), 0.0);
  const int b2_index = AuxHeads::kHidden * AuxHeads::kSentFeat + AuxHeads::kHidden +
                       AuxHeads::kHidden;
  p[static_cast<std::size_t>(b2_index)] = 5.0;
  const double l5 = auxiliary_losses(heads, rec, {{"return it", {}}}).value;
  p[static_cast<std::size_t>(b2_index)] = 15.0;
  const double l15 = auxiliary_losses(heads, rec, {{"return it", {}}}).value;
  CHECK(l15 < l5);
  CHECK(l15 < 1e-5);
}

TEST_CASE("auxiliary labels must align with the context segmentation") {
  AuxHeads heads;
  ExampleRecord rec;
  rec.id = "x";
  rec.question = "Q";
  rec.context = "One sentence. Two sentences.";
  rec.answer = "One";
  AuxTargets aux;
  aux.sf_labels = {1};  // two sentences in the context
  rec.aux = aux;
  CHECK_THROWS_AS(auxiliary_losses(heads, rec, {{"return it", {}}}), LabelMisalignment);
}

TEST_CASE("a single candidate per step reduces Hard-EM to supervised learning") {
  // A context with one token has exactly one answer candidate, whose
  // log-probability is pinned to 0; the Hard-EM loss is then the supervised
  // sub-question loss alone.
  DecompositionProvider provider = [](const std::string&, const std::string&) {
    return std::vector<QdmrDecomposition>{parse_qdmr_text("return alpha; return beta")};
  };
  ReferencePolicy policy(PolicyConfig{}, provider);
  Rng rng(51);
  for (auto& x : policy.params()) x = rng.uniform_real(-1.0, 1.0);
  const std::vector<std::string> q_subs = {"return alpha", "return beta"};
  Trajectory selected;
  selected.sub_answers = {"word", "word"};
  const auto hard =
      hard_em_loss(policy, "Q", "word", q_subs, selected, policy.protocol());
  const auto sup = supervised_loss(policy, "Q", "word", q_subs, selected.sub_answers,
                                   policy.protocol());
  CHECK(hard.value == Catch::Approx(sup.value).margin(1e-12));
}

TEST_CASE("compute_lambda counts buffered examples") {
  ReplayBuffer buffer(16, 0.8);
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("e" + std::to_string(i));
  CHECK(compute_lambda(buffer, ids) == 0.0);
  Trajectory t;
  t.sub_answers = {"x"};
  t.reward = 0.9;
  for (int i = 0; i < 3; ++i) buffer.admit(ids[static_cast<std::size_t>(i)], t);
  CHECK(compute_lambda(buffer, ids) == Catch::Approx(0.3));
  for (int i = 3; i < 10; ++i) buffer.admit(ids[static_cast<std::size_t>(i)], t);
  CHECK(compute_lambda(buffer, ids) == 1.0);
}

TEST_CASE("mixture endpoints are bitwise exact") {
  const double hard = 1.2345678901234567, mapo = 7.654321098765432;
  CHECK(mixture_loss(hard, mapo, 0.0) == hard);
  CHECK(mixture_loss(hard, mapo, 1.0) == mapo);
  CHECK(mixture_loss(hard, mapo, 0.5) == Catch::Approx(0.5 * (hard + mapo)).margin(1e-15));
  LossValue h(3), m(3);
  h.value = hard;
  h.grad = {1.0, -2.0, 0.5};
  m.value = mapo;
  m.grad = {0.25, 0.75, -0.125};
  CHECK(mixture_loss(h, m, 0.0).grad == h.grad);
  CHECK(mixture_loss(h, m, 1.0).grad == m.grad);
}

TEST_CASE("trainer configs must satisfy k >= b >= 1 and a threshold in (0,1)") {
  Fixture fx(43, 2, "lookup");
  TrainerConfig bad;
  bad.k = 2;
  bad.b = 5;
  CHECK_THROWS_AS(Trainer(*fx.policy, bad), std::invalid_argument);
  TrainerConfig bad2;
  bad2.reward_threshold = 1.0;
  CHECK_THROWS_AS(Trainer(*fx.policy, bad2), std::invalid_argument);
}

TEST_CASE("train_step on an empty buffer uses lambda zero") {
  Fixture fx(29, 8, "numeric-diff");
  TrainerConfig config;
  config.batch_size = 4;
  config.max_steps = 1;
  Trainer trainer(*fx.policy, config);
  std::vector<const ExampleRecord*> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(&fx.examples[static_cast<std::size_t>(i)]);
  const auto rec = trainer.train_step(batch, 1);
  CHECK(rec.losses.lambda == 0.0);
  CHECK(rec.buffer_examples == 0);
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
  Fixture fx(31, 8, "mixed");
  TrainerConfig config;
  config.lr = 0.0;
  config.batch_size = 4;
  Trainer trainer(*fx.policy, config);
  std::vector<const ExampleRecord*> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(&fx.examples[static_cast<std::size_t>(i)]);
  const auto before = fx.policy->params();
  const auto r1 = trainer.train_step(batch, 1);
  CHECK(fx.policy->params() == before);
  const auto r2 = trainer.train_step(batch, 2);
  CHECK(fx.policy->params() == before);
  CHECK(r1.losses.hard == r2.losses.hard);
  CHECK(r1.losses.total == r2.losses.total);
}

TEST_CASE("loss breakdown satisfies the mixture identity") {
  Fixture fx(37, 16, "mixed");
  TrainerConfig config;
  config.batch_size = 4;
  config.lr = 0.05;
  Trainer trainer(*fx.policy, config);
  trainer.register_examples(fx.examples);
  std::vector<const ExampleRecord*> all;
  for (const auto& r : fx.examples) all.push_back(&r);
  for (int step = 1; step <= 12; ++step) {
    std::vector<const ExampleRecord*> batch;
    for (int i = 0; i < 4; ++i)
      batch.push_back(all[static_cast<std::size_t>((4 * (step - 1) + i) % all.size())]);
    const auto rec = trainer.train_step(batch, step);
    const double lambda = rec.losses.lambda;
    const double expected =
        mixture_loss(rec.losses.hard, rec.losses.mapo, lambda) + rec.losses.aux;
    CHECK(std::abs(rec.losses.total - expected) <= 1e-9);
    CHECK(lambda >= 0.0);
    CHECK(lambda <= 1.0);
  }
}

TEST_CASE("lambda is nondecreasing when eviction never happens") {
  Fixture fx(41, 12, "2hop");
  TrainerConfig config;
  config.batch_size = 4;
  config.lr = 0.1;
  config.buffer_capacity = 1u << 20;  // effectively disables eviction
  config.max_steps = 40;
  Trainer trainer(*fx.policy, config);
  const auto history = trainer.run(fx.examples);
  double last = 0.0;
  for (const auto& rec : history) {
    CHECK(rec.losses.lambda >= last - 1e-15);
    last = rec.losses.lambda;
  }
}
