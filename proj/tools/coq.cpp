// Command-line front end: synthetic data generation, silver decomposition,
// training, evaluation, chain inference, and the standalone regex executor.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "coq/infer.hpp"
#include "coq/numexec.hpp"
#include "coq/records.hpp"
#include "coq/synth.hpp"
#include "coq/trainer.hpp"

namespace {

std::unique_ptr<coq::ReferencePolicy> make_policy(const std::string& checkpoint_path) {
  auto oracle = std::make_shared<coq::RuleOracle>();
  auto policy = std::make_unique<coq::ReferencePolicy>(coq::PolicyConfig{},
                                                       coq::make_oracle_provider(oracle));
  if (!checkpoint_path.empty()) policy->load(coq::load_checkpoint(checkpoint_path));
  return policy;
}

std::vector<coq::ExampleRecord> load_records(const std::string& path, bool warn) {
  auto result = coq::ingest_jsonl(path);
  if (warn) {
    for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  }
  return std::move(result.records);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chain-of-questions training and inference engine"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  int count = 100;
  std::string recipe = "mixed";
  std::string data_path, out_path, checkpoint_path;
  std::string buffer_in, buffer_out;
  std::string lambda_scope = "global";
  int max_steps = 8;
  int k = 25, b = 5;
  double lr = 0.1;
  int batch_size = 4;
  int steps = 1000;
  int checkpoint_every = 0;
  bool no_mapo = false, no_regex = false;
  std::string subq;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic training data (JSONL)");
  gen->add_option("--seed", seed, "RNG seed");
  gen->add_option("--count", count, "number of examples");
  gen->add_option("--recipe", recipe,
                  "lookup | numeric-diff | numeric-max | 2hop | mixed (add -shift for "
                  "shifted phrasings)");
  gen->add_option("--out", out_path, "output JSONL path")->required();

  auto* dec = app.add_subcommand("decompose", "Fill missing decompositions with the rule oracle");
  dec->add_option("--data", data_path, "input JSONL")->required();
  dec->add_option("--out", out_path, "output JSONL")->required();

  auto* train = app.add_subcommand("train", "Train the reference policy");
  train->add_option("--data", data_path, "training JSONL")->required();
  train->add_option("--checkpoint", checkpoint_path, "checkpoint output path")->required();
  train->add_option("--out", out_path, "training log path (JSONL)");
  train->add_option("--seed", seed, "RNG seed");
  train->add_option("--k", k, "beam size");
  train->add_option("--b", b, "per-step expansion budget");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--batch-size", batch_size, "examples per step");
  train->add_option("--steps", steps, "number of training steps");
  train->add_option("--lambda-scope", lambda_scope, "global | batch");
  train->add_option("--checkpoint-every", checkpoint_every,
                    "write intermediate checkpoints every N steps (0: final only)");
  train->add_option("--buffer-in", buffer_in, "replay buffer snapshot to resume from");
  train->add_option("--buffer-out", buffer_out, "replay buffer snapshot output path");
  train->add_flag("--no-mapo", no_mapo, "disable MAPO (pure Hard-EM)");
  train->add_flag("--no-regex", no_regex, "disable the regex module");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--data", data_path, "evaluation JSONL")->required();
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint path");
  eval->add_option("--max-steps", max_steps, "inference chain cap");
  eval->add_flag("--no-regex", no_regex, "disable the regex module");

  auto* infer = app.add_subcommand("infer", "Print chain transcripts");
  infer->add_option("--data", data_path, "input JSONL")->required();
  infer->add_option("--checkpoint", checkpoint_path, "checkpoint path");
  infer->add_option("--max-steps", max_steps, "inference chain cap");
  infer->add_option("--out", out_path, "transcript output path (default stdout)");
  infer->add_flag("--no-regex", no_regex, "disable the regex module");

  auto* exec = app.add_subcommand("exec-regex", "Run the regex pipeline on one sub-question");
  exec->add_option("subquestion", subq, "final sub-question text")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const auto records = coq::generate_synthetic(seed, count, recipe);
      coq::export_jsonl(records, out_path);
      std::cout << "wrote " << records.size() << " records to " << out_path << "\n";
    } else if (dec->parsed()) {
      auto records = load_records(data_path, true);
      coq::RuleOracle oracle;
      const std::size_t filled = coq::silver_decompose(oracle, records);
      coq::export_jsonl(records, out_path);
      std::cout << "decomposed " << filled << " of " << records.size() << " records\n";
    } else if (train->parsed()) {
      const auto records = load_records(data_path, true);
      coq::TrainerConfig config;
      config.k = k;
      config.b = b;
      config.lr = lr;
      config.batch_size = batch_size;
      config.max_steps = steps;
      config.seed = seed;
      config.lambda_scope = coq::lambda_scope_from(lambda_scope);
      config.use_mapo = !no_mapo;
      config.use_regex = !no_regex;
      config.checkpoint_every = checkpoint_every;
      auto policy_ptr = make_policy("");
      auto& policy = *policy_ptr;
      coq::Trainer trainer(policy, config);
      if (!buffer_in.empty()) trainer.buffer().load(buffer_in);
      const auto t0 = std::chrono::steady_clock::now();
      const auto history = trainer.run(records, out_path, checkpoint_path);
      const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0);
      if (!buffer_out.empty()) trainer.buffer().save(buffer_out);
      const auto& last = history.back();
      std::cout << "trained " << history.size() << " steps in " << elapsed.count()
                << " s; final lambda " << last.losses.lambda << ", total loss "
                << last.losses.total << "\n";
    } else if (eval->parsed()) {
      const auto records = load_records(data_path, true);
      const auto policy_ptr = make_policy(checkpoint_path);
      const auto& policy = *policy_ptr;
      coq::InferOptions opts;
      opts.max_steps = max_steps;
      opts.use_regex = !no_regex;
      const auto report = coq::evaluate(policy, records, policy.protocol(), opts);
      std::cout << report.to_json().dump(2) << "\n";
    } else if (infer->parsed()) {
      const auto records = load_records(data_path, true);
      const auto policy_ptr = make_policy(checkpoint_path);
      const auto& policy = *policy_ptr;
      coq::InferOptions opts;
      opts.max_steps = max_steps;
      opts.use_regex = !no_regex;
      std::ofstream file;
      std::ostream* out = &std::cout;
      if (!out_path.empty()) {
        file.open(out_path, std::ios::binary | std::ios::trunc);
        if (!file) throw std::runtime_error("cannot write " + out_path);
        out = &file;
      }
      for (const auto& rec : records)
        (*out) << coq::infer_chain(policy, rec, policy.protocol(), opts).to_json().dump() << "\n";
    } else if (exec->parsed()) {
      const auto outcome = coq::try_regex_pipeline(subq);
      if (outcome.ok()) {
        std::cout << outcome.value << "\n";
      } else if (outcome.status == coq::ExecOutcome::Status::ParseFailed) {
        std::cerr << "PARSE_FAILED\n";
        return 1;
      } else {
        std::cerr << "EXEC_FAILED: " << outcome.reason << "\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
