/*
 * Copyright 2026 The stlearn Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */


#include <gtest/gtest.h>

#include "stlearn/orchestrator.hpp"
#include "stlearn/util.hpp"
#include "world.hpp"

namespace stlearn {
namespace {

namespace fs = std::filesystem;
using stltest::ItemRef;
using stltest::Policy;
using stltest::ScriptedWorld;
using stltest::TempDir;

struct RunFixture : ::testing::Test {
  TempDir dir{"orch"};
  fs::path train;
  fs::path eval;

  void SetUp() override {
    train = stltest::write_synthetic_split(dir.path(), "train", 40);
    eval = stltest::write_synthetic_split(dir.path(), "eval", 20);
  }

  RunConfig config(const std::string& variant, int max_iter, const std::string& extra = "",
                   const std::string& out = "run") {
    auto text = stltest::run_config_json(variant, train, eval, dir / out, max_iter, extra);
    write_file_atomic(dir / (out + ".json"), text);
    return RunConfig::load(dir / (out + ".json"));
  }

  // Base model answers items 0..24 correctly; fine-tuned models answer everything.
  static Policy first_25() {
    Policy p;
    p.correct = [](int depth, const ItemRef& item) { return depth > 0 || item.index < 25; };
    return p;
  }
};

TEST_F(RunFixture, StlIterationCounts) {
  Orchestrator orch(config("STL", 1), std::make_shared<ScriptedWorld>(first_25()));
  auto m = orch.run();
  ASSERT_EQ(m.iterations.size(), 1u);
  const auto& it = m.iterations[0];
  EXPECT_EQ(it.counts.generations, 40u);
  EXPECT_EQ(it.counts.positives, 25u);
  EXPECT_EQ(it.counts.incorrect, 15u);
  EXPECT_EQ(it.counts.negative_requests, 75u);
  EXPECT_EQ(it.counts.negatives, 75u);
  EXPECT_EQ(it.trainset_size, 100u);
  EXPECT_EQ(it.trainset_tags.at("pos"), 25u);
  EXPECT_EQ(it.trainset_tags.at("neg"), 75u);
  EXPECT_EQ(read_trainset(orch.output_dir() / it.trainset_path).size(), 100u);
  EXPECT_EQ(m.status, RunStatus::kConverged);
  EXPECT_EQ(m.reason, "max_iterations");
  ASSERT_TRUE(it.eval);
  EXPECT_EQ(it.eval->macro().str(), "100.00");
  EXPECT_EQ(it.eval->label, "STL");
  EXPECT_EQ(m.lineage().size(), 2u);
  EXPECT_EQ(m.lineage()[1], it.produced_model_id);
  EXPECT_EQ(it.trainer_base_model, "base-vlm");
  EXPECT_TRUE(fs::exists(orch.output_dir() / "iter_1" / "generations.jsonl"));
  EXPECT_TRUE(fs::exists(orch.output_dir() / "iter_1" / "negatives.jsonl"));
  EXPECT_TRUE(fs::exists(orch.output_dir() / "iter_1" / "eval_report.json"));
}

TEST_F(RunFixture, NoNegVariantsSkipNegatives) {
  for (const char* v : {"STL_NO_NEG", "STL_NO_CAP_NEG"}) {
    auto world = std::make_shared<ScriptedWorld>(first_25());
    Orchestrator orch(config(v, 1, "", std::string("run-") + v), world);
    auto m = orch.run();
    const auto& it = m.iterations.at(0);
    EXPECT_EQ(it.counts.positives, 25u) << v;
    EXPECT_EQ(it.counts.negative_requests, 0u) << v;
    EXPECT_EQ(it.trainset_size, 25u) << v;
    EXPECT_EQ(world->calls(), 40u + 20u) << v;  // first pass plus evaluation
  }
}

TEST_F(RunFixture, MalformedResponseIsDroppedAndCounted) {
  Policy p = first_25();
  p.malformed = [](int depth, const ItemRef& item) { return depth == 0 && item.index == 3; };
  Orchestrator orch(config("STL", 1), std::make_shared<ScriptedWorld>(p));
  auto m = orch.run();
  const auto& it = m.iterations.at(0);
  EXPECT_EQ(it.counts.positives, 24u);
  EXPECT_EQ(it.counts.parse_failures.at("positive_parse"), 1u);
  EXPECT_EQ(it.counts.negative_requests, 72u);
  EXPECT_EQ(it.trainset_size, 96u);
}

TEST_F(RunFixture, StarRationalizesIncorrectItems) {
  Policy p = first_25();
  p.rationalize_correct = [](int, const ItemRef& item) { return item.index % 2 == 0; };
  Orchestrator orch(config("STAR", 1), std::make_shared<ScriptedWorld>(p));
  auto m = orch.run();
  const auto& it = m.iterations.at(0);
  EXPECT_EQ(it.counts.positives, 25u);
  EXPECT_EQ(it.counts.rationalization_requests, 15u);
  // Items 25..39 that are even: 26, 28, ..., 38.
  EXPECT_EQ(it.counts.star_rationalized, 7u);
  EXPECT_EQ(it.trainset_size, 32u);
  EXPECT_EQ(it.trainset_tags.at("star_rationalized"), 7u);
}

TEST_F(RunFixture, DirectSftTrainsOnEverySample) {
  auto world = std::make_shared<ScriptedWorld>(first_25());
  Orchestrator orch(config("DIRECT_SFT", 1), world);
  auto m = orch.run();
  EXPECT_EQ(m.iterations.at(0).trainset_size, 40u);
  EXPECT_EQ(m.iterations.at(0).counts.generations, 0u);
  EXPECT_EQ(world->calls(), 20u);
  EXPECT_EQ(m.iterations.at(0).eval->mode, EvalMode::kDirect);
}

TEST_F(RunFixture, NoPositiveDataStopsTheLoop) {
  Policy p;
  p.correct = [](int, const ItemRef&) { return false; };
  Orchestrator orch(config("STL", 3), std::make_shared<ScriptedWorld>(p));
  auto m = orch.run();
  ASSERT_EQ(m.iterations.size(), 1u);
  EXPECT_EQ(m.iterations[0].outcome, IterationOutcome::kNoPositiveData);
  EXPECT_EQ(m.reason, "no_positive_data");
  EXPECT_EQ(m.lineage().size(), 1u);
}

TEST_F(RunFixture, PlateauStopsBeforeTheCap) {
  // Every model scores 100 on eval, so the second iteration gains nothing.
  Policy p;
  auto world = std::make_shared<ScriptedWorld>(p);
  Orchestrator orch(config("STL_NO_NEG", 5), world);
  auto m = orch.run();
  EXPECT_EQ(m.iterations.size(), 2u);
  EXPECT_EQ(m.reason, "plateau");
}

TEST_F(RunFixture, CumulativeAndIncrementalTraining) {
  Policy p;
  p.correct = [](int depth, const ItemRef& item) { return item.index < 10u + 10u * static_cast<unsigned>(depth); };
  Orchestrator orch(config("STL_NO_NEG", 2, "\"cumulative\": true, \"incremental_training\": true, \"epsilon\": 0"),
                    std::make_shared<ScriptedWorld>(p));
  auto m = orch.run();
  ASSERT_EQ(m.iterations.size(), 2u);
  EXPECT_EQ(m.iterations[0].trainset_size, 10u);
  EXPECT_EQ(m.iterations[1].counts.positives, 20u);
  EXPECT_EQ(m.iterations[1].trainset_size, 30u);
  EXPECT_EQ(m.iterations[1].trainer_base_model, m.iterations[0].produced_model_id);
}

TEST_F(RunFixture, RefusesToOverwriteARun) {
  auto cfg = config("STL", 1);
  Orchestrator(cfg, std::make_shared<ScriptedWorld>(first_25())).run();
  EXPECT_THROW(Orchestrator(cfg, std::make_shared<ScriptedWorld>(first_25())).run(), ManifestError);
}

TEST_F(RunFixture, TrainerFailureMarksTheRunFailed) {
  auto cfg = config("STL", 2);
  cfg.trainer_command = "echo 'out of memory' >&2; exit 1";
  Orchestrator orch(cfg, std::make_shared<ScriptedWorld>(first_25()));
  try {
    orch.run();
    FAIL();
  } catch (const TrainerError& e) {
    EXPECT_NE(e.captured_stderr().find("out of memory"), std::string::npos);
  }
  auto m = read_manifest(orch.manifest_path());
  EXPECT_EQ(m.status, RunStatus::kFailed);
  EXPECT_TRUE(m.iterations.empty());
}

TEST_F(RunFixture, ResumeContinuesToTheSameManifest) {
  auto full_cfg = config("STL", 3, "\"epsilon\": 0", "full");
  auto full = Orchestrator(full_cfg, std::make_shared<ScriptedWorld>(first_25())).run();

  auto cfg = config("STL", 3, "\"epsilon\": 0", "part");
  auto world = std::make_shared<ScriptedWorld>(first_25());
  auto partial = Orchestrator(cfg, world).run({1});
  EXPECT_EQ(partial.iterations.size(), 1u);
  EXPECT_EQ(read_manifest(dir / "part" / "manifest.jsonl").status, RunStatus::kRunning);
  auto resumed = resume_run(dir / "part" / "manifest.jsonl", world);
  EXPECT_EQ(resumed.iterations.size(), full.iterations.size());
  EXPECT_EQ(manifest_digest(resumed), manifest_digest(full));
  EXPECT_EQ(manifest_digest(read_manifest(dir / "part" / "manifest.jsonl")), manifest_digest(full));

  // Resuming a converged run is a no-op.
  auto again = resume_run(dir / "part" / "manifest.jsonl", world);
  EXPECT_EQ(manifest_digest(again), manifest_digest(full));
}

TEST_F(RunFixture, ResumeRejectsAnEditedConfig) {
  auto cfg = config("STL", 3);
  Orchestrator(cfg, std::make_shared<ScriptedWorld>(first_25())).run({1});
  auto text = read_file(dir / "run.json");
  text.replace(text.find("\"max_iterations\": 3"), 19, "\"max_iterations\": 4");
  write_file_atomic(dir / "run.json", text);
  EXPECT_THROW(resume_run(dir / "run" / "manifest.jsonl", std::make_shared<ScriptedWorld>(first_25())), ManifestError);
}

TEST_F(RunFixture, ManifestRoundtrip) {
  Orchestrator orch(config("STL", 2, "\"epsilon\": 0"), std::make_shared<ScriptedWorld>(first_25()));
  auto m = orch.run();
  auto text = read_file(orch.manifest_path());
  EXPECT_EQ(serialize_manifest(parse_manifest(text)), text);
  auto lines = std::count(text.begin(), text.end(), '\n');
  EXPECT_EQ(lines, 1 + 2 + 1);
  // Anything after the status line is rejected.
  EXPECT_THROW(parse_manifest(text + text.substr(text.find('\n') + 1)), ManifestError);
}

RunManifest with_macros(std::vector<std::optional<int>> macro_hundredths, bool last_empty = false) {
  RunManifest m;
  m.base_model = "m0";
  int n = 0;
  for (auto h : macro_hundredths) {
    IterationRecord r;
    r.n = ++n;
    if (h) {
      EvalReport e;
      DomainScore d{"commonsense", 10000, static_cast<std::size_t>(*h), 0, 0};
      e.domains.push_back(d);
      r.eval = e;
    }
    m.iterations.push_back(r);
  }
  if (last_empty) m.iterations.back().outcome = IterationOutcome::kNoPositiveData;
  return m;
}

TEST(Convergence, Examples) {
  RunConfig c;
  c.max_iterations = 3;
  c.epsilon = 0.5;
  auto d = check_convergence(with_macros({4600, 4620}), c);
  EXPECT_TRUE(d.stop);
  EXPECT_EQ(d.reason, StopReason::kPlateau);
  d = check_convergence(with_macros({4600, 4650}), c);  // exactly epsilon keeps going
  EXPECT_FALSE(d.stop);
  d = check_convergence(with_macros({4600, 4700, 4800}), c);
  EXPECT_EQ(d.reason, StopReason::kMaxIterations);
  EXPECT_TRUE(d.stop);
  d = check_convergence(with_macros({4600, 4500}), c);
  EXPECT_EQ(d.reason, StopReason::kPlateau);
  d = check_convergence(with_macros({4600}), c);
  EXPECT_FALSE(d.stop);
  d = check_convergence(with_macros({4600, 4610}, true), c);
  EXPECT_EQ(d.reason, StopReason::kNoPositiveData);
  d = check_convergence(with_macros({std::nullopt, 4610}), c);
  EXPECT_FALSE(d.stop);
  EXPECT_THROW(check_convergence(RunManifest{}, c), Error);
}

TEST(Trainer, SubstitutesAndQuotes) {
  EXPECT_EQ(substitute_trainer_command("train {trainset} {base_model} {output_model}", "a", "b", "c"), "train a b c");
  EXPECT_EQ(substitute_trainer_command("t {base_model}", "x", "my model", "y"), "t 'my model'");
  EXPECT_EQ(substitute_trainer_command("{unknown} {trainset}{trainset}", "a", "b", "c"), "{unknown} aa");
}

struct TrainerFixture : ::testing::Test {
  TempDir dir{"trainer"};
  RunConfig cfg;
  void SetUp() override {
    fs::create_directories(dir / "iter_1");
    FineTuneExample e{"n1-direct-q1", "Is it?", "(A) yes", "img/q1.png", ExampleTag::kDirect, {"q1", 1, Variant::kDirectSft}};
    write_trainset(std::vector<FineTuneExample>{e}, dir / "iter_1" / "trainset.jsonl");
  }
};

TEST_F(TrainerFixture, ReadsTheProducedModelId) {
  cfg.trainer_command = "echo model-iter1 > {output_model}";
  auto inv = invoke_trainer(cfg, dir.path(), "iter_1/trainset.jsonl", "m0");
  EXPECT_EQ(inv.model_id, "model-iter1");
  EXPECT_EQ(inv.command_line, "echo model-iter1 > iter_1/model_id.txt");
}

TEST_F(TrainerFixture, NonzeroExitCarriesStderr) {
  cfg.trainer_command = "echo boom >&2; exit 1";
  try {
    invoke_trainer(cfg, dir.path(), "iter_1/trainset.jsonl", "m0");
    FAIL();
  } catch (const TrainerError& e) {
    EXPECT_EQ(text::trim(e.captured_stderr()), "boom");
    EXPECT_NE(std::string(e.what()).find("status 1"), std::string::npos);
  }
}

TEST_F(TrainerFixture, MissingOrEmptyOutput) {
  cfg.trainer_command = "true";
  EXPECT_THROW(invoke_trainer(cfg, dir.path(), "iter_1/trainset.jsonl", "m0"), TrainerError);
  cfg.trainer_command = "printf '\\n' > {output_model}";
  EXPECT_THROW(invoke_trainer(cfg, dir.path(), "iter_1/trainset.jsonl", "m0"), TrainerError);
  write_file_atomic(dir / "iter_1" / "trainset.jsonl", "");
  cfg.trainer_command = "echo x > {output_model}";
  EXPECT_THROW(invoke_trainer(cfg, dir.path(), "iter_1/trainset.jsonl", "m0"), TrainerError);
}

TEST_F(TrainerFixture, MockTrainer) {
  cfg.trainer_command = stltest::mock_trainer_command();
  auto inv = invoke_trainer(cfg, dir.path(), "iter_1/trainset.jsonl", "m0");
  EXPECT_EQ(inv.model_id, "m0-ft-" + sha256_hex(read_file(dir / "iter_1" / "trainset.jsonl")).substr(0, 8));
}

TEST(Config, DefaultsAndErrors) {
  const std::string base =
      R"({"variant": "STL", "train_split": "t.jsonl", "eval_split": "e.jsonl", "output_dir": "out",
          "endpoint": {"model_id": "m", "base_url": "http://x"}, "trainer_command": "train {trainset}")";
  auto c = RunConfig::parse(base + "}", "/cfg");
  EXPECT_EQ(c.max_iterations, 3);
  EXPECT_EQ(c.epsilon, 0.5);
  EXPECT_EQ(c.parallelism, 4u);
  EXPECT_EQ(c.parser_mode, ParseMode::kLenient);
  EXPECT_EQ(c.resolve("t.jsonl"), fs::path("/cfg/t.jsonl"));
  EXPECT_EQ(c.effective_eval_mode(), EvalMode::kPositiveTemplate);
  EXPECT_NO_THROW(c.validate());

  EXPECT_THROW(RunConfig::parse(base + R"(, "bogus": 1})"), ConfigError);
  EXPECT_THROW(RunConfig::parse(base + R"(, "variant": "STL2"})").validate(), Error);
  EXPECT_THROW(RunConfig::parse(base + R"(, "max_iterations": 0})").validate(), ConfigError);
  EXPECT_THROW(RunConfig::parse(base + R"(, "epsilon": -1})").validate(), ConfigError);
  EXPECT_THROW(RunConfig::parse("{not json"), ConfigError);
  EXPECT_THROW(RunConfig::parse(R"({"variant": "STL"})").validate(), ConfigError);

  auto direct = RunConfig::parse(R"({"variant": "DIRECT_SFT", "train_split": "t.jsonl", "eval_split": "e.jsonl",
      "output_dir": "out", "endpoint": {"model_id": "m", "base_url": "http://x"}, "trainer_command": "t"})");
  EXPECT_EQ(direct.effective_eval_mode(), EvalMode::kDirect);
}

TEST(Config, DigestIgnoresOutputDirOnly) {
  const std::string a =
      R"({"variant": "STL", "train_split": "t.jsonl", "eval_split": "e.jsonl", "output_dir": "out-a",
          "endpoint": {"model_id": "m", "base_url": "http://x"}, "trainer_command": "t"})";
  std::string b = a;
  b.replace(b.find("out-a"), 5, "out-b");
  std::string c = a;
  c.replace(c.find("\"t\"}"), 3, "\"u\"");
  EXPECT_EQ(RunConfig::parse(a).digest(), RunConfig::parse(b).digest());
  EXPECT_NE(RunConfig::parse(a).digest(), RunConfig::parse(c).digest());
  EXPECT_EQ(RunConfig::parse(RunConfig::parse(a).to_json()).to_json(), RunConfig::parse(a).to_json());
}

}  // namespace
}  // namespace stlearn
