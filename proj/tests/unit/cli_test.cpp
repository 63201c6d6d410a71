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

#include <cstdio>

#include "json.hpp"
#include "stlearn/orchestrator.hpp"
#include "stlearn/util.hpp"
#include "world.hpp"

namespace stlearn {
namespace {

using stltest::TempDir;

struct CommandResult {
  int status = 0;
  std::string out;
};

CommandResult run_cli(const std::string& args) {
  const std::string cmd = shell_quote(STLEARN_CLI) + " " + args + " 2>&1";
  CommandResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (p == nullptr) return {-1, {}};
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int st = ::pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

TEST(Cli, ParsePrintsOneRecordPerInput) {
  TempDir dir("cli");
  write_file_atomic(dir / "r.txt", "###CAPTION: x\n###REASONING: y\n###CONCLUSION: (B) dog");
  auto r = run_cli("parse " + shell_quote((dir / "r.txt").string()) + " --kind positive --choice cat --choice dog");
  ASSERT_EQ(r.status, 0) << r.out;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["ok"], true);
  EXPECT_EQ(j["predicted_index"], 1);

  write_file_atomic(dir / "bad.txt", "no sections here");
  r = run_cli("parse " + shell_quote((dir / "bad.txt").string()) + " --kind negative --mode strict");
  auto bad = nlohmann::json::parse(r.out);
  EXPECT_EQ(bad["ok"], false);
  EXPECT_EQ(bad["error"], "MissingSection(CAPTION)");
}

TEST(Cli, ReplayedRunMatchesLibraryRun) {
  TempDir dir("cli");
  auto train = stltest::write_synthetic_split(dir.path(), "train", 12);
  auto eval = stltest::write_synthetic_split(dir.path(), "eval", 6);
  stltest::Policy p;
  p.correct = [](int depth, const stltest::ItemRef& item) { return depth > 0 || item.index % 3 != 0; };

  write_file_atomic(dir / "rec.json", stltest::run_config_json("STL", train, eval, dir / "rec", 2,
                                                                "\"epsilon\": 0, \"gateway\": {\"record\": \"t.jsonl\"}"));
  Orchestrator(RunConfig::load(dir / "rec.json"), std::make_shared<stltest::ScriptedWorld>(p)).run();

  write_file_atomic(dir / "lib.json", stltest::run_config_json("STL", train, eval, dir / "lib", 2,
                                                                "\"epsilon\": 0, \"gateway\": {\"replay\": \"t.jsonl\"}"));
  const auto lib = Orchestrator(RunConfig::load(dir / "lib.json")).run();

  write_file_atomic(dir / "cli.json", stltest::run_config_json("STL", train, eval, dir / "cli", 2, "\"epsilon\": 0"));
  auto r = run_cli("run --config " + shell_quote((dir / "cli.json").string()) + " --replay " +
                   shell_quote((dir / "t.jsonl").string()) + " --halt-after 1");
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_EQ(read_manifest(dir / "cli" / "manifest.jsonl").iterations.size(), 1u);
  r = run_cli("resume --manifest " + shell_quote((dir / "cli" / "manifest.jsonl").string()) + " --replay " +
              shell_quote((dir / "t.jsonl").string()));
  ASSERT_EQ(r.status, 0) << r.out;
  const auto cli = read_manifest(dir / "cli" / "manifest.jsonl");
  ASSERT_EQ(cli.iterations.size(), 2u);
  EXPECT_EQ(cli.lineage(), lib.lineage());
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(cli.iterations[i].counts, lib.iterations[i].counts);

  r = run_cli("report --format delimited --run " + shell_quote((dir / "cli").string()));
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_EQ(r.out, "method,commonsense,average\nSTL n=1,100.00,100.00\nSTL n=2,100.00,100.00\n");

  r = run_cli("resume --manifest " + shell_quote((dir / "cli" / "manifest.jsonl").string()));
  EXPECT_NE(r.status, 0) << "a resume without the run's --replay flag hashes to another config";
}

TEST(Cli, UsageErrorsExitNonzero) {
  EXPECT_NE(run_cli("run").status, 0);
  EXPECT_NE(run_cli("frobnicate").status, 0);
  EXPECT_EQ(run_cli("--help").status, 0);
}

}  // namespace
}  // namespace stlearn
