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


#include <csignal>
#include <filesystem>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "json.hpp"
#include "stlearn/annotation.hpp"
#include "stlearn/evaluation.hpp"
#include "stlearn/orchestrator.hpp"
#include "stlearn/rationale_parser.hpp"
#include "stlearn/text.hpp"
#include "stlearn/util.hpp"

namespace fs = std::filesystem;
using namespace stlearn;

namespace {

struct GatewayFlags {
  std::string endpoint;
  std::size_t parallelism = 0;
  std::string record;
  std::string replay;

  void add_to(CLI::App* app) {
    app->add_option("--endpoint", endpoint, "Chat-completions base URL (overrides the config)");
    app->add_option("--parallelism", parallelism, "Concurrent model calls (overrides the config)");
    app->add_option("--record", record, "Append successful replies to this transcript");
    app->add_option("--replay", replay, "Serve replies only from this transcript");
  }

  // Overrides are part of the config digest; resume must be given the same flags.
  void apply(RunConfig& c) const {
    if (!endpoint.empty()) c.endpoint.base_url = endpoint;
    if (parallelism > 0) c.parallelism = parallelism;
    if (!record.empty()) c.record_transcript = fs::absolute(record).string();
    if (!replay.empty()) c.replay_transcript = fs::absolute(replay).string();
    if (!record.empty() || !replay.empty()) {
      if (!record.empty() && !replay.empty()) throw ConfigError("--record and --replay are mutually exclusive");
      if (!record.empty()) c.replay_transcript.clear();
      if (!replay.empty()) c.record_transcript.clear();
    }
    c.validate();
  }
};

void print_summary(const RunManifest& m) {
  std::cout << "status: " << to_string(m.status);
  if (!m.reason.empty()) std::cout << " (" << m.reason << ")";
  std::cout << "\n";
  for (const auto& it : m.iterations) {
    std::cout << "iter " << it.n << ": " << it.input_model << " -> "
              << (it.produced_model_id.empty() ? "-" : it.produced_model_id) << ", trainset " << it.trainset_size;
    if (it.eval) std::cout << ", macro " << it.eval->macro().str();
    std::cout << "\n";
  }
  std::cout << "lineage:";
  for (const auto& id : m.lineage()) std::cout << " " << id;
  std::cout << "\n";
}

int exit_code(const RunManifest& m) { return m.status == RunStatus::kFailed ? 1 : 0; }

std::vector<std::string> read_responses(const fs::path& path) {
  std::vector<std::string> out;
  if (path.extension() != ".jsonl") {
    out.push_back(read_file(path));
    return out;
  }
  for_each_line(path, [&](std::string_view line, std::size_t n) {
    if (text::trim(line).empty()) return;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back(j.is_string() ? j.get<std::string>() : j.at("raw_text").get<std::string>());
    } catch (const std::exception& e) {
      throw RecordError(path.string(), n, "expected a JSON string or an object with raw_text");
    }
  });
  return out;
}

std::string parse_one(const std::string& kind, const std::string& raw, ParseMode mode,
                      const std::vector<std::string>& choices) {
  nlohmann::ordered_json out;
  auto fail = [&](const ParseError& e) {
    out["ok"] = false;
    out["error"] = e.message();
  };
  if (kind == "positive" || kind == "uncaptioned") {
    auto r = kind == "positive" ? parse_positive(raw, mode) : parse_uncaptioned(raw, mode);
    if (!r) {
      fail(r.error());
    } else {
      out["ok"] = true;
      if (kind == "positive") out["caption"] = r->caption;
      out["reasoning"] = r->reasoning;
      out["conclusion"] = r->conclusion_raw;
      if (choices.size() >= 2) {
        const AnswerMatch m = extract_answer(r->conclusion_raw, choices);
        out["answer"] = to_string(m.status);
        if (m.matched()) out["predicted_index"] = m.index;
      }
    }
  } else if (kind == "negative") {
    auto r = parse_negative(raw, mode);
    if (!r) {
      fail(r.error());
    } else {
      out["ok"] = true;
      out["caption"] = r->caption;
      out["explanation"] = r->explanation;
    }
  } else {
    auto r = parse_conclusion(raw, mode);
    if (!r) {
      fail(r.error());
    } else {
      out["ok"] = true;
      out["conclusion"] = r.value();
    }
  }
  return out.dump();
}

AnnotationServer* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-training loop for vision-language models with structured rationales"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Start a run from a config file");
  std::string config_path;
  GatewayFlags run_flags;
  int halt_after = 0;
  run->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  run_flags.add_to(run);
  run->add_option("--halt-after", halt_after, "Stop after this many iterations (resume later)");

  // resume
  auto* resume = app.add_subcommand("resume", "Continue a run from its manifest");
  std::string manifest_path;
  GatewayFlags resume_flags;
  resume->add_option("--manifest", manifest_path, "manifest.jsonl of the run")->required()->check(CLI::ExistingFile);
  resume_flags.add_to(resume);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate one model on a split");
  std::string eval_model, eval_split, eval_mode = "positive_template", eval_out, eval_parser = "lenient", eval_label;
  GatewayFlags eval_flags;
  eval->add_option("--model", eval_model, "Model id")->required();
  eval->add_option("--split", eval_split, "Dataset split (JSONL)")->required()->check(CLI::ExistingFile);
  eval->add_option("--mode", eval_mode, "direct | cot | positive_template | uncaptioned");
  eval->add_option("--parser-mode", eval_parser, "strict | lenient");
  eval->add_option("--label", eval_label, "Row label in reports");
  eval->add_option("--out", eval_out, "Directory for eval_records.jsonl and eval_report.json");
  eval_flags.add_to(eval);

  // report
  auto* report = app.add_subcommand("report", "Render accuracy and preference tables");
  std::vector<std::string> report_runs, report_evals, report_judgments;
  std::string report_format = "table";
  int annotators_per_sample = 3;
  report->add_option("--run", report_runs, "Run directory or its manifest (one row per evaluated iteration)");
  report->add_option("--eval", report_evals, "eval_report.json from a standalone evaluation");
  report->add_option("--judgments", report_judgments, "Judgment log (JSONL) or export (JSON array)");
  report->add_option("--annotators-per-sample", annotators_per_sample, "Odd number of judgments per task");
  report->add_option("--format", report_format, "table | delimited");

  // parse
  auto* parse = app.add_subcommand("parse", "Parse raw responses and print one JSON record each");
  std::string parse_kind = "positive", parse_mode_str = "lenient", parse_file;
  std::vector<std::string> parse_choices;
  parse->add_option("--kind", parse_kind, "positive | negative | uncaptioned | conclusion")
      ->check(CLI::IsMember({"positive", "negative", "uncaptioned", "conclusion"}));
  parse->add_option("--mode", parse_mode_str, "strict | lenient");
  parse->add_option("--choice", parse_choices, "Answer choices, in order, for answer extraction");
  parse->add_option("file", parse_file, "Text file (one response) or .jsonl (one per line)")
      ->required()
      ->check(CLI::ExistingFile);

  // annotate-pool
  auto* pool_cmd = app.add_subcommand("annotate-pool", "Build a blinded pairwise annotation pool");
  std::string pool_split, pool_out;
  std::vector<std::string> pool_methods, pool_annotators;
  std::size_t pool_quota = 150;
  std::uint64_t pool_seed = 0;
  bool pool_any = false;
  pool_cmd->add_option("--split", pool_split, "Split both runs evaluated")->required()->check(CLI::ExistingFile);
  pool_cmd->add_option("--method", pool_methods, "NAME=eval_records.jsonl (exactly two)")->required()->expected(2);
  pool_cmd->add_option("--quota", pool_quota, "Tasks per domain");
  pool_cmd->add_option("--seed", pool_seed, "Sampling and side-assignment seed");
  pool_cmd->add_option("--annotator", pool_annotators, "Annotator id (repeatable)");
  pool_cmd->add_flag("--any-outcome", pool_any, "Do not require both methods to be correct");
  pool_cmd->add_option("--out", pool_out, "Pool file to write")->required();

  // annotate-serve
  auto* serve = app.add_subcommand("annotate-serve", "Serve the annotation API");
  std::string serve_pool, serve_log, serve_host = "127.0.0.1", serve_static;
  std::vector<std::string> serve_annotators;
  int serve_port = 8080;
  serve->add_option("--pool", serve_pool, "Pool file")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", serve_port, "Port (0 picks one)");
  serve->add_option("--host", serve_host, "Bind address");
  serve->add_option("--log", serve_log, "Judgment log (default: <pool>.judgments.jsonl)");
  serve->add_option("--annotator", serve_annotators, "Annotator id (repeatable; default: from the pool)");
  serve->add_option("--static", serve_static, "Directory with the UI bundle");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      RunConfig config = RunConfig::load(config_path);
      run_flags.apply(config);
      Orchestrator orch(std::move(config));
      RunOptions opts;
      if (halt_after > 0) opts.stop_after_iterations = halt_after;
      RunManifest m;
      try {
        m = orch.run(opts);
      } catch (const TrainerError& e) {
        m = read_manifest(orch.manifest_path());
      }
      print_summary(m);
      return exit_code(m);
    }

    if (resume->parsed()) {
      const RunManifest before = read_manifest(manifest_path);
      RunConfig config = RunConfig::load(before.config_path);
      resume_flags.apply(config);
      if (config.digest() != before.config_digest) {
        throw ManifestError("config digest mismatch: manifest has " + before.config_digest + ", " +
                            before.config_path + " with these flags hashes to " + config.digest());
      }
      if (before.status == RunStatus::kConverged) {
        print_summary(before);
        return 0;
      }
      config.output_dir = fs::absolute(manifest_path).parent_path().string();
      Orchestrator orch(std::move(config));
      RunManifest m;
      try {
        m = orch.resume();
      } catch (const TrainerError& e) {
        m = read_manifest(orch.manifest_path());
      }
      print_summary(m);
      return exit_code(m);
    }

    if (eval->parsed()) {
      RunConfig c;  // only the gateway fields matter here
      c.endpoint.model_id = eval_model;
      c.parallelism = eval_flags.parallelism > 0 ? eval_flags.parallelism : 4;
      c.endpoint.base_url = eval_flags.endpoint;
      if (!eval_flags.record.empty()) c.record_transcript = eval_flags.record;
      if (!eval_flags.replay.empty()) c.replay_transcript = eval_flags.replay;
      if (c.endpoint.base_url.empty() && c.replay_transcript.empty()) {
        throw ConfigError("eval needs --endpoint or --replay");
      }
      Gateway gateway(make_backend(c), c.gateway_options());
      const DatasetSplit split = load_dataset(eval_split);
      EvalOutcome out = evaluate_split(gateway, c.endpoint, split, eval_mode_from_string(eval_mode),
                                       {parse_mode_from_string(eval_parser), c.parallelism});
      if (!eval_label.empty()) out.report.label = eval_label;
      if (!eval_out.empty()) {
        fs::create_directories(eval_out);
        std::string lines;
        for (const auto& r : out.records) lines += serialize_eval_record(r) + "\n";
        write_file_atomic(fs::path(eval_out) / "eval_records.jsonl", lines);
        write_file_atomic(fs::path(eval_out) / "eval_report.json", eval_report_to_json(out.report) + "\n");
      }
      const std::vector<EvalReport> reports{out.report};
      std::cout << render_report(reports, {}, ReportFormat::kTable);
      return 0;
    }

    if (report->parsed()) {
      std::vector<EvalReport> reports;
      for (const auto& path : report_runs) {
        const fs::path manifest = fs::is_directory(path) ? fs::path(path) / kManifestFileName : fs::path(path);
        const RunManifest m = read_manifest(manifest);
        const std::string variant = nlohmann::json::parse(m.config_json).value("variant", "run");
        for (const auto& it : m.iterations) {
          if (!it.eval) continue;
          EvalReport r = *it.eval;
          r.label = variant + " n=" + std::to_string(it.n);
          reports.push_back(std::move(r));
        }
      }
      for (const auto& path : report_evals) reports.push_back(eval_report_from_json(read_file(path)));
      std::vector<PreferenceSummary> prefs;
      for (const auto& path : report_judgments) {
        std::vector<PreferenceJudgment> judgments;
        const std::string body = text::trim(read_file(path));
        if (!body.empty() && body.front() == '[') {
          for (const auto& j : nlohmann::json::parse(body)) judgments.push_back(parse_judgment(j.dump()));
        } else {
          for_each_line(path, [&](std::string_view line, std::size_t) {
            if (!text::trim(line).empty()) judgments.push_back(parse_judgment(line));
          });
        }
        prefs.push_back(aggregate_preferences(judgments, annotators_per_sample));
      }
      std::cout << render_report(reports, prefs, report_format_from_string(report_format));
      return 0;
    }

    if (parse->parsed()) {
      const ParseMode mode = parse_mode_from_string(parse_mode_str);
      for (const auto& raw : read_responses(parse_file)) {
        std::cout << parse_one(parse_kind, raw, mode, parse_choices) << "\n";
      }
      return 0;
    }

    if (pool_cmd->parsed()) {
      std::vector<MethodRationales> methods;
      for (const auto& spec : pool_methods) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) throw Error("--method expects NAME=eval_records.jsonl");
        methods.push_back(load_method_rationales(spec.substr(0, eq), spec.substr(eq + 1)));
      }
      const DatasetSplit split = load_dataset(pool_split);
      TaskPool pool = build_task_pool(methods[0], methods[1], split, {pool_quota, pool_seed, !pool_any});
      pool.annotators = pool_annotators;
      save_pool(pool, pool_out);
      std::cout << "wrote " << pool.tasks.size() << " tasks to " << pool_out << "\n";
      return 0;
    }

    if (serve->parsed()) {
      TaskPool pool = load_pool(serve_pool);
      const std::string log = serve_log.empty() ? serve_pool + ".judgments.jsonl" : serve_log;
      AnnotationStore store(std::move(pool), serve_annotators, log);
      ServerOptions opts{serve_host, serve_port, std::nullopt};
      if (!serve_static.empty()) opts.static_dir = serve_static;
      AnnotationServer server(store, opts);
      const int port = server.bind();
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving " << store.pool().tasks.size() << " tasks on http://" << serve_host << ":" << port
                << std::endl;
      server.serve();
      g_server = nullptr;
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "stlearn: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
