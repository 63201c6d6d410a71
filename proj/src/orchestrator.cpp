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


#include "stlearn/orchestrator.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <set>

#include "json.hpp"
#include "stlearn/prompts.hpp"
#include "stlearn/text.hpp"
#include "stlearn/util.hpp"

namespace stlearn {

namespace fs = std::filesystem;

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr std::string_view kManifestFormat = "stlearn-manifest/1";

template <typename T>
T take(const json& obj, const char* key, T fallback) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

void reject_unknown(const json& obj, std::initializer_list<std::string_view> known, std::string_view where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ConfigError("unknown config field '" + std::string(where) + it.key() + "'");
    }
  }
}

std::string iter_dir_name(int n) { return "iter_" + std::to_string(n); }

}  // namespace

// ---- config --------------------------------------------------------------

RunConfig RunConfig::parse(std::string_view json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j,
                 {"variant", "train_split", "eval_split", "endpoint", "trainer_command", "max_iterations", "epsilon",
                  "parallelism", "parser_mode", "seed", "output_dir", "samples_per_item", "cumulative",
                  "reuse_positive_caption", "incremental_training", "eval_mode", "gateway"},
                 "");

  RunConfig c;
  c.base_dir = base_dir;
  try {
    c.variant = variant_from_string(take<std::string>(j, "variant", "STL"));
    c.parser_mode = parse_mode_from_string(take<std::string>(j, "parser_mode", "lenient"));
    if (j.contains("eval_mode")) c.eval_mode = eval_mode_from_string(take<std::string>(j, "eval_mode", ""));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  c.train_split = take<std::string>(j, "train_split", "");
  c.eval_split = take<std::string>(j, "eval_split", "");
  c.trainer_command = take<std::string>(j, "trainer_command", "");
  c.max_iterations = take<int>(j, "max_iterations", 3);
  c.epsilon = take<double>(j, "epsilon", 0.5);
  c.parallelism = take<std::size_t>(j, "parallelism", 4);
  c.seed = take<std::int64_t>(j, "seed", 0);
  c.output_dir = take<std::string>(j, "output_dir", "");
  c.samples_per_item = take<int>(j, "samples_per_item", 1);
  c.cumulative = take<bool>(j, "cumulative", false);
  c.reuse_positive_caption = take<bool>(j, "reuse_positive_caption", false);
  c.incremental_training = take<bool>(j, "incremental_training", false);

  const json ep = j.value("endpoint", json::object());
  if (!ep.is_object()) throw ConfigError("config field 'endpoint' must be an object");
  reject_unknown(ep, {"model_id", "base_url", "temperature", "max_tokens", "seed", "auth_ref"}, "endpoint.");
  c.endpoint.model_id = take<std::string>(ep, "model_id", "");
  c.endpoint.base_url = take<std::string>(ep, "base_url", "");
  c.endpoint.decoding.temperature = take<double>(ep, "temperature", 0.0);
  c.endpoint.decoding.max_tokens = take<int>(ep, "max_tokens", 1024);
  c.endpoint.decoding.seed = take<std::int64_t>(ep, "seed", c.seed);
  if (ep.contains("auth_ref") && !ep["auth_ref"].is_null()) c.endpoint.auth_ref = take<std::string>(ep, "auth_ref", "");

  const json gw = j.value("gateway", json::object());
  if (!gw.is_object()) throw ConfigError("config field 'gateway' must be an object");
  reject_unknown(gw, {"max_retries", "initial_backoff_ms", "timeout_ms", "max_image_bytes", "record", "replay"},
                 "gateway.");
  c.max_retries = take<int>(gw, "max_retries", 3);
  c.initial_backoff_ms = take<std::int64_t>(gw, "initial_backoff_ms", 500);
  c.timeout_ms = take<std::int64_t>(gw, "timeout_ms", 120000);
  c.max_image_bytes = take<std::size_t>(gw, "max_image_bytes", 4u << 20);
  c.record_transcript = take<std::string>(gw, "record", "");
  c.replay_transcript = take<std::string>(gw, "replay", "");

  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  fs::path abs = fs::absolute(path).lexically_normal();
  RunConfig c = parse(text, abs.parent_path());
  c.source_path = abs;
  return c;
}

void RunConfig::validate() const {
  if (train_split.empty()) throw ConfigError("train_split is required");
  if (eval_split.empty()) throw ConfigError("eval_split is required");
  if (output_dir.empty()) throw ConfigError("output_dir is required");
  if (trainer_command.empty()) throw ConfigError("trainer_command is required");
  if (max_iterations < 1) throw ConfigError("max_iterations must be at least 1");
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
  if (parallelism < 1) throw ConfigError("parallelism must be at least 1");
  if (samples_per_item < 1) throw ConfigError("samples_per_item must be at least 1");
  if (max_retries < 0) throw ConfigError("gateway.max_retries must be non-negative");
  if (initial_backoff_ms < 0 || timeout_ms <= 0) throw ConfigError("gateway timings must be positive");
  if (!record_transcript.empty() && !replay_transcript.empty()) {
    throw ConfigError("gateway.record and gateway.replay are mutually exclusive");
  }
  if (reuse_positive_caption && variant != Variant::kStl) {
    throw ConfigError("reuse_positive_caption only applies to the STL variant");
  }
  try {
    endpoint.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("endpoint: ") + e.what());
  }
}

std::string RunConfig::to_json(bool include_output_dir) const {
  // json (not ordered_json) sorts keys, which makes the dump canonical.
  json j;
  j["variant"] = std::string(to_string(variant));
  j["train_split"] = train_split;
  j["eval_split"] = eval_split;
  json ep;
  ep["model_id"] = endpoint.model_id;
  ep["base_url"] = endpoint.base_url;
  ep["temperature"] = endpoint.decoding.temperature;
  ep["max_tokens"] = endpoint.decoding.max_tokens;
  ep["seed"] = endpoint.decoding.seed ? json(*endpoint.decoding.seed) : json(nullptr);
  ep["auth_ref"] = endpoint.auth_ref ? json(*endpoint.auth_ref) : json(nullptr);
  j["endpoint"] = ep;
  j["trainer_command"] = trainer_command;
  j["max_iterations"] = max_iterations;
  j["epsilon"] = epsilon;
  j["parallelism"] = parallelism;
  j["parser_mode"] = std::string(to_string(parser_mode));
  j["seed"] = seed;
  if (include_output_dir) j["output_dir"] = output_dir;
  j["samples_per_item"] = samples_per_item;
  j["cumulative"] = cumulative;
  j["reuse_positive_caption"] = reuse_positive_caption;
  j["incremental_training"] = incremental_training;
  j["eval_mode"] = std::string(to_string(effective_eval_mode()));
  json gw;
  gw["max_retries"] = max_retries;
  gw["initial_backoff_ms"] = initial_backoff_ms;
  gw["timeout_ms"] = timeout_ms;
  gw["max_image_bytes"] = max_image_bytes;
  gw["record"] = record_transcript;
  gw["replay"] = replay_transcript;
  j["gateway"] = gw;
  return j.dump();
}

std::string RunConfig::digest() const { return sha256_hex(to_json(false)); }

fs::path RunConfig::resolve(const std::string& p) const {
  fs::path path(p);
  if (path.is_absolute() || base_dir.empty()) return path.lexically_normal();
  return (base_dir / path).lexically_normal();
}

EvalMode RunConfig::effective_eval_mode() const {
  if (eval_mode) return *eval_mode;
  switch (variant) {
    case Variant::kStlNoCapNeg: return EvalMode::kUncaptioned;
    case Variant::kDirectSft: return EvalMode::kDirect;
    default: return EvalMode::kPositiveTemplate;
  }
}

GatewayOptions RunConfig::gateway_options() const {
  GatewayOptions o;
  o.retry.max_retries = max_retries;
  o.retry.initial_backoff = std::chrono::milliseconds(initial_backoff_ms);
  o.max_encoded_image_bytes = max_image_bytes;
  return o;
}

// ---- manifest ------------------------------------------------------------

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::kRunning: return "running";
    case RunStatus::kConverged: return "converged";
    case RunStatus::kFailed: return "failed";
  }
  return "?";
}

std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::kMaxIterations: return "max_iterations";
    case StopReason::kPlateau: return "plateau";
    case StopReason::kNoPositiveData: return "no_positive_data";
  }
  return "?";
}

std::vector<std::string> RunManifest::lineage() const {
  std::vector<std::string> out{base_model};
  for (const auto& it : iterations) {
    if (it.outcome == IterationOutcome::kComplete) out.push_back(it.produced_model_id);
  }
  return out;
}

namespace {

ordered_json counts_to_json(const IterationCounts& c) {
  ordered_json j;
  j["generations"] = c.generations;
  j["generation_failures"] = c.generation_failures;
  j["positives"] = c.positives;
  j["incorrect"] = c.incorrect;
  j["negative_requests"] = c.negative_requests;
  j["negatives"] = c.negatives;
  j["rationalization_requests"] = c.rationalization_requests;
  j["star_rationalized"] = c.star_rationalized;
  j["parse_failures"] = c.parse_failures;
  return j;
}

IterationCounts counts_from_json(const ordered_json& j) {
  IterationCounts c;
  c.generations = j.at("generations").get<std::size_t>();
  c.generation_failures = j.at("generation_failures").get<std::size_t>();
  c.positives = j.at("positives").get<std::size_t>();
  c.incorrect = j.at("incorrect").get<std::size_t>();
  c.negative_requests = j.at("negative_requests").get<std::size_t>();
  c.negatives = j.at("negatives").get<std::size_t>();
  c.rationalization_requests = j.at("rationalization_requests").get<std::size_t>();
  c.star_rationalized = j.at("star_rationalized").get<std::size_t>();
  for (const auto& [k, v] : j.at("parse_failures").items()) c.parse_failures[k] = v.get<std::size_t>();
  return c;
}

std::vector<ordered_json> manifest_lines(const RunManifest& m) {
  std::vector<ordered_json> lines;
  ordered_json h;
  h["kind"] = "header";
  h["format"] = kManifestFormat;
  h["config_digest"] = m.config_digest;
  h["config"] = m.config_json.empty() ? ordered_json::object() : ordered_json::parse(m.config_json);
  h["config_path"] = m.config_path;
  h["base_model"] = m.base_model;
  h["parser_mode"] = to_string(m.parser_mode);
  h["created_at"] = m.created_at;
  lines.push_back(std::move(h));

  for (const auto& it : m.iterations) {
    ordered_json j;
    j["kind"] = "iteration";
    j["n"] = it.n;
    j["input_model"] = it.input_model;
    j["outcome"] = it.outcome == IterationOutcome::kComplete ? "complete" : "no_positive_data";
    j["counts"] = counts_to_json(it.counts);
    j["trainset"] = {{"path", it.trainset_path}, {"size", it.trainset_size}, {"tags", it.trainset_tags}};
    j["trainer"] = {{"command", it.trainer_command},
                    {"base_model", it.trainer_base_model},
                    {"produced_model", it.produced_model_id}};
    j["eval"] = it.eval ? ordered_json::parse(eval_report_to_json(*it.eval)) : ordered_json(nullptr);
    j["started_at"] = it.started_at;
    j["finished_at"] = it.finished_at;
    lines.push_back(std::move(j));
  }

  ordered_json s;
  s["kind"] = "status";
  s["status"] = to_string(m.status);
  s["reason"] = m.reason;
  s["lineage"] = m.lineage();
  s["updated_at"] = m.updated_at;
  lines.push_back(std::move(s));
  return lines;
}

}  // namespace

std::string serialize_manifest(const RunManifest& m) {
  std::string out;
  for (const auto& line : manifest_lines(m)) {
    out += line.dump();
    out += '\n';
  }
  return out;
}

RunManifest parse_manifest(std::string_view text, const std::string& origin) {
  RunManifest m;
  std::size_t line_no = 0;
  bool have_header = false;
  bool have_status = false;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (text::trim(line).empty()) continue;
    auto fail = [&](const std::string& what) -> ManifestError {
      return ManifestError(origin + ":" + std::to_string(line_no) + ": " + what);
    };
    if (have_status) throw fail("content after the status line");
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const ordered_json::parse_error&) {
      throw fail("not valid JSON");
    }
    try {
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "header") {
        if (have_header) throw fail("second header");
        if (j.at("format").get<std::string>() != kManifestFormat) throw fail("unsupported manifest format");
        have_header = true;
        m.config_digest = j.at("config_digest").get<std::string>();
        // Stored sorted, so dumping as json reproduces the canonical form.
        m.config_json = json::parse(j.at("config").dump()).dump();
        m.config_path = j.at("config_path").get<std::string>();
        m.base_model = j.at("base_model").get<std::string>();
        m.parser_mode = parse_mode_from_string(j.at("parser_mode").get<std::string>());
        m.created_at = j.at("created_at").get<std::string>();
        if (sha256_hex(m.config_json) != m.config_digest) throw fail("config digest does not match embedded config");
      } else if (kind == "iteration") {
        if (!have_header) throw fail("iteration before header");
        IterationRecord it;
        it.n = j.at("n").get<int>();
        if (it.n != static_cast<int>(m.iterations.size()) + 1) throw fail("iteration numbers are not consecutive");
        it.input_model = j.at("input_model").get<std::string>();
        const std::string outcome = j.at("outcome").get<std::string>();
        if (outcome == "complete") {
          it.outcome = IterationOutcome::kComplete;
        } else if (outcome == "no_positive_data") {
          it.outcome = IterationOutcome::kNoPositiveData;
        } else {
          throw fail("unknown iteration outcome '" + outcome + "'");
        }
        it.counts = counts_from_json(j.at("counts"));
        const auto& ts = j.at("trainset");
        it.trainset_path = ts.at("path").get<std::string>();
        it.trainset_size = ts.at("size").get<std::size_t>();
        for (const auto& [k, v] : ts.at("tags").items()) it.trainset_tags[k] = v.get<std::size_t>();
        const auto& tr = j.at("trainer");
        it.trainer_command = tr.at("command").get<std::string>();
        it.trainer_base_model = tr.at("base_model").get<std::string>();
        it.produced_model_id = tr.at("produced_model").get<std::string>();
        if (!j.at("eval").is_null()) it.eval = eval_report_from_json(j.at("eval").dump());
        it.started_at = j.at("started_at").get<std::string>();
        it.finished_at = j.at("finished_at").get<std::string>();
        m.iterations.push_back(std::move(it));
      } else if (kind == "status") {
        if (!have_header) throw fail("status before header");
        have_status = true;
        const std::string st = j.at("status").get<std::string>();
        if (st == "running") {
          m.status = RunStatus::kRunning;
        } else if (st == "converged") {
          m.status = RunStatus::kConverged;
        } else if (st == "failed") {
          m.status = RunStatus::kFailed;
        } else {
          throw fail("unknown status '" + st + "'");
        }
        m.reason = j.at("reason").get<std::string>();
        m.updated_at = j.at("updated_at").get<std::string>();
      } else {
        throw fail("unknown line kind '" + kind + "'");
      }
    } catch (const ordered_json::exception& e) {
      throw fail(std::string("malformed record: ") + e.what());
    } catch (const ManifestError&) {
      throw;
    } catch (const Error& e) {
      throw fail(e.what());
    }
  }
  if (!have_header) throw ManifestError(origin + ": missing header line");
  if (!have_status) throw ManifestError(origin + ": missing status line");
  return m;
}

RunManifest read_manifest(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ManifestError(e.what());
  }
  return parse_manifest(text, path.string());
}

void write_manifest(const RunManifest& m, const fs::path& path) { write_file_atomic(path, serialize_manifest(m)); }

std::string manifest_digest(const RunManifest& m) {
  std::string canon;
  for (auto line : manifest_lines(m)) {
    for (const char* k : {"created_at", "started_at", "finished_at", "updated_at", "config_path"}) line.erase(k);
    canon += line.dump();
    canon += '\n';
  }
  return sha256_hex(canon);
}

// ---- convergence ---------------------------------------------------------

ConvergenceDecision check_convergence(const RunManifest& manifest, const RunConfig& config) {
  if (manifest.iterations.empty()) throw Error("convergence check needs at least one iteration");
  const IterationRecord& last = manifest.iterations.back();
  if (last.outcome == IterationOutcome::kNoPositiveData) return {true, StopReason::kNoPositiveData};
  if (manifest.iterations.size() >= 2) {
    const IterationRecord& prev = manifest.iterations[manifest.iterations.size() - 2];
    if (last.eval && prev.eval) {
      // Compared in hundredths so 46.2 - 46.0 is exactly 0.20.
      const auto gain = last.eval->macro().hundredths() - prev.eval->macro().hundredths();
      if (static_cast<double>(gain) < config.epsilon * 100.0) return {true, StopReason::kPlateau};
    }
  }
  if (last.n >= config.max_iterations) return {true, StopReason::kMaxIterations};
  return {false, StopReason::kMaxIterations};
}

// ---- trainer -------------------------------------------------------------

std::string substitute_trainer_command(const std::string& templ, const std::string& trainset,
                                       const std::string& base_model, const std::string& output_model) {
  const std::pair<std::string_view, std::string> subs[] = {
      {"{trainset}", shell_quote(trainset)},
      {"{base_model}", shell_quote(base_model)},
      {"{output_model}", shell_quote(output_model)},
  };
  std::string out;
  std::size_t i = 0;
  while (i < templ.size()) {
    bool replaced = false;
    for (const auto& [key, value] : subs) {
      if (templ.compare(i, key.size(), key) == 0) {
        out += value;
        i += key.size();
        replaced = true;
        break;
      }
    }
    if (!replaced) out += templ[i++];
  }
  return out;
}

TrainerInvocation invoke_trainer(const RunConfig& config, const fs::path& workdir, const std::string& trainset_rel,
                                 const std::string& base_model_id) {
  const fs::path trainset = workdir / trainset_rel;
  std::error_code ec;
  if (!fs::exists(trainset, ec) || fs::file_size(trainset, ec) == 0) {
    throw TrainerError("refusing to train on an empty or missing trainset: " + trainset.string());
  }
  const fs::path rel_dir = fs::path(trainset_rel).parent_path();
  const std::string output_rel = (rel_dir / "model_id.txt").string();
  const std::string stdout_rel = (rel_dir / "trainer.stdout").string();
  const std::string stderr_rel = (rel_dir / "trainer.stderr").string();
  fs::remove(workdir / output_rel, ec);

  TrainerInvocation inv;
  inv.command_line = substitute_trainer_command(config.trainer_command, trainset_rel, base_model_id, output_rel);
  const std::string shell = "cd " + shell_quote(workdir.string()) + " && { " + inv.command_line + " ; } >" +
                            shell_quote(stdout_rel) + " 2>" + shell_quote(stderr_rel);
  const int status = std::system(shell.c_str());

  auto captured_stderr = [&] {
    try {
      std::string err = read_file(workdir / stderr_rel);
      if (err.size() > 4096) err = err.substr(err.size() - 4096);
      return err;
    } catch (const IoError&) {
      return std::string();
    }
  };
  if (status == -1) throw TrainerError("could not start the trainer shell");
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::string err = captured_stderr();
    throw TrainerError("trainer exited with status " + std::to_string(code) + (err.empty() ? "" : ": " + text::trim(err)),
                       err);
  }
  std::string produced;
  try {
    produced = read_file(workdir / output_rel);
  } catch (const IoError&) {
    throw TrainerError("trainer did not write " + output_rel, captured_stderr());
  }
  inv.model_id = text::trim(produced.substr(0, produced.find('\n')));
  if (inv.model_id.empty()) throw TrainerError("trainer wrote an empty model id to " + output_rel);
  return inv;
}

// ---- backend -------------------------------------------------------------

std::shared_ptr<Backend> make_backend(const RunConfig& config, std::shared_ptr<Backend> live,
                                      std::shared_ptr<HttpTransport> transport) {
  if (!config.replay_transcript.empty()) {
    return record_replay(nullptr, config.resolve(config.replay_transcript), TranscriptMode::kReplay);
  }
  if (!live) {
    if (!transport) transport = make_http_transport();
    live = std::make_shared<ChatCompletionsBackend>(std::move(transport),
                                                    std::chrono::milliseconds(config.timeout_ms));
  }
  if (!config.record_transcript.empty()) {
    return record_replay(std::move(live), config.resolve(config.record_transcript), TranscriptMode::kRecord);
  }
  return live;
}

// ---- orchestrator --------------------------------------------------------

namespace {

DatasetSplit load_split(const RunConfig& c, const std::string& ref) {
  DatasetSplit s = load_dataset(c.resolve(ref));
  if (s.empty()) throw ConfigError("split is empty: " + ref);
  return s;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) {
    text += l;
    text += '\n';
  }
  write_file_atomic(path, text);
}

}  // namespace

Orchestrator::Orchestrator(RunConfig config, std::shared_ptr<Backend> backend)
    : config_(std::move(config)),
      gateway_(make_backend(config_, std::move(backend)), config_.gateway_options()),
      train_(load_split(config_, config_.train_split)),
      eval_(load_split(config_, config_.eval_split)) {
  config_.validate();
}

fs::path Orchestrator::output_dir() const { return config_.resolve(config_.output_dir); }

RunManifest Orchestrator::run(const RunOptions& options) {
  if (fs::exists(manifest_path())) {
    throw ManifestError(manifest_path().string() + " already exists; resume it or choose another output_dir");
  }
  fs::create_directories(output_dir());
  RunManifest m;
  m.config_json = config_.to_json(false);
  m.config_digest = sha256_hex(m.config_json);
  m.config_path = config_.source_path.string();
  m.base_model = config_.endpoint.model_id;
  m.parser_mode = config_.parser_mode;
  m.created_at = utc_timestamp();
  m.updated_at = m.created_at;
  write_manifest(m, manifest_path());
  return loop(std::move(m), options);
}

RunManifest Orchestrator::resume(const RunOptions& options) {
  RunManifest m = read_manifest(manifest_path());
  if (m.config_digest != config_.digest()) {
    throw ManifestError("config digest mismatch: manifest has " + m.config_digest + ", config hashes to " +
                        config_.digest());
  }
  if (m.status == RunStatus::kConverged) return m;
  return loop(std::move(m), options);
}

RunManifest Orchestrator::loop(RunManifest m, const RunOptions& options) {
  m.status = RunStatus::kRunning;
  m.reason.clear();
  while (true) {
    if (options.stop_after_iterations && static_cast<int>(m.iterations.size()) >= *options.stop_after_iterations) {
      return m;
    }
    const int n = static_cast<int>(m.iterations.size()) + 1;
    const ModelEndpoint model = config_.endpoint.with_model(m.lineage().back());
    try {
      m.iterations.push_back(run_iteration(m, model, n));
    } catch (const TrainerError& e) {
      m.status = RunStatus::kFailed;
      m.reason = "iteration " + std::to_string(n) + ": " + e.what();
      m.updated_at = utc_timestamp();
      write_manifest(m, manifest_path());
      throw;
    }
    m.updated_at = utc_timestamp();
    const ConvergenceDecision d = check_convergence(m, config_);
    if (d.stop) {
      m.status = RunStatus::kConverged;
      m.reason = std::string(to_string(d.reason));
    }
    write_manifest(m, manifest_path());
    if (d.stop) return m;
  }
}

IterationRecord Orchestrator::run_iteration(const RunManifest& manifest, const ModelEndpoint& model, int n) {
  IterationRecord rec;
  rec.n = n;
  rec.input_model = model.model_id;
  rec.started_at = utc_timestamp();

  const fs::path out = output_dir();
  const std::string dir_rel = iter_dir_name(n);
  const fs::path dir = out / dir_rel;
  fs::remove_all(dir);
  fs::create_directories(dir);

  const Variant variant = config_.variant;
  const ParseMode pm = config_.parser_mode;
  IterationCounts& counts = rec.counts;
  std::vector<PositiveRecord> positives;
  std::vector<NegativeRecord> negatives;
  std::vector<StarRationalizedRecord> rationalized;

  auto note = [&](const char* key, std::size_t v) {
    if (v > 0) counts.parse_failures[key] += v;
  };

  if (variant != Variant::kDirectSft) {
    // First pass: one request per (sample, ordinal).
    const bool captioned = uses_caption_prompt(variant);
    const auto& samples = train_.samples();
    std::vector<GenerationRequest> requests;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const std::string prompt = captioned ? render_positive_prompt(samples[i]) : render_uncaptioned_prompt(samples[i]);
      for (int k = 0; k < config_.samples_per_item; ++k) {
        requests.push_back({requests.size(), prompt, train_.resolve_image(samples[i]), std::nullopt, k});
      }
    }
    const auto results = gateway_.generate_batch(model, requests, config_.parallelism);
    counts.generations = results.size();

    std::vector<PositiveGeneration> gens;
    std::vector<std::string> gen_lines;
    for (std::size_t r = 0; r < results.size(); ++r) {
      const VqaSample& s = samples[r / static_cast<std::size_t>(config_.samples_per_item)];
      PositiveGeneration g{s.id, std::nullopt, AnswerStatus::kNoMatch, !results[r].ok()};
      ordered_json line;
      line["sample_id"] = s.id;
      line["ordinal"] = requests[r].sample_ordinal;
      if (!results[r].ok()) {
        ++counts.generation_failures;
        line["status"] = "generation_failed";
        line["failure"] = to_string(results[r].failure);
        line["reason"] = results[r].failure_reason;
      } else {
        auto parsed = captioned ? parse_positive(results[r].raw_text, pm) : parse_uncaptioned(results[r].raw_text, pm);
        line["raw_text"] = results[r].raw_text;
        if (!parsed) {
          line["status"] = "parse_failed";
          line["error"] = parsed.error().message();
        } else {
          PositiveRationale pr = parsed.value();
          const AnswerMatch m = extract_answer(pr.conclusion_raw, s.choices);
          g.answer = m.status;
          if (m.matched()) pr.predicted_index = m.index;
          g.rationale = std::move(pr);
          line["status"] = std::string(to_string(m.status));
          line["predicted_index"] = m.matched() ? ordered_json(m.index) : ordered_json(nullptr);
        }
      }
      gen_lines.push_back(line.dump());
      gens.push_back(std::move(g));
    }
    write_lines(dir / "generations.jsonl", gen_lines);

    if (variant == Variant::kStar) {
      const PositiveSet first = build_positive_set(gens, train_, n);
      std::vector<GenerationRequest> rat_requests;
      std::vector<const VqaSample*> rat_samples;
      for (const auto& inc : first.incorrect) {
        const VqaSample& s = train_.at(inc.sample_id);
        rat_requests.push_back(
            {rat_requests.size(), render_star_rationalization_prompt(s), train_.resolve_image(s), std::nullopt, 0});
        rat_samples.push_back(&s);
      }
      counts.rationalization_requests = rat_requests.size();
      const auto rat_results = gateway_.generate_batch(model, rat_requests, config_.parallelism);
      std::vector<RationalizedResponse> responses;
      std::vector<std::string> rat_lines;
      std::size_t rat_parse_failed = 0;
      for (std::size_t r = 0; r < rat_results.size(); ++r) {
        const VqaSample& s = *rat_samples[r];
        RationalizedResponse resp{s.id, std::nullopt};
        ordered_json line;
        line["sample_id"] = s.id;
        if (!rat_results[r].ok()) {
          ++counts.generation_failures;
          line["status"] = "generation_failed";
          line["failure"] = to_string(rat_results[r].failure);
        } else {
          line["raw_text"] = rat_results[r].raw_text;
          auto parsed = parse_positive(rat_results[r].raw_text, pm);
          if (!parsed) {
            ++rat_parse_failed;
            line["status"] = "parse_failed";
            line["error"] = parsed.error().message();
          } else {
            PositiveRationale pr = parsed.value();
            const AnswerMatch m = extract_answer(pr.conclusion_raw, s.choices);
            if (m.matched()) pr.predicted_index = m.index;
            line["status"] = std::string(to_string(m.status));
            line["predicted_index"] = m.matched() ? ordered_json(m.index) : ordered_json(nullptr);
            resp.rationale = std::move(pr);
          }
        }
        rat_lines.push_back(line.dump());
        responses.push_back(std::move(resp));
      }
      write_lines(dir / "rationalized.jsonl", rat_lines);
      StarSets star = build_star_sets(gens, train_, responses, n);
      positives = std::move(star.positives);
      rationalized = std::move(star.rationalized);
      counts.incorrect = star.incorrect.size();
      note("positive_parse", star.first_pass.parse_failed);
      note("positive_no_match", star.first_pass.no_match);
      note("positive_ambiguous", star.first_pass.ambiguous);
      note("rationalization_parse", rat_parse_failed);
      note("rationalization_no_match", star.rationalization.no_match);
      note("rationalization_ambiguous", star.rationalization.ambiguous);
      note("rationalization_wrong", star.rationalization.wrong);
    } else {
      PositiveSet first = build_positive_set(gens, train_, n);
      positives = std::move(first.records);
      counts.incorrect = first.incorrect.size();
      note("positive_parse", first.counters.parse_failed);
      note("positive_no_match", first.counters.no_match);
      note("positive_ambiguous", first.counters.ambiguous);
    }
    counts.positives = positives.size();
    counts.star_rationalized = rationalized.size();

    if (positives.empty() && rationalized.empty()) {
      rec.outcome = IterationOutcome::kNoPositiveData;
      rec.finished_at = utc_timestamp();
      return rec;
    }

    if (variant == Variant::kStl) {
      const auto neg_requests = enumerate_negative_requests(positives, train_);
      counts.negative_requests = neg_requests.size();
      std::map<std::string, std::string> positive_caption;
      for (const auto& p : positives) positive_caption[p.sample_id] = p.caption;

      std::vector<GenerationRequest> requests2;
      for (const auto& nr : neg_requests) {
        const VqaSample& s = train_.at(nr.sample_id);
        requests2.push_back({requests2.size(), render_negative_generation_prompt(s, nr.distractor_index),
                             train_.resolve_image(s), std::nullopt, 0});
      }
      const auto neg_results = gateway_.generate_batch(model, requests2, config_.parallelism);
      std::vector<NegativeResponse> responses;
      std::vector<std::string> neg_lines;
      for (std::size_t r = 0; r < neg_results.size(); ++r) {
        const NegativeRequest& nr = neg_requests[r];
        NegativeResponse resp{nr.sample_id, nr.distractor_index, std::nullopt};
        ordered_json line;
        line["sample_id"] = nr.sample_id;
        line["distractor_index"] = nr.distractor_index;
        if (!neg_results[r].ok()) {
          ++counts.generation_failures;
          line["status"] = "generation_failed";
          line["failure"] = to_string(neg_results[r].failure);
        } else {
          line["raw_text"] = neg_results[r].raw_text;
          auto parsed = parse_negative(neg_results[r].raw_text, pm);
          if (!parsed) {
            line["status"] = "parse_failed";
            line["error"] = parsed.error().message();
          } else {
            NegativeRationale nrat = parsed.value();
            nrat.target_index = nr.distractor_index;
            if (config_.reuse_positive_caption) nrat.caption = positive_caption.at(nr.sample_id);
            line["status"] = "ok";
            resp.rationale = std::move(nrat);
          }
        }
        neg_lines.push_back(line.dump());
        responses.push_back(std::move(resp));
      }
      write_lines(dir / "negatives.jsonl", neg_lines);
      // Generation failures carry no rationale; count them apart from parse failures.
      std::size_t gen_failed = 0;
      for (const auto& r : neg_results) gen_failed += r.ok() ? 0 : 1;
      NegativeSet ns = build_negative_set(responses, neg_requests, n);
      note("negative_parse", ns.counters.parse_failed - gen_failed);
      negatives = std::move(ns.records);
      counts.negatives = negatives.size();
    }
  }

  std::vector<FineTuneExample> examples;
  if (config_.cumulative) {
    for (const auto& prev : manifest.iterations) {
      if (prev.outcome != IterationOutcome::kComplete || prev.n >= n) continue;
      auto old = read_trainset(out / prev.trainset_path);
      for (auto& e : old) {
        if (e.provenance.iteration == prev.n) examples.push_back(std::move(e));
      }
    }
  }
  {
    auto current = assemble_trainset({positives, negatives, rationalized}, variant, train_, n);
    examples.insert(examples.end(), std::make_move_iterator(current.begin()), std::make_move_iterator(current.end()));
  }
  rec.trainset_path = dir_rel + "/trainset.jsonl";
  rec.trainset_size = examples.size();
  for (const auto& e : examples) ++rec.trainset_tags[std::string(to_string(e.tag))];
  write_trainset(examples, out / rec.trainset_path);

  rec.trainer_base_model = config_.incremental_training ? model.model_id : manifest.base_model;
  const TrainerInvocation inv = invoke_trainer(config_, out, rec.trainset_path, rec.trainer_base_model);
  rec.trainer_command = inv.command_line;
  rec.produced_model_id = inv.model_id;

  const ModelEndpoint trained = config_.endpoint.with_model(inv.model_id);
  EvalOutcome ev =
      evaluate_split(gateway_, trained, eval_, config_.effective_eval_mode(), {config_.parser_mode, config_.parallelism});
  ev.report.label = to_string(variant);
  std::vector<std::string> eval_lines;
  for (const auto& r : ev.records) eval_lines.push_back(serialize_eval_record(r));
  write_lines(dir / "eval_records.jsonl", eval_lines);
  write_file_atomic(dir / "eval_report.json", eval_report_to_json(ev.report) + "\n");
  rec.eval = std::move(ev.report);
  rec.finished_at = utc_timestamp();
  return rec;
}

RunManifest resume_run(const fs::path& manifest_path, std::shared_ptr<Backend> backend, const RunOptions& options) {
  const RunManifest m = read_manifest(manifest_path);
  if (m.config_path.empty()) throw ManifestError("manifest does not record a config path");
  RunConfig config = RunConfig::load(m.config_path);
  if (config.digest() != m.config_digest) {
    throw ManifestError("config at " + m.config_path + " no longer matches the manifest digest (" + m.config_digest +
                        ")");
  }
  // The manifest's directory wins over the config's output_dir, so a moved run resumes in place.
  config.output_dir = fs::absolute(manifest_path).parent_path().string();
  if (m.status == RunStatus::kConverged) return m;
  Orchestrator orch(std::move(config), std::move(backend));
  return orch.resume(options);
}

}  // namespace stlearn
