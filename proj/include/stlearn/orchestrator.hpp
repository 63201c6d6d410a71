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


#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stlearn/dataset.hpp"
#include "stlearn/error.hpp"
#include "stlearn/evaluation.hpp"
#include "stlearn/gateway.hpp"
#include "stlearn/rationale_parser.hpp"
#include "stlearn/trainset.hpp"

namespace stlearn {

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TrainerError : public Error {
 public:
  TrainerError(const std::string& what, std::string captured_stderr = {})
      : Error(what), stderr_(std::move(captured_stderr)) {}
  const std::string& captured_stderr() const noexcept { return stderr_; }

 private:
  std::string stderr_;
};

class ManifestError : public Error {
 public:
  using Error::Error;
};

/// Run configuration. Relative paths are kept as written and resolved against
/// base_dir (the directory of the config file).
struct RunConfig {
  Variant variant = Variant::kStl;
  std::string train_split;
  std::string eval_split;
  ModelEndpoint endpoint;
  std::string trainer_command;  // {trainset} {base_model} {output_model}
  int max_iterations = 3;
  double epsilon = 0.5;  // percentage points of macro accuracy
  std::size_t parallelism = 4;
  ParseMode parser_mode = ParseMode::kLenient;
  std::int64_t seed = 0;
  std::string output_dir;
  int samples_per_item = 1;
  bool cumulative = false;
  bool reuse_positive_caption = false;
  bool incremental_training = false;
  std::optional<EvalMode> eval_mode;

  int max_retries = 3;
  std::int64_t initial_backoff_ms = 500;
  std::int64_t timeout_ms = 120000;
  std::size_t max_image_bytes = 4u << 20;
  std::string record_transcript;
  std::string replay_transcript;

  std::filesystem::path base_dir;     // not part of the digest
  std::filesystem::path source_path;  // not part of the digest

  static RunConfig parse(std::string_view json_text, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);

  void validate() const;
  /// Canonical JSON (sorted keys). output_dir is omitted when include_output_dir is false.
  std::string to_json(bool include_output_dir = true) const;
  /// SHA-256 of the canonical JSON without output_dir: where a run is written does not
  /// change what it computes.
  std::string digest() const;

  std::filesystem::path resolve(const std::string& p) const;
  EvalMode effective_eval_mode() const;
  GatewayOptions gateway_options() const;
};

struct IterationCounts {
  std::size_t generations = 0;
  std::size_t generation_failures = 0;
  std::size_t positives = 0;
  std::size_t incorrect = 0;
  std::size_t negative_requests = 0;
  std::size_t negatives = 0;
  std::size_t rationalization_requests = 0;
  std::size_t star_rationalized = 0;
  std::map<std::string, std::size_t> parse_failures;

  friend bool operator==(const IterationCounts&, const IterationCounts&) = default;
};

enum class IterationOutcome { kComplete, kNoPositiveData };

struct IterationRecord {
  int n = 0;
  std::string input_model;
  IterationOutcome outcome = IterationOutcome::kComplete;
  IterationCounts counts;
  std::string trainset_path;  // relative to the output directory
  std::size_t trainset_size = 0;
  std::map<std::string, std::size_t> trainset_tags;
  std::string trainer_command;
  std::string trainer_base_model;
  std::string produced_model_id;
  std::optional<EvalReport> eval;
  std::string started_at;
  std::string finished_at;
};

enum class RunStatus { kRunning, kConverged, kFailed };

std::string_view to_string(RunStatus s);

/// Persisted loop state: a header line, one line per finished iteration, a status line.
struct RunManifest {
  std::string config_digest;
  std::string config_json;
  std::string config_path;
  std::string base_model;
  ParseMode parser_mode = ParseMode::kLenient;
  std::string created_at;
  std::vector<IterationRecord> iterations;
  RunStatus status = RunStatus::kRunning;
  std::string reason;
  std::string updated_at;

  /// M_0 followed by the model of every complete iteration.
  std::vector<std::string> lineage() const;
};

inline constexpr std::string_view kManifestFileName = "manifest.jsonl";

std::string serialize_manifest(const RunManifest& m);
RunManifest parse_manifest(std::string_view text, const std::string& origin = "manifest");
RunManifest read_manifest(const std::filesystem::path& path);
/// Write-new-then-rename.
void write_manifest(const RunManifest& m, const std::filesystem::path& path);
/// Digest of the manifest with timestamps and the config location removed.
std::string manifest_digest(const RunManifest& m);

enum class StopReason { kMaxIterations, kPlateau, kNoPositiveData };

std::string_view to_string(StopReason r);

struct ConvergenceDecision {
  bool stop = false;
  StopReason reason = StopReason::kMaxIterations;
};

/// Order: no-positive-data, then plateau (macro improvement < epsilon), then the iteration cap.
ConvergenceDecision check_convergence(const RunManifest& manifest, const RunConfig& config);

struct TrainerInvocation {
  std::string command_line;  // after substitution, as executed inside workdir
  std::string model_id;
};

/// Substitutes {trainset}, {base_model} and {output_model} (paths relative to workdir,
/// the output file next to the trainset), runs the command through /bin/sh inside workdir
/// and returns the model id written to the output file.
TrainerInvocation invoke_trainer(const RunConfig& config, const std::filesystem::path& workdir,
                                 const std::string& trainset_rel, const std::string& base_model_id);

/// Placeholder substitution only; values are shell-quoted when needed.
std::string substitute_trainer_command(const std::string& templ, const std::string& trainset,
                                       const std::string& base_model, const std::string& output_model);

/// Backend described by the config: replay transcript, else the live endpoint (or `live`
/// when given), wrapped by a recorder when a record transcript is configured.
std::shared_ptr<Backend> make_backend(const RunConfig& config, std::shared_ptr<Backend> live = nullptr,
                                      std::shared_ptr<HttpTransport> transport = nullptr);

struct RunOptions {
  /// Return (status still running) once this many iterations are on record. Simulates an
  /// interrupted process for resume tests.
  std::optional<int> stop_after_iterations;
};

class Orchestrator {
 public:
  /// backend == nullptr builds the backend from the config.
  explicit Orchestrator(RunConfig config, std::shared_ptr<Backend> backend = nullptr);

  /// Fresh run; refuses to overwrite an existing manifest.
  RunManifest run(const RunOptions& options = {});
  /// Continues the manifest in the output directory from its first missing iteration.
  RunManifest resume(const RunOptions& options = {});

  /// One pass of generate / filter / negatives / assemble / train / evaluate.
  IterationRecord run_iteration(const RunManifest& manifest, const ModelEndpoint& model, int n);

  const RunConfig& config() const noexcept { return config_; }
  std::filesystem::path output_dir() const;
  std::filesystem::path manifest_path() const { return output_dir() / kManifestFileName; }

 private:
  RunManifest loop(RunManifest manifest, const RunOptions& options);

  RunConfig config_;
  Gateway gateway_;
  DatasetSplit train_;
  DatasetSplit eval_;
};

/// Verifies the on-disk config still hashes to the manifest's digest, then resumes.
RunManifest resume_run(const std::filesystem::path& manifest_path, std::shared_ptr<Backend> backend = nullptr,
                       const RunOptions& options = {});

}  // namespace stlearn
