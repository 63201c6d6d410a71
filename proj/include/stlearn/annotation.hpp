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
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stlearn/dataset.hpp"
#include "stlearn/error.hpp"
#include "stlearn/evaluation.hpp"
#include "stlearn/judgment.hpp"

namespace stlearn {

class AnnotationError : public Error {
 public:
  using Error::Error;
};

class UnknownAnnotatorError : public AnnotationError {
 public:
  using AnnotationError::AnnotationError;
};

class UnknownTaskError : public AnnotationError {
 public:
  using AnnotationError::AnnotationError;
};

class DuplicateJudgmentError : public AnnotationError {
 public:
  using AnnotationError::AnnotationError;
};

struct DomainShortfall {
  std::string domain;
  std::size_t eligible = 0;
  std::size_t quota = 0;
};

class ShortfallError : public AnnotationError {
 public:
  explicit ShortfallError(std::vector<DomainShortfall> shortfalls);
  const std::vector<DomainShortfall>& shortfalls() const noexcept { return shortfalls_; }

 private:
  std::vector<DomainShortfall> shortfalls_;
};

/// One method's evaluated outputs on a split: per-sample rationale text and correctness.
struct MethodRationales {
  std::string method;
  std::vector<EvalRecord> records;
};

/// Reads eval_records.jsonl as written by a run.
MethodRationales load_method_rationales(std::string method, const std::filesystem::path& eval_records);

struct TaskSide {
  std::string method;
  std::string text;
};

struct AnnotationTask {
  int task_id = 0;  // 1-based ordinal
  std::string sample_id;
  std::string domain;
  std::string image_ref;  // resolved path or URI
  std::string question;
  std::vector<std::string> choices;
  TaskSide left;
  TaskSide right;

  const std::string& method_for(Side side) const { return side == Side::kLeft ? left.method : right.method; }
};

struct TaskPool {
  std::vector<std::string> methods;     // [A, B]
  std::vector<std::string> annotators;  // may be empty; the server can supply them
  std::uint64_t seed = 0;
  std::size_t quota = 0;
  std::vector<AnnotationTask> tasks;

  const AnnotationTask* find(int task_id) const;
};

struct PoolOptions {
  std::size_t per_domain_quota = 150;
  std::uint64_t seed = 0;
  bool require_both_correct = true;  // false widens eligibility to every sample both runs answered
};

/// Eligible samples (both correct, by default) are drawn per domain with a seeded partial
/// shuffle; each task's side order is drawn from the same generator. Throws ShortfallError
/// listing every domain with fewer eligible samples than the quota.
TaskPool build_task_pool(const MethodRationales& a, const MethodRationales& b, const DatasetSplit& split,
                         const PoolOptions& options);

std::string serialize_pool(const TaskPool& pool);
TaskPool parse_pool(std::string_view text);
void save_pool(const TaskPool& pool, const std::filesystem::path& path);
TaskPool load_pool(const std::filesystem::path& path);

/// What an annotator's browser receives. Has no field that can carry a method name.
struct ClientTask {
  int task_id = 0;
  std::string image_url;
  std::string question;
  std::vector<std::string> choices;
  std::string left;
  std::string right;
  std::size_t judged = 0;
  std::size_t total = 0;
};

std::string client_task_json(const ClientTask& t);

/// Task pool plus the append-only judgment log. Safe for concurrent use.
class AnnotationStore {
 public:
  /// Replays an existing log at log_path before accepting new judgments.
  AnnotationStore(TaskPool pool, std::vector<std::string> annotators, std::filesystem::path log_path);

  /// Lowest-numbered task the annotator has not judged; nullopt when done.
  std::optional<ClientTask> next_task(const std::string& annotator_id) const;
  PreferenceJudgment submit(int task_id, const std::string& annotator_id, Side choice);
  std::vector<PreferenceJudgment> export_judgments() const;

  const TaskPool& pool() const noexcept { return pool_; }
  bool is_annotator(const std::string& id) const;

 private:
  void check_annotator(const std::string& id) const;

  TaskPool pool_;
  std::vector<std::string> annotators_;
  std::filesystem::path log_path_;
  mutable std::shared_mutex mu_;
  std::vector<PreferenceJudgment> log_;
  std::map<std::string, std::vector<bool>> judged_;  // annotator -> per task
  std::ofstream out_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
  std::optional<std::filesystem::path> static_dir;
};

/// HTTP JSON API over an AnnotationStore:
///   GET  /api/tasks/next?annotator=ID   200 task | 204 done | 404 unknown annotator
///   POST /api/judgments                 201 | 400 | 404 | 409
///   GET  /api/export                    judgment array
///   GET  /api/tasks/<id>/image          image bytes
class AnnotationServer {
 public:
  AnnotationServer(AnnotationStore& store, ServerOptions options = {});
  ~AnnotationServer();
  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  /// Binds and returns the port; serve() then blocks until stop().
  int bind();
  void serve();
  void stop();
  int port() const noexcept { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

}  // namespace stlearn
