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


#include "stlearn/annotation.hpp"

#include <algorithm>
#include <mutex>
#include <random>
#include <set>

#include "json.hpp"
#include "stlearn/text.hpp"
#include "stlearn/util.hpp"

namespace stlearn {

namespace fs = std::filesystem;

namespace {

using nlohmann::ordered_json;

constexpr std::string_view kPoolFormat = "stlearn-pool/1";

std::string describe(const std::vector<DomainShortfall>& s) {
  std::string out = "not enough eligible samples:";
  for (const auto& d : s) {
    out += " " + d.domain + " has " + std::to_string(d.eligible) + " of " + std::to_string(d.quota) + ";";
  }
  out.pop_back();
  return out;
}

std::map<std::string, const EvalRecord*> index_records(const MethodRationales& m) {
  std::map<std::string, const EvalRecord*> out;
  for (const auto& r : m.records) {
    if (!out.emplace(r.sample_id, &r).second) {
      throw AnnotationError("method " + m.method + " has two records for sample " + r.sample_id);
    }
  }
  return out;
}

}  // namespace

// ---- judgments -----------------------------------------------------------

std::string_view to_string(Side side) { return side == Side::kLeft ? "left" : "right"; }

Side side_from_string(std::string_view s) {
  if (s == "left") return Side::kLeft;
  if (s == "right") return Side::kRight;
  throw Error("choice must be 'left' or 'right', got '" + std::string(s) + "'");
}

std::string serialize_judgment(const PreferenceJudgment& j) {
  ordered_json o;
  o["task_id"] = j.task_id;
  o["sample_id"] = j.sample_id;
  o["domain"] = j.domain;
  o["annotator_id"] = j.annotator_id;
  o["choice"] = to_string(j.choice);
  o["resolved_method"] = j.resolved_method;
  o["timestamp"] = j.timestamp;
  return o.dump();
}

PreferenceJudgment parse_judgment(std::string_view line) {
  try {
    const auto o = ordered_json::parse(line);
    PreferenceJudgment j;
    j.task_id = o.at("task_id").get<int>();
    j.sample_id = o.at("sample_id").get<std::string>();
    j.domain = o.at("domain").get<std::string>();
    j.annotator_id = o.at("annotator_id").get<std::string>();
    j.choice = side_from_string(o.at("choice").get<std::string>());
    j.resolved_method = o.at("resolved_method").get<std::string>();
    j.timestamp = o.value("timestamp", "");
    return j;
  } catch (const ordered_json::exception& e) {
    throw Error(std::string("malformed judgment: ") + e.what());
  }
}

// ---- pool ----------------------------------------------------------------

ShortfallError::ShortfallError(std::vector<DomainShortfall> shortfalls)
    : AnnotationError(describe(shortfalls)), shortfalls_(std::move(shortfalls)) {}

MethodRationales load_method_rationales(std::string method, const fs::path& eval_records) {
  MethodRationales m{std::move(method), {}};
  for_each_line(eval_records, [&](std::string_view line, std::size_t n) {
    if (text::trim(line).empty()) return;
    try {
      m.records.push_back(parse_eval_record(line));
    } catch (const std::exception& e) {
      throw RecordError(eval_records.string(), n, e.what());
    }
  });
  return m;
}

const AnnotationTask* TaskPool::find(int task_id) const {
  if (task_id < 1 || static_cast<std::size_t>(task_id) > tasks.size()) return nullptr;
  return &tasks[static_cast<std::size_t>(task_id) - 1];
}

TaskPool build_task_pool(const MethodRationales& a, const MethodRationales& b, const DatasetSplit& split,
                         const PoolOptions& options) {
  if (a.method.empty() || b.method.empty() || a.method == b.method) {
    throw AnnotationError("the two methods need distinct, non-empty names");
  }
  if (options.per_domain_quota == 0) throw AnnotationError("per-domain quota must be positive");
  const auto ra = index_records(a);
  const auto rb = index_records(b);
  std::set<std::string> ids_a, ids_b;
  for (const auto& [id, _] : ra) ids_a.insert(id);
  for (const auto& [id, _] : rb) ids_b.insert(id);
  if (ids_a != ids_b) throw AnnotationError("the two runs did not evaluate the same samples");
  for (const auto& id : ids_a) {
    if (split.find(id) == nullptr) throw AnnotationError("sample " + id + " is not in the split");
  }

  // Eligible ids per domain, in split order.
  std::map<std::string, std::vector<const VqaSample*>, DomainLess> eligible;
  for (const auto& s : split.samples()) {
    eligible[s.domain];  // every domain of the split gets a quota
    auto ia = ra.find(s.id);
    auto ib = rb.find(s.id);
    if (ia == ra.end() || ib == rb.end()) continue;
    if (options.require_both_correct && !(ia->second->correct && ib->second->correct)) continue;
    eligible[s.domain].push_back(&s);
  }

  std::vector<DomainShortfall> short_domains;
  for (const auto& [domain, v] : eligible) {
    if (v.size() < options.per_domain_quota) short_domains.push_back({domain, v.size(), options.per_domain_quota});
  }
  if (!short_domains.empty()) throw ShortfallError(std::move(short_domains));

  TaskPool pool;
  pool.methods = {a.method, b.method};
  pool.seed = options.seed;
  pool.quota = options.per_domain_quota;
  std::mt19937_64 rng(options.seed);
  for (auto& [domain, v] : eligible) {
    // Partial Fisher-Yates: the first quota slots end up a uniform sample.
    for (std::size_t i = 0; i < options.per_domain_quota; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (v.size() - i));
      std::swap(v[i], v[j]);
    }
    for (std::size_t i = 0; i < options.per_domain_quota; ++i) {
      const VqaSample& s = *v[i];
      TaskSide sa{a.method, ra.at(s.id)->raw_text};
      TaskSide sb{b.method, rb.at(s.id)->raw_text};
      const bool a_left = (rng() & 1u) != 0;
      AnnotationTask t;
      t.task_id = static_cast<int>(pool.tasks.size()) + 1;
      t.sample_id = s.id;
      t.domain = s.domain;
      t.image_ref = split.resolve_image(s);
      t.question = s.question;
      t.choices = s.choices;
      t.left = a_left ? std::move(sa) : std::move(sb);
      t.right = a_left ? std::move(sb) : std::move(sa);
      pool.tasks.push_back(std::move(t));
    }
  }
  return pool;
}

std::string serialize_pool(const TaskPool& pool) {
  ordered_json o;
  o["format"] = kPoolFormat;
  o["methods"] = pool.methods;
  o["annotators"] = pool.annotators;
  o["seed"] = pool.seed;
  o["quota"] = pool.quota;
  o["tasks"] = ordered_json::array();
  for (const auto& t : pool.tasks) {
    o["tasks"].push_back({{"task_id", t.task_id},
                          {"sample_id", t.sample_id},
                          {"domain", t.domain},
                          {"image", t.image_ref},
                          {"question", t.question},
                          {"choices", t.choices},
                          {"left", {{"method", t.left.method}, {"text", t.left.text}}},
                          {"right", {{"method", t.right.method}, {"text", t.right.text}}}});
  }
  return o.dump(2) + "\n";
}

TaskPool parse_pool(std::string_view text) {
  TaskPool pool;
  try {
    const auto o = ordered_json::parse(text);
    if (o.at("format").get<std::string>() != kPoolFormat) throw AnnotationError("unsupported pool format");
    pool.methods = o.at("methods").get<std::vector<std::string>>();
    pool.annotators = o.value("annotators", std::vector<std::string>{});
    pool.seed = o.at("seed").get<std::uint64_t>();
    pool.quota = o.at("quota").get<std::size_t>();
    for (const auto& t : o.at("tasks")) {
      AnnotationTask task;
      task.task_id = t.at("task_id").get<int>();
      task.sample_id = t.at("sample_id").get<std::string>();
      task.domain = t.at("domain").get<std::string>();
      task.image_ref = t.at("image").get<std::string>();
      task.question = t.at("question").get<std::string>();
      task.choices = t.at("choices").get<std::vector<std::string>>();
      task.left = {t.at("left").at("method").get<std::string>(), t.at("left").at("text").get<std::string>()};
      task.right = {t.at("right").at("method").get<std::string>(), t.at("right").at("text").get<std::string>()};
      pool.tasks.push_back(std::move(task));
    }
  } catch (const ordered_json::exception& e) {
    throw AnnotationError(std::string("malformed pool: ") + e.what());
  }
  if (pool.methods.size() != 2 || pool.methods[0] == pool.methods[1]) {
    throw AnnotationError("pool must name two distinct methods");
  }
  for (std::size_t i = 0; i < pool.tasks.size(); ++i) {
    const auto& t = pool.tasks[i];
    if (t.task_id != static_cast<int>(i) + 1) throw AnnotationError("pool task ids must be 1..N in order");
    const std::set<std::string> sides{t.left.method, t.right.method};
    if (sides != std::set<std::string>(pool.methods.begin(), pool.methods.end())) {
      throw AnnotationError("task " + std::to_string(t.task_id) + " must show one rationale from each method");
    }
  }
  return pool;
}

void save_pool(const TaskPool& pool, const fs::path& path) { write_file_atomic(path, serialize_pool(pool)); }

TaskPool load_pool(const fs::path& path) { return parse_pool(read_file(path)); }

// ---- store ---------------------------------------------------------------

std::string client_task_json(const ClientTask& t) {
  ordered_json o;
  o["task_id"] = t.task_id;
  o["image_url"] = t.image_url;
  o["question"] = t.question;
  o["choices"] = t.choices;
  o["left"] = t.left;
  o["right"] = t.right;
  o["progress"] = {{"judged", t.judged}, {"total", t.total}};
  return o.dump();
}

AnnotationStore::AnnotationStore(TaskPool pool, std::vector<std::string> annotators, fs::path log_path)
    : pool_(std::move(pool)), annotators_(std::move(annotators)), log_path_(std::move(log_path)) {
  if (annotators_.empty()) annotators_ = pool_.annotators;
  if (annotators_.empty()) throw AnnotationError("no annotators configured");
  std::sort(annotators_.begin(), annotators_.end());
  if (std::adjacent_find(annotators_.begin(), annotators_.end()) != annotators_.end()) {
    throw AnnotationError("annotator ids must be unique");
  }
  for (const auto& a : annotators_) judged_[a].assign(pool_.tasks.size(), false);

  if (fs::exists(log_path_)) {
    for_each_line(log_path_, [&](std::string_view line, std::size_t n) {
      if (text::trim(line).empty()) return;
      PreferenceJudgment j;
      try {
        j = parse_judgment(line);
      } catch (const Error& e) {
        throw RecordError(log_path_.string(), n, e.what());
      }
      const AnnotationTask* t = pool_.find(j.task_id);
      if (t == nullptr || !is_annotator(j.annotator_id)) {
        throw RecordError(log_path_.string(), n, "judgment does not belong to this pool and annotator list");
      }
      if (t->method_for(j.choice) != j.resolved_method) {
        throw RecordError(log_path_.string(), n, "resolved method disagrees with the pool");
      }
      auto flag = judged_[j.annotator_id][static_cast<std::size_t>(j.task_id) - 1];
      if (flag) throw RecordError(log_path_.string(), n, "duplicate judgment");
      flag = true;
      log_.push_back(std::move(j));
    });
  }
  if (!log_path_.parent_path().empty()) fs::create_directories(log_path_.parent_path());
  out_.open(log_path_, std::ios::app | std::ios::binary);
  if (!out_) throw IoError("cannot open judgment log " + log_path_.string());
}

bool AnnotationStore::is_annotator(const std::string& id) const {
  return std::binary_search(annotators_.begin(), annotators_.end(), id);
}

void AnnotationStore::check_annotator(const std::string& id) const {
  if (!is_annotator(id)) throw UnknownAnnotatorError("unknown annotator '" + id + "'");
}

std::optional<ClientTask> AnnotationStore::next_task(const std::string& annotator_id) const {
  check_annotator(annotator_id);
  std::shared_lock lock(mu_);
  const auto& flags = judged_.at(annotator_id);
  const auto judged = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) continue;
    const AnnotationTask& t = pool_.tasks[i];
    ClientTask c;
    c.task_id = t.task_id;
    const bool uri = t.image_ref.find("://") != std::string::npos;
    c.image_url = uri ? t.image_ref : "/api/tasks/" + std::to_string(t.task_id) + "/image";
    c.question = t.question;
    c.choices = t.choices;
    c.left = t.left.text;
    c.right = t.right.text;
    c.judged = judged;
    c.total = flags.size();
    return c;
  }
  return std::nullopt;
}

PreferenceJudgment AnnotationStore::submit(int task_id, const std::string& annotator_id, Side choice) {
  check_annotator(annotator_id);
  const AnnotationTask* t = pool_.find(task_id);
  if (t == nullptr) throw UnknownTaskError("unknown task " + std::to_string(task_id));
  std::unique_lock lock(mu_);
  auto flag = judged_.at(annotator_id)[static_cast<std::size_t>(task_id) - 1];
  if (flag) {
    throw DuplicateJudgmentError("annotator '" + annotator_id + "' already judged task " + std::to_string(task_id));
  }
  PreferenceJudgment j{task_id, t->sample_id, t->domain, annotator_id, choice, t->method_for(choice), utc_timestamp()};
  out_ << serialize_judgment(j) << '\n';
  out_.flush();
  if (!out_) throw IoError("failed to append to " + log_path_.string());
  flag = true;
  log_.push_back(j);
  return j;
}

std::vector<PreferenceJudgment> AnnotationStore::export_judgments() const {
  std::shared_lock lock(mu_);
  return log_;
}

}  // namespace stlearn
