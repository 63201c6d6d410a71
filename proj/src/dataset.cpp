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


#include "stlearn/dataset.hpp"

#include <algorithm>
#include <array>
#include <set>
#include <sstream>

#include "json.hpp"
#include "stlearn/text.hpp"
#include "stlearn/util.hpp"

namespace stlearn {

namespace {

using nlohmann::ordered_json;

constexpr std::array<std::string_view, 4> kKnownDomains = {kCommonsense, kNaturalScience, kLanguageScience,
                                                            kSocialScience};

std::size_t domain_rank(std::string_view d) {
  auto it = std::find(kKnownDomains.begin(), kKnownDomains.end(), d);
  return static_cast<std::size_t>(it - kKnownDomains.begin());
}

bool is_uri(std::string_view ref) { return ref.find("://") != std::string_view::npos || ref.rfind("data:", 0) == 0; }

VqaSample sample_from_json(const ordered_json& j) {
  if (!j.is_object()) throw std::invalid_argument("record is not an object");
  auto str = [&](const char* key) -> std::string {
    auto it = j.find(key);
    if (it == j.end()) throw std::invalid_argument(std::string("missing field '") + key + "'");
    if (!it->is_string()) throw std::invalid_argument(std::string("field '") + key + "' must be a string");
    return it->get<std::string>();
  };
  VqaSample s;
  s.id = str("id");
  s.image_ref = str("image");
  s.question = str("question");
  s.domain = str("domain");
  auto choices = j.find("choices");
  if (choices == j.end() || !choices->is_array()) throw std::invalid_argument("field 'choices' must be an array");
  for (const auto& c : *choices) {
    if (!c.is_string()) throw std::invalid_argument("every choice must be a string");
    s.choices.push_back(c.get<std::string>());
  }
  auto idx = j.find("answer_index");
  if (idx == j.end() || !idx->is_number_integer()) throw std::invalid_argument("field 'answer_index' must be an integer");
  s.answer_index = idx->get<std::int64_t>();
  return s;
}

}  // namespace

bool is_known_domain(std::string_view domain) { return domain_rank(domain) < kKnownDomains.size(); }

bool DomainLess::operator()(std::string_view a, std::string_view b) const {
  auto ra = domain_rank(a);
  auto rb = domain_rank(b);
  if (ra != rb) return ra < rb;
  return a < b;
}

std::vector<Violation> validate_sample(const VqaSample& s) {
  std::vector<Violation> out;
  if (text::trim(s.id).empty()) out.push_back({ViolationKind::kEmptyId, "id is empty"});
  if (text::trim(s.question).empty()) out.push_back({ViolationKind::kEmptyQuestion, "question is empty"});
  if (s.choices.size() < 2) {
    out.push_back({ViolationKind::kTooFewChoices,
                   "need at least 2 choices, got " + std::to_string(s.choices.size())});
  }
  if (s.choices.size() > 26) {
    out.push_back({ViolationKind::kTooManyChoices,
                   "at most 26 choices, got " + std::to_string(s.choices.size())});
  }
  if (s.answer_index < 0 || static_cast<std::size_t>(s.answer_index) >= s.choices.size()) {
    out.push_back({ViolationKind::kAnswerIndexOutOfRange,
                   "answer_index " + std::to_string(s.answer_index) + " out of range for " +
                       std::to_string(s.choices.size()) + " choices"});
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < s.choices.size(); ++i) {
    auto norm = text::normalize(s.choices[i]);
    if (!seen.insert(norm).second) {
      out.push_back({ViolationKind::kDuplicateChoice,
                     "choice " + std::to_string(i) + " duplicates an earlier choice after normalization: \"" +
                         s.choices[i] + "\""});
    }
  }
  if (text::trim(s.domain).empty()) out.push_back({ViolationKind::kMissingDomain, "domain tag is empty"});
  return out;
}

DatasetSplit::DatasetSplit(std::string name, std::vector<VqaSample> samples, std::filesystem::path base_dir)
    : name_(std::move(name)), samples_(std::move(samples)), base_dir_(std::move(base_dir)) {
  index_.reserve(samples_.size());
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (!index_.emplace(samples_[i].id, i).second) throw Error("duplicate sample id '" + samples_[i].id + "'");
  }
}

const VqaSample* DatasetSplit::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &samples_[it->second];
}

const VqaSample& DatasetSplit::at(std::string_view id) const {
  const VqaSample* s = find(id);
  if (s == nullptr) throw Error("unknown sample id '" + std::string(id) + "' in split '" + name_ + "'");
  return *s;
}

std::string DatasetSplit::resolve_image(const VqaSample& sample) const {
  if (is_uri(sample.image_ref)) return sample.image_ref;
  std::filesystem::path p(sample.image_ref);
  if (p.is_absolute() || base_dir_.empty()) return p.string();
  return (base_dir_ / p).lexically_normal().string();
}

DatasetFormat parse_dataset_format(std::string_view id) {
  if (id == "jsonl" || id == "vqa-jsonl") return DatasetFormat::kJsonLines;
  throw Error("unknown dataset format '" + std::string(id) + "'");
}

DatasetSplit load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  if (format != DatasetFormat::kJsonLines) throw Error("unsupported dataset format");
  if (!std::filesystem::exists(path)) throw IoError("dataset file not found: " + path.string());
  std::vector<VqaSample> samples;
  std::unordered_map<std::string, std::size_t> first_line;
  for_each_line(path, [&](std::string_view line, std::size_t n) {
    if (text::trim(line).empty()) throw RecordError(path.string(), n, "blank line");
    VqaSample s;
    try {
      s = sample_from_json(ordered_json::parse(line));
    } catch (const std::exception& e) {
      throw RecordError(path.string(), n, std::string("malformed record: ") + e.what());
    }
    auto violations = validate_sample(s);
    if (!violations.empty()) {
      std::string msg = "invalid sample '" + s.id + "':";
      for (const auto& v : violations) msg += " " + v.message + ";";
      msg.pop_back();
      throw RecordError(path.string(), n, msg);
    }
    auto [it, inserted] = first_line.emplace(s.id, n);
    if (!inserted) {
      throw RecordError(path.string(), n,
                        "duplicate id '" + s.id + "' (first seen on line " + std::to_string(it->second) + ")");
    }
    samples.push_back(std::move(s));
  });
  auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return DatasetSplit(path.stem().string(), std::move(samples), std::filesystem::absolute(base));
}

std::string serialize_sample(const VqaSample& s) {
  ordered_json j;
  j["id"] = s.id;
  j["image"] = s.image_ref;
  j["question"] = s.question;
  j["choices"] = s.choices;
  j["answer_index"] = s.answer_index;
  j["domain"] = s.domain;
  return j.dump();
}

void write_dataset(const DatasetSplit& split, const std::filesystem::path& path) {
  std::string out;
  for (const auto& s : split.samples()) {
    out += serialize_sample(s);
    out.push_back('\n');
  }
  write_file_atomic(path, out);
}

DomainSplits split_by_domain(const DatasetSplit& split) {
  std::map<std::string, std::vector<VqaSample>, DomainLess> parts;
  for (const auto& s : split.samples()) parts[s.domain].push_back(s);
  DomainSplits out;
  for (auto& [domain, samples] : parts) {
    out.emplace(domain, DatasetSplit(domain, std::move(samples), split.base_dir()));
  }
  return out;
}

}  // namespace stlearn
