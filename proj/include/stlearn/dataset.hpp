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
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "stlearn/error.hpp"

namespace stlearn {

// The four domains of the multiple-choice VQA evaluation splits. Any other tag is
// accepted verbatim and ordered after these, alphabetically.
inline constexpr std::string_view kCommonsense = "commonsense";
inline constexpr std::string_view kNaturalScience = "natural-science";
inline constexpr std::string_view kLanguageScience = "language-science";
inline constexpr std::string_view kSocialScience = "social-science";

bool is_known_domain(std::string_view domain);

/// Canonical column order: the known domains first, then everything else by name.
struct DomainLess {
  bool operator()(std::string_view a, std::string_view b) const;
  using is_transparent = void;
};

/// One (image, question, choices, answer) tuple.
struct VqaSample {
  std::string id;
  std::string image_ref;
  std::string question;
  std::vector<std::string> choices;
  std::int64_t answer_index = 0;
  std::string domain;

  std::size_t gold() const { return static_cast<std::size_t>(answer_index); }

  friend bool operator==(const VqaSample&, const VqaSample&) = default;
};

enum class ViolationKind {
  kEmptyId,
  kEmptyQuestion,
  kTooFewChoices,
  kTooManyChoices,  // labels run A-Z
  kAnswerIndexOutOfRange,
  kDuplicateChoice,
  kMissingDomain,
};

struct Violation {
  ViolationKind kind;
  std::string message;
};

/// Every invariant violation of the sample, in a fixed check order.
std::vector<Violation> validate_sample(const VqaSample& sample);

/// Samples in file order, with unique ids.
class DatasetSplit {
 public:
  DatasetSplit() = default;
  /// Throws Error on duplicate ids.
  DatasetSplit(std::string name, std::vector<VqaSample> samples, std::filesystem::path base_dir = {});

  const std::string& name() const noexcept { return name_; }
  const std::vector<VqaSample>& samples() const noexcept { return samples_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const std::filesystem::path& base_dir() const noexcept { return base_dir_; }

  /// nullptr when absent.
  const VqaSample* find(std::string_view id) const;
  const VqaSample& at(std::string_view id) const;

  /// Relative image paths resolve against the directory the split was loaded from;
  /// URIs (scheme://...) and absolute paths pass through unchanged.
  std::string resolve_image(const VqaSample& sample) const;

 private:
  std::string name_;
  std::vector<VqaSample> samples_;
  std::filesystem::path base_dir_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class DatasetFormat { kJsonLines };

DatasetFormat parse_dataset_format(std::string_view id);

/// Loads a line-delimited split. Errors carry the 1-based line of the offending record.
DatasetSplit load_dataset(const std::filesystem::path& path, DatasetFormat format = DatasetFormat::kJsonLines);

std::string serialize_sample(const VqaSample& sample);
void write_dataset(const DatasetSplit& split, const std::filesystem::path& path);

using DomainSplits = std::map<std::string, DatasetSplit, DomainLess>;

/// Partition by domain tag; relative order is preserved inside every part.
DomainSplits split_by_domain(const DatasetSplit& split);

}  // namespace stlearn
