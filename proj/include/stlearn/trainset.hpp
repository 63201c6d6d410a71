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
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stlearn/dataset.hpp"
#include "stlearn/error.hpp"
#include "stlearn/rationale_parser.hpp"

namespace stlearn {

class TrainsetError : public Error {
 public:
  using Error::Error;
};

enum class Variant { kStl, kStlNoNeg, kStlNoCapNeg, kStar, kDirectSft };

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);

/// True for variants whose first pass uses the three-section (caption) prompt.
bool uses_caption_prompt(Variant v);

// Counters for everything a builder drops. Parse failures never reach a trainset.
struct FilterCounters {
  std::size_t generation_failed = 0;
  std::size_t parse_failed = 0;
  std::size_t no_match = 0;
  std::size_t ambiguous = 0;
  std::size_t wrong = 0;

  std::size_t total() const { return generation_failed + parse_failed + no_match + ambiguous + wrong; }
  FilterCounters& operator+=(const FilterCounters& o);
  friend bool operator==(const FilterCounters&, const FilterCounters&) = default;
};

/// One first-pass generation after parsing. rationale is empty when the backend
/// call or the section parse failed; generation_failed tells the two apart.
struct PositiveGeneration {
  std::string sample_id;
  std::optional<PositiveRationale> rationale;
  AnswerStatus answer = AnswerStatus::kNoMatch;
  bool generation_failed = false;
};

struct PositiveRecord {
  std::string sample_id;
  std::string caption;
  std::string reasoning;
  std::size_t gold_index = 0;
  int iteration = 0;

  friend bool operator==(const PositiveRecord&, const PositiveRecord&) = default;
};

struct IncorrectRecord {
  std::string sample_id;
  std::string rationale;
  std::optional<std::size_t> wrong_prediction;  // empty for no-match / ambiguous / unparseable
  int iteration = 0;
};

struct NegativeRequest {
  std::string sample_id;
  std::size_t distractor_index = 0;

  friend bool operator==(const NegativeRequest&, const NegativeRequest&) = default;
  friend auto operator<=>(const NegativeRequest&, const NegativeRequest&) = default;
};

struct NegativeResponse {
  std::string sample_id;
  std::size_t distractor_index = 0;
  std::optional<NegativeRationale> rationale;  // empty on parse or generation failure
};

struct NegativeRecord {
  std::string sample_id;
  std::size_t distractor_index = 0;
  std::string caption;
  std::string explanation;
  int iteration = 0;

  friend bool operator==(const NegativeRecord&, const NegativeRecord&) = default;
};

struct RationalizedResponse {
  std::string sample_id;
  std::optional<PositiveRationale> rationale;
};

struct StarRationalizedRecord {
  std::string sample_id;
  std::string caption;
  std::string rationale;
  std::size_t gold_index = 0;
  int iteration = 0;
};

enum class ExampleTag { kPos, kNeg, kStarRationalized, kDirect };

std::string_view to_string(ExampleTag tag);
ExampleTag tag_from_string(std::string_view s);

struct Provenance {
  std::string sample_id;
  int iteration = 0;
  Variant variant = Variant::kStl;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct FineTuneExample {
  std::string example_id;
  std::string prompt;
  std::string target;
  std::string image_ref;
  ExampleTag tag = ExampleTag::kPos;
  Provenance provenance;

  friend bool operator==(const FineTuneExample&, const FineTuneExample&) = default;
};

struct PositiveSet {
  std::vector<PositiveRecord> records;
  std::vector<IncorrectRecord> incorrect;
  FilterCounters counters;
};

/// Keeps generations whose predicted index equals the gold index. Only the first
/// correct generation per sample is kept. Throws TrainsetError on unknown sample ids.
PositiveSet build_positive_set(std::span<const PositiveGeneration> generations, const DatasetSplit& split,
                               int iteration);

/// One request per distractor of every positive record, in choice order.
std::vector<NegativeRequest> enumerate_negative_requests(std::span<const PositiveRecord> positives,
                                                         const DatasetSplit& split);

struct NegativeSet {
  std::vector<NegativeRecord> records;
  FilterCounters counters;
};

/// Throws TrainsetError for a response that does not match any enumerated request.
NegativeSet build_negative_set(std::span<const NegativeResponse> responses,
                               std::span<const NegativeRequest> requests, int iteration);

struct StarSets {
  std::vector<PositiveRecord> positives;
  std::vector<StarRationalizedRecord> rationalized;
  std::vector<IncorrectRecord> incorrect;
  FilterCounters first_pass;
  FilterCounters rationalization;
};

/// Throws TrainsetError when a rationalized response targets a first-pass-correct sample.
StarSets build_star_sets(std::span<const PositiveGeneration> generations, const DatasetSplit& split,
                         std::span<const RationalizedResponse> rationalized, int iteration);

/// "The correct choice is (L) text."
std::string conclusion_target(const VqaSample& sample);

struct TrainsetInputs {
  std::span<const PositiveRecord> positives;
  std::span<const NegativeRecord> negatives;
  std::span<const StarRationalizedRecord> rationalized;
};

/// Renders the records for one variant into prompt/target pairs (positives first, then
/// negatives or rationalizations). DIRECT_SFT takes every sample of the split and no records.
/// Throws TrainsetError when inputs carry a record kind the variant does not use.
std::vector<FineTuneExample> assemble_trainset(const TrainsetInputs& inputs, Variant variant,
                                               const DatasetSplit& split, int iteration);

std::string serialize_example(const FineTuneExample& example);
FineTuneExample parse_example(std::string_view line);

void write_trainset(std::span<const FineTuneExample> examples, const std::filesystem::path& path);
std::vector<FineTuneExample> read_trainset(const std::filesystem::path& path);

}  // namespace stlearn
