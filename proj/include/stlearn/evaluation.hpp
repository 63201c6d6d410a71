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

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stlearn/dataset.hpp"
#include "stlearn/error.hpp"
#include "stlearn/gateway.hpp"
#include "stlearn/judgment.hpp"
#include "stlearn/rationale_parser.hpp"

namespace stlearn {

class EvalError : public Error {
 public:
  using Error::Error;
};

/// A percentage held as an integer count of hundredths, so two-decimal values
/// compare and print exactly.
class Percentage {
 public:
  constexpr Percentage() = default;
  static constexpr Percentage from_hundredths(std::int64_t h) {
    Percentage p;
    p.hundredths_ = h;
    return p;
  }
  /// (num / den) * 100, rounded half-up to two decimals with exact integer arithmetic.
  static Percentage from_ratio(std::uint64_t num, std::uint64_t den);
  /// Nearest hundredth of v (for values that already carry two decimals).
  static Percentage from_double(double v);

  constexpr std::int64_t hundredths() const noexcept { return hundredths_; }
  double value() const noexcept { return static_cast<double>(hundredths_) / 100.0; }
  /// Always exactly two decimals, e.g. "37.50".
  std::string str() const;

  friend constexpr auto operator<=>(const Percentage&, const Percentage&) = default;

 private:
  std::int64_t hundredths_ = 0;
};

/// Unweighted mean, rounded half-up to two decimals. Throws EvalError on an empty list.
Percentage macro_average(std::span<const Percentage> per_domain);
/// Inputs are first taken to their nearest hundredth.
Percentage macro_average(std::span<const double> per_domain);

enum class EvalMode { kDirect, kCot, kPositiveTemplate, kUncaptioned };

std::string_view to_string(EvalMode mode);
EvalMode eval_mode_from_string(std::string_view s);

struct DomainScore {
  std::string domain;
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t parse_failures = 0;       // unparseable, no-match and ambiguous answers
  std::size_t generation_failures = 0;  // backend gave up

  double exact_accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) * 100.0 / static_cast<double>(total); }
  Percentage accuracy() const { return Percentage::from_ratio(correct, total); }
};

struct EvalReport {
  std::string model_id;
  EvalMode mode = EvalMode::kPositiveTemplate;
  std::string label;  // row label in rendered reports; defaults to model_id
  std::vector<DomainScore> domains;  // canonical domain order

  Percentage macro() const;
  std::size_t total() const;
  std::size_t correct() const;
};

/// Per-sample outcome, kept for audits and annotation pools.
struct EvalRecord {
  std::string sample_id;
  std::string domain;
  std::string raw_text;
  std::string outcome;  // correct | wrong | no_match | ambiguous | parse_failed | generation_failed
  std::optional<std::size_t> predicted_index;
  bool correct = false;
};

struct EvalOutcome {
  EvalReport report;
  std::vector<EvalRecord> records;
};

struct EvalOptions {
  ParseMode parse_mode = ParseMode::kLenient;
  std::size_t parallelism = 1;
};

/// Prompts every sample in the mode's template and scores the extracted answer.
/// Direct mode extracts from the whole response; the others from CONCLUSION.
/// Anything that does not extract to the gold index counts as incorrect.
EvalOutcome evaluate_split(const Gateway& gateway, const ModelEndpoint& model, const DatasetSplit& split,
                           EvalMode mode, const EvalOptions& options = {});

std::string serialize_eval_record(const EvalRecord& r);
EvalRecord parse_eval_record(std::string_view line);

std::string eval_report_to_json(const EvalReport& report);
EvalReport eval_report_from_json(std::string_view json);

struct DomainPreference {
  std::string domain;
  std::map<std::string, std::size_t> preferred;  // method -> samples where it won the majority
  std::size_t total = 0;                         // distinct samples judged
};

struct PreferenceSummary {
  int annotators_per_sample = 0;
  std::vector<std::string> methods;      // sorted
  std::vector<DomainPreference> domains;  // canonical domain order
};

/// Majority vote per sample (annotators_per_sample must be odd), then summed per domain.
/// Throws EvalError naming the sample when its judgment count is off.
PreferenceSummary aggregate_preferences(std::span<const PreferenceJudgment> judgments, int annotators_per_sample);

enum class ReportFormat { kTable, kDelimited };

ReportFormat report_format_from_string(std::string_view s);

/// Accuracy rows in a Method / domains... / Average layout, then preference counts.
std::string render_report(std::span<const EvalReport> reports, std::span<const PreferenceSummary> preferences,
                          ReportFormat format);

}  // namespace stlearn
