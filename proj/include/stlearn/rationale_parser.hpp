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
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "stlearn/expected.hpp"

namespace stlearn {

enum class ParseMode { kStrict, kLenient };

std::string_view to_string(ParseMode mode);
ParseMode parse_mode_from_string(std::string_view s);

enum class Section { kCaption, kReasoning, kConclusion, kExplanation };

/// "CAPTION", "REASONING", ...
std::string_view section_name(Section section);

enum class ParseErrorKind { kMissingSection, kEmptySection, kOutOfOrder, kDuplicateSection };

struct ParseError {
  ParseErrorKind kind;
  Section section;

  std::string message() const;
  friend bool operator==(const ParseError&, const ParseError&) = default;
};

/// (caption, reasoning, conclusion) response. predicted_index is filled by extract_answer.
struct PositiveRationale {
  std::string caption;
  std::string reasoning;
  std::string conclusion_raw;
  std::optional<std::size_t> predicted_index;

  friend bool operator==(const PositiveRationale&, const PositiveRationale&) = default;
};

/// (caption, explanation) response arguing against the distractor target_index.
struct NegativeRationale {
  std::string caption;
  std::string explanation;
  std::size_t target_index = 0;

  friend bool operator==(const NegativeRationale&, const NegativeRationale&) = default;
};

// Section grammar. A section's content is everything between its marker and the
// next recognised marker (or end of text), trimmed; interior newlines are kept.
//
// strict:  markers are exactly "###LABEL:" and must appear once each, in contract order.
// lenient: "###label:" in any case anywhere (any number of '#', optional spaces around the
//          label), or a bare "label:" at the start of a line. Sections are assigned by label
//          regardless of order; for a repeated label the first non-empty occurrence wins.
Expected<PositiveRationale, ParseError> parse_positive(std::string_view text, ParseMode mode);
Expected<NegativeRationale, ParseError> parse_negative(std::string_view text, ParseMode mode);

/// REASONING + CONCLUSION only; caption is left empty.
Expected<PositiveRationale, ParseError> parse_uncaptioned(std::string_view text, ParseMode mode);

/// CONCLUSION content of a free-form response (chain-of-thought baseline).
Expected<std::string, ParseError> parse_conclusion(std::string_view text, ParseMode mode);

std::string serialize_positive(const PositiveRationale& r);
std::string serialize_negative(const NegativeRationale& r);

enum class AnswerStatus { kMatched, kNoMatch, kAmbiguous };

std::string_view to_string(AnswerStatus status);

struct AnswerMatch {
  AnswerStatus status = AnswerStatus::kNoMatch;
  std::size_t index = 0;  // valid only when matched
  int rung = 0;           // 1 letter, 2 exact text, 3 substring; 0 when nothing fired

  bool matched() const noexcept { return status == AnswerStatus::kMatched; }
  std::optional<std::size_t> index_if_matched() const {
    return matched() ? std::optional<std::size_t>(index) : std::nullopt;
  }
};

/// Matching ladder, first rung with any hit decides:
///  1. letter tokens "(L)", "L)", "L." (or the whole conclusion being a single letter)
///     naming a valid label;
///  2. a choice whose normalized text equals the normalized conclusion;
///  3. a choice whose normalized text occurs inside the normalized conclusion.
/// One distinct hit on the deciding rung matches; more is Ambiguous; none anywhere is
/// NoMatch. Throws std::invalid_argument for fewer than two choices.
AnswerMatch extract_answer(std::string_view conclusion, std::span<const std::string> choices);

}  // namespace stlearn
