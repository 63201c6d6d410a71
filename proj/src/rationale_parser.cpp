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


#include "stlearn/rationale_parser.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>
#include <vector>

#include "stlearn/text.hpp"

namespace stlearn {

namespace {

struct MarkerHit {
  Section section;
  std::size_t marker_begin;
  std::size_t content_begin;
};

bool is_hspace(char c) { return c == ' ' || c == '\t'; }

// Matches label case-insensitively at pos, followed by optional spaces and ':'.
// Returns the index just past ':' or npos.
std::size_t match_label_colon(std::string_view text, std::size_t pos, std::string_view label) {
  if (!text::starts_with_ci(text.substr(pos), label)) return std::string_view::npos;
  std::size_t i = pos + label.size();
  while (i < text.size() && is_hspace(text[i])) ++i;
  if (i < text.size() && text[i] == ':') return i + 1;
  return std::string_view::npos;
}

std::vector<MarkerHit> find_strict(std::string_view text, std::span<const Section> contract) {
  std::vector<MarkerHit> hits;
  for (Section s : contract) {
    std::string marker = "###" + std::string(section_name(s)) + ":";
    for (std::size_t pos = text.find(marker); pos != std::string_view::npos; pos = text.find(marker, pos + 1)) {
      hits.push_back({s, pos, pos + marker.size()});
    }
  }
  return hits;
}

std::vector<MarkerHit> find_lenient(std::string_view text, std::span<const Section> contract) {
  std::vector<MarkerHit> hits;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '#' && (i == 0 || text[i - 1] != '#')) {
      std::size_t j = i;
      while (j < text.size() && text[j] == '#') ++j;
      while (j < text.size() && is_hspace(text[j])) ++j;
      for (Section s : contract) {
        std::size_t end = match_label_colon(text, j, section_name(s));
        if (end != std::string_view::npos) {
          hits.push_back({s, i, end});
          break;
        }
      }
    } else if (i == 0 || text[i - 1] == '\n') {
      std::size_t j = i;
      while (j < text.size() && is_hspace(text[j])) ++j;
      if (j < text.size() && text[j] == '#') continue;
      for (Section s : contract) {
        std::size_t end = match_label_colon(text, j, section_name(s));
        if (end != std::string_view::npos) {
          hits.push_back({s, i, end});
          break;
        }
      }
    }
  }
  return hits;
}

struct SectionContent {
  Section section;
  std::size_t position;
  std::string content;
};

std::vector<SectionContent> slice(std::string_view text, std::vector<MarkerHit> hits) {
  std::sort(hits.begin(), hits.end(), [](const MarkerHit& a, const MarkerHit& b) { return a.marker_begin < b.marker_begin; });
  std::vector<SectionContent> out;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    std::size_t end = k + 1 < hits.size() ? hits[k + 1].marker_begin : text.size();
    std::size_t begin = std::min(hits[k].content_begin, end);
    out.push_back({hits[k].section, hits[k].marker_begin, text::trim(text.substr(begin, end - begin))});
  }
  return out;
}

// Returns section contents in contract order or the first violation.
Expected<std::vector<std::string>, ParseError> parse_sections(std::string_view text, ParseMode mode,
                                                              std::span<const Section> contract) {
  // Lenient starts with the strict grammar, so it never disagrees with a strict success
  // (a bare "reasoning:" line inside strict content would otherwise split it).
  if (mode == ParseMode::kLenient) {
    auto strict = parse_sections(text, ParseMode::kStrict, contract);
    if (strict) return strict;
  }
  auto hits = mode == ParseMode::kStrict ? find_strict(text, contract) : find_lenient(text, contract);
  auto sections = slice(text, std::move(hits));

  std::vector<std::string> out(contract.size());
  if (mode == ParseMode::kStrict) {
    for (Section s : contract) {
      auto n = std::count_if(sections.begin(), sections.end(), [&](const SectionContent& c) { return c.section == s; });
      if (n == 0) return ParseError{ParseErrorKind::kMissingSection, s};
    }
    for (Section s : contract) {
      auto n = std::count_if(sections.begin(), sections.end(), [&](const SectionContent& c) { return c.section == s; });
      if (n > 1) return ParseError{ParseErrorKind::kDuplicateSection, s};
    }
    for (std::size_t k = 0; k < sections.size(); ++k) {
      if (sections[k].section != contract[k]) return ParseError{ParseErrorKind::kOutOfOrder, sections[k].section};
    }
    for (std::size_t k = 0; k < contract.size(); ++k) {
      if (sections[k].content.empty()) return ParseError{ParseErrorKind::kEmptySection, contract[k]};
      out[k] = std::move(sections[k].content);
    }
    return out;
  }

  std::vector<bool> seen(contract.size(), false);
  for (auto& sc : sections) {
    auto it = std::find(contract.begin(), contract.end(), sc.section);
    auto k = static_cast<std::size_t>(it - contract.begin());
    seen[k] = true;
    if (out[k].empty() && !sc.content.empty()) out[k] = std::move(sc.content);
  }
  for (std::size_t k = 0; k < contract.size(); ++k) {
    if (!seen[k]) return ParseError{ParseErrorKind::kMissingSection, contract[k]};
  }
  for (std::size_t k = 0; k < contract.size(); ++k) {
    if (out[k].empty()) return ParseError{ParseErrorKind::kEmptySection, contract[k]};
  }
  return out;
}

constexpr Section kPositiveContract[] = {Section::kCaption, Section::kReasoning, Section::kConclusion};
constexpr Section kNegativeContract[] = {Section::kCaption, Section::kExplanation};
constexpr Section kUncaptionedContract[] = {Section::kReasoning, Section::kConclusion};
constexpr Section kConclusionContract[] = {Section::kConclusion};

}  // namespace

std::string_view to_string(ParseMode mode) { return mode == ParseMode::kStrict ? "strict" : "lenient"; }

ParseMode parse_mode_from_string(std::string_view s) {
  if (s == "strict") return ParseMode::kStrict;
  if (s == "lenient") return ParseMode::kLenient;
  throw Error("unknown parser mode '" + std::string(s) + "' (expected strict or lenient)");
}

std::string_view section_name(Section section) {
  switch (section) {
    case Section::kCaption: return "CAPTION";
    case Section::kReasoning: return "REASONING";
    case Section::kConclusion: return "CONCLUSION";
    case Section::kExplanation: return "EXPLANATION";
  }
  return "UNKNOWN";
}

std::string ParseError::message() const {
  std::string name(section_name(section));
  switch (kind) {
    case ParseErrorKind::kMissingSection: return "MissingSection(" + name + ")";
    case ParseErrorKind::kEmptySection: return "EmptySection(" + name + ")";
    case ParseErrorKind::kOutOfOrder: return "OutOfOrder(" + name + ")";
    case ParseErrorKind::kDuplicateSection: return "DuplicateSection(" + name + ")";
  }
  return "ParseError";
}

Expected<PositiveRationale, ParseError> parse_positive(std::string_view text, ParseMode mode) {
  auto r = parse_sections(text, mode, kPositiveContract);
  if (!r) return r.error();
  auto v = std::move(r).value();
  return PositiveRationale{std::move(v[0]), std::move(v[1]), std::move(v[2]), std::nullopt};
}

Expected<NegativeRationale, ParseError> parse_negative(std::string_view text, ParseMode mode) {
  auto r = parse_sections(text, mode, kNegativeContract);
  if (!r) return r.error();
  auto v = std::move(r).value();
  return NegativeRationale{std::move(v[0]), std::move(v[1]), 0};
}

Expected<PositiveRationale, ParseError> parse_uncaptioned(std::string_view text, ParseMode mode) {
  auto r = parse_sections(text, mode, kUncaptionedContract);
  if (!r) return r.error();
  auto v = std::move(r).value();
  return PositiveRationale{"", std::move(v[0]), std::move(v[1]), std::nullopt};
}

Expected<std::string, ParseError> parse_conclusion(std::string_view text, ParseMode mode) {
  auto r = parse_sections(text, mode, kConclusionContract);
  if (!r) return r.error();
  return std::move(std::move(r).value()[0]);
}

std::string serialize_positive(const PositiveRationale& r) {
  return "###CAPTION: " + r.caption + "\n###REASONING: " + r.reasoning + "\n###CONCLUSION: " + r.conclusion_raw;
}

std::string serialize_negative(const NegativeRationale& r) {
  return "###CAPTION: " + r.caption + "\n###EXPLANATION: " + r.explanation;
}

std::string_view to_string(AnswerStatus status) {
  switch (status) {
    case AnswerStatus::kMatched: return "matched";
    case AnswerStatus::kNoMatch: return "no_match";
    case AnswerStatus::kAmbiguous: return "ambiguous";
  }
  return "unknown";
}

AnswerMatch extract_answer(std::string_view conclusion, std::span<const std::string> choices) {
  if (choices.size() < 2) throw std::invalid_argument("extract_answer needs at least two choices");

  auto decide = [](const std::set<std::size_t>& hits, int rung) -> std::optional<AnswerMatch> {
    if (hits.empty()) return std::nullopt;
    if (hits.size() > 1) return AnswerMatch{AnswerStatus::kAmbiguous, 0, rung};
    return AnswerMatch{AnswerStatus::kMatched, *hits.begin(), rung};
  };

  // Rung 1: letter tokens.
  std::set<std::size_t> letters;
  auto add_letter = [&](char upper) {
    auto idx = static_cast<std::size_t>(upper - 'A');
    if (idx < choices.size()) letters.insert(idx);
  };
  const std::size_t n = conclusion.size();
  for (std::size_t i = 0; i < n; ++i) {
    char c = conclusion[i];
    char prev = i > 0 ? conclusion[i - 1] : '\0';
    char next = i + 1 < n ? conclusion[i + 1] : '\0';
    bool prev_space = i == 0 || std::isspace(static_cast<unsigned char>(prev)) != 0;
    if (c >= 'A' && c <= 'Z') {
      if (prev == '(' && next == ')') {
        add_letter(c);
      } else if (next == ')' && prev_space) {
        add_letter(c);
      } else if (next == '.' && (prev_space || prev == ':') &&
                 (i + 2 == n || std::isspace(static_cast<unsigned char>(conclusion[i + 2])) != 0)) {
        add_letter(c);
      }
    } else if (c >= 'a' && c <= 'z' && prev == '(' && next == ')') {
      add_letter(static_cast<char>(c - 'a' + 'A'));
    }
  }
  const std::string norm = text::normalize_answer(conclusion);
  if (norm.size() == 1 && norm[0] >= 'a' && norm[0] <= 'z') add_letter(static_cast<char>(norm[0] - 'a' + 'A'));
  if (auto m = decide(letters, 1)) return *m;

  // Rung 2: exact normalized text.
  std::vector<std::string> norm_choices;
  norm_choices.reserve(choices.size());
  for (const auto& c : choices) norm_choices.push_back(text::normalize_answer(c));
  std::set<std::size_t> exact;
  for (std::size_t i = 0; i < norm_choices.size(); ++i) {
    if (!norm_choices[i].empty() && norm_choices[i] == norm) exact.insert(i);
  }
  if (auto m = decide(exact, 2)) return *m;

  // Rung 3: normalized substring.
  std::set<std::size_t> contained;
  for (std::size_t i = 0; i < norm_choices.size(); ++i) {
    if (!norm_choices[i].empty() && norm.find(norm_choices[i]) != std::string::npos) contained.insert(i);
  }
  if (auto m = decide(contained, 3)) return *m;

  return AnswerMatch{AnswerStatus::kNoMatch, 0, 0};
}

}  // namespace stlearn
