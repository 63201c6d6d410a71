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
#include <map>
#include <set>
#include <string>
#include <string_view>

#include "stlearn/dataset.hpp"
#include "stlearn/error.hpp"

namespace stlearn {

class PromptError : public Error {
 public:
  using Error::Error;
};

enum class TemplateKind {
  kPositive,
  kNegativeGeneration,
  kNegativeTraining,
  kCot,
  kDirectVqa,
  kDirectSft,
  kRationaleNoCaption,
  kStarRationalization,
};

std::string_view template_name(TemplateKind kind);

/// A template body with `{name}` placeholders (name = [a-z0-9_]+). Any other brace
/// sequence is literal text.
class PromptTemplate {
 public:
  PromptTemplate(std::string name, std::string body);

  const std::string& name() const noexcept { return name_; }
  const std::string& body() const noexcept { return body_; }
  const std::set<std::string>& placeholders() const noexcept { return placeholders_; }

  /// Single-pass substitution; substituted values are never re-expanded. The value
  /// map must cover exactly the placeholder set.
  std::string render(const std::map<std::string, std::string>& values) const;

  /// The same template with every body line containing `{placeholder}` removed.
  PromptTemplate without_line_containing(std::string_view placeholder, std::string new_name) const;

 private:
  std::string name_;
  std::string body_;
  std::set<std::string> placeholders_;
};

/// Compiled-in copy of templates/<name>.txt.
const PromptTemplate& builtin_template(TemplateKind kind);

/// Question text, then one "(L) choice" line per choice in stored order.
std::string question_and_choices(const VqaSample& sample);

std::string render_positive_prompt(const VqaSample& sample);

/// Gold answer shown; wrong_index names the distractor to argue against.
std::string render_negative_generation_prompt(const VqaSample& sample, std::size_t wrong_index);

/// Same as the generation prompt minus the line revealing the gold answer.
std::string render_negative_training_prompt(const VqaSample& sample, std::size_t wrong_index);

enum class BaselineKind { kCot, kDirectVqa, kDirectSft };

std::string render_baseline_prompt(BaselineKind kind, const VqaSample& sample);

/// Two-section (REASONING, CONCLUSION) prompt used by the caption-free ablation.
std::string render_uncaptioned_prompt(const VqaSample& sample);

/// STaR rationalization: positive prompt with the gold choice given as a hint.
std::string render_star_rationalization_prompt(const VqaSample& sample);

}  // namespace stlearn
