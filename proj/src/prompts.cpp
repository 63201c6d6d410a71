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


#include "stlearn/prompts.hpp"

#include <array>
#include <utility>

#include "stlearn/text.hpp"

namespace stlearn {

namespace detail {
extern const std::array<std::pair<std::string_view, std::string_view>, 7> kEmbeddedTemplates;
}  // namespace detail

namespace {

bool is_placeholder_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_'; }

// Visits literal runs and placeholder names of body in order.
template <class Literal, class Placeholder>
void scan(std::string_view body, Literal&& on_literal, Placeholder&& on_placeholder) {
  std::size_t pos = 0;
  std::size_t lit_start = 0;
  while (pos < body.size()) {
    if (body[pos] == '{') {
      std::size_t end = pos + 1;
      while (end < body.size() && is_placeholder_char(body[end])) ++end;
      if (end < body.size() && body[end] == '}' && end > pos + 1) {
        on_literal(body.substr(lit_start, pos - lit_start));
        on_placeholder(body.substr(pos + 1, end - pos - 1));
        pos = end + 1;
        lit_start = pos;
        continue;
      }
    }
    ++pos;
  }
  on_literal(body.substr(lit_start));
}

std::string_view embedded_body(std::string_view name) {
  for (const auto& [n, body] : detail::kEmbeddedTemplates) {
    if (n == name) return body;
  }
  throw PromptError("no embedded template named '" + std::string(name) + "'");
}

void check_distractor(const VqaSample& sample, std::size_t wrong_index) {
  if (wrong_index >= sample.choices.size()) {
    throw PromptError("distractor index " + std::to_string(wrong_index) + " out of range for sample '" + sample.id +
                      "' with " + std::to_string(sample.choices.size()) + " choices");
  }
  if (wrong_index == sample.gold()) {
    throw PromptError("distractor index equals the gold answer index for sample '" + sample.id + "'");
  }
}

void check_sample(const VqaSample& sample) {
  auto violations = validate_sample(sample);
  if (!violations.empty()) throw PromptError("invalid sample '" + sample.id + "': " + violations.front().message);
  if (sample.choices.size() > 26) throw PromptError("sample '" + sample.id + "' has more than 26 choices");
}

std::map<std::string, std::string> negative_values(const VqaSample& sample, std::size_t wrong_index) {
  return {
      {"question", sample.question},
      {"correct_choice", text::format_choice(sample.gold(), sample.choices[sample.gold()])},
      {"incorrect_choice", text::format_choice(wrong_index, sample.choices[wrong_index])},
  };
}

}  // namespace

std::string_view template_name(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::kPositive: return "positive";
    case TemplateKind::kNegativeGeneration: return "negative_generation";
    case TemplateKind::kNegativeTraining: return "negative_training";
    case TemplateKind::kCot: return "cot";
    case TemplateKind::kDirectVqa: return "direct_vqa";
    case TemplateKind::kDirectSft: return "direct_sft";
    case TemplateKind::kRationaleNoCaption: return "rationale_no_caption";
    case TemplateKind::kStarRationalization: return "star_rationalization";
  }
  return "unknown";
}

PromptTemplate::PromptTemplate(std::string name, std::string body) : name_(std::move(name)), body_(std::move(body)) {
  scan(body_, [](std::string_view) {}, [&](std::string_view p) { placeholders_.emplace(p); });
}

std::string PromptTemplate::render(const std::map<std::string, std::string>& values) const {
  for (const auto& p : placeholders_) {
    if (!values.contains(p)) throw PromptError("template '" + name_ + "': no value for {" + p + "}");
  }
  for (const auto& [k, v] : values) {
    if (!placeholders_.contains(k)) throw PromptError("template '" + name_ + "' has no placeholder {" + k + "}");
  }
  std::string out;
  out.reserve(body_.size() + 256);
  scan(body_, [&](std::string_view lit) { out += lit; }, [&](std::string_view p) { out += values.at(std::string(p)); });
  return out;
}

PromptTemplate PromptTemplate::without_line_containing(std::string_view placeholder, std::string new_name) const {
  const std::string token = "{" + std::string(placeholder) + "}";
  std::string out;
  std::size_t start = 0;
  bool removed = false;
  while (start <= body_.size()) {
    std::size_t nl = body_.find('\n', start);
    bool last = nl == std::string::npos;
    std::string_view line = std::string_view(body_).substr(start, last ? std::string::npos : nl - start);
    if (line.find(token) != std::string_view::npos) {
      removed = true;
    } else {
      out += line;
      if (!last) out.push_back('\n');
    }
    if (last) break;
    start = nl + 1;
  }
  if (!removed) throw PromptError("template '" + name_ + "' has no line containing " + token);
  return PromptTemplate(std::move(new_name), std::move(out));
}

const PromptTemplate& builtin_template(TemplateKind kind) {
  static const std::array<PromptTemplate, 8> kTemplates = [] {
    PromptTemplate negative(std::string(template_name(TemplateKind::kNegativeGeneration)),
                            std::string(embedded_body("negative_generation")));
    auto load = [](TemplateKind k) {
      return PromptTemplate(std::string(template_name(k)), std::string(embedded_body(template_name(k))));
    };
    return std::array<PromptTemplate, 8>{
        load(TemplateKind::kPositive),
        negative,
        negative.without_line_containing("correct_choice", std::string(template_name(TemplateKind::kNegativeTraining))),
        load(TemplateKind::kCot),
        load(TemplateKind::kDirectVqa),
        load(TemplateKind::kDirectSft),
        load(TemplateKind::kRationaleNoCaption),
        load(TemplateKind::kStarRationalization),
    };
  }();
  return kTemplates[static_cast<std::size_t>(kind)];
}

std::string question_and_choices(const VqaSample& sample) {
  std::string out = sample.question;
  for (std::size_t i = 0; i < sample.choices.size(); ++i) {
    out.push_back('\n');
    out += text::format_choice(i, sample.choices[i]);
  }
  return out;
}

std::string render_positive_prompt(const VqaSample& sample) {
  check_sample(sample);
  return builtin_template(TemplateKind::kPositive).render({{"question_and_choices", question_and_choices(sample)}});
}

std::string render_negative_generation_prompt(const VqaSample& sample, std::size_t wrong_index) {
  check_sample(sample);
  check_distractor(sample, wrong_index);
  return builtin_template(TemplateKind::kNegativeGeneration).render(negative_values(sample, wrong_index));
}

std::string render_negative_training_prompt(const VqaSample& sample, std::size_t wrong_index) {
  check_sample(sample);
  check_distractor(sample, wrong_index);
  auto values = negative_values(sample, wrong_index);
  values.erase("correct_choice");
  return builtin_template(TemplateKind::kNegativeTraining).render(values);
}

std::string render_baseline_prompt(BaselineKind kind, const VqaSample& sample) {
  check_sample(sample);
  TemplateKind tk = kind == BaselineKind::kCot         ? TemplateKind::kCot
                    : kind == BaselineKind::kDirectVqa ? TemplateKind::kDirectVqa
                                                       : TemplateKind::kDirectSft;
  return builtin_template(tk).render({{"question_and_choices", question_and_choices(sample)}});
}

std::string render_uncaptioned_prompt(const VqaSample& sample) {
  check_sample(sample);
  return builtin_template(TemplateKind::kRationaleNoCaption)
      .render({{"question_and_choices", question_and_choices(sample)}});
}

std::string render_star_rationalization_prompt(const VqaSample& sample) {
  check_sample(sample);
  return builtin_template(TemplateKind::kStarRationalization)
      .render({{"question_and_choices", question_and_choices(sample)},
               {"correct_choice", text::format_choice(sample.gold(), sample.choices[sample.gold()])}});
}

}  // namespace stlearn
