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


#include "stlearn/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"
#include "stlearn/prompts.hpp"

namespace stlearn {

namespace {

using nlohmann::ordered_json;

std::string prompt_for(EvalMode mode, const VqaSample& s) {
  switch (mode) {
    case EvalMode::kDirect: return render_baseline_prompt(BaselineKind::kDirectVqa, s);
    case EvalMode::kCot: return render_baseline_prompt(BaselineKind::kCot, s);
    case EvalMode::kPositiveTemplate: return render_positive_prompt(s);
    case EvalMode::kUncaptioned: return render_uncaptioned_prompt(s);
  }
  throw EvalError("unknown eval mode");
}

// Conclusion text to run extraction on, or nullopt when the response does not parse.
std::optional<std::string> conclusion_for(EvalMode mode, const std::string& raw, ParseMode pm) {
  switch (mode) {
    case EvalMode::kDirect: return raw;
    case EvalMode::kCot: {
      auto r = parse_conclusion(raw, pm);
      if (!r) return std::nullopt;
      return r.value();
    }
    case EvalMode::kPositiveTemplate: {
      auto r = parse_positive(raw, pm);
      if (!r) return std::nullopt;
      return r->conclusion_raw;
    }
    case EvalMode::kUncaptioned: {
      auto r = parse_uncaptioned(raw, pm);
      if (!r) return std::nullopt;
      return r->conclusion_raw;
    }
  }
  return std::nullopt;
}

std::string column_title(const std::string& domain) {
  std::string out = domain;
  bool start = true;
  for (char& c : out) {
    if (start && c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    start = c == '-' || c == ' ' || c == '_';
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return {};
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  auto emit_row = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out += " | ";
      std::string cell = row[c];
      std::string pad(width[c] - cell.size(), ' ');
      out += c == 0 ? cell + pad : pad + cell;
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out.push_back('\n');
  };
  emit_row(rows.front());
  std::string rule;
  for (std::size_t c = 0; c < width.size(); ++c) {
    if (c > 0) rule += "-+-";
    rule += std::string(width[c], '-');
  }
  out += rule + "\n";
  for (std::size_t r = 1; r < rows.size(); ++r) emit_row(rows[r]);
  return out;
}

std::string render_delimited(const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out.push_back(',');
      out += csv_field(row[c]);
    }
    out.push_back('\n');
  }
  return out;
}

}  // namespace

Percentage Percentage::from_ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw EvalError("percentage of an empty total");
  // floor((num * 10000 / den) + 1/2) == floor((2 * num * 10000 + den) / (2 * den))
  std::uint64_t h = (2 * num * 10000 + den) / (2 * den);
  return from_hundredths(static_cast<std::int64_t>(h));
}

Percentage Percentage::from_double(double v) { return from_hundredths(std::llround(v * 100.0)); }

std::string Percentage::str() const {
  std::int64_t h = hundredths_;
  std::string sign = h < 0 ? "-" : "";
  std::uint64_t a = static_cast<std::uint64_t>(h < 0 ? -h : h);
  std::string frac = std::to_string(a % 100);
  if (frac.size() < 2) frac.insert(0, "0");
  return sign + std::to_string(a / 100) + "." + frac;
}

Percentage macro_average(std::span<const Percentage> per_domain) {
  if (per_domain.empty()) throw EvalError("macro average of an empty list");
  std::int64_t sum = 0;
  for (const auto& p : per_domain) sum += p.hundredths();
  const auto n = static_cast<std::int64_t>(per_domain.size());
  // Half-up on the exact rational sum / n, using floor division.
  std::int64_t num = 2 * sum + n;
  std::int64_t den = 2 * n;
  std::int64_t q = num / den;
  if ((num % den != 0) && (num < 0)) --q;
  return Percentage::from_hundredths(q);
}

Percentage macro_average(std::span<const double> per_domain) {
  std::vector<Percentage> ps;
  ps.reserve(per_domain.size());
  for (double v : per_domain) ps.push_back(Percentage::from_double(v));
  return macro_average(ps);
}

std::string_view to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::kDirect: return "direct";
    case EvalMode::kCot: return "cot";
    case EvalMode::kPositiveTemplate: return "positive_template";
    case EvalMode::kUncaptioned: return "uncaptioned";
  }
  return "unknown";
}

EvalMode eval_mode_from_string(std::string_view s) {
  for (EvalMode m : {EvalMode::kDirect, EvalMode::kCot, EvalMode::kPositiveTemplate, EvalMode::kUncaptioned}) {
    if (to_string(m) == s) return m;
  }
  throw EvalError("unknown eval mode '" + std::string(s) + "'");
}

Percentage EvalReport::macro() const {
  std::vector<Percentage> acc;
  for (const auto& d : domains) {
    if (d.total > 0) acc.push_back(d.accuracy());
  }
  if (acc.empty()) return Percentage{};
  return macro_average(acc);
}

std::size_t EvalReport::total() const {
  std::size_t n = 0;
  for (const auto& d : domains) n += d.total;
  return n;
}

std::size_t EvalReport::correct() const {
  std::size_t n = 0;
  for (const auto& d : domains) n += d.correct;
  return n;
}

EvalOutcome evaluate_split(const Gateway& gateway, const ModelEndpoint& model, const DatasetSplit& split,
                           EvalMode mode, const EvalOptions& options) {
  if (split.empty()) throw EvalError("cannot evaluate an empty split");
  std::vector<GenerationRequest> requests;
  requests.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& s = split.samples()[i];
    requests.push_back({i, prompt_for(mode, s), split.resolve_image(s), std::nullopt, 0});
  }
  auto results = gateway.generate_batch(model, requests, options.parallelism);

  EvalOutcome out;
  out.report.model_id = model.model_id;
  out.report.mode = mode;
  out.report.label = model.model_id;
  std::map<std::string, DomainScore, DomainLess> scores;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& s = split.samples()[i];
    const auto& r = results[i];
    DomainScore& d = scores[s.domain];
    d.domain = s.domain;
    ++d.total;
    EvalRecord rec{s.id, s.domain, r.raw_text, {}, std::nullopt, false};
    if (!r.ok()) {
      ++d.generation_failures;
      rec.outcome = "generation_failed";
    } else if (auto conclusion = conclusion_for(mode, r.raw_text, options.parse_mode); !conclusion) {
      ++d.parse_failures;
      rec.outcome = "parse_failed";
    } else {
      AnswerMatch m = extract_answer(*conclusion, s.choices);
      if (m.status != AnswerStatus::kMatched) {
        ++d.parse_failures;
        rec.outcome = std::string(to_string(m.status));
      } else {
        rec.predicted_index = m.index;
        rec.correct = m.index == s.gold();
        rec.outcome = rec.correct ? "correct" : "wrong";
        if (rec.correct) ++d.correct;
      }
    }
    out.records.push_back(std::move(rec));
  }
  for (auto& [name, score] : scores) out.report.domains.push_back(score);
  return out;
}

std::string serialize_eval_record(const EvalRecord& r) {
  ordered_json j;
  j["sample_id"] = r.sample_id;
  j["domain"] = r.domain;
  j["outcome"] = r.outcome;
  j["predicted_index"] = r.predicted_index ? ordered_json(*r.predicted_index) : ordered_json(nullptr);
  j["correct"] = r.correct;
  j["raw_text"] = r.raw_text;
  return j.dump();
}

EvalRecord parse_eval_record(std::string_view line) {
  auto j = ordered_json::parse(line);
  EvalRecord r;
  r.sample_id = j.at("sample_id").get<std::string>();
  r.domain = j.at("domain").get<std::string>();
  r.outcome = j.at("outcome").get<std::string>();
  if (j.contains("predicted_index") && !j["predicted_index"].is_null()) {
    r.predicted_index = j["predicted_index"].get<std::size_t>();
  }
  r.correct = j.at("correct").get<bool>();
  r.raw_text = j.at("raw_text").get<std::string>();
  return r;
}

std::string eval_report_to_json(const EvalReport& report) {
  ordered_json j;
  j["model_id"] = report.model_id;
  j["mode"] = std::string(to_string(report.mode));
  j["label"] = report.label;
  ordered_json domains = ordered_json::array();
  for (const auto& d : report.domains) {
    ordered_json dj;
    dj["domain"] = d.domain;
    dj["total"] = d.total;
    dj["correct"] = d.correct;
    dj["parse_failures"] = d.parse_failures;
    dj["generation_failures"] = d.generation_failures;
    dj["accuracy"] = d.total > 0 ? d.accuracy().str() : "-";
    domains.push_back(std::move(dj));
  }
  j["domains"] = std::move(domains);
  j["macro"] = report.macro().str();
  return j.dump();
}

EvalReport eval_report_from_json(std::string_view json) {
  auto j = ordered_json::parse(json);
  EvalReport r;
  r.model_id = j.at("model_id").get<std::string>();
  r.mode = eval_mode_from_string(j.at("mode").get<std::string>());
  r.label = j.value("label", r.model_id);
  for (const auto& dj : j.at("domains")) {
    DomainScore d;
    d.domain = dj.at("domain").get<std::string>();
    d.total = dj.at("total").get<std::size_t>();
    d.correct = dj.at("correct").get<std::size_t>();
    d.parse_failures = dj.value("parse_failures", std::size_t{0});
    d.generation_failures = dj.value("generation_failures", std::size_t{0});
    if (d.correct > d.total) throw EvalError("domain " + d.domain + ": correct exceeds total");
    r.domains.push_back(std::move(d));
  }
  return r;
}

PreferenceSummary aggregate_preferences(std::span<const PreferenceJudgment> judgments, int annotators_per_sample) {
  if (annotators_per_sample < 1 || annotators_per_sample % 2 == 0) {
    throw EvalError("annotators_per_sample must be a positive odd number, got " + std::to_string(annotators_per_sample));
  }
  struct SampleVotes {
    std::string domain;
    std::map<std::string, int> votes;
    std::set<std::string> annotators;
    int count = 0;
  };
  std::map<std::string, SampleVotes> samples;
  std::set<std::string> methods;
  for (const auto& j : judgments) {
    auto& sv = samples[j.sample_id];
    if (sv.count == 0) sv.domain = j.domain;
    if (sv.domain != j.domain) throw EvalError("sample '" + j.sample_id + "' judged under two domains");
    if (!sv.annotators.insert(j.annotator_id).second) {
      throw EvalError("sample '" + j.sample_id + "' has two judgments from annotator '" + j.annotator_id + "'");
    }
    ++sv.votes[j.resolved_method];
    ++sv.count;
    methods.insert(j.resolved_method);
  }

  PreferenceSummary out;
  out.annotators_per_sample = annotators_per_sample;
  out.methods.assign(methods.begin(), methods.end());
  std::map<std::string, DomainPreference, DomainLess> per_domain;
  for (const auto& [id, sv] : samples) {
    if (sv.count != annotators_per_sample) {
      throw EvalError("sample '" + id + "' has " + std::to_string(sv.count) + " judgments, expected " +
                      std::to_string(annotators_per_sample));
    }
    auto& dp = per_domain[sv.domain];
    if (dp.domain.empty()) {
      dp.domain = sv.domain;
      for (const auto& m : out.methods) dp.preferred[m] = 0;
    }
    ++dp.total;
    for (const auto& [method, votes] : sv.votes) {
      if (2 * votes > annotators_per_sample) ++dp.preferred[method];
    }
  }
  for (auto& [name, dp] : per_domain) {
    for (const auto& m : out.methods) dp.preferred.try_emplace(m, 0);
    out.domains.push_back(std::move(dp));
  }
  return out;
}

ReportFormat report_format_from_string(std::string_view s) {
  if (s == "table") return ReportFormat::kTable;
  if (s == "delimited" || s == "csv") return ReportFormat::kDelimited;
  throw EvalError("unknown report format '" + std::string(s) + "'");
}

std::string render_report(std::span<const EvalReport> reports, std::span<const PreferenceSummary> preferences,
                          ReportFormat format) {
  std::set<std::string, DomainLess> domains;
  for (const auto& r : reports) {
    for (const auto& d : r.domains) domains.insert(d.domain);
  }
  const bool table = format == ReportFormat::kTable;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{table ? "Method" : "method"};
  for (const auto& d : domains) header.push_back(table ? column_title(d) : d);
  header.push_back(table ? "Average" : "average");
  rows.push_back(std::move(header));
  for (const auto& r : reports) {
    std::vector<std::string> row{r.label.empty() ? r.model_id : r.label};
    for (const auto& d : domains) {
      auto it = std::find_if(r.domains.begin(), r.domains.end(), [&](const DomainScore& s) { return s.domain == d; });
      row.push_back(it != r.domains.end() && it->total > 0 ? it->accuracy().str() : "-");
    }
    bool any = std::any_of(r.domains.begin(), r.domains.end(), [](const DomainScore& s) { return s.total > 0; });
    row.push_back(any ? r.macro().str() : "-");
    rows.push_back(std::move(row));
  }
  std::string out = table ? render_table(rows) : render_delimited(rows);

  for (const auto& summary : preferences) {
    std::vector<std::vector<std::string>> prows;
    std::vector<std::string> ph{table ? "Domain" : "domain"};
    for (const auto& m : summary.methods) ph.push_back(m);
    ph.push_back(table ? "Total" : "total");
    ph.push_back(table ? "Annotators" : "annotators_per_sample");
    prows.push_back(std::move(ph));
    for (const auto& d : summary.domains) {
      std::vector<std::string> row{table ? column_title(d.domain) : d.domain};
      for (const auto& m : summary.methods) {
        auto it = d.preferred.find(m);
        row.push_back(std::to_string(it == d.preferred.end() ? 0 : it->second));
      }
      row.push_back(std::to_string(d.total));
      row.push_back(std::to_string(summary.annotators_per_sample));
      prows.push_back(std::move(row));
    }
    out += "\n";
    out += table ? render_table(prows) : render_delimited(prows);
  }
  return out;
}

}  // namespace stlearn
