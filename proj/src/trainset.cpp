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


#include "stlearn/trainset.hpp"

#include <set>
#include <unordered_set>

#include "json.hpp"
#include "stlearn/prompts.hpp"
#include "stlearn/text.hpp"
#include "stlearn/util.hpp"

namespace stlearn {

namespace {

using nlohmann::ordered_json;

const VqaSample& lookup(const DatasetSplit& split, const std::string& id) {
  const VqaSample* s = split.find(id);
  if (s == nullptr) throw TrainsetError("generation references unknown sample id '" + id + "'");
  return *s;
}

std::string example_id(int iteration, std::string_view kind, const std::string& sample_id) {
  return "n" + std::to_string(iteration) + "-" + std::string(kind) + "-" + sample_id;
}

std::string positive_target(const VqaSample& s, const std::string& caption, const std::string& reasoning) {
  return "###CAPTION: " + caption + "\n###REASONING: " + reasoning + "\n###CONCLUSION: " + conclusion_target(s);
}

void require_empty(bool empty, Variant v, std::string_view what) {
  if (!empty) {
    throw TrainsetError("variant " + std::string(to_string(v)) + " does not accept " + std::string(what) + " records");
  }
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kStl: return "STL";
    case Variant::kStlNoNeg: return "STL_NO_NEG";
    case Variant::kStlNoCapNeg: return "STL_NO_CAP_NEG";
    case Variant::kStar: return "STAR";
    case Variant::kDirectSft: return "DIRECT_SFT";
  }
  return "UNKNOWN";
}

Variant variant_from_string(std::string_view s) {
  for (Variant v : {Variant::kStl, Variant::kStlNoNeg, Variant::kStlNoCapNeg, Variant::kStar, Variant::kDirectSft}) {
    if (to_string(v) == s) return v;
  }
  throw Error("unknown variant '" + std::string(s) + "'");
}

bool uses_caption_prompt(Variant v) { return v == Variant::kStl || v == Variant::kStlNoNeg || v == Variant::kStar; }

FilterCounters& FilterCounters::operator+=(const FilterCounters& o) {
  generation_failed += o.generation_failed;
  parse_failed += o.parse_failed;
  no_match += o.no_match;
  ambiguous += o.ambiguous;
  wrong += o.wrong;
  return *this;
}

std::string_view to_string(ExampleTag tag) {
  switch (tag) {
    case ExampleTag::kPos: return "pos";
    case ExampleTag::kNeg: return "neg";
    case ExampleTag::kStarRationalized: return "star_rationalized";
    case ExampleTag::kDirect: return "direct";
  }
  return "unknown";
}

ExampleTag tag_from_string(std::string_view s) {
  for (ExampleTag t : {ExampleTag::kPos, ExampleTag::kNeg, ExampleTag::kStarRationalized, ExampleTag::kDirect}) {
    if (to_string(t) == s) return t;
  }
  throw TrainsetError("unknown example tag '" + std::string(s) + "'");
}

PositiveSet build_positive_set(std::span<const PositiveGeneration> generations, const DatasetSplit& split,
                               int iteration) {
  PositiveSet out;
  std::unordered_set<std::string> correct;
  for (const auto& g : generations) {
    const VqaSample& s = lookup(split, g.sample_id);
    if (g.generation_failed) {
      ++out.counters.generation_failed;
      continue;
    }
    if (!g.rationale) {
      ++out.counters.parse_failed;
      continue;
    }
    if (g.answer == AnswerStatus::kNoMatch || (g.answer == AnswerStatus::kMatched && !g.rationale->predicted_index)) {
      ++out.counters.no_match;
      continue;
    }
    if (g.answer == AnswerStatus::kAmbiguous) {
      ++out.counters.ambiguous;
      continue;
    }
    if (*g.rationale->predicted_index != s.gold()) {
      ++out.counters.wrong;
      continue;
    }
    if (correct.insert(s.id).second) {
      out.records.push_back({s.id, g.rationale->caption, g.rationale->reasoning, s.gold(), iteration});
    }
  }
  // Samples without any correct generation form the incorrect set (first attempt kept).
  std::unordered_set<std::string> seen;
  for (const auto& g : generations) {
    if (g.generation_failed || correct.contains(g.sample_id) || !seen.insert(g.sample_id).second) continue;
    IncorrectRecord rec{g.sample_id, "", std::nullopt, iteration};
    if (g.rationale) {
      rec.rationale = g.rationale->reasoning;
      if (g.answer == AnswerStatus::kMatched) rec.wrong_prediction = g.rationale->predicted_index;
    }
    out.incorrect.push_back(std::move(rec));
  }
  return out;
}

std::vector<NegativeRequest> enumerate_negative_requests(std::span<const PositiveRecord> positives,
                                                         const DatasetSplit& split) {
  std::vector<NegativeRequest> out;
  for (const auto& p : positives) {
    const VqaSample& s = lookup(split, p.sample_id);
    for (std::size_t c = 0; c < s.choices.size(); ++c) {
      if (c != s.gold()) out.push_back({s.id, c});
    }
  }
  return out;
}

NegativeSet build_negative_set(std::span<const NegativeResponse> responses,
                               std::span<const NegativeRequest> requests, int iteration) {
  std::set<NegativeRequest> allowed(requests.begin(), requests.end());
  NegativeSet out;
  for (const auto& r : responses) {
    if (!allowed.contains(NegativeRequest{r.sample_id, r.distractor_index})) {
      throw TrainsetError("negative response for non-enumerated pair (" + r.sample_id + ", " +
                          std::to_string(r.distractor_index) + ")");
    }
    if (!r.rationale) {
      ++out.counters.parse_failed;
      continue;
    }
    out.records.push_back({r.sample_id, r.distractor_index, r.rationale->caption, r.rationale->explanation, iteration});
  }
  return out;
}

StarSets build_star_sets(std::span<const PositiveGeneration> generations, const DatasetSplit& split,
                         std::span<const RationalizedResponse> rationalized, int iteration) {
  PositiveSet first = build_positive_set(generations, split, iteration);
  StarSets out;
  out.first_pass = first.counters;
  std::unordered_set<std::string> positive_ids;
  for (const auto& p : first.records) positive_ids.insert(p.sample_id);
  std::unordered_set<std::string> incorrect_ids;
  for (const auto& i : first.incorrect) incorrect_ids.insert(i.sample_id);

  std::unordered_set<std::string> accepted;
  for (const auto& r : rationalized) {
    const VqaSample& s = lookup(split, r.sample_id);
    if (positive_ids.contains(s.id)) {
      throw TrainsetError("rationalized response for first-pass-correct sample '" + s.id + "'");
    }
    if (!incorrect_ids.contains(s.id)) {
      throw TrainsetError("rationalized response for sample '" + s.id + "' with no first-pass answer");
    }
    if (!r.rationale) {
      ++out.rationalization.parse_failed;
      continue;
    }
    AnswerMatch m = extract_answer(r.rationale->conclusion_raw, s.choices);
    if (m.status == AnswerStatus::kNoMatch) {
      ++out.rationalization.no_match;
    } else if (m.status == AnswerStatus::kAmbiguous) {
      ++out.rationalization.ambiguous;
    } else if (m.index != s.gold()) {
      ++out.rationalization.wrong;
    } else if (accepted.insert(s.id).second) {
      out.rationalized.push_back({s.id, r.rationale->caption, r.rationale->reasoning, s.gold(), iteration});
    }
  }
  out.positives = std::move(first.records);
  out.incorrect = std::move(first.incorrect);
  return out;
}

std::string conclusion_target(const VqaSample& sample) {
  return "The correct choice is " + text::format_choice(sample.gold(), sample.choices[sample.gold()]) + ".";
}

std::vector<FineTuneExample> assemble_trainset(const TrainsetInputs& in, Variant variant, const DatasetSplit& split,
                                               int iteration) {
  std::vector<FineTuneExample> out;
  auto emit = [&](const VqaSample& s, std::string id, std::string prompt, std::string target, ExampleTag tag) {
    out.push_back({std::move(id), std::move(prompt), std::move(target), split.resolve_image(s), tag,
                   Provenance{s.id, iteration, variant}});
  };

  switch (variant) {
    case Variant::kStl:
    case Variant::kStlNoNeg:
      require_empty(in.rationalized.empty(), variant, "star_rationalized");
      if (variant == Variant::kStlNoNeg) require_empty(in.negatives.empty(), variant, "negative");
      for (const auto& p : in.positives) {
        const VqaSample& s = lookup(split, p.sample_id);
        emit(s, example_id(iteration, "pos", s.id), render_positive_prompt(s), positive_target(s, p.caption, p.reasoning),
             ExampleTag::kPos);
      }
      for (const auto& n : in.negatives) {
        const VqaSample& s = lookup(split, n.sample_id);
        if (n.distractor_index == s.gold()) {
          throw TrainsetError("negative record for sample '" + s.id + "' targets the gold answer");
        }
        std::string id = example_id(iteration, "neg", s.id) + "-" + text::choice_label(n.distractor_index);
        emit(s, std::move(id), render_negative_training_prompt(s, n.distractor_index),
             "###CAPTION: " + n.caption + "\n###EXPLANATION: " + n.explanation, ExampleTag::kNeg);
      }
      break;
    case Variant::kStlNoCapNeg:
      require_empty(in.negatives.empty(), variant, "negative");
      require_empty(in.rationalized.empty(), variant, "star_rationalized");
      for (const auto& p : in.positives) {
        const VqaSample& s = lookup(split, p.sample_id);
        emit(s, example_id(iteration, "pos", s.id), render_uncaptioned_prompt(s),
             "###REASONING: " + p.reasoning + "\n###CONCLUSION: " + conclusion_target(s), ExampleTag::kPos);
      }
      break;
    case Variant::kStar:
      require_empty(in.negatives.empty(), variant, "negative");
      for (const auto& p : in.positives) {
        const VqaSample& s = lookup(split, p.sample_id);
        emit(s, example_id(iteration, "pos", s.id), render_positive_prompt(s), positive_target(s, p.caption, p.reasoning),
             ExampleTag::kPos);
      }
      for (const auto& r : in.rationalized) {
        const VqaSample& s = lookup(split, r.sample_id);
        emit(s, example_id(iteration, "star", s.id), render_positive_prompt(s), positive_target(s, r.caption, r.rationale),
             ExampleTag::kStarRationalized);
      }
      break;
    case Variant::kDirectSft:
      require_empty(in.positives.empty(), variant, "positive");
      require_empty(in.negatives.empty(), variant, "negative");
      require_empty(in.rationalized.empty(), variant, "star_rationalized");
      for (const auto& s : split.samples()) {
        emit(s, example_id(iteration, "direct", s.id), render_baseline_prompt(BaselineKind::kDirectSft, s),
             text::format_choice(s.gold(), s.choices[s.gold()]), ExampleTag::kDirect);
      }
      break;
  }
  return out;
}

std::string serialize_example(const FineTuneExample& e) {
  ordered_json j;
  j["example_id"] = e.example_id;
  j["image"] = e.image_ref;
  j["prompt"] = e.prompt;
  j["target"] = e.target;
  j["tag"] = std::string(to_string(e.tag));
  ordered_json prov;
  prov["sample_id"] = e.provenance.sample_id;
  prov["iteration"] = e.provenance.iteration;
  prov["variant"] = std::string(to_string(e.provenance.variant));
  j["provenance"] = std::move(prov);
  return j.dump();
}

FineTuneExample parse_example(std::string_view line) {
  auto j = ordered_json::parse(line);
  if (!j.is_object()) throw TrainsetError("record is not an object");
  FineTuneExample e;
  e.example_id = j.at("example_id").get<std::string>();
  e.image_ref = j.at("image").get<std::string>();
  e.prompt = j.at("prompt").get<std::string>();
  e.target = j.at("target").get<std::string>();
  e.tag = tag_from_string(j.at("tag").get<std::string>());
  const auto& prov = j.at("provenance");
  e.provenance.sample_id = prov.at("sample_id").get<std::string>();
  e.provenance.iteration = prov.at("iteration").get<int>();
  e.provenance.variant = variant_from_string(prov.at("variant").get<std::string>());
  if (e.prompt.empty() || e.target.empty()) throw TrainsetError("prompt and target must be non-empty");
  return e;
}

void write_trainset(std::span<const FineTuneExample> examples, const std::filesystem::path& path) {
  std::string out;
  for (const auto& e : examples) {
    if (e.prompt.empty() || e.target.empty()) {
      throw TrainsetError("example '" + e.example_id + "' has an empty prompt or target");
    }
    out += serialize_example(e);
    out.push_back('\n');
  }
  write_file_atomic(path, out);
}

std::vector<FineTuneExample> read_trainset(const std::filesystem::path& path) {
  std::vector<FineTuneExample> out;
  for_each_line(path, [&](std::string_view line, std::size_t n) {
    try {
      out.push_back(parse_example(line));
    } catch (const std::exception& e) {
      throw RecordError(path.string(), n, std::string("malformed trainset record: ") + e.what());
    }
  });
  return out;
}

}  // namespace stlearn
