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

// Shared fixtures: scratch directories, synthetic splits and a scripted model that
// answers according to a policy keyed on (model depth, prompt kind, sample).

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <regex>
#include <string>
#include <unistd.h>
#include <vector>

#include "stlearn/dataset.hpp"
#include "stlearn/gateway.hpp"
#include "stlearn/orchestrator.hpp"
#include "stlearn/text.hpp"
#include "stlearn/util.hpp"

namespace stltest {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("stlearn-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    if (std::getenv("STLEARN_KEEP_TMP") == nullptr) fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline stlearn::VqaSample sample(std::string id, std::string question, std::vector<std::string> choices,
                                 std::int64_t answer, std::string domain = "commonsense",
                                 std::string image = "img/x.png") {
  stlearn::VqaSample s;
  s.id = std::move(id);
  s.image_ref = std::move(image);
  s.question = std::move(question);
  s.choices = std::move(choices);
  s.answer_index = answer;
  s.domain = std::move(domain);
  return s;
}

inline const std::vector<std::string>& fruit_choices() {
  static const std::vector<std::string> c{"red apple", "green pear", "yellow banana", "purple grape"};
  return c;
}

/// Gold index of synthetic item i.
inline std::size_t synthetic_gold(std::size_t i) { return (i * 7 + 1) % 4; }

/// Writes <dir>/<name>.jsonl with `count` four-choice items named "<name>-<i>" whose
/// questions read "Item <name>-<i>: which fruit is shown?". Domains cycle through `domains`.
/// All items share one image file under <dir>/img/.
inline fs::path write_synthetic_split(const fs::path& dir, const std::string& name, std::size_t count,
                                      const std::vector<std::string>& domains = {"commonsense"}) {
  fs::create_directories(dir / "img");
  const fs::path image = dir / "img" / "fruit.png";
  if (!fs::exists(image)) stlearn::write_file_atomic(image, std::string("\x89PNG fake image bytes", 21));
  std::vector<stlearn::VqaSample> samples;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string id = name + "-" + std::to_string(i);
    samples.push_back(sample(id, "Item " + id + ": which fruit is shown?", fruit_choices(),
                             static_cast<std::int64_t>(synthetic_gold(i)), domains[i % domains.size()],
                             "img/fruit.png"));
  }
  const fs::path path = dir / (name + ".jsonl");
  stlearn::write_dataset(stlearn::DatasetSplit(name, samples, dir), path);
  return path;
}

enum class PromptKind { kPositive, kUncaptioned, kNegative, kStar, kCot, kDirect, kUnknown };

inline PromptKind classify_prompt(const std::string& p) {
  if (p.find("explain why the answer is wrong") != std::string::npos) return PromptKind::kNegative;
  if (p.find("Hint: the correct choice is") != std::string::npos) return PromptKind::kStar;
  if (p.find("three specific sections") != std::string::npos) return PromptKind::kPositive;
  if (p.find("two specific sections: REASONING and CONCLUSION") != std::string::npos) return PromptKind::kUncaptioned;
  if (p.find("Let's think step by step") != std::string::npos) return PromptKind::kCot;
  if (p.find("Answer with the option's letter") != std::string::npos) return PromptKind::kDirect;
  return PromptKind::kUnknown;
}

struct ItemRef {
  std::string split;
  std::size_t index = 0;
  std::string id() const { return split + "-" + std::to_string(index); }
};

inline ItemRef item_in_prompt(const std::string& prompt) {
  static const std::regex re(R"(Item ([a-z]+)-([0-9]+):)");
  std::smatch m;
  if (!std::regex_search(prompt, m, re)) throw std::runtime_error("prompt names no synthetic item");
  return {m[1].str(), static_cast<std::size_t>(std::stoul(m[2].str()))};
}

inline std::string letter(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

/// Decides the scripted model's behaviour. depth 0 is the base model, depth k the model
/// produced by the k-th distinct fine-tune seen by the backend.
struct Policy {
  std::function<bool(int depth, const ItemRef&)> correct = [](int, const ItemRef&) { return true; };
  std::function<bool(int depth, const ItemRef&)> malformed = [](int, const ItemRef&) { return false; };
  std::function<bool(int depth, const ItemRef&)> rationalize_correct = [](int, const ItemRef&) { return true; };
};

class ScriptedWorld : public stlearn::Backend {
 public:
  explicit ScriptedWorld(Policy policy) : policy_(std::move(policy)) {}

  stlearn::BackendReply complete(const stlearn::BackendCall& call) override {
    const int depth = depth_of(call.endpoint.model_id);
    ++calls_;
    const std::string& prompt = call.request.prompt;
    const PromptKind kind = classify_prompt(prompt);
    const ItemRef item = item_in_prompt(prompt);
    const std::size_t gold = synthetic_gold(item.index);
    const std::size_t wrong = (gold + 1) % 4;
    const std::string caption = "###CAPTION: A picture for item " + item.id() + " showing a fruit bowl.";
    switch (kind) {
      case PromptKind::kNegative:
        return stlearn::BackendReply::ok(caption + "\n###EXPLANATION: That option does not match the fruit in view.");
      case PromptKind::kStar: {
        const std::size_t a = policy_.rationalize_correct(depth, item) ? gold : wrong;
        return stlearn::BackendReply::ok(caption + "\n###REASONING: Given the hint, the fruit matches.\n###CONCLUSION: (" +
                                         letter(a) + ")");
      }
      case PromptKind::kPositive:
      case PromptKind::kUncaptioned: {
        if (policy_.malformed(depth, item)) {
          return stlearn::BackendReply::ok("I think it is a fruit of some kind, item " + item.id() + ".");
        }
        const std::size_t a = policy_.correct(depth, item) ? gold : wrong;
        const std::string body = "###REASONING: The colour and shape settle it.\n###CONCLUSION: (" + letter(a) + ")";
        return stlearn::BackendReply::ok(kind == PromptKind::kPositive ? caption + "\n" + body : body);
      }
      case PromptKind::kCot: {
        const std::size_t a = policy_.correct(depth, item) ? gold : wrong;
        return stlearn::BackendReply::ok("Step by step for " + item.id() + ".\n###CONCLUSION: (" + letter(a) + ")");
      }
      case PromptKind::kDirect: {
        const std::size_t a = policy_.correct(depth, item) ? gold : wrong;
        return stlearn::BackendReply::ok(letter(a));
      }
      case PromptKind::kUnknown: break;
    }
    return stlearn::BackendReply::permanent("unrecognised prompt");
  }

  int depth_of(const std::string& model_id) {
    std::lock_guard lock(mu_);
    auto [it, inserted] = depth_.emplace(model_id, static_cast<int>(depth_.size()));
    return it->second;
  }
  std::size_t calls() const { return calls_; }

 private:
  Policy policy_;
  std::mutex mu_;
  std::map<std::string, int> depth_;
  std::atomic<std::size_t> calls_{0};
};

inline std::string mock_trainer_command() {
  return stlearn::shell_quote(STLEARN_MOCK_TRAINER) + " {trainset} {base_model} {output_model}";
}

/// Config JSON for a synthetic run; extra fields are merged on top.
inline std::string run_config_json(const std::string& variant, const fs::path& train, const fs::path& eval,
                                   const fs::path& output_dir, int max_iterations, const std::string& extra = "") {
  std::string j = "{\"variant\": \"" + variant + "\", \"train_split\": \"" + train.string() +
                  "\", \"eval_split\": \"" + eval.string() + "\", \"output_dir\": \"" + output_dir.string() +
                  "\", \"endpoint\": {\"model_id\": \"base-vlm\", \"base_url\": \"http://127.0.0.1:9\"}, "
                  "\"trainer_command\": " +
                  "\"" + std::regex_replace(mock_trainer_command(), std::regex("\""), "\\\"") +
                  "\", \"max_iterations\": " + std::to_string(max_iterations) +
                  ", \"parallelism\": 4, \"gateway\": {\"initial_backoff_ms\": 0}";
  if (!extra.empty()) j += ", " + extra;
  j += "}";
  return j;
}

}  // namespace stltest
