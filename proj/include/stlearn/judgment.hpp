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

#include <string>
#include <string_view>

namespace stlearn {

enum class Side { kLeft, kRight };

std::string_view to_string(Side side);
Side side_from_string(std::string_view s);

/// One annotator's forced choice between the two rationales of a task. sample_id,
/// domain and resolved_method are filled server-side from the task pool.
struct PreferenceJudgment {
  int task_id = 0;
  std::string sample_id;
  std::string domain;
  std::string annotator_id;
  Side choice = Side::kLeft;
  std::string resolved_method;
  std::string timestamp;

  friend bool operator==(const PreferenceJudgment&, const PreferenceJudgment&) = default;
};

std::string serialize_judgment(const PreferenceJudgment& j);
PreferenceJudgment parse_judgment(std::string_view line);

}  // namespace stlearn
