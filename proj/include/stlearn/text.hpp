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
#include <string>
#include <string_view>

// Small text helpers shared by the dataset validator, prompt rendering and answer extraction.
namespace stlearn::text {

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
std::string collapse_whitespace(std::string_view s);

/// Lowercase, trim, collapse internal whitespace runs to one space.
std::string normalize(std::string_view s);

/// normalize() followed by stripping trailing punctuation (.,;:!?).
std::string normalize_answer(std::string_view s);

/// 'A' for 0, 'B' for 1, ... Throws std::out_of_range past 'Z'.
char choice_label(std::size_t index);

/// "(L) text"
std::string format_choice(std::size_t index, std::string_view choice);

bool starts_with_ci(std::string_view s, std::string_view prefix);

}  // namespace stlearn::text
