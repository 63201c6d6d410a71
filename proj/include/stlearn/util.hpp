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
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>

namespace stlearn {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

/// Standard (RFC 4648) base64 with padding.
std::string base64_encode(std::string_view data);

/// Length base64_encode() would produce for n input bytes.
constexpr std::size_t base64_length(std::size_t n) { return 4 * ((n + 2) / 3); }

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file, then renames over path.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

/// Calls fn(line, line_number) for every line; line_number is 1-based. A final
/// line without a trailing newline is still visited; a trailing newline does not
/// produce an empty final line.
void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::string_view, std::size_t)>& fn);

/// UTC, second resolution, e.g. 2026-10-18T09:30:00Z.
std::string utc_timestamp();

/// Single-quotes s for /bin/sh unless it only contains characters that never need quoting.
std::string shell_quote(std::string_view s);

}  // namespace stlearn
