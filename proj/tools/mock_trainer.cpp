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


// Usage: stlearn-mock-trainer TRAINSET BASE_MODEL OUTPUT_FILE
//
// Validates the trainset and writes "<base>-ft-<first 8 hex of sha256(trainset)>" to
// OUTPUT_FILE. Set STLEARN_MOCK_TRAINER_FAIL to make it exit non-zero.

#include <cstdlib>
#include <iostream>

#include "stlearn/trainset.hpp"
#include "stlearn/util.hpp"

int main(int argc, char** argv) {
  if (argc != 4) {
    std::cerr << "usage: stlearn-mock-trainer TRAINSET BASE_MODEL OUTPUT_FILE\n";
    return 2;
  }
  if (const char* fail = std::getenv("STLEARN_MOCK_TRAINER_FAIL"); fail != nullptr && *fail != '\0') {
    std::cerr << "mock trainer: failing on request (" << fail << ")\n";
    return 3;
  }
  try {
    const auto examples = stlearn::read_trainset(argv[1]);
    if (examples.empty()) {
      std::cerr << "mock trainer: empty trainset\n";
      return 4;
    }
    const std::string digest = stlearn::sha256_hex(stlearn::read_file(argv[1]));
    const std::string model = std::string(argv[2]) + "-ft-" + digest.substr(0, 8);
    stlearn::write_file_atomic(argv[3], model + "\n");
    std::cout << "trained " << model << " on " << examples.size() << " examples\n";
  } catch (const std::exception& e) {
    std::cerr << "mock trainer: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
