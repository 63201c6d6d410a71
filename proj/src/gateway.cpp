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


#include "stlearn/gateway.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <set>
#include <thread>

#include "json.hpp"
#include "stlearn/util.hpp"

namespace stlearn {

namespace {

using nlohmann::ordered_json;

bool looks_like_uri(std::string_view ref) {
  return ref.find("://") != std::string_view::npos || ref.rfind("data:", 0) == 0;
}

}  // namespace

void ModelEndpoint::validate() const {
  if (model_id.empty()) throw GatewayError("endpoint model_id must be non-empty");
  if (!(decoding.temperature >= 0.0)) throw GatewayError("endpoint temperature must be >= 0");
  if (decoding.max_tokens <= 0) throw GatewayError("endpoint max_tokens must be positive");
}

ModelEndpoint ModelEndpoint::with_model(std::string id) const {
  ModelEndpoint e = *this;
  e.model_id = std::move(id);
  return e;
}

std::string_view to_string(FailureKind kind) {
  switch (kind) {
    case FailureKind::kNone: return "ok";
    case FailureKind::kTransport: return "transport";
    case FailureKind::kMalformedResponse: return "malformed_response";
    case FailureKind::kRejected: return "rejected";
    case FailureKind::kUnresolvableImage: return "unresolvable_image";
    case FailureKind::kImageTooLarge: return "image_too_large";
  }
  return "unknown";
}

std::string TranscriptEntry::key() const {
  return model_id + "|" + prompt_hash + "|" + image_hash + "|" + std::to_string(sample_ordinal);
}

std::string transcript_key(const BackendCall& call) {
  TranscriptEntry e{call.endpoint.model_id, sha256_hex(call.request.prompt), call.image.sha256,
                    call.request.sample_ordinal, {}};
  return e.key();
}

std::vector<TranscriptEntry> read_transcript(const std::filesystem::path& path) {
  std::vector<TranscriptEntry> out;
  for_each_line(path, [&](std::string_view line, std::size_t n) {
    try {
      auto j = ordered_json::parse(line);
      out.push_back({j.at("model_id").get<std::string>(), j.at("prompt_hash").get<std::string>(),
                     j.at("image_hash").get<std::string>(), j.value("sample", 0), j.at("raw_text").get<std::string>()});
    } catch (const std::exception& e) {
      throw RecordError(path.string(), n, std::string("malformed transcript entry: ") + e.what());
    }
  });
  return out;
}

RecordingBackend::RecordingBackend(std::shared_ptr<Backend> inner, const std::filesystem::path& path)
    : inner_(std::move(inner)), out_(path, std::ios::binary | std::ios::app) {
  if (!inner_) throw GatewayError("recording backend needs an inner backend");
  if (!out_) throw IoError("cannot open transcript for writing: " + path.string());
}

BackendReply RecordingBackend::complete(const BackendCall& call) {
  BackendReply reply = inner_->complete(call);
  if (reply.status != ReplyStatus::kOk) return reply;
  ordered_json j;
  j["model_id"] = call.endpoint.model_id;
  j["prompt_hash"] = sha256_hex(call.request.prompt);
  j["image_hash"] = call.image.sha256;
  j["sample"] = call.request.sample_ordinal;
  j["raw_text"] = reply.text;
  std::string line = j.dump() + "\n";
  std::lock_guard lock(mu_);
  out_ << line;
  out_.flush();
  return reply;
}

ReplayBackend::ReplayBackend(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw GatewayError("replay transcript not found: " + path.string());
  for (auto& e : read_transcript(path)) entries_.emplace(e.key(), std::move(e.raw_text));
}

BackendReply ReplayBackend::complete(const BackendCall& call) {
  std::string key = transcript_key(call);
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw ReplayMiss(key, "replay miss: no transcript entry for key " + key + " (request " +
                              std::to_string(call.request.request_index) + ")");
  }
  return BackendReply::ok(it->second);
}

std::shared_ptr<Backend> record_replay(std::shared_ptr<Backend> inner, const std::filesystem::path& transcript,
                                       TranscriptMode mode) {
  if (mode == TranscriptMode::kReplay) return std::make_shared<ReplayBackend>(transcript);
  return std::make_shared<RecordingBackend>(std::move(inner), transcript);
}

std::chrono::milliseconds RetryPolicy::backoff_before(int attempt) const {
  double ms = static_cast<double>(initial_backoff.count()) * std::pow(multiplier, std::max(0, attempt - 2));
  ms = std::min(ms, static_cast<double>(max_backoff.count()));
  return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
}

std::optional<ResolvedImage> resolve_image(const std::string& ref) {
  if (looks_like_uri(ref)) return ResolvedImage{ref, std::nullopt, sha256_hex(ref)};
  std::error_code ec;
  if (!std::filesystem::is_regular_file(ref, ec)) return std::nullopt;
  std::string bytes = read_file(ref);
  std::string hash = sha256_hex(bytes);
  return ResolvedImage{ref, std::move(bytes), std::move(hash)};
}

Gateway::Gateway(std::shared_ptr<Backend> backend, GatewayOptions options)
    : backend_(std::move(backend)), options_(std::move(options)) {
  if (!backend_) throw GatewayError("gateway needs a backend");
  if (options_.retry.max_retries < 0) throw GatewayError("max_retries must be >= 0");
  if (!options_.sleep) options_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

GenerationResult Gateway::generate(const ModelEndpoint& endpoint, const GenerationRequest& request) const {
  auto start = std::chrono::steady_clock::now();
  GenerationResult result;
  result.request_index = request.request_index;
  auto finish = [&](FailureKind kind, std::string reason) {
    result.failure = kind;
    result.failure_reason = std::move(reason);
    result.latency =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
    return result;
  };

  if (request.prompt.empty()) return finish(FailureKind::kRejected, "empty prompt");
  auto image = resolve_image(request.image_ref);
  if (!image) return finish(FailureKind::kUnresolvableImage, "cannot resolve image '" + request.image_ref + "'");
  if (image->bytes && base64_length(image->bytes->size()) > options_.max_encoded_image_bytes) {
    return finish(FailureKind::kImageTooLarge, "image '" + request.image_ref + "' is " +
                                                   std::to_string(base64_length(image->bytes->size())) +
                                                   " bytes encoded, cap is " +
                                                   std::to_string(options_.max_encoded_image_bytes));
  }

  const DecodingParams& decoding = request.decoding ? *request.decoding : endpoint.decoding;
  const int max_attempts = options_.retry.max_retries + 1;
  std::string last_detail;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    if (attempt > 1) options_.sleep(options_.retry.backoff_before(attempt));
    result.attempt_count = attempt;
    BackendReply reply = backend_->complete(BackendCall{endpoint, request, *image, decoding, attempt});
    switch (reply.status) {
      case ReplyStatus::kOk:
        result.raw_text = std::move(reply.text);
        return finish(FailureKind::kNone, {});
      case ReplyStatus::kTransient:
        last_detail = std::move(reply.detail);
        continue;
      case ReplyStatus::kPermanent:
        return finish(FailureKind::kRejected, std::move(reply.detail));
      case ReplyStatus::kMalformed:
        return finish(FailureKind::kMalformedResponse, std::move(reply.detail));
    }
  }
  return finish(FailureKind::kTransport, "gave up after " + std::to_string(max_attempts) + " attempts: " + last_detail);
}

std::vector<GenerationResult> Gateway::generate_batch(const ModelEndpoint& endpoint,
                                                      std::span<const GenerationRequest> requests,
                                                      std::size_t parallelism) const {
  if (parallelism == 0) throw GatewayError("parallelism must be >= 1");
  {
    std::set<std::size_t> seen;
    for (const auto& r : requests) {
      if (!seen.insert(r.request_index).second) {
        throw GatewayError("duplicate request_index " + std::to_string(r.request_index) + " in batch");
      }
    }
  }
  std::vector<GenerationResult> results(requests.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr error;
  std::mutex error_mu;

  auto worker = [&] {
    while (!abort.load()) {
      std::size_t i = next.fetch_add(1);
      if (i >= requests.size()) return;
      try {
        results[i] = generate(endpoint, requests[i]);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        abort.store(true);
      }
    }
  };

  std::size_t workers = std::min(parallelism, requests.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);
  std::stable_sort(results.begin(), results.end(),
                   [](const GenerationResult& a, const GenerationResult& b) { return a.request_index < b.request_index; });
  return results;
}

std::string serialize_results(std::span<const GenerationResult> results) {
  std::string out;
  for (const auto& r : results) {
    ordered_json j;
    j["request_index"] = r.request_index;
    j["status"] = std::string(to_string(r.failure));
    j["attempt_count"] = r.attempt_count;
    j["raw_text"] = r.raw_text;
    if (!r.ok()) j["reason"] = r.failure_reason;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

}  // namespace stlearn
