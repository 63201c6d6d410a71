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

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stlearn/error.hpp"

namespace stlearn {

class GatewayError : public Error {
 public:
  using Error::Error;
};

/// Replay transcript has no entry for a request. Never retried, never falls back.
class ReplayMiss : public GatewayError {
 public:
  ReplayMiss(std::string key, const std::string& what) : GatewayError(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct DecodingParams {
  double temperature = 0.0;
  int max_tokens = 1024;
  std::optional<std::int64_t> seed = 0;

  friend bool operator==(const DecodingParams&, const DecodingParams&) = default;
};

/// One member of the model lineage plus where to reach it.
struct ModelEndpoint {
  std::string model_id;
  std::string base_url;
  DecodingParams decoding;
  std::optional<std::string> auth_ref;  // name of an environment variable holding a bearer token

  void validate() const;
  ModelEndpoint with_model(std::string id) const;
};

struct GenerationRequest {
  std::size_t request_index = 0;
  std::string prompt;
  std::string image_ref;  // filesystem path or URI
  std::optional<DecodingParams> decoding;
  int sample_ordinal = 0;  // distinguishes repeated samples of one prompt
};

enum class FailureKind { kNone, kTransport, kMalformedResponse, kRejected, kUnresolvableImage, kImageTooLarge };

std::string_view to_string(FailureKind kind);

struct GenerationResult {
  std::size_t request_index = 0;
  std::string raw_text;
  int attempt_count = 0;
  std::chrono::milliseconds latency{0};
  FailureKind failure = FailureKind::kNone;
  std::string failure_reason;

  bool ok() const noexcept { return failure == FailureKind::kNone; }
};

/// Image bytes (for files) or the URI itself, and the hash that keys transcripts.
struct ResolvedImage {
  std::string ref;
  std::optional<std::string> bytes;
  std::string sha256;
};

enum class ReplyStatus { kOk, kTransient, kPermanent, kMalformed };

struct BackendReply {
  ReplyStatus status = ReplyStatus::kOk;
  std::string text;
  std::string detail;

  static BackendReply ok(std::string text) { return {ReplyStatus::kOk, std::move(text), {}}; }
  static BackendReply transient(std::string why) { return {ReplyStatus::kTransient, {}, std::move(why)}; }
  static BackendReply permanent(std::string why) { return {ReplyStatus::kPermanent, {}, std::move(why)}; }
  static BackendReply malformed(std::string why) { return {ReplyStatus::kMalformed, {}, std::move(why)}; }
};

struct BackendCall {
  const ModelEndpoint& endpoint;
  const GenerationRequest& request;
  const ResolvedImage& image;
  const DecodingParams& decoding;
  int attempt = 1;
};

/// A source of model output for one call. Implementations must be safe to call
/// from several threads at once.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual BackendReply complete(const BackendCall& call) = 0;
};

/// Scripted mock: the callable decides every reply.
class ScriptedBackend : public Backend {
 public:
  using Script = std::function<BackendReply(const BackendCall&)>;
  explicit ScriptedBackend(Script script) : script_(std::move(script)) {}
  BackendReply complete(const BackendCall& call) override { return script_(call); }

 private:
  Script script_;
};

/// Transcript key: model id, prompt hash, image hash and sample ordinal.
std::string transcript_key(const BackendCall& call);

struct TranscriptEntry {
  std::string model_id;
  std::string prompt_hash;
  std::string image_hash;
  int sample_ordinal = 0;
  std::string raw_text;

  std::string key() const;
};

std::vector<TranscriptEntry> read_transcript(const std::filesystem::path& path);

/// Passes calls through and appends every successful reply to a line-delimited transcript.
class RecordingBackend : public Backend {
 public:
  RecordingBackend(std::shared_ptr<Backend> inner, const std::filesystem::path& path);
  BackendReply complete(const BackendCall& call) override;

 private:
  std::shared_ptr<Backend> inner_;
  std::mutex mu_;
  std::ofstream out_;
};

/// Serves replies from a transcript only. A missing key throws ReplayMiss.
class ReplayBackend : public Backend {
 public:
  explicit ReplayBackend(const std::filesystem::path& path);
  BackendReply complete(const BackendCall& call) override;
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::map<std::string, std::string> entries_;
};

enum class TranscriptMode { kRecord, kReplay };

/// Record wraps inner; replay ignores inner (may be null) and needs an existing transcript.
std::shared_ptr<Backend> record_replay(std::shared_ptr<Backend> inner, const std::filesystem::path& transcript,
                                       TranscriptMode mode);

// ---- live HTTP -----------------------------------------------------------

struct HttpResponse {
  int status = 0;  // 0 when the request never completed
  std::string body;
  std::string error;
  std::map<std::string, std::string> headers;
};

/// Minimal POST transport so tests can substitute an instrumented fake.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post_json(const std::string& url, const std::map<std::string, std::string>& headers,
                                 const std::string& body, std::chrono::milliseconds timeout) = 0;
};

/// cpp-httplib backed transport (http and https).
std::shared_ptr<HttpTransport> make_http_transport();

/// Chat-completions request body: one user message whose content is the prompt text
/// part followed by the image part (base64 data URI for files, the URI otherwise).
std::string build_chat_request(const BackendCall& call);

/// Pulls choices[0].message.content out of a response body; nullopt if the shape is wrong.
std::optional<std::string> parse_chat_response(std::string_view body);

class ChatCompletionsBackend : public Backend {
 public:
  explicit ChatCompletionsBackend(std::shared_ptr<HttpTransport> transport,
                                  std::chrono::milliseconds timeout = std::chrono::seconds(120));
  BackendReply complete(const BackendCall& call) override;

 private:
  std::shared_ptr<HttpTransport> transport_;
  std::chrono::milliseconds timeout_;
};

// ---- gateway -------------------------------------------------------------

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{30000};

  std::chrono::milliseconds backoff_before(int attempt) const;  // attempt >= 2
};

struct GatewayOptions {
  RetryPolicy retry;
  std::size_t max_encoded_image_bytes = 4u << 20;
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to std::this_thread::sleep_for
};

class Gateway {
 public:
  explicit Gateway(std::shared_ptr<Backend> backend, GatewayOptions options = {});

  /// Transient replies are retried with exponential backoff; per-request failures are
  /// reported in the result. ReplayMiss propagates.
  GenerationResult generate(const ModelEndpoint& endpoint, const GenerationRequest& request) const;

  /// Results come back ordered by request_index, with at most `parallelism` calls in flight.
  std::vector<GenerationResult> generate_batch(const ModelEndpoint& endpoint,
                                               std::span<const GenerationRequest> requests,
                                               std::size_t parallelism) const;

  const GatewayOptions& options() const noexcept { return options_; }

 private:
  std::shared_ptr<Backend> backend_;
  GatewayOptions options_;
};

/// Resolves a file path (reads it) or a URI (hashes the string). nullopt if the file is missing.
std::optional<ResolvedImage> resolve_image(const std::string& ref);

/// Stable text form of a result list (latency excluded), for determinism checks.
std::string serialize_results(std::span<const GenerationResult> results);

}  // namespace stlearn
