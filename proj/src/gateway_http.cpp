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


#include <cstdlib>

#include "httplib.h"
#include "json.hpp"
#include "stlearn/gateway.hpp"
#include "stlearn/text.hpp"
#include "stlearn/util.hpp"

namespace stlearn {

namespace {

using nlohmann::ordered_json;

class HttplibTransport : public HttpTransport {
 public:
  HttpResponse post_json(const std::string& url, const std::map<std::string, std::string>& headers,
                         const std::string& body, std::chrono::milliseconds timeout) override {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return {0, {}, "url without scheme: " + url, {}};
    auto path_begin = url.find('/', scheme_end + 3);
    std::string origin = path_begin == std::string::npos ? url : url.substr(0, path_begin);
    std::string path = path_begin == std::string::npos ? "/" : url.substr(path_begin);

    httplib::Client client(origin);
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, body, "application/json");
    if (!res) return {0, {}, httplib::to_string(res.error()), {}};
    HttpResponse out{res->status, res->body, {}, {}};
    for (const auto& [k, v] : res->headers) out.headers[k] = v;
    return out;
  }
};

std::string mime_type(const std::string& ref) {
  std::string ext = text::to_lower(std::filesystem::path(ref).extension().string());
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  if (ext == ".bmp") return "image/bmp";
  return "application/octet-stream";
}

}  // namespace

std::shared_ptr<HttpTransport> make_http_transport() { return std::make_shared<HttplibTransport>(); }

std::string build_chat_request(const BackendCall& call) {
  ordered_json text_part;
  text_part["type"] = "text";
  text_part["text"] = call.request.prompt;
  ordered_json image_part;
  image_part["type"] = "image_url";
  image_part["image_url"]["url"] = call.image.bytes
                                       ? "data:" + mime_type(call.image.ref) + ";base64," + base64_encode(*call.image.bytes)
                                       : call.image.ref;
  ordered_json message;
  message["role"] = "user";
  message["content"] = ordered_json::array({text_part, image_part});

  ordered_json body;
  body["model"] = call.endpoint.model_id;
  body["messages"] = ordered_json::array({message});
  body["temperature"] = call.decoding.temperature;
  body["max_tokens"] = call.decoding.max_tokens;
  if (call.decoding.seed) body["seed"] = *call.decoding.seed;
  return body.dump();
}

std::optional<std::string> parse_chat_response(std::string_view body) {
  auto j = ordered_json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto choices = j.find("choices");
  if (choices == j.end() || !choices->is_array() || choices->empty()) return std::nullopt;
  const auto& first = (*choices)[0];
  if (!first.is_object() || !first.contains("message") || !first["message"].is_object()) return std::nullopt;
  const auto& message = first["message"];
  auto content = message.find("content");
  if (content == message.end()) return std::nullopt;
  if (content->is_string()) return content->get<std::string>();
  if (content->is_array()) {
    std::string out;
    for (const auto& part : *content) {
      if (part.is_object() && part.value("type", "") == "text" && part.contains("text") && part["text"].is_string()) {
        out += part["text"].get<std::string>();
      }
    }
    return out;
  }
  return std::nullopt;
}

ChatCompletionsBackend::ChatCompletionsBackend(std::shared_ptr<HttpTransport> transport,
                                               std::chrono::milliseconds timeout)
    : transport_(std::move(transport)), timeout_(timeout) {
  if (!transport_) throw GatewayError("chat-completions backend needs a transport");
}

BackendReply ChatCompletionsBackend::complete(const BackendCall& call) {
  std::map<std::string, std::string> headers;
  if (call.endpoint.auth_ref) {
    const char* token = std::getenv(call.endpoint.auth_ref->c_str());
    if (token == nullptr) return BackendReply::permanent("credential variable " + *call.endpoint.auth_ref + " is not set");
    headers["Authorization"] = std::string("Bearer ") + token;
  }
  std::string url = call.endpoint.base_url;
  while (!url.empty() && url.back() == '/') url.pop_back();
  url += "/chat/completions";

  HttpResponse res = transport_->post_json(url, headers, build_chat_request(call), timeout_);
  if (res.status == 0) return BackendReply::transient("transport: " + res.error);
  if (res.status == 429 || res.status == 408 || res.status >= 500) {
    return BackendReply::transient("HTTP " + std::to_string(res.status));
  }
  if (res.status < 200 || res.status >= 300) {
    return BackendReply::permanent("HTTP " + std::to_string(res.status) + ": " + res.body.substr(0, 512));
  }
  auto content = parse_chat_response(res.body);
  if (!content) return BackendReply::malformed("response lacks choices[0].message.content");
  return BackendReply::ok(std::move(*content));
}

}  // namespace stlearn
