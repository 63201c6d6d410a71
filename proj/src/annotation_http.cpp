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


#include <cctype>

#include "httplib.h"
#include "json.hpp"
#include "stlearn/annotation.hpp"
#include "stlearn/util.hpp"

namespace stlearn {

namespace {

using nlohmann::ordered_json;

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(ordered_json{{"error", message}}.dump(), "application/json");
}

std::string content_type_for(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "application/octet-stream";
}

}  // namespace

struct AnnotationServer::Impl {
  Impl(AnnotationStore& s, ServerOptions o) : store(s), options(std::move(o)) {}
  AnnotationStore& store;
  ServerOptions options;
  httplib::Server server;
};

AnnotationServer::AnnotationServer(AnnotationStore& store, ServerOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(options))) {
  auto& srv = impl_->server;
  AnnotationStore& st = impl_->store;

  srv.Get("/api/tasks/next", [&st](const httplib::Request& req, httplib::Response& res) {
    const std::string annotator = req.get_param_value("annotator");
    if (annotator.empty()) return send_error(res, 400, "missing annotator parameter");
    try {
      auto task = st.next_task(annotator);
      if (!task) {
        res.status = 204;
        return;
      }
      res.status = 200;
      res.set_content(client_task_json(*task), "application/json");
    } catch (const UnknownAnnotatorError& e) {
      send_error(res, 404, e.what());
    }
  });

  srv.Post("/api/judgments", [&st](const httplib::Request& req, httplib::Response& res) {
    int task_id = 0;
    std::string annotator;
    Side choice = Side::kLeft;
    try {
      const auto body = ordered_json::parse(req.body);
      task_id = body.at("task_id").get<int>();
      annotator = body.at("annotator_id").get<std::string>();
      choice = side_from_string(body.at("choice").get<std::string>());
    } catch (const std::exception&) {
      return send_error(res, 400, "body must be {task_id, annotator_id, choice: left|right}");
    }
    try {
      const PreferenceJudgment j = st.submit(task_id, annotator, choice);
      // The resolved method stays server-side.
      res.status = 201;
      res.set_content(ordered_json{{"task_id", j.task_id},
                                   {"annotator_id", j.annotator_id},
                                   {"choice", to_string(j.choice)},
                                   {"timestamp", j.timestamp}}
                          .dump(),
                      "application/json");
    } catch (const DuplicateJudgmentError& e) {
      send_error(res, 409, e.what());
    } catch (const UnknownTaskError& e) {
      send_error(res, 404, e.what());
    } catch (const UnknownAnnotatorError& e) {
      send_error(res, 404, e.what());
    }
  });

  srv.Get("/api/export", [&st](const httplib::Request&, httplib::Response& res) {
    std::string body = "[";
    bool first = true;
    for (const auto& j : st.export_judgments()) {
      if (!first) body += ',';
      first = false;
      body += serialize_judgment(j);
    }
    body += "]";
    res.set_content(body, "application/json");
  });

  srv.Get(R"(/api/tasks/(\d+)/image)", [&st](const httplib::Request& req, httplib::Response& res) {
    const AnnotationTask* t = nullptr;
    try {
      t = st.pool().find(std::stoi(req.matches[1].str()));
    } catch (const std::exception&) {
    }
    if (t == nullptr) return send_error(res, 404, "unknown task");
    try {
      res.set_content(read_file(t->image_ref), content_type_for(t->image_ref));
    } catch (const IoError&) {
      send_error(res, 404, "image not available");
    }
  });

  if (impl_->options.static_dir && !srv.set_mount_point("/", impl_->options.static_dir->string())) {
    throw AnnotationError("static directory does not exist: " + impl_->options.static_dir->string());
  }
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind() {
  auto& o = impl_->options;
  if (o.port == 0) {
    port_ = impl_->server.bind_to_any_port(o.host);
  } else {
    port_ = impl_->server.bind_to_port(o.host, o.port) ? o.port : -1;
  }
  if (port_ < 0) throw AnnotationError("cannot bind " + o.host + ":" + std::to_string(o.port));
  return port_;
}

void AnnotationServer::serve() { impl_->server.listen_after_bind(); }

void AnnotationServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace stlearn
