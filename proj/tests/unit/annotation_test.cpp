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


#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "stlearn/annotation.hpp"
#include "stlearn/util.hpp"
#include "world.hpp"

namespace stlearn {
namespace {

using nlohmann::json;
using stltest::TempDir;

const std::vector<std::string> kDomains{"commonsense", "natural-science", "language-science", "social-science"};

struct PoolFixture : ::testing::Test {
  TempDir dir{"ann"};
  DatasetSplit split;
  MethodRationales a{"method-alpha", {}};
  MethodRationales b{"method-beta", {}};

  // n samples per domain; every fifth sample is wrong for method B.
  void make(std::size_t per_domain) {
    auto path = stltest::write_synthetic_split(dir.path(), "eval", per_domain * kDomains.size(), kDomains);
    split = load_dataset(path);
    a.records.clear();
    b.records.clear();
    for (std::size_t i = 0; i < split.size(); ++i) {
      const auto& s = split.samples()[i];
      a.records.push_back({s.id, s.domain, "Rationale one for " + s.id, "correct", s.gold(), true});
      bool ok = i % 5 != 4;
      b.records.push_back({s.id, s.domain, "Rationale two for " + s.id, ok ? "correct" : "wrong",
                           ok ? s.gold() : (s.gold() + 1) % 4, ok});
    }
  }

  PoolOptions opts(std::size_t quota, std::uint64_t seed = 7) {
    PoolOptions o;
    o.per_domain_quota = quota;
    o.seed = seed;
    return o;
  }
};

TEST_F(PoolFixture, QuotaPerDomainAndDeterminism) {
  make(40);
  auto pool = build_task_pool(a, b, split, opts(20));
  ASSERT_EQ(pool.tasks.size(), 80u);
  std::map<std::string, int> per;
  for (std::size_t i = 0; i < pool.tasks.size(); ++i) {
    const auto& t = pool.tasks[i];
    EXPECT_EQ(t.task_id, static_cast<int>(i) + 1);
    ++per[t.domain];
    EXPECT_EQ(std::set<std::string>({t.left.method, t.right.method}),
              std::set<std::string>({"method-alpha", "method-beta"}));
    const auto& br = *std::find_if(b.records.begin(), b.records.end(), [&](const auto& r) { return r.sample_id == t.sample_id; });
    EXPECT_TRUE(br.correct) << t.sample_id;
  }
  for (const auto& d : kDomains) EXPECT_EQ(per[d], 20) << d;
  EXPECT_EQ(pool.tasks.front().domain, "commonsense");

  auto again = build_task_pool(a, b, split, opts(20));
  EXPECT_EQ(serialize_pool(again), serialize_pool(pool));
  auto other = build_task_pool(a, b, split, opts(20, 8));
  EXPECT_NE(serialize_pool(other), serialize_pool(pool));

  save_pool(pool, dir / "pool.json");
  EXPECT_EQ(serialize_pool(load_pool(dir / "pool.json")), serialize_pool(pool));
}

TEST_F(PoolFixture, ShortfallListsEveryDomain) {
  make(10);  // 8 of 10 eligible per domain
  try {
    build_task_pool(a, b, split, opts(9));
    FAIL();
  } catch (const ShortfallError& e) {
    ASSERT_EQ(e.shortfalls().size(), 4u);
    EXPECT_EQ(e.shortfalls()[0].eligible, 8u);
    EXPECT_EQ(e.shortfalls()[0].quota, 9u);
  }
  EXPECT_EQ(build_task_pool(a, b, split, opts(8)).tasks.size(), 32u);
  auto any = opts(10);
  any.require_both_correct = false;
  EXPECT_EQ(build_task_pool(a, b, split, any).tasks.size(), 40u);
}

// Exact two-sided band: smallest k with P(X < k) > alpha/2 and mirror, for X ~ Bin(n, 1/2).
std::pair<int, int> binomial_band(int n, double alpha) {
  std::vector<double> pmf(n + 1);
  double log_half_n = n * std::log(0.5);
  for (int k = 0; k <= n; ++k) {
    pmf[k] = std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + log_half_n);
  }
  double cdf = 0;
  int lo = 0;
  while (cdf + pmf[lo] <= alpha / 2) cdf += pmf[lo++];
  return {lo, n - lo};
}

TEST_F(PoolFixture, SidesAreBalanced) {
  make(70);
  auto pool = build_task_pool(a, b, split, opts(50, 12345));
  int alpha_left = 0;
  for (const auto& t : pool.tasks) alpha_left += t.left.method == "method-alpha" ? 1 : 0;
  auto [lo, hi] = binomial_band(200, 0.01);
  EXPECT_EQ(lo, 82);
  EXPECT_EQ(hi, 118);
  EXPECT_GE(alpha_left, lo);
  EXPECT_LE(alpha_left, hi);
}

struct StoreFixture : PoolFixture {
  TaskPool pool;
  void SetUp() override {
    make(5);
    pool = build_task_pool(a, b, split, opts(3));
  }
};

TEST_F(StoreFixture, NextSubmitConflict) {
  AnnotationStore store(pool, {"ann1", "ann2"}, dir / "log.jsonl");
  auto t = store.next_task("ann1");
  ASSERT_TRUE(t);
  EXPECT_EQ(t->task_id, 1);
  EXPECT_EQ(t->total, 12u);
  EXPECT_EQ(t->judged, 0u);
  auto j = store.submit(1, "ann1", Side::kRight);
  EXPECT_EQ(j.resolved_method, pool.tasks[0].right.method);
  EXPECT_EQ(j.sample_id, pool.tasks[0].sample_id);
  EXPECT_EQ(store.next_task("ann1")->task_id, 2);
  EXPECT_EQ(store.next_task("ann1")->judged, 1u);
  EXPECT_EQ(store.next_task("ann2")->task_id, 1);
  EXPECT_THROW(store.submit(1, "ann1", Side::kLeft), DuplicateJudgmentError);
  EXPECT_THROW(store.submit(99, "ann1", Side::kLeft), UnknownTaskError);
  EXPECT_THROW(store.submit(1, "stranger", Side::kLeft), UnknownAnnotatorError);
  EXPECT_THROW(store.next_task("stranger"), UnknownAnnotatorError);

  // Out-of-order submission leaves the gap as the next task.
  store.submit(3, "ann1", Side::kLeft);
  EXPECT_EQ(store.next_task("ann1")->task_id, 2);
  for (int id = 2; id <= 12; ++id) {
    if (id != 3) store.submit(id, "ann1", Side::kLeft);
  }
  EXPECT_FALSE(store.next_task("ann1"));
}

TEST_F(StoreFixture, ExportIsStableAndLogReloads) {
  {
    AnnotationStore store(pool, {"ann1", "ann2"}, dir / "log.jsonl");
    store.submit(2, "ann2", Side::kLeft);
    store.submit(1, "ann1", Side::kRight);
    auto e1 = store.export_judgments();
    auto e2 = store.export_judgments();
    EXPECT_EQ(e1, e2);
    ASSERT_EQ(e1.size(), 2u);
    EXPECT_EQ(e1[0].task_id, 2);
  }
  AnnotationStore reloaded(pool, {"ann1", "ann2"}, dir / "log.jsonl");
  auto e = reloaded.export_judgments();
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e[1].annotator_id, "ann1");
  EXPECT_THROW(reloaded.submit(1, "ann1", Side::kLeft), DuplicateJudgmentError);
  EXPECT_EQ(reloaded.next_task("ann2")->task_id, 1);
  for (const auto& j : e) EXPECT_EQ(parse_judgment(serialize_judgment(j)), j);
}

TEST_F(StoreFixture, AnnotatorsFallBackToPool) {
  pool.annotators = {"p1"};
  AnnotationStore store(pool, {}, dir / "log.jsonl");
  EXPECT_TRUE(store.is_annotator("p1"));
  EXPECT_FALSE(store.is_annotator("ann1"));
}

TEST_F(PoolFixture, ClientPayloadsNeverNameAMethod) {
  make(70);
  auto pool = build_task_pool(a, b, split, opts(50));
  AnnotationStore store(pool, {"ann1"}, dir / "log.jsonl");
  std::size_t payloads = 0;
  while (auto t = store.next_task("ann1")) {
    std::string body = client_task_json(*t);
    EXPECT_EQ(body.find("method"), std::string::npos) << body;
    EXPECT_EQ(body.find("alpha"), std::string::npos);
    EXPECT_EQ(body.find("beta"), std::string::npos);
    auto keys = json::parse(body);
    std::set<std::string> names;
    for (auto it = keys.begin(); it != keys.end(); ++it) names.insert(it.key());
    EXPECT_EQ(names, (std::set<std::string>{"task_id", "image_url", "question", "choices", "left", "right", "progress"}));
    store.submit(t->task_id, "ann1", t->task_id % 2 ? Side::kLeft : Side::kRight);
    ++payloads;
  }
  EXPECT_EQ(payloads, 200u);
}

struct HttpFixture : StoreFixture {
  std::unique_ptr<AnnotationStore> store;
  std::unique_ptr<AnnotationServer> server;
  std::thread thread;
  std::unique_ptr<httplib::Client> client;

  void SetUp() override {
    StoreFixture::SetUp();
    store = std::make_unique<AnnotationStore>(pool, std::vector<std::string>{"ann1"}, dir / "log.jsonl");
    server = std::make_unique<AnnotationServer>(*store);
    int port = server->bind();
    thread = std::thread([this] { server->serve(); });
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
  }
  void TearDown() override {
    server->stop();
    thread.join();
  }

  httplib::Result post(const std::string& body) { return client->Post("/api/judgments", body, "application/json"); }
};

TEST_F(HttpFixture, Endpoints) {
  auto r = client->Get("/api/tasks/next");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
  EXPECT_EQ(client->Get("/api/tasks/next?annotator=nobody")->status, 404);
  r = client->Get("/api/tasks/next?annotator=ann1");
  ASSERT_EQ(r->status, 200);
  auto task = json::parse(r->body);
  EXPECT_EQ(task["task_id"], 1);
  EXPECT_EQ(task["image_url"], "/api/tasks/1/image");
  EXPECT_EQ(task["progress"]["total"], 12);

  auto img = client->Get("/api/tasks/1/image");
  ASSERT_EQ(img->status, 200);
  EXPECT_EQ(img->body, read_file(dir / "img" / "fruit.png"));
  EXPECT_EQ(client->Get("/api/tasks/999/image")->status, 404);

  EXPECT_EQ(post("not json")->status, 400);
  EXPECT_EQ(post(R"({"task_id": 1, "annotator_id": "ann1", "choice": "middle"})")->status, 400);
  auto ok = post(R"({"task_id": 1, "annotator_id": "ann1", "choice": "left"})");
  ASSERT_EQ(ok->status, 201);
  EXPECT_EQ(ok->body.find("method"), std::string::npos);
  EXPECT_EQ(post(R"({"task_id": 1, "annotator_id": "ann1", "choice": "right"})")->status, 409);
  EXPECT_EQ(post(R"({"task_id": 77, "annotator_id": "ann1", "choice": "right"})")->status, 404);
  EXPECT_EQ(post(R"({"task_id": 2, "annotator_id": "zed", "choice": "right"})")->status, 404);

  auto exp = json::parse(client->Get("/api/export")->body);
  ASSERT_EQ(exp.size(), 1u);
  EXPECT_EQ(exp[0]["resolved_method"], pool.tasks[0].left.method);

  for (int id = 2; id <= 12; ++id) {
    post(R"({"task_id": )" + std::to_string(id) + R"(, "annotator_id": "ann1", "choice": "right"})");
  }
  EXPECT_EQ(client->Get("/api/tasks/next?annotator=ann1")->status, 204);
}

}  // namespace
}  // namespace stlearn
