#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <thread>

#include "studentsim/annotation.hpp"
#include "studentsim/errors.hpp"
#include "studentsim/jsonl.hpp"

#include <httplib.h>

using namespace studentsim;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Rig {
  std::shared_ptr<StubBackend> stub = std::make_shared<StubBackend>();
  Gateway gateway{stub, 8};
  std::vector<StudentProfile> profiles;
  CandidateSet candidates;

  Rig() {
    for (std::uint64_t s = 0; s < 6; ++s) profiles.push_back(sample_profile(s));
    candidates.ids = {profiles[0].id, profiles[1].id, profiles[2].id};
    candidates.run_id = "test";
  }

  AnnotationService service(AnnotationOptions o = {}) {
    return AnnotationService(gateway, profiles, candidates, std::move(o), default_catalog(),
                             [] { return std::string("2000-01-01T00:00:00Z"); });
  }
};

AnnotationOptions with_turns(std::size_t n, fs::path log = {}) {
  AnnotationOptions o;
  o.min_turns = n;
  o.log_path = std::move(log);
  return o;
}

void chat(AnnotationService& svc, const std::string& session, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) svc.post_turn(session, "Question " + std::to_string(i) + "?");
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("studentsim_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("session creation policy") {
  Rig rig;
  auto svc = rig.service();
  const auto s = svc.create_session(rig.candidates.ids[0], "e1");
  CHECK(s.status == SessionStatus::kOpen);
  CHECK(s.expert_turns() == 0);
  CHECK(s.transcript.turns.empty());
  CHECK(s.transcript.purpose == TranscriptPurpose::kExpertSession);
  CHECK(s.id == "s-000001");

  CHECK_THROWS_AS(svc.create_session("nobody", "e1"), NotFoundError);
  CHECK_THROWS_AS(svc.create_session(rig.profiles[4].id, "e1"), PolicyError);

  const auto other = svc.create_session(rig.candidates.ids[0], "e2");
  CHECK(other.id != s.id);
  svc.post_turn(other.id, "Hi, how is your semester going?");
  CHECK(svc.get_session(s.id).expert_turns() == 0);
  CHECK(svc.get_session(other.id).expert_turns() == 1);
  CHECK_THROWS_AS(svc.get_session("s-999999"), NotFoundError);
}

TEST_CASE("turns, eligibility and rating rules") {
  Rig rig;
  auto svc = rig.service();
  const auto s = svc.create_session(rig.candidates.ids[1], "e1");
  const auto reply = svc.post_turn(s.id, "What are you studying?");
  CHECK_FALSE(reply.empty());
  auto cur = svc.get_session(s.id);
  CHECK(cur.expert_turns() == 1);
  REQUIRE(cur.transcript.turns.size() == 2);
  CHECK(cur.transcript.turns[0].speaker == "expert");
  CHECK(cur.transcript.turns[1].speaker == "student");
  CHECK(cur.transcript.turns[1].text == reply);

  chat(svc, s.id, 13);
  CHECK(svc.get_session(s.id).expert_turns() == 14);
  CHECK_THROWS_AS(svc.submit_rating(s.id, 87, "ok"), PolicyError);
  chat(svc, s.id, 1);

  CHECK_THROWS_AS(svc.submit_rating(s.id, 101, "ok"), InputError);
  CHECK_THROWS_AS(svc.submit_rating(s.id, 0, "ok"), InputError);
  CHECK_THROWS_AS(svc.submit_rating(s.id, 87, ""), InputError);
  CHECK_THROWS_AS(svc.submit_rating(s.id, 87, "ok", {{"profile_score", 6}}), InputError);

  const auto r = svc.submit_rating(s.id, 87, "Consistent with the profile.", {{"profile_score", 4}}, "ann-1");
  CHECK(r.score == 87);
  CHECK(r.normalized == doctest::Approx(8.7).epsilon(1e-15));
  CHECK(r.agent_id == rig.candidates.ids[1]);
  CHECK(r.annotator_id == "ann-1");
  CHECK(svc.get_session(s.id).status == SessionStatus::kRated);

  CHECK_THROWS_AS(svc.post_turn(s.id, "one more?"), StateError);
  CHECK_THROWS_AS(svc.submit_rating(s.id, 50, "again"), StateError);
  const auto closed = svc.close_session(s.id);
  CHECK(closed.status == SessionStatus::kClosed);
  CHECK_FALSE(closed.ended.empty());
  CHECK_THROWS_AS(svc.post_turn(s.id, "hello?"), StateError);
  CHECK_THROWS_AS(svc.post_turn("s-404", "hello?"), NotFoundError);
}

TEST_CASE("export: means, gold handoff and permutation invariance") {
  Rig rig;
  auto svc = rig.service(with_turns(2));
  CHECK(svc.export_annotations().expert_mean.empty());
  CHECK_THROWS_AS(make_gold(svc.export_annotations().expert_mean), InputError);

  const std::string agent = rig.candidates.ids[0];
  for (auto [expert, score] : {std::pair{"e1", 80}, std::pair{"e2", 90}}) {
    const auto s = svc.create_session(agent, expert);
    chat(svc, s.id, 2);
    svc.submit_rating(s.id, score, "justified");
  }
  const auto dump = svc.export_annotations();
  CHECK(dump.ratings.size() == 2);
  CHECK(dump.expert_mean.size() == 1);
  CHECK(dump.expert_mean.at(agent) == doctest::Approx(8.5).epsilon(1e-15));
  CHECK(dump.total_turns >= 2 * 2);

  ScoreMap propagated = {{agent, 7.9}};
  CHECK(mae(propagated, dump.expert_mean) == doctest::Approx(0.6));
  CHECK(make_gold(dump.expert_mean).relevant.count(agent) == 1);

  // round trip through the JSON export format
  const auto back = json(dump).get<AnnotationDump>();
  CHECK(back.expert_mean == dump.expert_mean);
  CHECK(back.ratings.size() == 2);

  const auto records = to_score_records(dump);
  REQUIRE(records.size() == 2);
  CHECK(records[0].phase == ScorePhase::kExpert);
  CHECK(records[0].original.value() == 80);
  CHECK(records[0].value == 8.0);

  // the same ratings submitted in the opposite order give the same mean
  Rig rig2;
  auto svc2 = rig2.service(with_turns(2));
  for (auto [expert, score] : {std::pair{"e2", 90}, std::pair{"e1", 80}}) {
    const auto s = svc2.create_session(agent, expert);
    chat(svc2, s.id, 2);
    svc2.submit_rating(s.id, score, "justified");
  }
  CHECK(svc2.export_annotations().expert_mean == dump.expert_mean);
}

TEST_CASE("event log replay") {
  TempDir dir("annot_log");
  const auto log = dir.path / "annotations.jsonl";
  Rig rig;
  std::string rated, open;
  {
    auto svc = rig.service(with_turns(3, log));
    rated = svc.create_session(rig.candidates.ids[0], "e1").id;
    chat(svc, rated, 3);
    svc.submit_rating(rated, 72, "fine");
    open = svc.create_session(rig.candidates.ids[2], "e2").id;
    chat(svc, open, 1);
  }
  auto svc = rig.service(with_turns(3, log));
  CHECK(svc.list_sessions().size() == 2);
  CHECK(svc.get_session(rated).status == SessionStatus::kRated);
  CHECK(svc.get_session(open).expert_turns() == 1);
  CHECK(svc.export_annotations().expert_mean.at(rig.candidates.ids[0]) == doctest::Approx(7.2));
  CHECK(svc.create_session(rig.candidates.ids[1], "e3").id == "s-000003");
  chat(svc, open, 2);
  CHECK_NOTHROW(svc.submit_rating(open, 64, "later"));

  for (const auto& line : load_records<json>(log)) CHECK(line.contains("event"));
}

TEST_CASE("a failed backend call records nothing") {
  Rig rig;
  auto svc = rig.service(with_turns(2));
  const auto s = svc.create_session(rig.candidates.ids[0], "e1");
  svc.post_turn(s.id, "first");
  std::atomic<bool> down{true};
  rig.stub->set_responder(role_tags::kStudent, [&](std::span<const ChatMessage>, const GenConfig&) {
    if (down) throw BackendError("model unavailable");
    return std::string("back again");
  });
  CHECK_THROWS_AS(svc.post_turn(s.id, "second"), BackendError);
  auto cur = svc.get_session(s.id);
  CHECK(cur.expert_turns() == 1);
  CHECK(cur.transcript.turns.size() == 2);
  down = false;
  CHECK(svc.post_turn(s.id, "second") == "back again");
  CHECK(svc.get_session(s.id).transcript.turns.size() == 4);
}

TEST_CASE("property: concurrent turns stay paired") {
  Rig rig;
  auto svc = rig.service(with_turns(1));
  const auto a = svc.create_session(rig.candidates.ids[0], "e1").id;
  const auto b = svc.create_session(rig.candidates.ids[1], "e2").id;
  std::vector<std::thread> threads;
  for (int t = 0; t < 6; ++t) {
    threads.emplace_back([&, t] {
      const auto& id = t % 2 ? a : b;
      for (int i = 0; i < 10; ++i) svc.post_turn(id, "t" + std::to_string(t) + "-" + std::to_string(i));
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& id : {a, b}) {
    const auto s = svc.get_session(id);
    CHECK(s.expert_turns() == 30);
    REQUIRE(s.transcript.turns.size() == 60);
    for (std::size_t i = 0; i < 60; ++i) CHECK(s.transcript.turns[i].speaker == (i % 2 ? "student" : "expert"));
  }
}

TEST_CASE("simulated experts") {
  Rig rig;
  auto svc = rig.service(with_turns(3));
  simulate_expert_ratings(svc, 2, 11);
  const auto dump = svc.export_annotations();
  CHECK(dump.ratings.size() == 6);
  CHECK(dump.expert_mean.size() == 3);
  std::size_t rated = 0;
  for (const auto& r : dump.ratings) {
    CHECK(r.score >= 1);
    CHECK(r.score <= 100);
    CHECK(r.normalized == doctest::Approx(r.score / 10.0));
  }
  for (const auto& s : dump.sessions) rated += s.status == SessionStatus::kRated;
  CHECK(dump.total_turns >= 3 * rated);

  Rig again;
  auto svc2 = again.service(with_turns(3));
  simulate_expert_ratings(svc2, 2, 11);
  CHECK(svc2.export_annotations().expert_mean == dump.expert_mean);
}

// --- HTTP -------------------------------------------------------------------------

namespace {

struct HttpRig {
  Rig rig;
  AnnotationService service;
  AnnotationServer server;
  httplib::Client client;

  explicit HttpRig(std::size_t min_turns = 15)
      : service(rig.service(with_turns(min_turns))),
        server(service, {"127.0.0.1", 0, "secret", {}}),
        client("127.0.0.1", server.start()) {
    client.set_bearer_token_auth("secret");
  }

  httplib::Result post(const std::string& path, const json& body) {
    return client.Post(path, body.dump(), "application/json");
  }
};

}  // namespace

TEST_CASE("http: auth") {
  HttpRig h;
  httplib::Client anon("127.0.0.1", h.server.port());
  auto res = anon.Get("/health");
  REQUIRE(res);
  CHECK(res->status == 200);
  res = anon.Get("/candidates");
  REQUIRE(res);
  CHECK(res->status == 401);
  anon.set_bearer_token_auth("wrong");
  CHECK(anon.Get("/export")->status == 401);
  CHECK(h.client.Get("/candidates")->status == 200);

  Rig rig;
  auto svc = rig.service();
  CHECK_THROWS_AS(AnnotationServer(svc, {"127.0.0.1", 0, "", {}}), ConfigError);
}

TEST_CASE("http: full expert session") {
  HttpRig h;
  auto res = h.client.Get("/candidates?expert=e1");
  REQUIRE(res);
  auto body = json::parse(res->body);
  CHECK(body["candidates"].size() == 3);
  CHECK(body["min_turns"] == 15);
  CHECK(body["candidates"][0]["status"] == "unrated");
  const std::string agent = body["candidates"][0]["id"];

  res = h.client.Get("/profiles/" + agent);
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body)["text"].get<std::string>().find("MBTI type:") != std::string::npos);
  CHECK(h.client.Get("/profiles/unknown")->status == 404);

  CHECK(h.post("/sessions", {{"candidate_id", h.rig.profiles[5].id}, {"expert_id", "e1"}})->status == 422);
  CHECK(h.post("/sessions", {{"candidate_id", "ghost"}, {"expert_id", "e1"}})->status == 404);
  CHECK(h.post("/sessions", {{"expert_id", "e1"}})->status == 400);
  CHECK(h.client.Post("/sessions", "{oops", "application/json")->status == 400);

  res = h.post("/sessions", {{"candidate_id", agent}, {"expert_id", "e1"}});
  REQUIRE(res);
  CHECK(res->status == 201);
  const std::string sid = json::parse(res->body)["id"];

  for (int t = 1; t <= 15; ++t) {
    if (t == 15) {
      res = h.post("/sessions/" + sid + "/rating", {{"score", 87}, {"justification", "early"}});
      CHECK(res->status == 422);
    }
    res = h.post("/sessions/" + sid + "/turns", {{"message", "Turn " + std::to_string(t)}});
    REQUIRE(res);
    CHECK(res->status == 200);
    body = json::parse(res->body);
    CHECK(body["turn_count"] == t);
    CHECK(body["eligible_for_rating"] == (t >= 15));
    CHECK_FALSE(body["reply"].get<std::string>().empty());
  }

  CHECK(h.post("/sessions/" + sid + "/rating", {{"score", 101}, {"justification", "x"}})->status == 400);
  CHECK(h.post("/sessions/" + sid + "/rating", {{"score", 87}, {"justification", ""}})->status == 400);
  res = h.post("/sessions/" + sid + "/rating",
               {{"score", 87}, {"justification", "Stays in character."}, {"agreements", {{"profile_score", 4}}},
                {"annotator_id", "e1"}});
  REQUIRE(res);
  CHECK(res->status == 201);
  CHECK(json::parse(res->body)["normalized"].get<double>() == doctest::Approx(8.7));

  CHECK(h.post("/sessions/" + sid + "/turns", {{"message", "late"}})->status == 409);

  res = h.client.Get("/export");
  REQUIRE(res);
  body = json::parse(res->body);
  REQUIRE(body["ratings"].size() == 1);
  CHECK(body["ratings"][0]["score"] == 87);
  CHECK(body["ratings"][0]["normalized"].get<double>() == doctest::Approx(8.7));
  CHECK(body["expert_mean"][agent].get<double>() == doctest::Approx(8.7));

  res = h.client.Get("/export?format=jsonl");
  REQUIRE(res);
  std::size_t lines = std::count(res->body.begin(), res->body.end(), '\n');
  CHECK(lines == 3);  // session, rating, expert_mean

  body = json::parse(h.client.Get("/candidates?expert=e1")->body);
  for (const auto& c : body["candidates"]) CHECK(c["status"] == (c["id"] == agent ? "rated" : "unrated"));

  res = h.client.Get("/sessions/" + sid);
  CHECK(json::parse(res->body)["status"] == "rated");
  CHECK(h.client.Get("/sessions/s-999")->status == 404);
  CHECK(json::parse(h.client.Get("/sessions")->body)["sessions"].size() == 1);
  CHECK(h.post("/sessions/" + sid + "/close", json::object())->status == 200);
  CHECK(h.client.Get("/scores")->status == 404);
}

TEST_CASE("http: backend outage is retriable and leaves no half turn") {
  HttpRig h(1);
  const std::string agent = h.rig.candidates.ids[0];
  const std::string sid = json::parse(h.post("/sessions", {{"candidate_id", agent}, {"expert_id", "e"}})->body)["id"];
  h.rig.stub->set_responder(role_tags::kStudent, [](std::span<const ChatMessage>, const GenConfig&) -> std::string {
    throw BackendError("overloaded");
  });
  auto res = h.post("/sessions/" + sid + "/turns", {{"message", "hello"}});
  REQUIRE(res);
  CHECK(res->status == 503);
  CHECK(res->has_header("Retry-After"));
  CHECK(json::parse(h.client.Get("/sessions/" + sid)->body)["transcript"]["turns"].empty());
}
