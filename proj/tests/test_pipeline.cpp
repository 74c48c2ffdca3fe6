#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "studentsim/annotation.hpp"
#include "studentsim/errors.hpp"
#include "studentsim/jsonl.hpp"
#include "studentsim/pipeline.hpp"
#include "studentsim/random.hpp"

using namespace studentsim;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("studentsim_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig small_config(const fs::path& out, std::size_t n = 15) {
  RunConfig c;
  c.n_profiles = n;
  c.n_turns = 2;
  c.output_dir = out;
  c.forest.n_trees = 10;
  return c;
}

ScoreVector<double> vec(std::vector<std::string> ids, std::vector<double> v, const std::string& kind) {
  ScoreVector<double> s;
  s.ids = std::move(ids);
  s.values = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  s.kind = kind;
  return s;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  }
  return out;
}

}  // namespace

TEST_CASE("filter_candidates examples") {
  CHECK(filter_candidates(vec({"a"}, {8.5}, "profile"), vec({"a"}, {8.2}, "behavior"), 8).ids ==
        std::vector<std::string>{"a"});
  CHECK(filter_candidates(vec({"a"}, {8.5}, "profile"), vec({"a"}, {7.9}, "behavior"), 8).ids.empty());
  CHECK(filter_candidates(vec({"a", "b"}, {10, 9}, "profile"), vec({"a", "b"}, {10, 10}, "behavior"), 10)
            .ids.empty());
  // strict inequality
  CHECK(filter_candidates(vec({"a"}, {8.0}, "profile"), vec({"a"}, {9.0}, "behavior"), 8).ids.empty());

  const auto p = vec({"a", "b", "c"}, {8.5, 7.0, 9.5}, "profile");
  const auto b = vec({"a", "b", "c"}, {7.9, 9.5, 6.0}, "behavior");
  CHECK(filter_candidates(p, b, 8, CandidateRule::kDisjunction).ids == std::vector<std::string>{"a", "b", "c"});
  CHECK(filter_candidates(p, b, 8, CandidateRule::kAverage).ids == std::vector<std::string>{"a", "b"});
  CHECK(filter_candidates(p, b, 8, CandidateRule::kConjunction).ids.empty());

  CHECK_THROWS_AS(filter_candidates(p, vec({"a"}, {1}, "behavior"), 8), InputError);
  CHECK_THROWS_AS(filter_candidates(p, vec({"a", "c", "b"}, {1, 2, 3}, "behavior"), 8), InputError);
}

TEST_CASE("property: raising tau never adds candidates") {
  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::string> ids;
    std::vector<double> pv, bv;
    for (int i = 0; i < 30; ++i) {
      ids.push_back("a" + std::to_string(i));
      pv.push_back(1 + 9 * rng.uniform01());
      bv.push_back(1 + 9 * rng.uniform01());
    }
    const auto p = vec(ids, pv, "profile");
    const auto b = vec(ids, bv, "behavior");
    for (auto rule : {CandidateRule::kConjunction, CandidateRule::kDisjunction, CandidateRule::kAverage}) {
      std::set<std::string> prev;
      bool first = true;
      for (double tau = 1.0; tau <= 10.0; tau += 0.25) {
        const auto c = filter_candidates(p, b, tau, rule);
        const std::set<std::string> cur(c.ids.begin(), c.ids.end());
        if (!first) CHECK(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
        prev = cur;
        first = false;
      }
    }
  }
}

TEST_CASE("jsonl round trip and errors") {
  TempDir dir("jsonl");
  std::vector<ScoreRecord> recs;
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    ScoreRecord r;
    r.profile_id = "p" + std::to_string(i);
    r.kind = i % 2 ? ScoreKind::kBehavior : ScoreKind::kProfile;
    r.phase = static_cast<ScorePhase>(i % 3);
    r.value = 1 + 9 * rng.uniform01();
    r.explanation = "why \"quoted\"\nline " + std::to_string(i);
    r.scorer = "s";
    r.repetition = i % 4;
    if (i % 3 == 2) r.original = r.value * 10;
    recs.push_back(r);
  }
  save_records(recs, dir.path / "r.jsonl");
  CHECK(load_records<ScoreRecord>(dir.path / "r.jsonl") == recs);

  save_records(std::vector<ScoreRecord>{}, dir.path / "empty.jsonl");
  CHECK(fs::file_size(dir.path / "empty.jsonl") == 0);
  CHECK(load_records<ScoreRecord>(dir.path / "empty.jsonl").empty());

  const auto text = read_file(dir.path / "r.jsonl");
  std::string truncated;
  std::size_t pos = 0;
  for (int line = 0; line < 2; ++line) pos = text.find('\n', pos) + 1;
  truncated = text.substr(0, pos) + text.substr(pos, 25) + "\n";
  write_file_atomic(dir.path / "bad.jsonl", truncated);
  try {
    load_records<ScoreRecord>(dir.path / "bad.jsonl");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:3:") != std::string::npos);
  }
  CHECK_THROWS_AS(load_records<ScoreRecord>(dir.path / "missing.jsonl"), InputError);

  std::vector<StudentProfile> profiles = {sample_profile(1), sample_profile(2)};
  save_records(profiles, dir.path / "p.jsonl");
  CHECK(load_records<StudentProfile>(dir.path / "p.jsonl") == profiles);
}

TEST_CASE("run config parsing and hashing") {
  TempDir dir("config");
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  const json j = c;
  const auto back = j.get<RunConfig>();
  CHECK(json(back) == j);

  write_file_atomic(dir.path / "bad.json", R"({"n_profiles": 10, "thetaa": 0.7})");
  CHECK_THROWS_AS(load_config(dir.path / "bad.json"), ConfigError);
  write_file_atomic(dir.path / "bad2.json", R"({"forest": {"treez": 3}})");
  CHECK_THROWS_AS(load_config(dir.path / "bad2.json"), ConfigError);
  write_file_atomic(dir.path / "ok.json", R"({"n_profiles": 10, "theta": 0.7, "candidate_rule": "average"})");
  const auto ok = load_config(dir.path / "ok.json");
  CHECK(ok.n_profiles == 10);
  CHECK(ok.theta == 0.7);
  CHECK(ok.candidate_rule == CandidateRule::kAverage);
  CHECK(ok.alpha == 0.5);

  auto bad = c;
  bad.n_profiles = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.tau = 10;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.catalog_path = dir.path / "nope.json";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.alpha = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto moved = c;
  moved.output_dir = "elsewhere";
  moved.backend.parallelism = 16;
  CHECK(moved.hash() == c.hash());
  auto changed = c;
  changed.theta = 0.75;
  CHECK(changed.hash() != c.hash());
}

TEST_CASE("stage order and names") {
  CHECK(all_stages().size() == 8);
  for (auto s : all_stages()) CHECK(stage_from_string(to_string(s)) == s);
  CHECK_THROWS(stage_from_string("nope"));
}

TEST_CASE("stages are idempotent and resumable") {
  TempDir dir("idem");
  Pipeline p(small_config(dir.path));
  const auto first = p.run_stage(Stage::kGenerate);
  CHECK_FALSE(first.skipped);
  const auto bytes = read_file(p.path(artifacts::kProfiles));
  CHECK(load_profiles(p.path(artifacts::kProfiles)).size() == 15);

  CHECK(p.run_stage(Stage::kGenerate).skipped);
  const auto forced = p.run_stage(Stage::kGenerate, true);
  CHECK_FALSE(forced.skipped);
  CHECK(read_file(p.path(artifacts::kProfiles)) == bytes);

  // a later stage cannot run before its inputs exist
  try {
    p.run_stage(Stage::kPropagate);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "propagate");
    CHECK(e.code() == exit_codes::kInput);
  }

  p.run_stage(Stage::kScore);
  const auto scores = read_file(p.path(artifacts::kScoresInitial));
  // tampering with an output invalidates the manifest
  write_file_atomic(p.path(artifacts::kScoresInitial), "");
  CHECK_FALSE(p.run_stage(Stage::kScore).skipped);
  CHECK(read_file(p.path(artifacts::kScoresInitial)) == scores);

  // a fresh pipeline over the same directory resumes
  Pipeline again(small_config(dir.path));
  CHECK(again.run_stage(Stage::kGenerate).skipped);
  CHECK(again.run_stage(Stage::kScore).skipped);
  CHECK_FALSE(again.run_stage(Stage::kGraph).skipped);
}

TEST_CASE("run-all writes consistent metadata") {
  TempDir dir("meta");
  auto cfg = small_config(dir.path, 20);
  cfg.simulated_experts = 1;
  cfg.min_expert_turns = 2;
  cfg.tau = 6;
  Pipeline p(cfg);
  const auto outcomes = p.run_all();
  CHECK(outcomes.size() == 8);
  for (const auto& o : outcomes) CHECK_FALSE(o.skipped);

  const auto meta = json::parse(read_file(p.path(artifacts::kRunMetadata)));
  CHECK(meta["config_hash"] == cfg.hash());
  CHECK(meta["run_id"] == cfg.hash().substr(0, 12));
  CHECK(meta["backend"] == "stub");
  CHECK(meta["dialogues"]["total"] == 20 * 4);
  CHECK(meta["dialogues"]["probe"] == 20 * 2);
  CHECK(meta["profiles_excluded"] == 0);
  CHECK(meta.contains("tokens_per_agent"));
  CHECK(meta["usage"]["chat_calls"].get<std::size_t>() > 0);
  CHECK(meta["prompt_hashes"]["profile_scorer"] == default_instruction(ScoreKind::kProfile).hash());

  std::size_t referenced = 0;
  for (const auto& [stage, info] : meta["stages"].items()) {
    CAPTURE(stage);
    CHECK(info["completed"] == true);
    for (const auto& [file, hash] : info["outputs"].items()) {
      ++referenced;
      const auto fp = p.path(file);
      REQUIRE(fs::exists(fp));
      const auto ext = fp.extension().string();
      if (ext == ".json") {
        CHECK_NOTHROW(json::parse(read_file(fp)));
      } else if (ext == ".jsonl") {
        CHECK_NOTHROW(load_records<json>(fp));
      } else if (ext == ".csv") {
        CHECK(read_file(fp).find(',') != std::string::npos);
      } else if (ext == ".svg") {
        CHECK(read_file(fp).find("<svg") != std::string::npos);
      }
    }
  }
  CHECK(referenced >= 20);
  CHECK(fs::exists(p.path(artifacts::kTimings)));
  CHECK(fs::exists(p.path(artifacts::kReportTxt)));

  // second run: everything is current
  Pipeline again(cfg);
  for (const auto& o : again.run_all()) CHECK(o.skipped);
}

TEST_CASE("report stage is skipped without a gold source") {
  TempDir dir("nogold");
  Pipeline p(small_config(dir.path, 10));
  const auto outcomes = p.run_all();
  CHECK(outcomes[6].stage == Stage::kReport);
  CHECK(outcomes[6].skipped);
  CHECK_FALSE(fs::exists(p.path(artifacts::kReportJson)));
  CHECK(fs::exists(p.path(artifacts::kAnalysis)));
}

TEST_CASE("stub runs are byte-reproducible") {
  TempDir a("det_a"), b("det_b");
  auto ca = small_config(a.path, 12);
  auto cb = small_config(b.path, 12);
  ca.simulated_experts = cb.simulated_experts = 1;
  ca.min_expert_turns = cb.min_expert_turns = 2;
  ca.tau = cb.tau = 5;
  Pipeline(ca).run_all();
  Pipeline(cb).run_all();
  auto sa = snapshot(a.path), sb = snapshot(b.path);
  sa.erase(artifacts::kTimings);
  sb.erase(artifacts::kTimings);
  CHECK(sa.size() == sb.size());
  for (const auto& [file, content] : sa) {
    CAPTURE(file);
    CHECK(sb.count(file));
    CHECK(sb[file] == content);
  }
}

TEST_CASE("scoring failures are excluded and counted") {
  TempDir dir("excluded");
  auto cfg = small_config(dir.path, 20);
  auto stub = std::make_shared<StubBackend>(cfg.backend.stub);
  stub->set_responder(role_tags::kBehaviorScorer, [](std::span<const ChatMessage> m, const GenConfig&) {
    for (const auto& msg : m) {
      if (msg.content.find("MBTI type: I") != std::string::npos) return std::string("no idea");
    }
    return std::string(R"({"score": 9, "explanation": "fine"})");
  });
  Pipeline p(cfg, stub);
  p.run_stage(Stage::kGenerate);
  std::size_t introverts = 0;
  for (const auto& prof : load_profiles(p.path(artifacts::kProfiles))) introverts += prof.mbti[0] == 'I';
  REQUIRE(introverts > 0);
  REQUIRE(introverts < 20);
  p.run_stage(Stage::kScore);
  p.write_metadata({});
  const auto meta = json::parse(read_file(p.path(artifacts::kRunMetadata)));
  CHECK(meta["profiles_excluded"] == introverts);
  CHECK(load_records<json>(p.path(artifacts::kScoringErrors)).size() == introverts);
  const auto [pv, bv] = load_initial_vectors(p.path(artifacts::kScoresInitial));
  CHECK(pv.ids.size() == 20 - introverts);
  CHECK(bv.ids == pv.ids);
}

namespace {

class NoEmbedBackend final : public Backend {
 public:
  StubBackend stub;
  ChatResult chat(std::span<const ChatMessage> m, const GenConfig& c) override { return stub.chat(m, c); }
  EmbeddingVector embed(const std::string&) override { throw BackendError("embedding service down"); }
  std::string name() const override { return "stub"; }
};

}  // namespace

TEST_CASE("a failing stage names itself and keeps earlier artifacts") {
  TempDir dir("fail");
  Pipeline p(small_config(dir.path, 8), std::make_shared<NoEmbedBackend>());
  try {
    p.run_all();
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "graph");
    CHECK(e.code() == exit_codes::kBackend);
    CHECK(std::string(e.what()).find("embedding service down") != std::string::npos);
  }
  CHECK(fs::exists(p.path(artifacts::kProfiles)));
  CHECK(fs::exists(p.path(artifacts::kScoresInitial)));
  CHECK(fs::exists(p.path(artifacts::kManifestDir) / "score.json"));
  CHECK_FALSE(fs::exists(p.path(artifacts::kManifestDir) / "graph.json"));
}

TEST_CASE("paper scale: 559 profiles with four dialogues each") {
  TempDir dir("scale");
  auto cfg = small_config(dir.path, 559);
  cfg.n_turns = 1;  // the dialogue count does not depend on turns
  Pipeline p(cfg);
  p.run_stage(Stage::kGenerate);
  p.run_stage(Stage::kScore);
  p.write_metadata({});
  const auto meta = json::parse(read_file(p.path(artifacts::kRunMetadata)));
  CHECK(meta["dialogues"]["total"] == 2236);
  CHECK(meta["dialogues"]["behavior"] == 1118);
  CHECK(load_profiles(p.path(artifacts::kProfiles)).size() == 559);
}

TEST_CASE("gold loading formats") {
  TempDir dir("gold");
  write_file_atomic(dir.path / "map.json", R"({"a": 8.5, "b": 6})");
  CHECK(load_gold_scores(dir.path / "map.json") == ScoreMap{{"a", 8.5}, {"b", 6}});

  AnnotationDump dump;
  dump.expert_mean = {{"x", 9.0}};
  write_file_atomic(dir.path / "export.json", json(dump).dump());
  CHECK(load_gold_scores(dir.path / "export.json") == ScoreMap{{"x", 9.0}});

  std::vector<ScoreRecord> recs(2);
  recs[0].profile_id = recs[1].profile_id = "y";
  recs[0].phase = recs[1].phase = ScorePhase::kExpert;
  recs[0].value = 8;
  recs[1].value = 9;
  save_records(recs, dir.path / "expert.jsonl");
  CHECK(load_gold_scores(dir.path / "expert.jsonl") == ScoreMap{{"y", 8.5}});
}
