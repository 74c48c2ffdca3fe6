#include "studentsim/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "studentsim/annotation.hpp"
#include "studentsim/errors.hpp"
#include "studentsim/hashing.hpp"
#include "studentsim/jsonl.hpp"
#include "studentsim/similarity_graph.hpp"

namespace studentsim {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(CandidateRule r) {
  switch (r) {
    case CandidateRule::kConjunction: return "conjunction";
    case CandidateRule::kDisjunction: return "disjunction";
    case CandidateRule::kAverage: return "average";
  }
  return "conjunction";
}

CandidateRule candidate_rule_from_string(const std::string& s) {
  if (s == "conjunction") return CandidateRule::kConjunction;
  if (s == "disjunction") return CandidateRule::kDisjunction;
  if (s == "average") return CandidateRule::kAverage;
  throw ConfigError("unknown candidate rule '" + s + "' (conjunction|disjunction|average)");
}

// --- config ------------------------------------------------------------------------

void to_json(json& j, const RunConfig& c) {
  j = json{{"seeds", {{"profiles", c.seeds.profiles}, {"forest", c.seeds.forest}, {"experts", c.seeds.experts}}},
           {"n_profiles", c.n_profiles},
           {"catalog_path", c.catalog_path.string()},
           {"backend", c.backend},
           {"gen", c.gen},
           {"profile_repetitions", c.profile_repetitions},
           {"behavior_repetitions", c.behavior_repetitions},
           {"n_turns", c.n_turns},
           {"max_reasks", c.max_reasks},
           {"theta", c.theta},
           {"alpha", c.alpha},
           {"max_iterations", c.max_iterations},
           {"tol", c.tol},
           {"tau", c.tau},
           {"candidate_rule", to_string(c.candidate_rule)},
           {"candidate_phase", to_string(c.candidate_phase)},
           {"metric_ks", c.metric_ks},
           {"output_dir", c.output_dir.string()},
           {"gold_path", c.gold_path.string()},
           {"simulated_experts", c.simulated_experts},
           {"min_expert_turns", c.min_expert_turns},
           {"deterministic_timestamps", c.deterministic_timestamps},
           {"forest",
            {{"n_trees", c.forest.n_trees},
             {"test_fraction", c.forest.test_fraction},
             {"min_leaf", c.forest.min_leaf},
             {"max_depth", c.forest.max_depth},
             {"max_features_fraction", c.forest.max_features_fraction},
             {"bootstrap", c.forest.bootstrap},
             {"threads", c.forest.threads}}}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + where + key + "'");
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j,
                 {"seeds", "n_profiles", "catalog_path", "backend", "gen", "profile_repetitions",
                  "behavior_repetitions", "n_turns", "max_reasks", "theta", "alpha", "max_iterations",
                  "tol", "tau", "candidate_rule", "candidate_phase", "metric_ks", "output_dir",
                  "gold_path", "simulated_experts", "min_expert_turns", "deterministic_timestamps",
                  "forest"},
                 "");
  if (j.contains("seeds")) {
    const auto& s = j["seeds"];
    reject_unknown(s, {"profiles", "forest", "experts"}, "seeds.");
    read_key(s, "profiles", c.seeds.profiles);
    read_key(s, "forest", c.seeds.forest);
    read_key(s, "experts", c.seeds.experts);
  }
  read_key(j, "n_profiles", c.n_profiles);
  std::string path;
  if (j.contains("catalog_path")) {
    read_key(j, "catalog_path", path);
    c.catalog_path = path;
  }
  try {
    if (j.contains("backend")) c.backend = j["backend"].get<BackendSpec>();
    if (j.contains("gen")) c.gen = j["gen"].get<GenConfig>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config backend/gen: ") + e.what());
  }
  read_key(j, "profile_repetitions", c.profile_repetitions);
  read_key(j, "behavior_repetitions", c.behavior_repetitions);
  read_key(j, "n_turns", c.n_turns);
  read_key(j, "max_reasks", c.max_reasks);
  read_key(j, "theta", c.theta);
  read_key(j, "alpha", c.alpha);
  read_key(j, "max_iterations", c.max_iterations);
  read_key(j, "tol", c.tol);
  read_key(j, "tau", c.tau);
  if (j.contains("candidate_rule")) {
    c.candidate_rule = candidate_rule_from_string(j["candidate_rule"].get<std::string>());
  }
  if (j.contains("candidate_phase")) {
    try {
      c.candidate_phase = score_phase_from_string(j["candidate_phase"].get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("candidate_phase: ") + e.what());
    }
  }
  read_key(j, "metric_ks", c.metric_ks);
  if (j.contains("output_dir")) {
    read_key(j, "output_dir", path);
    c.output_dir = path;
  }
  if (j.contains("gold_path")) {
    read_key(j, "gold_path", path);
    c.gold_path = path;
  }
  read_key(j, "simulated_experts", c.simulated_experts);
  read_key(j, "min_expert_turns", c.min_expert_turns);
  read_key(j, "deterministic_timestamps", c.deterministic_timestamps);
  if (j.contains("forest")) {
    const auto& f = j["forest"];
    reject_unknown(f,
                   {"n_trees", "test_fraction", "min_leaf", "max_depth", "max_features_fraction",
                    "bootstrap", "threads"},
                   "forest.");
    read_key(f, "n_trees", c.forest.n_trees);
    read_key(f, "test_fraction", c.forest.test_fraction);
    read_key(f, "min_leaf", c.forest.min_leaf);
    read_key(f, "max_depth", c.forest.max_depth);
    read_key(f, "max_features_fraction", c.forest.max_features_fraction);
    read_key(f, "bootstrap", c.forest.bootstrap);
    read_key(f, "threads", c.forest.threads);
  }
}

RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  return j.get<RunConfig>();
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (n_profiles < 1) fail("n_profiles must be >= 1");
  if (!(tau > 1.0 && tau < 10.0)) fail("tau must lie in (1, 10)");
  if (!(theta >= -1.0 && theta <= 1.0)) fail("theta must lie in [-1, 1]");
  if (!(alpha >= 0.0 && alpha < 1.0)) fail("alpha must lie in [0, 1)");
  if (max_iterations < 1) fail("max_iterations must be >= 1");
  if (!(tol > 0.0)) fail("tol must be > 0");
  if (profile_repetitions < 1 || behavior_repetitions < 1) fail("repetitions must be >= 1");
  if (n_turns < 1) fail("n_turns must be >= 1");
  if (max_reasks < 0) fail("max_reasks must be >= 0");
  if (metric_ks.empty()) fail("metric_ks must not be empty");
  if (candidate_phase == ScorePhase::kExpert) fail("candidate_phase must be initial or propagated");
  if (simulated_experts < 0) fail("simulated_experts must be >= 0");
  if (min_expert_turns < 1) fail("min_expert_turns must be >= 1");
  if (backend.kind != "stub" && backend.kind != "http") fail("backend.kind must be stub or http");
  if (backend.parallelism < 1) fail("backend.parallelism must be >= 1");
  if (!catalog_path.empty() && !fs::exists(catalog_path)) {
    fail("catalog_path " + catalog_path.string() + " does not exist");
  }
  if (!gold_path.empty() && !fs::exists(gold_path)) {
    fail("gold_path " + gold_path.string() + " does not exist");
  }
  gen.validate();
}

std::string RunConfig::hash() const {
  json j = *this;
  j.erase("output_dir");
  j["backend"].erase("parallelism");
  j["forest"].erase("threads");
  j["catalog_path"] = catalog_path.empty() ? "" : sha256_hex(read_file(catalog_path));
  j["gold_path"] = gold_path.empty() ? "" : sha256_hex(read_file(gold_path));
  return sha256_hex(j.dump());
}

// --- candidates --------------------------------------------------------------------

bool CandidateSet::contains(const std::string& id) const {
  return std::find(ids.begin(), ids.end(), id) != ids.end();
}

void to_json(json& j, const CandidateSet& c) {
  j = json{{"ids", c.ids},
           {"count", c.ids.size()},
           {"run_id", c.run_id},
           {"threshold", c.threshold},
           {"phase", to_string(c.phase)},
           {"rule", to_string(c.rule)}};
}

void from_json(const json& j, CandidateSet& c) {
  c.ids = j.at("ids").get<std::vector<std::string>>();
  c.run_id = j.value("run_id", std::string());
  c.threshold = j.at("threshold").get<double>();
  c.phase = score_phase_from_string(j.value("phase", std::string("propagated")));
  c.rule = candidate_rule_from_string(j.value("rule", std::string("conjunction")));
}

CandidateSet filter_candidates(const ScoreVector<double>& profile, const ScoreVector<double>& behavior,
                               double tau, CandidateRule rule) {
  if (profile.ids.size() != behavior.ids.size() ||
      profile.values.size() != static_cast<Eigen::Index>(profile.ids.size()) ||
      behavior.values.size() != static_cast<Eigen::Index>(behavior.ids.size())) {
    throw InputError("filter_candidates: score vectors have mismatched lengths");
  }
  if (profile.ids != behavior.ids) throw InputError("filter_candidates: score vectors are not aligned");
  CandidateSet out;
  out.threshold = tau;
  out.rule = rule;
  for (std::size_t i = 0; i < profile.ids.size(); ++i) {
    const double p = profile.values[static_cast<Eigen::Index>(i)];
    const double b = behavior.values[static_cast<Eigen::Index>(i)];
    if (std::isnan(p) || std::isnan(b)) throw InputError("filter_candidates: NaN score for " + profile.ids[i]);
    bool keep = false;
    switch (rule) {
      case CandidateRule::kConjunction: keep = p > tau && b > tau; break;
      case CandidateRule::kDisjunction: keep = p > tau || b > tau; break;
      case CandidateRule::kAverage: keep = (p + b) / 2.0 > tau; break;
    }
    if (keep) out.ids.push_back(profile.ids[i]);
  }
  return out;
}

ScoreMap load_gold_scores(const fs::path& path) {
  if (path.extension() == ".jsonl") {
    std::map<std::string, std::pair<double, int>> acc;
    for (const auto& r : load_records<ScoreRecord>(path)) {
      if (r.phase != ScorePhase::kExpert) continue;
      auto& a = acc[r.profile_id];
      a.first += r.value;
      ++a.second;
    }
    ScoreMap out;
    for (const auto& [id, a] : acc) out[id] = a.first / a.second;
    return out;
  }
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  try {
    if (j.contains("expert_mean")) return j["expert_mean"].get<ScoreMap>();
    return j.get<ScoreMap>();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": expected an annotation export or an id -> score map: " + e.what());
  }
}

// --- stage names -------------------------------------------------------------------

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = {Stage::kGenerate, Stage::kScore,  Stage::kGraph,
                                            Stage::kPropagate, Stage::kFilter, Stage::kRank,
                                            Stage::kReport,    Stage::kAnalyze};
  return stages;
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kGenerate: return "generate";
    case Stage::kScore: return "score";
    case Stage::kGraph: return "graph";
    case Stage::kPropagate: return "propagate";
    case Stage::kFilter: return "filter";
    case Stage::kRank: return "rank";
    case Stage::kReport: return "report";
    case Stage::kAnalyze: return "analyze";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : all_stages()) {
    if (to_string(st) == s) return st;
  }
  throw InputError("unknown stage '" + s + "'");
}

// --- loaders -----------------------------------------------------------------------

std::vector<StudentProfile> load_profiles(const fs::path& path) {
  return load_records<StudentProfile>(path);
}

std::pair<ScoreVector<double>, ScoreVector<double>> load_initial_vectors(const fs::path& path) {
  const auto agg = aggregate_initial(load_records<ScoreRecord>(path));
  ScoreVector<double> p{{}, DynamicVector<double>(static_cast<Eigen::Index>(agg.size())), "profile", "initial"};
  ScoreVector<double> b{{}, DynamicVector<double>(static_cast<Eigen::Index>(agg.size())), "behavior", "initial"};
  for (std::size_t i = 0; i < agg.size(); ++i) {
    p.ids.push_back(agg[i].profile_id);
    b.ids.push_back(agg[i].profile_id);
    p.values[static_cast<Eigen::Index>(i)] = agg[i].profile;
    b.values[static_cast<Eigen::Index>(i)] = agg[i].behavior;
  }
  return {p, b};
}

std::pair<ScoreVector<double>, ScoreVector<double>> load_propagated_vectors(const fs::path& path) {
  ScoreVector<double> p{{}, {}, "profile", "propagated"};
  ScoreVector<double> b{{}, {}, "behavior", "propagated"};
  std::vector<double> pv;
  std::vector<double> bv;
  for (const auto& r : load_records<ScoreRecord>(path)) {
    if (r.phase != ScorePhase::kPropagated) continue;
    if (r.kind == ScoreKind::kProfile) {
      p.ids.push_back(r.profile_id);
      pv.push_back(r.value);
    } else {
      b.ids.push_back(r.profile_id);
      bv.push_back(r.value);
    }
  }
  if (p.ids != b.ids) throw ParseError(path.string() + ": profile and behaviour records are not aligned");
  p.values = Eigen::Map<DynamicVector<double>>(pv.data(), static_cast<Eigen::Index>(pv.size()));
  b.values = Eigen::Map<DynamicVector<double>>(bv.data(), static_cast<Eigen::Index>(bv.size()));
  return {p, b};
}

CandidateSet load_candidates(const fs::path& path) {
  try {
    return json::parse(read_file(path)).get<CandidateSet>();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

ScoreMap to_score_map(const ScoreVector<double>& v) {
  ScoreMap out;
  for (std::size_t i = 0; i < v.ids.size(); ++i) out[v.ids[i]] = v.values[static_cast<Eigen::Index>(i)];
  return out;
}

// --- pipeline ----------------------------------------------------------------------

namespace {

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
/// failure after all workers stop.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string file_hash(const fs::path& p) { return sha256_hex(read_file(p)); }

json usage_json(const Usage& u) {
  return json{{"chat_calls", u.chat_calls},
              {"embed_calls", u.embed_calls},
              {"prompt_tokens", u.prompt_tokens},
              {"completion_tokens", u.completion_tokens}};
}

Usage usage_delta(const Usage& after, const Usage& before) {
  return {after.chat_calls - before.chat_calls, after.embed_calls - before.embed_calls,
          after.prompt_tokens - before.prompt_tokens,
          after.completion_tokens - before.completion_tokens};
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

}  // namespace

Pipeline::Pipeline(RunConfig config, std::shared_ptr<Backend> backend)
    : config_(std::move(config)),
      catalog_(config_.catalog_path.empty() ? default_catalog() : load_catalog(config_.catalog_path)),
      gateway_(backend ? std::move(backend) : make_backend(config_.backend), config_.backend.parallelism) {
  config_.validate();
  config_.forest.seed = config_.seeds.forest;
  config_hash_ = config_.hash();
}

fs::path Pipeline::path(const std::string& artifact) const { return config_.output_dir / artifact; }

bool Pipeline::has_gold_source() const {
  return !config_.gold_path.empty() || config_.simulated_experts > 0;
}

std::string Pipeline::timestamp() const {
  if (config_.deterministic_timestamps) return "1970-01-01T00:00:00Z";
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void Pipeline::log(const std::string& msg) const {
  if (progress_) progress_(msg);
}

std::vector<std::string> Pipeline::stage_inputs(Stage stage) const {
  using namespace artifacts;
  switch (stage) {
    case Stage::kGenerate: return {};
    case Stage::kScore: return {kProfiles};
    case Stage::kGraph: return {kProfiles, kScoresInitial};
    case Stage::kPropagate: return {kEmbeddings, kScoresInitial};
    case Stage::kFilter: return {kScoresInitial, kScoresPropagated};
    case Stage::kRank: return {kScoresInitial, kScoresPropagated};
    case Stage::kReport: return {kProfiles, kScoresInitial, kScoresPropagated, kCandidates};
    case Stage::kAnalyze: return {kProfiles, kScoresPropagated, kCandidates};
  }
  return {};
}

StageOutcome Pipeline::run_stage(Stage stage, bool force) {
  const std::string name = to_string(stage);
  const auto started = std::chrono::steady_clock::now();
  StageOutcome outcome{stage, false, {}, 0.0};
  try {
    fs::create_directories(path(artifacts::kManifestDir));
  } catch (const fs::filesystem_error& e) {
    throw StageError(name, std::string("cannot create output directory: ") + e.what(), exit_codes::kInput);
  }
  json inputs = json::object();
  for (const auto& in : stage_inputs(stage)) {
    if (!fs::exists(path(in))) {
      throw StageError(name, "missing input " + path(in).string() + "; run the earlier stages first",
                       exit_codes::kInput);
    }
    inputs[in] = file_hash(path(in));
  }
  const fs::path manifest_path = path(artifacts::kManifestDir) / (name + ".json");

  if (!force && fs::exists(manifest_path)) {
    try {
      const json m = json::parse(read_file(manifest_path));
      bool valid = m.at("config_hash") == config_hash_ && m.at("inputs") == inputs;
      for (const auto& [file, hash] : m.at("outputs").items()) {
        valid = valid && fs::exists(path(file)) && file_hash(path(file)) == hash.get<std::string>();
        outcome.outputs.push_back(file);
      }
      if (valid) {
        outcome.skipped = true;
        log(name + ": up to date, skipped");
        return outcome;
      }
      outcome.outputs.clear();
    } catch (const std::exception&) {
      outcome.outputs.clear();  // unreadable manifest: recompute
    }
  }

  log(name + ": running");
  const Usage before = gateway_.usage();
  std::vector<std::string> outputs;
  try {
    switch (stage) {
      case Stage::kGenerate: outputs = run_generate(); break;
      case Stage::kScore: outputs = run_score(); break;
      case Stage::kGraph: outputs = run_graph(); break;
      case Stage::kPropagate: outputs = run_propagate(); break;
      case Stage::kFilter: outputs = run_filter(); break;
      case Stage::kRank: outputs = run_rank(); break;
      case Stage::kReport: outputs = run_report(); break;
      case Stage::kAnalyze: outputs = run_analyze(); break;
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    std::error_code ec;
    fs::remove(manifest_path, ec);
    throw StageError(name, e.what(), exit_code(e));
  }
  json manifest{{"stage", name},
                {"config_hash", config_hash_},
                {"inputs", inputs},
                {"outputs", json::object()},
                {"usage", usage_json(usage_delta(gateway_.usage(), before))}};
  for (const auto& out : outputs) manifest["outputs"][out] = file_hash(path(out));
  write_file_atomic(manifest_path, pretty(manifest));
  outcome.outputs = outputs;
  outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  log(name + ": done");
  return outcome;
}

std::vector<StageOutcome> Pipeline::run_all(bool force) {
  std::vector<StageOutcome> outcomes;
  for (Stage s : all_stages()) {
    if (s == Stage::kReport && !has_gold_source()) {
      log("report: no gold source configured, skipped");
      outcomes.push_back({s, true, {}, 0.0});
      continue;
    }
    outcomes.push_back(run_stage(s, force));
  }
  write_metadata(outcomes);
  return outcomes;
}

std::vector<std::string> Pipeline::run_generate() {
  std::vector<StudentProfile> profiles;
  std::set<std::string> seen;
  std::uint64_t draw = 0;
  const std::uint64_t max_draws = config_.n_profiles * 64 + 1024;
  while (profiles.size() < config_.n_profiles) {
    if (draw >= max_draws) {
      throw InputError("generate: catalog too small to yield " + std::to_string(config_.n_profiles) +
                       " distinct profiles");
    }
    auto p = sample_profile(mix64(config_.seeds.profiles * 0x100000001b3ULL + draw++), catalog_);
    if (seen.insert(p.id).second) profiles.push_back(std::move(p));
  }
  save_records(profiles, path(artifacts::kProfiles));
  return {artifacts::kProfiles};
}

std::vector<std::string> Pipeline::run_score() {
  const auto profiles = load_profiles(path(artifacts::kProfiles));
  ScoringOptions opts;
  opts.gen = config_.gen;
  opts.max_reasks = config_.max_reasks;
  opts.n_turns = config_.n_turns;
  opts.profile_repetitions = config_.profile_repetitions;
  opts.behavior_repetitions = config_.behavior_repetitions;
  opts.scorer_id = "llm-scorer:" + config_.gen.model;

  std::vector<ProfileScoringOutcome> outcomes(profiles.size());
  std::atomic<std::size_t> done{0};
  parallel_for(profiles.size(), gateway_.parallelism(), [&](std::size_t i) {
    ScoringProtocol protocol(gateway_, opts, catalog_, [this] { return timestamp(); });
    outcomes[i] = protocol.score_all_rounds(profiles[i]);
    const std::size_t d = ++done;
    if (d % 50 == 0 || d == profiles.size()) {
      log("score: " + std::to_string(d) + "/" + std::to_string(profiles.size()) + " profiles");
    }
  });

  std::vector<Transcript> transcripts;
  std::vector<ScoreRecord> records;
  std::string errors;
  std::size_t excluded = 0;
  for (auto& o : outcomes) {
    for (auto& t : o.transcripts) transcripts.push_back(std::move(t));
    if (o.error) {
      ++excluded;
      errors += dump_line(json{{"profile_id", o.profile_id}, {"error", *o.error}, {"dialogues", o.dialogues}});
      errors += '\n';
      continue;
    }
    for (auto& r : o.records) records.push_back(std::move(r));
  }
  save_records(transcripts, path(artifacts::kTranscripts));
  save_records(records, path(artifacts::kScoresInitial));
  write_file_atomic(path(artifacts::kScoringErrors), errors);
  const auto [p, b] = load_initial_vectors(path(artifacts::kScoresInitial));
  export_scores_csv({p, b}, path(artifacts::kInitialCsv));
  if (excluded == profiles.size()) {
    throw ScoringError("every profile failed scoring; see " + path(artifacts::kScoringErrors).string());
  }
  return {artifacts::kTranscripts, artifacts::kScoresInitial, artifacts::kScoringErrors,
          artifacts::kInitialCsv};
}

std::vector<std::string> Pipeline::run_graph() {
  const auto profiles = load_profiles(path(artifacts::kProfiles));
  const auto [initial_p, initial_b] = load_initial_vectors(path(artifacts::kScoresInitial));
  std::map<std::string, const StudentProfile*> by_id;
  for (const auto& p : profiles) by_id[p.id] = &p;
  std::vector<const StudentProfile*> scored;
  for (const auto& id : initial_p.ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw InputError("graph: scored profile " + id + " is not in profiles.jsonl");
    scored.push_back(it->second);
  }
  std::vector<EmbeddingVector> raw(scored.size());
  parallel_for(scored.size(), gateway_.parallelism(), [&](std::size_t i) {
    raw[i] = gateway_.embed(render_profile(*scored[i], "v1", catalog_).text);
  });
  std::string lines;
  std::vector<DynamicVector<double>> unit;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    lines += dump_line(json{{"id", scored[i]->id},
                            {"vector", std::vector<double>(raw[i].data(), raw[i].data() + raw[i].size())}});
    lines += '\n';
    unit.push_back(normalize_embedding(raw[i]));
  }
  write_file_atomic(path(artifacts::kEmbeddings), lines);
  const auto graph = build_graph(unit, config_.theta, initial_p.ids);
  export_graph(graph, path(artifacts::kGraphNodes), path(artifacts::kGraphEdges));
  write_file_atomic(path(artifacts::kGraphSummary), pretty(json(summarize(graph))));
  return {artifacts::kEmbeddings, artifacts::kGraphNodes, artifacts::kGraphEdges, artifacts::kGraphSummary};
}

std::vector<std::string> Pipeline::run_propagate() {
  std::vector<std::string> ids;
  std::vector<DynamicVector<double>> unit;
  {
    std::ifstream in(path(artifacts::kEmbeddings));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const json j = json::parse(line);
        ids.push_back(j.at("id").get<std::string>());
        const auto v = j.at("vector").get<std::vector<double>>();
        unit.push_back(normalize_embedding(
            Eigen::Map<const DynamicVector<double>>(v.data(), static_cast<Eigen::Index>(v.size()))));
      } catch (const json::exception& e) {
        throw ParseError(path(artifacts::kEmbeddings).string() + ":" + std::to_string(line_no) + ": " +
                         e.what());
      }
    }
  }
  const auto [p0, b0] = load_initial_vectors(path(artifacts::kScoresInitial));
  if (ids != p0.ids) throw InputError("propagate: embeddings and initial scores list different agents");
  const auto graph = build_graph(unit, config_.theta, ids);
  const auto normalized = normalize_adjacency(graph);

  const auto rp = propagate(p0.values, normalized, config_.alpha, config_.max_iterations, config_.tol);
  const auto rb = propagate(b0.values, normalized, config_.alpha, config_.max_iterations, config_.tol);

  std::vector<ScoreRecord> records;
  const std::string ts = timestamp();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    records.push_back({ids[i], ScoreKind::kProfile, ScorePhase::kPropagated, rp.scores[k], "", "propagation", ts, 0,
                       std::nullopt});
    records.push_back({ids[i], ScoreKind::kBehavior, ScorePhase::kPropagated, rb.scores[k], "", "propagation", ts,
                       0, std::nullopt});
  }
  save_records(records, path(artifacts::kScoresPropagated));

  ScoreVector<double> pp{ids, rp.scores, "profile", "propagated"};
  ScoreVector<double> bp{ids, rb.scores, "behavior", "propagated"};
  ScoreVector<double> a0{ids, (p0.values + b0.values) / 2.0, "avg", "initial"};
  ScoreVector<double> ap{ids, (rp.scores + rb.scores) / 2.0, "avg", "propagated"};
  export_scores_csv({p0, b0, a0, pp, bp, ap}, path(artifacts::kPropagatedCsv));

  auto summary = [&](const PropagationResult<double>& r) {
    return json{{"iterations", r.iterations},
                {"final_residual", r.final_residual},
                {"converged", r.final_residual < config_.tol},
                {"residuals", r.residuals}};
  };
  const json info{{"alpha", config_.alpha},
                  {"max_iterations", config_.max_iterations},
                  {"tol", config_.tol},
                  {"nodes", ids.size()},
                  {"dense", !normalized.is_sparse()},
                  {"profile", summary(rp)},
                  {"behavior", summary(rb)}};
  write_file_atomic(path(artifacts::kPropagation), pretty(info));
  return {artifacts::kScoresPropagated, artifacts::kPropagatedCsv, artifacts::kPropagation};
}

std::vector<std::string> Pipeline::run_filter() {
  const auto [p, b] = config_.candidate_phase == ScorePhase::kInitial
                          ? load_initial_vectors(path(artifacts::kScoresInitial))
                          : load_propagated_vectors(path(artifacts::kScoresPropagated));
  CandidateSet c = filter_candidates(p, b, config_.tau, config_.candidate_rule);
  c.run_id = config_hash_.substr(0, 12);
  c.phase = config_.candidate_phase;
  write_file_atomic(path(artifacts::kCandidates), pretty(json(c)));
  log("filter: " + std::to_string(c.ids.size()) + " candidates");
  return {artifacts::kCandidates};
}

std::vector<std::string> Pipeline::run_rank() {
  const auto [p0, b0] = load_initial_vectors(path(artifacts::kScoresInitial));
  const auto [pp, bp] = load_propagated_vectors(path(artifacts::kScoresPropagated));
  json out = json::object();
  auto add = [&](const std::string& phase, const ScoreMap& p, const ScoreMap& b) {
    const std::vector<std::pair<std::string, ScoreMap>> sources = {
        {"S_p", p}, {"S_b", b}, {"Avg", average_scores(p, b)}};
    for (const auto& [name, scores] : sources) {
      const Ranking r = rank_agents(scores);
      json list = json::array();
      for (std::size_t i = 0; i < r.ids.size(); ++i) {
        list.push_back({{"rank", i + 1}, {"id", r.ids[i]}, {"score", r.scores.at(r.ids[i])}});
      }
      out[phase][name] = list;
    }
  };
  add("initial", to_score_map(p0), to_score_map(b0));
  add("propagated", to_score_map(pp), to_score_map(bp));
  out["tie_break"] = describe(TieBreak::kIdAscending);
  write_file_atomic(path(artifacts::kRankings), pretty(out));
  return {artifacts::kRankings};
}

std::vector<std::string> Pipeline::run_report() {
  std::vector<std::string> outputs;
  ScoreMap gold_scores;
  if (!config_.gold_path.empty()) {
    gold_scores = load_gold_scores(config_.gold_path);
  } else if (config_.simulated_experts > 0) {
    const fs::path log_path = path(artifacts::kAnnotations);
    std::error_code ec;
    fs::remove(log_path, ec);  // the stage rebuilds the log from scratch
    AnnotationOptions opts;
    opts.min_turns = static_cast<std::size_t>(config_.min_expert_turns);
    opts.log_path = log_path;
    AnnotationService service(gateway_, load_profiles(path(artifacts::kProfiles)),
                              load_candidates(path(artifacts::kCandidates)), opts, catalog_,
                              [this] { return timestamp(); });
    simulate_expert_ratings(service, config_.simulated_experts, config_.seeds.experts);
    const AnnotationDump dump = service.export_annotations();
    write_file_atomic(path(artifacts::kGold), pretty(json(dump)));
    gold_scores = dump.expert_mean;
    outputs = {artifacts::kAnnotations, artifacts::kGold};
  } else {
    throw InputError("report: no gold source (set gold_path or simulated_experts)");
  }
  if (gold_scores.empty()) {
    throw InputError("report: the gold standard is empty; no expert ratings to evaluate against");
  }
  const GoldStandard gold = make_gold(gold_scores);
  const auto [p0, b0] = load_initial_vectors(path(artifacts::kScoresInitial));
  const auto [pp, bp] = load_propagated_vectors(path(artifacts::kScoresPropagated));
  const RankingReport report =
      build_report({to_score_map(p0), to_score_map(b0)}, {to_score_map(pp), to_score_map(bp)}, gold,
                   config_.metric_ks);
  write_file_atomic(path(artifacts::kReportJson), pretty(json(report)));
  write_file_atomic(path(artifacts::kReportTxt), render_table(report));
  outputs.push_back(artifacts::kReportJson);
  outputs.push_back(artifacts::kReportTxt);
  return outputs;
}

std::vector<std::string> Pipeline::run_analyze() {
  const auto profiles = load_profiles(path(artifacts::kProfiles));
  const auto [pp, bp] = load_propagated_vectors(path(artifacts::kScoresPropagated));
  const CandidateSet candidates = load_candidates(path(artifacts::kCandidates));
  std::map<std::string, const StudentProfile*> by_id;
  for (const auto& p : profiles) by_id[p.id] = &p;
  std::vector<StudentProfile> scored;
  std::vector<StudentProfile> selected;
  for (const auto& id : pp.ids) scored.push_back(*by_id.at(id));
  for (const auto& id : candidates.ids) selected.push_back(*by_id.at(id));

  json info{{"rows", scored.size()}, {"warnings", json::array()}};
  if (scored.size() < 5) throw AnalysisError("analyze: need at least 5 scored profiles");
  const FeatureMatrix x = one_hot_encode(scored, catalog_);
  info["columns"] = x.columns.size();
  const std::vector<std::tuple<std::string, const ScoreVector<double>*, const char*, const char*>> targets = {
      {"profile", &pp, artifacts::kImportanceProfile, artifacts::kImportanceProfileSvg},
      {"behavior", &bp, artifacts::kImportanceBehavior, artifacts::kImportanceBehaviorSvg}};
  for (const auto& [kind, vec, csv, svg] : targets) {
    const ForestModel model = fit_forest(x, vec->values, config_.forest);
    json entry = model;
    ImportanceRanking ranking;
    try {
      ranking = relative_importance(model);
    } catch (const AnalysisError& e) {
      info["warnings"].push_back(kind + ": " + e.what());
    }
    json top = json::array();
    for (std::size_t i = 0; i < std::min<std::size_t>(10, ranking.entries.size()); ++i) {
      const auto& e = ranking.entries[i];
      top.push_back({{"feature", e.feature}, {"category", e.category}, {"relative", e.relative}, {"share", e.share}});
    }
    entry["top_features"] = top;
    info[kind] = entry;
    write_importance_csv(ranking, path(csv));
    write_file_atomic(path(svg), importance_svg(ranking, "Feature importance (" + kind + " score)"));
  }
  if (selected.empty()) {
    info["warnings"].push_back("distribution: candidate set is empty");
    write_file_atomic(path(artifacts::kDistribution), "feature,value,initial_freq,selected_freq,delta\n");
    write_file_atomic(path(artifacts::kDistributionSvg), distribution_svg({}, "Attribute distribution"));
  } else {
    const auto shift = distribution_report(scored, selected, catalog_);
    write_distribution_csv(shift, path(artifacts::kDistribution));
    write_file_atomic(path(artifacts::kDistributionSvg),
                      distribution_svg(shift, "Attribute distribution: all scored vs candidates"));
    info["distribution"] = {{"initial_count", shift.initial_count}, {"selected_count", shift.selected_count}};
  }
  write_file_atomic(path(artifacts::kAnalysis), pretty(info));
  return {artifacts::kAnalysis,         artifacts::kImportanceProfile,    artifacts::kImportanceBehavior,
          artifacts::kImportanceProfileSvg, artifacts::kImportanceBehaviorSvg, artifacts::kDistribution,
          artifacts::kDistributionSvg};
}

void Pipeline::write_metadata(const std::vector<StageOutcome>& outcomes) const {
  json meta{{"run_id", config_hash_.substr(0, 12)},
            {"config_hash", config_hash_},
            {"config", config_},
            {"backend", gateway_.backend().name()},
            {"model", config_.gen.model},
            {"prompt_hashes",
             {{"profile_scorer", default_instruction(ScoreKind::kProfile).hash()},
              {"behavior_scorer", default_instruction(ScoreKind::kBehavior).hash()}}}};
  meta["config"].erase("output_dir");
  Usage total;
  json stages = json::object();
  for (Stage s : all_stages()) {
    const fs::path mp = path(artifacts::kManifestDir) / (to_string(s) + ".json");
    if (!fs::exists(mp)) {
      stages[to_string(s)] = {{"completed", false}};
      continue;
    }
    const json m = json::parse(read_file(mp));
    stages[to_string(s)] = {{"completed", true}, {"outputs", m.at("outputs")}, {"usage", m.at("usage")}};
    const auto& u = m.at("usage");
    total.chat_calls += u.at("chat_calls").get<std::size_t>();
    total.embed_calls += u.at("embed_calls").get<std::size_t>();
    total.prompt_tokens += u.at("prompt_tokens").get<std::size_t>();
    total.completion_tokens += u.at("completion_tokens").get<std::size_t>();
  }
  meta["stages"] = stages;
  meta["usage"] = usage_json(total);

  if (fs::exists(path(artifacts::kProfiles))) {
    const auto n = load_profiles(path(artifacts::kProfiles)).size();
    meta["profiles"] = n;
    if (n > 0) {
      meta["tokens_per_agent"] =
          static_cast<double>(total.prompt_tokens + total.completion_tokens) / static_cast<double>(n);
    }
  }
  if (fs::exists(path(artifacts::kTranscripts))) {
    const auto transcripts = load_records<Transcript>(path(artifacts::kTranscripts));
    std::size_t probe = 0;
    std::size_t behavior = 0;
    for (const auto& t : transcripts) (t.purpose == TranscriptPurpose::kProbe ? probe : behavior)++;
    meta["dialogues"] = {{"total", transcripts.size()}, {"probe", probe}, {"behavior", behavior}};
    std::size_t excluded = 0;
    std::ifstream in(path(artifacts::kScoringErrors));
    for (std::string line; std::getline(in, line);) excluded += !line.empty();
    meta["profiles_excluded"] = excluded;
  }
  if (fs::exists(path(artifacts::kPropagation))) {
    const json p = json::parse(read_file(path(artifacts::kPropagation)));
    for (const char* kind : {"profile", "behavior"}) {
      meta["propagation"][kind] = {{"iterations", p[kind]["iterations"]},
                                   {"final_residual", p[kind]["final_residual"]},
                                   {"converged", p[kind]["converged"]}};
    }
  }
  if (fs::exists(path(artifacts::kCandidates))) {
    meta["candidates"] = load_candidates(path(artifacts::kCandidates)).ids.size();
  }
  write_file_atomic(path(artifacts::kRunMetadata), pretty(meta));

  json timings = json::object();
  for (const auto& o : outcomes) {
    timings[to_string(o.stage)] = {{"seconds", o.seconds}, {"skipped", o.skipped}};
  }
  write_file_atomic(path(artifacts::kTimings), pretty(timings));
}

}  // namespace studentsim
