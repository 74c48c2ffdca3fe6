#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "studentsim/analysis.hpp"
#include "studentsim/eval_metrics.hpp"
#include "studentsim/llm_gateway.hpp"
#include "studentsim/scoring.hpp"
#include "studentsim/similarity_graph.hpp"

namespace studentsim {

enum class CandidateRule { kConjunction, kDisjunction, kAverage };
std::string to_string(CandidateRule r);
CandidateRule candidate_rule_from_string(const std::string& s);

struct Seeds {
  std::uint64_t profiles = 1;
  std::uint64_t forest = 7;
  std::uint64_t experts = 11;
};

struct RunConfig {
  Seeds seeds;
  std::size_t n_profiles = 559;
  std::filesystem::path catalog_path;  // empty: built-in catalog
  BackendSpec backend;
  GenConfig gen;
  int profile_repetitions = 2;
  int behavior_repetitions = 2;
  int n_turns = 15;
  int max_reasks = 2;
  double theta = 0.8;
  double alpha = 0.5;
  int max_iterations = 50;
  double tol = 1e-9;
  double tau = 8.0;
  CandidateRule candidate_rule = CandidateRule::kConjunction;
  ScorePhase candidate_phase = ScorePhase::kPropagated;
  std::vector<std::size_t> metric_ks = {5, 0};  // 0: K = |C|
  std::filesystem::path output_dir = "run";
  /// Expert gold: an annotation export (JSON) or expert ScoreRecords (JSONL).
  std::filesystem::path gold_path;
  /// When no gold file is given, this many scripted annotators rate every
  /// candidate through the annotation service (stub runs only need this).
  int simulated_experts = 0;
  int min_expert_turns = 15;
  /// Fixed timestamps so stub runs are byte-reproducible.
  bool deterministic_timestamps = true;
  ForestOptions forest;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// SHA-256 over the canonical JSON, with paths replaced by content hashes
  /// and the output directory left out.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_config(const std::filesystem::path& path);

struct CandidateSet {
  std::vector<std::string> ids;
  std::string run_id;
  double threshold = 8.0;
  ScorePhase phase = ScorePhase::kPropagated;
  CandidateRule rule = CandidateRule::kConjunction;

  bool contains(const std::string& id) const;
};

void to_json(nlohmann::json& j, const CandidateSet& c);
void from_json(const nlohmann::json& j, CandidateSet& c);

/// Agents whose scores exceed `tau` under `rule` (strict inequality). The two
/// vectors must list the same ids in the same order.
CandidateSet filter_candidates(const ScoreVector<double>& profile, const ScoreVector<double>& behavior,
                               double tau, CandidateRule rule = CandidateRule::kConjunction);

/// Reads an annotation export (.json) or expert ScoreRecords (.jsonl).
ScoreMap load_gold_scores(const std::filesystem::path& path);

// --- stages --------------------------------------------------------------------

enum class Stage { kGenerate, kScore, kGraph, kPropagate, kFilter, kRank, kReport, kAnalyze };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);
const std::vector<Stage>& all_stages();

/// Artifact file names inside the output directory.
namespace artifacts {
inline constexpr const char* kProfiles = "profiles.jsonl";
inline constexpr const char* kTranscripts = "transcripts.jsonl";
inline constexpr const char* kScoresInitial = "scores_initial.jsonl";
inline constexpr const char* kScoringErrors = "scoring_errors.jsonl";
inline constexpr const char* kInitialCsv = "initial_scores.csv";
inline constexpr const char* kEmbeddings = "embeddings.jsonl";
inline constexpr const char* kGraphNodes = "graph_nodes.jsonl";
inline constexpr const char* kGraphEdges = "graph_edges.jsonl";
inline constexpr const char* kGraphSummary = "graph_summary.json";
inline constexpr const char* kScoresPropagated = "scores_propagated.jsonl";
inline constexpr const char* kPropagatedCsv = "scores_propagated.csv";
inline constexpr const char* kPropagation = "propagation.json";
inline constexpr const char* kCandidates = "candidates.json";
inline constexpr const char* kRankings = "rankings.json";
inline constexpr const char* kAnnotations = "annotations.jsonl";
inline constexpr const char* kGold = "gold.json";
inline constexpr const char* kReportJson = "report.json";
inline constexpr const char* kReportTxt = "report.txt";
inline constexpr const char* kAnalysis = "analysis.json";
inline constexpr const char* kImportanceProfile = "importance_profile.csv";
inline constexpr const char* kImportanceBehavior = "importance_behavior.csv";
inline constexpr const char* kImportanceProfileSvg = "importance_profile.svg";
inline constexpr const char* kImportanceBehaviorSvg = "importance_behavior.svg";
inline constexpr const char* kDistribution = "distribution.csv";
inline constexpr const char* kDistributionSvg = "distribution.svg";
inline constexpr const char* kRunMetadata = "run_metadata.json";
inline constexpr const char* kTimings = "timings.json";
inline constexpr const char* kManifestDir = "manifests";
}  // namespace artifacts

struct StageOutcome {
  Stage stage = Stage::kGenerate;
  bool skipped = false;  // manifest matched; nothing recomputed
  std::vector<std::string> outputs;
  double seconds = 0.0;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Runs stages against one output directory. Each completed stage leaves a
/// manifest with the config hash and the content hashes of its inputs and
/// outputs; a stage whose manifest still matches is skipped unless forced.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config, std::shared_ptr<Backend> backend = nullptr);

  StageOutcome run_stage(Stage stage, bool force = false);
  /// Every stage in order; the report stage is skipped when no gold source is
  /// configured. Writes run_metadata.json and timings.json.
  std::vector<StageOutcome> run_all(bool force = false);

  void set_progress(ProgressFn fn) { progress_ = std::move(fn); }

  const RunConfig& config() const { return config_; }
  const AttributeCatalog& catalog() const { return catalog_; }
  Gateway& gateway() { return gateway_; }
  std::filesystem::path path(const std::string& artifact) const;
  bool has_gold_source() const;
  void write_metadata(const std::vector<StageOutcome>& outcomes) const;

 private:
  std::vector<std::string> stage_inputs(Stage stage) const;
  std::vector<std::string> run_generate();
  std::vector<std::string> run_score();
  std::vector<std::string> run_graph();
  std::vector<std::string> run_propagate();
  std::vector<std::string> run_filter();
  std::vector<std::string> run_rank();
  std::vector<std::string> run_report();
  std::vector<std::string> run_analyze();
  std::string timestamp() const;
  void log(const std::string& msg) const;

  RunConfig config_;
  AttributeCatalog catalog_;
  Gateway gateway_;
  std::string config_hash_;
  ProgressFn progress_;
};

// --- loaders shared by the CLI, the service and tests ---------------------------------

std::vector<StudentProfile> load_profiles(const std::filesystem::path& path);
/// Per-agent mean over repetitions from scores_initial.jsonl, profile order.
std::pair<ScoreVector<double>, ScoreVector<double>> load_initial_vectors(
    const std::filesystem::path& path);
std::pair<ScoreVector<double>, ScoreVector<double>> load_propagated_vectors(
    const std::filesystem::path& path);
CandidateSet load_candidates(const std::filesystem::path& path);
ScoreMap to_score_map(const ScoreVector<double>& v);

}  // namespace studentsim
