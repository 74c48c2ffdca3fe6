#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace studentsim {

/// agent id -> score
using ScoreMap = std::map<std::string, double>;

enum class TieBreak { kIdAscending, kIdDescending };

std::string describe(TieBreak policy);

/// Best first.
struct Ranking {
  std::vector<std::string> ids;
  ScoreMap scores;
  TieBreak tie_break = TieBreak::kIdAscending;
};

/// Descending score, ties resolved by `policy`. Throws InputError on empty
/// input or NaN scores.
Ranking rank_agents(const ScoreMap& scores, TieBreak policy = TieBreak::kIdAscending);

/// Grade = number of cut-points <= the expert mean, so four cut-points give
/// grades 0..4.
inline const std::vector<double>& default_grade_cutpoints() {
  static const std::vector<double> cuts = {5.0, 6.5, 8.0, 9.0};
  return cuts;
}

struct GoldStandard {
  ScoreMap expert_mean;  // 1-10 scale
  std::set<std::string> relevant;
  std::map<std::string, int> grade;
  double relevance_threshold = 8.0;
  std::vector<double> grade_cutpoints;
};

/// Throws InputError when there are no expert scores.
GoldStandard make_gold(const ScoreMap& expert_mean, double relevance_threshold = 8.0,
                       const std::vector<double>& grade_cutpoints = default_grade_cutpoints());

int grade_of(double expert_mean, const std::vector<double>& cutpoints);

/// |top-K intersect G| / K. Requires 1 <= K <= |ranking|.
double precision_at_k(const Ranking& ranking, const GoldStandard& gold, std::size_t k);

/// DCG@K / IDCG@K with gain 2^rel - 1 and discount log2(i + 1); agents
/// missing from the gold count as grade 0. Returns 0 when IDCG@K is 0.
double ndcg_at_k(const Ranking& ranking, const GoldStandard& gold, std::size_t k);

/// True when no agent in the ranking has a positive grade (NDCG degenerates).
bool ideal_dcg_is_zero(const Ranking& ranking, const GoldStandard& gold, std::size_t k);

/// Fraction of unordered pairs (i, j) with (s_i - s_j)(g_i - g_j) > 0; ties on
/// either side count as misses. Requires identical agent sets of size >= 2.
double pairwise_accuracy(const ScoreMap& system_scores, const ScoreMap& gold_scores);

/// Mean |a_i - b_i| over a shared, non-empty agent set.
double mae(const ScoreMap& a, const ScoreMap& b);

/// 100 * (before - after) / before. Requires before > 0.
double improvement_pct(double before, double after);

// --- report ------------------------------------------------------------------

struct MetricCell {
  double precision = 0.0;
  double ndcg = 0.0;
  double pairwise = 0.0;
};

struct ReportRow {
  std::string score;  // S_p, S_b, Avg
  std::string phase;  // Init, Prop
  std::vector<MetricCell> cells;  // one per K
};

struct MaeRow {
  std::string kind;  // profile, behavior
  double initial = 0.0;
  double propagated = 0.0;
  double improvement = 0.0;
};

struct RankingReport {
  std::vector<std::size_t> ks;
  std::vector<std::string> k_labels;
  std::vector<ReportRow> rows;
  std::vector<MaeRow> mae_rows;
  std::size_t gold_agents = 0;
  std::size_t relevant_agents = 0;
  std::string tie_break;
  std::vector<std::string> warnings;
};

/// Per-phase score inputs for the report. Maps may cover more agents than
/// the gold; evaluation is restricted to gold agents.
struct PhaseScores {
  ScoreMap profile;
  ScoreMap behavior;
};

/// Average of the two kinds over their shared agents.
ScoreMap average_scores(const ScoreMap& a, const ScoreMap& b);

/// Builds the Score x Phase x {Prec, NDCG, PA} table for each K in
/// `requested_ks` (0 means "all gold agents", i.e. K = |C|). Pairwise
/// accuracy at K is computed over the system's top-K agents.
RankingReport build_report(const PhaseScores& initial, const PhaseScores& propagated,
                           const GoldStandard& gold, const std::vector<std::size_t>& requested_ks,
                           TieBreak tie_break = TieBreak::kIdAscending);

void to_json(nlohmann::json& j, const RankingReport& r);
std::string render_table(const RankingReport& r);

}  // namespace studentsim
