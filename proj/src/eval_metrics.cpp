#include "studentsim/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <tuple>

#include "studentsim/errors.hpp"

namespace studentsim {

namespace {

void require_same_agents(const ScoreMap& a, const ScoreMap& b, const char* what) {
  if (a.size() != b.size() ||
      !std::equal(a.begin(), a.end(), b.begin(),
                  [](const auto& x, const auto& y) { return x.first == y.first; })) {
    throw InputError(std::string(what) + ": agent sets differ");
  }
}

double gain(int grade) { return std::exp2(static_cast<double>(grade)) - 1.0; }

double discount(std::size_t position) {  // 1-based
  return std::log2(static_cast<double>(position) + 1.0);
}

int grade_in(const GoldStandard& gold, const std::string& id) {
  auto it = gold.grade.find(id);
  return it == gold.grade.end() ? 0 : it->second;
}

void check_k(const Ranking& ranking, std::size_t k, const char* what) {
  if (k < 1 || k > ranking.ids.size()) {
    throw InputError(std::string(what) + ": K=" + std::to_string(k) + " outside [1, " +
                     std::to_string(ranking.ids.size()) + "]");
  }
}

ScoreMap restrict_to(const ScoreMap& scores, const ScoreMap& keys) {
  ScoreMap out;
  for (const auto& [id, _] : keys) {
    auto it = scores.find(id);
    if (it == scores.end()) throw InputError("report: no score for gold agent " + id);
    out.emplace(id, it->second);
  }
  return out;
}

ScoreMap top_k(const Ranking& ranking, const ScoreMap& values, std::size_t k) {
  ScoreMap out;
  for (std::size_t i = 0; i < k; ++i) out.emplace(ranking.ids[i], values.at(ranking.ids[i]));
  return out;
}

}  // namespace

std::string describe(TieBreak policy) {
  return policy == TieBreak::kIdAscending ? "score descending, then agent id ascending"
                                          : "score descending, then agent id descending";
}

Ranking rank_agents(const ScoreMap& scores, TieBreak policy) {
  if (scores.empty()) throw InputError("rank_agents: no scores");
  for (const auto& [id, s] : scores) {
    if (std::isnan(s)) throw InputError("rank_agents: NaN score for " + id);
  }
  Ranking r;
  r.scores = scores;
  r.tie_break = policy;
  for (const auto& [id, _] : scores) r.ids.push_back(id);
  std::stable_sort(r.ids.begin(), r.ids.end(), [&](const std::string& a, const std::string& b) {
    const double sa = scores.at(a);
    const double sb = scores.at(b);
    if (sa != sb) return sa > sb;
    return policy == TieBreak::kIdAscending ? a < b : a > b;
  });
  return r;
}

int grade_of(double expert_mean, const std::vector<double>& cutpoints) {
  int g = 0;
  for (double c : cutpoints) g += expert_mean >= c;
  return g;
}

GoldStandard make_gold(const ScoreMap& expert_mean, double relevance_threshold,
                       const std::vector<double>& grade_cutpoints) {
  if (expert_mean.empty()) {
    throw InputError("gold standard: no expert ratings; run the interactive test first");
  }
  GoldStandard g;
  g.expert_mean = expert_mean;
  g.relevance_threshold = relevance_threshold;
  g.grade_cutpoints = grade_cutpoints;
  for (const auto& [id, mean] : expert_mean) {
    if (!std::isfinite(mean)) throw InputError("gold standard: non-finite mean for " + id);
    if (mean >= relevance_threshold) g.relevant.insert(id);
    g.grade[id] = grade_of(mean, grade_cutpoints);
  }
  return g;
}

double precision_at_k(const Ranking& ranking, const GoldStandard& gold, std::size_t k) {
  check_k(ranking, k, "precision_at_k");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) hits += gold.relevant.count(ranking.ids[i]);
  return static_cast<double>(hits) / static_cast<double>(k);
}

double ndcg_at_k(const Ranking& ranking, const GoldStandard& gold, std::size_t k) {
  check_k(ranking, k, "ndcg_at_k");
  double dcg = 0.0;
  std::vector<int> grades;
  grades.reserve(ranking.ids.size());
  for (std::size_t i = 0; i < ranking.ids.size(); ++i) {
    const int g = grade_in(gold, ranking.ids[i]);
    grades.push_back(g);
    if (i < k) dcg += gain(g) / discount(i + 1);
  }
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < k; ++i) idcg += gain(grades[i]) / discount(i + 1);
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

bool ideal_dcg_is_zero(const Ranking& ranking, const GoldStandard& gold, std::size_t) {
  return std::none_of(ranking.ids.begin(), ranking.ids.end(),
                      [&](const std::string& id) { return grade_in(gold, id) > 0; });
}

double pairwise_accuracy(const ScoreMap& system_scores, const ScoreMap& gold_scores) {
  require_same_agents(system_scores, gold_scores, "pairwise_accuracy");
  if (system_scores.size() < 2) throw InputError("pairwise_accuracy: need at least 2 agents");
  std::vector<double> s;
  std::vector<double> g;
  for (const auto& [id, v] : system_scores) {
    s.push_back(v);
    g.push_back(gold_scores.at(id));
  }
  std::size_t concordant = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i + 1; j < s.size(); ++j, ++pairs) {
      concordant += (s[i] - s[j]) * (g[i] - g[j]) > 0.0;
    }
  }
  return static_cast<double>(concordant) / static_cast<double>(pairs);
}

double mae(const ScoreMap& a, const ScoreMap& b) {
  require_same_agents(a, b, "mae");
  if (a.empty()) throw InputError("mae: no agents");
  double total = 0.0;
  for (const auto& [id, v] : a) total += std::abs(v - b.at(id));
  return total / static_cast<double>(a.size());
}

double improvement_pct(double before, double after) {
  if (!(before > 0.0)) throw InputError("improvement_pct: baseline must be positive");
  return 100.0 * (before - after) / before;
}

ScoreMap average_scores(const ScoreMap& a, const ScoreMap& b) {
  ScoreMap out;
  for (const auto& [id, v] : a) {
    if (auto it = b.find(id); it != b.end()) out.emplace(id, (v + it->second) / 2.0);
  }
  return out;
}

RankingReport build_report(const PhaseScores& initial, const PhaseScores& propagated,
                           const GoldStandard& gold, const std::vector<std::size_t>& requested_ks,
                           TieBreak tie_break) {
  RankingReport report;
  const std::size_t n = gold.expert_mean.size();
  report.gold_agents = n;
  report.relevant_agents = gold.relevant.size();
  report.tie_break = describe(tie_break);
  for (std::size_t k : requested_ks) {
    const std::size_t effective = k == 0 ? n : std::min(k, n);
    report.ks.push_back(effective);
    report.k_labels.push_back(k == 0 ? "K=|C|" : "K=" + std::to_string(k));
    if (k > n) {
      report.warnings.push_back("K=" + std::to_string(k) + " exceeds the " + std::to_string(n) +
                                " gold agents; clipped");
    }
  }

  struct Source {
    std::string score;
    std::string phase;
    ScoreMap values;
  };
  std::vector<Source> sources;
  const ScoreMap ip = restrict_to(initial.profile, gold.expert_mean);
  const ScoreMap ib = restrict_to(initial.behavior, gold.expert_mean);
  const ScoreMap pp = restrict_to(propagated.profile, gold.expert_mean);
  const ScoreMap pb = restrict_to(propagated.behavior, gold.expert_mean);
  sources.push_back({"S_p", "Init", ip});
  sources.push_back({"S_p", "Prop", pp});
  sources.push_back({"S_b", "Init", ib});
  sources.push_back({"S_b", "Prop", pb});
  sources.push_back({"Avg", "Init", average_scores(ip, ib)});
  sources.push_back({"Avg", "Prop", average_scores(pp, pb)});

  bool warned_idcg = false;
  for (const auto& src : sources) {
    ReportRow row{src.score, src.phase, {}};
    const Ranking ranking = rank_agents(src.values, tie_break);
    for (std::size_t k : report.ks) {
      MetricCell cell;
      cell.precision = precision_at_k(ranking, gold, k);
      cell.ndcg = ndcg_at_k(ranking, gold, k);
      if (ideal_dcg_is_zero(ranking, gold, k) && !warned_idcg) {
        report.warnings.push_back("all gold grades are zero; NDCG reported as 0");
        warned_idcg = true;
      }
      if (k >= 2) {
        const ScoreMap top = top_k(ranking, src.values, k);
        cell.pairwise = pairwise_accuracy(top, restrict_to(gold.expert_mean, top));
      }
      row.cells.push_back(cell);
    }
    report.rows.push_back(std::move(row));
  }

  for (const auto& [kind, init, prop] :
       {std::tuple<std::string, const ScoreMap*, const ScoreMap*>{"profile", &ip, &pp},
        {"behavior", &ib, &pb}}) {
    MaeRow m{kind, mae(*init, gold.expert_mean), mae(*prop, gold.expert_mean), 0.0};
    m.improvement = m.initial > 0.0 ? improvement_pct(m.initial, m.propagated) : 0.0;
    report.mae_rows.push_back(m);
  }
  return report;
}

void to_json(nlohmann::json& j, const RankingReport& r) {
  auto rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    auto cells = nlohmann::json::array();
    for (std::size_t i = 0; i < row.cells.size(); ++i) {
      cells.push_back({{"k", r.ks[i]},
                       {"label", r.k_labels[i]},
                       {"precision", row.cells[i].precision},
                       {"ndcg", row.cells[i].ndcg},
                       {"pairwise_accuracy", row.cells[i].pairwise}});
    }
    rows.push_back({{"score", row.score}, {"phase", row.phase}, {"cells", cells}});
  }
  auto maes = nlohmann::json::array();
  for (const auto& m : r.mae_rows) {
    maes.push_back({{"kind", m.kind},
                    {"initial", m.initial},
                    {"propagated", m.propagated},
                    {"improvement_pct", m.improvement}});
  }
  j = nlohmann::json{{"ks", r.ks},
                     {"k_labels", r.k_labels},
                     {"rows", rows},
                     {"mae", maes},
                     {"gold_agents", r.gold_agents},
                     {"relevant_agents", r.relevant_agents},
                     {"tie_break", r.tie_break},
                     {"warnings", r.warnings}};
}

std::string render_table(const RankingReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  const int w = 8;
  out << std::left << std::setw(7) << "Score" << std::setw(7) << "Phase";
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    const std::string label = r.k_labels[i] + " (" + std::to_string(r.ks[i]) + ")";
    out << "| " << std::setw(3 * w) << label;
  }
  out << "\n" << std::setw(14) << "";
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    out << "| " << std::setw(w) << "Prec." << std::setw(w) << "NDCG" << std::setw(w) << "PA";
  }
  out << "\n" << std::string(14 + r.ks.size() * (3 * w + 2), '-') << "\n";
  std::string last_score;
  for (const auto& row : r.rows) {
    out << std::setw(7) << (row.score == last_score ? "" : row.score) << std::setw(7) << row.phase;
    last_score = row.score;
    for (const auto& c : row.cells) {
      out << "| " << std::setw(w) << c.precision << std::setw(w) << c.ndcg << std::setw(w)
          << c.pairwise;
    }
    out << "\n";
  }
  out << "\n" << std::setw(10) << "MAE" << std::setw(10) << "Init" << std::setw(12) << "Propagated"
      << "Improv\n";
  for (const auto& m : r.mae_rows) {
    std::ostringstream pct;
    pct << std::fixed << std::setprecision(2) << std::showpos << m.improvement << "%";
    out << std::setw(10) << m.kind << std::setw(10) << m.initial << std::setw(12) << m.propagated
        << pct.str() << "\n";
  }
  out << "\nGold agents: " << r.gold_agents << ", relevant: " << r.relevant_agents
      << ". Ties: " << r.tie_break << ".\n";
  for (const auto& w2 : r.warnings) out << "warning: " << w2 << "\n";
  return out.str();
}

}  // namespace studentsim
