#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "oracles.hpp"
#include "studentsim/errors.hpp"
#include "studentsim/eval_metrics.hpp"
#include "studentsim/random.hpp"

using namespace studentsim;

namespace {

GoldStandard gold_with(std::map<std::string, int> grades, std::set<std::string> relevant) {
  GoldStandard g;
  g.grade = std::move(grades);
  g.relevant = std::move(relevant);
  for (const auto& [id, gr] : g.grade) g.expert_mean[id] = gr;
  return g;
}

Ranking order(std::vector<std::string> ids) {
  Ranking r;
  r.ids = std::move(ids);
  return r;
}

}  // namespace

TEST_CASE("rank_agents ordering and tie-break") {
  auto r = rank_agents({{"a", 9}, {"b", 7}});
  CHECK(r.ids == std::vector<std::string>{"a", "b"});
  r = rank_agents({{"b", 9}, {"a", 9}});
  CHECK(r.ids == std::vector<std::string>{"a", "b"});
  r = rank_agents({{"b", 9}, {"a", 9}}, TieBreak::kIdDescending);
  CHECK(r.ids == std::vector<std::string>{"b", "a"});
  CHECK_THROWS_AS(rank_agents({}), InputError);
  CHECK_THROWS_AS(rank_agents({{"a", std::nan("")}}), InputError);
  CHECK_FALSE(describe(TieBreak::kIdAscending).empty());
}

TEST_CASE("precision examples") {
  const auto g = gold_with({{"a", 4}, {"b", 4}, {"c", 4}, {"d", 0}, {"e", 0}}, {"a", "b", "c"});
  CHECK(precision_at_k(order({"a", "b", "c", "d", "e"}), g, 3) == 1.0);
  const auto g1 = gold_with({{"a", 0}, {"b", 0}, {"c", 4}, {"d", 0}, {"e", 0}}, {"c"});
  CHECK(precision_at_k(order({"a", "b", "c", "d", "e"}), g1, 5) == 0.2);
  CHECK(precision_at_k(order({"a", "b"}), gold_with({{"a", 0}, {"b", 0}}, {}), 2) == 0.0);
  CHECK_THROWS_AS(precision_at_k(order({"a"}), g, 0), InputError);
  CHECK_THROWS_AS(precision_at_k(order({"a"}), g, 2), InputError);
}

TEST_CASE("ndcg worked example") {
  const auto g = gold_with({{"a", 3}, {"b", 2}}, {});
  const double dcg = 3.0 / 1 + 7.0 / std::log2(3.0);
  const double idcg = 7.0 / 1 + 3.0 / std::log2(3.0);
  CHECK(dcg == doctest::Approx(7.41651).epsilon(1e-6));
  CHECK(idcg == doctest::Approx(8.89279).epsilon(1e-6));
  const double v = ndcg_at_k(order({"b", "a"}), g, 2);
  CHECK(v == doctest::Approx(dcg / idcg).epsilon(1e-14));
  CHECK(std::abs(v - 0.83399) < 1e-5);
  CHECK(ndcg_at_k(order({"a", "b"}), g, 2) == 1.0);
  CHECK(ndcg_at_k(order({"a", "b"}), g, 1) == 1.0);
  CHECK(ndcg_at_k(order({"a", "b"}), gold_with({{"a", 0}, {"b", 0}}, {}), 2) == 0.0);
  CHECK(ideal_dcg_is_zero(order({"a", "b"}), gold_with({{"a", 0}, {"b", 0}}, {}), 2));
}

TEST_CASE("pairwise accuracy examples") {
  CHECK(pairwise_accuracy({{"a", 1}, {"b", 2}, {"c", 3}}, {{"a", 1}, {"b", 2}, {"c", 3}}) == 1.0);
  CHECK(pairwise_accuracy({{"a", 1}, {"b", 2}, {"c", 3}}, {{"a", 3}, {"b", 2}, {"c", 1}}) == 0.0);
  CHECK(pairwise_accuracy({{"a", 3}, {"b", 1}, {"c", 2}}, {{"a", 3}, {"b", 2}, {"c", 1}}) ==
        doctest::Approx(2.0 / 3).epsilon(1e-15));
  // ties on either side are misses
  CHECK(pairwise_accuracy({{"a", 1}, {"b", 1}}, {{"a", 1}, {"b", 2}}) == 0.0);
  CHECK(pairwise_accuracy({{"a", 1}, {"b", 2}}, {{"a", 5}, {"b", 5}}) == 0.0);
  CHECK_THROWS_AS(pairwise_accuracy({{"a", 1}, {"b", 2}}, {{"a", 1}, {"c", 2}}), InputError);
  CHECK_THROWS_AS(pairwise_accuracy({{"a", 1}}, {{"a", 1}}), InputError);
}

TEST_CASE("mae and improvement") {
  CHECK(mae({{"a", 1}, {"b", 2}}, {{"a", 1}, {"b", 2}}) == 0.0);
  CHECK(mae({{"a", 1}, {"b", 2}}, {{"a", 2}, {"b", 4}}) == 1.5);
  // constant-offset fixture
  ScoreMap base, shifted;
  for (int i = 0; i < 20; ++i) {
    base["p" + std::to_string(i)] = 1 + 0.4 * i;
    shifted["p" + std::to_string(i)] = 1 + 0.4 * i + (i % 2 ? 0.6988 : -0.6988);
  }
  CHECK(mae(base, shifted) == doctest::Approx(0.6988).epsilon(1e-12));
  CHECK(mae(shifted, base) == mae(base, shifted));
  CHECK_THROWS_AS(mae({}, {}), InputError);
  CHECK_THROWS_AS(mae({{"a", 1}}, {{"b", 1}}), InputError);

  CHECK(improvement_pct(2.0, 2.0) == 0.0);
  CHECK(improvement_pct(1.6942, 0.8453) == doctest::Approx(100 * (1.6942 - 0.8453) / 1.6942));
  CHECK(improvement_pct(1.007, 0.6988) == doctest::Approx(100 * (1.007 - 0.6988) / 1.007));
  CHECK(improvement_pct(1.0, 3.0) == -200.0);
  CHECK_THROWS_AS(improvement_pct(0.0, 1.0), InputError);
}

TEST_CASE("grades and gold construction") {
  const auto& cuts = default_grade_cutpoints();
  CHECK(grade_of(4.9, cuts) == 0);
  CHECK(grade_of(5.0, cuts) == 1);
  CHECK(grade_of(7.0, cuts) == 2);
  CHECK(grade_of(8.0, cuts) == 3);
  CHECK(grade_of(9.5, cuts) == 4);
  const auto g = make_gold({{"a", 8.5}, {"b", 7.9}, {"c", 8.0}});
  CHECK(g.relevant == std::set<std::string>{"a", "c"});
  CHECK(g.grade.at("b") == 2);
  CHECK_THROWS_AS(make_gold({}), InputError);
}

TEST_CASE("property: exhaustive permutations of up to 6 agents match brute force") {
  Rng rng(31337);
  for (int n = 1; n <= 6; ++n) {
    for (int trial = 0; trial < 3; ++trial) {
      std::vector<std::string> ids;
      std::map<std::string, int> grades;
      std::set<std::string> relevant;
      ScoreMap gold_scores;
      for (int i = 0; i < n; ++i) {
        const std::string id(1, static_cast<char>('a' + i));
        ids.push_back(id);
        grades[id] = static_cast<int>(rng.index(5));
        if (grades[id] >= 3) relevant.insert(id);
        gold_scores[id] = static_cast<double>(rng.index(4));
      }
      const auto gold = gold_with(grades, relevant);
      std::sort(ids.begin(), ids.end());
      do {
        const auto r = order(ids);
        for (std::size_t k = 1; k <= ids.size(); ++k) {
          CHECK(std::abs(precision_at_k(r, gold, k) - oracle::precision(ids, relevant, k)) <= 1e-9);
          const double nd = ndcg_at_k(r, gold, k);
          CHECK(std::abs(nd - oracle::ndcg(ids, grades, k)) <= 1e-9);
          CHECK(nd >= 0.0);
          CHECK(nd <= 1.0 + 1e-12);
          // ndcg == 1 iff the top-K is grade-sorted and holds the K largest grades
          std::vector<int> top, all;
          for (std::size_t i = 0; i < ids.size(); ++i) {
            all.push_back(grades[ids[i]]);
            if (i < k) top.push_back(grades[ids[i]]);
          }
          std::sort(all.begin(), all.end(), std::greater<>());
          const bool ideal = std::is_sorted(top.begin(), top.end(), std::greater<>()) &&
                             std::equal(top.begin(), top.end(), all.begin());
          const bool any_positive = all.front() > 0;
          if (any_positive) CHECK((std::abs(nd - 1.0) < 1e-12) == ideal);
        }
        if (ids.size() >= 2) {
          // system scores: position in this permutation, with a tie injected
          ScoreMap sys;
          for (std::size_t i = 0; i < ids.size(); ++i) sys[ids[i]] = static_cast<double>(ids.size() - i);
          sys[ids.back()] = sys[ids[ids.size() - 2]];
          CHECK(std::abs(pairwise_accuracy(sys, gold_scores) - oracle::pairwise(sys, gold_scores)) <= 1e-9);
        }
      } while (std::next_permutation(ids.begin(), ids.end()));
    }
  }
}

TEST_CASE("property: pairwise accuracy is invariant under increasing transforms") {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    ScoreMap s, g, s2, g2;
    for (int i = 0; i < 12; ++i) {
      const std::string id = "x" + std::to_string(i);
      s[id] = 1 + 9 * rng.uniform01();
      g[id] = static_cast<double>(rng.index(10));
      s2[id] = std::exp(s[id]) - 3;
      g2[id] = g[id] * g[id] * g[id] + 7;
    }
    CHECK(pairwise_accuracy(s, g) == pairwise_accuracy(s2, g2));
  }
}

TEST_CASE("property: mae symmetry and shift") {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    ScoreMap a, b, shifted;
    const double c = 4 * rng.uniform01() - 2;
    for (int i = 0; i < 9; ++i) {
      const std::string id = std::to_string(i);
      a[id] = 10 * rng.uniform01();
      b[id] = 10 * rng.uniform01();
      shifted[id] = a[id] + c;
    }
    CHECK(mae(a, b) == mae(b, a));
    CHECK(mae(a, b) == doctest::Approx(oracle::mae(a, b)).epsilon(1e-14));
    CHECK(mae(a, shifted) == doctest::Approx(std::abs(c)).epsilon(1e-12));
  }
}

TEST_CASE("report layout") {
  PhaseScores init{{{"a", 9}, {"b", 8}, {"c", 4}, {"d", 7}}, {{"a", 8}, {"b", 9}, {"c", 5}, {"d", 6}}};
  PhaseScores prop{{{"a", 8.8}, {"b", 8.1}, {"c", 6}, {"d", 7.5}}, {{"a", 8.2}, {"b", 8.6}, {"c", 5.5}, {"d", 7}}};
  const auto gold = make_gold({{"a", 9.1}, {"b", 8.2}, {"c", 5.0}});
  const auto rep = build_report(init, prop, gold, {2, 0});
  CHECK(rep.ks == std::vector<std::size_t>{2, 3});
  CHECK(rep.gold_agents == 3);
  CHECK(rep.relevant_agents == 2);
  CHECK(rep.rows.size() == 6);
  for (const auto& row : rep.rows) CHECK(row.cells.size() == 2);
  REQUIRE(rep.mae_rows.size() == 2);
  CHECK(rep.mae_rows[0].initial == doctest::Approx((0.1 + 0.2 + 1.0) / 3));
  CHECK(rep.mae_rows[0].propagated == doctest::Approx((0.3 + 0.1 + 1.0) / 3));

  const auto avg = average_scores(init.profile, init.behavior);
  CHECK(avg.at("a") == 8.5);

  const auto text = render_table(rep);
  CHECK(text.find("K=2") != std::string::npos);
  CHECK(text.find("K=|C| (3)") != std::string::npos);
  for (const char* s : {"S_p", "S_b", "Avg", "Init", "Prop", "Prec", "NDCG", "PA"}) {
    CHECK(text.find(s) != std::string::npos);
  }
  const nlohmann::json j = rep;
  CHECK(j["rows"].size() == 6);
  CHECK(j["mae"][1]["kind"] == "behavior");
}
