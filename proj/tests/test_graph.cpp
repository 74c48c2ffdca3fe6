#include <doctest.h>

#include <filesystem>
#include <numeric>

#include "studentsim/jsonl.hpp"
#include "studentsim/random.hpp"
#include <Eigen/Eigenvalues>

#include "studentsim/similarity_graph.hpp"

using namespace studentsim;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<VectorXd> random_embeddings(Rng& rng, int n, int dim) {
  std::vector<VectorXd> out;
  for (int i = 0; i < n; ++i) {
    VectorXd u(dim);
    for (int k = 0; k < dim; ++k) u[k] = 2 * rng.uniform01() - 1;
    out.push_back(normalize_embedding(u));
  }
  return out;
}

// Oracle: adjacency and Eq. 6 iteration written out element by element.
MatrixXd oracle_normalized(const std::vector<VectorXd>& e, double theta) {
  const auto n = static_cast<Eigen::Index>(e.size());
  MatrixXd a = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = (i == j || e[i].dot(e[j]) >= theta) ? 1 : 0;
  VectorXd d = a.rowwise().sum();
  MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out(i, j) = a(i, j) / std::sqrt(d[i] * d[j]);
  return out;
}

NormalizedAdjacency<double> from_adjacency(const MatrixXd& a) {
  SimilarityGraph<double> g;
  g.adjacency = a.sparseView();
  g.degree = a.rowwise().sum().cast<int>();
  return normalize_adjacency(g);
}

}  // namespace

TEST_CASE("normalize_embedding") {
  VectorXd u(2);
  u << 3, 4;
  const VectorXd e = normalize_embedding(u);
  CHECK(e[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(e[1] == doctest::Approx(0.8).epsilon(1e-15));
  VectorXd unit = VectorXd::Unit(3, 1);
  CHECK(normalize_embedding(unit) == unit);
  CHECK_THROWS_AS(normalize_embedding(VectorXd::Zero(2)), InputError);

  Eigen::VectorXf f(2);
  f << 0, 2;
  CHECK(normalize_embedding(f)[1] == 1.0f);
}

TEST_CASE("build_graph threshold rule") {
  VectorXd a = VectorXd::Unit(2, 0), b = VectorXd::Unit(2, 1);
  auto g = build_graph<double>({a, a}, 0.9);
  CHECK(g.edge_count() == 1);
  g = build_graph<double>({a, b}, 0.5);
  CHECK(g.edge_count() == 0);
  CHECK(g.degree[0] == 1);

  Rng rng(5);
  const auto e = random_embeddings(rng, 9, 4);
  g = build_graph(e, -1.0);
  CHECK(g.edge_count() == 9 * 8 / 2);
  CHECK(g.edge_density() == 1.0);

  CHECK_THROWS_AS(build_graph<double>({a, VectorXd::Unit(3, 0)}, 0.5), InputError);
  CHECK_THROWS_AS(build_graph<double>({a, 2 * a}, 0.5), InputError);
  CHECK_THROWS_AS(build_graph<double>({a}, 1.5), InputError);
}

TEST_CASE("property: adjacency symmetric with unit diagonal") {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(40));
    const auto e = random_embeddings(rng, n, 6);
    const double theta = rng.uniform01() * 0.8 - 0.2;
    const auto g = build_graph(e, theta);
    const MatrixXd a(g.adjacency);
    CHECK(a == a.transpose());
    CHECK(a.diagonal() == VectorXd::Ones(n));
    CHECK((g.degree.array() >= 1).all());
    const MatrixXd nd = normalize_adjacency(g).dense();
    CHECK(nd == nd.transpose());
    CHECK((nd - oracle_normalized(e, theta)).cwiseAbs().maxCoeff() < 1e-15);
    // spectral radius <= 1
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(nd);
    CHECK(es.eigenvalues().cwiseAbs().maxCoeff() <= 1 + 1e-12);
  }
}

TEST_CASE("normalized adjacency hand examples") {
  MatrixXd iso = MatrixXd::Identity(1, 1);
  CHECK(from_adjacency(iso).coeff(0, 0) == 1.0);

  MatrixXd two = MatrixXd::Ones(2, 2);
  CHECK(from_adjacency(two).dense() == MatrixXd::Constant(2, 2, 0.5));

  MatrixXd path(3, 3);
  path << 1, 1, 0, 1, 1, 1, 0, 1, 1;
  const auto n = from_adjacency(path);
  CHECK(n.coeff(0, 1) == doctest::Approx(1 / std::sqrt(6.0)).epsilon(1e-15));
  CHECK(n.coeff(0, 1) == doctest::Approx(0.4082).epsilon(1e-4));
  CHECK(n.coeff(1, 1) == doctest::Approx(1.0 / 3));
  CHECK(n.coeff(0, 2) == 0.0);
}

TEST_CASE("propagation hand examples") {
  const auto two = from_adjacency(MatrixXd::Ones(2, 2));
  VectorXd s0(2);
  s0 << 10, 0;
  const auto r = propagate(s0, two, 0.5, 50, 1e-15);
  CHECK(std::abs(r.scores[0] - 7.5) <= 1e-12);
  CHECK(std::abs(r.scores[1] - 2.5) <= 1e-12);
  // reached at k = 1, the second step only confirms it
  CHECK(r.iterations == 2);
  CHECK(r.residuals[1] == 0.0);
  const VectorXd fp = fixed_point(s0, two, 0.5);
  CHECK(std::abs(fp[0] - 7.5) <= 1e-12);
  CHECK(std::abs(fp[1] - 2.5) <= 1e-12);

  const auto iso = from_adjacency(MatrixXd::Identity(1, 1));
  VectorXd one(1);
  one << 6.25;
  for (int k : {0, 1, 7, 500}) CHECK(propagate(one, iso, 0.5, k, 0.0).scores[0] == 6.25);

  // isolated node inside a larger graph
  MatrixXd a = MatrixXd::Ones(3, 3);
  a.row(2).setZero();
  a.col(2).setZero();
  a(2, 2) = 1;
  VectorXd s(3);
  s << 9, 1, 4;
  CHECK(propagate(s, from_adjacency(a), 0.5, 100, 1e-14).scores[2] == 4.0);

  CHECK(propagate(s, from_adjacency(MatrixXd::Ones(3, 3)), 0.0, 10).scores == s);
  CHECK(fixed_point(s, from_adjacency(MatrixXd::Ones(3, 3)), 0.0) == s);
}

TEST_CASE("propagation rejects bad input") {
  const auto two = from_adjacency(MatrixXd::Ones(2, 2));
  VectorXd s(2);
  s << 1, std::nan("");
  CHECK_THROWS_AS(propagate(s, two), InputError);
  CHECK_THROWS_AS(propagate(VectorXd::Ones(3), two), InputError);
  CHECK_THROWS_AS(propagate(VectorXd::Ones(2), two, 1.0), InputError);
  CHECK_THROWS_AS(fixed_point(VectorXd::Ones(2), two, -0.1), InputError);
}

TEST_CASE("property: iteration matches an element-wise oracle and the fixed point") {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(50));
    const auto e = random_embeddings(rng, n, 5);
    const double theta = rng.uniform01() * 0.9 - 0.1;
    const double alpha = rng.uniform01() * 0.95;
    VectorXd s0(n);
    for (int i = 0; i < n; ++i) s0[i] = 1 + 9 * rng.uniform01();

    const auto norm = normalize_adjacency(build_graph(e, theta));
    const MatrixXd oracle = oracle_normalized(e, theta);
    VectorXd s = s0;
    for (int k = 0; k < 7; ++k) {
      VectorXd next(n);
      for (int i = 0; i < n; ++i) {
        double acc = 0;
        for (int j = 0; j < n; ++j) acc += oracle(i, j) * s[j];
        next[i] = alpha * acc + (1 - alpha) * s0[i];
      }
      s = next;
    }
    CHECK((propagate(s0, norm, alpha, 7, 0.0).scores - s).cwiseAbs().maxCoeff() < 1e-12);

    const VectorXd star = fixed_point(s0, norm, alpha);
    const auto full = propagate(s0, norm, alpha, 100000, 1e-13);
    CHECK((full.scores - star).cwiseAbs().maxCoeff() < 1e-6);

    // contraction toward S* in the 2-norm, where ||A~|| <= 1
    VectorXd prev = s0;
    for (int k = 1; k <= 10; ++k) {
      const VectorXd next = propagate(s0, norm, alpha, k, 0.0).scores;
      CHECK((next - star).norm() <= alpha * (prev - star).norm() + 1e-9);
      prev = next;
    }
  }
}

TEST_CASE("property: dense and sparse storage agree") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 5 + static_cast<int>(rng.index(30));
    const auto g = build_graph(random_embeddings(rng, n, 4), 0.3);
    const auto dense = normalize_adjacency(g);
    const auto sparse = normalize_adjacency(g, 0);
    CHECK_FALSE(dense.is_sparse());
    CHECK(sparse.is_sparse());
    VectorXd s0 = VectorXd::LinSpaced(n, 1, 10);
    CHECK((propagate(s0, dense, 0.5, 30, 0.0).scores - propagate(s0, sparse, 0.5, 30, 0.0).scores)
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    CHECK((fixed_point(s0, dense, 0.5) - fixed_point(s0, sparse, 0.5)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("property: permutation equivariance") {
  Rng rng(8);
  const int n = 25;
  const auto e = random_embeddings(rng, n, 4);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<VectorXd> pe(n);
  VectorXd s0 = VectorXd::LinSpaced(n, 1, 10), ps0(n);
  for (int i = 0; i < n; ++i) {
    pe[i] = e[perm[i]];
    ps0[i] = s0[perm[i]];
  }
  const auto r = propagate(s0, normalize_adjacency(build_graph(e, 0.2)), 0.5, 40, 0.0).scores;
  const auto pr = propagate(ps0, normalize_adjacency(build_graph(pe, 0.2)), 0.5, 40, 0.0).scores;
  for (int i = 0; i < n; ++i) CHECK(pr[i] == doctest::Approx(r[perm[i]]).epsilon(1e-12));
}

TEST_CASE("single precision instantiation") {
  Eigen::VectorXf a(2), b(2);
  a << 1, 0;
  b << 0.8f, 0.6f;
  const auto g = build_graph<float>({a, b}, 0.7f);
  CHECK(g.edge_count() == 1);
  Eigen::VectorXf s0(2);
  s0 << 10, 0;
  const auto r = propagate(s0, normalize_adjacency(g), 0.5f, 50, 1e-6f);
  CHECK(r.scores[0] == doctest::Approx(7.5f));
}

TEST_CASE("graph export") {
  Eigen::VectorXd a(2), b(2), c(2);
  a << 1, 0;
  b << 0.8, 0.6;
  c << 0, 1;
  const auto g = build_graph<double>({a, b, c}, 0.5, {"x", "y", "z"});
  const auto s = summarize(g);
  CHECK(s.nodes == 3);
  CHECK(s.edges == 2);
  CHECK(s.degree_histogram.at(1) == 2);
  CHECK(s.degree_histogram.at(2) == 1);

  const auto dir = std::filesystem::temp_directory_path() / "studentsim_graph_test";
  std::filesystem::create_directories(dir);
  export_graph(g, dir / "nodes.jsonl", dir / "edges.jsonl");
  const auto nodes = load_records<nlohmann::json>(dir / "nodes.jsonl");
  const auto edges = load_records<nlohmann::json>(dir / "edges.jsonl");
  CHECK(nodes.size() == 3);
  REQUIRE(edges.size() == 2);
  CHECK(edges[0]["source"] == "x");
  CHECK(edges[0]["target"] == "y");
  CHECK(edges[0]["similarity"].get<double>() == doctest::Approx(0.8));

  ScoreVector<double> v{{"x", "y", "z"}, Eigen::Vector3d(1, 2, 3), "profile", "propagated"};
  export_scores_csv({v}, dir / "s.csv");
  const auto csv = read_file(dir / "s.csv");
  CHECK(csv.rfind("id,kind,phase,value\n", 0) == 0);
  CHECK(csv.find("y,profile,propagated,2") != std::string::npos);
  std::filesystem::remove_all(dir);
}
