#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <nlohmann/json.hpp>

#include "studentsim/errors.hpp"

namespace studentsim {

template <typename Scalar>
using DynamicVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using DynamicMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using SparseMatrix = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;

/// Graphs with more nodes than this keep the normalized adjacency sparse.
inline constexpr Eigen::Index kDenseNodeLimit = 2000;

/// e = u / ||u||_2. Throws InputError for a zero or non-finite vector.
template <typename Derived>
DynamicVector<typename Derived::Scalar> normalize_embedding(const Eigen::MatrixBase<Derived>& u) {
  using Scalar = typename Derived::Scalar;
  if (!u.allFinite()) throw InputError("normalize_embedding: non-finite entries");
  const Scalar norm = u.norm();
  if (!(norm > Scalar(0))) throw InputError("normalize_embedding: zero vector");
  return u / norm;
}

/// Threshold graph over unit embeddings. A_ii = 1 always; for i != j,
/// A_ij = 1 iff e_i . e_j >= threshold.
template <typename Scalar>
struct SimilarityGraph {
  std::vector<std::string> node_ids;
  DynamicMatrix<Scalar> embeddings;  // one unit row per node
  Scalar threshold = Scalar(0.8);
  SparseMatrix<Scalar> adjacency;    // 0/1 entries, symmetric
  Eigen::VectorXi degree;            // includes the self-loop

  Eigen::Index size() const { return adjacency.rows(); }
  /// Undirected off-diagonal edges.
  std::size_t edge_count() const {
    return static_cast<std::size_t>((adjacency.nonZeros() - adjacency.rows()) / 2);
  }
  double edge_density() const {
    const double n = static_cast<double>(size());
    return n < 2 ? 0.0 : static_cast<double>(edge_count()) / (n * (n - 1) / 2);
  }
};

template <typename Scalar>
SimilarityGraph<Scalar> build_graph(const std::vector<DynamicVector<Scalar>>& embeddings,
                                    Scalar threshold, std::vector<std::string> node_ids = {}) {
  const auto n = static_cast<Eigen::Index>(embeddings.size());
  if (threshold < Scalar(-1) || threshold > Scalar(1)) {
    throw InputError("build_graph: threshold must lie in [-1, 1]");
  }
  if (node_ids.empty()) {
    for (Eigen::Index i = 0; i < n; ++i) node_ids.push_back(std::to_string(i));
  }
  if (static_cast<Eigen::Index>(node_ids.size()) != n) {
    throw InputError("build_graph: node id count does not match embeddings");
  }
  SimilarityGraph<Scalar> g;
  g.node_ids = std::move(node_ids);
  g.threshold = threshold;
  const Eigen::Index dim = n == 0 ? 0 : embeddings.front().size();
  g.embeddings.resize(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = embeddings[static_cast<std::size_t>(i)];
    if (e.size() != dim) throw InputError("build_graph: embedding dimension mismatch");
    if (!e.allFinite() || std::abs(e.norm() - Scalar(1)) > Scalar(1e-9)) {
      throw InputError("build_graph: embedding " + std::to_string(i) + " is not unit-norm");
    }
    g.embeddings.row(i) = e.transpose();
  }

  // Only i < j similarities are computed; both triangles take the same value,
  // so A is symmetric bit for bit.
  std::vector<Eigen::Triplet<Scalar>> triplets;
  constexpr Eigen::Index kBlock = 512;
  for (Eigen::Index start = 0; start < n; start += kBlock) {
    const Eigen::Index rows = std::min(kBlock, n - start);
    const DynamicMatrix<Scalar> sims =
        g.embeddings.middleRows(start, rows) * g.embeddings.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Eigen::Index i = start + r;
      triplets.emplace_back(i, i, Scalar(1));
      for (Eigen::Index j = i + 1; j < n; ++j) {
        if (sims(r, j) >= threshold) {
          triplets.emplace_back(i, j, Scalar(1));
          triplets.emplace_back(j, i, Scalar(1));
        }
      }
    }
  }
  g.adjacency.resize(n, n);
  g.adjacency.setFromTriplets(triplets.begin(), triplets.end());
  g.adjacency.makeCompressed();
  g.degree = Eigen::VectorXi::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    g.degree[i] = static_cast<int>(g.adjacency.outerIndexPtr()[i + 1] - g.adjacency.outerIndexPtr()[i]);
  }
  return g;
}

/// D^{-1/2} A D^{-1/2}. Dense up to kDenseNodeLimit nodes, sparse beyond.
template <typename Scalar>
class NormalizedAdjacency {
 public:
  using Storage = std::variant<DynamicMatrix<Scalar>, SparseMatrix<Scalar>>;

  NormalizedAdjacency() = default;
  explicit NormalizedAdjacency(Storage storage) : storage_(std::move(storage)) {}

  Eigen::Index size() const {
    return std::visit([](const auto& m) { return m.rows(); }, storage_);
  }
  bool is_sparse() const { return std::holds_alternative<SparseMatrix<Scalar>>(storage_); }

  template <typename Derived>
  DynamicVector<Scalar> apply(const Eigen::MatrixBase<Derived>& x) const {
    return std::visit([&](const auto& m) -> DynamicVector<Scalar> { return m * x; }, storage_);
  }

  DynamicMatrix<Scalar> dense() const {
    return std::visit(
        [](const auto& m) -> DynamicMatrix<Scalar> { return DynamicMatrix<Scalar>(m); }, storage_);
  }

  Scalar coeff(Eigen::Index i, Eigen::Index j) const {
    return std::visit([&](const auto& m) -> Scalar { return m.coeff(i, j); }, storage_);
  }

  const Storage& storage() const { return storage_; }

 private:
  Storage storage_;
};

template <typename Scalar>
NormalizedAdjacency<Scalar> normalize_adjacency(const SimilarityGraph<Scalar>& graph,
                                                Eigen::Index dense_limit = kDenseNodeLimit) {
  const Eigen::Index n = graph.size();
  DynamicVector<Scalar> degree = graph.degree.template cast<Scalar>();
  SparseMatrix<Scalar> normalized = graph.adjacency;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (typename SparseMatrix<Scalar>::InnerIterator it(normalized, i); it; ++it) {
      // d_i * d_j commutes exactly, so the result stays symmetric.
      it.valueRef() = it.value() / std::sqrt(degree[it.row()] * degree[it.col()]);
    }
  }
  if (n <= dense_limit) return NormalizedAdjacency<Scalar>(DynamicMatrix<Scalar>(normalized));
  return NormalizedAdjacency<Scalar>(std::move(normalized));
}

template <typename Scalar>
struct PropagationResult {
  DynamicVector<Scalar> scores;
  int iterations = 0;            // k*
  Scalar final_residual = Scalar(0);
  std::vector<Scalar> residuals; // ||S^(k) - S^(k-1)||_inf for k = 1..k*
};

/// Iterates S^(k+1) = alpha * A~ S^(k) + (1 - alpha) S^(0) until the
/// infinity-norm step drops below `tol` or `max_iterations` is reached.
template <typename Derived, typename Scalar = typename Derived::Scalar>
PropagationResult<Scalar> propagate(const Eigen::MatrixBase<Derived>& initial,
                                    const NormalizedAdjacency<Scalar>& normalized,
                                    Scalar alpha = Scalar(0.5), int max_iterations = 50,
                                    Scalar tol = Scalar(1e-9)) {
  if (!(alpha >= Scalar(0) && alpha < Scalar(1))) {
    throw InputError("propagate: alpha must lie in [0, 1)");
  }
  if (initial.size() != normalized.size()) throw InputError("propagate: length mismatch");
  if (!initial.allFinite()) throw InputError("propagate: non-finite initial scores");
  if (max_iterations < 0) throw InputError("propagate: negative iteration cap");

  const DynamicVector<Scalar> anchor = (Scalar(1) - alpha) * initial;
  PropagationResult<Scalar> out;
  out.scores = initial;
  for (int k = 1; k <= max_iterations; ++k) {
    DynamicVector<Scalar> next = alpha * normalized.apply(out.scores) + anchor;
    const Scalar residual = (next - out.scores).cwiseAbs().maxCoeff();
    out.scores = std::move(next);
    out.iterations = k;
    out.final_residual = residual;
    out.residuals.push_back(residual);
    if (residual < tol) break;
  }
  return out;
}

/// Closed form of the propagation limit: solves (I - alpha A~) S = (1 - alpha) S0.
/// I - alpha A~ is symmetric positive definite for alpha < 1.
template <typename Derived, typename Scalar = typename Derived::Scalar>
DynamicVector<Scalar> fixed_point(const Eigen::MatrixBase<Derived>& initial,
                                  const NormalizedAdjacency<Scalar>& normalized,
                                  Scalar alpha = Scalar(0.5)) {
  if (!(alpha >= Scalar(0) && alpha < Scalar(1))) {
    throw InputError("fixed_point: alpha must lie in [0, 1)");
  }
  if (initial.size() != normalized.size()) throw InputError("fixed_point: length mismatch");
  const DynamicVector<Scalar> rhs = (Scalar(1) - alpha) * initial;
  return std::visit(
      [&](const auto& m) -> DynamicVector<Scalar> {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, DynamicMatrix<Scalar>>) {
          const DynamicMatrix<Scalar> system =
              DynamicMatrix<Scalar>::Identity(m.rows(), m.cols()) - alpha * m;
          return system.ldlt().solve(rhs);
        } else {
          SparseMatrix<Scalar> identity(m.rows(), m.cols());
          identity.setIdentity();
          const Eigen::SparseMatrix<Scalar> system = identity - alpha * m;
          Eigen::SimplicialLDLT<Eigen::SparseMatrix<Scalar>> solver(system);
          if (solver.info() != Eigen::Success) throw InputError("fixed_point: factorization failed");
          return solver.solve(rhs);
        }
      },
      normalized.storage());
}

/// Scores aligned to node order, tagged with kind and phase.
template <typename Scalar>
struct ScoreVector {
  std::vector<std::string> ids;
  DynamicVector<Scalar> values;
  std::string kind;   // profile | behavior | avg
  std::string phase;  // initial | iterate | propagated | fixed_point
};

// Export helpers (double precision; what the pipeline persists).

struct GraphSummary {
  std::size_t nodes = 0;
  std::size_t edges = 0;
  double density = 0.0;
  double threshold = 0.0;
  std::map<int, std::size_t> degree_histogram;  // degree excluding self-loop
};

GraphSummary summarize(const SimilarityGraph<double>& graph);
void to_json(nlohmann::json& j, const GraphSummary& s);

/// nodes.jsonl: {"index", "id", "degree"}; edges.jsonl: {"source", "target",
/// "similarity"} with source < target.
void export_graph(const SimilarityGraph<double>& graph, const std::filesystem::path& nodes_path,
                  const std::filesystem::path& edges_path);

/// Writes "id,kind,phase,value" rows.
void export_scores_csv(const std::vector<ScoreVector<double>>& vectors,
                       const std::filesystem::path& path);

}  // namespace studentsim
