#include "studentsim/similarity_graph.hpp"

#include <iomanip>
#include <sstream>

#include "studentsim/jsonl.hpp"

namespace studentsim {

GraphSummary summarize(const SimilarityGraph<double>& graph) {
  GraphSummary s;
  s.nodes = static_cast<std::size_t>(graph.size());
  s.edges = graph.edge_count();
  s.density = graph.edge_density();
  s.threshold = graph.threshold;
  for (Eigen::Index i = 0; i < graph.degree.size(); ++i) ++s.degree_histogram[graph.degree[i] - 1];
  return s;
}

void to_json(nlohmann::json& j, const GraphSummary& s) {
  auto hist = nlohmann::json::object();
  for (const auto& [degree, count] : s.degree_histogram) hist[std::to_string(degree)] = count;
  j = nlohmann::json{{"nodes", s.nodes},
                     {"edges", s.edges},
                     {"edge_density", s.density},
                     {"threshold", s.threshold},
                     {"degree_histogram", hist}};
}

void export_graph(const SimilarityGraph<double>& graph, const std::filesystem::path& nodes_path,
                  const std::filesystem::path& edges_path) {
  std::string nodes;
  std::string edges;
  for (Eigen::Index i = 0; i < graph.size(); ++i) {
    nodes += dump_line({{"index", i},
                        {"id", graph.node_ids[static_cast<std::size_t>(i)]},
                        {"degree", graph.degree[i] - 1}});
    nodes += '\n';
    for (SparseMatrix<double>::InnerIterator it(graph.adjacency, i); it; ++it) {
      if (it.col() <= i) continue;
      const double sim = graph.embeddings.row(i).dot(graph.embeddings.row(it.col()));
      edges += dump_line({{"source", graph.node_ids[static_cast<std::size_t>(i)]},
                          {"target", graph.node_ids[static_cast<std::size_t>(it.col())]},
                          {"similarity", sim}});
      edges += '\n';
    }
  }
  write_file_atomic(nodes_path, nodes);
  write_file_atomic(edges_path, edges);
}

void export_scores_csv(const std::vector<ScoreVector<double>>& vectors,
                       const std::filesystem::path& path) {
  std::ostringstream out;
  out << "id,kind,phase,value\n";
  out << std::setprecision(17);
  for (const auto& v : vectors) {
    for (std::size_t i = 0; i < v.ids.size(); ++i) {
      out << v.ids[i] << ',' << v.kind << ',' << v.phase << ','
          << v.values[static_cast<Eigen::Index>(i)] << '\n';
    }
  }
  write_file_atomic(path, out.str());
}

}  // namespace studentsim
