#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "studentsim/profile.hpp"

namespace studentsim {

// --- one-hot encoding ----------------------------------------------------------

struct FeatureColumn {
  std::string name;      // "Age=19", "MBTI=ISTJ", "BF-O=high", "Q2=Yes", "T4=5"
  std::string group;     // "Age", "MBTI", "BF-O", "Q2", "T4", ...
  std::string value;     // label inside the group
  std::string category;  // Basic Information, BF value, BF description, ...
};

struct FeatureMatrix {
  Eigen::MatrixXd values;  // rows x columns, entries in {0, 1}
  std::vector<FeatureColumn> columns;
  std::vector<std::string> row_ids;
  std::vector<std::string> groups;  // column-group order

  std::vector<std::string> names() const;
};

/// Column order is fixed by the catalog, not by the data. Throws InputError
/// on empty input.
FeatureMatrix one_hot_encode(const std::vector<StudentProfile>& profiles,
                             const AttributeCatalog& catalog = default_catalog());

/// group -> label for one row; inverse of one_hot_encode.
std::map<std::string, std::string> decode_row(const FeatureMatrix& matrix, Eigen::Index row);

// --- random forest regression ------------------------------------------------------

struct ForestOptions {
  int n_trees = 100;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
  int min_leaf = 2;
  int max_depth = -1;  // unlimited
  /// Features examined per split: max(1, floor(fraction * p)). The search
  /// continues past this count until some usable split is found.
  double max_features_fraction = 1.0 / 3.0;
  bool bootstrap = true;
  int threads = 0;  // 0: hardware concurrency
};

void to_json(nlohmann::json& j, const ForestOptions& o);

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // mean target of the node's samples
  int samples = 0;
  double sse = 0.0;    // sum of squared deviations at this node
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  int depth() const;
  std::size_t leaf_count() const;
};

struct ForestModel {
  ForestOptions options;
  std::vector<RegressionTree> trees;
  std::vector<std::string> feature_names;
  std::vector<std::string> feature_categories;
  std::vector<int> train_rows;
  std::vector<int> test_rows;
  /// Mean over trees of each feature's total SSE decrease, divided by the
  /// tree's sample count (variance units).
  Eigen::VectorXd raw_importance;
  double train_mse = 0.0;
  double test_mse = 0.0;
  /// False when the target is constant; importances are then all zero.
  bool importance_defined = true;

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  Eigen::VectorXd predict_rows(const Eigen::MatrixXd& x) const;
};

/// Bootstrap rows, random feature subset per split, variance-reduction splits,
/// mean leaves. Deterministic in (X, y, options). Requires >= 5 rows.
ForestModel fit_forest(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                       const ForestOptions& options = {},
                       std::vector<std::string> feature_names = {},
                       std::vector<std::string> feature_categories = {});

ForestModel fit_forest(const FeatureMatrix& x, const Eigen::VectorXd& y,
                       const ForestOptions& options = {});

/// Mean increase of held-out MSE when one column is shuffled.
Eigen::VectorXd permutation_importance(const ForestModel& model, const Eigen::MatrixXd& x,
                                       const Eigen::VectorXd& y, std::uint64_t seed);

void to_json(nlohmann::json& j, const ForestModel& m);  // summary only

struct ImportanceEntry {
  std::string feature;
  std::string category;
  double raw = 0.0;
  double relative = 0.0;  // raw / max raw
  double share = 0.0;     // raw / sum raw
};

struct ImportanceRanking {
  std::vector<ImportanceEntry> entries;  // descending raw, ties by name
};

/// Throws AnalysisError when importances are undefined (constant target).
ImportanceRanking relative_importance(const ForestModel& model);
ImportanceRanking relative_importance(const ForestModel& model, const Eigen::VectorXd& raw);

// --- distribution shift -------------------------------------------------------------

struct FeatureDistribution {
  std::string feature;
  std::vector<std::string> values;
  std::vector<double> initial;
  std::vector<double> selected;
  std::vector<double> delta;  // selected - initial
};

struct DistributionShift {
  std::vector<FeatureDistribution> features;
  std::size_t initial_count = 0;
  std::size_t selected_count = 0;
};

/// Throws InputError for empty lists or when `selected` has an id missing
/// from `initial`.
DistributionShift distribution_report(const std::vector<StudentProfile>& initial,
                                      const std::vector<StudentProfile>& selected,
                                      const AttributeCatalog& catalog = default_catalog());

void write_distribution_csv(const DistributionShift& shift, const std::filesystem::path& path);
void write_importance_csv(const ImportanceRanking& ranking, const std::filesystem::path& path);

/// Horizontal bar chart of the top `limit` features.
std::string importance_svg(const ImportanceRanking& ranking, const std::string& title,
                           std::size_t limit = 25);
/// Paired bars (initial vs selected) for every feature value.
std::string distribution_svg(const DistributionShift& shift, const std::string& title);

}  // namespace studentsim
