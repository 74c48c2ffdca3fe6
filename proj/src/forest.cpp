#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

#include "studentsim/analysis.hpp"
#include "studentsim/errors.hpp"
#include "studentsim/hashing.hpp"
#include "studentsim/random.hpp"

namespace studentsim {

void to_json(nlohmann::json& j, const ForestOptions& o) {
  j = nlohmann::json{{"n_trees", o.n_trees},
                     {"test_fraction", o.test_fraction},
                     {"seed", o.seed},
                     {"min_leaf", o.min_leaf},
                     {"max_depth", o.max_depth},
                     {"max_features_fraction", o.max_features_fraction},
                     {"bootstrap", o.bootstrap}};
}

double RegressionTree::predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  int i = 0;
  while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
    const auto& n = nodes[static_cast<std::size_t>(i)];
    i = x[n.feature] <= n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<std::size_t>(i)].value;
}

int RegressionTree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    best = std::max(best, d[i]);
    if (nodes[i].feature >= 0) {
      d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
      d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    }
  }
  return best;
}

std::size_t RegressionTree::leaf_count() const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.feature < 0; }));
}

double ForestModel::predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  double sum = 0.0;
  for (const auto& t : trees) sum += t.predict(x);
  return sum / static_cast<double>(trees.size());
}

Eigen::VectorXd ForestModel::predict_rows(const Eigen::MatrixXd& x) const {
  Eigen::VectorXd out(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out[r] = predict(x.row(r));
  return out;
}

namespace {

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
  std::size_t left_count = 0;
};

class TreeBuilder {
 public:
  TreeBuilder(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const ForestOptions& o,
              std::uint64_t seed, Eigen::VectorXd& importance)
      : x_(x), y_(y), o_(o), rng_(seed), importance_(importance) {
    const auto p = static_cast<int>(x.cols());
    mtry_ = std::max(1, static_cast<int>(std::floor(o.max_features_fraction * p)));
    features_.resize(static_cast<std::size_t>(p));
    std::iota(features_.begin(), features_.end(), 0);
  }

  RegressionTree build(std::vector<int> rows) {
    RegressionTree tree;
    grow(tree, rows, 0, rows.size(), 0);
    return tree;
  }

 private:
  int grow(RegressionTree& tree, std::vector<int>& rows, std::size_t begin, std::size_t end,
           int depth) {
    const std::size_t n = end - begin;
    double sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) sum += y_[rows[i]];
    const double mean = sum / static_cast<double>(n);
    double sse = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const double d = y_[rows[i]] - mean;
      sse += d * d;
    }
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({-1, 0.0, -1, -1, mean, static_cast<int>(n), sse});

    const bool depth_ok = o_.max_depth < 0 || depth < o_.max_depth;
    if (!depth_ok || n < 2 * static_cast<std::size_t>(o_.min_leaf) || sse <= 1e-12) return id;

    const Split split = best_split(rows, begin, end, sse);
    if (split.feature < 0) return id;

    const auto mid = std::partition(rows.begin() + static_cast<std::ptrdiff_t>(begin),
                                    rows.begin() + static_cast<std::ptrdiff_t>(end), [&](int r) {
                                      return x_(r, split.feature) <= split.threshold;
                                    });
    const auto m = static_cast<std::size_t>(mid - rows.begin());
    importance_[split.feature] += split.gain;
    const int left = grow(tree, rows, begin, m, depth + 1);
    const int right = grow(tree, rows, m, end, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = left;
    node.right = right;
    return id;
  }

  Split best_split(const std::vector<int>& rows, std::size_t begin, std::size_t end,
                   double parent_sse) {
    const std::size_t n = end - begin;
    const auto min_leaf = static_cast<std::size_t>(o_.min_leaf);
    // Partial Fisher-Yates: draw features lazily so the search can go past
    // mtry when none of the first draws admits a split.
    const std::size_t p = features_.size();
    Split best;
    pairs_.resize(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += y_[rows[begin + i]];
    for (std::size_t k = 0; k < p; ++k) {
      if (static_cast<int>(k) >= mtry_ && best.feature >= 0) break;
      std::swap(features_[k], features_[k + rng_.index(p - k)]);
      const int f = features_[k];
      bool constant = true;
      const double first = x_(rows[begin], f);
      for (std::size_t i = 0; i < n; ++i) {
        const int r = rows[begin + i];
        pairs_[i] = {x_(r, f), y_[r]};
        constant = constant && pairs_[i].first == first;
      }
      if (constant) continue;
      std::sort(pairs_.begin(), pairs_.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
      double left_sum = 0.0;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        left_sum += pairs_[i].second;
        if (pairs_[i].first == pairs_[i + 1].first) continue;
        const std::size_t nl = i + 1;
        const std::size_t nr = n - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        const double right_sum = total - left_sum;
        // SSE reduction = sum_l^2/n_l + sum_r^2/n_r - total^2/n.
        const double gain = left_sum * left_sum / static_cast<double>(nl) +
                            right_sum * right_sum / static_cast<double>(nr) -
                            total * total / static_cast<double>(n);
        if (gain > best.gain + 1e-12) {
          best.feature = f;
          best.threshold = 0.5 * (pairs_[i].first + pairs_[i + 1].first);
          best.gain = std::min(gain, parent_sse);
          best.left_count = nl;
        }
      }
    }
    return best;
  }

  const Eigen::MatrixXd& x_;
  const Eigen::VectorXd& y_;
  const ForestOptions& o_;
  Rng rng_;
  Eigen::VectorXd& importance_;
  int mtry_ = 1;
  std::vector<int> features_;
  std::vector<std::pair<double, double>> pairs_;
};

double mse_on(const ForestModel& m, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
              const std::vector<int>& rows) {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (int r : rows) {
    const double d = m.predict(x.row(r)) - y[r];
    s += d * d;
  }
  return s / static_cast<double>(rows.size());
}

}  // namespace

ForestModel fit_forest(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                       const ForestOptions& options, std::vector<std::string> feature_names,
                       std::vector<std::string> feature_categories) {
  if (x.rows() != y.size()) throw InputError("fit_forest: X and y have different row counts");
  if (x.rows() < 5) throw InputError("fit_forest: need at least 5 rows");
  if (x.cols() < 1) throw InputError("fit_forest: no features");
  if (options.n_trees < 1) throw ConfigError("fit_forest: n_trees must be >= 1");
  if (options.min_leaf < 1) throw ConfigError("fit_forest: min_leaf must be >= 1");
  if (!(options.test_fraction >= 0.0 && options.test_fraction < 1.0)) {
    throw ConfigError("fit_forest: test_fraction must be in [0, 1)");
  }
  if (!(options.max_features_fraction > 0.0 && options.max_features_fraction <= 1.0)) {
    throw ConfigError("fit_forest: max_features_fraction must be in (0, 1]");
  }
  if (!x.allFinite() || !y.allFinite()) throw InputError("fit_forest: non-finite input");
  if (feature_names.empty()) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) feature_names.push_back("x" + std::to_string(c));
  }
  if (feature_names.size() != static_cast<std::size_t>(x.cols())) {
    throw InputError("fit_forest: feature name count does not match columns");
  }
  if (feature_categories.empty()) feature_categories.assign(feature_names.size(), "");

  ForestModel model;
  model.options = options;
  model.feature_names = std::move(feature_names);
  model.feature_categories = std::move(feature_categories);

  std::vector<int> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(mix64(options.seed ^ 0x7e57'5eedULL));
  split_rng.shuffle(order);
  auto n_test = static_cast<std::size_t>(std::floor(options.test_fraction * order.size()));
  n_test = std::min(n_test, order.size() - 2);
  model.test_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  model.train_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(model.test_rows.begin(), model.test_rows.end());
  std::sort(model.train_rows.begin(), model.train_rows.end());

  const auto n_trees = static_cast<std::size_t>(options.n_trees);
  model.trees.resize(n_trees);
  std::vector<Eigen::VectorXd> per_tree(n_trees, Eigen::VectorXd::Zero(x.cols()));

  auto fit_one = [&](std::size_t t) {
    const std::uint64_t seed = mix64(options.seed + 0x9e37'79b9'7f4a'7c15ULL * (t + 1));
    Rng rng(seed);
    std::vector<int> rows;
    const auto& train = model.train_rows;
    if (options.bootstrap) {
      rows.reserve(train.size());
      for (std::size_t i = 0; i < train.size(); ++i) rows.push_back(train[rng.index(train.size())]);
    } else {
      rows = train;
    }
    TreeBuilder builder(x, y, options, rng.next(), per_tree[t]);
    model.trees[t] = builder.build(rows);
    per_tree[t] /= static_cast<double>(rows.size());
  };

  unsigned threads = options.threads > 0 ? static_cast<unsigned>(options.threads)
                                         : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(n_trees));
  if (threads <= 1) {
    for (std::size_t t = 0; t < n_trees; ++t) fit_one(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < n_trees; t = next++) fit_one(t);
      });
    }
    for (auto& th : pool) th.join();
  }

  model.raw_importance = Eigen::VectorXd::Zero(x.cols());
  for (const auto& imp : per_tree) model.raw_importance += imp;
  model.raw_importance /= static_cast<double>(n_trees);

  Eigen::VectorXd y_train(static_cast<Eigen::Index>(model.train_rows.size()));
  for (std::size_t i = 0; i < model.train_rows.size(); ++i) {
    y_train[static_cast<Eigen::Index>(i)] = y[model.train_rows[i]];
  }
  model.importance_defined = (y_train.array() - y_train.mean()).abs().maxCoeff() > 0.0;
  model.train_mse = mse_on(model, x, y, model.train_rows);
  model.test_mse = mse_on(model, x, y, model.test_rows);
  return model;
}

ForestModel fit_forest(const FeatureMatrix& x, const Eigen::VectorXd& y, const ForestOptions& options) {
  std::vector<std::string> categories;
  for (const auto& c : x.columns) categories.push_back(c.category);
  return fit_forest(x.values, y, options, x.names(), std::move(categories));
}

Eigen::VectorXd permutation_importance(const ForestModel& model, const Eigen::MatrixXd& x,
                                       const Eigen::VectorXd& y, std::uint64_t seed) {
  const auto& rows = model.test_rows.empty() ? model.train_rows : model.test_rows;
  const double base = mse_on(model, x, y, rows);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(x.cols());
  Rng rng(mix64(seed));
  Eigen::MatrixXd work = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    std::vector<int> perm = rows;
    rng.shuffle(perm);
    for (std::size_t i = 0; i < rows.size(); ++i) work(rows[i], c) = x(perm[i], c);
    out[c] = mse_on(model, work, y, rows) - base;
    for (int r : rows) work(r, c) = x(r, c);
  }
  return out;
}

void to_json(nlohmann::json& j, const ForestModel& m) {
  std::size_t leaves = 0;
  int depth = 0;
  for (const auto& t : m.trees) {
    leaves += t.leaf_count();
    depth = std::max(depth, t.depth());
  }
  j = nlohmann::json{{"options", m.options},
                     {"trees", m.trees.size()},
                     {"features", m.feature_names.size()},
                     {"train_rows", m.train_rows.size()},
                     {"test_rows", m.test_rows.size()},
                     {"train_mse", m.train_mse},
                     {"test_mse", m.test_mse},
                     {"mean_leaves", m.trees.empty() ? 0.0 : double(leaves) / double(m.trees.size())},
                     {"max_depth", depth},
                     {"importance_defined", m.importance_defined}};
}

ImportanceRanking relative_importance(const ForestModel& model) {
  return relative_importance(model, model.raw_importance);
}

ImportanceRanking relative_importance(const ForestModel& model, const Eigen::VectorXd& raw) {
  if (!model.importance_defined) {
    throw AnalysisError("feature importance is undefined: the target is constant");
  }
  if (raw.size() != static_cast<Eigen::Index>(model.feature_names.size())) {
    throw InputError("relative_importance: importance length does not match features");
  }
  const double max = raw.maxCoeff();
  if (!(max > 0.0)) throw AnalysisError("feature importance is undefined: no positive importance");
  const double sum = raw.cwiseMax(0.0).sum();
  ImportanceRanking out;
  for (Eigen::Index c = 0; c < raw.size(); ++c) {
    const auto i = static_cast<std::size_t>(c);
    out.entries.push_back({model.feature_names[i],
                           i < model.feature_categories.size() ? model.feature_categories[i] : "",
                           raw[c], raw[c] / max, std::max(raw[c], 0.0) / sum});
  }
  std::stable_sort(out.entries.begin(), out.entries.end(), [](const auto& a, const auto& b) {
    if (a.raw != b.raw) return a.raw > b.raw;
    return a.feature < b.feature;
  });
  return out;
}

}  // namespace studentsim
