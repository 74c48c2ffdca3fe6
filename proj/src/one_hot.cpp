#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>

#include "studentsim/analysis.hpp"
#include "studentsim/errors.hpp"
#include "studentsim/jsonl.hpp"

namespace studentsim {

namespace {

constexpr const char* kBasic = "Basic Information";
constexpr const char* kBfValue = "BF value";
constexpr const char* kBfDescription = "BF description";
constexpr const char* kStudy = "Study Questionnaire";
constexpr const char* kFourTrait = "Four Trait Questionnaire";

struct Group {
  std::string name;
  std::string category;
  std::vector<std::string> values;
  std::string (*label)(const StudentProfile&, std::size_t slot);
  std::size_t slot = 0;
};

std::vector<Group> make_groups(const AttributeCatalog& c) {
  std::vector<Group> g;
  g.push_back({"Gender", kBasic, c.genders, [](const StudentProfile& p, std::size_t) { return p.gender; }});
  std::vector<std::string> ages;
  for (int a = c.age_min; a <= c.age_max; ++a) ages.push_back(std::to_string(a));
  g.push_back({"Age", kBasic, ages,
               [](const StudentProfile& p, std::size_t) { return std::to_string(p.age); }});
  g.push_back({"Major", kBasic, c.majors, [](const StudentProfile& p, std::size_t) { return p.major; }});
  g.push_back({"Standing", kBasic, c.standings,
               [](const StudentProfile& p, std::size_t) { return p.standing; }});
  g.push_back({"MBTI", kBasic, c.mbti_types, [](const StudentProfile& p, std::size_t) { return p.mbti; }});
  for (std::size_t i = 0; i < kBigFiveCount; ++i) {
    g.push_back({std::string("BF-") + c.big_five[i].trait, kBfValue, {"high", "low"},
                 [](const StudentProfile& p, std::size_t s) { return to_string(p.big_five[s].level); },
                 i});
  }
  for (std::size_t i = 0; i < kBigFiveCount; ++i) {
    std::vector<std::string> descriptions = c.big_five[i].high;
    descriptions.insert(descriptions.end(), c.big_five[i].low.begin(), c.big_five[i].low.end());
    g.push_back({std::string("BF-") + c.big_five[i].trait + " desc", kBfDescription, descriptions,
                 [](const StudentProfile& p, std::size_t s) { return p.big_five[s].description; }, i});
  }
  for (std::size_t q = 0; q < kChallengeCount; ++q) {
    g.push_back({"Q" + std::to_string(q + 1), kStudy, {"Yes", "No"},
                 [](const StudentProfile& p, std::size_t s) {
                   return std::string(p.challenges[s] ? "Yes" : "No");
                 },
                 q});
  }
  std::vector<std::string> likert;
  for (int v = kLikertMin; v <= kLikertMax; ++v) likert.push_back(std::to_string(v));
  for (std::size_t t = 0; t < kSubscaleCount * kItemsPerSubscale; ++t) {
    g.push_back({"T" + std::to_string(t + 1), kFourTrait, likert,
                 [](const StudentProfile& p, std::size_t s) {
                   return std::to_string(p.learning_traits[s / kItemsPerSubscale][s % kItemsPerSubscale]);
                 },
                 t});
  }
  return g;
}

}  // namespace

std::vector<std::string> FeatureMatrix::names() const {
  std::vector<std::string> out;
  out.reserve(columns.size());
  for (const auto& c : columns) out.push_back(c.name);
  return out;
}

FeatureMatrix one_hot_encode(const std::vector<StudentProfile>& profiles,
                             const AttributeCatalog& catalog) {
  if (profiles.empty()) throw InputError("one_hot_encode: no profiles");
  const auto groups = make_groups(catalog);
  FeatureMatrix m;
  std::vector<std::size_t> offsets;
  for (const auto& g : groups) {
    offsets.push_back(m.columns.size());
    m.groups.push_back(g.name);
    for (const auto& v : g.values) m.columns.push_back({g.name + "=" + v, g.name, v, g.category});
  }
  m.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(profiles.size()),
                                   static_cast<Eigen::Index>(m.columns.size()));
  for (std::size_t r = 0; r < profiles.size(); ++r) {
    const auto& p = profiles[r];
    m.row_ids.push_back(p.id);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& g = groups[gi];
      const std::string label = g.label(p, g.slot);
      const auto it = std::find(g.values.begin(), g.values.end(), label);
      if (it == g.values.end()) {
        throw InputError("one_hot_encode: profile " + p.id + " has " + g.name + "='" + label +
                         "' outside the catalog");
      }
      m.values(static_cast<Eigen::Index>(r),
               static_cast<Eigen::Index>(offsets[gi] + static_cast<std::size_t>(it - g.values.begin()))) = 1.0;
    }
  }
  return m;
}

std::map<std::string, std::string> decode_row(const FeatureMatrix& m, Eigen::Index row) {
  std::map<std::string, std::string> out;
  for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
    if (m.values(row, c) == 1.0) {
      const auto& col = m.columns[static_cast<std::size_t>(c)];
      if (!out.emplace(col.group, col.value).second) {
        throw InputError("decode_row: group " + col.group + " has more than one hot column");
      }
    }
  }
  return out;
}

DistributionShift distribution_report(const std::vector<StudentProfile>& initial,
                                      const std::vector<StudentProfile>& selected,
                                      const AttributeCatalog& catalog) {
  if (initial.empty() || selected.empty()) {
    throw InputError("distribution_report: both populations must be non-empty");
  }
  std::set<std::string> known;
  for (const auto& p : initial) known.insert(p.id);
  for (const auto& p : selected) {
    if (!known.count(p.id)) {
      throw InputError("distribution_report: selected profile " + p.id + " is not in the initial set");
    }
  }
  const FeatureMatrix a = one_hot_encode(initial, catalog);
  const FeatureMatrix b = one_hot_encode(selected, catalog);
  const Eigen::RowVectorXd fa = a.values.colwise().mean();
  const Eigen::RowVectorXd fb = b.values.colwise().mean();
  DistributionShift shift;
  shift.initial_count = initial.size();
  shift.selected_count = selected.size();
  for (std::size_t c = 0; c < a.columns.size(); ++c) {
    const auto& col = a.columns[c];
    if (shift.features.empty() || shift.features.back().feature != col.group) {
      shift.features.push_back({col.group, {}, {}, {}, {}});
    }
    auto& f = shift.features.back();
    const auto ci = static_cast<Eigen::Index>(c);
    f.values.push_back(col.value);
    f.initial.push_back(fa[ci]);
    f.selected.push_back(fb[ci]);
    f.delta.push_back(fb[ci] - fa[ci]);
  }
  return shift;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

void write_distribution_csv(const DistributionShift& shift, const std::filesystem::path& path) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "feature,value,initial_freq,selected_freq,delta\n";
  for (const auto& f : shift.features) {
    for (std::size_t i = 0; i < f.values.size(); ++i) {
      out << csv_field(f.feature) << ',' << csv_field(f.values[i]) << ',' << f.initial[i] << ','
          << f.selected[i] << ',' << f.delta[i] << '\n';
    }
  }
  write_file_atomic(path, out.str());
}

void write_importance_csv(const ImportanceRanking& ranking, const std::filesystem::path& path) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "rank,feature,category,raw_importance,relative_importance,share\n";
  for (std::size_t i = 0; i < ranking.entries.size(); ++i) {
    const auto& e = ranking.entries[i];
    out << (i + 1) << ',' << csv_field(e.feature) << ',' << csv_field(e.category) << ',' << e.raw
        << ',' << e.relative << ',' << e.share << '\n';
  }
  write_file_atomic(path, out.str());
}

std::string importance_svg(const ImportanceRanking& ranking, const std::string& title,
                           std::size_t limit) {
  static const std::map<std::string, std::string> kColors = {
      {kBasic, "#48a185"}, {kBfValue, "#d86e45"}, {kBfDescription, "#6e80a9"},
      {kStudy, "#c9a227"}, {kFourTrait, "#8e5ea2"}};
  const std::size_t n = std::min(limit, ranking.entries.size());
  const int bar_h = 18;
  const int label_w = 360;
  const int plot_w = 400;
  const int height = 50 + static_cast<int>(n) * (bar_h + 4);
  std::ostringstream svg;
  svg << std::fixed << std::setprecision(1);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << label_w + plot_w + 60
      << "\" height=\"" << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<text x=\"10\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = ranking.entries[i];
    const int y = 35 + static_cast<int>(i) * (bar_h + 4);
    auto color = kColors.find(e.category);
    std::string name = e.feature.size() > 60 ? e.feature.substr(0, 57) + "..." : e.feature;
    svg << "<text x=\"" << label_w - 6 << "\" y=\"" << y + 13 << "\" text-anchor=\"end\">"
        << xml_escape(name) << "</text>\n";
    svg << "<rect x=\"" << label_w << "\" y=\"" << y << "\" width=\"" << e.relative * plot_w
        << "\" height=\"" << bar_h << "\" fill=\""
        << (color == kColors.end() ? std::string("#888888") : color->second) << "\"/>\n";
    svg << "<text x=\"" << label_w + e.relative * plot_w + 4 << "\" y=\"" << y + 13 << "\">"
        << std::setprecision(3) << e.relative << std::setprecision(1) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string distribution_svg(const DistributionShift& shift, const std::string& title) {
  const int row_h = 14;
  std::size_t rows = 0;
  for (const auto& f : shift.features) rows += f.values.size() + 1;
  const int label_w = 380;
  const int plot_w = 300;
  std::ostringstream svg;
  svg << std::fixed << std::setprecision(1);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << label_w + plot_w + 40
      << "\" height=\"" << 50 + static_cast<int>(rows) * row_h << "\" font-family=\"sans-serif\" "
      << "font-size=\"10\">\n";
  svg << "<text x=\"10\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  int y = 35;
  for (const auto& f : shift.features) {
    svg << "<text x=\"10\" y=\"" << y + 10 << "\" font-weight=\"bold\">" << xml_escape(f.feature)
        << "</text>\n";
    y += row_h;
    for (std::size_t i = 0; i < f.values.size(); ++i, y += row_h) {
      std::string v = f.values[i].size() > 55 ? f.values[i].substr(0, 52) + "..." : f.values[i];
      svg << "<text x=\"" << label_w - 6 << "\" y=\"" << y + 10 << "\" text-anchor=\"end\">"
          << xml_escape(v) << "</text>\n";
      svg << "<rect x=\"" << label_w << "\" y=\"" << y << "\" width=\"" << f.initial[i] * plot_w
          << "\" height=\"6\" fill=\"#48a185\"/>\n";
      svg << "<rect x=\"" << label_w << "\" y=\"" << y + 6 << "\" width=\""
          << f.selected[i] * plot_w << "\" height=\"6\" fill=\"#d86e45\"/>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace studentsim
