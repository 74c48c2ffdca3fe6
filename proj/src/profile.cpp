#include "studentsim/profile.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "studentsim/errors.hpp"
#include "studentsim/hashing.hpp"
#include "studentsim/random.hpp"

namespace studentsim {

namespace {

constexpr std::array<char, kBigFiveCount> kTraitOrder = {'O', 'C', 'E', 'A', 'N'};

bool is_mbti_code(const std::string& s) {
  return s.size() == 4 && (s[0] == 'I' || s[0] == 'E') &&
         (s[1] == 'S' || s[1] == 'N') && (s[2] == 'T' || s[2] == 'F') &&
         (s[3] == 'J' || s[3] == 'P');
}

template <typename Range>
bool contains(const Range& r, const std::string& v) {
  return std::find(r.begin(), r.end(), v) != r.end();
}

template <typename Range>
bool all_distinct(const Range& r) {
  std::set<std::string> seen(r.begin(), r.end());
  return seen.size() == static_cast<std::size_t>(std::distance(r.begin(), r.end()));
}

double subscale_mean(const LikertTriple& t) {
  return (t[0] + t[1] + t[2]) / 3.0;
}

std::string compose_motivational_notes(const StudentProfile& p) {
  // Goal commitment is subscale 0; neuroticism is Big Five slot 4.
  const double goal = subscale_mean(p.learning_traits[0]);
  const double motivation = subscale_mean(p.learning_traits[1]);
  std::string notes;
  if (goal >= 4.0) {
    notes = "Strongly committed to long-term academic goals.";
  } else if (goal >= 2.5) {
    notes = "Moderately committed to academic goals; commitment wavers under pressure.";
  } else {
    notes = "Unsure about academic goals and often questions the value of the program.";
  }
  if (motivation < 2.5) notes += " Day-to-day motivation for coursework is low.";
  const bool anxious = p.big_five[4].level == TraitLevel::kHigh;
  const bool stressed = p.challenges[5];
  if (anxious && stressed) {
    notes += " Emotional state: frequently overwhelmed and anxious about performance.";
  } else if (anxious || stressed) {
    notes += " Emotional state: occasionally tense before deadlines and exams.";
  } else {
    notes += " Emotional state: generally calm and steady.";
  }
  return notes;
}

}  // namespace

std::string to_string(TraitLevel level) {
  return level == TraitLevel::kHigh ? "high" : "low";
}

TraitLevel trait_level_from_string(const std::string& s) {
  if (s == "high") return TraitLevel::kHigh;
  if (s == "low") return TraitLevel::kLow;
  throw ParseError("unknown trait level '" + s + "'");
}

void AttributeCatalog::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("catalog: " + m); };
  if (genders.empty() || !all_distinct(genders)) fail("genders must be non-empty and distinct");
  if (age_min > age_max || age_min < 0) fail("age range is empty");
  if (majors.empty() || !all_distinct(majors)) fail("majors must be non-empty and distinct");
  if (standings.empty() || !all_distinct(standings)) {
    fail("standings must be non-empty and distinct");
  }
  if (mbti_types.size() != 16 || !all_distinct(mbti_types)) {
    fail("mbti_types must hold exactly 16 distinct codes");
  }
  for (const auto& code : mbti_types) {
    if (!is_mbti_code(code)) fail("invalid MBTI code '" + code + "'");
  }
  for (std::size_t i = 0; i < kBigFiveCount; ++i) {
    const auto& bf = big_five[i];
    if (bf.trait != kTraitOrder[i]) fail("big_five must be ordered O, C, E, A, N");
    if (bf.high.empty() || bf.low.empty()) {
      fail(std::string("big_five trait ") + bf.trait + " needs high and low descriptions");
    }
  }
  for (const auto& g : learning_traits) {
    if (g.name.empty()) fail("learning trait group without a name");
    for (const auto& item : g.items) {
      if (item.empty()) fail("empty learning trait item in '" + g.name + "'");
    }
  }
  for (const auto& item : challenge_items) {
    if (item.empty()) fail("empty challenge item");
  }
  if (d_max < 0 || d_max > kLikertMax - kLikertMin) fail("d_max out of range");
}

void to_json(nlohmann::json& j, const AttributeCatalog& c) {
  j = nlohmann::json{{"genders", c.genders},
                     {"age_range", {c.age_min, c.age_max}},
                     {"majors", c.majors},
                     {"standings", c.standings},
                     {"mbti_types", c.mbti_types},
                     {"d_max", c.d_max}};
  auto bf = nlohmann::json::array();
  for (const auto& d : c.big_five) {
    bf.push_back({{"trait", std::string(1, d.trait)},
                  {"name", d.name},
                  {"high", d.high},
                  {"low", d.low}});
  }
  j["big_five_descriptors"] = bf;
  auto lt = nlohmann::json::array();
  for (const auto& g : c.learning_traits) {
    lt.push_back({{"name", g.name}, {"items", g.items}});
  }
  j["learning_trait_items"] = lt;
  j["challenge_items"] = c.challenge_items;
}

void from_json(const nlohmann::json& j, AttributeCatalog& c) {
  try {
    c.genders = j.at("genders").get<std::vector<std::string>>();
    const auto range = j.at("age_range").get<std::vector<int>>();
    if (range.size() != 2) throw ConfigError("catalog: age_range must be [min, max]");
    c.age_min = range[0];
    c.age_max = range[1];
    c.majors = j.at("majors").get<std::vector<std::string>>();
    c.standings = j.at("standings").get<std::vector<std::string>>();
    c.mbti_types = j.at("mbti_types").get<std::vector<std::string>>();
    c.d_max = j.value("d_max", 1);
    const auto& bf = j.at("big_five_descriptors");
    if (!bf.is_array() || bf.size() != kBigFiveCount) {
      throw ConfigError("catalog: big_five_descriptors must have 5 entries");
    }
    for (std::size_t i = 0; i < kBigFiveCount; ++i) {
      const auto trait = bf[i].at("trait").get<std::string>();
      if (trait.size() != 1) throw ConfigError("catalog: trait must be one letter");
      c.big_five[i].trait = trait[0];
      c.big_five[i].name = bf[i].at("name").get<std::string>();
      c.big_five[i].high = bf[i].at("high").get<std::vector<std::string>>();
      c.big_five[i].low = bf[i].at("low").get<std::vector<std::string>>();
    }
    const auto& lt = j.at("learning_trait_items");
    if (!lt.is_array() || lt.size() != kSubscaleCount) {
      throw ConfigError("catalog: learning_trait_items must have exactly 4 groups");
    }
    for (std::size_t i = 0; i < kSubscaleCount; ++i) {
      c.learning_traits[i].name = lt[i].at("name").get<std::string>();
      const auto items = lt[i].at("items").get<std::vector<std::string>>();
      if (items.size() != kItemsPerSubscale) {
        throw ConfigError("catalog: each learning trait group needs exactly 3 items");
      }
      std::copy(items.begin(), items.end(), c.learning_traits[i].items.begin());
    }
    const auto ch = j.at("challenge_items").get<std::vector<std::string>>();
    if (ch.size() != kChallengeCount) {
      throw ConfigError("catalog: challenge_items must have exactly 7 entries");
    }
    std::copy(ch.begin(), ch.end(), c.challenge_items.begin());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("catalog: ") + e.what());
  }
}

AttributeCatalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open catalog " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("catalog " + path.string() + ": " + e.what());
  }
  AttributeCatalog c = j.get<AttributeCatalog>();
  c.validate();
  return c;
}

void to_json(nlohmann::json& j, const StudentProfile& p) {
  auto bf = nlohmann::json::array();
  for (const auto& e : p.big_five) {
    bf.push_back({{"trait", std::string(1, e.trait)},
                  {"level", to_string(e.level)},
                  {"description", e.description}});
  }
  j = nlohmann::json{{"id", p.id},
                     {"rendering_version", kRenderingV1},
                     {"gender", p.gender},
                     {"age", p.age},
                     {"major", p.major},
                     {"standing", p.standing},
                     {"mbti", p.mbti},
                     {"big_five", bf},
                     {"learning_traits", p.learning_traits},
                     {"challenges", p.challenges},
                     {"motivational_notes", p.motivational_notes}};
}

void from_json(const nlohmann::json& j, StudentProfile& p) {
  p.id = j.at("id").get<std::string>();
  p.gender = j.at("gender").get<std::string>();
  p.age = j.at("age").get<int>();
  p.major = j.at("major").get<std::string>();
  p.standing = j.at("standing").get<std::string>();
  p.mbti = j.at("mbti").get<std::string>();
  const auto& bf = j.at("big_five");
  if (!bf.is_array() || bf.size() != kBigFiveCount) {
    throw ParseError("profile: big_five must have 5 entries");
  }
  for (std::size_t i = 0; i < kBigFiveCount; ++i) {
    const auto trait = bf[i].at("trait").get<std::string>();
    p.big_five[i].trait = trait.empty() ? '?' : trait[0];
    p.big_five[i].level = trait_level_from_string(bf[i].at("level").get<std::string>());
    p.big_five[i].description = bf[i].at("description").get<std::string>();
  }
  p.learning_traits = j.at("learning_traits").get<std::array<LikertTriple, kSubscaleCount>>();
  p.challenges = j.at("challenges").get<std::array<bool, kChallengeCount>>();
  p.motivational_notes = j.at("motivational_notes").get<std::string>();
}

ViolationList validate_profile(const StudentProfile& p, const AttributeCatalog& catalog) {
  ViolationList out;
  auto add = [&out](std::string field, std::string rule, std::string message) {
    out.push_back({std::move(field), std::move(rule), std::move(message)});
  };
  if (!contains(catalog.genders, p.gender)) {
    add("gender", "catalog.gender", "gender '" + p.gender + "' not in catalog");
  }
  if (p.age < catalog.age_min || p.age > catalog.age_max) {
    add("age", "range.age",
        "age " + std::to_string(p.age) + " outside [" + std::to_string(catalog.age_min) +
            ", " + std::to_string(catalog.age_max) + "]");
  }
  if (!contains(catalog.majors, p.major)) {
    add("major", "catalog.major", "major '" + p.major + "' not in catalog");
  }
  if (!contains(catalog.standings, p.standing)) {
    add("standing", "catalog.standing", "standing '" + p.standing + "' not in catalog");
  }
  if (!contains(catalog.mbti_types, p.mbti)) {
    add("mbti", "catalog.mbti", "MBTI '" + p.mbti + "' not in catalog");
  }
  for (std::size_t i = 0; i < kBigFiveCount; ++i) {
    const auto& e = p.big_five[i];
    const std::string field = "big_five[" + std::to_string(i) + "]";
    if (e.trait != kTraitOrder[i]) {
      add(field + ".trait", "bigfive.order",
          std::string("expected trait ") + kTraitOrder[i] + ", got " + e.trait);
      continue;
    }
    if (!contains(catalog.big_five[i].for_level(e.level), e.description)) {
      add(field + ".description", "bigfive.description",
          "description does not belong to level " + to_string(e.level));
    }
  }
  for (std::size_t s = 0; s < kSubscaleCount; ++s) {
    const auto& t = p.learning_traits[s];
    const std::string field = "learning_traits[" + std::to_string(s) + "]";
    bool in_range = true;
    for (std::size_t k = 0; k < kItemsPerSubscale; ++k) {
      if (t[k] < kLikertMin || t[k] > kLikertMax) {
        in_range = false;
        add(field + "[" + std::to_string(k) + "]", "range.likert",
            "Likert value " + std::to_string(t[k]) + " outside [1, 5]");
      }
    }
    if (!in_range) continue;
    const auto [lo, hi] = std::minmax_element(t.begin(), t.end());
    if (*hi - *lo > catalog.d_max) {
      add(field, "constraint.dmax",
          "subscale '" + catalog.learning_traits[s].name + "' spread " +
              std::to_string(*hi - *lo) + " exceeds d_max " + std::to_string(catalog.d_max));
    }
  }
  return out;
}

StudentProfile sample_profile(std::uint64_t seed, const AttributeCatalog& catalog) {
  catalog.validate();
  Rng rng(seed);
  StudentProfile p;
  p.gender = catalog.genders[rng.index(catalog.genders.size())];
  p.age = static_cast<int>(rng.uniform_int(catalog.age_min, catalog.age_max));
  p.major = catalog.majors[rng.index(catalog.majors.size())];
  p.standing = catalog.standings[rng.index(catalog.standings.size())];
  p.mbti = catalog.mbti_types[rng.index(catalog.mbti_types.size())];
  for (std::size_t i = 0; i < kBigFiveCount; ++i) {
    const auto& d = catalog.big_five[i];
    const TraitLevel level = rng.uniform_int(0, 1) == 0 ? TraitLevel::kHigh : TraitLevel::kLow;
    const auto& options = d.for_level(level);
    p.big_five[i] = {d.trait, level, options[rng.index(options.size())]};
  }
  // Each item is drawn from the window every earlier sibling still allows,
  // so the spread bound holds by construction.
  for (auto& triple : p.learning_traits) {
    int lo = kLikertMin;
    int hi = kLikertMax;
    for (auto& item : triple) {
      item = static_cast<int>(rng.uniform_int(lo, hi));
      lo = std::max(lo, item - catalog.d_max);
      hi = std::min(hi, item + catalog.d_max);
    }
  }
  for (auto& c : p.challenges) c = rng.uniform_int(0, 1) == 1;
  p.motivational_notes = compose_motivational_notes(p);
  p.id = profile_content_id(p, catalog);
  return p;
}

ProfileText render_profile(const StudentProfile& p, const std::string& version,
                           const AttributeCatalog& catalog) {
  if (version != kRenderingV1) throw InputError("unknown rendering version '" + version + "'");
  const auto violations = validate_profile(p, catalog);
  if (!violations.empty()) {
    throw InputError("cannot render invalid profile: " + violations.front().message);
  }
  std::ostringstream out;
  out << "Student profile\n";
  out << "Gender: " << p.gender << "\n";
  out << "Age: " << p.age << "\n";
  out << "Major: " << p.major << "\n";
  out << "Academic standing: " << p.standing << "\n";
  out << "MBTI type: " << p.mbti << "\n";
  out << "Big Five traits:\n";
  for (std::size_t i = 0; i < kBigFiveCount; ++i) {
    const auto& e = p.big_five[i];
    out << "- " << catalog.big_five[i].name << " (" << e.trait << "): " << to_string(e.level)
        << ". " << e.description << "\n";
  }
  out << "Learning traits (1 = strongly disagree, 5 = strongly agree):\n";
  int q = 1;
  for (std::size_t s = 0; s < kSubscaleCount; ++s) {
    out << "[" << catalog.learning_traits[s].name << "]\n";
    for (std::size_t k = 0; k < kItemsPerSubscale; ++k, ++q) {
      out << "- T" << q << ". " << catalog.learning_traits[s].items[k] << " "
          << p.learning_traits[s][k] << "\n";
    }
  }
  out << "Academic challenges:\n";
  for (std::size_t c = 0; c < kChallengeCount; ++c) {
    out << "- Q" << (c + 1) << ". " << catalog.challenge_items[c] << " "
        << (p.challenges[c] ? "Yes" : "No") << "\n";
  }
  out << "Motivation and emotional state: " << p.motivational_notes << "\n";
  return {out.str(), version};
}

std::string profile_content_id(const StudentProfile& p, const AttributeCatalog& catalog) {
  return short_hash(render_profile(p, kRenderingV1, catalog).text);
}

}  // namespace studentsim
