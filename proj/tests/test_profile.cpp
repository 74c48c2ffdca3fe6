#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "studentsim/errors.hpp"
#include "studentsim/profile.hpp"

using namespace studentsim;

namespace {

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

bool has_rule(const ViolationList& v, const std::string& rule) {
  return std::any_of(v.begin(), v.end(), [&](const Violation& x) { return x.rule == rule; });
}

}  // namespace

TEST_CASE("default catalog sizes") {
  const auto& c = default_catalog();
  CHECK(c.age_min == 17);
  CHECK(c.age_max == 28);
  CHECK(c.majors.size() == 62);
  CHECK(c.mbti_types.size() == 16);
  CHECK(c.learning_traits.size() == 4);
  CHECK(c.challenge_items.size() == 7);
  CHECK(std::set<std::string>(c.majors.begin(), c.majors.end()).size() == 62);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("broken catalogs are config errors") {
  AttributeCatalog c = default_catalog();
  c.mbti_types.pop_back();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(sample_profile(1, c), ConfigError);

  c = default_catalog();
  c.age_min = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("catalog json round trip") {
  const nlohmann::json j = default_catalog();
  const auto back = j.get<AttributeCatalog>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("sampling is deterministic and valid") {
  const auto a = sample_profile(42);
  const auto b = sample_profile(42);
  CHECK(a == b);
  CHECK(validate_profile(a).empty());
  CHECK(a.age >= 17);
  CHECK(a.age <= 28);
  for (const auto& t : a.learning_traits) {
    CHECK(*std::max_element(t.begin(), t.end()) - *std::min_element(t.begin(), t.end()) <= 1);
  }
  CHECK(sample_profile(43) != a);
}

TEST_CASE("property: spread bound holds for 2000 seeds") {
  std::set<std::string> ids;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const auto p = sample_profile(s);
    REQUIRE(validate_profile(p).empty());
    for (const auto& t : p.learning_traits) {
      for (int x : t) {
        CHECK(x >= kLikertMin);
        CHECK(x <= kLikertMax);
      }
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t l = 0; l < 3; ++l) CHECK(std::abs(t[k] - t[l]) <= 1);
    }
    ids.insert(p.id);
  }
  // ids are content hashes; collisions would mean identical profiles
  CHECK(ids.size() > 1990);
}

TEST_CASE("sampler reaches every Likert value and spread") {
  std::set<int> values;
  std::set<int> spreads;
  for (std::uint64_t s = 0; s < 500; ++s) {
    for (const auto& t : sample_profile(s).learning_traits) {
      values.insert(t.begin(), t.end());
      spreads.insert(*std::max_element(t.begin(), t.end()) - *std::min_element(t.begin(), t.end()));
    }
  }
  CHECK(values == std::set<int>{1, 2, 3, 4, 5});
  CHECK(spreads == std::set<int>{0, 1});
}

TEST_CASE("validate_profile flags each rule") {
  const auto base = sample_profile(7);

  auto p = base;
  p.learning_traits[1] = {4, 5, 4};
  CHECK(validate_profile(p).empty());

  p.learning_traits[1] = {2, 4, 3};
  auto v = validate_profile(p);
  REQUIRE(v.size() == 1);
  CHECK(v[0].rule == "constraint.dmax");
  CHECK(v[0].field.find("learning_traits") != std::string::npos);

  p = base;
  p.age = 16;
  v = validate_profile(p);
  REQUIRE(v.size() == 1);
  CHECK(v[0].rule == "range.age");
  CHECK(v[0].field == "age");

  p = base;
  p.learning_traits[0] = {6, 5, 5};
  CHECK(has_rule(validate_profile(p), "range.likert"));

  p = base;
  p.mbti = "ABCD";
  CHECK(has_rule(validate_profile(p), "catalog.mbti"));

  p = base;
  p.major = "Alchemy";
  CHECK(has_rule(validate_profile(p), "catalog.major"));

  p = base;
  p.standing = "postdoc";
  p.gender = "?";
  v = validate_profile(p);
  CHECK(v.size() == 2);
  CHECK(has_rule(v, "catalog.standing"));
  CHECK(has_rule(v, "catalog.gender"));

  p = base;
  p.big_five[0].description = "not a catalog description";
  CHECK(has_rule(validate_profile(p), "bigfive.description"));
}

TEST_CASE("d_max is configurable") {
  AttributeCatalog c = default_catalog();
  c.d_max = 2;
  auto p = sample_profile(3);
  p.learning_traits[0] = {2, 4, 3};
  CHECK(validate_profile(p, c).empty());
  CHECK_FALSE(validate_profile(p).empty());
}

TEST_CASE("rendering is complete, deterministic and local") {
  const auto p = sample_profile(11);
  const auto t1 = render_profile(p);
  const auto t2 = render_profile(p);
  CHECK(t1.text == t2.text);
  CHECK(t1.rendering_version == "v1");
  CHECK(t1.text.find("MBTI type: " + p.mbti) != std::string::npos);
  CHECK(t1.text.find("Major: " + p.major) != std::string::npos);
  CHECK(t1.text.find(p.motivational_notes) != std::string::npos);

  const auto& c = default_catalog();
  int q = 1;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t k = 0; k < 3; ++k, ++q) {
      const std::string line = "- T" + std::to_string(q) + ". " + c.learning_traits[s].items[k] + " " +
                               std::to_string(p.learning_traits[s][k]);
      CHECK(t1.text.find(line + "\n") != std::string::npos);
    }
  }

  auto older = p;
  older.age = p.age == 28 ? 27 : p.age + 1;
  const auto a = lines_of(t1.text);
  const auto b = lines_of(render_profile(older).text);
  REQUIRE(a.size() == b.size());
  std::vector<std::size_t> diff;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) diff.push_back(i);
  REQUIRE(diff.size() == 1);
  CHECK(a[diff[0]].rfind("Age: ", 0) == 0);
}

TEST_CASE("rendering rejects invalid profiles and unknown versions") {
  auto p = sample_profile(5);
  CHECK_THROWS_AS(render_profile(p, "v9"), InputError);
  p.age = 40;
  CHECK_THROWS_AS(render_profile(p), InputError);
}

TEST_CASE("property: rendering is injective over sampled profiles") {
  std::set<std::string> texts;
  std::set<std::string> keys;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto p = sample_profile(s);
    texts.insert(render_profile(p).text);
    p.id.clear();
    keys.insert(nlohmann::json(p).dump());
  }
  CHECK(texts.size() == keys.size());
}

TEST_CASE("profile id is the content hash of the v1 text") {
  const auto p = sample_profile(99);
  CHECK(p.id == profile_content_id(p));
  CHECK(p.id.size() == 16);
}

TEST_CASE("profile json round trip") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto p = sample_profile(s);
    const nlohmann::json j = p;
    CHECK(j.get<StudentProfile>() == p);
  }
}
