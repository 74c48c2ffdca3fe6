#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace studentsim {

inline constexpr std::size_t kBigFiveCount = 5;
inline constexpr std::size_t kSubscaleCount = 4;
inline constexpr std::size_t kItemsPerSubscale = 3;
inline constexpr std::size_t kChallengeCount = 7;
inline constexpr int kLikertMin = 1;
inline constexpr int kLikertMax = 5;

enum class TraitLevel { kHigh, kLow };

std::string to_string(TraitLevel level);
TraitLevel trait_level_from_string(const std::string& s);

struct BigFiveDescriptors {
  char trait = 'O';  // one of O, C, E, A, N
  std::string name;
  std::vector<std::string> high;
  std::vector<std::string> low;

  const std::vector<std::string>& for_level(TraitLevel level) const {
    return level == TraitLevel::kHigh ? high : low;
  }
};

struct LikertGroup {
  std::string name;
  std::array<std::string, kItemsPerSubscale> items;
};

/// Everything a profile may be drawn from. Loaded from JSON or defaulted.
struct AttributeCatalog {
  std::vector<std::string> genders;
  int age_min = 17;
  int age_max = 28;
  std::vector<std::string> majors;
  std::vector<std::string> standings;
  std::vector<std::string> mbti_types;
  std::array<BigFiveDescriptors, kBigFiveCount> big_five;
  std::array<LikertGroup, kSubscaleCount> learning_traits;
  std::array<std::string, kChallengeCount> challenge_items;
  int d_max = 1;

  /// Throws ConfigError naming the first broken invariant.
  void validate() const;
};

const AttributeCatalog& default_catalog();
AttributeCatalog load_catalog(const std::filesystem::path& path);
void to_json(nlohmann::json& j, const AttributeCatalog& c);
void from_json(const nlohmann::json& j, AttributeCatalog& c);

struct BigFiveEntry {
  char trait = 'O';
  TraitLevel level = TraitLevel::kHigh;
  std::string description;

  bool operator==(const BigFiveEntry&) const = default;
};

using LikertTriple = std::array<int, kItemsPerSubscale>;

struct StudentProfile {
  std::string id;
  std::string gender;
  int age = 0;
  std::string major;
  std::string standing;
  std::string mbti;
  std::array<BigFiveEntry, kBigFiveCount> big_five;
  std::array<LikertTriple, kSubscaleCount> learning_traits{};
  std::array<bool, kChallengeCount> challenges{};
  std::string motivational_notes;

  bool operator==(const StudentProfile&) const = default;
};

void to_json(nlohmann::json& j, const StudentProfile& p);
void from_json(const nlohmann::json& j, StudentProfile& p);

struct Violation {
  std::string field;
  std::string rule;
  std::string message;
};
using ViolationList = std::vector<Violation>;

/// Lists every violated profile invariant. Empty means valid.
ViolationList validate_profile(const StudentProfile& profile,
                               const AttributeCatalog& catalog = default_catalog());

/// Draws one profile satisfying every invariant, including the bounded
/// intra-subscale spread |T^k - T^l| <= d_max. Pure in (seed, catalog).
StudentProfile sample_profile(std::uint64_t seed,
                              const AttributeCatalog& catalog = default_catalog());

inline constexpr const char* kRenderingV1 = "v1";

struct ProfileText {
  std::string text;
  std::string rendering_version;
};

ProfileText render_profile(const StudentProfile& profile,
                           const std::string& version = kRenderingV1,
                           const AttributeCatalog& catalog = default_catalog());

/// Content hash of the v1 rendering; stable across runs.
std::string profile_content_id(const StudentProfile& profile,
                               const AttributeCatalog& catalog = default_catalog());

}  // namespace studentsim
