#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <optional>
#include <sstream>

#include "studentsim/errors.hpp"
#include "studentsim/hashing.hpp"
#include "studentsim/llm_gateway.hpp"

namespace studentsim {

namespace {

std::uint64_t hash_messages(std::span<const ChatMessage> messages) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& m : messages) {
    h = fnv1a64(to_string(m.role), h);
    h = fnv1a64("\x1f", h);
    h = fnv1a64(m.content, h);
    h = fnv1a64("\x1e", h);
  }
  return h;
}

std::string between(const std::string& s, const std::string& open, const std::string& close) {
  const auto a = s.find(open);
  if (a == std::string::npos) return {};
  const auto b = s.find(close, a + open.size());
  if (b == std::string::npos) return {};
  return s.substr(a + open.size(), b - a - open.size());
}

std::string find_block(std::span<const ChatMessage> messages, const std::string& tag) {
  for (const auto& m : messages) {
    auto block = between(m.content, "<" + tag + ">", "</" + tag + ">");
    if (!block.empty()) return block;
  }
  return {};
}

std::string line_value(const std::string& text, const std::string& key) {
  const auto a = text.find(key);
  if (a == std::string::npos) return {};
  const auto b = text.find('\n', a);
  return text.substr(a + key.size(), b == std::string::npos ? std::string::npos : b - a - key.size());
}

/// What the stub can read back out of a v1 profile rendering.
struct ProfileFacts {
  int age = 0;
  std::string standing;
  std::string mbti;
  std::string major;
  std::array<char, 5> levels{};  // 'h' or 'l' for O, C, E, A, N
  std::array<double, 4> subscale_means{};
  std::array<bool, 7> challenges{};
  bool valid = false;
};

ProfileFacts read_profile(const std::string& text) {
  ProfileFacts f;
  if (text.empty()) return f;
  try {
    f.age = std::stoi(line_value(text, "Age: "));
  } catch (const std::exception&) {
    return f;
  }
  f.standing = line_value(text, "Academic standing: ");
  f.mbti = line_value(text, "MBTI type: ");
  f.major = line_value(text, "Major: ");
  static constexpr std::array<char, 5> kTraits = {'O', 'C', 'E', 'A', 'N'};
  for (std::size_t i = 0; i < 5; ++i) {
    const auto v = line_value(text, std::string("(") + kTraits[i] + "): ");
    f.levels[i] = v.rfind("high", 0) == 0 ? 'h' : 'l';
  }
  for (int q = 1; q <= 12; ++q) {
    const auto v = line_value(text, "- T" + std::to_string(q) + ". ");
    const auto sp = v.find_last_of(' ');
    const int value = sp == std::string::npos ? 3 : std::atoi(v.c_str() + sp + 1);
    f.subscale_means[(q - 1) / 3] += value / 3.0;
  }
  for (int q = 1; q <= 7; ++q) {
    const auto v = line_value(text, "- Q" + std::to_string(q) + ". ");
    f.challenges[q - 1] = v.size() >= 3 && v.compare(v.size() - 3, 3, "Yes") == 0;
  }
  f.valid = true;
  return f;
}

int standing_rank(const std::string& standing) {
  static const std::array<const char*, 7> kOrder = {
      "freshman", "sophomore", "junior", "senior",
      "first-year master", "second-year master", "third-year master"};
  for (std::size_t i = 0; i < kOrder.size(); ++i) {
    if (standing == kOrder[i]) return static_cast<int>(i);
  }
  return 0;
}

/// Cross-field contradiction count, weighted. Shared by both stub scorers.
double profile_penalty(const ProfileFacts& f) {
  double penalty = 0.0;
  const int youngest = 17 + standing_rank(f.standing);
  if (f.age < youngest) penalty += 1.5 * (youngest - f.age);
  if (f.age > youngest + 8) penalty += 0.5;
  if (f.mbti.size() == 4) {
    const bool introvert = f.mbti[0] == 'I';
    if (introvert == (f.levels[2] == 'h')) penalty += 1.5;
    if (f.mbti[3] == 'J' && f.levels[1] == 'l') penalty += 1.0;
  }
  if (f.levels[1] == 'l' && !f.challenges[2]) penalty += 0.5;  // unfocused but "not distracted"
  if (f.levels[4] == 'l' && f.challenges[5]) penalty += 0.5;   // calm yet stressed
  if (f.subscale_means[2] >= 4.0 && f.challenges[0] && f.challenges[1]) penalty += 1.0;
  if (f.subscale_means[3] >= 4.0 && f.challenges[6]) penalty += 1.0;
  return penalty;
}

int clamp_score(double s) {
  return static_cast<int>(std::clamp(std::lround(s), 1L, 10L));
}

std::string score_json(int score, const std::string& explanation) {
  return nlohmann::json{{"score", score}, {"explanation", explanation}}.dump();
}

std::string stub_profile_scorer(std::span<const ChatMessage> messages, double offset) {
  const auto facts = read_profile(find_block(messages, "profile"));
  if (!facts.valid) return score_json(5, "The profile could not be read; assigning a neutral score.");
  const std::uint64_t h = fnv1a64(find_block(messages, "probe"));
  const double noise = static_cast<double>(mix64(h) % 3) - 1.0;  // -1, 0, +1
  const double penalty = profile_penalty(facts);
  const int score = clamp_score(9.5 - 1.5 * penalty + 0.5 * noise + offset);
  std::ostringstream why;
  if (penalty == 0.0) {
    why << "The profile fields are mutually consistent and the responses stay on profile.";
  } else {
    why << "Found cross-field tensions (weighted penalty " << penalty
        << "); the responses only partly resolve them.";
  }
  return score_json(score, why.str());
}

std::string stub_behavior_scorer(std::span<const ChatMessage> messages, double offset) {
  const auto facts = read_profile(find_block(messages, "profile"));
  if (!facts.valid) return score_json(5, "The profile could not be read; assigning a neutral score.");
  const std::uint64_t h = fnv1a64(find_block(messages, "transcript"));
  const double noise = static_cast<double>(mix64(h) % 3) - 1.0;
  double s = 8.0 - 0.75 * profile_penalty(facts);
  if (facts.levels[2] == 'h') s -= 1.0;  // energetic personas drift from the advisee role
  if (facts.levels[3] == 'h') s += 0.5;
  if (facts.subscale_means[2] >= 4.0) s += 0.5;
  if (facts.challenges[1]) s += 0.5;
  const int score = clamp_score(s + 0.5 * noise + offset);
  return score_json(score, score >= 8 ? "The dialogue behaviour matches the declared profile."
                                      : "Several replies drift away from the declared profile.");
}

std::string stub_questioner(std::span<const ChatMessage> messages) {
  const auto facts = read_profile(find_block(messages, "profile"));
  std::vector<std::string> q;
  if (facts.valid) {
    q.push_back("You are " + std::to_string(facts.age) + " years old and a " + facts.standing +
                " student. How did your studies progress to this point?");
    q.push_back("Your MBTI type is " + facts.mbti +
                ". How does that fit with the way you described your extraversion?");
    q.push_back("You study " + facts.major +
                ". Which of your reported academic challenges affects this major most?");
  } else {
    q.push_back("Which part of your profile describes you least accurately?");
  }
  return nlohmann::json{{"questions", q}}.dump();
}

std::string stub_student(std::span<const ChatMessage> messages) {
  static const std::array<const char*, 6> kOpeners = {
      "Honestly, ", "I guess ", "To be fair, ", "Well, ", "Hmm, ", "I think "};
  static const std::array<const char*, 6> kBodies = {
      "that is something I struggle with more than I like to admit.",
      "I try to keep a plan, but it falls apart around exam weeks.",
      "my friends would say I overthink my coursework.",
      "I usually ask classmates before I ask a teacher.",
      "some weeks I feel on top of things and other weeks I am lost.",
      "I know what I should do, I just do not always do it."};
  const std::uint64_t h = mix64(hash_messages(messages));
  const auto facts = read_profile(find_block(messages, "profile"));
  std::string reply = std::string(kOpeners[h % kOpeners.size()]) + kBodies[(h >> 8) % kBodies.size()];
  if (facts.valid && (h >> 16) % 2 == 0) {
    reply += " Studying " + facts.major + " as a " + facts.standing + " makes that harder.";
  }
  return reply;
}

std::string stub_dialogue(std::span<const ChatMessage> messages) {
  static const std::array<const char*, 10> kTopics = {
      "What does a typical study week look like for you?",
      "How do you usually prepare for an exam?",
      "Tell me about a recent assignment that went badly.",
      "Who do you turn to when a course gets difficult?",
      "How do you feel when a deadline is approaching?",
      "What keeps you going when a subject is boring?",
      "How do you decide what to study first?",
      "What would you change about how you learn?",
      "How do group projects usually go for you?",
      "What are your plans after graduation?"};
  std::size_t asked = 0;
  for (const auto& m : messages) asked += m.role == Role::kAssistant;
  const std::uint64_t h = mix64(fnv1a64(messages.front().content));
  return kTopics[(asked + h) % kTopics.size()];
}

void add_hashed(Eigen::VectorXd& v, std::string_view feature, double weight) {
  const std::uint64_t h = mix64(fnv1a64(feature));
  const auto dim = static_cast<std::uint64_t>(v.size());
  v[static_cast<Eigen::Index>(h % dim)] += ((h >> 63) ? -1.0 : 1.0) * weight;
}

}  // namespace

StubBackend::StubBackend(StubOptions options) : options_(std::move(options)) {
  if (options_.embedding_dim == 0) throw ConfigError("stub: embedding_dim must be positive");
}

void StubBackend::set_responder(const std::string& tag, Responder responder) {
  overrides_[tag] = std::move(responder);
}

std::string StubBackend::respond(std::span<const ChatMessage> messages, const GenConfig& config) {
  const std::string tag = find_role_tag(messages);
  if (auto it = overrides_.find(tag); it != overrides_.end()) return it->second(messages, config);
  const auto& last = messages.back().content;
  if (auto it = options_.canned.find(last); it != options_.canned.end()) return it->second;
  if (tag == role_tags::kQuestioner) return stub_questioner(messages);
  if (tag == role_tags::kStudent) return stub_student(messages);
  if (tag == role_tags::kDialogue) return stub_dialogue(messages);
  if (tag == role_tags::kProfileScorer) return stub_profile_scorer(messages, options_.score_offset);
  if (tag == role_tags::kBehaviorScorer) return stub_behavior_scorer(messages, options_.score_offset);
  std::ostringstream out;
  out << "stub reply " << std::hex << hash_messages(messages);
  return out.str();
}

ChatResult StubBackend::chat(std::span<const ChatMessage> messages, const GenConfig& config) {
  ChatResult r;
  r.text = respond(messages, config);
  for (const auto& m : messages) r.prompt_tokens += approx_token_count(m.content);
  r.completion_tokens = approx_token_count(r.text);
  return r;
}

EmbeddingVector StubBackend::embed(const std::string& text) {
  // Signed feature hashing: every non-blank line is one feature, unigrams and
  // bigrams add a lighter lexical layer, and a small component is seeded by
  // the whole text. Line features keep templated texts that share most of
  // their words apart.
  EmbeddingVector v = EmbeddingVector::Zero(static_cast<Eigen::Index>(options_.embedding_dim));
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) add_hashed(v, line, 1.0);
  }
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  const double w = options_.token_weight;
  for (std::size_t i = 0; w > 0.0 && i < tokens.size(); ++i) {
    add_hashed(v, tokens[i], w);
    if (i + 1 < tokens.size()) add_hashed(v, tokens[i] + " " + tokens[i + 1], 0.5 * w);
  }
  const double scale = options_.text_hash_weight * std::sqrt(static_cast<double>(tokens.size() + 1));
  std::uint64_t state = fnv1a64(text);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    state = mix64(state);
    const double u = static_cast<double>(state >> 11) * 0x1.0p-53;  // [0, 1)
    v[i] += scale * (2.0 * u - 1.0);
  }
  return v;
}

}  // namespace studentsim
