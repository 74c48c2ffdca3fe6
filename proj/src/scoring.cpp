#include "studentsim/scoring.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "studentsim/errors.hpp"
#include "studentsim/hashing.hpp"

namespace studentsim {

namespace {

constexpr const char* kProfileScorerPrompt =
    "You are a Profile Scorer for simulated students in academic advising.\n"
    "You receive a student profile, the conflict points a questioning agent raised, and the\n"
    "student agent's responses. Judge how internally coherent the profile is.\n"
    "Check every pair of fields for contradictions: age against academic standing, MBTI type\n"
    "against the Big Five levels and descriptions, Big Five descriptions against the yes/no\n"
    "challenge answers, and the Likert questionnaire against the challenges. A fluent\n"
    "explanation does not remove a contradiction that is present in the profile itself.\n"
    "Score 10 when the profile holds together completely and 1 when it is incoherent.\n";

constexpr const char* kBehaviorScorerPrompt =
    "You are a Behavior Scorer for simulated students in academic advising.\n"
    "You receive a student profile and a multi-turn conversation between a dialogue agent\n"
    "and the student agent. Judge whether the student's behaviour in the conversation is\n"
    "consistent with every declared attribute: personality, learning traits, challenges,\n"
    "motivation and emotional state. Penalise replies that are more competent, more\n"
    "positive or more organised than the profile allows, and replies that leave the role\n"
    "of a student seeking advice. Ground each judgement in specific profile fields.\n"
    "Score 10 for fully consistent behaviour and 1 for behaviour unrelated to the profile.\n";

constexpr const char* kScoreSchema =
    "Reply with a single JSON object and nothing else:\n"
    "{\"score\": <integer from 1 to 10>, \"explanation\": \"<short justification>\"}\n";

constexpr const char* kQuestionerPrompt =
    "You are a Questioning Agent. Read the student profile and list the points where its\n"
    "fields may contradict each other or are ambiguous. Phrase each point as a question\n"
    "addressed to the student that names the profile fields involved.\n"
    "Reply with a single JSON object: {\"questions\": [\"...\", \"...\"]}\n";

constexpr const char* kDialoguePrompt =
    "You are a Dialogue Agent talking with a university student. Use varied open-ended\n"
    "topics about studying, courses, plans and feelings that subtly encourage the student\n"
    "to reveal their personality, learning traits and learning strategies. Ask exactly one\n"
    "question per turn and never mention that you are evaluating them.\n";

constexpr const char* kStudentPromptHead =
    "You are role-playing the university student described below in an academic advising\n"
    "setting. Stay in character at all times, answer as this student would, including their\n"
    "difficulties, doubts and emotional state, and never claim to be an AI.\n";

constexpr const char* kInstructionVersion = "v1";

std::size_t find_object_end(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  bool escape = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (escape) {
        escape = false;
      } else if (c == '\\') {
        escape = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) return i;
    }
  }
  return std::string_view::npos;
}

/// Calls `visit` on every parseable JSON object in `raw`, outermost first,
/// until it returns true.
template <typename Visit>
bool scan_json_objects(std::string_view raw, Visit&& visit) {
  for (std::size_t open = raw.find('{'); open != std::string_view::npos;
       open = raw.find('{', open + 1)) {
    const std::size_t close = find_object_end(raw, open);
    if (close == std::string_view::npos) continue;
    nlohmann::json j = nlohmann::json::parse(raw.substr(open, close - open + 1), nullptr, false);
    if (j.is_discarded() || !j.is_object()) continue;
    if (visit(j)) return true;
  }
  return false;
}

std::string render_probe(const QuestionSet& q, const ResponseSet& r) {
  std::ostringstream out;
  for (std::size_t i = 0; i < q.questions.size(); ++i) {
    out << "Q" << (i + 1) << ": " << q.questions[i] << "\n";
    out << "A" << (i + 1) << ": " << r.answers[i] << "\n";
  }
  return out.str();
}

std::string render_transcript(const Transcript& t) {
  std::ostringstream out;
  for (const auto& turn : t.turns) out << turn.speaker << ": " << turn.text << "\n";
  return out.str();
}

}  // namespace

std::string to_string(ScoreKind k) { return k == ScoreKind::kProfile ? "profile" : "behavior"; }

std::string to_string(ScorePhase p) {
  switch (p) {
    case ScorePhase::kInitial: return "initial";
    case ScorePhase::kPropagated: return "propagated";
    case ScorePhase::kExpert: return "expert";
  }
  return "initial";
}

std::string to_string(TranscriptPurpose p) {
  switch (p) {
    case TranscriptPurpose::kProbe: return "probe";
    case TranscriptPurpose::kBehavior: return "behavior";
    case TranscriptPurpose::kExpertSession: return "expert_session";
  }
  return "probe";
}

ScoreKind score_kind_from_string(const std::string& s) {
  if (s == "profile") return ScoreKind::kProfile;
  if (s == "behavior") return ScoreKind::kBehavior;
  throw ParseError("unknown score kind '" + s + "'");
}

ScorePhase score_phase_from_string(const std::string& s) {
  if (s == "initial") return ScorePhase::kInitial;
  if (s == "propagated") return ScorePhase::kPropagated;
  if (s == "expert") return ScorePhase::kExpert;
  throw ParseError("unknown score phase '" + s + "'");
}

TranscriptPurpose purpose_from_string(const std::string& s) {
  if (s == "probe") return TranscriptPurpose::kProbe;
  if (s == "behavior") return TranscriptPurpose::kBehavior;
  if (s == "expert_session") return TranscriptPurpose::kExpertSession;
  throw ParseError("unknown transcript purpose '" + s + "'");
}

std::string ScoringInstruction::hash() const {
  return short_hash(to_string(kind) + "\n" + version + "\n" + prompt + "\n" + output_schema);
}

ScoringInstruction default_instruction(ScoreKind kind) {
  return {kind, kind == ScoreKind::kProfile ? kProfileScorerPrompt : kBehaviorScorerPrompt,
          kScoreSchema, kInstructionVersion};
}

std::size_t Transcript::exchanges() const {
  std::size_t n = 0;
  for (const auto& t : turns) n += t.speaker == "student";
  return n;
}

void to_json(nlohmann::json& j, const Transcript& t) {
  auto turns = nlohmann::json::array();
  for (const auto& turn : t.turns) turns.push_back({{"speaker", turn.speaker}, {"text", turn.text}});
  j = nlohmann::json{{"profile_id", t.profile_id},
                     {"purpose", to_string(t.purpose)},
                     {"repetition", t.repetition},
                     {"complete", t.complete},
                     {"turn_count", t.exchanges()},
                     {"turns", turns}};
}

void from_json(const nlohmann::json& j, Transcript& t) {
  t.profile_id = j.at("profile_id").get<std::string>();
  t.purpose = purpose_from_string(j.at("purpose").get<std::string>());
  t.repetition = j.value("repetition", 0);
  t.complete = j.value("complete", true);
  t.turns.clear();
  for (const auto& turn : j.at("turns")) {
    t.turns.push_back({turn.at("speaker").get<std::string>(), turn.at("text").get<std::string>()});
  }
}

void to_json(nlohmann::json& j, const ScoreRecord& r) {
  j = nlohmann::json{{"profile_id", r.profile_id},
                     {"kind", to_string(r.kind)},
                     {"phase", to_string(r.phase)},
                     {"value", r.value},
                     {"explanation", r.explanation},
                     {"scorer", r.scorer},
                     {"timestamp", r.timestamp},
                     {"repetition", r.repetition}};
  if (r.original) j["original"] = *r.original;
}

void from_json(const nlohmann::json& j, ScoreRecord& r) {
  r.profile_id = j.at("profile_id").get<std::string>();
  r.kind = score_kind_from_string(j.at("kind").get<std::string>());
  r.phase = score_phase_from_string(j.at("phase").get<std::string>());
  r.value = j.at("value").get<double>();
  r.explanation = j.at("explanation").get<std::string>();
  r.scorer = j.value("scorer", "");
  r.timestamp = j.value("timestamp", "");
  r.repetition = j.value("repetition", 0);
  if (j.contains("original")) {
    r.original = j["original"].get<double>();
  } else {
    r.original.reset();
  }
}

ParsedScore parse_scorer_output(std::string_view raw) {
  std::optional<ParsedScore> found;
  std::string problem;
  scan_json_objects(raw, [&](const nlohmann::json& j) {
    if (!j.contains("score") || !j.contains("explanation")) return false;
    const auto& s = j["score"];
    const auto& e = j["explanation"];
    if (!e.is_string() || e.get<std::string>().empty()) {
      problem = "explanation must be a non-empty string";
      return true;
    }
    if (!s.is_number()) {
      problem = "score must be a number";
      return true;
    }
    const double v = s.get<double>();
    if (v != std::floor(v)) {
      problem = "score must be an integer";
      return true;
    }
    if (v < 1 || v > 10) {
      problem = "score " + s.dump() + " outside [1, 10]";
      return true;
    }
    found = ParsedScore{static_cast<int>(v), e.get<std::string>()};
    return true;
  });
  if (found) return *found;
  if (!problem.empty()) throw ParseError("scorer output: " + problem);
  throw ParseError("scorer output: no JSON object with score and explanation");
}

std::vector<std::string> parse_question_output(std::string_view raw) {
  std::vector<std::string> out;
  const bool ok = scan_json_objects(raw, [&](const nlohmann::json& j) {
    if (!j.contains("questions") || !j["questions"].is_array()) return false;
    for (const auto& q : j["questions"]) {
      if (q.is_string() && !q.get<std::string>().empty()) out.push_back(q.get<std::string>());
    }
    return true;
  });
  if (!ok || out.empty()) throw ParseError("questioner output: no non-empty questions list");
  return out;
}

void to_json(nlohmann::json& j, const ScoringOptions& o) {
  j = nlohmann::json{{"gen", o.gen},
                     {"max_reasks", o.max_reasks},
                     {"n_turns", o.n_turns},
                     {"profile_repetitions", o.profile_repetitions},
                     {"behavior_repetitions", o.behavior_repetitions},
                     {"scorer_id", o.scorer_id}};
}

void from_json(const nlohmann::json& j, ScoringOptions& o) {
  if (j.contains("gen")) o.gen = j["gen"].get<GenConfig>();
  o.max_reasks = j.value("max_reasks", o.max_reasks);
  o.n_turns = j.value("n_turns", o.n_turns);
  o.profile_repetitions = j.value("profile_repetitions", o.profile_repetitions);
  o.behavior_repetitions = j.value("behavior_repetitions", o.behavior_repetitions);
  o.scorer_id = j.value("scorer_id", o.scorer_id);
}

ScoringProtocol::ScoringProtocol(Gateway& gateway, ScoringOptions options,
                                 const AttributeCatalog& catalog, TimestampFn timestamp)
    : gateway_(gateway),
      options_(std::move(options)),
      catalog_(catalog),
      timestamp_(std::move(timestamp)),
      profile_instruction_(default_instruction(ScoreKind::kProfile)),
      behavior_instruction_(default_instruction(ScoreKind::kBehavior)) {
  if (options_.max_reasks < 0) throw ConfigError("scoring: max_reasks must be >= 0");
  if (options_.n_turns < 1) throw ConfigError("scoring: n_turns must be >= 1");
  if (options_.profile_repetitions < 1 || options_.behavior_repetitions < 1) {
    throw ConfigError("scoring: repetitions must be >= 1");
  }
}

std::string ScoringProtocol::now() const { return timestamp_ ? timestamp_() : std::string(); }

std::string ScoringProtocol::chat_with_reasks(std::vector<ChatMessage> messages,
                                              const std::function<void(const std::string&)>& check,
                                              const std::string& what) {
  std::string last_problem;
  for (int attempt = 0; attempt <= options_.max_reasks; ++attempt) {
    std::string reply;
    try {
      reply = gateway_.chat(messages, options_.gen);
    } catch (const BackendError& e) {
      throw ScoringError(what + ": backend failure: " + e.what());
    }
    try {
      check(reply);
      return reply;
    } catch (const ParseError& e) {
      last_problem = e.what();
    }
    messages.push_back({Role::kAssistant, reply.empty() ? std::string("(empty)") : reply});
    messages.push_back({Role::kUser,
                        "Your previous reply could not be parsed (" + last_problem +
                            "). Reply again with only the requested JSON object."});
  }
  throw ScoringError(what + ": unparseable output after " +
                     std::to_string(options_.max_reasks + 1) + " attempts: " + last_problem);
}

QuestionSet ScoringProtocol::generate_questions(const StudentProfile& profile, int repetition) {
  const auto text = render_profile(profile, kRenderingV1, catalog_).text;
  std::vector<ChatMessage> messages = {
      {Role::kSystem, role_tag_marker(role_tags::kQuestioner) + "\n" + kQuestionerPrompt},
      {Role::kUser, "Probing session " + std::to_string(repetition + 1) + ".\n<profile>\n" +
                        text + "</profile>"}};
  std::vector<std::string> questions;
  chat_with_reasks(
      std::move(messages), [&](const std::string& raw) { questions = parse_question_output(raw); },
      "questioner");
  return {profile.id, std::move(questions)};
}

std::string ScoringProtocol::student_system_prompt(const StudentProfile& profile,
                                                   int repetition) const {
  return role_tag_marker(role_tags::kStudent) + "\n" + kStudentPromptHead + "Session " +
         std::to_string(repetition + 1) + ".\n<profile>\n" +
         render_profile(profile, kRenderingV1, catalog_).text + "</profile>";
}

ResponseSet ScoringProtocol::collect_defenses(const StudentProfile& profile,
                                              const QuestionSet& questions, int repetition) {
  if (questions.questions.empty()) throw InputError("collect_defenses: no questions");
  last_probe_ = Transcript{profile.id, TranscriptPurpose::kProbe, repetition, {}, false};
  std::vector<ChatMessage> messages = {{Role::kSystem, student_system_prompt(profile, repetition)}};
  ResponseSet out{profile.id, {}};
  for (const auto& q : questions.questions) {
    messages.push_back({Role::kUser, q});
    last_probe_.turns.push_back({"questioner", q});
    std::string answer;
    try {
      answer = gateway_.chat(messages, options_.gen);
    } catch (const BackendError& e) {
      throw ScoringError(std::string("student agent: backend failure: ") + e.what());
    }
    if (answer.empty()) answer = "(no answer)";
    messages.push_back({Role::kAssistant, answer});
    last_probe_.turns.push_back({"student", answer});
    out.answers.push_back(std::move(answer));
  }
  last_probe_.complete = true;
  return out;
}

ScoreRecord ScoringProtocol::score_profile(const StudentProfile& profile,
                                           const QuestionSet& questions,
                                           const ResponseSet& responses,
                                           const ScoringInstruction& instruction, int repetition) {
  if (instruction.kind != ScoreKind::kProfile) {
    throw InputError("score_profile: instruction is not a profile instruction");
  }
  if (responses.answers.size() != questions.questions.size()) {
    throw InputError("score_profile: responses are not aligned with questions");
  }
  const std::vector<ChatMessage> messages = {
      {Role::kSystem, role_tag_marker(role_tags::kProfileScorer) + "\n" + instruction.prompt +
                          instruction.output_schema},
      {Role::kUser, "Agent id: " + profile.id + "\n<profile>\n" +
                        render_profile(profile, kRenderingV1, catalog_).text + "</profile>\n<probe>\n" +
                        render_probe(questions, responses) + "</probe>"}};
  ParsedScore parsed;
  chat_with_reasks(messages, [&](const std::string& raw) { parsed = parse_scorer_output(raw); },
                   "profile scorer");
  return {profile.id,         ScoreKind::kProfile, ScorePhase::kInitial, static_cast<double>(parsed.value),
          parsed.explanation, options_.scorer_id,  now(),                repetition,
          std::nullopt};
}

Transcript ScoringProtocol::run_behavior_dialogue(const StudentProfile& profile, int n_turns,
                                                  int repetition) {
  if (n_turns < 1) throw InputError("run_behavior_dialogue: n_turns must be >= 1");
  last_behavior_ = Transcript{profile.id, TranscriptPurpose::kBehavior, repetition, {}, false};
  std::vector<ChatMessage> agent = {
      {Role::kSystem, role_tag_marker(role_tags::kDialogue) + "\n" + kDialoguePrompt +
                          "Conversation " + std::to_string(repetition + 1) + "."},
      {Role::kUser, "Start the conversation with the student."}};
  std::vector<ChatMessage> student = {{Role::kSystem, student_system_prompt(profile, repetition)}};
  try {
    for (int turn = 0; turn < n_turns; ++turn) {
      std::string question = gateway_.chat(agent, options_.gen);
      if (question.empty()) question = "(silence)";
      agent.push_back({Role::kAssistant, question});
      student.push_back({Role::kUser, question});
      last_behavior_.turns.push_back({"dialogue_agent", question});

      std::string reply = gateway_.chat(student, options_.gen);
      if (reply.empty()) reply = "(silence)";
      student.push_back({Role::kAssistant, reply});
      agent.push_back({Role::kUser, reply});
      last_behavior_.turns.push_back({"student", reply});
    }
  } catch (const BackendError& e) {
    throw ScoringError(std::string("behaviour dialogue: backend failure: ") + e.what());
  }
  last_behavior_.complete = true;
  return last_behavior_;
}

ScoreRecord ScoringProtocol::score_behavior(const StudentProfile& profile,
                                            const Transcript& transcript,
                                            const ScoringInstruction& instruction, int repetition) {
  if (instruction.kind != ScoreKind::kBehavior) {
    throw InputError("score_behavior: instruction is not a behaviour instruction");
  }
  if (transcript.purpose != TranscriptPurpose::kBehavior) {
    throw InputError("score_behavior: transcript purpose must be behavior");
  }
  const std::vector<ChatMessage> messages = {
      {Role::kSystem, role_tag_marker(role_tags::kBehaviorScorer) + "\n" + instruction.prompt +
                          instruction.output_schema},
      {Role::kUser, "Agent id: " + profile.id + "\n<profile>\n" +
                        render_profile(profile, kRenderingV1, catalog_).text +
                        "</profile>\n<transcript>\n" + render_transcript(transcript) +
                        "</transcript>"}};
  ParsedScore parsed;
  chat_with_reasks(messages, [&](const std::string& raw) { parsed = parse_scorer_output(raw); },
                   "behaviour scorer");
  return {profile.id,         ScoreKind::kBehavior, ScorePhase::kInitial, static_cast<double>(parsed.value),
          parsed.explanation, options_.scorer_id,   now(),                repetition,
          std::nullopt};
}

ProfileScoringOutcome ScoringProtocol::score_all_rounds(const StudentProfile& profile) {
  ProfileScoringOutcome out;
  out.profile_id = profile.id;
  try {
    for (int r = 0; r < options_.profile_repetitions; ++r) {
      ++out.dialogues;
      const auto questions = generate_questions(profile, r);
      ResponseSet responses;
      try {
        responses = collect_defenses(profile, questions, r);
      } catch (const ScoringError&) {
        out.transcripts.push_back(last_probe_);
        throw;
      }
      out.transcripts.push_back(last_probe_);
      out.records.push_back(score_profile(profile, questions, responses, profile_instruction_, r));
    }
    for (int r = 0; r < options_.behavior_repetitions; ++r) {
      ++out.dialogues;
      Transcript t;
      try {
        t = run_behavior_dialogue(profile, options_.n_turns, r);
      } catch (const ScoringError&) {
        out.transcripts.push_back(last_behavior_);
        throw;
      }
      out.transcripts.push_back(t);
      out.records.push_back(score_behavior(profile, t, behavior_instruction_, r));
    }
  } catch (const ScoringError& e) {
    out.error = e.what();
  } catch (const InputError& e) {
    out.error = e.what();
  }
  return out;
}

std::vector<AggregatedScore> aggregate_initial(const std::vector<ScoreRecord>& records) {
  struct Acc {
    double sum[2] = {0, 0};
    int n[2] = {0, 0};
  };
  std::vector<std::string> order;
  std::map<std::string, Acc> acc;
  for (const auto& r : records) {
    if (r.phase != ScorePhase::kInitial) continue;
    auto [it, inserted] = acc.try_emplace(r.profile_id);
    if (inserted) order.push_back(r.profile_id);
    const int k = r.kind == ScoreKind::kProfile ? 0 : 1;
    it->second.sum[k] += r.value;
    ++it->second.n[k];
  }
  std::vector<AggregatedScore> out;
  for (const auto& id : order) {
    const auto& a = acc.at(id);
    if (a.n[0] == 0 || a.n[1] == 0) continue;  // needs both kinds
    out.push_back({id, a.sum[0] / a.n[0], a.sum[1] / a.n[1]});
  }
  return out;
}

}  // namespace studentsim
