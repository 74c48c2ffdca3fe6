#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "studentsim/llm_gateway.hpp"
#include "studentsim/profile.hpp"

namespace studentsim {

enum class ScoreKind { kProfile, kBehavior };
enum class ScorePhase { kInitial, kPropagated, kExpert };
enum class TranscriptPurpose { kProbe, kBehavior, kExpertSession };

std::string to_string(ScoreKind k);
std::string to_string(ScorePhase p);
std::string to_string(TranscriptPurpose p);
ScoreKind score_kind_from_string(const std::string& s);
ScorePhase score_phase_from_string(const std::string& s);
TranscriptPurpose purpose_from_string(const std::string& s);

/// Scorer prompt. Immutable per run; referenced by hash in run metadata.
struct ScoringInstruction {
  ScoreKind kind = ScoreKind::kProfile;
  std::string prompt;
  std::string output_schema;
  std::string version;

  std::string hash() const;
};

ScoringInstruction default_instruction(ScoreKind kind);

struct QuestionSet {
  std::string profile_id;
  std::vector<std::string> questions;
};

struct ResponseSet {
  std::string profile_id;
  std::vector<std::string> answers;
};

struct Turn {
  std::string speaker;  // questioner, dialogue_agent, student, expert
  std::string text;

  bool operator==(const Turn&) const = default;
};

struct Transcript {
  std::string profile_id;
  TranscriptPurpose purpose = TranscriptPurpose::kBehavior;
  int repetition = 0;
  std::vector<Turn> turns;
  bool complete = true;

  /// Number of (prompting turn, student reply) pairs.
  std::size_t exchanges() const;

  bool operator==(const Transcript&) const = default;
};

void to_json(nlohmann::json& j, const Transcript& t);
void from_json(const nlohmann::json& j, Transcript& t);

struct ScoreRecord {
  std::string profile_id;
  ScoreKind kind = ScoreKind::kProfile;
  ScorePhase phase = ScorePhase::kInitial;
  double value = 0.0;
  std::string explanation;
  std::string scorer;
  std::string timestamp;
  int repetition = 0;
  /// Raw rating before normalization (expert phase only).
  std::optional<double> original;

  bool operator==(const ScoreRecord&) const = default;
};

void to_json(nlohmann::json& j, const ScoreRecord& r);
void from_json(const nlohmann::json& j, ScoreRecord& r);

struct ParsedScore {
  int value = 0;
  std::string explanation;
};

/// Finds the first JSON object carrying "score" and "explanation" anywhere in
/// `raw` (prose and code fences are skipped). Throws ParseError when there is
/// none, or when its score is not an integer in [1, 10].
ParsedScore parse_scorer_output(std::string_view raw);

/// Extracts {"questions": [...]} from questioner output. Throws ParseError.
std::vector<std::string> parse_question_output(std::string_view raw);

struct ScoringOptions {
  GenConfig gen;
  int max_reasks = 2;
  int n_turns = 15;
  int profile_repetitions = 2;
  int behavior_repetitions = 2;
  std::string scorer_id = "llm-scorer";
};

void to_json(nlohmann::json& j, const ScoringOptions& o);
void from_json(const nlohmann::json& j, ScoringOptions& o);

using TimestampFn = std::function<std::string()>;

/// Everything one profile produced in both rounds.
struct ProfileScoringOutcome {
  std::string profile_id;
  std::vector<Transcript> transcripts;
  std::vector<ScoreRecord> records;
  std::optional<std::string> error;  // set when the profile is excluded
  std::size_t dialogues = 0;
};

/// Two-round consistency scoring: conflict probing + profile scorer, then the
/// open-ended behaviour dialogue + behaviour scorer.
class ScoringProtocol {
 public:
  ScoringProtocol(Gateway& gateway, ScoringOptions options,
                  const AttributeCatalog& catalog = default_catalog(),
                  TimestampFn timestamp = nullptr);

  QuestionSet generate_questions(const StudentProfile& profile, int repetition = 0);
  ResponseSet collect_defenses(const StudentProfile& profile, const QuestionSet& questions,
                               int repetition = 0);
  ScoreRecord score_profile(const StudentProfile& profile, const QuestionSet& questions,
                            const ResponseSet& responses, const ScoringInstruction& instruction,
                            int repetition = 0);
  Transcript run_behavior_dialogue(const StudentProfile& profile, int n_turns = 15,
                                   int repetition = 0);
  ScoreRecord score_behavior(const StudentProfile& profile, const Transcript& transcript,
                             const ScoringInstruction& instruction, int repetition = 0);

  /// Runs every configured repetition of both rounds. Never throws for
  /// scoring failures; they are reported in the outcome.
  ProfileScoringOutcome score_all_rounds(const StudentProfile& profile);

  /// Transcript of the most recent collect_defenses call (probe purpose).
  const Transcript& last_probe_transcript() const { return last_probe_; }
  /// Partial transcript left behind by a failed behaviour dialogue.
  const Transcript& last_behavior_transcript() const { return last_behavior_; }

  const ScoringOptions& options() const { return options_; }

  std::string student_system_prompt(const StudentProfile& profile, int repetition) const;

 private:
  std::string chat_with_reasks(std::vector<ChatMessage> messages,
                               const std::function<void(const std::string&)>& check,
                               const std::string& what);
  std::string now() const;

  Gateway& gateway_;
  ScoringOptions options_;
  const AttributeCatalog& catalog_;
  TimestampFn timestamp_;
  ScoringInstruction profile_instruction_;
  ScoringInstruction behavior_instruction_;
  Transcript last_probe_;
  Transcript last_behavior_;
};

/// Arithmetic mean over repetitions, per (profile, kind), in first-seen order.
struct AggregatedScore {
  std::string profile_id;
  double profile = 0.0;
  double behavior = 0.0;
};
std::vector<AggregatedScore> aggregate_initial(const std::vector<ScoreRecord>& records);

}  // namespace studentsim
