#include "studentsim/annotation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "studentsim/errors.hpp"
#include "studentsim/hashing.hpp"
#include "studentsim/jsonl.hpp"

namespace studentsim {

using nlohmann::json;

std::string to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::kOpen: return "open";
    case SessionStatus::kRated: return "rated";
    case SessionStatus::kClosed: return "closed";
  }
  return "open";
}

SessionStatus session_status_from_string(const std::string& s) {
  if (s == "open") return SessionStatus::kOpen;
  if (s == "rated") return SessionStatus::kRated;
  if (s == "closed") return SessionStatus::kClosed;
  throw ParseError("unknown session status '" + s + "'");
}

std::size_t Session::expert_turns() const { return transcript.exchanges(); }

void to_json(json& j, const Session& s) {
  j = json{{"id", s.id},
           {"candidate_id", s.candidate_id},
           {"expert_id", s.expert_id},
           {"status", to_string(s.status)},
           {"expert_turns", s.expert_turns()},
           {"transcript", s.transcript},
           {"started", s.started},
           {"ended", s.ended}};
}

void from_json(const json& j, Session& s) {
  s.id = j.at("id").get<std::string>();
  s.candidate_id = j.at("candidate_id").get<std::string>();
  s.expert_id = j.at("expert_id").get<std::string>();
  s.status = session_status_from_string(j.at("status").get<std::string>());
  s.transcript = j.at("transcript").get<Transcript>();
  s.started = j.value("started", std::string());
  s.ended = j.value("ended", std::string());
}

void to_json(json& j, const RatingRecord& r) {
  j = json{{"session_id", r.session_id},
           {"agent_id", r.agent_id},
           {"annotator_id", r.annotator_id},
           {"score", r.score},
           {"normalized", r.normalized},
           {"justification", r.justification},
           {"agreements", r.agreements},
           {"timestamp", r.timestamp}};
}

void from_json(const json& j, RatingRecord& r) {
  r.session_id = j.at("session_id").get<std::string>();
  r.agent_id = j.at("agent_id").get<std::string>();
  r.annotator_id = j.at("annotator_id").get<std::string>();
  r.score = j.at("score").get<int>();
  r.normalized = j.at("normalized").get<double>();
  r.justification = j.at("justification").get<std::string>();
  r.agreements = j.value("agreements", std::map<std::string, int>{});
  r.timestamp = j.value("timestamp", std::string());
}

void to_json(json& j, const AnnotationDump& d) {
  j = json{{"sessions", d.sessions},
           {"ratings", d.ratings},
           {"expert_mean", d.expert_mean},
           {"total_turns", d.total_turns}};
}

void from_json(const json& j, AnnotationDump& d) {
  d.sessions = j.at("sessions").get<std::vector<Session>>();
  d.ratings = j.at("ratings").get<std::vector<RatingRecord>>();
  d.expert_mean = j.at("expert_mean").get<ScoreMap>();
  d.total_turns = j.value("total_turns", std::size_t{0});
}

std::vector<ScoreRecord> to_score_records(const AnnotationDump& dump) {
  std::vector<ScoreRecord> out;
  for (const auto& r : dump.ratings) {
    out.push_back({r.agent_id, ScoreKind::kProfile, ScorePhase::kExpert, r.normalized, r.justification,
                   r.annotator_id, r.timestamp, 0, static_cast<double>(r.score)});
  }
  return out;
}

// --- service ---------------------------------------------------------------------

AnnotationService::AnnotationService(Gateway& gateway, std::vector<StudentProfile> profiles,
                                     CandidateSet candidates, AnnotationOptions options,
                                     const AttributeCatalog& catalog, TimestampFn timestamp)
    : gateway_(gateway),
      profiles_(std::move(profiles)),
      candidates_(std::move(candidates)),
      options_(std::move(options)),
      catalog_(catalog),
      timestamp_(std::move(timestamp)) {
  if (options_.min_turns < 1) throw ConfigError("annotation: min_turns must be >= 1");
  if (!(options_.normalization_divisor > 0.0)) {
    throw ConfigError("annotation: normalization divisor must be positive");
  }
  for (std::size_t i = 0; i < profiles_.size(); ++i) index_[profiles_[i].id] = i;
  for (const auto& id : candidates_.ids) {
    if (!index_.count(id)) throw InputError("annotation: candidate " + id + " has no profile");
  }
  ScoringOptions so;
  so.gen = options_.gen;
  persona_ = std::make_unique<ScoringProtocol>(gateway_, so, catalog_);
  if (!options_.log_path.empty() && std::filesystem::exists(options_.log_path)) replay();
}

AnnotationService::~AnnotationService() = default;

std::string AnnotationService::now() const {
  if (timestamp_) return timestamp_();
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

bool AnnotationService::has_profile(const std::string& id) const { return index_.count(id) > 0; }

const StudentProfile& AnnotationService::profile(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw NotFoundError("unknown agent " + id);
  return profiles_[it->second];
}

std::shared_ptr<AnnotationService::Entry> AnnotationService::find(const std::string& session_id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session " + session_id);
  return it->second;
}

void AnnotationService::persist(const json& event) {
  if (options_.log_path.empty()) return;
  std::lock_guard<std::mutex> lock(log_mu_);
  append_line(options_.log_path, event);
}

void AnnotationService::replay() {
  std::ifstream in(options_.log_path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json e = json::parse(line);
      const std::string type = e.at("event").get<std::string>();
      if (type == "session") {
        auto entry = std::make_shared<Entry>();
        entry->session = e.at("session").get<Session>();
        sessions_[entry->session.id] = entry;
        const auto& id = entry->session.id;
        if (id.size() > 2) next_session_ = std::max(next_session_, std::stoul(id.substr(2)) + 1);
      } else if (type == "turn") {
        auto& s = sessions_.at(e.at("session_id").get<std::string>())->session;
        s.transcript.turns.push_back({"expert", e.at("expert").get<std::string>()});
        s.transcript.turns.push_back({"student", e.at("reply").get<std::string>()});
      } else if (type == "rating") {
        const auto r = e.at("rating").get<RatingRecord>();
        auto& entry = *sessions_.at(r.session_id);
        entry.rating = r;
        entry.session.status = SessionStatus::kRated;
        entry.session.ended = r.timestamp;
      } else if (type == "closed") {
        auto& s = sessions_.at(e.at("session_id").get<std::string>())->session;
        s.status = SessionStatus::kClosed;
        s.ended = e.value("ended", s.ended);
      } else {
        throw ParseError("unknown event '" + type + "'");
      }
    } catch (const std::exception& ex) {
      throw ParseError(options_.log_path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
}

Session AnnotationService::create_session(const std::string& candidate_id, const std::string& expert_id) {
  if (expert_id.empty()) throw InputError("expert_id must not be empty");
  if (!has_profile(candidate_id)) throw NotFoundError("unknown agent " + candidate_id);
  if (!candidates_.contains(candidate_id)) {
    throw PolicyError("agent " + candidate_id + " is not in the candidate set");
  }
  auto entry = std::make_shared<Entry>();
  {
    std::lock_guard<std::mutex> lock(mu_);
    std::ostringstream id;
    id << "s-" << std::setw(6) << std::setfill('0') << next_session_++;
    entry->session.id = id.str();
    entry->session.candidate_id = candidate_id;
    entry->session.expert_id = expert_id;
    entry->session.transcript = Transcript{candidate_id, TranscriptPurpose::kExpertSession, 0, {}, true};
    entry->session.started = now();
    sessions_[entry->session.id] = entry;
  }
  persist(json{{"event", "session"}, {"session", entry->session}});
  return entry->session;
}

std::string AnnotationService::post_turn(const std::string& session_id, const std::string& message) {
  if (message.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw InputError("expert message must not be empty");
  }
  auto entry = find(session_id);
  std::lock_guard<std::mutex> turn_lock(entry->turn_mu);
  Session snapshot;
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (entry->session.status != SessionStatus::kOpen) {
      throw StateError("session " + session_id + " is " + to_string(entry->session.status));
    }
    snapshot = entry->session;
  }
  const StudentProfile& p = profile(snapshot.candidate_id);
  std::vector<ChatMessage> messages = {{Role::kSystem, persona_->student_system_prompt(p, 0)}};
  for (const auto& t : snapshot.transcript.turns) {
    messages.push_back({t.speaker == "expert" ? Role::kUser : Role::kAssistant, t.text});
  }
  messages.push_back({Role::kUser, message});
  std::string reply = gateway_.chat(messages, options_.gen);  // throws: nothing recorded
  if (reply.empty()) reply = "(no answer)";
  {
    std::lock_guard<std::mutex> lock(mu_);
    entry->session.transcript.turns.push_back({"expert", message});
    entry->session.transcript.turns.push_back({"student", reply});
  }
  persist(json{{"event", "turn"}, {"session_id", session_id}, {"expert", message}, {"reply", reply}});
  return reply;
}

RatingRecord AnnotationService::submit_rating(const std::string& session_id, int score,
                                              const std::string& justification,
                                              const std::map<std::string, int>& agreements,
                                              const std::string& annotator_id) {
  if (score < 1 || score > 100) {
    throw InputError("conformity score must be an integer in [1, 100], got " + std::to_string(score));
  }
  if (justification.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw InputError("justification must not be empty");
  }
  for (const auto& [item, level] : agreements) {
    if (level < 1 || level > 5) throw InputError("agreement for '" + item + "' must lie in [1, 5]");
  }
  auto entry = find(session_id);
  std::lock_guard<std::mutex> turn_lock(entry->turn_mu);
  RatingRecord r;
  {
    std::lock_guard<std::mutex> lock(mu_);
    Session& s = entry->session;
    if (s.status != SessionStatus::kOpen) {
      throw StateError("session " + session_id + " is " + to_string(s.status));
    }
    if (s.expert_turns() < options_.min_turns) {
      throw PolicyError("session " + session_id + " has " + std::to_string(s.expert_turns()) +
                        " turns; rating requires at least " + std::to_string(options_.min_turns));
    }
    r.session_id = session_id;
    r.agent_id = s.candidate_id;
    r.annotator_id = annotator_id.empty() ? s.expert_id : annotator_id;
    r.score = score;
    r.normalized = static_cast<double>(score) / options_.normalization_divisor;
    r.justification = justification;
    r.agreements = agreements;
    r.timestamp = now();
    s.status = SessionStatus::kRated;
    s.ended = r.timestamp;
    entry->rating = r;
  }
  persist(json{{"event", "rating"}, {"rating", r}});
  return r;
}

Session AnnotationService::close_session(const std::string& session_id) {
  auto entry = find(session_id);
  std::lock_guard<std::mutex> turn_lock(entry->turn_mu);
  Session out;
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (entry->session.status == SessionStatus::kClosed) {
      throw StateError("session " + session_id + " is already closed");
    }
    entry->session.status = SessionStatus::kClosed;
    if (entry->session.ended.empty()) entry->session.ended = now();
    out = entry->session;
  }
  persist(json{{"event", "closed"}, {"session_id", session_id}, {"ended", out.ended}});
  return out;
}

Session AnnotationService::get_session(const std::string& session_id) const {
  auto entry = find(session_id);
  std::lock_guard<std::mutex> lock(mu_);
  return entry->session;
}

std::vector<Session> AnnotationService::list_sessions() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<Session> out;
  for (const auto& [_, e] : sessions_) out.push_back(e->session);
  return out;
}

AnnotationDump AnnotationService::export_annotations() const {
  AnnotationDump d;
  std::lock_guard<std::mutex> lock(mu_);
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& [_, e] : sessions_) {
    d.sessions.push_back(e->session);
    d.total_turns += e->session.expert_turns();
    if (e->rating) {
      d.ratings.push_back(*e->rating);
      auto& a = acc[e->rating->agent_id];
      a.first += e->rating->normalized;
      ++a.second;
    }
  }
  for (const auto& [id, a] : acc) d.expert_mean[id] = a.first / a.second;
  return d;
}

// --- scripted annotators ------------------------------------------------------------

namespace {

constexpr std::array<const char*, 16> kAdvisingPrompts = {
    "How are your courses going this semester?",
    "Which class do you find the most demanding right now, and why?",
    "How do you usually prepare for an exam?",
    "What do you do when an assignment deadline is close and you have not started?",
    "How do you plan your week?",
    "Tell me about a recent moment when you felt stressed about school.",
    "What keeps you motivated to keep studying?",
    "Do you ask classmates or teaching staff for help? How does that go?",
    "What would you like to achieve by the end of this year?",
    "How do you deal with distractions while studying?",
    "How confident do you feel about your major?",
    "What kind of support from an advisor would help you most?",
    "How do you react when a grade is lower than you hoped?",
    "How do you balance coursework with the rest of your life?",
    "Which study habit would you most like to change?",
    "What is one thing you are proud of from this term?",
};

}  // namespace

void simulate_expert_ratings(AnnotationService& service, int n_experts, std::uint64_t seed) {
  if (n_experts < 1) throw InputError("simulate_expert_ratings: n_experts must be >= 1");
  ScoringOptions so;
  so.gen = service.options().gen;
  so.scorer_id = "simulated-expert";
  ScoringProtocol scorer(service.gateway(), so);
  const ScoringInstruction instruction = default_instruction(ScoreKind::kBehavior);
  for (const auto& id : service.candidates().ids) {
    const std::uint64_t agent_hash = fnv1a64(id);
    for (int e = 0; e < n_experts; ++e) {
      const std::string expert = "expert-" + std::to_string(e + 1);
      const Session s = service.create_session(id, expert);
      const std::uint64_t h = mix64(seed ^ agent_hash ^ mix64(static_cast<std::uint64_t>(e) + 1));
      for (std::size_t t = 0; t < service.options().min_turns; ++t) {
        service.post_turn(s.id, kAdvisingPrompts[(h + t * 7) % kAdvisingPrompts.size()]);
      }
      Transcript transcript = service.get_session(s.id).transcript;
      transcript.purpose = TranscriptPurpose::kBehavior;  // scored like a behaviour dialogue
      const ScoreRecord verdict = scorer.score_behavior(service.profile(id), transcript, instruction, e);
      const int jitter = static_cast<int>(mix64(h) % 9) - 4;
      const int score = std::clamp(static_cast<int>(std::lround(verdict.value * 10.0)) + jitter, 1, 100);
      service.submit_rating(s.id, score, "Scripted rating: " + verdict.explanation,
                            {{"profile_score", 1 + static_cast<int>(mix64(h + 1) % 5)},
                             {"behavior_score", 1 + static_cast<int>(mix64(h + 2) % 5)}},
                            expert);
    }
  }
}

}  // namespace studentsim
