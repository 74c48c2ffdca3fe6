#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "studentsim/eval_metrics.hpp"
#include "studentsim/pipeline.hpp"
#include "studentsim/scoring.hpp"

namespace httplib {
class Server;
}

namespace studentsim {

enum class SessionStatus { kOpen, kRated, kClosed };
std::string to_string(SessionStatus s);
SessionStatus session_status_from_string(const std::string& s);

struct Session {
  std::string id;
  std::string candidate_id;
  std::string expert_id;
  SessionStatus status = SessionStatus::kOpen;
  Transcript transcript;  // purpose expert_session; expert / student turns
  std::string started;
  std::string ended;

  /// Completed (expert message, agent reply) exchanges.
  std::size_t expert_turns() const;
};

void to_json(nlohmann::json& j, const Session& s);
void from_json(const nlohmann::json& j, Session& s);

struct RatingRecord {
  std::string session_id;
  std::string agent_id;
  std::string annotator_id;
  int score = 0;            // 1-100 conformity
  double normalized = 0.0;  // score / divisor
  std::string justification;
  /// Item -> agreement with the automated scorer, 1 (strongly disagree) to 5.
  std::map<std::string, int> agreements;
  std::string timestamp;
};

void to_json(nlohmann::json& j, const RatingRecord& r);
void from_json(const nlohmann::json& j, RatingRecord& r);

struct AnnotationDump {
  std::vector<Session> sessions;
  std::vector<RatingRecord> ratings;
  ScoreMap expert_mean;  // 1-10 scale
  std::size_t total_turns = 0;
};

void to_json(nlohmann::json& j, const AnnotationDump& d);
void from_json(const nlohmann::json& j, AnnotationDump& d);

/// Expert-phase ScoreRecords (one per rating) for the pipeline's gold input.
std::vector<ScoreRecord> to_score_records(const AnnotationDump& dump);

struct AnnotationOptions {
  std::size_t min_turns = 15;
  double normalization_divisor = 10.0;
  /// Append-only event log; empty keeps everything in memory.
  std::filesystem::path log_path;
  GenConfig gen;
};

/// Expert interactive test: sessions with candidate agents, conformity
/// ratings and exports. Turns within a session are serialized; different
/// sessions proceed concurrently.
class AnnotationService {
 public:
  AnnotationService(Gateway& gateway, std::vector<StudentProfile> profiles, CandidateSet candidates,
                    AnnotationOptions options = {}, const AttributeCatalog& catalog = default_catalog(),
                    TimestampFn timestamp = nullptr);
  ~AnnotationService();

  /// NotFoundError for an unknown agent, PolicyError for a non-candidate.
  Session create_session(const std::string& candidate_id, const std::string& expert_id);
  /// Appends the expert message and the agent's reply together. StateError
  /// unless open; a backend failure records nothing and propagates.
  std::string post_turn(const std::string& session_id, const std::string& message);
  /// PolicyError below the minimum turn count; InputError for a score
  /// outside [1, 100], an empty justification or an agreement outside [1, 5].
  RatingRecord submit_rating(const std::string& session_id, int score,
                             const std::string& justification,
                             const std::map<std::string, int>& agreements = {},
                             const std::string& annotator_id = "");
  /// Open or rated -> closed. Closed sessions accept nothing.
  Session close_session(const std::string& session_id);

  Session get_session(const std::string& session_id) const;
  std::vector<Session> list_sessions() const;
  AnnotationDump export_annotations() const;

  const CandidateSet& candidates() const { return candidates_; }
  const StudentProfile& profile(const std::string& id) const;
  bool has_profile(const std::string& id) const;
  const std::vector<StudentProfile>& profiles() const { return profiles_; }
  const AnnotationOptions& options() const { return options_; }
  Gateway& gateway() { return gateway_; }

 private:
  struct Entry {
    Session session;
    std::optional<RatingRecord> rating;
    std::mutex turn_mu;
  };

  std::shared_ptr<Entry> find(const std::string& session_id) const;
  void persist(const nlohmann::json& event);
  void replay();
  std::string now() const;

  Gateway& gateway_;
  std::vector<StudentProfile> profiles_;
  std::map<std::string, std::size_t> index_;
  CandidateSet candidates_;
  AnnotationOptions options_;
  const AttributeCatalog& catalog_;
  TimestampFn timestamp_;
  std::unique_ptr<ScoringProtocol> persona_;

  mutable std::mutex mu_;  // guards sessions_ and the Entry payloads
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::size_t next_session_ = 1;
  std::mutex log_mu_;
};

/// Scripted annotators for stub runs: each expert holds a `min_turns`
/// advising session with every candidate and rates it from the automated
/// behaviour scorer's verdict on that session plus per-expert jitter.
void simulate_expert_ratings(AnnotationService& service, int n_experts, std::uint64_t seed);

// --- HTTP ------------------------------------------------------------------------------

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: pick a free port
  std::string token;
  /// Run directory whose score artifacts GET /scores serves; may be empty.
  std::filesystem::path artifacts_dir;
};

/// REST front end. All routes except GET /health require
/// "Authorization: Bearer <token>".
class AnnotationServer {
 public:
  AnnotationServer(AnnotationService& service, ServerOptions options);
  ~AnnotationServer();

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void listen();
  void stop();
  int port() const { return port_; }

 private:
  void routes();

  AnnotationService& service_;
  ServerOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace studentsim
