#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

namespace studentsim {

enum class Role { kSystem, kUser, kAssistant };

std::string to_string(Role role);
Role role_from_string(const std::string& s);

struct ChatMessage {
  Role role = Role::kUser;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

/// Throws InputError unless: non-empty, every content non-empty, system
/// messages only lead, and user/assistant alternate afterwards starting with user.
void validate_messages(std::span<const ChatMessage> messages);

struct GenConfig {
  std::string model = "gpt-4o";
  /// Decoding knobs passed through verbatim (temperature, top_p, ...).
  nlohmann::json options = nlohmann::json::object();
  std::chrono::milliseconds timeout{60000};
  int max_retries = 2;

  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

/// Raw encoder output, before unit normalization.
using EmbeddingVector = Eigen::VectorXd;

struct ChatResult {
  std::string text;
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual ChatResult chat(std::span<const ChatMessage> messages, const GenConfig& config) = 0;
  virtual EmbeddingVector embed(const std::string& text) = 0;
  virtual std::string name() const = 0;
};

// --- deterministic stub -----------------------------------------------------

/// Role tags the stub recognises inside the leading system prompt, written
/// as "[[role:<tag>]]".
namespace role_tags {
inline constexpr const char* kQuestioner = "questioner";
inline constexpr const char* kStudent = "student";
inline constexpr const char* kDialogue = "dialogue";
inline constexpr const char* kProfileScorer = "scorer:profile";
inline constexpr const char* kBehaviorScorer = "scorer:behavior";
}  // namespace role_tags

std::string role_tag_marker(const std::string& tag);
/// Extracts the tag from the first system message, or "" when absent.
std::string find_role_tag(std::span<const ChatMessage> messages);

using Responder = std::function<std::string(std::span<const ChatMessage>, const GenConfig&)>;

struct StubOptions {
  std::size_t embedding_dim = 256;
  /// Exact last-user-message text -> reply. Checked before role responders.
  std::map<std::string, std::string> canned;
  /// Shifts every stub scorer score by this amount before clamping to [1, 10].
  double score_offset = 0.0;
  /// Weight of the whole-text hash component in stub embeddings; keeps
  /// distinct texts apart even when their token multisets agree.
  double text_hash_weight = 0.05;
  /// Weight of unigram/bigram features relative to whole-line features.
  double token_weight = 0.5;
};

/// Referentially transparent backend: every output is a pure function of its
/// inputs. Scripted responders keyed by role tag emit schema-valid JSON.
class StubBackend final : public Backend {
 public:
  explicit StubBackend(StubOptions options = {});

  ChatResult chat(std::span<const ChatMessage> messages, const GenConfig& config) override;
  EmbeddingVector embed(const std::string& text) override;
  std::string name() const override { return "stub"; }

  /// Overrides the built-in responder for `tag` (tests use this for faults).
  void set_responder(const std::string& tag, Responder responder);

  const StubOptions& options() const { return options_; }

 private:
  std::string respond(std::span<const ChatMessage> messages, const GenConfig& config);

  StubOptions options_;
  std::map<std::string, Responder> overrides_;
};

// --- chat-completions HTTP backend -------------------------------------------

struct HttpBackendOptions {
  std::string base_url = "https://api.openai.com/v1";
  std::string api_key;
  std::string embedding_model = "bge-m3";
  std::chrono::milliseconds timeout{60000};
  int max_retries = 2;
  std::chrono::milliseconds retry_backoff{250};
};

/// Speaks the de-facto chat-completions / embeddings JSON protocol:
/// POST {base}/chat/completions and POST {base}/embeddings.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpBackendOptions options);

  ChatResult chat(std::span<const ChatMessage> messages, const GenConfig& config) override;
  EmbeddingVector embed(const std::string& text) override;
  std::string name() const override { return "http"; }

  /// Attempts made by the most recent call (for retry accounting).
  int last_attempts() const { return last_attempts_.load(); }

 private:
  nlohmann::json post(const std::string& path, const nlohmann::json& body,
                      std::chrono::milliseconds timeout, int max_retries);

  HttpBackendOptions options_;
  std::string scheme_host_port_;
  std::string path_prefix_;
  std::atomic<int> last_attempts_{0};
};

// --- gateway -----------------------------------------------------------------

struct Usage {
  std::size_t chat_calls = 0;
  std::size_t embed_calls = 0;
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
};

/// Shareable front door: validates messages, bounds in-flight calls and
/// accounts tokens.
class Gateway {
 public:
  explicit Gateway(std::shared_ptr<Backend> backend, std::size_t parallelism = 4);

  std::string chat(std::span<const ChatMessage> messages, const GenConfig& config);
  EmbeddingVector embed(const std::string& text);

  Usage usage() const;
  std::size_t parallelism() const { return parallelism_; }
  Backend& backend() { return *backend_; }
  const Backend& backend() const { return *backend_; }

 private:
  class Admission;

  void acquire();
  void release();

  std::shared_ptr<Backend> backend_;
  std::size_t parallelism_;
  std::size_t in_flight_ = 0;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  Usage usage_;
};

/// Backend selection as stored in RunConfig: {"kind": "stub"|"http", ...}.
struct BackendSpec {
  std::string kind = "stub";
  StubOptions stub;
  HttpBackendOptions http;
  std::size_t parallelism = 4;
};

void to_json(nlohmann::json& j, const BackendSpec& s);
void from_json(const nlohmann::json& j, BackendSpec& s);

/// Reads the API key from the environment variable named by `api_key_env`
/// (default STUDENTSIM_API_KEY) when the spec does not carry one.
std::shared_ptr<Backend> make_backend(const BackendSpec& spec);

/// Whitespace token count; the stub's stand-in for tokenizer usage.
std::size_t approx_token_count(const std::string& text);

}  // namespace studentsim
