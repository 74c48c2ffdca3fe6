#include "studentsim/llm_gateway.hpp"

#include <cstdlib>
#include <sstream>
#include <thread>

#include "studentsim/errors.hpp"

#include <httplib.h>

namespace studentsim {

std::string to_string(Role role) {
  switch (role) {
    case Role::kSystem: return "system";
    case Role::kUser: return "user";
    case Role::kAssistant: return "assistant";
  }
  return "user";
}

Role role_from_string(const std::string& s) {
  if (s == "system") return Role::kSystem;
  if (s == "user") return Role::kUser;
  if (s == "assistant") return Role::kAssistant;
  throw ParseError("unknown chat role '" + s + "'");
}

void validate_messages(std::span<const ChatMessage> messages) {
  if (messages.empty()) throw InputError("chat: no messages");
  std::size_t i = 0;
  while (i < messages.size() && messages[i].role == Role::kSystem) ++i;
  Role expected = Role::kUser;
  for (std::size_t k = 0; k < messages.size(); ++k) {
    if (messages[k].content.empty()) {
      throw InputError("chat: message " + std::to_string(k) + " has empty content");
    }
  }
  if (i == messages.size()) throw InputError("chat: no user message after system prompt");
  for (; i < messages.size(); ++i) {
    if (messages[i].role != expected) {
      throw InputError("chat: message " + std::to_string(i) + " should be " +
                       to_string(expected) + " but is " + to_string(messages[i].role));
    }
    expected = expected == Role::kUser ? Role::kAssistant : Role::kUser;
  }
}

void GenConfig::validate() const {
  if (timeout.count() <= 0) throw ConfigError("gen config: timeout must be positive");
  if (max_retries < 0) throw ConfigError("gen config: max_retries must be >= 0");
  if (!options.is_object()) throw ConfigError("gen config: options must be an object");
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"options", c.options},
                     {"timeout_ms", c.timeout.count()},
                     {"max_retries", c.max_retries}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  c.model = j.value("model", c.model);
  c.options = j.value("options", nlohmann::json::object());
  c.timeout = std::chrono::milliseconds(j.value("timeout_ms", c.timeout.count()));
  c.max_retries = j.value("max_retries", c.max_retries);
}

std::string role_tag_marker(const std::string& tag) { return "[[role:" + tag + "]]"; }

std::string find_role_tag(std::span<const ChatMessage> messages) {
  if (messages.empty() || messages.front().role != Role::kSystem) return {};
  const std::string& s = messages.front().content;
  const auto start = s.find("[[role:");
  if (start == std::string::npos) return {};
  const auto end = s.find("]]", start);
  if (end == std::string::npos) return {};
  return s.substr(start + 7, end - start - 7);
}

std::size_t approx_token_count(const std::string& text) {
  std::istringstream in(text);
  std::size_t n = 0;
  std::string word;
  while (in >> word) ++n;
  return n;
}

// --- HttpBackend ---------------------------------------------------------------

HttpBackend::HttpBackend(HttpBackendOptions options) : options_(std::move(options)) {
  const auto& url = options_.base_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("http backend: bad base URL " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  if (options_.timeout.count() <= 0) throw ConfigError("http backend: timeout must be positive");
  if (options_.max_retries < 0) throw ConfigError("http backend: max_retries must be >= 0");
}

nlohmann::json HttpBackend::post(const std::string& path, const nlohmann::json& body,
                                 std::chrono::milliseconds timeout, int max_retries) {
  using clock = std::chrono::steady_clock;
  const auto deadline = clock::now() + timeout * (max_retries + 1);
  const std::string payload = body.dump();
  std::string last_failure = "no attempt made";
  int attempts = 0;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    const auto remaining =
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now());
    if (remaining.count() <= 0) break;
    const auto budget = std::min(timeout, remaining);
    ++attempts;
    last_attempts_ = attempts;

    // connect + write + read stay within one attempt's budget.
    httplib::Client cli(scheme_host_port_);
    const auto quarter = std::max<std::chrono::milliseconds>(budget / 4, std::chrono::milliseconds(1));
    cli.set_connection_timeout(quarter);
    cli.set_write_timeout(quarter);
    cli.set_read_timeout(budget - 2 * quarter);
    if (!options_.api_key.empty()) cli.set_bearer_token_auth(options_.api_key);

    auto res = cli.Post(path_prefix_ + path, payload, "application/json");
    if (!res) {
      last_failure = "transport error: " + httplib::to_string(res.error());
    } else if (res->status == 429 || res->status >= 500) {
      last_failure = "HTTP " + std::to_string(res->status);
      if (attempt == max_retries) {
        throw BackendError("backend returned " + last_failure + " after " +
                           std::to_string(attempts) + " attempts");
      }
    } else if (res->status < 200 || res->status >= 300) {
      throw BackendError("backend returned HTTP " + std::to_string(res->status) + ": " +
                         res->body.substr(0, 200));
    } else {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw BackendError(std::string("malformed backend payload: ") + e.what());
      }
    }
    if (attempt < max_retries && options_.retry_backoff.count() > 0) {
      std::this_thread::sleep_for(options_.retry_backoff * (attempt + 1));
    }
  }
  throw TransientError(last_failure + " after " + std::to_string(attempts) + " attempts");
}

ChatResult HttpBackend::chat(std::span<const ChatMessage> messages, const GenConfig& config) {
  nlohmann::json body = config.options;
  body["model"] = config.model;
  auto msgs = nlohmann::json::array();
  for (const auto& m : messages) msgs.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  body["messages"] = std::move(msgs);
  const auto reply = post("/chat/completions", body, config.timeout, config.max_retries);
  try {
    ChatResult out;
    out.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    if (reply.contains("usage")) {
      out.prompt_tokens = reply["usage"].value("prompt_tokens", std::size_t{0});
      out.completion_tokens = reply["usage"].value("completion_tokens", std::size_t{0});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("malformed chat payload: ") + e.what());
  }
}

EmbeddingVector HttpBackend::embed(const std::string& text) {
  const nlohmann::json body{{"model", options_.embedding_model}, {"input", text}};
  const auto reply = post("/embeddings", body, options_.timeout, options_.max_retries);
  try {
    const auto values = reply.at("data").at(0).at("embedding").get<std::vector<double>>();
    if (values.empty()) throw BackendError("empty embedding");
    EmbeddingVector v = Eigen::Map<const EmbeddingVector>(values.data(),
                                                          static_cast<Eigen::Index>(values.size()));
    if (!v.allFinite()) throw BackendError("non-finite embedding entries");
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("malformed embedding payload: ") + e.what());
  }
}

// --- Gateway -----------------------------------------------------------------

class Gateway::Admission {
 public:
  explicit Admission(Gateway& g) : g_(g) { g_.acquire(); }
  ~Admission() { g_.release(); }
  Admission(const Admission&) = delete;
  Admission& operator=(const Admission&) = delete;

 private:
  Gateway& g_;
};

Gateway::Gateway(std::shared_ptr<Backend> backend, std::size_t parallelism)
    : backend_(std::move(backend)), parallelism_(parallelism == 0 ? 1 : parallelism) {
  if (!backend_) throw ConfigError("gateway: null backend");
}

void Gateway::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [this] { return in_flight_ < parallelism_; });
  ++in_flight_;
}

void Gateway::release() {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
  }
  cv_.notify_one();
}

std::string Gateway::chat(std::span<const ChatMessage> messages, const GenConfig& config) {
  validate_messages(messages);
  config.validate();
  ChatResult result;
  {
    Admission admission(*this);
    result = backend_->chat(messages, config);
  }
  std::lock_guard lock(mu_);
  ++usage_.chat_calls;
  usage_.prompt_tokens += result.prompt_tokens;
  usage_.completion_tokens += result.completion_tokens;
  return std::move(result.text);
}

EmbeddingVector Gateway::embed(const std::string& text) {
  if (text.empty()) throw InputError("embed: empty text");
  EmbeddingVector v;
  {
    Admission admission(*this);
    v = backend_->embed(text);
  }
  if (!v.allFinite()) throw BackendError("embed: non-finite entries");
  std::lock_guard lock(mu_);
  ++usage_.embed_calls;
  return v;
}

Usage Gateway::usage() const {
  std::lock_guard lock(mu_);
  return usage_;
}

// --- BackendSpec -----------------------------------------------------------------

void to_json(nlohmann::json& j, const BackendSpec& s) {
  j = nlohmann::json{{"kind", s.kind}, {"parallelism", s.parallelism}};
  j["stub"] = {{"embedding_dim", s.stub.embedding_dim},
               {"canned", s.stub.canned},
               {"score_offset", s.stub.score_offset},
               {"text_hash_weight", s.stub.text_hash_weight},
               {"token_weight", s.stub.token_weight}};
  // The API key is deliberately never serialized.
  j["http"] = {{"base_url", s.http.base_url},
               {"embedding_model", s.http.embedding_model},
               {"timeout_ms", s.http.timeout.count()},
               {"max_retries", s.http.max_retries},
               {"retry_backoff_ms", s.http.retry_backoff.count()}};
}

void from_json(const nlohmann::json& j, BackendSpec& s) {
  s.kind = j.value("kind", s.kind);
  s.parallelism = j.value("parallelism", s.parallelism);
  if (j.contains("stub")) {
    const auto& st = j["stub"];
    s.stub.embedding_dim = st.value("embedding_dim", s.stub.embedding_dim);
    s.stub.canned = st.value("canned", s.stub.canned);
    s.stub.score_offset = st.value("score_offset", s.stub.score_offset);
    s.stub.text_hash_weight = st.value("text_hash_weight", s.stub.text_hash_weight);
    s.stub.token_weight = st.value("token_weight", s.stub.token_weight);
  }
  if (j.contains("http")) {
    const auto& h = j["http"];
    s.http.base_url = h.value("base_url", s.http.base_url);
    s.http.embedding_model = h.value("embedding_model", s.http.embedding_model);
    s.http.timeout = std::chrono::milliseconds(h.value("timeout_ms", s.http.timeout.count()));
    s.http.max_retries = h.value("max_retries", s.http.max_retries);
    s.http.retry_backoff =
        std::chrono::milliseconds(h.value("retry_backoff_ms", s.http.retry_backoff.count()));
    if (h.contains("api_key_env")) {
      if (const char* key = std::getenv(h["api_key_env"].get<std::string>().c_str())) {
        s.http.api_key = key;
      }
    }
  }
}

std::shared_ptr<Backend> make_backend(const BackendSpec& spec) {
  if (spec.kind == "stub") return std::make_shared<StubBackend>(spec.stub);
  if (spec.kind == "http") {
    HttpBackendOptions opts = spec.http;
    if (opts.api_key.empty()) {
      if (const char* key = std::getenv("STUDENTSIM_API_KEY")) opts.api_key = key;
    }
    return std::make_shared<HttpBackend>(std::move(opts));
  }
  throw ConfigError("unknown backend kind '" + spec.kind + "'");
}

}  // namespace studentsim
