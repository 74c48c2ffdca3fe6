#include "studentsim/annotation.hpp"
#include "studentsim/errors.hpp"
#include "studentsim/jsonl.hpp"

// After Eigen: <resolv.h> defines a _res macro that collides with Eigen internals.
#include <httplib.h>

namespace studentsim {

using nlohmann::json;

namespace {

void reply_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  reply_json(res, status, {{"error", {{"code", code}, {"message", message}}}});
}

using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

/// Maps the error families onto HTTP statuses.
Handler guarded(Handler h) {
  return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
    try {
      h(req, res);
    } catch (const NotFoundError& e) {
      reply_error(res, 404, "not_found", e.what());
    } catch (const PolicyError& e) {
      reply_error(res, 422, "policy", e.what());
    } catch (const StateError& e) {
      reply_error(res, 409, "state", e.what());
    } catch (const BackendError& e) {
      res.set_header("Retry-After", "1");
      reply_error(res, 503, "backend", std::string(e.what()) + " (the turn was not recorded; retry)");
    } catch (const InputError& e) {
      reply_error(res, 400, "input", e.what());
    } catch (const ParseError& e) {
      reply_error(res, 400, "input", e.what());
    } catch (const json::exception& e) {
      reply_error(res, 400, "input", std::string("malformed request body: ") + e.what());
    } catch (const std::exception& e) {
      reply_error(res, 500, "internal", e.what());
    }
  };
}

json body_of(const httplib::Request& req) {
  json j = json::parse(req.body);
  if (!j.is_object()) throw InputError("request body must be a JSON object");
  return j;
}

std::string required_string(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) {
    throw InputError(std::string("field '") + key + "' is required and must be a string");
  }
  return j[key].get<std::string>();
}

}  // namespace

AnnotationServer::AnnotationServer(AnnotationService& service, ServerOptions options)
    : service_(service), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  if (options_.token.empty()) throw ConfigError("annotation server: a bearer token is required");
  routes();
}

AnnotationServer::~AnnotationServer() { stop(); }

void AnnotationServer::routes() {
  auto& srv = *server_;
  const std::string expected = "Bearer " + options_.token;
  srv.set_pre_routing_handler([expected](const httplib::Request& req, httplib::Response& res) {
    if (req.path == "/health") return httplib::Server::HandlerResponse::Unhandled;
    if (req.get_header_value("Authorization") != expected) {
      reply_error(res, 401, "unauthorized", "missing or invalid bearer token");
      return httplib::Server::HandlerResponse::Handled;
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });

  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    reply_json(res, 200, {{"status", "ok"}});
  });

  srv.Get("/candidates", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string me = req.get_param_value("expert");
            const auto dump = service_.export_annotations();
            json list = json::array();
            for (const auto& id : service_.candidates().ids) {
              std::size_t ratings = 0;
              bool rated_by_me = false;
              for (const auto& r : dump.ratings) {
                if (r.agent_id != id) continue;
                ++ratings;
                rated_by_me = rated_by_me || r.annotator_id == me;
              }
              const bool rated = me.empty() ? ratings > 0 : rated_by_me;
              list.push_back({{"id", id}, {"status", rated ? "rated" : "unrated"}, {"ratings", ratings}});
            }
            reply_json(res, 200,
                       {{"candidates", list},
                        {"threshold", service_.candidates().threshold},
                        {"min_turns", service_.options().min_turns}});
          }));

  srv.Get("/profiles", guarded([this](const httplib::Request&, httplib::Response& res) {
            reply_json(res, 200, {{"profiles", service_.profiles()}});
          }));

  srv.Get(R"(/profiles/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto& p = service_.profile(req.matches[1]);
            reply_json(res, 200, {{"profile", p}, {"text", render_profile(p).text}});
          }));

  srv.Get("/scores", guarded([this](const httplib::Request&, httplib::Response& res) {
            const auto dir = options_.artifacts_dir;
            if (dir.empty() || !std::filesystem::exists(dir / artifacts::kScoresInitial)) {
              throw NotFoundError("no score artifacts are being served");
            }
            json out = json::object();
            const auto [p0, b0] = load_initial_vectors(dir / artifacts::kScoresInitial);
            for (std::size_t i = 0; i < p0.ids.size(); ++i) {
              const auto k = static_cast<Eigen::Index>(i);
              out[p0.ids[i]]["initial"] = {{"profile", p0.values[k]}, {"behavior", b0.values[k]}};
            }
            if (std::filesystem::exists(dir / artifacts::kScoresPropagated)) {
              const auto [pp, bp] = load_propagated_vectors(dir / artifacts::kScoresPropagated);
              for (std::size_t i = 0; i < pp.ids.size(); ++i) {
                const auto k = static_cast<Eigen::Index>(i);
                out[pp.ids[i]]["propagated"] = {{"profile", pp.values[k]}, {"behavior", bp.values[k]}};
              }
            }
            reply_json(res, 200, {{"scores", out}});
          }));

  srv.Get("/sessions", guarded([this](const httplib::Request&, httplib::Response& res) {
            reply_json(res, 200, {{"sessions", service_.list_sessions()}});
          }));

  srv.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
             const json b = body_of(req);
             reply_json(res, 201, service_.create_session(required_string(b, "candidate_id"),
                                                          required_string(b, "expert_id")));
           }));

  srv.Get(R"(/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            reply_json(res, 200, service_.get_session(req.matches[1]));
          }));

  srv.Post(R"(/sessions/([^/]+)/turns)", guarded([this](const httplib::Request& req, httplib::Response& res) {
             const json b = body_of(req);
             const std::string id = req.matches[1];
             const std::string reply = service_.post_turn(id, required_string(b, "message"));
             const Session s = service_.get_session(id);
             reply_json(res, 200,
                        {{"reply", reply},
                         {"turn_count", s.expert_turns()},
                         {"eligible_for_rating", s.expert_turns() >= service_.options().min_turns}});
           }));

  srv.Post(R"(/sessions/([^/]+)/rating)", guarded([this](const httplib::Request& req, httplib::Response& res) {
             const json b = body_of(req);
             if (!b.contains("score") || !b["score"].is_number_integer()) {
               throw InputError("field 'score' is required and must be an integer");
             }
             const auto raw = b["score"].get<long long>();
             if (raw < 1 || raw > 100) {
               throw InputError("conformity score must be an integer in [1, 100], got " + std::to_string(raw));
             }
             const auto agreements = b.value("agreements", std::map<std::string, int>{});
             reply_json(res, 201,
                        service_.submit_rating(req.matches[1], static_cast<int>(raw),
                                               required_string(b, "justification"), agreements,
                                               b.value("annotator_id", std::string())));
           }));

  srv.Post(R"(/sessions/([^/]+)/close)", guarded([this](const httplib::Request& req, httplib::Response& res) {
             reply_json(res, 200, service_.close_session(req.matches[1]));
           }));

  srv.Get("/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto dump = service_.export_annotations();
            if (req.get_param_value("format") == "jsonl") {
              std::string out;
              for (const auto& s : dump.sessions) out += dump_line({{"type", "session"}, {"session", s}}) + "\n";
              for (const auto& r : dump.ratings) out += dump_line({{"type", "rating"}, {"rating", r}}) + "\n";
              out += dump_line({{"type", "expert_mean"}, {"expert_mean", dump.expert_mean}}) + "\n";
              res.status = 200;
              res.set_content(out, "application/x-ndjson");
              return;
            }
            reply_json(res, 200, dump);
          }));
}

int AnnotationServer::start() {
  if (options_.port == 0) {
    port_ = server_->bind_to_any_port(options_.host);
  } else {
    port_ = server_->bind_to_port(options_.host, options_.port) ? options_.port : -1;
  }
  if (port_ < 0) throw ConfigError("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void AnnotationServer::listen() {
  if (!server_->listen(options_.host, options_.port)) {
    throw ConfigError("cannot listen on " + options_.host + ":" + std::to_string(options_.port));
  }
}

void AnnotationServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace studentsim
