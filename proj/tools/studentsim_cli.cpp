#include <csignal>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "studentsim/annotation.hpp"
#include "studentsim/errors.hpp"
#include "studentsim/jsonl.hpp"
#include "studentsim/pipeline.hpp"

using namespace studentsim;

namespace {

struct Overrides {
  std::string config;
  std::string out;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string backend;
  std::string base_url;
  std::string model;
  std::string catalog;
  double theta = 0, alpha = 0, tol = 0, tau = 0;
  int iterations = 0;
  int turns = 0;
  int profile_reps = 0, behavior_reps = 0;
  int parallelism = 0;
  std::string rule;
  std::string phase;
  std::vector<std::size_t> ks;
  std::string gold;
  int simulated_experts = -1;
  double score_offset = 0;
  bool force = false;
  bool quiet = false;
};

void add_run_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON run config; flags override its values")
      ->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", o.out, "Output directory");
  cmd->add_option("-n,--profiles", o.n, "Number of profiles");
  cmd->add_option("--seed", o.seed, "Profile sampling seed")->each([&o](const std::string&) { o.seed_set = true; });
  cmd->add_option("--catalog", o.catalog, "Attribute catalog JSON")->check(CLI::ExistingFile);
  cmd->add_option("--backend", o.backend, "stub or http")->check(CLI::IsMember({"stub", "http"}));
  cmd->add_option("--base-url", o.base_url, "Chat-completions base URL (http backend)");
  cmd->add_option("--model", o.model, "Model name");
  cmd->add_option("--parallelism", o.parallelism, "Concurrent backend calls");
  cmd->add_option("--score-offset", o.score_offset, "Stub scorer offset");
  cmd->add_option("--profile-reps", o.profile_reps, "Conflict-probing repetitions per profile");
  cmd->add_option("--behavior-reps", o.behavior_reps, "Behaviour dialogue repetitions per profile");
  cmd->add_option("--turns", o.turns, "Turns per behaviour dialogue");
  cmd->add_option("--theta", o.theta, "Similarity threshold");
  cmd->add_option("--alpha", o.alpha, "Propagation weight");
  cmd->add_option("-K,--iterations", o.iterations, "Maximum propagation iterations");
  cmd->add_option("--tol", o.tol, "Propagation tolerance");
  cmd->add_option("--tau", o.tau, "Candidate threshold");
  cmd->add_option("--rule", o.rule, "Candidate rule")->check(CLI::IsMember({"conjunction", "disjunction", "average"}));
  cmd->add_option("--candidate-phase", o.phase, "Scores used for filtering")
      ->check(CLI::IsMember({"initial", "propagated"}));
  cmd->add_option("--ks", o.ks, "Report cut-offs; 0 means |C|");
  cmd->add_option("--gold", o.gold, "Expert gold: annotation export (.json) or records (.jsonl)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--simulated-experts", o.simulated_experts, "Scripted annotators per candidate");
  cmd->add_flag("-f,--force", o.force, "Recompute even when the stage manifest matches");
  cmd->add_flag("-q,--quiet", o.quiet, "No progress output");
}

RunConfig build_config(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.n) c.n_profiles = o.n;
  if (o.seed_set) c.seeds.profiles = o.seed;
  if (!o.catalog.empty()) c.catalog_path = o.catalog;
  if (!o.backend.empty()) c.backend.kind = o.backend;
  if (!o.base_url.empty()) c.backend.http.base_url = o.base_url;
  if (!o.model.empty()) c.gen.model = o.model;
  if (o.parallelism > 0) c.backend.parallelism = static_cast<std::size_t>(o.parallelism);
  if (o.score_offset != 0) c.backend.stub.score_offset = o.score_offset;
  if (o.profile_reps) c.profile_repetitions = o.profile_reps;
  if (o.behavior_reps) c.behavior_repetitions = o.behavior_reps;
  if (o.turns) c.n_turns = o.turns;
  if (o.theta != 0) c.theta = o.theta;
  if (o.alpha != 0) c.alpha = o.alpha;
  if (o.iterations) c.max_iterations = o.iterations;
  if (o.tol != 0) c.tol = o.tol;
  if (o.tau != 0) c.tau = o.tau;
  if (!o.rule.empty()) c.candidate_rule = candidate_rule_from_string(o.rule);
  if (!o.phase.empty()) c.candidate_phase = score_phase_from_string(o.phase);
  if (!o.ks.empty()) c.metric_ks = o.ks;
  if (!o.gold.empty()) c.gold_path = o.gold;
  if (o.simulated_experts >= 0) c.simulated_experts = o.simulated_experts;
  return c;
}

std::unique_ptr<Pipeline> make_pipeline(const Overrides& o) {
  auto p = std::make_unique<Pipeline>(build_config(o));
  if (!o.quiet) p->set_progress([](const std::string& m) { std::cerr << m << "\n"; });
  return p;
}

AnnotationServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated student agent generation, scoring and selection"};
  app.require_subcommand(1);
  Overrides o;

  struct StageCmd {
    const char* name;
    Stage stage;
    const char* help;
  };
  const std::vector<StageCmd> stage_cmds = {
      {"generate", Stage::kGenerate, "Sample profiles"},
      {"score", Stage::kScore, "Run both scoring rounds"},
      {"graph", Stage::kGraph, "Embed profiles and build the similarity graph"},
      {"propagate", Stage::kPropagate, "Propagate scores over the graph"},
      {"filter", Stage::kFilter, "Select candidates above the threshold"},
      {"rank", Stage::kRank, "Rank agents by each score source"},
      {"report", Stage::kReport, "Evaluate rankings against expert gold"},
      {"analyze", Stage::kAnalyze, "Feature importance and distribution shift"},
  };
  std::optional<Stage> chosen;
  for (const auto& sc : stage_cmds) {
    auto* cmd = app.add_subcommand(sc.name, sc.help);
    add_run_flags(cmd, o);
    cmd->callback([&chosen, stage = sc.stage] { chosen = stage; });
  }
  auto* run_all = app.add_subcommand("run-all", "Run every stage in order");
  add_run_flags(run_all, o);

  auto* serve = app.add_subcommand("serve", "Serve the expert annotation API");
  std::string run_dir;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string token;
  std::size_t min_turns = 15;
  std::string log_path;
  serve->add_option("--run-dir", run_dir, "Run output directory with profiles and candidates")
      ->required()
      ->check(CLI::ExistingDirectory);
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");
  serve->add_option("--token", token, "Bearer token (default: $STUDENTSIM_TOKEN)");
  serve->add_option("--min-turns", min_turns, "Turns required before rating");
  serve->add_option("--log", log_path, "Annotation event log (default: <run-dir>/annotations.jsonl)");
  add_run_flags(serve, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : exit_codes::kConfig;
  }

  try {
    if (chosen) {
      auto pipeline = make_pipeline(o);
      Pipeline& p = *pipeline;
      const auto outcome = p.run_stage(*chosen, o.force);
      p.write_metadata({outcome});
      std::cout << to_string(*chosen) << (outcome.skipped ? ": up to date\n" : ": done\n");
      for (const auto& f : outcome.outputs) std::cout << "  " << p.path(f).string() << "\n";
      return exit_codes::kOk;
    }
    if (run_all->parsed()) {
      auto pipeline = make_pipeline(o);
      Pipeline& p = *pipeline;
      const auto outcomes = p.run_all(o.force);
      std::cout << "run complete: " << p.config().output_dir.string() << "\n";
      for (const auto& out : outcomes) {
        std::cout << "  " << to_string(out.stage) << (out.skipped ? " (skipped)" : "") << "\n";
      }
      if (std::filesystem::exists(p.path(artifacts::kReportTxt))) {
        std::cout << "\n" << read_file(p.path(artifacts::kReportTxt));
      }
      return exit_codes::kOk;
    }
    if (serve->parsed()) {
      if (token.empty()) {
        if (const char* env = std::getenv("STUDENTSIM_TOKEN")) token = env;
      }
      if (o.out.empty()) o.out = run_dir;
      RunConfig cfg = build_config(o);
      cfg.output_dir = run_dir;
      Pipeline p(cfg);
      AnnotationOptions ao;
      ao.min_turns = min_turns;
      ao.gen = cfg.gen;
      ao.log_path = log_path.empty() ? p.path(artifacts::kAnnotations) : std::filesystem::path(log_path);
      AnnotationService service(p.gateway(), load_profiles(p.path(artifacts::kProfiles)),
                                load_candidates(p.path(artifacts::kCandidates)), ao, p.catalog());
      AnnotationServer server(service, {host, port, token, run_dir});
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving " << service.candidates().ids.size() << " candidates on http://" << host << ":"
                << port << "\n";
      server.listen();
      return exit_codes::kOk;
    }
  } catch (const StageError& e) {
    std::cerr << "error: stage '" << e.stage() << "' failed: " << e.what() << "\n";
    return e.code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  }
  return exit_codes::kGeneric;
}
