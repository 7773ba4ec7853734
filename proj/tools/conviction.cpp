// conviction: staged pipeline driver.
//
//   conviction [--config PATH] [--out DIR] [--seed INT] [--force] <stage>
//   conviction report --format svg
//   conviction validate PATH
//
// Exit codes: 0 ok (or cached), 1 error, 2 missing upstream artifact,
// 3 config changed without --force. Errors go to stderr as one JSON line.

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "conviction/pipeline.hpp"

extern char** environ;

namespace {

using conviction::pipeline::Stage;
using nlohmann::json;

std::map<std::string, std::string> environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq != std::string::npos) env.emplace(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return env;
}

int fail(const std::string& stage, int code, const std::string& kind, const std::string& message,
         const std::string& run_first = {}) {
  std::cerr << conviction::pipeline::error_record(stage, code, kind, message, run_first).dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Staged pipeline: sampling, confidence estimation, preference data, DPO, evaluation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, format = "csv";
  std::optional<long long> seed;
  bool force = false;
  app.add_option("--config", config_path, "pipeline config JSON");
  app.add_option("--out", out_dir, "output directory (overrides output_dir)");
  app.add_option("--seed", seed, "master seed (overrides seed)");
  app.add_flag("--force", force, "rerun even when the stage config changed or outputs are cached");

  std::map<CLI::App*, Stage> stages;
  for (auto s : conviction::pipeline::kStages) {
    auto* sub = app.add_subcommand(conviction::pipeline::to_string(s));
    sub->fallthrough();
    if (s == Stage::report) {
      sub->add_option("--format", format, "csv or svg")->check(CLI::IsMember({"csv", "svg"}));
    }
    stages[sub] = s;
  }
  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "check an artifact's schema and semantic invariants");
  validate->add_option("path", validate_path)->required();
  validate->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (validate->parsed()) {
    try {
      const auto report = conviction::pipeline::validate(validate_path);
      std::cout << report.to_json().dump(2) << std::endl;
      return report.violations.empty() ? 0 : 1;
    } catch (const std::exception& e) {
      return fail("validate", 1, "unreadable", e.what());
    }
  }

  Stage stage = Stage::sample;
  for (const auto& [sub, s] : stages) {
    if (sub->parsed()) stage = s;
  }
  const std::string name = conviction::pipeline::to_string(stage);

  conviction::pipeline::PipelineConfig cfg;
  try {
    json flags = json::object();
    if (!out_dir.empty()) flags["output_dir"] = out_dir;
    if (seed) flags["seed"] = *seed;
    std::optional<std::filesystem::path> file;
    if (!config_path.empty()) file = config_path;
    cfg = conviction::pipeline::load_config(file, environment(), flags);
  } catch (const std::exception& e) {
    return fail(name, 1, "config", e.what());
  }

  try {
    conviction::pipeline::RunOptions opts;
    opts.force = force;
    opts.report_format = format;
    const auto result = conviction::pipeline::run_stage(stage, cfg, opts);
    json summary = {{"stage", name}, {"skipped", result.skipped}, {"outputs", result.manifest.outputs}};
    if (!result.notes.empty()) summary["notes"] = result.notes;
    std::cout << summary.dump() << std::endl;
    return 0;
  } catch (const conviction::pipeline::StageError& e) {
    const char* kind = e.exit_code() == 2 ? "missing_upstream" : e.exit_code() == 3 ? "config_mismatch" : "stage_failed";
    return fail(name, e.exit_code(), kind, e.what(), e.run_first());
  } catch (const std::exception& e) {
    return fail(name, 1, "stage_failed", e.what());
  }
}
