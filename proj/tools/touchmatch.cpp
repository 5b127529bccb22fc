#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "touchmatch/pipeline.hpp"

namespace {

int fail(const std::string& category, const std::string& msg) {
  std::string line = msg;
  for (char& c : line)
    if (c == '\n') c = ' ';
  std::cerr << "error: " << category << ": " << line << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace touchmatch;

  CLI::App app{"Visuo-tactile cross-modal instance recognition on a synthetic world"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  app.add_option("--config", config_path, "key = value run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--out", out_dir, "output directory (overrides the config)");

  auto* gen = app.add_subcommand("gen-data", "generate the episode store");
  auto* pairs = app.add_subcommand("build-pairs", "split objects and build pair lists");
  auto* train_cmd = app.add_subcommand("train", "train the match network");
  auto* baseline = app.add_subcommand("baseline", "fit the CCA baseline");
  auto* eval = app.add_subcommand("eval", "evaluate all scorers");
  auto* report = app.add_subcommand("report", "write the comparison report");
  auto* run = app.add_subcommand("run", "every stage in order");
  auto* show = app.add_subcommand("show-config", "print the resolved configuration");

  EvalInputs eval_inputs;
  std::string checkpoint, cca;
  eval->add_option("--checkpoint", checkpoint, "match network checkpoint header");
  eval->add_option("--baseline", cca, "CCA model header");
  std::string metrics_dir;
  report->add_option("--metrics", metrics_dir, "metrics directory (default <out>/metrics)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    eval_inputs.checkpoint_header = checkpoint;
    eval_inputs.cca_header = cca;

    if (*show) {
      std::cout << cfg.to_text();
    } else if (*gen) {
      cmd_gen_data(cfg, &std::cout);
    } else if (*pairs) {
      cmd_build_pairs(cfg, &std::cout);
    } else if (*train_cmd) {
      cmd_train(cfg, &std::cout);
    } else if (*baseline) {
      cmd_baseline(cfg, &std::cout);
    } else if (*eval) {
      cmd_eval(cfg, eval_inputs, &std::cout);
    } else if (*report) {
      if (metrics_dir.empty()) {
        cmd_report(cfg, &std::cout);
      } else {
        cmd_report(metrics_dir, RunPaths{cfg.out_dir}.report_txt().parent_path(), &std::cout);
      }
    } else if (*run) {
      cmd_run_all(cfg, &std::cout);
    }
  } catch (const Error& e) {
    return fail(e.category(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
