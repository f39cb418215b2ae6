#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cvt/experiment.h"

int main(int argc, char** argv) {
  CLI::App app{"Cross-view training experiments"};
  std::string config_path;
  std::string task;
  std::optional<uint64_t> seed;
  std::optional<double> labeled_fraction;
  std::string cvt_mode;
  std::string baseline;
  std::vector<std::string> ablate;
  bool freeze_encoder = false;
  std::string metrics_out;
  std::string checkpoint_dir;
  bool resume = false;

  app.add_option("--config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
  app.add_option("--task", task, "Train only this [task.NAME]");
  app.add_option("--seed", seed, "Run a single seed");
  app.add_option("--labeled-fraction", labeled_fraction, "Labeled fraction for every task")
      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--cvt", cvt_mode, "CVT mode")->check(CLI::IsMember({"on", "off", "one-at-a-time"}));
  app.add_option("--baseline", baseline, "Baseline")
      ->check(CLI::IsMember({"none", "word-dropout", "vat"}));
  app.add_option("--ablate-views", ablate, "Student views to remove")->delimiter(',');
  app.add_flag("--freeze-encoder", freeze_encoder, "Train only task heads on a frozen encoder");
  app.add_option("--metrics-out", metrics_out, "Metric log path (JSON lines)");
  app.add_option("--checkpoint-dir", checkpoint_dir, "Directory for per-seed checkpoints");
  app.add_flag("--resume", resume, "Continue from the latest checkpoint in --checkpoint-dir");
  CLI11_PARSE(app, argc, argv);

  try {
    cvt::ExperimentConfig config = cvt::load_config(config_path);
    if (!task.empty()) {
      std::erase_if(config.tasks, [&](const cvt::TaskConfig& t) { return t.name != task; });
      if (config.tasks.empty()) throw std::invalid_argument("no task named " + task);
    }
    if (seed) config.seeds = {*seed};
    for (cvt::TaskConfig& t : config.tasks) {
      if (labeled_fraction) t.labeled_fraction = *labeled_fraction;
      if (!ablate.empty()) t.ablate_views = ablate;
    }
    if (!cvt_mode.empty()) config.trainer.cvt = cvt::parse_cvt_mode(cvt_mode);
    if (!baseline.empty()) config.trainer.baseline = cvt::parse_baseline(baseline);
    if (freeze_encoder) config.freeze_encoder = true;
    if (!metrics_out.empty()) config.metrics_out = metrics_out;
    if (!checkpoint_dir.empty()) config.checkpoint_dir = checkpoint_dir;
    if (resume) config.resume = true;

    const cvt::ExperimentResult result = cvt::run_experiment(config);
    cvt::print_summary(std::cout, result.summary);
  } catch (const std::exception& e) {
    std::cerr << "cvt: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
