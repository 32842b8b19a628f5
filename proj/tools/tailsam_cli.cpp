// Command-line front end over the C API.
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tailsam/tailsam.h"

namespace {

constexpr int kUsageExit = 2;

void print_error(const std::string& code, int status, const std::string& message) {
  nlohmann::json rec = {{"error", {{"code", code}, {"status", status}, {"message", message}}}};
  std::fprintf(stderr, "%s\n", rec.dump().c_str());
}

// Nonzero status: report it and return the process exit code.
int report(tailsam_status status) {
  print_error(tailsam_status_name(status), status, tailsam_last_error());
  return static_cast<int>(status);
}

struct Checkpoint {
  tailsam_checkpoint* handle = nullptr;
  ~Checkpoint() { tailsam_checkpoint_free(handle); }
};

struct Config {
  tailsam_config* handle = nullptr;
  ~Config() { tailsam_config_free(handle); }
};

struct Run {
  tailsam_run* handle = nullptr;
  ~Run() { tailsam_run_free(handle); }
};

nlohmann::json number_or_null(double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); }

int parse_class(const std::string& text, int& out) {
  if (text == "all") {
    out = TAILSAM_ALL_CLASSES;
    return 0;
  }
  try {
    std::size_t used = 0;
    out = std::stoi(text, &used);
    if (used == text.size() && out >= 0) return 0;
  } catch (const std::exception&) {
  }
  print_error("usage", kUsageExit, "--class expects a class index or 'all', got '" + text + "'");
  return kUsageExit;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curvature diagnostics and SAM training on synthetic long-tailed data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tailsam_version());

  std::string config_path, checkpoint_path, out_dir, resume_path, class_text = "all";
  std::optional<std::uint64_t> seed;
  std::vector<double> rhos;

  auto* train = app.add_subcommand("train", "Run one experiment from a config file");
  train->add_option("--config", config_path, "Config JSON")->required();
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", out_dir, "Output directory (overrides config and environment)");
  train->add_option("--resume", resume_path, "Continue from a checkpoint of the same config");

  auto* spectrum = app.add_subcommand("spectrum", "Class-wise Hessian spectra at a checkpoint");
  spectrum->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON")->required();
  spectrum->add_option("--class", class_text, "Class index or 'all'");
  spectrum->add_option("--out", out_dir, "Output directory (default: next to the checkpoint)");

  std::string cnc_class = "all";
  auto* cnc = app.add_subcommand("cnc-check", "SAM projection check on one class at a checkpoint");
  cnc->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON")->required();
  cnc->add_option("--rho", rhos, "Comma-separated rho values")->required()->delimiter(',');
  cnc->add_option("--class", cnc_class, "Class index (default: the config's, else the smallest)");
  cnc->add_option("--out", out_dir, "Output directory (default: next to the checkpoint)");

  auto* sweep = app.add_subcommand("sweep-rho", "One SAM run per rho on shared data and seed");
  sweep->add_option("--config", config_path, "Config JSON")->required();
  sweep->add_option("--rhos", rhos, "Comma-separated rho values")->required()->delimiter(',');
  sweep->add_option("--seed", seed, "Override the config seed");
  sweep->add_option("--out", out_dir, "Output directory");

  std::string profile = "long_tail", placement = "circle", data_path;
  tailsam_data_params dp{1, 10, 5000, 100.0, 2, 1.0, 1.0, 0, 0};
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic imbalanced dataset as CSV");
  gen->add_option("--profile", profile, "long_tail or step")
      ->check(CLI::IsMember({"long_tail", "step"}));
  gen->add_option("--classes", dp.num_classes, "Number of classes");
  gen->add_option("--n-max", dp.n_max, "Samples in the largest class");
  gen->add_option("--beta", dp.beta, "Imbalance ratio n_max / n_min");
  gen->add_option("--dim", dp.input_dim, "Input dimension");
  gen->add_option("--radius", dp.class_mean_radius, "Class-mean radius");
  gen->add_option("--std", dp.within_class_std, "Within-class standard deviation");
  gen->add_option("--placement", placement, "circle or simplex")
      ->check(CLI::IsMember({"circle", "simplex"}));
  gen->add_option("--seed", dp.seed, "Seed");
  gen->add_option("--out", data_path, "Output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", kUsageExit, e.what());
    return kUsageExit;
  }

  if (train->parsed() || sweep->parsed()) {
    Config cfg;
    if (auto s = tailsam_config_load(config_path.c_str(), &cfg.handle)) return report(s);
    if (seed) tailsam_config_set_seed(cfg.handle, *seed);
    if (!out_dir.empty()) tailsam_config_set_output_dir(cfg.handle, out_dir.c_str());

    if (sweep->parsed()) {
      const char* dir = out_dir.empty() ? nullptr : out_dir.c_str();
      if (auto s = tailsam_sweep_rho(cfg.handle, rhos.data(), rhos.size(), dir)) return report(s);
      return 0;
    }

    Checkpoint from;
    if (!resume_path.empty()) {
      if (auto s = tailsam_checkpoint_load(resume_path.c_str(), &from.handle)) return report(s);
    }
    Run run;
    if (auto s = tailsam_train_resume(cfg.handle, from.handle, &run.handle)) return report(s);
    double overall = 0.0, tail = 0.0;
    tailsam_run_final_accuracy(run.handle, &overall, &tail);
    char hash[17];
    tailsam_config_hash(cfg.handle, hash, sizeof hash);
    nlohmann::json summary = {{"output_dir", tailsam_run_output_dir(run.handle)},
                              {"config_hash", hash},
                              {"epochs_run", tailsam_run_num_epochs(run.handle)},
                              {"overall_acc", number_or_null(overall)},
                              {"tail_acc", number_or_null(tail)}};
    std::printf("%s\n", summary.dump().c_str());
    return 0;
  }

  if (spectrum->parsed() || cnc->parsed()) {
    int class_id = TAILSAM_ALL_CLASSES;
    if (int rc = parse_class(spectrum->parsed() ? class_text : cnc_class, class_id)) return rc;
    Checkpoint ck;
    if (auto s = tailsam_checkpoint_load(checkpoint_path.c_str(), &ck.handle)) return report(s);
    const char* dir = out_dir.empty() ? nullptr : out_dir.c_str();
    const tailsam_status s =
        spectrum->parsed() ? tailsam_spectrum(ck.handle, class_id, dir)
                           : tailsam_cnc_check(ck.handle, rhos.data(), rhos.size(), class_id, dir);
    return s ? report(s) : 0;
  }

  dp.long_tail = profile == "long_tail" ? 1 : 0;
  dp.simplex = placement == "simplex" ? 1 : 0;
  if (auto s = tailsam_gen_data(&dp, data_path.c_str())) return report(s);
  return 0;
}
