#include "tailsam/tailsam.h"

#include <cmath>
#include <cstring>
#include <limits>
#include <new>
#include <string>

#include "tailsam/harness.hpp"

struct tailsam_config {
  tailsam::ExperimentConfig cfg;
};

struct tailsam_run {
  tailsam::RunResult result;
  std::string output_dir;
};

struct tailsam_checkpoint {
  tailsam::Checkpoint ckpt;
  tailsam::ExperimentConfig cfg;
  std::filesystem::path path;
};

namespace {

thread_local std::string g_last_error;

tailsam_status set_error(tailsam_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

// Runs `body`, translating exceptions into status codes.
template <class F>
tailsam_status guarded(F&& body) {
  try {
    g_last_error.clear();
    body();
    return TAILSAM_OK;
  } catch (const tailsam::Error& e) {
    return set_error(static_cast<tailsam_status>(e.code()), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return set_error(TAILSAM_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(TAILSAM_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(TAILSAM_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(TAILSAM_ERR_INTERNAL, "unknown failure");
  }
}

#define TAILSAM_REQUIRE_ARG(cond)                                              \
  do {                                                                        \
    if (!(cond)) return set_error(TAILSAM_ERR_INVALID_ARGUMENT, #cond " failed"); \
  } while (0)

std::filesystem::path analysis_dir(const tailsam_checkpoint* ckpt, const char* out_dir) {
  if (out_dir) return out_dir;
  const auto parent = ckpt->path.parent_path();
  return parent.empty() ? std::filesystem::path(".") : parent;
}

}  // namespace

extern "C" {

const char* tailsam_version(void) { return tailsam::kCodeVersion; }

const char* tailsam_last_error(void) { return g_last_error.c_str(); }

const char* tailsam_status_name(tailsam_status status) {
  switch (status) {
    case TAILSAM_OK:
      return "ok";
    case TAILSAM_ERR_INVALID_ARGUMENT:
      return "invalid_argument";
    case TAILSAM_ERR_INTERNAL:
      return "internal";
    default:
      if (status >= TAILSAM_ERR_DIMENSION && status <= TAILSAM_ERR_CONFIG) {
        return tailsam::error_code_name(static_cast<tailsam::ErrorCode>(status));
      }
      return "unknown";
  }
}

tailsam_status tailsam_config_load(const char* path, tailsam_config** out) {
  TAILSAM_REQUIRE_ARG(path && out);
  *out = nullptr;
  return guarded([&] { *out = new tailsam_config{tailsam::load_config(path)}; });
}

tailsam_status tailsam_config_from_json(const char* text, tailsam_config** out) {
  TAILSAM_REQUIRE_ARG(text && out);
  *out = nullptr;
  return guarded([&] {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      tailsam::fail(tailsam::ErrorCode::Config, e.what());
    }
    *out = new tailsam_config{tailsam::config_from_json(j)};
  });
}

tailsam_status tailsam_config_set_seed(tailsam_config* cfg, uint64_t seed) {
  TAILSAM_REQUIRE_ARG(cfg);
  cfg->cfg.seed = seed;
  return TAILSAM_OK;
}

tailsam_status tailsam_config_set_output_dir(tailsam_config* cfg, const char* dir) {
  TAILSAM_REQUIRE_ARG(cfg && dir);
  cfg->cfg.output_dir_override = dir;
  return TAILSAM_OK;
}

tailsam_status tailsam_config_hash(const tailsam_config* cfg, char* buf, size_t len) {
  TAILSAM_REQUIRE_ARG(cfg && buf && len >= 17);
  return guarded([&] {
    const std::string h = tailsam::config_hash(cfg->cfg);
    std::memcpy(buf, h.c_str(), h.size() + 1);
  });
}

void tailsam_config_free(tailsam_config* cfg) { delete cfg; }

tailsam_status tailsam_train(const tailsam_config* cfg, tailsam_run** out) {
  return tailsam_train_resume(cfg, nullptr, out);
}

tailsam_status tailsam_train_resume(const tailsam_config* cfg, const tailsam_checkpoint* from,
                                    tailsam_run** out) {
  TAILSAM_REQUIRE_ARG(cfg && out);
  *out = nullptr;
  return guarded([&] {
    tailsam::RunOptions opts;
    if (from) opts.resume_from = &from->ckpt;
    auto* run = new tailsam_run{tailsam::run_experiment(cfg->cfg, opts), {}};
    run->output_dir = run->result.output_dir.string();
    *out = run;
  });
}

size_t tailsam_run_num_epochs(const tailsam_run* run) { return run ? run->result.metrics.size() : 0; }

size_t tailsam_run_num_params(const tailsam_run* run) {
  return run ? run->result.final_params.size() : 0;
}

tailsam_status tailsam_run_params(const tailsam_run* run, double* out, size_t len) {
  TAILSAM_REQUIRE_ARG(run && out);
  const auto& w = run->result.final_params.data;
  if (len < w.size()) return set_error(TAILSAM_ERR_INVALID_ARGUMENT, "output buffer too small");
  std::memcpy(out, w.data(), w.size() * sizeof(double));
  return TAILSAM_OK;
}

tailsam_status tailsam_run_final_accuracy(const tailsam_run* run, double* overall, double* tail) {
  TAILSAM_REQUIRE_ARG(run && overall && tail);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  *overall = nan;
  *tail = nan;
  if (!run->result.metrics.empty()) {
    const auto& eval = run->result.metrics.back().eval;
    *overall = eval.overall;
    *tail = eval.tail.value_or(nan);
  }
  return TAILSAM_OK;
}

const char* tailsam_run_output_dir(const tailsam_run* run) { return run ? run->output_dir.c_str() : ""; }

void tailsam_run_free(tailsam_run* run) { delete run; }

tailsam_status tailsam_checkpoint_load(const char* path, tailsam_checkpoint** out) {
  TAILSAM_REQUIRE_ARG(path && out);
  *out = nullptr;
  return guarded([&] {
    auto ckpt = tailsam::load_checkpoint(path);
    tailsam::ExperimentConfig cfg;
    try {
      cfg = tailsam::config_from_json(ckpt.config);
    } catch (const tailsam::Error& e) {
      tailsam::fail(tailsam::ErrorCode::CorruptFile,
                    std::string("checkpoint config is invalid: ") + e.what());
    }
    tailsam::require(tailsam::config_hash(cfg) == ckpt.config_hash, tailsam::ErrorCode::CorruptFile,
                     "checkpoint config does not match its recorded hash");
    *out = new tailsam_checkpoint{std::move(ckpt), std::move(cfg), path};
  });
}

size_t tailsam_checkpoint_epoch(const tailsam_checkpoint* ckpt) { return ckpt ? ckpt->ckpt.epoch : 0; }

void tailsam_checkpoint_free(tailsam_checkpoint* ckpt) { delete ckpt; }

tailsam_status tailsam_spectrum(const tailsam_checkpoint* ckpt, int class_id, const char* out_dir) {
  TAILSAM_REQUIRE_ARG(ckpt && class_id >= TAILSAM_ALL_CLASSES);
  return guarded([&] {
    const auto data = tailsam::make_data(ckpt->cfg);
    tailsam::require(class_id == TAILSAM_ALL_CLASSES ||
                         static_cast<std::size_t>(class_id) < data.train.num_classes(),
                     tailsam::ErrorCode::Parameter, "class id out of range");
    std::vector<int> classes;
    if (class_id != TAILSAM_ALL_CLASSES) classes.push_back(class_id);
    tailsam::write_spectrum_snapshot(ckpt->cfg, data, ckpt->ckpt.params, ckpt->ckpt.epoch, classes,
                                     analysis_dir(ckpt, out_dir));
  });
}

tailsam_status tailsam_cnc_check(const tailsam_checkpoint* ckpt, const double* rhos,
                                 size_t num_rhos, int class_id, const char* out_dir) {
  TAILSAM_REQUIRE_ARG(ckpt && (rhos || num_rhos == 0) && class_id >= TAILSAM_ALL_CLASSES);
  return guarded([&] {
    const auto data = tailsam::make_data(ckpt->cfg);
    std::optional<int> cls;
    if (class_id != TAILSAM_ALL_CLASSES) {
      tailsam::require(static_cast<std::size_t>(class_id) < data.train.num_classes(),
                       tailsam::ErrorCode::Parameter, "class id out of range");
      cls = class_id;
    }
    const std::vector<double> list(rhos, rhos + num_rhos);
    tailsam::write_cnc_snapshot(ckpt->cfg, data, ckpt->ckpt.params, ckpt->ckpt.epoch, list, cls,
                                analysis_dir(ckpt, out_dir));
  });
}

tailsam_status tailsam_sweep_rho(const tailsam_config* cfg, const double* rhos, size_t num_rhos,
                                 const char* out_dir) {
  TAILSAM_REQUIRE_ARG(cfg && rhos && num_rhos > 0);
  return guarded([&] {
    const std::filesystem::path dir =
        out_dir ? std::filesystem::path(out_dir) : tailsam::resolve_output_dir(cfg->cfg);
    tailsam::sweep_rho(cfg->cfg, std::vector<double>(rhos, rhos + num_rhos), dir);
  });
}

tailsam_status tailsam_gen_data(const tailsam_data_params* params, const char* path) {
  TAILSAM_REQUIRE_ARG(params && path);
  return guarded([&] {
    tailsam::ImbalanceProfile profile;
    profile.kind = params->long_tail ? tailsam::ImbalanceKind::LongTail : tailsam::ImbalanceKind::Step;
    profile.num_classes = params->num_classes;
    profile.n_max = params->n_max;
    profile.beta = params->beta;
    tailsam::ClassGeometry geom;
    geom.input_dim = params->input_dim;
    geom.class_mean_radius = params->class_mean_radius;
    geom.within_class_std = params->within_class_std;
    geom.mean_placement =
        params->simplex ? tailsam::MeanPlacement::SimplexVertices : tailsam::MeanPlacement::Circle;
    // Same stream as the training data of a config with this seed.
    tailsam::SeededRng rng(params->seed, 1);
    const auto ds = tailsam::generate(profile, geom, rng);
    tailsam::export_dataset(path, ds, geom, params->seed);
  });
}

}  // extern "C"
