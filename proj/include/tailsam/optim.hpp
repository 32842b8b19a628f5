#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tailsam/linalg.hpp"
#include "tailsam/model.hpp"

namespace tailsam {

enum class OptimizerKind { SGD, SAM, PGD, LPFSGD };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::SGD;
  double momentum = 0.9;
  double rho = 0.05;
  double rho_drw = 0.05;
  bool sam_normalized = true;
  double pgd_sigma = 1e-4;
  std::size_t lpf_mc_iters = 8;
  double lpf_radius = 1e-3;

  void validate() const;
};

/// Linear warmup to base_lr, then base_lr times the product of every
/// milestone multiplier whose epoch has been reached.
struct LrSchedule {
  double base_lr = 0.1;
  std::size_t warmup_epochs = 0;
  std::vector<std::pair<std::size_t, double>> milestones;

  void validate() const;
};

/// Piecewise-constant rho: (start_epoch, value) steps.
struct RhoSchedule {
  std::vector<std::pair<std::size_t, double>> steps;

  bool empty() const { return steps.empty(); }
  void validate() const;
};

struct OptimizerState {
  Vector velocity;
  double momentum = 0.9;
  std::uint64_t step_count = 0;
  std::uint64_t skipped_perturbations = 0;
  SeededRng rng{0, 0};

  OptimizerState(std::size_t dim, double momentum, SeededRng rng)
      : velocity(dim, 0.0), momentum(momentum), rng(rng) {}
};

/// Loss and gradient of a fixed mini-batch objective at a parameter point.
using GradientFn = std::function<LossGrad(std::span<const double>)>;

GradientFn batch_gradient(const MlpSpec& spec, const Batch& batch, const LossSpec& loss);

struct StepInfo {
  double loss = 0.0;         // loss where the step was evaluated (SAM: at w)
  double update_norm = 0.0;  // norm of the gradient fed to the momentum update
  bool perturbation_skipped = false;
};

/// velocity <- momentum * velocity + grad; w <- w - lr * velocity.
void sgd_step(Vector& w, std::span<const double> grad, OptimizerState& state, double lr);

StepInfo sgd_step(Vector& w, const GradientFn& grad_fn, OptimizerState& state, double lr);

/// Perturbation for one SAM step: rho * g / ||g|| (normalized) or rho * g.
/// A zero gradient in normalized mode yields a zero perturbation.
Vector sam_perturbation(std::span<const double> grad, double rho, bool normalized,
                        bool* skipped = nullptr);

/// Gradient at w + eps on the same batch, then the SGD momentum update.
StepInfo sam_step(Vector& w, const GradientFn& grad_fn, OptimizerState& state, double lr,
                  double rho, bool normalized);

/// Gradient at w + xi, xi ~ N(0, sigma^2 I) drawn from state.rng, then the
/// SGD momentum update.
StepInfo pgd_step(Vector& w, const GradientFn& grad_fn, OptimizerState& state, double lr,
                  double sigma);

/// Per-coordinate noise scale for LPF-SGD: radius * ||w_block|| / sqrt(|block|).
Vector lpf_noise_scales(std::span<const double> w, const std::vector<ParamBlock>& blocks,
                        double radius);

/// Mean gradient over `mc_iters` draws xi_m ~ N(0, diag(lpf_noise_scales)^2),
/// then the SGD momentum update. radius = 0 evaluates the plain gradient once.
StepInfo lpf_sgd_step(Vector& w, const GradientFn& grad_fn, OptimizerState& state, double lr,
                      std::size_t mc_iters, double radius, const std::vector<ParamBlock>& blocks);

double lr_at(const LrSchedule& schedule, std::size_t epoch, std::size_t step_in_epoch,
             std::size_t steps_per_epoch);

double rho_at(const RhoSchedule& schedule, std::size_t epoch);

const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer_kind(const std::string& s);

}  // namespace tailsam
