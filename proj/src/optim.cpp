#include "tailsam/optim.hpp"

#include <cmath>

namespace tailsam {

namespace {

void check_grad(std::span<const double> g) {
  require(all_finite(g), ErrorCode::Numeric, "optimizer: non-finite gradient");
}

StepInfo gradient_at_offset_then_update(Vector& w, const GradientFn& grad_fn,
                                        OptimizerState& state, double lr,
                                        std::span<const double> offset) {
  const Vector shifted = add(w, offset);
  const LossGrad lg = grad_fn(shifted);
  StepInfo info{lg.loss, norm2(lg.grad), false};
  sgd_step(w, lg.grad, state, lr);
  return info;
}

}  // namespace

void OptimizerConfig::validate() const {
  require(momentum >= 0.0 && momentum < 1.0, ErrorCode::Parameter, "momentum must be in [0, 1)");
  require(rho >= 0.0 && rho_drw >= 0.0, ErrorCode::Parameter, "rho values must be non-negative");
  require(pgd_sigma >= 0.0, ErrorCode::Parameter, "pgd_sigma must be non-negative");
  require(lpf_radius >= 0.0, ErrorCode::Parameter, "lpf_radius must be non-negative");
  require(lpf_mc_iters >= 1, ErrorCode::Parameter, "lpf_mc_iters must be at least 1");
}

void LrSchedule::validate() const {
  require(base_lr >= 0.0, ErrorCode::Parameter, "base_lr must be non-negative");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    require(milestones[i].second > 0.0, ErrorCode::Parameter, "lr multipliers must be positive");
    if (i > 0) {
      require(milestones[i].first > milestones[i - 1].first, ErrorCode::Parameter,
              "lr milestones must be strictly increasing");
    }
  }
}

void RhoSchedule::validate() const {
  for (std::size_t i = 0; i < steps.size(); ++i) {
    require(steps[i].second >= 0.0, ErrorCode::Parameter, "rho schedule values must be >= 0");
    if (i > 0) {
      require(steps[i].first > steps[i - 1].first, ErrorCode::Parameter,
              "rho schedule start epochs must be strictly increasing");
    }
  }
}

GradientFn batch_gradient(const MlpSpec& spec, const Batch& batch, const LossSpec& loss) {
  return [&spec, &batch, &loss](std::span<const double> w) { return loss_grad(spec, w, batch, loss); };
}

void sgd_step(Vector& w, std::span<const double> grad, OptimizerState& state, double lr) {
  require(grad.size() == w.size() && state.velocity.size() == w.size(), ErrorCode::Dimension,
          "sgd_step: dimension mismatch");
  check_grad(grad);
  for (std::size_t i = 0; i < w.size(); ++i) {
    state.velocity[i] = state.momentum * state.velocity[i] + grad[i];
    w[i] -= lr * state.velocity[i];
  }
  ++state.step_count;
}

StepInfo sgd_step(Vector& w, const GradientFn& grad_fn, OptimizerState& state, double lr) {
  const LossGrad lg = grad_fn(w);
  StepInfo info{lg.loss, norm2(lg.grad), false};
  sgd_step(w, lg.grad, state, lr);
  return info;
}

Vector sam_perturbation(std::span<const double> grad, double rho, bool normalized,
                        bool* skipped) {
  if (skipped) *skipped = false;
  double factor = rho;
  if (normalized) {
    const double n = norm2(grad);
    if (n == 0.0) {
      if (skipped) *skipped = true;
      return Vector(grad.size(), 0.0);
    }
    factor = rho / n;
  }
  return scaled(grad, factor);
}

StepInfo sam_step(Vector& w, const GradientFn& grad_fn, OptimizerState& state, double lr,
                  double rho, bool normalized) {
  require(rho >= 0.0, ErrorCode::Parameter, "sam_step: rho must be non-negative");
  const LossGrad first = grad_fn(w);
  check_grad(first.grad);
  bool skipped = false;
  const Vector eps = sam_perturbation(first.grad, rho, normalized, &skipped);
  if (skipped) ++state.skipped_perturbations;
  StepInfo info = gradient_at_offset_then_update(w, grad_fn, state, lr, eps);
  info.loss = first.loss;
  info.perturbation_skipped = skipped;
  return info;
}

StepInfo pgd_step(Vector& w, const GradientFn& grad_fn, OptimizerState& state, double lr,
                  double sigma) {
  require(sigma >= 0.0, ErrorCode::Parameter, "pgd_step: sigma must be non-negative");
  const Vector xi = gaussian_vector(state.rng, w.size(), 0.0, sigma);
  return gradient_at_offset_then_update(w, grad_fn, state, lr, xi);
}

Vector lpf_noise_scales(std::span<const double> w, const std::vector<ParamBlock>& blocks,
                        double radius) {
  Vector scales(w.size(), 0.0);
  std::size_t covered = 0;
  for (const auto& b : blocks) {
    require(b.offset + b.size() <= w.size(), ErrorCode::Dimension, "block outside parameters");
    const auto part = w.subspan(b.offset, b.size());
    const double s = radius * norm2(part) / std::sqrt(static_cast<double>(b.size()));
    for (std::size_t i = 0; i < b.size(); ++i) scales[b.offset + i] = s;
    covered += b.size();
  }
  require(covered == w.size(), ErrorCode::Dimension, "blocks do not tile the parameter vector");
  return scales;
}

StepInfo lpf_sgd_step(Vector& w, const GradientFn& grad_fn, OptimizerState& state, double lr,
                      std::size_t mc_iters, double radius, const std::vector<ParamBlock>& blocks) {
  require(mc_iters >= 1, ErrorCode::Parameter, "lpf_sgd_step: mc_iters must be >= 1");
  require(radius >= 0.0, ErrorCode::Parameter, "lpf_sgd_step: radius must be non-negative");
  if (radius == 0.0) return sgd_step(w, grad_fn, state, lr);

  const Vector scales = lpf_noise_scales(w, blocks, radius);
  Vector mean;
  double loss = 0.0;
  for (std::size_t m = 0; m < mc_iters; ++m) {
    Vector shifted = w;
    for (std::size_t i = 0; i < w.size(); ++i) shifted[i] += 0.0 + scales[i] * state.rng.normal();
    const LossGrad lg = grad_fn(shifted);
    check_grad(lg.grad);
    loss += lg.loss;
    if (m == 0) {
      mean = lg.grad;
    } else {
      axpy(1.0, lg.grad, mean);
    }
  }
  for (double& g : mean) g /= static_cast<double>(mc_iters);
  StepInfo info{loss / static_cast<double>(mc_iters), norm2(mean), false};
  sgd_step(w, mean, state, lr);
  return info;
}

double lr_at(const LrSchedule& schedule, std::size_t epoch, std::size_t step_in_epoch,
             std::size_t steps_per_epoch) {
  if (epoch < schedule.warmup_epochs) {
    const double spe = static_cast<double>(std::max<std::size_t>(steps_per_epoch, 1));
    const double done = static_cast<double>(epoch) * spe + static_cast<double>(step_in_epoch) + 1.0;
    return schedule.base_lr * done / (static_cast<double>(schedule.warmup_epochs) * spe);
  }
  double lr = schedule.base_lr;
  for (const auto& [at, mult] : schedule.milestones) {
    if (epoch >= at) lr *= mult;
  }
  return lr;
}

double rho_at(const RhoSchedule& schedule, std::size_t epoch) {
  double rho = 0.0;
  for (const auto& [start, value] : schedule.steps) {
    if (start <= epoch) rho = value;
  }
  return rho;
}

const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::SGD: return "sgd";
    case OptimizerKind::SAM: return "sam";
    case OptimizerKind::PGD: return "pgd";
    case OptimizerKind::LPFSGD: return "lpf_sgd";
  }
  return "sgd";
}

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::SGD;
  if (s == "sam") return OptimizerKind::SAM;
  if (s == "pgd") return OptimizerKind::PGD;
  if (s == "lpf_sgd" || s == "lpfsgd") return OptimizerKind::LPFSGD;
  fail(ErrorCode::Config, "unknown optimizer kind '" + s + "'");
}

}  // namespace tailsam
