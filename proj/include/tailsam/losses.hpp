#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tailsam/linalg.hpp"

namespace tailsam {

enum class LossVariant { CE, LDAM, VS };

/// Loss family plus its per-class hyperparameters.
///
/// LDAM subtracts a margin from the true-class logit; VS scales every logit
/// by gamma_j and adds delta_j. Both reduce to cross-entropy in their
/// degenerate settings. LDAM here works on raw logits (no feature or weight
/// normalization).
struct LossSpec {
  LossVariant variant = LossVariant::CE;
  std::optional<Vector> class_weights;
  double ldam_max_margin = 0.5;
  double vs_gamma = 0.05;
  double vs_tau = 0.75;
  std::vector<std::size_t> class_counts;

  std::size_t num_classes() const { return class_counts.size(); }
  void validate() const;
};

/// Deferred re-weighting: uniform weights before threshold_epoch, 1/n_j after.
struct ReweightSchedule {
  std::size_t threshold_epoch = 0;
  std::vector<std::size_t> class_counts;
};

/// Raw (unnormalized) class weights for `epoch`: 1 / (1 + (n_j - 1) [epoch >= K]).
Vector drw_weights(const ReweightSchedule& sched, std::size_t epoch);

/// C / n_j^(1/4) with C chosen so the largest margin equals max_margin.
Vector ldam_margins(const std::vector<std::size_t>& counts, double max_margin);

struct VsAdjustments {
  Vector mult;  // gamma_j = (n_j / n_max)^gamma
  Vector add;   // delta_j = tau * log(n_j / sum_k n_k)
};

VsAdjustments vs_adjustments(const std::vector<std::size_t>& counts, double gamma, double tau);

/// Per-class logit transform u_j = mult_j * z_j + add_j - [j == y] margin_y.
struct LogitTransform {
  Vector mult;
  Vector add;
  Vector margin;

  static LogitTransform from(const LossSpec& spec);
};

struct LogitLoss {
  double value = 0.0;
  Matrix grad_logits;
};

/// Weighted mean of per-sample losses and its exact gradient in the logits.
/// `weights` are per-sample and are normalized to mean 1 here, so the value
/// is sum_i w_i l_i / sum_i w_i.
LogitLoss loss_on_logits(const LossSpec& spec, const Matrix& logits, std::span<const int> labels,
                         std::span<const double> weights);

/// Same objective, precomputed transform (avoids re-deriving margins per call).
LogitLoss loss_on_logits(const LogitTransform& tf, const Matrix& logits,
                         std::span<const int> labels, std::span<const double> weights);

/// Second derivative of the loss_on_logits objective applied to `direction`
/// (one row per sample).
Matrix logit_hessian_apply(const LogitTransform& tf, const Matrix& logits,
                           std::span<const int> labels, std::span<const double> weights,
                           const Matrix& direction);

const char* to_string(LossVariant v);
LossVariant parse_loss_variant(const std::string& s);

}  // namespace tailsam
