#include "tailsam/losses.hpp"

#include <algorithm>
#include <cmath>

namespace tailsam {

namespace {

void check_counts(const std::vector<std::size_t>& counts) {
  require(!counts.empty(), ErrorCode::Parameter, "class counts must be non-empty");
  for (auto n : counts) require(n > 0, ErrorCode::Parameter, "class counts must be positive");
}

// Normalized per-sample coefficients w_i / sum(w).
Vector sample_coefficients(std::span<const double> weights, std::size_t rows) {
  require(weights.size() == rows, ErrorCode::Shape, "loss: weights length must equal batch rows");
  require(rows > 0, ErrorCode::Contract, "loss: empty batch");
  double total = 0.0;
  for (double w : weights) {
    require(w >= 0.0 && std::isfinite(w), ErrorCode::Parameter,
            "loss: sample weights must be finite and non-negative");
    total += w;
  }
  require(total > 0.0, ErrorCode::Contract, "loss: sample weights sum to zero");
  Vector c(rows);
  for (std::size_t i = 0; i < rows; ++i) c[i] = weights[i] / total;
  return c;
}

void check_inputs(const LogitTransform& tf, const Matrix& logits, std::span<const int> labels) {
  require(logits.rows == labels.size(), ErrorCode::Shape, "loss: logits rows != labels");
  require(logits.cols == tf.mult.size(), ErrorCode::Shape, "loss: logits cols != num_classes");
  require(all_finite(logits.values), ErrorCode::Numeric, "loss: non-finite logits");
  for (int y : labels) {
    require(y >= 0 && static_cast<std::size_t>(y) < logits.cols, ErrorCode::Shape,
            "loss: label out of range");
  }
}

// Adjusted logits and their softmax for one sample.
void softmax_row(const LogitTransform& tf, std::span<const double> z, int y, std::span<double> p,
                 double& loss) {
  const std::size_t k = z.size();
  double top = -INFINITY;
  for (std::size_t j = 0; j < k; ++j) {
    p[j] = tf.mult[j] * z[j] + tf.add[j];
    if (static_cast<int>(j) == y) p[j] -= tf.margin[j];
    top = std::max(top, p[j]);
  }
  const double uy = p[static_cast<std::size_t>(y)];
  double sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    p[j] = std::exp(p[j] - top);
    sum += p[j];
  }
  for (std::size_t j = 0; j < k; ++j) p[j] /= sum;
  loss = top + std::log(sum) - uy;
}

}  // namespace

void LossSpec::validate() const {
  check_counts(class_counts);
  if (class_weights) {
    require(class_weights->size() == class_counts.size(), ErrorCode::Parameter,
            "class_weights length must equal num_classes");
    for (double w : *class_weights) {
      require(w > 0.0, ErrorCode::Parameter, "class_weights must be strictly positive");
    }
  }
  require(ldam_max_margin > 0.0, ErrorCode::Parameter, "ldam_max_margin must be positive");
}

Vector drw_weights(const ReweightSchedule& sched, std::size_t epoch) {
  check_counts(sched.class_counts);
  Vector w(sched.class_counts.size(), 1.0);
  if (epoch >= sched.threshold_epoch) {
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] = 1.0 / (1.0 + (static_cast<double>(sched.class_counts[j]) - 1.0));
    }
  }
  return w;
}

Vector ldam_margins(const std::vector<std::size_t>& counts, double max_margin) {
  check_counts(counts);
  require(max_margin > 0.0, ErrorCode::Parameter, "max_margin must be positive");
  Vector m(counts.size());
  for (std::size_t j = 0; j < counts.size(); ++j) {
    m[j] = 1.0 / std::sqrt(std::sqrt(static_cast<double>(counts[j])));
  }
  const double top = *std::max_element(m.begin(), m.end());
  for (double& x : m) x *= max_margin / top;
  return m;
}

VsAdjustments vs_adjustments(const std::vector<std::size_t>& counts, double gamma, double tau) {
  check_counts(counts);
  double n_max = 0.0;
  double total = 0.0;
  for (auto n : counts) {
    n_max = std::max(n_max, static_cast<double>(n));
    total += static_cast<double>(n);
  }
  VsAdjustments out{Vector(counts.size()), Vector(counts.size())};
  for (std::size_t j = 0; j < counts.size(); ++j) {
    const double n = static_cast<double>(counts[j]);
    out.mult[j] = std::pow(n / n_max, gamma);
    out.add[j] = tau * std::log(n / total);
  }
  return out;
}

LogitTransform LogitTransform::from(const LossSpec& spec) {
  spec.validate();
  const std::size_t k = spec.num_classes();
  LogitTransform tf{Vector(k, 1.0), Vector(k, 0.0), Vector(k, 0.0)};
  switch (spec.variant) {
    case LossVariant::CE:
      break;
    case LossVariant::LDAM:
      tf.margin = ldam_margins(spec.class_counts, spec.ldam_max_margin);
      break;
    case LossVariant::VS: {
      auto adj = vs_adjustments(spec.class_counts, spec.vs_gamma, spec.vs_tau);
      tf.mult = std::move(adj.mult);
      tf.add = std::move(adj.add);
      break;
    }
  }
  return tf;
}

LogitLoss loss_on_logits(const LossSpec& spec, const Matrix& logits, std::span<const int> labels,
                         std::span<const double> weights) {
  return loss_on_logits(LogitTransform::from(spec), logits, labels, weights);
}

LogitLoss loss_on_logits(const LogitTransform& tf, const Matrix& logits,
                         std::span<const int> labels, std::span<const double> weights) {
  check_inputs(tf, logits, labels);
  const Vector coef = sample_coefficients(weights, logits.rows);
  const std::size_t k = logits.cols;
  LogitLoss out{0.0, Matrix(logits.rows, k)};
  Vector p(k);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    double li = 0.0;
    softmax_row(tf, logits.row(i), labels[i], p, li);
    out.value += coef[i] * li;
    auto g = out.grad_logits.row(i);
    for (std::size_t j = 0; j < k; ++j) {
      const double indicator = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
      g[j] = coef[i] * tf.mult[j] * (p[j] - indicator);
    }
  }
  return out;
}

Matrix logit_hessian_apply(const LogitTransform& tf, const Matrix& logits,
                           std::span<const int> labels, std::span<const double> weights,
                           const Matrix& direction) {
  check_inputs(tf, logits, labels);
  require(direction.rows == logits.rows && direction.cols == logits.cols, ErrorCode::Shape,
          "logit_hessian_apply: direction shape mismatch");
  const Vector coef = sample_coefficients(weights, logits.rows);
  const std::size_t k = logits.cols;
  Matrix out(logits.rows, k);
  Vector p(k), gr(k);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    double li = 0.0;
    softmax_row(tf, logits.row(i), labels[i], p, li);
    const auto r = direction.row(i);
    double pr = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      gr[j] = tf.mult[j] * r[j];
      pr += p[j] * gr[j];
    }
    auto o = out.row(i);
    for (std::size_t j = 0; j < k; ++j) o[j] = coef[i] * tf.mult[j] * p[j] * (gr[j] - pr);
  }
  return out;
}

const char* to_string(LossVariant v) {
  switch (v) {
    case LossVariant::CE: return "ce";
    case LossVariant::LDAM: return "ldam";
    case LossVariant::VS: return "vs";
  }
  return "ce";
}

LossVariant parse_loss_variant(const std::string& s) {
  if (s == "ce") return LossVariant::CE;
  if (s == "ldam") return LossVariant::LDAM;
  if (s == "vs") return LossVariant::VS;
  fail(ErrorCode::Config, "unknown loss variant '" + s + "'");
}

}  // namespace tailsam
