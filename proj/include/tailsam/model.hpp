#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tailsam/datagen.hpp"
#include "tailsam/linalg.hpp"
#include "tailsam/losses.hpp"

namespace tailsam {

enum class Activation { Tanh, Softplus, ReLU };

/// Fully-connected classifier: layer_sizes = (input_dim, hidden..., num_classes).
/// Hidden layers apply the activation; the output layer is linear.
struct MlpSpec {
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::Tanh;
  bool bias = true;

  std::size_t num_layers() const { return layer_sizes.size() - 1; }
  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t num_classes() const { return layer_sizes.back(); }
  void validate() const;
};

/// One contiguous parameter block. Each layer contributes a weight block
/// (out x in, row-major) followed by an optional bias block (out).
struct ParamBlock {
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool is_bias = false;

  std::size_t size() const { return rows * cols; }
};

struct ParamLayout {
  std::vector<ParamBlock> blocks;
  std::size_t total = 0;

  static ParamLayout for_spec(const MlpSpec& spec);
};

struct ParamVector {
  Vector data;
  ParamLayout layout;

  std::size_t size() const { return data.size(); }
};

ParamVector zero_params(const MlpSpec& spec);

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)); zero biases.
ParamVector init_params(const MlpSpec& spec, SeededRng& rng);

struct Batch {
  Matrix features;
  std::vector<int> labels;
  std::optional<Vector> sample_weights;

  std::size_t size() const { return labels.size(); }
};

Matrix forward(const MlpSpec& spec, std::span<const double> w, const Matrix& x);

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

LossGrad loss_grad(const MlpSpec& spec, std::span<const double> w, const Batch& batch,
                   const LossSpec& loss);

/// Exact Hessian-vector product of the batch loss (forward-over-reverse).
/// For ReLU the activation's second derivative is taken as zero everywhere,
/// giving the generalized Hessian.
Vector hvp(const MlpSpec& spec, std::span<const double> w, const Batch& batch,
           const LossSpec& loss, std::span<const double> v);

Batch per_class_batch(const LabeledDataset& ds, int class_id);
Batch full_batch(const LabeledDataset& ds);
Batch gather_batch(const LabeledDataset& ds, std::span<const std::size_t> rows);

const char* to_string(Activation a);
Activation parse_activation(const std::string& s);

}  // namespace tailsam
