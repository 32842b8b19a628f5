#include "tailsam/model.hpp"

#include <cmath>

namespace tailsam {

namespace {

struct ActivationDerivs {
  double value, d1, d2;
};

ActivationDerivs activate(Activation a, double z) {
  switch (a) {
    case Activation::Tanh: {
      const double t = std::tanh(z);
      const double s = 1.0 - t * t;
      return {t, s, -2.0 * t * s};
    }
    case Activation::Softplus: {
      const double value = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      const double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      return {value, sig, sig * (1.0 - sig)};
    }
    case Activation::ReLU:
      return {z > 0.0 ? z : 0.0, z > 0.0 ? 1.0 : 0.0, 0.0};
  }
  return {z, 1.0, 0.0};
}

struct Layer {
  const double* weight;  // out x in
  const double* bias;    // out, or null
  std::size_t in, out;
};

std::vector<Layer> layers_of(const MlpSpec& spec, const ParamLayout& layout,
                             std::span<const double> w) {
  std::vector<Layer> layers;
  std::size_t b = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const ParamBlock& wb = layout.blocks[b++];
    const double* bias = nullptr;
    if (spec.bias) bias = w.data() + layout.blocks[b++].offset;
    layers.push_back({w.data() + wb.offset, bias, wb.cols, wb.rows});
  }
  return layers;
}

// z = a W^T + b for a batch a (n x in).
Matrix affine(const Matrix& a, const Layer& layer) {
  Matrix z(a.rows, layer.out);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const auto ai = a.row(i);
    auto zi = z.row(i);
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double* wo = layer.weight + o * layer.in;
      double s = layer.bias ? layer.bias[o] : 0.0;
      for (std::size_t k = 0; k < layer.in; ++k) s += wo[k] * ai[k];
      zi[o] = s;
    }
  }
  return z;
}

// a (n x out) -> a W (n x in).
Matrix backprop_through(const Matrix& delta, const Layer& layer) {
  Matrix out(delta.rows, layer.in);
  for (std::size_t i = 0; i < delta.rows; ++i) {
    const auto di = delta.row(i);
    auto oi = out.row(i);
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double d = di[o];
      const double* wo = layer.weight + o * layer.in;
      for (std::size_t k = 0; k < layer.in; ++k) oi[k] += d * wo[k];
    }
  }
  return out;
}

// grad_W += delta^T a, grad_b += column sums of delta.
void accumulate_param_grad(const Matrix& delta, const Matrix& a, double* gw, double* gb) {
  for (std::size_t i = 0; i < delta.rows; ++i) {
    const auto di = delta.row(i);
    const auto ai = a.row(i);
    for (std::size_t o = 0; o < delta.cols; ++o) {
      const double d = di[o];
      double* go = gw + o * a.cols;
      for (std::size_t k = 0; k < a.cols; ++k) go[k] += d * ai[k];
      if (gb) gb[o] += d;
    }
  }
}

struct ForwardPass {
  std::vector<Matrix> acts;  // acts[0] = x, acts[l] = output of layer l (l >= 1)
  std::vector<Matrix> pre;   // pre[l-1] = pre-activation of layer l
};

ForwardPass run_forward(const MlpSpec& spec, const std::vector<Layer>& layers, const Matrix& x) {
  ForwardPass fp;
  fp.acts.push_back(x);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix z = affine(fp.acts.back(), layers[l]);
    Matrix a = z;
    if (l + 1 < layers.size()) {
      for (double& v : a.values) v = activate(spec.activation, v).value;
    }
    fp.pre.push_back(std::move(z));
    fp.acts.push_back(std::move(a));
  }
  return fp;
}

void check_params(const MlpSpec& spec, const ParamLayout& layout, std::span<const double> w,
                  const Matrix& x) {
  require(w.size() == layout.total, ErrorCode::Shape,
          "parameter vector length " + std::to_string(w.size()) + " does not match spec (" +
              std::to_string(layout.total) + ")");
  require(x.cols == spec.input_dim(), ErrorCode::Shape, "feature columns != input_dim");
}

Vector resolve_weights(const Batch& batch, const LossSpec& loss) {
  Vector w(batch.size(), 1.0);
  if (batch.sample_weights) {
    require(batch.sample_weights->size() == batch.size(), ErrorCode::Shape,
            "sample_weights length != batch rows");
    w = *batch.sample_weights;
  }
  if (loss.class_weights) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] *= (*loss.class_weights)[static_cast<std::size_t>(batch.labels[i])];
    }
  }
  return w;
}

}  // namespace

void MlpSpec::validate() const {
  require(layer_sizes.size() >= 2, ErrorCode::Shape, "MlpSpec needs at least one layer");
  for (auto n : layer_sizes) require(n >= 1, ErrorCode::Shape, "layer sizes must be positive");
}

ParamLayout ParamLayout::for_spec(const MlpSpec& spec) {
  spec.validate();
  ParamLayout layout;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.layer_sizes[l];
    const std::size_t out = spec.layer_sizes[l + 1];
    layout.blocks.push_back({layout.total, out, in, false});
    layout.total += out * in;
    if (spec.bias) {
      layout.blocks.push_back({layout.total, out, 1, true});
      layout.total += out;
    }
  }
  return layout;
}

ParamVector zero_params(const MlpSpec& spec) {
  ParamVector p;
  p.layout = ParamLayout::for_spec(spec);
  p.data.assign(p.layout.total, 0.0);
  return p;
}

ParamVector init_params(const MlpSpec& spec, SeededRng& rng) {
  ParamVector p = zero_params(spec);
  for (const auto& b : p.layout.blocks) {
    if (b.is_bias) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(b.rows + b.cols));
    for (std::size_t i = 0; i < b.size(); ++i) {
      p.data[b.offset + i] = limit * (2.0 * rng.uniform() - 1.0);
    }
  }
  return p;
}

Matrix forward(const MlpSpec& spec, std::span<const double> w, const Matrix& x) {
  const auto layout = ParamLayout::for_spec(spec);
  check_params(spec, layout, w, x);
  const auto layers = layers_of(spec, layout, w);
  return std::move(run_forward(spec, layers, x).acts.back());
}

LossGrad loss_grad(const MlpSpec& spec, std::span<const double> w, const Batch& batch,
                   const LossSpec& loss) {
  require(batch.size() > 0, ErrorCode::Contract, "loss_grad: empty batch");
  require(batch.features.rows == batch.size(), ErrorCode::Shape, "batch rows != labels");
  const auto layout = ParamLayout::for_spec(spec);
  check_params(spec, layout, w, batch.features);
  const auto layers = layers_of(spec, layout, w);
  const ForwardPass fp = run_forward(spec, layers, batch.features);

  const Vector weights = resolve_weights(batch, loss);
  const LogitTransform tf = LogitTransform::from(loss);
  LogitLoss ll = loss_on_logits(tf, fp.acts.back(), batch.labels, weights);

  LossGrad out{ll.value, Vector(layout.total, 0.0)};
  Matrix delta = std::move(ll.grad_logits);
  std::size_t b = layout.blocks.size();
  for (std::size_t l = layers.size(); l-- > 0;) {
    double* gb = nullptr;
    if (spec.bias) gb = out.grad.data() + layout.blocks[--b].offset;
    double* gw = out.grad.data() + layout.blocks[--b].offset;
    accumulate_param_grad(delta, fp.acts[l], gw, gb);
    if (l == 0) break;
    Matrix da = backprop_through(delta, layers[l]);
    const Matrix& z = fp.pre[l - 1];
    for (std::size_t i = 0; i < da.values.size(); ++i) {
      da.values[i] *= activate(spec.activation, z.values[i]).d1;
    }
    delta = std::move(da);
  }
  return out;
}

Vector hvp(const MlpSpec& spec, std::span<const double> w, const Batch& batch,
           const LossSpec& loss, std::span<const double> v) {
  require(batch.size() > 0, ErrorCode::Contract, "hvp: empty batch");
  const auto layout = ParamLayout::for_spec(spec);
  check_params(spec, layout, w, batch.features);
  require(v.size() == w.size(), ErrorCode::Shape, "hvp: direction length != parameter length");
  const auto layers = layers_of(spec, layout, w);
  const auto dirs = layers_of(spec, layout, v);
  const ForwardPass fp = run_forward(spec, layers, batch.features);
  const std::size_t depth = layers.size();

  // Tangent (R-operator) forward pass: r_pre[l] = d pre[l], r_act[l] = d acts[l].
  std::vector<Matrix> r_act(depth + 1);
  std::vector<Matrix> r_pre(depth);
  r_act[0] = Matrix(batch.size(), spec.input_dim());
  for (std::size_t l = 0; l < depth; ++l) {
    Layer tangent_weights = dirs[l];
    Matrix rz = affine(fp.acts[l], tangent_weights);
    Layer no_bias = layers[l];
    no_bias.bias = nullptr;
    const Matrix through = affine(r_act[l], no_bias);
    for (std::size_t i = 0; i < rz.values.size(); ++i) rz.values[i] += through.values[i];
    Matrix ra = rz;
    if (l + 1 < depth) {
      for (std::size_t i = 0; i < ra.values.size(); ++i) {
        ra.values[i] *= activate(spec.activation, fp.pre[l].values[i]).d1;
      }
    }
    r_pre[l] = std::move(rz);
    r_act[l + 1] = std::move(ra);
  }

  const Vector weights = resolve_weights(batch, loss);
  const LogitTransform tf = LogitTransform::from(loss);
  const Matrix& logits = fp.acts.back();
  Matrix delta = loss_on_logits(tf, logits, batch.labels, weights).grad_logits;
  Matrix r_delta = logit_hessian_apply(tf, logits, batch.labels, weights, r_act.back());

  Vector out(layout.total, 0.0);
  std::size_t b = layout.blocks.size();
  for (std::size_t l = depth; l-- > 0;) {
    double* gb = nullptr;
    if (spec.bias) gb = out.data() + layout.blocks[--b].offset;
    double* gw = out.data() + layout.blocks[--b].offset;
    // d(delta^T a) = r_delta^T a + delta^T r_a
    accumulate_param_grad(r_delta, fp.acts[l], gw, gb);
    accumulate_param_grad(delta, r_act[l], gw, nullptr);
    if (l == 0) break;

    Matrix da = backprop_through(delta, layers[l]);
    Matrix r_da = backprop_through(r_delta, layers[l]);
    const Matrix via_dir = backprop_through(delta, dirs[l]);
    for (std::size_t i = 0; i < r_da.values.size(); ++i) r_da.values[i] += via_dir.values[i];

    const Matrix& z = fp.pre[l - 1];
    const Matrix& rz = r_pre[l - 1];
    for (std::size_t i = 0; i < da.values.size(); ++i) {
      const auto act = activate(spec.activation, z.values[i]);
      r_da.values[i] = act.d2 * rz.values[i] * da.values[i] + act.d1 * r_da.values[i];
      da.values[i] *= act.d1;
    }
    delta = std::move(da);
    r_delta = std::move(r_da);
  }
  return out;
}

Batch gather_batch(const LabeledDataset& ds, std::span<const std::size_t> rows) {
  Batch batch;
  batch.features = Matrix(rows.size(), ds.features.cols);
  batch.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = ds.features.row(rows[i]);
    std::copy(src.begin(), src.end(), batch.features.row(i).begin());
    batch.labels[i] = ds.labels[rows[i]];
  }
  return batch;
}

Batch full_batch(const LabeledDataset& ds) {
  return Batch{ds.features, ds.labels, std::nullopt};
}

Batch per_class_batch(const LabeledDataset& ds, int class_id) {
  const LabeledDataset sub = class_subset(ds, class_id);
  return Batch{sub.features, sub.labels, std::nullopt};
}

const char* to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Softplus: return "softplus";
    case Activation::ReLU: return "relu";
  }
  return "tanh";
}

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "softplus") return Activation::Softplus;
  if (s == "relu") return Activation::ReLU;
  fail(ErrorCode::Config, "unknown activation '" + s + "'");
}

}  // namespace tailsam
