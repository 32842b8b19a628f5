#include "tailsam/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>

#include "json.hpp"

namespace tailsam {

namespace {

constexpr double kInvariantTol = 1e-10;

void orthogonalize(const std::vector<Vector>& basis, Vector& w) {
  // Two passes of classical Gram-Schmidt against the whole basis.
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& q : basis) axpy(-dot(q, w), q, w);
  }
}

void fix_sign(Vector& v) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  }
  if (!v.empty() && v[arg] < 0.0) scale(v, -1.0);
}

struct RitzPair {
  double value;
  Vector vector;
};

RitzPair ritz_pair(const LanczosResult& lr, const TridiagonalEigen& te, std::size_t which) {
  Vector y(lr.basis.front().size(), 0.0);
  for (std::size_t j = 0; j < lr.steps(); ++j) axpy(te.vectors(j, which), lr.basis[j], y);
  scale(y, 1.0 / norm2(y));
  return {te.values[which], std::move(y)};
}

// Power iteration on sign * (H - shift I); returns the refined pair.
RitzPair refine(const SymmetricOperator& op, RitzPair start, double shift, double sign,
                const ExtremeSettings& settings, double& res, std::size_t& iters) {
  Vector v = std::move(start.vector);
  double lambda = start.value;
  for (;;) {
    Vector hv = op(v);
    lambda = dot(v, hv);
    Vector r = hv;
    axpy(-lambda, v, r);
    res = norm2(r);
    if (res < settings.tol || iters >= settings.max_refinement_iters) break;
    ++iters;
    Vector next = hv;
    axpy(-shift, v, next);
    scale(next, sign);
    const double n = norm2(next);
    if (n == 0.0) break;
    scale(next, 1.0 / n);
    v = std::move(next);
  }
  return {lambda, std::move(v)};
}

}  // namespace

SymmetricOperator dense_operator(Matrix m) {
  require(m.rows == m.cols, ErrorCode::Dimension, "dense_operator: matrix must be square");
  const std::size_t n = m.rows;
  return {n, [m = std::move(m)](std::span<const double> v) { return matvec(m, v); }};
}

SymmetricOperator hvp_oracle(const MlpSpec& spec, std::span<const double> w, Batch batch,
                             LossSpec loss) {
  Vector params(w.begin(), w.end());
  const std::size_t n = params.size();
  return {n, [spec, params = std::move(params), batch = std::move(batch),
              loss = std::move(loss)](std::span<const double> v) {
            return hvp(spec, params, batch, loss, v);
          }};
}

SymmetricOperator negated(SymmetricOperator op) {
  const std::size_t n = op.dim;
  return {n, [inner = std::move(op.apply)](std::span<const double> v) {
            Vector out = inner(v);
            scale(out, -1.0);
            return out;
          }};
}

LanczosResult lanczos(const SymmetricOperator& op, std::size_t iters, SeededRng& rng,
                      bool keep_basis) {
  require(op.dim >= 1, ErrorCode::Dimension, "lanczos: operator dimension must be positive");
  return lanczos_from(op, gaussian_vector(rng, op.dim, 0.0, 1.0), iters, keep_basis);
}

LanczosResult lanczos_from(const SymmetricOperator& op, Vector start, std::size_t iters,
                           bool keep_basis) {
  require(start.size() == op.dim, ErrorCode::Dimension, "lanczos: start vector length != dim");
  require(iters >= 1, ErrorCode::Parameter, "lanczos: need at least one iteration");
  const std::size_t k = std::min(iters, op.dim);
  const double n0 = norm2(start);
  require(n0 > 0.0, ErrorCode::Numeric, "lanczos: zero start vector");
  scale(start, 1.0 / n0);

  LanczosResult out;
  std::vector<Vector> basis{std::move(start)};
  double op_norm = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    Vector w = op(basis[j]);
    require(w.size() == op.dim, ErrorCode::Dimension, "lanczos: operator changed dimension");
    require(all_finite(w), ErrorCode::Numeric, "lanczos: non-finite operator output");
    op_norm = std::max(op_norm, norm2(w));
    const double alpha = dot(basis[j], w);
    axpy(-alpha, basis[j], w);
    if (j > 0) axpy(-out.betas.back(), basis[j - 1], w);
    orthogonalize(basis, w);
    out.alphas.push_back(alpha);
    if (j + 1 == k) break;
    const double beta = norm2(w);
    if (beta <= kInvariantTol * op_norm) {
      out.terminated_early = true;
      break;
    }
    out.betas.push_back(beta);
    scale(w, 1.0 / beta);
    basis.push_back(std::move(w));
  }
  if (keep_basis) out.basis = std::move(basis);
  return out;
}

TridiagonalEigen tridiagonal_eigen(std::span<const double> diag, std::span<const double> offdiag) {
  const std::size_t n = diag.size();
  require(n >= 1, ErrorCode::Dimension, "tridiagonal_eigen: empty matrix");
  require(offdiag.size() + 1 == n, ErrorCode::Dimension,
          "tridiagonal_eigen: off-diagonal must have n - 1 entries");
  Vector d(diag.begin(), diag.end());
  Vector e(n, 0.0);
  std::copy(offdiag.begin(), offdiag.end(), e.begin());
  Matrix z = Matrix::identity(n);

  constexpr double eps = std::numeric_limits<double>::epsilon();
  for (std::size_t l = 0; l < n; ++l) {
    int iter = 0;
    std::size_t m;
    do {
      for (m = l; m + 1 < n; ++m) {
        const double dd = std::abs(d[m]) + std::abs(d[m + 1]);
        if (std::abs(e[m]) <= eps * dd) break;
      }
      if (m == l) break;
      if (++iter > 100) fail(ErrorCode::Numeric, "tridiagonal_eigen: QL did not converge");

      double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
      double r = std::hypot(g, 1.0);
      g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
      double s = 1.0, c = 1.0, p = 0.0;
      bool deflated = false;
      for (std::size_t i = m; i-- > l;) {
        double f = s * e[i];
        const double b = c * e[i];
        r = std::hypot(f, g);
        e[i + 1] = r;
        if (r == 0.0) {
          d[i + 1] -= p;
          e[m] = 0.0;
          deflated = true;
          break;
        }
        s = f / r;
        c = g / r;
        g = d[i + 1] - p;
        r = (d[i] - g) * s + 2.0 * c * b;
        p = s * r;
        d[i + 1] = g + p;
        g = c * r - b;
        for (std::size_t k = 0; k < n; ++k) {
          f = z(k, i + 1);
          z(k, i + 1) = s * z(k, i) + c * f;
          z(k, i) = c * z(k, i) - s * f;
        }
      }
      if (deflated) continue;
      d[l] -= p;
      e[l] = g;
      e[m] = 0.0;
    } while (m != l);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return d[a] < d[b]; });
  TridiagonalEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = d[order[j]];
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = z(k, order[j]);
  }
  return out;
}

double SpectralDensity::mass() const {
  double total = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    total += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
  }
  return total;
}

SpectralDensity spectral_density(const SymmetricOperator& op, std::size_t iters,
                                 std::size_t num_probes, double broadening_sigma2,
                                 const GridSpec& grid, SeededRng& rng) {
  require(num_probes >= 1, ErrorCode::Parameter, "spectral_density: need at least one probe");
  require(broadening_sigma2 > 0.0, ErrorCode::Parameter, "broadening_sigma2 must be positive");
  SpectralDensity sd;
  sd.broadening_sigma2 = broadening_sigma2;
  sd.num_probes = num_probes;
  sd.lanczos_iters = std::min(iters, op.dim);

  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t p = 0; p < num_probes; ++p) {
    const LanczosResult lr = lanczos(op, iters, rng);
    const TridiagonalEigen te = tridiagonal_eigen(lr.alphas, lr.betas);
    Vector weights(te.values.size());
    for (std::size_t j = 0; j < weights.size(); ++j) {
      weights[j] = te.vectors(0, j) * te.vectors(0, j);
    }
    lo = std::min(lo, te.values.front());
    hi = std::max(hi, te.values.back());
    sd.ritz_values.push_back(te.values);
    sd.ritz_weights.push_back(std::move(weights));
  }

  sd.effective_variance = broadening_sigma2 * std::max(1.0, hi - lo);
  const double sigma = std::sqrt(sd.effective_variance);
  const double g_lo = grid.lo.value_or(lo - 8.0 * sigma);
  const double g_hi = grid.hi.value_or(hi + 8.0 * sigma);
  require(g_hi > g_lo, ErrorCode::Parameter, "spectral_density: empty grid range");
  const auto needed = static_cast<std::size_t>(std::ceil((g_hi - g_lo) / (0.25 * sigma))) + 1;
  const std::size_t points = std::max({grid.min_points, needed, std::size_t{2}});

  sd.grid.resize(points);
  sd.density.assign(points, 0.0);
  const double step = (g_hi - g_lo) / static_cast<double>(points - 1);
  for (std::size_t i = 0; i < points; ++i) sd.grid[i] = g_lo + step * static_cast<double>(i);

  const double norm = 1.0 / (std::sqrt(2.0 * std::numbers::pi * sd.effective_variance) *
                             static_cast<double>(num_probes));
  const double cutoff = 12.0 * sigma;
  for (std::size_t p = 0; p < num_probes; ++p) {
    for (std::size_t j = 0; j < sd.ritz_values[p].size(); ++j) {
      const double node = sd.ritz_values[p][j];
      const double weight = sd.ritz_weights[p][j] * norm;
      const auto first = static_cast<std::ptrdiff_t>(std::floor((node - cutoff - g_lo) / step));
      const auto last = static_cast<std::ptrdiff_t>(std::ceil((node + cutoff - g_lo) / step));
      const auto begin = static_cast<std::size_t>(std::max<std::ptrdiff_t>(first, 0));
      const auto end = static_cast<std::size_t>(
          std::clamp<std::ptrdiff_t>(last + 1, 0, static_cast<std::ptrdiff_t>(points)));
      for (std::size_t i = begin; i < end; ++i) {
        const double dx = sd.grid[i] - node;
        sd.density[i] += weight * std::exp(-dx * dx / (2.0 * sd.effective_variance));
      }
    }
  }
  return sd;
}

ExtremeEigs extreme_eigs(const SymmetricOperator& op, const ExtremeSettings& settings,
                         SeededRng& rng) {
  require(settings.iters >= 2, ErrorCode::Parameter, "extreme_eigs: need at least 2 iterations");
  const LanczosResult lr = lanczos(op, settings.iters, rng, true);
  const TridiagonalEigen te = tridiagonal_eigen(lr.alphas, lr.betas);
  RitzPair bottom = ritz_pair(lr, te, 0);
  RitzPair top = ritz_pair(lr, te, te.values.size() - 1);

  ExtremeEigs out;
  // The shifts only need to sit at or beyond the opposite end of the spectrum.
  const double top_shift = top.value;
  const double bottom_shift = bottom.value;
  RitzPair refined_bottom =
      refine(op, std::move(bottom), top_shift, -1.0, settings, out.residual_min, out.refinement_iters);
  RitzPair refined_top =
      refine(op, std::move(top), bottom_shift, 1.0, settings, out.residual_max, out.refinement_iters);

  out.lambda_min = refined_bottom.value;
  out.lambda_max = refined_top.value;
  out.v_min = std::move(refined_bottom.vector);
  out.v_max = std::move(refined_top.vector);
  fix_sign(out.v_min);
  fix_sign(out.v_max);
  out.converged = out.residual_min < settings.tol && out.residual_max < settings.tol;
  return out;
}

double nonconvexity_ratio(const ExtremeEigs& e) {
  if (e.lambda_max == 0.0) fail(ErrorCode::UndefinedRatio, "nonconvexity ratio: lambda_max is 0");
  if (e.lambda_min > 0.0) return 0.0;
  return std::abs(e.lambda_min / e.lambda_max);
}

namespace {

ClassSpectrum analyse(const MlpSpec& spec, std::span<const double> w, const Batch& batch,
                      const LossSpec& loss, const SpectrumSettings& settings, SeededRng& rng,
                      const Batch& eval, int class_id) {
  ClassSpectrum out;
  out.class_id = class_id;
  out.sample_count = batch.size();
  out.generalized_hessian = spec.activation == Activation::ReLU;
  const SymmetricOperator op = hvp_oracle(spec, w, batch, loss);
  out.density = spectral_density(op, settings.iters, settings.num_probes,
                                 settings.broadening_sigma2, settings.grid, rng);
  out.extremes = extreme_eigs(op, settings.extremes, rng);
  if (out.extremes.lambda_max != 0.0) out.ratio = nonconvexity_ratio(out.extremes);
  out.class_loss = loss_grad(spec, w, batch, loss).loss;

  const Matrix logits = forward(spec, w, eval.features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto row = logits.row(i);
    const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
    if (pred == eval.labels[i]) ++correct;
  }
  out.class_accuracy =
      eval.size() ? static_cast<double>(correct) / static_cast<double>(eval.size()) : 0.0;
  return out;
}

}  // namespace

ClasswiseReport classwise_spectrum_report(const MlpSpec& spec, std::span<const double> w,
                                          const LabeledDataset& ds, const LossSpec& loss,
                                          const std::vector<int>& classes,
                                          const SpectrumSettings& settings, SeededRng& rng,
                                          const LabeledDataset* eval) {
  require(!classes.empty(), ErrorCode::Parameter, "classwise report: no classes requested");
  const LabeledDataset& acc_set = eval ? *eval : ds;
  ClasswiseReport report;
  // Every analysis gets the same probes so class spectra differ only through
  // their Hessians.
  const std::uint64_t probe_seed = rng.next_u64();
  for (int c : classes) {
    SeededRng sub(probe_seed, 0);
    const Batch batch = per_class_batch(ds, c);
    const Batch eval_batch = per_class_batch(acc_set, c);
    report.classes.push_back(analyse(spec, w, batch, loss, settings, sub, eval_batch, c));
  }
  SeededRng sub(probe_seed, 0);
  report.full = analyse(spec, w, full_batch(ds), loss, settings, sub, full_batch(acc_set), -1);
  return report;
}

void write_spectrum(const std::filesystem::path& stem, const ClassSpectrum& s,
                    const SpectrumSettings& settings, std::uint64_t seed) {
  const auto csv_path = std::filesystem::path(stem.string() + ".csv");
  const auto json_path = std::filesystem::path(stem.string() + ".json");
  {
    std::ofstream csv(csv_path);
    if (!csv) fail(ErrorCode::Io, "cannot write " + csv_path.string());
    csv << "eigenvalue,density\n";
    char buf[64];
    for (std::size_t i = 0; i < s.density.grid.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", s.density.grid[i], s.density.density[i]);
      csv << buf;
    }
  }
  nlohmann::json j;
  j["class_id"] = s.class_id;
  j["sample_count"] = s.sample_count;
  j["generalized_hessian"] = s.generalized_hessian;
  j["ritz_values"] = s.density.ritz_values;
  j["ritz_weights"] = s.density.ritz_weights;
  j["mass"] = s.density.mass();
  j["effective_variance"] = s.density.effective_variance;
  j["lambda_min"] = s.extremes.lambda_min;
  j["lambda_max"] = s.extremes.lambda_max;
  j["residual_min"] = s.extremes.residual_min;
  j["residual_max"] = s.extremes.residual_max;
  j["converged"] = s.extremes.converged;
  j["v_min"] = s.extremes.v_min;
  j["nonconvexity_ratio"] = s.ratio ? nlohmann::json(*s.ratio) : nlohmann::json(nullptr);
  j["class_loss"] = s.class_loss;
  j["class_accuracy"] = s.class_accuracy;
  j["settings"] = {{"lanczos_iters", settings.iters},
                   {"num_probes", settings.num_probes},
                   {"broadening_sigma2", settings.broadening_sigma2},
                   {"grid_min_points", settings.grid.min_points},
                   {"extreme_iters", settings.extremes.iters},
                   {"extreme_tol", settings.extremes.tol},
                   {"max_refinement_iters", settings.extremes.max_refinement_iters}};
  j["seed"] = seed;
  std::ofstream out(json_path);
  if (!out) fail(ErrorCode::Io, "cannot write " + json_path.string());
  out << j.dump(2) << '\n';
}

}  // namespace tailsam
