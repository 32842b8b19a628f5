#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "tailsam/datagen.hpp"
#include "tailsam/linalg.hpp"
#include "tailsam/losses.hpp"
#include "tailsam/model.hpp"

namespace tailsam {

/// A symmetric linear operator known only through its action.
struct SymmetricOperator {
  std::size_t dim = 0;
  std::function<Vector(std::span<const double>)> apply;

  Vector operator()(std::span<const double> v) const { return apply(v); }
};

SymmetricOperator dense_operator(Matrix m);

/// Hessian of the batch loss at w. The operator owns copies of its inputs.
SymmetricOperator hvp_oracle(const MlpSpec& spec, std::span<const double> w, Batch batch,
                             LossSpec loss);

SymmetricOperator negated(SymmetricOperator op);

struct LanczosResult {
  Vector alphas;               // diagonal, length k
  Vector betas;                // off-diagonal, length k - 1
  std::vector<Vector> basis;   // Krylov basis, only when requested
  bool terminated_early = false;

  std::size_t steps() const { return alphas.size(); }
};

/// k steps of Lanczos with full reorthogonalization from a normalized Gaussian
/// probe. Stops early (terminated_early) when the Krylov space becomes
/// invariant.
LanczosResult lanczos(const SymmetricOperator& op, std::size_t iters, SeededRng& rng,
                      bool keep_basis = false);

LanczosResult lanczos_from(const SymmetricOperator& op, Vector start, std::size_t iters,
                           bool keep_basis = false);

struct TridiagonalEigen {
  Vector values;   // ascending
  Matrix vectors;  // column j is the eigenvector of values[j]
};

/// Implicit QL with Wilkinson shifts on a symmetric tridiagonal matrix.
TridiagonalEigen tridiagonal_eigen(std::span<const double> diag, std::span<const double> offdiag);

struct GridSpec {
  std::size_t min_points = 10000;
  std::optional<double> lo;
  std::optional<double> hi;
};

struct SpectralDensity {
  std::vector<Vector> ritz_values;   // per probe
  std::vector<Vector> ritz_weights;  // per probe, sum to 1
  Vector grid;
  Vector density;
  double broadening_sigma2 = 1e-5;
  double effective_variance = 1e-5;  // broadening_sigma2 * max(1, spectral range)
  std::size_t num_probes = 0;
  std::size_t lanczos_iters = 0;

  /// Trapezoid integral of density over grid.
  double mass() const;
};

/// Stochastic Lanczos quadrature averaged over probes, each Ritz node
/// broadened by a Gaussian. The grid spacing is at most a quarter of the
/// broadening width; `grid.min_points` only raises the resolution.
SpectralDensity spectral_density(const SymmetricOperator& op, std::size_t iters,
                                 std::size_t num_probes, double broadening_sigma2,
                                 const GridSpec& grid, SeededRng& rng);

struct ExtremeEigs {
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  Vector v_min;
  Vector v_max;
  double residual_min = 0.0;
  double residual_max = 0.0;
  bool converged = false;
  std::size_t refinement_iters = 0;
};

struct ExtremeSettings {
  std::size_t iters = 100;
  double tol = 1e-6;
  std::size_t max_refinement_iters = 2000;
};

/// Extreme Ritz pairs of one Lanczos run, each refined by shifted power
/// iteration ((lambda_max I - H) for the bottom, (H - lambda_min I) for the
/// top) until the residual drops below tol. Eigenvector signs make the
/// largest-magnitude entry positive.
ExtremeEigs extreme_eigs(const SymmetricOperator& op, const ExtremeSettings& settings,
                         SeededRng& rng);

/// |lambda_min / lambda_max|, or 0 when lambda_min > 0.
double nonconvexity_ratio(const ExtremeEigs& e);

struct SpectrumSettings {
  std::size_t iters = 80;
  std::size_t num_probes = 10;
  double broadening_sigma2 = 1e-5;
  GridSpec grid;
  ExtremeSettings extremes;
};

struct ClassSpectrum {
  int class_id = -1;  // -1 for the whole training set
  std::size_t sample_count = 0;
  SpectralDensity density;
  ExtremeEigs extremes;
  std::optional<double> ratio;  // absent when lambda_max == 0
  double class_loss = 0.0;
  double class_accuracy = 0.0;
  bool generalized_hessian = false;  // ReLU: second derivative taken as 0
};

struct ClasswiseReport {
  std::vector<ClassSpectrum> classes;
  ClassSpectrum full;
};

/// Runs the density and extreme-eigenpair analyses on each listed class's
/// own loss Hessian and on the full training loss, all with the same probe
/// vectors. Accuracies are measured on `eval` when given, otherwise on the
/// training rows.
ClasswiseReport classwise_spectrum_report(const MlpSpec& spec, std::span<const double> w,
                                          const LabeledDataset& ds, const LossSpec& loss,
                                          const std::vector<int>& classes,
                                          const SpectrumSettings& settings, SeededRng& rng,
                                          const LabeledDataset* eval = nullptr);

/// Writes <stem>.csv (grid,density) and <stem>.json (Ritz data, extremes,
/// residuals, settings, seed).
void write_spectrum(const std::filesystem::path& stem, const ClassSpectrum& s,
                    const SpectrumSettings& settings, std::uint64_t seed);

}  // namespace tailsam
