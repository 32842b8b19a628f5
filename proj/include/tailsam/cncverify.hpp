#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "tailsam/datagen.hpp"
#include "tailsam/linalg.hpp"
#include "tailsam/model.hpp"
#include "tailsam/optim.hpp"
#include "tailsam/spectral.hpp"

namespace tailsam {

/// One realization z of a stochastic objective f_z: its gradient field and
/// its Hessian action, both as functions of the parameters.
struct StochasticSample {
  GradientFn grad;
  std::function<Vector(std::span<const double> w, std::span<const double> v)> hvp;
};

class StochasticObjective {
 public:
  virtual ~StochasticObjective() = default;

  virtual std::size_t dim() const = 0;
  virtual StochasticSample sample(SeededRng& rng) const = 0;
  /// Hessian of the expected objective f at w.
  virtual SymmetricOperator hessian(std::span<const double> w) const = 0;
};

/// Mini-batch loss of an MLP: z picks batch_size rows without replacement
/// (kept in dataset order).
class MlpObjective final : public StochasticObjective {
 public:
  MlpObjective(MlpSpec spec, LabeledDataset data, LossSpec loss, std::size_t batch_size);

  std::size_t dim() const override;
  StochasticSample sample(SeededRng& rng) const override;
  SymmetricOperator hessian(std::span<const double> w) const override;

 private:
  MlpSpec spec_;
  LabeledDataset data_;
  LossSpec loss_;
  std::size_t batch_size_;
};

/// f_z(w) = 1/2 w^T A w + xi_z^T w with xi_z ~ N(0, noise_std^2 I), so the
/// Hessian is A everywhere and gradient noise is isotropic.
class QuadraticObjective final : public StochasticObjective {
 public:
  QuadraticObjective(Matrix a, double noise_std);

  std::size_t dim() const override { return a_.rows; }
  StochasticSample sample(SeededRng& rng) const override;
  SymmetricOperator hessian(std::span<const double> w) const override;

 private:
  Matrix a_;
  double noise_std_;
};

enum class SamMode { Unnormalized, Normalized };

struct MomentEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t num_batches = 0;
};

/// Mean of <v, grad f_z(w)>^2 over num_batches draws, with its standard error.
MomentEstimate estimate_gamma(const StochasticObjective& obj, std::span<const double> w,
                              std::span<const double> v, std::size_t num_batches, SeededRng& rng);

/// Mean of <v, grad f_z(w + eps_z)>^2 where eps_z = rho grad f_z(w) (or its
/// normalized form) and both gradients use the same draw z.
MomentEstimate sam_projection_moment(const StochasticObjective& obj, std::span<const double> w,
                                     std::span<const double> v, double rho, SamMode mode,
                                     std::size_t num_batches, SeededRng& rng);

struct CncSettings {
  std::size_t num_batches = 256;
  SamMode mode = SamMode::Unnormalized;
  /// Same draws for both moments (common random numbers). Otherwise the
  /// two moments use independent streams.
  bool paired = true;
  ExtremeSettings extremes;
};

struct CncRow {
  double rho = 0.0;
  double lambda_min = 0.0;
  MomentEstimate gamma;
  MomentEstimate sam_moment;
  std::optional<double> measured_ratio;  // absent when CNC is violated
  double ratio_stderr = 0.0;
  double predicted_factor = 0.0;         // (1 + rho lambda_min)^2
  bool cnc_violation = false;            // gamma_hat <= its standard error
  /// Mean of ||g_sam - (g + rho H_z g)||: size of the first-order remainder.
  double taylor_residual = 0.0;
};

struct CncReport {
  ExtremeEigs extremes;
  std::vector<CncRow> rows;
};

CncReport cnc_report(const StochasticObjective& obj, std::span<const double> w,
                               const std::vector<double>& rhos, const CncSettings& settings,
                               SeededRng& rng);

/// Same, with the eigenpair already known (skips the Lanczos run).
CncReport cnc_report(const StochasticObjective& obj, std::span<const double> w,
                               const ExtremeEigs& extremes, const std::vector<double>& rhos,
                               const CncSettings& settings, SeededRng& rng);

/// <stem>.csv with one row per rho and <stem>.json with settings, seed and
/// the eigenpair summary.
void write_cnc_report(const std::filesystem::path& stem, const CncReport& report,
                           const CncSettings& settings, std::uint64_t seed);

}  // namespace tailsam
