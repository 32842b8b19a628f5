#include "tailsam/cncverify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace tailsam {

namespace {

// Welford accumulator: exact zero variance for identical inputs.
struct Running {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void push(double x) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }

  MomentEstimate estimate() const {
    const double var = n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
    return {mean, std::sqrt(std::max(var, 0.0) / static_cast<double>(n)), n};
  }
};

void check_direction(std::span<const double> v, std::size_t dim) {
  require(v.size() == dim, ErrorCode::Dimension, "direction length != objective dimension");
  require(std::abs(norm2(v) - 1.0) <= 1e-8, ErrorCode::Parameter,
          "direction must have unit norm (within 1e-8)");
}

void check_batches(std::size_t num_batches) {
  if (num_batches < 2) {
    fail(ErrorCode::InsufficientSamples, "need at least 2 batches for a standard error");
  }
}

Vector sam_gradient(const StochasticSample& s, std::span<const double> w, const Vector& g,
                    double rho, SamMode mode) {
  const Vector eps = sam_perturbation(g, rho, mode == SamMode::Normalized);
  return s.grad(add(w, eps)).grad;
}

}  // namespace

MlpObjective::MlpObjective(MlpSpec spec, LabeledDataset data, LossSpec loss,
                           std::size_t batch_size)
    : spec_(std::move(spec)), data_(std::move(data)), loss_(std::move(loss)),
      batch_size_(batch_size) {
  require(data_.size() > 0, ErrorCode::EmptyClass, "MlpObjective: empty dataset");
  require(batch_size_ >= 1 && batch_size_ <= data_.size(), ErrorCode::Parameter,
          "MlpObjective: batch_size must be in [1, dataset size]");
}

std::size_t MlpObjective::dim() const { return ParamLayout::for_spec(spec_).total; }

StochasticSample MlpObjective::sample(SeededRng& rng) const {
  const std::size_t n = data_.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const std::size_t j = i + rng.below(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(batch_size_);
  std::sort(idx.begin(), idx.end());
  auto batch = std::make_shared<const Batch>(gather_batch(data_, idx));
  const MlpSpec* spec = &spec_;
  const LossSpec* loss = &loss_;
  return {[=](std::span<const double> w) { return loss_grad(*spec, w, *batch, *loss); },
          [=](std::span<const double> w, std::span<const double> v) {
            return hvp(*spec, w, *batch, *loss, v);
          }};
}

SymmetricOperator MlpObjective::hessian(std::span<const double> w) const {
  return hvp_oracle(spec_, w, full_batch(data_), loss_);
}

QuadraticObjective::QuadraticObjective(Matrix a, double noise_std)
    : a_(std::move(a)), noise_std_(noise_std) {
  require(a_.rows == a_.cols, ErrorCode::Dimension, "QuadraticObjective: A must be square");
  require(noise_std_ >= 0.0, ErrorCode::Parameter, "QuadraticObjective: noise_std must be >= 0");
}

StochasticSample QuadraticObjective::sample(SeededRng& rng) const {
  auto xi = std::make_shared<const Vector>(gaussian_vector(rng, a_.rows, 0.0, noise_std_));
  const Matrix* a = &a_;
  return {[=](std::span<const double> w) {
            Vector aw = matvec(*a, w);
            const double loss = 0.5 * dot(w, aw) + dot(*xi, w);
            axpy(1.0, *xi, aw);
            return LossGrad{loss, std::move(aw)};
          },
          [=](std::span<const double>, std::span<const double> v) { return matvec(*a, v); }};
}

SymmetricOperator QuadraticObjective::hessian(std::span<const double>) const {
  return dense_operator(a_);
}

MomentEstimate estimate_gamma(const StochasticObjective& obj, std::span<const double> w,
                              std::span<const double> v, std::size_t num_batches, SeededRng& rng) {
  check_direction(v, obj.dim());
  check_batches(num_batches);
  Running acc;
  for (std::size_t b = 0; b < num_batches; ++b) {
    const StochasticSample s = obj.sample(rng);
    const double proj = dot(v, s.grad(w).grad);
    acc.push(proj * proj);
  }
  return acc.estimate();
}

MomentEstimate sam_projection_moment(const StochasticObjective& obj, std::span<const double> w,
                                     std::span<const double> v, double rho, SamMode mode,
                                     std::size_t num_batches, SeededRng& rng) {
  check_direction(v, obj.dim());
  check_batches(num_batches);
  require(rho >= 0.0, ErrorCode::Parameter, "rho must be non-negative");
  Running acc;
  for (std::size_t b = 0; b < num_batches; ++b) {
    const StochasticSample s = obj.sample(rng);
    const Vector g = s.grad(w).grad;
    const double proj = dot(v, sam_gradient(s, w, g, rho, mode));
    acc.push(proj * proj);
  }
  return acc.estimate();
}

CncReport cnc_report(const StochasticObjective& obj, std::span<const double> w,
                               const std::vector<double>& rhos, const CncSettings& settings,
                               SeededRng& rng) {
  SeededRng eig_rng(rng.next_u64(), 0xE16);
  const ExtremeEigs extremes = extreme_eigs(obj.hessian(w), settings.extremes, eig_rng);
  return cnc_report(obj, w, extremes, rhos, settings, rng);
}

CncReport cnc_report(const StochasticObjective& obj, std::span<const double> w,
                               const ExtremeEigs& extremes, const std::vector<double>& rhos,
                               const CncSettings& settings, SeededRng& rng) {
  require(!rhos.empty(), ErrorCode::Parameter, "cnc_report: rho list is empty");
  check_direction(extremes.v_min, obj.dim());
  check_batches(settings.num_batches);
  CncReport report;
  report.extremes = extremes;
  const Vector& v = extremes.v_min;
  const double lambda = extremes.lambda_min;
  const std::uint64_t gamma_seed = rng.next_u64();
  const std::uint64_t sam_seed = settings.paired ? gamma_seed : rng.next_u64();

  for (double rho : rhos) {
    require(rho >= 0.0, ErrorCode::Parameter, "rho must be non-negative");
    CncRow row;
    row.rho = rho;
    row.lambda_min = lambda;
    row.predicted_factor = (1.0 + rho * lambda) * (1.0 + rho * lambda);

    // Every rho sees the same draws, so rows differ only through rho.
    SeededRng gamma_rng(gamma_seed, 1);
    SeededRng sam_rng(sam_seed, 1);
    Running g_acc, s_acc, paired_diff, taylor;
    std::vector<std::pair<double, double>> pairs;
    for (std::size_t b = 0; b < settings.num_batches; ++b) {
      const StochasticSample sg = obj.sample(gamma_rng);
      const Vector g = sg.grad(w).grad;
      const double pg = dot(v, g);
      g_acc.push(pg * pg);

      const StochasticSample ss = settings.paired ? sg : obj.sample(sam_rng);
      const Vector gs = settings.paired ? g : ss.grad(w).grad;
      const Vector g_sam = sam_gradient(ss, w, gs, rho, settings.mode);
      const double ps = dot(v, g_sam);
      s_acc.push(ps * ps);
      pairs.emplace_back(pg * pg, ps * ps);

      Vector first_order = gs;
      const Vector eps = sam_perturbation(gs, rho, settings.mode == SamMode::Normalized);
      axpy(1.0, ss.hvp(w, eps), first_order);
      taylor.push(norm2(sub(g_sam, first_order)));
    }
    row.gamma = g_acc.estimate();
    row.sam_moment = s_acc.estimate();
    row.taylor_residual = taylor.mean;
    row.cnc_violation = !(row.gamma.mean > row.gamma.std_error) ;
    if (!row.cnc_violation) {
      const double ratio = row.sam_moment.mean / row.gamma.mean;
      row.measured_ratio = ratio;
      if (settings.paired) {
        for (const auto& [gq, sq] : pairs) paired_diff.push(sq - ratio * gq);
        row.ratio_stderr = paired_diff.estimate().std_error / row.gamma.mean;
      } else {
        const double rs = row.sam_moment.mean > 0.0 ? row.sam_moment.std_error / row.sam_moment.mean : 0.0;
        const double rg = row.gamma.std_error / row.gamma.mean;
        row.ratio_stderr = std::abs(ratio) * std::sqrt(rs * rs + rg * rg);
      }
    }
    report.rows.push_back(row);
  }
  return report;
}

void write_cnc_report(const std::filesystem::path& stem, const CncReport& report,
                           const CncSettings& settings, std::uint64_t seed) {
  const auto csv_path = std::filesystem::path(stem.string() + ".csv");
  std::ofstream csv(csv_path);
  if (!csv) fail(ErrorCode::Io, "cannot write " + csv_path.string());
  csv << "rho,lambda_min,gamma_hat,gamma_stderr,sam_moment_hat,sam_moment_stderr,"
         "measured_ratio,ratio_stderr,predicted_factor,cnc_violation,taylor_residual\n";
  char buf[512];
  for (const auto& r : report.rows) {
    char ratio[32] = "";
    if (r.measured_ratio) std::snprintf(ratio, sizeof ratio, "%.17g", *r.measured_ratio);
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%s,%.17g,%.17g,%d,%.17g\n",
                  r.rho, r.lambda_min, r.gamma.mean, r.gamma.std_error, r.sam_moment.mean,
                  r.sam_moment.std_error, ratio, r.ratio_stderr, r.predicted_factor,
                  r.cnc_violation ? 1 : 0, r.taylor_residual);
    csv << buf;
  }
  nlohmann::json j;
  j["lambda_min"] = report.extremes.lambda_min;
  j["lambda_max"] = report.extremes.lambda_max;
  j["residual_min"] = report.extremes.residual_min;
  j["eigen_converged"] = report.extremes.converged;
  j["num_batches"] = settings.num_batches;
  j["mode"] = settings.mode == SamMode::Normalized ? "normalized" : "unnormalized";
  j["paired"] = settings.paired;
  j["seed"] = seed;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    j["rows"].push_back({{"rho", r.rho},
                         {"gamma_hat", r.gamma.mean},
                         {"gamma_stderr", r.gamma.std_error},
                         {"sam_moment_hat", r.sam_moment.mean},
                         {"sam_moment_stderr", r.sam_moment.std_error},
                         {"measured_ratio", r.measured_ratio ? nlohmann::json(*r.measured_ratio)
                                                             : nlohmann::json(nullptr)},
                         {"ratio_stderr", r.ratio_stderr},
                         {"predicted_factor", r.predicted_factor},
                         {"cnc_violation", r.cnc_violation},
                         {"taylor_residual", r.taylor_residual}});
  }
  j["note"] = "first-order (small rho) regime; equality is exact only for constant Hessians";
  const auto json_path = std::filesystem::path(stem.string() + ".json");
  std::ofstream out(json_path);
  if (!out) fail(ErrorCode::Io, "cannot write " + json_path.string());
  out << j.dump(2) << '\n';
}

}  // namespace tailsam
