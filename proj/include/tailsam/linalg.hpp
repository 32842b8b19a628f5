#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tailsam/error.hpp"

namespace tailsam {

/// Flat coordinate vector. Parameters, gradients, eigenvectors and
/// perturbations all live in this type.
using Vector = std::vector<double>;

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> d);

  bool operator==(const Matrix&) const = default;
};

// Reductions sum sequentially left to right. No blocking, no FMA reordering
// beyond what the compiler does for a plain loop.
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

Vector matvec(const Matrix& m, std::span<const double> v);

/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void scale(std::span<double> v, double alpha);
Vector add(std::span<const double> a, std::span<const double> b);
Vector sub(std::span<const double> a, std::span<const double> b);
Vector scaled(std::span<const double> v, double alpha);

bool all_finite(std::span<const double> v);

/// Snapshot of a SeededRng; enough to resume the stream bit-exactly.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::array<std::uint64_t, 4> words{};

  bool operator==(const RngState&) const = default;
};

/// xoshiro256** seeded through splitmix64.
///
/// The splitmix64 state starts at `seed + stream * 0xD1B54A32D192ED03` and
/// its first four outputs become the xoshiro state. Uniform doubles take the
/// top 53 bits; normals use the cosine branch of Box-Muller (two uniforms per
/// draw, no caching) so the stream position depends only on the number of
/// draws. Nothing here goes through <random> distributions, whose output is
/// implementation-defined.
class SeededRng {
 public:
  SeededRng(std::uint64_t seed, std::uint64_t stream);
  explicit SeededRng(const RngState& state) { restore(state); }

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n), unbiased (rejection).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  RngState state() const { return {seed_, stream_, s_}; }
  void restore(const RngState& st);

  /// A fresh generator on a different stream of the same seed.
  SeededRng fork(std::uint64_t stream) const { return SeededRng(seed_, stream); }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::array<std::uint64_t, 4> s_{};
};

std::uint64_t splitmix64(std::uint64_t& state);

Vector gaussian_vector(SeededRng& rng, std::size_t dim, double mean, double std);

/// Fisher-Yates permutation of [0, n).
std::vector<std::size_t> permutation(SeededRng& rng, std::size_t n);

}  // namespace tailsam
