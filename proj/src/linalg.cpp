#include "tailsam/linalg.hpp"

#include <cmath>
#include <numbers>
#include <limits>
#include <numeric>
#include <string>

namespace tailsam {

namespace {

void check_same_length(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    fail(ErrorCode::Dimension, std::string(op) + ": length mismatch " + std::to_string(a) +
                                   " vs " + std::to_string(b));
  }
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  check_same_length(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

Vector matvec(const Matrix& m, std::span<const double> v) {
  check_same_length(m.cols, v.size(), "matvec");
  Vector out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) out[r] = dot(m.row(r), v);
  return out;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  check_same_length(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void scale(std::span<double> v, double alpha) {
  for (double& x : v) x *= alpha;
}

Vector add(std::span<const double> a, std::span<const double> b) {
  check_same_length(a.size(), b.size(), "add");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vector sub(std::span<const double> a, std::span<const double> b) {
  check_same_length(a.size(), b.size(), "sub");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vector scaled(std::span<const double> v, double alpha) {
  Vector out(v.begin(), v.end());
  scale(out, alpha);
  return out;
}

bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
  std::uint64_t sm = seed + stream * 0xD1B54A32D192ED03ULL;
  for (auto& word : s_) word = splitmix64(sm);
}

void SeededRng::restore(const RngState& st) {
  seed_ = st.seed;
  stream_ = st.stream;
  s_ = st.words;
}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeededRng::normal() {
  // 1 - u lies in (0, 1], so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t SeededRng::below(std::uint64_t n) {
  require(n > 0, ErrorCode::Parameter, "SeededRng::below: n must be positive");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

Vector gaussian_vector(SeededRng& rng, std::size_t dim, double mean, double std) {
  require(std >= 0.0, ErrorCode::Parameter, "gaussian_vector: std must be non-negative");
  require(dim >= 1, ErrorCode::Parameter, "gaussian_vector: dim must be at least 1");
  Vector out(dim);
  for (double& x : out) x = mean + std * rng.normal();
  return out;
}

std::vector<std::size_t> permutation(SeededRng& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace tailsam
