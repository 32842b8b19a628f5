#include "tailsam/datagen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace tailsam {

namespace {

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

void validate(const ImbalanceProfile& p) {
  require(p.num_classes >= 2, ErrorCode::InfeasibleProfile, "profile needs at least 2 classes");
  require(p.n_max >= 1, ErrorCode::InfeasibleProfile, "profile n_max must be positive");
  require(p.beta >= 1.0 && std::isfinite(p.beta), ErrorCode::InfeasibleProfile,
          "profile beta must be a finite value >= 1");
}

void validate(const ClassGeometry& g) {
  require(g.input_dim >= 1, ErrorCode::Geometry, "input_dim must be positive");
  require(g.class_mean_radius > 0.0, ErrorCode::Geometry, "class_mean_radius must be positive");
  require(g.within_class_std > 0.0, ErrorCode::Geometry, "within_class_std must be positive");
}

void append_samples(LabeledDataset& ds, const Matrix& means, const ClassGeometry& geom, int label,
                    std::size_t n, SeededRng& rng, std::size_t& row) {
  for (std::size_t s = 0; s < n; ++s, ++row) {
    auto out = ds.features.row(row);
    const auto mu = means.row(static_cast<std::size_t>(label));
    for (std::size_t d = 0; d < geom.input_dim; ++d) {
      out[d] = mu[d] + geom.within_class_std * rng.normal();
    }
    ds.labels[row] = label;
  }
}

}  // namespace

std::size_t ImbalanceProfile::n_min() const { return round_half_up(static_cast<double>(n_max) / beta); }

GroupThresholds GroupThresholds::defaults_for(std::size_t n_max) {
  return {static_cast<double>(n_max) / 3.3, static_cast<double>(n_max) / 20.0};
}

std::vector<std::size_t> class_counts(const ImbalanceProfile& profile) {
  validate(profile);
  const std::size_t c = profile.num_classes;
  const double n_max = static_cast<double>(profile.n_max);
  std::vector<std::size_t> counts(c);
  if (profile.kind == ImbalanceKind::LongTail) {
    for (std::size_t j = 0; j < c; ++j) {
      const double expo = -static_cast<double>(j) / static_cast<double>(c - 1);
      counts[j] = round_half_up(n_max * std::pow(profile.beta, expo));
    }
    // pow(beta, -1) can land a hair off 1/beta; pin the endpoint.
    counts[c - 1] = profile.n_min();
  } else {
    const std::size_t frequent = (c + 1) / 2;
    for (std::size_t j = 0; j < c; ++j) counts[j] = j < frequent ? profile.n_max : profile.n_min();
  }
  if (profile.n_min() == 0) {
    fail(ErrorCode::InfeasibleProfile, "n_max / beta rounds to zero samples in the smallest class");
  }
  return counts;
}

Matrix class_means(const ClassGeometry& geom, std::size_t num_classes) {
  validate(geom);
  Matrix means(num_classes, geom.input_dim);
  const double r = geom.class_mean_radius;
  if (geom.mean_placement == MeanPlacement::Circle) {
    if (geom.input_dim == 1) {
      require(num_classes == 2, ErrorCode::Geometry,
              "circle placement in one dimension supports only two classes");
      means(0, 0) = r;
      means(1, 0) = -r;
      return means;
    }
    for (std::size_t j = 0; j < num_classes; ++j) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(j) /
                           static_cast<double>(num_classes);
      means(j, 0) = r * std::cos(angle);
      means(j, 1) = r * std::sin(angle);
    }
    return means;
  }

  // Regular simplex: centred basis vectors e_j - 1/C in R^C, expressed in an
  // orthonormal basis of their (C-1)-dimensional span.
  const std::size_t c = num_classes;
  if (geom.input_dim < c - 1) {
    fail(ErrorCode::Geometry, "simplex placement needs input_dim >= num_classes - 1");
  }
  std::vector<Vector> centred(c, Vector(c, -1.0 / static_cast<double>(c)));
  for (std::size_t j = 0; j < c; ++j) centred[j][j] += 1.0;
  std::vector<Vector> basis;
  for (std::size_t j = 0; j + 1 < c; ++j) {
    Vector q = centred[j];
    for (const auto& b : basis) axpy(-dot(b, q), b, q);
    scale(q, 1.0 / norm2(q));
    basis.push_back(std::move(q));
  }
  const double vertex_norm = norm2(centred[0]);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t k = 0; k < basis.size(); ++k) {
      means(j, k) = r * dot(basis[k], centred[j]) / vertex_norm;
    }
  }
  return means;
}

LabeledDataset generate(const ImbalanceProfile& profile, const ClassGeometry& geom, SeededRng& rng) {
  const auto counts = class_counts(profile);
  const Matrix means = class_means(geom, profile.num_classes);
  std::size_t total = 0;
  for (auto n : counts) total += n;

  LabeledDataset ds;
  ds.features = Matrix(total, geom.input_dim);
  ds.labels.assign(total, 0);
  ds.class_counts = counts;
  ds.profile = profile;
  std::size_t row = 0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    append_samples(ds, means, geom, static_cast<int>(j), counts[j], rng, row);
  }
  return ds;
}

ClassGroups split_head_mid_tail(const std::vector<std::size_t>& counts,
                                std::optional<GroupThresholds> thresholds) {
  require(!counts.empty(), ErrorCode::Parameter, "split_head_mid_tail: counts must be non-empty");
  std::size_t n_max = 0;
  for (auto n : counts) n_max = std::max(n_max, n);
  const GroupThresholds t = thresholds.value_or(GroupThresholds::defaults_for(n_max));
  ClassGroups groups;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    const double n = static_cast<double>(counts[j]);
    const int id = static_cast<int>(j);
    if (n > t.head_above) {
      groups.head.push_back(id);
    } else if (n < t.tail_below) {
      groups.tail.push_back(id);
    } else {
      groups.mid.push_back(id);
    }
  }
  return groups;
}

TrainTestSplit balanced_test_split(const LabeledDataset& ds, const ClassGeometry& geom,
                                   std::size_t per_class, SeededRng& rng) {
  const std::size_t c = ds.num_classes();
  const Matrix means = class_means(geom, c);
  TrainTestSplit split{ds, {}};
  LabeledDataset& test = split.test;
  test.features = Matrix(per_class * c, geom.input_dim);
  test.labels.assign(per_class * c, 0);
  test.class_counts.assign(c, per_class);
  test.profile = ds.profile;
  std::size_t row = 0;
  for (std::size_t j = 0; j < c; ++j) {
    append_samples(test, means, geom, static_cast<int>(j), per_class, rng, row);
  }
  return split;
}

LabeledDataset class_subset(const LabeledDataset& ds, int class_id) {
  require(class_id >= 0 && static_cast<std::size_t>(class_id) < ds.num_classes(),
          ErrorCode::Parameter, "class " + std::to_string(class_id) + " does not exist");
  const std::size_t n = ds.class_counts[static_cast<std::size_t>(class_id)];
  if (n == 0) fail(ErrorCode::EmptyClass, "class " + std::to_string(class_id) + " has no samples");
  LabeledDataset out;
  out.features = Matrix(n, ds.features.cols);
  out.labels.assign(n, class_id);
  out.class_counts.assign(ds.num_classes(), 0);
  out.class_counts[static_cast<std::size_t>(class_id)] = n;
  out.profile = ds.profile;
  std::size_t r = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] != class_id) continue;
    const auto src = ds.features.row(i);
    std::copy(src.begin(), src.end(), out.features.row(r).begin());
    ++r;
  }
  return out;
}

const char* to_string(ImbalanceKind kind) {
  return kind == ImbalanceKind::LongTail ? "long_tail" : "step";
}

const char* to_string(MeanPlacement placement) {
  return placement == MeanPlacement::Circle ? "circle" : "simplex";
}

ImbalanceKind parse_imbalance_kind(const std::string& s) {
  if (s == "long_tail" || s == "longtail") return ImbalanceKind::LongTail;
  if (s == "step") return ImbalanceKind::Step;
  fail(ErrorCode::Config, "unknown imbalance kind '" + s + "'");
}

MeanPlacement parse_mean_placement(const std::string& s) {
  if (s == "circle") return MeanPlacement::Circle;
  if (s == "simplex") return MeanPlacement::SimplexVertices;
  fail(ErrorCode::Config, "unknown mean placement '" + s + "'");
}

void export_dataset(const std::filesystem::path& path, const LabeledDataset& ds,
                    const ClassGeometry& geom, std::uint64_t seed) {
  nlohmann::json header = {
      {"format", "tailsam-dataset"},
      {"format_version", 1},
      {"profile",
       {{"kind", to_string(ds.profile.kind)},
        {"num_classes", ds.profile.num_classes},
        {"n_max", ds.profile.n_max},
        {"beta", ds.profile.beta}}},
      {"geometry",
       {{"input_dim", geom.input_dim},
        {"class_mean_radius", geom.class_mean_radius},
        {"within_class_std", geom.within_class_std},
        {"mean_placement", to_string(geom.mean_placement)}}},
      {"seed", seed},
      {"counts", ds.class_counts},
      {"rows", ds.size()},
  };
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << header.dump() << '\n';
  for (std::size_t d = 0; d < ds.features.cols; ++d) out << 'x' << d << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double x : ds.features.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", x);
      out << buf << ',';
    }
    out << ds.labels[i] << '\n';
  }
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

ImportedDataset import_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::CorruptFile, "missing dataset header");
  ImportedDataset result;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format_version").get<int>() != 1) {
      fail(ErrorCode::VersionMismatch, "unsupported dataset format version");
    }
    auto& p = result.data.profile;
    p.kind = parse_imbalance_kind(header.at("profile").at("kind").get<std::string>());
    p.num_classes = header.at("profile").at("num_classes").get<std::size_t>();
    p.n_max = header.at("profile").at("n_max").get<std::size_t>();
    p.beta = header.at("profile").at("beta").get<double>();
    auto& g = result.geometry;
    g.input_dim = header.at("geometry").at("input_dim").get<std::size_t>();
    g.class_mean_radius = header.at("geometry").at("class_mean_radius").get<double>();
    g.within_class_std = header.at("geometry").at("within_class_std").get<double>();
    g.mean_placement =
        parse_mean_placement(header.at("geometry").at("mean_placement").get<std::string>());
    result.seed = header.at("seed").get<std::uint64_t>();
    result.data.class_counts = header.at("counts").get<std::vector<std::size_t>>();
    const auto rows = header.at("rows").get<std::size_t>();
    if (!std::getline(in, line)) fail(ErrorCode::CorruptFile, "missing column header");
    auto& ds = result.data;
    ds.features = Matrix(rows, g.input_dim);
    ds.labels.assign(rows, 0);
    for (std::size_t i = 0; i < rows; ++i) {
      if (!std::getline(in, line)) fail(ErrorCode::CorruptFile, "dataset truncated");
      std::istringstream fields(line);
      std::string cell;
      for (std::size_t d = 0; d < g.input_dim; ++d) {
        if (!std::getline(fields, cell, ',')) fail(ErrorCode::CorruptFile, "short row");
        ds.features(i, d) = std::stod(cell);
      }
      if (!std::getline(fields, cell, ',')) fail(ErrorCode::CorruptFile, "missing label");
      ds.labels[i] = std::stoi(cell);
    }
    std::vector<std::size_t> seen(ds.class_counts.size(), 0);
    for (int y : ds.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= seen.size()) {
        fail(ErrorCode::CorruptFile, "label out of range");
      }
      ++seen[static_cast<std::size_t>(y)];
    }
    if (seen != ds.class_counts) fail(ErrorCode::CorruptFile, "counts disagree with labels");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptFile, std::string("dataset header: ") + e.what());
  } catch (const std::invalid_argument&) {
    fail(ErrorCode::CorruptFile, "unparseable number in dataset body");
  } catch (const std::out_of_range&) {
    fail(ErrorCode::CorruptFile, "number out of range in dataset body");
  }
  return result;
}

}  // namespace tailsam
