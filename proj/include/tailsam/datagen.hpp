#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tailsam/linalg.hpp"

namespace tailsam {

enum class ImbalanceKind { LongTail, Step };

/// Class-size profile. beta is the imbalance factor N_max / N_min.
struct ImbalanceProfile {
  ImbalanceKind kind = ImbalanceKind::LongTail;
  std::size_t num_classes = 2;
  std::size_t n_max = 500;
  double beta = 10.0;

  std::size_t n_min() const;
};

enum class MeanPlacement { Circle, SimplexVertices };

struct ClassGeometry {
  std::size_t input_dim = 2;
  double class_mean_radius = 1.0;
  double within_class_std = 1.0;
  MeanPlacement mean_placement = MeanPlacement::Circle;
};

struct LabeledDataset {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::size_t> class_counts;
  ImbalanceProfile profile;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_counts.size(); }
};

struct ClassGroups {
  std::vector<int> head;
  std::vector<int> mid;
  std::vector<int> tail;
};

/// Head/tail cut-offs: head if n_j > head_above, tail if n_j < tail_below.
struct GroupThresholds {
  double head_above = 0.0;
  double tail_below = 0.0;

  /// n_max / 3.3 and n_max / 20.
  static GroupThresholds defaults_for(std::size_t n_max);
};

/// Rounded half-up. LongTail: n_j = n_max * beta^(-j/(C-1)). Step: the first
/// ceil(C/2) classes get n_max, the rest n_max / beta.
std::vector<std::size_t> class_counts(const ImbalanceProfile& profile);

/// Class means for the given geometry, one row per class.
Matrix class_means(const ClassGeometry& geom, std::size_t num_classes);

LabeledDataset generate(const ImbalanceProfile& profile, const ClassGeometry& geom,
                        SeededRng& rng);

ClassGroups split_head_mid_tail(const std::vector<std::size_t>& counts,
                                std::optional<GroupThresholds> thresholds = std::nullopt);

struct TrainTestSplit {
  LabeledDataset train;
  LabeledDataset test;
};

/// Keeps `ds` as the training set and draws a fresh balanced test set with
/// `per_class` samples per class from the same geometry.
TrainTestSplit balanced_test_split(const LabeledDataset& ds, const ClassGeometry& geom,
                                   std::size_t per_class, SeededRng& rng);

/// Rows of `ds` whose label is `class_id`, in dataset order.
LabeledDataset class_subset(const LabeledDataset& ds, int class_id);

// Flat file: line 1 is a single-line JSON header with profile, geometry, seed
// and counts; line 2 is the CSV column header (x0..x{d-1},label); the
// remaining lines are rows with features printed as %.17g.
void export_dataset(const std::filesystem::path& path, const LabeledDataset& ds,
                    const ClassGeometry& geom, std::uint64_t seed);

struct ImportedDataset {
  LabeledDataset data;
  ClassGeometry geometry;
  std::uint64_t seed = 0;
};

ImportedDataset import_dataset(const std::filesystem::path& path);

const char* to_string(ImbalanceKind kind);
const char* to_string(MeanPlacement placement);
ImbalanceKind parse_imbalance_kind(const std::string& s);
MeanPlacement parse_mean_placement(const std::string& s);

}  // namespace tailsam
