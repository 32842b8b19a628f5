#include "tailsam/harness.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace tailsam {

using nlohmann::json;

namespace {

// Stream ids under the experiment seed.
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kTestStream = 2;
constexpr std::uint64_t kInitStream = 3;
constexpr std::uint64_t kShuffleStream = 4;
constexpr std::uint64_t kOptimizerStream = 5;
constexpr std::uint64_t kSpectrumStreamBase = 1000;
constexpr std::uint64_t kCncStreamBase = 1000000;
constexpr std::uint64_t kSweepStream = 3000;

std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_optional(const std::optional<double>& x) { return x ? fmt_double(*x) : ""; }

// Reads keys out of one JSON object and rejects whatever is left over.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrorCode::Config, where_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::Config, where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(ErrorCode::Config, where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class T>
std::vector<std::pair<std::size_t, T>> read_pairs(const json& j, const std::string& where) {
  std::vector<std::pair<std::size_t, T>> out;
  if (!j.is_array()) fail(ErrorCode::Config, where + ": expected an array of [epoch, value]");
  for (const auto& item : j) {
    if (!item.is_array() || item.size() != 2) {
      fail(ErrorCode::Config, where + ": each entry must be [epoch, value]");
    }
    try {
      out.emplace_back(item[0].get<std::size_t>(), item[1].get<T>());
    } catch (const json::exception& e) {
      fail(ErrorCode::Config, where + ": " + e.what());
    }
  }
  return out;
}

LossSpec training_loss(const ExperimentConfig& cfg, const LabeledDataset& train) {
  LossSpec loss = cfg.loss;
  loss.class_counts = train.class_counts;
  return loss;
}

// Per-class loss used by the curvature analyses: the training loss family
// without class weights.
LossSpec analysis_loss(const ExperimentConfig& cfg, const LabeledDataset& train) {
  LossSpec loss = training_loss(cfg, train);
  loss.class_weights.reset();
  return loss;
}

double effective_rho(const ExperimentConfig& cfg, std::size_t epoch) {
  if (!cfg.rho_schedule.empty()) return rho_at(cfg.rho_schedule, epoch);
  return epoch < cfg.drw_threshold ? cfg.optimizer.rho : cfg.optimizer.rho_drw;
}

Vector epoch_class_weights(const ExperimentConfig& cfg, const LabeledDataset& train,
                           std::size_t epoch) {
  Vector w = drw_weights({cfg.drw_threshold, train.class_counts}, epoch);
  if (cfg.loss.class_weights) {
    for (std::size_t j = 0; j < w.size(); ++j) w[j] *= (*cfg.loss.class_weights)[j];
  }
  return w;
}

std::string metrics_header(std::size_t num_classes) {
  std::string h =
      "epoch,lr,rho,train_loss,grad_norm,overall_acc,head_acc,mid_acc,tail_acc";
  for (std::size_t c = 0; c < num_classes; ++c) h += ",acc_c" + std::to_string(c);
  for (std::size_t c = 0; c < num_classes; ++c) h += ",loss_c" + std::to_string(c);
  for (std::size_t c = 0; c < num_classes; ++c) h += ",weight_c" + std::to_string(c);
  h += ",skipped_perturbations,config_hash,code_version";
  return h;
}

std::string metrics_row(const MetricsRecord& m, const std::string& hash) {
  std::string r = std::to_string(m.epoch) + "," + fmt_double(m.lr) + "," + fmt_double(m.rho) +
                  "," + fmt_double(m.train_loss) + "," + fmt_double(m.grad_norm) + "," +
                  fmt_double(m.eval.overall) + "," + fmt_optional(m.eval.head) + "," +
                  fmt_optional(m.eval.mid) + "," + fmt_optional(m.eval.tail);
  for (double a : m.eval.per_class_accuracy) r += "," + fmt_double(a);
  for (double l : m.eval.per_class_loss) r += "," + fmt_double(l);
  for (double w : m.class_weights) r += "," + fmt_double(w);
  r += "," + std::to_string(m.skipped_perturbations) + "," + hash + "," + kCodeVersion;
  return r;
}

// Keeps the header and rows up to `epoch` of an existing metrics file.
std::vector<std::string> metrics_prefix(const std::filesystem::path& path, std::size_t epoch) {
  std::vector<std::string> kept;
  std::ifstream in(path);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoull(line.substr(0, comma)) <= epoch) kept.push_back(line);
  }
  return kept;
}

json json_of(const RngState& s) {
  return {{"seed", s.seed}, {"stream", s.stream}, {"words", s.words}};
}

RngState rng_of(const json& j) {
  RngState s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.stream = j.at("stream").get<std::uint64_t>();
  s.words = j.at("words").get<std::array<std::uint64_t, 4>>();
  return s;
}

std::string number_array(std::span<const double> v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    // "-0" would parse back as the integer 0.
    out += v[i] == 0.0 && std::signbit(v[i]) ? "-0.0" : fmt_double(v[i]);
  }
  out += ']';
  return out;
}

}  // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  class_counts(profile);
  require(drw_threshold <= epochs, ErrorCode::Config, "reweight.threshold_epoch must be <= epochs");
  for (const auto* set : {&spectrum_epochs, &cnc_epochs, &checkpoint_epochs}) {
    for (auto e : *set) require(e <= epochs, ErrorCode::Config, "snapshot epoch beyond epochs");
  }
  model.validate();
  require(model.input_dim() == geometry.input_dim, ErrorCode::Config,
          "model.layer_sizes must start with dataset input_dim");
  require(model.num_classes() == profile.num_classes, ErrorCode::Config,
          "model.layer_sizes must end with num_classes");
  require(batch_size >= 1, ErrorCode::Config, "batch_size must be positive");
  LossSpec l = loss;
  l.class_counts = class_counts(profile);
  l.validate();
  optimizer.validate();
  lr.validate();
  rho_schedule.validate();
  for (int c : analysis.spectrum_classes) {
    require(c >= 0 && static_cast<std::size_t>(c) < profile.num_classes, ErrorCode::Config,
            "analysis.spectrum_classes out of range");
  }
  if (analysis.cnc_class) {
    require(*analysis.cnc_class >= 0 &&
                static_cast<std::size_t>(*analysis.cnc_class) < profile.num_classes,
            ErrorCode::Config, "analysis.cnc_class out of range");
  }
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  StrictObject root(j, "config");

  if (const json* ds = root.child("dataset")) {
    StrictObject d(*ds, "dataset");
    if (const json* p = d.child("profile")) {
      StrictObject o(*p, "dataset.profile");
      std::string kind = to_string(cfg.profile.kind);
      o.read("kind", kind);
      cfg.profile.kind = parse_imbalance_kind(kind);
      o.read("num_classes", cfg.profile.num_classes);
      o.read("n_max", cfg.profile.n_max);
      o.read("beta", cfg.profile.beta);
      o.finish();
    }
    if (const json* g = d.child("geometry")) {
      StrictObject o(*g, "dataset.geometry");
      std::string placement = to_string(cfg.geometry.mean_placement);
      o.read("input_dim", cfg.geometry.input_dim);
      o.read("class_mean_radius", cfg.geometry.class_mean_radius);
      o.read("within_class_std", cfg.geometry.within_class_std);
      o.read("mean_placement", placement);
      cfg.geometry.mean_placement = parse_mean_placement(placement);
      o.finish();
    }
    d.read("test_per_class", cfg.test_per_class);
    if (const json* t = d.child("group_thresholds"); t && !t->is_null()) {
      StrictObject o(*t, "dataset.group_thresholds");
      GroupThresholds gt;
      o.read("head_above", gt.head_above);
      o.read("tail_below", gt.tail_below);
      o.finish();
      cfg.group_thresholds = gt;
    }
    d.finish();
  }

  if (const json* m = root.child("model")) {
    StrictObject o(*m, "model");
    std::string act = to_string(cfg.model.activation);
    o.read("layer_sizes", cfg.model.layer_sizes);
    o.read("activation", act);
    o.read("bias", cfg.model.bias);
    cfg.model.activation = parse_activation(act);
    o.finish();
  }

  if (const json* l = root.child("loss")) {
    StrictObject o(*l, "loss");
    std::string variant = to_string(cfg.loss.variant);
    o.read("variant", variant);
    cfg.loss.variant = parse_loss_variant(variant);
    if (const json* w = o.child("class_weights"); w && !w->is_null()) {
      try {
        cfg.loss.class_weights = w->get<Vector>();
      } catch (const json::exception& e) {
        fail(ErrorCode::Config, std::string("loss.class_weights: ") + e.what());
      }
    }
    o.read("ldam_max_margin", cfg.loss.ldam_max_margin);
    o.read("vs_gamma", cfg.loss.vs_gamma);
    o.read("vs_tau", cfg.loss.vs_tau);
    o.finish();
  }

  if (const json* r = root.child("reweight")) {
    StrictObject o(*r, "reweight");
    o.read("threshold_epoch", cfg.drw_threshold);
    o.finish();
  }

  if (const json* op = root.child("optimizer")) {
    StrictObject o(*op, "optimizer");
    std::string kind = to_string(cfg.optimizer.kind);
    o.read("kind", kind);
    cfg.optimizer.kind = parse_optimizer_kind(kind);
    o.read("momentum", cfg.optimizer.momentum);
    o.read("rho", cfg.optimizer.rho);
    o.read("rho_drw", cfg.optimizer.rho_drw);
    o.read("sam_normalized", cfg.optimizer.sam_normalized);
    o.read("pgd_sigma", cfg.optimizer.pgd_sigma);
    o.read("lpf_mc_iters", cfg.optimizer.lpf_mc_iters);
    o.read("lpf_radius", cfg.optimizer.lpf_radius);
    o.finish();
  }

  if (const json* lr = root.child("lr")) {
    StrictObject o(*lr, "lr");
    o.read("base_lr", cfg.lr.base_lr);
    o.read("warmup_epochs", cfg.lr.warmup_epochs);
    if (const json* ms = o.child("milestones")) cfg.lr.milestones = read_pairs<double>(*ms, "lr.milestones");
    o.finish();
  }

  if (const json* rs = root.child("rho_schedule")) {
    cfg.rho_schedule.steps = read_pairs<double>(*rs, "rho_schedule");
  }

  root.read("epochs", cfg.epochs);
  root.read("batch_size", cfg.batch_size);
  root.read("seed", cfg.seed);
  root.read("spectrum_epochs", cfg.spectrum_epochs);
  root.read("cnc_epochs", cfg.cnc_epochs);
  root.read("checkpoint_epochs", cfg.checkpoint_epochs);
  root.read("output_dir", cfg.output_dir);

  if (const json* a = root.child("analysis")) {
    StrictObject o(*a, "analysis");
    auto& an = cfg.analysis;
    o.read("lanczos_iters", an.spectrum.iters);
    o.read("num_probes", an.spectrum.num_probes);
    o.read("broadening_sigma2", an.spectrum.broadening_sigma2);
    o.read("grid_min_points", an.spectrum.grid.min_points);
    o.read("extreme_iters", an.spectrum.extremes.iters);
    o.read("extreme_tol", an.spectrum.extremes.tol);
    o.read("max_refinement_iters", an.spectrum.extremes.max_refinement_iters);
    o.read("spectrum_classes", an.spectrum_classes);
    o.read("cnc_rhos", an.cnc_rhos);
    o.read("cnc_batch_size", an.cnc_batch_size);
    o.read("cnc_num_batches", an.cnc_num_batches);
    if (const json* c = o.child("cnc_class"); c && !c->is_null()) {
      try {
        an.cnc_class = c->get<int>();
      } catch (const json::exception& e) {
        fail(ErrorCode::Config, std::string("analysis.cnc_class: ") + e.what());
      }
    }
    o.read("cnc_normalized", an.cnc_normalized);
    o.finish();
  }
  root.finish();

  cfg.loss.class_counts.clear();
  cfg.validate();
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = {
      {"profile",
       {{"kind", to_string(cfg.profile.kind)},
        {"num_classes", cfg.profile.num_classes},
        {"n_max", cfg.profile.n_max},
        {"beta", cfg.profile.beta}}},
      {"geometry",
       {{"input_dim", cfg.geometry.input_dim},
        {"class_mean_radius", cfg.geometry.class_mean_radius},
        {"within_class_std", cfg.geometry.within_class_std},
        {"mean_placement", to_string(cfg.geometry.mean_placement)}}},
      {"test_per_class", cfg.test_per_class},
      {"group_thresholds", cfg.group_thresholds
                               ? json{{"head_above", cfg.group_thresholds->head_above},
                                      {"tail_below", cfg.group_thresholds->tail_below}}
                               : json(nullptr)},
  };
  j["model"] = {{"layer_sizes", cfg.model.layer_sizes},
                {"activation", to_string(cfg.model.activation)},
                {"bias", cfg.model.bias}};
  j["loss"] = {{"variant", to_string(cfg.loss.variant)},
               {"class_weights", cfg.loss.class_weights ? json(*cfg.loss.class_weights) : json(nullptr)},
               {"ldam_max_margin", cfg.loss.ldam_max_margin},
               {"vs_gamma", cfg.loss.vs_gamma},
               {"vs_tau", cfg.loss.vs_tau}};
  j["reweight"] = {{"threshold_epoch", cfg.drw_threshold}};
  j["optimizer"] = {{"kind", to_string(cfg.optimizer.kind)},
                    {"momentum", cfg.optimizer.momentum},
                    {"rho", cfg.optimizer.rho},
                    {"rho_drw", cfg.optimizer.rho_drw},
                    {"sam_normalized", cfg.optimizer.sam_normalized},
                    {"pgd_sigma", cfg.optimizer.pgd_sigma},
                    {"lpf_mc_iters", cfg.optimizer.lpf_mc_iters},
                    {"lpf_radius", cfg.optimizer.lpf_radius}};
  json milestones = json::array();
  for (const auto& [e, m] : cfg.lr.milestones) milestones.push_back({e, m});
  j["lr"] = {{"base_lr", cfg.lr.base_lr},
             {"warmup_epochs", cfg.lr.warmup_epochs},
             {"milestones", milestones}};
  json steps = json::array();
  for (const auto& [e, r] : cfg.rho_schedule.steps) steps.push_back({e, r});
  j["rho_schedule"] = steps;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  j["spectrum_epochs"] = cfg.spectrum_epochs;
  j["cnc_epochs"] = cfg.cnc_epochs;
  j["checkpoint_epochs"] = cfg.checkpoint_epochs;
  const auto& an = cfg.analysis;
  j["analysis"] = {{"lanczos_iters", an.spectrum.iters},
                   {"num_probes", an.spectrum.num_probes},
                   {"broadening_sigma2", an.spectrum.broadening_sigma2},
                   {"grid_min_points", an.spectrum.grid.min_points},
                   {"extreme_iters", an.spectrum.extremes.iters},
                   {"extreme_tol", an.spectrum.extremes.tol},
                   {"max_refinement_iters", an.spectrum.extremes.max_refinement_iters},
                   {"spectrum_classes", an.spectrum_classes},
                   {"cnc_rhos", an.cnc_rhos},
                   {"cnc_batch_size", an.cnc_batch_size},
                   {"cnc_num_batches", an.cnc_num_batches},
                   {"cnc_class", an.cnc_class ? json(*an.cnc_class) : json(nullptr)},
                   {"cnc_normalized", an.cnc_normalized}};
  j["output_dir"] = cfg.output_dir;
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::Config, "config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
  if (cfg.output_dir_override) return *cfg.output_dir_override;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return cfg.output_dir;
}

// ---------------------------------------------------------------- evaluation

GroupAccuracy evaluate(const MlpSpec& spec, std::span<const double> w, const LabeledDataset& test,
                       const ClassGroups& groups) {
  const std::size_t c = test.num_classes();
  GroupAccuracy out;
  out.per_class_accuracy.assign(c, 0.0);
  out.per_class_loss.assign(c, 0.0);
  if (test.size() == 0) return out;
  const Matrix logits = forward(spec, w, test.features);
  std::vector<std::size_t> correct(c, 0), seen(c, 0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto row = logits.row(i);
    const auto y = static_cast<std::size_t>(test.labels[i]);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const double top = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double z : row) sum += std::exp(z - top);
    out.per_class_loss[y] += top + std::log(sum) - row[y];
    if (pred == y) ++correct[y];
    ++seen[y];
  }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t j = 0; j < c; ++j) {
    if (seen[j] == 0) continue;
    out.per_class_accuracy[j] = static_cast<double>(correct[j]) / static_cast<double>(seen[j]);
    out.per_class_loss[j] /= static_cast<double>(seen[j]);
    total += out.per_class_accuracy[j];
    ++present;
  }
  out.overall = present ? total / static_cast<double>(present) : 0.0;
  auto group_mean = [&](const std::vector<int>& members) -> std::optional<double> {
    if (members.empty()) return std::nullopt;
    double s = 0.0;
    for (int m : members) s += out.per_class_accuracy[static_cast<std::size_t>(m)];
    return s / static_cast<double>(members.size());
  };
  out.head = group_mean(groups.head);
  out.mid = group_mean(groups.mid);
  out.tail = group_mean(groups.tail);
  return out;
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json head = {{"format_version", ckpt.format_version},
               {"config_hash", ckpt.config_hash},
               {"epoch", ckpt.epoch},
               {"step_count", ckpt.step_count},
               {"skipped_perturbations", ckpt.skipped_perturbations},
               {"rng", {{"shuffle", json_of(ckpt.shuffle_rng)}, {"optimizer", json_of(ckpt.optimizer_rng)}}},
               {"config", ckpt.config}};
  std::string text = head.dump();
  text.pop_back();
  text += ",\"params\":" + number_array(ckpt.params);
  text += ",\"velocity\":" + number_array(ckpt.velocity) + "}\n";

  // Write to a sibling file first so a crash never leaves a half checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot write " + tmp.string());
    out << text;
    if (!out) fail(ErrorCode::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read checkpoint " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::CorruptFile, "checkpoint " + path.string() + " is corrupt: " + e.what());
  }
  Checkpoint c;
  try {
    c.format_version = j.at("format_version").get<int>();
    if (c.format_version != kCheckpointFormatVersion) {
      fail(ErrorCode::VersionMismatch, "checkpoint format version " +
                                           std::to_string(c.format_version) + " (expected " +
                                           std::to_string(kCheckpointFormatVersion) + ")");
    }
    c.config_hash = j.at("config_hash").get<std::string>();
    c.epoch = j.at("epoch").get<std::size_t>();
    c.step_count = j.at("step_count").get<std::uint64_t>();
    c.skipped_perturbations = j.at("skipped_perturbations").get<std::uint64_t>();
    c.shuffle_rng = rng_of(j.at("rng").at("shuffle"));
    c.optimizer_rng = rng_of(j.at("rng").at("optimizer"));
    c.config = j.at("config");
    c.params = j.at("params").get<Vector>();
    c.velocity = j.at("velocity").get<Vector>();
  } catch (const json::exception& e) {
    fail(ErrorCode::CorruptFile, "checkpoint " + path.string() + ": " + e.what());
  }
  require(c.params.size() == c.velocity.size(), ErrorCode::CorruptFile,
          "checkpoint params and velocity differ in length");
  return c;
}

// ---------------------------------------------------------------- experiment

ExperimentData make_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  SeededRng data_rng(cfg.seed, kDataStream);
  d.train = generate(cfg.profile, cfg.geometry, data_rng);
  SeededRng test_rng(cfg.seed, kTestStream);
  d.test = balanced_test_split(d.train, cfg.geometry, cfg.test_per_class, test_rng).test;
  d.groups = split_head_mid_tail(d.train.class_counts, cfg.group_thresholds);
  return d;
}

int smallest_class(const LabeledDataset& ds) {
  int best = 0;
  for (std::size_t j = 1; j < ds.num_classes(); ++j) {
    if (ds.class_counts[j] <= ds.class_counts[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  }
  return best;
}

ExtremeEigs class_extremes(const ExperimentConfig& cfg, const ExperimentData& data,
                           std::span<const double> w, int class_id, std::uint64_t stream) {
  SeededRng rng(cfg.seed, stream);
  const auto op = hvp_oracle(cfg.model, w, per_class_batch(data.train, class_id),
                             analysis_loss(cfg, data.train));
  return extreme_eigs(op, cfg.analysis.spectrum.extremes, rng);
}

std::vector<std::filesystem::path> write_spectrum_snapshot(
    const ExperimentConfig& cfg, const ExperimentData& data, std::span<const double> w,
    std::size_t epoch, const std::vector<int>& classes, const std::filesystem::path& out_dir) {
  std::vector<int> which = classes;
  if (which.empty()) {
    for (std::size_t c = 0; c < data.train.num_classes(); ++c) which.push_back(static_cast<int>(c));
  }
  SeededRng rng(cfg.seed, kSpectrumStreamBase + epoch);
  const auto report = classwise_spectrum_report(cfg.model, w, data.train, analysis_loss(cfg, data.train),
                                                which, cfg.analysis.spectrum, rng, &data.test);
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  const std::string prefix = "spectrum_" + std::to_string(epoch);
  for (const auto& cs : report.classes) {
    const auto stem = out_dir / (prefix + "_class" + std::to_string(cs.class_id));
    write_spectrum(stem, cs, cfg.analysis.spectrum, cfg.seed);
    written.push_back(stem.string() + ".csv");
    written.push_back(stem.string() + ".json");
  }
  const auto stem = out_dir / (prefix + "_all");
  write_spectrum(stem, report.full, cfg.analysis.spectrum, cfg.seed);
  written.push_back(stem.string() + ".csv");
  written.push_back(stem.string() + ".json");
  return written;
}

CncReport write_cnc_snapshot(const ExperimentConfig& cfg, const ExperimentData& data,
                                  std::span<const double> w, std::size_t epoch,
                                  const std::vector<double>& rhos, std::optional<int> class_id,
                                  const std::filesystem::path& out_dir,
                                  std::vector<std::filesystem::path>* artifacts) {
  const int cls = class_id.value_or(cfg.analysis.cnc_class.value_or(smallest_class(data.train)));
  LabeledDataset subset = class_subset(data.train, cls);
  std::size_t batch = cfg.analysis.cnc_batch_size;
  if (batch == 0) batch = std::min(cfg.batch_size, std::max<std::size_t>(1, subset.size() / 2));
  batch = std::min(batch, subset.size());
  const MlpObjective objective(cfg.model, std::move(subset), analysis_loss(cfg, data.train), batch);

  std::vector<double> rho_list = rhos;
  if (rho_list.empty()) rho_list = cfg.analysis.cnc_rhos;
  if (rho_list.empty()) rho_list = {0.0, effective_rho(cfg, epoch == 0 ? 0 : epoch - 1)};

  CncSettings settings;
  settings.num_batches = cfg.analysis.cnc_num_batches;
  settings.mode = cfg.analysis.cnc_normalized ? SamMode::Normalized : SamMode::Unnormalized;
  settings.extremes = cfg.analysis.spectrum.extremes;
  SeededRng rng(cfg.seed, kCncStreamBase + epoch);
  CncReport report = cnc_report(objective, w, rho_list, settings, rng);

  std::filesystem::create_directories(out_dir);
  const auto stem = out_dir / ("cnc_" + std::to_string(epoch));
  write_cnc_report(stem, report, settings, cfg.seed);
  if (artifacts) {
    artifacts->push_back(stem.string() + ".csv");
    artifacts->push_back(stem.string() + ".json");
  }
  return report;
}

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const ExperimentData data = make_data(cfg);
  const LabeledDataset& train = data.train;
  const LossSpec base_loss = training_loss(cfg, train);

  RunResult result;
  result.config_hash = config_hash(cfg);
  result.output_dir = resolve_output_dir(cfg);

  SeededRng init_rng(cfg.seed, kInitStream);
  result.final_params = init_params(cfg.model, init_rng);
  Vector& w = result.final_params.data;
  OptimizerState state(w.size(), cfg.optimizer.momentum, SeededRng(cfg.seed, kOptimizerStream));
  SeededRng shuffle(cfg.seed, kShuffleStream);

  std::size_t start = 0;
  if (options.resume_from) {
    const Checkpoint& ck = *options.resume_from;
    require(ck.config_hash == result.config_hash, ErrorCode::Config,
            "checkpoint was written by a different config (hash " + ck.config_hash + ")");
    require(ck.params.size() == w.size(), ErrorCode::CorruptFile,
            "checkpoint parameter count does not match the model");
    require(ck.epoch <= cfg.epochs, ErrorCode::Config, "checkpoint epoch beyond config epochs");
    w = ck.params;
    state.velocity = ck.velocity;
    state.step_count = ck.step_count;
    state.skipped_perturbations = ck.skipped_perturbations;
    state.rng.restore(ck.optimizer_rng);
    shuffle.restore(ck.shuffle_rng);
    start = ck.epoch;
  }

  const auto& out_dir = result.output_dir;
  std::ofstream metrics_out;
  if (options.write_outputs) {
    std::filesystem::create_directories(out_dir);
    const auto metrics_path = out_dir / "metrics.csv";
    std::vector<std::string> kept;
    if (options.resume_from && std::filesystem::exists(metrics_path)) {
      kept = metrics_prefix(metrics_path, start);
    }
    metrics_out.open(metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics_out) fail(ErrorCode::Io, "cannot write " + metrics_path.string());
    metrics_out << metrics_header(train.num_classes()) << '\n';
    for (const auto& line : kept) metrics_out << line << '\n';
    result.artifacts.push_back(metrics_path);
  }

  const auto snapshot = [&](std::size_t done) {
    if (!options.write_outputs) return;
    if (cfg.spectrum_epochs.count(done)) {
      auto files = write_spectrum_snapshot(cfg, data, w, done, cfg.analysis.spectrum_classes, out_dir);
      result.artifacts.insert(result.artifacts.end(), files.begin(), files.end());
    }
    if (cfg.cnc_epochs.count(done)) {
      write_cnc_snapshot(cfg, data, w, done, {}, std::nullopt, out_dir, &result.artifacts);
    }
    if (cfg.checkpoint_epochs.count(done) || done == cfg.epochs) {
      Checkpoint ck;
      ck.config_hash = result.config_hash;
      ck.epoch = done;
      ck.params = w;
      ck.velocity = state.velocity;
      ck.step_count = state.step_count;
      ck.skipped_perturbations = state.skipped_perturbations;
      ck.shuffle_rng = shuffle.state();
      ck.optimizer_rng = state.rng.state();
      ck.config = config_to_json(cfg);
      const auto path = out_dir / ("checkpoint_" + std::to_string(done) + ".json");
      save_checkpoint(path, ck);
      result.artifacts.push_back(path);
    }
  };

  if (start == 0) snapshot(0);

  const std::size_t n = train.size();
  const std::size_t steps = (n + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = start; epoch < cfg.epochs; ++epoch) {
    MetricsRecord rec;
    rec.epoch = epoch + 1;
    rec.class_weights = epoch_class_weights(cfg, train, epoch);
    rec.rho = cfg.optimizer.kind == OptimizerKind::SAM ? effective_rho(cfg, epoch) : 0.0;
    LossSpec loss = base_loss;
    loss.class_weights = rec.class_weights;

    const auto order = permutation(shuffle, n);
    double loss_sum = 0.0, norm_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t begin = s * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const Batch batch = gather_batch(train, std::span(order).subspan(begin, end - begin));
      const GradientFn grad_fn = batch_gradient(cfg.model, batch, loss);
      rec.lr = lr_at(cfg.lr, epoch, s, steps);
      StepInfo info;
      try {
        switch (cfg.optimizer.kind) {
          case OptimizerKind::SGD:
            info = sgd_step(w, grad_fn, state, rec.lr);
            break;
          case OptimizerKind::SAM:
            info = sam_step(w, grad_fn, state, rec.lr, rec.rho, cfg.optimizer.sam_normalized);
            break;
          case OptimizerKind::PGD:
            info = pgd_step(w, grad_fn, state, rec.lr, cfg.optimizer.pgd_sigma);
            break;
          case OptimizerKind::LPFSGD:
            info = lpf_sgd_step(w, grad_fn, state, rec.lr, cfg.optimizer.lpf_mc_iters,
                                cfg.optimizer.lpf_radius, result.final_params.layout.blocks);
            break;
        }
      } catch (const Error& e) {
        fail(e.code(), "epoch " + std::to_string(epoch + 1) + " step " + std::to_string(s) +
                           ": " + e.what());
      }
      loss_sum += info.loss;
      norm_sum += info.update_norm;
    }
    rec.train_loss = loss_sum / static_cast<double>(steps);
    rec.grad_norm = norm_sum / static_cast<double>(steps);
    rec.skipped_perturbations = state.skipped_perturbations;
    rec.eval = evaluate(cfg.model, w, data.test, data.groups);
    if (metrics_out.is_open()) metrics_out << metrics_row(rec, result.config_hash) << '\n';
    result.metrics.push_back(std::move(rec));
    snapshot(epoch + 1);
  }

  if (options.write_outputs) {
    metrics_out.close();
    json summary = {{"config_hash", result.config_hash},
                    {"code_version", kCodeVersion},
                    {"seed", cfg.seed},
                    {"epochs", cfg.epochs},
                    {"num_params", w.size()}};
    if (!result.metrics.empty()) {
      const auto& last = result.metrics.back();
      summary["final"] = {{"overall_acc", last.eval.overall},
                          {"head_acc", last.eval.head ? json(*last.eval.head) : json(nullptr)},
                          {"mid_acc", last.eval.mid ? json(*last.eval.mid) : json(nullptr)},
                          {"tail_acc", last.eval.tail ? json(*last.eval.tail) : json(nullptr)},
                          {"per_class_accuracy", last.eval.per_class_accuracy},
                          {"train_loss", last.train_loss}};
    }
    json files = json::array();
    for (const auto& a : result.artifacts) files.push_back(a.filename().string());
    summary["artifacts"] = files;
    const auto path = out_dir / "summary.json";
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
    out << summary.dump(2) << '\n';
    result.artifacts.push_back(path);
  }
  return result;
}

ExperimentConfig with_sam_rho(ExperimentConfig cfg, double rho) {
  cfg.optimizer.kind = OptimizerKind::SAM;
  cfg.optimizer.rho = rho;
  cfg.optimizer.rho_drw = rho;
  cfg.rho_schedule.steps.clear();
  return cfg;
}

std::vector<SweepRow> sweep_rho(const ExperimentConfig& base, const std::vector<double>& rhos,
                                const std::optional<std::filesystem::path>& out_dir) {
  require(!rhos.empty(), ErrorCode::Parameter, "sweep_rho: no rho values");
  const ExperimentData data = make_data(base);
  const int tail = smallest_class(data.train);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < rhos.size(); ++i) {
    SweepRow row;
    row.rho = rhos[i];
    try {
      ExperimentConfig cfg = with_sam_rho(base, rhos[i]);
      RunOptions opts;
      opts.write_outputs = out_dir.has_value();
      if (out_dir) cfg.output_dir_override = (*out_dir / ("rho_" + std::to_string(i))).string();
      const RunResult run = run_experiment(cfg, opts);
      const auto eval = evaluate(cfg.model, run.final_params.data, data.test, data.groups);
      row.overall_acc = eval.overall;
      row.tail_acc = eval.tail;
      const auto ex = class_extremes(cfg, data, run.final_params.data, tail, kSweepStream);
      row.tail_lambda_min = ex.lambda_min;
      row.tail_lambda_max = ex.lambda_max;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::ofstream out(*out_dir / "sweep_rho.csv", std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot write sweep_rho.csv");
    out << "rho,overall_acc,tail_acc,tail_lambda_min,tail_lambda_max,error\n";
    for (const auto& r : rows) {
      std::string err = r.error.value_or("");
      for (char& ch : err) {
        if (ch == ',' || ch == '\n') ch = ';';
      }
      out << fmt_double(r.rho) << ',' << fmt_double(r.overall_acc) << ',' << fmt_optional(r.tail_acc)
          << ',' << fmt_double(r.tail_lambda_min) << ',' << fmt_double(r.tail_lambda_max) << ','
          << err << '\n';
    }
  }
  return rows;
}

}  // namespace tailsam
