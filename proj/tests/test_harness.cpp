#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "support.hpp"

#include <cstdlib>

#include "json.hpp"
#include "tailsam/harness.hpp"

using namespace tailsam;
using nlohmann::json;
using testing::ScratchDir;
using testing::slurp;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.profile = {ImbalanceKind::LongTail, 2, 120, 10.0};
  cfg.geometry = {2, 1.5, 0.8, MeanPlacement::Circle};
  cfg.test_per_class = 100;
  cfg.model = {{2, 8, 2}, Activation::Tanh, true};
  cfg.epochs = 20;
  cfg.drw_threshold = 16;
  cfg.batch_size = 32;
  cfg.lr.base_lr = 0.05;
  cfg.optimizer.kind = OptimizerKind::SGD;
  cfg.optimizer.momentum = 0.9;
  cfg.seed = 11;
  cfg.analysis.spectrum.iters = 20;
  cfg.analysis.spectrum.num_probes = 2;
  cfg.analysis.cnc_num_batches = 32;
  return cfg;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode{};
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string line; std::getline(ss, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  return out;
}

// metrics.csv with the config_hash column (second from last) removed.
std::string without_hash(const std::string& text) {
  std::string out;
  for (const auto& line : lines_of(text)) {
    auto f = split_csv(line);
    f.erase(f.end() - 2);
    for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + f[i];
    out += '\n';
  }
  return out;
}

RunResult run_in(ExperimentConfig cfg, const std::filesystem::path& dir,
                 const Checkpoint* resume = nullptr) {
  cfg.output_dir_override = dir.string();
  RunOptions opts;
  opts.resume_from = resume;
  return run_experiment(cfg, opts);
}

// Linear C x C model with identity weights and the given biases.
std::pair<MlpSpec, Vector> linear_identity(std::size_t c, double weight_scale) {
  MlpSpec spec{{c, c}, Activation::Tanh, true};
  Vector w(c * c + c, 0.0);
  for (std::size_t i = 0; i < c; ++i) w[i * c + i] = weight_scale;
  return {spec, w};
}

LabeledDataset balanced(std::size_t c, std::size_t per_class, auto&& feature) {
  LabeledDataset ds;
  ds.features = Matrix(c * per_class, c);
  ds.class_counts.assign(c, per_class);
  for (std::size_t y = 0; y < c; ++y) {
    for (std::size_t k = 0; k < per_class; ++k) {
      const std::size_t row = y * per_class + k;
      ds.labels.push_back(static_cast<int>(y));
      for (std::size_t j = 0; j < c; ++j) ds.features(row, j) = feature(y, j);
    }
  }
  return ds;
}

}  // namespace

TEST_CASE("config json round trip and strictness") {
  ExperimentConfig cfg = small_config();
  cfg.spectrum_epochs = {0, 20};
  cfg.cnc_epochs = {5};
  cfg.rho_schedule.steps = {{0, 0.1}, {10, 0.3}};
  cfg.lr.milestones = {{15, 0.1}};
  cfg.loss.variant = LossVariant::LDAM;
  cfg.loss.class_weights = Vector{1.0, 2.0};
  cfg.analysis.cnc_class = 1;

  const json j = config_to_json(cfg);
  const ExperimentConfig back = config_from_json(j);
  CHECK(config_to_json(back) == j);
  CHECK(config_hash(back) == config_hash(cfg));

  json extra = j;
  extra["learning_rate"] = 0.1;
  CHECK(code_of([&] { config_from_json(extra); }) == ErrorCode::Config);
  json nested = j;
  nested["optimizer"]["nesterov"] = true;
  CHECK(code_of([&] { config_from_json(nested); }) == ErrorCode::Config);
  json wrong_type = j;
  wrong_type["epochs"] = "twenty";
  CHECK(code_of([&] { config_from_json(wrong_type); }) == ErrorCode::Config);

  // Missing keys take defaults.
  const ExperimentConfig partial = config_from_json(json{{"epochs", 3}, {"seed", 5}});
  CHECK(partial.epochs == 3);
  CHECK(partial.seed == 5);
  CHECK(partial.batch_size == ExperimentConfig{}.batch_size);
}

TEST_CASE("config validation") {
  auto bad = [](auto&& mutate) {
    ExperimentConfig cfg = small_config();
    mutate(cfg);
    return code_of([&] { cfg.validate(); });
  };
  CHECK(bad([](ExperimentConfig&) {}) == ErrorCode{});
  CHECK(bad([](ExperimentConfig& c) { c.drw_threshold = 21; }) == ErrorCode::Config);
  CHECK(bad([](ExperimentConfig& c) { c.spectrum_epochs = {21}; }) == ErrorCode::Config);
  CHECK(bad([](ExperimentConfig& c) { c.cnc_epochs = {30}; }) == ErrorCode::Config);
  CHECK(bad([](ExperimentConfig& c) { c.model.layer_sizes = {3, 8, 2}; }) == ErrorCode::Config);
  CHECK(bad([](ExperimentConfig& c) { c.model.layer_sizes = {2, 8, 3}; }) == ErrorCode::Config);
  CHECK(bad([](ExperimentConfig& c) { c.batch_size = 0; }) == ErrorCode::Config);
  CHECK(bad([](ExperimentConfig& c) { c.analysis.cnc_class = 2; }) == ErrorCode::Config);
  CHECK(bad([](ExperimentConfig& c) { c.optimizer.rho = -1.0; }) != ErrorCode{});
  CHECK(bad([](ExperimentConfig& c) { c.profile.beta = 0.5; }) == ErrorCode::InfeasibleProfile);
}

TEST_CASE("config hash ignores the output directory") {
  ExperimentConfig a = small_config();
  ExperimentConfig b = a;
  b.output_dir = "elsewhere";
  b.output_dir_override = "/tmp/x";
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.seed = 12;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("output directory precedence") {
  ExperimentConfig cfg = small_config();
  cfg.output_dir = "from_config";
  ::unsetenv(kOutputDirEnv);
  CHECK(resolve_output_dir(cfg) == "from_config");
  ::setenv(kOutputDirEnv, "from_env", 1);
  CHECK(resolve_output_dir(cfg) == "from_env");
  cfg.output_dir_override = "from_cli";
  CHECK(resolve_output_dir(cfg) == "from_cli");
  ::unsetenv(kOutputDirEnv);
}

TEST_CASE("evaluate: perfect and constant classifiers") {
  const std::size_t c = 4;
  const ClassGroups groups{{0}, {1, 2}, {3}};
  const auto test = balanced(c, 25, [](std::size_t y, std::size_t j) { return y == j ? 3.0 : 0.0; });

  const auto [spec, w] = linear_identity(c, 1.0);
  const GroupAccuracy perfect = evaluate(spec, w, test, groups);
  CHECK(perfect.overall == 1.0);
  CHECK(*perfect.head == 1.0);
  CHECK(*perfect.mid == 1.0);
  CHECK(*perfect.tail == 1.0);
  for (double a : perfect.per_class_accuracy) CHECK(a == 1.0);

  Vector constant(c * c + c, 0.0);
  constant[c * c] = 1.0;  // bias of class 0
  const GroupAccuracy k = evaluate(spec, constant, test, groups);
  CHECK(k.overall == doctest::Approx(1.0 / c).epsilon(1e-15));
  CHECK(*k.head == 1.0);
  CHECK(*k.tail == 0.0);
  CHECK(k.per_class_accuracy == std::vector<double>{1.0, 0.0, 0.0, 0.0});
  // Per-class loss is plain cross-entropy: logits (1,0,0,0).
  const double ce_other = std::log(std::exp(1.0) + 3.0);
  CHECK(k.per_class_loss[0] == doctest::Approx(ce_other - 1.0).epsilon(1e-12));
  CHECK(k.per_class_loss[2] == doctest::Approx(ce_other).epsilon(1e-12));
}

TEST_CASE("evaluate: empty groups are absent") {
  const auto test = balanced(2, 10, [](std::size_t y, std::size_t j) { return y == j ? 1.0 : 0.0; });
  const auto [spec, w] = linear_identity(2, 1.0);
  const GroupAccuracy g = evaluate(spec, w, test, ClassGroups{{0, 1}, {}, {}});
  CHECK(g.head.has_value());
  CHECK_FALSE(g.mid.has_value());
  CHECK_FALSE(g.tail.has_value());
}

TEST_CASE("evaluate: random predictions sit at chance") {
  // Features independent of labels, identity model: predictions are uniform
  // and independent of the label, so overall accuracy ~ 1/C with binomial
  // spread sqrt(sum_c p(1-p)/n_c)/C.
  const std::size_t c = 10, per = 1000;
  SeededRng rng(4, 0);
  const auto test = balanced(c, per, [&](std::size_t, std::size_t) { return rng.normal(); });
  const auto [spec, w] = linear_identity(c, 1.0);
  const GroupAccuracy g = evaluate(spec, w, test, ClassGroups{});
  const double p = 1.0 / c;
  const double sigma = std::sqrt(c * p * (1 - p) / per) / c;
  CHECK(std::abs(g.overall - p) < 3 * sigma);
}

TEST_CASE("zero epochs returns the initial parameters") {
  ScratchDir dir("e0");
  ExperimentConfig cfg = small_config();
  cfg.epochs = 0;
  cfg.drw_threshold = 0;
  const RunResult r = run_in(cfg, dir.path());
  CHECK(r.metrics.empty());
  SeededRng init(cfg.seed, 3);
  CHECK(testing::bitwise_equal(r.final_params.data, init_params(cfg.model, init).data));
  CHECK(lines_of(slurp(dir / "metrics.csv")).size() == 1);
  CHECK(std::filesystem::exists(dir / "checkpoint_0.json"));
  CHECK(std::filesystem::exists(dir / "summary.json"));
}

TEST_CASE("metrics schema") {
  ScratchDir dir("schema");
  ExperimentConfig cfg = small_config();
  cfg.epochs = 3;
  cfg.drw_threshold = 2;
  const RunResult r = run_in(cfg, dir.path());
  const auto lines = lines_of(slurp(dir / "metrics.csv"));
  REQUIRE(lines.size() == 4);
  const auto header = split_csv(lines[0]);
  CHECK(header.front() == "epoch");
  CHECK(header[header.size() - 2] == "config_hash");
  CHECK(header.back() == "code_version");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto row = split_csv(lines[i]);
    CHECK(row.size() == header.size());
    CHECK(row[0] == std::to_string(i));
    CHECK(row[row.size() - 2] == r.config_hash);
    CHECK(row.back() == kCodeVersion);
  }
  for (const auto& m : r.metrics) {
    CHECK(m.eval.overall >= 0.0);
    CHECK(m.eval.overall <= 1.0);
    double mean = 0.0;
    for (double a : m.eval.per_class_accuracy) mean += a / 2.0;
    CHECK(m.eval.overall == doctest::Approx(mean).epsilon(1e-15));
  }
  const json summary = json::parse(slurp(dir / "summary.json"));
  CHECK(summary.at("config_hash") == r.config_hash);
  CHECK(summary.at("final").at("overall_acc").get<double>() == r.metrics.back().eval.overall);
}

TEST_CASE("logged class weights follow the deferred re-weighting switch") {
  ScratchDir dir("drw");
  ExperimentConfig cfg = small_config();
  cfg.epochs = 6;
  cfg.drw_threshold = 4;
  const RunResult r = run_in(cfg, dir.path());
  const ReweightSchedule sched{cfg.drw_threshold, class_counts(cfg.profile)};
  const auto lines = lines_of(slurp(dir / "metrics.csv"));
  const auto header = split_csv(lines[0]);
  const auto col = std::find(header.begin(), header.end(), "weight_c0") - header.begin();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const Vector expect = drw_weights(sched, e);
    CHECK(r.metrics[e].class_weights == expect);
    const auto row = split_csv(lines[e + 1]);
    for (std::size_t c = 0; c < 2; ++c) CHECK(std::stod(row[col + c]) == expect[c]);
  }
  CHECK(r.metrics[3].class_weights == Vector{1.0, 1.0});
  CHECK(r.metrics[4].class_weights[1] == 1.0 / static_cast<double>(sched.class_counts[1]));
}

TEST_CASE("identical runs write identical files") {
  ScratchDir a("rep_a"), b("rep_b");
  ExperimentConfig cfg = small_config();
  cfg.optimizer.kind = OptimizerKind::SAM;
  cfg.optimizer.rho = 0.1;
  cfg.optimizer.rho_drw = 0.2;
  cfg.checkpoint_epochs = {10};
  const RunResult ra = run_in(cfg, a.path());
  const RunResult rb = run_in(cfg, b.path());
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "checkpoint_20.json") == slurp(b / "checkpoint_20.json"));
  CHECK(testing::bitwise_equal(ra.final_params.data, rb.final_params.data));
}

TEST_CASE("analyses do not perturb the trajectory") {
  ScratchDir a("plain"), b("probed");
  ExperimentConfig cfg = small_config();
  cfg.epochs = 8;
  cfg.drw_threshold = 6;
  const RunResult plain = run_in(cfg, a.path());
  ExperimentConfig probed = cfg;
  probed.spectrum_epochs = {0, 4};
  probed.cnc_epochs = {4};
  const RunResult r = run_in(probed, b.path());
  CHECK(testing::bitwise_equal(plain.final_params.data, r.final_params.data));
  CHECK(std::filesystem::exists(b / "spectrum_4_class0.csv"));
  CHECK(std::filesystem::exists(b / "spectrum_4_class1.json"));
  CHECK(std::filesystem::exists(b / "spectrum_0_all.csv"));
  CHECK(std::filesystem::exists(b / "cnc_4.csv"));
}

TEST_CASE("SGD and SAM at rho zero write the same metrics") {
  ScratchDir a("sgd"), b("sam0");
  ExperimentConfig sgd = small_config();
  ExperimentConfig sam = sgd;
  sam.optimizer.kind = OptimizerKind::SAM;
  sam.optimizer.rho = 0.0;
  sam.optimizer.rho_drw = 0.0;
  const RunResult rs = run_in(sgd, a.path());
  const RunResult rz = run_in(sam, b.path());
  CHECK(testing::bitwise_equal(rs.final_params.data, rz.final_params.data));
  CHECK(without_hash(slurp(a / "metrics.csv")) == without_hash(slurp(b / "metrics.csv")));
}

TEST_CASE("checkpoint round trip") {
  ScratchDir dir("ckpt");
  SeededRng rng(8, 0);
  Checkpoint c;
  c.config_hash = "0123456789abcdef";
  c.epoch = 7;
  for (int i = 0; i < 300; ++i) {
    c.params.push_back(rng.normal() * std::pow(10.0, 60.0 * rng.uniform() - 30.0));
    c.velocity.push_back(rng.normal());
  }
  c.params[0] = 0.1;
  c.params[1] = -0.0;
  c.params[2] = 5e-324;
  c.step_count = 1234;
  c.skipped_perturbations = 3;
  c.shuffle_rng = SeededRng(1, 4).state();
  c.optimizer_rng = SeededRng(1, 5).state();
  c.config = config_to_json(small_config());
  const auto path = dir / "c.json";
  save_checkpoint(path, c);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back == c);
  CHECK(testing::bitwise_equal(back.params, c.params));
  CHECK(std::signbit(back.params[1]));
  CHECK_FALSE(std::filesystem::exists(dir / "c.json.tmp"));
}

TEST_CASE("checkpoint load errors") {
  ScratchDir dir("ckpt_err");
  Checkpoint c;
  c.config_hash = "0000000000000000";
  c.params = {1.0, 2.0, 3.0};
  c.velocity = {0.0, 0.0, 0.0};
  c.config = json::object();
  const auto good = dir / "good.json";
  save_checkpoint(good, c);
  const std::string text = slurp(good);

  const auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream(dir / name, std::ios::binary) << body;
    return dir / name;
  };
  CHECK(code_of([&] { load_checkpoint(write("trunc.json", text.substr(0, text.size() / 2))); }) ==
        ErrorCode::CorruptFile);
  CHECK(code_of([&] { load_checkpoint(write("empty.json", "")); }) == ErrorCode::CorruptFile);
  CHECK(code_of([&] { load_checkpoint(write("nofield.json", "{\"format_version\":1}")); }) ==
        ErrorCode::CorruptFile);

  json j = json::parse(text);
  j["format_version"] = kCheckpointFormatVersion + 1;
  CHECK(code_of([&] { load_checkpoint(write("v2.json", j.dump())); }) == ErrorCode::VersionMismatch);

  j = json::parse(text);
  j["velocity"] = {0.0};
  CHECK(code_of([&] { load_checkpoint(write("len.json", j.dump())); }) == ErrorCode::CorruptFile);

  CHECK(code_of([&] { load_checkpoint(dir / "missing.json"); }) == ErrorCode::Io);
}

TEST_CASE("resume at epoch 10 of 20 matches the uninterrupted run") {
  for (const auto kind : {OptimizerKind::SGD, OptimizerKind::SAM, OptimizerKind::PGD, OptimizerKind::LPFSGD}) {
    CAPTURE(to_string(kind));
    ScratchDir a("full"), b("resumed");
    ExperimentConfig cfg = small_config();
    cfg.optimizer.kind = kind;
    cfg.optimizer.rho = 0.1;
    cfg.optimizer.rho_drw = 0.3;
    cfg.optimizer.pgd_sigma = 1e-3;
    cfg.optimizer.lpf_mc_iters = 2;
    cfg.optimizer.lpf_radius = 1e-2;
    cfg.checkpoint_epochs = {10};
    const RunResult full = run_in(cfg, a.path());

    const Checkpoint ck = load_checkpoint(a / "checkpoint_10.json");
    CHECK(ck.epoch == 10);
    // Resume into a directory holding the full metrics; rows past the
    // checkpoint are dropped and rewritten.
    std::filesystem::copy_file(a / "metrics.csv", b / "metrics.csv");
    const RunResult resumed = run_in(cfg, b.path(), &ck);
    CHECK(resumed.metrics.size() == 10);
    CHECK(testing::bitwise_equal(full.final_params.data, resumed.final_params.data));
    CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
    CHECK(slurp(a / "checkpoint_20.json") == slurp(b / "checkpoint_20.json"));
  }
}

TEST_CASE("resume rejects a checkpoint from another config") {
  ScratchDir a("src"), b("dst");
  ExperimentConfig cfg = small_config();
  cfg.epochs = 2;
  cfg.drw_threshold = 2;
  run_in(cfg, a.path());
  const Checkpoint ck = load_checkpoint(a / "checkpoint_2.json");
  ExperimentConfig other = cfg;
  other.seed = 99;
  CHECK(code_of([&] { run_in(other, b.path(), &ck); }) == ErrorCode::Config);
}

TEST_CASE("sweep over rho") {
  ScratchDir dir("sweep");
  ExperimentConfig cfg = small_config();
  cfg.epochs = 6;
  cfg.drw_threshold = 5;
  const RunResult sgd = run_experiment(cfg, RunOptions{false, nullptr});
  const auto data = make_data(cfg);
  const auto sgd_eval = evaluate(cfg.model, sgd.final_params.data, data.test, data.groups);

  const auto zero = sweep_rho(cfg, {0.0}, std::nullopt);
  REQUIRE(zero.size() == 1);
  CHECK_FALSE(zero[0].error.has_value());
  CHECK(zero[0].overall_acc == sgd_eval.overall);
  CHECK(zero[0].tail_acc == sgd_eval.tail);
  const auto ex = class_extremes(cfg, data, sgd.final_params.data, smallest_class(data.train), 3000);
  CHECK(zero[0].tail_lambda_min == ex.lambda_min);
  CHECK(zero[0].tail_lambda_max == ex.lambda_max);

  const auto rows = sweep_rho(cfg, {0.2, -1.0, 0.2}, dir.path());
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].error.has_value());
  CHECK_FALSE(rows[0].error.has_value());
  CHECK(rows[0].overall_acc == rows[2].overall_acc);
  CHECK(rows[0].tail_acc == rows[2].tail_acc);
  CHECK(rows[0].tail_lambda_min == rows[2].tail_lambda_min);
  CHECK(rows[0].tail_lambda_max == rows[2].tail_lambda_max);
  const auto csv = lines_of(slurp(dir / "sweep_rho.csv"));
  CHECK(csv.size() == 4);
  CHECK(slurp(dir / "rho_0" / "metrics.csv") == slurp(dir / "rho_2" / "metrics.csv"));

  CHECK(code_of([&] { sweep_rho(cfg, {}, std::nullopt); }) == ErrorCode::Parameter);
}

TEST_CASE("CNC inequality on a trained MLP at small rho") {
  ExperimentConfig cfg = small_config();
  cfg.analysis.cnc_num_batches = 400;
  const RunResult r = run_experiment(cfg, RunOptions{false, nullptr});
  const auto data = make_data(cfg);
  ScratchDir dir("cnc");
  const CncReport rep =
      write_cnc_snapshot(cfg, data, r.final_params.data, cfg.epochs, {0.0, 0.01, 0.02}, std::nullopt,
                         dir.path());
  REQUIRE(rep.rows.size() == 3);
  for (const auto& row : rep.rows) {
    CAPTURE(row.rho);
    if (row.cnc_violation) continue;
    REQUIRE(row.measured_ratio.has_value());
    CHECK(*row.measured_ratio >= row.predicted_factor - 3 * row.ratio_stderr);
  }
  CHECK(*rep.rows[0].measured_ratio == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::filesystem::exists(dir / "cnc_20.csv"));
  CHECK(std::filesystem::exists(dir / "cnc_20.json"));
}
