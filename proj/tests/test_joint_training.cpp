#include "support.hpp"

#include "wtal/error.hpp"
#include "wtal/joint_training.hpp"

#include <doctest.h>

#include <fstream>
#include <iterator>

using namespace wtal;
using namespace wtal::train;

namespace {

Matrix column(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++) = x;
  return m;
}

LossComponents unit_components() {
  LossComponents c;
  c.mil = ag::scalar(1.0);
  c.coact = ag::scalar(2.0);
  c.norm = ag::scalar(3.0);
  c.guide = ag::scalar(4.0);
  c.rec = ag::scalar(5.0);
  c.contrastive = ag::scalar(6.0);
  c.consistency = ag::scalar(7.0);
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

}  // namespace

TEST_CASE("consistency loss values") {
  const Var a = ag::constant(column({0.2, 0.7, 0.9}));
  CHECK(consistency_loss(a, a).item() == 0.0);
  CHECK(consistency_loss(ag::constant(Matrix::Ones(4, 1)), ag::constant(Matrix::Zero(4, 1))).item() == 2.0);
  const Matrix m = column({0.1, 0.4, 0.8, 0.3});
  const Matrix r = column({0.6, 0.2, 0.5, 0.9});
  const double mse = (m - r).squaredNorm() / 4.0;
  CHECK(std::abs(consistency_loss(ag::constant(m), ag::constant(r)).item() - 2.0 * mse) < 1e-9);
  CHECK(consistency_loss(ag::constant(m), ag::constant(r), ConsistencyType::kMae).item() ==
        doctest::Approx(2.0 * (m - r).cwiseAbs().mean()).epsilon(1e-12));
  double kl = 0.0;
  for (int t = 0; t < 4; ++t) {
    const double p = m(t), q = r(t);
    kl += p * std::log(p / q) + (1 - p) * std::log((1 - p) / (1 - q)) + q * std::log(q / p) +
          (1 - q) * std::log((1 - q) / (1 - p));
  }
  CHECK(consistency_loss(ag::constant(m), ag::constant(r), ConsistencyType::kKl).item() ==
        doctest::Approx(2.0 * kl / 4.0).epsilon(1e-12));
  CHECK(consistency_loss(ag::constant(m), ag::constant(r), ConsistencyType::kShare).item() == 0.0);
  CHECK(consistency_loss(ag::constant(m), ag::constant(r), ConsistencyType::kNone).item() == 0.0);
  CHECK(consistency_loss(ag::constant(m), ag::constant(r), ConsistencyType::kKl).item() >= 0.0);
  CHECK_THROWS_AS(consistency_loss(ag::constant(m), ag::constant(Matrix::Zero(3, 1))), ValidationError);
}

TEST_CASE("each consistency direction only reaches its own producer") {
  nn::ParameterStore store;
  Var m = store.add("m", column({0.1, 0.4, 0.8, 0.3}));
  Var r = store.add("r", column({0.6, 0.2, 0.5, 0.9}));
  ag::backward(consistency_loss(m, r));
  CHECK(m.grad().isApprox(2.0 * (m.value() - r.value()) / 4.0, 1e-14));
  CHECK(r.grad().isApprox(2.0 * (r.value() - m.value()) / 4.0, 1e-14));

  for (auto type : {ConsistencyType::kMse, ConsistencyType::kKl, ConsistencyType::kMae}) {
    store.zero_grad();
    ag::backward(consistency_loss(m, r, type));
    const Matrix gm = m.grad(), gr = r.grad();
    store.zero_grad();
    ag::backward(consistency_loss(m, ag::detach(r), type));
    CHECK(m.grad() == gm);
    CHECK(r.grad().isZero(0.0));
    store.zero_grad();
    ag::backward(consistency_loss(ag::detach(m), r, type));
    CHECK(r.grad() == gr);
  }
}

TEST_CASE("total loss: weights, linearity and non-finite components") {
  TrainConfig c;
  c.alpha = c.beta = c.lambda = 0.0;
  CHECK(total_loss(unit_components(), c).item() == doctest::Approx(1.0 + 2.0 + 0.1 * 3.0 + 4.0));
  c.coact_weight = c.norm_weight = c.guide_weight = 0.0;
  CHECK(total_loss(unit_components(), c).item() == 1.0);

  TrainConfig base;
  for (double TrainConfig::*w : {&TrainConfig::alpha, &TrainConfig::beta, &TrainConfig::lambda,
                                 &TrainConfig::coact_weight, &TrainConfig::norm_weight, &TrainConfig::guide_weight}) {
    TrainConfig a = base, b = base, z = base;
    a.*w = 0.7;
    b.*w = 1.9;
    z.*w = 0.0;
    const double la = total_loss(unit_components(), a).item();
    const double lb = total_loss(unit_components(), b).item();
    const double lz = total_loss(unit_components(), z).item();
    CHECK((lb - lz) / 1.9 == doctest::Approx((la - lz) / 0.7).epsilon(1e-12));
  }
  TrainConfig thumos;
  CHECK(total_loss(unit_components(), thumos).item() ==
        doctest::Approx(1.0 + 2.0 + 0.3 + 4.0 + 5.0 + 6.0 + 1.5 * 7.0));

  auto bad = unit_components();
  bad.rec = ag::scalar(std::nan(""));
  try {
    total_loss(bad, base);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("L_rec") != std::string::npos);
  }
  bad = unit_components();
  bad.coact = ag::scalar(INFINITY);
  CHECK_THROWS_WITH_AS(total_loss(bad, base), doctest::Contains("L_coact"), NumericalError);
}

TEST_CASE("profile defaults") {
  const auto t = TrainConfig::profile_defaults("thumos");
  CHECK(t.learning_rate == 5e-4);
  CHECK(t.weight_decay == 1e-3);
  CHECK(t.iterations == 5000);
  CHECK(t.alpha == 1.0);
  CHECK(t.beta == 1.0);
  CHECK(t.lambda == 1.5);
  CHECK(t.gamma1 == 0.1);
  CHECK(t.gamma2 == 0.2);
  CHECK(t.batch_size == 10);
  CHECK(t.t_target == 320);
  const auto a = TrainConfig::profile_defaults("anet");
  CHECK(a.learning_rate == 3e-5);
  CHECK(a.iterations == 50000);
  CHECK(a.lambda == 0.25);
  CHECK(a.alpha == 1.0);
  CHECK(a.beta == 1.0);
  CHECK(a.t_target == 60);
  CHECK(TrainConfig::profile_defaults("synthetic").iterations == 500);
  CHECK_THROWS_AS(TrainConfig::profile_defaults("kinetics"), ValidationError);
}

TEST_CASE("config parsing: comments, profile reset, unknown keys, round trip") {
  const auto c = parse_config("# comment\nprofile = anet\nlambda=0.5  # trailing\n\nconsistency = kl\nseed=42\n");
  CHECK(c.profile == "anet");
  CHECK(c.learning_rate == 3e-5);
  CHECK(c.lambda == 0.5);
  CHECK(c.consistency_type() == ConsistencyType::kKl);
  CHECK(c.seed == 42);
  try {
    parse_config("learning_rat = 1\n");
    FAIL("expected an unknown-key error");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find("learning_rat") != std::string::npos);
    for (const auto& key : TrainConfig::keys()) CHECK(what.find(key) != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("no equals sign\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("iterations = many\n"), ValidationError);

  TrainConfig odd = TrainConfig::profile_defaults("synthetic");
  odd.learning_rate = 0.1 + 0.2;
  odd.tsm_template = "a clip of [CLS]";
  odd.use_vlc = false;
  odd.seed = 18446744073709551615ull;
  const auto back = parse_config(serialize_config(odd));
  CHECK(serialize_config(back) == serialize_config(odd));
  CHECK(back.learning_rate == odd.learning_rate);
  CHECK(config_hash(back) == config_hash(odd));
  odd.lambda = 1.25;
  CHECK(config_hash(back) != config_hash(odd));
  for (const auto& key : TrainConfig::keys()) CHECK(serialize_config(odd).find(key + "=") != std::string::npos);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.lambda = -1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.iterations = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.consistency = "cosine";
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.vlc_template = "a video";
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.set("reconstructor", "rnn");
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  CHECK_NOTHROW(c.validate());
  CHECK_THROWS_AS(c.get("missing"), ValidationError);
  CHECK(c.get("lambda") == "1.5");
}

TEST_CASE("miniature framework: vocabulary size, determinism and branch independence") {
  Framework fw(testing::miniature_config(), testing::miniature_classes());
  CHECK(fw.vocabulary().size() == 8);
  const auto batch = testing::miniature_batch();
  const auto a = fw.compute_losses(batch, nullptr);
  const auto b = fw.compute_losses(batch, nullptr);
  CHECK(a.mil.item() == b.mil.item());
  CHECK(a.rec.item() == b.rec.item());
  CHECK(a.coact.item() > 0.0);
  CHECK(a.contrastive.item() >= 0.0);

  const Var x = fw.model_input(batch[0].features);
  const Matrix att_r = fw.vlc()->attention(x, nullptr).value();
  const Matrix att_m = fw.tsm().attention(x, nullptr).value();
  for (auto& [name, v] : fw.parameters().entries()) {
    if (name.rfind("tsm.attention", 0) == 0) {
      Var p = v;
      p.mutable_value().array() += 0.3;
    }
  }
  CHECK(fw.vlc()->attention(x, nullptr).value() == att_r);
  CHECK(fw.tsm().attention(x, nullptr).value() != att_m);
  CHECK_THROWS_AS(fw.model_input(Matrix::Zero(8, 5)), ValidationError);
}

TEST_CASE("share consistency feeds the TSM attention to the completion branch") {
  auto cfg = testing::miniature_config();
  cfg.consistency = "share";
  Framework fw(cfg, testing::miniature_classes());
  const auto l = fw.compute_losses(testing::miniature_batch(), nullptr);
  CHECK(l.consistency.item() == 0.0);
  fw.parameters().zero_grad();
  ag::backward(l.rec);
  CHECK(fw.parameters().get("tsm.attention.conv2.weight").grad().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("total objective gradients match central differences for every consistency type and variant") {
  struct Variant {
    const char* name;
    std::function<void(TrainConfig&)> apply;
  };
  const std::vector<Variant> variants{
      {"mse", [](TrainConfig&) {}},
      {"kl", [](TrainConfig& c) { c.consistency = "kl"; }},
      {"mae", [](TrainConfig& c) { c.consistency = "mae"; }},
      {"share", [](TrainConfig& c) { c.consistency = "share"; }},
      {"gru", [](TrainConfig& c) { c.reconstructor = "gru"; }},
      {"lstm", [](TrainConfig& c) { c.reconstructor = "lstm"; }},
      {"conv head", [](TrainConfig& c) { c.head = "conv"; }},
      {"handcraft", [](TrainConfig& c) { c.tsm_prompt = "handcraft"; }},
      {"gated", [](TrainConfig& c) { c.fusion = "gated"; }},
  };
  for (const auto& v : variants) {
    auto cfg = testing::miniature_config();
    v.apply(cfg);
    Framework fw(cfg, testing::miniature_classes());
    const auto batch = testing::miniature_batch();
    const auto r = testing::grad_check(
        fw.parameters(), [&] { return total_loss(fw.compute_losses(batch, nullptr), cfg); },
        testing::frozen_consistency_total(fw, batch), 1e-5, 8);
    INFO(v.name << ": worst " << r.worst_name << " rel " << r.worst_relative);
    CHECK(r.worst_relative < 1e-4);
  }
}

TEST_CASE("trainer is deterministic for a seed and reduces L_mil") {
  auto cfg = testing::miniature_config();
  cfg.iterations = 60;
  cfg.learning_rate = 3e-3;
  std::vector<TrainingVideo> videos;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (auto& v : testing::miniature_batch(16, 100 + s)) videos.push_back(v);
  auto run = [&] {
    Framework fw(cfg, testing::miniature_classes());
    Trainer trainer(fw, videos);
    return trainer.run();
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == 60);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(metrics_csv_line(a[i]) == metrics_csv_line(b[i]));
  CHECK(a.back().mil < a.front().mil);
  CHECK(a.front().iteration == 1);
  CHECK(std::string(kMetricsHeader) == "iteration,L_mil,L_rec,L_c,L_con,L_total");
}

TEST_CASE("full-length sampling trains on videos of different lengths") {
  auto cfg = testing::miniature_config();
  cfg.sampling = "full";
  cfg.iterations = 3;
  CHECK_NOTHROW(cfg.validate());
  auto videos = testing::miniature_batch();
  videos[2].features = ag::Matrix::Random(13, 16);
  Framework fw(cfg, testing::miniature_classes());
  Trainer trainer(fw, videos);
  const auto rows = trainer.run();
  REQUIRE(rows.size() == 3);
  CHECK(std::isfinite(rows.back().total));
  cfg.sampling = "pad";
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("trainer rejects empty splits and unlabelled videos; divergence aborts") {
  auto cfg = testing::miniature_config();
  Framework fw(cfg, testing::miniature_classes());
  CHECK_THROWS_AS(Trainer(fw, {}), ValidationError);
  auto videos = testing::miniature_batch();
  videos[1].label = {0, 0, 0};
  CHECK_THROWS_AS(Trainer(fw, videos), ValidationError);

  cfg.divergence_limit = 1e-3;
  Framework tiny(cfg, testing::miniature_classes());
  Trainer trainer(tiny, testing::miniature_batch());
  try {
    trainer.step();
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.iteration == 0);
  }
}

TEST_CASE("checkpoint round trip reproduces inference bit-identically and restores the optimiser") {
  const auto dir = testing::scratch_dir("checkpoint");
  auto cfg = testing::miniature_config();
  cfg.iterations = 3;
  Framework fw(cfg, testing::miniature_classes());
  Trainer trainer(fw, testing::miniature_batch());
  trainer.run();
  save_checkpoint(dir / "ck.bin", fw, &trainer);

  const auto ck = load_checkpoint(dir / "ck.bin", &fw.class_names(), &cfg);
  CHECK(ck.warnings.empty());
  CHECK(ck.iteration == 3);
  CHECK(ck.optimizer_steps == 3);
  CHECK(ck.config_hash == config_hash(cfg));
  CHECK(serialize_config(ck.framework->config()) == serialize_config(cfg));
  const Matrix features = testing::miniature_batch(16, 5)[0].features;
  const auto a = fw.infer(features);
  const auto b = ck.framework->infer(features);
  CHECK(a.attention == b.attention);
  CHECK(a.similarity == b.similarity);
  CHECK(a.suppressed == b.suppressed);
  CHECK(a.probs_suppressed == b.probs_suppressed);

  Trainer resumed(*ck.framework, testing::miniature_batch());
  restore_trainer(ck, resumed);
  CHECK(resumed.iteration() == 3);
  CHECK(resumed.optimizer().steps() == 3);
  for (std::size_t i = 0; i < trainer.optimizer().first_moments().size(); ++i) {
    CHECK(resumed.optimizer().first_moments()[i] == trainer.optimizer().first_moments()[i]);
    CHECK(resumed.optimizer().second_moments()[i] == trainer.optimizer().second_moments()[i]);
  }
}

TEST_CASE("checkpoint errors: different class count, truncation, corruption, config warning") {
  const auto dir = testing::scratch_dir("checkpoint_errors");
  auto cfg = testing::miniature_config();
  Framework fw(cfg, testing::miniature_classes());
  save_checkpoint(dir / "ck.bin", fw, nullptr);

  const std::vector<std::string> two{"run", "jump"};
  CHECK_THROWS_AS(load_checkpoint(dir / "ck.bin", &two), ValidationError);

  const auto bytes = slurp(dir / "ck.bin");
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    write_bytes(dir / "cut.bin", bytes.substr(0, cut));
    CHECK_THROWS_AS(load_checkpoint(dir / "cut.bin"), CorruptArchiveError);
  }
  auto flipped = bytes;
  flipped[flipped.size() / 2] = static_cast<char>(flipped[flipped.size() / 2] ^ 0x10);
  write_bytes(dir / "flip.bin", flipped);
  CHECK_THROWS_AS(load_checkpoint(dir / "flip.bin"), CorruptArchiveError);
  CHECK_THROWS(load_checkpoint(dir / "absent.bin"));

  auto other = cfg;
  other.lambda = 0.75;
  const auto ck = load_checkpoint(dir / "ck.bin", nullptr, &other);
  REQUIRE(ck.warnings.size() == 1);
  CHECK(ck.warnings.front().find("config") != std::string::npos);
  CHECK(ck.iteration == 0);
}
