#include "support.hpp"

#include "wtal/error.hpp"
#include "wtal/tsm.hpp"

#include <doctest.h>

using namespace wtal;
using namespace wtal::tsm;

namespace {

TsmConfig small_config(HeadType head = HeadType::kTextMatching) {
  TsmConfig c;
  c.input_dim = 16;
  c.embed_dim = 16;
  c.attention_hidden = 16;
  c.text_heads = 2;
  c.text_ff = 16;
  c.prompt_length = 2;
  c.head = head;
  return c;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  return m;
}

void zero_param(nn::ParameterStore& store, const std::string& name) {
  Var v = store.get(name);
  v.mutable_value().setZero();
}

}  // namespace

TEST_CASE("video embedding preserves shape, maps zero to zero and is deterministic without dropout") {
  nn::ParameterStore store;
  nn::Rng rng(1);
  TsmModel model(small_config(), random_matrix(3, 8, 2), store, rng);
  const Var x = ag::constant(random_matrix(8, 16, 3));
  const Var e = model.video_embed(x, nullptr);
  CHECK(e.rows() == 8);
  CHECK(e.cols() == 16);
  CHECK(model.video_embed(x, nullptr).value() == e.value());
  zero_param(store, "tsm.embed.conv1.bias");
  zero_param(store, "tsm.embed.conv2.bias");
  CHECK(model.video_embed(ag::constant(Matrix::Zero(8, 16)), nullptr).value().isZero(0.0));
}

TEST_CASE("foreground attention lies in (0,1) and is 0.5 with a zero final layer") {
  nn::ParameterStore store;
  nn::Rng rng(4);
  TsmModel model(small_config(), random_matrix(3, 8, 5), store, rng);
  const Var x = ag::constant(random_matrix(8, 16, 6) * 5.0);
  const Matrix att = model.attention(x, nullptr).value();
  CHECK(att.cols() == 1);
  CHECK(att.minCoeff() > 0.0);
  CHECK(att.maxCoeff() < 1.0);
  zero_param(store, "tsm.attention.conv2.weight");
  zero_param(store, "tsm.attention.conv2.bias");
  CHECK((model.attention(x, nullptr).value().array() == 0.5).all());
}

TEST_CASE("gradient of mean attention with respect to the input matches central differences") {
  nn::ParameterStore store;
  nn::Rng rng(7);
  TsmModel model(small_config(), random_matrix(3, 8, 8), store, rng);
  nn::ParameterStore inputs;
  Var x = inputs.add("x", random_matrix(8, 16, 9));
  const auto r = testing::grad_check(inputs, [&] { return ag::mean(model.attention(x, nullptr)); }, 1e-5, 128);
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("text queries: one row per class plus background, permutation-equivariant") {
  const Matrix labels = random_matrix(3, 8, 10);
  Matrix permuted(3, 8);
  permuted << labels.row(2), labels.row(0), labels.row(1);
  nn::ParameterStore s1, s2;
  nn::Rng r1(11), r2(11);
  TsmModel m1(small_config(), labels, s1, r1);
  TsmModel m2(small_config(), permuted, s2, r2);
  const Matrix q1 = m1.text_encode().value();
  const Matrix q2 = m2.text_encode().value();
  CHECK(q1.rows() == 4);
  CHECK(q1.cols() == 16);
  CHECK(q2.row(0) == q1.row(2));
  CHECK(q2.row(1) == q1.row(0));
  CHECK(q2.row(2) == q1.row(1));
  CHECK(q2.row(3) == q1.row(3));
  CHECK(m1.query_tokens(0).rows() == 1 + 2 + 1);
}

TEST_CASE("text encoder with zeroed query/key projections averages the value-projected tokens") {
  nn::ParameterStore store;
  nn::Rng rng(12);
  auto enc = TextEncoder::create(store, "enc", 16, 2, 16, rng);
  enc.wq.mutable_value().setZero();
  enc.wk.mutable_value().setZero();
  const Matrix tokens = random_matrix(5, 16, 13);
  const Matrix out = enc.attend(ag::constant(tokens)).value();
  const Matrix mean_value = tokens.colwise().mean() * enc.wv.value();
  const Matrix expected = mean_value * enc.wo.weight.value() + enc.wo.bias.value();
  for (int i = 0; i < 5; ++i) CHECK((out.row(i) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("matching is the row inner product") {
  Matrix e = Matrix::Identity(2, 3);
  CHECK(match(ag::constant(e), ag::constant(e)).value() == Matrix::Identity(2, 2));
  const Matrix xe = random_matrix(5, 6, 14);
  const Matrix xq = random_matrix(4, 6, 15);
  const Matrix s = match(ag::constant(xe), ag::constant(xq)).value();
  for (int t = 0; t < 5; ++t)
    for (int c = 0; c < 4; ++c) {
      double dot = 0.0;
      for (int d = 0; d < 6; ++d) dot += xe(t, d) * xq(c, d);
      CHECK(s(t, c) == doctest::Approx(dot).epsilon(1e-12));
    }
}

TEST_CASE("suppression scales rows by attention") {
  const Matrix s = random_matrix(4, 3, 16);
  CHECK(suppress(ag::constant(s), ag::constant(Matrix::Ones(4, 1))).value() == s);
  CHECK(suppress(ag::constant(s), ag::constant(Matrix::Zero(4, 1))).value().isZero(0.0));
  Matrix att = Matrix::Ones(4, 1);
  att(2) = 0.5;
  const Matrix half = suppress(ag::constant(s), ag::constant(att)).value();
  CHECK(half.row(2) == 0.5 * s.row(2));
  CHECK(half.row(1) == s.row(1));
  const Matrix ones_pooled = ag::topk_mean_cols(suppress(ag::constant(s), ag::constant(Matrix::Ones(4, 1))), 2).value();
  CHECK(ones_pooled == ag::topk_mean_cols(ag::constant(s), 2).value());
}

TEST_CASE("top-k pooling") {
  const std::vector<double> v{1, 2, 3, 4};
  CHECK(topk_pool(v, 2) == 3.5);
  CHECK(topk_pool(v, 4) == 2.5);
  CHECK_THROWS_AS(topk_pool(v, 0), ValidationError);
  CHECK_THROWS_AS(topk_pool(v, 5), ValidationError);
  CHECK(topk_count(8, 8) == 1);
  CHECK(topk_count(9, 8) == 2);
  CHECK(topk_count(3, 8) == 1);
  CHECK(topk_count(320, 8) == 40);
}

TEST_CASE("top-k pooling equals subset enumeration for every T <= 10, k <= 5") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n01;
  for (int T = 1; T <= 10; ++T)
    for (int k = 1; k <= std::min(T, 5); ++k)
      for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> v(static_cast<std::size_t>(T));
        for (auto& x : v) x = std::round(n01(rng) * 4.0) / 4.0;
        CHECK(topk_pool(v, k) == doctest::Approx(testing::topk_by_subsets(v, k)).epsilon(1e-12));
        Matrix col = Eigen::Map<Matrix>(v.data(), T, 1);
        CHECK(ag::topk_mean_cols(ag::constant(col), k).item() == doctest::Approx(topk_pool(v, k)).epsilon(1e-12));
      }
}

TEST_CASE("softmax closed forms and shift invariance") {
  CHECK(softmax(Eigen::VectorXd::Zero(4)).isApprox(Eigen::VectorXd::Constant(4, 0.25)));
  Eigen::VectorXd v(2);
  v << 0.0, std::log(3.0);
  CHECK(softmax(v)(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(softmax(v)(1) == doctest::Approx(0.75).epsilon(1e-12));
  const Eigen::VectorXd r = random_matrix(5, 1, 18).col(0);
  const Eigen::VectorXd shifted = (r.array() + 123.0).matrix();
  CHECK((softmax(r) - softmax(shifted)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(softmax(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  Eigen::Index a = 0, b = 0;
  softmax(r).maxCoeff(&a);
  softmax(shifted).maxCoeff(&b);
  CHECK(a == b);
  const auto [p, pb] = video_scores(ag::constant(r.transpose()), ag::constant(shifted.transpose()));
  CHECK(p.value().sum() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK((p.value() - pb.value()).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("MIL targets: background bit only in y, both l1-normalised") {
  const std::vector<int> label{1, 0, 1};
  const auto t = make_mil_targets(label);
  CHECK(t.y.isApprox((Matrix(1, 4) << 1, 0, 1, 1).finished() / 3.0));
  CHECK(t.y_hat.isApprox((Matrix(1, 4) << 0.5, 0, 0.5, 0).finished()));
  const std::vector<int> none{0, 0};
  CHECK_THROWS_AS(make_mil_targets(none), ValidationError);
}

TEST_CASE("MIL loss closed forms") {
  const std::vector<int> one{1, 0};
  const auto t = make_mil_targets(one);
  const double entropy_y = std::log(2.0);
  CHECK(mil_loss(ag::constant(t.y), ag::constant(t.y_hat), t).item() == doctest::Approx(entropy_y).epsilon(1e-12));

  MilTargets onehot{(Matrix(1, 3) << 1, 0, 0).finished(), (Matrix(1, 3) << 1, 0, 0).finished()};
  CHECK(mil_loss(ag::constant(onehot.y), ag::constant(onehot.y_hat), onehot).item() == 0.0);

  MilTargets hand{(Matrix(1, 3) << 0.5, 0, 0.5).finished(), Matrix::Zero(1, 3)};
  const Matrix p = (Matrix(1, 3) << 0.5, 0.25, 0.25).finished();
  const double first = -(0.5 * std::log(0.5) + 0.5 * std::log(0.25));
  CHECK(mil_loss(ag::constant(p), ag::constant(p), hand).item() == doctest::Approx(first).epsilon(1e-12));
  CHECK(mil_loss(ag::constant(Matrix::Zero(1, 3)), ag::constant(p), hand).item() ==
        doctest::Approx(-std::log(1e-8)).epsilon(1e-12));
}

TEST_CASE("auxiliary losses: norm, guide and co-activity special cases") {
  CHECK(norm_loss(ag::constant(Matrix::Constant(6, 1, 0.5))).item() == 0.5);

  const Matrix s = random_matrix(6, 4, 19);
  Matrix att(6, 1);
  for (int t = 0; t < 6; ++t) att(t) = 1.0 - softmax(s.row(t).transpose())(3);
  CHECK(guide_loss(ag::constant(att), ag::constant(s)).item() == doctest::Approx(0.0).epsilon(1e-12));

  std::vector<CoactivityInput> batch{
      {ag::constant(random_matrix(6, 5, 20)), ag::constant(att), ag::constant(s), ag::constant(s), {1, 0, 0}},
      {ag::constant(random_matrix(6, 5, 21)), ag::constant(att), ag::constant(s), ag::constant(s), {0, 1, 0}}};
  CHECK(coactivity_loss(batch).item() == 0.0);
  CHECK(coactivity_loss(std::span(batch).first(1)).item() == 0.0);
}

TEST_CASE("co-activity loss equals a scalar evaluation for one shared pair") {
  std::vector<CoactivityInput> batch;
  std::vector<Matrix> xe, atts, sims;
  for (int v = 0; v < 2; ++v) {
    xe.push_back(random_matrix(5, 3, 30 + v));
    Matrix a = random_matrix(5, 1, 40 + v).unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
    atts.push_back(a);
    sims.push_back(random_matrix(5, 3, 50 + v));
    const Matrix sup = sims.back().array().colwise() * a.col(0).array();
    batch.push_back({ag::constant(xe.back()), ag::constant(a), ag::constant(sims.back()), ag::constant(sup), {0, 1}});
  }
  auto pool = [](const Eigen::VectorXd& scores, const Matrix& x) {
    const Eigen::VectorXd w = softmax(scores);
    Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) out += w(t) * x.row(t);
    return out;
  };
  auto cos = [](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    return a.dot(b) / (std::sqrt(a.squaredNorm() + 1e-12) * std::sqrt(b.squaredNorm() + 1e-12));
  };
  std::vector<Eigen::RowVectorXd> f, g;
  for (int v = 0; v < 2; ++v) {
    f.push_back(pool((atts[v].col(0).array() * sims[v].col(1).array()).matrix(), xe[v]));
    g.push_back(pool(((1.0 - atts[v].col(0).array()) * sims[v].col(1).array()).matrix(), xe[v]));
  }
  const double ff = cos(f[0], f[1]);
  const double expected =
      0.5 * (std::max(0.0, cos(f[0], g[1]) - ff + 0.5) + std::max(0.0, cos(f[1], g[0]) - ff + 0.5));
  CHECK(coactivity_loss(batch).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("MIL plus auxiliary losses: analytic gradients match central differences for every parameter") {
  for (auto head : {HeadType::kTextMatching, HeadType::kConvClassifier}) {
    nn::ParameterStore store;
    nn::Rng rng(60);
    TsmModel model(small_config(head), random_matrix(3, 8, 61), store, rng);
    const auto videos = testing::miniature_batch();
    auto loss = [&] {
      std::vector<Var> terms;
      std::vector<CoactivityInput> co;
      for (const auto& v : videos) {
        const auto out = model.forward(ag::constant(v.features), nullptr);
        terms.push_back(mil_loss(out.probs, out.probs_suppressed, make_mil_targets(v.label)));
        terms.push_back(ag::scale(norm_loss(out.attention), 0.1));
        terms.push_back(guide_loss(out.attention, out.similarity));
        co.push_back({out.embedded, out.attention, out.similarity, out.suppressed, v.label});
      }
      terms.push_back(coactivity_loss(co));
      Var total = terms.front();
      for (std::size_t i = 1; i < terms.size(); ++i) total = ag::add(total, terms[i]);
      return total;
    };
    const auto r = testing::grad_check(store, loss);
    INFO("worst entry " << r.worst_name << " rel " << r.worst_relative);
    CHECK(r.worst_relative < 1e-4);
  }
}

TEST_CASE("MIL loss decreases monotonically over 50 steps on one video") {
  nn::ParameterStore store;
  nn::Rng rng(70);
  TsmModel model(small_config(), random_matrix(3, 8, 71), store, rng);
  const auto video = testing::miniature_batch().front();
  nn::Adam adam(store, {1e-3, 0.0, 0.9, 0.999, 1e-8});
  double previous = INFINITY;
  int increases = 0;
  for (int step = 0; step < 50; ++step) {
    store.zero_grad();
    const auto out = model.forward(ag::constant(video.features), nullptr);
    Var loss = mil_loss(out.probs, out.probs_suppressed, make_mil_targets(video.label));
    if (loss.item() >= previous) ++increases;
    previous = loss.item();
    ag::backward(loss);
    adam.step();
  }
  CHECK(increases == 0);
}

TEST_CASE("baseline head produces a (C+1)-column T-CAM without text parameters") {
  nn::ParameterStore store;
  nn::Rng rng(80);
  TsmModel model(small_config(HeadType::kConvClassifier), random_matrix(3, 8, 81), store, rng);
  const auto out = model.forward(ag::constant(random_matrix(8, 16, 82)), nullptr);
  CHECK(out.similarity.cols() == 4);
  CHECK(out.similarity.rows() == 8);
  CHECK_FALSE(store.contains("tsm.text.wq"));
  CHECK(store.get("tsm.classifier.weight").rows() == 16);
}
