#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "temsr/nets.hpp"
#include "test_util.hpp"

using namespace temsr;

namespace {

EncoderSpec small_encoder(int channels) {
  EncoderSpec s;
  s.in_channels = channels;
  s.filters = {6, 8, 8};
  s.kernels = {5, 5, 5};
  return s;
}

Batch random_batch(int count, int channels, int length, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Batch b(count, channels, length);
  for (Eigen::Index i = 0; i < b.data().size(); ++i) b.data().data()[i] = n(rng);
  return b;
}

}  // namespace

TEST_CASE("encoder shape trace matches hand arithmetic") {
  EncoderSpec spec;
  spec.in_channels = 9;
  // conv with kernel 8 and padding 4 adds one column; pooling by 2 halves it.
  // 128 -> 129 -> 64 -> 65 -> 32 -> 33 -> 16
  const auto trace = spec.shape_trace(128);
  CHECK(trace == std::array<int, 4>{128, 64, 32, 16});
  CHECK(spec.feature_dim() == 128);

  Rng rng = make_rng(0);
  Encoder enc(spec, rng);
  const Matrix z = enc.forward(random_batch(4, 9, 128, 1), Mode::eval);
  CHECK(z.rows() == 128);
  CHECK(z.cols() == 4);
}

TEST_CASE("encoder then classifier yields one prediction per sample") {
  for (int n : {1, 3, 9})
    for (int l : {8, 17, 64, 128}) {
      Rng rng = make_rng(static_cast<std::uint64_t>(n * 1000 + l));
      Encoder enc(small_encoder(n), rng);
      Classifier g({enc.spec().feature_dim(), 5}, rng);
      const Matrix p = g.forward(enc.forward(random_batch(3, n, l, 2), Mode::eval));
      CHECK(p.rows() == 5);
      CHECK(p.cols() == 3);
    }
}

TEST_CASE("short inputs are padded up to the minimum length") {
  Rng rng = make_rng(3);
  Encoder enc(small_encoder(2), rng);
  const Matrix z = enc.forward(random_batch(2, 2, 3, 4), Mode::eval);
  CHECK(z.allFinite());
  CHECK(z.cols() == 2);
}

TEST_CASE("encoder is finite on zeros and deterministic in eval mode") {
  Rng rng = make_rng(5);
  Encoder enc(small_encoder(3), rng);
  const Batch zeros(4, 3, 32);
  CHECK(enc.forward(zeros, Mode::eval).allFinite());
  const Batch x = random_batch(4, 3, 32, 6);
  enc.set_frozen(true);
  CHECK(enc.forward(x, Mode::eval) == enc.forward(x, Mode::eval));
  CHECK_THROWS_AS(enc.forward(random_batch(4, 2, 32, 6), Mode::eval), ShapeError);
}

TEST_CASE("train mode updates running statistics, eval mode does not") {
  Rng rng = make_rng(7);
  Encoder enc(small_encoder(2), rng);
  const Batch x = random_batch(4, 2, 32, 8);
  const auto h0 = enc.state_hash();
  enc.forward(x, Mode::eval);
  CHECK(enc.state_hash() == h0);
  enc.forward(x, Mode::train);
  CHECK(enc.state_hash() != h0);
}

TEST_CASE("softmax identities") {
  Matrix zero = Matrix::Zero(4, 3);
  CHECK(softmax_columns(zero).isConstant(0.25));
  Matrix l(2, 1);
  l << std::log(2.0), 0.0;
  const Matrix p = softmax_columns(l);
  CHECK(p(0, 0) == doctest::Approx(2.0 / 3.0));
  CHECK(p(1, 0) == doctest::Approx(1.0 / 3.0));
  Matrix big = Matrix::Random(6, 50) * 500.0;
  const Matrix q = softmax_columns(big);
  for (int b = 0; b < q.cols(); ++b) CHECK(std::abs(q.col(b).sum() - 1.0) < 1e-6);

  Rng rng = make_rng(1);
  Classifier g({8, 3}, rng);
  g.linear().weight.setZero();
  g.linear().bias.setZero();
  CHECK(g.forward(Matrix::Random(8, 5)).isConstant(1.0 / 3.0));
}

TEST_CASE("frozen networks refuse parameter gradients") {
  Rng rng = make_rng(2);
  Encoder enc(small_encoder(2), rng);
  Encoder::Tape tape;
  const Matrix z = enc.forward(random_batch(2, 2, 16, 1), Mode::eval, &tape);
  enc.set_frozen(true);
  const Matrix dz = Matrix::Ones(z.rows(), z.cols());
  CHECK_THROWS_AS(enc.backward(tape, dz, Backprop::params_only), StateError);
  CHECK_THROWS_AS(enc.backward(tape, dz, Backprop::both), StateError);
  const auto before = enc.state_hash();
  const Matrix dx = enc.backward(tape, dz, Backprop::input_only);
  CHECK(dx.rows() == 2);
  CHECK(enc.state_hash() == before);
  for (auto& p : enc.parameters()) CHECK(p.grad->isZero());
}

TEST_CASE("recovery model passes observed points through") {
  Rng rng = make_rng(4);
  RecoveryModel rec({3, 16, 2, false}, rng);
  const Batch x = random_batch(2, 3, 128, 9);
  std::vector<MaskSpec> none{MaskSpec::none(128), MaskSpec::none(128)};
  CHECK(rec.forward(x, none) == x);

  std::vector<MaskSpec> masks{MaskSpec::from_range(128, 40, 56), MaskSpec::from_range(128, 0, 16)};
  const Batch masked = apply_masks(x, masks);
  const Batch out = rec.forward(masked, masks);
  CHECK(out == rec.forward(masked, masks));
  for (int b = 0; b < 2; ++b) {
    int differing = 0;
    for (int t = 0; t < 128; ++t)
      if (out.sample(b).col(t) != masked.sample(b).col(t)) {
        ++differing;
        CHECK(masks[static_cast<std::size_t>(b)].is_masked(t));
      }
    CHECK(differing <= 16);
    CHECK(differing > 0);
  }

  RecoveryModel full({3, 16, 2, true}, rng);
  CHECK_FALSE(full.forward(x, none) == x);
}

TEST_CASE("optimizer steps") {
  Matrix w(1, 1), g(1, 1);
  bool frozen = false;
  std::vector<ParamRef> params{{"w", &w, &g, &frozen}};

  SUBCASE("plain gradient descent on w^2") {
    w(0, 0) = 1.0;
    Optimizer opt(params, {OptimizerConfig::Kind::sgd, 0.1});
    g(0, 0) = 2.0 * w(0, 0);
    opt.step("w2");
    CHECK(w(0, 0) == doctest::Approx(0.8));
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    w(0, 0) = 1.5;
    g.setZero();
    Optimizer sgd(params, {OptimizerConfig::Kind::sgd, 0.1});
    sgd.step("none");
    Optimizer adam(params, {OptimizerConfig::Kind::adam, 0.1});
    adam.step("none");
    CHECK(w(0, 0) == 1.5);
  }
  SUBCASE("frozen parameters are skipped even if frozen after construction") {
    w(0, 0) = 1.0;
    Optimizer opt(params, {OptimizerConfig::Kind::adam, 0.1});
    frozen = true;
    g(0, 0) = 3.0;
    opt.step("w");
    CHECK(w(0, 0) == 1.0);
  }
  SUBCASE("non-finite gradient names the loss term") {
    w(0, 0) = 1.0;
    g(0, 0) = std::nan("");
    Optimizer opt(params, {OptimizerConfig::Kind::adam, 0.1});
    try {
      opt.step("L_Seg");
      FAIL("expected a training error");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("L_Seg") != std::string::npos);
    }
    CHECK(w(0, 0) == 1.0);
  }
  SUBCASE("step decay") {
    Optimizer opt(params, {OptimizerConfig::Kind::sgd, 1.0, 0.9, 0.999, 1e-8, 0.0, 2, 0.5});
    g.setZero();
    CHECK(opt.current_learning_rate() == 1.0);
    opt.step("x");
    opt.step("x");
    CHECK(opt.current_learning_rate() == 0.5);
  }
}

TEST_CASE("adam minimises a quadratic") {
  Matrix w = Matrix::Constant(3, 1, 2.0), g(3, 1);
  std::vector<ParamRef> params{{"w", &w, &g, nullptr}};
  Optimizer opt(params, {OptimizerConfig::Kind::adam, 0.05});
  for (int i = 0; i < 500; ++i) {
    g = 2.0 * w;
    opt.step("q");
  }
  CHECK(w.norm() < 1e-2);
}

TEST_CASE("checkpoint round trip") {
  testing::TempDir dir("nets");
  Rng rng = make_rng(11);
  Encoder enc(small_encoder(3), rng);
  enc.forward(random_batch(4, 3, 32, 1), Mode::train);  // nonzero running stats
  Classifier g({8, 4}, rng);
  RecoveryModel rec({3, 8, 2, false}, rng);
  std::vector<Network*> nets{&enc, &g, &rec};
  save_checkpoint(dir / "m.ckpt", nets);

  auto loaded = load_checkpoint(dir / "m.ckpt");
  REQUIRE(loaded.networks.size() == 3);
  auto& enc2 = loaded.get<Encoder>(0);
  CHECK(enc2.state_hash() == enc.state_hash());
  CHECK(loaded.get<Classifier>(1).state_hash() == g.state_hash());
  CHECK(loaded.get<RecoveryModel>(2).state_hash() == rec.state_hash());
  const Batch x = random_batch(2, 3, 32, 5);
  CHECK(enc2.forward(x, Mode::eval) == enc.forward(x, Mode::eval));
  CHECK_THROWS_AS(loaded.get<Classifier>(0), FormatError);

  const auto size = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::copy_file(dir / "m.ckpt", dir / "cut.ckpt");
  std::filesystem::resize_file(dir / "cut.ckpt", size - 8);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), FormatError);
}
