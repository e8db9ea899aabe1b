#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "temsr/datagen.hpp"
#include "test_util.hpp"

using namespace temsr;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.classes = 3;
  s.channels = 2;
  s.length = 32;
  s.train_per_class = 5;
  s.test_per_class = 3;
  return s;
}

Dataset tiny_dataset(bool labels) {
  std::vector<TimeSeriesSample> v;
  for (int i = 0; i < 2; ++i) {
    Matrix x(9, 128);
    for (int c = 0; c < 9; ++c)
      for (int t = 0; t < 128; ++t) x(c, t) = 0.25 * (c - 4) + 0.125 * ((t + i) % 7);
    v.push_back({x, labels ? std::optional<int>(i % 6) : std::nullopt});
  }
  return Dataset(std::move(v), "tiny", 6);
}

}  // namespace

TEST_CASE("synthetic pairs are deterministic in the seed") {
  const auto spec = small_spec();
  const auto a = generate_domain_pair(spec, 0);
  const auto b = generate_domain_pair(spec, 0);
  CHECK(a.source == b.source);
  CHECK(a.target == b.target);
  const auto c = generate_domain_pair(spec, 1);
  CHECK_FALSE(a.source == c.source);
  const auto test = generate_domain_pair(spec, 0, Split::test);
  CHECK(test.source.size() == spec.classes * spec.test_per_class);
  CHECK(test.source.split() == Split::test);
}

TEST_CASE("default pair has the documented shape and balanced labels") {
  const auto pair = generate_domain_pair(SyntheticSpec{}, 0);
  CHECK(pair.source.channels() == 3);
  CHECK(pair.source.length() == 128);
  CHECK(pair.source.size() == 4 * 64);
  std::vector<int> counts(4, 0);
  for (int y : pair.target.labels()) ++counts[static_cast<std::size_t>(y)];
  for (int n : counts) CHECK(n == 64);
}

TEST_CASE("identity shift draws source and target from the same family") {
  auto spec = small_spec();
  spec.shift = DomainShift::identity();
  spec.train_per_class = 200;
  const auto pair = generate_domain_pair(spec, 3);
  const double ms = pair.source.to_batch().data().mean();
  const double mt = pair.target.to_batch().data().mean();
  CHECK(std::abs(ms - mt) < 0.05);
  CHECK_FALSE(pair.source == pair.target);
}

TEST_CASE("invalid synthetic specs are configuration errors") {
  auto s = small_spec();
  s.classes = 1;
  CHECK_THROWS_AS(generate_domain_pair(s, 0), ConfigError);
  s = small_spec();
  s.length = 7;
  CHECK_THROWS_AS(generate_domain_pair(s, 0), ConfigError);
}

TEST_CASE("dataset file round trip") {
  testing::TempDir dir("datagen");
  const auto ds = tiny_dataset(true);
  save_dataset(ds, dir / "a.tsds");
  const auto back = load_dataset(dir / "a.tsds");
  CHECK(back.size() == 2);
  CHECK(back.channels() == 9);
  CHECK(back.length() == 128);
  CHECK(back.class_count() == 6);
  // Values above are exact in float32, so the round trip is the identity.
  CHECK(back == ds);

  const auto unl = tiny_dataset(false);
  save_dataset(unl, dir / "u.tsds");
  const auto u = load_dataset(dir / "u.tsds");
  CHECK_FALSE(u.has_labels());
  CHECK_THROWS_AS(u.labels(), StateError);

  // Generated data is stored as float32: a second round trip is exact.
  const auto gen = generate_domain_pair(small_spec(), 2).source;
  save_dataset(gen, dir / "g.tsds");
  const auto g1 = load_dataset(dir / "g.tsds");
  save_dataset(g1, dir / "g2.tsds");
  CHECK(load_dataset(dir / "g2.tsds") == g1);
  for (int i = 0; i < gen.size(); ++i)
    CHECK((gen[i].values.cast<float>().cast<double>() - g1[i].values).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("malformed dataset files are rejected") {
  testing::TempDir dir("datagen_bad");
  save_dataset(tiny_dataset(true), dir / "a.tsds");
  const auto size = std::filesystem::file_size(dir / "a.tsds");

  std::filesystem::copy_file(dir / "a.tsds", dir / "short.tsds");
  std::filesystem::resize_file(dir / "short.tsds", size - 10);
  CHECK_THROWS_AS(load_dataset(dir / "short.tsds"), FormatError);

  std::filesystem::copy_file(dir / "a.tsds", dir / "long.tsds");
  {
    std::ofstream os(dir / "long.tsds", std::ios::binary | std::ios::app);
    os.put('x');
  }
  CHECK_THROWS_AS(load_dataset(dir / "long.tsds"), FormatError);

  {
    std::ofstream os(dir / "magic.tsds", std::ios::binary);
    os << "NOPE1";
  }
  CHECK_THROWS_AS(load_dataset(dir / "magic.tsds"), FormatError);
  CHECK_THROWS_AS(load_dataset(dir / "missing.tsds"), FormatError);

  // NaN in the payload: first value sits right after the 22-byte header.
  std::filesystem::copy_file(dir / "a.tsds", dir / "nan.tsds");
  {
    std::fstream f(dir / "nan.tsds", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(5 + 4 * 4 + 1);
    const float nan = std::nanf("");
    f.write(reinterpret_cast<const char*>(&nan), 4);
  }
  CHECK_THROWS_AS(load_dataset(dir / "nan.tsds"), DataError);
}

TEST_CASE("dataset construction validates its samples") {
  std::vector<TimeSeriesSample> v{{Matrix::Zero(2, 16), 0}, {Matrix::Zero(2, 17), 1}};
  CHECK_THROWS_AS(Dataset(v, "x", 2), ShapeError);
  v = {{Matrix::Zero(2, 16), 0}, {Matrix::Zero(2, 16), 2}};
  CHECK_THROWS_AS(Dataset(v, "x", 2), DataError);
  Matrix bad = Matrix::Zero(2, 16);
  bad(0, 0) = std::nan("");
  v = {{bad, 0}};
  CHECK_THROWS_AS(Dataset(v, "x", 2), DataError);
}

TEST_CASE("min-max scaling") {
  auto make = [](std::vector<std::vector<double>> rows) {
    std::vector<TimeSeriesSample> v;
    for (auto& r : rows) {
      Matrix x(1, static_cast<int>(r.size()));
      for (std::size_t t = 0; t < r.size(); ++t) x(0, static_cast<int>(t)) = r[t];
      v.push_back({x, std::nullopt});
    }
    return Dataset(std::move(v), "m", 1);
  };
  SUBCASE("affine map") {
    const auto out = min_max_normalize(make({{2, 4, 6, 2, 4, 6, 2, 4}}));
    CHECK(out[0].values(0, 0) == doctest::Approx(0.0));
    CHECK(out[0].values(0, 1) == doctest::Approx(0.5));
    CHECK(out[0].values(0, 2) == doctest::Approx(1.0));
  }
  SUBCASE("unit range unchanged") {
    const auto in = make({{0, 0.3, 1, 0.7, 0.2, 0.5, 0.9, 0.1}});
    const auto out = min_max_normalize(in);
    CHECK((out[0].values - in[0].values).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("constant channel maps to zero") {
    const auto out = min_max_normalize(make({{5, 5, 5, 5, 5, 5, 5, 5}}));
    CHECK(out[0].values.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("statistics come from the fitted split") {
    const auto stats = fit_min_max(make({{0, 10, 0, 10, 0, 10, 0, 10}}));
    const auto out = apply_min_max(make({{5, 20, 5, 5, 5, 5, 5, 5}}), stats);
    CHECK(out[0].values(0, 0) == doctest::Approx(0.5));
    CHECK(out[0].values(0, 1) == doctest::Approx(2.0));
  }
}

TEST_CASE("mask counts") {
  CHECK(masked_point_count(128, 1.0 / 8) == 16);
  CHECK(masked_point_count(128, 6.0 / 8) == 96);
  Rng rng = make_rng(1);
  const auto m = make_mask(8, 1.0 / 8, 1, rng);
  CHECK(m.count() == 1);
  CHECK(m.blocks().size() == 1);
  // round(p * L) == L leaves no context.
  CHECK_THROWS_AS(make_mask(8, 0.95, 1, rng), ConfigError);
  CHECK_THROWS_AS(make_mask(8, 0.0, 1, rng), ConfigError);
}

TEST_CASE("masks are contiguous blocks of the requested size") {
  Rng rng = make_rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    for (double p : {1.0 / 8, 3.0 / 8, 6.0 / 8}) {
      const auto m = make_mask(128, p, 1, rng);
      REQUIRE(m.count() == masked_point_count(128, p));
      const auto blocks = m.blocks();
      REQUIRE(blocks.size() == 1);
      CHECK(blocks[0].second - blocks[0].first == m.count());
    }
    const auto multi = make_mask(64, 0.25, 3, rng);
    CHECK(multi.count() == 16);
    CHECK(multi.blocks().size() == 3);
  }
}

TEST_CASE("mask placement covers every admissible offset") {
  Rng rng = make_rng(9);
  std::vector<int> seen(8, 0);
  for (int i = 0; i < 400; ++i) ++seen[static_cast<std::size_t>(make_mask(8, 1.0 / 8, 1, rng).blocks()[0].first)];
  for (int n : seen) CHECK(n > 0);
}

TEST_CASE("apply_mask zeroes masked columns only") {
  const Matrix ones = Matrix::Ones(3, 10);
  CHECK(apply_mask(ones, MaskSpec::none(10)) == ones);

  const auto m = MaskSpec::from_range(10, 3, 7);
  const Matrix out = apply_mask(ones, m);
  for (int t = 0; t < 10; ++t) {
    const bool masked = t >= 3 && t <= 6;
    CHECK(out.col(t).isConstant(masked ? 0.0 : 1.0));
  }

  Matrix r = Matrix::Random(2, 10);
  const Matrix single = apply_mask(r, MaskSpec::from_range(10, 4, 5));
  for (int t = 0; t < 10; ++t) CHECK((single.col(t) == r.col(t)) == (t != 4));

  CHECK_THROWS_AS(apply_mask(ones, MaskSpec::none(9)), ShapeError);
}

TEST_CASE("apply_masks works per sample") {
  Batch b(2, 1, 8, Matrix::Ones(1, 16));
  std::vector<MaskSpec> masks{MaskSpec::from_range(8, 0, 2), MaskSpec::from_range(8, 6, 8)};
  const auto out = apply_masks(b, masks);
  CHECK(out.sample(0).leftCols(2).isZero());
  CHECK(out.sample(0).rightCols(6).isOnes());
  CHECK(out.sample(1).rightCols(2).isZero());
  CHECK(out.sample(1).leftCols(6).isOnes());
  masks.pop_back();
  CHECK_THROWS_AS(apply_masks(b, masks), ShapeError);
}
