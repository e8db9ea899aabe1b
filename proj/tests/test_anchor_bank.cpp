#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "temsr/anchor_bank.hpp"
#include "temsr/rng.hpp"
#include "test_util.hpp"

using namespace temsr;

TEST_CASE("latest recovery wins") {
  AnchorBank bank(10);
  bank.update(3, Matrix::Constant(2, 8, 1.0), 0.9);
  bank.update(3, Matrix::Constant(2, 8, 2.0), 0.2);
  CHECK(bank.size() == 1);
  CHECK(bank.entries().at(3).entropy == 0.2);
  CHECK(bank.entries().at(3).sample(0, 0) == 2.0);
  for (int i = 0; i < 10; ++i) bank.update(i, Matrix::Zero(2, 8), 0.5);
  CHECK(bank.size() == 10);
}

TEST_CASE("invalid updates leave the bank unchanged") {
  AnchorBank bank(4);
  bank.update(0, Matrix::Ones(1, 8), 0.3);
  CHECK_THROWS_AS(bank.update(1, Matrix::Ones(1, 8), std::nan("")), TrainingError);
  CHECK_THROWS_AS(bank.update(1, Matrix::Ones(1, 8), INFINITY), TrainingError);
  CHECK_THROWS_AS(bank.update(0, Matrix::Ones(1, 8), -0.1), TrainingError);
  CHECK_THROWS_AS(bank.update(7, Matrix::Ones(1, 8), 0.1), StateError);
  CHECK_THROWS_AS(bank.update(2, Matrix::Ones(2, 8), 0.1), ShapeError);
  CHECK(bank.size() == 1);
  CHECK(bank.entries().at(0).entropy == 0.3);
}

TEST_CASE("top-k selection") {
  AnchorBank bank(10);
  const double h[] = {0.9, 0.1, 0.8, 0.05, 0.7, 0.6, 0.3, 0.95, 0.4, 0.5};
  for (int i = 0; i < 10; ++i) bank.update(i, Matrix::Constant(1, 8, i), h[i]);
  CHECK(bank.topk_count(0.3) == 3);
  CHECK(bank.select_topk(0.3) == std::vector<int>{3, 1, 6});

  AnchorBank two(2);
  two.update(0, Matrix::Zero(1, 8), 0.4);
  two.update(1, Matrix::Zero(1, 8), 0.2);
  CHECK(two.topk_count(0.1) == 1);
  CHECK(two.select_topk(0.1) == std::vector<int>{1});

  AnchorBank ties(3);
  ties.update(2, Matrix::Zero(1, 8), 0.5);
  ties.update(0, Matrix::Zero(1, 8), 0.9);
  ties.update(1, Matrix::Zero(1, 8), 0.5);
  CHECK(ties.select_topk(0.34) == std::vector<int>{1});

  AnchorBank empty(3);
  CHECK_THROWS_AS(empty.select_topk(0.3), StateError);
  CHECK_THROWS_AS(empty.representative_anchor(0.3), StateError);
  CHECK_THROWS_AS(bank.select_topk(0.0), ConfigError);
  CHECK_THROWS_AS(bank.select_topk(1.5), ConfigError);
}

TEST_CASE("representative anchor is the mean of the selection") {
  AnchorBank bank(3);
  bank.update(0, Matrix::Zero(2, 8), 0.1);
  bank.update(1, Matrix::Constant(2, 8, 2.0), 0.2);
  bank.update(2, Matrix::Constant(2, 8, 9.0), 0.9);
  CHECK(bank.representative_anchor(0.34) == Matrix::Zero(2, 8));
  CHECK(bank.representative_anchor(0.67).isConstant(1.0));
}

TEST_CASE("random banks agree with a full-sort oracle") {
  Rng rng = make_rng(17);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 5 + trial % 20;
    AnchorBank bank(n);
    std::vector<std::pair<double, int>> ref;
    std::vector<Matrix> samples;
    for (int i = 0; i < n; ++i) {
      // Coarse entropies make ties common.
      const double h = std::round(u(rng) * 4.0) / 4.0;
      samples.push_back(Matrix::Random(2, 8));
      bank.update(i, samples.back(), h);
      ref.emplace_back(h, i);
    }
    std::sort(ref.begin(), ref.end());
    const double ratio = 0.3;
    const int k = std::max(1, 3 * n / 10);
    const auto sel = bank.select_topk(ratio);
    REQUIRE(static_cast<int>(sel.size()) == k);
    Matrix mean = Matrix::Zero(2, 8);
    for (int j = 0; j < k; ++j) {
      CHECK(sel[static_cast<std::size_t>(j)] == ref[static_cast<std::size_t>(j)].second);
      mean += samples[static_cast<std::size_t>(ref[static_cast<std::size_t>(j)].second)];
    }
    mean /= k;
    CHECK((bank.representative_anchor(ratio) - mean).cwiseAbs().maxCoeff() < 1e-14);

    // Selected entropies never exceed unselected ones.
    double worst_selected = 0.0;
    for (int id : sel) worst_selected = std::max(worst_selected, bank.entries().at(id).entropy);
    for (const auto& [id, e] : bank.entries())
      if (std::find(sel.begin(), sel.end(), id) == sel.end()) CHECK(e.entropy >= worst_selected);
  }
}

TEST_CASE("insertion order does not matter") {
  std::vector<Matrix> s;
  for (int i = 0; i < 8; ++i) s.push_back(Matrix::Random(1, 8));
  const double h[] = {0.3, 0.1, 0.6, 0.2, 0.2, 0.9, 0.05, 0.4};
  AnchorBank fwd(8), rev(8);
  for (int i = 0; i < 8; ++i) fwd.update(i, s[static_cast<std::size_t>(i)], h[i]);
  for (int i = 7; i >= 0; --i) rev.update(i, s[static_cast<std::size_t>(i)], h[i]);
  CHECK(fwd.representative_anchor(0.5) == rev.representative_anchor(0.5));
}

TEST_CASE("an improved sample enters the next selection") {
  AnchorBank bank(6);
  for (int i = 0; i < 6; ++i) bank.update(i, Matrix::Zero(1, 8), 0.5 + 0.1 * i);
  CHECK(bank.select_topk(0.34) == std::vector<int>{0, 1});
  bank.update(5, Matrix::Zero(1, 8), 0.55);
  CHECK(bank.select_topk(0.34) == std::vector<int>{0, 5});
}

TEST_CASE("snapshot round trip") {
  testing::TempDir dir("bank");
  AnchorBank bank(5);
  for (int i : {0, 2, 4}) bank.update(i, Matrix::Constant(2, 8, 0.5 * i), 0.25 * i);
  bank.save_snapshot(dir / "bank.snapshot");
  CHECK(std::filesystem::exists(dir / "bank.snapshot.entropy"));
  const auto back = AnchorBank::load_snapshot(dir / "bank.snapshot", 5);
  REQUIRE(back.size() == 3);
  for (const auto& [id, e] : bank.entries()) {
    CHECK(back.entries().at(id).entropy == doctest::Approx(e.entropy));
    CHECK(back.entries().at(id).sample == e.sample);
  }
}
