#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "temsr/trainer.hpp"

using namespace temsr;

namespace {

struct World {
  DomainPair train;
  DomainPair test;
  EncoderSpec enc;
  PretrainConfig pre;
};

World make_world(std::uint64_t seed, bool identity = false) {
  SyntheticSpec s;
  s.classes = 3;
  s.channels = 2;
  s.length = 32;
  s.train_per_class = 12;
  s.test_per_class = 8;
  if (identity) s.shift = DomainShift::identity();
  World w{generate_domain_pair(s, seed), generate_domain_pair(s, seed, Split::test), {}, {}};
  w.enc.in_channels = 2;
  w.enc.filters = {8, 8, 8};
  w.enc.kernels = {3, 3, 3};
  w.pre.epochs = 8;
  w.pre.batch_size = 12;
  w.pre.optimizer.learning_rate = 1e-2;
  return w;
}

AdaptConfig small_adapt() {
  AdaptConfig c;
  c.epochs_total = 4;
  c.batch_size = 12;
  c.recovery_hidden = 8;
  c.p_m = 0.25;
  c.p_s = 0.75;
  c.snapshot_samples = 0;
  return c;
}

struct Trained {
  World w;
  SourceModel model;
};

Trained& shared_model() {
  static Trained t = [] {
    World w = make_world(1);
    SourceModel m = pretrain_source(w.train.source, &w.test.source, w.enc, w.pre, 1);
    return Trained{std::move(w), std::move(m)};
  }();
  return t;
}

RunArtifacts run(const AdaptConfig& c, Variant v = Variant::full) {
  auto& t = shared_model();
  return run_ablation(v, t.w.train.target, t.model.encoder, t.model.classifier, c,
                      {&t.w.test.target, &t.w.test.source});
}

}  // namespace

TEST_CASE("config JSON round trip") {
  AdaptConfig c;
  c.lambda_seg = 10;
  c.p_m = 3.0 / 8;
  c.cycle = true;
  c.variant = Variant::no_bank;
  c.sim_penalty = SimPenalty::squared;
  c.kl_estimator = KlEstimator::histogram;
  c.discrepancy_layer = DiscrepancyLayer::logits;
  c.recovery_optimizer.learning_rate = 0.5;
  c.seed = 99;
  const auto back = AdaptConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.variant == Variant::no_bank);
  CHECK(back.discrepancy_layer == DiscrepancyLayer::logits);

  PretrainConfig p;
  p.epochs = 3;
  CHECK(PretrainConfig::from_json(p.to_json()).to_json() == p.to_json());
  CHECK_THROWS_AS(variant_from_string("nope"), ConfigError);
  for (Variant v : {Variant::full, Variant::src_like_only, Variant::no_seg, Variant::no_ardm,
                    Variant::no_bank})
    CHECK(variant_from_string(to_string(v)) == v);
}

TEST_CASE("config defaults and validation") {
  AdaptConfig c;
  CHECK(c.lambda_seg == 1.0);
  CHECK(c.lambda_ardm == 1.0);
  CHECK(c.p_m == 1.0 / 8);
  CHECK(c.p_s == 6.0 / 8);
  CHECK(c.anchor_ratio == 0.3);
  CHECK(c.temperature == 0.05);
  c.epochs_srclike = c.epochs_total + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lambda_seg = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("phase schedule") {
  AdaptConfig c;
  c.epochs_total = 12;
  CHECK(c.resolved_srclike_epochs() == 3);
  for (int e = 0; e < 12; ++e)
    CHECK(c.phase_of_epoch(e) == (e < 3 ? Phase::source_like : Phase::transfer));
  c.epochs_total = 10;
  CHECK(c.resolved_srclike_epochs() == 3);
  c.cycle = true;
  c.epochs_srclike = 2;
  const Phase expect[] = {Phase::source_like, Phase::source_like, Phase::transfer,
                          Phase::transfer,    Phase::source_like, Phase::source_like};
  for (int e = 0; e < 6; ++e) CHECK(c.phase_of_epoch(e) == expect[e]);
  c.epochs_srclike = 0;
  CHECK(c.phase_of_epoch(0) == Phase::transfer);
  c.variant = Variant::src_like_only;
  CHECK(c.phase_of_epoch(9) == Phase::source_like);
}

TEST_CASE("pretraining learns the source task and freezes the result") {
  auto& t = shared_model();
  CHECK(t.model.heldout_mf1 >= 0.9);
  CHECK(t.model.encoder.frozen());
  CHECK(t.model.classifier.frozen());
  CHECK(evaluate_mf1(t.model.encoder, t.model.classifier, t.w.test.source) ==
        doctest::Approx(t.model.heldout_mf1));
}

TEST_CASE("pretraining is deterministic") {
  World w = make_world(2);
  w.pre.epochs = 2;
  auto a = pretrain_source(w.train.source, &w.test.source, w.enc, w.pre, 5);
  auto b = pretrain_source(w.train.source, &w.test.source, w.enc, w.pre, 5);
  CHECK(a.encoder.state_hash() == b.encoder.state_hash());
  CHECK(a.classifier.state_hash() == b.classifier.state_hash());
  CHECK(a.heldout_mf1 == b.heldout_mf1);
}

TEST_CASE("zero pretraining epochs stays near chance") {
  World w = make_world(3);
  w.pre.epochs = 0;
  auto m = pretrain_source(w.train.source, &w.test.source, w.enc, w.pre, 3);
  CHECK(m.heldout_mf1 < 0.6);
}

TEST_CASE("adaptation keeps the source model frozen and routes gradients by phase") {
  auto& t = shared_model();
  const auto he = t.model.encoder.state_hash();
  const auto hg = t.model.classifier.state_hash();
  const auto art = run(small_adapt());
  CHECK(art.metrics.size() == 5);
  CHECK(art.metrics.front().phase == "initial");
  CHECK(art.metrics[1].phase == "source_like");
  CHECK(art.metrics[2].phase == "transfer");
  for (auto h : art.source_encoder_hashes) CHECK(h == he);
  for (auto h : art.classifier_hashes) CHECK(h == hg);
  CHECK(t.model.encoder.state_hash() == he);

  const auto& r = art.routing;
  CHECK(r.reached("L_Seg", "recovery", Phase::source_like));
  CHECK(r.reached("L_ARDM", "recovery", Phase::source_like));
  CHECK(r.reached("L_Align", "target_encoder", Phase::transfer));
  CHECK(r.reached("L_TrgEnt", "target_encoder", Phase::transfer));
  CHECK_FALSE(r.reached("L_Align", "target_encoder", Phase::source_like));
  CHECK_FALSE(r.reached("L_Align", "recovery"));
  CHECK_FALSE(r.reached("L_Seg", "target_encoder"));
  CHECK_FALSE(r.reached("L_ARDM", "target_encoder"));
  CHECK_FALSE(r.reached("L_Seg", "recovery", Phase::transfer));
  for (const auto& [k, v] : r.norm) {
    CHECK(k.module != "source_encoder");
    CHECK(k.module != "classifier");
  }

  REQUIRE(art.discrepancy.rows.size() == 5);
  for (const auto& row : art.discrepancy.rows) {
    CHECK(row.src_srclike >= 0.0);
    CHECK(std::isfinite(row.src_trg));
  }
  CHECK(art.target_encoder.has_value());
  CHECK(art.recovery.has_value());
  CHECK(art.bank->size() == t.w.train.target.size());
}

TEST_CASE("adaptation is deterministic") {
  auto a = run(small_adapt());
  auto b = run(small_adapt());
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].total == b.metrics[i].total);
    CHECK(a.metrics[i].mf1_target == b.metrics[i].mf1_target);
    CHECK(a.metrics[i].kl_src_srclike == b.metrics[i].kl_src_srclike);
  }
  CHECK(a.target_encoder->state_hash() == b.target_encoder->state_hash());
}

TEST_CASE("full variant is plain adapt") {
  auto& t = shared_model();
  const auto a = run(small_adapt(), Variant::full);
  const auto b = adapt(t.w.train.target, t.model.encoder, t.model.classifier, small_adapt(),
                       {&t.w.test.target, &t.w.test.source});
  CHECK(a.final_mf1 == b.final_mf1);
  CHECK(a.metrics.back().total == b.metrics.back().total);
}

TEST_CASE("zero weights without a source-like phase reduce to CORAL plus entropy") {
  auto c = small_adapt();
  c.lambda_seg = 0;
  c.lambda_ardm = 0;
  c.epochs_srclike = 0;
  const auto art = run(c);
  for (std::size_t i = 1; i < art.metrics.size(); ++i) {
    CHECK(art.metrics[i].phase == "transfer");
    CHECK(art.metrics[i].total ==
          doctest::Approx(art.metrics[i].l_align + art.metrics[i].l_trg_ent));
  }
  CHECK_FALSE(art.routing.reached("L_Seg", "recovery"));
  CHECK_FALSE(art.routing.reached("L_ARDM", "recovery"));
}

TEST_CASE("dropping ARDM ignores its weight") {
  auto c = small_adapt();
  c.lambda_ardm = 5;
  const auto art = run(c, Variant::no_ardm);
  for (const auto& m : art.metrics) CHECK(m.l_ardm == 0.0);
  CHECK_FALSE(art.routing.reached("L_ARDM", "recovery"));
  c.lambda_ardm = 1;
  const auto same = run(c, Variant::no_ardm);
  CHECK(same.metrics.back().total == art.metrics.back().total);
}

TEST_CASE("source-like-only variant never trains the target encoder") {
  const auto art = run(small_adapt(), Variant::src_like_only);
  CHECK_FALSE(art.routing.reached("L_Align", "target_encoder"));
  CHECK_FALSE(art.routing.reached("L_TrgEnt", "target_encoder"));
  for (std::size_t i = 1; i < art.metrics.size(); ++i)
    CHECK(art.metrics[i].phase == "source_like");
}

TEST_CASE("other variants run") {
  for (Variant v : {Variant::no_seg, Variant::no_bank}) {
    const auto art = run(small_adapt(), v);
    CHECK(art.metrics.size() == 5);
    CHECK(std::isfinite(art.final_mf1));
  }
}

TEST_CASE("unfrozen source model is rejected") {
  World w = make_world(4);
  w.pre.epochs = 0;
  auto m = pretrain_source(w.train.source, nullptr, w.enc, w.pre, 4);
  m.encoder.set_frozen(false);
  CHECK_THROWS_AS(adapt(w.train.target, m.encoder, m.classifier, small_adapt()), StateError);
}

TEST_CASE("identity shift leaves little to adapt") {
  World w = make_world(6, true);
  auto m = pretrain_source(w.train.source, &w.test.source, w.enc, w.pre, 6);
  const auto art = adapt(w.train.target, m.encoder, m.classifier, small_adapt(),
                         {&w.test.target, &w.test.source});
  CHECK(std::abs(art.final_mf1 - art.src_only_mf1) <= 0.1);
}

TEST_CASE("gradient routing bookkeeping") {
  GradientRouting r;
  r.record(0, Phase::source_like, "L_Seg", "recovery", 0.0);
  CHECK_FALSE(r.reached("L_Seg", "recovery"));
  r.record(1, Phase::transfer, "L_Align", "target_encoder", 0.5);
  CHECK(r.reached("L_Align", "target_encoder"));
  CHECK_FALSE(r.reached("L_Align", "target_encoder", Phase::source_like));
}

TEST_CASE("evaluation masks are deterministic per stream") {
  AdaptConfig c;
  const auto a = eval_masks(5, 64, c, 1);
  const auto b = eval_masks(5, 64, c, 1);
  const auto d = eval_masks(5, 64, c, 2);
  REQUIRE(a.size() == 5);
  bool differs = false;
  for (int i = 0; i < 5; ++i) {
    CHECK(a[static_cast<std::size_t>(i)].masked == b[static_cast<std::size_t>(i)].masked);
    CHECK(a[static_cast<std::size_t>(i)].count() == 8);
    differs |= a[static_cast<std::size_t>(i)].masked != d[static_cast<std::size_t>(i)].masked;
  }
  CHECK(differs);
}
