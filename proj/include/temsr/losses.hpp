#pragma once

// Objectives of the adaptation pipeline and their analytic gradients.
//
// Two layers: tensor-level functions (entropy, similarity, CORAL, the
// contrastive anchor loss on features) and network-level compositions that
// run the frozen source encoder/classifier and return gradients with
// respect to the recovered batch.

#include <array>
#include <span>
#include <string>

#include "temsr/core.hpp"
#include "temsr/datagen.hpp"
#include "temsr/nets.hpp"
#include "temsr/segments.hpp"

namespace temsr {

// ---------------------------------------------------------------------------
// Entropy

/// Shannon entropy in nats with 0 log 0 = 0.
double entropy(std::span<const double> p);

/// Per-column entropies of softmax(logits).
struct LogitEntropy {
  Matrix probs;    // C x B
  Vector entropy;  // B
};
LogitEntropy entropy_of_logits(const Matrix& logits);

/// d(sum_b weight_b * H_b) / d logits.
Matrix entropy_logit_grad(const LogitEntropy& e, const Vector& weights);

// ---------------------------------------------------------------------------
// Segment regularisation

enum class SimPenalty { absolute, squared };

struct SegSimValue {
  double value = 0.0;
  std::array<double, 4> grad{};  // d value / d aggregate entropy per kind
};

/// Sum over the six unordered kind pairs of |E_k - E_s| (or squared).
SegSimValue seg_sim_from_aggregates(const std::array<double, 4>& aggregates,
                                    SimPenalty penalty = SimPenalty::absolute);

struct SegLossResult {
  double seg_ent = 0.0;
  double seg_sim = 0.0;
  double total() const { return seg_ent + seg_sim; }
  std::array<double, 4> aggregates{};  // batch-summed entropy per kind C, E, L, R
  Matrix grad;  // d(weighted total) / d x_sl, shaped like x_sl.data()
};

struct SegLossOptions {
  double p_s = 0.75;
  SimPenalty penalty = SimPenalty::absolute;
  double ent_weight = 1.0;
  double sim_weight = 1.0;
  bool want_grad = true;
};

/// Segment entropy plus segment consistency on a recovered batch, evaluated
/// through the frozen encoder (eval mode) and classifier.
SegLossResult seg_loss(const Batch& x_sl, std::span<const MaskSpec> masks, Encoder& encoder,
                       Classifier& classifier, const SegLossOptions& options);

struct BatchEntropyResult {
  double value = 0.0;
  Vector per_sample;
  Matrix grad;  // w.r.t. the input batch (or features, see caller)
};

/// Sum of prediction entropies of a batch through frozen nets; gradient with
/// respect to the batch.  Used for sample-level entropy and anchor-bank
/// entropies.
BatchEntropyResult sample_entropy_loss(const Batch& x, Encoder& encoder, Classifier& classifier,
                                       bool want_grad);

// ---------------------------------------------------------------------------
// Anchor-based contrastive loss

struct SimilarityParams {
  double temperature = 0.05;
  bool normalize = true;
  void validate() const;
};

/// exp(<a, b> / tau), unit-normalising first when requested.
double similarity(const Vector& a, const Vector& b, const SimilarityParams& params);

/// Direct evaluation from similarity values: s_anchor(i), s_target(i),
/// s_pairs(i, k) (diagonal ignored).
double ardm_from_similarities(const Vector& s_anchor, const Vector& s_target, const Matrix& s_pairs);

struct ArdmFeatureResult {
  double value = 0.0;
  Matrix grad;  // d value / d z_sl (D x B)
};

/// Loss on encoder features: z_sl and z_t are D x B, z_anchor is D x 1.
ArdmFeatureResult ardm_from_features(const Matrix& z_sl, const Matrix& z_t, const Vector& z_anchor,
                                     const SimilarityParams& params);

struct ArdmLossResult {
  double value = 0.0;
  Matrix grad;  // w.r.t. x_sl.data()
};

ArdmLossResult ardm_loss(const Batch& x_sl, const Batch& x_t, const Matrix& anchor,
                         Encoder& encoder, const SimilarityParams& params, bool want_grad = true);

// ---------------------------------------------------------------------------
// CORAL and target entropy

struct CoralResult {
  double value = 0.0;
  Matrix grad_a;  // D x B_a
  Matrix grad_b;  // D x B_b
};

/// Features are D x B (one column per sample).
CoralResult coral_loss(const Matrix& feat_a, const Matrix& feat_b);

/// Unbiased covariance of D x B features.
Matrix feature_covariance(const Matrix& feat);

struct TrgEntResult {
  double value = 0.0;
  Matrix grad_features;  // w.r.t. target features (D x B)
};

/// Sum of prediction entropies of target features through a frozen classifier.
TrgEntResult trg_ent_from_features(const Matrix& z_t, Classifier& classifier);

/// Full target-entropy step: forward F_T in train mode, accumulate F_T
/// parameter gradients, return the loss value.
double trg_ent_loss(const Batch& x_t, Encoder& target_encoder, Classifier& classifier);

// ---------------------------------------------------------------------------
// Composition

enum class Phase { source_like, transfer };

std::string to_string(Phase p);

struct LossParts {
  double seg = 0.0;
  double ardm = 0.0;
  double align = 0.0;
  double trg_ent = 0.0;
};

/// Source-like phase: l_seg * seg + l_ardm * ardm + trg_ent.
/// Transfer phase: align + trg_ent.
double total_loss(const LossParts& parts, double lambda_seg, double lambda_ardm, Phase phase);

}  // namespace temsr
