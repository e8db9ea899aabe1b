#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "temsr/core.hpp"

namespace temsr {

/// Unweighted mean of per-class F1.  A class absent from both the truth and
/// the predictions contributes 0.
double macro_f1(std::span<const int> y_true, std::span<const int> y_pred, int classes);

enum class KlEstimator { gaussian, histogram };

inline constexpr double kVarianceFloor = 1e-6;

/// KL(p || q) between diagonal Gaussians fitted to D x B feature matrices,
/// summed over dimensions.  Variances are unbiased and floored at 1e-6.
double kl_gaussian(const Matrix& feat_p, const Matrix& feat_q);

/// Per-dimension histogram KL on a shared grid (add-one smoothing), summed
/// over dimensions.  Robustness check for the Gaussian fit.
double kl_histogram(const Matrix& feat_p, const Matrix& feat_q, int bins = 16);

double kl_divergence(const Matrix& feat_p, const Matrix& feat_q, KlEstimator estimator);

/// One row per epoch of KL(src || src-like), KL(src-like || trg), KL(src || trg).
struct DiscrepancyCurve {
  struct Row {
    int epoch = 0;
    double src_srclike = 0.0;
    double srclike_trg = 0.0;
    double src_trg = 0.0;
  };
  std::vector<Row> rows;
};

/// Appends and returns the row for `epoch`.  `src` is a cached snapshot of
/// held-out source features; it never participates in training.
DiscrepancyCurve::Row track_discrepancy(DiscrepancyCurve& curve, int epoch, const Matrix& src,
                                        const Matrix& src_like, const Matrix& trg,
                                        KlEstimator estimator = KlEstimator::gaussian);

/// One line of metrics.csv.
struct MetricsRow {
  int epoch = 0;
  std::string phase;
  double l_seg = 0.0;
  double l_ardm = 0.0;
  double l_align = 0.0;
  double l_trg_ent = 0.0;
  double total = 0.0;
  double mf1_target = 0.0;
  double kl_src_srclike = 0.0;
  double kl_srclike_trg = 0.0;
  double kl_src_trg = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,phase,L_Seg,L_ARDM,L_Align,L_TrgEnt,total,MF1_target,KL_src_srclike,KL_srclike_trg,"
    "KL_src_trg";

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace temsr
