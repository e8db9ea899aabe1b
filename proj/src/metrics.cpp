#include "temsr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace temsr {

double macro_f1(std::span<const int> y_true, std::span<const int> y_pred, int classes) {
  if (y_true.empty()) throw DomainError("macro_f1: empty input");
  if (y_true.size() != y_pred.size()) throw DomainError("macro_f1: length mismatch");
  if (classes < 1) throw DomainError("macro_f1: classes must be positive");
  std::vector<long> tp(static_cast<std::size_t>(classes)), fp(tp), fn(tp);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i];
    const int p = y_pred[i];
    if (t < 0 || t >= classes || p < 0 || p >= classes)
      throw DomainError("macro_f1: label outside [0, C)");
    if (t == p) {
      ++tp[static_cast<std::size_t>(t)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(t)];
    }
  }
  double sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    const auto k = static_cast<std::size_t>(c);
    const double denom = 2.0 * tp[k] + fp[k] + fn[k];
    sum += denom > 0 ? 2.0 * tp[k] / denom : 0.0;
  }
  return sum / classes;
}

namespace {

void fit_diag(const Matrix& f, Vector& mean, Vector& var) {
  mean = f.rowwise().mean();
  var = ((f.colwise() - mean).array().square().rowwise().sum() / static_cast<double>(f.cols() - 1))
            .max(kVarianceFloor)
            .matrix();
}

}  // namespace

double kl_gaussian(const Matrix& feat_p, const Matrix& feat_q) {
  if (feat_p.cols() < 2 || feat_q.cols() < 2) throw DomainError("kl_gaussian: need B >= 2");
  if (feat_p.rows() != feat_q.rows()) throw DomainError("kl_gaussian: dimension mismatch");
  Vector mp, vp, mq, vq;
  fit_diag(feat_p, mp, vp);
  fit_diag(feat_q, mq, vq);
  const auto terms = 0.5 * ((vq.array() / vp.array()).log() +
                            (vp.array() + (mp - mq).array().square()) / vq.array() - 1.0);
  return std::max(0.0, terms.sum());
}

double kl_histogram(const Matrix& feat_p, const Matrix& feat_q, int bins) {
  if (feat_p.cols() < 2 || feat_q.cols() < 2) throw DomainError("kl_histogram: need B >= 2");
  if (feat_p.rows() != feat_q.rows()) throw DomainError("kl_histogram: dimension mismatch");
  if (bins < 2) throw DomainError("kl_histogram: need at least two bins");
  double total = 0.0;
  for (Eigen::Index d = 0; d < feat_p.rows(); ++d) {
    const double lo = std::min(feat_p.row(d).minCoeff(), feat_q.row(d).minCoeff());
    const double hi = std::max(feat_p.row(d).maxCoeff(), feat_q.row(d).maxCoeff());
    if (!(hi > lo)) continue;
    auto hist = [&](const Matrix& f) {
      std::vector<double> h(static_cast<std::size_t>(bins), 1.0);
      for (Eigen::Index j = 0; j < f.cols(); ++j) {
        int b = static_cast<int>((f(d, j) - lo) / (hi - lo) * bins);
        h[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))] += 1.0;
      }
      const double s = static_cast<double>(f.cols() + bins);
      for (double& v : h) v /= s;
      return h;
    };
    const auto p = hist(feat_p);
    const auto q = hist(feat_q);
    for (int b = 0; b < bins; ++b) {
      const auto k = static_cast<std::size_t>(b);
      total += p[k] * std::log(p[k] / q[k]);
    }
  }
  return std::max(0.0, total);
}

double kl_divergence(const Matrix& feat_p, const Matrix& feat_q, KlEstimator estimator) {
  return estimator == KlEstimator::gaussian ? kl_gaussian(feat_p, feat_q)
                                            : kl_histogram(feat_p, feat_q);
}

DiscrepancyCurve::Row track_discrepancy(DiscrepancyCurve& curve, int epoch, const Matrix& src,
                                        const Matrix& src_like, const Matrix& trg,
                                        KlEstimator estimator) {
  DiscrepancyCurve::Row row{epoch, kl_divergence(src, src_like, estimator),
                            kl_divergence(src_like, trg, estimator),
                            kl_divergence(src, trg, estimator)};
  if (!std::isfinite(row.src_srclike) || !std::isfinite(row.srclike_trg) ||
      !std::isfinite(row.src_trg))
    throw DomainError("track_discrepancy: non-finite divergence");
  curve.rows.push_back(row);
  return row;
}

// ---------------------------------------------------------------------------

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << kMetricsHeader << '\n';
  for (const auto& r : rows)
    os << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n",
                      r.epoch, r.phase, r.l_seg, r.l_ardm, r.l_align, r.l_trg_ent, r.total,
                      r.mf1_target, r.kl_src_srclike, r.kl_srclike_trg, r.kl_src_trg);
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader)
    throw FormatError("metrics.csv: unexpected header in '" + path.string() + "'");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 11) throw FormatError("metrics.csv: expected 11 columns");
    try {
      rows.push_back({std::stoi(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                      std::stod(f[5]), std::stod(f[6]), std::stod(f[7]), std::stod(f[8]),
                      std::stod(f[9]), std::stod(f[10])});
    } catch (const std::exception&) {
      throw FormatError("metrics.csv: malformed number in '" + line + "'");
    }
  }
  return rows;
}

}  // namespace temsr
