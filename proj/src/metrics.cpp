#include "camforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace camforge {

namespace {

void check_inputs(std::span<const double> probs, std::span<const int> labels, const char* op) {
  if (probs.size() != labels.size()) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(probs.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  }
  if (probs.empty()) throw std::invalid_argument(std::string(op) + ": empty input");
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument(std::string(op) + ": label " + std::to_string(l) + " is not binary");
  }
}

std::optional<double> ratio(double num, double den) {
  if (den == 0.0) return std::nullopt;
  return num / den;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

ConfusionMatrix confusion(std::span<const double> probs, std::span<const int> labels, double threshold) {
  check_inputs(probs, labels, "confusion");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool predicted = probs[i] >= threshold;
    if (labels[i] == 1) {
      (predicted ? cm.tp : cm.fn)++;
    } else {
      (predicted ? cm.fp : cm.tn)++;
    }
  }
  return cm;
}

BasicMetrics basic_metrics(const ConfusionMatrix& cm) {
  const double tn = static_cast<double>(cm.tn), fp = static_cast<double>(cm.fp);
  const double fn = static_cast<double>(cm.fn), tp = static_cast<double>(cm.tp);
  BasicMetrics m;
  m.accuracy = ratio(tp + tn, tn + fp + fn + tp);
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.specificity = ratio(tn, tn + fp);
  if (m.precision && m.recall) m.f1 = ratio(2.0 * *m.precision * *m.recall, *m.precision + *m.recall);
  return m;
}

std::optional<double> cohens_kappa(const ConfusionMatrix& cm) {
  const double n = static_cast<double>(cm.total());
  if (n == 0.0) return std::nullopt;
  const double po = static_cast<double>(cm.tp + cm.tn) / n;
  const double pe = (static_cast<double>(cm.tp + cm.fp) * static_cast<double>(cm.tp + cm.fn) +
                     static_cast<double>(cm.tn + cm.fn) * static_cast<double>(cm.tn + cm.fp)) /
                    (n * n);
  if (pe == 1.0) return std::nullopt;
  return (po - pe) / (1.0 - pe);
}

double mcc(const ConfusionMatrix& cm) {
  const double tn = static_cast<double>(cm.tn), fp = static_cast<double>(cm.fp);
  const double fn = static_cast<double>(cm.fn), tp = static_cast<double>(cm.tp);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(den);
}

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "roc_auc");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw std::invalid_argument("roc_auc: labels contain a single class");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  // Twice the area in units of (1 positive x 1 negative), kept integral so the
  // result is exact.
  unsigned long long twice_area = 0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    std::size_t dtp = 0, dfp = 0;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] == 1 ? dtp : dfp)++;
    twice_area += static_cast<unsigned long long>(dfp) * (2 * tp + dtp);
    tp += dtp;
    fp += dfp;
    roc.points.push_back({s, static_cast<double>(fp) / static_cast<double>(negatives),
                          static_cast<double>(tp) / static_cast<double>(positives)});
  }
  roc.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
  return roc;
}

MetricsReport metrics_report(std::span<const double> probs, std::span<const int> labels, double threshold) {
  MetricsReport r;
  r.threshold = threshold;
  r.cm = confusion(probs, labels, threshold);
  const BasicMetrics b = basic_metrics(r.cm);
  r.accuracy = b.accuracy;
  r.precision = b.precision;
  r.recall = b.recall;
  r.specificity = b.specificity;
  r.f1 = b.f1;
  r.kappa = cohens_kappa(r.cm);
  r.mcc = mcc(r.cm);
  if (r.cm.tp + r.cm.fn > 0 && r.cm.tn + r.cm.fp > 0) r.roc_auc = roc_auc(probs, labels).auc;
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"n", r.cm.total()},
          {"threshold", r.threshold},
          {"confusion", {{"tn", r.cm.tn}, {"fp", r.cm.fp}, {"fn", r.cm.fn}, {"tp", r.cm.tp}}},
          {"accuracy", opt(r.accuracy)},
          {"precision", opt(r.precision)},
          {"recall", opt(r.recall)},
          {"sensitivity", opt(r.recall)},
          {"specificity", opt(r.specificity)},
          {"f1", opt(r.f1)},
          {"roc_auc", opt(r.roc_auc)},
          {"kappa", opt(r.kappa)},
          {"mcc", r.mcc}};
}

double histogram_edge(std::size_t i, std::size_t n_bins) {
  return -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n_bins);
}

ResidualHistogram residual_histogram(std::span<const double> residuals, std::size_t n_bins) {
  if (n_bins == 0) throw std::invalid_argument("residual_histogram: n_bins must be positive");
  ResidualHistogram h;
  for (std::size_t i = 0; i <= n_bins; ++i) h.edges.push_back(histogram_edge(i, n_bins));
  h.counts.assign(n_bins, 0);
  for (double r : residuals) {
    if (!(r >= -1.0 && r <= 1.0)) throw std::invalid_argument("residual " + fmt(r) + " outside [-1, 1]");
    auto bin = static_cast<std::size_t>(std::floor((r + 1.0) * static_cast<double>(n_bins) / 2.0));
    bin = std::min(bin, n_bins - 1);
    // Settle floating-point disagreements against the stored edges.
    while (bin > 0 && r < h.edges[bin]) --bin;
    while (bin + 1 < n_bins && r >= h.edges[bin + 1]) ++bin;
    h.counts[bin]++;
  }
  return h;
}

ResidualAnalysis residual_analysis(std::span<const double> probs, std::span<const int> labels, std::size_t n_bins,
                                   double flag_threshold) {
  check_inputs(probs, labels, "residual_analysis");
  ResidualAnalysis a;
  std::vector<double> residuals;
  a.summary.flag_threshold = flag_threshold;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw std::invalid_argument("residual_analysis: probability outside [0,1]");
    const double r = probs[i] - static_cast<double>(labels[i]);
    a.records.push_back({probs[i], labels[i], r});
    residuals.push_back(r);
    a.summary.mean += r;
    a.summary.mean_abs += std::abs(r);
    if (std::abs(r) > flag_threshold) {
      a.summary.flagged.push_back(i);
      (r > 0 ? a.summary.flagged_false_positives : a.summary.flagged_false_negatives)++;
    }
  }
  a.summary.count = probs.size();
  a.summary.mean /= static_cast<double>(probs.size());
  a.summary.mean_abs /= static_cast<double>(probs.size());
  a.histogram = residual_histogram(residuals, n_bins);
  return a;
}

void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc) {
  auto out = open_csv(path);
  out << "threshold,fpr,tpr\n";
  for (const auto& p : roc.points) out << (std::isinf(p.threshold) ? "inf" : fmt(p.threshold)) << ',' << fmt(p.fpr) << ',' << fmt(p.tpr) << '\n';
}

void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm) {
  auto out = open_csv(path);
  out << "actual,predicted_normal,predicted_pneumonia\n";
  out << "normal," << cm.tn << ',' << cm.fp << '\n';
  out << "pneumonia," << cm.fn << ',' << cm.tp << '\n';
}

void write_histogram_csv(const std::filesystem::path& path, const ResidualHistogram& hist) {
  auto out = open_csv(path);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    out << fmt(hist.edges[i]) << ',' << fmt(hist.edges[i + 1]) << ',' << hist.counts[i] << '\n';
  }
}

void write_scatter_csv(const std::filesystem::path& path, const std::vector<ResidualRecord>& records) {
  auto out = open_csv(path);
  out << "prob,label,residual\n";
  for (const auto& r : records) out << fmt(r.prob) << ',' << r.label << ',' << fmt(r.residual) << '\n';
}

}  // namespace camforge
