#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

namespace camforge {

struct ConfusionMatrix {
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tp = 0;

  std::size_t total() const { return tn + fp + fn + tp; }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Predicted positive iff prob >= threshold. Labels must be 0 or 1.
ConfusionMatrix confusion(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5);

// Metrics with a zero denominator are std::nullopt rather than 0.
struct BasicMetrics {
  std::optional<double> accuracy;
  std::optional<double> precision;
  std::optional<double> recall;  // sensitivity
  std::optional<double> specificity;
  std::optional<double> f1;
};

BasicMetrics basic_metrics(const ConfusionMatrix& cm);

/// (p_o - p_e) / (1 - p_e); nullopt when p_e == 1 or the matrix is empty.
std::optional<double> cohens_kappa(const ConfusionMatrix& cm);

/// Matthews correlation; 0 when any marginal is empty.
double mcc(const ConfusionMatrix& cm);

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

struct RocCurve {
  double auc = 0.0;
  std::vector<RocPoint> points;  // from (0,0) to (1,1)
};

/// One curve vertex per distinct score. Ties are swept as a block, so the
/// trapezoidal area equals P(s+ > s-) + P(s+ == s-)/2.
RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels);

struct MetricsReport {
  ConfusionMatrix cm;
  double threshold = 0.5;
  std::optional<double> accuracy, precision, recall, specificity, f1, roc_auc, kappa;
  double mcc = 0.0;
};

MetricsReport metrics_report(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5);
nlohmann::json to_json(const MetricsReport& report);

struct ResidualRecord {
  double prob;
  int label;
  double residual;  // prob - label
};

struct ResidualHistogram {
  std::vector<double> edges;        // n_bins + 1 edges over [-1, 1]
  std::vector<std::size_t> counts;  // last bin includes its right edge
};

struct ResidualSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double mean_abs = 0.0;
  double flag_threshold = 0.9;
  std::vector<std::size_t> flagged;  // indices with |r| > flag_threshold
  std::size_t flagged_false_positives = 0;
  std::size_t flagged_false_negatives = 0;
};

struct ResidualAnalysis {
  std::vector<ResidualRecord> records;
  ResidualHistogram histogram;
  ResidualSummary summary;
};

double histogram_edge(std::size_t i, std::size_t n_bins);
ResidualHistogram residual_histogram(std::span<const double> residuals, std::size_t n_bins = 20);
ResidualAnalysis residual_analysis(std::span<const double> probs, std::span<const int> labels,
                                   std::size_t n_bins = 20, double flag_threshold = 0.9);

void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc);
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm);
void write_histogram_csv(const std::filesystem::path& path, const ResidualHistogram& hist);
void write_scatter_csv(const std::filesystem::path& path, const std::vector<ResidualRecord>& records);

}  // namespace camforge
