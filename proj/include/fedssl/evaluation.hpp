#pragma once

// Confusion matrices, accuracy / weighted precision-recall-F1, imbalance
// ratios, inference latency and report emission. All rates are percents.

#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedssl/dataset.hpp"
#include "fedssl/model.hpp"

namespace fedssl {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes, std::vector<std::string> names = {});

  int num_classes() const { return classes_; }
  const std::vector<std::string>& names() const { return names_; }
  long long& at(int truth, int predicted) { return counts_[index(truth, predicted)]; }
  long long at(int truth, int predicted) const { return counts_[index(truth, predicted)]; }
  long long total() const;
  long long trace() const;
  long long row_sum(int truth) const;
  long long col_sum(int predicted) const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

 private:
  std::size_t index(int t, int p) const { return static_cast<std::size_t>(t) * classes_ + p; }
  int classes_ = 0;
  std::vector<std::string> names_;
  std::vector<long long> counts_;
};

/// Throws DataError on length mismatch or a label outside [0, C).
ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int num_classes,
                          std::vector<std::string> names = {});

/// 100 * trace / total. Throws DataError on an empty matrix.
double accuracy(const ConfusionMatrix& cm);

struct ClassMetrics {
  std::string name;
  long long support = 0;  // true-class quantity
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct PrfResult {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Per-class metrics. A zero denominator yields 0 and a logged warning.
std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm);
/// Per-class values averaged with true-class quantity weights.
PrfResult weighted_prf(const ConfusionMatrix& cm);

/// max_count / count_i per class; a zero count reports +infinity.
std::vector<double> imbalance_ratios(std::span<const std::size_t> counts);

struct MetricsReport {
  ConfusionMatrix cm;
  double accuracy = 0.0;
  PrfResult weighted;
  std::vector<ClassMetrics> classes;
  std::vector<double> imbalance_ratio;  // empty unless reference counts were given
  std::size_t samples = 0;
  std::size_t seeds_averaged = 1;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Builds a full report; `reference_counts` (when non-empty) supply the
/// class quantities behind the imbalance ratios.
MetricsReport make_report(const ConfusionMatrix& cm, std::span<const std::size_t> reference_counts = {});

/// Averages the scalar metrics of several reports (confusion matrices are
/// summed). All reports must have the same class count.
MetricsReport average_reports(std::span<const MetricsReport> reports);

/// 5-class and collapsed Normal/Attack views of one set of predictions.
struct EvaluationResult {
  MetricsReport multiclass;
  MetricsReport binary;
};

EvaluationResult evaluate(const Network<float>& net, const ParameterSet& p, const LabeledSet& test,
                          std::span<const std::size_t> reference_counts = {});

struct LatencyResult {
  double ms_per_sample = 0.0;
  std::vector<double> trial_ms_per_sample;
};

/// Mean wall-clock inference time per sample over `trials` forward passes
/// of `batch_size` samples, after one untimed warm-up pass.
LatencyResult measure_latency(const Network<float>& net, const ParameterSet& p, const MatF& samples,
                              std::size_t batch_size = 16, std::size_t trials = 20);

// --- emission --------------------------------------------------------------

/// "Acc Pre Recall F1" style text table with two decimals.
std::string format_report(const MetricsReport& r, const std::string& title);
void write_report_csv(const std::filesystem::path& path, const MetricsReport& r);
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm);

/// Row-normalised confusion heatmap as a binary PPM image.
void write_confusion_heatmap(const std::filesystem::path& path, const ConfusionMatrix& cm, int cell_pixels = 48);
/// Line plot of one or more series (e.g. loss curves) as a PPM image.
void write_line_plot(const std::filesystem::path& path, const std::vector<std::vector<double>>& series,
                     int width = 640, int height = 360);
/// 2-D scatter coloured by label as a PPM image.
void write_scatter(const std::filesystem::path& path, const MatD& points, std::span<const int> labels,
                   int size = 512);

/// Principal-component projection of columns onto their top two axes.
MatD pca_2d(const MatD& columns);

}  // namespace fedssl
