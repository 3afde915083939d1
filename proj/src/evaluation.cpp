#include "fedssl/evaluation.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include "fedssl/errors.hpp"

namespace fedssl {

ConfusionMatrix::ConfusionMatrix(int num_classes, std::vector<std::string> names)
    : classes_(num_classes), names_(std::move(names)), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw DataError("confusion matrix needs at least one class");
  if (names_.empty()) {
    for (int c = 0; c < num_classes; ++c) names_.push_back(std::to_string(c));
  }
  if (static_cast<int>(names_.size()) != num_classes) throw DataError("class name count does not match class count");
}

long long ConfusionMatrix::total() const {
  long long t = 0;
  for (auto c : counts_) t += c;
  return t;
}

long long ConfusionMatrix::trace() const {
  long long t = 0;
  for (int c = 0; c < classes_; ++c) t += at(c, c);
  return t;
}

long long ConfusionMatrix::row_sum(int truth) const {
  long long t = 0;
  for (int p = 0; p < classes_; ++p) t += at(truth, p);
  return t;
}

long long ConfusionMatrix::col_sum(int predicted) const {
  long long t = 0;
  for (int r = 0; r < classes_; ++r) t += at(r, predicted);
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw DataError("cannot add confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int num_classes,
                          std::vector<std::string> names) {
  if (truth.size() != predicted.size()) throw DataError("confusion: label sequences differ in length");
  ConfusionMatrix cm(num_classes, std::move(names));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i];
    const int p = predicted[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
      throw DataError("confusion: label out of range at position " + std::to_string(i));
    }
    ++cm.at(t, p);
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw DataError("accuracy of an empty confusion matrix");
  return 100.0 * static_cast<double>(cm.trace()) / static_cast<double>(total);
}

namespace {

std::vector<ClassMetrics> class_metrics(const ConfusionMatrix& cm, bool warn) {
  std::vector<ClassMetrics> out;
  for (int c = 0; c < cm.num_classes(); ++c) {
    ClassMetrics m;
    m.name = cm.names()[c];
    m.support = cm.row_sum(c);
    const auto tp = static_cast<double>(cm.at(c, c));
    const auto predicted = static_cast<double>(cm.col_sum(c));
    const auto actual = static_cast<double>(m.support);
    if (predicted > 0) {
      m.precision = tp / predicted;
    } else if (actual > 0 && warn) {
      spdlog::warn("class {} never predicted; precision reported as 0", m.name);
    }
    if (actual > 0) m.recall = tp / actual;
    if (m.precision + m.recall > 0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    m.precision *= 100.0;
    m.recall *= 100.0;
    m.f1 *= 100.0;
    out.push_back(std::move(m));
  }
  return out;
}

PrfResult weighted_from(const std::vector<ClassMetrics>& classes, double total) {
  PrfResult r;
  for (const auto& m : classes) {
    const double w = static_cast<double>(m.support) / total;
    r.precision += w * m.precision;
    r.recall += w * m.recall;
    r.f1 += w * m.f1;
  }
  return r;
}

}  // namespace

std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm) { return class_metrics(cm, true); }

PrfResult weighted_prf(const ConfusionMatrix& cm) {
  const auto total = static_cast<double>(cm.total());
  if (total == 0) throw DataError("weighted metrics of an empty confusion matrix");
  return weighted_from(class_metrics(cm, true), total);
}

std::vector<double> imbalance_ratios(std::span<const std::size_t> counts) {
  std::vector<double> out;
  if (counts.empty()) return out;
  const double top = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
  for (auto c : counts) {
    out.push_back(c == 0 ? std::numeric_limits<double>::infinity() : top / static_cast<double>(c));
  }
  return out;
}

MetricsReport make_report(const ConfusionMatrix& cm, std::span<const std::size_t> reference_counts) {
  MetricsReport r;
  r.cm = cm;
  r.accuracy = accuracy(cm);
  r.classes = per_class_metrics(cm);
  r.weighted = weighted_from(r.classes, static_cast<double>(cm.total()));
  r.samples = static_cast<std::size_t>(cm.total());
  r.imbalance_ratio = imbalance_ratios(reference_counts);
  return r;
}

MetricsReport average_reports(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw DataError("no reports to average");
  MetricsReport out = reports.front();
  const double n = static_cast<double>(reports.size());
  out.accuracy = 0;
  out.weighted = {};
  for (auto& c : out.classes) c.precision = c.recall = c.f1 = 0;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (r.cm.num_classes() != out.cm.num_classes()) throw DataError("cannot average reports of different class counts");
    if (i > 0) out.cm += r.cm;
    out.accuracy += r.accuracy / n;
    out.weighted.precision += r.weighted.precision / n;
    out.weighted.recall += r.weighted.recall / n;
    out.weighted.f1 += r.weighted.f1 / n;
    for (std::size_t c = 0; c < out.classes.size(); ++c) {
      out.classes[c].precision += r.classes[c].precision / n;
      out.classes[c].recall += r.classes[c].recall / n;
      out.classes[c].f1 += r.classes[c].f1 / n;
    }
  }
  out.seeds_averaged = reports.size();
  return out;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["accuracy"] = accuracy;
  j["precision"] = weighted.precision;
  j["recall"] = weighted.recall;
  j["f1"] = weighted.f1;
  j["samples"] = samples;
  j["seeds_averaged"] = seeds_averaged;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    nlohmann::json k = {{"name", classes[c].name},
                        {"support", classes[c].support},
                        {"precision", classes[c].precision},
                        {"recall", classes[c].recall},
                        {"f1", classes[c].f1}};
    if (c < imbalance_ratio.size()) {
      k["imbalance_ratio"] = std::isinf(imbalance_ratio[c]) ? nlohmann::json("inf") : nlohmann::json(imbalance_ratio[c]);
    }
    j["classes"].push_back(k);
  }
  for (int t = 0; t < cm.num_classes(); ++t) {
    std::vector<long long> row;
    for (int p = 0; p < cm.num_classes(); ++p) row.push_back(cm.at(t, p));
    j["confusion"].push_back(row);
  }
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  std::vector<std::string> names;
  for (const auto& c : j.at("classes")) names.push_back(c.at("name").get<std::string>());
  r.cm = ConfusionMatrix(static_cast<int>(names.size()), names);
  const auto& grid = j.at("confusion");
  for (int t = 0; t < r.cm.num_classes(); ++t) {
    for (int p = 0; p < r.cm.num_classes(); ++p) r.cm.at(t, p) = grid.at(t).at(p).get<long long>();
  }
  r.accuracy = j.at("accuracy").get<double>();
  r.weighted = {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
  r.samples = j.at("samples").get<std::size_t>();
  r.seeds_averaged = j.at("seeds_averaged").get<std::size_t>();
  for (const auto& c : j.at("classes")) {
    r.classes.push_back({c.at("name").get<std::string>(), c.at("support").get<long long>(),
                         c.at("precision").get<double>(), c.at("recall").get<double>(), c.at("f1").get<double>()});
    if (c.contains("imbalance_ratio")) {
      const auto& v = c.at("imbalance_ratio");
      r.imbalance_ratio.push_back(v.is_string() ? std::numeric_limits<double>::infinity() : v.get<double>());
    }
  }
  return r;
}

EvaluationResult evaluate(const Network<float>& net, const ParameterSet& p, const LabeledSet& test,
                          std::span<const std::size_t> reference_counts) {
  if (test.size() == 0) throw DataError("evaluation needs a non-empty test set");
  const auto predicted = predict(net, p, test.x);
  const int classes = net.arch().num_classes;
  std::vector<std::string> names =
      classes == kNumClasses ? class_names() : (classes == 2 ? binary_class_names() : std::vector<std::string>{});
  EvaluationResult r;
  r.multiclass = make_report(confusion(test.y, predicted, classes, names), reference_counts);

  std::vector<int> truth_bin(test.y.size());
  std::vector<int> pred_bin(predicted.size());
  if (classes == kNumClasses) {
    std::transform(test.y.begin(), test.y.end(), truth_bin.begin(), binarize_label);
    std::transform(predicted.begin(), predicted.end(), pred_bin.begin(), binarize_label);
  } else {
    truth_bin = test.y;
    pred_bin = predicted;
  }
  r.binary = make_report(confusion(truth_bin, pred_bin, 2, binary_class_names()));
  return r;
}

LatencyResult measure_latency(const Network<float>& net, const ParameterSet& p, const MatF& samples,
                              std::size_t batch_size, std::size_t trials) {
  if (trials < 1) throw ConfigError("latency measurement needs at least one trial");
  if (samples.cols() == 0) throw DataError("latency measurement needs samples");
  MatF batch(samples.rows(), static_cast<Eigen::Index>(batch_size));
  for (std::size_t i = 0; i < batch_size; ++i) {
    batch.col(static_cast<Eigen::Index>(i)) = samples.col(static_cast<Eigen::Index>(i % samples.cols()));
  }
  volatile float sink = net.classify(p, net.encode(p, batch, Mode::eval)).sum();  // warm-up
  LatencyResult r;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto start = std::chrono::steady_clock::now();
    MatF logits = net.classify(p, net.encode(p, batch, Mode::eval));
    const auto stop = std::chrono::steady_clock::now();
    sink = sink + logits(0, 0);
    const double ms = std::chrono::duration<double, std::milli>(stop - start).count();
    r.trial_ms_per_sample.push_back(ms / static_cast<double>(batch_size));
  }
  double sum = 0;
  for (double v : r.trial_ms_per_sample) sum += v;
  r.ms_per_sample = sum / static_cast<double>(trials);
  return r;
}

// --- emission --------------------------------------------------------------

std::string format_report(const MetricsReport& r, const std::string& title) {
  std::ostringstream out;
  char line[160];
  out << title << '\n';
  std::snprintf(line, sizeof line, "  Acc %.2f  Pre %.2f  Recall %.2f  F1 %.2f  (n=%zu, seeds=%zu)\n", r.accuracy,
                r.weighted.precision, r.weighted.recall, r.weighted.f1, r.samples, r.seeds_averaged);
  out << line;
  std::snprintf(line, sizeof line, "  %-8s %10s %8s %8s %8s %8s\n", "Class", "Imb.Ratio", "Pre", "Recall", "F1",
                "Support");
  out << line;
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    const auto& m = r.classes[c];
    char ratio[32] = "-";
    if (c < r.imbalance_ratio.size()) {
      if (std::isinf(r.imbalance_ratio[c])) {
        std::snprintf(ratio, sizeof ratio, "inf");
      } else {
        std::snprintf(ratio, sizeof ratio, "%.2f", r.imbalance_ratio[c]);
      }
    }
    std::snprintf(line, sizeof line, "  %-8s %10s %8.2f %8.2f %8.2f %8lld\n", m.name.c_str(), ratio, m.precision,
                  m.recall, m.f1, m.support);
    out << line;
  }
  return out.str();
}

void write_report_csv(const std::filesystem::path& path, const MetricsReport& r) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "scope,imbalance_ratio,precision,recall,f1,accuracy,support\n";
  char line[200];
  std::snprintf(line, sizeof line, "weighted,,%.4f,%.4f,%.4f,%.4f,%zu\n", r.weighted.precision, r.weighted.recall,
                r.weighted.f1, r.accuracy, r.samples);
  out << line;
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    const auto& m = r.classes[c];
    std::string ratio = c < r.imbalance_ratio.size()
                            ? (std::isinf(r.imbalance_ratio[c]) ? "inf" : std::to_string(r.imbalance_ratio[c]))
                            : "";
    std::snprintf(line, sizeof line, "%s,%s,%.4f,%.4f,%.4f,,%lld\n", m.name.c_str(), ratio.c_str(), m.precision,
                  m.recall, m.f1, m.support);
    out << line;
  }
}

void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "true\\pred";
  for (const auto& n : cm.names()) out << ',' << n;
  out << '\n';
  for (int t = 0; t < cm.num_classes(); ++t) {
    out << cm.names()[t];
    for (int p = 0; p < cm.num_classes(); ++p) out << ',' << cm.at(t, p);
    out << '\n';
  }
}

namespace {

struct Image {
  int width;
  int height;
  std::vector<std::array<unsigned char, 3>> pixels;

  Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w * h), {255, 255, 255}) {}

  void set(int x, int y, std::array<unsigned char, 3> c) {
    if (x >= 0 && y >= 0 && x < width && y < height) pixels[static_cast<std::size_t>(y * width + x)] = c;
  }

  void fill_rect(int x0, int y0, int w, int h, std::array<unsigned char, 3> c) {
    for (int y = y0; y < y0 + h; ++y) {
      for (int x = x0; x < x0 + w; ++x) set(x, y, c);
    }
  }

  void line(int x0, int y0, int x1, int y1, std::array<unsigned char, 3> c) {
    const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      set(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P6\n" << width << ' ' << height << "\n255\n";
    for (const auto& p : pixels) out.write(reinterpret_cast<const char*>(p.data()), 3);
  }
};

constexpr std::array<std::array<unsigned char, 3>, 8> kPalette = {{{31, 119, 180},
                                                                   {255, 127, 14},
                                                                   {44, 160, 44},
                                                                   {214, 39, 40},
                                                                   {148, 103, 189},
                                                                   {140, 86, 75},
                                                                   {227, 119, 194},
                                                                   {127, 127, 127}}};

}  // namespace

void write_confusion_heatmap(const std::filesystem::path& path, const ConfusionMatrix& cm, int cell_pixels) {
  const int c = cm.num_classes();
  Image img(c * cell_pixels, c * cell_pixels);
  for (int t = 0; t < c; ++t) {
    const double row = static_cast<double>(std::max<long long>(cm.row_sum(t), 1));
    for (int p = 0; p < c; ++p) {
      const double v = static_cast<double>(cm.at(t, p)) / row;
      const auto shade = static_cast<unsigned char>(255.0 * (1.0 - v));
      img.fill_rect(p * cell_pixels, t * cell_pixels, cell_pixels - 1, cell_pixels - 1,
                    {shade, shade, static_cast<unsigned char>(255)});
    }
  }
  img.save(path);
}

void write_line_plot(const std::filesystem::path& path, const std::vector<std::vector<double>>& series, int width,
                     int height) {
  Image img(width, height);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  std::size_t longest = 1;
  for (const auto& s : series) {
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    longest = std::max(longest, s.size());
  }
  if (!(hi > lo)) hi = lo + 1.0;
  const int margin = 20;
  img.line(margin, height - margin, width - margin, height - margin, {0, 0, 0});
  img.line(margin, margin, margin, height - margin, {0, 0, 0});
  auto px = [&](std::size_t i) {
    return margin + static_cast<int>((width - 2 * margin) * static_cast<double>(i) / std::max<std::size_t>(longest - 1, 1));
  };
  auto py = [&](double v) { return height - margin - static_cast<int>((height - 2 * margin) * (v - lo) / (hi - lo)); };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto color = kPalette[k % kPalette.size()];
    for (std::size_t i = 1; i < series[k].size(); ++i) {
      img.line(px(i - 1), py(series[k][i - 1]), px(i), py(series[k][i]), color);
    }
  }
  img.save(path);
}

void write_scatter(const std::filesystem::path& path, const MatD& points, std::span<const int> labels, int size) {
  if (points.rows() != 2 || static_cast<std::size_t>(points.cols()) != labels.size()) {
    throw ShapeError("scatter expects a 2 x N point matrix and N labels");
  }
  Image img(size, size);
  if (points.cols() > 0) {
    const Eigen::Vector2d lo = points.rowwise().minCoeff();
    Eigen::Vector2d span = points.rowwise().maxCoeff() - lo;
    span = span.cwiseMax(1e-12);
    const int margin = 8;
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
      const int x = margin + static_cast<int>((size - 2 * margin) * (points(0, i) - lo(0)) / span(0));
      const int y = size - margin - static_cast<int>((size - 2 * margin) * (points(1, i) - lo(1)) / span(1));
      const int label = labels[static_cast<std::size_t>(i)];
      const auto color = label < 0 ? std::array<unsigned char, 3>{0, 0, 0} : kPalette[label % kPalette.size()];
      img.fill_rect(x - 1, y - 1, 3, 3, color);
    }
  }
  img.save(path);
}

MatD pca_2d(const MatD& columns) {
  if (columns.rows() < 2) throw ShapeError("pca_2d needs at least two feature rows");
  const Eigen::VectorXd mean = columns.rowwise().mean();
  const MatD centered = columns.colwise() - mean;
  const MatD cov = centered * centered.transpose() / std::max<double>(1.0, static_cast<double>(columns.cols() - 1));
  Eigen::SelfAdjointEigenSolver<MatD> solver(cov);
  // Eigenvalues are ascending; the last two columns are the top axes.
  MatD axes(columns.rows(), 2);
  axes.col(0) = solver.eigenvectors().col(columns.rows() - 1);
  axes.col(1) = solver.eigenvectors().col(columns.rows() - 2);
  return axes.transpose() * centered;
}

}  // namespace fedssl
