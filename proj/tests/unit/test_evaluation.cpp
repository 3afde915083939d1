#include <doctest.h>

#include <fstream>

#include "fedssl/errors.hpp"
#include "fedssl/evaluation.hpp"
#include "helpers.hpp"

using namespace fedssl;

namespace {

struct Oracle {
  double accuracy, precision, recall, f1;
};

// Direct count-based computation from label lists.
Oracle oracle(const std::vector<int>& truth, const std::vector<int>& pred, int classes) {
  const double n = static_cast<double>(truth.size());
  double correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += truth[i] == pred[i];
  Oracle o{100.0 * correct / n, 0, 0, 0};
  for (int c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      support += truth[i] == c;
      tp += truth[i] == c && pred[i] == c;
      fp += truth[i] != c && pred[i] == c;
      fn += truth[i] == c && pred[i] != c;
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0;
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0;
    o.precision += support / n * p * 100;
    o.recall += support / n * r * 100;
    o.f1 += support / n * f * 100;
  }
  return o;
}

std::string ppm_magic(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string magic;
  in >> magic;
  return magic;
}

}  // namespace

TEST_CASE("confusion matrix accumulation") {
  const std::vector<int> t = {0, 0, 1, 2, 2};
  const std::vector<int> p = {0, 1, 1, 2, 0};
  auto cm = confusion(t, p, 3);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(2, 0) == 1);
  CHECK(cm.total() == 5);
  CHECK(cm.trace() == 3);
  CHECK(cm.row_sum(2) == 2);
  CHECK(cm.col_sum(0) == 2);
  cm += cm;
  CHECK(cm.total() == 10);
  CHECK_THROWS_AS(confusion(t, std::vector<int>{0, 1}, 3), DataError);
  CHECK_THROWS_AS(confusion(std::vector<int>{3}, std::vector<int>{0}, 3), DataError);
  CHECK_THROWS_AS(accuracy(ConfusionMatrix(3)), DataError);
}

TEST_CASE("hand-computed metrics") {
  // 8 correct of 10
  const std::vector<int> t = {0, 0, 0, 0, 0, 1, 1, 1, 2, 2};
  const std::vector<int> p = {0, 0, 0, 0, 1, 1, 1, 0, 2, 2};
  const auto cm = confusion(t, p, 3);
  CHECK(accuracy(cm) == doctest::Approx(80.0));

  const auto two = confusion(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 1, 1, 1}, 2);
  const auto w = weighted_prf(two);
  CHECK(accuracy(two) == doctest::Approx(75.0));
  CHECK(w.precision == doctest::Approx(83.3333).epsilon(1e-5));
  CHECK(w.recall == doctest::Approx(75.0));
  CHECK(w.f1 == doctest::Approx(73.3333).epsilon(1e-5));
  const auto cls = per_class_metrics(two);
  CHECK(cls[0].support == 2);
  CHECK(cls[0].precision == doctest::Approx(100.0));
  CHECK(cls[1].recall == doctest::Approx(100.0));
}

TEST_CASE("metrics agree with the label-list oracle on random predictions") {
  Rng rng = make_rng(3, {21});
  std::uniform_int_distribution<int> cls(0, 4), len(1, 300);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> t(static_cast<std::size_t>(len(rng))), p(t.size());
    for (auto& v : t) v = cls(rng);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = (trial % 3 == 0) ? t[i] : cls(rng);
    const auto cm = confusion(t, p, 5);
    const auto o = oracle(t, p, 5);
    const auto w = weighted_prf(cm);
    CHECK(std::abs(accuracy(cm) - o.accuracy) < 1e-9);
    CHECK(std::abs(w.precision - o.precision) < 1e-9);
    CHECK(std::abs(w.recall - o.recall) < 1e-9);
    CHECK(std::abs(w.f1 - o.f1) < 1e-9);
    // Support-weighted recall is the accuracy.
    CHECK(std::abs(w.recall - accuracy(cm)) < 1e-9);
  }
}

TEST_CASE("zero denominators produce zeros") {
  const auto cm = confusion(std::vector<int>{0, 0, 1}, std::vector<int>{0, 0, 0}, 3);
  const auto cls = per_class_metrics(cm);
  CHECK(cls[1].precision == 0.0);
  CHECK(cls[1].recall == 0.0);
  CHECK(cls[2].f1 == 0.0);
  CHECK(cls[2].support == 0);
}

TEST_CASE("imbalance ratios use the reference counts") {
  const std::vector<std::size_t> counts = {77054, 53385, 14077, 3749, 252};
  const auto r = imbalance_ratios(counts);
  CHECK(r[0] == doctest::Approx(1.0));
  CHECK(r[4] == doctest::Approx(305.77).epsilon(1e-4));
  const std::vector<std::size_t> with_zero = {10, 0};
  CHECK(std::isinf(imbalance_ratios(with_zero)[1]));

  auto cm = confusion(std::vector<int>{0, 1, 2, 3, 4}, std::vector<int>{0, 1, 2, 3, 4}, 5);
  const auto rep = make_report(cm, counts);
  CHECK(rep.imbalance_ratio.size() == 5);
  const auto zero_rep = make_report(confusion(std::vector<int>{0, 1}, std::vector<int>{0, 1}, 2), with_zero);
  const auto j = zero_rep.to_json();
  CHECK(j.dump().find("\"inf\"") != std::string::npos);
  const auto back = MetricsReport::from_json(j);
  CHECK(std::isinf(back.imbalance_ratio[1]));
  CHECK(back.accuracy == doctest::Approx(zero_rep.accuracy));
  CHECK(back.cm.at(1, 1) == 1);
}

TEST_CASE("averaging reports") {
  const auto a = make_report(confusion(std::vector<int>{0, 1}, std::vector<int>{0, 1}, 2));
  const auto b = make_report(confusion(std::vector<int>{0, 1}, std::vector<int>{0, 0}, 2));
  const std::vector<MetricsReport> both = {a, b};
  const auto avg = average_reports(both);
  CHECK(avg.accuracy == doctest::Approx(75.0));
  CHECK(avg.seeds_averaged == 2);
  CHECK(avg.cm.total() == 4);
  const auto three = make_report(confusion(std::vector<int>{0}, std::vector<int>{0}, 3));
  const std::vector<MetricsReport> mixed = {a, three};
  CHECK_THROWS(average_reports(mixed));
}

TEST_CASE("binary view collapses the attack classes") {
  const auto& data = testing::small_prepared();
  ArchitectureSpec arch;
  const Network<float> net(arch);
  const auto p = build(arch, 1);
  const auto eval = evaluate(net, p, data.test);
  CHECK(eval.multiclass.cm.num_classes() == 5);
  CHECK(eval.binary.cm.num_classes() == 2);
  const auto& m = eval.multiclass.cm;
  const auto& b = eval.binary.cm;
  CHECK(b.at(0, 0) == m.at(0, 0));
  long long attack_as_attack = 0;
  for (int t = 1; t < 5; ++t) {
    for (int q = 1; q < 5; ++q) attack_as_attack += m.at(t, q);
  }
  CHECK(b.at(1, 1) == attack_as_attack);
  CHECK(b.total() == m.total());
  CHECK(eval.multiclass.samples == data.test.size());
}

TEST_CASE("latency is positive and stable") {
  const ArchitectureSpec arch;
  const Network<float> net(arch);
  const auto p = build(arch, 1);
  const auto& data = testing::small_prepared();
  const auto a = measure_latency(net, p, data.test.x, 16, 20);
  const auto b = measure_latency(net, p, data.test.x, 16, 20);
  CHECK(a.trial_ms_per_sample.size() == 20);
  CHECK(a.ms_per_sample > 0.0);
  CHECK(b.ms_per_sample > 0.0);
  CHECK(a.ms_per_sample < 50.0);
}

TEST_CASE("emission: text, csv and images") {
  testing::TempDir tmp("eval");
  const auto rep = make_report(confusion(std::vector<int>{0, 1, 1}, std::vector<int>{0, 1, 0}, 2, {"Normal", "Attack"}));
  const auto text = format_report(rep, "binary");
  CHECK(text.find("66.67") != std::string::npos);
  CHECK(text.find("Attack") != std::string::npos);
  write_report_csv(tmp.path / "r.csv", rep);
  write_confusion_csv(tmp.path / "c.csv", rep.cm);
  CHECK(std::filesystem::file_size(tmp.path / "r.csv") > 0);
  write_confusion_heatmap(tmp.path / "h.ppm", rep.cm);
  write_line_plot(tmp.path / "l.ppm", {{3, 2, 1}, {1, 1.5}});
  MatD pts = MatD::Random(2, 30);
  std::vector<int> labels(30, 1);
  write_scatter(tmp.path / "s.ppm", pts, labels);
  for (const char* f : {"h.ppm", "l.ppm", "s.ppm"}) CHECK(ppm_magic(tmp.path / f) == "P6");
}

TEST_CASE("PCA recovers a dominant axis") {
  Rng rng = make_rng(4, {1});
  std::normal_distribution<double> n(0.0, 1.0);
  MatD x(3, 200);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double t = 10 * n(rng);
    x.col(j) << t, 2 * t, 0.01 * n(rng);
  }
  const MatD y = pca_2d(x);
  CHECK(y.rows() == 2);
  CHECK(y.cols() == 200);
  const double var0 = (y.row(0).array() - y.row(0).mean()).square().mean();
  const double var1 = (y.row(1).array() - y.row(1).mean()).square().mean();
  CHECK(var1 < 1e-3 * var0);
  const double total = (x.colwise() - x.rowwise().mean()).array().square().rowwise().sum().sum() / 200.0;
  CHECK(var0 == doctest::Approx(total).epsilon(1e-3));
}
