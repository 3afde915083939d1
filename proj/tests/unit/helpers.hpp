#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fedssl/dataset.hpp"
#include "fedssl/model.hpp"
#include "fedssl/rng.hpp"
#include "fedssl/synthetic.hpp"
#include "fedssl/tensor.hpp"

namespace testing {

using namespace fedssl;

/// Small architecture for gradient checks and fast protocol runs.
inline ArchitectureSpec tiny_arch(int bn = 0, double dropout = 0.0, int input_dim = 12) {
  ArchitectureSpec a;
  a.input_dim = input_dim;
  a.conv = {{4, 3, 1, 2}, {5, 3, 1, 2}};
  a.embedding_dim = 6;
  a.projection_hidden = 5;
  a.projection_dim = 4;
  a.projection_bn_count = bn;
  a.dropout_rate = dropout;
  a.num_classes = 3;
  return a;
}

template <typename T>
Mat<T> random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                             double floor = 1e-10) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

/// Central differences of f with respect to selected entries of `values`.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, double* values,
                                            const std::vector<std::size_t>& indices, double eps = 1e-6) {
  std::vector<double> out;
  for (auto i : indices) {
    const double keep = values[i];
    values[i] = keep + eps;
    const double up = f();
    values[i] = keep - eps;
    const double down = f();
    values[i] = keep;
    out.push_back((up - down) / (2 * eps));
  }
  return out;
}

inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(count, n));
  return all;
}

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("fedssl_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

/// Prepared synthetic data with a small partition, cached per process.
inline const PreparedData& small_prepared() {
  static const PreparedData data = [] {
    const auto raw = make_synthetic(SyntheticConfig::scaled(1200, 400, 11));
    PartitionConfig cfg;
    cfg.server_labeled_count = 400;
    cfg.client_unlabeled_total = 600;
    cfg.num_clients = 3;
    return prepare_dataset(raw.train, raw.test, cfg, 5);
  }();
  return data;
}

}  // namespace testing
