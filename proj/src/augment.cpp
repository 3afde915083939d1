#include "fedssl/augment.hpp"

#include <algorithm>
#include <numeric>

#include "fedssl/errors.hpp"

namespace fedssl {

void AugmentationPolicy::validate() const {
  if (!(weak_sigma_low > 0.0 && weak_sigma_low <= weak_sigma_high)) {
    throw ConfigError("weak sigma range must satisfy 0 < low <= high");
  }
  if (!(strong_sigma_low > 0.0 && strong_sigma_low <= strong_sigma_high)) {
    throw ConfigError("strong sigma range must satisfy 0 < low <= high");
  }
  if (!(weak_sigma_high < strong_sigma_high)) {
    throw ConfigError("weak sigma range must lie below the strong range");
  }
  if (!(strong_mask_fraction >= 0.0 && strong_mask_fraction < 1.0)) {
    throw ConfigError("strong_mask_fraction must be in [0, 1)");
  }
}

namespace {

void add_noise(VecF& v, std::size_t numeric_count, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  std::normal_distribution<double> noise(0.0, sigma);
  const auto n = std::min<Eigen::Index>(static_cast<Eigen::Index>(numeric_count), v.size());
  for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<float>(v(i) + noise(rng));
}

void clip_unit(VecF& v, std::size_t numeric_count) {
  const auto n = std::min<Eigen::Index>(static_cast<Eigen::Index>(numeric_count), v.size());
  v.head(n) = v.head(n).cwiseMax(0.0f).cwiseMin(1.0f);
}

}  // namespace

VecF weak_augment(const Eigen::Ref<const VecF>& x, const FeatureLayout& layout, double sigma, bool clip,
                  Rng& rng) {
  VecF out = x;
  add_noise(out, layout.numeric_count, sigma, rng);
  if (clip) clip_unit(out, layout.numeric_count);
  return out;
}

VecF strong_augment(const Eigen::Ref<const VecF>& x, const FeatureLayout& layout, double sigma,
                    double mask_fraction, bool clip, Rng& rng) {
  VecF out = x;
  add_noise(out, layout.numeric_count, sigma, rng);
  if (clip) clip_unit(out, layout.numeric_count);
  const auto dim = static_cast<std::size_t>(out.size());
  const auto masked = static_cast<std::size_t>(mask_fraction * static_cast<double>(dim));
  if (masked > 0) {
    std::vector<std::size_t> positions(dim);
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `masked` entries are a uniform draw.
    for (std::size_t i = 0; i < masked; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, dim - 1);
      std::swap(positions[i], positions[pick(rng)]);
      out(static_cast<Eigen::Index>(positions[i])) = 0.0f;
    }
  }
  return out;
}

AugmentedBatch make_pairs(const Eigen::Ref<const MatF>& batch, const AugmentationPolicy& policy,
                          const FeatureLayout& layout, Rng& rng) {
  if (batch.cols() == 0) throw ShapeError("make_pairs needs a non-empty batch");
  AugmentedBatch out;
  out.a.resize(batch.rows(), batch.cols());
  out.b.resize(batch.rows(), batch.cols());
  out.source_index.resize(static_cast<std::size_t>(batch.cols()));
  std::iota(out.source_index.begin(), out.source_index.end(), std::size_t{0});

  if (!policy.enabled) {
    out.a = batch;
    out.b = batch;
    return out;
  }

  std::uniform_real_distribution<double> weak(policy.weak_sigma_low, policy.weak_sigma_high);
  std::uniform_real_distribution<double> strong(policy.strong_sigma_low, policy.strong_sigma_high);
  out.sigma_weak = weak(rng);
  out.sigma_strong = strong(rng);
  for (Eigen::Index i = 0; i < batch.cols(); ++i) {
    out.a.col(i) = weak_augment(batch.col(i), layout, out.sigma_weak, policy.clip_to_unit, rng);
    out.b.col(i) = strong_augment(batch.col(i), layout, out.sigma_strong, policy.strong_mask_fraction,
                                  policy.clip_to_unit, rng);
  }
  return out;
}

}  // namespace fedssl
