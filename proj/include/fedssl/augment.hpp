#pragma once

// Weak/strong views of traffic feature vectors for contrastive training.

#include <vector>

#include "fedssl/dataset.hpp"
#include "fedssl/rng.hpp"
#include "fedssl/tensor.hpp"

namespace fedssl {

/// Noise scales are drawn once per batch, uniformly inside each range.
/// Gaussian noise only touches numeric components; strong masking zeroes
/// floor(mask_fraction * dim) positions anywhere, one-hot entries included.
struct AugmentationPolicy {
  double weak_sigma_low = 0.001;
  double weak_sigma_high = 0.05;
  double strong_sigma_low = 0.10;
  double strong_sigma_high = 0.40;
  double strong_mask_fraction = 0.10;
  bool clip_to_unit = true;
  /// false turns augmentation off: both views are the raw sample.
  bool enabled = true;

  /// Throws ConfigError unless 0 < low <= high for both ranges, the weak
  /// maximum lies below the strong maximum and the mask fraction is in [0,1).
  void validate() const;
};

VecF weak_augment(const Eigen::Ref<const VecF>& x, const FeatureLayout& layout, double sigma, bool clip,
                  Rng& rng);
VecF strong_augment(const Eigen::Ref<const VecF>& x, const FeatureLayout& layout, double sigma,
                    double mask_fraction, bool clip, Rng& rng);

/// Column i of `a` (weak) and `b` (strong) both derive from column
/// source_index[i] of the input batch.
struct AugmentedBatch {
  MatF a;
  MatF b;
  std::vector<std::size_t> source_index;
  double sigma_weak = 0.0;
  double sigma_strong = 0.0;

  std::size_t size() const { return source_index.size(); }
};

AugmentedBatch make_pairs(const Eigen::Ref<const MatF>& batch, const AugmentationPolicy& policy,
                          const FeatureLayout& layout, Rng& rng);

}  // namespace fedssl
