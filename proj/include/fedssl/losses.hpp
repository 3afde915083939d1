#pragma once

// Training objectives and their analytic gradients.
//
// Batches are column-per-sample matrices. Every loss is a batch mean unless
// stated otherwise, and every returned gradient is the gradient of the
// returned value. Softmax-based terms use max-subtracted log-sum-exp.

#include <span>

#include "fedssl/model.hpp"
#include "fedssl/tensor.hpp"

namespace fedssl {

struct ContrastiveConfig {
  double temperature = 0.5;
  /// true evaluates the denominator literally, including the anchor's
  /// similarity with itself; false drops that term (SimCLR convention).
  bool include_self_term = false;

  void validate() const;
};

/// u.v / (|u||v|). Throws ShapeError on a zero vector or length mismatch.
template <typename T>
T cosine_sim(const Eigen::Ref<const Vec<T>>& u, const Eigen::Ref<const Vec<T>>& v);

/// Loss of anchor a_i (0-based) against its positive b_i, with every weak
/// and strong view in the batch in the denominator.
template <typename T>
T ntxent_pair(std::size_t i, const Mat<T>& z_a, const Mat<T>& z_b, const ContrastiveConfig& cfg);

template <typename T>
struct NtXentResult {
  T sum{};   // sum over i of L(a_i,b_i) + L(b_i,a_i)
  T mean{};  // sum / 2B; what training minimizes
  Mat<T> grad_a;  // d mean / d z_a
  Mat<T> grad_b;
};

template <typename T>
NtXentResult<T> ntxent_batch(const Mat<T>& z_a, const Mat<T>& z_b, const ContrastiveConfig& cfg,
                             bool with_grad = true);

template <typename T>
struct LossResult {
  T value{};
  Mat<T> grad;  // w.r.t. the (primary) logits / representation input
};

/// Mean negative log-likelihood of softmax(logits) against one-hot rows,
/// probabilities clamped below at 1e-12.
template <typename T>
LossResult<T> cross_entropy(const Mat<T>& logits, const Mat<T>& onehot);
template <typename T>
LossResult<T> cross_entropy(const Mat<T>& logits, std::span<const int> labels);

/// Pseudo-label CE on strong views for samples whose weak-view confidence
/// (softmax(weak / temperature)) reaches `threshold`; normalised by the
/// full batch size, 0 when nothing passes. Gradient w.r.t. strong logits.
template <typename T>
LossResult<T> fixmatch_loss(const Mat<T>& weak_logits, const Mat<T>& strong_logits, double threshold,
                            double temperature = 1.0);

/// Batch-mean KL(softmax(weak / temperature) || softmax(strong)), weak side
/// treated as a constant target. Gradient w.r.t. strong logits.
template <typename T>
LossResult<T> uda_consistency(const Mat<T>& weak_logits, const Mat<T>& strong_logits, double temperature);

template <typename T>
struct PairLossResult {
  T value{};
  Mat<T> grad_a;
  Mat<T> grad_b;
};

/// Elementwise MSE plus (1 - mean cosine similarity) between paired
/// representations. Norms are floored at 1e-8, so a zero column counts as
/// cosine 0.
template <typename T>
PairLossResult<T> cr_consistency(const Mat<T>& repr_a, const Mat<T>& repr_b);

/// (mu / 2) * |local - global|^2 over `groups` (all when empty).
template <typename T>
double fedprox_term(const BasicParameterSet<T>& local, const BasicParameterSet<T>& global, double mu,
                    std::span<const Group> groups = {});
/// Adds mu * (local - global) to `grad` over `groups`.
template <typename T>
void fedprox_grad(const BasicParameterSet<T>& local, const BasicParameterSet<T>& global, double mu,
                  BasicParameterSet<T>& grad, std::span<const Group> groups = {});

/// Numerically stable column-wise softmax.
template <typename T>
Mat<T> softmax_columns(const Mat<T>& logits);

}  // namespace fedssl
