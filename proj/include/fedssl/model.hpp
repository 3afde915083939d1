#pragma once

// Lightweight 1D-CNN encoder, projection head and classification head.
//
// All three sub-models share one flat parameter vector (ParameterSet) so
// that FedAvg and EMA reduce to elementwise arithmetic on contiguous
// ranges. Weight tensors are stored column-major as (rows, cols) matrices;
// conv weights are (out_channels, kernel * in_channels) with column index
// k * in_channels + c.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedssl/rng.hpp"
#include "fedssl/tensor.hpp"

namespace fedssl {

enum class Group : int { encoder = 0, projector = 1, classifier = 2 };
inline constexpr int kNumGroups = 3;
std::string_view group_name(Group g);

struct ConvLayerSpec {
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int pool = 2;  // max-pool window and stride; 1 disables pooling

  bool operator==(const ConvLayerSpec&) const = default;
};

struct ArchitectureSpec {
  int input_dim = 122;
  std::vector<ConvLayerSpec> conv = {{16, 3, 1, 2}, {24, 3, 1, 2}};
  int embedding_dim = 64;
  int projection_hidden = 64;
  int projection_dim = 32;
  int projection_bn_count = 0;  // 0, 1 or 2 batch-norm layers in the projector
  double dropout_rate = 0.2;    // applied to the embedding in training mode
  int num_classes = 5;
  std::size_t param_budget = 55000;

  /// Throws ConfigError on non-positive sizes, a sequence length that
  /// collapses to zero, or an out-of-range dropout / BN count.
  void validate() const;
  /// Sequence length after each conv block (conv then pool).
  std::vector<int> block_lengths() const;
  /// Width of the flattened conv output feeding the embedding layer.
  int flat_dim() const;

  nlohmann::json to_json() const;
  static ArchitectureSpec from_json(const nlohmann::json& j);
  bool operator==(const ArchitectureSpec&) const = default;
};

struct TensorInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  Group group = Group::encoder;

  std::size_t size() const { return rows * cols; }
};

/// Named tensor inventory of an architecture. Tensors of one group are
/// contiguous, groups ordered encoder, projector, classifier.
class ParameterLayout {
 public:
  explicit ParameterLayout(const ArchitectureSpec& arch);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& find(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t total() const { return total_; }
  /// [begin, end) offsets of a group.
  std::pair<std::size_t, std::size_t> range(Group g) const { return ranges_[static_cast<int>(g)]; }

  bool operator==(const ParameterLayout& other) const;

 private:
  std::vector<TensorInfo> tensors_;
  std::array<std::pair<std::size_t, std::size_t>, kNumGroups> ranges_{};
  std::size_t total_ = 0;
};

/// Flat named parameter storage for one model instance. Value type: copies
/// are deep, the layout is shared.
template <typename T>
class BasicParameterSet {
 public:
  BasicParameterSet() = default;
  explicit BasicParameterSet(std::shared_ptr<const ParameterLayout> layout)
      : layout_(std::move(layout)), data_(layout_->total(), T(0)) {}

  const ParameterLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParameterLayout>& layout_ptr() const { return layout_; }
  bool empty() const { return !layout_; }
  std::size_t size() const { return data_.size(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::span<T> tensor(std::string_view name);
  std::span<const T> tensor(std::string_view name) const;
  std::span<T> group(Group g);
  std::span<const T> group(Group g) const;

  Eigen::Map<Mat<T>> matrix(std::string_view name);
  Eigen::Map<const Mat<T>> matrix(std::string_view name) const;

  /// True when both sets come from the same architecture.
  bool congruent(const BasicParameterSet& other) const;
  /// Throws ShapeError naming `what` when the sets are not congruent.
  void require_congruent(const BasicParameterSet& other, std::string_view what) const;

  void set_zero() { std::fill(data_.begin(), data_.end(), T(0)); }
  std::string checksum() const;

  template <typename U>
  BasicParameterSet<U> cast() const {
    BasicParameterSet<U> out(layout_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.values()[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::shared_ptr<const ParameterLayout> layout_;
  std::vector<T> data_;
};

using ParameterSet = BasicParameterSet<float>;

/// Elementwise a*x + b*y (computed in double) over the groups in `groups`;
/// entries outside those groups are copied from x.
template <typename T>
BasicParameterSet<T> linear_combination(double a, const BasicParameterSet<T>& x, double b,
                                        const BasicParameterSet<T>& y,
                                        std::span<const Group> groups = {});

/// Copies the given groups from `src` into `dst`.
template <typename T>
void copy_groups(const BasicParameterSet<T>& src, BasicParameterSet<T>& dst, std::span<const Group> groups);

/// Initialized parameters (uniform fan-in, deterministic in `seed`).
/// Throws ConfigError when the trainable count exceeds arch.param_budget.
ParameterSet build(const ArchitectureSpec& arch, std::uint64_t seed);

std::size_t linear_params(std::size_t in, std::size_t out);
std::size_t conv1d_params(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);

/// Trainable parameters of encoder, projector and classifier together.
std::size_t count_params(const ArchitectureSpec& arch);
std::size_t count_params(const ArchitectureSpec& arch, Group g);
/// FLOPs of one single-sample inference pass (encoder + classifier). A
/// multiply-add counts as 2; bias adds, activations and pooling are free.
std::size_t count_flops(const ArchitectureSpec& arch);
std::size_t count_flops(const ArchitectureSpec& arch, Group g);

enum class Mode { eval, train };

template <typename T>
struct ConvCache {
  Mat<T> cols;                        // im2col of the block input
  Mat<T> act;                         // post-ReLU conv output
  std::vector<Eigen::Index> argmax;   // flat index into act per pooled value
  int in_length = 0;
  int out_length = 0;
};

template <typename T>
struct EncoderCache {
  std::vector<ConvCache<T>> conv;
  Mat<T> flat;
  Mat<T> hidden;  // post-ReLU embedding before dropout
  Mat<T> dropout_mask;
  int batch = 0;
};

template <typename T>
struct BatchNormCache {
  Mat<T> xhat;
  Vec<T> inv_std;
};

template <typename T>
struct ProjectorCache {
  Mat<T> input;
  Mat<T> pre0;     // first linear output
  Mat<T> hidden;   // post (BN) ReLU
  std::vector<BatchNormCache<T>> bn;
};

/// Stateless forward/backward evaluator for one architecture. Backward
/// passes accumulate into `grad` and return the gradient w.r.t. the input
/// of the head.
template <typename T>
class Network {
 public:
  explicit Network(ArchitectureSpec arch);

  const ArchitectureSpec& arch() const { return arch_; }
  const std::shared_ptr<const ParameterLayout>& layout() const { return layout_; }

  /// (input_dim x N) -> (embedding_dim x N). Dropout needs `rng` in train mode.
  Mat<T> encode(const BasicParameterSet<T>& p, const Mat<T>& x, Mode mode, Rng* rng = nullptr,
                EncoderCache<T>* cache = nullptr) const;
  void encode_backward(const BasicParameterSet<T>& p, const EncoderCache<T>& cache, const Mat<T>& d_out,
                       BasicParameterSet<T>& grad) const;

  /// Projection MLP. With batch norm, statistics always come from the
  /// batch, so at least two samples are required.
  Mat<T> project(const BasicParameterSet<T>& p, const Mat<T>& emb, ProjectorCache<T>* cache = nullptr) const;
  Mat<T> project_backward(const BasicParameterSet<T>& p, const ProjectorCache<T>& cache, const Mat<T>& d_out,
                          BasicParameterSet<T>& grad) const;

  /// Raw logits; softmax is left to losses and metrics.
  Mat<T> classify(const BasicParameterSet<T>& p, const Mat<T>& emb) const;
  Mat<T> classify_backward(const BasicParameterSet<T>& p, const Mat<T>& emb, const Mat<T>& d_out,
                           BasicParameterSet<T>& grad) const;

 private:
  ArchitectureSpec arch_;
  std::shared_ptr<const ParameterLayout> layout_;
  std::vector<int> lengths_;
};

/// Argmax class per column of `logits`.
std::vector<int> argmax_columns(const MatF& logits);

/// Inference in fixed-size batches; returns predicted class per sample.
std::vector<int> predict(const Network<float>& net, const ParameterSet& p, const MatF& x,
                         std::size_t batch_size = 1024);

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int round = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// Checkpoint directory: manifest.json (architecture, tensor inventory,
/// metadata, checksum) and tensors.f32 (little-endian float32 values).
void write_checkpoint(const std::filesystem::path& dir, const ParameterSet& p, const ArchitectureSpec& arch,
                      const CheckpointMeta& meta);
struct Checkpoint {
  ParameterSet params;
  ArchitectureSpec arch;
  CheckpointMeta meta;
};
Checkpoint read_checkpoint(const std::filesystem::path& dir);
/// Total bytes of the files in a checkpoint directory.
std::size_t checkpoint_bytes(const std::filesystem::path& dir);

}  // namespace fedssl
