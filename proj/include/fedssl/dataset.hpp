#pragma once

// NSL-KDD ingestion, preprocessing and federated partitioning.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedssl/tensor.hpp"

namespace fedssl {

enum class TrafficClass : int { Normal = 0, DoS = 1, Probe = 2, R2L = 3, U2R = 4 };
enum class BinaryClass : int { Normal = 0, Attack = 1 };

inline constexpr int kNumClasses = 5;
inline constexpr int kUnlabeled = -1;

std::string_view class_name(TrafficClass c);
std::string_view class_name(BinaryClass c);
const std::vector<std::string>& class_names();
const std::vector<std::string>& binary_class_names();

/// Maps an NSL-KDD attack name (or "normal") to the 5-class scheme.
/// Throws LabelError for names absent from the taxonomy fixture.
TrafficClass map_class(std::string_view attack_label);
/// Version string recorded in the taxonomy fixture header.
std::string_view taxonomy_version();
/// Full attack -> class table, in fixture order.
const std::vector<std::pair<std::string, TrafficClass>>& taxonomy();

BinaryClass binarize(TrafficClass c);
/// Integer form used on label vectors; kUnlabeled passes through.
int binarize_label(int label);

// Raw record layout: 41 features of which three are categorical.
inline constexpr std::size_t kRawFeatureCount = 41;
inline constexpr std::size_t kNumericFeatureCount = 38;
inline constexpr std::size_t kCategoricalCount = 3;
inline constexpr std::array<std::size_t, kCategoricalCount> kCategoricalColumns = {1, 2, 3};
inline constexpr std::array<std::string_view, kCategoricalCount> kCategoricalNames = {
    "protocol_type", "service", "flag"};

struct RawRecord {
  std::array<double, kNumericFeatureCount> numeric{};
  std::array<std::string, kCategoricalCount> categorical;
  std::string label;
  TrafficClass cls = TrafficClass::Normal;
  int difficulty = 0;
};

/// Parses one NSL-KDD CSV file (41 features, label, difficulty per row).
/// Blank lines are skipped. Throws ParseError naming the 1-based line on
/// a wrong field count or a non-numeric value, and LabelError on an
/// unmapped attack name.
std::vector<RawRecord> load_nslkdd_file(const std::filesystem::path& path);
std::pair<std::vector<RawRecord>, std::vector<RawRecord>> load_nslkdd(
    const std::filesystem::path& train_path, const std::filesystem::path& test_path);

std::array<std::size_t, kNumClasses> class_counts(const std::vector<RawRecord>& records);
std::array<std::size_t, kNumClasses> class_counts(const std::vector<int>& labels);

/// Where the numeric and one-hot parts of a feature vector live. Numeric
/// components come first, then one one-hot block per categorical field.
struct FeatureLayout {
  std::size_t dim = 0;
  std::size_t numeric_count = 0;
  std::vector<std::pair<std::size_t, std::size_t>> onehot_blocks;  // [begin, end)
};

/// Fitted preprocessing state: category inventories and min/max of every
/// numeric column, taken from the training records only.
struct EncoderState {
  std::array<std::vector<std::string>, kCategoricalCount> categories;
  std::array<double, kNumericFeatureCount> min{};
  std::array<double, kNumericFeatureCount> max{};

  std::size_t dim() const;
  FeatureLayout layout() const;
  nlohmann::json to_json() const;
  static EncoderState from_json(const nlohmann::json& j);
};

/// Feature matrix (dim x N, one column per sample) with class labels.
/// Unlabeled data carries kUnlabeled in every slot.
struct LabeledSet {
  MatF x;
  std::vector<int> y;

  std::size_t size() const { return static_cast<std::size_t>(x.cols()); }
  std::size_t dim() const { return static_cast<std::size_t>(x.rows()); }
  LabeledSet subset(const std::vector<std::size_t>& indices) const;
  /// Same samples with 5-class labels collapsed to Normal/Attack.
  LabeledSet binarized() const;
};

/// Fits an encoder on `records` and encodes them.
std::pair<LabeledSet, EncoderState> preprocess(const std::vector<RawRecord>& records);
/// Encodes with an existing state. Categories unseen at fit time become an
/// all-zero one-hot block (warned once per category); numeric values are
/// clipped into [0, 1].
LabeledSet encode(const std::vector<RawRecord>& records, const EncoderState& state);

struct PartitionConfig {
  std::size_t server_labeled_count = 50000;
  std::size_t client_unlabeled_total = 69070;
  int num_clients = 10;
};

struct ClientShard {
  int client_id = 1;  // 1..K
  MatF samples;       // dim x n_k, no labels
  std::vector<std::size_t> source_indices;

  std::size_t n_k() const { return static_cast<std::size_t>(samples.cols()); }
};

/// Index-level partition of the training pool.
struct PartitionIndices {
  std::vector<std::size_t> server;
  std::vector<std::vector<std::size_t>> clients;
  std::vector<std::size_t> discarded;
};

/// Seeded shuffle, class-stratified server draw, then an even IID split of
/// the next `client_unlabeled_total` samples across the clients (remainder
/// handed out one per client from client 1). Leftovers are discarded.
PartitionIndices partition_indices(const std::vector<int>& labels, const PartitionConfig& cfg,
                                   std::uint64_t seed);

struct DatasetSplit {
  LabeledSet server_labeled;
  std::vector<ClientShard> client_shards;
  LabeledSet test_set;
};

DatasetSplit partition(const LabeledSet& train, const PartitionConfig& cfg, std::uint64_t seed,
                       LabeledSet test = {});
DatasetSplit make_split(const LabeledSet& train, const PartitionIndices& idx, LabeledSet test);

/// Everything `prepare` writes: encoded train and test data, the fitted
/// encoder and the partition.
struct PreparedData {
  EncoderState encoder;
  LabeledSet train;
  LabeledSet test;
  PartitionConfig partition_cfg;
  PartitionIndices indices;
  std::uint64_t seed = 0;

  DatasetSplit split() const { return make_split(train, indices, test); }
  FeatureLayout layout() const { return encoder.layout(); }
  /// Checksum over the encoder state; identical across baselines of a suite.
  std::string encoder_checksum() const;
};

PreparedData prepare_dataset(const std::vector<RawRecord>& train_records,
                             const std::vector<RawRecord>& test_records,
                             const PartitionConfig& cfg, std::uint64_t seed);

/// Artifact directory: manifest.json, encoder.json, flat little-endian
/// float32/int32 tensors and partition index files.
void write_prepared(const std::filesystem::path& dir, const PreparedData& data);
PreparedData read_prepared(const std::filesystem::path& dir);

}  // namespace fedssl
