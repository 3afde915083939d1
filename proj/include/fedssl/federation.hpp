#pragma once

// Round orchestration: client updates, FedAvg, EMA fusion of the encoder
// and supervised server fine-tuning, with per-round checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedssl/augment.hpp"
#include "fedssl/dataset.hpp"
#include "fedssl/evaluation.hpp"
#include "fedssl/losses.hpp"
#include "fedssl/model.hpp"
#include "fedssl/optim.hpp"

namespace fedssl {

struct FederationConfig {
  int num_clients = 10;             // K
  int rounds = 10;                  // R_s
  int client_epochs = 5;            // P_c
  std::size_t client_batch = 1024;  // B
  std::size_t server_batch = 128;   // B_S
  double temperature = 0.5;
  bool include_self_term = false;
  double ema_xi = 0.5;
  int server_epochs = 5;
  OptimizerConfig optimizer;  // clients and server alike
  std::uint64_t seed = 0;
  int workers = 1;

  /// Throws ConfigError unless K, R_s, P_c >= 1, batches >= 1,
  /// server epochs >= 0, 0 <= xi <= 1 and temperature, lr > 0.
  void validate() const;
  ContrastiveConfig contrastive() const { return {temperature, include_self_term}; }
};

/// One optimisation step of some objective. Client 0 is the server.
struct LossEvent {
  int round = 0;
  int client = 0;
  int epoch = 0;
  int step = 0;
  std::string loss;
  double value = 0.0;
};

/// Shuffled minibatch index lists covering [0, n). Batches smaller than
/// `min_batch` (only ever the last one) are dropped.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng,
                                                    std::size_t min_batch = 1);
MatF gather_columns(const MatF& x, std::span<const std::size_t> cols);
std::vector<int> gather_labels(const std::vector<int>& y, std::span<const std::size_t> idx);

struct ClientResult {
  ParameterSet params;
  std::vector<LossEvent> trace;
  double final_loss = 0.0;  // mean loss over the last local epoch
};

/// P_c epochs of NT-Xent training of encoder + projector on weak/strong
/// pairs of the shard. The classifier is returned untouched. A batch size
/// above n_k is clamped with a warning.
ClientResult client_update(const Network<float>& net, const ParameterSet& global, const ClientShard& shard,
                           const FeatureLayout& layout, const AugmentationPolicy& policy,
                           const FederationConfig& cfg, Rng& rng);

/// sum_k (n_k / n) params_k over `groups` (all when empty); other entries
/// come from the first set. Throws ShapeError on incongruent sets and
/// ConfigError on an empty list, a count mismatch or a zero count.
template <typename T>
BasicParameterSet<T> fedavg(const std::vector<BasicParameterSet<T>>& params, std::span<const std::size_t> counts,
                            std::span<const Group> groups = {});

/// xi * prev + (1 - xi) * aggregated over `groups` (all when empty); other
/// entries come from `prev`.
template <typename T>
BasicParameterSet<T> ema_update(const BasicParameterSet<T>& prev, const BasicParameterSet<T>& aggregated, double xi,
                                std::span<const Group> groups = {});

struct SupervisedOptions {
  int epochs = 5;
  std::size_t batch = 128;
  OptimizerConfig optimizer;
  std::vector<Group> groups = {Group::encoder, Group::classifier};
  double prox_mu = 0.0;                     // FedProx weight; 0 disables
  const ParameterSet* prox_anchor = nullptr;
};

/// Cross-entropy training of encoder + classifier in place.
std::vector<LossEvent> supervised_train(const Network<float>& net, ParameterSet& params, const LabeledSet& data,
                                        const SupervisedOptions& opt, Rng& rng);

/// supervised_train with the server settings of `cfg`.
std::vector<LossEvent> server_finetune(const Network<float>& net, ParameterSet& params, const LabeledSet& labeled,
                                       const FederationConfig& cfg, Rng& rng);

struct RoundRecord {
  int round = 0;
  std::vector<double> client_losses;
  double server_loss = 0.0;  // mean loss of the last server epoch
  std::string aggregate_checksum;
  std::string global_checksum;
  nlohmann::json metrics;  // {"multiclass", "binary"} after the round; null without a test set
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
  static RoundRecord from_json(const nlohmann::json& j);
};

using ClientFn = std::function<ClientResult(std::size_t client_index, const ParameterSet& global, Rng& rng)>;

/// One federated training recipe. Each round: clients in parallel,
/// weighted averaging of `aggregate_groups`, EMA of `ema_groups` against
/// the previous global model, then optional server training.
struct Protocol {
  std::string name;
  std::size_t num_clients = 0;  // 0 skips the client phase
  ClientFn client;
  std::vector<std::size_t> client_weights;
  std::vector<Group> aggregate_groups;
  std::vector<Group> ema_groups;
  double ema_xi = 0.0;
  const LabeledSet* server_data = nullptr;  // null skips the server phase
  SupervisedOptions server;
};

struct RunOptions {
  int rounds = 10;
  std::uint64_t seed = 0;
  int workers = 1;
  std::filesystem::path run_dir;  // empty: nothing is written
  bool resume = false;
  const LabeledSet* test = nullptr;
  std::vector<std::size_t> reference_counts;  // imbalance-ratio base
  std::size_t embedding_samples = 0;          // >0 stores test embeddings at the end
};

struct TrainingResult {
  ParameterSet params;
  std::vector<RoundRecord> rounds;  // including rounds restored on resume
  std::vector<LossEvent> trace;     // steps executed by this call
  int resumed_from = 0;
  std::optional<EvaluationResult> final_eval;
};

TrainingResult run_protocol(const Network<float>& net, ParameterSet initial, const Protocol& protocol,
                            const RunOptions& options);

struct TrainingSetup {
  ArchitectureSpec arch;
  AugmentationPolicy augment;
  FederationConfig fed;
};

/// Recipe of the contrastive federated method on a prepared split.
Protocol contrastive_protocol(const Network<float>& net, const DatasetSplit& split, const FeatureLayout& layout,
                              const TrainingSetup& setup);

/// Full method: {broadcast, client NT-Xent, FedAvg, EMA, server CE} x R_s.
TrainingResult run_training(const DatasetSplit& split, const FeatureLayout& layout, const TrainingSetup& setup,
                            RunOptions options);

/// Latest round checkpoint below run_dir/checkpoints, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir);
std::filesystem::path round_checkpoint_dir(const std::filesystem::path& run_dir, int round);

void write_loss_csv(const std::filesystem::path& path, std::span<const LossEvent> events, bool append);

}  // namespace fedssl
