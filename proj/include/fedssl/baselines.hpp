#pragma once

// Comparison methods and ablations on the shared data/model/evaluation
// stack, plus the multi-seed suite runner.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedssl/dataset.hpp"
#include "fedssl/evaluation.hpp"
#include "fedssl/federation.hpp"

namespace fedssl {

enum class Method {
  sfedavg_ad,
  sfedprox_ad,
  csl_sd,
  csl_ad,
  fedavg_cr,
  fedprox_cr,
  feduda,
  fedavg_fixmatch,
  fedprox_fixmatch,
  contrastive_fedssl,
  ablation_no_aug_dropout,
  ablation_no_contrastive,
  ablation_no_ema,
};

/// Table label, e.g. "FedAvg+Fixmatch".
std::string_view method_label(Method m);
/// Filesystem/config identifier, e.g. "fedavg_fixmatch".
std::string_view method_slug(Method m);
/// Accepts a slug or a label. Throws ConfigError otherwise.
Method parse_method(std::string_view name);

/// The ten comparison rows, supervised first.
const std::vector<Method>& comparison_methods();
/// Full method followed by the three ablations.
const std::vector<Method>& ablation_methods();

enum class DataRegime {
  all_labeled_federated,  // every training sample, labeled, split across clients
  server_only,            // centralized supervised training
  all_labeled_central,
  semi_supervised,        // unlabeled client shards + labeled server split
};
DataRegime regime_of(Method m);

struct BaselineSpec {
  Method method = Method::contrastive_fedssl;
  double prox_mu = 0.01;
  double fixmatch_threshold = 0.95;
  double fixmatch_temperature = 1.0;
  double uda_temperature = 0.4;

  void validate() const;
  std::string label() const { return std::string(method_label(method)); }
};

struct BaselineResult {
  TrainingResult training;
  EvaluationResult eval;
};

/// Trains one method for one seed (setup.fed.seed) and evaluates it on the
/// test split. Throws ConfigError when the data does not fit the regime.
BaselineResult run_baseline(const BaselineSpec& spec, const PreparedData& data, const TrainingSetup& setup,
                            RunOptions options = {});

/// Client shards of the full labeled training set for the supervised
/// federated baselines: a seeded shuffle split evenly across `clients`.
std::vector<LabeledSet> labeled_client_shards(const LabeledSet& train, int clients, std::uint64_t seed);

struct SuiteRun {
  std::uint64_t seed = 0;
  std::optional<EvaluationResult> eval;
  std::string error;  // non-empty when the run failed
};

struct SuiteRow {
  BaselineSpec spec;
  std::vector<SuiteRun> runs;
  std::optional<MetricsReport> multiclass;  // seed average of successful runs
  std::optional<MetricsReport> binary;
};

struct SuiteResult {
  std::vector<SuiteRow> rows;
  std::vector<std::uint64_t> seeds;
  std::string encoder_checksum;
};

struct SuiteOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::vector<std::size_t> reference_counts;
};

/// Runs every spec for every seed; a failed run is recorded and the suite
/// moves on. Writes suite.csv, suite.txt and suite.json into out_dir.
SuiteResult run_suite(const std::vector<BaselineSpec>& specs, const std::vector<std::uint64_t>& seeds,
                      const PreparedData& data, const TrainingSetup& setup, const SuiteOptions& options);

/// Text table: one row per spec, Acc / Pre / Recall / F1 per view.
std::string format_suite(const SuiteResult& suite);
void write_suite(const std::filesystem::path& dir, const SuiteResult& suite);

}  // namespace fedssl
