#pragma once

// End-to-end operations behind the command line and the Python module.
//
// Run directory layout (one per seed):
//   config.ini          exact configuration of the run
//   checkpoints/        round_XXXX/{manifest.json, tensors.f32}
//   losses.csv          one row per optimisation step
//   rounds.jsonl        one RoundRecord per line
//   report.json / .txt  final metrics, latency and model budget
//   metrics_*.csv, confusion_*.csv

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedssl/baselines.hpp"
#include "fedssl/config.hpp"
#include "fedssl/dataset.hpp"
#include "fedssl/evaluation.hpp"

namespace fedssl {

/// Per-class totals over train + test: the imbalance-ratio base.
std::vector<std::size_t> reference_counts(const PreparedData& data);

/// Loads the raw files named by `cfg`, preprocesses and partitions them
/// with `seed` and writes the artifact to `out_dir`. Missing raw files are
/// a configuration error.
PreparedData prepare_command(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir);

struct TrainSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<EvaluationResult> per_seed;
  MetricsReport multiclass;  // seed average
  MetricsReport binary;
  double latency_ms = 0.0;   // of the first seed's model
};

/// One run of the full method per seed under out_dir/seed_<s>; averaged
/// report in out_dir when more than one seed is given.
TrainSummary train_command(const RunConfig& cfg, const PreparedData& data, const std::filesystem::path& out_dir,
                           bool resume);

/// Comparison and ablation rows (cfg.suite_methods, or all of them).
SuiteResult suite_command(const RunConfig& cfg, const PreparedData& data, const std::filesystem::path& out_dir);

/// Renders text, heatmaps, loss curves and (when embeddings were stored)
/// a 2-D scatter for a run, averaged-train or suite directory. Returns the
/// text report.
std::string report_command(const std::filesystem::path& dir);

/// Writes original / weak / strong triples of `count` training samples as
/// long-format CSV (sample, view, feature, value).
void dump_augmentations(const PreparedData& data, const AugmentationPolicy& policy, std::size_t count,
                        std::uint64_t seed, const std::filesystem::path& path);

void write_evaluation(const std::filesystem::path& dir, const EvaluationResult& eval, const nlohmann::json& extra);

}  // namespace fedssl
