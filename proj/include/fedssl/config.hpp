#pragma once

// Run configuration: an INI file with one section per concern. Every key
// is optional and defaults to the reference protocol; unknown sections or
// keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedssl/baselines.hpp"
#include "fedssl/dataset.hpp"
#include "fedssl/federation.hpp"

namespace fedssl {

/// Environment variable naming the directory that holds the raw files.
inline constexpr const char* kDataRootEnv = "FEDSSL_DATA_ROOT";

struct RunConfig {
  std::filesystem::path data_root;  // raw NSL-KDD directory
  std::string train_file = "KDDTrain+.txt";
  std::string test_file = "KDDTest+.txt";
  std::filesystem::path prepared_dir = "prepared";

  PartitionConfig partition;
  TrainingSetup setup;
  BaselineSpec baseline;              // method parameters shared by the suite
  std::vector<Method> suite_methods;  // empty: comparison + ablation rows
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::filesystem::path out_dir = "runs";
  std::size_t embedding_samples = 2000;

  void validate() const;
  std::filesystem::path train_path() const { return data_root / train_file; }
  std::filesystem::path test_path() const { return data_root / test_file; }
};

/// Defaults, with data_root taken from kDataRootEnv when set.
RunConfig default_config();
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& ini_text);
std::string to_ini(const RunConfig& cfg);
void write_config(const std::filesystem::path& path, const RunConfig& cfg);

/// "1,2,5" or "1-5" (inclusive) into a seed list.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace fedssl
