#pragma once

// Synthetic traffic in the NSL-KDD file format: class-conditional feature
// prototypes with overlap and a train/test shift, covering every protocol,
// service and flag value so the encoded width matches the real files.
// Used for tests, smoke runs and benchmarking when the real files are
// not at hand.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedssl/dataset.hpp"

namespace fedssl {

const std::vector<std::string>& nslkdd_protocols();
const std::vector<std::string>& nslkdd_services();
const std::vector<std::string>& nslkdd_flags();

struct SyntheticConfig {
  std::array<std::size_t, kNumClasses> train_counts = {67343, 45927, 11656, 995, 52};
  std::array<std::size_t, kNumClasses> test_counts = {9711, 7458, 2421, 2754, 200};
  double spread = 0.6;      // within-class noise relative to prototype spacing
  double test_shift = 0.25; // prototype drift applied to the test split
  std::uint64_t seed = 7;

  /// Proportionally scaled counts with every class kept non-empty.
  static SyntheticConfig scaled(std::size_t train_total, std::size_t test_total, std::uint64_t seed = 7);
};

struct SyntheticData {
  std::vector<RawRecord> train;
  std::vector<RawRecord> test;
};

/// Requires at least 70 training records so every category value occurs.
SyntheticData make_synthetic(const SyntheticConfig& cfg);

/// Writes records as NSL-KDD CSV rows (41 features, label, difficulty).
void write_nslkdd_file(const std::filesystem::path& path, const std::vector<RawRecord>& records);

}  // namespace fedssl
