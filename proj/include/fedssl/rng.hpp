#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedssl {

using Rng = std::mt19937_64;

/// Independent generator for a (seed, stream...) tuple. Every random
/// consumer in a run derives its own stream so results do not depend on
/// scheduling order.
Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {});

// Stream tags.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kPartition = 2;
inline constexpr std::uint64_t kClient = 3;
inline constexpr std::uint64_t kServer = 4;
inline constexpr std::uint64_t kEval = 5;
}  // namespace stream

}  // namespace fedssl
