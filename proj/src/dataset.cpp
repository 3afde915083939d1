#include "fedssl/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "fedssl/errors.hpp"
#include "fedssl/io.hpp"
#include "fedssl/rng.hpp"

namespace fedssl {

namespace detail {
extern const char* const kTaxonomyCsv;
}

namespace {

constexpr std::size_t kFieldCount = kRawFeatureCount + 2;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

TrafficClass parse_class_name(std::string_view name) {
  for (int c = 0; c < kNumClasses; ++c) {
    if (class_name(static_cast<TrafficClass>(c)) == name) return static_cast<TrafficClass>(c);
  }
  throw DataError("taxonomy fixture names unknown class '" + std::string(name) + "'");
}

struct Taxonomy {
  std::string version;
  std::vector<std::pair<std::string, TrafficClass>> entries;
  std::map<std::string, TrafficClass, std::less<>> lookup;
};

const Taxonomy& taxonomy_table() {
  static const Taxonomy table = [] {
    Taxonomy t;
    std::istringstream in(detail::kTaxonomyCsv);
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
      std::string_view v = trim(line);
      if (v.empty()) continue;
      if (v.front() == '#') {
        constexpr std::string_view key = "# version:";
        if (v.starts_with(key)) t.version = std::string(trim(v.substr(key.size())));
        continue;
      }
      if (!header_seen) {
        header_seen = true;
        continue;
      }
      const auto comma = v.find(',');
      std::string attack(trim(v.substr(0, comma)));
      TrafficClass cls = parse_class_name(trim(v.substr(comma + 1)));
      t.entries.emplace_back(attack, cls);
      t.lookup.emplace(std::move(attack), cls);
    }
    return t;
  }();
  return table;
}

double parse_double(std::string_view field, std::size_t line) {
  double value = 0.0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ParseError(line, "expected a number, got '" + std::string(field) + "'");
  }
  return value;
}

}  // namespace

std::string_view class_name(TrafficClass c) {
  switch (c) {
    case TrafficClass::Normal: return "Normal";
    case TrafficClass::DoS: return "DoS";
    case TrafficClass::Probe: return "Probe";
    case TrafficClass::R2L: return "R2L";
    case TrafficClass::U2R: return "U2R";
  }
  return "?";
}

std::string_view class_name(BinaryClass c) { return c == BinaryClass::Normal ? "Normal" : "Attack"; }

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = {"Normal", "DoS", "Probe", "R2L", "U2R"};
  return names;
}

const std::vector<std::string>& binary_class_names() {
  static const std::vector<std::string> names = {"Normal", "Attack"};
  return names;
}

TrafficClass map_class(std::string_view attack_label) {
  const auto& table = taxonomy_table().lookup;
  auto it = table.find(attack_label);
  if (it == table.end()) throw LabelError(std::string(attack_label));
  return it->second;
}

std::string_view taxonomy_version() { return taxonomy_table().version; }

const std::vector<std::pair<std::string, TrafficClass>>& taxonomy() { return taxonomy_table().entries; }

BinaryClass binarize(TrafficClass c) {
  return c == TrafficClass::Normal ? BinaryClass::Normal : BinaryClass::Attack;
}

int binarize_label(int label) {
  if (label == kUnlabeled) return kUnlabeled;
  return static_cast<int>(binarize(static_cast<TrafficClass>(label)));
}

std::vector<RawRecord> load_nslkdd_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());

  std::vector<RawRecord> records;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string_view> fields;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view rest = trim(line);
    if (rest.empty()) continue;

    fields.clear();
    for (std::size_t comma; (comma = rest.find(',')) != std::string_view::npos; rest.remove_prefix(comma + 1)) {
      fields.push_back(trim(rest.substr(0, comma)));
    }
    fields.push_back(trim(rest));
    if (fields.size() != kFieldCount) {
      throw ParseError(line_no, "expected " + std::to_string(kFieldCount) + " fields, got " +
                                    std::to_string(fields.size()));
    }

    RawRecord r;
    std::size_t numeric = 0;
    std::size_t categorical = 0;
    for (std::size_t i = 0; i < kRawFeatureCount; ++i) {
      if (categorical < kCategoricalCount && kCategoricalColumns[categorical] == i) {
        r.categorical[categorical++] = std::string(fields[i]);
      } else {
        r.numeric[numeric++] = parse_double(fields[i], line_no);
      }
    }
    r.label = std::string(fields[kRawFeatureCount]);
    r.cls = map_class(r.label);
    r.difficulty = static_cast<int>(parse_double(fields[kRawFeatureCount + 1], line_no));
    records.push_back(std::move(r));
  }
  return records;
}

std::pair<std::vector<RawRecord>, std::vector<RawRecord>> load_nslkdd(
    const std::filesystem::path& train_path, const std::filesystem::path& test_path) {
  return {load_nslkdd_file(train_path), load_nslkdd_file(test_path)};
}

std::array<std::size_t, kNumClasses> class_counts(const std::vector<RawRecord>& records) {
  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& r : records) ++counts[static_cast<int>(r.cls)];
  return counts;
}

std::array<std::size_t, kNumClasses> class_counts(const std::vector<int>& labels) {
  std::array<std::size_t, kNumClasses> counts{};
  for (int y : labels) {
    if (y >= 0 && y < kNumClasses) ++counts[y];
  }
  return counts;
}

// --- preprocessing ---------------------------------------------------------

std::size_t EncoderState::dim() const {
  std::size_t d = kNumericFeatureCount;
  for (const auto& c : categories) d += c.size();
  return d;
}

FeatureLayout EncoderState::layout() const {
  FeatureLayout l;
  l.numeric_count = kNumericFeatureCount;
  std::size_t pos = kNumericFeatureCount;
  for (const auto& c : categories) {
    l.onehot_blocks.emplace_back(pos, pos + c.size());
    pos += c.size();
  }
  l.dim = pos;
  return l;
}

nlohmann::json EncoderState::to_json() const {
  nlohmann::json j;
  for (std::size_t i = 0; i < kCategoricalCount; ++i) j["categories"][std::string(kCategoricalNames[i])] = categories[i];
  j["numeric_min"] = min;
  j["numeric_max"] = max;
  j["dim"] = dim();
  return j;
}

EncoderState EncoderState::from_json(const nlohmann::json& j) {
  EncoderState s;
  try {
    for (std::size_t i = 0; i < kCategoricalCount; ++i) {
      s.categories[i] = j.at("categories").at(std::string(kCategoricalNames[i])).get<std::vector<std::string>>();
    }
    s.min = j.at("numeric_min").get<std::array<double, kNumericFeatureCount>>();
    s.max = j.at("numeric_max").get<std::array<double, kNumericFeatureCount>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed encoder state: ") + e.what());
  }
  return s;
}

LabeledSet LabeledSet::subset(const std::vector<std::size_t>& indices) const {
  LabeledSet out;
  out.x.resize(x.rows(), static_cast<Eigen::Index>(indices.size()));
  out.y.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.x.col(static_cast<Eigen::Index>(i)) = x.col(static_cast<Eigen::Index>(indices[i]));
    out.y[i] = y[indices[i]];
  }
  return out;
}

LabeledSet LabeledSet::binarized() const {
  LabeledSet out{x, y};
  for (int& v : out.y) v = binarize_label(v);
  return out;
}

LabeledSet encode(const std::vector<RawRecord>& records, const EncoderState& state) {
  const FeatureLayout layout = state.layout();
  std::array<std::map<std::string, std::size_t, std::less<>>, kCategoricalCount> index;
  for (std::size_t i = 0; i < kCategoricalCount; ++i) {
    for (std::size_t k = 0; k < state.categories[i].size(); ++k) index[i].emplace(state.categories[i][k], k);
  }

  LabeledSet out;
  out.x = MatF::Zero(static_cast<Eigen::Index>(layout.dim), static_cast<Eigen::Index>(records.size()));
  out.y.resize(records.size());
  std::set<std::string> warned;
  for (std::size_t n = 0; n < records.size(); ++n) {
    const RawRecord& r = records[n];
    auto col = out.x.col(static_cast<Eigen::Index>(n));
    for (std::size_t f = 0; f < kNumericFeatureCount; ++f) {
      const double span = state.max[f] - state.min[f];
      double v = span > 0.0 ? (r.numeric[f] - state.min[f]) / span : 0.0;
      col(static_cast<Eigen::Index>(f)) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    for (std::size_t i = 0; i < kCategoricalCount; ++i) {
      auto it = index[i].find(r.categorical[i]);
      if (it == index[i].end()) {
        std::string key = std::string(kCategoricalNames[i]) + "=" + r.categorical[i];
        if (warned.insert(key).second) spdlog::warn("category {} unseen during fit; encoded as zeros", key);
        continue;
      }
      col(static_cast<Eigen::Index>(layout.onehot_blocks[i].first + it->second)) = 1.0f;
    }
    out.y[n] = static_cast<int>(r.cls);
  }
  return out;
}

std::pair<LabeledSet, EncoderState> preprocess(const std::vector<RawRecord>& records) {
  if (records.empty()) throw DataError("cannot fit preprocessing on an empty record list");
  EncoderState state;
  state.min.fill(std::numeric_limits<double>::infinity());
  state.max.fill(-std::numeric_limits<double>::infinity());
  std::array<std::set<std::string>, kCategoricalCount> seen;
  for (const auto& r : records) {
    for (std::size_t f = 0; f < kNumericFeatureCount; ++f) {
      state.min[f] = std::min(state.min[f], r.numeric[f]);
      state.max[f] = std::max(state.max[f], r.numeric[f]);
    }
    for (std::size_t i = 0; i < kCategoricalCount; ++i) seen[i].insert(r.categorical[i]);
  }
  for (std::size_t i = 0; i < kCategoricalCount; ++i) state.categories[i].assign(seen[i].begin(), seen[i].end());
  LabeledSet encoded = encode(records, state);
  return {std::move(encoded), std::move(state)};
}

// --- partitioning ----------------------------------------------------------

PartitionIndices partition_indices(const std::vector<int>& labels, const PartitionConfig& cfg,
                                   std::uint64_t seed) {
  const std::size_t pool = labels.size();
  if (cfg.num_clients < 1) throw ConfigError("num_clients must be >= 1");
  if (cfg.server_labeled_count + cfg.client_unlabeled_total > pool) {
    throw ConfigError("partition needs " + std::to_string(cfg.server_labeled_count) + " + " +
                      std::to_string(cfg.client_unlabeled_total) + " samples but the training pool has " +
                      std::to_string(pool));
  }
  if (cfg.client_unlabeled_total < static_cast<std::size_t>(cfg.num_clients)) {
    throw ConfigError("every client needs at least one sample");
  }

  std::vector<std::size_t> order(pool);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, {stream::kPartition});
  std::shuffle(order.begin(), order.end(), rng);

  // Largest-remainder allocation of the server quota across classes.
  const auto counts = class_counts(labels);
  std::array<std::size_t, kNumClasses> quota{};
  std::array<double, kNumClasses> remainder{};
  std::size_t assigned = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const double exact = static_cast<double>(counts[c]) * static_cast<double>(cfg.server_labeled_count) /
                         static_cast<double>(pool);
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - std::floor(exact);
    assigned += quota[c];
  }
  std::array<int, kNumClasses> by_remainder{0, 1, 2, 3, 4};
  std::stable_sort(by_remainder.begin(), by_remainder.end(),
                   [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < cfg.server_labeled_count; i = (i + 1) % kNumClasses) {
    const int c = by_remainder[i];
    if (quota[c] < counts[c]) {
      ++quota[c];
      ++assigned;
    }
  }

  PartitionIndices out;
  std::vector<std::size_t> rest;
  rest.reserve(pool);
  std::array<std::size_t, kNumClasses> taken{};
  for (std::size_t idx : order) {
    const int c = labels[idx];
    if (c >= 0 && c < kNumClasses && taken[c] < quota[c]) {
      ++taken[c];
      out.server.push_back(idx);
    } else {
      rest.push_back(idx);
    }
  }

  const std::size_t k = static_cast<std::size_t>(cfg.num_clients);
  const std::size_t base = cfg.client_unlabeled_total / k;
  const std::size_t extra = cfg.client_unlabeled_total % k;
  out.clients.resize(k);
  std::size_t pos = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t n = base + (c < extra ? 1 : 0);
    out.clients[c].assign(rest.begin() + static_cast<std::ptrdiff_t>(pos),
                          rest.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
  }
  out.discarded.assign(rest.begin() + static_cast<std::ptrdiff_t>(pos), rest.end());
  return out;
}

DatasetSplit make_split(const LabeledSet& train, const PartitionIndices& idx, LabeledSet test) {
  DatasetSplit split;
  split.server_labeled = train.subset(idx.server);
  for (std::size_t c = 0; c < idx.clients.size(); ++c) {
    ClientShard shard;
    shard.client_id = static_cast<int>(c) + 1;
    shard.samples = train.subset(idx.clients[c]).x;
    shard.source_indices = idx.clients[c];
    split.client_shards.push_back(std::move(shard));
  }
  split.test_set = std::move(test);
  return split;
}

DatasetSplit partition(const LabeledSet& train, const PartitionConfig& cfg, std::uint64_t seed,
                       LabeledSet test) {
  return make_split(train, partition_indices(train.y, cfg, seed), std::move(test));
}

std::string PreparedData::encoder_checksum() const {
  const std::string text = encoder.to_json().dump();
  return fnv1a_hex(std::as_bytes(std::span(text.data(), text.size())));
}

PreparedData prepare_dataset(const std::vector<RawRecord>& train_records,
                             const std::vector<RawRecord>& test_records, const PartitionConfig& cfg,
                             std::uint64_t seed) {
  PreparedData data;
  auto [train, state] = preprocess(train_records);
  data.train = std::move(train);
  data.encoder = std::move(state);
  if (!test_records.empty()) data.test = encode(test_records, data.encoder);
  data.partition_cfg = cfg;
  data.seed = seed;
  data.indices = partition_indices(data.train.y, cfg, seed);
  return data;
}

// --- artifact I/O ------------------------------------------------------------

namespace {

std::vector<std::uint64_t> widen(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }
std::vector<std::size_t> narrow(const std::vector<std::uint64_t>& v) { return {v.begin(), v.end()}; }

void write_set(const std::filesystem::path& dir, const std::string& stem, const LabeledSet& s) {
  write_array<float>(dir / (stem + "_x.f32"), std::span<const float>(s.x.data(), static_cast<std::size_t>(s.x.size())));
  std::vector<std::int32_t> y(s.y.begin(), s.y.end());
  write_array<std::int32_t>(dir / (stem + "_y.i32"), y);
}

LabeledSet read_set(const std::filesystem::path& dir, const std::string& stem, std::size_t dim, std::size_t n) {
  LabeledSet s;
  auto x = read_array<float>(dir / (stem + "_x.f32"));
  auto y = read_array<std::int32_t>(dir / (stem + "_y.i32"));
  if (x.size() != dim * n || y.size() != n) throw DataError("artifact tensor '" + stem + "' has the wrong size");
  s.x = Eigen::Map<MatF>(x.data(), static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
  s.y.assign(y.begin(), y.end());
  return s;
}

}  // namespace

void write_prepared(const std::filesystem::path& dir, const PreparedData& data) {
  std::filesystem::create_directories(dir);
  write_json(dir / "encoder.json", data.encoder.to_json());
  write_set(dir, "train", data.train);
  write_set(dir, "test", data.test);
  write_array<std::uint64_t>(dir / "server_idx.u64", widen(data.indices.server));
  for (std::size_t c = 0; c < data.indices.clients.size(); ++c) {
    write_array<std::uint64_t>(dir / ("client_" + std::to_string(c + 1) + "_idx.u64"), widen(data.indices.clients[c]));
  }

  nlohmann::json m;
  m["format"] = "fedssl-dataset-v1";
  m["dim"] = data.encoder.dim();
  m["seed"] = data.seed;
  m["taxonomy_version"] = std::string(taxonomy_version());
  m["train_count"] = data.train.size();
  m["test_count"] = data.test.size();
  m["server_labeled_count"] = data.indices.server.size();
  m["client_unlabeled_total"] = data.partition_cfg.client_unlabeled_total;
  m["num_clients"] = data.partition_cfg.num_clients;
  std::vector<std::size_t> shard_sizes;
  for (const auto& c : data.indices.clients) shard_sizes.push_back(c.size());
  m["client_shard_sizes"] = shard_sizes;
  m["discarded_count"] = data.indices.discarded.size();
  m["train_class_counts"] = class_counts(data.train.y);
  m["test_class_counts"] = class_counts(data.test.y);
  m["encoder_checksum"] = data.encoder_checksum();
  m["train_checksum"] = checksum_of<float>(std::span<const float>(data.train.x.data(), static_cast<std::size_t>(data.train.x.size())));
  write_json(dir / "manifest.json", m);
}

PreparedData read_prepared(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw DataError("no dataset artifact at " + dir.string() + " (run `prepare` first)");
  }
  const auto m = read_json(dir / "manifest.json");
  PreparedData data;
  try {
    data.encoder = EncoderState::from_json(read_json(dir / "encoder.json"));
    const std::size_t dim = m.at("dim").get<std::size_t>();
    if (dim != data.encoder.dim()) throw DataError("manifest dimension disagrees with encoder state");
    data.seed = m.at("seed").get<std::uint64_t>();
    data.train = read_set(dir, "train", dim, m.at("train_count").get<std::size_t>());
    data.test = read_set(dir, "test", dim, m.at("test_count").get<std::size_t>());
    data.partition_cfg.server_labeled_count = m.at("server_labeled_count").get<std::size_t>();
    data.partition_cfg.client_unlabeled_total = m.at("client_unlabeled_total").get<std::size_t>();
    data.partition_cfg.num_clients = m.at("num_clients").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed dataset manifest: ") + e.what());
  }
  data.indices.server = narrow(read_array<std::uint64_t>(dir / "server_idx.u64"));
  for (int c = 0; c < data.partition_cfg.num_clients; ++c) {
    data.indices.clients.push_back(
        narrow(read_array<std::uint64_t>(dir / ("client_" + std::to_string(c + 1) + "_idx.u64"))));
  }
  std::vector<char> used(data.train.size(), 0);
  auto mark = [&](const std::vector<std::size_t>& v) {
    for (auto i : v) {
      if (i >= used.size() || used[i]) throw DataError("partition indices are out of range or overlap");
      used[i] = 1;
    }
  };
  mark(data.indices.server);
  for (const auto& c : data.indices.clients) mark(c);
  for (std::size_t i = 0; i < used.size(); ++i) {
    if (!used[i]) data.indices.discarded.push_back(i);
  }
  return data;
}

}  // namespace fedssl
