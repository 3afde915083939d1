#include "fedssl/config.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fedssl/errors.hpp"

namespace fedssl {

namespace pt = boost::property_tree;

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string format_conv(const std::vector<ConvLayerSpec>& conv) {
  std::string out;
  for (std::size_t i = 0; i < conv.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(conv[i].out_channels) + ':' + std::to_string(conv[i].kernel) + ':' +
           std::to_string(conv[i].stride) + ':' + std::to_string(conv[i].pool);
  }
  return out;
}

std::vector<ConvLayerSpec> parse_conv(const std::string& text) {
  std::vector<ConvLayerSpec> out;
  for (const auto& block : split(text, ',')) {
    const auto parts = split(block, ':');
    if (parts.size() != 4) throw ConfigError("model.conv blocks are channels:kernel:stride:pool, got '" + block + "'");
    try {
      out.push_back({std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2]), std::stoi(parts[3])});
    } catch (const std::exception&) {
      throw ConfigError("model.conv: non-integer field in '" + block + "'");
    }
  }
  if (out.empty()) throw ConfigError("model.conv needs at least one block");
  return out;
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) out += (i ? "," : "") + std::to_string(seeds[i]);
  return out;
}

// Typed access that records which keys were consumed so leftovers can be
// reported as unknown.
class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  template <typename T>
  void get(const std::string& key, T& target) {
    seen_.insert(key);
    const auto node = tree_.get_child_optional(pt::ptree::path_type(key, '.'));
    if (!node) return;
    try {
      target = node->get_value<T>();
    } catch (const pt::ptree_bad_data&) {
      throw ConfigError("config key '" + key + "' has invalid value '" + node->data() + "'");
    }
  }

  bool get_string(const std::string& key, std::string& target) {
    seen_.insert(key);
    const auto node = tree_.get_child_optional(pt::ptree::path_type(key, '.'));
    if (!node) return false;
    target = node->data();
    return true;
  }

  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty()) throw ConfigError("config key '" + section + "' lies outside any section");
      for (const auto& [key, value] : body) {
        (void)value;
        if (!seen_.count(section + "." + key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
      }
    }
  }

 private:
  const pt::ptree& tree_;
  std::set<std::string> seen_;
};

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& item : split(text, ',')) {
    try {
      const auto dash = item.find('-', 1);
      if (dash != std::string::npos) {
        const auto lo = std::stoull(item.substr(0, dash));
        const auto hi = std::stoull(item.substr(dash + 1));
        if (hi < lo) throw ConfigError("seed range '" + item + "' is descending");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
      } else {
        if (item.find_first_not_of("0123456789") != std::string::npos) throw std::invalid_argument(item);
        seeds.push_back(std::stoull(item));
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("invalid seed '" + item + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  return seeds;
}

RunConfig default_config() {
  RunConfig cfg;
  if (const char* root = std::getenv(kDataRootEnv); root != nullptr && *root) cfg.data_root = root;
  return cfg;
}

void RunConfig::validate() const {
  setup.fed.validate();
  setup.augment.validate();
  setup.arch.validate();
  baseline.validate();
  if (partition.num_clients != setup.fed.num_clients) {
    throw ConfigError("partition client count differs from federation client count");
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
}

RunConfig parse_config(const std::string& ini_text) {
  pt::ptree tree;
  try {
    std::istringstream in(ini_text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig cfg = default_config();
  Reader r(tree);
  std::string text;

  if (r.get_string("data.root", text)) cfg.data_root = text;
  r.get("data.train_file", cfg.train_file);
  r.get("data.test_file", cfg.test_file);
  if (r.get_string("data.prepared_dir", text)) cfg.prepared_dir = text;

  r.get("partition.server_labeled_count", cfg.partition.server_labeled_count);
  r.get("partition.client_unlabeled_total", cfg.partition.client_unlabeled_total);

  auto& fed = cfg.setup.fed;
  r.get("federation.clients", fed.num_clients);
  r.get("federation.rounds", fed.rounds);
  r.get("federation.client_epochs", fed.client_epochs);
  r.get("federation.client_batch", fed.client_batch);
  r.get("federation.server_batch", fed.server_batch);
  r.get("federation.server_epochs", fed.server_epochs);
  r.get("federation.temperature", fed.temperature);
  r.get("federation.include_self_term", fed.include_self_term);
  r.get("federation.ema_xi", fed.ema_xi);
  r.get("federation.learning_rate", fed.optimizer.learning_rate);
  if (r.get_string("federation.optimizer", text)) fed.optimizer.kind = parse_optimizer(text);
  r.get("federation.momentum", fed.optimizer.momentum);
  r.get("federation.seed", fed.seed);
  r.get("federation.workers", fed.workers);
  cfg.partition.num_clients = fed.num_clients;

  auto& arch = cfg.setup.arch;
  r.get("model.input_dim", arch.input_dim);
  if (r.get_string("model.conv", text)) arch.conv = parse_conv(text);
  r.get("model.embedding_dim", arch.embedding_dim);
  r.get("model.projection_hidden", arch.projection_hidden);
  r.get("model.projection_dim", arch.projection_dim);
  r.get("model.projection_bn", arch.projection_bn_count);
  r.get("model.dropout", arch.dropout_rate);
  r.get("model.num_classes", arch.num_classes);
  r.get("model.param_budget", arch.param_budget);

  auto& aug = cfg.setup.augment;
  r.get("augment.enabled", aug.enabled);
  r.get("augment.weak_sigma_low", aug.weak_sigma_low);
  r.get("augment.weak_sigma_high", aug.weak_sigma_high);
  r.get("augment.strong_sigma_low", aug.strong_sigma_low);
  r.get("augment.strong_sigma_high", aug.strong_sigma_high);
  r.get("augment.strong_mask_fraction", aug.strong_mask_fraction);
  r.get("augment.clip_to_unit", aug.clip_to_unit);

  r.get("baselines.prox_mu", cfg.baseline.prox_mu);
  r.get("baselines.fixmatch_threshold", cfg.baseline.fixmatch_threshold);
  r.get("baselines.fixmatch_temperature", cfg.baseline.fixmatch_temperature);
  r.get("baselines.uda_temperature", cfg.baseline.uda_temperature);
  if (r.get_string("baselines.methods", text)) {
    cfg.suite_methods.clear();
    for (const auto& m : split(text, ',')) cfg.suite_methods.push_back(parse_method(m));
  }

  if (r.get_string("run.seeds", text)) cfg.seeds = parse_seed_list(text);
  if (r.get_string("run.out", text)) cfg.out_dir = text;
  r.get("run.embedding_samples", cfg.embedding_samples);

  r.reject_unknown();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string to_ini(const RunConfig& cfg) {
  pt::ptree t;
  t.put("data.root", cfg.data_root.string());
  t.put("data.train_file", cfg.train_file);
  t.put("data.test_file", cfg.test_file);
  t.put("data.prepared_dir", cfg.prepared_dir.string());

  t.put("partition.server_labeled_count", cfg.partition.server_labeled_count);
  t.put("partition.client_unlabeled_total", cfg.partition.client_unlabeled_total);

  const auto& fed = cfg.setup.fed;
  t.put("federation.clients", fed.num_clients);
  t.put("federation.rounds", fed.rounds);
  t.put("federation.client_epochs", fed.client_epochs);
  t.put("federation.client_batch", fed.client_batch);
  t.put("federation.server_batch", fed.server_batch);
  t.put("federation.server_epochs", fed.server_epochs);
  t.put("federation.temperature", fed.temperature);
  t.put("federation.include_self_term", fed.include_self_term);
  t.put("federation.ema_xi", fed.ema_xi);
  t.put("federation.learning_rate", fed.optimizer.learning_rate);
  t.put("federation.optimizer", std::string(optimizer_name(fed.optimizer.kind)));
  t.put("federation.momentum", fed.optimizer.momentum);
  t.put("federation.seed", fed.seed);
  t.put("federation.workers", fed.workers);

  const auto& arch = cfg.setup.arch;
  t.put("model.input_dim", arch.input_dim);
  t.put("model.conv", format_conv(arch.conv));
  t.put("model.embedding_dim", arch.embedding_dim);
  t.put("model.projection_hidden", arch.projection_hidden);
  t.put("model.projection_dim", arch.projection_dim);
  t.put("model.projection_bn", arch.projection_bn_count);
  t.put("model.dropout", arch.dropout_rate);
  t.put("model.num_classes", arch.num_classes);
  t.put("model.param_budget", arch.param_budget);

  const auto& aug = cfg.setup.augment;
  t.put("augment.enabled", aug.enabled);
  t.put("augment.weak_sigma_low", aug.weak_sigma_low);
  t.put("augment.weak_sigma_high", aug.weak_sigma_high);
  t.put("augment.strong_sigma_low", aug.strong_sigma_low);
  t.put("augment.strong_sigma_high", aug.strong_sigma_high);
  t.put("augment.strong_mask_fraction", aug.strong_mask_fraction);
  t.put("augment.clip_to_unit", aug.clip_to_unit);

  t.put("baselines.prox_mu", cfg.baseline.prox_mu);
  t.put("baselines.fixmatch_threshold", cfg.baseline.fixmatch_threshold);
  t.put("baselines.fixmatch_temperature", cfg.baseline.fixmatch_temperature);
  t.put("baselines.uda_temperature", cfg.baseline.uda_temperature);
  std::string methods;
  for (std::size_t i = 0; i < cfg.suite_methods.size(); ++i) {
    methods += (i ? "," : "") + std::string(method_slug(cfg.suite_methods[i]));
  }
  if (!methods.empty()) t.put("baselines.methods", methods);

  t.put("run.seeds", join_seeds(cfg.seeds));
  t.put("run.out", cfg.out_dir.string());
  t.put("run.embedding_samples", cfg.embedding_samples);

  std::ostringstream out;
  pt::write_ini(out, t);
  return out.str();
}

void write_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file " + path.string());
  out << to_ini(cfg);
}

}  // namespace fedssl
