// Command line front end: prepare / train / suite / report, plus the
// augmentation dump and the synthetic data writer.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "fedssl/config.hpp"
#include "fedssl/errors.hpp"
#include "fedssl/pipeline.hpp"
#include "fedssl/synthetic.hpp"

namespace fs = std::filesystem;
using namespace fedssl;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::optional<int> workers;
  bool resume = false;
  std::string out;
  std::string data;  // prepared artifact directory
  std::string log_level = "info";
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_resume) {
  cmd->add_option("--config", f.config, "INI run configuration");
  cmd->add_option("--seed", f.seed, "single seed (overrides the config)");
  cmd->add_option("--seeds", f.seeds, "seed list, e.g. 1-5 or 1,3,7");
  cmd->add_option("--workers", f.workers, "parallel clients (default min(K, cores))");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--log-level", f.log_level, "trace|debug|info|warn|error");
  if (with_resume) cmd->add_flag("--resume", f.resume, "continue from the latest round checkpoint");
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? default_config() : load_config(f.config);
  if (f.seed) {
    cfg.setup.fed.seed = *f.seed;
    cfg.seeds = {*f.seed};
  }
  if (!f.seeds.empty()) cfg.seeds = parse_seed_list(f.seeds);
  const int cores = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  cfg.setup.fed.workers = f.workers ? *f.workers : std::min(cfg.setup.fed.num_clients, cores);
  if (!f.out.empty()) cfg.out_dir = f.out;
  cfg.validate();
  return cfg;
}

PreparedData load_prepared(const CommonFlags& f, const RunConfig& cfg) {
  const fs::path dir = f.data.empty() ? cfg.prepared_dir : fs::path(f.data);
  if (!fs::exists(dir / "manifest.json")) {
    throw ConfigError("no prepared dataset at " + dir.string() + " (run `prepare` first or pass --data)");
  }
  return read_prepared(dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated semi-supervised intrusion detection"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* prepare = app.add_subcommand("prepare", "preprocess and partition the raw NSL-KDD files");
  add_common(prepare, flags, false);
  auto* train = app.add_subcommand("train", "run the federated contrastive method for each seed");
  add_common(train, flags, true);
  train->add_option("--data", flags.data, "prepared dataset directory");
  auto* suite = app.add_subcommand("suite", "run baselines and ablations over the seed list");
  add_common(suite, flags, false);
  suite->add_option("--data", flags.data, "prepared dataset directory");
  std::string methods;
  suite->add_option("--methods", methods, "comma-separated method subset");

  auto* report = app.add_subcommand("report", "render text and plots for a run or suite directory");
  std::string report_dir;
  report->add_option("dir", report_dir, "run, train or suite directory")->required();

  auto* augment = app.add_subcommand("augment", "dump original/weak/strong feature triples as CSV");
  add_common(augment, flags, false);
  augment->add_option("--data", flags.data, "prepared dataset directory");
  std::size_t augment_count = 8;
  augment->add_option("--count", augment_count, "number of samples");

  auto* synth = app.add_subcommand("synth", "write synthetic KDDTrain+.txt / KDDTest+.txt files");
  std::string synth_out = "synthetic";
  std::size_t synth_train = 125973;
  std::size_t synth_test = 22544;
  std::uint64_t synth_seed = 7;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--train", synth_train, "training records");
  synth->add_option("--test", synth_test, "test records");
  synth->add_option("--seed", synth_seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  spdlog::set_level(spdlog::level::from_str(flags.log_level));

  try {
    if (*prepare) {
      RunConfig cfg = resolve(flags);
      const fs::path out = flags.out.empty() ? cfg.prepared_dir : fs::path(flags.out);
      const auto seed = flags.seed ? *flags.seed : cfg.setup.fed.seed;
      const auto data = prepare_command(cfg, seed, out);
      std::cout << "prepared " << out.string() << ": dim " << data.train.dim() << ", server "
                << data.indices.server.size() << ", clients";
      for (const auto& c : data.indices.clients) std::cout << ' ' << c.size();
      std::cout << ", test " << data.test.size() << "\n";
    } else if (*train) {
      RunConfig cfg = resolve(flags);
      const auto data = load_prepared(flags, cfg);
      const auto summary = train_command(cfg, data, cfg.out_dir, flags.resume);
      std::cout << format_report(summary.multiclass, "5-class (seed mean)") << '\n'
                << format_report(summary.binary, "binary (seed mean)");
    } else if (*suite) {
      RunConfig cfg = resolve(flags);
      if (!methods.empty()) {
        cfg.suite_methods.clear();
        std::string item;
        std::istringstream in(methods);
        while (std::getline(in, item, ',')) cfg.suite_methods.push_back(parse_method(item));
      }
      const auto data = load_prepared(flags, cfg);
      const auto result = suite_command(cfg, data, cfg.out_dir);
      std::cout << format_suite(result);
    } else if (*report) {
      std::cout << report_command(report_dir);
    } else if (*augment) {
      RunConfig cfg = resolve(flags);
      const auto data = load_prepared(flags, cfg);
      const fs::path out = flags.out.empty() ? fs::path("augmentations.csv") : fs::path(flags.out);
      dump_augmentations(data, cfg.setup.augment, augment_count, cfg.setup.fed.seed, out);
      std::cout << "wrote " << out.string() << "\n";
    } else if (*synth) {
      const auto cfg = SyntheticConfig::scaled(synth_train, synth_test, synth_seed);
      const auto data = make_synthetic(cfg);
      fs::create_directories(synth_out);
      write_nslkdd_file(fs::path(synth_out) / "KDDTrain+.txt", data.train);
      write_nslkdd_file(fs::path(synth_out) / "KDDTest+.txt", data.test);
      std::cout << "wrote " << data.train.size() << " + " << data.test.size() << " records to " << synth_out << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const TrainingError& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return kExitTraining;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitTraining;
  }
  return kExitOk;
}
