#include "fedssl/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <spdlog/spdlog.h>

#include "fedssl/augment.hpp"
#include "fedssl/errors.hpp"
#include "fedssl/io.hpp"

namespace fedssl {

namespace fs = std::filesystem;

std::vector<std::size_t> reference_counts(const PreparedData& data) {
  const auto train = class_counts(data.train.y);
  const auto test = class_counts(data.test.y);
  std::vector<std::size_t> out(kNumClasses);
  for (int c = 0; c < kNumClasses; ++c) out[c] = train[c] + test[c];
  return out;
}

PreparedData prepare_command(const RunConfig& cfg, std::uint64_t seed, const fs::path& out_dir) {
  if (cfg.data_root.empty()) {
    throw ConfigError(std::string("no dataset root: set data.root in the config or ") + kDataRootEnv);
  }
  for (const auto& path : {cfg.train_path(), cfg.test_path()}) {
    if (!fs::is_regular_file(path)) throw ConfigError("raw data file not found: " + path.string());
  }
  auto [train, test] = load_nslkdd(cfg.train_path(), cfg.test_path());
  spdlog::info("loaded {} training and {} test records", train.size(), test.size());
  PreparedData data = prepare_dataset(train, test, cfg.partition, seed);
  write_prepared(out_dir, data);
  RunConfig copy = cfg;
  copy.setup.fed.seed = seed;
  write_config(out_dir / "config.ini", copy);
  return data;
}

void write_evaluation(const fs::path& dir, const EvaluationResult& eval, const nlohmann::json& extra) {
  fs::create_directories(dir);
  nlohmann::json j = extra;
  j["multiclass"] = eval.multiclass.to_json();
  j["binary"] = eval.binary.to_json();
  write_json(dir / "report.json", j);
  write_report_csv(dir / "metrics_multiclass.csv", eval.multiclass);
  write_report_csv(dir / "metrics_binary.csv", eval.binary);
  write_confusion_csv(dir / "confusion_multiclass.csv", eval.multiclass.cm);
  write_confusion_csv(dir / "confusion_binary.csv", eval.binary.cm);
  std::ofstream txt(dir / "report.txt");
  txt << format_report(eval.multiclass, "5-class") << '\n' << format_report(eval.binary, "binary");
}

namespace {

void require_input_dim(const ArchitectureSpec& arch, const PreparedData& data) {
  if (arch.input_dim != static_cast<int>(data.train.dim())) {
    throw ConfigError("model.input_dim is " + std::to_string(arch.input_dim) + " but the prepared data has width " +
                      std::to_string(data.train.dim()));
  }
}

}  // namespace

TrainSummary train_command(const RunConfig& cfg, const PreparedData& data, const fs::path& out_dir, bool resume) {
  cfg.validate();
  require_input_dim(cfg.setup.arch, data);
  if (static_cast<int>(data.indices.clients.size()) != cfg.setup.fed.num_clients) {
    throw ConfigError("prepared data has " + std::to_string(data.indices.clients.size()) +
                      " client shards, config expects " + std::to_string(cfg.setup.fed.num_clients));
  }
  const DatasetSplit split = data.split();
  const FeatureLayout layout = data.layout();
  const auto refs = reference_counts(data);
  TrainSummary summary;
  summary.seeds = cfg.seeds;
  std::vector<MetricsReport> multi;
  std::vector<MetricsReport> binary;
  for (auto seed : cfg.seeds) {
    RunConfig run_cfg = cfg;
    run_cfg.setup.fed.seed = seed;
    run_cfg.seeds = {seed};
    const fs::path run_dir = out_dir / ("seed_" + std::to_string(seed));
    fs::create_directories(run_dir);
    write_config(run_dir / "config.ini", run_cfg);

    RunOptions options;
    options.run_dir = run_dir;
    options.resume = resume;
    options.reference_counts = refs;
    options.embedding_samples = cfg.embedding_samples;
    auto result = run_training(split, layout, run_cfg.setup, options);
    const auto& eval = *result.final_eval;

    const Network<float> net(run_cfg.setup.arch);
    const auto latency = measure_latency(net, result.params, split.test_set.x, 16, 20);
    const auto last = latest_checkpoint(run_dir);
    nlohmann::json extra = {{"method", "ContrastiveFedSSL"},
                            {"seed", seed},
                            {"rounds", result.rounds.size()},
                            {"latency_ms_per_sample", latency.ms_per_sample},
                            {"params", count_params(run_cfg.setup.arch)},
                            {"flops", count_flops(run_cfg.setup.arch)},
                            {"checkpoint_bytes", last ? checkpoint_bytes(*last) : 0},
                            {"final_checksum", result.params.checksum()},
                            {"encoder_checksum", data.encoder_checksum()}};
    write_evaluation(run_dir, eval, extra);
    spdlog::info("seed {}: acc {:.2f} f1 {:.2f} | binary acc {:.2f}", seed, eval.multiclass.accuracy,
                 eval.multiclass.weighted.f1, eval.binary.accuracy);
    if (summary.per_seed.empty()) summary.latency_ms = latency.ms_per_sample;
    multi.push_back(eval.multiclass);
    binary.push_back(eval.binary);
    summary.per_seed.push_back(eval);
  }
  summary.multiclass = average_reports(multi);
  summary.binary = average_reports(binary);
  if (cfg.seeds.size() > 1) {
    write_evaluation(out_dir, {summary.multiclass, summary.binary},
                     {{"method", "ContrastiveFedSSL"}, {"seeds", cfg.seeds}, {"latency_ms_per_sample", summary.latency_ms}});
  }
  return summary;
}

SuiteResult suite_command(const RunConfig& cfg, const PreparedData& data, const fs::path& out_dir) {
  cfg.validate();
  require_input_dim(cfg.setup.arch, data);
  std::vector<Method> methods = cfg.suite_methods;
  if (methods.empty()) {
    methods = comparison_methods();
    for (auto m : ablation_methods()) {
      if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
    }
  }
  std::vector<BaselineSpec> specs;
  for (auto m : methods) {
    BaselineSpec s = cfg.baseline;
    s.method = m;
    specs.push_back(s);
  }
  fs::create_directories(out_dir);
  write_config(out_dir / "config.ini", cfg);
  SuiteOptions options;
  options.out_dir = out_dir;
  options.reference_counts = reference_counts(data);
  return run_suite(specs, cfg.seeds, data, cfg.setup, options);
}

namespace {

// Per-round mean of each loss name from losses.csv.
std::map<std::string, std::vector<double>> round_loss_means(const fs::path& path) {
  std::map<std::string, std::map<int, std::pair<double, int>>> acc;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string round, client, epoch, step, name, value;
    if (!std::getline(row, round, ',') || !std::getline(row, client, ',') || !std::getline(row, epoch, ',') ||
        !std::getline(row, step, ',') || !std::getline(row, name, ',') || !std::getline(row, value, ',')) {
      continue;
    }
    auto& slot = acc[name][std::stoi(round)];
    slot.first += std::stod(value);
    slot.second += 1;
  }
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, rounds] : acc) {
    for (const auto& [r, s] : rounds) out[name].push_back(s.first / s.second);
  }
  return out;
}

}  // namespace

std::string report_command(const fs::path& dir) {
  if (fs::exists(dir / "suite.json")) {
    std::ifstream in(dir / "suite.txt");
    std::ostringstream text;
    text << in.rdbuf();
    return text.str();
  }
  if (!fs::exists(dir / "report.json")) throw DataError("no report.json or suite.json in " + dir.string());
  const auto j = read_json(dir / "report.json");
  const auto multi = MetricsReport::from_json(j.at("multiclass"));
  const auto binary = MetricsReport::from_json(j.at("binary"));
  std::ostringstream text;
  text << format_report(multi, "5-class") << '\n' << format_report(binary, "binary");
  if (j.contains("latency_ms_per_sample")) {
    char line[96];
    std::snprintf(line, sizeof line, "latency %.4f ms/sample (batch 16, 20 trials)\n",
                  j["latency_ms_per_sample"].get<double>());
    text << line;
  }
  if (j.contains("params")) {
    text << "params " << j["params"].get<std::size_t>() << ", flops " << j["flops"].get<std::size_t>()
         << ", checkpoint " << j["checkpoint_bytes"].get<std::size_t>() << " bytes\n";
  }
  write_confusion_heatmap(dir / "confusion_multiclass.ppm", multi.cm);
  write_confusion_heatmap(dir / "confusion_binary.ppm", binary.cm);

  if (fs::exists(dir / "losses.csv")) {
    const auto curves = round_loss_means(dir / "losses.csv");
    std::vector<std::vector<double>> series;
    text << "loss curves (per-round means):";
    for (const auto& [name, values] : curves) {
      text << ' ' << name;
      series.push_back(values);
    }
    text << '\n';
    if (!series.empty()) write_line_plot(dir / "loss_curves.ppm", series);
  }
  if (fs::exists(dir / "embeddings.f32")) {
    const auto shape = read_json(dir / "embeddings.json");
    const auto values = read_array<float>(dir / "embeddings.f32");
    const auto labels = read_array<int>(dir / "embedding_labels.i32");
    const auto rows = shape.at("rows").get<Eigen::Index>();
    const auto cols = shape.at("cols").get<Eigen::Index>();
    if (static_cast<std::size_t>(rows * cols) != values.size() || static_cast<std::size_t>(cols) != labels.size()) {
      throw DataError("embedding files are inconsistent");
    }
    const MatD emb = Eigen::Map<const MatF>(values.data(), rows, cols).cast<double>();
    write_scatter(dir / "embedding_scatter.ppm", pca_2d(emb), labels);
    text << "embedding scatter: " << cols << " test samples\n";
  }
  std::ofstream(dir / "report.txt") << text.str();
  return text.str();
}

void dump_augmentations(const PreparedData& data, const AugmentationPolicy& policy, std::size_t count,
                        std::uint64_t seed, const fs::path& path) {
  policy.validate();
  if (data.train.size() == 0) throw DataError("no training samples to augment");
  count = std::min(count, data.train.size());
  Rng rng = make_rng(seed, {stream::kEval, 7});
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  const MatF x = data.train.subset(idx).x;
  const auto pairs = make_pairs(x, policy, data.layout(), rng);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "sample,view,feature,value\n";
  char line[96];
  for (Eigen::Index s = 0; s < x.cols(); ++s) {
    for (const auto& [view, m] : {std::pair{"original", &x}, std::pair{"weak", &pairs.a}, std::pair{"strong", &pairs.b}}) {
      for (Eigen::Index f = 0; f < x.rows(); ++f) {
        std::snprintf(line, sizeof line, "%ld,%s,%ld,%.6g\n", static_cast<long>(s), view, static_cast<long>(f),
                      static_cast<double>((*m)(f, s)));
        out << line;
      }
    }
  }
}

}  // namespace fedssl
