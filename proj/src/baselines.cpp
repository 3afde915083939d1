#include "fedssl/baselines.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "fedssl/errors.hpp"
#include "fedssl/io.hpp"

namespace fedssl {

namespace {

struct MethodInfo {
  Method method;
  std::string_view label;
  std::string_view slug;
  DataRegime regime;
};

constexpr std::array<MethodInfo, 13> kMethods = {{
    {Method::sfedavg_ad, "SFedAvg_AD", "sfedavg_ad", DataRegime::all_labeled_federated},
    {Method::sfedprox_ad, "SFedProx_AD", "sfedprox_ad", DataRegime::all_labeled_federated},
    {Method::csl_sd, "CSL_SD", "csl_sd", DataRegime::server_only},
    {Method::csl_ad, "CSL_AD", "csl_ad", DataRegime::all_labeled_central},
    {Method::fedavg_cr, "FedAvg+CR", "fedavg_cr", DataRegime::semi_supervised},
    {Method::fedprox_cr, "FedProx+CR", "fedprox_cr", DataRegime::semi_supervised},
    {Method::feduda, "FedUDA", "feduda", DataRegime::semi_supervised},
    {Method::fedavg_fixmatch, "FedAvg+Fixmatch", "fedavg_fixmatch", DataRegime::semi_supervised},
    {Method::fedprox_fixmatch, "FedProx+Fixmatch", "fedprox_fixmatch", DataRegime::semi_supervised},
    {Method::contrastive_fedssl, "ContrastiveFedSSL", "contrastive_fedssl", DataRegime::semi_supervised},
    {Method::ablation_no_aug_dropout, "w/o Augs+Dropout", "ablation_no_aug_dropout", DataRegime::semi_supervised},
    {Method::ablation_no_contrastive, "w/o Latent Contrastive", "ablation_no_contrastive", DataRegime::server_only},
    {Method::ablation_no_ema, "w/o EMA", "ablation_no_ema", DataRegime::semi_supervised},
}};

const MethodInfo& info(Method m) {
  for (const auto& i : kMethods) {
    if (i.method == m) return i;
  }
  throw ConfigError("unknown method");
}

enum class Consistency { cr, uda, fixmatch };

bool uses_prox(Method m) {
  return m == Method::sfedprox_ad || m == Method::fedprox_cr || m == Method::fedprox_fixmatch;
}

// Self-supervised client objective of the semi-supervised baselines. Both
// views go through one encoder pass; only the strong view receives
// gradient from the pseudo-label objectives.
ClientResult consistency_client_update(const Network<float>& net, const ParameterSet& global,
                                       const ClientShard& shard, const FeatureLayout& layout,
                                       const AugmentationPolicy& policy, const FederationConfig& cfg,
                                       const BaselineSpec& spec, Consistency kind, Rng& rng) {
  const std::size_t n = shard.n_k();
  if (n == 0) throw DataError("client " + std::to_string(shard.client_id) + " has an empty shard");
  ClientResult out{global, {}, 0.0};
  const std::size_t batch = std::min(cfg.client_batch, n);
  const std::vector<Group> groups = {Group::encoder, Group::classifier};
  const double mu = uses_prox(spec.method) ? spec.prox_mu : 0.0;
  Optimizer opt(cfg.optimizer, groups);
  ParameterSet grad(global.layout_ptr());
  ParameterSet& p = out.params;
  const char* name = kind == Consistency::cr ? "cr" : (kind == Consistency::uda ? "uda" : "fixmatch");
  int step = 0;
  std::vector<double> epoch_losses;
  for (int epoch = 1; epoch <= cfg.client_epochs; ++epoch) {
    epoch_losses.clear();
    for (const auto& idx : epoch_batches(n, batch, rng, 2)) {
      const MatF x = gather_columns(shard.samples, idx);
      const auto pairs = make_pairs(x, policy, layout, rng);
      const Eigen::Index b = static_cast<Eigen::Index>(pairs.size());
      MatF views(x.rows(), 2 * b);
      views << pairs.a, pairs.b;
      EncoderCache<float> ec;
      const MatF h = net.encode(p, views, Mode::train, &rng, &ec);
      grad.set_zero();
      double value = 0.0;
      MatF dh;
      if (kind == Consistency::cr) {
        const auto loss = cr_consistency<float>(h.leftCols(b), h.rightCols(b));
        value = loss.value;
        dh.resize(h.rows(), 2 * b);
        dh << loss.grad_a, loss.grad_b;
      } else {
        const MatF logits = net.classify(p, h);
        const auto loss = kind == Consistency::uda
                              ? uda_consistency<float>(logits.leftCols(b), logits.rightCols(b), spec.uda_temperature)
                              : fixmatch_loss<float>(logits.leftCols(b), logits.rightCols(b), spec.fixmatch_threshold,
                                                     spec.fixmatch_temperature);
        value = loss.value;
        MatF dlogits = MatF::Zero(logits.rows(), 2 * b);
        dlogits.rightCols(b) = loss.grad;
        dh = net.classify_backward(p, h, dlogits, grad);
      }
      net.encode_backward(p, ec, dh, grad);
      if (mu > 0.0) {
        value += fedprox_term(p, global, mu, groups);
        fedprox_grad(p, global, mu, grad, groups);
      }
      if (!std::isfinite(value)) throw TrainingError(std::string(name) + " loss became non-finite");
      opt.step(p, grad);
      out.trace.push_back({0, shard.client_id, epoch, ++step, name, value});
      epoch_losses.push_back(value);
    }
  }
  if (!epoch_losses.empty()) {
    out.final_loss = std::accumulate(epoch_losses.begin(), epoch_losses.end(), 0.0) / epoch_losses.size();
  }
  return out;
}

}  // namespace

std::string_view method_label(Method m) { return info(m).label; }
std::string_view method_slug(Method m) { return info(m).slug; }
DataRegime regime_of(Method m) { return info(m).regime; }

Method parse_method(std::string_view name) {
  for (const auto& i : kMethods) {
    if (name == i.slug || name == i.label) return i.method;
  }
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

const std::vector<Method>& comparison_methods() {
  static const std::vector<Method> methods = {
      Method::sfedavg_ad, Method::sfedprox_ad,     Method::csl_sd,           Method::csl_ad,
      Method::fedavg_cr,  Method::fedprox_cr,      Method::feduda,           Method::fedavg_fixmatch,
      Method::fedprox_fixmatch, Method::contrastive_fedssl};
  return methods;
}

const std::vector<Method>& ablation_methods() {
  static const std::vector<Method> methods = {Method::contrastive_fedssl, Method::ablation_no_aug_dropout,
                                              Method::ablation_no_contrastive, Method::ablation_no_ema};
  return methods;
}

void BaselineSpec::validate() const {
  if (uses_prox(method) && !(prox_mu > 0.0)) throw ConfigError("FedProx variants need prox_mu > 0");
  if (!(fixmatch_threshold > 0.0 && fixmatch_threshold <= 1.0)) throw ConfigError("fixmatch threshold must be in (0, 1]");
  if (!(fixmatch_temperature > 0.0) || !(uda_temperature > 0.0)) throw ConfigError("temperatures must be positive");
}

std::vector<LabeledSet> labeled_client_shards(const LabeledSet& train, int clients, std::uint64_t seed) {
  if (clients < 1) throw ConfigError("need at least one client");
  const std::size_t n = train.size();
  if (n < static_cast<std::size_t>(clients)) throw ConfigError("fewer training samples than clients");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, {stream::kPartition, 1});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<LabeledSet> shards;
  const std::size_t base = n / clients;
  const std::size_t extra = n % clients;
  std::size_t start = 0;
  for (int k = 0; k < clients; ++k) {
    const std::size_t size = base + (static_cast<std::size_t>(k) < extra ? 1 : 0);
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(start + size));
    shards.push_back(train.subset(idx));
    start += size;
  }
  return shards;
}

BaselineResult run_baseline(const BaselineSpec& spec, const PreparedData& data, const TrainingSetup& base_setup,
                            RunOptions options) {
  spec.validate();
  TrainingSetup setup = base_setup;
  if (spec.method == Method::ablation_no_aug_dropout) {
    setup.augment.enabled = false;
    setup.arch.dropout_rate = 0.0;
  }
  if (spec.method == Method::ablation_no_ema) setup.fed.ema_xi = 0.0;
  setup.fed.validate();
  setup.augment.validate();
  setup.arch.validate();
  if (setup.arch.input_dim != static_cast<int>(data.train.dim())) {
    throw ConfigError("architecture input_dim " + std::to_string(setup.arch.input_dim) + " does not match data dim " +
                      std::to_string(data.train.dim()));
  }
  const auto& fed = setup.fed;
  const Network<float> net(setup.arch);
  const DatasetSplit split = data.split();
  const FeatureLayout layout = data.layout();
  options.rounds = fed.rounds;
  options.seed = fed.seed;
  options.workers = fed.workers;
  if (options.test == nullptr) options.test = &split.test_set;
  if (options.test->size() == 0) throw ConfigError("baseline evaluation needs a test split");

  Protocol protocol;
  std::vector<LabeledSet> labeled_shards;
  const DataRegime regime = regime_of(spec.method);
  const std::vector<Group> supervised_groups = {Group::encoder, Group::classifier};

  auto server_phase = [&](const LabeledSet* set) {
    protocol.server_data = set;
    protocol.server.epochs = fed.server_epochs;
    protocol.server.batch = fed.server_batch;
    protocol.server.optimizer = fed.optimizer;
  };

  switch (regime) {
    case DataRegime::all_labeled_federated: {
      labeled_shards = labeled_client_shards(data.train, fed.num_clients, fed.seed);
      protocol.num_clients = labeled_shards.size();
      for (const auto& s : labeled_shards) protocol.client_weights.push_back(s.size());
      const double mu = uses_prox(spec.method) ? spec.prox_mu : 0.0;
      protocol.client = [&net, &labeled_shards, &fed, mu](std::size_t c, const ParameterSet& global, Rng& rng) {
        ClientResult r{global, {}, 0.0};
        SupervisedOptions opt;
        opt.epochs = fed.client_epochs;
        opt.batch = fed.server_batch;
        opt.optimizer = fed.optimizer;
        opt.prox_mu = mu;
        opt.prox_anchor = &global;
        r.trace = supervised_train(net, r.params, labeled_shards[c], opt, rng);
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& e : r.trace) {
          if (e.epoch == opt.epochs) {
            sum += e.value;
            ++count;
          }
        }
        r.final_loss = count ? sum / static_cast<double>(count) : 0.0;
        return r;
      };
      protocol.aggregate_groups = supervised_groups;
      break;
    }
    case DataRegime::server_only:
      if (split.server_labeled.size() == 0) throw ConfigError(spec.label() + " needs the labeled server split");
      server_phase(&split.server_labeled);
      break;
    case DataRegime::all_labeled_central:
      server_phase(&data.train);
      break;
    case DataRegime::semi_supervised: {
      if (split.client_shards.empty() || split.server_labeled.size() == 0) {
        throw ConfigError(spec.label() + " needs unlabeled client shards and a labeled server split");
      }
      if (spec.method == Method::contrastive_fedssl || spec.method == Method::ablation_no_aug_dropout ||
          spec.method == Method::ablation_no_ema) {
        protocol = contrastive_protocol(net, split, layout, setup);
        break;
      }
      const Consistency kind = (spec.method == Method::feduda) ? Consistency::uda
                               : (spec.method == Method::fedavg_cr || spec.method == Method::fedprox_cr)
                                   ? Consistency::cr
                                   : Consistency::fixmatch;
      protocol.num_clients = split.client_shards.size();
      for (const auto& s : split.client_shards) protocol.client_weights.push_back(s.n_k());
      protocol.client = [&net, &split, layout, policy = setup.augment, &fed, spec, kind](
                            std::size_t c, const ParameterSet& global, Rng& rng) {
        return consistency_client_update(net, global, split.client_shards[c], layout, policy, fed, spec, kind, rng);
      };
      protocol.aggregate_groups = supervised_groups;
      server_phase(&split.server_labeled);
      break;
    }
  }
  protocol.name = spec.label();

  BaselineResult result;
  result.training = run_protocol(net, build(setup.arch, fed.seed), protocol, options);
  result.eval = result.training.final_eval ? *result.training.final_eval
                                           : evaluate(net, result.training.params, *options.test, options.reference_counts);
  return result;
}

SuiteResult run_suite(const std::vector<BaselineSpec>& specs, const std::vector<std::uint64_t>& seeds,
                      const PreparedData& data, const TrainingSetup& setup, const SuiteOptions& options) {
  if (specs.empty()) throw ConfigError("suite needs at least one method");
  if (seeds.empty()) throw ConfigError("suite needs at least one seed");
  if (seeds.size() < 5) spdlog::warn("suite averages over {} seeds; at least 5 are recommended", seeds.size());
  SuiteResult suite;
  suite.seeds = seeds;
  suite.encoder_checksum = data.encoder_checksum();
  const DatasetSplit split = data.split();

  for (const auto& spec : specs) {
    SuiteRow row;
    row.spec = spec;
    std::vector<MetricsReport> multi;
    std::vector<MetricsReport> binary;
    for (auto seed : seeds) {
      SuiteRun run;
      run.seed = seed;
      TrainingSetup s = setup;
      s.fed.seed = seed;
      RunOptions ro;
      ro.reference_counts = options.reference_counts;
      if (!options.out_dir.empty()) {
        ro.run_dir = options.out_dir / std::string(method_slug(spec.method)) / ("seed_" + std::to_string(seed));
      }
      try {
        spdlog::info("suite: {} seed {}", spec.label(), seed);
        auto r = run_baseline(spec, data, s, ro);
        multi.push_back(r.eval.multiclass);
        binary.push_back(r.eval.binary);
        run.eval = std::move(r.eval);
      } catch (const std::exception& e) {
        run.error = e.what();
        spdlog::error("suite: {} seed {} failed: {}", spec.label(), seed, e.what());
      }
      row.runs.push_back(std::move(run));
    }
    if (!multi.empty()) {
      row.multiclass = average_reports(multi);
      row.binary = average_reports(binary);
    }
    suite.rows.push_back(std::move(row));
    if (!options.out_dir.empty()) write_suite(options.out_dir, suite);
  }
  return suite;
}

std::string format_suite(const SuiteResult& suite) {
  std::ostringstream out;
  char line[256];
  out << "seeds:";
  for (auto s : suite.seeds) out << ' ' << s;
  out << "\n";
  std::snprintf(line, sizeof line, "%-24s | %7s %7s %7s %7s | %7s %7s %7s %7s | %s\n", "Method", "Acc", "Pre", "Recall",
                "F1", "bAcc", "bPre", "bRecall", "bF1", "runs");
  out << line;
  for (const auto& row : suite.rows) {
    std::size_t ok = 0;
    for (const auto& r : row.runs) ok += r.error.empty() ? 1 : 0;
    if (row.multiclass) {
      const auto& m = *row.multiclass;
      const auto& b = *row.binary;
      std::snprintf(line, sizeof line, "%-24s | %7.2f %7.2f %7.2f %7.2f | %7.2f %7.2f %7.2f %7.2f | %zu/%zu\n",
                    row.spec.label().c_str(), m.accuracy, m.weighted.precision, m.weighted.recall, m.weighted.f1,
                    b.accuracy, b.weighted.precision, b.weighted.recall, b.weighted.f1, ok, row.runs.size());
    } else {
      std::snprintf(line, sizeof line, "%-24s | %31s | %31s | %zu/%zu\n", row.spec.label().c_str(), "failed", "failed",
                    ok, row.runs.size());
    }
    out << line;
  }
  return out.str();
}

void write_suite(const std::filesystem::path& dir, const SuiteResult& suite) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream csv(dir / "suite.csv");
    if (!csv) throw DataError("cannot write suite.csv");
    csv << "method,view,accuracy,precision,recall,f1,runs_ok,runs_total\n";
    char line[256];
    for (const auto& row : suite.rows) {
      std::size_t ok = 0;
      for (const auto& r : row.runs) ok += r.error.empty() ? 1 : 0;
      for (const auto& [view, report] : {std::pair{"multiclass", &row.multiclass}, std::pair{"binary", &row.binary}}) {
        if (report->has_value()) {
          const auto& m = **report;
          std::snprintf(line, sizeof line, "%s,%s,%.4f,%.4f,%.4f,%.4f,%zu,%zu\n", row.spec.label().c_str(), view,
                        m.accuracy, m.weighted.precision, m.weighted.recall, m.weighted.f1, ok, row.runs.size());
        } else {
          std::snprintf(line, sizeof line, "%s,%s,,,,,%zu,%zu\n", row.spec.label().c_str(), view, ok, row.runs.size());
        }
        csv << line;
      }
    }
  }
  {
    std::ofstream txt(dir / "suite.txt");
    txt << format_suite(suite);
  }
  nlohmann::json j;
  j["seeds"] = suite.seeds;
  j["encoder_checksum"] = suite.encoder_checksum;
  for (const auto& row : suite.rows) {
    nlohmann::json r = {{"method", row.spec.label()}, {"slug", method_slug(row.spec.method)}};
    for (const auto& run : row.runs) {
      nlohmann::json rr = {{"seed", run.seed}};
      if (run.eval) {
        rr["multiclass"] = run.eval->multiclass.to_json();
        rr["binary"] = run.eval->binary.to_json();
      } else {
        rr["error"] = run.error;
      }
      r["runs"].push_back(rr);
    }
    if (row.multiclass) {
      r["multiclass"] = row.multiclass->to_json();
      r["binary"] = row.binary->to_json();
    }
    j["rows"].push_back(r);
  }
  write_json(dir / "suite.json", j);
}

}  // namespace fedssl
