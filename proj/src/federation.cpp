#include "fedssl/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "fedssl/errors.hpp"
#include "fedssl/io.hpp"

namespace fedssl {

namespace fs = std::filesystem;

void FederationConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("federation: " + what); };
  if (num_clients < 1) fail("client count must be >= 1");
  if (rounds < 1) fail("rounds must be >= 1");
  if (client_epochs < 1) fail("client epochs must be >= 1");
  if (client_batch < 1 || server_batch < 1) fail("batch sizes must be >= 1");
  if (server_epochs < 0) fail("server epochs must be >= 0");
  if (!(ema_xi >= 0.0 && ema_xi <= 1.0)) fail("ema_xi must lie in [0, 1]");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (!(optimizer.learning_rate > 0.0)) fail("learning rate must be positive");
  if (workers < 1) fail("workers must be >= 1");
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng,
                                                    std::size_t min_batch) {
  if (batch == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t stop = std::min(n, start + batch);
    if (stop - start < min_batch) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return out;
}

MatF gather_columns(const MatF& x, std::span<const std::size_t> cols) {
  MatF out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = x.col(static_cast<Eigen::Index>(cols[i]));
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& y, std::span<const std::size_t> idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = y[idx[i]];
  return out;
}

namespace {

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw TrainingError(what + " became non-finite");
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

ClientResult client_update(const Network<float>& net, const ParameterSet& global, const ClientShard& shard,
                           const FeatureLayout& layout, const AugmentationPolicy& policy,
                           const FederationConfig& cfg, Rng& rng) {
  const std::size_t n = shard.n_k();
  if (n == 0) throw DataError("client " + std::to_string(shard.client_id) + " has an empty shard");
  ClientResult out{global, {}, 0.0};
  if (cfg.client_epochs <= 0) return out;

  std::size_t batch = cfg.client_batch;
  if (batch > n) {
    spdlog::warn("client {}: batch size {} exceeds shard size {}, clamping", shard.client_id, batch, n);
    batch = n;
  }
  const auto contrastive = cfg.contrastive();
  Optimizer opt(cfg.optimizer, {Group::encoder, Group::projector});
  ParameterSet grad(global.layout_ptr());
  ParameterSet& p = out.params;
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
      ProjectorCache<float> pc;
      const MatF h = net.encode(p, views, Mode::train, &rng, &ec);
      const MatF z = net.project(p, h, &pc);
      const auto loss = ntxent_batch<float>(z.leftCols(b), z.rightCols(b), contrastive);
      require_finite(loss.mean, "client " + std::to_string(shard.client_id) + " contrastive loss");

      MatF dz(z.rows(), 2 * b);
      dz << loss.grad_a, loss.grad_b;
      grad.set_zero();
      const MatF dh = net.project_backward(p, pc, dz, grad);
      net.encode_backward(p, ec, dh, grad);
      opt.step(p, grad);

      out.trace.push_back({0, shard.client_id, epoch, ++step, "ntxent", static_cast<double>(loss.mean)});
      epoch_losses.push_back(loss.mean);
    }
  }
  out.final_loss = mean_of(epoch_losses);
  return out;
}

template <typename T>
BasicParameterSet<T> fedavg(const std::vector<BasicParameterSet<T>>& params, std::span<const std::size_t> counts,
                            std::span<const Group> groups) {
  if (params.empty()) throw ConfigError("fedavg needs at least one parameter set");
  if (counts.size() != params.size()) throw ConfigError("fedavg: one count per parameter set required");
  double total = 0.0;
  for (auto c : counts) {
    if (c == 0) throw ConfigError("fedavg: client counts must be positive");
    total += static_cast<double>(c);
  }
  for (std::size_t k = 1; k < params.size(); ++k) params[0].require_congruent(params[k], "fedavg");

  BasicParameterSet<T> out = params[0];
  const auto& layout = params[0].layout();
  std::vector<Group> selected(groups.begin(), groups.end());
  if (selected.empty()) selected = {Group::encoder, Group::projector, Group::classifier};
  std::vector<double> acc;
  for (Group g : selected) {
    const auto [begin, end] = layout.range(g);
    acc.assign(end - begin, 0.0);
    // Fixed client order keeps the reduction bit-reproducible.
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double w = static_cast<double>(counts[k]) / total;
      auto v = params[k].values();
      for (std::size_t i = begin; i < end; ++i) acc[i - begin] += w * static_cast<double>(v[i]);
    }
    auto o = out.values();
    for (std::size_t i = begin; i < end; ++i) o[i] = static_cast<T>(acc[i - begin]);
  }
  return out;
}

template <typename T>
BasicParameterSet<T> ema_update(const BasicParameterSet<T>& prev, const BasicParameterSet<T>& aggregated, double xi,
                                std::span<const Group> groups) {
  if (!(xi >= 0.0 && xi <= 1.0)) throw ConfigError("ema_update: xi must lie in [0, 1]");
  prev.require_congruent(aggregated, "ema_update");
  return linear_combination(xi, prev, 1.0 - xi, aggregated, groups);
}

template BasicParameterSet<float> fedavg(const std::vector<BasicParameterSet<float>>&, std::span<const std::size_t>,
                                         std::span<const Group>);
template BasicParameterSet<double> fedavg(const std::vector<BasicParameterSet<double>>&,
                                          std::span<const std::size_t>, std::span<const Group>);
template BasicParameterSet<float> ema_update(const BasicParameterSet<float>&, const BasicParameterSet<float>&, double,
                                             std::span<const Group>);
template BasicParameterSet<double> ema_update(const BasicParameterSet<double>&, const BasicParameterSet<double>&,
                                              double, std::span<const Group>);

std::vector<LossEvent> supervised_train(const Network<float>& net, ParameterSet& params, const LabeledSet& data,
                                        const SupervisedOptions& opt, Rng& rng) {
  const std::size_t n = data.size();
  if (n == 0) throw DataError("supervised training needs a non-empty labeled set");
  if (std::any_of(data.y.begin(), data.y.end(), [](int y) { return y < 0; })) {
    throw DataError("supervised training received unlabeled samples");
  }
  if (opt.prox_mu > 0.0 && opt.prox_anchor == nullptr) throw ConfigError("proximal term needs an anchor");
  std::vector<LossEvent> trace;
  if (opt.epochs <= 0) return trace;

  Optimizer optimizer(opt.optimizer, opt.groups);
  ParameterSet grad(params.layout_ptr());
  const std::string name = opt.prox_mu > 0.0 ? "ce+prox" : "ce";
  int step = 0;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(n, opt.batch, rng)) {
      const MatF x = gather_columns(data.x, idx);
      const auto labels = gather_labels(data.y, idx);
      EncoderCache<float> ec;
      const MatF h = net.encode(params, x, Mode::train, &rng, &ec);
      const MatF logits = net.classify(params, h);
      const auto ce = cross_entropy<float>(logits, labels);
      double value = ce.value;
      grad.set_zero();
      const MatF dh = net.classify_backward(params, h, ce.grad, grad);
      net.encode_backward(params, ec, dh, grad);
      if (opt.prox_mu > 0.0) {
        value += fedprox_term(params, *opt.prox_anchor, opt.prox_mu, opt.groups);
        fedprox_grad(params, *opt.prox_anchor, opt.prox_mu, grad, opt.groups);
      }
      require_finite(value, "cross-entropy loss");
      optimizer.step(params, grad);
      trace.push_back({0, 0, epoch, ++step, name, value});
    }
  }
  return trace;
}

std::vector<LossEvent> server_finetune(const Network<float>& net, ParameterSet& params, const LabeledSet& labeled,
                                       const FederationConfig& cfg, Rng& rng) {
  SupervisedOptions opt;
  opt.epochs = cfg.server_epochs;
  opt.batch = cfg.server_batch;
  opt.optimizer = cfg.optimizer;
  return supervised_train(net, params, labeled, opt, rng);
}

nlohmann::json RoundRecord::to_json() const {
  return {{"round", round},
          {"client_losses", client_losses},
          {"server_loss", server_loss},
          {"aggregate_checksum", aggregate_checksum},
          {"global_checksum", global_checksum},
          {"metrics", metrics},
          {"wall_seconds", wall_seconds}};
}

RoundRecord RoundRecord::from_json(const nlohmann::json& j) {
  RoundRecord r;
  r.round = j.at("round").get<int>();
  r.client_losses = j.at("client_losses").get<std::vector<double>>();
  r.server_loss = j.at("server_loss").get<double>();
  r.aggregate_checksum = j.at("aggregate_checksum").get<std::string>();
  r.global_checksum = j.at("global_checksum").get<std::string>();
  r.metrics = j.at("metrics");
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

fs::path round_checkpoint_dir(const fs::path& run_dir, int round) {
  char name[32];
  std::snprintf(name, sizeof name, "round_%04d", round);
  return run_dir / "checkpoints" / name;
}

std::optional<fs::path> latest_checkpoint(const fs::path& run_dir) {
  const fs::path root = run_dir / "checkpoints";
  if (!fs::is_directory(root)) return std::nullopt;
  std::optional<fs::path> best;
  int best_round = -1;
  for (const auto& entry : fs::directory_iterator(root)) {
    const auto name = entry.path().filename().string();
    int round = 0;
    if (entry.is_directory() && std::sscanf(name.c_str(), "round_%d", &round) == 1 &&
        fs::exists(entry.path() / "manifest.json") && round > best_round) {
      best_round = round;
      best = entry.path();
    }
  }
  return best;
}

void write_loss_csv(const fs::path& path, std::span<const LossEvent> events, bool append) {
  const bool header = !append || !fs::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  if (header) out << "round,client,epoch,step,loss,value\n";
  char value[40];
  for (const auto& e : events) {
    std::snprintf(value, sizeof value, "%.9g", e.value);
    out << e.round << ',' << e.client << ',' << e.epoch << ',' << e.step << ',' << e.loss << ',' << value << '\n';
  }
}

namespace {

// Drops rows of rounds after `keep_through` from an existing loss log.
void truncate_loss_csv(const fs::path& path, int keep_through) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::ostringstream kept;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      kept << line << '\n';
      first = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoi(line.substr(0, line.find(','))) <= keep_through) kept << line << '\n';
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept.str();
}

void write_rounds_jsonl(const fs::path& path, const std::vector<RoundRecord>& rounds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : rounds) out << r.to_json().dump() << '\n';
}

nlohmann::json metrics_json(const EvaluationResult& e) {
  return {{"multiclass", e.multiclass.to_json()}, {"binary", e.binary.to_json()}};
}

std::vector<ClientResult> run_clients(const Protocol& protocol, const ParameterSet& global, int round,
                                      const RunOptions& options) {
  const std::size_t k = protocol.num_clients;
  std::vector<ClientResult> results(k);
  std::vector<std::exception_ptr> errors(k);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t c = next++; c < k; c = next++) {
      try {
        // Private copy and client-indexed stream: scheduling cannot leak into results.
        const ParameterSet local = global;
        Rng rng = make_rng(options.seed, {stream::kClient, static_cast<std::uint64_t>(round), c + 1});
        results[c] = protocol.client(c, local, rng);
        for (auto& e : results[c].trace) {
          e.round = round;
          e.client = static_cast<int>(c + 1);
        }
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(static_cast<std::size_t>(options.workers), 1, std::max<std::size_t>(k, 1));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (!errors[c]) continue;
    try {
      std::rethrow_exception(errors[c]);
    } catch (const std::exception& e) {
      throw TrainingError("round " + std::to_string(round) + ", client " + std::to_string(c + 1) + ": " + e.what());
    }
  }
  return results;
}

}  // namespace

TrainingResult run_protocol(const Network<float>& net, ParameterSet initial, const Protocol& protocol,
                            const RunOptions& options) {
  if (options.rounds < 1) throw ConfigError("rounds must be >= 1");
  if (protocol.num_clients > 0) {
    if (!protocol.client) throw ConfigError(protocol.name + ": client phase without a client update");
    if (protocol.client_weights.size() != protocol.num_clients) {
      throw ConfigError(protocol.name + ": one aggregation weight per client required");
    }
  }
  if (!(protocol.ema_xi >= 0.0 && protocol.ema_xi <= 1.0)) throw ConfigError("ema_xi must lie in [0, 1]");

  TrainingResult result;
  result.params = std::move(initial);
  const bool persist = !options.run_dir.empty();
  const fs::path loss_csv = options.run_dir / "losses.csv";
  const fs::path rounds_jsonl = options.run_dir / "rounds.jsonl";

  int start_round = 1;
  if (persist) {
    fs::create_directories(options.run_dir / "checkpoints");
    if (options.resume) {
      if (auto latest = latest_checkpoint(options.run_dir)) {
        auto ckpt = read_checkpoint(*latest);
        if (!(ckpt.arch == net.arch())) throw ConfigError("resume: checkpoint architecture differs from the config");
        if (ckpt.meta.seed != options.seed) throw ConfigError("resume: checkpoint seed differs from the run seed");
        result.params = std::move(ckpt.params);
        result.resumed_from = ckpt.meta.round;
        for (int r = 1; r <= ckpt.meta.round; ++r) {
          const auto dir = round_checkpoint_dir(options.run_dir, r);
          if (!fs::exists(dir / "manifest.json")) throw DataError("resume: missing checkpoint for round " + std::to_string(r));
          result.rounds.push_back(RoundRecord::from_json(read_json(dir / "manifest.json").at("extra").at("record")));
        }
        start_round = ckpt.meta.round + 1;
        truncate_loss_csv(loss_csv, ckpt.meta.round);
        spdlog::info("{}: resuming after round {}", protocol.name, ckpt.meta.round);
      }
    }
    if (start_round == 1) {
      write_loss_csv(loss_csv, {}, false);
    }
  }

  for (int round = start_round; round <= options.rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundRecord record;
    record.round = round;
    ParameterSet global = result.params;
    std::vector<LossEvent> round_trace;

    if (protocol.num_clients > 0) {
      auto clients = run_clients(protocol, global, round, options);
      std::vector<ParameterSet> locals;
      locals.reserve(clients.size());
      for (auto& c : clients) {
        record.client_losses.push_back(c.final_loss);
        round_trace.insert(round_trace.end(), c.trace.begin(), c.trace.end());
        locals.push_back(std::move(c.params));
      }
      const ParameterSet aggregate = fedavg(locals, protocol.client_weights, protocol.aggregate_groups);
      record.aggregate_checksum = aggregate.checksum();
      ParameterSet next = global;
      copy_groups(aggregate, next, protocol.aggregate_groups);
      if (!protocol.ema_groups.empty()) {
        const ParameterSet fused = ema_update(global, aggregate, protocol.ema_xi, protocol.ema_groups);
        copy_groups(fused, next, protocol.ema_groups);
      }
      global = std::move(next);
    }

    if (protocol.server_data != nullptr) {
      Rng rng = make_rng(options.seed, {stream::kServer, static_cast<std::uint64_t>(round)});
      try {
        auto trace = supervised_train(net, global, *protocol.server_data, protocol.server, rng);
        std::vector<double> last_epoch;
        for (auto& e : trace) {
          e.round = round;
          if (e.epoch == protocol.server.epochs) last_epoch.push_back(e.value);
        }
        record.server_loss = mean_of(last_epoch);
        round_trace.insert(round_trace.end(), trace.begin(), trace.end());
      } catch (const Error& e) {
        throw TrainingError("round " + std::to_string(round) + ", server: " + e.what());
      }
    }

    record.global_checksum = global.checksum();
    if (options.test != nullptr) record.metrics = metrics_json(evaluate(net, global, *options.test, options.reference_counts));
    record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.params = std::move(global);

    if (persist) {
      CheckpointMeta meta;
      meta.seed = options.seed;
      meta.round = round;
      meta.extra = {{"protocol", protocol.name}, {"record", record.to_json()}};
      write_checkpoint(round_checkpoint_dir(options.run_dir, round), result.params, net.arch(), meta);
      write_loss_csv(loss_csv, round_trace, true);
    }
    if (record.metrics.is_object()) {
      spdlog::info("{} round {}/{}: acc {:.2f} f1 {:.2f} ({:.1f}s)", protocol.name, round, options.rounds,
                   record.metrics["multiclass"]["accuracy"].get<double>(), record.metrics["multiclass"]["f1"].get<double>(),
                   record.wall_seconds);
    } else {
      spdlog::info("{} round {}/{} done ({:.1f}s)", protocol.name, round, options.rounds, record.wall_seconds);
    }
    result.rounds.push_back(std::move(record));
    result.trace.insert(result.trace.end(), round_trace.begin(), round_trace.end());
    if (persist) write_rounds_jsonl(rounds_jsonl, result.rounds);
  }

  if (options.test != nullptr) {
    result.final_eval = evaluate(net, result.params, *options.test, options.reference_counts);
    if (persist && options.embedding_samples > 0) {
      const std::size_t n = std::min(options.embedding_samples, options.test->size());
      Rng rng = make_rng(options.seed, {stream::kEval});
      std::vector<std::size_t> idx(options.test->size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(n);
      std::sort(idx.begin(), idx.end());
      const MatF emb = net.encode(result.params, gather_columns(options.test->x, idx), Mode::eval);
      write_array<float>(options.run_dir / "embeddings.f32", std::span<const float>(emb.data(), static_cast<std::size_t>(emb.size())));
      const auto labels = gather_labels(options.test->y, idx);
      write_array<int>(options.run_dir / "embedding_labels.i32", labels);
      write_json(options.run_dir / "embeddings.json", {{"rows", emb.rows()}, {"cols", emb.cols()}});
    }
  }
  return result;
}

Protocol contrastive_protocol(const Network<float>& net, const DatasetSplit& split, const FeatureLayout& layout,
                              const TrainingSetup& setup) {
  const auto& fed = setup.fed;
  if (static_cast<int>(split.client_shards.size()) != fed.num_clients) {
    throw ConfigError("split has " + std::to_string(split.client_shards.size()) + " client shards, config expects " +
                      std::to_string(fed.num_clients));
  }
  Protocol p;
  p.name = "ContrastiveFedSSL";
  p.num_clients = split.client_shards.size();
  for (const auto& shard : split.client_shards) p.client_weights.push_back(shard.n_k());
  p.client = [&net, &split, layout, setup](std::size_t c, const ParameterSet& global, Rng& rng) {
    return client_update(net, global, split.client_shards[c], layout, setup.augment, setup.fed, rng);
  };
  // The projector travels with the encoder and is averaged with it; only
  // the encoder is fused with the previous global state.
  p.aggregate_groups = {Group::encoder, Group::projector};
  p.ema_groups = {Group::encoder};
  p.ema_xi = fed.ema_xi;
  p.server_data = &split.server_labeled;
  p.server.epochs = fed.server_epochs;
  p.server.batch = fed.server_batch;
  p.server.optimizer = fed.optimizer;
  return p;
}

TrainingResult run_training(const DatasetSplit& split, const FeatureLayout& layout, const TrainingSetup& setup,
                            RunOptions options) {
  setup.fed.validate();
  setup.augment.validate();
  setup.arch.validate();
  const Network<float> net(setup.arch);
  options.rounds = setup.fed.rounds;
  options.seed = setup.fed.seed;
  options.workers = setup.fed.workers;
  if (options.test == nullptr && split.test_set.size() > 0) options.test = &split.test_set;
  const Protocol protocol = contrastive_protocol(net, split, layout, setup);
  return run_protocol(net, build(setup.arch, setup.fed.seed), protocol, options);
}

}  // namespace fedssl
