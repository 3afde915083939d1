#include <doctest.h>

#include <fstream>
#include <set>

#include "fedssl/errors.hpp"
#include "fedssl/federation.hpp"
#include "helpers.hpp"

using namespace fedssl;

namespace {

ParameterSet filled(const ArchitectureSpec& arch, float value) {
  ParameterSet p(std::make_shared<const ParameterLayout>(arch));
  for (auto& v : p.values()) v = value;
  return p;
}

TrainingSetup small_setup(std::uint64_t seed) {
  TrainingSetup s;
  s.arch = testing::tiny_arch(0, 0.2, 122);
  s.arch.num_classes = 5;
  s.fed.num_clients = 3;
  s.fed.rounds = 2;
  s.fed.client_epochs = 1;
  s.fed.client_batch = 64;
  s.fed.server_epochs = 1;
  s.fed.seed = seed;
  return s;
}

std::size_t line_count(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("fedavg weights by client sample counts") {
  const auto arch = testing::tiny_arch();
  const std::vector<ParameterSet> two = {filled(arch, 0), filled(arch, 2)};
  const std::vector<std::size_t> equal = {5, 5};
  const auto mean = fedavg(two, equal);
  for (float v : mean.values()) CHECK(v == doctest::Approx(1.0f));
  const std::vector<ParameterSet> skew = {filled(arch, 0), filled(arch, 4)};
  const std::vector<std::size_t> counts = {1, 3};
  const auto weighted = fedavg(skew, counts);
  for (float v : weighted.values()) CHECK(v == doctest::Approx(3.0f));

  const std::array<Group, 1> enc{Group::encoder};
  const auto partial = fedavg(skew, counts, enc);
  for (float v : partial.group(Group::encoder)) CHECK(v == doctest::Approx(3.0f));
  for (float v : partial.group(Group::classifier)) CHECK(v == 0.0f);

  CHECK_THROWS_AS(fedavg(std::vector<ParameterSet>{}, std::span<const std::size_t>{}), ConfigError);
  CHECK_THROWS_AS(fedavg(two, std::vector<std::size_t>{1}), ConfigError);
  CHECK_THROWS_AS(fedavg(two, std::vector<std::size_t>{0, 0}), ConfigError);
  const std::vector<ParameterSet> mismatched = {filled(arch, 0), filled(testing::tiny_arch(0, 0, 20), 1)};
  CHECK_THROWS_AS(fedavg(mismatched, equal), ShapeError);
}

TEST_CASE("fedavg stays in the convex hull and ignores client order") {
  const auto arch = testing::tiny_arch();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed, {31});
    std::vector<ParameterSet> sets;
    std::vector<std::size_t> counts;
    std::uniform_int_distribution<std::size_t> n(1, 500);
    for (int k = 0; k < 5; ++k) {
      sets.push_back(build(arch, seed * 10 + k));
      counts.push_back(n(rng));
    }
    const auto avg = fedavg(sets, counts);
    for (std::size_t i = 0; i < avg.size(); ++i) {
      float lo = sets[0].values()[i], hi = lo;
      for (const auto& s : sets) {
        lo = std::min(lo, s.values()[i]);
        hi = std::max(hi, s.values()[i]);
      }
      CHECK(avg.values()[i] >= lo - 1e-6f);
      CHECK(avg.values()[i] <= hi + 1e-6f);
    }
    std::vector<ParameterSet> rev(sets.rbegin(), sets.rend());
    std::vector<std::size_t> rev_counts(counts.rbegin(), counts.rend());
    const auto back = fedavg(rev, rev_counts);
    for (std::size_t i = 0; i < avg.size(); ++i) CHECK(back.values()[i] == doctest::Approx(avg.values()[i]).epsilon(1e-6));
  }
}

TEST_CASE("EMA endpoints and group restriction") {
  const auto arch = testing::tiny_arch();
  const auto prev = filled(arch, 2);
  const auto agg = filled(arch, 6);
  const std::array<std::pair<double, float>, 4> cases = {{{1.0, 2.0f}, {0.0, 6.0f}, {0.5, 4.0f}, {0.25, 5.0f}}};
  for (auto [xi, want] : cases) {
    const auto out = ema_update(prev, agg, xi);
    for (float v : out.values()) CHECK(v == doctest::Approx(want));
  }
  const std::array<Group, 1> enc{Group::encoder};
  const auto partial = ema_update(prev, agg, 0.5, enc);
  for (float v : partial.group(Group::projector)) CHECK(v == 2.0f);
  CHECK_THROWS_AS(ema_update(prev, agg, 1.5), ConfigError);
}

TEST_CASE("epoch batches cover the index range once") {
  Rng rng = make_rng(1, {1});
  const auto batches = epoch_batches(103, 10, rng);
  CHECK(batches.size() == 11);
  std::set<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 103);
  CHECK(epoch_batches(101, 10, rng, 2).size() == 10);
}

TEST_CASE("client update trains encoder and projector only") {
  const auto& data = testing::small_prepared();
  const auto split = data.split();
  auto setup = small_setup(3);
  const Network<float> net(setup.arch);
  const auto global = build(setup.arch, 3);
  Rng rng = make_rng(3, {1});
  const auto r = client_update(net, global, split.client_shards[0], data.layout(), setup.augment, setup.fed, rng);
  CHECK_FALSE(std::equal(r.params.group(Group::encoder).begin(), r.params.group(Group::encoder).end(),
                         global.group(Group::encoder).begin()));
  CHECK_FALSE(std::equal(r.params.group(Group::projector).begin(), r.params.group(Group::projector).end(),
                         global.group(Group::projector).begin()));
  CHECK(std::equal(r.params.group(Group::classifier).begin(), r.params.group(Group::classifier).end(),
                   global.group(Group::classifier).begin()));
  CHECK(std::isfinite(r.final_loss));
  CHECK_FALSE(r.trace.empty());

  // Zero local epochs leaves the model alone.
  setup.fed.client_epochs = 0;
  Rng rng2 = make_rng(3, {1});
  const auto none = client_update(net, global, split.client_shards[0], data.layout(), setup.augment, setup.fed, rng2);
  CHECK(none.params.checksum() == global.checksum());
  CHECK(none.trace.empty());

  // An oversized batch is clamped to the shard.
  setup.fed.client_epochs = 1;
  setup.fed.client_batch = 100000;
  Rng rng3 = make_rng(3, {1});
  const auto clamped = client_update(net, global, split.client_shards[0], data.layout(), setup.augment, setup.fed, rng3);
  CHECK(clamped.trace.size() == 1);
}

TEST_CASE("protocol order: average, then EMA on the encoder") {
  const auto arch = testing::tiny_arch();
  const Network<float> net(arch);
  Protocol proto;
  proto.name = "oracle";
  proto.num_clients = 3;
  proto.client_weights = {1, 1, 1};
  proto.aggregate_groups = {Group::encoder, Group::projector};
  proto.ema_groups = {Group::encoder};
  proto.ema_xi = 0.5;
  proto.client = [&](std::size_t k, const ParameterSet& global, Rng&) {
    ClientResult r;
    r.params = global;
    for (auto g : {Group::encoder, Group::projector}) {
      for (auto& v : r.params.group(g)) v = static_cast<float>(k + 1);
    }
    return r;
  };
  RunOptions opt;
  opt.rounds = 1;
  opt.workers = 3;
  const auto out = run_protocol(net, filled(arch, 0), proto, opt);
  for (float v : out.params.group(Group::encoder)) CHECK(v == doctest::Approx(1.0f));
  for (float v : out.params.group(Group::projector)) CHECK(v == doctest::Approx(2.0f));
  for (float v : out.params.group(Group::classifier)) CHECK(v == 0.0f);
  REQUIRE(out.rounds.size() == 1);
  CHECK(out.rounds[0].client_losses.size() == 3);

  // Without EMA a single client passes straight through.
  proto.num_clients = 1;
  proto.client_weights = {7};
  proto.ema_xi = 0.0;
  const auto single = run_protocol(net, filled(arch, 0), proto, opt);
  for (float v : single.params.group(Group::encoder)) CHECK(v == 1.0f);

  proto.client = [](std::size_t, const ParameterSet&, Rng&) -> ClientResult { throw std::runtime_error("boom"); };
  try {
    run_protocol(net, filled(arch, 0), proto, opt);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("boom") != std::string::npos);
  }
}

TEST_CASE("server fine-tuning lowers the loss on a small labeled set") {
  const auto& data = testing::small_prepared();
  std::vector<std::size_t> idx(100);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = data.indices.server[i];
  const auto labeled = data.train.subset(idx);
  auto setup = small_setup(4);
  const Network<float> net(setup.arch);
  auto params = build(setup.arch, 4);
  const auto before = params;
  SupervisedOptions opt;
  opt.epochs = 30;
  opt.batch = 32;
  Rng rng = make_rng(4, {2});
  const auto trace = supervised_train(net, params, labeled, opt, rng);
  auto epoch_mean = [&](int epoch) {
    double s = 0;
    int n = 0;
    for (const auto& e : trace) {
      if (e.epoch == epoch) {
        s += e.value;
        ++n;
      }
    }
    return s / n;
  };
  CHECK(epoch_mean(30) < epoch_mean(1));
  CHECK(std::equal(params.group(Group::projector).begin(), params.group(Group::projector).end(),
                   before.group(Group::projector).begin()));

  LabeledSet unlabeled = labeled;
  unlabeled.y.assign(unlabeled.y.size(), kUnlabeled);
  CHECK_THROWS(supervised_train(net, params, unlabeled, opt, rng));
}

TEST_CASE("training is deterministic across worker counts") {
  const auto& data = testing::small_prepared();
  const auto split = data.split();
  auto setup = small_setup(6);
  RunOptions opt;
  opt.rounds = 2;
  opt.seed = 6;
  opt.test = &split.test_set;
  setup.fed.workers = 1;
  const auto a = run_training(split, data.layout(), setup, opt);
  setup.fed.workers = 3;
  const auto b = run_training(split, data.layout(), setup, opt);
  CHECK(a.params.checksum() == b.params.checksum());
  REQUIRE(a.rounds.size() == 2);
  for (std::size_t r = 0; r < 2; ++r) CHECK(a.rounds[r].global_checksum == b.rounds[r].global_checksum);
  REQUIRE(a.final_eval.has_value());
  CHECK(a.final_eval->multiclass.accuracy == b.final_eval->multiclass.accuracy);
  setup.fed.seed = 7;
  CHECK(run_training(split, data.layout(), setup, opt).params.checksum() != a.params.checksum());
}

TEST_CASE("resume continues to the same final model") {
  testing::TempDir tmp("resume");
  const auto& data = testing::small_prepared();
  const auto split = data.split();
  auto setup = small_setup(8);
  setup.fed.rounds = 3;
  RunOptions opt;
  opt.run_dir = tmp.path / "full";
  opt.test = &split.test_set;
  opt.embedding_samples = 50;
  const auto full = run_training(split, data.layout(), setup, opt);
  CHECK(std::filesystem::exists(round_checkpoint_dir(opt.run_dir, 3) / "manifest.json"));
  CHECK(line_count(opt.run_dir / "rounds.jsonl") == 3);
  CHECK(std::filesystem::exists(opt.run_dir / "embeddings.f32"));
  CHECK(latest_checkpoint(opt.run_dir) == round_checkpoint_dir(opt.run_dir, 3));

  auto partial_setup = setup;
  partial_setup.fed.rounds = 1;
  opt.run_dir = tmp.path / "split";
  run_training(split, data.layout(), partial_setup, opt);
  const auto losses_one = line_count(opt.run_dir / "losses.csv");
  opt.resume = true;
  const auto resumed = run_training(split, data.layout(), setup, opt);
  CHECK(resumed.resumed_from == 1);
  CHECK(resumed.rounds.size() == 3);
  CHECK(resumed.params.checksum() == full.params.checksum());
  CHECK(line_count(opt.run_dir / "losses.csv") == line_count(tmp.path / "full" / "losses.csv"));
  CHECK(losses_one < line_count(opt.run_dir / "losses.csv"));
  CHECK(line_count(opt.run_dir / "rounds.jsonl") == 3);

  // Resuming a finished run is a no-op that still reports the model.
  const auto again = run_training(split, data.layout(), setup, opt);
  CHECK(again.params.checksum() == full.params.checksum());
  CHECK(again.trace.empty());
}

TEST_CASE("federation config validation") {
  FederationConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.ema_xi = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.num_clients = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.temperature = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.optimizer.learning_rate = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("round records round-trip through json") {
  RoundRecord r;
  r.round = 4;
  r.client_losses = {1.5, 2.5};
  r.server_loss = 0.25;
  r.aggregate_checksum = "abc";
  r.global_checksum = "def";
  r.metrics = {{"multiclass", {{"accuracy", 90.0}}}};
  r.wall_seconds = 1.25;
  const auto back = RoundRecord::from_json(r.to_json());
  CHECK(back.round == 4);
  CHECK(back.client_losses == r.client_losses);
  CHECK(back.global_checksum == "def");
  CHECK(back.metrics == r.metrics);
}
