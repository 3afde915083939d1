#include <doctest.h>

#include <fstream>

#include "fedssl/errors.hpp"
#include "fedssl/model.hpp"
#include "helpers.hpp"

using namespace fedssl;
using testing::random_matrix;
using testing::relative_error;
using testing::tiny_arch;

namespace {

using ParamsD = BasicParameterSet<double>;

// Numeric d(sum(w .* f())) / d params at the given indices.
std::vector<double> numeric_param_grad(const std::function<MatD()>& f, const MatD& w, ParamsD& p,
                                       const std::vector<std::size_t>& idx) {
  auto scalar = [&] { return f().cwiseProduct(w).sum(); };
  return testing::numeric_gradient(scalar, p.values().data(), idx);
}

std::vector<double> pick(const ParamsD& g, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  for (auto i : idx) out.push_back(g.values()[i]);
  return out;
}

std::vector<std::size_t> group_indices(const ParamsD& p, Group g) {
  const auto [b, e] = p.layout().range(g);
  std::vector<std::size_t> out;
  for (std::size_t i = b; i < e; ++i) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("parameter arithmetic helpers") {
  CHECK(linear_params(122, 64) == 7872);
  CHECK(conv1d_params(1, 8, 3) == 32);
  CHECK(conv1d_params(16, 24, 3) == 16 * 24 * 3 + 24);
}

TEST_CASE("default architecture stays inside the budgets") {
  const ArchitectureSpec arch;
  CHECK(count_params(arch) == 53949);
  CHECK(count_params(arch) <= 55000);
  CHECK(count_flops(arch) == 245056);
  CHECK(count_flops(arch) <= 800000);
  CHECK(arch.flat_dim() == 720);
  std::size_t sum = 0;
  for (auto g : {Group::encoder, Group::projector, Group::classifier}) sum += count_params(arch, g);
  CHECK(sum == count_params(arch));
  const auto p = build(arch, 1);
  CHECK(p.size() == count_params(arch));
  // The projector is training-only and stays out of the inference FLOPs.
  CHECK(count_flops(arch) == count_flops(arch, Group::encoder) + count_flops(arch, Group::classifier));
}

TEST_CASE("budget and shape validation") {
  ArchitectureSpec big;
  big.embedding_dim = 512;
  CHECK_THROWS_AS(build(big, 1), ConfigError);
  ArchitectureSpec bad;
  bad.projection_bn_count = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.input_dim = 2;
  bad.conv = {{4, 3, 1, 2}, {4, 3, 1, 2}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("layout groups are contiguous and ordered") {
  const ParameterLayout layout(ArchitectureSpec{});
  CHECK(layout.range(Group::encoder).first == 0);
  CHECK(layout.range(Group::encoder).second == layout.range(Group::projector).first);
  CHECK(layout.range(Group::projector).second == layout.range(Group::classifier).first);
  CHECK(layout.range(Group::classifier).second == layout.total());
  CHECK_THROWS(layout.find("no_such_tensor"));
}

TEST_CASE("initialization is deterministic in the seed") {
  const auto arch = tiny_arch();
  CHECK(build(arch, 3).checksum() == build(arch, 3).checksum());
  CHECK(build(arch, 3).checksum() != build(arch, 4).checksum());
}

TEST_CASE("forward shapes and eval determinism") {
  const ArchitectureSpec arch;
  const Network<float> net(arch);
  const auto p = build(arch, 1);
  Rng rng = make_rng(1, {1});
  const MatF x = random_matrix<float>(122, 7, rng, 0, 1);
  const MatF e = net.encode(p, x, Mode::eval);
  CHECK(e.rows() == 64);
  CHECK(e.cols() == 7);
  CHECK(net.encode(p, x, Mode::eval) == e);
  CHECK(net.project(p, e).rows() == 32);
  CHECK(net.classify(p, e).rows() == 5);
  CHECK(predict(net, p, x, 3).size() == 7);
  CHECK_THROWS_AS(net.encode(p, random_matrix<float>(100, 2, rng), Mode::eval), ShapeError);
}

TEST_CASE("dropout only acts in training mode") {
  const auto arch = tiny_arch(0, 0.5);
  const Network<double> net(arch);
  const auto p = build(arch, 1).cast<double>();
  Rng rng = make_rng(2, {1});
  const MatD x = random_matrix<double>(12, 40, rng, 0, 1);
  const MatD eval = net.encode(p, x, Mode::eval);
  const MatD train = net.encode(p, x, Mode::train, &rng);
  CHECK_FALSE(eval.isApprox(train));
  // Inverted dropout: kept units are scaled by 1 / (1 - rate).
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    const double t = train.data()[i];
    CHECK((t == 0.0 || std::abs(t - 2.0 * eval.data()[i]) < 1e-12));
  }
}

TEST_CASE("encoder gradient matches finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto arch = tiny_arch(0, seed % 2 ? 0.3 : 0.0);
    const Network<double> net(arch);
    auto p = build(arch, seed).cast<double>();
    Rng data_rng = make_rng(seed, {11});
    const MatD x = random_matrix<double>(12, 3, data_rng, 0, 1);
    const MatD w = random_matrix<double>(arch.embedding_dim, 3, data_rng);
    auto forward = [&] {
      Rng drop = make_rng(seed, {12});
      return net.encode(p, x, Mode::train, &drop);
    };
    Rng drop = make_rng(seed, {12});
    EncoderCache<double> cache;
    net.encode(p, x, Mode::train, &drop, &cache);
    ParamsD grad(p.layout_ptr());
    net.encode_backward(p, cache, w, grad);
    const auto idx = group_indices(p, Group::encoder);
    CHECK(relative_error(pick(grad, idx), numeric_param_grad(forward, w, p, idx)) < 1e-5);
    for (auto g : {Group::projector, Group::classifier}) {
      for (auto i : group_indices(grad, g)) CHECK(grad.values()[i] == 0.0);
    }
  }
}

TEST_CASE("projector gradient with 0, 1 and 2 batch-norm layers") {
  for (int bn = 0; bn <= 2; ++bn) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto arch = tiny_arch(bn);
      const Network<double> net(arch);
      auto p = build(arch, seed + 100).cast<double>();
      Rng rng = make_rng(seed, {13});
      MatD emb = random_matrix<double>(arch.embedding_dim, 5, rng);
      const MatD w = random_matrix<double>(arch.projection_dim, 5, rng);
      ProjectorCache<double> cache;
      net.project(p, emb, &cache);
      ParamsD grad(p.layout_ptr());
      const MatD d_in = net.project_backward(p, cache, w, grad);
      auto forward = [&] { return MatD(net.project(p, emb)); };
      const auto idx = group_indices(p, Group::projector);
      CHECK(relative_error(pick(grad, idx), numeric_param_grad(forward, w, p, idx)) < 1e-5);
      std::vector<std::size_t> all(static_cast<std::size_t>(emb.size()));
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      const auto num_in = testing::numeric_gradient([&] { return forward().cwiseProduct(w).sum(); }, emb.data(), all);
      CHECK(relative_error(std::vector<double>(d_in.data(), d_in.data() + d_in.size()), num_in) < 1e-5);
      for (auto i : group_indices(grad, Group::encoder)) CHECK(grad.values()[i] == 0.0);
    }
  }
  const auto arch = tiny_arch(1);
  const Network<double> net(arch);
  const auto p = build(arch, 1).cast<double>();
  CHECK_THROWS_AS(net.project(p, MatD::Ones(arch.embedding_dim, 1)), ShapeError);
}

TEST_CASE("classifier gradient and head locality") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto arch = tiny_arch();
    const Network<double> net(arch);
    auto p = build(arch, seed + 200).cast<double>();
    Rng rng = make_rng(seed, {14});
    const MatD emb = random_matrix<double>(arch.embedding_dim, 4, rng);
    const MatD w = random_matrix<double>(arch.num_classes, 4, rng);
    ParamsD grad(p.layout_ptr());
    net.classify_backward(p, emb, w, grad);
    const auto idx = group_indices(p, Group::classifier);
    auto forward = [&] { return MatD(net.classify(p, emb)); };
    CHECK(relative_error(pick(grad, idx), numeric_param_grad(forward, w, p, idx)) < 1e-6);
    for (auto g : {Group::encoder, Group::projector}) {
      for (auto i : group_indices(grad, g)) CHECK(grad.values()[i] == 0.0);
    }
  }
  // Changing projector weights leaves the classifier output untouched.
  const auto arch = tiny_arch();
  const Network<float> net(arch);
  auto p = build(arch, 1);
  Rng rng = make_rng(1, {15});
  const MatF x = random_matrix<float>(12, 4, rng, 0, 1);
  const MatF before = net.classify(p, net.encode(p, x, Mode::eval));
  for (auto& v : p.group(Group::projector)) v += 1.0f;
  CHECK(net.classify(p, net.encode(p, x, Mode::eval)) == before);
}

TEST_CASE("linear combination and group copy") {
  const auto arch = tiny_arch();
  const auto a = build(arch, 1);
  const auto b = build(arch, 2);
  const std::array<Group, 1> enc{Group::encoder};
  const auto mix = linear_combination(0.25, a, 0.75, b, enc);
  const auto [eb, ee] = a.layout().range(Group::encoder);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float want = (i >= eb && i < ee) ? static_cast<float>(0.25 * a.values()[i] + 0.75 * b.values()[i])
                                           : a.values()[i];
    CHECK(mix.values()[i] == doctest::Approx(want));
  }
  auto dst = a;
  const std::array<Group, 1> cls{Group::classifier};
  copy_groups(b, dst, cls);
  CHECK(std::equal(dst.group(Group::classifier).begin(), dst.group(Group::classifier).end(),
                   b.group(Group::classifier).begin()));
  CHECK(std::equal(dst.group(Group::encoder).begin(), dst.group(Group::encoder).end(), a.group(Group::encoder).begin()));
}

TEST_CASE("checkpoint round trip, size and corruption") {
  testing::TempDir tmp("ckpt");
  const ArchitectureSpec arch;
  const auto p = build(arch, 9);
  CheckpointMeta meta;
  meta.seed = 9;
  meta.round = 3;
  meta.extra = {{"note", "x"}};
  write_checkpoint(tmp.path / "c", p, arch, meta);
  const auto back = read_checkpoint(tmp.path / "c");
  CHECK(back.arch == arch);
  CHECK(back.params.checksum() == p.checksum());
  CHECK(back.meta.round == 3);
  CHECK(back.meta.seed == 9);
  CHECK(back.meta.extra.at("note") == "x");
  CHECK(checkpoint_bytes(tmp.path / "c") <= 250 * 1024);

  {
    std::fstream f(tmp.path / "c" / "tensors.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    const char junk[4] = {1, 2, 3, 4};
    f.write(junk, 4);
  }
  CHECK_THROWS_AS(read_checkpoint(tmp.path / "c"), DataError);
  CHECK_THROWS_AS(read_checkpoint(tmp.path / "none"), DataError);
}
