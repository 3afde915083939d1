#include <doctest.h>

#include <cmath>

#include "fedssl/errors.hpp"
#include "fedssl/losses.hpp"
#include "helpers.hpp"

using namespace fedssl;
using testing::numeric_gradient;
using testing::random_matrix;
using testing::relative_error;

namespace {

// Literal double loop over every pair of views, independent of the library.
double oracle_pair(const MatD& anchors, const MatD& positives, std::size_t i, double tau, bool self) {
  auto sim = [](const VecD& u, const VecD& v) { return u.dot(v) / (u.norm() * v.norm()); };
  const VecD a = anchors.col(static_cast<Eigen::Index>(i));
  const double pos = std::exp(sim(a, positives.col(static_cast<Eigen::Index>(i))) / tau);
  double denom = 0;
  for (Eigen::Index k = 0; k < anchors.cols(); ++k) {
    if (k != static_cast<Eigen::Index>(i) || self) denom += std::exp(sim(a, anchors.col(k)) / tau);
    denom += std::exp(sim(a, positives.col(k)) / tau);
  }
  return -std::log(pos / denom);
}

double oracle_sum(const MatD& za, const MatD& zb, double tau, bool self) {
  double s = 0;
  for (Eigen::Index i = 0; i < za.cols(); ++i) {
    s += oracle_pair(za, zb, static_cast<std::size_t>(i), tau, self) +
         oracle_pair(zb, za, static_cast<std::size_t>(i), tau, self);
  }
  return s;
}

// Finite-difference check of d f / d m for a matrix input.
double grad_error(const std::function<double()>& f, MatD& m, const MatD& analytic) {
  std::vector<std::size_t> all(static_cast<std::size_t>(m.size()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto numeric = numeric_gradient(f, m.data(), all);
  return relative_error(std::vector<double>(analytic.data(), analytic.data() + analytic.size()), numeric);
}

}  // namespace

TEST_CASE("cosine similarity fixed values") {
  VecD u(2), v(2), w(2);
  u << 1, 0;
  v << 0, 1;
  w << 1, 1;
  CHECK(cosine_sim<double>(u, v) == doctest::Approx(0.0));
  CHECK(cosine_sim<double>(u, w) == doctest::Approx(0.70710678).epsilon(1e-6));
  CHECK(cosine_sim<double>(w, 3.0 * w) == doctest::Approx(1.0));
  CHECK_THROWS_AS(cosine_sim<double>(u, VecD::Zero(2)), ShapeError);
  CHECK_THROWS_AS(cosine_sim<double>(u, VecD::Ones(3)), ShapeError);
}

TEST_CASE("NT-Xent worked example with two orthogonal pairs") {
  MatD za = MatD::Identity(2, 2);
  MatD zb = za;
  ContrastiveConfig cfg{1.0, false};
  // ln((e + 2) / e) per anchor
  CHECK(ntxent_pair<double>(0, za, zb, cfg) == doctest::Approx(0.5514).epsilon(1e-4));
  const auto r = ntxent_batch<double>(za, zb, cfg);
  CHECK(r.sum == doctest::Approx(2.2056).epsilon(1e-4));
  CHECK(r.mean == doctest::Approx(0.5514).epsilon(1e-4));
  cfg.include_self_term = true;
  CHECK(ntxent_pair<double>(0, za, zb, cfg) == doctest::Approx(std::log((2 * std::exp(1.0) + 2) / std::exp(1.0))));
}

TEST_CASE("NT-Xent matches the double-loop oracle on random batches") {
  Rng rng = make_rng(1, {99});
  std::uniform_int_distribution<int> batch(2, 9), dim(2, 8);
  std::uniform_real_distribution<double> temp(0.1, 2.0);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int b = batch(rng), d = dim(rng);
    const MatD za = random_matrix<double>(d, b, rng);
    const MatD zb = random_matrix<double>(d, b, rng);
    const ContrastiveConfig cfg{temp(rng), trial % 2 == 1};
    const double expected = oracle_sum(za, zb, cfg.temperature, cfg.include_self_term);
    const auto r = ntxent_batch<double>(za, zb, cfg, false);
    worst = std::max(worst, std::abs(r.sum - expected) / std::max(1.0, std::abs(expected)));
    CHECK(r.mean == doctest::Approx(r.sum / (2.0 * b)));
    CHECK(ntxent_pair<double>(0, za, zb, cfg) ==
          doctest::Approx(oracle_pair(za, zb, 0, cfg.temperature, cfg.include_self_term)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("NT-Xent invariances and temperature effect") {
  Rng rng = make_rng(2, {7});
  const MatD za = random_matrix<double>(6, 5, rng);
  const MatD zb = random_matrix<double>(6, 5, rng);
  const ContrastiveConfig cfg{0.5, false};
  const double base = ntxent_batch<double>(za, zb, cfg, false).sum;

  Eigen::PermutationMatrix<Eigen::Dynamic> perm(5);
  perm.indices() << 3, 0, 4, 1, 2;
  CHECK(ntxent_batch<double>(za * perm, zb * perm, cfg, false).sum == doctest::Approx(base));
  CHECK(ntxent_batch<double>(3.5 * za, 0.2 * zb, cfg, false).sum == doctest::Approx(base));
  CHECK(ntxent_batch<double>(zb, za, cfg, false).sum == doctest::Approx(base));

  // Aligned pairs: a lower temperature sharpens the positive and lowers the loss.
  MatD aligned = MatD::Identity(4, 4);
  const double warm = ntxent_batch<double>(aligned, aligned, {1.0, false}, false).mean;
  const double cold = ntxent_batch<double>(aligned, aligned, {0.1, false}, false).mean;
  CHECK(cold < warm);
  CHECK_THROWS_AS(ntxent_batch<double>(za, zb, {0.0, false}), ConfigError);
  CHECK_THROWS_AS(ntxent_batch<double>(za, random_matrix<double>(6, 4, rng), cfg), ShapeError);
}

TEST_CASE("NT-Xent gradient matches finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, {3});
    MatD za = random_matrix<double>(5, 4, rng);
    MatD zb = random_matrix<double>(5, 4, rng);
    const ContrastiveConfig cfg{0.5, seed % 2 == 0};
    const auto r = ntxent_batch<double>(za, zb, cfg);
    auto f = [&] { return ntxent_batch<double>(za, zb, cfg, false).mean; };
    CHECK(grad_error(f, za, r.grad_a) < 1e-6);
    CHECK(grad_error(f, zb, r.grad_b) < 1e-6);
  }
}

TEST_CASE("cross entropy values and gradient") {
  MatD logits = MatD::Zero(2, 1);
  CHECK(cross_entropy<double>(logits, std::vector<int>{1}).value == doctest::Approx(std::log(2.0)));
  MatD five = MatD::Zero(5, 3);
  CHECK(cross_entropy<double>(five, std::vector<int>{0, 2, 4}).value == doctest::Approx(std::log(5.0)));
  MatD onehot = MatD::Zero(5, 3);
  onehot(0, 0) = onehot(2, 1) = onehot(4, 2) = 1;
  CHECK(cross_entropy<double>(five, onehot).value == doctest::Approx(std::log(5.0)));
  // clamped at 1e-12
  MatD extreme = MatD::Zero(2, 1);
  extreme(0, 0) = 1e4;
  CHECK(cross_entropy<double>(extreme, std::vector<int>{1}).value == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS(cross_entropy<double>(five, std::vector<int>{0, 5, 1}));

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, {4});
    MatD l = random_matrix<double>(5, 6, rng, -3, 3);
    const std::vector<int> y = {0, 1, 2, 3, 4, 2};
    const auto r = cross_entropy<double>(l, y);
    CHECK(grad_error([&] { return cross_entropy<double>(l, y).value; }, l, r.grad) < 1e-6);
  }
}

TEST_CASE("softmax is stable and sums to one") {
  MatD l(3, 2);
  l << 1000, -1000, 1001, 0, 999, 1000;
  const MatD p = softmax_columns<double>(l);
  CHECK(p.allFinite());
  CHECK(p.col(0).sum() == doctest::Approx(1.0));
  CHECK(p.col(1).sum() == doctest::Approx(1.0));
  CHECK(p(2, 1) == doctest::Approx(1.0));
}

TEST_CASE("FixMatch threshold edge cases and gradient") {
  Rng rng = make_rng(5, {1});
  MatD weak = random_matrix<double>(5, 8, rng, -2, 2);
  MatD strong = random_matrix<double>(5, 8, rng, -2, 2);
  const auto none = fixmatch_loss<double>(weak, strong, 1.01);
  CHECK(none.value == 0.0);
  CHECK(none.grad.isZero());

  // Threshold 0 accepts every sample: plain CE against the weak argmax.
  std::vector<int> pseudo;
  for (Eigen::Index j = 0; j < weak.cols(); ++j) {
    Eigen::Index k;
    weak.col(j).maxCoeff(&k);
    pseudo.push_back(static_cast<int>(k));
  }
  const auto all = fixmatch_loss<double>(weak, strong, 0.0);
  CHECK(all.value == doctest::Approx(cross_entropy<double>(strong, pseudo).value));

  // A mixed threshold still normalises by the whole batch.
  const MatD p = softmax_columns<double>(weak);
  double expected = 0;
  for (Eigen::Index j = 0; j < weak.cols(); ++j) {
    if (p.col(j).maxCoeff() >= 0.4) expected -= std::log(softmax_columns<double>(strong).col(j)(pseudo[j]));
  }
  const auto mixed = fixmatch_loss<double>(weak, strong, 0.4);
  CHECK(mixed.value == doctest::Approx(expected / weak.cols()));
  CHECK(grad_error([&] { return fixmatch_loss<double>(weak, strong, 0.4).value; }, strong, mixed.grad) < 1e-6);
}

TEST_CASE("UDA consistency values and gradient") {
  MatD weak = MatD::Zero(5, 2);
  weak(1, 0) = 200;
  weak(3, 1) = 200;
  const MatD strong = MatD::Zero(5, 2);
  CHECK(uda_consistency<double>(weak, strong, 0.4).value == doctest::Approx(std::log(5.0)).epsilon(1e-6));
  CHECK(uda_consistency<double>(strong, strong, 0.4).value == doctest::Approx(0.0));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, {6});
    MatD w = random_matrix<double>(5, 4, rng, -2, 2);
    MatD s = random_matrix<double>(5, 4, rng, -2, 2);
    const auto r = uda_consistency<double>(w, s, 0.4);
    CHECK(r.value >= 0.0);
    CHECK(grad_error([&] { return uda_consistency<double>(w, s, 0.4).value; }, s, r.grad) < 1e-6);
  }
}

TEST_CASE("CR consistency values and gradient") {
  MatD a(2, 1), b(2, 1);
  a << 1, 0;
  b << 0, 1;
  CHECK(cr_consistency<double>(a, b).value == doctest::Approx(2.0));
  CHECK(cr_consistency<double>(a, a).value == doctest::Approx(0.0));
  const MatD zero = MatD::Zero(2, 1);
  const auto z = cr_consistency<double>(a, zero);
  CHECK(z.value == doctest::Approx(1.5));
  CHECK(z.grad_a.allFinite());
  CHECK(z.grad_b.allFinite());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, {8});
    MatD x = random_matrix<double>(6, 3, rng);
    MatD y = random_matrix<double>(6, 3, rng);
    const auto r = cr_consistency<double>(x, y);
    auto f = [&] { return cr_consistency<double>(x, y).value; };
    CHECK(grad_error(f, x, r.grad_a) < 1e-6);
    CHECK(grad_error(f, y, r.grad_b) < 1e-6);
  }
}

TEST_CASE("FedProx term and gradient") {
  const auto arch = testing::tiny_arch();
  auto global = build(arch, 1).cast<double>();
  auto local = build(arch, 2).cast<double>();
  double sq = 0;
  for (std::size_t i = 0; i < local.size(); ++i) sq += std::pow(local.values()[i] - global.values()[i], 2);
  CHECK(fedprox_term(local, global, 2.0) == doctest::Approx(sq));
  CHECK(fedprox_term(global, global, 2.0) == 0.0);

  const std::array<Group, 1> enc{Group::encoder};
  double sq_enc = 0;
  const auto [b, e] = local.layout().range(Group::encoder);
  for (std::size_t i = b; i < e; ++i) sq_enc += std::pow(local.values()[i] - global.values()[i], 2);
  CHECK(fedprox_term(local, global, 0.01, enc) == doctest::Approx(0.005 * sq_enc));

  BasicParameterSet<double> grad(local.layout_ptr());
  fedprox_grad(local, global, 0.5, grad, enc);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double want = (i >= b && i < e) ? 0.5 * (local.values()[i] - global.values()[i]) : 0.0;
    CHECK(grad.values()[i] == doctest::Approx(want));
  }
  auto other = build(testing::tiny_arch(0, 0.0, 20), 1).cast<double>();
  CHECK_THROWS_AS(fedprox_term(local, other, 1.0), ShapeError);
}
