#include "fedssl/losses.hpp"

#include <cmath>
#include <limits>

#include "fedssl/errors.hpp"

namespace fedssl {

namespace {

constexpr double kProbFloor = 1e-12;

template <typename T>
Mat<T> log_softmax_columns(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const T m = logits.col(j).maxCoeff();
    const T lse = m + std::log((logits.col(j).array() - m).exp().sum());
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

template <typename T>
void require_same_shape(const Mat<T>& a, const Mat<T>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                     ")");
  }
}

template <typename T>
Vec<T> column_norms(const Mat<T>& z) {
  Vec<T> n = z.colwise().norm().transpose();
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    if (!(n(i) > T(0))) throw ShapeError("cosine similarity is undefined for a zero vector");
  }
  return n;
}

// Backward of u = z / |z| for each column.
template <typename T>
Mat<T> normalize_backward(const Mat<T>& u, const Vec<T>& norms, const Mat<T>& du) {
  Vec<T> radial = u.cwiseProduct(du).colwise().sum().transpose();
  Mat<T> dz = du - u * radial.asDiagonal();
  return dz * norms.cwiseInverse().asDiagonal();
}

// Column norms floored at kCosineEps. A floored column is scaled by a
// constant, so its backward pass has no radial term.
constexpr double kCosineEps = 1e-8;

template <typename T>
Mat<T> floored_normalize_backward(const Mat<T>& u, const Vec<T>& raw_norms, const Mat<T>& du) {
  Mat<T> dz(du.rows(), du.cols());
  for (Eigen::Index j = 0; j < du.cols(); ++j) {
    if (raw_norms(j) > T(kCosineEps)) {
      dz.col(j) = (du.col(j) - u.col(j) * u.col(j).dot(du.col(j))) / raw_norms(j);
    } else {
      dz.col(j) = du.col(j) / T(kCosineEps);
    }
  }
  return dz;
}

}  // namespace

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be positive");
}

template <typename T>
Mat<T> softmax_columns(const Mat<T>& logits) {
  return log_softmax_columns(logits).array().exp();
}

template <typename T>
T cosine_sim(const Eigen::Ref<const Vec<T>>& u, const Eigen::Ref<const Vec<T>>& v) {
  if (u.size() != v.size()) throw ShapeError("cosine_sim: length mismatch");
  const T nu = u.norm();
  const T nv = v.norm();
  if (!(nu > T(0)) || !(nv > T(0))) throw ShapeError("cosine similarity is undefined for a zero vector");
  return u.dot(v) / (nu * nv);
}

template <typename T>
T ntxent_pair(std::size_t i, const Mat<T>& z_a, const Mat<T>& z_b, const ContrastiveConfig& cfg) {
  cfg.validate();
  require_same_shape(z_a, z_b, "ntxent_pair");
  const auto batch = static_cast<std::size_t>(z_a.cols());
  if (batch == 0) throw ShapeError("ntxent needs a non-empty batch");
  if (i >= batch) throw ShapeError("ntxent_pair: index out of range");
  const T inv_tau = static_cast<T>(1.0 / cfg.temperature);
  const auto ii = static_cast<Eigen::Index>(i);
  const Vec<T> anchor = z_a.col(ii);

  std::vector<T> terms;
  terms.reserve(2 * batch);
  for (Eigen::Index k = 0; k < z_a.cols(); ++k) {
    if (k != ii || cfg.include_self_term) terms.push_back(cosine_sim<T>(anchor, z_a.col(k)) * inv_tau);
    terms.push_back(cosine_sim<T>(anchor, z_b.col(k)) * inv_tau);
  }
  T m = terms.front();
  for (T t : terms) m = std::max(m, t);
  T acc = 0;
  for (T t : terms) acc += std::exp(t - m);
  const T positive = cosine_sim<T>(anchor, z_b.col(ii)) * inv_tau;
  return m + std::log(acc) - positive;
}

template <typename T>
NtXentResult<T> ntxent_batch(const Mat<T>& z_a, const Mat<T>& z_b, const ContrastiveConfig& cfg, bool with_grad) {
  cfg.validate();
  require_same_shape(z_a, z_b, "ntxent_batch");
  const Eigen::Index batch = z_a.cols();
  if (batch == 0) throw ShapeError("ntxent needs a non-empty batch");
  const T inv_tau = static_cast<T>(1.0 / cfg.temperature);

  const Vec<T> norm_a = column_norms(z_a);
  const Vec<T> norm_b = column_norms(z_b);
  const Mat<T> ua = z_a * norm_a.cwiseInverse().asDiagonal();
  const Mat<T> ub = z_b * norm_b.cwiseInverse().asDiagonal();
  const Mat<T> s_aa = ua.transpose() * ua;
  const Mat<T> s_ab = ua.transpose() * ub;
  const Mat<T> s_bb = ub.transpose() * ub;

  // Row i of `same` / `cross` holds anchor i's similarities; fills the
  // softmax over the row into p_same / p_cross and returns the row loss.
  Mat<T> p_aa, p_ab, p_bb, p_ba;
  if (with_grad) {
    p_aa.resize(batch, batch);
    p_ab.resize(batch, batch);
    p_bb.resize(batch, batch);
    p_ba.resize(batch, batch);
  }
  auto anchor_losses = [&](const Mat<T>& same, const auto& cross, Mat<T>& p_same, Mat<T>& p_cross) {
    T total = 0;
    for (Eigen::Index i = 0; i < batch; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (Eigen::Index k = 0; k < batch; ++k) {
        if (k != i || cfg.include_self_term) m = std::max(m, same(i, k) * inv_tau);
        m = std::max(m, cross(i, k) * inv_tau);
      }
      T acc = 0;
      for (Eigen::Index k = 0; k < batch; ++k) {
        if (k != i || cfg.include_self_term) acc += std::exp(same(i, k) * inv_tau - m);
        acc += std::exp(cross(i, k) * inv_tau - m);
      }
      const T lse = m + std::log(acc);
      total += lse - cross(i, i) * inv_tau;
      if (with_grad) {
        for (Eigen::Index k = 0; k < batch; ++k) {
          p_same(i, k) = (k != i || cfg.include_self_term) ? std::exp(same(i, k) * inv_tau - lse) : T(0);
          p_cross(i, k) = std::exp(cross(i, k) * inv_tau - lse);
        }
      }
    }
    return total;
  };

  NtXentResult<T> r;
  r.sum = anchor_losses(s_aa, s_ab, p_aa, p_ab) + anchor_losses(s_bb, s_ab.transpose(), p_bb, p_ba);
  r.mean = r.sum / static_cast<T>(2 * batch);
  if (!with_grad) return r;

  const T scale = inv_tau / static_cast<T>(2 * batch);
  const Mat<T> eye = Mat<T>::Identity(batch, batch);
  const Mat<T> g_aa = scale * p_aa;
  const Mat<T> g_bb = scale * p_bb;
  const Mat<T> g_ab = scale * ((p_ab - eye) + (p_ba - eye).transpose());
  const Mat<T> du_a = ua * (g_aa + g_aa.transpose()) + ub * g_ab.transpose();
  const Mat<T> du_b = ub * (g_bb + g_bb.transpose()) + ua * g_ab;
  r.grad_a = normalize_backward(ua, norm_a, du_a);
  r.grad_b = normalize_backward(ub, norm_b, du_b);
  return r;
}

template <typename T>
LossResult<T> cross_entropy(const Mat<T>& logits, const Mat<T>& onehot) {
  require_same_shape(logits, onehot, "cross_entropy");
  const Eigen::Index n = logits.cols();
  if (n == 0) throw ShapeError("cross_entropy needs at least one sample");
  const Mat<T> logp = log_softmax_columns(logits);
  const T floor = static_cast<T>(std::log(kProbFloor));
  LossResult<T> r;
  r.grad.resize(logits.rows(), n);
  T total = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    T weight = 0;
    for (Eigen::Index c = 0; c < logits.rows(); ++c) {
      const T y = onehot(c, j);
      if (y == T(0)) {
        r.grad(c, j) = 0;
        continue;
      }
      if (logp(c, j) < floor) {
        total -= y * floor;
        r.grad(c, j) = 0;
      } else {
        total -= y * logp(c, j);
        weight += y;
        r.grad(c, j) = -y;
      }
    }
    r.grad.col(j) += weight * logp.col(j).array().exp().matrix();
  }
  r.value = total / static_cast<T>(n);
  r.grad /= static_cast<T>(n);
  return r;
}

template <typename T>
LossResult<T> cross_entropy(const Mat<T>& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.cols()) {
    throw ShapeError("cross_entropy: label count does not match batch");
  }
  Mat<T> onehot = Mat<T>::Zero(logits.rows(), logits.cols());
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] < 0 || labels[j] >= logits.rows()) throw ShapeError("cross_entropy: label out of range");
    onehot(labels[j], static_cast<Eigen::Index>(j)) = T(1);
  }
  return cross_entropy(logits, onehot);
}

template <typename T>
LossResult<T> fixmatch_loss(const Mat<T>& weak_logits, const Mat<T>& strong_logits, double threshold,
                            double temperature) {
  require_same_shape(weak_logits, strong_logits, "fixmatch_loss");
  const Eigen::Index n = weak_logits.cols();
  LossResult<T> r;
  r.grad = Mat<T>::Zero(strong_logits.rows(), n);
  if (n == 0) return r;
  const Mat<T> p_weak = softmax_columns<T>(weak_logits / static_cast<T>(temperature));
  const Mat<T> logp_strong = log_softmax_columns(strong_logits);
  const T floor = static_cast<T>(std::log(kProbFloor));
  T total = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index pseudo = 0;
    const T conf = p_weak.col(j).maxCoeff(&pseudo);
    if (static_cast<double>(conf) < threshold) continue;
    const T lp = logp_strong(pseudo, j);
    total -= std::max(lp, floor);
    if (lp >= floor) {
      r.grad.col(j) = logp_strong.col(j).array().exp().matrix();
      r.grad(pseudo, j) -= T(1);
    }
  }
  r.value = total / static_cast<T>(n);
  r.grad /= static_cast<T>(n);
  return r;
}

template <typename T>
LossResult<T> uda_consistency(const Mat<T>& weak_logits, const Mat<T>& strong_logits, double temperature) {
  require_same_shape(weak_logits, strong_logits, "uda_consistency");
  const Eigen::Index n = weak_logits.cols();
  LossResult<T> r;
  r.grad = Mat<T>::Zero(strong_logits.rows(), n);
  if (n == 0) return r;
  const Mat<T> logp_weak = log_softmax_columns<T>(weak_logits / static_cast<T>(temperature));
  const Mat<T> logp_strong = log_softmax_columns(strong_logits);
  const Mat<T> p_weak = logp_weak.array().exp();
  T total = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index c = 0; c < weak_logits.rows(); ++c) {
      if (p_weak(c, j) > T(0)) total += p_weak(c, j) * (logp_weak(c, j) - logp_strong(c, j));
    }
  }
  r.value = total / static_cast<T>(n);
  r.grad = (logp_strong.array().exp() - p_weak.array()).matrix() / static_cast<T>(n);
  return r;
}

template <typename T>
PairLossResult<T> cr_consistency(const Mat<T>& repr_a, const Mat<T>& repr_b) {
  require_same_shape(repr_a, repr_b, "cr_consistency");
  const Eigen::Index n = repr_a.cols();
  if (n == 0) throw ShapeError("cr_consistency needs at least one sample");
  const T count = static_cast<T>(repr_a.size());
  const Mat<T> diff = repr_a - repr_b;
  PairLossResult<T> r;
  const T mse = diff.squaredNorm() / count;

  // Post-ReLU representations can be exactly zero, so the norm is floored
  // rather than rejected; such a column has cosine 0 with everything.
  const Vec<T> norm_a = repr_a.colwise().norm().transpose();
  const Vec<T> norm_b = repr_b.colwise().norm().transpose();
  const Mat<T> ua = repr_a * norm_a.cwiseMax(T(kCosineEps)).cwiseInverse().asDiagonal();
  const Mat<T> ub = repr_b * norm_b.cwiseMax(T(kCosineEps)).cwiseInverse().asDiagonal();
  const Vec<T> cos = ua.cwiseProduct(ub).colwise().sum().transpose();
  r.value = mse + (T(1) - cos.mean());

  const T inv_n = T(1) / static_cast<T>(n);
  // d(-mean cos)/du_a = -ub / n, then through the normalisation.
  r.grad_a = (T(2) / count) * diff + floored_normalize_backward<T>(ua, norm_a, -inv_n * ub);
  r.grad_b = (-T(2) / count) * diff + floored_normalize_backward<T>(ub, norm_b, -inv_n * ua);
  return r;
}

template <typename T>
double fedprox_term(const BasicParameterSet<T>& local, const BasicParameterSet<T>& global, double mu,
                    std::span<const Group> groups) {
  local.require_congruent(global, "fedprox_term");
  auto l = local.values();
  auto g = global.values();
  double acc = 0.0;
  auto add = [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const double d = static_cast<double>(l[i]) - static_cast<double>(g[i]);
      acc += d * d;
    }
  };
  if (groups.empty()) {
    add(0, l.size());
  } else {
    for (Group grp : groups) {
      auto [b, e] = local.layout().range(grp);
      add(b, e);
    }
  }
  return 0.5 * mu * acc;
}

template <typename T>
void fedprox_grad(const BasicParameterSet<T>& local, const BasicParameterSet<T>& global, double mu,
                  BasicParameterSet<T>& grad, std::span<const Group> groups) {
  local.require_congruent(global, "fedprox_grad");
  local.require_congruent(grad, "fedprox_grad");
  auto l = local.values();
  auto g = global.values();
  auto out = grad.values();
  auto add = [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out[i] += static_cast<T>(mu * (static_cast<double>(l[i]) - g[i]));
  };
  if (groups.empty()) {
    add(0, l.size());
  } else {
    for (Group grp : groups) {
      auto [b, e] = local.layout().range(grp);
      add(b, e);
    }
  }
}

#define FEDSSL_INSTANTIATE_LOSSES(T)                                                                          \
  template Mat<T> softmax_columns<T>(const Mat<T>&);                                                          \
  template T cosine_sim<T>(const Eigen::Ref<const Vec<T>>&, const Eigen::Ref<const Vec<T>>&);                \
  template T ntxent_pair<T>(std::size_t, const Mat<T>&, const Mat<T>&, const ContrastiveConfig&);             \
  template NtXentResult<T> ntxent_batch<T>(const Mat<T>&, const Mat<T>&, const ContrastiveConfig&, bool);     \
  template LossResult<T> cross_entropy<T>(const Mat<T>&, const Mat<T>&);                                      \
  template LossResult<T> cross_entropy<T>(const Mat<T>&, std::span<const int>);                               \
  template LossResult<T> fixmatch_loss<T>(const Mat<T>&, const Mat<T>&, double, double);                      \
  template LossResult<T> uda_consistency<T>(const Mat<T>&, const Mat<T>&, double);                            \
  template PairLossResult<T> cr_consistency<T>(const Mat<T>&, const Mat<T>&);                                 \
  template double fedprox_term<T>(const BasicParameterSet<T>&, const BasicParameterSet<T>&, double,           \
                                  std::span<const Group>);                                                    \
  template void fedprox_grad<T>(const BasicParameterSet<T>&, const BasicParameterSet<T>&, double,             \
                                BasicParameterSet<T>&, std::span<const Group>);

FEDSSL_INSTANTIATE_LOSSES(float)
FEDSSL_INSTANTIATE_LOSSES(double)

}  // namespace fedssl
