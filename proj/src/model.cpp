#include "fedssl/model.hpp"

#include <algorithm>
#include <cmath>

#include "fedssl/errors.hpp"
#include "fedssl/io.hpp"

namespace fedssl {

std::string_view group_name(Group g) {
  switch (g) {
    case Group::encoder: return "encoder";
    case Group::projector: return "projector";
    case Group::classifier: return "classifier";
  }
  return "?";
}

// --- architecture ----------------------------------------------------------

void ArchitectureSpec::validate() const {
  if (input_dim < 1) throw ConfigError("input_dim must be positive");
  if (conv.empty()) throw ConfigError("at least one conv block is required");
  for (const auto& c : conv) {
    if (c.out_channels < 1 || c.kernel < 1 || c.stride < 1 || c.pool < 1) {
      throw ConfigError("conv channels, kernel, stride and pool must be positive");
    }
  }
  if (embedding_dim < 1 || projection_hidden < 1 || projection_dim < 1 || num_classes < 2) {
    throw ConfigError("embedding, projection and class dimensions must be positive (num_classes >= 2)");
  }
  if (projection_bn_count < 0 || projection_bn_count > 2) throw ConfigError("projection_bn_count must be 0, 1 or 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must be in [0, 1)");
  for (int len : block_lengths()) {
    if (len < 1) throw ConfigError("conv stack reduces the sequence length to zero");
  }
}

std::vector<int> ArchitectureSpec::block_lengths() const {
  std::vector<int> out;
  int len = input_dim;
  for (const auto& c : conv) {
    const int pad = c.kernel / 2;
    const int conv_len = c.stride > 0 ? (len + 2 * pad - c.kernel) / c.stride + 1 : 0;
    len = c.pool > 0 ? conv_len / c.pool : 0;
    out.push_back(len);
  }
  return out;
}

int ArchitectureSpec::flat_dim() const { return conv.back().out_channels * block_lengths().back(); }

nlohmann::json ArchitectureSpec::to_json() const {
  nlohmann::json j;
  j["input_dim"] = input_dim;
  for (const auto& c : conv) {
    j["conv"].push_back({{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}, {"pool", c.pool}});
  }
  j["embedding_dim"] = embedding_dim;
  j["projection_hidden"] = projection_hidden;
  j["projection_dim"] = projection_dim;
  j["projection_bn_count"] = projection_bn_count;
  j["dropout_rate"] = dropout_rate;
  j["num_classes"] = num_classes;
  j["param_budget"] = param_budget;
  return j;
}

ArchitectureSpec ArchitectureSpec::from_json(const nlohmann::json& j) {
  ArchitectureSpec a;
  try {
    a.input_dim = j.at("input_dim").get<int>();
    a.conv.clear();
    for (const auto& c : j.at("conv")) {
      a.conv.push_back({c.at("out_channels").get<int>(), c.at("kernel").get<int>(), c.at("stride").get<int>(),
                        c.at("pool").get<int>()});
    }
    a.embedding_dim = j.at("embedding_dim").get<int>();
    a.projection_hidden = j.at("projection_hidden").get<int>();
    a.projection_dim = j.at("projection_dim").get<int>();
    a.projection_bn_count = j.at("projection_bn_count").get<int>();
    a.dropout_rate = j.at("dropout_rate").get<double>();
    a.num_classes = j.at("num_classes").get<int>();
    a.param_budget = j.value("param_budget", a.param_budget);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed architecture: ") + e.what());
  }
  return a;
}

// --- layout ----------------------------------------------------------------

ParameterLayout::ParameterLayout(const ArchitectureSpec& arch) {
  arch.validate();
  auto add = [&](std::string name, std::size_t rows, std::size_t cols, Group g) {
    tensors_.push_back({std::move(name), rows, cols, total_, g});
    total_ += rows * cols;
  };
  auto mark = [&](Group g, std::size_t begin) { ranges_[static_cast<int>(g)] = {begin, total_}; };

  std::size_t begin = total_;
  int in_ch = 1;
  for (std::size_t i = 0; i < arch.conv.size(); ++i) {
    const auto& c = arch.conv[i];
    const std::string base = "encoder.conv" + std::to_string(i);
    add(base + ".weight", c.out_channels, static_cast<std::size_t>(c.kernel * in_ch), Group::encoder);
    add(base + ".bias", c.out_channels, 1, Group::encoder);
    in_ch = c.out_channels;
  }
  add("encoder.fc.weight", arch.embedding_dim, arch.flat_dim(), Group::encoder);
  add("encoder.fc.bias", arch.embedding_dim, 1, Group::encoder);
  mark(Group::encoder, begin);

  begin = total_;
  add("projector.fc0.weight", arch.projection_hidden, arch.embedding_dim, Group::projector);
  add("projector.fc0.bias", arch.projection_hidden, 1, Group::projector);
  if (arch.projection_bn_count >= 1) {
    add("projector.bn0.gamma", arch.projection_hidden, 1, Group::projector);
    add("projector.bn0.beta", arch.projection_hidden, 1, Group::projector);
  }
  add("projector.fc1.weight", arch.projection_dim, arch.projection_hidden, Group::projector);
  add("projector.fc1.bias", arch.projection_dim, 1, Group::projector);
  if (arch.projection_bn_count >= 2) {
    add("projector.bn1.gamma", arch.projection_dim, 1, Group::projector);
    add("projector.bn1.beta", arch.projection_dim, 1, Group::projector);
  }
  mark(Group::projector, begin);

  begin = total_;
  add("classifier.fc.weight", arch.num_classes, arch.embedding_dim, Group::classifier);
  add("classifier.fc.bias", arch.num_classes, 1, Group::classifier);
  mark(Group::classifier, begin);
}

const TensorInfo& ParameterLayout::find(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw ShapeError("no tensor named '" + std::string(name) + "'");
}

bool ParameterLayout::contains(std::string_view name) const {
  return std::any_of(tensors_.begin(), tensors_.end(), [&](const TensorInfo& t) { return t.name == name; });
}

bool ParameterLayout::operator==(const ParameterLayout& other) const {
  if (total_ != other.total_ || tensors_.size() != other.tensors_.size()) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& a = tensors_[i];
    const auto& b = other.tensors_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols || a.offset != b.offset) return false;
  }
  return true;
}

// --- parameter sets --------------------------------------------------------

template <typename T>
std::span<T> BasicParameterSet<T>::tensor(std::string_view name) {
  const auto& t = layout_->find(name);
  return std::span<T>(data_).subspan(t.offset, t.size());
}

template <typename T>
std::span<const T> BasicParameterSet<T>::tensor(std::string_view name) const {
  const auto& t = layout_->find(name);
  return std::span<const T>(data_).subspan(t.offset, t.size());
}

template <typename T>
std::span<T> BasicParameterSet<T>::group(Group g) {
  auto [b, e] = layout_->range(g);
  return std::span<T>(data_).subspan(b, e - b);
}

template <typename T>
std::span<const T> BasicParameterSet<T>::group(Group g) const {
  auto [b, e] = layout_->range(g);
  return std::span<const T>(data_).subspan(b, e - b);
}

template <typename T>
Eigen::Map<Mat<T>> BasicParameterSet<T>::matrix(std::string_view name) {
  const auto& t = layout_->find(name);
  return Eigen::Map<Mat<T>>(data_.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                            static_cast<Eigen::Index>(t.cols));
}

template <typename T>
Eigen::Map<const Mat<T>> BasicParameterSet<T>::matrix(std::string_view name) const {
  const auto& t = layout_->find(name);
  return Eigen::Map<const Mat<T>>(data_.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                                  static_cast<Eigen::Index>(t.cols));
}

template <typename T>
bool BasicParameterSet<T>::congruent(const BasicParameterSet& other) const {
  if (!layout_ || !other.layout_) return layout_ == other.layout_;
  return layout_ == other.layout_ || *layout_ == *other.layout_;
}

template <typename T>
void BasicParameterSet<T>::require_congruent(const BasicParameterSet& other, std::string_view what) const {
  if (!congruent(other)) throw ShapeError(std::string(what) + ": parameter sets are not shape-congruent");
}

template <typename T>
std::string BasicParameterSet<T>::checksum() const {
  return checksum_of<T>(std::span<const T>(data_));
}

namespace {

std::vector<std::pair<std::size_t, std::size_t>> ranges_for(const ParameterLayout& l, std::span<const Group> groups) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (groups.empty()) {
    out.emplace_back(0, l.total());
  } else {
    for (Group g : groups) out.push_back(l.range(g));
  }
  return out;
}

}  // namespace

template <typename T>
BasicParameterSet<T> linear_combination(double a, const BasicParameterSet<T>& x, double b,
                                        const BasicParameterSet<T>& y, std::span<const Group> groups) {
  x.require_congruent(y, "linear_combination");
  BasicParameterSet<T> out = x;
  auto o = out.values();
  auto xs = x.values();
  auto ys = y.values();
  for (auto [begin, end] : ranges_for(x.layout(), groups)) {
    for (std::size_t i = begin; i < end; ++i) {
      o[i] = static_cast<T>(a * static_cast<double>(xs[i]) + b * static_cast<double>(ys[i]));
    }
  }
  return out;
}

template <typename T>
void copy_groups(const BasicParameterSet<T>& src, BasicParameterSet<T>& dst, std::span<const Group> groups) {
  src.require_congruent(dst, "copy_groups");
  auto s = src.values();
  auto d = dst.values();
  for (auto [begin, end] : ranges_for(src.layout(), groups)) {
    std::copy(s.begin() + static_cast<std::ptrdiff_t>(begin), s.begin() + static_cast<std::ptrdiff_t>(end),
              d.begin() + static_cast<std::ptrdiff_t>(begin));
  }
}

// --- build and accounting --------------------------------------------------

std::size_t linear_params(std::size_t in, std::size_t out) { return in * out + out; }

std::size_t conv1d_params(std::size_t in_channels, std::size_t out_channels, std::size_t kernel) {
  return in_channels * out_channels * kernel + out_channels;
}

std::size_t count_params(const ArchitectureSpec& arch) { return ParameterLayout(arch).total(); }

std::size_t count_params(const ArchitectureSpec& arch, Group g) {
  auto [b, e] = ParameterLayout(arch).range(g);
  return e - b;
}

std::size_t count_flops(const ArchitectureSpec& arch, Group g) {
  arch.validate();
  std::size_t macs = 0;
  switch (g) {
    case Group::encoder: {
      int len = arch.input_dim;
      int in_ch = 1;
      for (const auto& c : arch.conv) {
        const int conv_len = (len + 2 * (c.kernel / 2) - c.kernel) / c.stride + 1;
        macs += static_cast<std::size_t>(conv_len) * c.out_channels * c.kernel * in_ch;
        len = conv_len / c.pool;
        in_ch = c.out_channels;
      }
      macs += static_cast<std::size_t>(arch.flat_dim()) * arch.embedding_dim;
      break;
    }
    case Group::projector:
      macs += static_cast<std::size_t>(arch.embedding_dim) * arch.projection_hidden;
      macs += static_cast<std::size_t>(arch.projection_hidden) * arch.projection_dim;
      break;
    case Group::classifier:
      macs += static_cast<std::size_t>(arch.embedding_dim) * arch.num_classes;
      break;
  }
  return 2 * macs;
}

std::size_t count_flops(const ArchitectureSpec& arch) {
  return count_flops(arch, Group::encoder) + count_flops(arch, Group::classifier);
}

ParameterSet build(const ArchitectureSpec& arch, std::uint64_t seed) {
  auto layout = std::make_shared<const ParameterLayout>(arch);
  if (layout->total() > arch.param_budget) {
    throw ConfigError("architecture has " + std::to_string(layout->total()) +
                      " trainable parameters, budget is " + std::to_string(arch.param_budget));
  }
  ParameterSet p(layout);
  Rng rng = make_rng(seed, {stream::kInit});
  // Fan-in of the layer owning each tensor is the column count of its weight.
  std::size_t fan_in = 1;
  for (const auto& t : layout->tensors()) {
    auto values = p.tensor(t.name);
    const bool is_weight = t.name.ends_with(".weight");
    if (t.name.ends_with(".gamma")) {
      std::fill(values.begin(), values.end(), 1.0f);
      continue;
    }
    if (t.name.ends_with(".beta")) continue;
    if (is_weight) fan_in = t.cols;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : values) v = static_cast<float>(dist(rng));
  }
  return p;
}

// --- forward / backward ----------------------------------------------------

namespace {

template <typename T>
void im2col(const T* in, int channels, int length, int batch, int kernel, int stride, int out_length, Mat<T>& cols) {
  const int pad = kernel / 2;
  cols.setZero(static_cast<Eigen::Index>(kernel) * channels, static_cast<Eigen::Index>(batch) * out_length);
  for (int n = 0; n < batch; ++n) {
    for (int lo = 0; lo < out_length; ++lo) {
      T* dst = cols.data() + (static_cast<Eigen::Index>(n) * out_length + lo) * cols.rows();
      for (int k = 0; k < kernel; ++k) {
        const int pos = lo * stride + k - pad;
        if (pos < 0 || pos >= length) continue;
        const T* src = in + (static_cast<std::ptrdiff_t>(n) * length + pos) * channels;
        std::copy(src, src + channels, dst + static_cast<std::ptrdiff_t>(k) * channels);
      }
    }
  }
}

template <typename T>
void col2im(const Mat<T>& cols, int channels, int length, int batch, int kernel, int stride, int out_length,
            T* out) {
  const int pad = kernel / 2;
  for (int n = 0; n < batch; ++n) {
    for (int lo = 0; lo < out_length; ++lo) {
      const T* src = cols.data() + (static_cast<Eigen::Index>(n) * out_length + lo) * cols.rows();
      for (int k = 0; k < kernel; ++k) {
        const int pos = lo * stride + k - pad;
        if (pos < 0 || pos >= length) continue;
        T* dst = out + (static_cast<std::ptrdiff_t>(n) * length + pos) * channels;
        const T* s = src + static_cast<std::ptrdiff_t>(k) * channels;
        for (int c = 0; c < channels; ++c) dst[c] += s[c];
      }
    }
  }
}

constexpr double kBatchNormEps = 1e-5;

template <typename T>
Mat<T> batchnorm_forward(const Mat<T>& x, std::span<const T> gamma, std::span<const T> beta,
                         BatchNormCache<T>* cache) {
  if (x.cols() < 2) throw ShapeError("batch norm needs at least two samples per batch");
  const T n = static_cast<T>(x.cols());
  Vec<T> mean = x.rowwise().sum() / n;
  Mat<T> centered = x.colwise() - mean;
  Vec<T> var = centered.array().square().rowwise().sum() / n;
  Vec<T> inv_std = (var.array() + static_cast<T>(kBatchNormEps)).rsqrt();
  Mat<T> xhat = centered.array().colwise() * inv_std.array();
  Eigen::Map<const Vec<T>> g(gamma.data(), static_cast<Eigen::Index>(gamma.size()));
  Eigen::Map<const Vec<T>> b(beta.data(), static_cast<Eigen::Index>(beta.size()));
  Mat<T> y = (xhat.array().colwise() * g.array()).colwise() + b.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Mat<T> batchnorm_backward(const Mat<T>& dy, const BatchNormCache<T>& cache, std::span<const T> gamma,
                          std::span<T> d_gamma, std::span<T> d_beta) {
  const T n = static_cast<T>(dy.cols());
  Eigen::Map<const Vec<T>> g(gamma.data(), static_cast<Eigen::Index>(gamma.size()));
  Eigen::Map<Vec<T>> dg(d_gamma.data(), static_cast<Eigen::Index>(d_gamma.size()));
  Eigen::Map<Vec<T>> db(d_beta.data(), static_cast<Eigen::Index>(d_beta.size()));
  dg += dy.cwiseProduct(cache.xhat).rowwise().sum();
  db += dy.rowwise().sum();
  Mat<T> dxhat = dy.array().colwise() * g.array();
  Vec<T> sum_dxhat = dxhat.rowwise().sum();
  Vec<T> sum_dxhat_xhat = dxhat.cwiseProduct(cache.xhat).rowwise().sum();
  Mat<T> dx = (n * dxhat.array() - (cache.xhat.array().colwise() * sum_dxhat_xhat.array())).colwise() -
              sum_dxhat.array();
  return dx.array().colwise() * (cache.inv_std.array() / n);
}

template <typename T>
Eigen::Map<Vec<T>> as_vec(std::span<T> s) {
  return Eigen::Map<Vec<T>>(s.data(), static_cast<Eigen::Index>(s.size()));
}

template <typename T>
Eigen::Map<const Vec<T>> as_vec(std::span<const T> s) {
  return Eigen::Map<const Vec<T>>(s.data(), static_cast<Eigen::Index>(s.size()));
}

// Linear layer y = W x + b, gradients accumulated.
template <typename T>
Mat<T> linear_backward(const BasicParameterSet<T>& p, const std::string& base, const Mat<T>& x, const Mat<T>& dy,
                       BasicParameterSet<T>& grad) {
  grad.matrix(base + ".weight").noalias() += dy * x.transpose();
  as_vec(grad.tensor(base + ".bias")) += dy.rowwise().sum();
  return p.matrix(base + ".weight").transpose() * dy;
}

template <typename T>
Mat<T> linear_forward(const BasicParameterSet<T>& p, const std::string& base, const Mat<T>& x) {
  Mat<T> y = p.matrix(base + ".weight") * x;
  y.colwise() += as_vec(p.tensor(base + ".bias"));
  return y;
}

}  // namespace

template <typename T>
Network<T>::Network(ArchitectureSpec arch)
    : arch_(std::move(arch)),
      layout_(std::make_shared<const ParameterLayout>(arch_)),
      lengths_(arch_.block_lengths()) {}

template <typename T>
Mat<T> Network<T>::encode(const BasicParameterSet<T>& p, const Mat<T>& x, Mode mode, Rng* rng,
                          EncoderCache<T>* cache) const {
  if (x.rows() != arch_.input_dim) {
    throw ShapeError("encoder expects input dimension " + std::to_string(arch_.input_dim) + ", got " +
                     std::to_string(x.rows()));
  }
  if (p.size() != layout_->total()) throw ShapeError("encode: parameter set does not match architecture");
  const int batch = static_cast<int>(x.cols());
  if (cache) {
    cache->conv.assign(arch_.conv.size(), {});
    cache->batch = batch;
  }

  Mat<T> cur = x;  // (channels * length) x batch, channels fastest
  int in_ch = 1;
  int len = arch_.input_dim;
  Mat<T> cols;
  for (std::size_t i = 0; i < arch_.conv.size(); ++i) {
    const auto& spec = arch_.conv[i];
    const std::string base = "encoder.conv" + std::to_string(i);
    const int conv_len = (len + 2 * (spec.kernel / 2) - spec.kernel) / spec.stride + 1;
    const int pooled_len = conv_len / spec.pool;

    im2col(cur.data(), in_ch, len, batch, spec.kernel, spec.stride, conv_len, cols);
    Mat<T> act = p.matrix(base + ".weight") * cols;
    act.colwise() += as_vec(p.tensor(base + ".bias"));
    act = act.cwiseMax(T(0));

    Mat<T> pooled(spec.out_channels, static_cast<Eigen::Index>(batch) * pooled_len);
    std::vector<Eigen::Index> argmax(static_cast<std::size_t>(pooled.size()));
    for (int n = 0; n < batch; ++n) {
      for (int j = 0; j < pooled_len; ++j) {
        const Eigen::Index out_col = static_cast<Eigen::Index>(n) * pooled_len + j;
        const Eigen::Index first = static_cast<Eigen::Index>(n) * conv_len + static_cast<Eigen::Index>(j) * spec.pool;
        for (int c = 0; c < spec.out_channels; ++c) {
          Eigen::Index best = first;
          T best_v = act(c, first);
          for (int q = 1; q < spec.pool; ++q) {
            const T v = act(c, first + q);
            if (v > best_v) {
              best_v = v;
              best = first + q;
            }
          }
          pooled(c, out_col) = best_v;
          argmax[static_cast<std::size_t>(out_col * spec.out_channels + c)] = best * spec.out_channels + c;
        }
      }
    }
    if (cache) {
      auto& cc = cache->conv[i];
      cc.cols = std::move(cols);
      cc.act = std::move(act);
      cc.argmax = std::move(argmax);
      cc.in_length = len;
      cc.out_length = conv_len;
      cols = Mat<T>();
    }
    cur = Eigen::Map<Mat<T>>(pooled.data(), static_cast<Eigen::Index>(spec.out_channels) * pooled_len, batch);
    in_ch = spec.out_channels;
    len = pooled_len;
  }

  Mat<T> hidden = linear_forward(p, "encoder.fc", cur).cwiseMax(T(0));
  Mat<T> out = hidden;
  Mat<T> mask;
  if (mode == Mode::train && arch_.dropout_rate > 0.0) {
    if (!rng) throw TrainingError("dropout in training mode needs a random generator");
    std::bernoulli_distribution keep(1.0 - arch_.dropout_rate);
    const T scale = static_cast<T>(1.0 / (1.0 - arch_.dropout_rate));
    mask.resize(hidden.rows(), hidden.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? scale : T(0);
    out = hidden.cwiseProduct(mask);
  }
  if (cache) {
    cache->flat = std::move(cur);
    cache->hidden = std::move(hidden);
    cache->dropout_mask = std::move(mask);
  }
  return out;
}

template <typename T>
void Network<T>::encode_backward(const BasicParameterSet<T>& p, const EncoderCache<T>& cache, const Mat<T>& d_out,
                                 BasicParameterSet<T>& grad) const {
  Mat<T> d_hidden = cache.dropout_mask.size() > 0 ? Mat<T>(d_out.cwiseProduct(cache.dropout_mask)) : d_out;
  d_hidden = (cache.hidden.array() > T(0)).select(d_hidden, T(0));
  Mat<T> d_cur = linear_backward(p, "encoder.fc", cache.flat, d_hidden, grad);

  const int batch = cache.batch;
  for (std::size_t ii = arch_.conv.size(); ii-- > 0;) {
    const auto& spec = arch_.conv[ii];
    const auto& cc = cache.conv[ii];
    const std::string base = "encoder.conv" + std::to_string(ii);
    const int in_ch = ii == 0 ? 1 : arch_.conv[ii - 1].out_channels;

    Mat<T> d_act = Mat<T>::Zero(cc.act.rows(), cc.act.cols());
    const T* d_pooled = d_cur.data();
    for (std::size_t k = 0; k < cc.argmax.size(); ++k) d_act.data()[cc.argmax[k]] += d_pooled[k];
    d_act = (cc.act.array() > T(0)).select(d_act, T(0));

    grad.matrix(base + ".weight").noalias() += d_act * cc.cols.transpose();
    as_vec(grad.tensor(base + ".bias")) += d_act.rowwise().sum();
    if (ii == 0) break;

    Mat<T> d_cols = p.matrix(base + ".weight").transpose() * d_act;
    Mat<T> d_in = Mat<T>::Zero(static_cast<Eigen::Index>(in_ch) * cc.in_length, batch);
    col2im(d_cols, in_ch, cc.in_length, batch, spec.kernel, spec.stride, cc.out_length, d_in.data());
    d_cur = std::move(d_in);
  }
}

template <typename T>
Mat<T> Network<T>::project(const BasicParameterSet<T>& p, const Mat<T>& emb, ProjectorCache<T>* cache) const {
  if (emb.rows() != arch_.embedding_dim) throw ShapeError("projector input has the wrong embedding width");
  const int bn = arch_.projection_bn_count;
  if (cache) {
    cache->input = emb;
    cache->bn.assign(static_cast<std::size_t>(bn), {});
  }
  Mat<T> h = linear_forward(p, "projector.fc0", emb);
  if (cache) cache->pre0 = h;
  if (bn >= 1) {
    h = batchnorm_forward<T>(h, p.tensor("projector.bn0.gamma"), p.tensor("projector.bn0.beta"),
                             cache ? &cache->bn[0] : nullptr);
  }
  h = h.cwiseMax(T(0));
  Mat<T> out = linear_forward(p, "projector.fc1", h);
  if (bn >= 2) {
    out = batchnorm_forward<T>(out, p.tensor("projector.bn1.gamma"), p.tensor("projector.bn1.beta"),
                               cache ? &cache->bn[1] : nullptr);
  }
  if (cache) cache->hidden = std::move(h);
  return out;
}

template <typename T>
Mat<T> Network<T>::project_backward(const BasicParameterSet<T>& p, const ProjectorCache<T>& cache,
                                   const Mat<T>& d_out, BasicParameterSet<T>& grad) const {
  const int bn = arch_.projection_bn_count;
  Mat<T> d = d_out;
  if (bn >= 2) {
    d = batchnorm_backward<T>(d, cache.bn[1], p.tensor("projector.bn1.gamma"), grad.tensor("projector.bn1.gamma"),
                              grad.tensor("projector.bn1.beta"));
  }
  Mat<T> d_hidden = linear_backward(p, "projector.fc1", cache.hidden, d, grad);
  d_hidden = (cache.hidden.array() > T(0)).select(d_hidden, T(0));
  if (bn >= 1) {
    d_hidden = batchnorm_backward<T>(d_hidden, cache.bn[0], p.tensor("projector.bn0.gamma"),
                                     grad.tensor("projector.bn0.gamma"), grad.tensor("projector.bn0.beta"));
  }
  return linear_backward(p, "projector.fc0", cache.input, d_hidden, grad);
}

template <typename T>
Mat<T> Network<T>::classify(const BasicParameterSet<T>& p, const Mat<T>& emb) const {
  if (emb.rows() != arch_.embedding_dim) throw ShapeError("classifier input has the wrong embedding width");
  return linear_forward(p, "classifier.fc", emb);
}

template <typename T>
Mat<T> Network<T>::classify_backward(const BasicParameterSet<T>& p, const Mat<T>& emb, const Mat<T>& d_out,
                                     BasicParameterSet<T>& grad) const {
  return linear_backward(p, "classifier.fc", emb, d_out, grad);
}

std::vector<int> argmax_columns(const MatF& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index best = 0;
    logits.col(j).maxCoeff(&best);
    out[static_cast<std::size_t>(j)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const Network<float>& net, const ParameterSet& p, const MatF& x, std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(x.cols()));
  const auto total = static_cast<std::size_t>(x.cols());
  for (std::size_t start = 0; start < total; start += batch_size) {
    const auto n = static_cast<Eigen::Index>(std::min(batch_size, total - start));
    MatF batch = x.middleCols(static_cast<Eigen::Index>(start), n);
    auto pred = argmax_columns(net.classify(p, net.encode(p, batch, Mode::eval)));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

// --- checkpoints -----------------------------------------------------------

void write_checkpoint(const std::filesystem::path& dir, const ParameterSet& p, const ArchitectureSpec& arch,
                      const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);
  if (!(ParameterLayout(arch) == p.layout())) throw ShapeError("checkpoint parameters do not match architecture");
  write_array<float>(dir / "tensors.f32", p.values());
  nlohmann::json m;
  m["format"] = "fedssl-checkpoint-v1";
  m["arch"] = arch.to_json();
  m["seed"] = meta.seed;
  m["round"] = meta.round;
  m["extra"] = meta.extra;
  m["checksum"] = p.checksum();
  m["storage"] = "float32 little-endian, column-major (rows, cols) per tensor";
  for (const auto& t : p.layout().tensors()) {
    m["tensors"].push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", t.offset},
                            {"group", std::string(group_name(t.group))}});
  }
  write_json(dir / "manifest.json", m);
}

Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  const auto m = read_json(dir / "manifest.json");
  Checkpoint ck;
  try {
    ck.arch = ArchitectureSpec::from_json(m.at("arch"));
    ck.meta.seed = m.at("seed").get<std::uint64_t>();
    ck.meta.round = m.at("round").get<int>();
    ck.meta.extra = m.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  ck.params = ParameterSet(std::make_shared<const ParameterLayout>(ck.arch));
  auto values = read_array<float>(dir / "tensors.f32");
  if (values.size() != ck.params.size()) throw DataError("checkpoint tensor file has the wrong size");
  std::copy(values.begin(), values.end(), ck.params.values().begin());
  if (ck.params.checksum() != m.value("checksum", std::string())) {
    throw DataError("checkpoint checksum mismatch in " + dir.string());
  }
  return ck;
}

std::size_t checkpoint_bytes(const std::filesystem::path& dir) {
  std::size_t total = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file()) total += static_cast<std::size_t>(entry.file_size());
  }
  return total;
}

template class BasicParameterSet<float>;
template class BasicParameterSet<double>;
template class Network<float>;
template class Network<double>;
template BasicParameterSet<float> linear_combination(double, const BasicParameterSet<float>&, double,
                                                     const BasicParameterSet<float>&, std::span<const Group>);
template BasicParameterSet<double> linear_combination(double, const BasicParameterSet<double>&, double,
                                                      const BasicParameterSet<double>&, std::span<const Group>);
template void copy_groups(const BasicParameterSet<float>&, BasicParameterSet<float>&, std::span<const Group>);
template void copy_groups(const BasicParameterSet<double>&, BasicParameterSet<double>&, std::span<const Group>);

}  // namespace fedssl
