#include "duet/router_net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace duet::router {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void matvec(const Linear& lin, std::span<const double> x,
            std::vector<double>& y) {
  y.assign(lin.w.rows, 0.0);
  for (std::size_t r = 0; r < lin.w.rows; ++r) {
    double acc = lin.b.data[r];
    const double* row = lin.w.data.data() + r * lin.w.cols;
    for (std::size_t c = 0; c < lin.w.cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

// dW += dy x^T, db += dy, dx = W^T dy
void matvec_backward(const Linear& lin, std::span<const double> x,
                     std::span<const double> dy, Linear& g,
                     std::vector<double>& dx) {
  for (std::size_t r = 0; r < lin.w.rows; ++r) {
    g.b.data[r] += dy[r];
    double* grow = g.w.data.data() + r * lin.w.cols;
    for (std::size_t c = 0; c < lin.w.cols; ++c) grow[c] += dy[r] * x[c];
  }
  dx.assign(lin.w.cols, 0.0);
  for (std::size_t r = 0; r < lin.w.rows; ++r) {
    const double* row = lin.w.data.data() + r * lin.w.cols;
    for (std::size_t c = 0; c < lin.w.cols; ++c) dx[c] += row[c] * dy[r];
  }
}

// y = gamma * xhat + beta; returns xhat and 1/sqrt(var+eps) for backward.
void layer_norm(const Norm& n, std::span<const double> x,
                std::vector<double>& xhat, double& inv_std,
                std::vector<double>& y) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  inv_std = 1.0 / std::sqrt(var + kLnEps);
  xhat.resize(d);
  y.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    xhat[j] = (x[j] - mean) * inv_std;
    y[j] = n.gamma.data[j] * xhat[j] + n.beta.data[j];
  }
}

void layer_norm_backward(const Norm& n, std::span<const double> xhat,
                         double inv_std, std::span<const double> dy, Norm& g,
                         std::vector<double>& dx) {
  const std::size_t d = xhat.size();
  std::vector<double> dxhat(d);
  double m1 = 0.0, m2 = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    g.gamma.data[j] += dy[j] * xhat[j];
    g.beta.data[j] += dy[j];
    dxhat[j] = dy[j] * n.gamma.data[j];
    m1 += dxhat[j];
    m2 += dxhat[j] * xhat[j];
  }
  m1 /= static_cast<double>(d);
  m2 /= static_cast<double>(d);
  dx.resize(d);
  for (std::size_t j = 0; j < d; ++j)
    dx[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
}

Linear make_linear(std::size_t out, std::size_t in) {
  Linear l;
  l.w = Tensor(out, in);
  l.b = Tensor(1, out);
  return l;
}

Norm make_norm(std::size_t dim) {
  Norm n;
  n.gamma = Tensor(1, dim);
  n.beta = Tensor(1, dim);
  return n;
}

}  // namespace

void RouterConfig::validate() const {
  if (topk < 1 || hidden_dim_in < 1 || embed_dim < 1 || width < 1 ||
      blocks < 1 || expansion < 1)
    throw InvalidArgument("router config: all dims must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw InvalidArgument("router config: dropout must be in [0,1)");
}

std::size_t RouterConfig::param_count() const {
  const auto k = static_cast<std::size_t>(topk);
  const auto h = static_cast<std::size_t>(hidden_dim_in);
  const auto e = static_cast<std::size_t>(embed_dim);
  const auto w = static_cast<std::size_t>(width);
  const auto x = static_cast<std::size_t>(expansion) * w;
  std::size_t n = 0;
  n += w * k + w;      // proj_logits
  n += w * h + w;      // proj_hidden
  n += w * e + w;      // proj_embed
  n += w * 3 * w + w;  // fusion
  n += static_cast<std::size_t>(blocks) *
       (2 * w + (x * w + x) + (w * x + w));  // norm + fc1 + fc2 per block
  n += 2 * w;  // final norm
  n += w + 1;  // head
  return n;
}

RouterWeights RouterWeights::zeros(const RouterConfig& cfg) {
  cfg.validate();
  const auto w = static_cast<std::size_t>(cfg.width);
  const auto x = static_cast<std::size_t>(cfg.expansion) * w;
  RouterWeights r;
  r.cfg = cfg;
  r.proj_logits = make_linear(w, static_cast<std::size_t>(cfg.topk));
  r.proj_hidden = make_linear(w, static_cast<std::size_t>(cfg.hidden_dim_in));
  r.proj_embed = make_linear(w, static_cast<std::size_t>(cfg.embed_dim));
  r.fusion = make_linear(w, 3 * w);
  r.blocks.resize(static_cast<std::size_t>(cfg.blocks));
  for (auto& b : r.blocks) {
    b.norm = make_norm(w);
    b.fc1 = make_linear(x, w);
    b.fc2 = make_linear(w, x);
  }
  r.final_norm = make_norm(w);
  r.head = make_linear(1, w);
  return r;
}

RouterWeights RouterWeights::init(const RouterConfig& cfg, std::uint64_t seed) {
  RouterWeights r = zeros(cfg);
  Rng rng(seed);
  for (auto& [name, t] : r.tensors()) {
    const bool is_weight = name.ends_with(".w");
    const bool is_gamma = name.ends_with(".gamma");
    for (double& v : t->data) {
      if (is_weight)
        v = 0.02 * rng.normal();
      else if (is_gamma)
        v = 1.0;
      else
        v = 0.0;
    }
  }
  return r;
}

std::vector<std::pair<std::string, Tensor*>> RouterWeights::tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.reserve(8 + blocks.size() * 6 + 4);
  out.emplace_back("proj_logits.w", &proj_logits.w);
  out.emplace_back("proj_logits.b", &proj_logits.b);
  out.emplace_back("proj_hidden.w", &proj_hidden.w);
  out.emplace_back("proj_hidden.b", &proj_hidden.b);
  out.emplace_back("proj_embed.w", &proj_embed.w);
  out.emplace_back("proj_embed.b", &proj_embed.b);
  out.emplace_back("fusion.w", &fusion.w);
  out.emplace_back("fusion.b", &fusion.b);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    out.emplace_back(p + "norm.gamma", &blocks[i].norm.gamma);
    out.emplace_back(p + "norm.beta", &blocks[i].norm.beta);
    out.emplace_back(p + "fc1.w", &blocks[i].fc1.w);
    out.emplace_back(p + "fc1.b", &blocks[i].fc1.b);
    out.emplace_back(p + "fc2.w", &blocks[i].fc2.w);
    out.emplace_back(p + "fc2.b", &blocks[i].fc2.b);
  }
  out.emplace_back("final_norm.gamma", &final_norm.gamma);
  out.emplace_back("final_norm.beta", &final_norm.beta);
  out.emplace_back("head.w", &head.w);
  out.emplace_back("head.b", &head.b);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> RouterWeights::tensors()
    const {
  auto mut = const_cast<RouterWeights*>(this)->tensors();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(std::move(n), t);
  return out;
}

bool RouterWeights::operator==(const RouterWeights& o) const {
  if (!(cfg == o.cfg) || p_th != o.p_th) return false;
  auto a = tensors();
  auto b = o.tensors();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(*a[i].second == *b[i].second)) return false;
  return true;
}

Grads zero_grads(const RouterConfig& cfg) { return RouterWeights::zeros(cfg); }

Tape::Tape(const RouterWeights& w, bool train, Rng* rng)
    : w_(w), train_(train), rng_(rng) {
  if (train_ && w_.cfg.dropout > 0.0 && rng_ == nullptr)
    throw InvalidArgument("tape: dropout training requires an rng");
}

double Tape::run(const Sample& s) {
  const auto& cfg = w_.cfg;
  if (s.logits.size() != static_cast<std::size_t>(cfg.topk) ||
      s.hidden.size() != static_cast<std::size_t>(cfg.hidden_dim_in) ||
      s.embed.size() != static_cast<std::size_t>(cfg.embed_dim))
    throw ShapeMismatch("router forward: input dims do not match config");
  sample_ = &s;

  matvec(w_.proj_logits, s.logits, xl_);
  matvec(w_.proj_hidden, s.hidden, xh_);
  matvec(w_.proj_embed, s.embed, xe_);
  std::vector<double> concat;
  concat.reserve(xl_.size() * 3);
  concat.insert(concat.end(), xl_.begin(), xl_.end());
  concat.insert(concat.end(), xh_.begin(), xh_.end());
  concat.insert(concat.end(), xe_.begin(), xe_.end());
  matvec(w_.fusion, concat, trunk_in_);

  const double keep = 1.0 - cfg.dropout;
  const bool drop = train_ && cfg.dropout > 0.0;
  auto apply_dropout = [&](std::vector<double>& v, std::vector<double>& mask) {
    mask.assign(v.size(), 1.0);
    if (!drop) return;
    for (std::size_t j = 0; j < v.size(); ++j) {
      mask[j] = rng_->bernoulli(keep) ? 1.0 / keep : 0.0;
      v[j] *= mask[j];
    }
  };

  std::vector<double> t = trunk_in_;
  blocks_.assign(w_.blocks.size(), {});
  std::vector<double> n, tmp;
  for (std::size_t i = 0; i < w_.blocks.size(); ++i) {
    const Block& blk = w_.blocks[i];
    BlockCache& c = blocks_[i];
    c.input = t;
    layer_norm(blk.norm, t, c.xhat, c.inv_std, n);
    matvec(blk.fc1, n, c.a1);
    c.g1.resize(c.a1.size());
    for (std::size_t j = 0; j < c.a1.size(); ++j) c.g1[j] = gelu(c.a1[j]);
    apply_dropout(c.g1, c.m1);
    matvec(blk.fc2, c.g1, c.a2);
    apply_dropout(c.a2, c.m2);
    for (std::size_t j = 0; j < t.size(); ++j) t[j] += c.a2[j];
  }
  layer_norm(w_.final_norm, t, final_xhat_, final_inv_std_, final_out_);
  std::vector<double> z;
  matvec(w_.head, final_out_, z);
  return z[0];
}

void Tape::backward(double dlogit, Grads& g) const {
  if (sample_ == nullptr)
    throw InvalidArgument("tape backward: run() was never called");

  std::vector<double> df;
  {
    std::vector<double> dz{dlogit};
    matvec_backward(w_.head, final_out_, dz, g.head, df);
  }
  std::vector<double> dt;
  layer_norm_backward(w_.final_norm, final_xhat_, final_inv_std_, df,
                      g.final_norm, dt);

  std::vector<double> da2, dg1, dpre, dn, dx;
  for (std::size_t i = w_.blocks.size(); i-- > 0;) {
    const Block& blk = w_.blocks[i];
    const BlockCache& c = blocks_[i];
    da2.resize(dt.size());
    for (std::size_t j = 0; j < dt.size(); ++j) da2[j] = dt[j] * c.m2[j];
    matvec_backward(blk.fc2, c.g1, da2, g.blocks[i].fc2, dg1);
    dpre.resize(dg1.size());
    for (std::size_t j = 0; j < dg1.size(); ++j)
      dpre[j] = dg1[j] * c.m1[j] * gelu_grad(c.a1[j]);
    // fc1's input is the block norm output; rebuild it from the cache.
    std::vector<double> nvec(c.xhat.size());
    for (std::size_t j = 0; j < nvec.size(); ++j)
      nvec[j] = blk.norm.gamma.data[j] * c.xhat[j] + blk.norm.beta.data[j];
    matvec_backward(blk.fc1, nvec, dpre, g.blocks[i].fc1, dn);
    layer_norm_backward(blk.norm, c.xhat, c.inv_std, dn, g.blocks[i].norm, dx);
    for (std::size_t j = 0; j < dt.size(); ++j) dt[j] += dx[j];
  }

  std::vector<double> dconcat;
  matvec_backward(w_.fusion,
                  [&] {
                    std::vector<double> concat;
                    concat.reserve(xl_.size() * 3);
                    concat.insert(concat.end(), xl_.begin(), xl_.end());
                    concat.insert(concat.end(), xh_.begin(), xh_.end());
                    concat.insert(concat.end(), xe_.begin(), xe_.end());
                    return concat;
                  }(),
                  dt, g.fusion, dconcat);
  const std::size_t w = xl_.size();
  std::vector<double> dxl(dconcat.begin(), dconcat.begin() + w);
  std::vector<double> dxh(dconcat.begin() + w, dconcat.begin() + 2 * w);
  std::vector<double> dxe(dconcat.begin() + 2 * w, dconcat.end());
  std::vector<double> unused;
  matvec_backward(w_.proj_logits, sample_->logits, dxl, g.proj_logits, unused);
  matvec_backward(w_.proj_hidden, sample_->hidden, dxh, g.proj_hidden, unused);
  matvec_backward(w_.proj_embed, sample_->embed, dxe, g.proj_embed, unused);
}

double forward_logit(const RouterWeights& w, const Sample& s) {
  Tape tape(w, false, nullptr);
  return tape.run(s);
}

double forward(const RouterWeights& w, const Sample& s) {
  return sigmoid(forward_logit(w, s));
}

ClassWeights ClassWeights::from_counts(std::size_t n_pos, std::size_t n_neg) {
  const auto total = static_cast<double>(n_pos + n_neg);
  ClassWeights cw;
  if (n_pos > 0) cw.pos = total / (2.0 * static_cast<double>(n_pos));
  if (n_neg > 0) cw.neg = total / (2.0 * static_cast<double>(n_neg));
  return cw;
}

std::pair<double, Grads> loss_and_grads(const RouterWeights& w,
                                        std::span<const Sample> batch,
                                        ClassWeights cw, bool train, Rng* rng) {
  if (batch.empty()) throw InvalidArgument("loss: empty batch");
  Grads g = zero_grads(w.cfg);
  const double n = static_cast<double>(batch.size());
  double total = 0.0;
  for (const Sample& s : batch) {
    Tape tape(w, train, rng);
    const double z = tape.run(s);
    const double y = s.divergent ? 1.0 : 0.0;
    const double wi = s.divergent ? cw.pos : cw.neg;
    const double bce =
        std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
    total += wi * bce;
    tape.backward(wi * (sigmoid(z) - y) / n, g);
  }
  return {total / n, std::move(g)};
}

double loss(const RouterWeights& w, std::span<const Sample> batch,
            ClassWeights cw) {
  if (batch.empty()) throw InvalidArgument("loss: empty batch");
  double total = 0.0;
  for (const Sample& s : batch) {
    const double z = forward_logit(w, s);
    const double y = s.divergent ? 1.0 : 0.0;
    const double wi = s.divergent ? cw.pos : cw.neg;
    total += wi * (std::max(z, 0.0) - z * y +
                   std::log1p(std::exp(-std::fabs(z))));
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace duet::router
