#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ragner/binary_io.hpp"
#include "ragner/error.hpp"
#include "ragner/rng.hpp"
#include "ragner/tensor.hpp"

namespace ragner {

struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 32;
  std::size_t d_ffn = 64;
  std::size_t max_len = 2048;
  std::size_t vocab_size = 0;
  double dropout_rate = 0.0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(n_layers >= 1, "encoder needs at least one layer");
    require(n_heads >= 1 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(d_ffn >= 1, "d_ffn must be >= 1");
    require(max_len >= 1, "max_len must be >= 1");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout rate must lie in [0, 1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct EncoderLayer {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;
  Matrix ln2_gain, ln2_bias;
  Matrix ffn_w, ffn_v, ffn_out;  // SwiGLU: out = (swish(x W) * (x V)) Wout

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "ln1_gain", self.ln1_gain);
    f(prefix + "ln1_bias", self.ln1_bias);
    f(prefix + "wq", self.wq);
    f(prefix + "wk", self.wk);
    f(prefix + "wv", self.wv);
    f(prefix + "wo", self.wo);
    f(prefix + "ln2_gain", self.ln2_gain);
    f(prefix + "ln2_bias", self.ln2_bias);
    f(prefix + "ffn_w", self.ffn_w);
    f(prefix + "ffn_v", self.ffn_v);
    f(prefix + "ffn_out", self.ffn_out);
  }
};

// All learnable encoder tensors. Also used, zero-initialized, as the
// gradient accumulator.
struct EncoderParams {
  Matrix embedding;  // vocab_size x d_model
  std::vector<EncoderLayer> layers;
  Matrix final_gain, final_bias;

  static EncoderParams zeros(const EncoderConfig& cfg) {
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    const auto f = static_cast<Eigen::Index>(cfg.d_ffn);
    EncoderParams p;
    p.embedding = Matrix::Zero(static_cast<Eigen::Index>(cfg.vocab_size), d);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
      l.ln1_gain = Matrix::Zero(1, d);
      l.ln1_bias = Matrix::Zero(1, d);
      l.wq = Matrix::Zero(d, d);
      l.wk = Matrix::Zero(d, d);
      l.wv = Matrix::Zero(d, d);
      l.wo = Matrix::Zero(d, d);
      l.ln2_gain = Matrix::Zero(1, d);
      l.ln2_bias = Matrix::Zero(1, d);
      l.ffn_w = Matrix::Zero(d, f);
      l.ffn_v = Matrix::Zero(d, f);
      l.ffn_out = Matrix::Zero(f, d);
    }
    p.final_gain = Matrix::Zero(1, d);
    p.final_bias = Matrix::Zero(1, d);
    return p;
  }

  static EncoderParams init(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    auto p = zeros(cfg);
    Rng rng(seed);
    constexpr double stddev = 0.02;
    fill_normal(p.embedding, rng, stddev);
    for (auto& l : p.layers) {
      l.ln1_gain.setOnes();
      l.ln2_gain.setOnes();
      for (Matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_w, &l.ffn_v, &l.ffn_out}) fill_normal(*m, rng, stddev);
    }
    p.final_gain.setOnes();
    return p;
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit_all(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, F& f) {
    f(std::string("embedding"), self.embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      EncoderLayer::visit(self.layers[i], "layer" + std::to_string(i) + ".", f);
    }
    f(std::string("final_gain"), self.final_gain);
    f(std::string("final_bias"), self.final_bias);
  }
};

struct HiddenStates {
  Matrix values;  // seq_len x d_model
  Mask mask;
};

// Symmetric ALiBi: bias[h](i, j) = -m_h * |i - j|, m_h = 2^(-8 (h+1) / H).
inline double alibi_slope(std::size_t head, std::size_t n_heads) {
  return std::exp2(-8.0 * static_cast<double>(head + 1) / static_cast<double>(n_heads));
}

inline std::vector<Matrix> alibi_bias(std::size_t seq_len, std::size_t n_heads) {
  require(seq_len >= 1 && n_heads >= 1, "alibi_bias needs seq_len >= 1 and n_heads >= 1");
  std::vector<Matrix> out;
  out.reserve(n_heads);
  const auto n = static_cast<Eigen::Index>(seq_len);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const double m = alibi_slope(h, n_heads);
    Matrix b(n, n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) b(i, j) = -m * static_cast<double>(i > j ? i - j : j - i);
    out.push_back(std::move(b));
  }
  return out;
}

// Row-wise SwiGLU over x (rows are positions).
inline Matrix swiglu(const Matrix& x, const Matrix& w, const Matrix& v, const Matrix& w_out) {
  const Matrix u = x * w;
  const Matrix g = x * v;
  return (u.unaryExpr([](double z) { return swish(z); }).cwiseProduct(g)) * w_out;
}

inline Vector swiglu(const Vector& x, const Matrix& w, const Matrix& v, const Matrix& w_out) {
  const Matrix row = x.transpose();
  return swiglu(row, w, v, w_out).transpose();
}

struct EncoderLayerCache {
  Matrix x_in;
  LayerNormCache ln1;
  Matrix a, q, k, v;
  std::vector<Matrix> probs;  // per head, seq_len x seq_len
  Matrix ctx;
  Matrix attn_drop;  // empty when dropout is off
  Matrix x_mid;
  LayerNormCache ln2;
  Matrix b, u, g, h;
  Matrix ffn_drop;
};

struct EncoderCache {
  bool filled = false;
  std::vector<int> ids;
  Mask mask;
  Matrix embed_drop;
  std::vector<EncoderLayerCache> layers;
  LayerNormCache final_ln;
};

namespace detail {

inline Matrix apply_drop(const Matrix& x, const Matrix& drop) { return drop.size() == 0 ? x : x.cwiseProduct(drop); }

}  // namespace detail

// Bidirectional pre-norm transformer forward pass. Masked positions neither
// attend nor are attended to. Dropout masks are drawn from rng_seed and
// only in train_mode.
inline HiddenStates encode_forward(std::span<const int> ids, const Mask& mask, const EncoderParams& params,
                                   const EncoderConfig& cfg, bool train_mode, std::uint64_t rng_seed,
                                   EncoderCache* cache = nullptr) {
  require(ids.size() == mask.size(), "ids and mask lengths differ");
  if (ids.size() > cfg.max_len) {
    fail(ErrorCode::invalid_argument,
         "sequence of length " + std::to_string(ids.size()) + " exceeds encoder max_len " + std::to_string(cfg.max_len));
  }
  require(!ids.empty(), "cannot encode an empty sequence");
  const auto n = static_cast<Eigen::Index>(ids.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool dropping = train_mode && cfg.dropout_rate > 0.0;
  Rng rng(rng_seed);

  EncoderCache local;
  EncoderCache& c = cache ? *cache : local;
  c = EncoderCache{};
  c.ids.assign(ids.begin(), ids.end());
  c.mask = mask;
  c.layers.resize(params.layers.size());

  Matrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    require(id >= 0 && id < params.embedding.rows(), "token id out of range");
    x.row(i) = params.embedding.row(id);
  }
  if (dropping) {
    c.embed_drop = dropout_mask(n, d, cfg.dropout_rate, rng);
    x = x.cwiseProduct(c.embed_drop);
  }

  const auto bias = alibi_bias(ids.size(), cfg.n_heads);
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& L = params.layers[li];
    auto& lc = c.layers[li];
    lc.x_in = x;
    lc.a = layer_norm(x, L.ln1_gain, L.ln1_bias, lc.ln1);
    lc.q = lc.a * L.wq;
    lc.k = lc.a * L.wk;
    lc.v = lc.a * L.wv;
    lc.ctx = Matrix::Zero(n, d);
    lc.probs.assign(cfg.n_heads, Matrix());
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      Matrix s = (lc.q.middleCols(col, dh) * lc.k.middleCols(col, dh).transpose()) * scale + bias[h];
      Matrix p = Matrix::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j)
          if (mask[static_cast<std::size_t>(j)]) mx = std::max(mx, s(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
          if (!mask[static_cast<std::size_t>(j)]) continue;
          p(i, j) = std::exp(s(i, j) - mx);
          z += p(i, j);
        }
        p.row(i) /= z;
      }
      lc.ctx.middleCols(col, dh) = p * lc.v.middleCols(col, dh);
      lc.probs[h] = std::move(p);
    }
    Matrix attn = lc.ctx * L.wo;
    if (dropping) lc.attn_drop = dropout_mask(n, d, cfg.dropout_rate, rng);
    x = x + detail::apply_drop(attn, lc.attn_drop);
    lc.x_mid = x;

    lc.b = layer_norm(x, L.ln2_gain, L.ln2_bias, lc.ln2);
    lc.u = lc.b * L.ffn_w;
    lc.g = lc.b * L.ffn_v;
    lc.h = lc.u.unaryExpr([](double z) { return swish(z); }).cwiseProduct(lc.g);
    Matrix ffn = lc.h * L.ffn_out;
    if (dropping) lc.ffn_drop = dropout_mask(n, d, cfg.dropout_rate, rng);
    x = x + detail::apply_drop(ffn, lc.ffn_drop);
  }

  HiddenStates out;
  out.values = layer_norm(x, params.final_gain, params.final_bias, c.final_ln);
  out.mask = mask;
  c.filled = true;
  return out;
}

struct EncoderGradients {
  EncoderParams params;
  Matrix inputs;  // gradient w.r.t. each position's embedding row, seq_len x d_model
};

// Reverse-mode pass; `upstream` is dLoss/dHidden (seq_len x d_model).
inline EncoderGradients encode_backward(const Matrix& upstream, const EncoderCache& cache, const EncoderParams& params,
                                        const EncoderConfig& cfg) {
  if (!cache.filled) fail(ErrorCode::invalid_argument, "encode_backward called without a forward cache");
  const auto n = static_cast<Eigen::Index>(cache.ids.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  require(upstream.rows() == n && upstream.cols() == d, "upstream gradient shape mismatch");
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  EncoderGradients out;
  out.params = EncoderParams::zeros(cfg);
  auto& G = out.params;

  Matrix dx = layer_norm_backward(upstream, params.final_gain, cache.final_ln, G.final_gain, G.final_bias);

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& L = params.layers[li];
    const auto& lc = cache.layers[li];
    auto& GL = G.layers[li];

    // Feed-forward branch.
    const Matrix dffn = detail::apply_drop(dx, lc.ffn_drop);
    GL.ffn_out += lc.h.transpose() * dffn;
    const Matrix dhid = dffn * L.ffn_out.transpose();
    const Matrix s = lc.u.unaryExpr([](double z) { return swish(z); });
    const Matrix dg = dhid.cwiseProduct(s);
    const Matrix du = dhid.cwiseProduct(lc.g).cwiseProduct(lc.u.unaryExpr([](double z) { return swish_grad(z); }));
    GL.ffn_w += lc.b.transpose() * du;
    GL.ffn_v += lc.b.transpose() * dg;
    const Matrix db = du * L.ffn_w.transpose() + dg * L.ffn_v.transpose();
    dx += layer_norm_backward(db, L.ln2_gain, lc.ln2, GL.ln2_gain, GL.ln2_bias);

    // Attention branch.
    const Matrix dattn = detail::apply_drop(dx, lc.attn_drop);
    GL.wo += lc.ctx.transpose() * dattn;
    const Matrix dctx = dattn * L.wo.transpose();
    Matrix dq = Matrix::Zero(n, d), dk = Matrix::Zero(n, d), dv = Matrix::Zero(n, d);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      const Matrix& p = lc.probs[h];
      const auto dout = dctx.middleCols(col, dh);
      const Matrix dp = dout * lc.v.middleCols(col, dh).transpose();
      dv.middleCols(col, dh) = p.transpose() * dout;
      const Eigen::VectorXd rowdot = (dp.cwiseProduct(p)).rowwise().sum();
      const Matrix ds = p.cwiseProduct(dp.colwise() - rowdot);
      dq.middleCols(col, dh) = ds * lc.k.middleCols(col, dh) * scale;
      dk.middleCols(col, dh) = ds.transpose() * lc.q.middleCols(col, dh) * scale;
    }
    GL.wq += lc.a.transpose() * dq;
    GL.wk += lc.a.transpose() * dk;
    GL.wv += lc.a.transpose() * dv;
    const Matrix da = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
    dx += layer_norm_backward(da, L.ln1_gain, lc.ln1, GL.ln1_gain, GL.ln1_bias);
  }

  out.inputs = detail::apply_drop(dx, cache.embed_drop);
  for (Eigen::Index i = 0; i < n; ++i) G.embedding.row(cache.ids[static_cast<std::size_t>(i)]) += out.inputs.row(i);
  return out;
}

// Arithmetic mean over unmasked positions.
inline Vector pool_mean(const HiddenStates& hidden) {
  Vector acc = Vector::Zero(hidden.values.cols());
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < hidden.values.rows(); ++i) {
    if (!hidden.mask[static_cast<std::size_t>(i)]) continue;
    acc += hidden.values.row(i).transpose();
    ++count;
  }
  if (count == 0) fail(ErrorCode::invalid_argument, "pool_mean over an all-masked sequence");
  return acc / static_cast<double>(count);
}

// Checkpoint section: "RGNRENC\0", version, six config integers, dropout
// rate, then every tensor in declaration order (row-major f64).
inline constexpr std::string_view kEncoderMagic{"RGNRENC\0", 8};
inline constexpr std::uint64_t kEncoderVersion = 1;

inline void write_encoder(bin::Writer& w, const EncoderConfig& cfg, const EncoderParams& params) {
  w.bytes(kEncoderMagic);
  w.u64(kEncoderVersion);
  for (auto v : {cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ffn, cfg.max_len, cfg.vocab_size}) w.u64(v);
  w.f64(cfg.dropout_rate);
  params.for_each_tensor([&](const std::string&, const Matrix& m) { write_tensor(w, m); });
}

inline std::pair<EncoderConfig, EncoderParams> read_encoder(bin::Reader& rd) {
  if (rd.bytes(8) != kEncoderMagic) fail(ErrorCode::format, "bad encoder checkpoint magic");
  if (rd.u64() != kEncoderVersion) fail(ErrorCode::format, "unsupported encoder checkpoint version");
  EncoderConfig cfg;
  cfg.n_layers = rd.u64();
  cfg.n_heads = rd.u64();
  cfg.d_model = rd.u64();
  cfg.d_ffn = rd.u64();
  cfg.max_len = rd.u64();
  cfg.vocab_size = rd.u64();
  cfg.dropout_rate = rd.f64();
  try {
    cfg.validate();
  } catch (const Error& e) {
    fail(ErrorCode::format, std::string("invalid encoder config in checkpoint: ") + e.what());
  }
  auto params = EncoderParams::zeros(cfg);
  params.for_each_tensor([&](const std::string&, Matrix& m) { read_tensor(rd, m); });
  return {cfg, std::move(params)};
}

}  // namespace ragner
