#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ragner/error.hpp"
#include "ragner/rng.hpp"
#include "ragner/tensor.hpp"

namespace ragner::lstm {

// One LSTM direction. Gate blocks within the 4h columns are ordered
// input, forget, cell, output.
struct Cell {
  Matrix wx;    // in x 4h
  Matrix wh;    // h x 4h
  Matrix bias;  // 1 x 4h

  Eigen::Index hidden() const { return wh.rows(); }
};

struct Layer {
  Cell fwd;
  Cell bwd;
};

struct Params {
  std::vector<Layer> layers;

  static Params zeros(std::size_t input_dim, std::size_t hidden, std::size_t n_layers) {
    Params p;
    const auto h = static_cast<Eigen::Index>(hidden);
    for (std::size_t l = 0; l < n_layers; ++l) {
      const auto in = static_cast<Eigen::Index>(l == 0 ? input_dim : 2 * hidden);
      Layer layer;
      for (Cell* c : {&layer.fwd, &layer.bwd}) {
        c->wx = Matrix::Zero(in, 4 * h);
        c->wh = Matrix::Zero(h, 4 * h);
        c->bias = Matrix::Zero(1, 4 * h);
      }
      p.layers.push_back(std::move(layer));
    }
    return p;
  }

  // Uniform(-1/sqrt(h), 1/sqrt(h)) weights, forget-gate bias 1.
  static Params init(std::size_t input_dim, std::size_t hidden, std::size_t n_layers, Rng& rng) {
    auto p = zeros(input_dim, hidden, n_layers);
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    const auto h = static_cast<Eigen::Index>(hidden);
    for (auto& layer : p.layers) {
      for (Cell* c : {&layer.fwd, &layer.bwd}) {
        fill_uniform(c->wx, rng, bound);
        fill_uniform(c->wh, rng, bound);
        c->bias.middleCols(h, h).setOnes();
      }
    }
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string base = "lstm" + std::to_string(l) + ".";
      f(base + "fwd.wx", self.layers[l].fwd.wx);
      f(base + "fwd.wh", self.layers[l].fwd.wh);
      f(base + "fwd.bias", self.layers[l].fwd.bias);
      f(base + "bwd.wx", self.layers[l].bwd.wx);
      f(base + "bwd.wh", self.layers[l].bwd.wh);
      f(base + "bwd.bias", self.layers[l].bwd.bias);
    }
  }
};

struct DirectionCache {
  Matrix x;                  // inputs in processing order
  Matrix gi, gf, gg, go;     // activated gates, n x h
  Matrix c, tanh_c, h;       // n x h
};

struct LayerCache {
  DirectionCache fwd, bwd;
};

struct Cache {
  std::vector<LayerCache> layers;
};

namespace detail {

inline Matrix reversed_rows(const Matrix& m) { return m.colwise().reverse(); }

inline Matrix run_cell(const Cell& cell, const Matrix& x, DirectionCache& dc) {
  const auto n = x.rows();
  const auto h = cell.hidden();
  dc.x = x;
  dc.gi.resize(n, h);
  dc.gf.resize(n, h);
  dc.gg.resize(n, h);
  dc.go.resize(n, h);
  dc.c.resize(n, h);
  dc.tanh_c.resize(n, h);
  dc.h.resize(n, h);
  const Matrix pre_x = x * cell.wx;
  RowVector h_prev = RowVector::Zero(h);
  RowVector c_prev = RowVector::Zero(h);
  RowVector z(4 * h);
  for (Eigen::Index t = 0; t < n; ++t) {
    z = pre_x.row(t) + h_prev * cell.wh + cell.bias.row(0);
    for (Eigen::Index k = 0; k < h; ++k) {
      dc.gi(t, k) = sigmoid(z(k));
      dc.gf(t, k) = sigmoid(z(h + k));
      dc.gg(t, k) = std::tanh(z(2 * h + k));
      dc.go(t, k) = sigmoid(z(3 * h + k));
    }
    dc.c.row(t) = dc.gf.row(t).cwiseProduct(c_prev) + dc.gi.row(t).cwiseProduct(dc.gg.row(t));
    dc.tanh_c.row(t) = dc.c.row(t).array().tanh().matrix();
    dc.h.row(t) = dc.go.row(t).cwiseProduct(dc.tanh_c.row(t));
    h_prev = dc.h.row(t);
    c_prev = dc.c.row(t);
  }
  return dc.h;
}

// Backpropagation through time for one direction; dh_out is in processing
// order. Returns the gradient w.r.t. the inputs (processing order).
inline Matrix backprop_cell(const Cell& cell, const DirectionCache& dc, const Matrix& dh_out, Cell& grad) {
  const auto n = dc.x.rows();
  const auto h = cell.hidden();
  Matrix dz_all(n, 4 * h);
  RowVector dh_next = RowVector::Zero(h);
  RowVector dc_next = RowVector::Zero(h);
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    const RowVector dh = dh_out.row(t) + dh_next;
    const RowVector c_prev = t > 0 ? RowVector(dc.c.row(t - 1)) : RowVector::Zero(h);
    const RowVector dcell = dh.cwiseProduct(dc.go.row(t)).cwiseProduct(
                                (1.0 - dc.tanh_c.row(t).array().square()).matrix()) +
                            dc_next;
    for (Eigen::Index k = 0; k < h; ++k) {
      const double i = dc.gi(t, k), f = dc.gf(t, k), g = dc.gg(t, k), o = dc.go(t, k);
      dz_all(t, k) = dcell(k) * g * i * (1.0 - i);
      dz_all(t, h + k) = dcell(k) * c_prev(k) * f * (1.0 - f);
      dz_all(t, 2 * h + k) = dcell(k) * i * (1.0 - g * g);
      dz_all(t, 3 * h + k) = dh(k) * dc.tanh_c(t, k) * o * (1.0 - o);
    }
    dc_next = dcell.cwiseProduct(dc.gf.row(t));
    dh_next = dz_all.row(t) * cell.wh.transpose();
  }
  grad.wx += dc.x.transpose() * dz_all;
  if (n > 1) grad.wh += dc.h.topRows(n - 1).transpose() * dz_all.bottomRows(n - 1);
  grad.bias.row(0) += dz_all.colwise().sum();
  return dz_all * cell.wx.transpose();
}

}  // namespace detail

// Stacked bidirectional LSTM. Each layer's output is [forward | backward]
// per position; layer l + 1 consumes layer l's concatenated output.
inline Matrix forward(const Params& p, const Matrix& input, Cache* cache = nullptr) {
  require(input.rows() >= 1, "BiLSTM input must be nonempty");
  Cache local;
  Cache& c = cache ? *cache : local;
  c.layers.assign(p.layers.size(), LayerCache{});
  Matrix x = input;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    require(x.cols() == p.layers[l].fwd.wx.rows(), "BiLSTM input width mismatch");
    const Matrix hf = detail::run_cell(p.layers[l].fwd, x, c.layers[l].fwd);
    const Matrix hb = detail::reversed_rows(detail::run_cell(p.layers[l].bwd, detail::reversed_rows(x), c.layers[l].bwd));
    Matrix out(x.rows(), hf.cols() + hb.cols());
    out << hf, hb;
    x = std::move(out);
  }
  return x;
}

// Returns dLoss/dInput and accumulates parameter gradients into `grads`.
inline Matrix backward(const Params& p, const Cache& cache, const Matrix& doutput, Params& grads) {
  Matrix dx = doutput;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto h = p.layers[l].fwd.hidden();
    const Matrix dhf = dx.leftCols(h);
    const Matrix dhb = detail::reversed_rows(dx.rightCols(h));
    const Matrix dxf = detail::backprop_cell(p.layers[l].fwd, cache.layers[l].fwd, dhf, grads.layers[l].fwd);
    const Matrix dxb = detail::reversed_rows(
        detail::backprop_cell(p.layers[l].bwd, cache.layers[l].bwd, dhb, grads.layers[l].bwd));
    dx = dxf + dxb;
  }
  return dx;
}

}  // namespace ragner::lstm
