#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ragner/binary_io.hpp"
#include "ragner/error.hpp"
#include "ragner/rng.hpp"

namespace ragner {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Per-position validity flags (1 = real token, 0 = padding).
using Mask = std::vector<std::uint8_t>;

inline void fill_normal(Matrix& m, Rng& rng, double stddev) {
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = stddev * rng.normal();
}

inline void fill_uniform(Matrix& m, Rng& rng, double bound) {
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.uniform(-bound, bound);
}

// Flat views over anything exposing for_each_tensor(name, tensor).
template <typename P>
std::vector<Matrix*> tensor_list(P& p) {
  std::vector<Matrix*> out;
  p.for_each_tensor([&](const std::string&, Matrix& t) { out.push_back(&t); });
  return out;
}

template <typename P>
std::vector<const Matrix*> tensor_list(const P& p) {
  std::vector<const Matrix*> out;
  p.for_each_tensor([&](const std::string&, const Matrix& t) { out.push_back(&t); });
  return out;
}

template <typename P>
std::vector<std::string> tensor_names(const P& p) {
  std::vector<std::string> out;
  p.for_each_tensor([&](const std::string& name, const Matrix&) { out.push_back(name); });
  return out;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// Row-major element order on disk, independent of Eigen's storage order.
inline void write_tensor(bin::Writer& w, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
}

inline void read_tensor(bin::Reader& rd, Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rd.f64();
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double swish(double z) { return z * sigmoid(z); }

inline double swish_grad(double z) {
  const double s = sigmoid(z);
  return s + z * s * (1.0 - s);
}

// Inverted dropout mask: entries are 0 with probability p, else 1/(1-p).
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform() < p ? 0.0 : keep;
  return m;
}

struct LayerNormCache {
  Matrix xhat;
  Vector inv_std;
};

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm; gain and bias are 1 x d.
inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  cache.xhat.resize(n, d);
  cache.inv_std.resize(n);
  Matrix y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(i) = inv;
    cache.xhat.row(i) = (x.row(i).array() - mean) * inv;
    y.row(i) = cache.xhat.row(i).cwiseProduct(gain.row(0)) + bias.row(0);
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache, Matrix& dgain,
                                  Matrix& dbias) {
  const auto n = dy.rows();
  const auto d = static_cast<double>(dy.cols());
  dgain.row(0) += (dy.cwiseProduct(cache.xhat)).colwise().sum();
  dbias.row(0) += dy.colwise().sum();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVector dxhat = dy.row(i).cwiseProduct(gain.row(0));
    const double m1 = dxhat.sum() / d;
    const double m2 = dxhat.dot(cache.xhat.row(i)) / d;
    dx.row(i) = cache.inv_std(i) * (dxhat.array() - m1 - cache.xhat.row(i).array() * m2).matrix();
  }
  return dx;
}

}  // namespace ragner
