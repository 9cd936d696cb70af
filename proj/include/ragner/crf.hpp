#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "ragner/error.hpp"
#include "ragner/tensor.hpp"

namespace ragner::crf {

// Linear-chain CRF scores. transitions(i, j) scores label i followed by j;
// start and end are 1 x L.
struct Scores {
  const Matrix& transitions;
  const Matrix& start;
  const Matrix& end;

  Eigen::Index num_labels() const { return transitions.rows(); }
};

struct Path {
  std::vector<int> labels;
  double score = 0.0;
};

inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

inline void check_shapes(const Matrix& emissions, const Scores& s) {
  const auto L = s.num_labels();
  require(emissions.rows() >= 1, "CRF needs at least one position");
  require(emissions.cols() == L && s.transitions.cols() == L && s.start.size() == L && s.end.size() == L,
          "CRF score shapes are inconsistent");
}

inline double path_score(const Matrix& emissions, std::span<const int> labels, const Scores& s) {
  const auto L = static_cast<int>(s.num_labels());
  require(static_cast<Eigen::Index>(labels.size()) == emissions.rows(), "path length differs from emissions");
  for (int y : labels) {
    if (y < 0 || y >= L) fail(ErrorCode::invalid_argument, "label id " + std::to_string(y) + " outside label set");
  }
  // Summation order matches the Viterbi recursion so scores agree exactly.
  double total = s.start(0, labels.front()) + emissions(0, labels.front());
  for (std::size_t t = 1; t < labels.size(); ++t) {
    total = (total + s.transitions(labels[t - 1], labels[t])) + emissions(static_cast<Eigen::Index>(t), labels[t]);
  }
  return total + s.end(0, labels.back());
}

// alpha(t, y) = log-sum of all prefixes ending in y at t (start included).
inline Matrix forward_table(const Matrix& emissions, const Scores& s) {
  const auto n = emissions.rows();
  const auto L = s.num_labels();
  Matrix alpha(n, L);
  alpha.row(0) = s.start.row(0) + emissions.row(0);
  Eigen::VectorXd tmp(L);
  for (Eigen::Index t = 1; t < n; ++t) {
    for (Eigen::Index j = 0; j < L; ++j) {
      tmp = alpha.row(t - 1).transpose() + s.transitions.col(j);
      alpha(t, j) = log_sum_exp(tmp) + emissions(t, j);
    }
  }
  return alpha;
}

// beta(t, y) = log-sum of all suffixes after y at t (end included).
inline Matrix backward_table(const Matrix& emissions, const Scores& s) {
  const auto n = emissions.rows();
  const auto L = s.num_labels();
  Matrix beta(n, L);
  beta.row(n - 1) = s.end.row(0);
  Eigen::VectorXd tmp(L);
  for (Eigen::Index t = n - 1; t-- > 0;) {
    for (Eigen::Index i = 0; i < L; ++i) {
      tmp = s.transitions.row(i).transpose() + emissions.row(t + 1).transpose() + beta.row(t + 1).transpose();
      beta(t, i) = log_sum_exp(tmp);
    }
  }
  return beta;
}

inline double log_partition(const Matrix& emissions, const Scores& s) {
  check_shapes(emissions, s);
  const Matrix alpha = forward_table(emissions, s);
  const Eigen::VectorXd last = alpha.row(alpha.rows() - 1).transpose() + s.end.row(0).transpose();
  return log_sum_exp(last);
}

// Negative log-likelihood of the gold path; always >= 0.
inline double nll(const Matrix& emissions, std::span<const int> gold, const Scores& s) {
  check_shapes(emissions, s);
  return log_partition(emissions, s) - path_score(emissions, gold, s);
}

struct NllGradients {
  Matrix emissions;
  Matrix transitions;
  Matrix start;
  Matrix end;
};

// Loss and its gradients: expected feature counts under the model minus
// the gold path's counts, via forward-backward marginals.
inline double nll_with_gradients(const Matrix& emissions, std::span<const int> gold, const Scores& s,
                                 NllGradients& g) {
  check_shapes(emissions, s);
  const auto n = emissions.rows();
  const auto L = s.num_labels();
  const double gold_score = path_score(emissions, gold, s);
  const Matrix alpha = forward_table(emissions, s);
  const Matrix beta = backward_table(emissions, s);
  const Eigen::VectorXd last = alpha.row(n - 1).transpose() + s.end.row(0).transpose();
  const double log_z = log_sum_exp(last);

  g.emissions = ((alpha + beta).array() - log_z).exp().matrix();
  g.start = g.emissions.row(0);
  g.end = g.emissions.row(n - 1);
  g.transitions = Matrix::Zero(L, L);
  for (Eigen::Index t = 1; t < n; ++t) {
    for (Eigen::Index i = 0; i < L; ++i)
      for (Eigen::Index j = 0; j < L; ++j)
        g.transitions(i, j) +=
            std::exp(alpha(t - 1, i) + s.transitions(i, j) + emissions(t, j) + beta(t, j) - log_z);
  }
  for (Eigen::Index t = 0; t < n; ++t) {
    const int y = gold[static_cast<std::size_t>(t)];
    g.emissions(t, y) -= 1.0;
    if (t > 0) g.transitions(gold[static_cast<std::size_t>(t - 1)], y) -= 1.0;
  }
  g.start(0, gold.front()) -= 1.0;
  g.end(0, gold.back()) -= 1.0;
  return log_z - gold_score;
}

// Maximum-score path. Ties go to the lowest label index, both for the
// final label and at every backtrack step.
inline Path viterbi(const Matrix& emissions, const Scores& s) {
  check_shapes(emissions, s);
  const auto n = emissions.rows();
  const auto L = s.num_labels();
  Matrix delta(n, L);
  Eigen::MatrixXi back(n, L);
  delta.row(0) = s.start.row(0) + emissions.row(0);
  for (Eigen::Index t = 1; t < n; ++t) {
    for (Eigen::Index j = 0; j < L; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (Eigen::Index i = 0; i < L; ++i) {
        const double v = delta(t - 1, i) + s.transitions(i, j);
        if (v > best) {
          best = v;
          arg = static_cast<int>(i);
        }
      }
      delta(t, j) = best + emissions(t, j);
      back(t, j) = arg;
    }
  }
  Path p;
  p.labels.assign(static_cast<std::size_t>(n), 0);
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < L; ++j) {
    const double v = delta(n - 1, j) + s.end(0, j);
    if (v > best) {
      best = v;
      p.labels.back() = static_cast<int>(j);
    }
  }
  p.score = best;
  for (Eigen::Index t = n - 1; t > 0; --t) {
    p.labels[static_cast<std::size_t>(t - 1)] = back(t, p.labels[static_cast<std::size_t>(t)]);
  }
  return p;
}

// Per-position argmax of emissions, ignoring transitions.
inline Path argmax(const Matrix& emissions, const Scores& s) {
  check_shapes(emissions, s);
  Path p;
  for (Eigen::Index t = 0; t < emissions.rows(); ++t) {
    Eigen::Index arg = 0;
    emissions.row(t).maxCoeff(&arg);
    p.labels.push_back(static_cast<int>(arg));
  }
  p.score = path_score(emissions, p.labels, s);
  return p;
}

}  // namespace ragner::crf
