#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>

#include "topkd/matrix.hpp"

namespace topkd {

// Norm threshold below which cosine similarity is defined as 0 instead of
// dividing by a vanishing norm.
inline constexpr double kCosineEps = 1e-12;

// a (n x k) times b^T (k x m), i.e. result[i][j] = sum_k a[i][k] * b[j][k].
inline Matrix matmul_transpose(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_transpose: inner dimension mismatch (" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.cols()) + ")");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto bj = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += ai[k] * bj[k];
      out(i, j) = acc;
    }
  }
  return out;
}

// Plain a (n x k) times b (k x m).
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch (" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out(i, j) += aik * b(k, j);
      }
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

// Row-wise log-softmax with max subtraction; stable for entries of any
// magnitude. exp of each output row sums to 1.
inline Matrix log_softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto row = m.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) sum += std::exp(row[j] - mx);
    const double lse = std::log(sum);
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = row[j] - mx - lse;
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& m) {
  Matrix out = log_softmax_rows(m);
  for (double& v : out.data()) v = std::exp(v);
  return out;
}

// Mean negative log-likelihood of the target entry per row.
inline double cross_entropy_rows(const Matrix& logits, const IndexVector& targets) {
  if (targets.size() != logits.rows()) {
    throw std::invalid_argument("cross_entropy_rows: target count " +
                                std::to_string(targets.size()) + " != rows " +
                                std::to_string(logits.rows()));
  }
  for (std::size_t t : targets) {
    if (t >= logits.cols()) {
      throw std::out_of_range("cross_entropy_rows: target " + std::to_string(t) +
                              " out of range for " + std::to_string(logits.cols()) +
                              " classes");
    }
  }
  const Matrix lsm = log_softmax_rows(logits);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) total -= lsm(i, targets[i]);
  return total / static_cast<double>(logits.rows());
}

// (u . v) / (|u| |v|), clamped to [-1, 1]; 0 when either norm is below eps.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v,
                                double eps = kCosineEps) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch (" +
                                std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()) + ")");
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  if (nu < eps || nv < eps) return 0.0;
  return std::clamp(dot / (nu * nv), -1.0, 1.0);
}

namespace detail {

inline void check_k(std::size_t k, std::size_t n, const char* where) {
  if (k < 1 || k > n) {
    throw std::invalid_argument(std::string(where) + ": k=" + std::to_string(k) +
                                " out of range for length " + std::to_string(n));
  }
}

}  // namespace detail

// Indices of the k largest entries, descending value order.
// Ties break toward the lower index.
inline IndexVector topk_indices(std::span<const double> v, std::size_t k) {
  detail::check_k(k, v.size(), "topk_indices");
  IndexVector idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (v[a] != v[b]) return v[a] > v[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

// Indices of the k smallest entries, ascending value order.
// Ties break toward the lower index.
inline IndexVector bottomk_indices(std::span<const double> v, std::size_t k) {
  detail::check_k(k, v.size(), "bottomk_indices");
  IndexVector idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (v[a] != v[b]) return v[a] < v[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

// Lowest index among the maxima; consistent with topk_indices(v, 1)[0].
inline std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace topkd
