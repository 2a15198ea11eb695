#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "topkd/matrix.hpp"
#include "topkd/numerics.hpp"
#include "topkd/scaling.hpp"

namespace topkd {

// Scalar loss plus its exact gradient with respect to the student logits.
// The teacher is always treated as a constant; no teacher gradient exists
// anywhere in this module.
struct LossOutput {
  double value = 0.0;
  Matrix grad_student;
};

// Top-k decoupled loss hyperparameters: slice size k and the positive /
// negative slice weights.
struct TdlSpec {
  std::size_t k = 10;
  double alpha = 3.0;
  double beta = 1.0;

  void validate(std::size_t num_classes) const {
    if (k < 1) throw std::invalid_argument("TdlSpec: k must be >= 1");
    if (2 * k > num_classes) {
      throw std::invalid_argument("TdlSpec: 2k > C (k=" + std::to_string(k) +
                                  ", C=" + std::to_string(num_classes) + ")");
    }
    if (alpha <= 0.0 || beta <= 0.0) {
      throw std::invalid_argument("TdlSpec: alpha and beta must be > 0");
    }
  }
};

// Disjoint index partition of one logit row: k largest, k smallest, rest.
struct TdlPartition {
  IndexVector pos;
  IndexVector neg;
  IndexVector non;
};

// Partition of a (scaled) teacher row. pos takes the k largest entries; neg
// takes the k smallest among the remaining indices, so that on near-constant
// rows pos wins any contested index and neg falls back to the next smallest.
// non collects the leftovers in ascending index order.
inline TdlPartition tdl_partition(std::span<const double> teacher_scaled_row,
                                  std::size_t k) {
  const std::size_t c = teacher_scaled_row.size();
  if (k < 1 || 2 * k > c) {
    throw std::invalid_argument("tdl_partition: need 1 <= 2k <= C, got k=" +
                                std::to_string(k) + ", C=" + std::to_string(c));
  }
  TdlPartition part;
  part.pos = topk_indices(teacher_scaled_row, k);

  std::vector<std::uint8_t> taken(c, 0);
  for (std::size_t i : part.pos) taken[i] = 1;

  IndexVector rest;
  rest.reserve(c - k);
  for (std::size_t i = 0; i < c; ++i) {
    if (!taken[i]) rest.push_back(i);
  }
  std::partial_sort(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(k), rest.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (teacher_scaled_row[a] != teacher_scaled_row[b]) {
                        return teacher_scaled_row[a] < teacher_scaled_row[b];
                      }
                      return a < b;
                    });
  part.neg.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(k));

  for (std::size_t i : part.neg) taken[i] = 1;
  part.non.reserve(c - 2 * k);
  for (std::size_t i = 0; i < c; ++i) {
    if (!taken[i]) part.non.push_back(i);
  }
  return part;
}

namespace detail {

// L2-normalizes each row; rows with norm below eps become zero rows.
// Returns the pre-normalization norms.
inline std::vector<double> normalize_rows_inplace(Matrix& m, double eps = kCosineEps) {
  std::vector<double> norms(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    double sq = 0.0;
    for (double v : row) sq += v * v;
    const double n = std::sqrt(sq);
    norms[i] = n;
    if (n < eps) {
      for (double& v : row) v = 0.0;
    } else {
      for (double& v : row) v /= n;
    }
  }
  return norms;
}

// d CE(P, diag) / d P for P = logits of a B x B similarity matrix with
// targets y_i = i: (softmax(P) - I) / B.
inline Matrix ce_grad_wrt_logits_diag(const Matrix& p) {
  Matrix g = softmax_rows(p);
  const double inv_b = 1.0 / static_cast<double>(p.rows());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    for (std::size_t j = 0; j < p.cols(); ++j) {
      g(i, j) = (g(i, j) - (i == j ? 1.0 : 0.0)) * inv_b;
    }
  }
  return g;
}

inline double ce_value_diag(const Matrix& p) {
  const Matrix lsm = log_softmax_rows(p);
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) total -= lsm(i, i);
  return total / static_cast<double>(p.rows());
}

}  // namespace detail

// Symmetric cross entropy over the student/teacher similarity matrix with
// batch-index targets: 1/2 [CE(z_s z_t^T / tau, y) + CE(z_t z_s^T / tau, y)],
// y = [0..B-1]. With normalize set, rows of both matrices are L2-normalized
// first and the normalization is part of the differentiated graph.
inline LossOutput contrastive_loss(const Matrix& student, const Matrix& teacher,
                                   double tau, bool normalize = false) {
  check_same_shape(student, teacher, "contrastive_loss");
  if (tau <= 0.0) throw std::invalid_argument("contrastive_loss: tau must be > 0");
  if (student.rows() < 1) throw std::invalid_argument("contrastive_loss: empty batch");

  Matrix s_hat = student;
  Matrix t_hat = teacher;
  std::vector<double> s_norms;
  if (normalize) {
    s_norms = detail::normalize_rows_inplace(s_hat);
    detail::normalize_rows_inplace(t_hat);
  }

  const double inv_tau = 1.0 / tau;
  Matrix p = matmul_transpose(s_hat, t_hat);
  for (double& v : p.data()) v *= inv_tau;
  Matrix q = transpose(p);  // (z_t z_s^T)/tau is exactly the transpose

  const double value = 0.5 * (detail::ce_value_diag(p) + detail::ce_value_diag(q));

  const Matrix g1 = detail::ce_grad_wrt_logits_diag(p);
  const Matrix g2 = detail::ce_grad_wrt_logits_diag(q);
  // d value / d s_hat = 0.5 * (G1 + G2^T) * t_hat / tau
  Matrix combined = g1;
  for (std::size_t i = 0; i < combined.rows(); ++i) {
    for (std::size_t j = 0; j < combined.cols(); ++j) {
      combined(i, j) = 0.5 * (g1(i, j) + g2(j, i)) * inv_tau;
    }
  }
  Matrix grad = matmul(combined, t_hat);

  if (normalize) {
    // chain through row normalization: d/ds = (g - (s_hat . g) s_hat) / |s|
    for (std::size_t i = 0; i < grad.rows(); ++i) {
      auto g = grad.row(i);
      const auto sh = s_hat.row(i);
      if (s_norms[i] < kCosineEps) {
        for (double& v : g) v = 0.0;
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) dot += sh[j] * g[j];
      for (std::size_t j = 0; j < g.size(); ++j) {
        g[j] = (g[j] - dot * sh[j]) / s_norms[i];
      }
    }
  }
  return {value, std::move(grad)};
}

// 1 - mean over the batch of [alpha cos(pos) + beta cos(neg) + cos(non)],
// slices taken from the per-row partition of the scaled teacher; student
// slices reuse the teacher's index sets. Gradient per slice is the exact
// cosine derivative; a slice whose norm guard fires contributes zero both
// to the value and to the gradient.
inline LossOutput tdl_loss(const Matrix& student, const Matrix& teacher_scaled,
                           const TdlSpec& spec) {
  check_same_shape(student, teacher_scaled, "tdl_loss");
  const std::size_t b = student.rows();
  const std::size_t c = student.cols();
  spec.validate(c);

  LossOutput out;
  out.grad_student = Matrix(b, c);
  double acc = 0.0;
  const double inv_b = 1.0 / static_cast<double>(b);

  std::vector<double> u, v;
  for (std::size_t i = 0; i < b; ++i) {
    const TdlPartition part = tdl_partition(teacher_scaled.row(i), spec.k);
    const IndexVector* slices[3] = {&part.pos, &part.neg, &part.non};
    const double weights[3] = {spec.alpha, spec.beta, 1.0};
    for (int si = 0; si < 3; ++si) {
      const IndexVector& idx = *slices[si];
      if (idx.empty()) continue;  // C == 2k leaves no non slice
      u.clear();
      v.clear();
      for (std::size_t j : idx) {
        u.push_back(student(i, j));
        v.push_back(teacher_scaled(i, j));
      }
      double dot = 0.0, nu_sq = 0.0, nv_sq = 0.0;
      for (std::size_t j = 0; j < u.size(); ++j) {
        dot += u[j] * v[j];
        nu_sq += u[j] * u[j];
        nv_sq += v[j] * v[j];
      }
      const double nu = std::sqrt(nu_sq);
      const double nv = std::sqrt(nv_sq);
      if (nu < kCosineEps || nv < kCosineEps) continue;

      const double cos = std::clamp(dot / (nu * nv), -1.0, 1.0);
      acc += weights[si] * cos;
      // d cos / d u_j = v_j / (|u||v|) - cos * u_j / |u|^2
      const double scale = -weights[si] * inv_b;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        out.grad_student(i, idx[j]) +=
            scale * (v[j] / (nu * nv) - cos * u[j] / nu_sq);
      }
    }
  }
  out.value = 1.0 - acc * inv_b;
  return out;
}

// Combined objective: contrastive + TDL on the TSM-scaled teacher, with the
// component values kept for logging. scale_contrastive routes the scaled
// teacher into the contrastive term as well (the default); turning it off
// restricts scaling to the TDL path.
struct TopkdLossOutput {
  double value = 0.0;
  Matrix grad_student;
  double contrastive = 0.0;
  double tdl = 0.0;
};

inline TopkdLossOutput topkd_loss(const Matrix& student, const Matrix& teacher_raw,
                                  const IndexVector& labels, const ScalingSpec& scaling,
                                  const TdlSpec& tdl, double tau, bool normalize = false,
                                  bool scale_contrastive = true) {
  const Matrix* scaled = &teacher_raw;
  Matrix scaled_storage;
  if (scaling.enabled) {
    scaled_storage = apply_tsm(teacher_raw, labels, scaling).values;
    scaled = &scaled_storage;
  }
  const Matrix& teacher_contrastive = scale_contrastive ? *scaled : teacher_raw;

  LossOutput con = contrastive_loss(student, teacher_contrastive, tau, normalize);
  LossOutput dec = tdl_loss(student, *scaled, tdl);

  TopkdLossOutput out;
  out.contrastive = con.value;
  out.tdl = dec.value;
  out.value = con.value + dec.value;
  out.grad_student = std::move(con.grad_student);
  for (std::size_t i = 0; i < out.grad_student.data().size(); ++i) {
    out.grad_student.data()[i] += dec.grad_student.data()[i];
  }
  return out;
}

// Classic KD baseline: T^2 * mean KL(softmax(z_t/T) || softmax(z_s/T)).
// Gradient is (T/B) (softmax(z_s/T) - softmax(z_t/T)) per row.
inline LossOutput kd_kl_loss(const Matrix& student, const Matrix& teacher,
                             double temperature) {
  check_same_shape(student, teacher, "kd_kl_loss");
  if (temperature <= 0.0) {
    throw std::invalid_argument("kd_kl_loss: temperature must be > 0");
  }
  const std::size_t b = student.rows();
  const double t = temperature;

  Matrix s_scaled = student;
  Matrix t_scaled = teacher;
  for (double& v : s_scaled.data()) v /= t;
  for (double& v : t_scaled.data()) v /= t;

  const Matrix lps = log_softmax_rows(s_scaled);
  const Matrix lpt = log_softmax_rows(t_scaled);

  double total = 0.0;
  LossOutput out;
  out.grad_student = Matrix(b, student.cols());
  const double grad_scale = t / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < student.cols(); ++j) {
      const double pt = std::exp(lpt(i, j));
      const double ps = std::exp(lps(i, j));
      total += pt * (lpt(i, j) - lps(i, j));
      out.grad_student(i, j) = grad_scale * (ps - pt);
    }
  }
  out.value = t * t * total / static_cast<double>(b);
  return out;
}

// Hard-label cross entropy with gradient (softmax(z_s) - onehot(y)) / B.
inline LossOutput supervised_ce_loss(const Matrix& student, const IndexVector& labels) {
  LossOutput out;
  out.value = cross_entropy_rows(student, labels);  // validates labels
  out.grad_student = softmax_rows(student);
  const double inv_b = 1.0 / static_cast<double>(student.rows());
  for (std::size_t i = 0; i < student.rows(); ++i) {
    out.grad_student(i, labels[i]) -= 1.0;
    for (std::size_t j = 0; j < student.cols(); ++j) out.grad_student(i, j) *= inv_b;
  }
  return out;
}

}  // namespace topkd
