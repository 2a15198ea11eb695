#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "topkd/matrix.hpp"
#include "topkd/numerics.hpp"

namespace topkd {

// Hyperparameters of the top-k scaling transform applied to teacher logits.
// gamma shapes the rank weights, lambda scales the additive bias, gt_boost
// multiplies the ground-truth weight when the teacher's top-1 is wrong.
struct ScalingSpec {
  std::size_t k = 10;
  double gamma = 0.5;
  double lambda = 1.0;
  double gt_boost = 2.0;
  bool enabled = true;

  void validate() const {
    if (k < 1) throw std::invalid_argument("ScalingSpec: k must be >= 1");
    if (gamma < 0.0 || lambda < 0.0) {
      throw std::invalid_argument("ScalingSpec: gamma and lambda must be >= 0");
    }
    if (gt_boost < 1.0) throw std::invalid_argument("ScalingSpec: gt_boost must be >= 1");
  }
};

// Scaled teacher logits plus a row-major B x C mask of the entries the
// transform touched. Unmasked entries are bitwise equal to the input.
struct ScaledLogits {
  Matrix values;
  std::vector<std::uint8_t> modified_mask;

  bool modified(std::size_t i, std::size_t j) const {
    return modified_mask[i * values.cols() + j] != 0;
  }
};

// w[r] = 1 + gamma * (k - r) / k for zero-based rank r (r = 0 is the largest
// logit). Strictly decreasing for gamma > 0, all entries >= 1.
inline std::vector<double> rank_weights(std::size_t k, double gamma) {
  if (k < 1) throw std::invalid_argument("rank_weights: k must be >= 1");
  std::vector<double> w(k);
  for (std::size_t r = 0; r < k; ++r) {
    w[r] = 1.0 + gamma * static_cast<double>(k - r) / static_cast<double>(k);
  }
  return w;
}

// lambda * (mean of the top-k entries - mean of the rest). Non-negative by
// construction since the top-k mean dominates the complement mean.
inline double bias_delta(std::span<const double> row, const IndexVector& top,
                         double lambda) {
  const std::size_t c = row.size();
  const std::size_t k = top.size();
  if (k >= c) {
    throw std::invalid_argument("bias_delta: top-k set of size " + std::to_string(k) +
                                " leaves no complement in " + std::to_string(c) +
                                " classes");
  }
  std::vector<std::uint8_t> in_top(c, 0);
  double top_sum = 0.0;
  for (std::size_t i : top) {
    top_sum += row[i];
    in_top[i] = 1;
  }
  double rest_sum = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    if (!in_top[i]) rest_sum += row[i];
  }
  const double top_mean = top_sum / static_cast<double>(k);
  const double rest_mean = rest_sum / static_cast<double>(c - k);
  return lambda * (top_mean - rest_mean);
}

// Per-row rescaling of teacher logits: rank-r member i of the top-k set maps
// to z_i * w[r] + delta. The ground-truth entry gets gt_boost * w[0] instead
// of its rank weight whenever the teacher's top-1 is not the label (or the
// label sits outside the top-k). Everything else passes through untouched.
inline ScaledLogits apply_tsm(const Matrix& teacher, const IndexVector& labels,
                              const ScalingSpec& spec) {
  spec.validate();
  const std::size_t b = teacher.rows();
  const std::size_t c = teacher.cols();
  if (labels.size() != b) {
    throw std::invalid_argument("apply_tsm: label count " + std::to_string(labels.size()) +
                                " != batch size " + std::to_string(b));
  }
  for (std::size_t y : labels) {
    if (y >= c) {
      throw std::out_of_range("apply_tsm: label " + std::to_string(y) +
                              " out of range for " + std::to_string(c) + " classes");
    }
  }

  ScaledLogits out{teacher, std::vector<std::uint8_t>(b * c, 0)};
  if (!spec.enabled) return out;

  if (2 * spec.k > c) {
    throw std::invalid_argument("apply_tsm: 2k > C (k=" + std::to_string(spec.k) +
                                ", C=" + std::to_string(c) + ")");
  }

  const std::vector<double> w = rank_weights(spec.k, spec.gamma);
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = teacher.row(i);
    const IndexVector top = topk_indices(row, spec.k);
    const double delta = bias_delta(row, top, spec.lambda);
    const std::size_t y = labels[i];
    const std::size_t top1 = top[0];

    bool label_in_top = false;
    for (std::size_t r = 0; r < top.size(); ++r) {
      const std::size_t j = top[r];
      out.values(i, j) = row[j] * w[r] + delta;
      out.modified_mask[i * c + j] = 1;
      if (j == y) label_in_top = true;
    }
    if (!label_in_top || top1 != y) {
      out.values(i, y) = row[y] * (spec.gt_boost * w[0]) + delta;
      out.modified_mask[i * c + y] = 1;
    }
  }
  return out;
}

}  // namespace topkd
