#pragma once

#include <stdexcept>
#include <utility>

#include "topkd/matrix.hpp"

namespace topkd {

// Central-difference gradient of an opaque scalar loss with respect to every
// entry of `student`: (f(x + h e) - f(x - h e)) / 2h. This is the
// verification oracle the analytic gradients are checked against; it only
// ever calls the loss as a black box.
template <typename LossFn>
Matrix finite_difference_grad(LossFn&& loss_fn, Matrix student, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_grad: h must be > 0");
  Matrix grad(student.rows(), student.cols());
  for (std::size_t i = 0; i < student.data().size(); ++i) {
    const double original = student.data()[i];
    student.data()[i] = original + h;
    const double up = loss_fn(static_cast<const Matrix&>(student));
    student.data()[i] = original - h;
    const double down = loss_fn(static_cast<const Matrix&>(student));
    student.data()[i] = original;
    grad.data()[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace topkd
