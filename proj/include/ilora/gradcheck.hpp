#pragma once

#include <cmath>
#include <string>

#include "ilora/matrix.hpp"

namespace ilora {

// Central-difference gradient of a scalar function of a matrix:
//   g_ij = (f(x + h e_ij) - f(x - h e_ij)) / (2h)
// Throws NumericalError naming the perturbed entry if f is not finite there.
template <typename F>
Matrix finite_diff_grad(F&& f, const Matrix& x, double h = 1e-6) {
  Matrix grad(x.rows(), x.cols());
  Matrix probe = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double orig = probe(i, j);
      probe(i, j) = orig + h;
      const double fp = f(static_cast<const Matrix&>(probe));
      probe(i, j) = orig - h;
      const double fm = f(static_cast<const Matrix&>(probe));
      probe(i, j) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericalError("finite_diff_grad: non-finite evaluation at index (" +
                             std::to_string(i) + ", " + std::to_string(j) + ")");
      }
      grad(i, j) = (fp - fm) / (2.0 * h);
    }
  }
  return grad;
}

// Worst-case relative error between an analytic and a numeric gradient,
// normalised by the larger of the two tensors' max magnitudes.
struct GradientComparison {
  double rel_error = 0.0;
  double abs_error = 0.0;
  std::size_t worst_row = 0;
  std::size_t worst_col = 0;
};

inline GradientComparison compare_gradients(const Matrix& analytic, const Matrix& numeric) {
  if (!analytic.same_shape(numeric)) {
    throw ValidationError("compare_gradients: shape mismatch " + analytic.shape() + " vs " +
                          numeric.shape());
  }
  GradientComparison out;
  for (std::size_t i = 0; i < analytic.rows(); ++i) {
    for (std::size_t j = 0; j < analytic.cols(); ++j) {
      const double diff = std::abs(analytic(i, j) - numeric(i, j));
      if (diff > out.abs_error) {
        out.abs_error = diff;
        out.worst_row = i;
        out.worst_col = j;
      }
    }
  }
  const double scale = std::max(max_abs(analytic), max_abs(numeric));
  out.rel_error = scale > 0.0 ? out.abs_error / scale : 0.0;
  return out;
}

}  // namespace ilora
