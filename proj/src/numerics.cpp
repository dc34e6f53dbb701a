#include "rean/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rean/errors.hpp"

namespace rean {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: " + std::to_string(data_.size()) + " values for shape " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

Matrix affine_transform(const Matrix& x, const Matrix& weights, std::span<const double> bias) {
  if (x.cols() != weights.rows() || bias.size() != weights.cols()) {
    throw ShapeError("affine_transform: x " + x.shape_string() + ", W " +
                     weights.shape_string() + ", b 1x" + std::to_string(bias.size()));
  }
  Matrix out(x.rows(), weights.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto dst = out.row(i);
    std::copy(bias.begin(), bias.end(), dst.begin());
    const auto src = x.row(i);
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double xk = src[k];
      const auto wk = weights.row(k);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += xk * wk[j];
    }
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double activate(double x, Activation kind) {
  switch (kind) {
    case Activation::Sigmoid:
      return sigmoid(x);
    case Activation::Tanh:
      return std::tanh(x);
    case Activation::Relu:
      return x > 0.0 ? x : 0.0;
  }
  return x;
}

Matrix activation(const Matrix& x, Activation kind) {
  Matrix out = x;
  for (double& v : out.values()) v = activate(v, kind);
  return out;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

Vector finite_difference_gradient(const ScalarFunction& f, std::span<const double> theta,
                                  double eps) {
  std::vector<std::size_t> coords(theta.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  return finite_difference_gradient(f, theta, eps, coords);
}

Vector finite_difference_gradient(const ScalarFunction& f, std::span<const double> theta,
                                  double eps, std::span<const std::size_t> coords) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_gradient: eps must be > 0");
  std::vector<double> probe(theta.begin(), theta.end());
  Vector grad(coords.size());
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const std::size_t i = coords[k];
    if (i >= probe.size()) throw ShapeError("finite_difference_gradient: coordinate out of range");
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double plus = f(probe);
    probe[i] = saved - eps;
    const double minus = f(probe);
    probe[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NonFiniteError("finite_difference_gradient: non-finite value at coordinate " +
                               std::to_string(i),
                           std::to_string(i));
    }
    grad[k] = (plus - minus) / (2.0 * eps);
  }
  return grad;
}

GradientCheckReport compare_gradients(std::span<const double> analytic,
                                      std::span<const double> numeric,
                                      std::span<const std::size_t> coords, double eps) {
  if (numeric.size() != coords.size()) throw ShapeError("compare_gradients: size mismatch");
  GradientCheckReport report;
  report.eps = eps;
  report.checked = coords.size();
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const double err = relative_error(analytic[coords[k]], numeric[k]);
    if (k == 0 || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_parameter_index = coords[k];
    }
  }
  return report;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace rean
