#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace rean {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles. Shapes are explicit everywhere; there is
/// no broadcasting.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  void fill(double v);
  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// result[i,j] = sum_k x[i,k] * W[k,j] + b[j]
Matrix affine_transform(const Matrix& x, const Matrix& weights, std::span<const double> bias);

enum class Activation { Sigmoid, Tanh, Relu };

double sigmoid(double x);
double activate(double x, Activation kind);
Matrix activation(const Matrix& x, Activation kind);

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences (f(θ+εe_i) − f(θ−εe_i)) / 2ε for every coordinate.
/// Throws NonFiniteError naming the coordinate if f is not finite.
Vector finite_difference_gradient(const ScalarFunction& f, std::span<const double> theta,
                                  double eps);

/// Same, restricted to `coords`; entry k of the result belongs to coords[k].
Vector finite_difference_gradient(const ScalarFunction& f, std::span<const double> theta,
                                  double eps, std::span<const std::size_t> coords);

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_parameter_index = 0;
  double eps = 0.0;
  std::size_t checked = 0;
};

/// Compares `analytic[coords[k]]` against `numeric[k]`.
GradientCheckReport compare_gradients(std::span<const double> analytic,
                                      std::span<const double> numeric,
                                      std::span<const std::size_t> coords, double eps);

bool all_finite(std::span<const double> values);
double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

}  // namespace rean
