#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mvr {

// Dense row-major matrix of doubles. Vectors are 1 x n matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void set_zero();
  // Copy of the first n rows.
  Matrix top_rows(std::size_t n) const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// out = a * b, or out += a * b when accumulate is set.
void matmul(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate = false);
// out += a^T * b
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);
// out = a * b^T, or out += a * b^T when accumulate is set.
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate = false);
// Adds the row vector bias to every row of m.
void add_row_bias(Matrix& m, const Matrix& bias);
// bias_grad += column sums of g.
void accumulate_col_sums(const Matrix& g, Matrix& bias_grad);

double dot(std::span<const double> a, std::span<const double> b);

}  // namespace mvr
