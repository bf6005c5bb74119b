#include "mvr/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace mvr {

namespace {
void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("matrix shape mismatch in ") + what);
}

void reset_output(Matrix& out, std::size_t rows, std::size_t cols, bool accumulate,
                  const char* what) {
  if (out.rows() == rows && out.cols() == cols) {
    if (!accumulate) out.set_zero();
    return;
  }
  check(!accumulate, what);
  out = Matrix(rows, cols);
}
}  // namespace

void Matrix::set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

Matrix Matrix::top_rows(std::size_t n) const {
  check(n <= rows_, "top_rows");
  Matrix out(n, cols_);
  std::copy_n(data_.begin(), n * cols_, out.data_.begin());
  return out;
}

void matmul(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate) {
  check(a.cols() == b.rows(), "matmul");
  reset_output(out, a.rows(), b.cols(), accumulate, "matmul");
  const std::size_t n = b.cols();
  const double* bp = b.data().data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.data().data() + i * n;
    const double* ar = a.data().data() + i * a.cols();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double av = ar[k];
      if (av == 0.0) continue;
      const double* br = bp + k * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  check(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols(),
        "matmul_tn_acc");
  const std::size_t n = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* ar = a.data().data() + r * a.cols();
    const double* br = b.data().data() + r * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = out.data().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out, bool accumulate) {
  check(a.cols() == b.cols(), "matmul_nt");
  reset_output(out, a.rows(), b.rows(), accumulate, "matmul_nt");
  const std::size_t kdim = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.data().data() + i * kdim;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* br = b.data().data() + j * kdim;
      double s = 0.0;
      for (std::size_t k = 0; k < kdim; ++k) s += ar[k] * br[k];
      out(i, j) += s;
    }
  }
}

void add_row_bias(Matrix& m, const Matrix& bias) {
  check(bias.size() == m.cols(), "add_row_bias");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias.data()[c];
  }
}

void accumulate_col_sums(const Matrix& g, Matrix& bias_grad) {
  check(bias_grad.size() == g.cols(), "accumulate_col_sums");
  for (std::size_t r = 0; r < g.rows(); ++r) {
    auto row = g.row(r);
    for (std::size_t c = 0; c < g.cols(); ++c) bias_grad.data()[c] += row[c];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace mvr
