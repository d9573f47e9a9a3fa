#pragma once

// Dense row-major matrices, stable softmax / log-sum-exp, symmetric eigen
// decomposition and the ridge solver shared by the V-step and Select+Fit.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kvsculpt {

class Matrix;

/// Read-only view over a contiguous row-major block of doubles.
class MatrixView {
  public:
    MatrixView() = default;
    MatrixView(const double* data, std::size_t rows, std::size_t cols) noexcept
        : data_{data}, rows_{rows}, cols_{cols}
    {}

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return rows_ * cols_; }
    [[nodiscard]] bool empty() const noexcept { return size() == 0; }
    [[nodiscard]] const double* data() const noexcept { return data_; }

    [[nodiscard]] double operator()(std::size_t r, std::size_t c) const noexcept
    {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept
    {
        assert(r < rows_);
        return {data_ + r * cols_, cols_};
    }
    /// Rows [first, first + count).
    [[nodiscard]] MatrixView row_block(std::size_t first, std::size_t count) const
    {
        if (first + count > rows_) { throw std::out_of_range("row block out of range"); }
        return {data_ + first * cols_, count, cols_};
    }
    [[nodiscard]] std::span<const double> flat() const noexcept { return {data_, size()}; }

  private:
    const double* data_ = nullptr;
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
};

/// Owning dense matrix of f64, row-major.
class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_{rows}, cols_{cols}, data_(rows * cols, fill)
    {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_{rows}, cols_{cols}, data_{std::move(data)}
    {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("matrix data length does not match shape");
        }
    }
    explicit Matrix(MatrixView v) : rows_{v.rows()}, cols_{v.cols()}, data_(v.flat().begin(), v.flat().end()) {}

    static Matrix identity(std::size_t n)
    {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) { m(i, i) = 1.0; }
        return m;
    }
    static Matrix from_rows(const std::vector<std::vector<double>>& rows)
    {
        if (rows.empty()) { return {}; }
        Matrix m(rows.size(), rows.front().size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != m.cols()) { throw std::invalid_argument("ragged rows"); }
            std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
        }
        return m;
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
    [[nodiscard]] double* data() noexcept { return data_.data(); }
    [[nodiscard]] const double* data() const noexcept { return data_.data(); }
    [[nodiscard]] std::vector<double>& storage() noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

    double& operator()(std::size_t r, std::size_t c) noexcept
    {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }
    double operator()(std::size_t r, std::size_t c) const noexcept
    {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }
    [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept
    {
        return {data_.data() + r * cols_, cols_};
    }
    [[nodiscard]] std::span<double> flat() noexcept { return data_; }
    [[nodiscard]] std::span<const double> flat() const noexcept { return data_; }

    [[nodiscard]] MatrixView view() const noexcept { return {data_.data(), rows_, cols_}; }
    operator MatrixView() const noexcept { return view(); } // NOLINT(google-explicit-constructor)
    [[nodiscard]] MatrixView row_block(std::size_t first, std::size_t count) const
    {
        return view().row_block(first, count);
    }

    friend bool operator==(const Matrix& a, const Matrix& b)
    {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Small dense kernels

[[nodiscard]] inline double dot(std::span<const double> a, std::span<const double> b) noexcept
{
    assert(a.size() == b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) { s += a[i] * b[i]; }
    return s;
}

[[nodiscard]] inline double norm2(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

[[nodiscard]] inline double frobenius_sq(MatrixView a) noexcept { return dot(a.flat(), a.flat()); }

inline void require_same_shape(MatrixView a, MatrixView b, const char* what)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string{what} + ": shape mismatch");
    }
}

/// a · b
[[nodiscard]] inline Matrix matmul(MatrixView a, MatrixView b)
{
    if (a.cols() != b.rows()) { throw std::invalid_argument("matmul: inner dimension mismatch"); }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const double av = a(i, p);
            if (av == 0.0) { continue; }
            auto brow = b.row(p);
            for (std::size_t j = 0; j < b.cols(); ++j) { orow[j] += av * brow[j]; }
        }
    }
    return out;
}

/// a · bᵀ
[[nodiscard]] inline Matrix matmul_nt(MatrixView a, MatrixView b)
{
    if (a.cols() != b.cols()) { throw std::invalid_argument("matmul_nt: inner dimension mismatch"); }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto arow = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) { out(i, j) = dot(arow, b.row(j)); }
    }
    return out;
}

/// aᵀ · b
[[nodiscard]] inline Matrix matmul_tn(MatrixView a, MatrixView b)
{
    if (a.rows() != b.rows()) { throw std::invalid_argument("matmul_tn: inner dimension mismatch"); }
    Matrix out(a.cols(), b.cols());
    for (std::size_t p = 0; p < a.rows(); ++p) {
        auto arow = a.row(p);
        auto brow = b.row(p);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double av = arow[i];
            if (av == 0.0) { continue; }
            auto orow = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) { orow[j] += av * brow[j]; }
        }
    }
    return out;
}

[[nodiscard]] inline Matrix transpose(MatrixView a)
{
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) { t(j, i) = a(i, j); }
    }
    return t;
}

[[nodiscard]] inline Matrix subtract(MatrixView a, MatrixView b)
{
    require_same_shape(a, b, "subtract");
    Matrix out(a);
    auto f = out.flat();
    auto bf = b.flat();
    for (std::size_t i = 0; i < f.size(); ++i) { f[i] -= bf[i]; }
    return out;
}

/// Stack matrices with equal column counts on top of each other.
[[nodiscard]] inline Matrix vstack(std::span<const MatrixView> parts)
{
    if (parts.empty()) { return {}; }
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols && !p.empty()) { throw std::invalid_argument("vstack: column mismatch"); }
        rows += p.rows();
    }
    Matrix out(rows, cols);
    auto it = out.storage().begin();
    for (const auto& p : parts) { it = std::copy(p.flat().begin(), p.flat().end(), it); }
    return out;
}

[[nodiscard]] inline Matrix vstack(MatrixView top, MatrixView bottom)
{
    const MatrixView parts[] = {top, bottom};
    return vstack(std::span<const MatrixView>{parts});
}

/// Copy the listed rows of `src`, in order.
[[nodiscard]] inline Matrix gather_rows(MatrixView src, std::span<const std::size_t> idx)
{
    Matrix out(idx.size(), src.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= src.rows()) { throw std::out_of_range("gather_rows: index out of range"); }
        std::copy(src.row(idx[r]).begin(), src.row(idx[r]).end(), out.row(r).begin());
    }
    return out;
}

[[nodiscard]] inline bool all_finite(std::span<const double> xs) noexcept
{
    return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Softmax / log-sum-exp

/// log Σ exp(x) with max subtraction. Returns −∞ for an empty input.
[[nodiscard]] inline double log_sum_exp(std::span<const double> xs) noexcept
{
    if (xs.empty()) { return -std::numeric_limits<double>::infinity(); }
    const double mx = *std::max_element(xs.begin(), xs.end());
    if (!std::isfinite(mx)) { return mx; }
    double s = 0.0;
    for (double x : xs) { s += std::exp(x - mx); }
    return mx + std::log(s);
}

struct SoftmaxLse {
    Matrix probs;
    std::vector<double> lse;
};

/// Row-wise softmax together with the row log-sum-exp.
[[nodiscard]] inline SoftmaxLse softmax_lse_rows(MatrixView scores)
{
    if (scores.cols() == 0) { throw std::invalid_argument("empty score row"); }
    SoftmaxLse out{Matrix(scores.rows(), scores.cols()), std::vector<double>(scores.rows())};
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        auto s = scores.row(i);
        auto p = out.probs.row(i);
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (std::size_t j = 0; j < s.size(); ++j) {
            p[j] = std::exp(s[j] - mx);
            z += p[j];
        }
        const double inv = 1.0 / z;
        for (double& v : p) { v *= inv; }
        out.lse[i] = mx + std::log(z);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Factorizations

/// In-place lower Cholesky of a symmetric matrix. Returns false when a pivot
/// falls to `min_pivot` or below.
[[nodiscard]] inline bool cholesky_in_place(Matrix& a, double min_pivot = 0.0) noexcept
{
    const std::size_t n = a.rows();
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t p = 0; p < j; ++p) { d -= a(j, p) * a(j, p); }
        if (!(d > min_pivot) || !std::isfinite(d)) { return false; }
        const double ljj = std::sqrt(d);
        a(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = a(i, j);
            for (std::size_t p = 0; p < j; ++p) { v -= a(i, p) * a(j, p); }
            a(i, j) = v / ljj;
        }
        for (std::size_t i = 0; i < j; ++i) { a(i, j) = 0.0; }
    }
    return true;
}

/// Solve L Lᵀ X = B for every column of B, L from cholesky_in_place.
[[nodiscard]] inline Matrix cholesky_solve(const Matrix& l, MatrixView b)
{
    const std::size_t n = l.rows();
    Matrix x(b);
    for (std::size_t c = 0; c < x.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double v = x(i, c);
            for (std::size_t p = 0; p < i; ++p) { v -= l(i, p) * x(p, c); }
            x(i, c) = v / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double v = x(ii, c);
            for (std::size_t p = ii + 1; p < n; ++p) { v -= l(p, ii) * x(p, c); }
            x(ii, c) = v / l(ii, ii);
        }
    }
    return x;
}

struct SymmetricEigen {
    std::vector<double> values; // descending
    Matrix vectors;             // column j is the eigenvector of values[j]
};

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
[[nodiscard]] inline SymmetricEigen symmetric_eigen(MatrixView sym)
{
    if (sym.rows() != sym.cols()) { throw std::invalid_argument("symmetric_eigen: matrix not square"); }
    const std::size_t n = sym.rows();
    Matrix a(sym);
    Matrix v = Matrix::identity(n);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                total += a(i, j) * a(i, j);
                if (i != j) { off += a(i, j) * a(i, j); }
            }
        }
        if (off <= 1e-30 * std::max(total, 1e-300)) { break; }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) { continue; }
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
    SymmetricEigen out{std::vector<double>(n), Matrix(n, n)};
    for (std::size_t j = 0; j < n; ++j) {
        out.values[j] = a(order[j], order[j]);
        for (std::size_t k = 0; k < n; ++k) { out.vectors(k, j) = v(k, order[j]); }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ridge regression

struct RidgeProblem {
    MatrixView design;  // n × p
    MatrixView targets; // n × d
    MatrixView offset;  // n × d, subtracted from targets; empty means zero
    double lambda_r = 1e-3;
};

/// argmin_X ‖design·X − (targets − offset)‖²_F + λ‖X‖²_F via Cholesky on the
/// regularized normal equations, falling back to an eigen-decomposition of
/// the Gram matrix when Cholesky breaks down.
[[nodiscard]] inline Matrix ridge_solve(const RidgeProblem& prob)
{
    const auto& a = prob.design;
    if (a.rows() != prob.targets.rows()) { throw std::invalid_argument("ridge: design/targets row mismatch"); }
    if (!prob.offset.empty()) { require_same_shape(prob.targets, prob.offset, "ridge offset"); }
    if (!(prob.lambda_r >= 0.0) || !std::isfinite(prob.lambda_r)) {
        throw std::invalid_argument("ridge: lambda_r must be finite and nonnegative");
    }
    const std::size_t p = a.cols();

    Matrix rhs_src = prob.offset.empty() ? Matrix(prob.targets) : subtract(prob.targets, prob.offset);
    Matrix gram = matmul_tn(a, a);
    for (std::size_t i = 0; i < p; ++i) { gram(i, i) += prob.lambda_r; }
    Matrix rhs = matmul_tn(a, rhs_src);

    // Without regularization a near-zero pivot means rank deficiency.
    double max_diag = 0.0;
    for (std::size_t i = 0; i < p; ++i) { max_diag = std::max(max_diag, gram(i, i)); }
    const double min_pivot = prob.lambda_r > 0.0 ? 0.0 : 1e-12 * max_diag;
    Matrix l = gram;
    if (cholesky_in_place(l, min_pivot)) { return cholesky_solve(l, rhs); }

    auto eig = symmetric_eigen(gram);
    const double top = eig.values.empty() ? 0.0 : std::max(eig.values.front(), 0.0);
    const double tol = prob.lambda_r > 0.0 ? 0.0 : 1e-12 * std::max(top, 1e-300);
    for (double ev : eig.values) {
        if (ev <= tol) { throw std::runtime_error("singular system"); }
    }
    // X = V diag(1/λ) Vᵀ rhs
    Matrix proj = matmul_tn(eig.vectors, rhs);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t c = 0; c < proj.cols(); ++c) { proj(i, c) /= eig.values[i]; }
    }
    return matmul(eig.vectors, proj);
}

} // namespace kvsculpt
