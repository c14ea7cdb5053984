#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "indexnet/errors.hpp"

namespace indexnet {

/// Dense row-major N-dimensional array of 64-bit floats. The universal value
/// carrier of the library: activations, weights, error rates and mini-batch
/// arrays all live in one of these.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(count(shape_), 0.0);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        Tensor t(std::move(shape));
        for (double& v : t.data_) v = value;
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t i) {
        assert(rank() == 1 && i < shape_[0]);
        return data_[i];
    }
    double operator()(std::size_t i) const {
        assert(rank() == 1 && i < shape_[0]);
        return data_[i];
    }
    double& operator()(std::size_t i, std::size_t j) {
        assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
        return data_[i * shape_[1] + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
        return data_[i * shape_[1] + j];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        assert(rank() == 3 && i < shape_[0] && j < shape_[1] && k < shape_[2]);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        assert(rank() == 3 && i < shape_[0] && j < shape_[1] && k < shape_[2]);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        assert(rank() == 4 && i < shape_[0] && j < shape_[1] && k < shape_[2] && l < shape_[3]);
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        assert(rank() == 4 && i < shape_[0] && j < shape_[1] && k < shape_[2] && l < shape_[3]);
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// Reinterpret the flat buffer under a new shape with equal element count.
    Tensor reshaped(std::vector<std::size_t> shape) const {
        if (count(shape) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    void fill(double v) {
        for (double& x : data_) x = v;
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& other) {
        require_same_shape(other, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (double& x : data_) x *= s;
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, double s) { return a *= s; }
    friend Tensor operator*(double s, Tensor a) { return a *= s; }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << "]";
        return os.str();
    }
    std::string shape_str() const { return shape_str(shape_); }

  private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    void require_same_shape(const Tensor& other, const char* op) const {
        if (!same_shape(other))
            throw DimensionError(std::string("shape mismatch in ") + op + ": " + shape_str() +
                                 " vs " + other.shape_str());
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        throw DimensionError("dot: size mismatch " + a.shape_str() + " vs " + b.shape_str());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return s;
}

/// Standard matrix product in 64-bit arithmetic; ikj loop order so writes are
/// sequential in the output row.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul expects rank-2 operands, got " + a.shape_str() + " and " +
                             b.shape_str());
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions disagree, " + a.shape_str() + " x " +
                             b.shape_str());
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor out({n, m});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * m;
            double* orow = po + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

/// Geometry of one convolution (or pooling) operation. Output sizes follow
/// N_p = (N + 2P - R)/S + 1 and must divide exactly; truncating silently
/// would corrupt every index formula downstream.
struct ConvGeometry {
    std::size_t in_width = 0;    // N
    std::size_t in_height = 0;   // T
    std::size_t field = 0;       // R_C
    std::size_t stride = 1;      // S_C
    std::size_t pad = 0;         // P
    std::size_t out_width = 0;   // N_p
    std::size_t out_height = 0;  // T_p

    static ConvGeometry make(std::size_t in_width, std::size_t in_height, std::size_t field,
                             std::size_t stride, std::size_t pad) {
        if (field == 0 || stride == 0)
            throw GeometryError("receptive field and stride must be positive");
        ConvGeometry g;
        g.in_width = in_width;
        g.in_height = in_height;
        g.field = field;
        g.stride = stride;
        g.pad = pad;
        g.out_width = out_extent(in_width, field, stride, pad, "width");
        g.out_height = out_extent(in_height, field, stride, pad, "height");
        return g;
    }

    /// "Same" convolution: stride 1, odd field, P = (R-1)/2, output == input.
    static ConvGeometry same(std::size_t in_width, std::size_t in_height, std::size_t field) {
        if (field % 2 == 0)
            throw GeometryError("same-mode convolution requires an odd receptive field, got " +
                                std::to_string(field));
        return make(in_width, in_height, field, 1, (field - 1) / 2);
    }

    std::size_t padded_width() const { return in_width + 2 * pad; }
    std::size_t padded_height() const { return in_height + 2 * pad; }

  private:
    static std::size_t out_extent(std::size_t in, std::size_t field, std::size_t stride,
                                  std::size_t pad, const char* which) {
        const std::size_t padded = in + 2 * pad;
        if (padded < field)
            throw GeometryError(std::string("receptive field exceeds padded input ") + which);
        if ((padded - field) % stride != 0)
            throw GeometryError(std::string("non-integral output ") + which + ": (" +
                                std::to_string(in) + " + 2*" + std::to_string(pad) + " - " +
                                std::to_string(field) + ") not divisible by stride " +
                                std::to_string(stride));
        return (padded - field) / stride + 1;
    }
};

/// Zero-pad the two trailing spatial dimensions of a [F,N,T] map by p.
inline Tensor pad2d(const Tensor& x, std::size_t p) {
    if (x.rank() != 3)
        throw DimensionError("pad2d expects a [F,N,T] tensor, got " + x.shape_str());
    if (p == 0) return x;
    const std::size_t F = x.dim(0), N = x.dim(1), T = x.dim(2);
    Tensor out({F, N + 2 * p, T + 2 * p});
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < T; ++j) out(f, i + p, j + p) = x(f, i, j);
    return out;
}

/// Batched variant for [T_mb,F,N,T] activations.
inline Tensor pad2d_batch(const Tensor& x, std::size_t p) {
    if (x.rank() != 4)
        throw DimensionError("pad2d_batch expects a [T_mb,F,N,T] tensor, got " + x.shape_str());
    if (p == 0) return x;
    const std::size_t B = x.dim(0), F = x.dim(1), N = x.dim(2), T = x.dim(3);
    Tensor out({B, F, N + 2 * p, T + 2 * p});
    for (std::size_t t = 0; t < B; ++t)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < T; ++j) out(t, f, i + p, j + p) = x(t, f, i, j);
    return out;
}

/// Layout transform that turns convolution into one 2D matrix product.
/// Input is the already padded map [F, N+2P, T+2P]; row (l*T_p + m) of the
/// result holds, flattened over (f, j, k), the receptive field read by output
/// pixel (l, m).
inline Tensor im2col(const Tensor& x, const ConvGeometry& g) {
    if (x.rank() != 3)
        throw DimensionError("im2col expects a [F,H,W] tensor, got " + x.shape_str());
    const std::size_t F = x.dim(0);
    if (x.dim(1) != g.padded_width() || x.dim(2) != g.padded_height())
        throw DimensionError("im2col: input " + x.shape_str() + " inconsistent with geometry [" +
                             std::to_string(g.padded_width()) + "," +
                             std::to_string(g.padded_height()) + "] (padded)");
    const std::size_t R = g.field, S = g.stride;
    Tensor cols({g.out_width * g.out_height, F * R * R});
    for (std::size_t l = 0; l < g.out_width; ++l)
        for (std::size_t m = 0; m < g.out_height; ++m) {
            const std::size_t row = l * g.out_height + m;
            std::size_t c = 0;
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t j = 0; j < R; ++j)
                    for (std::size_t k = 0; k < R; ++k)
                        cols(row, c++) = x(f, S * l + j, S * m + k);
        }
    return cols;
}

/// Scatter-add adjoint of im2col: accumulates every column entry back onto
/// the padded map position it was read from.
inline Tensor col2im(const Tensor& cols, std::size_t channels, const ConvGeometry& g) {
    const std::size_t R = g.field, S = g.stride;
    if (cols.rank() != 2 || cols.dim(0) != g.out_width * g.out_height ||
        cols.dim(1) != channels * R * R)
        throw DimensionError("col2im: columns " + cols.shape_str() +
                             " inconsistent with geometry/channels");
    Tensor x({channels, g.padded_width(), g.padded_height()});
    for (std::size_t l = 0; l < g.out_width; ++l)
        for (std::size_t m = 0; m < g.out_height; ++m) {
            const std::size_t row = l * g.out_height + m;
            std::size_t c = 0;
            for (std::size_t f = 0; f < channels; ++f)
                for (std::size_t j = 0; j < R; ++j)
                    for (std::size_t k = 0; k < R; ++k)
                        x(f, S * l + j, S * m + k) += cols(row, c++);
        }
    return x;
}

/// Flatten a [F_out, F_in, R, R] weight tensor into the [F_in*R*R, F_out]
/// matrix that multiplies im2col output.
inline Tensor flatten_kernel(const Tensor& theta) {
    if (theta.rank() != 4)
        throw DimensionError("flatten_kernel expects [F_out,F_in,R,R], got " + theta.shape_str());
    const std::size_t Fo = theta.dim(0), Fi = theta.dim(1), R = theta.dim(2);
    Tensor flat({Fi * R * R, Fo});
    for (std::size_t fo = 0; fo < Fo; ++fo) {
        std::size_t c = 0;
        for (std::size_t fi = 0; fi < Fi; ++fi)
            for (std::size_t j = 0; j < R; ++j)
                for (std::size_t k = 0; k < R; ++k) flat(c++, fo) = theta(fo, fi, j, k);
    }
    return flat;
}

/// Max pooling of one [F,H,W] map as a row-maximum search over flattened
/// windows. Values plus the in-window argmax (j,k) of each winner; ties break
/// toward the smallest row-major (j,k).
struct PoolRowsResult {
    Tensor values;                    // [F, N_p, T_p]
    std::vector<std::uint32_t> arg_j; // winner row offset per output element
    std::vector<std::uint32_t> arg_k; // winner column offset per output element
};

inline PoolRowsResult pool_rows(const Tensor& x, std::size_t field, std::size_t stride) {
    if (x.rank() != 3)
        throw DimensionError("pool_rows expects a [F,H,W] tensor, got " + x.shape_str());
    const std::size_t F = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (field == 0 || stride == 0 || H < field || W < field)
        throw GeometryError("pooling window exceeds input bounds");
    if ((H - field) % stride != 0 || (W - field) % stride != 0)
        throw GeometryError("pooling geometry does not divide input " + x.shape_str() +
                            " evenly (field " + std::to_string(field) + ", stride " +
                            std::to_string(stride) + ")");
    const std::size_t Np = (H - field) / stride + 1;
    const std::size_t Tp = (W - field) / stride + 1;
    PoolRowsResult r{Tensor({F, Np, Tp}), {}, {}};
    r.arg_j.assign(F * Np * Tp, 0);
    r.arg_k.assign(F * Np * Tp, 0);
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t l = 0; l < Np; ++l)
            for (std::size_t m = 0; m < Tp; ++m) {
                double best = x(f, stride * l, stride * m);
                std::size_t bj = 0, bk = 0;
                for (std::size_t j = 0; j < field; ++j)
                    for (std::size_t k = 0; k < field; ++k) {
                        const double v = x(f, stride * l + j, stride * m + k);
                        if (v > best) {
                            best = v;
                            bj = j;
                            bk = k;
                        }
                    }
                r.values(f, l, m) = best;
                const std::size_t idx = (f * Np + l) * Tp + m;
                r.arg_j[idx] = static_cast<std::uint32_t>(bj);
                r.arg_k[idx] = static_cast<std::uint32_t>(bk);
            }
    return r;
}

}  // namespace indexnet
