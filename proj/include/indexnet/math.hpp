#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>

#include "indexnet/errors.hpp"
#include "indexnet/tensor.hpp"

namespace indexnet {

/// Deterministic, serializable PRNG (splitmix64 + polar Gaussian). The
/// standard <random> distributions are not bit-stable across library
/// implementations, and checkpoints must reproduce training exactly.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform draw in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal draw, Marsaglia polar method with one cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double mul = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * mul;
        has_spare_ = true;
        return u * mul;
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // Checkpoint plumbing.
    std::uint64_t state() const { return state_; }
    bool has_spare() const { return has_spare_; }
    double spare() const { return spare_; }
    void restore(std::uint64_t state, bool has_spare, double spare) {
        state_ = state;
        has_spare_ = has_spare;
        spare_ = spare;
    }

  private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Activation functions g and their derivatives g'. The x >= 0 branch applies
// at exactly 0 for the rectifier family.

enum class ActivationKind { Sigmoid, Tanh, ReLU, LeakyReLU, ParametricReLU, ELU };

struct Activation {
    ActivationKind kind = ActivationKind::Tanh;
    double alpha = 0.0;  // slope of ParametricReLU's negative branch

    static Activation sigmoid() { return {ActivationKind::Sigmoid, 0.0}; }
    static Activation tanh() { return {ActivationKind::Tanh, 0.0}; }
    static Activation relu() { return {ActivationKind::ReLU, 0.0}; }
    static Activation leaky_relu() { return {ActivationKind::LeakyReLU, 0.0}; }
    static Activation parametric_relu(double alpha) {
        if (!(alpha > 0.0) || !std::isfinite(alpha))
            throw ConfigError("ParametricReLU slope must be a finite positive value");
        return {ActivationKind::ParametricReLU, alpha};
    }
    static Activation elu() { return {ActivationKind::ELU, 0.0}; }
};

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double activate_scalar(const Activation& g, double x) {
    switch (g.kind) {
        case ActivationKind::Sigmoid: return sigmoid_scalar(x);
        case ActivationKind::Tanh: return std::tanh(x);
        case ActivationKind::ReLU: return x >= 0.0 ? x : 0.0;
        case ActivationKind::LeakyReLU: return x >= 0.0 ? x : 0.01 * x;
        case ActivationKind::ParametricReLU: return x >= 0.0 ? x : g.alpha * x;
        case ActivationKind::ELU: return x >= 0.0 ? x : std::exp(x) - 1.0;
    }
    return 0.0;
}

inline double activate_prime_scalar(const Activation& g, double x) {
    switch (g.kind) {
        case ActivationKind::Sigmoid: {
            const double s = sigmoid_scalar(x);
            return s * (1.0 - s);
        }
        case ActivationKind::Tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case ActivationKind::ReLU: return x >= 0.0 ? 1.0 : 0.0;
        case ActivationKind::LeakyReLU: return x >= 0.0 ? 1.0 : 0.01;
        case ActivationKind::ParametricReLU: return x >= 0.0 ? 1.0 : g.alpha;
        case ActivationKind::ELU: return x >= 0.0 ? 1.0 : std::exp(x);
    }
    return 0.0;
}

inline void require_finite(const Tensor& a, const char* where) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!std::isfinite(a[i]))
            throw NumericError(std::string(where) + ": non-finite input at flat index " +
                               std::to_string(i));
}

inline Tensor activate(const Activation& g, const Tensor& a) {
    require_finite(a, "activate");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = activate_scalar(g, out[i]);
    return out;
}

inline Tensor activate_prime(const Activation& g, const Tensor& a) {
    require_finite(a, "activate_prime");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = activate_prime_scalar(g, out[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Output function

/// Numerically stable softmax of a rank-1 tensor (max-shifted exponentials).
inline Tensor softmax(const Tensor& a) {
    if (a.rank() != 1) throw DimensionError("softmax expects a rank-1 tensor, got " + a.shape_str());
    require_finite(a, "softmax");
    Tensor out = a;
    double mx = out[0];
    for (std::size_t i = 1; i < out.size(); ++i) mx = std::max(mx, out[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(out[i] - mx);
        z += out[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= z;
    return out;
}

/// Softmax applied along the last axis of a rank-2 or rank-3 tensor.
inline Tensor softmax_lastaxis(const Tensor& a) {
    require_finite(a, "softmax");
    const std::size_t width = a.dim(a.rank() - 1);
    const std::size_t rows = a.size() / width;
    Tensor out = a;
    for (std::size_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * width;
        double mx = p[0];
        for (std::size_t i = 1; i < width; ++i) mx = std::max(mx, p[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
            p[i] = std::exp(p[i] - mx);
            z += p[i];
        }
        for (std::size_t i = 0; i < width; ++i) p[i] /= z;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss functions

enum class LossKind { MSE, CrossEntropy, BinnedCrossEntropy };

/// Count of cross-entropy evaluations that hit the 1e-15 probability floor.
inline std::atomic<std::uint64_t>& loss_clamp_warnings() {
    static std::atomic<std::uint64_t> count{0};
    return count;
}

inline double safe_log(double p) {
    constexpr double floor = 1e-15;
    if (p < floor) {
        loss_clamp_warnings().fetch_add(1, std::memory_order_relaxed);
        p = floor;
    }
    return std::log(p);
}

/// J(Theta) over a mini-batch. MSE wants predictions and targets of equal
/// shape; cross-entropy wants predictions [T_mb,F] against class indices
/// [T_mb]; the binned variant wants [T_mb,F,C] against bin indices [T_mb,F].
inline double loss(LossKind kind, const Tensor& predictions, const Tensor& targets,
                   std::size_t t_mb) {
    if (t_mb == 0) throw DimensionError("loss: mini-batch size must be positive");
    switch (kind) {
        case LossKind::MSE: {
            if (!predictions.same_shape(targets))
                throw DimensionError("loss(MSE): shape mismatch " + predictions.shape_str() +
                                     " vs " + targets.shape_str());
            double s = 0.0;
            for (std::size_t i = 0; i < predictions.size(); ++i) {
                const double d = targets[i] - predictions[i];
                s += d * d;
            }
            return s / (2.0 * static_cast<double>(t_mb));
        }
        case LossKind::CrossEntropy: {
            if (predictions.rank() != 2 || targets.rank() != 1 ||
                targets.dim(0) != predictions.dim(0))
                throw DimensionError("loss(xent): want predictions [T_mb,F] and class indices "
                                     "[T_mb], got " +
                                     predictions.shape_str() + " and " + targets.shape_str());
            double s = 0.0;
            for (std::size_t t = 0; t < predictions.dim(0); ++t) {
                const auto cls = static_cast<std::size_t>(targets(t));
                if (cls >= predictions.dim(1))
                    throw DimensionError("loss(xent): class index " + std::to_string(cls) +
                                         " out of range for " + predictions.shape_str());
                s -= safe_log(predictions(t, cls));
            }
            return s / static_cast<double>(t_mb);
        }
        case LossKind::BinnedCrossEntropy: {
            if (predictions.rank() != 3 || targets.rank() != 2 ||
                targets.dim(0) != predictions.dim(0) || targets.dim(1) != predictions.dim(1))
                throw DimensionError("loss(binned xent): want predictions [T_mb,F,C] and bin "
                                     "indices [T_mb,F], got " +
                                     predictions.shape_str() + " and " + targets.shape_str());
            if (predictions.dim(2) < 2)
                throw DimensionError("loss(binned xent): need at least 2 bins");
            double s = 0.0;
            for (std::size_t t = 0; t < predictions.dim(0); ++t)
                for (std::size_t f = 0; f < predictions.dim(1); ++f) {
                    const auto bin = static_cast<std::size_t>(targets(t, f));
                    if (bin >= predictions.dim(2))
                        throw DimensionError("loss(binned xent): bin index out of range");
                    s -= safe_log(predictions(t, f, bin));
                }
            return s / static_cast<double>(t_mb);
        }
    }
    return 0.0;
}

// ---------------------------------------------------------------------------
// Weight initialization

enum class WeightInitLaw { Normal, Uniform };

/// Glorot-scaled init: each entry is sqrt(6/(F_in+F_out)) times a standard
/// normal draw; the conventional uniform law over the same bound is
/// available behind the law switch.
inline Tensor init_weights(std::size_t fan_in, std::size_t fan_out, std::uint64_t rng_seed,
                           WeightInitLaw law = WeightInitLaw::Normal) {
    if (fan_in == 0 || fan_out == 0)
        throw DimensionError("init_weights: fan-in and fan-out must be positive");
    const double scale = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Rng rng(rng_seed);
    Tensor theta({fan_out, fan_in});
    for (std::size_t i = 0; i < theta.size(); ++i)
        theta[i] = law == WeightInitLaw::Normal ? scale * rng.normal()
                                                : scale * (2.0 * rng.uniform() - 1.0);
    return theta;
}

/// Diagonal LSTM init: 0.5 on the diagonal, optionally jittered by
/// Glorot-scaled noise; all off-diagonal entries are 0.
inline Tensor init_lstm_diagonal(std::size_t fan_in, std::size_t fan_out, bool randomize,
                                 std::uint64_t rng_seed) {
    if (fan_in == 0 || fan_out == 0)
        throw DimensionError("init_lstm_diagonal: fans must be positive");
    if (!randomize && fan_in != fan_out)
        throw DimensionError("init_lstm_diagonal: deterministic diagonal init requires a square "
                             "matrix, got [" +
                             std::to_string(fan_out) + "," + std::to_string(fan_in) + "]");
    const double scale = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Rng rng(rng_seed);
    Tensor theta({fan_out, fan_in});
    const std::size_t d = std::min(fan_in, fan_out);
    for (std::size_t f = 0; f < d; ++f)
        theta(f, f) = 0.5 * (1.0 + (randomize ? scale * rng.normal() : 0.0));
    return theta;
}

}  // namespace indexnet
