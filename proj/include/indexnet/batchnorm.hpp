#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "indexnet/errors.hpp"
#include "indexnet/tensor.hpp"

namespace indexnet {

enum class BatchNormMode {
    PerFeature,    // fc activations [T_mb, F], normalized over t
    PerFeatureMap  // conv feature maps [T_mb, F, N, T], normalized over (t, l, m)
};

/// Batch-normalization state for one layer: the learned (gamma, beta) pair
/// per feature, the per-forward caches needed by the Jacobian contraction,
/// and running statistics for eval mode.
///
/// The running statistics follow the cumulative average
///   E_{e+1} = (e*E_e + mean)/(e+1)
/// updated once per mini-batch, with matching variance bookkeeping. Eval
/// rescales the running variance by T_mb/(T_mb-1).
class BatchNormState {
  private:
    static double* sample_feature_ptr(Tensor& x, std::size_t t, std::size_t f,
                                      std::size_t spatial) {
        return x.data() + (t * x.dim(1) + f) * spatial;
    }
    static const double* sample_feature_ptr(const Tensor& x, std::size_t t, std::size_t f,
                                            std::size_t spatial) {
        return x.data() + (t * x.dim(1) + f) * spatial;
    }

  public:
    BatchNormState() = default;

    explicit BatchNormState(std::size_t features, BatchNormMode mode = BatchNormMode::PerFeature,
                            double epsilon = 1e-5)
        : mode_(mode),
          epsilon_(epsilon),
          gamma_(Tensor::full({features}, 1.0)),
          beta_(Tensor({features})),
          running_mean_(Tensor({features})),
          running_var_(Tensor({features})) {}

    std::size_t features() const { return gamma_.dim(0); }
    BatchNormMode mode() const { return mode_; }
    double epsilon() const { return epsilon_; }

    Tensor& gamma() { return gamma_; }
    const Tensor& gamma() const { return gamma_; }
    Tensor& beta() { return beta_; }
    const Tensor& beta() const { return beta_; }

    const Tensor& batch_mean() const { return batch_mean_; }
    const Tensor& batch_var() const { return batch_var_; }
    const Tensor& normalized() const { return normalized_; }
    const Tensor& gamma_tilde() const { return gamma_tilde_; }
    Tensor& running_mean() { return running_mean_; }
    const Tensor& running_mean() const { return running_mean_; }
    Tensor& running_var() { return running_var_; }
    const Tensor& running_var() const { return running_var_; }
    std::size_t epoch_counter() const { return epoch_counter_; }
    std::size_t last_batch_size() const { return last_batch_size_; }

    bool has_cache() const { return normalized_.size() > 0; }

    /// Training forward: y = gamma*h_tilde + beta with statistics over the
    /// normalization axes of this mode. Caches mean, variance, h_tilde and
    /// gamma_tilde for the backward contraction.
    Tensor forward_train(const Tensor& h) {
        check_input(h);
        const std::size_t t_mb = h.dim(0);
        if (t_mb < 2)
            throw DimensionError("bn_forward_train: needs a mini-batch of at least 2 samples, got " +
                                 std::to_string(t_mb));
        const std::size_t F = features();
        const std::size_t spatial = h.size() / (t_mb * F);
        const double divisor = static_cast<double>(t_mb * spatial);

        batch_mean_ = Tensor({F});
        batch_var_ = Tensor({F});
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const double* p = sample_feature_ptr(h, t, f, spatial);
                for (std::size_t s = 0; s < spatial; ++s) batch_mean_(f) += p[s];
            }
        for (std::size_t f = 0; f < F; ++f) batch_mean_(f) /= divisor;
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const double* p = sample_feature_ptr(h, t, f, spatial);
                for (std::size_t s = 0; s < spatial; ++s) {
                    const double d = p[s] - batch_mean_(f);
                    batch_var_(f) += d * d;
                }
            }
        for (std::size_t f = 0; f < F; ++f) batch_var_(f) /= divisor;

        gamma_tilde_ = Tensor({F});
        for (std::size_t f = 0; f < F; ++f)
            gamma_tilde_(f) = gamma_(f) / std::sqrt(batch_var_(f) + epsilon_);

        normalized_ = h;
        Tensor y = h;
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const double inv_sd = 1.0 / std::sqrt(batch_var_(f) + epsilon_);
                double* pn = sample_feature_ptr(normalized_, t, f, spatial);
                double* py = sample_feature_ptr(y, t, f, spatial);
                for (std::size_t s = 0; s < spatial; ++s) {
                    pn[s] = (pn[s] - batch_mean_(f)) * inv_sd;
                    py[s] = gamma_(f) * pn[s] + beta_(f);
                }
            }
        last_batch_size_ = t_mb;
        updated_since_forward_ = false;
        return y;
    }

    /// Fold the cached batch statistics into the running mean/variance and
    /// advance the counter. One call per training forward.
    void update_running() {
        if (!has_cache())
            throw StateError("bn_update_running: no cached statistics; run a training forward first");
        if (updated_since_forward_)
            throw StateError("bn_update_running: already folded the current batch statistics");
        const double e = static_cast<double>(epoch_counter_);
        for (std::size_t f = 0; f < features(); ++f) {
            running_mean_(f) = (e * running_mean_(f) + batch_mean_(f)) / (e + 1.0);
            running_var_(f) = (e * running_var_(f) + batch_var_(f)) / (e + 1.0);
        }
        ++epoch_counter_;
        updated_since_forward_ = true;
    }

    /// Eval forward: batch-independent normalization by the running
    /// statistics, variance rescaled by T_mb/(T_mb-1).
    Tensor forward_eval(const Tensor& h) const {
        check_input(h);
        if (epoch_counter_ == 0)
            throw StateError("bn_forward_eval: running statistics uninitialized (no training "
                             "batches folded yet)");
        const std::size_t t_mb = h.dim(0);
        const std::size_t F = features();
        const std::size_t spatial = h.size() / (t_mb * F);
        const double n = static_cast<double>(last_batch_size_);
        Tensor y = h;
        for (std::size_t f = 0; f < F; ++f) {
            const double var = n / (n - 1.0) * running_var_(f);
            const double inv_sd = 1.0 / std::sqrt(var + epsilon_);
            for (std::size_t t = 0; t < t_mb; ++t) {
                double* py = sample_feature_ptr(y, t, f, spatial);
                for (std::size_t s = 0; s < spatial; ++s)
                    py[s] = gamma_(f) * (py[s] - running_mean_(f)) * inv_sd + beta_(f);
            }
        }
        return y;
    }

    /// Vector-Jacobian product with the batch-norm Jacobian
    ///   J^(tt') = gamma_tilde * [delta_t^t' - (1 + h~_t' h~_t)/D]
    /// contracted over t' (and l', m' in map mode) without materializing J:
    ///   out_t = gamma_tilde * (u_t - (mu1 + mu2*h~_t)/D)
    /// with mu1 = sum u, mu2 = sum u*h~ over the normalization axes.
    Tensor jacobian_contract(const Tensor& upstream) const {
        if (!has_cache())
            throw StateError("bn_jacobian_contract: no cached forward");
        if (!upstream.same_shape(normalized_))
            throw StateError("bn_jacobian_contract: upstream " + upstream.shape_str() +
                             " does not match cached forward " + normalized_.shape_str());
        const std::size_t t_mb = upstream.dim(0);
        const std::size_t F = features();
        const std::size_t spatial = upstream.size() / (t_mb * F);
        const double divisor = static_cast<double>(t_mb * spatial);

        std::vector<double> mu1(F, 0.0), mu2(F, 0.0);
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const double* pu = sample_feature_ptr(upstream, t, f, spatial);
                const double* pn = sample_feature_ptr(normalized_, t, f, spatial);
                for (std::size_t s = 0; s < spatial; ++s) {
                    mu1[f] += pu[s];
                    mu2[f] += pu[s] * pn[s];
                }
            }

        Tensor out = upstream;
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const double* pn = sample_feature_ptr(normalized_, t, f, spatial);
                double* po = sample_feature_ptr(out, t, f, spatial);
                for (std::size_t s = 0; s < spatial; ++s)
                    po[s] = gamma_tilde_(f) * (po[s] - (mu1[f] + mu2[f] * pn[s]) / divisor);
            }
        return out;
    }

    void restore_counters(std::size_t epoch_counter, std::size_t last_batch_size) {
        epoch_counter_ = epoch_counter;
        last_batch_size_ = last_batch_size;
    }

  private:
    void check_input(const Tensor& h) const {
        const bool ok = mode_ == BatchNormMode::PerFeature
                            ? (h.rank() == 2 && h.dim(1) == features())
                            : (h.rank() == 4 && h.dim(1) == features());
        if (!ok)
            throw DimensionError("batchnorm: input " + h.shape_str() + " does not match a " +
                                 std::to_string(features()) + "-feature " +
                                 (mode_ == BatchNormMode::PerFeature ? "[T_mb,F]" : "[T_mb,F,N,T]") +
                                 " layout");
    }

    BatchNormMode mode_ = BatchNormMode::PerFeature;
    double epsilon_ = 1e-5;
    Tensor gamma_, beta_;
    Tensor batch_mean_, batch_var_;  // cached per training forward
    Tensor normalized_;              // cached h~
    Tensor gamma_tilde_;             // cached gamma/(var+eps)^1/2
    Tensor running_mean_, running_var_;
    std::size_t epoch_counter_ = 0;
    std::size_t last_batch_size_ = 0;
    bool updated_since_forward_ = true;
};

}  // namespace indexnet
