#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "indexnet/errors.hpp"
#include "indexnet/tensor.hpp"

namespace indexnet {

enum class OptimizerKind { SGD, Momentum, Nesterov, Adagrad, RMSprop, Adadelta, Adam };

inline const char* optimizer_name(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::SGD: return "sgd";
        case OptimizerKind::Momentum: return "momentum";
        case OptimizerKind::Nesterov: return "nesterov";
        case OptimizerKind::Adagrad: return "adagrad";
        case OptimizerKind::RMSprop: return "rmsprop";
        case OptimizerKind::Adadelta: return "adadelta";
        case OptimizerKind::Adam: return "adam";
    }
    return "?";
}

/// Default learning rate per kind; the adaptive rules carry the values the
/// derivations quote as the usual choices and the plain rules a gentle 1e-3.
inline double default_learning_rate(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::Adagrad: return 1e-2;
        case OptimizerKind::RMSprop: return 1e-3;
        case OptimizerKind::Adam: return 1e-3;
        case OptimizerKind::Adadelta: return 0.0;  // has no learning rate
        default: return 1e-3;
    }
}

struct OptimizerHyper {
    double eta = 1e-3;         // learning rate
    double gamma = 0.9;        // momentum / EMA coefficient
    double beta1 = 0.9;        // Adam first-moment coefficient
    double beta2 = 0.999;      // Adam second-moment coefficient
    double epsilon = 1e-8;     // division guard inside the roots
    double alpha0 = 0.0;       // learning-rate decay exponent
};

/// Per-parameter-group accumulators plus the step counter, one instance per
/// trained model. The v/m tensors lazily match the parameter shapes on the
/// first step.
class OptimizerState {
  public:
    OptimizerState() = default;
    OptimizerState(OptimizerKind kind, OptimizerHyper hyper) : kind_(kind), hyper_(hyper) {}
    static OptimizerState with_defaults(OptimizerKind kind) {
        OptimizerHyper h;
        h.eta = default_learning_rate(kind);
        return OptimizerState(kind, h);
    }

    OptimizerKind kind() const { return kind_; }
    OptimizerHyper& hyper() { return hyper_; }
    const OptimizerHyper& hyper() const { return hyper_; }
    std::size_t step_count() const { return step_count_; }
    std::vector<Tensor>& v() { return v_; }
    std::vector<Tensor>& m() { return m_; }
    void restore_step_count(std::size_t e) { step_count_ = e; }

    using GradAt = std::function<std::vector<Tensor>(const std::vector<Tensor*>&)>;

    /// One update of every parameter group by the configured rule. Nesterov
    /// re-evaluates the gradient at Theta - gamma*v through grad_at; a NaN
    /// gradient refuses the whole step.
    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              const GradAt& grad_at = nullptr) {
        if (params.size() != grads.size())
            throw DimensionError("optimizer step: " + std::to_string(params.size()) +
                                 " parameter groups vs " + std::to_string(grads.size()) +
                                 " gradient groups");
        ensure_slots(params);
        for (std::size_t g = 0; g < params.size(); ++g) {
            if (!params[g]->same_shape(*grads[g]))
                throw DimensionError("optimizer step: group " + std::to_string(g) + " shapes " +
                                     params[g]->shape_str() + " vs " + grads[g]->shape_str());
            for (std::size_t i = 0; i < grads[g]->size(); ++i)
                if (!std::isfinite((*grads[g])[i]))
                    throw NumericError("optimizer step refused: non-finite gradient in group " +
                                       std::to_string(g));
        }
        const std::size_t e = ++step_count_;
        const OptimizerHyper& hp = hyper_;

        std::vector<Tensor> shifted_grads;
        if (kind_ == OptimizerKind::Nesterov) {
            if (!grad_at)
                throw ConfigError("Nesterov requires a gradient re-evaluation callback");
            // evaluate the gradient at Theta - gamma*v
            for (std::size_t g = 0; g < params.size(); ++g)
                for (std::size_t i = 0; i < params[g]->size(); ++i)
                    (*params[g])[i] -= hp.gamma * v_[g][i];
            shifted_grads = grad_at(params);
            for (std::size_t g = 0; g < params.size(); ++g)
                for (std::size_t i = 0; i < params[g]->size(); ++i)
                    (*params[g])[i] += hp.gamma * v_[g][i];
            if (shifted_grads.size() != params.size())
                throw DimensionError("Nesterov callback returned a wrong group count");
        }

        for (std::size_t g = 0; g < params.size(); ++g) {
            Tensor& p = *params[g];
            const Tensor& d = kind_ == OptimizerKind::Nesterov ? shifted_grads[g] : *grads[g];
            Tensor& v = v_[g];
            Tensor& m = m_[g];
            switch (kind_) {
                case OptimizerKind::SGD:
                    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= hp.eta * d[i];
                    break;
                case OptimizerKind::Momentum:
                case OptimizerKind::Nesterov:
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        v[i] = hp.gamma * v[i] + hp.eta * d[i];
                        p[i] -= v[i];
                    }
                    break;
                case OptimizerKind::Adagrad:
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        v[i] += d[i] * d[i];
                        p[i] -= hp.eta / std::sqrt(v[i] + hp.epsilon) * d[i];
                    }
                    break;
                case OptimizerKind::RMSprop:
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        v[i] = hp.gamma * v[i] + (1.0 - hp.gamma) * d[i] * d[i];
                        p[i] -= hp.eta / std::sqrt(v[i] + hp.epsilon) * d[i];
                    }
                    break;
                case OptimizerKind::Adadelta:
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        v[i] = hp.gamma * v[i] + (1.0 - hp.gamma) * d[i] * d[i];
                        const double update =
                            std::sqrt(m[i] + hp.epsilon) / std::sqrt(v[i] + hp.epsilon) * d[i];
                        m[i] = hp.gamma * m[i] + (1.0 - hp.gamma) * update * update;
                        p[i] -= update;
                    }
                    break;
                case OptimizerKind::Adam: {
                    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(e));
                    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(e));
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * d[i];
                        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * d[i] * d[i];
                        const double mhat = m[i] / bc1;
                        const double vhat = v[i] / bc2;
                        p[i] -= hp.eta / std::sqrt(vhat + hp.epsilon) * mhat;
                    }
                    break;
                }
            }
        }
    }

  private:
    void ensure_slots(const std::vector<Tensor*>& params) {
        if (v_.size() == params.size()) return;
        if (!v_.empty())
            throw StateError("optimizer state bound to a different parameter group count");
        v_.reserve(params.size());
        m_.reserve(params.size());
        for (const Tensor* p : params) {
            v_.emplace_back(p->shape());
            m_.emplace_back(p->shape());
        }
    }

    OptimizerKind kind_ = OptimizerKind::SGD;
    OptimizerHyper hyper_;
    std::vector<Tensor> v_, m_;
    std::size_t step_count_ = 0;
};

/// Multiplicative learning-rate decay eta_e = exp(-alpha0) * eta_{e-1}.
inline double lr_decay(double eta_prev, double alpha0) {
    if (!(eta_prev > 0.0)) throw ConfigError("lr_decay: learning rate must be positive");
    return std::exp(-alpha0) * eta_prev;
}

/// Rescale Theta onto the L2 ball of radius C when it escapes; untouched
/// (bitwise) otherwise.
inline Tensor clip_weights(const Tensor& theta, double clip_threshold) {
    if (!(clip_threshold > 0.0)) throw ConfigError("clip threshold must be positive");
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) norm_sq += theta[i] * theta[i];
    const double norm = std::sqrt(norm_sq);
    if (norm <= clip_threshold) return theta;
    Tensor out = theta;
    out *= clip_threshold / norm;
    return out;
}

struct RegularizerConfig {
    double lambda_l2 = 0.0;
    double lambda_l1 = 0.0;
    double clip_threshold = 0.0;  // 0 disables clipping

    RegularizerConfig() = default;
    RegularizerConfig(double l2, double l1, double clip)
        : lambda_l2(l2), lambda_l1(l1), clip_threshold(clip) {
        if (l2 < 0.0 || l1 < 0.0 || clip < 0.0)
            throw ConfigError("regularizer parameters must be non-negative");
    }
    bool clipping_enabled() const { return clip_threshold > 0.0; }
};

/// Penalty gradient 2*lambda_L2*Theta + lambda_L1*sign(Theta), sign(0) = 0.
/// The trainer adds this to the data gradients before the optimizer step.
inline Tensor penalty_grad(const RegularizerConfig& config, const Tensor& theta) {
    Tensor g(theta.shape());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double w = theta[i];
        double v = 2.0 * config.lambda_l2 * w;
        if (w > 0.0)
            v += config.lambda_l1;
        else if (w < 0.0)
            v -= config.lambda_l1;
        g[i] = v;
    }
    return g;
}

/// The penalty terms themselves, for loss reporting.
inline double penalty_loss(const RegularizerConfig& config, const Tensor& theta) {
    double l2 = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        l2 += theta[i] * theta[i];
        l1 += std::abs(theta[i]);
    }
    return config.lambda_l2 * l2 + config.lambda_l1 * l1;
}

}  // namespace indexnet
