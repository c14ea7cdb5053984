#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "indexnet/batchnorm.hpp"
#include "indexnet/errors.hpp"
#include "indexnet/math.hpp"
#include "indexnet/model.hpp"
#include "indexnet/tensor.hpp"

namespace indexnet {

// ---------------------------------------------------------------------------
// Fully connected building blocks. One layer is weight averaging followed by
// activation and optional batch normalization; bias terms are omitted (beta
// plays that role whenever BN is active).

struct DenseLayer {
    Tensor theta;  // [F_out, F_in]
    Activation activation;
    std::optional<BatchNormState> bn;

    // caches from the last training forward
    Tensor in;  // consumed input [T_mb, F_in]
    Tensor a;   // pre-activations [T_mb, F_out]
    Tensor h;   // g(a)
    Tensor y;   // BN output, or h when BN is off

    DenseLayer() = default;
    DenseLayer(std::size_t fan_in, std::size_t fan_out, Activation act, bool batchnorm,
               std::uint64_t seed)
        : theta(init_weights(fan_in, fan_out, seed)), activation(act) {
        if (batchnorm) bn.emplace(fan_out, BatchNormMode::PerFeature);
    }
};

/// Weight averaging a = Theta h per sample: out(t,f) = sum_f' theta(f,f') in(t,f').
inline Tensor weight_average(const Tensor& theta, const Tensor& input) {
    if (input.rank() != 2 || theta.rank() != 2 || input.dim(1) != theta.dim(1))
        throw DimensionError("weight_average: input " + input.shape_str() +
                             " does not match weights " + theta.shape_str());
    const std::size_t t_mb = input.dim(0), fi = theta.dim(1), fo = theta.dim(0);
    Tensor out({t_mb, fo});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < fo; ++f) {
            const double* w = theta.data() + f * fi;
            const double* x = input.data() + t * fi;
            double s = 0.0;
            for (std::size_t fp = 0; fp < fi; ++fp) s += w[fp] * x[fp];
            out(t, f) = s;
        }
    return out;
}

/// Transposed contraction used by every backward step: out(t,f) = sum_f'
/// theta(f',f) delta(t,f').
inline Tensor upstream_through(const Tensor& theta, const Tensor& delta) {
    if (delta.rank() != 2 || delta.dim(1) != theta.dim(0))
        throw DimensionError("upstream_through: deltas " + delta.shape_str() +
                             " do not match weights " + theta.shape_str());
    const std::size_t t_mb = delta.dim(0), fi = theta.dim(1), fo = theta.dim(0);
    Tensor out({t_mb, fi});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t fp = 0; fp < fo; ++fp) {
            const double d = delta(t, fp);
            if (d == 0.0) continue;
            const double* w = theta.data() + fp * fi;
            double* o = out.data() + t * fi;
            for (std::size_t f = 0; f < fi; ++f) o[f] += w[f] * d;
        }
    return out;
}

/// One fully connected layer forward. Train mode fills the caches backward
/// needs; eval mode routes BN through the running statistics.
inline Tensor fc_forward(DenseLayer& layer, const Tensor& input, bool train) {
    Tensor a = weight_average(layer.theta, input);
    Tensor h = activate(layer.activation, a);
    Tensor y = h;
    if (layer.bn) y = train ? layer.bn->forward_train(h) : layer.bn->forward_eval(h);
    if (train) {
        layer.in = input;
        layer.a = std::move(a);
        layer.h = std::move(h);
        layer.y = y;
    }
    return y;
}

/// Error rate of the output layer, delta^(N-1) = dJ/da at the last weight
/// averaging. For cross-entropy the softmax Jacobian is already folded in.
inline Tensor output_delta(LossKind kind, const Tensor& h_out, const Tensor& targets,
                           std::size_t t_mb) {
    const double inv = 1.0 / static_cast<double>(t_mb);
    switch (kind) {
        case LossKind::MSE: {
            if (!h_out.same_shape(targets))
                throw DimensionError("output_delta(MSE): shape mismatch " + h_out.shape_str() +
                                     " vs " + targets.shape_str());
            Tensor d = h_out;
            d -= targets;
            d *= inv;
            return d;
        }
        case LossKind::CrossEntropy: {
            if (h_out.rank() != 2 || targets.rank() != 1 || targets.dim(0) != h_out.dim(0))
                throw DimensionError("output_delta(xent): want [T_mb,F] probabilities and [T_mb] "
                                     "class indices");
            Tensor d = h_out;
            for (std::size_t t = 0; t < h_out.dim(0); ++t)
                d(t, static_cast<std::size_t>(targets(t))) -= 1.0;
            d *= inv;
            return d;
        }
        case LossKind::BinnedCrossEntropy: {
            if (h_out.rank() != 3 || targets.rank() != 2)
                throw DimensionError("output_delta(binned): want [T_mb,F,C] probabilities and "
                                     "[T_mb,F] bin indices");
            Tensor d = h_out;
            for (std::size_t t = 0; t < h_out.dim(0); ++t)
                for (std::size_t f = 0; f < h_out.dim(1); ++f)
                    d(t, f, static_cast<std::size_t>(targets(t, f))) -= 1.0;
            d *= inv;
            return d;
        }
    }
    return Tensor();
}

/// Error-rate recursion for a hidden layer: contract the upstream deltas
/// through the layer-above weights, through the BN Jacobian of the layer
/// below (sum over t' included), then scale by g'(a).
inline Tensor hidden_delta_from_upstream(Tensor upstream, const BatchNormState* bn_below,
                                         const Tensor& a_below, const Activation& g) {
    if (bn_below) upstream = bn_below->jacobian_contract(upstream);
    Tensor gp = activate_prime(g, a_below);
    if (!upstream.same_shape(gp))
        throw StateError("hidden_delta: upstream " + upstream.shape_str() +
                         " does not match cached pre-activations " + a_below.shape_str());
    for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] *= gp[i];
    return upstream;
}

inline Tensor hidden_delta(const DenseLayer& layer_above, const Tensor& delta_above,
                           const BatchNormState* bn_below, const Tensor& a_below,
                           const Activation& g) {
    return hidden_delta_from_upstream(upstream_through(layer_above.theta, delta_above), bn_below,
                                      a_below, g);
}

/// Weight gradient Delta^Theta(f,f') = sum_t delta(t,f) y_below(t,f').
inline Tensor weight_grad(const Tensor& delta, const Tensor& y_below) {
    if (delta.rank() != 2 || y_below.rank() != 2 || delta.dim(0) != y_below.dim(0))
        throw DimensionError("weight_grad: batch dims disagree, " + delta.shape_str() + " vs " +
                             y_below.shape_str());
    const std::size_t t_mb = delta.dim(0), fo = delta.dim(1), fi = y_below.dim(1);
    Tensor g({fo, fi});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < fo; ++f) {
            const double d = delta(t, f);
            if (d == 0.0) continue;
            const double* yb = y_below.data() + t * fi;
            double* row = g.data() + f * fi;
            for (std::size_t fp = 0; fp < fi; ++fp) row[fp] += d * yb[fp];
        }
    return g;
}

/// BN coefficient gradients of the layer below, given what flows down from
/// above: Delta_gamma = sum(upstream * h~), Delta_beta = sum(upstream).
inline std::pair<Tensor, Tensor> coeff_grads_from_upstream(const Tensor& upstream,
                                                           const Tensor& h_tilde) {
    if (!upstream.same_shape(h_tilde))
        throw DimensionError("coeff_grads: upstream " + upstream.shape_str() +
                             " does not match normalized cache " + h_tilde.shape_str());
    const std::size_t t_mb = upstream.dim(0), F = upstream.dim(1);
    Tensor dgamma({F}), dbeta({F});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < F; ++f) {
            dgamma(f) += upstream(t, f) * h_tilde(t, f);
            dbeta(f) += upstream(t, f);
        }
    return {std::move(dgamma), std::move(dbeta)};
}

inline std::pair<Tensor, Tensor> coeff_grads(const Tensor& theta_above, const Tensor& delta_above,
                                             const Tensor& h_tilde) {
    return coeff_grads_from_upstream(upstream_through(theta_above, delta_above), h_tilde);
}

// ---------------------------------------------------------------------------
// Dropout

struct DropoutMask {
    Tensor mask;  // 0/1 entries, shaped like the activations
    double drop_probability = 0.0;
};

/// Inverted dropout: train-time h * m / (1-p) with P(m=0) = p, eval-time
/// identity, so no rescaling is ever needed at test time.
inline std::pair<Tensor, DropoutMask> dropout_apply(const Tensor& h, double p, bool train,
                                                    Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout probability must lie in [0,1), got " + std::to_string(p));
    if (!train || p == 0.0) return {h, DropoutMask{Tensor::full(h.shape(), 1.0), p}};
    Tensor mask(h.shape());
    Tensor out = h;
    const double scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < h.size(); ++i) {
        const bool keep = rng.uniform() >= p;
        mask[i] = keep ? 1.0 : 0.0;
        out[i] = keep ? h[i] * scale : 0.0;
    }
    return {std::move(out), DropoutMask{std::move(mask), p}};
}

// ---------------------------------------------------------------------------
// Residual skips on two consecutive fully connected layers.

enum class ResnetForm { NonStandard, Standard };

/// Two-layer residual block.
///
/// NonStandard keeps the WA -> activation -> BN layer structure and adds the
/// block input to the second layer's BN output. Standard re-cuts the unit as
/// activation -> BN -> WA and adds the block's input pre-activation to the
/// output pre-activation, so the input must be an a-stream value.
struct ResnetBlockFnn {
    DenseLayer first, second;
    ResnetForm form = ResnetForm::NonStandard;
    Tensor input_cache;
};

/// Builds a width -> bottleneck -> width residual block. In the standard
/// form each unit runs activation -> BN -> WA, so BN is sized to the unit
/// input; the non-standard form keeps the usual WA -> activation -> BN cut.
inline ResnetBlockFnn make_resnet_block_fnn(ResnetForm form, std::size_t width,
                                            std::size_t bottleneck, Activation act,
                                            bool batchnorm, std::uint64_t seed) {
    ResnetBlockFnn b;
    b.form = form;
    b.first = DenseLayer(width, bottleneck, act, false, seed + 1);
    b.second = DenseLayer(bottleneck, width, act, false, seed + 2);
    if (batchnorm) {
        if (form == ResnetForm::NonStandard) {
            b.first.bn.emplace(bottleneck, BatchNormMode::PerFeature);
            b.second.bn.emplace(width, BatchNormMode::PerFeature);
        } else {
            b.first.bn.emplace(width, BatchNormMode::PerFeature);
            b.second.bn.emplace(bottleneck, BatchNormMode::PerFeature);
        }
    }
    return b;
}

inline Tensor resnet_skip_forward(ResnetBlockFnn& block, const Tensor& input, bool train) {
    if (block.first.theta.dim(1) != block.second.theta.dim(0) ||
        block.second.theta.dim(0) != input.dim(1) ||
        block.second.theta.dim(1) != block.first.theta.dim(0))
        throw DimensionError("resnet block: widths do not chain for input " + input.shape_str());
    if (train) block.input_cache = input;
    if (block.form == ResnetForm::NonStandard) {
        Tensor y1 = fc_forward(block.first, input, train);
        Tensor y2 = fc_forward(block.second, y1, train);
        return y2 + input;
    }
    // Standard: input is a pre-activation stream.
    auto unit = [&](DenseLayer& l, const Tensor& a_in) {
        Tensor h = activate(l.activation, a_in);
        Tensor y = l.bn ? (train ? l.bn->forward_train(h) : l.bn->forward_eval(h)) : h;
        Tensor a = weight_average(l.theta, y);
        if (train) {
            l.in = a_in;  // the a-stream the unit consumed
            l.a = a_in;   // pre-activation the unit differentiates against
            l.h = std::move(h);
            l.y = y;
        }
        return a;
    };
    Tensor a1 = unit(block.first, input);
    Tensor a2 = unit(block.second, a1);
    return a2 + input;
}

/// Gradients of a residual block given dJ/d(block output). Returns dJ/d(block
/// input) and fills dtheta/dgamma/dbeta for both layers.
struct ResnetBlockGrads {
    Tensor dinput;
    Tensor dtheta_first, dtheta_second;
    Tensor dgamma_first, dbeta_first, dgamma_second, dbeta_second;
};

inline ResnetBlockGrads resnet_skip_delta(ResnetBlockFnn& block, const Tensor& dout) {
    if (block.input_cache.size() == 0)
        throw StateError("resnet_skip_delta: forward caches are stale");
    ResnetBlockGrads g;
    if (block.form == ResnetForm::NonStandard) {
        // dout lands on y2 and, through the skip, directly on the input.
        Tensor dy2 = dout;
        Tensor dh2 = block.second.bn ? block.second.bn->jacobian_contract(dy2) : dy2;
        if (block.second.bn) {
            auto [dg, db] = coeff_grads_from_upstream(dy2, block.second.bn->normalized());
            g.dgamma_second = std::move(dg);
            g.dbeta_second = std::move(db);
        }
        Tensor gp2 = activate_prime(block.second.activation, block.second.a);
        Tensor delta2 = dh2;
        for (std::size_t i = 0; i < delta2.size(); ++i) delta2[i] *= gp2[i];
        g.dtheta_second = weight_grad(delta2, block.second.in);

        Tensor dy1 = upstream_through(block.second.theta, delta2);
        Tensor dh1 = block.first.bn ? block.first.bn->jacobian_contract(dy1) : dy1;
        if (block.first.bn) {
            auto [dg, db] = coeff_grads_from_upstream(dy1, block.first.bn->normalized());
            g.dgamma_first = std::move(dg);
            g.dbeta_first = std::move(db);
        }
        Tensor gp1 = activate_prime(block.first.activation, block.first.a);
        Tensor delta1 = dh1;
        for (std::size_t i = 0; i < delta1.size(); ++i) delta1[i] *= gp1[i];
        g.dtheta_first = weight_grad(delta1, block.first.in);

        g.dinput = upstream_through(block.first.theta, delta1) + dout;
        return g;
    }
    // Standard: dout is dJ/da at the block output; the skip feeds it straight
    // back to the input pre-activation.
    auto unit_back = [&](DenseLayer& l, const Tensor& da_out, Tensor* dtheta, Tensor* dgamma,
                         Tensor* dbeta) {
        *dtheta = weight_grad(da_out, l.y);
        Tensor dy = upstream_through(l.theta, da_out);
        if (l.bn) {
            auto [dg, db] = coeff_grads_from_upstream(dy, l.bn->normalized());
            *dgamma = std::move(dg);
            *dbeta = std::move(db);
        }
        Tensor dh = l.bn ? l.bn->jacobian_contract(dy) : dy;
        Tensor gp = activate_prime(l.activation, l.a);
        for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= gp[i];
        return dh;  // dJ/d(a-stream input of the unit)
    };
    Tensor da1 = unit_back(block.second, dout, &g.dtheta_second, &g.dgamma_second,
                           &g.dbeta_second);
    Tensor da0 = unit_back(block.first, da1, &g.dtheta_first, &g.dgamma_first, &g.dbeta_first);
    g.dinput = da0 + dout;
    return g;
}

// ---------------------------------------------------------------------------
// Feedforward network: a stack of DenseLayers, optional per-layer dropout or
// skip markers, an output function picked by the loss kind.

struct FnnLayerConfig {
    std::size_t width = 0;
    Activation activation = Activation::tanh();
    bool batchnorm = false;
    double dropout_p = 0.0;
    bool skip_to_here = false;      // non-standard skip landing on this layer's output
    bool standard_skip_here = false;  // standard skip landing on this layer's pre-activation
};

class FnnNetwork : public Model {
  public:
    FnnNetwork(std::size_t input_width, std::vector<FnnLayerConfig> hidden,
               std::size_t output_width, LossKind loss_kind, std::uint64_t seed,
               double input_dropout_p = 0.0)
        : loss_kind_(loss_kind), input_dropout_p_(input_dropout_p), rng_(seed) {
        std::size_t fan_in = input_width;
        std::uint64_t s = seed;
        for (const auto& cfg : hidden) {
            if (cfg.batchnorm && cfg.dropout_p > 0.0)
                throw ConfigError("dropout and batch normalization are mutually exclusive on one "
                                  "layer");
            layers_.emplace_back(fan_in, cfg.width, cfg.activation, cfg.batchnorm, ++s);
            dropout_p_.push_back(cfg.dropout_p);
            skip_to_.push_back(cfg.skip_to_here);
            standard_skip_to_.push_back(cfg.standard_skip_here);
            fan_in = cfg.width;
        }
        layers_.emplace_back(fan_in, output_width, Activation::tanh(), false, ++s);
        dropout_p_.push_back(0.0);
        skip_to_.push_back(false);
        standard_skip_to_.push_back(false);
        validate_skips();
    }

    std::size_t depth() const { return layers_.size(); }
    DenseLayer& layer(std::size_t i) { return layers_[i]; }
    LossKind loss_kind() const { return loss_kind_; }

    std::vector<ParamRef> params() override {
        ensure_grad_slots();
        std::vector<ParamRef> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            out.push_back({"theta" + std::to_string(i), &layers_[i].theta, &dtheta_[i]});
            if (layers_[i].bn) {
                out.push_back({"gamma" + std::to_string(i), &layers_[i].bn->gamma(), &dgamma_[i],
                               false});
                out.push_back({"beta" + std::to_string(i), &layers_[i].bn->beta(), &dbeta_[i],
                               false});
            }
        }
        return out;
    }

    /// Forward pass; returns the output-function values.
    Tensor forward(const Tensor& inputs, bool train) {
        const std::size_t n = layers_.size();
        std::vector<Tensor> a_stream(n), x_stream(n);
        if (train) masks_.assign(n + 1, Tensor());
        kink_margin_ = 1e300;
        Tensor x = inputs;
        if (input_dropout_p_ > 0.0) x = apply_dropout(x, input_dropout_p_, train, n);
        Tensor out;
        for (std::size_t nu = 0; nu < n; ++nu) {
            x_stream[nu] = x;
            Tensor a = weight_average(layers_[nu].theta, x);
            if (standard_skip_to_[nu]) a += a_stream[nu - 2];  // a-stream skip
            a_stream[nu] = a;
            if (nu + 1 < n) track_kink_margin(layers_[nu].activation, a);
            if (nu + 1 == n) {
                if (train) layers_[nu].a = a;
                out = apply_output(a);
                break;
            }
            Tensor h = activate(layers_[nu].activation, a);
            Tensor y = h;
            if (layers_[nu].bn)
                y = train ? layers_[nu].bn->forward_train(h) : layers_[nu].bn->forward_eval(h);
            if (dropout_p_[nu] > 0.0) y = apply_dropout(y, dropout_p_[nu], train, nu);
            if (train) {
                layers_[nu].in = x_stream[nu];
                layers_[nu].a = std::move(a);
                layers_[nu].h = std::move(h);
                layers_[nu].y = y;
            }
            x = y;
            if (skip_to_[nu]) x += x_stream[nu - 1];  // non-standard skip: y + block input
        }
        if (train) x_ = std::move(x_stream);
        return out;
    }

    double loss_on(const Tensor& inputs, const Tensor& targets, bool train) override {
        output_ = forward(inputs, train);
        if (train) targets_ = targets;
        return loss(loss_kind_, output_, targets, inputs.dim(0));
    }

    void backward() override {
        const std::size_t n = layers_.size();
        if (output_.size() == 0 || x_.size() != n)
            throw StateError("FnnNetwork::backward: no cached training forward");
        ensure_grad_slots();
        const std::size_t t_mb = x_[0].dim(0);

        // dx[nu] accumulates dJ/d(consumed input of layer nu); skips add here.
        std::vector<Tensor> dx(n + 1);
        std::vector<Tensor> delta(n);
        delta[n - 1] = output_delta(loss_kind_, output_, targets_, t_mb);
        dtheta_[n - 1] = weight_grad(delta[n - 1], x_[n - 1]);
        dx[n - 1] = upstream_through(layers_[n - 1].theta, delta[n - 1]);

        for (std::size_t i = n - 1; i-- > 0;) {
            Tensor dy = dx[i + 1];  // x_{i+1} = y_i (+ skip input)
            if (skip_to_[i]) {
                // the same upstream also flows to the block input x_{i-1}
                accumulate(dx[i - 1], dy);
            }
            if (dropout_p_[i] > 0.0) {
                const double scale = 1.0 / (1.0 - dropout_p_[i]);
                for (std::size_t j = 0; j < dy.size(); ++j) dy[j] *= masks_[i][j] * scale;
            }
            if (layers_[i].bn) {
                auto [dg, db] = coeff_grads_from_upstream(dy, layers_[i].bn->normalized());
                dgamma_[i] = std::move(dg);
                dbeta_[i] = std::move(db);
            }
            delta[i] = hidden_delta_from_upstream(std::move(dy),
                                                  layers_[i].bn ? &*layers_[i].bn : nullptr,
                                                  layers_[i].a, layers_[i].activation);
            if (i + 2 < n && standard_skip_to_[i + 2]) accumulate(delta[i], delta[i + 2]);
            dtheta_[i] = weight_grad(delta[i], x_[i]);
            accumulate(dx[i], upstream_through(layers_[i].theta, delta[i]));
        }
    }

    Tensor predict(const Tensor& inputs) override { return forward(inputs, false); }

    void fold_running_stats() override {
        for (auto& l : layers_)
            if (l.bn && l.bn->has_cache()) l.bn->update_running();
    }

    void freeze_dropout(bool frozen) override { frozen_dropout_ = frozen; }
    double last_kink_margin() const override { return kink_margin_; }

    std::vector<std::pair<std::string, BatchNormState*>> bn_states() override {
        std::vector<std::pair<std::string, BatchNormState*>> out;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].bn) out.emplace_back("bn" + std::to_string(i), &*layers_[i].bn);
        return out;
    }

    std::vector<std::pair<std::string, Rng*>> rng_states() override {
        return {{"dropout", &rng_}};
    }

    Rng& rng() { return rng_; }
    const Tensor& last_output() const { return output_; }

  private:
    void validate_skips() const {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (skip_to_[i] && (i < 1 || layers_[i].theta.dim(0) != x_width(i - 1)))
                throw ConfigError("non-standard skip needs the block output width to match the "
                                  "block input width");
            if (standard_skip_to_[i] &&
                (i < 2 || layers_[i].theta.dim(0) != layers_[i - 2].theta.dim(0)))
                throw ConfigError("standard skip connects pre-activations of equal width two "
                                  "layers apart");
        }
    }
    std::size_t x_width(std::size_t nu) const { return layers_[nu].theta.dim(1); }

    Tensor apply_output(const Tensor& a) {
        switch (loss_kind_) {
            case LossKind::MSE: return a;
            case LossKind::CrossEntropy: return softmax_lastaxis(a);
            case LossKind::BinnedCrossEntropy: {
                if (bins_ < 2)
                    throw ConfigError("binned cross-entropy needs a configured bin count");
                Tensor r = a.reshaped({a.dim(0), a.dim(1) / bins_, bins_});
                return softmax_lastaxis(r);
            }
        }
        return a;
    }

    Tensor apply_dropout(const Tensor& h, double p, bool train, std::size_t slot) {
        if (!train) return h;
        if (frozen_dropout_ && frozen_masks_.size() > slot && frozen_masks_[slot].size() > 0) {
            Tensor out = h;
            const double scale = 1.0 / (1.0 - p);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] *= frozen_masks_[slot][i] * scale;
            masks_[slot] = frozen_masks_[slot];
            return out;
        }
        auto [out, m] = dropout_apply(h, p, train, rng_);
        masks_[slot] = m.mask;
        if (frozen_dropout_) {
            if (frozen_masks_.size() <= slot) frozen_masks_.resize(slot + 1);
            frozen_masks_[slot] = m.mask;
        }
        return out;
    }

    static void accumulate(Tensor& into, const Tensor& what) {
        if (into.size() == 0)
            into = what;
        else
            into += what;
    }

    void track_kink_margin(const Activation& g, const Tensor& a) {
        if (g.kind != ActivationKind::ReLU && g.kind != ActivationKind::LeakyReLU &&
            g.kind != ActivationKind::ParametricReLU)
            return;
        for (std::size_t i = 0; i < a.size(); ++i)
            kink_margin_ = std::min(kink_margin_, std::abs(a[i]));
    }

    void ensure_grad_slots() {
        if (dtheta_.size() == layers_.size()) return;
        dtheta_.assign(layers_.size(), Tensor());
        dgamma_.assign(layers_.size(), Tensor());
        dbeta_.assign(layers_.size(), Tensor());
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            dtheta_[i] = Tensor(layers_[i].theta.shape());
            if (layers_[i].bn) {
                dgamma_[i] = Tensor({layers_[i].bn->features()});
                dbeta_[i] = Tensor({layers_[i].bn->features()});
            }
        }
    }

  public:
    /// Configure a bin count for the binned cross-entropy head.
    void set_bins(std::size_t bins) { bins_ = bins; }

  private:
    std::vector<DenseLayer> layers_;
    std::vector<double> dropout_p_;
    std::vector<bool> skip_to_, standard_skip_to_;
    LossKind loss_kind_;
    double input_dropout_p_ = 0.0;
    std::size_t bins_ = 0;
    Rng rng_;
    bool frozen_dropout_ = false;
    double kink_margin_ = 1e300;

    std::vector<Tensor> x_;      // consumed inputs per layer
    std::vector<Tensor> masks_;  // dropout masks per layer slot (input at index n)
    std::vector<Tensor> frozen_masks_;
    Tensor output_, targets_;
    std::vector<Tensor> dtheta_, dgamma_, dbeta_;
};

}  // namespace indexnet
