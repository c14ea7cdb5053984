#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "indexnet/batchnorm.hpp"
#include "indexnet/dense.hpp"
#include "indexnet/errors.hpp"
#include "indexnet/math.hpp"
#include "indexnet/model.hpp"
#include "indexnet/tensor.hpp"

namespace indexnet {

// ---------------------------------------------------------------------------
// Convolution layer. Inter-layer activations travel unpadded; each layer pads
// its own input on consumption and caches the padded tensor, so the padded
// delta indexing of the backward formulas stays local to each operation.

enum class ConvPath { Naive, GEMM };

struct ConvLayer {
    Tensor theta;  // [F_out, F_in, R, R]
    ConvGeometry geometry;
    Activation activation;
    std::optional<BatchNormState> bn;  // PerFeatureMap

    // caches from the last training forward
    Tensor input_padded;  // [T_mb, F_in, N+2P, T+2P]
    Tensor a;             // [T_mb, F_out, N_p, T_p]
    Tensor h;             // g(a)
    Tensor y;             // BN output or h

    ConvLayer() = default;
    ConvLayer(std::size_t f_in, std::size_t f_out, ConvGeometry geom, Activation act,
              bool batchnorm, std::uint64_t seed)
        : geometry(geom), activation(act) {
        const std::size_t fan_in = f_in * geom.field * geom.field;
        const std::size_t fan_out = f_out * geom.field * geom.field;
        const double scale = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Rng rng(seed);
        theta = Tensor({f_out, f_in, geom.field, geom.field});
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = scale * rng.normal();
        if (batchnorm) bn.emplace(f_out, BatchNormMode::PerFeatureMap);
    }

    std::size_t features_out() const { return theta.dim(0); }
    std::size_t features_in() const { return theta.dim(1); }
};

/// Convolution forward over a padded batch, a_{flm} = sum_{f'jk} Theta
/// h_{f',Sl+j,Sm+k}. The GEMM path lowers each sample through im2col; the
/// naive path is the printed loop nest, kept as an oracle and for tests.
inline Tensor conv_batch(const Tensor& input_padded, const Tensor& theta, const ConvGeometry& g,
                         ConvPath path) {
    if (input_padded.rank() != 4 || input_padded.dim(1) != theta.dim(1))
        throw DimensionError("conv: padded input " + input_padded.shape_str() +
                             " does not match weights " + theta.shape_str());
    if (input_padded.dim(2) != g.padded_width() || input_padded.dim(3) != g.padded_height())
        throw DimensionError("conv: padded input " + input_padded.shape_str() +
                             " inconsistent with geometry");
    const std::size_t t_mb = input_padded.dim(0);
    const std::size_t fo = theta.dim(0), fi = theta.dim(1), R = theta.dim(2), S = g.stride;
    Tensor a({t_mb, fo, g.out_width, g.out_height});
    if (path == ConvPath::GEMM) {
        const Tensor flat = flatten_kernel(theta);  // [fi*R*R, fo]
        Tensor sample({fi, g.padded_width(), g.padded_height()});
        for (std::size_t t = 0; t < t_mb; ++t) {
            const double* src = input_padded.data() + t * sample.size();
            std::copy(src, src + sample.size(), sample.data());
            Tensor rows = matmul(im2col(sample, g), flat);  // [Np*Tp, fo]
            for (std::size_t f = 0; f < fo; ++f)
                for (std::size_t l = 0; l < g.out_width; ++l)
                    for (std::size_t m = 0; m < g.out_height; ++m)
                        a(t, f, l, m) = rows(l * g.out_height + m, f);
        }
        return a;
    }
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < fo; ++f)
            for (std::size_t l = 0; l < g.out_width; ++l)
                for (std::size_t m = 0; m < g.out_height; ++m) {
                    double s = 0.0;
                    for (std::size_t fp = 0; fp < fi; ++fp)
                        for (std::size_t j = 0; j < R; ++j)
                            for (std::size_t k = 0; k < R; ++k)
                                s += theta(f, fp, j, k) * input_padded(t, fp, S * l + j, S * m + k);
                    a(t, f, l, m) = s;
                }
    return a;
}

inline Tensor conv_forward(ConvLayer& layer, const Tensor& input_padded, ConvPath path,
                           bool train) {
    Tensor a = conv_batch(input_padded, layer.theta, layer.geometry, path);
    Tensor h = activate(layer.activation, a);
    Tensor y = h;
    if (layer.bn) y = train ? layer.bn->forward_train(h) : layer.bn->forward_eval(h);
    if (train) {
        layer.input_padded = input_padded;
        layer.a = std::move(a);
        layer.h = std::move(h);
        layer.y = y;
    }
    return y;
}

// ---------------------------------------------------------------------------
// Pooling layer

enum class PoolKind { Max, Average };

struct PoolLayer {
    std::size_t field = 2;
    std::size_t stride = 2;
    PoolKind kind = PoolKind::Max;

    // caches from the last training forward
    std::vector<std::uint32_t> arg_j, arg_k;  // winners, [T_mb*F*Np*Tp]
    std::size_t in_width = 0, in_height = 0;  // interior input extents
    std::vector<std::size_t> out_shape;       // [T_mb, F, Np, Tp]
};

/// Pooling over the unpadded interior. Max caches the winning in-window
/// offsets (ties to the smallest row-major pair); average divides the window
/// sum by R_P^2.
inline Tensor pool_forward(PoolLayer& layer, const Tensor& input, bool train) {
    if (input.rank() != 4)
        throw DimensionError("pool_forward expects [T_mb,F,N,T], got " + input.shape_str());
    const std::size_t t_mb = input.dim(0), F = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t R = layer.field, S = layer.stride;
    if (H < R || W < R || (H - R) % S != 0 || (W - R) % S != 0)
        throw GeometryError("pooling windows do not tile the input " + input.shape_str());
    const std::size_t Np = (H - R) / S + 1, Tp = (W - R) / S + 1;
    Tensor out({t_mb, F, Np, Tp});
    if (train) {
        layer.arg_j.assign(t_mb * F * Np * Tp, 0);
        layer.arg_k.assign(t_mb * F * Np * Tp, 0);
        layer.in_width = H;
        layer.in_height = W;
        layer.out_shape = {t_mb, F, Np, Tp};
    }
    const double inv_area = 1.0 / static_cast<double>(R * R);
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t l = 0; l < Np; ++l)
                for (std::size_t m = 0; m < Tp; ++m) {
                    if (layer.kind == PoolKind::Max) {
                        double best = input(t, f, S * l, S * m);
                        std::size_t bj = 0, bk = 0;
                        for (std::size_t j = 0; j < R; ++j)
                            for (std::size_t k = 0; k < R; ++k) {
                                const double v = input(t, f, S * l + j, S * m + k);
                                if (v > best) {
                                    best = v;
                                    bj = j;
                                    bk = k;
                                }
                            }
                        out(t, f, l, m) = best;
                        if (train) {
                            const std::size_t idx = ((t * F + f) * Np + l) * Tp + m;
                            layer.arg_j[idx] = static_cast<std::uint32_t>(bj);
                            layer.arg_k[idx] = static_cast<std::uint32_t>(bk);
                        }
                    } else {
                        double s = 0.0;
                        for (std::size_t j = 0; j < R; ++j)
                            for (std::size_t k = 0; k < R; ++k)
                                s += input(t, f, S * l + j, S * m + k);
                        out(t, f, l, m) = s * inv_area;
                    }
                }
    return out;
}

/// Route pooled deltas back onto the pool input grid: max deposits each
/// delta at its cached argmax, average spreads it uniformly.
inline Tensor pool_backward_route(const PoolLayer& layer, const Tensor& delta_pool) {
    if (layer.out_shape.empty() || delta_pool.shape() != layer.out_shape)
        throw StateError("pool_backward_route: stale or mismatched caches for deltas " +
                         delta_pool.shape_str());
    const std::size_t t_mb = delta_pool.dim(0), F = delta_pool.dim(1);
    const std::size_t Np = delta_pool.dim(2), Tp = delta_pool.dim(3);
    const std::size_t R = layer.field, S = layer.stride;
    Tensor out({t_mb, F, layer.in_width, layer.in_height});
    const double inv_area = 1.0 / static_cast<double>(R * R);
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t l = 0; l < Np; ++l)
                for (std::size_t m = 0; m < Tp; ++m) {
                    const double d = delta_pool(t, f, l, m);
                    if (d == 0.0) continue;
                    if (layer.kind == PoolKind::Max) {
                        const std::size_t idx = ((t * F + f) * Np + l) * Tp + m;
                        out(t, f, S * l + layer.arg_j[idx], S * m + layer.arg_k[idx]) += d;
                    } else {
                        for (std::size_t j = 0; j < R; ++j)
                            for (std::size_t k = 0; k < R; ++k)
                                out(t, f, S * l + j, S * m + k) += d * inv_area;
                    }
                }
    return out;
}

// ---------------------------------------------------------------------------
// Backward building blocks shared by the printed error-rate cases.

/// dJ/d(conv input interior) from conv deltas: the shifted-index correlation
/// Theta * delta scattered on the padded grid, with the pad ring cropped
/// away (pad positions are constants, their gradient is discarded).
inline Tensor conv_input_grad(const Tensor& theta, const Tensor& delta,
                              const ConvGeometry& g) {
    if (delta.rank() != 4 || delta.dim(1) != theta.dim(0))
        throw DimensionError("conv_input_grad: deltas " + delta.shape_str() +
                             " do not match weights " + theta.shape_str());
    const std::size_t t_mb = delta.dim(0);
    const std::size_t fo = theta.dim(0), fi = theta.dim(1), R = theta.dim(2);
    const std::size_t S = g.stride, P = g.pad;
    Tensor padded({t_mb, fi, g.padded_width(), g.padded_height()});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t fp = 0; fp < fo; ++fp)
            for (std::size_t lp = 0; lp < g.out_width; ++lp)
                for (std::size_t mp = 0; mp < g.out_height; ++mp) {
                    const double d = delta(t, fp, lp, mp);
                    if (d == 0.0) continue;
                    for (std::size_t f = 0; f < fi; ++f)
                        for (std::size_t j = 0; j < R; ++j)
                            for (std::size_t k = 0; k < R; ++k)
                                padded(t, f, S * lp + j, S * mp + k) += theta(fp, f, j, k) * d;
                }
    if (P == 0) return padded;
    Tensor out({t_mb, fi, g.in_width, g.in_height});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < fi; ++f)
            for (std::size_t l = 0; l < g.in_width; ++l)
                for (std::size_t m = 0; m < g.in_height; ++m)
                    out(t, f, l, m) = padded(t, f, l + P, m + P);
    return out;
}

/// Finish a spatial layer's error rate from what flows onto its outputs:
/// BN Jacobian contraction (the mu/lambda aggregate form) then g'(a).
inline Tensor conv_delta_from_upstream(Tensor upstream, const BatchNormState* bn,
                                       const Tensor& a, const Activation& g) {
    if (bn) upstream = bn->jacobian_contract(upstream);
    Tensor gp = activate_prime(g, a);
    if (!upstream.same_shape(gp))
        throw StateError("conv delta: upstream " + upstream.shape_str() +
                         " does not match pre-activations " + a.shape_str());
    for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] *= gp[i];
    return upstream;
}

/// BN coefficient gradients of a spatial layer: reduce what flows onto its
/// outputs against the cached normalized activations over (t, l, m).
inline std::pair<Tensor, Tensor> conv_coeff_grads_from_upstream(const Tensor& upstream,
                                                                 const Tensor& h_tilde) {
    if (!upstream.same_shape(h_tilde))
        throw DimensionError("conv coeff grads: upstream " + upstream.shape_str() +
                             " does not match normalized cache " + h_tilde.shape_str());
    const std::size_t t_mb = upstream.dim(0), F = upstream.dim(1);
    const std::size_t spatial = upstream.size() / (t_mb * F);
    Tensor dgamma({F}), dbeta({F});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < F; ++f) {
            const double* pu = upstream.data() + (t * F + f) * spatial;
            const double* pn = h_tilde.data() + (t * F + f) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
                dgamma(f) += pu[s] * pn[s];
                dbeta(f) += pu[s];
            }
        }
    return {std::move(dgamma), std::move(dbeta)};
}

// ---------------------------------------------------------------------------
// The printed error-rate cases, one function each.

/// fc to pool (or the layer under the full-field collapse): the plain
/// contraction delta_{flm} = sum_f' Theta^f'_{flm} delta_f', no g', no BN.
inline Tensor delta_fc_to_pool(const Tensor& theta, const Tensor& delta_above) {
    if (theta.rank() != 4 || delta_above.rank() != 2 || theta.dim(0) != delta_above.dim(1))
        throw DimensionError("delta_fc_to_pool: weights " + theta.shape_str() +
                             " do not match deltas " + delta_above.shape_str());
    const std::size_t t_mb = delta_above.dim(0);
    const std::size_t fo = theta.dim(0), F = theta.dim(1), N = theta.dim(2), T = theta.dim(3);
    Tensor out({t_mb, F, N, T});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t fp = 0; fp < fo; ++fp) {
            const double d = delta_above(t, fp);
            if (d == 0.0) continue;
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t l = 0; l < N; ++l)
                    for (std::size_t m = 0; m < T; ++m)
                        out(t, f, l, m) += theta(fp, f, l, m) * d;
        }
    return out;
}

/// pool to conv: route each pooled delta to its argmax source, then the BN
/// aggregate correction and g'(a) of the conv below.
inline Tensor delta_pool_to_conv(const PoolLayer& pool, const Tensor& delta_pool,
                                 const BatchNormState* bn, const Tensor& a_below,
                                 const Activation& g) {
    return conv_delta_from_upstream(pool_backward_route(pool, delta_pool), bn, a_below, g);
}

/// conv to conv: shifted-index correlation through the upper weights, BN
/// aggregates, then g'(a) of the conv below.
inline Tensor delta_conv_to_conv(const ConvLayer& layer_above, const Tensor& delta_above,
                                 const BatchNormState* bn, const Tensor& a_below,
                                 const Activation& g) {
    return conv_delta_from_upstream(
        conv_input_grad(layer_above.theta, delta_above, layer_above.geometry), bn, a_below, g);
}

/// conv to pool: the bare shifted-index contraction; pool outputs carry no
/// activation and no BN. Only the stride-1 case is supported.
inline Tensor delta_conv_to_pool(const ConvLayer& layer_above, const Tensor& delta_above) {
    if (layer_above.geometry.stride != 1)
        throw ConfigError("delta_conv_to_pool: only stride-1 convolutions above a pool layer are "
                          "supported");
    return conv_input_grad(layer_above.theta, delta_above, layer_above.geometry);
}

/// Convolution weight gradient, Delta^Theta(f,f',j,k) = sum_{t,l,m}
/// input_padded(t,f',Sl+j,Sm+k) delta(t,f,l,m). The input is y when the
/// layer below is batch-normalized and h otherwise; pad ring entries are
/// genuine zeros and contribute nothing.
inline Tensor conv_weight_grad(const Tensor& delta, const Tensor& input_padded,
                               const ConvGeometry& g) {
    if (delta.rank() != 4 || input_padded.rank() != 4 || delta.dim(0) != input_padded.dim(0))
        throw DimensionError("conv_weight_grad: deltas " + delta.shape_str() +
                             " do not match input " + input_padded.shape_str());
    const std::size_t t_mb = delta.dim(0), fo = delta.dim(1), fi = input_padded.dim(1);
    const std::size_t R = g.field, S = g.stride;
    Tensor grad({fo, fi, R, R});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < fo; ++f)
            for (std::size_t l = 0; l < g.out_width; ++l)
                for (std::size_t m = 0; m < g.out_height; ++m) {
                    const double d = delta(t, f, l, m);
                    if (d == 0.0) continue;
                    for (std::size_t fp = 0; fp < fi; ++fp)
                        for (std::size_t j = 0; j < R; ++j)
                            for (std::size_t k = 0; k < R; ++k)
                                grad(f, fp, j, k) +=
                                    input_padded(t, fp, S * l + j, S * m + k) * d;
                }
    return grad;
}

/// TowardsFC weight gradient: Delta^Theta(f,f',l,m) = sum_t in(t,f',l,m)
/// delta(t,f) over the unpadded input.
inline Tensor towardsfc_weight_grad(const Tensor& delta, const Tensor& input) {
    if (delta.rank() != 2 || input.rank() != 4 || delta.dim(0) != input.dim(0))
        throw DimensionError("towardsfc_weight_grad: deltas " + delta.shape_str() +
                             " do not match input " + input.shape_str());
    const std::size_t t_mb = delta.dim(0), fo = delta.dim(1);
    const std::size_t fi = input.dim(1), N = input.dim(2), T = input.dim(3);
    Tensor grad({fo, fi, N, T});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < fo; ++f) {
            const double d = delta(t, f);
            if (d == 0.0) continue;
            for (std::size_t fp = 0; fp < fi; ++fp)
                for (std::size_t l = 0; l < N; ++l)
                    for (std::size_t m = 0; m < T; ++m)
                        grad(f, fp, l, m) += input(t, fp, l, m) * d;
        }
    return grad;
}

// ---------------------------------------------------------------------------
// TowardsFC: the convolution whose receptive field spans the whole feature
// map, collapsing spatial structure to a plain vector.

struct TowardsFcLayer {
    Tensor theta;  // [F_out, F_in, N, T]
    Activation activation;
    std::optional<BatchNormState> bn;  // PerFeature on the collapsed vector

    Tensor in;      // [T_mb, F_in, N, T]
    Tensor a, h, y; // [T_mb, F_out]

    TowardsFcLayer() = default;
    TowardsFcLayer(std::size_t f_in, std::size_t f_out, std::size_t width, std::size_t height,
                   Activation act, bool batchnorm, std::uint64_t seed)
        : activation(act) {
        const std::size_t fan_in = f_in * width * height;
        const double scale = std::sqrt(6.0 / static_cast<double>(fan_in + f_out));
        Rng rng(seed);
        theta = Tensor({f_out, f_in, width, height});
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = scale * rng.normal();
        if (batchnorm) bn.emplace(f_out, BatchNormMode::PerFeature);
    }
};

inline Tensor towardsfc_forward(TowardsFcLayer& layer, const Tensor& input, bool train) {
    if (input.rank() != 4 || input.dim(1) != layer.theta.dim(1) ||
        input.dim(2) != layer.theta.dim(2) || input.dim(3) != layer.theta.dim(3))
        throw DimensionError("towardsfc_forward: input " + input.shape_str() +
                             " does not match weights " + layer.theta.shape_str());
    const std::size_t t_mb = input.dim(0), fo = layer.theta.dim(0);
    const std::size_t per_sample = input.size() / t_mb;
    Tensor a({t_mb, fo});
    for (std::size_t t = 0; t < t_mb; ++t)
        for (std::size_t f = 0; f < fo; ++f) {
            const double* w = layer.theta.data() + f * per_sample;
            const double* x = input.data() + t * per_sample;
            double s = 0.0;
            for (std::size_t i = 0; i < per_sample; ++i) s += w[i] * x[i];
            a(t, f) = s;
        }
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

// ---------------------------------------------------------------------------
// Residual conv module: 1x1 -> 3x3 (same) -> 1x1 with the skip added to the
// module output; feature count and spatial size are preserved end to end.

struct ResnetConvBlock {
    ConvLayer reduce;   // 1x1, F0 -> F1
    ConvLayer conv;     // 3x3 same, F1 -> F1
    ConvLayer restore;  // 1x1, F1 -> F0
    Tensor input_cache;

    ResnetConvBlock() = default;
    ResnetConvBlock(std::size_t features, std::size_t bottleneck, std::size_t width,
                    std::size_t height, Activation act, bool batchnorm, std::uint64_t seed)
        : reduce(features, bottleneck, ConvGeometry::make(width, height, 1, 1, 0), act, batchnorm,
                 seed + 1),
          conv(bottleneck, bottleneck, ConvGeometry::same(width, height, 3), act, batchnorm,
               seed + 2),
          restore(bottleneck, features, ConvGeometry::make(width, height, 1, 1, 0), act,
                  batchnorm, seed + 3) {
        if (bottleneck >= features)
            throw ConfigError("resnet conv block expects a bottleneck narrower than its input");
    }
};

inline Tensor resnet_conv_forward(ResnetConvBlock& block, const Tensor& input, ConvPath path,
                                  bool train) {
    if (train) block.input_cache = input;
    Tensor y1 = conv_forward(block.reduce, input, path, train);  // 1x1 reads unpadded
    Tensor y2 = conv_forward(block.conv, pad2d_batch(y1, block.conv.geometry.pad), path, train);
    Tensor y3 = conv_forward(block.restore, y2, path, train);
    if (!y3.same_shape(input))
        throw DimensionError("resnet conv block output " + y3.shape_str() +
                             " does not match its input " + input.shape_str());
    return y3 + input;
}

struct ResnetConvGrads {
    Tensor dinput;
    Tensor dtheta_reduce, dtheta_conv, dtheta_restore;
    Tensor dgamma_reduce, dbeta_reduce, dgamma_conv, dbeta_conv, dgamma_restore, dbeta_restore;
};

inline ResnetConvGrads resnet_conv_backward(ResnetConvBlock& block, const Tensor& dout) {
    if (block.input_cache.size() == 0)
        throw StateError("resnet_conv_backward: forward caches are stale");
    ResnetConvGrads g;
    auto layer_back = [](ConvLayer& l, const Tensor& dy, Tensor* dtheta, Tensor* dgamma,
                         Tensor* dbeta) {
        if (l.bn) {
            auto [dg, db] = conv_coeff_grads_from_upstream(dy, l.bn->normalized());
            *dgamma = std::move(dg);
            *dbeta = std::move(db);
        }
        Tensor delta = conv_delta_from_upstream(dy, l.bn ? &*l.bn : nullptr, l.a, l.activation);
        *dtheta = conv_weight_grad(delta, l.input_padded, l.geometry);
        return conv_input_grad(l.theta, delta, l.geometry);
    };
    Tensor dy2 = layer_back(block.restore, dout, &g.dtheta_restore, &g.dgamma_restore,
                            &g.dbeta_restore);
    Tensor dy1 = layer_back(block.conv, dy2, &g.dtheta_conv, &g.dgamma_conv, &g.dbeta_conv);
    Tensor dx = layer_back(block.reduce, dy1, &g.dtheta_reduce, &g.dgamma_reduce,
                           &g.dbeta_reduce);
    g.dinput = dx + dout;  // the skip feeds the output delta straight back
    return g;
}

}  // namespace indexnet
