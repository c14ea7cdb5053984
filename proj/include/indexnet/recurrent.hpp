#pragma once

#include <cassert>
#include <cstdint>
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
// Recurrent networks unroll over a (layer, time) grid. Cells propagate both
// "spatially" (layer nu-1 -> nu at fixed tau) and "temporally" (tau-1 -> tau
// within a layer); every tau-1 quantity is zero at tau = 0. The output head
// applies at every time slice. Deltas here are D^(nu,tau) = dJ/dh^(nu,tau);
// the backward order is descending tau, then descending layer, so no cell is
// read before it has been written.

struct RecurrentArch {
    std::size_t input_width = 0;
    std::vector<std::size_t> hidden;  // widths of the hidden layers
    std::size_t output_width = 0;
    std::size_t time_steps = 0;  // T
    bool batchnorm = false;

    std::size_t layers() const { return hidden.size(); }
    std::size_t width(std::size_t l) const { return hidden[l]; }
    std::size_t in_width(std::size_t l) const { return l == 0 ? input_width : hidden[l - 1]; }

    void validate() const {
        if (input_width == 0 || output_width == 0 || hidden.empty() || time_steps == 0)
            throw ConfigError("recurrent architecture needs input, hidden, output widths and "
                              "at least one time step");
    }
};

/// Per-(layer,tau) grid of tensors.
using CellGrid = std::vector<std::vector<Tensor>>;

inline CellGrid make_grid(std::size_t layers, std::size_t time) {
    return CellGrid(layers, std::vector<Tensor>(time));
}

// ---------------------------------------------------------------------------
// Plain RNN

struct RnnParams {
    RecurrentArch arch;
    std::vector<Tensor> theta_spatial;   // [F_l, F_{l-1}] per layer
    std::vector<Tensor> theta_temporal;  // [F_l, F_l] per layer
    Tensor theta_out;                    // [F_out, F_{L-1}]
    std::vector<std::vector<BatchNormState>> bn;  // [layer][tau], present when batchnorm

    RnnParams() = default;
    RnnParams(RecurrentArch a, std::uint64_t seed) : arch(std::move(a)) {
        arch.validate();
        std::uint64_t s = seed;
        for (std::size_t l = 0; l < arch.layers(); ++l) {
            theta_spatial.push_back(init_weights(arch.in_width(l), arch.width(l), ++s));
            theta_temporal.push_back(init_weights(arch.width(l), arch.width(l), ++s));
        }
        theta_out = init_weights(arch.width(arch.layers() - 1), arch.output_width, ++s);
        if (arch.batchnorm) {
            bn.resize(arch.layers());
            for (std::size_t l = 0; l < arch.layers(); ++l)
                for (std::size_t tau = 0; tau < arch.time_steps; ++tau)
                    bn[l].emplace_back(arch.width(l), BatchNormMode::PerFeature);
        }
    }
};

struct RnnCache {
    CellGrid h, y;       // post-tanh activations and their BN outputs
    std::vector<Tensor> inputs;    // x_tau, [T_mb, F_0]
    std::vector<Tensor> head_a;    // pre-output per tau, [T_mb, F_out]
    std::vector<Tensor> outputs;   // output-function values per tau
    std::size_t t_mb = 0;
    bool fresh = false;
};

/// Unrolled RNN forward: h^(l,tau) = tanh(Theta^nu y^(l-1,tau) +
/// Theta^tau y^(l,tau-1)). `preact_offsets`, when given, adds a per-cell
/// tensor to the pre-activation (test harness hook for delta checks).
inline RnnCache rnn_forward(RnnParams& params, const Tensor& inputs, bool train,
                            LossKind loss_kind, const CellGrid* preact_offsets = nullptr) {
    const RecurrentArch& arch = params.arch;
    if (inputs.rank() != 3 || inputs.dim(1) != arch.input_width ||
        inputs.dim(2) != arch.time_steps)
        throw DimensionError("rnn_forward: inputs " + inputs.shape_str() +
                             " do not match [T_mb," + std::to_string(arch.input_width) + "," +
                             std::to_string(arch.time_steps) + "]");
    const std::size_t t_mb = inputs.dim(0), L = arch.layers(), T = arch.time_steps;
    RnnCache cache;
    cache.h = make_grid(L, T);
    cache.y = make_grid(L, T);
    cache.inputs.resize(T);
    cache.head_a.resize(T);
    cache.outputs.resize(T);
    cache.t_mb = t_mb;

    for (std::size_t tau = 0; tau < T; ++tau) {
        Tensor x({t_mb, arch.input_width});
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < arch.input_width; ++f) x(t, f) = inputs(t, f, tau);
        cache.inputs[tau] = x;
        for (std::size_t l = 0; l < L; ++l) {
            const Tensor& below = l == 0 ? cache.inputs[tau] : cache.y[l - 1][tau];
            Tensor pre = weight_average(params.theta_spatial[l], below);
            if (tau > 0) pre += weight_average(params.theta_temporal[l], cache.y[l][tau - 1]);
            if (preact_offsets) pre += (*preact_offsets)[l][tau];
            Tensor h = activate(Activation::tanh(), pre);
            Tensor y = h;
            if (arch.batchnorm)
                y = train ? params.bn[l][tau].forward_train(h)
                          : params.bn[l][tau].forward_eval(h);
            cache.h[l][tau] = std::move(h);
            cache.y[l][tau] = std::move(y);
        }
        Tensor a = weight_average(params.theta_out, cache.y[L - 1][tau]);
        cache.head_a[tau] = a;
        cache.outputs[tau] = loss_kind == LossKind::CrossEntropy ? softmax_lastaxis(a) : a;
    }
    cache.fresh = train;
    return cache;
}

/// Total loss over the unrolled outputs. MSE wants targets [T_mb,F_out,T];
/// cross-entropy wants class indices [T_mb,T].
inline double recurrent_loss(LossKind kind, const std::vector<Tensor>& outputs,
                             const Tensor& targets, std::size_t t_mb) {
    const std::size_t T = outputs.size();
    double j = 0.0;
    for (std::size_t tau = 0; tau < T; ++tau) {
        if (kind == LossKind::MSE) {
            if (targets.rank() != 3 || targets.dim(2) != T)
                throw DimensionError("recurrent MSE targets must be [T_mb,F,T], got " +
                                     targets.shape_str());
            Tensor y({t_mb, targets.dim(1)});
            for (std::size_t t = 0; t < t_mb; ++t)
                for (std::size_t f = 0; f < targets.dim(1); ++f) y(t, f) = targets(t, f, tau);
            j += loss(LossKind::MSE, outputs[tau], y, t_mb);
        } else {
            if (targets.rank() != 2 || targets.dim(1) != T)
                throw DimensionError("recurrent class targets must be [T_mb,T], got " +
                                     targets.shape_str());
            Tensor y({t_mb});
            for (std::size_t t = 0; t < t_mb; ++t) y(t) = targets(t, tau);
            j += loss(LossKind::CrossEntropy, outputs[tau], y, t_mb);
        }
    }
    return j;
}

inline Tensor recurrent_output_delta(LossKind kind, const Tensor& output, const Tensor& targets,
                                     std::size_t tau, std::size_t t_mb) {
    if (kind == LossKind::MSE) {
        Tensor y({t_mb, targets.dim(1)});
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < targets.dim(1); ++f) y(t, f) = targets(t, f, tau);
        return output_delta(LossKind::MSE, output, y, t_mb);
    }
    Tensor y({t_mb});
    for (std::size_t t = 0; t < t_mb; ++t) y(t) = targets(t, tau);
    return output_delta(LossKind::CrossEntropy, output, y, t_mb);
}

struct RnnBackward {
    CellGrid delta;     // D^(l,tau) = dJ/dh^(l,tau)
    CellGrid upstream;  // bracket before the BN contraction (coefficient grads)
    std::vector<Tensor> head_delta;  // per tau
};

/// Backpropagation through time. Cells are processed in reverse topological
/// order (descending tau, then descending layer); the spatial term enters
/// through tanh' of the layer above, the temporal term through tanh' of the
/// next time slice, both through the BN Jacobian of the receiving cell.
inline RnnBackward rnn_backward(RnnParams& params, const RnnCache& cache, const Tensor& targets,
                                LossKind loss_kind) {
    if (!cache.fresh) throw StateError("rnn_backward: stale cache (run a training forward)");
    const RecurrentArch& arch = params.arch;
    const std::size_t L = arch.layers(), T = arch.time_steps, t_mb = cache.t_mb;
    RnnBackward bwd;
    bwd.delta = make_grid(L, T);
    bwd.upstream = make_grid(L, T);
    bwd.head_delta.resize(T);
#ifndef NDEBUG
    std::vector<std::vector<bool>> written(L, std::vector<bool>(T, false));
#endif
    for (std::size_t tau = T; tau-- > 0;) {
        bwd.head_delta[tau] =
            recurrent_output_delta(loss_kind, cache.outputs[tau], targets, tau, t_mb);
        for (std::size_t l = L; l-- > 0;) {
            Tensor bracket({t_mb, arch.width(l)});
            if (l + 1 == L) {
                bracket += upstream_through(params.theta_out, bwd.head_delta[tau]);
            } else {
#ifndef NDEBUG
                assert(written[l + 1][tau]);
#endif
                // tanh' of the receiving cell times its spatial weights
                Tensor scaled = bwd.delta[l + 1][tau];
                const Tensor& h_up = cache.h[l + 1][tau];
                for (std::size_t i = 0; i < scaled.size(); ++i)
                    scaled[i] *= 1.0 - h_up[i] * h_up[i];
                bracket += upstream_through(params.theta_spatial[l + 1], scaled);
            }
            if (tau + 1 < T) {
#ifndef NDEBUG
                assert(written[l][tau + 1]);
#endif
                Tensor scaled = bwd.delta[l][tau + 1];
                const Tensor& h_nx = cache.h[l][tau + 1];
                for (std::size_t i = 0; i < scaled.size(); ++i)
                    scaled[i] *= 1.0 - h_nx[i] * h_nx[i];
                bracket += upstream_through(params.theta_temporal[l], scaled);
            }
            bwd.upstream[l][tau] = bracket;
            bwd.delta[l][tau] = arch.batchnorm
                                    ? params.bn[l][tau].jacobian_contract(bracket)
                                    : bracket;
#ifndef NDEBUG
            written[l][tau] = true;
#endif
        }
    }
    return bwd;
}

struct RnnGrads {
    std::vector<Tensor> theta_spatial, theta_temporal;
    Tensor theta_out;
    CellGrid gamma, beta;  // per (layer,tau), empty when BN is off
};

/// Weight and coefficient gradients. Spatial sums run over every tau,
/// temporal sums start at tau = 1; the first layer consumes the raw inputs.
inline RnnGrads rnn_grads(RnnParams& params, const RnnCache& cache, const RnnBackward& bwd) {
    const RecurrentArch& arch = params.arch;
    const std::size_t L = arch.layers(), T = arch.time_steps;
    RnnGrads g;
    g.theta_out = Tensor(params.theta_out.shape());
    for (std::size_t l = 0; l < L; ++l) {
        g.theta_spatial.emplace_back(params.theta_spatial[l].shape());
        g.theta_temporal.emplace_back(params.theta_temporal[l].shape());
    }
    if (arch.batchnorm) {
        g.gamma = make_grid(L, T);
        g.beta = make_grid(L, T);
    }
    for (std::size_t tau = 0; tau < T; ++tau) {
        g.theta_out += weight_grad(bwd.head_delta[tau], cache.y[L - 1][tau]);
        for (std::size_t l = 0; l < L; ++l) {
            Tensor pre_delta = bwd.delta[l][tau];  // tanh' * D
            const Tensor& h = cache.h[l][tau];
            for (std::size_t i = 0; i < pre_delta.size(); ++i)
                pre_delta[i] *= 1.0 - h[i] * h[i];
            const Tensor& below = l == 0 ? cache.inputs[tau] : cache.y[l - 1][tau];
            g.theta_spatial[l] += weight_grad(pre_delta, below);
            if (tau > 0) g.theta_temporal[l] += weight_grad(pre_delta, cache.y[l][tau - 1]);
            if (arch.batchnorm) {
                auto [dg, db] = coeff_grads_from_upstream(bwd.upstream[l][tau],
                                                          params.bn[l][tau].normalized());
                g.gamma[l][tau] = std::move(dg);
                g.beta[l][tau] = std::move(db);
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// LSTM

enum class LstmBackwardMode {
    PaperFaithful,  // the h-only recursion, no explicit cell-state chain
    FullGradient    // adds the direct c_tau -> c_tau+1 forget-gate path
};

struct LstmParams {
    RecurrentArch arch;
    // gate weights per layer: [rho][layer], rho in {i, f, o, g}
    std::vector<Tensor> wi_s, wi_t, wf_s, wf_t, wo_s, wo_t, wg_s, wg_t;
    Tensor theta_out;
    std::vector<std::vector<BatchNormState>> bn;

    LstmParams() = default;
    LstmParams(RecurrentArch a, std::uint64_t seed, bool diagonal_temporal = false)
        : arch(std::move(a)) {
        arch.validate();
        std::uint64_t s = seed;
        auto spatial = [&](std::size_t l) {
            return init_weights(arch.in_width(l), arch.width(l), ++s);
        };
        auto temporal = [&](std::size_t l) {
            return diagonal_temporal
                       ? init_lstm_diagonal(arch.width(l), arch.width(l), true, ++s)
                       : init_weights(arch.width(l), arch.width(l), ++s);
        };
        for (std::size_t l = 0; l < arch.layers(); ++l) {
            wi_s.push_back(spatial(l));
            wi_t.push_back(temporal(l));
            wf_s.push_back(spatial(l));
            wf_t.push_back(temporal(l));
            wo_s.push_back(spatial(l));
            wo_t.push_back(temporal(l));
            wg_s.push_back(spatial(l));
            wg_t.push_back(temporal(l));
        }
        theta_out = init_weights(arch.width(arch.layers() - 1), arch.output_width, ++s);
        if (arch.batchnorm) {
            bn.resize(arch.layers());
            for (std::size_t l = 0; l < arch.layers(); ++l)
                for (std::size_t tau = 0; tau < arch.time_steps; ++tau)
                    bn[l].emplace_back(arch.width(l), BatchNormMode::PerFeature);
        }
    }
};

struct LstmCache {
    CellGrid gi, gf, go, gg;  // gate values i, f, o and candidate g
    CellGrid c, h, y;         // cell state, probe, BN output
    std::vector<Tensor> inputs, head_a, outputs;
    std::size_t t_mb = 0;
    bool fresh = false;
};

/// LSTM forward: i,f,o = sigmoid(.), g = tanh(.), c = f*c_prev + i*g,
/// h = o*tanh(c), with all tau-1 values zero at tau = 0. `h_offsets`, when
/// given, adds a per-cell tensor to h after the probe (delta-check hook).
inline LstmCache lstm_forward(LstmParams& params, const Tensor& inputs, bool train,
                              LossKind loss_kind, const CellGrid* h_offsets = nullptr) {
    const RecurrentArch& arch = params.arch;
    if (inputs.rank() != 3 || inputs.dim(1) != arch.input_width ||
        inputs.dim(2) != arch.time_steps)
        throw DimensionError("lstm_forward: inputs " + inputs.shape_str() +
                             " do not match the architecture");
    const std::size_t t_mb = inputs.dim(0), L = arch.layers(), T = arch.time_steps;
    LstmCache cache;
    for (CellGrid* gr : {&cache.gi, &cache.gf, &cache.go, &cache.gg, &cache.c, &cache.h,
                         &cache.y})
        *gr = make_grid(L, T);
    cache.inputs.resize(T);
    cache.head_a.resize(T);
    cache.outputs.resize(T);
    cache.t_mb = t_mb;

    for (std::size_t tau = 0; tau < T; ++tau) {
        Tensor x({t_mb, arch.input_width});
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < arch.input_width; ++f) x(t, f) = inputs(t, f, tau);
        cache.inputs[tau] = x;
        for (std::size_t l = 0; l < L; ++l) {
            const Tensor& below = l == 0 ? cache.inputs[tau] : cache.y[l - 1][tau];
            auto gate_pre = [&](const Tensor& ws, const Tensor& wt) {
                Tensor pre = weight_average(ws, below);
                if (tau > 0) pre += weight_average(wt, cache.y[l][tau - 1]);
                return pre;
            };
            Tensor i_pre = gate_pre(params.wi_s[l], params.wi_t[l]);
            Tensor f_pre = gate_pre(params.wf_s[l], params.wf_t[l]);
            Tensor o_pre = gate_pre(params.wo_s[l], params.wo_t[l]);
            Tensor g_pre = gate_pre(params.wg_s[l], params.wg_t[l]);
            Tensor gi = activate(Activation::sigmoid(), i_pre);
            Tensor gf = activate(Activation::sigmoid(), f_pre);
            Tensor go = activate(Activation::sigmoid(), o_pre);
            Tensor gg = activate(Activation::tanh(), g_pre);
            Tensor c({t_mb, arch.width(l)});
            for (std::size_t idx = 0; idx < c.size(); ++idx) {
                const double c_prev = tau > 0 ? cache.c[l][tau - 1][idx] : 0.0;
                c[idx] = gf[idx] * c_prev + gi[idx] * gg[idx];
            }
            Tensor h({t_mb, arch.width(l)});
            for (std::size_t idx = 0; idx < h.size(); ++idx)
                h[idx] = go[idx] * std::tanh(c[idx]);
            if (h_offsets) h += (*h_offsets)[l][tau];
            Tensor y = h;
            if (arch.batchnorm)
                y = train ? params.bn[l][tau].forward_train(h)
                          : params.bn[l][tau].forward_eval(h);
            cache.gi[l][tau] = std::move(gi);
            cache.gf[l][tau] = std::move(gf);
            cache.go[l][tau] = std::move(go);
            cache.gg[l][tau] = std::move(gg);
            cache.c[l][tau] = std::move(c);
            cache.h[l][tau] = std::move(h);
            cache.y[l][tau] = std::move(y);
        }
        Tensor a = weight_average(params.theta_out, cache.y[L - 1][tau]);
        cache.head_a[tau] = a;
        cache.outputs[tau] = loss_kind == LossKind::CrossEntropy ? softmax_lastaxis(a) : a;
    }
    cache.fresh = train;
    return cache;
}

struct LstmBackwardResult {
    CellGrid delta;      // D^(l,tau) = dJ/dh
    CellGrid delta_cell; // dJ/dc (FullGradient carries the forget chain)
    CellGrid upstream;   // bracket before BN contraction
    CellGrid d_i, d_f, d_o, d_g;  // gate pre-activation deltas
    std::vector<Tensor> head_delta;
};

/// LSTM backpropagation. PaperFaithful reproduces the printed h-only
/// recursion (the gate-derivative factors O, I, F, G combined through the
/// layer-above and next-slice weights); FullGradient additionally carries
/// dJ/dc along the forget-gate chain, which that recursion omits.
inline LstmBackwardResult lstm_backward(LstmParams& params, const LstmCache& cache,
                                        const Tensor& targets, LossKind loss_kind,
                                        LstmBackwardMode mode) {
    if (!cache.fresh) throw StateError("lstm_backward: stale cache (run a training forward)");
    const RecurrentArch& arch = params.arch;
    const std::size_t L = arch.layers(), T = arch.time_steps, t_mb = cache.t_mb;
    LstmBackwardResult bwd;
    for (CellGrid* gr : {&bwd.delta, &bwd.delta_cell, &bwd.upstream, &bwd.d_i, &bwd.d_f,
                         &bwd.d_o, &bwd.d_g})
        *gr = make_grid(L, T);
    bwd.head_delta.resize(T);

    for (std::size_t tau = T; tau-- > 0;) {
        bwd.head_delta[tau] =
            recurrent_output_delta(loss_kind, cache.outputs[tau], targets, tau, t_mb);
        for (std::size_t l = L; l-- > 0;) {
            Tensor bracket({t_mb, arch.width(l)});
            if (l + 1 == L) {
                bracket += upstream_through(params.theta_out, bwd.head_delta[tau]);
            } else {
                bracket += upstream_through(params.wi_s[l + 1], bwd.d_i[l + 1][tau]);
                bracket += upstream_through(params.wf_s[l + 1], bwd.d_f[l + 1][tau]);
                bracket += upstream_through(params.wo_s[l + 1], bwd.d_o[l + 1][tau]);
                bracket += upstream_through(params.wg_s[l + 1], bwd.d_g[l + 1][tau]);
            }
            if (tau + 1 < T) {
                bracket += upstream_through(params.wi_t[l], bwd.d_i[l][tau + 1]);
                bracket += upstream_through(params.wf_t[l], bwd.d_f[l][tau + 1]);
                bracket += upstream_through(params.wo_t[l], bwd.d_o[l][tau + 1]);
                bracket += upstream_through(params.wg_t[l], bwd.d_g[l][tau + 1]);
            }
            bwd.upstream[l][tau] = bracket;
            Tensor D = arch.batchnorm ? params.bn[l][tau].jacobian_contract(bracket) : bracket;

            const Tensor& gi = cache.gi[l][tau];
            const Tensor& gf = cache.gf[l][tau];
            const Tensor& go = cache.go[l][tau];
            const Tensor& gg = cache.gg[l][tau];
            const Tensor& c = cache.c[l][tau];
            const std::size_t n = D.size();

            Tensor dc({t_mb, arch.width(l)});
            for (std::size_t i = 0; i < n; ++i) {
                const double th = std::tanh(c[i]);
                dc[i] = go[i] * (1.0 - th * th) * D[i];
            }
            if (mode == LstmBackwardMode::FullGradient && tau + 1 < T) {
                const Tensor& f_next = cache.gf[l][tau + 1];
                const Tensor& dc_next = bwd.delta_cell[l][tau + 1];
                for (std::size_t i = 0; i < n; ++i) dc[i] += f_next[i] * dc_next[i];
            }

            Tensor di({t_mb, arch.width(l)}), df({t_mb, arch.width(l)});
            Tensor do_({t_mb, arch.width(l)}), dg({t_mb, arch.width(l)});
            for (std::size_t i = 0; i < n; ++i) {
                const double th = std::tanh(c[i]);
                do_[i] = th * go[i] * (1.0 - go[i]) * D[i];
                di[i] = gg[i] * gi[i] * (1.0 - gi[i]) * dc[i];
                const double c_prev = tau > 0 ? cache.c[l][tau - 1][i] : 0.0;
                df[i] = c_prev * gf[i] * (1.0 - gf[i]) * dc[i];
                dg[i] = gi[i] * (1.0 - gg[i] * gg[i]) * dc[i];
            }
            bwd.delta[l][tau] = std::move(D);
            bwd.delta_cell[l][tau] = std::move(dc);
            bwd.d_i[l][tau] = std::move(di);
            bwd.d_f[l][tau] = std::move(df);
            bwd.d_o[l][tau] = std::move(do_);
            bwd.d_g[l][tau] = std::move(dg);
        }
    }
    return bwd;
}

struct LstmGrads {
    std::vector<Tensor> wi_s, wi_t, wf_s, wf_t, wo_s, wo_t, wg_s, wg_t;
    Tensor theta_out;
    CellGrid gamma, beta;
};

/// Gate-weight gradients Delta^rho = sum over (tau, t) of the gate
/// pre-activation delta times the consumed input: raw inputs at the first
/// layer, BN outputs above it; temporal sums start at tau = 1.
inline LstmGrads lstm_grads(LstmParams& params, const LstmCache& cache,
                            const LstmBackwardResult& bwd) {
    const RecurrentArch& arch = params.arch;
    const std::size_t L = arch.layers(), T = arch.time_steps;
    LstmGrads g;
    g.theta_out = Tensor(params.theta_out.shape());
    for (std::size_t l = 0; l < L; ++l) {
        g.wi_s.emplace_back(params.wi_s[l].shape());
        g.wi_t.emplace_back(params.wi_t[l].shape());
        g.wf_s.emplace_back(params.wf_s[l].shape());
        g.wf_t.emplace_back(params.wf_t[l].shape());
        g.wo_s.emplace_back(params.wo_s[l].shape());
        g.wo_t.emplace_back(params.wo_t[l].shape());
        g.wg_s.emplace_back(params.wg_s[l].shape());
        g.wg_t.emplace_back(params.wg_t[l].shape());
    }
    if (arch.batchnorm) {
        g.gamma = make_grid(L, T);
        g.beta = make_grid(L, T);
    }
    for (std::size_t tau = 0; tau < T; ++tau) {
        g.theta_out += weight_grad(bwd.head_delta[tau], cache.y[L - 1][tau]);
        for (std::size_t l = 0; l < L; ++l) {
            const Tensor& below = l == 0 ? cache.inputs[tau] : cache.y[l - 1][tau];
            g.wi_s[l] += weight_grad(bwd.d_i[l][tau], below);
            g.wf_s[l] += weight_grad(bwd.d_f[l][tau], below);
            g.wo_s[l] += weight_grad(bwd.d_o[l][tau], below);
            g.wg_s[l] += weight_grad(bwd.d_g[l][tau], below);
            if (tau > 0) {
                const Tensor& prev = cache.y[l][tau - 1];
                g.wi_t[l] += weight_grad(bwd.d_i[l][tau], prev);
                g.wf_t[l] += weight_grad(bwd.d_f[l][tau], prev);
                g.wo_t[l] += weight_grad(bwd.d_o[l][tau], prev);
                g.wg_t[l] += weight_grad(bwd.d_g[l][tau], prev);
            }
            if (arch.batchnorm) {
                auto [dg, db] = coeff_grads_from_upstream(bwd.upstream[l][tau],
                                                          params.bn[l][tau].normalized());
                g.gamma[l][tau] = std::move(dg);
                g.beta[l][tau] = std::move(db);
            }
        }
    }
    return g;
}

}  // namespace indexnet
