#pragma once

#include <string>
#include <vector>

#include "indexnet/model.hpp"
#include "indexnet/recurrent.hpp"

namespace indexnet {

namespace detail {

/// Stack per-tau output slices [T_mb,F] into one [T_mb,F,T] tensor.
inline Tensor stack_time(const std::vector<Tensor>& slices) {
    const std::size_t T = slices.size(), t_mb = slices[0].dim(0), F = slices[0].dim(1);
    Tensor out({t_mb, F, T});
    for (std::size_t tau = 0; tau < T; ++tau)
        for (std::size_t t = 0; t < t_mb; ++t)
            for (std::size_t f = 0; f < F; ++f) out(t, f, tau) = slices[tau](t, f);
    return out;
}

}  // namespace detail

class RnnNetwork : public Model {
  public:
    RnnNetwork(RecurrentArch arch, LossKind loss_kind, std::uint64_t seed)
        : params_(std::move(arch), seed), loss_kind_(loss_kind) {}

    RnnParams& rnn_params() { return params_; }
    const RnnCache& cache() const { return cache_; }

    std::vector<ParamRef> params() override {
        ensure_grad_slots();
        std::vector<ParamRef> out;
        const std::size_t L = params_.arch.layers();
        for (std::size_t l = 0; l < L; ++l) {
            const std::string tag = "l" + std::to_string(l);
            out.push_back({tag + ".theta_s", &params_.theta_spatial[l], &g_spatial_[l]});
            out.push_back({tag + ".theta_t", &params_.theta_temporal[l], &g_temporal_[l]});
        }
        out.push_back({"out.theta", &params_.theta_out, &g_out_});
        if (params_.arch.batchnorm)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t tau = 0; tau < params_.arch.time_steps; ++tau) {
                    const std::string tag =
                        "l" + std::to_string(l) + ".t" + std::to_string(tau);
                    out.push_back({tag + ".gamma", &params_.bn[l][tau].gamma(),
                                   &g_gamma_[l][tau], false});
                    out.push_back({tag + ".beta", &params_.bn[l][tau].beta(),
                                   &g_beta_[l][tau], false});
                }
        return out;
    }

    double loss_on(const Tensor& inputs, const Tensor& targets, bool train) override {
        cache_ = rnn_forward(params_, inputs, train, loss_kind_);
        targets_ = targets;
        return recurrent_loss(loss_kind_, cache_.outputs, targets, cache_.t_mb);
    }

    void backward() override {
        ensure_grad_slots();
        RnnBackward bwd = rnn_backward(params_, cache_, targets_, loss_kind_);
        RnnGrads g = rnn_grads(params_, cache_, bwd);
        for (std::size_t l = 0; l < params_.arch.layers(); ++l) {
            g_spatial_[l] = std::move(g.theta_spatial[l]);
            g_temporal_[l] = std::move(g.theta_temporal[l]);
        }
        g_out_ = std::move(g.theta_out);
        if (params_.arch.batchnorm)
            for (std::size_t l = 0; l < params_.arch.layers(); ++l)
                for (std::size_t tau = 0; tau < params_.arch.time_steps; ++tau) {
                    g_gamma_[l][tau] = std::move(g.gamma[l][tau]);
                    g_beta_[l][tau] = std::move(g.beta[l][tau]);
                }
    }

    Tensor predict(const Tensor& inputs) override {
        RnnCache c = rnn_forward(params_, inputs, false, loss_kind_);
        return detail::stack_time(c.outputs);
    }

    /// Generation mode: the step-tau output becomes the step-tau+1 input
    /// (requires matching input/output widths). The first time column of
    /// `seed` is consumed as given.
    Tensor generate(const Tensor& seed) {
        if (params_.arch.input_width != params_.arch.output_width)
            throw ConfigError("generation mode needs input and output widths to match");
        Tensor inputs = seed;
        const std::size_t T = params_.arch.time_steps;
        for (std::size_t step = 1; step < T; ++step) {
            RnnCache c = rnn_forward(params_, inputs, false, loss_kind_);
            for (std::size_t t = 0; t < inputs.dim(0); ++t)
                for (std::size_t f = 0; f < inputs.dim(1); ++f)
                    inputs(t, f, step) = c.outputs[step - 1](t, f);
        }
        RnnCache c = rnn_forward(params_, inputs, false, loss_kind_);
        return detail::stack_time(c.outputs);
    }

    void fold_running_stats() override {
        if (!params_.arch.batchnorm) return;
        for (auto& row : params_.bn)
            for (auto& st : row)
                if (st.has_cache()) st.update_running();
    }

    std::vector<std::pair<std::string, BatchNormState*>> bn_states() override {
        std::vector<std::pair<std::string, BatchNormState*>> out;
        for (std::size_t l = 0; l < params_.bn.size(); ++l)
            for (std::size_t tau = 0; tau < params_.bn[l].size(); ++tau)
                out.emplace_back("l" + std::to_string(l) + ".t" + std::to_string(tau),
                                 &params_.bn[l][tau]);
        return out;
    }

  private:
    void ensure_grad_slots() {
        const std::size_t L = params_.arch.layers(), T = params_.arch.time_steps;
        if (g_spatial_.size() == L) return;
        for (std::size_t l = 0; l < L; ++l) {
            g_spatial_.emplace_back(params_.theta_spatial[l].shape());
            g_temporal_.emplace_back(params_.theta_temporal[l].shape());
        }
        g_out_ = Tensor(params_.theta_out.shape());
        if (params_.arch.batchnorm) {
            g_gamma_ = make_grid(L, T);
            g_beta_ = make_grid(L, T);
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t tau = 0; tau < T; ++tau) {
                    g_gamma_[l][tau] = Tensor({params_.arch.width(l)});
                    g_beta_[l][tau] = Tensor({params_.arch.width(l)});
                }
        }
    }

    RnnParams params_;
    LossKind loss_kind_;
    RnnCache cache_;
    Tensor targets_;
    std::vector<Tensor> g_spatial_, g_temporal_;
    Tensor g_out_;
    CellGrid g_gamma_, g_beta_;
};

class LstmNetwork : public Model {
  public:
    LstmNetwork(RecurrentArch arch, LossKind loss_kind, std::uint64_t seed,
                LstmBackwardMode mode = LstmBackwardMode::FullGradient,
                bool diagonal_temporal_init = false)
        : params_(std::move(arch), seed, diagonal_temporal_init),
          loss_kind_(loss_kind),
          mode_(mode) {}

    LstmParams& lstm_params() { return params_; }
    const LstmCache& cache() const { return cache_; }
    LstmBackwardMode mode() const { return mode_; }
    void set_mode(LstmBackwardMode m) { mode_ = m; }

    std::vector<ParamRef> params() override {
        ensure_grad_slots();
        std::vector<ParamRef> out;
        const std::size_t L = params_.arch.layers();
        for (std::size_t l = 0; l < L; ++l) {
            const std::string tag = "l" + std::to_string(l);
            out.push_back({tag + ".wi_s", &params_.wi_s[l], &g_.wi_s[l]});
            out.push_back({tag + ".wi_t", &params_.wi_t[l], &g_.wi_t[l]});
            out.push_back({tag + ".wf_s", &params_.wf_s[l], &g_.wf_s[l]});
            out.push_back({tag + ".wf_t", &params_.wf_t[l], &g_.wf_t[l]});
            out.push_back({tag + ".wo_s", &params_.wo_s[l], &g_.wo_s[l]});
            out.push_back({tag + ".wo_t", &params_.wo_t[l], &g_.wo_t[l]});
            out.push_back({tag + ".wg_s", &params_.wg_s[l], &g_.wg_s[l]});
            out.push_back({tag + ".wg_t", &params_.wg_t[l], &g_.wg_t[l]});
        }
        out.push_back({"out.theta", &params_.theta_out, &g_.theta_out});
        if (params_.arch.batchnorm)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t tau = 0; tau < params_.arch.time_steps; ++tau) {
                    const std::string tag =
                        "l" + std::to_string(l) + ".t" + std::to_string(tau);
                    out.push_back({tag + ".gamma", &params_.bn[l][tau].gamma(),
                                   &g_.gamma[l][tau], false});
                    out.push_back({tag + ".beta", &params_.bn[l][tau].beta(),
                                   &g_.beta[l][tau], false});
                }
        return out;
    }

    double loss_on(const Tensor& inputs, const Tensor& targets, bool train) override {
        cache_ = lstm_forward(params_, inputs, train, loss_kind_);
        targets_ = targets;
        return recurrent_loss(loss_kind_, cache_.outputs, targets, cache_.t_mb);
    }

    void backward() override {
        ensure_grad_slots();
        LstmBackwardResult bwd = lstm_backward(params_, cache_, targets_, loss_kind_, mode_);
        LstmGrads g = lstm_grads(params_, cache_, bwd);
        // per-element assignment keeps the grad-slot addresses stable
        for (std::size_t l = 0; l < params_.arch.layers(); ++l) {
            g_.wi_s[l] = std::move(g.wi_s[l]);
            g_.wi_t[l] = std::move(g.wi_t[l]);
            g_.wf_s[l] = std::move(g.wf_s[l]);
            g_.wf_t[l] = std::move(g.wf_t[l]);
            g_.wo_s[l] = std::move(g.wo_s[l]);
            g_.wo_t[l] = std::move(g.wo_t[l]);
            g_.wg_s[l] = std::move(g.wg_s[l]);
            g_.wg_t[l] = std::move(g.wg_t[l]);
        }
        g_.theta_out = std::move(g.theta_out);
        if (params_.arch.batchnorm)
            for (std::size_t l = 0; l < params_.arch.layers(); ++l)
                for (std::size_t tau = 0; tau < params_.arch.time_steps; ++tau) {
                    g_.gamma[l][tau] = std::move(g.gamma[l][tau]);
                    g_.beta[l][tau] = std::move(g.beta[l][tau]);
                }
    }

    Tensor predict(const Tensor& inputs) override {
        LstmCache c = lstm_forward(params_, inputs, false, loss_kind_);
        return detail::stack_time(c.outputs);
    }

    Tensor generate(const Tensor& seed) {
        if (params_.arch.input_width != params_.arch.output_width)
            throw ConfigError("generation mode needs input and output widths to match");
        Tensor inputs = seed;
        const std::size_t T = params_.arch.time_steps;
        for (std::size_t step = 1; step < T; ++step) {
            LstmCache c = lstm_forward(params_, inputs, false, loss_kind_);
            for (std::size_t t = 0; t < inputs.dim(0); ++t)
                for (std::size_t f = 0; f < inputs.dim(1); ++f)
                    inputs(t, f, step) = c.outputs[step - 1](t, f);
        }
        LstmCache c = lstm_forward(params_, inputs, false, loss_kind_);
        return detail::stack_time(c.outputs);
    }

    void fold_running_stats() override {
        if (!params_.arch.batchnorm) return;
        for (auto& row : params_.bn)
            for (auto& st : row)
                if (st.has_cache()) st.update_running();
    }

    std::vector<std::pair<std::string, BatchNormState*>> bn_states() override {
        std::vector<std::pair<std::string, BatchNormState*>> out;
        for (std::size_t l = 0; l < params_.bn.size(); ++l)
            for (std::size_t tau = 0; tau < params_.bn[l].size(); ++tau)
                out.emplace_back("l" + std::to_string(l) + ".t" + std::to_string(tau),
                                 &params_.bn[l][tau]);
        return out;
    }

  private:
    void ensure_grad_slots() {
        const std::size_t L = params_.arch.layers(), T = params_.arch.time_steps;
        if (g_.wi_s.size() == L) return;
        for (std::size_t l = 0; l < L; ++l) {
            g_.wi_s.emplace_back(params_.wi_s[l].shape());
            g_.wi_t.emplace_back(params_.wi_t[l].shape());
            g_.wf_s.emplace_back(params_.wf_s[l].shape());
            g_.wf_t.emplace_back(params_.wf_t[l].shape());
            g_.wo_s.emplace_back(params_.wo_s[l].shape());
            g_.wo_t.emplace_back(params_.wo_t[l].shape());
            g_.wg_s.emplace_back(params_.wg_s[l].shape());
            g_.wg_t.emplace_back(params_.wg_t[l].shape());
        }
        g_.theta_out = Tensor(params_.theta_out.shape());
        if (params_.arch.batchnorm) {
            g_.gamma = make_grid(L, T);
            g_.beta = make_grid(L, T);
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t tau = 0; tau < T; ++tau) {
                    g_.gamma[l][tau] = Tensor({params_.arch.width(l)});
                    g_.beta[l][tau] = Tensor({params_.arch.width(l)});
                }
        }
    }

    LstmParams params_;
    LossKind loss_kind_;
    LstmBackwardMode mode_;
    LstmCache cache_;
    Tensor targets_;
    LstmGrads g_;
};

}  // namespace indexnet
