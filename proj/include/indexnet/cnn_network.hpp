#pragma once

#include <memory>
#include <string>
#include <vector>

#include "indexnet/conv.hpp"
#include "indexnet/dense.hpp"
#include "indexnet/errors.hpp"
#include "indexnet/model.hpp"

namespace indexnet {

/// One stage of a convolutional architecture, declaratively.
struct CnnStage {
    enum class Kind { Conv, Pool, Resnet, TowardsFC, FC };
    Kind kind = Kind::Conv;
    std::size_t features = 0;  // conv/towardsfc/fc output features, resnet bottleneck
    std::size_t field = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    Activation activation = Activation::relu();
    bool batchnorm = false;
    PoolKind pool_kind = PoolKind::Max;

    static CnnStage conv(std::size_t features, std::size_t field, std::size_t stride,
                         std::size_t pad, Activation act, bool bn) {
        CnnStage s;
        s.kind = Kind::Conv;
        s.features = features;
        s.field = field;
        s.stride = stride;
        s.pad = pad;
        s.activation = act;
        s.batchnorm = bn;
        return s;
    }
    static CnnStage pool(std::size_t field, std::size_t stride, PoolKind kind = PoolKind::Max) {
        CnnStage s;
        s.kind = Kind::Pool;
        s.field = field;
        s.stride = stride;
        s.pool_kind = kind;
        return s;
    }
    static CnnStage resnet(std::size_t bottleneck, Activation act, bool bn) {
        CnnStage s;
        s.kind = Kind::Resnet;
        s.features = bottleneck;
        s.activation = act;
        s.batchnorm = bn;
        return s;
    }
    static CnnStage towards_fc(std::size_t features, Activation act, bool bn) {
        CnnStage s;
        s.kind = Kind::TowardsFC;
        s.features = features;
        s.activation = act;
        s.batchnorm = bn;
        return s;
    }
    static CnnStage fc(std::size_t features, Activation act, bool bn) {
        CnnStage s;
        s.kind = Kind::FC;
        s.features = features;
        s.activation = act;
        s.batchnorm = bn;
        return s;
    }
};

/// Convolutional network: spatial stages, one TowardsFC collapse, fully
/// connected stages, then the output function picked by the loss kind.
class CnnNetwork : public Model {
  public:
    CnnNetwork(std::size_t in_features, std::size_t in_width, std::size_t in_height,
               std::vector<CnnStage> stages, std::size_t output_width, LossKind loss_kind,
               std::uint64_t seed, ConvPath path = ConvPath::GEMM)
        : loss_kind_(loss_kind), path_(path) {
        std::size_t F = in_features, N = in_width, T = in_height;
        bool collapsed = false;
        bool after_pool = false;
        std::uint64_t s = seed;
        for (const CnnStage& st : stages) {
            Built b;
            b.kind = st.kind;
            switch (st.kind) {
                case CnnStage::Kind::Conv: {
                    if (collapsed) throw ConfigError("conv stage after the TowardsFC collapse");
                    if (after_pool && st.stride != 1)
                        throw ConfigError("a convolution directly above a pool layer must have "
                                          "stride 1 (the only derived backward case)");
                    auto geom = ConvGeometry::make(N, T, st.field, st.stride, st.pad);
                    b.conv = std::make_unique<ConvLayer>(F, st.features, geom, st.activation,
                                                         st.batchnorm, ++s);
                    F = st.features;
                    N = geom.out_width;
                    T = geom.out_height;
                    after_pool = false;
                    break;
                }
                case CnnStage::Kind::Pool: {
                    if (collapsed) throw ConfigError("pool stage after the TowardsFC collapse");
                    b.pool = std::make_unique<PoolLayer>();
                    b.pool->field = st.field;
                    b.pool->stride = st.stride;
                    b.pool->kind = st.pool_kind;
                    if (N < st.field || (N - st.field) % st.stride != 0 || T < st.field ||
                        (T - st.field) % st.stride != 0)
                        throw GeometryError("pool stage does not tile its input " +
                                            std::to_string(N) + "x" + std::to_string(T));
                    N = (N - st.field) / st.stride + 1;
                    T = (T - st.field) / st.stride + 1;
                    after_pool = true;
                    break;
                }
                case CnnStage::Kind::Resnet: {
                    if (collapsed) throw ConfigError("resnet stage after the TowardsFC collapse");
                    b.block = std::make_unique<ResnetConvBlock>(F, st.features, N, T,
                                                                st.activation, st.batchnorm,
                                                                s += 4);
                    after_pool = false;
                    break;
                }
                case CnnStage::Kind::TowardsFC: {
                    if (collapsed) throw ConfigError("TowardsFC appears more than once");
                    b.tfc = std::make_unique<TowardsFcLayer>(F, st.features, N, T, st.activation,
                                                             st.batchnorm, ++s);
                    F = st.features;
                    collapsed = true;
                    after_pool = false;
                    break;
                }
                case CnnStage::Kind::FC: {
                    if (!collapsed) throw ConfigError("FC stage before the TowardsFC collapse");
                    b.fc = std::make_unique<DenseLayer>(F, st.features, st.activation,
                                                        st.batchnorm, ++s);
                    F = st.features;
                    break;
                }
            }
            built_.push_back(std::move(b));
        }
        if (!collapsed)
            throw ConfigError("a convolutional architecture needs exactly one TowardsFC stage");
        output_layer_ = DenseLayer(F, output_width, Activation::tanh(), false, ++s);
    }

    std::vector<ParamRef> params() override {
        ensure_grad_slots();
        std::vector<ParamRef> out;
        for (std::size_t i = 0; i < built_.size(); ++i) {
            Built& b = built_[i];
            const std::string tag = std::to_string(i);
            if (b.conv) {
                out.push_back({"conv" + tag + ".theta", &b.conv->theta, &grads_[i].theta});
                if (b.conv->bn) {
                    out.push_back({"conv" + tag + ".gamma", &b.conv->bn->gamma(),
                                   &grads_[i].gamma, false});
                    out.push_back({"conv" + tag + ".beta", &b.conv->bn->beta(), &grads_[i].beta,
                                   false});
                }
            } else if (b.block) {
                auto add = [&](const char* part, ConvLayer& l, Tensor* th, Tensor* ga, Tensor* be) {
                    out.push_back({"res" + tag + "." + part + ".theta", &l.theta, th});
                    if (l.bn) {
                        out.push_back({"res" + tag + "." + part + ".gamma", &l.bn->gamma(), ga,
                                       false});
                        out.push_back({"res" + tag + "." + part + ".beta", &l.bn->beta(), be,
                                       false});
                    }
                };
                add("reduce", b.block->reduce, &grads_[i].theta, &grads_[i].gamma,
                    &grads_[i].beta);
                add("conv", b.block->conv, &grads_[i].theta2, &grads_[i].gamma2,
                    &grads_[i].beta2);
                add("restore", b.block->restore, &grads_[i].theta3, &grads_[i].gamma3,
                    &grads_[i].beta3);
            } else if (b.tfc) {
                out.push_back({"tfc" + tag + ".theta", &b.tfc->theta, &grads_[i].theta});
                if (b.tfc->bn) {
                    out.push_back({"tfc" + tag + ".gamma", &b.tfc->bn->gamma(), &grads_[i].gamma,
                                   false});
                    out.push_back({"tfc" + tag + ".beta", &b.tfc->bn->beta(), &grads_[i].beta,
                                   false});
                }
            } else if (b.fc) {
                out.push_back({"fc" + tag + ".theta", &b.fc->theta, &grads_[i].theta});
                if (b.fc->bn) {
                    out.push_back({"fc" + tag + ".gamma", &b.fc->bn->gamma(), &grads_[i].gamma,
                                   false});
                    out.push_back({"fc" + tag + ".beta", &b.fc->bn->beta(), &grads_[i].beta,
                                   false});
                }
            }
        }
        out.push_back({"out.theta", &output_layer_.theta, &dtheta_out_});
        return out;
    }

    Tensor forward(const Tensor& inputs, bool train) {
        kink_margin_ = 1e300;
        Tensor x = inputs;
        for (Built& b : built_) {
            switch (b.kind) {
                case CnnStage::Kind::Conv:
                    x = conv_forward(*b.conv, pad2d_batch(x, b.conv->geometry.pad), path_, train);
                    track_kinks(b.conv->activation, b.conv->a, train);
                    break;
                case CnnStage::Kind::Pool:
                    x = pool_forward(*b.pool, x, train);
                    break;
                case CnnStage::Kind::Resnet:
                    x = resnet_conv_forward(*b.block, x, path_, train);
                    track_kinks(b.block->reduce.activation, b.block->reduce.a, train);
                    track_kinks(b.block->conv.activation, b.block->conv.a, train);
                    track_kinks(b.block->restore.activation, b.block->restore.a, train);
                    break;
                case CnnStage::Kind::TowardsFC:
                    x = towardsfc_forward(*b.tfc, x, train);
                    track_kinks(b.tfc->activation, b.tfc->a, train);
                    break;
                case CnnStage::Kind::FC:
                    x = fc_forward(*b.fc, x, train);
                    track_kinks(b.fc->activation, b.fc->a, train);
                    break;
            }
        }
        if (train) head_in_ = x;
        Tensor a = weight_average(output_layer_.theta, x);
        if (train) output_layer_.a = a;
        switch (loss_kind_) {
            case LossKind::MSE: return a;
            case LossKind::CrossEntropy: return softmax_lastaxis(a);
            case LossKind::BinnedCrossEntropy:
                throw ConfigError("binned heads are not wired into the CNN trainer");
        }
        return a;
    }

    double loss_on(const Tensor& inputs, const Tensor& targets, bool train) override {
        output_ = forward(inputs, train);
        if (train) targets_ = targets;
        return loss(loss_kind_, output_, targets, inputs.dim(0));
    }

    void backward() override {
        if (output_.size() == 0) throw StateError("CnnNetwork::backward: no cached forward");
        ensure_grad_slots();
        const std::size_t t_mb = output_.dim(0);
        Tensor delta_vec = output_delta(loss_kind_, output_, targets_, t_mb);
        dtheta_out_ = weight_grad(delta_vec, head_in_);
        Tensor u_vec = upstream_through(output_layer_.theta, delta_vec);

        Tensor u_map;  // gradient flowing onto a spatial stage's outputs
        bool spatial = false;
        for (std::size_t i = built_.size(); i-- > 0;) {
            Built& b = built_[i];
            switch (b.kind) {
                case CnnStage::Kind::FC: {
                    if (b.fc->bn) {
                        auto [dg, db] = coeff_grads_from_upstream(u_vec, b.fc->bn->normalized());
                        grads_[i].gamma = std::move(dg);
                        grads_[i].beta = std::move(db);
                    }
                    Tensor d = hidden_delta_from_upstream(std::move(u_vec),
                                                          b.fc->bn ? &*b.fc->bn : nullptr,
                                                          b.fc->a, b.fc->activation);
                    grads_[i].theta = weight_grad(d, b.fc->in);
                    u_vec = upstream_through(b.fc->theta, d);
                    break;
                }
                case CnnStage::Kind::TowardsFC: {
                    if (b.tfc->bn) {
                        auto [dg, db] = coeff_grads_from_upstream(u_vec, b.tfc->bn->normalized());
                        grads_[i].gamma = std::move(dg);
                        grads_[i].beta = std::move(db);
                    }
                    Tensor d = hidden_delta_from_upstream(std::move(u_vec),
                                                          b.tfc->bn ? &*b.tfc->bn : nullptr,
                                                          b.tfc->a, b.tfc->activation);
                    grads_[i].theta = towardsfc_weight_grad(d, b.tfc->in);
                    u_map = delta_fc_to_pool(b.tfc->theta, d);
                    spatial = true;
                    break;
                }
                case CnnStage::Kind::Pool: {
                    u_map = pool_backward_route(*b.pool, u_map);
                    break;
                }
                case CnnStage::Kind::Conv: {
                    if (b.conv->bn) {
                        auto [dg, db] =
                            conv_coeff_grads_from_upstream(u_map, b.conv->bn->normalized());
                        grads_[i].gamma = std::move(dg);
                        grads_[i].beta = std::move(db);
                    }
                    Tensor d = conv_delta_from_upstream(std::move(u_map),
                                                        b.conv->bn ? &*b.conv->bn : nullptr,
                                                        b.conv->a, b.conv->activation);
                    grads_[i].theta = conv_weight_grad(d, b.conv->input_padded, b.conv->geometry);
                    if (i > 0) u_map = conv_input_grad(b.conv->theta, d, b.conv->geometry);
                    break;
                }
                case CnnStage::Kind::Resnet: {
                    auto g = resnet_conv_backward(*b.block, u_map);
                    grads_[i].theta = std::move(g.dtheta_reduce);
                    grads_[i].theta2 = std::move(g.dtheta_conv);
                    grads_[i].theta3 = std::move(g.dtheta_restore);
                    grads_[i].gamma = std::move(g.dgamma_reduce);
                    grads_[i].beta = std::move(g.dbeta_reduce);
                    grads_[i].gamma2 = std::move(g.dgamma_conv);
                    grads_[i].beta2 = std::move(g.dbeta_conv);
                    grads_[i].gamma3 = std::move(g.dgamma_restore);
                    grads_[i].beta3 = std::move(g.dbeta_restore);
                    u_map = std::move(g.dinput);
                    break;
                }
            }
        }
        (void)spatial;
    }

    Tensor predict(const Tensor& inputs) override { return forward(inputs, false); }

    void fold_running_stats() override {
        for (Built& b : built_) {
            if (b.conv && b.conv->bn && b.conv->bn->has_cache()) b.conv->bn->update_running();
            if (b.tfc && b.tfc->bn && b.tfc->bn->has_cache()) b.tfc->bn->update_running();
            if (b.fc && b.fc->bn && b.fc->bn->has_cache()) b.fc->bn->update_running();
            if (b.block) {
                for (ConvLayer* l : {&b.block->reduce, &b.block->conv, &b.block->restore})
                    if (l->bn && l->bn->has_cache()) l->bn->update_running();
            }
        }
    }

    double last_kink_margin() const override { return kink_margin_; }

    std::vector<std::pair<std::string, BatchNormState*>> bn_states() override {
        std::vector<std::pair<std::string, BatchNormState*>> out;
        for (std::size_t i = 0; i < built_.size(); ++i) {
            const std::string tag = std::to_string(i);
            Built& b = built_[i];
            if (b.conv && b.conv->bn) out.emplace_back("conv" + tag, &*b.conv->bn);
            if (b.tfc && b.tfc->bn) out.emplace_back("tfc" + tag, &*b.tfc->bn);
            if (b.fc && b.fc->bn) out.emplace_back("fc" + tag, &*b.fc->bn);
            if (b.block && b.block->reduce.bn) {
                out.emplace_back("res" + tag + ".reduce", &*b.block->reduce.bn);
                out.emplace_back("res" + tag + ".conv", &*b.block->conv.bn);
                out.emplace_back("res" + tag + ".restore", &*b.block->restore.bn);
            }
        }
        return out;
    }

    ConvLayer* conv_at(std::size_t i) { return built_[i].conv.get(); }
    PoolLayer* pool_at(std::size_t i) { return built_[i].pool.get(); }

  private:
    struct Built {
        CnnStage::Kind kind;
        std::unique_ptr<ConvLayer> conv;
        std::unique_ptr<PoolLayer> pool;
        std::unique_ptr<ResnetConvBlock> block;
        std::unique_ptr<TowardsFcLayer> tfc;
        std::unique_ptr<DenseLayer> fc;
    };
    struct StageGrads {
        Tensor theta, gamma, beta;
        Tensor theta2, gamma2, beta2;  // resnet middle conv
        Tensor theta3, gamma3, beta3;  // resnet restore conv
    };

    void track_kinks(const Activation& g, const Tensor& a, bool /*train*/) {
        if (g.kind != ActivationKind::ReLU && g.kind != ActivationKind::LeakyReLU &&
            g.kind != ActivationKind::ParametricReLU)
            return;
        for (std::size_t i = 0; i < a.size(); ++i)
            kink_margin_ = std::min(kink_margin_, std::abs(a[i]));
    }

    void ensure_grad_slots() {
        if (grads_.size() == built_.size()) return;
        grads_.assign(built_.size(), StageGrads{});
        for (std::size_t i = 0; i < built_.size(); ++i) {
            Built& b = built_[i];
            if (b.conv) {
                grads_[i].theta = Tensor(b.conv->theta.shape());
                if (b.conv->bn) {
                    grads_[i].gamma = Tensor({b.conv->bn->features()});
                    grads_[i].beta = Tensor({b.conv->bn->features()});
                }
            } else if (b.block) {
                grads_[i].theta = Tensor(b.block->reduce.theta.shape());
                grads_[i].theta2 = Tensor(b.block->conv.theta.shape());
                grads_[i].theta3 = Tensor(b.block->restore.theta.shape());
                if (b.block->reduce.bn) {
                    grads_[i].gamma = Tensor({b.block->reduce.bn->features()});
                    grads_[i].beta = Tensor({b.block->reduce.bn->features()});
                    grads_[i].gamma2 = Tensor({b.block->conv.bn->features()});
                    grads_[i].beta2 = Tensor({b.block->conv.bn->features()});
                    grads_[i].gamma3 = Tensor({b.block->restore.bn->features()});
                    grads_[i].beta3 = Tensor({b.block->restore.bn->features()});
                }
            } else if (b.tfc) {
                grads_[i].theta = Tensor(b.tfc->theta.shape());
                if (b.tfc->bn) {
                    grads_[i].gamma = Tensor({b.tfc->bn->features()});
                    grads_[i].beta = Tensor({b.tfc->bn->features()});
                }
            } else if (b.fc) {
                grads_[i].theta = Tensor(b.fc->theta.shape());
                if (b.fc->bn) {
                    grads_[i].gamma = Tensor({b.fc->bn->features()});
                    grads_[i].beta = Tensor({b.fc->bn->features()});
                }
            }
        }
        dtheta_out_ = Tensor(output_layer_.theta.shape());
    }

    std::vector<Built> built_;
    DenseLayer output_layer_;
    LossKind loss_kind_;
    ConvPath path_;
    std::vector<StageGrads> grads_;
    Tensor dtheta_out_;
    Tensor head_in_, output_, targets_;
    double kink_margin_ = 1e300;
};

}  // namespace indexnet
