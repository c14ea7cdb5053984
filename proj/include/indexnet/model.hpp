#pragma once

#include <string>
#include <utility>
#include <vector>

#include "indexnet/tensor.hpp"

namespace indexnet {

class BatchNormState;
class Rng;

/// Named view of one trainable tensor and its gradient slot.
struct ParamRef {
    std::string name;
    Tensor* value = nullptr;
    Tensor* grad = nullptr;
    bool is_weight = true;  // false for BN coefficients; penalties skip those
};

/// Common surface of the trainable network families. The trainer, the
/// optimizer wiring and the gradient-check harness all work against this.
class Model {
  public:
    virtual ~Model() = default;

    virtual std::vector<ParamRef> params() = 0;

    /// Forward pass plus loss on one mini-batch. Train mode caches whatever
    /// backward() needs; eval mode uses running statistics and no dropout.
    virtual double loss_on(const Tensor& inputs, const Tensor& targets, bool train) = 0;

    /// Fills every ParamRef grad from the caches of the last train-mode
    /// loss_on call.
    virtual void backward() = 0;

    /// Eval-mode network outputs.
    virtual Tensor predict(const Tensor& inputs) = 0;

    /// Fold cached batch statistics into BN running stats, once per
    /// training step.
    virtual void fold_running_stats() {}

    /// Reuse the dropout masks of the first training forward thereafter
    /// (gradient checking needs a deterministic loss closure).
    virtual void freeze_dropout(bool) {}

    /// Smallest |pre-activation| seen at a rectifier-family unit during the
    /// last forward; infinity when no such unit exists. Finite differences
    /// straddling a kink are unreliable, and the checker skips entries whose
    /// probes land within 10*eps of one.
    virtual double last_kink_margin() const { return 1e300; }

    /// Every batch-norm state, for checkpointing of running statistics.
    virtual std::vector<std::pair<std::string, BatchNormState*>> bn_states() { return {}; }

    /// Every RNG stream the model owns (dropout masks), for checkpointing.
    virtual std::vector<std::pair<std::string, Rng*>> rng_states() { return {}; }
};

}  // namespace indexnet
