#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "indexnet/checkpoint.hpp"
#include "indexnet/config.hpp"
#include "indexnet/data.hpp"
#include "indexnet/gradcheck.hpp"
#include "indexnet/model.hpp"
#include "indexnet/optimizer.hpp"

namespace indexnet {

// ---------------------------------------------------------------------------
// Dataset loading by scheme string:
//   synthetic:xor
//   synthetic:digits[:n=2000][:noise=0.15][:seed=7]
//   synthetic:sine[:n=256][:t=32][:seed=7]
//   synthetic:charloop[:n=128][:t=8][:alphabet=4][:seed=7]
//   idx:<images path>:<labels path>
//   csv:<path>:targets=<k>[:classes=<C>]

struct LoadedDataset {
    Tensor inputs;
    Tensor targets;
    bool classification = false;
    std::size_t count = 0;
};

namespace traindetail {

inline std::map<std::string, std::string> kv_params(const std::vector<std::string>& parts,
                                                    std::size_t from) {
    std::map<std::string, std::string> kv;
    for (std::size_t i = from; i < parts.size(); ++i) {
        const auto eq = parts[i].find('=');
        if (eq == std::string::npos)
            throw ConfigError("dataset parameter '" + parts[i] + "' is not key=value");
        kv[parts[i].substr(0, eq)] = parts[i].substr(eq + 1);
    }
    return kv;
}

inline std::size_t kv_count(const std::map<std::string, std::string>& kv, const std::string& k,
                            std::size_t fallback) {
    auto it = kv.find(k);
    return it == kv.end() ? fallback : cfgdetail::to_count(it->second, k);
}

inline double kv_double(const std::map<std::string, std::string>& kv, const std::string& k,
                        double fallback) {
    auto it = kv.find(k);
    return it == kv.end() ? fallback : cfgdetail::to_double(it->second, k);
}

}  // namespace traindetail

inline LoadedDataset load_dataset(const std::string& scheme, const RunConfig& cfg) {
    if (scheme.empty()) throw ConfigError("no dataset configured");
    const auto parts = split(scheme, ':');
    const std::string& head = parts[0];
    LoadedDataset d;
    if (head == "synthetic") {
        if (parts.size() < 2) throw ConfigError("synthetic dataset needs a name");
        const std::string& which = parts[1];
        const auto kv = traindetail::kv_params(parts, 2);
        if (which == "xor") {
            auto raw = synthetic_xor();
            d.inputs = raw.inputs;
            d.targets = raw.targets.reshaped({raw.targets.dim(0)});
            d.classification = true;
        } else if (which == "digits") {
            auto raw = synthetic_digits(traindetail::kv_count(kv, "n", 2000),
                                        traindetail::kv_count(kv, "seed", 7),
                                        traindetail::kv_double(kv, "noise", 0.15));
            d.inputs = std::move(raw.images);
            d.targets = std::move(raw.labels);
            d.classification = true;
        } else if (which == "sine") {
            auto raw = synthetic_sine(traindetail::kv_count(kv, "n", 256),
                                      traindetail::kv_count(kv, "t", cfg.recurrent_arch.time_steps),
                                      traindetail::kv_count(kv, "seed", 7));
            d.inputs = std::move(raw.inputs);
            d.targets = std::move(raw.targets);
            d.classification = false;
        } else if (which == "charloop") {
            auto raw = synthetic_charloop(
                traindetail::kv_count(kv, "n", 128),
                traindetail::kv_count(kv, "t", cfg.recurrent_arch.time_steps),
                traindetail::kv_count(kv, "alphabet", cfg.output_width),
                traindetail::kv_count(kv, "seed", 7));
            d.inputs = std::move(raw.inputs);
            d.targets = std::move(raw.targets);
            d.classification = true;
        } else {
            throw ConfigError("unknown synthetic dataset '" + which + "'");
        }
    } else if (head == "idx") {
        if (parts.size() < 3) throw ConfigError("idx dataset wants idx:<images>:<labels>");
        Tensor images = read_idx(parts[1]);
        Tensor labels = read_idx(parts[2]);
        if (images.dim(0) != labels.dim(0))
            throw DataError("image and label counts disagree: " + images.shape_str() + " vs " +
                            labels.shape_str());
        // labels come back scaled by /255; undo to recover class indices
        for (std::size_t i = 0; i < labels.size(); ++i)
            labels[i] = std::round(labels[i] * 255.0);
        if (images.rank() == 3)
            images = images.reshaped({images.dim(0), 1, images.dim(1), images.dim(2)});
        d.inputs = std::move(images);
        d.targets = labels.reshaped({labels.dim(0)});
        d.classification = true;
    } else if (head == "csv") {
        if (parts.size() < 2) throw ConfigError("csv dataset wants csv:<path>[:targets=k]");
        const auto kv = traindetail::kv_params(parts, 2);
        const std::size_t tcols = traindetail::kv_count(kv, "targets", 1);
        DelimitedData raw = read_delimited(parts[1], tcols);
        d.inputs = std::move(raw.inputs);
        d.classification = kv.count("classes") > 0 || cfg.loss_kind == LossKind::CrossEntropy;
        d.targets = d.classification && tcols == 1
                        ? raw.targets.reshaped({raw.targets.dim(0)})
                        : std::move(raw.targets);
    } else {
        throw ConfigError("unknown dataset scheme '" + head + "'");
    }
    d.count = d.inputs.dim(0);
    return d;
}

// ---------------------------------------------------------------------------
// Training driver

struct EpochRow {
    std::size_t epoch;
    double train_loss, eval_loss, eval_accuracy, eta;
};

struct TrainOutcome {
    std::vector<EpochRow> metrics;
    std::string final_checkpoint;
};

inline double classification_accuracy(const Tensor& outputs, const Tensor& targets) {
    if (outputs.rank() == 2) {
        std::size_t hits = 0;
        for (std::size_t t = 0; t < outputs.dim(0); ++t) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < outputs.dim(1); ++c)
                if (outputs(t, c) > outputs(t, best)) best = c;
            if (best == static_cast<std::size_t>(targets(t))) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(outputs.dim(0));
    }
    // recurrent outputs [T_mb, C, time] vs target classes [T_mb, time]
    std::size_t hits = 0, total = 0;
    for (std::size_t t = 0; t < outputs.dim(0); ++t)
        for (std::size_t tau = 0; tau < outputs.dim(2); ++tau) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < outputs.dim(1); ++c)
                if (outputs(t, c, tau) > outputs(t, best, tau)) best = c;
            if (best == static_cast<std::size_t>(targets(t, tau))) ++hits;
            ++total;
        }
    return static_cast<double>(hits) / static_cast<double>(total);
}

class Trainer {
  public:
    Trainer(RunConfig cfg, std::string out_dir) : cfg_(std::move(cfg)), out_dir_(std::move(out_dir)) {
        std::filesystem::create_directories(out_dir_);
        model_ = build_model(cfg_);
        OptimizerHyper hp;
        hp.eta = cfg_.learning_rate > 0.0 ? cfg_.learning_rate
                                          : default_learning_rate(cfg_.optimizer);
        hp.alpha0 = cfg_.lr_decay_alpha0;
        opt_ = OptimizerState(cfg_.optimizer, hp);

        data_ = load_dataset(cfg_.dataset, cfg_);
        eval_ = cfg_.eval_dataset.empty() ? LoadedDataset{} : load_dataset(cfg_.eval_dataset, cfg_);

        // centering statistics come from the training split only and are
        // skipped outright for regression tasks
        if (cfg_.centering != "none") {
            if (cfg_.loss_kind == LossKind::MSE) {
                std::cerr << "note: centering skipped for a regression task\n";
            } else {
                CenterMode mode;
                if (cfg_.centering == "per_feature")
                    mode = CenterMode::PerFeature;
                else if (cfg_.centering == "per_pixel")
                    mode = CenterMode::PerPixel;
                else if (cfg_.centering == "per_channel")
                    mode = CenterMode::PerChannel;
                else
                    throw ConfigError("unknown centering mode '" + cfg_.centering + "'");
                center_ = compute_center_stats(data_.inputs, mode);
                data_.inputs = apply_centering(data_.inputs, *center_);
                if (eval_.count > 0) eval_.inputs = apply_centering(eval_.inputs, *center_);
            }
        }
    }

    Model& model() { return *model_; }
    const LoadedDataset& data() const { return data_; }

    /// Run the configured number of epochs (optionally resuming) and write
    /// metrics.csv plus periodic checkpoints into the output directory.
    TrainOutcome run(const std::string& resume_path = "") {
        const bool has_bn = config_uses_batchnorm();
        const bool keep_short = !(has_bn && data_.count % cfg_.batch_size == 1);
        BatchSampler sampler(data_.count, cfg_.batch_size, cfg_.seed + 1, cfg_.shuffle,
                             keep_short);
        double eta = opt_.hyper().eta;
        std::size_t start_epoch = 0;
        if (!resume_path.empty()) {
            CheckpointMeta meta =
                load_checkpoint(resume_path, cfg_.raw_network_text, *model_, &opt_);
            start_epoch = meta.epoch;
            eta = meta.eta;
            sampler.restore_epoch(start_epoch);
        }

        std::ofstream metrics(out_dir_ + "/metrics.csv",
                              resume_path.empty() ? std::ios::trunc : std::ios::app);
        if (resume_path.empty())
            metrics << "epoch,train_loss,eval_loss,eval_accuracy,learning_rate\n";

        TrainOutcome outcome;
        for (std::size_t epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
            opt_.hyper().eta = eta;
            double loss_sum = 0.0;
            std::size_t batches = 0;
            const std::size_t per_epoch = sampler.batches_per_epoch();
            for (std::size_t b = 0; b < per_epoch; ++b) {
                const auto idx = sampler.next_batch();
                Tensor x = gather_rows(data_.inputs, idx);
                Tensor y = gather_rows(data_.targets, idx);
                loss_sum += train_step(x, y);
                ++batches;
            }
            const double train_loss = loss_sum / static_cast<double>(batches);

            const auto [eval_loss, eval_acc] = evaluate();
            EpochRow row{epoch + 1, train_loss, eval_loss, eval_acc, eta};
            outcome.metrics.push_back(row);
            metrics << row.epoch << "," << std::setprecision(17) << row.train_loss << ","
                    << row.eval_loss << "," << row.eval_accuracy << "," << row.eta << "\n";

            if (cfg_.lr_decay_alpha0 > 0.0) eta = lr_decay(eta, cfg_.lr_decay_alpha0);
            if (cfg_.checkpoint_every > 0 && (epoch + 1) % cfg_.checkpoint_every == 0 &&
                epoch + 1 < cfg_.epochs)
                save_checkpoint(checkpoint_path(epoch + 1), cfg_.raw_network_text, *model_,
                                &opt_, eta, epoch + 1);
        }
        outcome.final_checkpoint = out_dir_ + "/checkpoint.ckpt";
        save_checkpoint(outcome.final_checkpoint, cfg_.raw_network_text, *model_, &opt_, eta,
                        cfg_.epochs);
        return outcome;
    }

    /// Loss and accuracy of the current parameters on the eval split (the
    /// training set when no separate split is configured).
    std::pair<double, double> evaluate() {
        const LoadedDataset& d = eval_.count > 0 ? eval_ : data_;
        const double j = model_->loss_on(d.inputs, d.targets, false);
        double acc = std::nan("");
        if (d.classification) {
            Tensor out = model_->predict(d.inputs);
            acc = classification_accuracy(out, d.targets);
        }
        return {j, acc};
    }

    GradCheckReport gradcheck(double threshold = 1e-5) {
        Rng rng(cfg_.seed + 17);
        const std::size_t t_mb = 3;
        Tensor x = synth_inputs(t_mb, rng);
        Tensor y = synth_targets(t_mb, rng);
        GradCheckConfig gc;
        gc.threshold = threshold;
        return check(*model_, x, y, gc);
    }

  private:
    bool config_uses_batchnorm() const {
        for (const auto& l : cfg_.fnn_hidden)
            if (l.batchnorm) return true;
        for (const auto& s : cfg_.cnn_stages)
            if (s.batchnorm) return true;
        return cfg_.recurrent_arch.batchnorm;
    }

    std::string checkpoint_path(std::size_t epoch) const {
        return out_dir_ + "/checkpoint-" + std::to_string(epoch) + ".ckpt";
    }

    double train_step(const Tensor& x, const Tensor& y) {
        const double j = model_->loss_on(x, y, true);
        model_->backward();
        auto params = model_->params();
        std::vector<Tensor*> values;
        std::vector<Tensor> grads;
        for (const ParamRef& p : params) {
            values.push_back(p.value);
            Tensor g = *p.grad;
            if (p.is_weight &&
                (cfg_.regularizer.lambda_l2 > 0.0 || cfg_.regularizer.lambda_l1 > 0.0))
                g += penalty_grad(cfg_.regularizer, *p.value);
            grads.push_back(std::move(g));
        }
        std::vector<const Tensor*> grad_ptrs;
        for (const Tensor& g : grads) grad_ptrs.push_back(&g);

        OptimizerState::GradAt grad_at = [&](const std::vector<Tensor*>&) {
            model_->loss_on(x, y, true);
            model_->backward();
            std::vector<Tensor> shifted;
            auto ps = model_->params();
            for (const ParamRef& p : ps) {
                Tensor g = *p.grad;
                if (p.is_weight &&
                    (cfg_.regularizer.lambda_l2 > 0.0 || cfg_.regularizer.lambda_l1 > 0.0))
                    g += penalty_grad(cfg_.regularizer, *p.value);
                shifted.push_back(std::move(g));
            }
            return shifted;
        };
        opt_.step(values, grad_ptrs, grad_at);
        if (cfg_.regularizer.clipping_enabled())
            for (const ParamRef& p : params)
                if (p.is_weight) *p.value = clip_weights(*p.value, cfg_.regularizer.clip_threshold);
        model_->fold_running_stats();
        return j;
    }

    Tensor synth_inputs(std::size_t t_mb, Rng& rng) {
        auto fill = [&](Tensor t) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = 2.0 * rng.uniform() - 1.0;
            return t;
        };
        switch (cfg_.kind) {
            case NetworkKind::Fnn: return fill(Tensor({t_mb, cfg_.input_width}));
            case NetworkKind::Cnn:
                return fill(Tensor({t_mb, cfg_.in_features, cfg_.in_width, cfg_.in_height}));
            case NetworkKind::Rnn:
            case NetworkKind::Lstm:
                return fill(Tensor({t_mb, cfg_.recurrent_arch.input_width,
                                    cfg_.recurrent_arch.time_steps}));
        }
        throw ConfigError("unreachable");
    }

    Tensor synth_targets(std::size_t t_mb, Rng& rng) {
        const bool recurrent =
            cfg_.kind == NetworkKind::Rnn || cfg_.kind == NetworkKind::Lstm;
        if (cfg_.loss_kind == LossKind::CrossEntropy) {
            Tensor y = recurrent ? Tensor({t_mb, cfg_.recurrent_arch.time_steps})
                                 : Tensor({t_mb});
            for (std::size_t i = 0; i < y.size(); ++i)
                y[i] = static_cast<double>(rng.below(cfg_.output_width));
            return y;
        }
        Tensor y = recurrent
                       ? Tensor({t_mb, cfg_.output_width, cfg_.recurrent_arch.time_steps})
                       : Tensor({t_mb, cfg_.output_width});
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = 2.0 * rng.uniform() - 1.0;
        return y;
    }

    RunConfig cfg_;
    std::string out_dir_;
    std::unique_ptr<Model> model_;
    OptimizerState opt_;
    LoadedDataset data_, eval_;
    std::optional<CenterStats> center_;
};

}  // namespace indexnet
