#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "indexnet/cnn_network.hpp"
#include "indexnet/dense.hpp"
#include "indexnet/errors.hpp"
#include "indexnet/optimizer.hpp"
#include "indexnet/rnn_network.hpp"

namespace indexnet {

// ---------------------------------------------------------------------------
// Flat key-value configuration with [section] headers. '#' and ';' start
// comments; whitespace around keys and values is trimmed.

using ConfigSections = std::map<std::string, std::map<std::string, std::string>>;

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline ConfigSections parse_config_text(std::istream& in) {
    ConfigSections sections;
    std::string line, current = "";
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto cut = line.find_first_of("#;");
        if (cut != std::string::npos) line = line.substr(0, cut);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": unterminated section header");
            current = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        sections[current][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return sections;
}

inline ConfigSections parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    return parse_config_text(f);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

// ---------------------------------------------------------------------------
// Typed run configuration

enum class NetworkKind { Fnn, Cnn, Rnn, Lstm };

struct RunConfig {
    // network
    NetworkKind kind = NetworkKind::Fnn;
    LossKind loss_kind = LossKind::MSE;
    // fnn
    std::size_t input_width = 0;
    std::vector<FnnLayerConfig> fnn_hidden;
    double input_dropout = 0.0;
    // cnn
    std::size_t in_features = 0, in_width = 0, in_height = 0;
    std::vector<CnnStage> cnn_stages;
    // rnn / lstm
    RecurrentArch recurrent_arch;
    LstmBackwardMode lstm_mode = LstmBackwardMode::FullGradient;
    // shared
    std::size_t output_width = 0;

    // training
    std::size_t epochs = 1;
    std::size_t batch_size = 1;
    std::uint64_t seed = 1;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 0.0;  // 0 = per-kind default
    double lr_decay_alpha0 = 0.0;
    RegularizerConfig regularizer;
    std::size_t checkpoint_every = 0;  // epochs; 0 = final only
    bool shuffle = true;

    // data
    std::string dataset;
    std::string eval_dataset;  // empty = evaluate on the training set
    std::string centering = "none";

    std::string raw_network_text;  // canonical echo stored in checkpoints
};

namespace cfgdetail {

inline std::string get(const ConfigSections& s, const std::string& sec, const std::string& key,
                       const std::string& fallback = "") {
    auto si = s.find(sec);
    if (si == s.end()) return fallback;
    auto ki = si->second.find(key);
    return ki == si->second.end() ? fallback : ki->second;
}

inline std::string require(const ConfigSections& s, const std::string& sec,
                           const std::string& key) {
    const std::string v = get(s, sec, key);
    if (v.empty()) throw ConfigError("config is missing [" + sec + "] " + key);
    return v;
}

inline double to_double(const std::string& v, const std::string& what) {
    try {
        return std::stod(v);
    } catch (const std::exception&) {
        throw ConfigError("cannot parse " + what + " value '" + v + "'");
    }
}

inline std::size_t to_count(const std::string& v, const std::string& what) {
    try {
        return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
        throw ConfigError("cannot parse " + what + " value '" + v + "'");
    }
}

inline Activation parse_activation(const std::string& name) {
    if (name == "sigmoid") return Activation::sigmoid();
    if (name == "tanh") return Activation::tanh();
    if (name == "relu") return Activation::relu();
    if (name == "lrelu" || name == "leaky_relu") return Activation::leaky_relu();
    if (name.rfind("prelu", 0) == 0) {
        const auto eq = name.find('=');
        if (eq == std::string::npos)
            throw ConfigError("parametric relu wants prelu=alpha, got '" + name + "'");
        return Activation::parametric_relu(to_double(name.substr(eq + 1), "prelu alpha"));
    }
    if (name == "elu") return Activation::elu();
    throw ConfigError("unknown activation '" + name + "'");
}

inline LossKind parse_loss(const std::string& name) {
    if (name == "mse") return LossKind::MSE;
    if (name == "crossentropy" || name == "xent") return LossKind::CrossEntropy;
    if (name == "binned") return LossKind::BinnedCrossEntropy;
    throw ConfigError("unknown loss '" + name + "'");
}

inline OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") return OptimizerKind::SGD;
    if (name == "momentum") return OptimizerKind::Momentum;
    if (name == "nesterov") return OptimizerKind::Nesterov;
    if (name == "adagrad") return OptimizerKind::Adagrad;
    if (name == "rmsprop") return OptimizerKind::RMSprop;
    if (name == "adadelta") return OptimizerKind::Adadelta;
    if (name == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer '" + name + "'");
}

/// Hidden layer spec: width[:activation][:bn][:drop=P][:skip][:stdskip]
inline FnnLayerConfig parse_fnn_layer(const std::string& spec) {
    FnnLayerConfig cfg;
    const auto parts = split(spec, ':');
    cfg.width = to_count(parts[0], "layer width");
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const std::string& p = parts[i];
        if (p == "bn")
            cfg.batchnorm = true;
        else if (p.rfind("drop=", 0) == 0)
            cfg.dropout_p = to_double(p.substr(5), "dropout");
        else if (p == "skip")
            cfg.skip_to_here = true;
        else if (p == "stdskip")
            cfg.standard_skip_here = true;
        else
            cfg.activation = parse_activation(p);
    }
    return cfg;
}

/// Stage spec: conv:F:R:S:P[:act][:bn] | pool:R:S[:avg] | resnet:Fb[:act][:bn]
/// | tfc:F[:act][:bn] | fc:F[:act][:bn]
inline CnnStage parse_cnn_stage(const std::string& spec) {
    const auto parts = split(spec, ':');
    const std::string& head = parts[0];
    auto tail_flags = [&](std::size_t from, CnnStage& st) {
        for (std::size_t i = from; i < parts.size(); ++i) {
            if (parts[i] == "bn")
                st.batchnorm = true;
            else if (parts[i] == "avg")
                st.pool_kind = PoolKind::Average;
            else
                st.activation = parse_activation(parts[i]);
        }
    };
    CnnStage st;
    if (head == "conv") {
        if (parts.size() < 5) throw ConfigError("conv stage wants conv:F:R:S:P, got '" + spec + "'");
        st = CnnStage::conv(to_count(parts[1], "features"), to_count(parts[2], "field"),
                            to_count(parts[3], "stride"), to_count(parts[4], "pad"),
                            Activation::relu(), false);
        tail_flags(5, st);
    } else if (head == "pool") {
        if (parts.size() < 3) throw ConfigError("pool stage wants pool:R:S, got '" + spec + "'");
        st = CnnStage::pool(to_count(parts[1], "field"), to_count(parts[2], "stride"));
        tail_flags(3, st);
    } else if (head == "resnet") {
        if (parts.size() < 2) throw ConfigError("resnet stage wants resnet:bottleneck");
        st = CnnStage::resnet(to_count(parts[1], "bottleneck"), Activation::relu(), false);
        tail_flags(2, st);
    } else if (head == "tfc") {
        if (parts.size() < 2) throw ConfigError("tfc stage wants tfc:F");
        st = CnnStage::towards_fc(to_count(parts[1], "features"), Activation::relu(), false);
        tail_flags(2, st);
    } else if (head == "fc") {
        if (parts.size() < 2) throw ConfigError("fc stage wants fc:F");
        st = CnnStage::fc(to_count(parts[1], "features"), Activation::relu(), false);
        tail_flags(2, st);
    } else {
        throw ConfigError("unknown CNN stage '" + head + "'");
    }
    return st;
}

}  // namespace cfgdetail

/// Canonical single-string echo of the network portion, stored in
/// checkpoints and digested for mismatch detection.
inline std::string network_spec_echo(const ConfigSections& s) {
    std::ostringstream os;
    auto it = s.find("network");
    if (it != s.end())
        for (const auto& [k, v] : it->second) os << k << "=" << v << "\n";
    return os.str();
}

inline RunConfig run_config_from_sections(const ConfigSections& s) {
    using namespace cfgdetail;
    RunConfig cfg;
    const std::string kind = require(s, "network", "kind");
    cfg.loss_kind = parse_loss(get(s, "network", "loss", "mse"));
    cfg.output_width = to_count(require(s, "network", "output_width"), "output width");
    if (kind == "fnn") {
        cfg.kind = NetworkKind::Fnn;
        cfg.input_width = to_count(require(s, "network", "input_width"), "input width");
        for (const std::string& spec : split(get(s, "network", "hidden"), ','))
            if (!spec.empty()) cfg.fnn_hidden.push_back(parse_fnn_layer(spec));
        cfg.input_dropout = to_double(get(s, "network", "input_dropout", "0"), "input dropout");
    } else if (kind == "cnn") {
        cfg.kind = NetworkKind::Cnn;
        cfg.in_features = to_count(require(s, "network", "input_features"), "input features");
        cfg.in_width = to_count(require(s, "network", "input_width"), "input width");
        cfg.in_height = to_count(require(s, "network", "input_height"), "input height");
        for (const std::string& spec : split(require(s, "network", "stages"), ','))
            if (!spec.empty()) cfg.cnn_stages.push_back(parse_cnn_stage(spec));
    } else if (kind == "rnn" || kind == "lstm") {
        cfg.kind = kind == "rnn" ? NetworkKind::Rnn : NetworkKind::Lstm;
        cfg.recurrent_arch.input_width =
            to_count(require(s, "network", "input_width"), "input width");
        for (const std::string& w : split(require(s, "network", "hidden"), ','))
            if (!w.empty()) cfg.recurrent_arch.hidden.push_back(to_count(w, "hidden width"));
        cfg.recurrent_arch.output_width = cfg.output_width;
        cfg.recurrent_arch.time_steps =
            to_count(require(s, "network", "time_steps"), "time steps");
        cfg.recurrent_arch.batchnorm = get(s, "network", "batchnorm", "false") == "true";
        const std::string mode = get(s, "network", "lstm_mode", "full");
        cfg.lstm_mode = mode == "paper" ? LstmBackwardMode::PaperFaithful
                                        : LstmBackwardMode::FullGradient;
    } else {
        throw ConfigError("unknown network kind '" + kind + "'");
    }

    cfg.epochs = to_count(get(s, "train", "epochs", "1"), "epochs");
    cfg.batch_size = to_count(get(s, "train", "batch_size", "1"), "batch size");
    cfg.seed = to_count(get(s, "train", "seed", "1"), "seed");
    cfg.optimizer = parse_optimizer(get(s, "train", "optimizer", "adam"));
    cfg.learning_rate = to_double(get(s, "train", "learning_rate", "0"), "learning rate");
    cfg.lr_decay_alpha0 = to_double(get(s, "train", "lr_decay", "0"), "lr decay");
    cfg.regularizer = RegularizerConfig(to_double(get(s, "train", "l2", "0"), "l2"),
                                        to_double(get(s, "train", "l1", "0"), "l1"),
                                        to_double(get(s, "train", "clip", "0"), "clip"));
    cfg.checkpoint_every =
        to_count(get(s, "train", "checkpoint_every", "0"), "checkpoint interval");
    cfg.shuffle = get(s, "train", "shuffle", "true") != "false";

    cfg.dataset = get(s, "data", "dataset");
    cfg.eval_dataset = get(s, "data", "eval_dataset");
    cfg.centering = get(s, "data", "centering", "none");
    cfg.raw_network_text = network_spec_echo(s);
    return cfg;
}

inline RunConfig run_config_from_file(const std::string& path) {
    return run_config_from_sections(parse_config_file(path));
}

/// Build the configured model. The seed drives weight initialization and any
/// dropout stream.
inline std::unique_ptr<Model> build_model(const RunConfig& cfg) {
    switch (cfg.kind) {
        case NetworkKind::Fnn:
            return std::make_unique<FnnNetwork>(cfg.input_width, cfg.fnn_hidden,
                                                cfg.output_width, cfg.loss_kind, cfg.seed,
                                                cfg.input_dropout);
        case NetworkKind::Cnn:
            return std::make_unique<CnnNetwork>(cfg.in_features, cfg.in_width, cfg.in_height,
                                                cfg.cnn_stages, cfg.output_width, cfg.loss_kind,
                                                cfg.seed);
        case NetworkKind::Rnn:
            return std::make_unique<RnnNetwork>(cfg.recurrent_arch, cfg.loss_kind, cfg.seed);
        case NetworkKind::Lstm:
            return std::make_unique<LstmNetwork>(cfg.recurrent_arch, cfg.loss_kind, cfg.seed,
                                                 cfg.lstm_mode);
    }
    throw ConfigError("unreachable network kind");
}

/// FNV-1a digest of the canonical network echo.
inline std::uint64_t spec_digest(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace indexnet
