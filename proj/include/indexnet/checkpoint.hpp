#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "indexnet/batchnorm.hpp"
#include "indexnet/config.hpp"
#include "indexnet/errors.hpp"
#include "indexnet/model.hpp"
#include "indexnet/optimizer.hpp"

namespace indexnet {

// ---------------------------------------------------------------------------
// Checkpoint container: a text header (format version, spec digest and echo,
// counters, tensor manifest with shapes and offsets) followed by the tensor
// payloads as little-endian 64-bit floats. Identical state produces
// byte-identical files on any platform.

namespace ckptdetail {

inline void write_f64_le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw DataError("checkpoint payload truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::uint64_t double_bits(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    return bits;
}

inline double bits_double(std::uint64_t bits) {
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace ckptdetail

struct CheckpointMeta {
    std::size_t epoch = 0;
    double eta = 0.0;
    std::size_t optimizer_steps = 0;
    std::uint64_t digest = 0;
    std::string spec_echo;
};

/// Write the full training state: parameters, BN running statistics and
/// counters, optimizer accumulators, RNG streams, epoch and learning rate.
inline void save_checkpoint(const std::string& path, const std::string& spec_echo, Model& model,
                            const OptimizerState* opt, double eta, std::size_t epoch) {
    std::ostringstream header;
    std::vector<const Tensor*> payload;

    header << "indexnet-checkpoint v1\n";
    header << "digest " << std::hex << spec_digest(spec_echo) << std::dec << "\n";
    const auto spec_lines = split(spec_echo, '\n');
    std::size_t n_lines = 0;
    for (const auto& l : spec_lines)
        if (!l.empty()) ++n_lines;
    header << "spec-lines " << n_lines << "\n";
    for (const auto& l : spec_lines)
        if (!l.empty()) header << "spec " << l << "\n";
    header << "epoch " << epoch << "\n";
    header << "eta-bits " << std::hex << ckptdetail::double_bits(eta) << std::dec << "\n";

    for (auto [name, rng] : model.rng_states())
        header << "rng " << name << " " << rng->state() << " " << (rng->has_spare() ? 1 : 0)
               << " " << std::hex << ckptdetail::double_bits(rng->spare()) << std::dec << "\n";

    auto bn = model.bn_states();
    for (auto& [name, st] : bn)
        header << "bn " << name << " " << st->epoch_counter() << " " << st->last_batch_size()
               << "\n";

    std::ostringstream manifest;
    std::size_t tensor_count = 0;
    auto add_tensor = [&](const std::string& name, const Tensor& t) {
        manifest << "tensor " << name << " " << t.rank();
        for (std::size_t d = 0; d < t.rank(); ++d) manifest << " " << t.dim(d);
        manifest << " " << t.size() << "\n";
        payload.push_back(&t);
        ++tensor_count;
    };
    for (const ParamRef& p : model.params()) add_tensor("param." + p.name, *p.value);
    for (auto& [name, st] : bn) {
        add_tensor("bnmean." + name, st->running_mean());
        add_tensor("bnvar." + name, st->running_var());
    }
    std::size_t opt_steps = 0;
    if (opt) {
        opt_steps = opt->step_count();
        auto& v = const_cast<OptimizerState*>(opt)->v();
        auto& m = const_cast<OptimizerState*>(opt)->m();
        for (std::size_t g = 0; g < v.size(); ++g) {
            add_tensor("opt.v" + std::to_string(g), v[g]);
            add_tensor("opt.m" + std::to_string(g), m[g]);
        }
    }
    header << "opt-steps " << opt_steps << "\n";
    header << "tensors " << tensor_count << "\n" << manifest.str() << "end-header\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint path " + path + " for writing");
    out << header.str();
    for (const Tensor* t : payload)
        for (std::size_t i = 0; i < t->size(); ++i) ckptdetail::write_f64_le(out, (*t)[i]);
    if (!out) throw DataError("failed writing checkpoint " + path);
}

/// Header-only read, for `inspect` and for rebuilding the network before a
/// full load.
inline CheckpointMeta read_checkpoint_meta(const std::string& path,
                                           std::vector<std::string>* manifest = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::string line;
    if (!std::getline(in, line) || line != "indexnet-checkpoint v1")
        throw DataError(path + ": not an indexnet checkpoint (version line mismatch)");
    CheckpointMeta meta;
    while (std::getline(in, line) && line != "end-header") {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "digest") {
            ls >> std::hex >> meta.digest >> std::dec;
        } else if (key == "spec") {
            meta.spec_echo += trim(line.substr(5)) + "\n";
        } else if (key == "epoch") {
            ls >> meta.epoch;
        } else if (key == "eta-bits") {
            std::uint64_t bits;
            ls >> std::hex >> bits >> std::dec;
            meta.eta = ckptdetail::bits_double(bits);
        } else if (key == "opt-steps") {
            ls >> meta.optimizer_steps;
        } else if (key == "tensor" && manifest) {
            manifest->push_back(line.substr(7));
        }
    }
    if (line != "end-header") throw DataError(path + ": truncated checkpoint header");
    if (spec_digest(meta.spec_echo) != meta.digest)
        throw DataError(path + ": spec digest mismatch, refusing to load");
    return meta;
}

/// Full restore into a freshly built model (and optimizer, when given). The
/// entire file is validated against the model's parameter manifest before
/// any tensor is touched; a mismatch loads nothing.
inline CheckpointMeta load_checkpoint(const std::string& path, const std::string& expect_echo,
                                      Model& model, OptimizerState* opt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::string line;
    std::getline(in, line);
    if (line != "indexnet-checkpoint v1")
        throw DataError(path + ": unsupported checkpoint version");

    CheckpointMeta meta;
    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t count = 0;
    };
    std::vector<Entry> entries;
    struct RngLine {
        std::string name;
        std::uint64_t state;
        bool has_spare;
        std::uint64_t spare_bits;
    };
    std::vector<RngLine> rng_lines;
    struct BnLine {
        std::string name;
        std::size_t counter, batch;
    };
    std::vector<BnLine> bn_lines;

    while (std::getline(in, line) && line != "end-header") {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "digest")
            ls >> std::hex >> meta.digest >> std::dec;
        else if (key == "spec")
            meta.spec_echo += trim(line.substr(5)) + "\n";
        else if (key == "epoch")
            ls >> meta.epoch;
        else if (key == "eta-bits") {
            std::uint64_t bits;
            ls >> std::hex >> bits >> std::dec;
            meta.eta = ckptdetail::bits_double(bits);
        } else if (key == "opt-steps")
            ls >> meta.optimizer_steps;
        else if (key == "rng") {
            RngLine r;
            int hs;
            ls >> r.name >> r.state >> hs >> std::hex >> r.spare_bits >> std::dec;
            r.has_spare = hs != 0;
            rng_lines.push_back(r);
        } else if (key == "bn") {
            BnLine b;
            ls >> b.name >> b.counter >> b.batch;
            bn_lines.push_back(b);
        } else if (key == "tensor") {
            Entry e;
            std::size_t rank;
            ls >> e.name >> rank;
            e.shape.resize(rank);
            for (std::size_t d = 0; d < rank; ++d) ls >> e.shape[d];
            ls >> e.count;
            entries.push_back(std::move(e));
        }
    }
    if (line != "end-header") throw DataError(path + ": truncated checkpoint header");
    if (spec_digest(meta.spec_echo) != meta.digest)
        throw DataError(path + ": spec digest mismatch, refusing to load");
    if (!expect_echo.empty() && meta.spec_echo != expect_echo)
        throw DataError(path + ": checkpoint was written for a different network spec");

    // read every payload tensor up front; nothing is committed on error
    std::vector<std::vector<double>> values(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        values[i].resize(entries[i].count);
        for (std::size_t j = 0; j < entries[i].count; ++j)
            values[i][j] = ckptdetail::read_f64_le(in);
    }

    auto find_entry = [&](const std::string& name) -> std::size_t {
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name) return i;
        throw DataError(path + ": checkpoint lacks tensor '" + name + "'");
    };
    auto restore_into = [&](const std::string& name, Tensor& dst) {
        const std::size_t i = find_entry(name);
        if (entries[i].shape != dst.shape())
            throw DataError(path + ": tensor '" + name + "' has shape mismatch");
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = values[i][j];
    };

    // validate the complete manifest before committing anything
    auto params = model.params();
    auto bn = model.bn_states();
    for (const ParamRef& p : params) {
        const std::size_t i = find_entry("param." + p.name);
        if (entries[i].shape != p.value->shape())
            throw DataError(path + ": parameter '" + p.name + "' shape mismatch");
    }
    for (auto& [name, st] : bn) {
        find_entry("bnmean." + name);
        find_entry("bnvar." + name);
    }

    for (const ParamRef& p : params) restore_into("param." + p.name, *p.value);
    for (auto& [name, st] : bn) {
        restore_into("bnmean." + name, st->running_mean());
        restore_into("bnvar." + name, st->running_var());
        bool found = false;
        for (const BnLine& b : bn_lines)
            if (b.name == name) {
                st->restore_counters(b.counter, b.batch);
                found = true;
            }
        if (!found) throw DataError(path + ": missing bn counters for '" + name + "'");
    }
    for (auto [name, rng] : model.rng_states())
        for (const RngLine& r : rng_lines)
            if (r.name == name)
                rng->restore(r.state, r.has_spare, ckptdetail::bits_double(r.spare_bits));
    if (opt) {
        opt->restore_step_count(meta.optimizer_steps);
        opt->v().clear();
        opt->m().clear();
        for (std::size_t g = 0;; ++g) {
            const std::string vn = "opt.v" + std::to_string(g);
            bool present = false;
            for (const Entry& e : entries)
                if (e.name == vn) present = true;
            if (!present) break;
            const std::size_t vi = find_entry(vn);
            const std::size_t mi = find_entry("opt.m" + std::to_string(g));
            opt->v().emplace_back(entries[vi].shape, values[vi]);
            opt->m().emplace_back(entries[mi].shape, values[mi]);
        }
    }
    return meta;
}

}  // namespace indexnet
