#pragma once

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "indexnet/errors.hpp"
#include "indexnet/math.hpp"
#include "indexnet/tensor.hpp"

namespace indexnet {

// ---------------------------------------------------------------------------
// IDX binary format (big-endian dimension sizes, unsigned-byte payload).
// Readers are gzip-transparent: zlib's gz layer passes plain files through.

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw DataError("cannot open " + path);
    std::vector<unsigned char> bytes;
    std::array<unsigned char, 1 << 16> buf;
    int n;
    while ((n = gzread(f, buf.data(), buf.size())) > 0)
        bytes.insert(bytes.end(), buf.data(), buf.data() + n);
    const bool bad = n < 0;
    gzclose(f);
    if (bad) throw DataError("read error in " + path);
    return bytes;
}

}  // namespace detail

/// Read an IDX tensor of unsigned bytes, scaled to [0,1] by /255.
inline Tensor read_idx(const std::string& path) {
    const std::vector<unsigned char> b = detail::read_file_bytes(path);
    if (b.size() < 4)
        throw DataError(path + ": truncated IDX header (" + std::to_string(b.size()) +
                        " bytes at offset 0)");
    if (b[0] != 0x00 || b[1] != 0x00)
        throw DataError(path + ": bad IDX magic at byte offset 0");
    if (b[2] != 0x08)
        throw DataError(path + ": unsupported IDX type byte 0x" + std::to_string(b[2]) +
                        " at offset 2 (only unsigned byte data is supported)");
    const std::size_t ndim = b[3];
    const std::size_t header = 4 + 4 * ndim;
    if (b.size() < header)
        throw DataError(path + ": truncated IDX dimensions, expected " +
                        std::to_string(header) + " header bytes, got " +
                        std::to_string(b.size()));
    std::vector<std::size_t> shape(ndim);
    std::size_t count = ndim == 0 ? 0 : 1;
    for (std::size_t d = 0; d < ndim; ++d) {
        const std::size_t off = 4 + 4 * d;
        shape[d] = (std::size_t(b[off]) << 24) | (std::size_t(b[off + 1]) << 16) |
                   (std::size_t(b[off + 2]) << 8) | std::size_t(b[off + 3]);
        count *= shape[d];
    }
    if (b.size() != header + count)
        throw DataError(path + ": payload length mismatch, expected " +
                        std::to_string(header + count) + " bytes, got " +
                        std::to_string(b.size()) + " (offset " + std::to_string(header) + ")");
    Tensor t(shape);
    for (std::size_t i = 0; i < count; ++i) t[i] = static_cast<double>(b[header + i]) / 255.0;
    return t;
}

/// Write an IDX file of unsigned bytes from values in [0,1] (scaled by 255,
/// rounded). Round-trips bit-exactly with read_idx for byte-grid values.
inline void write_idx(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    const unsigned char magic[4] = {0x00, 0x00, 0x08,
                                    static_cast<unsigned char>(t.rank())};
    out.write(reinterpret_cast<const char*>(magic), 4);
    for (std::size_t d = 0; d < t.rank(); ++d) {
        const std::uint32_t v = static_cast<std::uint32_t>(t.dim(d));
        const unsigned char be[4] = {static_cast<unsigned char>(v >> 24),
                                     static_cast<unsigned char>(v >> 16),
                                     static_cast<unsigned char>(v >> 8),
                                     static_cast<unsigned char>(v)};
        out.write(reinterpret_cast<const char*>(be), 4);
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double clamped = std::min(1.0, std::max(0.0, t[i]));
        const unsigned char b = static_cast<unsigned char>(std::lround(clamped * 255.0));
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
}

// ---------------------------------------------------------------------------
// Delimited numeric text: one sample per line, comma separated, the last
// `target_columns` columns are the target.

struct DelimitedData {
    Tensor inputs;   // [T, F]
    Tensor targets;  // [T, target_columns]
};

inline DelimitedData read_delimited(const std::string& path, std::size_t target_columns) {
    const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
    std::vector<std::vector<double>> rows;
    std::vector<double> row;
    std::string cell;
    auto flush_cell = [&]() {
        if (cell.empty()) return;
        try {
            row.push_back(std::stod(cell));
        } catch (const std::exception&) {
            throw DataError(path + ": cannot parse numeric cell '" + cell + "'");
        }
        cell.clear();
    };
    for (unsigned char c : bytes) {
        if (c == ',') {
            flush_cell();
        } else if (c == '\n' || c == '\r') {
            flush_cell();
            if (!row.empty()) rows.push_back(std::move(row));
            row.clear();
        } else if (!std::isspace(c)) {
            cell.push_back(static_cast<char>(c));
        }
    }
    flush_cell();
    if (!row.empty()) rows.push_back(std::move(row));
    if (rows.empty()) throw DataError(path + ": empty dataset");
    const std::size_t width = rows[0].size();
    if (width <= target_columns)
        throw DataError(path + ": rows have " + std::to_string(width) +
                        " columns, cannot split off " + std::to_string(target_columns) +
                        " target columns");
    DelimitedData d{Tensor({rows.size(), width - target_columns}),
                    Tensor({rows.size(), target_columns})};
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != width)
            throw DataError(path + ": ragged row " + std::to_string(r));
        for (std::size_t c = 0; c < width - target_columns; ++c) d.inputs(r, c) = rows[r][c];
        for (std::size_t c = 0; c < target_columns; ++c)
            d.targets(r, c) = rows[r][width - target_columns + c];
    }
    return d;
}

// ---------------------------------------------------------------------------
// Input centering. Statistics come from the training split only and are
// reapplied unchanged to validation/test data.

enum class CenterMode { PerFeature, PerPixel, PerChannel };

struct CenterStats {
    CenterMode mode = CenterMode::PerFeature;
    Tensor mean;  // [F] for PerFeature/PerChannel, [F,N,T] for PerPixel
};

inline CenterStats compute_center_stats(const Tensor& train_inputs, CenterMode mode) {
    if (train_inputs.size() == 0) throw DataError("centering: empty dataset");
    const std::size_t n = train_inputs.dim(0);
    CenterStats st;
    st.mode = mode;
    switch (mode) {
        case CenterMode::PerFeature: {
            if (train_inputs.rank() != 2)
                throw DimensionError("PerFeature centering expects [T,F] inputs, got " +
                                     train_inputs.shape_str());
            const std::size_t F = train_inputs.dim(1);
            st.mean = Tensor({F});
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t f = 0; f < F; ++f) st.mean(f) += train_inputs(t, f);
            st.mean *= 1.0 / static_cast<double>(n);
            break;
        }
        case CenterMode::PerPixel: {
            if (train_inputs.rank() != 4)
                throw DimensionError("PerPixel centering expects [T,F,N,T0] inputs");
            st.mean = Tensor({train_inputs.dim(1), train_inputs.dim(2), train_inputs.dim(3)});
            const std::size_t per = st.mean.size();
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t i = 0; i < per; ++i) st.mean[i] += train_inputs[t * per + i];
            st.mean *= 1.0 / static_cast<double>(n);
            break;
        }
        case CenterMode::PerChannel: {
            if (train_inputs.rank() != 4)
                throw DimensionError("PerChannel centering expects [T,F,N,T0] inputs");
            const std::size_t F = train_inputs.dim(1);
            const std::size_t spatial = train_inputs.dim(2) * train_inputs.dim(3);
            st.mean = Tensor({F});
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t f = 0; f < F; ++f)
                    for (std::size_t s = 0; s < spatial; ++s)
                        st.mean(f) += train_inputs[(t * F + f) * spatial + s];
            st.mean *= 1.0 / static_cast<double>(n * spatial);
            break;
        }
    }
    return st;
}

inline Tensor apply_centering(const Tensor& inputs, const CenterStats& st) {
    Tensor out = inputs;
    const std::size_t n = inputs.dim(0);
    switch (st.mode) {
        case CenterMode::PerFeature: {
            const std::size_t F = inputs.dim(1);
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t f = 0; f < F; ++f) out(t, f) -= st.mean(f);
            break;
        }
        case CenterMode::PerPixel: {
            const std::size_t per = st.mean.size();
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t i = 0; i < per; ++i) out[t * per + i] -= st.mean[i];
            break;
        }
        case CenterMode::PerChannel: {
            const std::size_t F = inputs.dim(1);
            const std::size_t spatial = inputs.dim(2) * inputs.dim(3);
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t f = 0; f < F; ++f)
                    for (std::size_t s = 0; s < spatial; ++s)
                        out[(t * F + f) * spatial + s] -= st.mean(f);
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Target encoding

/// One-hot rows from class indices.
inline Tensor one_hot(const Tensor& class_indices, std::size_t classes) {
    Tensor out({class_indices.size(), classes});
    for (std::size_t t = 0; t < class_indices.size(); ++t) {
        const auto c = static_cast<std::size_t>(class_indices[t]);
        if (c >= classes)
            throw DataError("one_hot: class index " + std::to_string(c) + " out of range " +
                            std::to_string(classes));
        out(t, c) = 1.0;
    }
    return out;
}

/// Bin index floor(C*(v-lo)/(hi-lo)) clamped to [0, C-1]; values at or past
/// the edges land in the boundary bins.
inline std::size_t bin_index(double v, std::size_t bins, double lo, double hi) {
    if (bins < 2) throw ConfigError("value binning needs at least 2 bins");
    if (!(hi > lo)) throw ConfigError("value binning needs hi > lo");
    const double scaled = static_cast<double>(bins) * (v - lo) / (hi - lo);
    const auto idx = static_cast<long>(std::floor(scaled));
    if (idx < 0) return 0;
    if (idx >= static_cast<long>(bins)) return bins - 1;
    return static_cast<std::size_t>(idx);
}

inline Tensor encode_bins(const Tensor& values, std::size_t bins, double lo, double hi) {
    Tensor out(values.shape());
    for (std::size_t i = 0; i < values.size(); ++i)
        out[i] = static_cast<double>(bin_index(values[i], bins, lo, hi));
    return out;
}

// ---------------------------------------------------------------------------
// Mini-batch sampling: one deterministic permutation per epoch, every index
// visited exactly once; the short final batch is kept or dropped per config.

class BatchSampler {
  public:
    BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
                 bool shuffle = true, bool keep_short = true)
        : n_(dataset_size),
          t_mb_(batch_size),
          seed_(seed),
          shuffle_(shuffle),
          keep_short_(keep_short) {
        if (n_ == 0) throw DataError("sampler: empty dataset");
        if (t_mb_ == 0 || t_mb_ > n_)
            throw ConfigError("mini-batch size must lie in [1, dataset size]");
        start_epoch();
    }

    std::size_t batch_size() const { return t_mb_; }
    std::size_t epoch() const { return epoch_; }

    /// Indices of the next mini-batch; rolls into the next epoch when the
    /// current permutation is exhausted.
    std::vector<std::size_t> next_batch() {
        if (cursor_ >= usable_) {
            ++epoch_;
            start_epoch();
        }
        const std::size_t take = std::min(t_mb_, usable_ - cursor_);
        std::vector<std::size_t> out(perm_.begin() + cursor_, perm_.begin() + cursor_ + take);
        cursor_ += take;
        return out;
    }

    bool epoch_finished() const { return cursor_ >= usable_; }
    std::size_t batches_per_epoch() const { return (usable_ + t_mb_ - 1) / t_mb_; }

    void restore_epoch(std::size_t epoch) {
        epoch_ = epoch;
        start_epoch();
    }

  private:
    void start_epoch() {
        perm_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
        if (shuffle_) {
            Rng rng(seed_ ^ (0x9e3779b97f4a7c15ull * (epoch_ + 1)));
            for (std::size_t i = n_; i-- > 1;) {
                const std::size_t j = rng.below(i + 1);
                std::swap(perm_[i], perm_[j]);
            }
        }
        usable_ = keep_short_ ? n_ : (n_ / t_mb_) * t_mb_;
        cursor_ = 0;
    }

    std::size_t n_, t_mb_;
    std::uint64_t seed_;
    bool shuffle_, keep_short_;
    std::size_t epoch_ = 0, cursor_ = 0, usable_ = 0;
    std::vector<std::size_t> perm_;
};

/// Gather rows of a [T, ...] tensor into a batch.
inline Tensor gather_rows(const Tensor& data, const std::vector<std::size_t>& indices) {
    std::vector<std::size_t> shape = data.shape();
    const std::size_t per = data.size() / shape[0];
    shape[0] = indices.size();
    Tensor out(shape);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const double* src = data.data() + indices[r] * per;
        std::copy(src, src + per, out.data() + r * per);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Built-in synthetic datasets, used by the example configs and smoke tests.

struct LabeledImages {
    Tensor images;   // [T, F, N, T0]
    Tensor labels;   // [T] class indices
    std::size_t classes = 0;
};

/// The XOR toy task: four samples, two binary inputs, two classes.
inline DelimitedData synthetic_xor() {
    DelimitedData d{Tensor({4, 2}), Tensor({4, 1})};
    const double rows[4][3] = {{0, 0, 0}, {0, 1, 1}, {1, 0, 1}, {1, 1, 0}};
    for (std::size_t r = 0; r < 4; ++r) {
        d.inputs(r, 0) = rows[r][0];
        d.inputs(r, 1) = rows[r][1];
        d.targets(r, 0) = rows[r][2];
    }
    return d;
}

/// Ten 8x8 digit-like glyphs jittered by one-pixel shifts and uniform pixel
/// noise; a stand-in for a handwritten-digit subset at desk scale.
inline LabeledImages synthetic_digits(std::size_t count, std::uint64_t seed,
                                      double noise = 0.15) {
    static const char* glyphs[10] = {
        ".####..."
        "#....#.."
        "#...##.."
        "#..#.#.."
        "##...#.."
        "#....#.."
        ".####..."
        "........",
        "...#...."
        "..##...."
        ".#.#...."
        "...#...."
        "...#...."
        "...#...."
        ".#####.."
        "........",
        ".####..."
        "#....#.."
        ".....#.."
        "...##..."
        "..#....."
        ".#......"
        "######.."
        "........",
        ".####..."
        "#....#.."
        ".....#.."
        "..###..."
        ".....#.."
        "#....#.."
        ".####..."
        "........",
        "....##.."
        "...#.#.."
        "..#..#.."
        ".#...#.."
        "######.."
        ".....#.."
        ".....#.."
        "........",
        "######.."
        "#......."
        "#####..."
        ".....#.."
        ".....#.."
        "#....#.."
        ".####..."
        "........",
        ".####..."
        "#......."
        "#......."
        "#####..."
        "#....#.."
        "#....#.."
        ".####..."
        "........",
        "######.."
        ".....#.."
        "....#..."
        "...#...."
        "..#....."
        "..#....."
        "..#....."
        "........",
        ".####..."
        "#....#.."
        "#....#.."
        ".####..."
        "#....#.."
        "#....#.."
        ".####..."
        "........",
        ".####..."
        "#....#.."
        "#....#.."
        ".#####.."
        ".....#.."
        ".....#.."
        ".####..."
        "........"};
    LabeledImages d;
    d.images = Tensor({count, 1, 8, 8});
    d.labels = Tensor({count});
    d.classes = 10;
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t digit = rng.below(10);
        d.labels(i) = static_cast<double>(digit);
        const int dx = static_cast<int>(rng.below(3)) - 1;
        const int dy = static_cast<int>(rng.below(3)) - 1;
        for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) {
                const int sr = r - dx, sc = c - dy;
                double v = 0.0;
                if (sr >= 0 && sr < 8 && sc >= 0 && sc < 8)
                    v = glyphs[digit][sr * 8 + sc] == '#' ? 1.0 : 0.0;
                v += noise * (rng.uniform() - 0.5);
                d.images(i, 0, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
                    std::min(1.0, std::max(0.0, v));
            }
    }
    return d;
}

struct SequenceData {
    Tensor inputs;   // [T, F, time]
    Tensor targets;  // regression: [T, F, time]; classification: [T, time]
};

/// Sine next-step prediction: inputs x(tau), targets x(tau+1), random phase
/// per sequence.
inline SequenceData synthetic_sine(std::size_t count, std::size_t time_steps,
                                   std::uint64_t seed) {
    SequenceData d{Tensor({count, 1, time_steps}), Tensor({count, 1, time_steps})};
    Rng rng(seed);
    const double omega = 2.0 * 3.14159265358979323846 / 16.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double phase = 2.0 * 3.14159265358979323846 * rng.uniform();
        for (std::size_t tau = 0; tau < time_steps; ++tau) {
            d.inputs(i, 0, tau) = 0.8 * std::sin(omega * static_cast<double>(tau) + phase);
            d.targets(i, 0, tau) =
                0.8 * std::sin(omega * static_cast<double>(tau + 1) + phase);
        }
    }
    return d;
}

/// Looping character sequences over a tiny alphabet: the target at each step
/// is the next character's class.
inline SequenceData synthetic_charloop(std::size_t count, std::size_t time_steps,
                                       std::size_t alphabet, std::uint64_t seed) {
    SequenceData d{Tensor({count, alphabet, time_steps}), Tensor({count, time_steps})};
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t start = rng.below(alphabet);
        for (std::size_t tau = 0; tau < time_steps; ++tau) {
            const std::size_t ch = (start + tau) % alphabet;
            d.inputs(i, ch, tau) = 1.0;
            d.targets(i, tau) = static_cast<double>((ch + 1) % alphabet);
        }
    }
    return d;
}

}  // namespace indexnet
