#pragma once

// Versioned checkpoint container.
//
// Layout (all integers and floats little-endian):
//   magic      8 bytes  "PNEMBCKP"
//   version    u32
//   n_meta     u32, then n_meta x (u32 len, key bytes, u32 len, value bytes)
//   n_tensors  u32, then n_tensors x (u32 len, name bytes, u8 trainable,
//                                     u32 rank, rank x u64 dims)
//   payload    float64 values of each tensor, in manifest order

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pnemb/errors.hpp"
#include "pnemb/tensor.hpp"

namespace pnemb {

namespace bin {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_str(std::string& out, std::string_view s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

/// Bounds-checked little-endian cursor; errors carry the byte offset.
class Reader {
public:
    Reader(std::string_view buf, std::string what) : buf_(buf), what_(std::move(what)) {}

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == buf_.size(); }

    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) {
            throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + " (needed " +
                              std::to_string(n) + " more bytes)");
        }
    }

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(buf_[pos_ + i])} << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(buf_[pos_ + i])} << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }

    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(buf_.substr(pos_, n));
        pos_ += n;
        return s;
    }

    std::string_view raw(std::size_t n) {
        need(n);
        auto s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(pos_));
    }

private:
    std::string_view buf_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + path);
}

} // namespace bin

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

struct Checkpoint {
    static constexpr std::string_view kMagic = "PNEMBCKP";
    static constexpr std::uint32_t kVersion = 1;

    std::map<std::string, std::string> metadata;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(std::string_view name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }

    std::string encode() const {
        std::string out(kMagic);
        bin::put_u32(out, kVersion);
        bin::put_u32(out, static_cast<std::uint32_t>(metadata.size()));
        for (const auto& [k, v] : metadata) {
            bin::put_str(out, k);
            bin::put_str(out, v);
        }
        bin::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& t : tensors) {
            bin::put_str(out, t.name);
            bin::put_u8(out, t.trainable ? 1 : 0);
            bin::put_u32(out, static_cast<std::uint32_t>(t.tensor.rank()));
            for (std::size_t d : t.tensor.shape()) bin::put_u64(out, d);
        }
        for (const auto& t : tensors) {
            for (double v : t.tensor.data()) bin::put_f64(out, v);
        }
        return out;
    }

    static Checkpoint decode(std::string_view bytes) {
        bin::Reader r(bytes, "checkpoint");
        if (r.raw(kMagic.size()) != kMagic) throw FormatError("checkpoint: bad magic bytes");
        const std::uint32_t version = r.u32();
        if (version != kVersion) r.fail("unsupported format version " + std::to_string(version));
        Checkpoint ck;
        const std::uint32_t n_meta = r.u32();
        for (std::uint32_t i = 0; i < n_meta; ++i) {
            std::string k = r.str();
            ck.metadata[k] = r.str();
        }
        const std::uint32_t n = r.u32();
        std::vector<std::pair<Shape, std::pair<std::string, bool>>> manifest;
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = r.str();
            const bool trainable = r.u8() != 0;
            const std::uint32_t rank = r.u32();
            if (rank == 0 || rank > 8) r.fail("implausible rank " + std::to_string(rank));
            Shape shape(rank);
            for (auto& d : shape) {
                d = r.u64();
                if (d == 0 || d > (std::uint64_t{1} << 32)) r.fail("implausible dimension");
            }
            manifest.push_back({std::move(shape), {std::move(name), trainable}});
        }
        for (auto& [shape, meta] : manifest) {
            const std::size_t count = shape_numel(shape);
            r.need(count * 8);
            std::vector<double> values(count);
            for (auto& v : values) v = r.f64();
            ck.tensors.push_back({meta.first, Tensor(shape, std::move(values)), meta.second});
        }
        if (!r.at_end()) r.fail("trailing bytes");
        return ck;
    }

    void save(const std::string& path) const { bin::write_file(path, encode()); }
    static Checkpoint load(const std::string& path) { return decode(bin::read_file(path)); }
};

/// Named, ordered parameter and buffer registry. Layers keep Tensor handles
/// that alias the registered storage, so loading overwrites in place.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor t, bool trainable = true) {
        for (const auto& e : entries_) {
            if (e.name == name) throw InvalidInput("duplicate parameter name " + name);
        }
        t.set_requires_grad(trainable);
        entries_.push_back({name, t, trainable});
        return t;
    }

    const std::vector<NamedTensor>& entries() const { return entries_; }

    Tensor get(std::string_view name) const {
        for (const auto& e : entries_) {
            if (e.name == name) return e.tensor;
        }
        throw InvalidInput("no parameter named " + std::string(name));
    }

    bool contains(std::string_view name) const {
        return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
    }

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (const auto& e : entries_) {
            if (e.trainable) out.push_back(e.tensor);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) {
            if (e.trainable) n += e.tensor.numel();
        }
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    /// One "name shape" line per entry, e.g. "seg.l1.w [68, 64]".
    std::vector<std::string> manifest() const {
        std::vector<std::string> lines;
        for (const auto& e : entries_) lines.push_back(e.name + " " + shape_str(e.tensor.shape()));
        return lines;
    }

    void write_to(Checkpoint& ck) const {
        for (const auto& e : entries_) ck.tensors.push_back({e.name, e.tensor.clone(), e.trainable});
    }

    /// Copies values from a checkpoint; the manifests must agree exactly.
    /// Entries whose name contains '/' (optimizer and trainer state) are not
    /// parameters and are skipped.
    void read_from(const Checkpoint& ck) {
        std::vector<std::string> theirs;
        for (const auto& t : ck.tensors) {
            if (t.name.find('/') == std::string::npos) theirs.push_back(t.name + " " + shape_str(t.tensor.shape()));
        }
        const auto ours = manifest();
        if (theirs != ours) throw CheckpointMismatch("parameter manifest differs:\n" + manifest_diff(ours, theirs));
        for (auto& e : entries_) {
            const auto* src = ck.find(e.name);
            std::copy(src->tensor.data().begin(), src->tensor.data().end(), e.tensor.mutable_data().begin());
        }
    }

    static std::string manifest_diff(const std::vector<std::string>& expected, const std::vector<std::string>& actual) {
        std::ostringstream os;
        for (const auto& l : expected) {
            if (std::find(actual.begin(), actual.end(), l) == actual.end()) os << "  - " << l << '\n';
        }
        for (const auto& l : actual) {
            if (std::find(expected.begin(), expected.end(), l) == expected.end()) os << "  + " << l << '\n';
        }
        return os.str();
    }

private:
    std::vector<NamedTensor> entries_;
};

} // namespace pnemb
