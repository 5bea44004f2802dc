// Binary checkpoint format: magic string, format version, config digest,
// then length-prefixed named tensors with 32-bit IEEE-754 little-endian
// values.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dualsynth/common.hpp"
#include "dualsynth/nn.hpp"
#include "dualsynth/tensor.hpp"

namespace dualsynth {

inline constexpr char kCheckpointMagic[6] = {'D', 'S', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

// In-memory checkpoint: a named bundle of float tensors plus training
// position (epoch, seed) and a digest of the configuration that produced it.
struct Checkpoint {
    uint32_t version = kCheckpointVersion;
    uint64_t config_digest = 0;
    uint64_t seed = 0;
    int32_t epoch = 0;
    std::vector<std::string> names;
    std::vector<std::vector<int>> shapes;
    std::vector<std::vector<float>> values;

    void add(std::string name, std::vector<int> shape, std::vector<float> data) {
        int64_t n = 1;
        for (int d : shape) n *= d;
        if (n != int64_t(data.size()))
            throw ContractError("checkpoint: tensor '" + name + "' shape " + shape_str(shape) +
                                " does not match " + std::to_string(data.size()) + " values");
        names.push_back(std::move(name));
        shapes.push_back(std::move(shape));
        values.push_back(std::move(data));
    }

    int index_of(const std::string& name) const {
        for (size_t i = 0; i < names.size(); i++)
            if (names[i] == name) return int(i);
        return -1;
    }
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, uint32_t v) {
    for (int k = 0; k < 4; k++) out.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xff));
}
inline void put_u64(std::vector<unsigned char>& out, uint64_t v) {
    for (int k = 0; k < 8; k++) out.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xff));
}
inline void put_i32(std::vector<unsigned char>& out, int32_t v) {
    put_u32(out, static_cast<uint32_t>(v));
}

struct ByteReader {
    const std::vector<unsigned char>& buf;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > buf.size())
            throw FormatError("checkpoint: unexpected end of file at byte " + std::to_string(pos) +
                              " (need " + std::to_string(n) + " more of " +
                              std::to_string(buf.size()) + ")");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int k = 0; k < 4; k++) v |= uint32_t(buf[pos + size_t(k)]) << (8 * k);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int k = 0; k < 8; k++) v |= uint64_t(buf[pos + size_t(k)]) << (8 * k);
        pos += 8;
        return v;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    float f32() {
        uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
    std::vector<unsigned char> out;
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 6);
    detail::put_u32(out, c.version);
    detail::put_u64(out, c.config_digest);
    detail::put_u64(out, c.seed);
    detail::put_i32(out, c.epoch);
    detail::put_u32(out, static_cast<uint32_t>(c.names.size()));
    for (size_t i = 0; i < c.names.size(); i++) {
        detail::put_u32(out, static_cast<uint32_t>(c.names[i].size()));
        out.insert(out.end(), c.names[i].begin(), c.names[i].end());
        detail::put_u32(out, static_cast<uint32_t>(c.shapes[i].size()));
        for (int d : c.shapes[i]) detail::put_i32(out, d);
        detail::put_u64(out, static_cast<uint64_t>(c.values[i].size()));
        for (float f : c.values[i]) {
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            detail::put_u32(out, bits);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("save_checkpoint: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    if (!f) throw FormatError("save_checkpoint: write failed for '" + path + "'");
}

// Loads and validates a checkpoint. When expected_digest is non-zero the
// stored config digest must match, otherwise the file is refused.
inline Checkpoint load_checkpoint(const std::string& path, uint64_t expected_digest = 0) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw FormatError("load_checkpoint: cannot open '" + path + "'");
    const std::streamsize bytes = f.tellg();
    f.seekg(0);
    std::vector<unsigned char> buf(static_cast<size_t>(bytes), 0);
    f.read(reinterpret_cast<char*>(buf.data()), bytes);
    if (!f) throw FormatError("load_checkpoint: short read on '" + path + "'");

    detail::ByteReader r{buf};
    const std::string magic = r.str(6);
    if (std::memcmp(magic.data(), kCheckpointMagic, 6) != 0)
        throw FormatError("load_checkpoint: '" + path + "' is not a checkpoint file");
    Checkpoint c;
    c.version = r.u32();
    if (c.version != kCheckpointVersion)
        throw FormatError("load_checkpoint: format version " + std::to_string(c.version) +
                          ", expected " + std::to_string(kCheckpointVersion));
    c.config_digest = r.u64();
    if (expected_digest != 0 && c.config_digest != expected_digest)
        throw FormatError("load_checkpoint: config digest " + std::to_string(c.config_digest) +
                          " does not match expected " + std::to_string(expected_digest) +
                          "; refusing to load");
    c.seed = r.u64();
    c.epoch = r.i32();
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; i++) {
        const uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        const uint32_t ndim = r.u32();
        std::vector<int> shape;
        int64_t prod = 1;
        for (uint32_t k = 0; k < ndim; k++) {
            int d = r.i32();
            if (d < 1) throw FormatError("load_checkpoint: non-positive extent in '" + name + "'");
            shape.push_back(d);
            prod *= d;
        }
        const uint64_t numel = r.u64();
        if (int64_t(numel) != prod)
            throw FormatError("load_checkpoint: tensor '" + name + "' claims " +
                              std::to_string(numel) + " values but shape " + shape_str(shape) +
                              " implies " + std::to_string(prod));
        std::vector<float> vals;
        vals.reserve(size_t(numel));
        for (uint64_t k = 0; k < numel; k++) vals.push_back(r.f32());
        c.add(std::move(name), std::move(shape), std::move(vals));
    }
    return c;
}

// --------------------------------------------------------------------------
// Bridging parameter sets in and out of checkpoints
// --------------------------------------------------------------------------

// Records every tensor of the set under "<prefix>.<name>", cast to f32.
template <typename Real>
void checkpoint_add_params(Checkpoint& c, const std::string& prefix, const ParamSet<Real>& set) {
    for (size_t i = 0; i < set.names.size(); i++) {
        const Tensor<Real>& t = set.values[i];
        std::vector<float> vals(size_t(t.numel()));
        for (int64_t k = 0; k < t.numel(); k++) vals[size_t(k)] = static_cast<float>(t[k]);
        c.add(prefix + "." + set.names[i], t.shape, std::move(vals));
    }
}

// Copies checkpoint values back INTO the set's existing buffers (several
// nets share tensor storage with their auxiliary state, so the buffers must
// never be reallocated). Every tensor of the set must be present with a
// matching shape.
template <typename Real>
void checkpoint_restore_params(const Checkpoint& c, const std::string& prefix,
                               ParamSet<Real>& set) {
    for (size_t i = 0; i < set.names.size(); i++) {
        const std::string full = prefix + "." + set.names[i];
        const int idx = c.index_of(full);
        if (idx < 0) throw FormatError("checkpoint: missing tensor '" + full + "'");
        if (c.shapes[size_t(idx)] != set.values[i].shape)
            throw FormatError("checkpoint: tensor '" + full + "' has shape " +
                              shape_str(c.shapes[size_t(idx)]) + ", expected " +
                              shape_str(set.values[i].shape));
        Tensor<Real>& t = set.values[i];
        const std::vector<float>& vals = c.values[size_t(idx)];
        for (int64_t k = 0; k < t.numel(); k++) t[k] = static_cast<Real>(vals[size_t(k)]);
    }
}

}  // namespace dualsynth
