// SPDX-License-Identifier: Apache-2.0
#include "cbdes/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cbdes/config_io.hpp"

namespace cbdes {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
        crc = ::crc32(crc, bytes.data() + offset, chunk);
        offset += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace {

class Writer {
public:
    void u32(std::uint32_t v) { le(v, 4); }
    void u64(std::uint64_t v) { le(v, 8); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }

    std::vector<std::uint8_t> out;

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(le(4, what)); }
    std::uint64_t u64(const char* what) { return le(8, what); }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (in_.size() - pos_ < n)
            throw CheckpointError(std::string("checkpoint truncated: unexpected end of file (length) while reading ") +
                                  what);
    }
    std::uint64_t le(int n, const char* what) {
        need(static_cast<std::size_t>(n), what);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
    Writer w;
    w.bytes(std::string_view(Checkpoint::kMagic, sizeof(Checkpoint::kMagic)));
    w.u32(Checkpoint::kFormatVersion);
    w.u32(static_cast<std::uint32_t>(checkpoint.config_json.size()));
    w.bytes(checkpoint.config_json);
    w.u32(static_cast<std::uint32_t>(checkpoint.tensors.size()));
    std::uint64_t payload_values = 0;
    for (const auto& [name, tensor] : checkpoint.tensors) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name);
        w.u32(static_cast<std::uint32_t>(tensor.rank()));
        for (auto d : tensor.shape()) w.u64(d);
        payload_values += tensor.size();
    }
    w.u64(payload_values * sizeof(double));
    const std::size_t payload_start = w.out.size();
    for (const auto& entry : checkpoint.tensors)
        for (double v : entry.tensor.data()) w.f64(v);
    const auto crc = crc32(std::span<const std::uint8_t>(w.out).subspan(payload_start));
    w.u32(crc);
    return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (r.str(sizeof(Checkpoint::kMagic), "magic") != std::string_view(Checkpoint::kMagic, 8))
        throw CheckpointError("not a checkpoint: bad magic tag");
    const auto version = r.u32("format version");
    if (version != Checkpoint::kFormatVersion)
        throw CheckpointError("unsupported checkpoint format version " + std::to_string(version));
    Checkpoint ck;
    ck.config_json = r.str(r.u32("config length"), "config");
    const auto count = r.u32("manifest size");
    std::vector<std::pair<std::string, Shape>> manifest;
    std::uint64_t expected_values = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.str(r.u32("entry name length"), "entry name");
        const auto rank = r.u32("entry rank");
        if (rank == 0 || rank > 8) throw CheckpointError("manifest entry '" + name + "' has invalid rank");
        Shape shape(rank);
        for (auto& d : shape) {
            d = r.u64("entry shape");
            if (d == 0 || d > (1ull << 32)) throw CheckpointError("manifest entry '" + name + "' has invalid shape");
        }
        expected_values += numel(shape);
        manifest.emplace_back(std::move(name), std::move(shape));
    }
    const auto payload_bytes = r.u64("payload length");
    if (payload_bytes != expected_values * sizeof(double))
        throw CheckpointError("payload length does not match manifest shapes");
    if (r.remaining() < payload_bytes + 4)
        throw CheckpointError("checkpoint truncated: file length " + std::to_string(bytes.size()) +
                              " too short for payload and CRC");
    const auto payload = r.take(payload_bytes, "payload");
    const auto stored_crc = r.u32("CRC");
    if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint CRC (length mismatch)");
    if (crc32(payload) != stored_crc) throw CheckpointError("checkpoint CRC mismatch: payload is corrupt");

    std::size_t offset = 0;
    for (auto& [name, shape] : manifest) {
        std::vector<double> values(numel(shape));
        for (auto& v : values) {
            std::uint64_t bits = 0;
            for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(payload[offset + i]) << (8 * i);
            v = std::bit_cast<double>(bits);
            offset += 8;
        }
        ck.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
    }
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const auto bytes = encode_checkpoint(checkpoint);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

Checkpoint snapshot(const MoeModel& model, const TrainConfig& config) {
    Checkpoint ck;
    ck.config_json = to_json(config);
    for (const auto& p : model.parameters().parameters()) ck.tensors.push_back({p.name, p.tensor.clone()});
    for (const auto& b : model.parameters().buffers()) ck.tensors.push_back({b.name, b.tensor.clone()});
    return ck;
}

void restore(MoeModel& model, const Checkpoint& checkpoint) {
    std::vector<NamedTensor> targets = model.parameters().parameters();
    const auto& buffers = model.parameters().buffers();
    targets.insert(targets.end(), buffers.begin(), buffers.end());
    if (targets.size() != checkpoint.tensors.size())
        throw CheckpointError("checkpoint has " + std::to_string(checkpoint.tensors.size()) +
                              " tensors, model expects " + std::to_string(targets.size()));
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& src = checkpoint.tensors[i];
        auto& dst = targets[i];
        if (src.name != dst.name)
            throw CheckpointError("checkpoint entry '" + src.name + "' where model expects '" + dst.name + "'");
        if (src.tensor.shape() != dst.tensor.shape())
            throw CheckpointError("checkpoint entry '" + src.name + "' has shape " + to_string(src.tensor.shape()) +
                                  ", model expects " + to_string(dst.tensor.shape()));
        const auto values = src.tensor.data();
        std::copy(values.begin(), values.end(), dst.tensor.data().begin());
    }
}

TrainConfig checkpoint_config(const Checkpoint& checkpoint) {
    try {
        return apply_json(checkpoint.config_json, TrainConfig{});
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config snapshot: ") + e.what());
    }
}

MoeModel model_from_checkpoint(const Checkpoint& checkpoint) {
    const auto config = checkpoint_config(checkpoint);
    MoeModel model(config.model, model_seed(config.seed));
    restore(model, checkpoint);
    return model;
}

}  // namespace cbdes
