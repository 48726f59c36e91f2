#pragma once

// Checkpoint layout, all integers u32 little-endian:
//   "AVLM" | version | config length | config JSON (sorted keys) |
//   repeated { name length | name | rank | dims... | float32 data }
// Tensors appear in canonical slot order and run to end of file.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advlm/ppm.hpp"
#include "advlm/toy_vlm.hpp"

namespace advlm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'A', 'V', 'L', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string canonical_config_json(const ToyVlmConfig& config) {
    return nlohmann::json(config).dump();
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    bool done() const { return pos_ == bytes_.size(); }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::string string(std::size_t n) {
        need(n);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }

    void floats(std::span<float> out) {
        need(out.size() * 4);
        std::memcpy(out.data(), bytes_.data() + pos_, out.size() * 4);
        pos_ += out.size() * 4;
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw ContractViolation("checkpoint is truncated");
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const ToyVlmParams<float>& params) {
    params.validate();
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_u32(out, kCheckpointVersion);
    const std::string config = canonical_config_json(params.config);
    detail::put_u32(out, static_cast<std::uint32_t>(config.size()));
    out.insert(out.end(), config.begin(), config.end());
    for_each_slot(
        [&](const std::string& name, const Tensor& t) {
            detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
            out.insert(out.end(), name.begin(), name.end());
            detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
            for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
            const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data().data());
            out.insert(out.end(), raw, raw + t.numel() * sizeof(float));
        },
        params.weights);
    return out;
}

/// Rejects bad magic, unknown versions, missing/extra/misnamed tensors and shape mismatches.
inline ToyVlmParams<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader in(bytes);
    if (in.string(4) != std::string(kCheckpointMagic, 4)) throw ContractViolation("not a checkpoint (bad magic)");
    const auto version = in.u32();
    if (version != kCheckpointVersion) {
        throw ContractViolation("unsupported checkpoint version " + std::to_string(version));
    }
    ToyVlmConfig config;
    try {
        config = nlohmann::json::parse(in.string(in.u32())).get<ToyVlmConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("checkpoint config is malformed: ") + e.what());
    }
    config.validate();
    auto weights = map_weights<Tensor>(weight_shapes(config), [&](const std::string& name, const Shape& shape) {
        if (in.done()) throw ContractViolation("checkpoint is missing tensor " + name);
        const std::string stored = in.string(in.u32());
        if (stored != name) throw ContractViolation("checkpoint has tensor " + stored + " where " + name + " belongs");
        Shape dims(in.u32());
        for (auto& d : dims) d = in.u32();
        if (dims != shape) {
            throw ContractViolation("checkpoint tensor " + name + " has shape " + shape_string(dims) + ", expected " +
                                    shape_string(shape));
        }
        std::vector<float> data(shape_numel(shape));
        in.floats(data);
        return Tensor(shape, std::move(data));
    });
    if (!in.done()) throw ContractViolation("checkpoint has trailing data after the last tensor");
    ToyVlmParams<float> params{std::move(config), std::move(weights)};
    params.validate();
    return params;
}

inline void save_checkpoint(const std::filesystem::path& path, const ToyVlmParams<float>& params) {
    const auto bytes = encode_checkpoint(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path, "cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(path, "write failed");
}

inline ToyVlmParams<float> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path, "cannot open for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace advlm
