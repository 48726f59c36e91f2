#pragma once

// Binary 8-bit P6 images. Pixels map to reals by v / 255 and back by rounding.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advlm/tensor.hpp"

namespace advlm {

/// Filesystem failure carrying the offending path.
class IoError : public std::runtime_error {
public:
    IoError(const std::filesystem::path& path, const std::string& what)
        : std::runtime_error(path.string() + ": " + what), path_(path) {}

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

inline std::uint8_t quantize_pixel(float v) {
    const float clamped = std::min(1.0f, std::max(0.0f, v));
    return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

inline std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
    if (image.rank() != 3 || image.shape()[2] != 3) {
        throw ContractViolation("ppm needs an HxWx3 image, got " + shape_string(image.shape()));
    }
    const std::string header =
        "P6\n" + std::to_string(image.shape()[1]) + " " + std::to_string(image.shape()[0]) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + image.numel());
    for (float v : image.data()) out.push_back(quantize_pixel(v));
    return out;
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    const auto bytes = encode_ppm(image);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path, "cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(path, "write failed");
}

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path, "cannot open for reading");
    const auto token = [&]() {
        std::string t;
        char c;
        while (in.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!t.empty()) break;
                continue;
            }
            t.push_back(c);
        }
        return t;
    };
    if (token() != "P6") throw IoError(path, "not a binary P6 image");
    std::size_t width = 0, height = 0, maxval = 0;
    try {
        width = std::stoul(token());
        height = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw IoError(path, "malformed header");
    }
    if (maxval != 255 || width == 0 || height == 0) throw IoError(path, "only non-empty 8-bit images are supported");
    std::vector<std::uint8_t> raw(width * height * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw IoError(path, "truncated pixel data");
    std::vector<float> data(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) data[i] = static_cast<float>(raw[i]) / 255.0f;
    return Tensor({height, width, 3}, std::move(data));
}

}  // namespace advlm
