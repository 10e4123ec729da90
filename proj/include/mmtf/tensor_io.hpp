#pragma once

#include <torch/torch.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmtf/common.hpp"

namespace mmtf {


// Canonical 2D slice contract: shape (1, 192, 192), finite, values in [-1, 1].
inline void check_image_grid(const torch::Tensor& t) {
    if (t.dim() != 3 || t.size(0) != 1 || t.size(1) != kImageSize || t.size(2) != kImageSize)
        throw InvalidInput("image grid must be (1, 192, 192), got " + c10::str(t.sizes()));
    if (!torch::isfinite(t).all().item<bool>())
        throw InvalidInput("image grid contains non-finite values");
    double lo = t.min().item<double>(), hi = t.max().item<double>();
    if (lo < -1.0 || hi > 1.0)
        throw InvalidInput("image grid outside [-1,1]: min " + std::to_string(lo) + " max " +
                           std::to_string(hi));
}

inline std::filesystem::path sidecar_path(std::filesystem::path raw_path) {
    raw_path.replace_extension(".json");
    return raw_path;
}

// Flat binary + JSON sidecar (shape, spacing, dtype). Float32 for images,
// int32 for label maps; no clinical formats, by design.
inline void save_raw_tensor(const std::filesystem::path& path, const torch::Tensor& t,
                            std::vector<double> spacing = {}) {
    torch::Tensor c = t.detach().cpu().contiguous();
    std::string dtype;
    if (c.scalar_type() == torch::kFloat32) dtype = "float32";
    else if (c.scalar_type() == torch::kInt32) dtype = "int32";
    else if (c.scalar_type() == torch::kInt64) {
        c = c.to(torch::kInt32);
        dtype = "int32";
    } else {
        throw InvalidInput("unsupported raw dtype: " + std::string(c.dtype().name()));
    }
    nlohmann::json meta{{"dtype", dtype},
                        {"shape", std::vector<int64_t>(c.sizes().begin(), c.sizes().end())}};
    if (!spacing.empty()) meta["spacing"] = spacing;
    atomic_write_file(path, std::string_view(static_cast<const char*>(c.data_ptr()),
                                             static_cast<size_t>(c.numel() * c.element_size())));
    atomic_write_file(sidecar_path(path), meta.dump(2) + "\n");
}

struct RawTensor {
    torch::Tensor tensor;
    std::vector<double> spacing;  // empty when the sidecar has none
};

inline RawTensor load_raw_tensor(const std::filesystem::path& path) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_file(sidecar_path(path)));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput("bad sidecar for " + path.string() + ": " + e.what());
    }
    auto shape = meta.at("shape").get<std::vector<int64_t>>();
    std::string dtype = meta.at("dtype").get<std::string>();
    torch::ScalarType st;
    if (dtype == "float32") st = torch::kFloat32;
    else if (dtype == "int32") st = torch::kInt32;
    else throw InvalidInput("unsupported raw dtype in sidecar: " + dtype);

    std::string bytes = read_file(path);
    int64_t numel = 1;
    for (int64_t d : shape) numel *= d;
    if (static_cast<int64_t>(bytes.size()) != numel * static_cast<int64_t>(elementSize(st)))
        throw InvalidInput("raw payload size mismatch for " + path.string());
    torch::Tensor t = torch::empty(shape, st);
    std::memcpy(t.data_ptr(), bytes.data(), bytes.size());
    RawTensor out{t, {}};
    if (meta.contains("spacing")) out.spacing = meta.at("spacing").get<std::vector<double>>();
    return out;
}

inline void save_image_grid(const std::filesystem::path& path, const torch::Tensor& t) {
    check_image_grid(t);
    save_raw_tensor(path, t.to(torch::kFloat32));
}

inline torch::Tensor load_image_grid(const std::filesystem::path& path) {
    torch::Tensor t = load_raw_tensor(path).tensor;
    check_image_grid(t);
    return t;
}

// 8-bit PGM figure dump; [-1,1] mapped onto [0,255].
inline void write_pgm(const std::filesystem::path& path, const torch::Tensor& image) {
    torch::Tensor img = image.detach().cpu().to(torch::kFloat32).squeeze();
    if (img.dim() != 2) throw InvalidInput("write_pgm expects a single-channel image");
    torch::Tensor bytes =
        ((img.clamp(-1, 1) + 1.0) * 127.5).round().clamp(0, 255).to(torch::kUInt8).contiguous();
    std::string header = "P5\n" + std::to_string(img.size(1)) + " " + std::to_string(img.size(0)) +
                         "\n255\n";
    std::string payload(static_cast<const char*>(bytes.data_ptr()),
                        static_cast<size_t>(bytes.numel()));
    atomic_write_file(path, header + payload);
}

}  // namespace mmtf
