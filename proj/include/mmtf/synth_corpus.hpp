#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mmtf/records.hpp"
#include "mmtf/templates.hpp"
#include "mmtf/tensor_io.hpp"

namespace mmtf {

// Procedurally generated "brain-like" phantom: all modalities are fixed
// monotone intensity transforms of one shared anatomy field, so cross-modality
// translation has a deterministic learnable target. Lesion labels are nested
// (1=whole tumor rim, 2=core rim, 3=enhancing center; WT = {1,2,3} ⊇ TC =
// {2,3} ⊇ ET = {3}).
struct PhantomVolume {
    std::map<std::string, torch::Tensor> volumes;  // modality -> float [D,H,W] in [-1,1]
    torch::Tensor lesion_mask;                     // int64 [D,H,W], labels 0..3
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string abnormality;
    uint64_t seed = 0;
};

struct SynthParams {
    int64_t depth = 64, height = 168, width = 168;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

namespace detail {
// Axis coordinate grids in [-1,1], broadcastable to [D,H,W].
inline std::array<torch::Tensor, 3> coord_grids(int64_t d, int64_t h, int64_t w) {
    auto opts = torch::kFloat32;
    return {torch::linspace(-1, 1, d, opts).view({d, 1, 1}),
            torch::linspace(-1, 1, h, opts).view({1, h, 1}),
            torch::linspace(-1, 1, w, opts).view({1, 1, w})};
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}
}  // namespace detail

inline PhantomVolume synth_volume(uint64_t seed, const SynthParams& params = {}) {
    if (params.depth < 8 || params.height < 8 || params.width < 8)
        throw InvalidInput("phantom dimensions must be at least 8 voxels");
    std::mt19937_64 rng(derive_seed(seed, "phantom"));
    auto [z, y, x] = detail::coord_grids(params.depth, params.height, params.width);

    // Head: ellipsoid with per-seed axes; anatomy field falls off radially and
    // carries smooth low-frequency structure plus a dark ventricle analogue.
    double az = detail::uniform(rng, 0.78, 0.9), ay = detail::uniform(rng, 0.78, 0.9),
           ax = detail::uniform(rng, 0.78, 0.9);
    torch::Tensor r2 = (z / az).pow(2) + (y / ay).pow(2) + (x / ax).pow(2);
    torch::Tensor head = (r2 < 1.0).to(torch::kFloat32);
    torch::Tensor t = (1.0 - r2).clamp(0.0, 1.0).pow(0.5);

    double f1 = detail::uniform(rng, 2.0, 4.0), f2 = detail::uniform(rng, 2.0, 4.0),
           p1 = detail::uniform(rng, 0.0, 6.28), p2 = detail::uniform(rng, 0.0, 6.28);
    torch::Tensor tex = 0.5 * torch::sin(f1 * 3.14159 * y + p1) * torch::cos(f2 * 3.14159 * x + p2) *
                        torch::sin(2.0 * z + p1);
    t = (t * (0.85 + 0.15 * tex)).clamp(0.0, 1.0);

    // ventricle analogue: small central ellipsoid where anatomy dims
    torch::Tensor vent =
        ((z / 0.25).pow(2) + (y / 0.18).pow(2) + ((x - 0.05) / 0.3).pow(2) < 1.0)
            .to(torch::kFloat32);
    t = t * (1.0 - 0.55 * vent);

    // Lesion: ellipsoidal blob inside the head, nested thresholds give the
    // WT ⊇ TC ⊇ ET labels; the abnormality kind perturbs size only.
    const auto& kinds = abnormality_names();
    std::string abnormality = kinds[rng() % kinds.size()];
    double size_scale = abnormality == "glioma" ? 1.0 : (abnormality == "meningioma" ? 0.8 : 0.65);
    double cz = detail::uniform(rng, -0.35, 0.35), cy = detail::uniform(rng, -0.35, 0.35),
           cx = detail::uniform(rng, -0.35, 0.35);
    double rz = size_scale * detail::uniform(rng, 0.22, 0.34),
           ry = size_scale * detail::uniform(rng, 0.22, 0.34),
           rx = size_scale * detail::uniform(rng, 0.22, 0.34);
    torch::Tensor d2 = ((z - cz) / rz).pow(2) + ((y - cy) / ry).pow(2) + ((x - cx) / rx).pow(2);
    torch::Tensor wt = (d2 < 1.0), tc = (d2 < 0.55), et = (d2 < 0.2);
    torch::Tensor labels = wt.to(torch::kInt64) + tc.to(torch::kInt64) + et.to(torch::kInt64);
    torch::Tensor lesionf = (1.0 - d2).clamp(0.0, 1.0).pow(0.5);

    // Modality curves share (t, lesionf, tex): lesions read dark on T1 and
    // bright on T2, background air is -1.
    torch::Tensor t1 = (-0.2 + 1.35 * t - 0.9 * lesionf + 0.05 * tex) * head - (1.0 - head);
    torch::Tensor t2 = (-0.25 + 0.75 * (1.0 - t) + 1.1 * lesionf + 0.05 * tex) * head -
                       (1.0 - head);

    PhantomVolume out;
    out.volumes["T1"] = t1.clamp(-1.0, 1.0);
    out.volumes["T2"] = t2.clamp(-1.0, 1.0);
    out.lesion_mask = labels;
    out.spacing = params.spacing;
    out.abnormality = abnormality;
    out.seed = seed;
    return out;
}

// Trilinear resample to isotropic target spacing; output dims floor(in·s/t).
inline torch::Tensor resample(const torch::Tensor& volume, std::array<double, 3> spacing,
                              double target = 1.0) {
    if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0 || target <= 0)
        throw InvalidInput("spacing must be positive");
    if (spacing == std::array<double, 3>{target, target, target}) return volume;
    std::vector<int64_t> out_size;
    for (int i = 0; i < 3; ++i)
        out_size.push_back(static_cast<int64_t>(
            std::floor(static_cast<double>(volume.size(i)) * spacing[i] / target)));
    namespace F = torch::nn::functional;
    torch::Tensor v = volume.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
    torch::Tensor r = F::interpolate(
        v, F::InterpolateFuncOptions().size(out_size).mode(torch::kTrilinear).align_corners(false));
    return r.squeeze(0).squeeze(0);
}

inline PhantomVolume resample(const PhantomVolume& vol, double target = 1.0) {
    PhantomVolume out = vol;
    for (auto& [mod, v] : out.volumes) v = resample(v, vol.spacing, target);
    if (vol.spacing != std::array<double, 3>{target, target, target}) {
        // nearest-neighbor keeps labels crisp and nesting intact
        std::vector<int64_t> out_size;
        for (int i = 0; i < 3; ++i)
            out_size.push_back(static_cast<int64_t>(std::floor(
                static_cast<double>(vol.lesion_mask.size(i)) * vol.spacing[i] / target)));
        namespace F = torch::nn::functional;
        out.lesion_mask = F::interpolate(vol.lesion_mask.to(torch::kFloat32)
                                             .unsqueeze(0)
                                             .unsqueeze(0),
                                         F::InterpolateFuncOptions().size(out_size).mode(
                                             torch::kNearest))
                              .squeeze(0)
                              .squeeze(0)
                              .to(torch::kInt64);
    }
    out.spacing = {target, target, target};
    return out;
}

// Center crop / symmetric zero-pad to size×size; odd remainders go to the
// high-index side.
inline torch::Tensor crop_pad(const torch::Tensor& slice, int64_t size = kImageSize) {
    if (slice.dim() != 2) throw InvalidInput("crop_pad expects a 2D slice");
    torch::Tensor out = slice;
    for (int dim = 0; dim < 2; ++dim) {
        int64_t in = out.size(dim);
        if (in > size) {
            int64_t start = (in - size) / 2;
            out = out.narrow(dim, start, size);
        } else if (in < size) {
            int64_t lo = (size - in) / 2, hi = size - in - lo;
            std::vector<int64_t> pad(4, 0);
            // F::pad order: (w_lo, w_hi, h_lo, h_hi)
            pad[dim == 1 ? 0 : 2] = lo;
            pad[dim == 1 ? 1 : 3] = hi;
            out = torch::constant_pad_nd(out, pad, 0);
        }
    }
    return out.contiguous();
}

struct ExtractedSlice {
    std::string plane;  // axial | sagittal | coronal
    int64_t position = 0;
    std::map<std::string, torch::Tensor> images;  // modality -> [H,W] pre-crop
    torch::Tensor mask;                           // int64 [H,W]
    bool centered_on_volume_center = false;
};

namespace detail {
inline std::vector<int64_t> slice_offsets(int n) {
    switch (n) {
        case 3: return {-1, 0, 1};
        case 4: return {-2, -1, 1, 2};
        case 5: return {-2, -1, 0, 1, 2};
        default: throw InvalidInput("slice count must be in [3,5], got " + std::to_string(n));
    }
}

inline torch::Tensor take_plane(const torch::Tensor& vol, const std::string& plane, int64_t pos) {
    using torch::indexing::Slice;
    if (plane == "axial") return vol.index({pos});                       // [H,W]
    if (plane == "sagittal") return vol.index({Slice(), Slice(), pos});  // [D,H]
    if (plane == "coronal") return vol.index({Slice(), pos, Slice()});   // [D,W]
    throw InvalidInput("unknown plane: " + plane);
}
}  // namespace detail

// n slices centered on the lesion centroid, planes assigned round-robin,
// offsets symmetric around the center. Empty mask falls back to the volume
// center with a flag.
inline std::vector<ExtractedSlice> extract_slices(const PhantomVolume& vol, int n) {
    std::vector<int64_t> offsets = detail::slice_offsets(n);
    torch::Tensor nz = (vol.lesion_mask > 0).nonzero();  // [k,3]
    bool fallback = nz.size(0) == 0;
    std::array<int64_t, 3> dims{vol.lesion_mask.size(0), vol.lesion_mask.size(1),
                                vol.lesion_mask.size(2)};
    std::array<int64_t, 3> centroid;
    for (int a = 0; a < 3; ++a)
        centroid[a] = fallback
                          ? dims[a] / 2
                          : nz.select(1, a).to(torch::kFloat32).mean().round().to(torch::kLong)
                                .item<int64_t>();

    std::vector<ExtractedSlice> out;
    for (int i = 0; i < n; ++i) {
        const std::string& plane = plane_names()[static_cast<size_t>(i) % 3];
        int axis = plane == "axial" ? 0 : (plane == "sagittal" ? 2 : 1);
        int64_t pos = std::clamp<int64_t>(centroid[axis] + offsets[static_cast<size_t>(i)], 0,
                                          dims[axis] - 1);
        ExtractedSlice s;
        s.plane = plane;
        s.position = pos;
        s.centered_on_volume_center = fallback;
        for (const auto& [mod, v] : vol.volumes) s.images[mod] = detail::take_plane(v, plane, pos);
        s.mask = detail::take_plane(vol.lesion_mask, plane, pos);
        out.push_back(std::move(s));
    }
    return out;
}

struct CorpusParams {
    int64_t n_subjects = 8;
    uint64_t seed = 0;
    SynthParams synth;
};

// Writes slices (.raw + .json sidecars) and a line-delimited manifest under
// out_dir; returns the records. One record per (slice, modality), with the
// other modality reachable through `paired`.
inline std::vector<SampleRecord> generate_corpus(const std::filesystem::path& out_dir,
                                                 const CorpusParams& params) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<SampleRecord> records;
    for (int64_t subj = 0; subj < params.n_subjects; ++subj) {
        uint64_t subj_seed = derive_seed(params.seed, "subject/" + std::to_string(subj));
        std::mt19937_64 rng(derive_seed(subj_seed, "layout"));
        SynthParams sp = params.synth;
        // alternate in-plane sizes so both the crop and the pad path of the
        // 192×192 preprocessing are exercised
        if (rng() % 2 == 0) sp.height = sp.width = 200;
        PhantomVolume vol = synth_volume(subj_seed, sp);
        vol = resample(vol, 1.0);

        char buf[16];
        std::snprintf(buf, sizeof(buf), "sub-%04lld", static_cast<long long>(subj));
        std::string subject(buf);
        fs::create_directories(out_dir / subject);

        int n = 3 + static_cast<int>(rng() % 3);
        std::vector<ExtractedSlice> slices = extract_slices(vol, n);
        for (size_t si = 0; si < slices.size(); ++si) {
            const ExtractedSlice& s = slices[si];
            std::string stem = subject + "/slice" + std::to_string(si);
            torch::Tensor mask192 = crop_pad(s.mask.to(torch::kFloat32)).round().to(torch::kInt64);
            std::string mask_rel = stem + "_mask.raw";
            save_raw_tensor(out_dir / mask_rel, mask192.to(torch::kInt32));

            std::map<std::string, std::string> path_of;
            for (const auto& [mod, img] : s.images)
                path_of[mod] = stem + "_" + mod + ".raw";
            for (const auto& [mod, img] : s.images) {
                torch::Tensor grid = crop_pad(img).clamp(-1, 1).unsqueeze(0);
                save_image_grid(out_dir / path_of[mod], grid);
                SampleRecord r;
                r.sample_id = stem + "_" + mod;
                r.subject = subject;
                r.image_path = path_of[mod];
                r.modality = mod;
                r.plane = s.plane;
                r.abnormality = vol.abnormality;
                r.mask_path = mask_rel;
                r.centered_on_volume_center = s.centered_on_volume_center;
                for (const auto& [other, p] : path_of)
                    if (other != mod) r.paired[other] = p;
                records.push_back(std::move(r));
            }
        }
    }
    write_manifest(out_dir / "manifest.jsonl", records);
    return records;
}

}  // namespace mmtf
