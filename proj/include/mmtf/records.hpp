#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmtf/common.hpp"

namespace mmtf {

// One preprocessed 2D slice of one modality, as listed in the corpus manifest.
struct SampleRecord {
    std::string sample_id;   // unique, path-derived
    std::string subject;     // first path component, split unit
    std::string image_path;  // relative to the manifest directory
    std::string modality;
    std::string plane;  // axial | sagittal | coronal
    std::string abnormality;
    std::string mask_path;                              // empty when absent
    std::map<std::string, std::string> paired;          // other modality -> path
    bool centered_on_volume_center = false;             // empty-mask fallback flag

    bool operator==(const SampleRecord&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, const SampleRecord& r) {
    return os << r.sample_id;
}

inline nlohmann::json to_json(const SampleRecord& r) {
    nlohmann::json j{{"sample_id", r.sample_id},   {"subject", r.subject},
                     {"image_path", r.image_path}, {"modality", r.modality},
                     {"plane", r.plane},           {"abnormality", r.abnormality},
                     {"paired", r.paired}};
    if (!r.mask_path.empty()) j["mask_path"] = r.mask_path;
    if (r.centered_on_volume_center) j["centered_on_volume_center"] = true;
    return j;
}

inline SampleRecord record_from_json(const nlohmann::json& j) {
    SampleRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.subject = j.at("subject").get<std::string>();
    r.image_path = j.at("image_path").get<std::string>();
    r.modality = j.at("modality").get<std::string>();
    r.plane = j.at("plane").get<std::string>();
    r.abnormality = j.at("abnormality").get<std::string>();
    if (j.contains("mask_path")) r.mask_path = j.at("mask_path").get<std::string>();
    if (j.contains("paired")) r.paired = j.at("paired").get<std::map<std::string, std::string>>();
    if (j.contains("centered_on_volume_center"))
        r.centered_on_volume_center = j.at("centered_on_volume_center").get<bool>();
    return r;
}

// Line-delimited manifest: one record per line, lossless round trip.
inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<SampleRecord>& records) {
    std::string out;
    for (const SampleRecord& r : records) out += to_json(r).dump() + "\n";
    atomic_write_file(path, out);
}

inline std::vector<SampleRecord> read_manifest(const std::filesystem::path& path) {
    std::vector<SampleRecord> out;
    int lineno = 0;
    for (const std::string& raw : split(read_file(path), '\n')) {
        ++lineno;
        std::string line = trim(raw);
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInput("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// Every referenced file must exist next to the manifest.
inline void validate_manifest_files(const std::filesystem::path& manifest_dir,
                                    const std::vector<SampleRecord>& records) {
    namespace fs = std::filesystem;
    auto require = [&](const std::string& rel) {
        if (!rel.empty() && !fs::exists(manifest_dir / rel))
            throw InvalidInput("manifest references missing file: " + rel);
    };
    for (const SampleRecord& r : records) {
        require(r.image_path);
        require(r.mask_path);
        for (const auto& [mod, p] : r.paired) require(p);
    }
}

struct SplitRecords {
    std::vector<SampleRecord> train, val, test;
};

// Subject-level split: all slices of one phantom land in the same bucket.
inline SplitRecords split_records(const std::vector<SampleRecord>& records, double val_frac,
                                  double test_frac, uint64_t seed) {
    if (val_frac < 0 || test_frac < 0 || val_frac + test_frac >= 1.0)
        throw InvalidInput("split fractions must be nonnegative and sum below 1");
    SplitRecords out;
    for (const SampleRecord& r : records) {
        double u = static_cast<double>(derive_seed(seed, "split/" + r.subject) >> 11) /
                   static_cast<double>(1ULL << 53);
        if (u < test_frac) out.test.push_back(r);
        else if (u < test_frac + val_frac) out.val.push_back(r);
        else out.train.push_back(r);
    }
    return out;
}

}  // namespace mmtf
