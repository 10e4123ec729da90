#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmtf/common.hpp"

namespace mmtf {

enum class Task { Report, Vqa, Translate, Segment };

inline const char* to_string(Task t) {
    switch (t) {
        case Task::Report: return "report";
        case Task::Vqa: return "vqa";
        case Task::Translate: return "translate";
        default: return "segment";
    }
}

inline Task parse_task(std::string_view s) {
    if (s == "report") return Task::Report;
    if (s == "vqa") return Task::Vqa;
    if (s == "translate") return Task::Translate;
    if (s == "segment") return Task::Segment;
    throw InvalidInput("unknown task: " + std::string(s));
}

// Attribute value sets shared by the corpus generator, the caption/instruction
// renderers and the closed-ended VQA answers.
inline const std::vector<std::string>& roi_names() {
    static const std::vector<std::string> v = {"whole tumor", "tumor core", "enhancing tumor"};
    return v;
}
inline const std::vector<std::string>& modality_names() {
    static const std::vector<std::string> v = {"T1", "T2"};
    return v;
}
inline const std::vector<std::string>& plane_names() {
    static const std::vector<std::string> v = {"axial", "sagittal", "coronal"};
    return v;
}
inline const std::vector<std::string>& abnormality_names() {
    static const std::vector<std::string> v = {"glioma", "meningioma", "stroke"};
    return v;
}

struct TaskSpec {
    Task task = Task::Report;
    std::map<std::string, std::string> params;  // source/target/roi/question/...

    const std::string& param(const std::string& key) const {
        auto it = params.find(key);
        if (it == params.end()) throw InvalidInput("task spec missing parameter: " + key);
        return it->second;
    }
};

inline void validate_task_spec(const TaskSpec& spec) {
    if (spec.task == Task::Translate) {
        if (spec.param("source") == spec.param("target"))
            throw InvalidInput("translate requires source != target");
    } else if (spec.task == Task::Segment) {
        const std::string& roi = spec.param("roi");
        const auto& rois = roi_names();
        if (std::find(rois.begin(), rois.end(), roi) == rois.end())
            throw InvalidInput("unknown roi: " + roi);
    } else if (spec.task == Task::Vqa) {
        spec.param("question");
    }
}

// Fills {name} slots from params. Unknown slots are rejected by name; the
// rendered string is guaranteed brace-free.
inline std::string fill_slots(const std::string& tmpl,
                              const std::map<std::string, std::string>& params) {
    std::string out;
    size_t pos = 0;
    while (pos < tmpl.size()) {
        size_t open = tmpl.find('{', pos);
        if (open == std::string::npos) {
            out.append(tmpl, pos, std::string::npos);
            break;
        }
        size_t close = tmpl.find('}', open);
        if (close == std::string::npos)
            throw InvalidInput("unterminated slot in template: " + tmpl.substr(open));
        out.append(tmpl, pos, open - pos);
        std::string name = tmpl.substr(open + 1, close - open - 1);
        auto it = params.find(name);
        if (it == params.end()) throw InvalidInput("missing slot value: " + name);
        if (it->second.find('{') != std::string::npos ||
            it->second.find('}') != std::string::npos)
            throw InvalidInput("slot value may not contain braces: " + name);
        out += it->second;
        pos = close + 1;
    }
    if (out.find('{') != std::string::npos || out.find('}') != std::string::npos)
        throw InvalidInput("unresolved slot in rendered template");
    return out;
}

inline std::string default_asset_dir() {
#ifdef MMTF_ASSET_DIR
    return MMTF_ASSET_DIR;
#else
    return "assets";
#endif
}

// Task instruction templates and caption templates, shipped as editable data
// assets (one template per line).
class TemplateLibrary {
  public:
    static TemplateLibrary load(const std::filesystem::path& dir = default_asset_dir() +
                                                                   std::string("/templates")) {
        TemplateLibrary lib;
        lib.captions_ = read_list(dir / "captions.txt", 5);
        lib.report_ = read_list(dir / "report.txt", 10);
        lib.translate_ = read_list(dir / "translate.txt", 10);
        lib.segment_ = read_list(dir / "segment.txt", 10);
        return lib;
    }

    const std::vector<std::string>& captions() const { return captions_; }

    const std::vector<std::string>& task_templates(Task t) const {
        switch (t) {
            case Task::Report: return report_;
            case Task::Translate: return translate_;
            case Task::Segment: return segment_;
            default: throw InvalidInput("vqa has no template list; the question is the instruction");
        }
    }

    std::string render_instruction(const TaskSpec& spec, int template_index) const {
        if (template_index < 0 || template_index >= 10)
            throw InvalidInput("template index out of range [0,10): " +
                               std::to_string(template_index));
        validate_task_spec(spec);
        if (spec.task == Task::Vqa) return spec.param("question");
        return fill_slots(task_templates(spec.task)[static_cast<size_t>(template_index)],
                          spec.params);
    }

    std::string make_caption(const std::string& modality, const std::string& plane,
                             const std::string& abnormality, int template_index) const {
        if (template_index < 0 || template_index >= static_cast<int>(captions_.size()))
            throw InvalidInput("caption template index out of range: " +
                               std::to_string(template_index));
        return fill_slots(captions_[static_cast<size_t>(template_index)],
                          {{"modality", modality}, {"plane", plane}, {"abnormality", abnormality}});
    }

  private:
    static std::vector<std::string> read_list(const std::filesystem::path& path,
                                              size_t expected) {
        std::vector<std::string> out;
        for (const std::string& raw : split(read_file(path), '\n')) {
            std::string line = trim(raw);
            if (!line.empty()) out.push_back(line);
        }
        if (out.size() != expected)
            throw ConfigError(path.string() + ": expected " + std::to_string(expected) +
                              " templates, found " + std::to_string(out.size()));
        return out;
    }

    std::vector<std::string> captions_;
    std::vector<std::string> report_;
    std::vector<std::string> translate_;
    std::vector<std::string> segment_;
};

}  // namespace mmtf
