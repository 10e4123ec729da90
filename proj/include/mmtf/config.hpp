#pragma once

#include <cstdlib>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mmtf/common.hpp"

namespace mmtf {

// Flat key=value run configuration. Every module reads its keys from here;
// unknown keys are rejected so typos fail loudly instead of silently using
// defaults. Flags override config-file values which override defaults.
class RunConfig {
  public:
    RunConfig() : values_(defaults()) {}

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"seed", "0"},
            // vector-quantized tokenizer
            {"vq.codebook_size", "1024"},
            {"vq.code_dim", "256"},
            {"vq.downsample_factor", "16"},
            {"vq.lr", "4.5e-6"},
            {"vq.disc_lr", "4.5e-6"},
            {"vq.batch_size", "2"},
            {"vq.beta_commit", "0.25"},
            {"vq.lambda_gan", "1.0"},
            {"vq.channels", "32,64,128,128"},
            {"vq.steps", "2000"},
            // language model
            {"lm.d_e", "128"},
            {"lm.n_layers", "4"},
            {"lm.n_heads", "4"},
            {"lm.context", "512"},
            {"lm.lr", "5e-6"},
            {"lm.batch_size", "2"},
            {"lm.seed", ""},  // empty -> derived from root seed
            {"lm.steps", "2000"},
            {"lm.tasks", "report,vqa,translate,segment"},
            // stage II skip refiner
            {"skip.p_len", "8"},
            {"skip.lr", "4.5e-6"},
            {"skip.n_classes", "4"},
            {"skip.eps_dice", "1e-5"},
            {"skip.d_txt", "64"},
            {"skip.batch_size", "2"},
            {"skip.steps", "1500"},
            // unified vocabulary
            {"vocab.k_text", "512"},
            {"vocab.k_img", "1024"},
            // synthetic corpus
            {"synth.n_subjects", "8"},
            {"synth.depth", "64"},
            {"synth.height", "168"},
            {"synth.width", "168"},
            {"synth.val_frac", "0.1"},
            {"synth.test_frac", "0.15"},
            // text data generation
            {"datagen.threshold", "6.0"},
            // training-pool caps (empty = unlimited); used for small overfit runs
            {"data.max_train_samples", ""},
            {"data.max_lm_samples", ""},
        };
        return d;
    }

    void set(const std::string& key, const std::string& value) {
        if (!defaults().count(key))
            throw ConfigError("unknown config key: " + key);
        values_[key] = value;
    }

    void load_file(const std::filesystem::path& path) {
        std::string text = read_file(path);
        int lineno = 0;
        for (const std::string& raw : split(text, '\n')) {
            ++lineno;
            std::string line = trim(raw);
            if (line.empty() || line[0] == '#') continue;
            size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key: " + key);
        return it->second;
    }

    int64_t get_int(const std::string& key) const {
        try {
            return std::stoll(get(key));
        } catch (const std::logic_error&) {
            throw ConfigError("config key " + key + " is not an integer: " + get(key));
        }
    }

    double get_double(const std::string& key) const {
        try {
            return std::stod(get(key));
        } catch (const std::logic_error&) {
            throw ConfigError("config key " + key + " is not a number: " + get(key));
        }
    }

    std::vector<int64_t> get_int_list(const std::string& key) const {
        std::vector<int64_t> out;
        for (const std::string& part : split(get(key), ','))
            if (!trim(part).empty()) out.push_back(std::stoll(trim(part)));
        return out;
    }

    std::vector<std::string> get_str_list(const std::string& key) const {
        std::vector<std::string> out;
        for (const std::string& part : split(get(key), ','))
            if (!trim(part).empty()) out.push_back(trim(part));
        return out;
    }

    // Root seed resolution: explicit value wins, then the MMTF_SEED
    // environment variable, then the default.
    uint64_t root_seed() const {
        const std::string& v = get("seed");
        if (v != defaults().at("seed")) return std::stoull(v);
        if (const char* env = std::getenv("MMTF_SEED")) return std::stoull(env);
        return std::stoull(v);
    }

    // Canonical sorted dump; logged by every run and echoed into checkpoints.
    std::string resolved() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace mmtf
