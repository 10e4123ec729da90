#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmtf/common.hpp"
#include "mmtf/skip_refiner.hpp"
#include "mmtf/transformer.hpp"
#include "mmtf/unified_vocab.hpp"
#include "mmtf/vq_tokenizer.hpp"

namespace mmtf {

// Metadata embedded in every checkpoint: enough to rebuild the module, plus
// the hashes of upstream artifacts so stage lineage is verifiable.
struct CheckpointInfo {
    std::string kind;  // vq | lm | skip
    int64_t step = 0;
    std::string config;      // fully resolved run config echo
    std::string vq_hash;     // upstream tokenizer checkpoint (lm, skip)
    std::string vocab_hash;  // vocabulary manifest (lm)
    nlohmann::json model;    // module hyperparameters
};

inline nlohmann::json to_json(const VqConfig& c) {
    return {{"codebook_size", c.codebook_size}, {"code_dim", c.code_dim},
            {"channels", c.channels},           {"beta_commit", c.beta_commit},
            {"lambda_gan", c.lambda_gan},       {"seed", c.seed}};
}

inline VqConfig vq_config_from_json(const nlohmann::json& j) {
    VqConfig c;
    c.codebook_size = j.at("codebook_size").get<int64_t>();
    c.code_dim = j.at("code_dim").get<int64_t>();
    c.channels = j.at("channels").get<std::vector<int64_t>>();
    c.beta_commit = j.at("beta_commit").get<double>();
    c.lambda_gan = j.at("lambda_gan").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"d_e", c.d_e},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"context_length", c.context_length},
            {"vocab_total", c.vocab_total},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_e = j.at("d_e").get<int64_t>();
    c.n_layers = j.at("n_layers").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.context_length = j.at("context_length").get<int64_t>();
    c.vocab_total = j.at("vocab_total").get<int64_t>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

inline nlohmann::json to_json(const SkipConfig& c) {
    return {{"p_len", c.p_len},       {"d_txt", c.d_txt}, {"n_classes", c.n_classes},
            {"eps_dice", c.eps_dice}, {"zero_init", c.zero_init}, {"seed", c.seed}};
}

inline SkipConfig skip_config_from_json(const nlohmann::json& j) {
    SkipConfig c;
    c.p_len = j.at("p_len").get<int64_t>();
    c.d_txt = j.at("d_txt").get<int64_t>();
    c.n_classes = j.at("n_classes").get<int64_t>();
    c.eps_dice = j.at("eps_dice").get<double>();
    c.zero_init = j.at("zero_init").get<bool>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

namespace detail {

inline void write_info(torch::serialize::OutputArchive& ar, const CheckpointInfo& info) {
    nlohmann::json j{{"kind", info.kind},       {"step", info.step},
                     {"config", info.config},   {"vq_hash", info.vq_hash},
                     {"vocab_hash", info.vocab_hash}, {"model", info.model}};
    ar.write("mmtf/info", j.dump());
}

inline CheckpointInfo read_info(torch::serialize::InputArchive& ar) {
    c10::IValue v;
    ar.read("mmtf/info", v);
    nlohmann::json j = nlohmann::json::parse(v.toStringRef());
    CheckpointInfo info;
    info.kind = j.at("kind").get<std::string>();
    info.step = j.at("step").get<int64_t>();
    info.config = j.at("config").get<std::string>();
    info.vq_hash = j.at("vq_hash").get<std::string>();
    info.vocab_hash = j.at("vocab_hash").get<std::string>();
    info.model = j.at("model");
    return info;
}

}  // namespace detail

using NamedOptimizers = std::vector<std::pair<std::string, torch::optim::Optimizer*>>;

template <typename ModuleHolder>
inline void save_checkpoint(const std::filesystem::path& path, ModuleHolder& model,
                            const NamedOptimizers& optimizers, const CheckpointInfo& info) {
    torch::serialize::OutputArchive ar;
    torch::serialize::OutputArchive model_ar;
    model->save(model_ar);
    ar.write("model", model_ar);
    for (const auto& [name, opt] : optimizers) {
        torch::serialize::OutputArchive opt_ar;
        opt->save(opt_ar);
        ar.write("opt/" + name, opt_ar);
    }
    detail::write_info(ar, info);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    ar.save_to(path.string());
}

namespace detail {

inline torch::serialize::InputArchive open_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw DependencyError("checkpoint not found: " + path.string());
    torch::serialize::InputArchive ar;
    ar.load_from(path.string());
    return ar;
}

inline CheckpointInfo expect_kind(torch::serialize::InputArchive& ar, const std::string& kind,
                                  const std::filesystem::path& path) {
    CheckpointInfo info = read_info(ar);
    if (info.kind != kind)
        throw DependencyError(path.string() + " holds a '" + info.kind +
                              "' checkpoint, expected '" + kind + "'");
    return info;
}

}  // namespace detail

// Optimizer state is restored separately because the optimizer can only be
// constructed after the loaded model's parameters exist.
inline void load_optimizer(const std::filesystem::path& path, const std::string& name,
                           torch::optim::Optimizer& opt) {
    torch::serialize::InputArchive ar = detail::open_checkpoint(path);
    torch::serialize::InputArchive opt_ar;
    if (!ar.try_read("opt/" + name, opt_ar))
        throw DependencyError(path.string() + " has no optimizer state '" + name + "'");
    opt.load(opt_ar);
}

struct LoadedVq {
    VqGan model{nullptr};
    CheckpointInfo info;
    std::string file_hash;
};

inline void save_vq_checkpoint(const std::filesystem::path& path, VqGan& model,
                               const NamedOptimizers& optimizers, int64_t step,
                               const std::string& config_echo) {
    CheckpointInfo info;
    info.kind = "vq";
    info.step = step;
    info.config = config_echo;
    info.model = to_json(model->cfg);
    save_checkpoint(path, model, optimizers, info);
}

inline LoadedVq load_vq_checkpoint(const std::filesystem::path& path) {
    torch::serialize::InputArchive ar = detail::open_checkpoint(path);
    CheckpointInfo info = detail::expect_kind(ar, "vq", path);
    VqGan model(vq_config_from_json(info.model));
    torch::serialize::InputArchive model_ar;
    ar.read("model", model_ar);
    model->load(model_ar);
    return {std::move(model), std::move(info), file_hash_hex(path)};
}

struct LoadedLm {
    TinyGpt model{nullptr};
    CheckpointInfo info;
    std::string file_hash;
};

inline void save_lm_checkpoint(const std::filesystem::path& path, TinyGpt& model,
                               const NamedOptimizers& optimizers, int64_t step,
                               const std::string& config_echo, const std::string& vq_hash,
                               const std::string& vocab_hash) {
    CheckpointInfo info;
    info.kind = "lm";
    info.step = step;
    info.config = config_echo;
    info.vq_hash = vq_hash;
    info.vocab_hash = vocab_hash;
    info.model = to_json(model->cfg);
    save_checkpoint(path, model, optimizers, info);
}

inline LoadedLm load_lm_checkpoint(const std::filesystem::path& path) {
    torch::serialize::InputArchive ar = detail::open_checkpoint(path);
    CheckpointInfo info = detail::expect_kind(ar, "lm", path);
    TinyGpt model(model_config_from_json(info.model));
    torch::serialize::InputArchive model_ar;
    ar.read("model", model_ar);
    model->load(model_ar);
    return {std::move(model), std::move(info), file_hash_hex(path)};
}

struct LoadedSkip {
    SkipRefiner model{nullptr};
    CheckpointInfo info;
    std::string file_hash;
};

// The skip checkpoint carries its tokenizer manifest verbatim so prompts are
// rebuilt with the exact vocabulary the refiner was trained with.
inline void save_skip_checkpoint(const std::filesystem::path& path, SkipRefiner& model,
                                 const NamedOptimizers& optimizers, int64_t step,
                                 const std::string& config_echo, const std::string& vq_hash,
                                 const VqConfig& vq_cfg, const std::string& vocab_manifest) {
    CheckpointInfo info;
    info.kind = "skip";
    info.step = step;
    info.config = config_echo;
    info.vq_hash = vq_hash;
    info.model = {{"skip", to_json(model->cfg)},
                  {"vq", to_json(vq_cfg)},
                  {"vocab_manifest", vocab_manifest}};
    save_checkpoint(path, model, optimizers, info);
}

inline LoadedSkip load_skip_checkpoint(const std::filesystem::path& path) {
    torch::serialize::InputArchive ar = detail::open_checkpoint(path);
    CheckpointInfo info = detail::expect_kind(ar, "skip", path);
    LoadedVocab lv = parse_vocab_manifest(info.model.at("vocab_manifest").get<std::string>());
    SkipRefiner model(vq_config_from_json(info.model.at("vq")), lv.tokenizer,
                      skip_config_from_json(info.model.at("skip")));
    torch::serialize::InputArchive model_ar;
    ar.read("model", model_ar);
    model->load(model_ar);
    return {std::move(model), std::move(info), file_hash_hex(path)};
}

// Stage lineage contract: downstream checkpoints embed the hash of what they
// were trained against; a mismatch is a hard refusal, not a warning.
inline void require_lineage(const std::string& what, const std::string& expected,
                            const std::string& actual) {
    if (expected != actual)
        throw DependencyError(what + " mismatch: checkpoint was trained against " + expected +
                              " but was given " + actual);
}

}  // namespace mmtf
