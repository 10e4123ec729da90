#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmtf/checkpoint.hpp"
#include "mmtf/common.hpp"
#include "mmtf/config.hpp"
#include "mmtf/datagen.hpp"
#include "mmtf/instruction.hpp"
#include "mmtf/metrics.hpp"
#include "mmtf/records.hpp"
#include "mmtf/skip_refiner.hpp"
#include "mmtf/synth_corpus.hpp"
#include "mmtf/templates.hpp"
#include "mmtf/tensor_io.hpp"
#include "mmtf/transformer.hpp"
#include "mmtf/unified_vocab.hpp"
#include "mmtf/vq_tokenizer.hpp"

namespace mmtf {

// ---------------------------------------------------------------- data access

inline torch::Tensor load_image(const std::filesystem::path& data_dir, const std::string& rel) {
    return load_image_grid(data_dir / rel);
}

inline torch::Tensor load_labels(const std::filesystem::path& data_dir, const std::string& rel) {
    return load_raw_tensor(data_dir / rel).tensor.to(torch::kInt64);
}

inline Region roi_region(size_t roi_index) {
    switch (roi_index) {
        case 0: return Region::WT;
        case 1: return Region::TC;
        case 2: return Region::ET;
        default: throw InvalidInput("roi index out of range: " + std::to_string(roi_index));
    }
}

// A region query rendered as a ±1 image, the form the tokenizer can encode.
inline torch::Tensor region_image(const torch::Tensor& labels, Region r) {
    return (region_mask(labels, r).to(torch::kFloat32) * 2.0 - 1.0).unsqueeze(0);
}

// Batch selection is a pure function of (seed, step) so an interrupted run
// resumed from a checkpoint walks the exact same batch sequence.
inline std::vector<size_t> batch_indices(uint64_t seed, int64_t step, size_t pool_size,
                                         int64_t batch_size) {
    if (pool_size == 0) throw InvalidInput("empty sample pool");
    if (batch_size <= 0) throw ConfigError("batch size must be positive");
    std::vector<size_t> out;
    out.reserve(static_cast<size_t>(batch_size));
    for (int64_t i = 0; i < batch_size; ++i)
        out.push_back(static_cast<size_t>(
            derive_seed(seed, "batch/" + std::to_string(step) + "/" + std::to_string(i)) %
            pool_size));
    return out;
}

inline std::vector<SampleRecord> select_train_records(const RunConfig& cfg,
                                                      const std::filesystem::path& data_dir) {
    auto records = read_manifest(data_dir / "manifest.jsonl");
    validate_manifest_files(data_dir, records);
    SplitRecords split = split_records(records, cfg.get_double("synth.val_frac"),
                                       cfg.get_double("synth.test_frac"), cfg.root_seed());
    std::vector<SampleRecord> train = std::move(split.train);
    const std::string& cap = cfg.get("data.max_train_samples");
    if (!cap.empty() && train.size() > std::stoull(cap)) train.resize(std::stoull(cap));
    if (train.empty()) throw InvalidInput("no training records under " + data_dir.string());
    return train;
}

// ------------------------------------------------------------- configs -> cfg

inline VqConfig vq_config(const RunConfig& cfg) {
    if (cfg.get_int("vq.downsample_factor") != kDownsample)
        throw ConfigError("only a downsample factor of 16 is supported");
    VqConfig c;
    c.codebook_size = cfg.get_int("vq.codebook_size");
    c.code_dim = cfg.get_int("vq.code_dim");
    c.channels = cfg.get_int_list("vq.channels");
    c.beta_commit = cfg.get_double("vq.beta_commit");
    c.lambda_gan = cfg.get_double("vq.lambda_gan");
    c.seed = derive_seed(cfg.root_seed(), "vq");
    return c;
}

inline ModelConfig lm_config(const RunConfig& cfg, int64_t vocab_total) {
    ModelConfig c;
    c.d_e = cfg.get_int("lm.d_e");
    c.n_layers = cfg.get_int("lm.n_layers");
    c.n_heads = cfg.get_int("lm.n_heads");
    c.context_length = cfg.get_int("lm.context");
    c.vocab_total = vocab_total;
    const std::string& s = cfg.get("lm.seed");
    c.seed = s.empty() ? derive_seed(cfg.root_seed(), "lm") : std::stoull(s);
    validate(c);
    return c;
}

inline SkipConfig skip_config(const RunConfig& cfg) {
    SkipConfig c;
    c.p_len = cfg.get_int("skip.p_len");
    c.d_txt = cfg.get_int("skip.d_txt");
    c.n_classes = cfg.get_int("skip.n_classes");
    c.eps_dice = cfg.get_double("skip.eps_dice");
    c.seed = derive_seed(cfg.root_seed(), "skip");
    return c;
}

// ------------------------------------------------------------------- datagen

inline std::filesystem::path run_synth_data(const RunConfig& cfg,
                                            const std::filesystem::path& out_dir,
                                            int64_t n_subjects) {
    CorpusParams p;
    p.n_subjects = n_subjects;
    p.seed = derive_seed(cfg.root_seed(), "synth");
    p.synth.depth = cfg.get_int("synth.depth");
    p.synth.height = cfg.get_int("synth.height");
    p.synth.width = cfg.get_int("synth.width");
    generate_corpus(out_dir, p);
    return out_dir / "manifest.jsonl";
}

inline std::filesystem::path run_datagen(const RunConfig& cfg,
                                         const std::filesystem::path& manifest_path,
                                         const std::filesystem::path& out_path,
                                         const std::vector<std::string>& client_specs,
                                         const std::string& judge_spec,
                                         const std::string& refiner_spec, double threshold) {
    if (client_specs.empty()) throw ConfigError("datagen requires at least one --clients entry");
    if (judge_spec.empty()) throw ConfigError("datagen requires --judge");
    std::vector<std::unique_ptr<GeneratorClient>> owned;
    std::vector<GeneratorClient*> clients;
    for (const std::string& spec : client_specs) {
        owned.push_back(make_client(spec));
        clients.push_back(owned.back().get());
    }
    auto judge = make_client(judge_spec);
    auto refiner = make_client(refiner_spec.empty() ? judge_spec : refiner_spec);

    TemplateLibrary lib = TemplateLibrary::load();
    DatagenParams params;
    params.threshold = threshold;
    params.seed = cfg.root_seed();
    std::vector<DatagenRecord> out;
    for (const SampleRecord& r : read_manifest(manifest_path))
        out.push_back(run_datagen_sample(r, lib, clients, *judge, *refiner, params));
    write_datagen_records(out_path, out);
    return out_path;
}

// ------------------------------------------------------------------ training

struct TrainResult {
    std::filesystem::path checkpoint;
    std::vector<double> losses;  // one entry per step executed in this run
};

namespace detail {

inline void write_loss_log(const std::filesystem::path& path, const std::string& header,
                           const std::string& rows, bool append) {
    if (append && std::filesystem::exists(path)) {
        std::string prior = read_file(path);
        atomic_write_file(path, prior + rows);
    } else {
        atomic_write_file(path, header + rows);
    }
}

inline std::string loss_row(int64_t step, const std::vector<double>& values) {
    char buf[32];
    std::string row = std::to_string(step);
    for (double v : values) {
        std::snprintf(buf, sizeof(buf), "\t%.6f", v);
        row += buf;
    }
    return row + "\n";
}

}  // namespace detail

inline TrainResult train_vq(const RunConfig& cfg, const std::filesystem::path& data_dir,
                            const std::filesystem::path& out_dir,
                            const std::filesystem::path& resume = {}) {
    auto train = select_train_records(cfg, data_dir);
    std::vector<torch::Tensor> images;
    images.reserve(train.size());
    for (const SampleRecord& r : train) images.push_back(load_image(data_dir, r.image_path));

    VqGan model{nullptr};
    int64_t start = 0;
    if (resume.empty()) {
        model = VqGan(vq_config(cfg));
    } else {
        LoadedVq loaded = load_vq_checkpoint(resume);
        model = loaded.model;
        start = loaded.info.step;
    }
    std::vector<torch::Tensor> gen_params;
    for (auto& p : model->encoder->parameters()) gen_params.push_back(p);
    for (auto& p : model->quantizer->parameters()) gen_params.push_back(p);
    for (auto& p : model->decoder->parameters()) gen_params.push_back(p);
    torch::optim::Adam opt_gen(gen_params, torch::optim::AdamOptions(cfg.get_double("vq.lr")));
    torch::optim::Adam opt_disc(model->discriminator->parameters(),
                                torch::optim::AdamOptions(cfg.get_double("vq.disc_lr")));
    if (!resume.empty()) {
        load_optimizer(resume, "gen", opt_gen);
        load_optimizer(resume, "disc", opt_disc);
    }

    const int64_t steps = cfg.get_int("vq.steps");
    const int64_t batch_size = cfg.get_int("vq.batch_size");
    const uint64_t bseed = derive_seed(cfg.root_seed(), "vq/batches");
    static const std::vector<std::string> kParts = {"total",    "recon",      "gan",
                                                    "codebook", "commitment", "disc"};
    TrainResult result;
    std::string rows;
    for (int64_t step = start; step < steps; ++step) {
        std::vector<torch::Tensor> sel;
        for (size_t i : batch_indices(bseed, step, images.size(), batch_size))
            sel.push_back(images[i]);
        auto comp = train_tokenizer_step(model, torch::stack(sel), opt_gen, opt_disc);
        result.losses.push_back(comp.at("total"));
        std::vector<double> vals;
        for (const std::string& k : kParts) vals.push_back(comp.at(k));
        rows += detail::loss_row(step, vals);
    }
    detail::write_loss_log(out_dir / "vq_loss.tsv",
                           "step\ttotal\trecon\tgan\tcodebook\tcommitment\tdisc\n", rows,
                           start > 0);
    result.checkpoint = out_dir / "vq.ckpt";
    save_vq_checkpoint(result.checkpoint, model, {{"gen", &opt_gen}, {"disc", &opt_disc}}, steps,
                       cfg.resolved());
    return result;
}

// ------------------------------------------------- instruction dataset (LM)

struct LmExample {
    InstructionSample sample;
    std::vector<int64_t> prefix;  // everything the generator is given at inference
    std::string sample_id;
    std::string gold_text;          // report/vqa responses
    std::vector<int64_t> gold_ids;  // translate/segment responses (vq indices)
};

inline std::vector<LmExample> build_instruction_dataset(
    const std::vector<SampleRecord>& records, const std::filesystem::path& data_dir, VqGan& vq,
    const ByteTokenizer& tok, const UnifiedVocab& vocab, const TemplateLibrary& lib,
    const std::vector<Task>& tasks, uint64_t seed, int64_t context_length) {
    torch::NoGradGuard ng;
    vq->eval();
    std::map<std::string, std::vector<int64_t>> cache;
    auto ids_for = [&](const std::string& rel) -> const std::vector<int64_t>& {
        auto it = cache.find(rel);
        if (it == cache.end())
            it = cache.emplace(rel, flatten_indices(vq->encode(load_image(data_dir, rel)))).first;
        return it->second;
    };
    auto tmpl_idx = [&](const char* task_tag, const std::string& sid) {
        return static_cast<int>(derive_seed(seed, std::string("tmpl/") + task_tag + "/" + sid) %
                                10);
    };

    std::vector<LmExample> out;
    auto push = [&](const std::string& instr, const std::vector<int64_t>& input_ids,
                    const Response& response, Task task, const SampleRecord& r) {
        LmExample ex;
        ex.sample = assemble_sample(instr, input_ids, response, task, tok, vocab);
        if (static_cast<int64_t>(ex.sample.ids.size()) > context_length)
            throw ConfigError("sample " + r.sample_id + " needs " +
                              std::to_string(ex.sample.ids.size()) +
                              " tokens but lm.context is " + std::to_string(context_length));
        ex.prefix = assemble_prefix(instr, input_ids, task, tok, vocab);
        ex.sample_id = r.sample_id;
        if (const auto* t = std::get_if<TextResponse>(&response)) ex.gold_text = t->text;
        if (const auto* i = std::get_if<ImageResponse>(&response)) ex.gold_ids = i->vq_indices;
        out.push_back(std::move(ex));
    };

    for (const SampleRecord& r : records) {
        const auto& input_ids = ids_for(r.image_path);
        for (Task task : tasks) {
            switch (task) {
                case Task::Report: {
                    std::string instr =
                        lib.render_instruction({Task::Report, {}}, tmpl_idx("report", r.sample_id));
                    push(instr, input_ids, TextResponse{gold_report_text(r, lib, seed)},
                         Task::Report, r);
                    break;
                }
                case Task::Vqa: {
                    for (const auto& [q, a] : gold_vqa_pairs(r))
                        push(q, input_ids, TextResponse{a}, Task::Vqa, r);
                    break;
                }
                case Task::Translate: {
                    if (r.paired.empty()) break;
                    const auto& [target_mod, target_rel] = *r.paired.begin();
                    TaskSpec spec{Task::Translate,
                                  {{"source", r.modality}, {"target", target_mod}}};
                    std::string instr =
                        lib.render_instruction(spec, tmpl_idx("translate", r.sample_id));
                    push(instr, input_ids, ImageResponse{ids_for(target_rel)}, Task::Translate, r);
                    break;
                }
                case Task::Segment: {
                    if (r.mask_path.empty()) break;
                    size_t roi = derive_seed(seed, "roi/" + r.sample_id) % roi_names().size();
                    TaskSpec spec{Task::Segment, {{"roi", roi_names()[roi]}}};
                    std::string instr =
                        lib.render_instruction(spec, tmpl_idx("segment", r.sample_id));
                    torch::Tensor target =
                        region_image(load_labels(data_dir, r.mask_path), roi_region(roi));
                    push(instr, input_ids, ImageResponse{flatten_indices(vq->encode(target))},
                         Task::Segment, r);
                    break;
                }
            }
        }
    }
    return out;
}

struct LmArtifacts {
    std::filesystem::path checkpoint;
    std::filesystem::path vocab_manifest;
    std::vector<double> losses;
};

inline LmArtifacts train_lm(const RunConfig& cfg, const std::filesystem::path& data_dir,
                            const std::filesystem::path& vq_ckpt,
                            const std::filesystem::path& out_dir,
                            const std::filesystem::path& resume = {}) {
    if (vq_ckpt.empty())
        throw DependencyError("train lm requires a vq checkpoint (stage vq comes first)");
    LoadedVq vq = load_vq_checkpoint(vq_ckpt);
    vq.model->eval();

    const int64_t k_text = cfg.get_int("vocab.k_text");
    const int64_t k_img = cfg.get_int("vocab.k_img");
    if (k_img != vq.model->cfg.codebook_size)
        throw ConfigError("vocab.k_img (" + std::to_string(k_img) +
                          ") must equal the tokenizer codebook size (" +
                          std::to_string(vq.model->cfg.codebook_size) + ")");
    ByteTokenizer tok = default_tokenizer(k_text);
    UnifiedVocab vocab = default_vocab(tok, k_img);
    LmArtifacts result;
    result.vocab_manifest = out_dir / "vocab.txt";
    tok.save_manifest(result.vocab_manifest, k_img);
    const std::string vocab_hash = ByteTokenizer::manifest_hash(result.vocab_manifest);

    std::vector<Task> tasks;
    for (const std::string& t : cfg.get_str_list("lm.tasks")) tasks.push_back(parse_task(t));
    auto train = select_train_records(cfg, data_dir);
    auto dataset =
        build_instruction_dataset(train, data_dir, vq.model, tok, vocab, TemplateLibrary::load(),
                                  tasks, cfg.root_seed(), cfg.get_int("lm.context"));
    const std::string& cap = cfg.get("data.max_lm_samples");
    if (!cap.empty() && dataset.size() > std::stoull(cap)) dataset.resize(std::stoull(cap));

    TinyGpt model{nullptr};
    int64_t start = 0;
    if (resume.empty()) {
        model = TinyGpt(lm_config(cfg, vocab.total()));
    } else {
        LoadedLm loaded = load_lm_checkpoint(resume);
        require_lineage("vq checkpoint hash", loaded.info.vq_hash, vq.file_hash);
        model = loaded.model;
        start = loaded.info.step;
    }
    torch::optim::AdamW opt(model->parameters(),
                            torch::optim::AdamWOptions(cfg.get_double("lm.lr")));
    if (!resume.empty()) load_optimizer(resume, "opt", opt);

    const int64_t steps = cfg.get_int("lm.steps");
    const int64_t batch_size = cfg.get_int("lm.batch_size");
    const uint64_t bseed = derive_seed(cfg.root_seed(), "lm/batches");
    std::string rows;
    for (int64_t step = start; step < steps; ++step) {
        std::vector<InstructionSample> batch;
        for (size_t i : batch_indices(bseed, step, dataset.size(), batch_size))
            batch.push_back(dataset[i].sample);
        double loss = train_lm_step(model, batch, opt);
        result.losses.push_back(loss);
        rows += detail::loss_row(step, {loss});
    }
    detail::write_loss_log(out_dir / "lm_loss.tsv", "step\tloss\n", rows, start > 0);
    result.checkpoint = out_dir / "lm.ckpt";
    save_lm_checkpoint(result.checkpoint, model, {{"opt", &opt}}, steps, cfg.resolved(),
                       vq.file_hash, vocab_hash);
    return result;
}

// ----------------------------------------------------------- stage II training

inline std::vector<Stage2Sample> build_stage2_dataset(const std::vector<SampleRecord>& records,
                                                      const std::filesystem::path& data_dir,
                                                      uint64_t seed) {
    std::vector<Stage2Sample> out;
    for (const SampleRecord& r : records) {
        torch::Tensor image = load_image(data_dir, r.image_path);
        if (!r.paired.empty()) {
            const auto& [target_mod, target_rel] = *r.paired.begin();
            Stage2Sample s;
            s.input_image = image;
            s.target_image = load_image(data_dir, target_rel);
            s.task = Task::Translate;
            s.target_text = target_mod;
            out.push_back(std::move(s));
        }
        if (!r.mask_path.empty()) {
            size_t roi = derive_seed(seed, "roi/" + r.sample_id) % roi_names().size();
            torch::Tensor labels = load_labels(data_dir, r.mask_path);
            Stage2Sample s;
            s.input_image = image;
            s.target_image = region_image(labels, roi_region(roi));
            s.labels = labels;
            s.task = Task::Segment;
            s.target_text = roi_names()[roi];
            out.push_back(std::move(s));
        }
    }
    if (out.empty()) throw InvalidInput("no stage II samples (need paired images or masks)");
    return out;
}

inline TrainResult train_skip(const RunConfig& cfg, const std::filesystem::path& data_dir,
                              const std::filesystem::path& vq_ckpt,
                              const std::filesystem::path& out_dir,
                              const std::filesystem::path& resume = {}) {
    if (vq_ckpt.empty())
        throw DependencyError("train skip requires a vq checkpoint (stage vq comes first)");
    LoadedVq vq = load_vq_checkpoint(vq_ckpt);
    vq.model->eval();
    ByteTokenizer tok = default_tokenizer(cfg.get_int("vocab.k_text"));

    SkipRefiner refiner{nullptr};
    int64_t start = 0;
    if (resume.empty()) {
        refiner = SkipRefiner(vq.model->cfg, tok, skip_config(cfg));
    } else {
        LoadedSkip loaded = load_skip_checkpoint(resume);
        require_lineage("vq checkpoint hash", loaded.info.vq_hash, vq.file_hash);
        refiner = loaded.model;
        start = loaded.info.step;
    }
    torch::optim::Adam opt(refiner->parameters(),
                           torch::optim::AdamOptions(cfg.get_double("skip.lr")));
    if (!resume.empty()) load_optimizer(resume, "opt", opt);

    auto train = select_train_records(cfg, data_dir);
    auto dataset = build_stage2_dataset(train, data_dir, cfg.root_seed());

    const int64_t steps = cfg.get_int("skip.steps");
    const int64_t batch_size = cfg.get_int("skip.batch_size");
    const uint64_t bseed = derive_seed(cfg.root_seed(), "skip/batches");
    TrainResult result;
    std::string rows;
    for (int64_t step = start; step < steps; ++step) {
        std::vector<Stage2Sample> batch;
        for (size_t i : batch_indices(bseed, step, dataset.size(), batch_size))
            batch.push_back(dataset[i]);
        double loss = train_stage2_step(refiner, vq.model, batch, opt);
        result.losses.push_back(loss);
        rows += detail::loss_row(step, {loss});
    }
    detail::write_loss_log(out_dir / "skip_loss.tsv", "step\tloss\n", rows, start > 0);
    result.checkpoint = out_dir / "skip.ckpt";
    save_skip_checkpoint(result.checkpoint, refiner, {{"opt", &opt}}, steps, cfg.resolved(),
                         vq.file_hash, vq.model->cfg,
                         tok.to_manifest(vq.model->cfg.codebook_size));
    return result;
}

// ----------------------------------------------------------------- inference

struct InferStack {
    VqGan vq{nullptr};
    TinyGpt lm{nullptr};
    LoadedVocab vocab;
    SkipRefiner skip{nullptr};  // stays null for stage-I-only inference

    bool has_skip() const { return !skip.is_empty(); }
};

inline InferStack load_infer_stack(const std::filesystem::path& vq_path,
                                   const std::filesystem::path& lm_path,
                                   const std::filesystem::path& vocab_path,
                                   const std::filesystem::path& skip_path = {}) {
    LoadedVq vq = load_vq_checkpoint(vq_path);
    LoadedLm lm = load_lm_checkpoint(lm_path);
    require_lineage("vq checkpoint hash", lm.info.vq_hash, vq.file_hash);
    require_lineage("vocab manifest hash", lm.info.vocab_hash,
                    ByteTokenizer::manifest_hash(vocab_path));
    InferStack s{std::move(vq.model), std::move(lm.model), load_vocab_manifest(vocab_path)};
    if (!skip_path.empty()) {
        LoadedSkip sk = load_skip_checkpoint(skip_path);
        require_lineage("vq checkpoint hash", sk.info.vq_hash, vq.file_hash);
        s.skip = std::move(sk.model);
        s.skip->eval();
        s.skip->text_encoder->eval();
    }
    s.vq->eval();
    s.lm->eval();
    return s;
}

namespace detail {

inline std::vector<int64_t> encode_image_ids(InferStack& s, const torch::Tensor& image) {
    return flatten_indices(s.vq->encode(image));
}

inline torch::Tensor generated_grid(InferStack& s, const std::vector<int64_t>& prefix) {
    std::vector<int64_t> ids = generate(s.lm, prefix, GenerateMode::Image, s.vocab.vocab);
    std::vector<int64_t> vq_ids;
    vq_ids.reserve(ids.size());
    for (int64_t id : ids) vq_ids.push_back(s.vocab.vocab.lm_id_to_image(id));
    return unflatten_indices(vq_ids);
}

inline std::vector<torch::Tensor> skips_for(InferStack& s, const torch::Tensor& image,
                                            const std::string& target_text) {
    auto pyramid = s.vq->encode_with_pyramid(image).second;
    return s.skip->skip_features(pyramid, s.skip->prompt_for(target_text));
}

}  // namespace detail

inline std::string infer_report(InferStack& s, const TemplateLibrary& lib,
                                const torch::Tensor& image) {
    torch::NoGradGuard ng;
    auto prefix = assemble_prefix(lib.render_instruction({Task::Report, {}}, 0),
                                  detail::encode_image_ids(s, image), Task::Report,
                                  s.vocab.tokenizer, s.vocab.vocab);
    return s.vocab.tokenizer.decode_text(
        generate(s.lm, prefix, GenerateMode::Text, s.vocab.vocab, 128));
}

inline std::string infer_vqa(InferStack& s, const torch::Tensor& image,
                             const std::string& question) {
    torch::NoGradGuard ng;
    auto prefix = assemble_prefix(question, detail::encode_image_ids(s, image), Task::Vqa,
                                  s.vocab.tokenizer, s.vocab.vocab);
    return s.vocab.tokenizer.decode_text(
        generate(s.lm, prefix, GenerateMode::Text, s.vocab.vocab, 32));
}

struct TranslateOutput {
    torch::Tensor stage1;  // decoded straight from generated tokens
    torch::Tensor stage2;  // refined with prompt-conditioned skips; empty without a refiner
};

inline TranslateOutput infer_translate(InferStack& s, const TemplateLibrary& lib,
                                       const torch::Tensor& image, const std::string& source,
                                       const std::string& target) {
    torch::NoGradGuard ng;
    TaskSpec spec{Task::Translate, {{"source", source}, {"target", target}}};
    auto prefix = assemble_prefix(lib.render_instruction(spec, 0),
                                  detail::encode_image_ids(s, image), Task::Translate,
                                  s.vocab.tokenizer, s.vocab.vocab);
    torch::Tensor grid = detail::generated_grid(s, prefix);
    TranslateOutput out;
    out.stage1 = s.vq->decode(grid);
    if (s.has_skip())
        out.stage2 = refine_decode(s.vq, grid, detail::skips_for(s, image, target));
    return out;
}

struct SegmentOutput {
    torch::Tensor stage1_labels;  // composed from per-region token decodes
    torch::Tensor stage2_labels;  // seg-head argmax over the refined decode; empty without one
};

inline SegmentOutput infer_segment(InferStack& s, const TemplateLibrary& lib,
                                   const torch::Tensor& image) {
    torch::NoGradGuard ng;
    auto input_ids = detail::encode_image_ids(s, image);
    torch::Tensor composed = torch::zeros({kImageSize, kImageSize}, torch::kInt64);
    torch::Tensor wt_grid;
    for (size_t roi = 0; roi < roi_names().size(); ++roi) {
        TaskSpec spec{Task::Segment, {{"roi", roi_names()[roi]}}};
        auto prefix = assemble_prefix(lib.render_instruction(spec, 0), input_ids, Task::Segment,
                                      s.vocab.tokenizer, s.vocab.vocab);
        torch::Tensor grid = detail::generated_grid(s, prefix);
        if (roi == 0) wt_grid = grid;
        // nested-region convention: each positive region query adds one level
        composed += (s.vq->decode(grid).squeeze(0) > 0).to(torch::kInt64);
    }
    SegmentOutput out;
    out.stage1_labels = composed;
    if (s.has_skip()) {
        torch::Tensor refined =
            refine_decode(s.vq, wt_grid, detail::skips_for(s, image, roi_names()[0]));
        out.stage2_labels = s.skip->seg->forward(refined).argmax(0);
    }
    return out;
}

// ------------------------------------------------------- batch infer/evaluate

namespace pred {
inline std::string report(const std::string& sid) { return sid + ".report.txt"; }
inline std::string vqa(const std::string& sid) { return sid + ".vqa.json"; }
inline std::string translate(const std::string& sid, int stage) {
    return sid + ".stage" + std::to_string(stage) + ".translate.raw";
}
inline std::string labels(const std::string& sid, int stage) {
    return sid + ".stage" + std::to_string(stage) + ".labels.raw";
}
}  // namespace pred

inline void run_infer(Task task, const std::filesystem::path& manifest_path,
                      const std::filesystem::path& pred_dir, InferStack& s,
                      int64_t limit = -1) {
    auto records = read_manifest(manifest_path);
    const std::filesystem::path data_dir = manifest_path.parent_path();
    TemplateLibrary lib = TemplateLibrary::load();
    int64_t done = 0;
    for (const SampleRecord& r : records) {
        if (limit >= 0 && done >= limit) break;
        torch::Tensor image = load_image(data_dir, r.image_path);
        switch (task) {
            case Task::Report:
                atomic_write_file(pred_dir / pred::report(r.sample_id),
                                  infer_report(s, lib, image) + "\n");
                break;
            case Task::Vqa: {
                nlohmann::json answers = nlohmann::json::array();
                for (const auto& [q, a] : gold_vqa_pairs(r))
                    answers.push_back(infer_vqa(s, image, q));
                atomic_write_file(pred_dir / pred::vqa(r.sample_id), answers.dump() + "\n");
                break;
            }
            case Task::Translate: {
                if (r.paired.empty()) continue;  // nothing to translate into
                const std::string& target = r.paired.begin()->first;
                TranslateOutput out = infer_translate(s, lib, image, r.modality, target);
                save_image_grid(pred_dir / pred::translate(r.sample_id, 1), out.stage1);
                std::vector<torch::Tensor> panes = {image.squeeze(0), out.stage1.squeeze(0)};
                if (out.stage2.defined()) {
                    save_image_grid(pred_dir / pred::translate(r.sample_id, 2), out.stage2);
                    panes.push_back(out.stage2.squeeze(0));
                }
                write_pgm(pred_dir / (r.sample_id + ".figure.pgm"), torch::cat(panes, 1));
                break;
            }
            case Task::Segment: {
                SegmentOutput out = infer_segment(s, lib, image);
                save_raw_tensor(pred_dir / pred::labels(r.sample_id, 1), out.stage1_labels);
                if (out.stage2_labels.defined())
                    save_raw_tensor(pred_dir / pred::labels(r.sample_id, 2), out.stage2_labels);
                break;
            }
        }
        ++done;
    }
}

// FID features: spatially pooled penultimate activations of the frozen
// tokenizer encoder, so evaluation needs no external pretrained network.
inline FeatureExtractor vq_feature_extractor(VqGan vq) {
    return [vq](const std::vector<torch::Tensor>& images) mutable {
        torch::NoGradGuard ng;
        vq->eval();
        std::vector<torch::Tensor> feats;
        feats.reserve(images.size());
        for (const torch::Tensor& img : images)
            feats.push_back(
                vq->encode_with_pyramid(img).second.back().mean({-2, -1}).flatten());
        return torch::stack(feats);
    };
}

inline std::string run_evaluate(const RunConfig& cfg, const std::filesystem::path& manifest_path,
                                const std::filesystem::path& pred_dir,
                                const std::filesystem::path& vq_path = {}) {
    namespace fs = std::filesystem;
    auto records = read_manifest(manifest_path);
    const fs::path data_dir = manifest_path.parent_path();
    TemplateLibrary lib = TemplateLibrary::load();
    const uint64_t seed = cfg.root_seed();

    MetricReport report;
    struct Tally {
        int present = 0;
        std::vector<std::string> missing;
    };
    std::map<std::string, Tally> coverage;
    auto track = [&](const std::string& kind, const std::string& sid, bool ok) {
        if (ok) ++coverage[kind].present;
        else coverage[kind].missing.push_back(sid);
        return ok;
    };

    std::vector<torch::Tensor> fid_gold, fid_stage1, fid_stage2;
    for (const SampleRecord& r : records) {
        const std::string& sid = r.sample_id;
        if (track("report", sid, fs::exists(pred_dir / pred::report(sid))))
            report.add("rouge_l", rouge_l(trim(read_file(pred_dir / pred::report(sid))),
                                          gold_report_text(r, lib, seed)));
        if (track("vqa", sid, fs::exists(pred_dir / pred::vqa(sid)))) {
            auto answers = nlohmann::json::parse(read_file(pred_dir / pred::vqa(sid)))
                               .get<std::vector<std::string>>();
            std::vector<std::string> golds;
            for (const auto& [q, a] : gold_vqa_pairs(r)) golds.push_back(a);
            report.add("vqa_acc", vqa_accuracy(answers, golds));
        }
        if (!r.paired.empty()) {
            torch::Tensor gold = load_image(data_dir, r.paired.begin()->second);
            fid_gold.push_back(gold);
            for (int stage : {1, 2}) {
                const std::string tag = "stage" + std::to_string(stage);
                fs::path p = pred_dir / pred::translate(sid, stage);
                if (!track("translate." + tag, sid, fs::exists(p))) continue;
                torch::Tensor img = load_image_grid(p);
                report.add(tag + ".psnr", psnr(img, gold));
                report.add(tag + ".ssim", ssim(img, gold));
                (stage == 1 ? fid_stage1 : fid_stage2).push_back(img);
            }
        }
        if (!r.mask_path.empty()) {
            torch::Tensor gold = load_labels(data_dir, r.mask_path);
            for (int stage : {1, 2}) {
                const std::string tag = "stage" + std::to_string(stage);
                fs::path p = pred_dir / pred::labels(sid, stage);
                if (!track("segment." + tag, sid, fs::exists(p))) continue;
                torch::Tensor labels = load_raw_tensor(p).tensor.to(torch::kInt64);
                for (Region region : {Region::WT, Region::TC, Region::ET})
                    report.add(tag + ".dice." + to_string(region), dice(labels, gold, region));
            }
        }
    }

    char buf[128];
    std::string out = "== metrics ==\n" + report.render();
    for (const std::string& tag : {std::string("stage1"), std::string("stage2")}) {
        if (report.has(tag + ".dice.WT") && report.has(tag + ".dice.TC") &&
            report.has(tag + ".dice.ET")) {
            double avg = (report.mean(tag + ".dice.WT") + report.mean(tag + ".dice.TC") +
                          report.mean(tag + ".dice.ET")) /
                         3.0;
            std::snprintf(buf, sizeof(buf), "%-26s %9.4f\n", (tag + ".dice.Avg").c_str(), avg);
            out += buf;
        }
    }
    if (!vq_path.empty()) {
        FeatureExtractor extractor = vq_feature_extractor(load_vq_checkpoint(vq_path).model);
        auto fid_line = [&](const std::string& name, const std::vector<torch::Tensor>& set) {
            if (set.size() < 2 || fid_gold.size() < 2) return;
            FidResult f = fid(set, fid_gold, extractor);
            std::snprintf(buf, sizeof(buf), "%-26s %9.4f%s\n", name.c_str(), f.value,
                          f.regularized ? "  (covariance regularized)" : "");
            out += buf;
        };
        fid_line("stage1.fid", fid_stage1);
        fid_line("stage2.fid", fid_stage2);
    }

    out += "== coverage ==\n";
    for (const auto& [kind, tally] : coverage) {
        int total = tally.present + static_cast<int>(tally.missing.size());
        std::snprintf(buf, sizeof(buf), "%-20s %d/%d%s\n", kind.c_str(), tally.present, total,
                      tally.present == 0 ? "  (no predictions)" : "");
        out += buf;
    }
    out += "== gaps ==\n";
    bool any_gap = false;
    for (const auto& [kind, tally] : coverage) {
        if (tally.present == 0) continue;  // kind absent entirely, called out above
        for (const std::string& sid : tally.missing) {
            out += kind + "\t" + sid + "\n";
            any_gap = true;
        }
    }
    if (!any_gap) out += "none\n";
    return out;
}

}  // namespace mmtf
