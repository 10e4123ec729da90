#include "mmtf/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

namespace {

// 0 success, 2 usage/config, 3 missing dependency, 4 runtime failure
int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const mmtf::ConfigError*>(&e)) return 2;
    if (dynamic_cast<const mmtf::InvalidInput*>(&e)) return 2;
    if (dynamic_cast<const mmtf::DependencyError*>(&e)) return 3;
    return 4;
}

void apply_override(mmtf::RunConfig& cfg, const std::string& kv) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
        throw mmtf::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(mmtf::trim(kv.substr(0, eq)), mmtf::trim(kv.substr(eq + 1)));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale unified multimodal medical model"};
    app.require_subcommand(1);

    std::string config_path, seed_str;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--set", overrides, "config override (key=value, repeatable; beats --config)");
    app.add_option("--seed", seed_str, "root seed (beats --config and MMTF_SEED)");

    auto* synth = app.add_subcommand("synth-data", "synthesize the phantom slice corpus");
    std::string synth_out;
    int64_t n_subjects = -1;
    synth->add_option("--out-dir", synth_out, "corpus output directory")->required();
    synth->add_option("--n-subjects", n_subjects, "phantom count (default from config)");

    auto* datagen = app.add_subcommand("datagen", "generate report/VQA text via judged candidates");
    std::string dg_manifest, dg_out = "datagen.jsonl", dg_judge, dg_refiner, dg_clients;
    double dg_threshold = -1.0;
    datagen->add_option("--manifest", dg_manifest, "corpus manifest")->required();
    datagen->add_option("--out", dg_out, "output records path (JSONL)");
    datagen->add_option("--clients", dg_clients, "comma-separated generator specs (mock:<tag>)")
        ->required();
    datagen->add_option("--judge", dg_judge, "judge client spec")->required();
    datagen->add_option("--refiner", dg_refiner, "refiner client spec (default: the judge)");
    datagen->add_option("--threshold", dg_threshold, "mean-score acceptance threshold");

    auto* train = app.add_subcommand("train", "train one stage");
    train->require_subcommand(1);
    std::string tr_data, tr_out = "runs", tr_vq, tr_resume;
    for (const char* name : {"vq", "lm", "skip"}) {
        auto* sub = train->add_subcommand(name);
        sub->add_option("--data-dir", tr_data, "corpus directory (with manifest.jsonl)")
            ->required();
        sub->add_option("--out-dir", tr_out, "checkpoint/log output directory");
        sub->add_option("--resume", tr_resume, "checkpoint to continue from");
        if (std::string(name) != "vq")
            sub->add_option("--vq", tr_vq, "stage 0 tokenizer checkpoint");
    }

    auto* infer = app.add_subcommand("infer", "run task inference over a manifest");
    infer->require_subcommand(1);
    std::string in_manifest, in_out = "predictions", in_vq, in_lm, in_vocab, in_skip;
    int64_t in_limit = -1;
    for (const char* name : {"report", "vqa", "translate", "segment"}) {
        auto* sub = infer->add_subcommand(name);
        sub->add_option("--manifest", in_manifest)->required();
        sub->add_option("--out-dir", in_out, "prediction output directory");
        sub->add_option("--vq", in_vq, "tokenizer checkpoint")->required();
        sub->add_option("--lm", in_lm, "language model checkpoint")->required();
        sub->add_option("--vocab", in_vocab, "vocab manifest (default: next to --lm)");
        sub->add_option("--skip", in_skip, "stage II refiner checkpoint (optional)");
        sub->add_option("--limit", in_limit, "cap the number of records");
    }

    auto* evaluate = app.add_subcommand("evaluate", "score predictions against the manifest");
    std::string ev_manifest, ev_pred, ev_out = "metrics.txt", ev_vq;
    evaluate->add_option("--manifest", ev_manifest)->required();
    evaluate->add_option("--pred-dir", ev_pred, "prediction directory")->required();
    evaluate->add_option("--out", ev_out, "metric report path");
    evaluate->add_option("--vq", ev_vq, "tokenizer checkpoint (enables FID)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        mmtf::RunConfig cfg;
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const std::string& kv : overrides) apply_override(cfg, kv);
        if (!seed_str.empty()) cfg.set("seed", seed_str);
        std::cerr << "-- resolved config --\n" << cfg.resolved();

        if (synth->parsed()) {
            if (n_subjects < 0) n_subjects = cfg.get_int("synth.n_subjects");
            auto manifest = mmtf::run_synth_data(cfg, synth_out, n_subjects);
            std::cout << manifest.string() << "\n";
        } else if (datagen->parsed()) {
            if (dg_threshold < 0) dg_threshold = cfg.get_double("datagen.threshold");
            auto out = mmtf::run_datagen(cfg, dg_manifest, dg_out, mmtf::split(dg_clients, ','),
                                         dg_judge, dg_refiner, dg_threshold);
            std::cout << out.string() << "\n";
        } else if (train->parsed()) {
            mmtf::TrainResult result;
            if (train->get_subcommand("vq")->parsed()) {
                result = mmtf::train_vq(cfg, tr_data, tr_out, tr_resume);
            } else if (train->get_subcommand("lm")->parsed()) {
                auto lm = mmtf::train_lm(cfg, tr_data, tr_vq, tr_out, tr_resume);
                result = {lm.checkpoint, lm.losses};
            } else {
                result = mmtf::train_skip(cfg, tr_data, tr_vq, tr_out, tr_resume);
            }
            if (!result.losses.empty())
                std::cerr << "final loss: " << result.losses.back() << "\n";
            std::cout << result.checkpoint.string() << "\n";
        } else if (infer->parsed()) {
            if (in_vocab.empty())
                in_vocab = (std::filesystem::path(in_lm).parent_path() / "vocab.txt").string();
            mmtf::InferStack stack = mmtf::load_infer_stack(in_vq, in_lm, in_vocab, in_skip);
            mmtf::Task task = mmtf::parse_task(infer->get_subcommands().front()->get_name());
            mmtf::run_infer(task, in_manifest, in_out, stack, in_limit);
            std::cout << in_out << "\n";
        } else if (evaluate->parsed()) {
            std::string report = mmtf::run_evaluate(cfg, ev_manifest, ev_pred, ev_vq);
            mmtf::atomic_write_file(ev_out, report);
            std::cout << report;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}
