// torch first: c10's logging shims would otherwise clobber Catch2's CHECK
#include "mmtf/pipeline.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <string>

using namespace mmtf;
namespace fs = std::filesystem;

namespace {

RunConfig micro_cfg() {
    RunConfig cfg;
    cfg.set("seed", "11");
    cfg.set("vq.codebook_size", "32");
    cfg.set("vq.code_dim", "8");
    cfg.set("vq.channels", "4,8,8,8");
    cfg.set("vq.steps", "4");
    cfg.set("vq.lr", "1e-4");
    cfg.set("vq.disc_lr", "1e-4");
    cfg.set("lm.d_e", "32");
    cfg.set("lm.n_layers", "1");
    cfg.set("lm.n_heads", "2");
    cfg.set("lm.context", "448");
    cfg.set("lm.steps", "3");
    cfg.set("lm.lr", "1e-3");
    cfg.set("vocab.k_img", "32");
    cfg.set("skip.p_len", "2");
    cfg.set("skip.d_txt", "32");
    cfg.set("skip.steps", "2");
    cfg.set("skip.batch_size", "1");
    cfg.set("skip.lr", "1e-3");
    cfg.set("synth.val_frac", "0");
    cfg.set("synth.test_frac", "0");
    cfg.set("synth.depth", "24");
    cfg.set("synth.height", "96");
    cfg.set("synth.width", "96");
    return cfg;
}

// One shared micro run: corpus -> vq -> lm -> skip, built once on first use.
struct Fixture {
    fs::path root, data_dir, run_dir;
    RunConfig cfg = micro_cfg();
    fs::path manifest, vq_ckpt, lm_ckpt, vocab, skip_ckpt;
};

const Fixture& fx() {
    static Fixture f = [] {
        Fixture f;
        f.root = fs::temp_directory_path() / "mmtf_pipeline_fx";
        fs::remove_all(f.root);
        f.data_dir = f.root / "corpus";
        f.run_dir = f.root / "run";
        f.manifest = run_synth_data(f.cfg, f.data_dir, 2);
        TrainResult vq = train_vq(f.cfg, f.data_dir, f.run_dir);
        f.vq_ckpt = vq.checkpoint;
        LmArtifacts lm = train_lm(f.cfg, f.data_dir, f.vq_ckpt, f.run_dir);
        f.lm_ckpt = lm.checkpoint;
        f.vocab = lm.vocab_manifest;
        TrainResult skip = train_skip(f.cfg, f.data_dir, f.vq_ckpt, f.run_dir);
        f.skip_ckpt = skip.checkpoint;
        return f;
    }();
    return f;
}

size_t line_count(const fs::path& p) {
    size_t n = 0;
    for (const std::string& line : split(read_file(p), '\n'))
        if (!trim(line).empty()) ++n;
    return n;
}

}  // namespace

TEST_CASE("record selection respects split fractions and caps", "[pipeline]") {
    const Fixture& f = fx();
    auto all = read_manifest(f.manifest);
    CHECK(all.size() >= 12);  // 2 subjects x >=3 slices x 2 modalities

    auto train = select_train_records(f.cfg, f.data_dir);
    CHECK(train.size() == all.size());  // fractions are zero in the fixture

    RunConfig capped = micro_cfg();
    capped.set("data.max_train_samples", "3");
    CHECK(select_train_records(capped, f.data_dir).size() == 3);
}

TEST_CASE("batch selection is a pure function of seed and step", "[pipeline]") {
    auto a = batch_indices(7, 3, 10, 4);
    auto b = batch_indices(7, 3, 10, 4);
    CHECK(a == b);
    CHECK(a != batch_indices(7, 4, 10, 4));
    CHECK(a != batch_indices(8, 3, 10, 4));
    for (size_t i : a) CHECK(i < 10);
    CHECK_THROWS_AS(batch_indices(7, 0, 0, 4), InvalidInput);
    CHECK_THROWS_AS(batch_indices(7, 0, 10, 0), ConfigError);
}

TEST_CASE("stage 0 training emits a checkpoint and loss curve", "[pipeline]") {
    const Fixture& f = fx();
    CHECK(fs::exists(f.vq_ckpt));
    CHECK(line_count(f.run_dir / "vq_loss.tsv") == 5);  // header + 4 steps

    LoadedVq loaded = load_vq_checkpoint(f.vq_ckpt);
    CHECK(loaded.info.step == 4);
    torch::Tensor img = load_image(f.data_dir, read_manifest(f.manifest)[0].image_path);
    torch::Tensor grid = loaded.model->encode(img);
    CHECK(grid.sizes() == torch::IntArrayRef({kGridSide, kGridSide}));
}

TEST_CASE("stage dependencies are enforced by name", "[pipeline]") {
    const Fixture& f = fx();
    CHECK_THROWS_AS(train_lm(f.cfg, f.data_dir, "", f.root / "x"), DependencyError);
    CHECK_THROWS_AS(train_skip(f.cfg, f.data_dir, "", f.root / "x"), DependencyError);
    CHECK_THROWS_AS(train_lm(f.cfg, f.data_dir, f.root / "missing.ckpt", f.root / "x"),
                    DependencyError);

    RunConfig bad = micro_cfg();
    bad.set("vocab.k_img", "64");  // tokenizer codebook is 32
    CHECK_THROWS_AS(train_lm(bad, f.data_dir, f.vq_ckpt, f.root / "x"), ConfigError);
}

TEST_CASE("the instruction dataset covers every enabled task", "[pipeline]") {
    const Fixture& f = fx();
    LoadedVq vq = load_vq_checkpoint(f.vq_ckpt);
    LoadedVocab lv = load_vocab_manifest(f.vocab);
    TemplateLibrary lib = TemplateLibrary::load();
    auto records = select_train_records(f.cfg, f.data_dir);
    auto dataset = build_instruction_dataset(records, f.data_dir, vq.model, lv.tokenizer,
                                             lv.vocab,
                                             lib, {Task::Report, Task::Vqa, Task::Translate,
                                                   Task::Segment},
                                             11, 448);
    CHECK(dataset.size() == records.size() * 6);  // 1 report + 3 vqa + translate + segment

    for (const LmExample& ex : dataset) {
        CHECK(ex.sample.ids.size() == ex.sample.response_mask.size());
        if (ex.sample.task == Task::Translate || ex.sample.task == Task::Segment) {
            CHECK(ex.gold_ids.size() == static_cast<size_t>(kNumImageTokens));
            CHECK(ex.sample.ids.size() == ex.prefix.size() + kNumImageTokens);
        } else {
            CHECK_FALSE(ex.gold_text.empty());
            // the prefix is the sample minus the supervised tail
            CHECK(std::equal(ex.prefix.begin(), ex.prefix.end(), ex.sample.ids.begin()));
        }
    }

    // an undersized context is rejected at dataset build, nonspecific ids never truncate
    CHECK_THROWS_AS(build_instruction_dataset(records, f.data_dir, vq.model, lv.tokenizer,
                                              lv.vocab, lib, {Task::Translate}, 11, 300),
                    ConfigError);
}

TEST_CASE("interrupted training resumes onto the uninterrupted trajectory", "[pipeline]") {
    const Fixture& f = fx();

    // stage 0: 2 + 2 steps vs straight 4
    RunConfig half = micro_cfg();
    half.set("vq.steps", "2");
    fs::path resumed_dir = f.root / "resume_vq";
    TrainResult first = train_vq(half, f.data_dir, resumed_dir);
    TrainResult second = train_vq(micro_cfg(), f.data_dir, resumed_dir, first.checkpoint);
    REQUIRE(second.losses.size() == 2);

    TrainResult straight = train_vq(micro_cfg(), f.data_dir, f.root / "straight_vq");
    REQUIRE(straight.losses.size() == 4);
    CHECK(second.losses[0] == Catch::Approx(straight.losses[2]).margin(1e-6));
    CHECK(second.losses[1] == Catch::Approx(straight.losses[3]).margin(1e-6));

    LoadedVq a = load_vq_checkpoint(second.checkpoint);
    LoadedVq b = load_vq_checkpoint(straight.checkpoint);
    auto pa = a.model->parameters(), pb = b.model->parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i)
        CHECK(torch::allclose(pa[i], pb[i], 0.0, 1e-6));

    // stage I: same protocol
    RunConfig lm_half = micro_cfg();
    lm_half.set("lm.steps", "2");
    fs::path lm_resume_dir = f.root / "resume_lm";
    LmArtifacts lm_first = train_lm(lm_half, f.data_dir, f.vq_ckpt, lm_resume_dir);
    LmArtifacts lm_second =
        train_lm(micro_cfg(), f.data_dir, f.vq_ckpt, lm_resume_dir, lm_first.checkpoint);
    LmArtifacts lm_straight = train_lm(micro_cfg(), f.data_dir, f.vq_ckpt, f.root / "straight_lm");
    REQUIRE(lm_second.losses.size() == 1);
    CHECK(lm_second.losses[0] == Catch::Approx(lm_straight.losses[2]).margin(1e-6));
}

TEST_CASE("stage II training leaves the tokenizer checkpoint untouched", "[pipeline]") {
    const Fixture& f = fx();
    std::string before = file_hash_hex(f.vq_ckpt);
    TrainResult redo = train_skip(f.cfg, f.data_dir, f.vq_ckpt, f.root / "skip_again");
    CHECK(file_hash_hex(f.vq_ckpt) == before);
    CHECK(fs::exists(redo.checkpoint));
    CHECK(load_skip_checkpoint(redo.checkpoint).info.vq_hash == before);
}

TEST_CASE("the inference stack refuses mismatched lineage", "[pipeline]") {
    const Fixture& f = fx();
    InferStack ok = load_infer_stack(f.vq_ckpt, f.lm_ckpt, f.vocab, f.skip_ckpt);
    CHECK(ok.has_skip());

    // a retrained tokenizer no longer matches the lm checkpoint's lineage
    RunConfig other = micro_cfg();
    other.set("seed", "99");
    TrainResult foreign = train_vq(other, f.data_dir, f.root / "foreign_vq");
    CHECK_THROWS_AS(load_infer_stack(foreign.checkpoint, f.lm_ckpt, f.vocab), DependencyError);

    // a tampered vocab manifest is refused too
    fs::path forged = f.root / "forged_vocab.txt";
    atomic_write_file(forged, read_file(f.vocab) + "# trailing note\n");
    CHECK_THROWS_AS(load_infer_stack(f.vq_ckpt, f.lm_ckpt, forged), DependencyError);
}

TEST_CASE("inference writes the per-task prediction files", "[pipeline]") {
    const Fixture& f = fx();
    InferStack stack = load_infer_stack(f.vq_ckpt, f.lm_ckpt, f.vocab, f.skip_ckpt);
    fs::path pred = f.root / "pred";
    for (Task t : {Task::Report, Task::Vqa, Task::Translate, Task::Segment})
        run_infer(t, f.manifest, pred, stack, 2);

    auto records = read_manifest(f.manifest);
    for (int i = 0; i < 2; ++i) {
        const std::string& sid = records[static_cast<size_t>(i)].sample_id;
        CHECK(fs::exists(pred / pred::report(sid)));
        auto answers = nlohmann::json::parse(read_file(pred / pred::vqa(sid)))
                           .get<std::vector<std::string>>();
        CHECK(answers.size() == 3);

        torch::Tensor img = load_image_grid(pred / pred::translate(sid, 1));
        CHECK(img.sizes() == torch::IntArrayRef({1, kImageSize, kImageSize}));
        CHECK(fs::exists(pred / pred::translate(sid, 2)));
        CHECK(fs::exists(pred / (sid + ".figure.pgm")));

        torch::Tensor labels = load_raw_tensor(pred / pred::labels(sid, 1)).tensor;
        CHECK(labels.min().item<int>() >= 0);
        CHECK(labels.max().item<int>() <= 3);
        CHECK(fs::exists(pred / pred::labels(sid, 2)));
    }
}

TEST_CASE("an untrained refiner leaves stage II output bit-identical to stage I", "[pipeline]") {
    const Fixture& f = fx();
    RunConfig zero = micro_cfg();
    zero.set("skip.steps", "0");
    TrainResult blank = train_skip(zero, f.data_dir, f.vq_ckpt, f.root / "skip_zero");

    InferStack stack = load_infer_stack(f.vq_ckpt, f.lm_ckpt, f.vocab, blank.checkpoint);
    auto records = read_manifest(f.manifest);
    torch::Tensor image = load_image(f.data_dir, records[0].image_path);
    TranslateOutput out = infer_translate(stack, TemplateLibrary::load(), image,
                                          records[0].modality, records[0].paired.begin()->first);
    REQUIRE(out.stage2.defined());
    CHECK(torch::equal(out.stage1, out.stage2));
}

TEST_CASE("evaluating gold predictions against themselves is perfect", "[pipeline]") {
    const Fixture& f = fx();
    TemplateLibrary lib = TemplateLibrary::load();
    auto records = read_manifest(f.manifest);
    fs::path pred = f.root / "gold_pred";
    for (const SampleRecord& r : records) {
        atomic_write_file(pred / pred::report(r.sample_id),
                          gold_report_text(r, lib, f.cfg.root_seed()) + "\n");
        std::vector<std::string> answers;
        for (const auto& [q, a] : gold_vqa_pairs(r)) answers.push_back(a);
        atomic_write_file(pred / pred::vqa(r.sample_id), nlohmann::json(answers).dump() + "\n");
        save_image_grid(pred / pred::translate(r.sample_id, 1),
                        load_image(f.data_dir, r.paired.begin()->second));
        save_raw_tensor(pred / pred::labels(r.sample_id, 1),
                        load_labels(f.data_dir, r.mask_path));
    }

    std::string report = run_evaluate(f.cfg, f.manifest, pred, f.vq_ckpt);
    CHECK(report.find("rouge_l") != std::string::npos);
    CHECK(report.find("vqa_acc") != std::string::npos);
    CHECK(report.find("stage1.dice.Avg") != std::string::npos);
    CHECK(report.find("stage1.fid") != std::string::npos);
    CHECK(report.find("inf") != std::string::npos);  // psnr of identical images

    MetricReport check;  // spot-verify the numbers behind the rendering
    for (const SampleRecord& r : records) {
        check.add("rouge", rouge_l(gold_report_text(r, lib, f.cfg.root_seed()),
                                   gold_report_text(r, lib, f.cfg.root_seed())));
        check.add("dice", dice(load_labels(f.data_dir, r.mask_path),
                               load_labels(f.data_dir, r.mask_path), Region::WT));
    }
    CHECK(check.mean("rouge") == 1.0);
    CHECK(check.mean("dice") == 1.0);
    CHECK(report.find(" 1.0000") != std::string::npos);

    CHECK(run_evaluate(f.cfg, f.manifest, pred, f.vq_ckpt) == report);  // byte-identical re-run

    // partial predictions are reported as explicit gaps
    fs::remove(pred / pred::report(records[0].sample_id));
    std::string partial = run_evaluate(f.cfg, f.manifest, pred, f.vq_ckpt);
    CHECK(partial.find("report\t" + records[0].sample_id) != std::string::npos);
}

TEST_CASE("an empty manifest evaluates to an empty report", "[pipeline]") {
    const Fixture& f = fx();
    fs::path empty = f.root / "empty_manifest.jsonl";
    atomic_write_file(empty, "");
    std::string report = run_evaluate(f.cfg, empty, f.root / "no_pred");
    CHECK(report.find("== metrics ==") != std::string::npos);
    CHECK(report.find("none") != std::string::npos);
}
