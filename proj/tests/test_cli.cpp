// Drives the installed binary through a shell; MMTF_CLI_PATH comes from the build.
#include "mmtf/common.hpp"
#include "mmtf/records.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

using namespace mmtf;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out, err;
};

const fs::path& work_dir() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "mmtf_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

RunResult run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    fs::path out = work_dir() / ("stdout." + std::to_string(counter));
    fs::path err = work_dir() / ("stderr." + std::to_string(counter));
    ++counter;
    std::string cmd = (env.empty() ? "" : env + " ") + MMTF_CLI_PATH + " " + args + " > " +
                      out.string() + " 2> " + err.string();
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return {WEXITSTATUS(status), read_file(out), read_file(err)};
}

// micro settings so shelled-out training finishes in seconds
const std::string kTiny =
    " --set synth.depth=24 --set synth.height=96 --set synth.width=96"
    " --set synth.val_frac=0 --set synth.test_frac=0"
    " --set vq.codebook_size=32 --set vq.code_dim=8 --set vq.channels=4,8,8,8"
    " --set vq.steps=2 --set lm.d_e=32 --set lm.n_layers=1 --set lm.n_heads=2"
    " --set lm.context=448 --set lm.steps=2 --set vocab.k_img=32"
    " --set skip.p_len=2 --set skip.d_txt=32 --set skip.steps=1 --set skip.batch_size=1";

fs::path tiny_corpus() {
    static fs::path dir = [] {
        fs::path d = work_dir() / "corpus";
        RunResult r = run_cli("--seed 7" + kTiny + " synth-data --out-dir " + d.string() +
                              " --n-subjects 2");
        REQUIRE(r.code == 0);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("corpus generation is reproducible from the command line", "[cli]") {
    fs::path a = tiny_corpus();
    fs::path b = work_dir() / "corpus_again";
    fs::path c = work_dir() / "corpus_seed8";
    fs::path d = work_dir() / "corpus_env";

    std::string tail = kTiny + " synth-data --n-subjects 2 --out-dir ";
    CHECK(run_cli("--seed 7" + tail + b.string()).code == 0);
    CHECK(run_cli("--seed 8" + tail + c.string()).code == 0);
    CHECK(run_cli(tail + d.string(), "MMTF_SEED=7").code == 0);

    std::string gold = read_file(a / "manifest.jsonl");
    CHECK(read_file(b / "manifest.jsonl") == gold);
    CHECK(read_file(d / "manifest.jsonl") == gold);  // env var names the same root seed
    CHECK(read_file(c / "manifest.jsonl") != gold);
}

TEST_CASE("bad invocations exit with the usage code", "[cli]") {
    CHECK(run_cli("synth-data").code == 2);  // --out-dir is required
    CHECK(run_cli("").code == 2);
    CHECK(run_cli("synth-data --out-dir /tmp/x --bogus 1").code == 2);
    CHECK(run_cli("--set nonsense.key=1 synth-data --out-dir /tmp/x --n-subjects 0").code == 2);
    CHECK(run_cli("--set seed7 synth-data --out-dir /tmp/x --n-subjects 0").code == 2);

    RunResult help = run_cli("--help");
    CHECK(help.code == 0);
    CHECK(help.out.find("synth-data") != std::string::npos);
}

TEST_CASE("zero subjects is an empty corpus, not an error", "[cli]") {
    fs::path dir = work_dir() / "corpus_empty";
    RunResult r = run_cli("synth-data --out-dir " + dir.string() + " --n-subjects 0");
    CHECK(r.code == 0);
    CHECK(read_manifest(dir / "manifest.jsonl").empty());
}

TEST_CASE("a missing tokenizer is a dependency failure, not usage", "[cli]") {
    std::string base = kTiny + " train lm --data-dir " + tiny_corpus().string() + " --out-dir " +
                       (work_dir() / "nofwd").string();
    RunResult r = run_cli(base);
    CHECK(r.code == 3);
    CHECK(r.err.find("vq checkpoint") != std::string::npos);
    CHECK(run_cli(base + " --vq /nonexistent.ckpt").code == 3);
}

TEST_CASE("flags beat --set which beats the config file", "[cli]") {
    fs::path cfg = work_dir() / "run.cfg";
    atomic_write_file(cfg, "seed=5\n");
    std::string tail = " synth-data --out-dir " + (work_dir() / "prec").string() +
                       " --n-subjects 0";
    CHECK(run_cli("--config " + cfg.string() + tail).err.find("\nseed=5\n") != std::string::npos);
    CHECK(run_cli("--config " + cfg.string() + " --set seed=7" + tail).err.find("\nseed=7\n") !=
          std::string::npos);
    CHECK(run_cli("--config " + cfg.string() + " --set seed=7 --seed 9" + tail)
              .err.find("\nseed=9\n") != std::string::npos);
}

TEST_CASE("the full stage chain runs from the shell", "[cli]") {
    fs::path corpus = tiny_corpus();
    fs::path run = work_dir() / "run";
    std::string common = "--seed 7" + kTiny;

    RunResult vq = run_cli(common + " train vq --data-dir " + corpus.string() + " --out-dir " +
                           run.string());
    REQUIRE(vq.code == 0);
    fs::path vq_ckpt = trim(vq.out);
    CHECK(fs::exists(vq_ckpt));

    RunResult lm = run_cli(common + " train lm --data-dir " + corpus.string() + " --out-dir " +
                           run.string() + " --vq " + vq_ckpt.string());
    REQUIRE(lm.code == 0);
    fs::path lm_ckpt = trim(lm.out);

    RunResult skip = run_cli(common + " train skip --data-dir " + corpus.string() +
                             " --out-dir " + run.string() + " --vq " + vq_ckpt.string());
    REQUIRE(skip.code == 0);

    fs::path pred = work_dir() / "pred";
    std::string stack = " --vq " + vq_ckpt.string() + " --lm " + lm_ckpt.string() + " --skip " +
                        trim(skip.out);  // --vocab defaults to the manifest beside --lm
    RunResult inf = run_cli(common + " infer report --manifest " +
                            (corpus / "manifest.jsonl").string() + " --out-dir " + pred.string() +
                            " --limit 1" + stack);
    REQUIRE(inf.code == 0);
    auto first = read_manifest(corpus / "manifest.jsonl")[0].sample_id;
    CHECK(fs::exists(pred / (first + ".report.txt")));

    fs::path metrics = work_dir() / "metrics.txt";
    std::string ev = common + " evaluate --manifest " + (corpus / "manifest.jsonl").string() +
                     " --pred-dir " + pred.string() + " --out " + metrics.string();
    RunResult e1 = run_cli(ev);
    REQUIRE(e1.code == 0);
    CHECK(read_file(metrics) == e1.out);
    CHECK(run_cli(ev).out == e1.out);  // re-running the report is byte-identical
}

TEST_CASE("text generation runs are byte-reproducible with mock clients", "[cli]") {
    std::string base = "--seed 3 datagen --manifest " +
                       (tiny_corpus() / "manifest.jsonl").string() +
                       " --clients mock:alpha,mock:beta --judge mock:judge --out ";
    fs::path d1 = work_dir() / "d1.jsonl", d2 = work_dir() / "d2.jsonl";
    REQUIRE(run_cli(base + d1.string()).code == 0);
    REQUIRE(run_cli(base + d2.string()).code == 0);
    CHECK(read_file(d1) == read_file(d2));
    CHECK(!read_file(d1).empty());

    std::string head = "datagen --manifest " + (tiny_corpus() / "manifest.jsonl").string();
    CHECK(run_cli(head + " --clients openai:gpt --judge mock:judge --out /tmp/dx.jsonl").code ==
          2);
    CHECK(run_cli(head + " --clients mock:alpha --judge mock:fail-j --out /tmp/dx.jsonl").code ==
          3);
}

TEST_CASE("evaluating an empty manifest yields an empty report", "[cli]") {
    fs::path manifest = work_dir() / "empty.jsonl";
    atomic_write_file(manifest, "");
    fs::path out = work_dir() / "empty_metrics.txt";
    RunResult r = run_cli("evaluate --manifest " + manifest.string() + " --pred-dir /tmp/nopred" +
                          " --out " + out.string());
    CHECK(r.code == 0);
    CHECK(r.out.find("none") != std::string::npos);
}
