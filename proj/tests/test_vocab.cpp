#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "mmtf/unified_vocab.hpp"

using namespace mmtf;

namespace {
// Published full-scale sizes; toy runs use smaller k_text but the offset
// arithmetic is identical.
constexpr int64_t kPaperKText = 50821;
constexpr int64_t kPaperKImg = 1024;
}  // namespace

TEST_CASE("image/lm id offset arithmetic at published sizes", "[vocab]") {
    UnifiedVocab v(kPaperKText, kPaperKImg);
    CHECK(v.total() == 51845);
    CHECK(v.image_id_to_lm(0) == 50821);
    CHECK(v.image_id_to_lm(1023) == 51844);
    CHECK_THROWS_AS(v.image_id_to_lm(1024), InvalidInput);
    CHECK_THROWS_AS(v.image_id_to_lm(-1), InvalidInput);

    CHECK(v.lm_id_to_image(50821) == 0);
    CHECK_THROWS_AS(v.lm_id_to_image(50820), InvalidInput);  // text id
    CHECK_THROWS_AS(v.lm_id_to_image(51845), InvalidInput);  // past the end
}

TEST_CASE("round trip is the identity on the whole image range", "[vocab]") {
    UnifiedVocab v(kPaperKText, kPaperKImg);
    for (int64_t i = 0; i < kPaperKImg; ++i) CHECK(v.lm_id_to_image(v.image_id_to_lm(i)) == i);
}

TEST_CASE("classify partitions the id space", "[vocab]") {
    UnifiedVocab v(kPaperKText, kPaperKImg);
    CHECK(v.classify(51844) == TokenKind::Image);
    CHECK(v.classify(5) == TokenKind::Text);
    CHECK(v.classify(v.specials().seg) == TokenKind::Special);
    CHECK(v.classify(v.specials().input) == TokenKind::Special);
    CHECK(v.classify(v.specials().output) == TokenKind::Special);
    CHECK_THROWS_AS(v.classify(51845), InvalidInput);
    CHECK_THROWS_AS(v.classify(-1), InvalidInput);

    // exhaustive partition scan at toy scale: each id has exactly one kind and
    // the ranges line up with the arithmetic
    UnifiedVocab toy(64, 16);
    int specials = 0, text = 0, image = 0;
    for (int64_t id = 0; id < toy.total(); ++id) {
        switch (toy.classify(id)) {
            case TokenKind::Special: ++specials; break;
            case TokenKind::Text: ++text; break;
            case TokenKind::Image: ++image; break;
        }
        if (toy.classify(id) == TokenKind::Image) CHECK(id >= toy.k_text());
    }
    CHECK(specials == 3);
    CHECK(text == 64 - 3);
    CHECK(image == 16);
}

TEST_CASE("error diagnosis names the offending kind", "[vocab]") {
    UnifiedVocab v(kPaperKText, kPaperKImg);
    try {
        v.lm_id_to_image(v.specials().seg);
        FAIL("expected throw");
    } catch (const InvalidInput& e) {
        CHECK(std::string(e.what()).find("special") != std::string::npos);
    }
}

TEST_CASE("constructor validates sizes and special ids", "[vocab]") {
    CHECK_THROWS_AS(UnifiedVocab(0, 16), InvalidInput);
    CHECK_THROWS_AS(UnifiedVocab(64, 0), InvalidInput);
    CHECK_THROWS_AS(UnifiedVocab(64, 16, SpecialTokens{2, 2, 4}), InvalidInput);
    CHECK_THROWS_AS(UnifiedVocab(64, 16, SpecialTokens{2, 3, 64}), InvalidInput);
}

TEST_CASE("make_token_seq labels are range-consistent", "[vocab]") {
    UnifiedVocab v(64, 16);
    TokenSeq seq = make_token_seq(v, {5, 63, 64, 79, v.specials().output});
    REQUIRE(seq.size() == 5);
    CHECK(seq.kinds[0] == TokenKind::Text);
    CHECK(seq.kinds[1] == TokenKind::Text);
    CHECK(seq.kinds[2] == TokenKind::Image);
    CHECK(seq.kinds[3] == TokenKind::Image);
    CHECK(seq.kinds[4] == TokenKind::Special);
}

TEST_CASE("tokenizer round-trips template text", "[vocab]") {
    ByteTokenizer tok = default_tokenizer();
    CHECK(tok.encode_text("").empty());
    CHECK(tok.decode_text({}) == "");

    std::string s = "Convert the input brain MR image from T1 into a brain MR image in T2.";
    auto ids = tok.encode_text(s);
    CHECK(tok.decode_text(ids) == s);
    for (int64_t id : ids) {
        CHECK(id >= ByteTokenizer::kNumReserved);
        CHECK(id < tok.k_text());
    }
}

TEST_CASE("tokenizer round-trips 1000 random supported strings", "[vocab]") {
    ByteTokenizer tok = default_tokenizer();
    const std::string& alphabet = tok.alphabet();
    std::mt19937_64 rng(20240817);
    std::uniform_int_distribution<size_t> pick(0, alphabet.size() - 1);
    std::uniform_int_distribution<size_t> len(0, 60);
    for (int trial = 0; trial < 1000; ++trial) {
        std::string s;
        size_t n = len(rng);
        for (size_t i = 0; i < n; ++i) s += alphabet[pick(rng)];
        auto ids = tok.encode_text(s);
        REQUIRE(tok.decode_text(ids) == s);
        for (int64_t id : ids) REQUIRE(id < tok.k_text());
    }
}

TEST_CASE("unsupported characters map to the reserved unk id", "[vocab]") {
    ByteTokenizer tok = default_tokenizer();
    auto ids = tok.encode_text("a\tb");
    REQUIRE(ids.size() == 3);
    CHECK(ids[1] == ByteTokenizer::kUnk);
    CHECK(tok.decode_text(ids) == "a<unk>b");
}

TEST_CASE("vocab manifest round-trips bit-exactly", "[vocab]") {
    namespace fs = std::filesystem;
    ByteTokenizer tok = default_tokenizer();
    fs::path path = fs::temp_directory_path() / "mmtf_vocab_test.txt";
    tok.save_manifest(path, 1024);

    auto loaded = load_vocab_manifest(path);
    CHECK(loaded.tokenizer.alphabet() == tok.alphabet());
    CHECK(loaded.tokenizer.merges() == tok.merges());
    CHECK(loaded.tokenizer.k_text() == tok.k_text());
    CHECK(loaded.vocab.k_img() == 1024);
    CHECK(loaded.vocab.total() == tok.k_text() + 1024);

    // saving the loaded tokenizer reproduces the file byte-for-byte
    fs::path path2 = fs::temp_directory_path() / "mmtf_vocab_test2.txt";
    loaded.tokenizer.save_manifest(path2, 1024);
    CHECK(read_file(path) == read_file(path2));
    CHECK(ByteTokenizer::manifest_hash(path) == ByteTokenizer::manifest_hash(path2));
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("default toy vocab keeps specials consistent with the tokenizer", "[vocab]") {
    ByteTokenizer tok = default_tokenizer();
    UnifiedVocab v = default_vocab(tok);
    CHECK(v.k_text() == 512);
    CHECK(v.k_img() == 1024);
    CHECK(v.specials().input == ByteTokenizer::kInput);
    CHECK(v.specials().output == ByteTokenizer::kOutput);
    CHECK(v.specials().seg == ByteTokenizer::kSeg);
}
