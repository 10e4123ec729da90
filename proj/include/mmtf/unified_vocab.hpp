#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mmtf/common.hpp"

namespace mmtf {

enum class TokenKind { Text, Image, Special };

inline const char* to_string(TokenKind k) {
    switch (k) {
        case TokenKind::Text: return "text";
        case TokenKind::Image: return "image";
        default: return "special";
    }
}

struct SpecialTokens {
    int64_t input = 2;
    int64_t output = 3;
    int64_t seg = 4;
};

// Single source of truth for the extended token space. Text IDs occupy
// [0, k_text), image IDs occupy [k_text, k_text + k_img); the three control
// tokens are reserved IDs inside the text range so the total stays
// k_text + k_img.
class UnifiedVocab {
  public:
    UnifiedVocab(int64_t k_text, int64_t k_img, SpecialTokens specials = {})
        : k_text_(k_text), k_img_(k_img), specials_(specials) {
        if (k_text <= 0 || k_img <= 0) throw InvalidInput("vocab sizes must be positive");
        if (specials.input == specials.output || specials.input == specials.seg ||
            specials.output == specials.seg)
            throw InvalidInput("special token ids must be pairwise distinct");
        for (int64_t id : {specials.input, specials.output, specials.seg})
            if (id < 0 || id >= k_text)
                throw InvalidInput("special token id outside text range: " + std::to_string(id));
    }

    int64_t k_text() const { return k_text_; }
    int64_t k_img() const { return k_img_; }
    int64_t total() const { return k_text_ + k_img_; }
    const SpecialTokens& specials() const { return specials_; }

    // VQ index -> LM token ID (adds k_text)
    int64_t image_id_to_lm(int64_t vq_index) const {
        if (vq_index < 0 || vq_index >= k_img_)
            throw InvalidInput("vq index out of range [0," + std::to_string(k_img_) +
                               "): " + std::to_string(vq_index));
        return vq_index + k_text_;
    }

    // LM token ID -> VQ index (subtracts k_text)
    int64_t lm_id_to_image(int64_t lm_token_id) const {
        if (lm_token_id < k_text_ || lm_token_id >= total())
            throw InvalidInput("token id " + std::to_string(lm_token_id) +
                               " is not an image token (kind: " +
                               to_string(classify(lm_token_id)) + ")");
        return lm_token_id - k_text_;
    }

    TokenKind classify(int64_t lm_token_id) const {
        if (lm_token_id < 0 || lm_token_id >= total())
            throw InvalidInput("token id out of vocab: " + std::to_string(lm_token_id));
        if (lm_token_id == specials_.input || lm_token_id == specials_.output ||
            lm_token_id == specials_.seg)
            return TokenKind::Special;
        return lm_token_id < k_text_ ? TokenKind::Text : TokenKind::Image;
    }

  private:
    int64_t k_text_;
    int64_t k_img_;
    SpecialTokens specials_;
};

struct TokenSeq {
    std::vector<int64_t> ids;
    std::vector<TokenKind> kinds;

    size_t size() const { return ids.size(); }
};

inline TokenSeq make_token_seq(const UnifiedVocab& vocab, std::vector<int64_t> ids) {
    TokenSeq seq;
    seq.kinds.reserve(ids.size());
    for (int64_t id : ids) seq.kinds.push_back(vocab.classify(id));
    seq.ids = std::move(ids);
    return seq;
}

// Byte-level toy text tokenizer over a declared alphabet plus a small merges
// table (longest-match substrings). Fixed reserved IDs, then one ID per
// alphabet character, then one per merge; everything stays below k_text.
class ByteTokenizer {
  public:
    static constexpr int64_t kUnk = 0;
    static constexpr int64_t kEos = 1;
    static constexpr int64_t kInput = 2;
    static constexpr int64_t kOutput = 3;
    static constexpr int64_t kSeg = 4;
    static constexpr int64_t kPad = 5;
    static constexpr int64_t kNumReserved = 6;

    ByteTokenizer(int64_t k_text, std::string alphabet, std::vector<std::string> merges)
        : k_text_(k_text), alphabet_(std::move(alphabet)), merges_(std::move(merges)) {
        int64_t used = kNumReserved + static_cast<int64_t>(alphabet_.size() + merges_.size());
        if (used > k_text_)
            throw InvalidInput("tokenizer needs " + std::to_string(used) +
                               " ids but k_text is " + std::to_string(k_text_));
        for (size_t i = 0; i < alphabet_.size(); ++i) {
            char c = alphabet_[i];
            if (char_to_id_.count(c)) throw InvalidInput("duplicate alphabet character");
            char_to_id_[c] = kNumReserved + static_cast<int64_t>(i);
        }
        int64_t next = kNumReserved + static_cast<int64_t>(alphabet_.size());
        for (size_t i = 0; i < merges_.size(); ++i) {
            const std::string& m = merges_[i];
            if (m.size() < 2) throw InvalidInput("merge shorter than 2 chars: " + m);
            for (char c : m)
                if (!char_to_id_.count(c))
                    throw InvalidInput("merge uses character outside alphabet: " + m);
            merge_ids_.push_back(next + static_cast<int64_t>(i));
        }
        // longest-first for the greedy matcher; ties keep declaration order
        match_order_.resize(merges_.size());
        std::iota(match_order_.begin(), match_order_.end(), size_t{0});
        std::stable_sort(match_order_.begin(), match_order_.end(), [&](size_t a, size_t b) {
            return merges_[a].size() > merges_[b].size();
        });
    }

    int64_t k_text() const { return k_text_; }
    const std::string& alphabet() const { return alphabet_; }
    const std::vector<std::string>& merges() const { return merges_; }

    std::vector<int64_t> encode_text(const std::string& s) const {
        std::vector<int64_t> out;
        size_t pos = 0;
        while (pos < s.size()) {
            bool matched = false;
            for (size_t mi : match_order_) {
                const std::string& m = merges_[mi];
                if (s.compare(pos, m.size(), m) == 0) {
                    out.push_back(merge_ids_[mi]);
                    pos += m.size();
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
            auto it = char_to_id_.find(s[pos]);
            out.push_back(it == char_to_id_.end() ? kUnk : it->second);
            ++pos;
        }
        return out;
    }

    std::string decode_text(const std::vector<int64_t>& ids) const {
        std::string out;
        for (int64_t id : ids) out += decode_one(id);
        return out;
    }

    std::string decode_one(int64_t id) const {
        if (id < 0 || id >= k_text_)
            throw InvalidInput("not a text token id: " + std::to_string(id));
        switch (id) {
            case kUnk: return "<unk>";
            case kEos: return "";
            case kInput: return "<input>";
            case kOutput: return "<output>";
            case kSeg: return "<seg>";
            case kPad: return "";
            default: break;
        }
        int64_t ci = id - kNumReserved;
        if (ci < static_cast<int64_t>(alphabet_.size())) return std::string(1, alphabet_[ci]);
        int64_t mi = ci - static_cast<int64_t>(alphabet_.size());
        if (mi < static_cast<int64_t>(merges_.size())) return merges_[mi];
        return "";  // reserved, never produced by encode_text
    }

    SpecialTokens specials() const { return SpecialTokens{kInput, kOutput, kSeg}; }

    // --- manifest (external interface; bit-exact round trip) ---

    std::string to_manifest(int64_t k_img) const {
        std::string out = "mmtf-vocab v1\n";
        out += "k_text " + std::to_string(k_text_) + "\n";
        out += "k_img " + std::to_string(k_img) + "\n";
        out += "special <input> " + std::to_string(kInput) + "\n";
        out += "special <output> " + std::to_string(kOutput) + "\n";
        out += "special <seg> " + std::to_string(kSeg) + "\n";
        out += "alphabet " + escape(alphabet_) + "\n";
        for (const std::string& m : merges_) out += "merge " + escape(m) + "\n";
        return out;
    }

    void save_manifest(const std::filesystem::path& path, int64_t k_img) const {
        atomic_write_file(path, to_manifest(k_img));
    }

    static std::string manifest_hash(const std::filesystem::path& path) {
        return hex64(fnv1a64(read_file(path)));
    }

    // %XX escaping keeps the manifest line-oriented even with spaces in tokens
    static std::string escape(const std::string& s) {
        static const char* hexd = "0123456789abcdef";
        std::string out;
        for (unsigned char c : s) {
            if (c > 32 && c < 127 && c != '%') {
                out += static_cast<char>(c);
            } else {
                out += '%';
                out += hexd[c >> 4];
                out += hexd[c & 0xF];
            }
        }
        return out;
    }

    static std::string unescape(const std::string& s) {
        std::string out;
        for (size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '%' && i + 2 < s.size()) {
                out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
                i += 2;
            } else {
                out += s[i];
            }
        }
        return out;
    }

  private:
    int64_t k_text_;
    std::string alphabet_;
    std::vector<std::string> merges_;
    std::map<char, int64_t> char_to_id_;
    std::vector<int64_t> merge_ids_;
    std::vector<size_t> match_order_;
};

struct LoadedVocab {
    ByteTokenizer tokenizer;
    UnifiedVocab vocab;
};

inline LoadedVocab parse_vocab_manifest(const std::string& text) {
    int64_t k_text = -1, k_img = -1;
    std::string alphabet;
    std::vector<std::string> merges;
    int lineno = 0;
    for (const std::string& raw : split(text, '\n')) {
        ++lineno;
        std::string line = trim(raw);
        if (line.empty()) continue;
        if (lineno == 1) {
            if (line != "mmtf-vocab v1")
                throw InvalidInput("unrecognized vocab manifest header: " + line);
            continue;
        }
        auto fields = split(line, ' ');
        if (fields[0] == "k_text") k_text = std::stoll(fields.at(1));
        else if (fields[0] == "k_img") k_img = std::stoll(fields.at(1));
        else if (fields[0] == "special") continue;  // fixed ids, spelled for readers
        else if (fields[0] == "alphabet") alphabet = ByteTokenizer::unescape(line.substr(9));
        else if (fields[0] == "merge") merges.push_back(ByteTokenizer::unescape(line.substr(6)));
        else throw InvalidInput("vocab manifest line " + std::to_string(lineno) +
                                ": unknown field " + fields[0]);
    }
    if (k_text < 0 || k_img < 0) throw InvalidInput("vocab manifest missing k_text/k_img");
    ByteTokenizer tok(k_text, alphabet, merges);
    return LoadedVocab{tok, UnifiedVocab(k_text, k_img, tok.specials())};
}

inline LoadedVocab load_vocab_manifest(const std::filesystem::path& path) {
    return parse_vocab_manifest(read_file(path));
}

// Toy defaults: enough alphabet for the shipped instruction/caption templates
// and a merges table of domain words that keeps sequences short.
inline ByteTokenizer default_tokenizer(int64_t k_text = 512) {
    std::string alphabet =
        " abcdefghijklmnopqrstuvwxyz"
        "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
        "0123456789"
        ".,?!()'-:;/";
    std::vector<std::string> merges = {
        "brain MR image", "segmentation map", "segmentation", "radiology report",
        "free-text", "Generate", "generate", "Create", "create", "Produce", "produce",
        "Transform", "transform", "Convert", "Use the", "Utilize", "Synthesize",
        "the provided", "provided", "corresponding", "characteristics", "highlighting",
        "identifies", "delineates", "accurately", "image", "brain", "input", "output",
        "based on", "that", "the", "this", "with", "from", "into", "using", "for",
        "whole tumor", "tumor core", "enhancing tumor", "tumor", "stroke", "lesion",
        "glioma", "meningioma", "axial", "sagittal", "coronal", "modality", "plane",
        "scan", "view", "section", "shows", "demonstrates", "captured", "Captured",
        "presents", "illustrates", "reveals", "displays", "indicates", "employs",
        "perspective", "abnormality", "region", "structure", "ensuring", "reflects",
        "mirrors", "aligns", "features", "equivalent", "detailed", "areas of",
        "in a given", "key", "map", "and", "T1", "T2", "FLAIR", "PD",
        " a ", " is ", " of ", " in ", " to ", " an ", "ing ", "ed ", "s ", ". ",
    };
    return ByteTokenizer(k_text, alphabet, merges);
}

inline UnifiedVocab default_vocab(const ByteTokenizer& tok, int64_t k_img = 1024) {
    return UnifiedVocab(tok.k_text(), k_img, tok.specials());
}

}  // namespace mmtf
