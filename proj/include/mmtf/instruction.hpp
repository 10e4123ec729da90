#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "mmtf/common.hpp"
#include "mmtf/templates.hpp"
#include "mmtf/unified_vocab.hpp"

namespace mmtf {

// One training/eval sequence: unified-vocab ids plus a mask that is true
// exactly on the supervised response tokens.
struct InstructionSample {
    std::vector<int64_t> ids;
    std::vector<uint8_t> response_mask;
    Task task = Task::Report;
};

struct TextResponse {
    std::string text;
};
struct ImageResponse {
    std::vector<int64_t> vq_indices;  // raw codebook indices, [0, k_img)
};
using Response = std::variant<TextResponse, ImageResponse>;

inline int64_t mask_sum(const InstructionSample& s) {
    int64_t n = 0;
    for (uint8_t m : s.response_mask) n += m != 0;
    return n;
}

// Layout: [instruction text] [<input>] [144 image tokens] then either
// [response text + eos] (report/vqa) or [<output>|<seg>] [144 image tokens]
// (translate/segment). The mask is true only on the response block.
inline InstructionSample assemble_sample(const std::string& instruction,
                                         const std::vector<int64_t>& input_vq_indices,
                                         const Response& response, Task task,
                                         const ByteTokenizer& tokenizer,
                                         const UnifiedVocab& vocab) {
    if (static_cast<int64_t>(input_vq_indices.size()) != kNumImageTokens)
        throw InvalidInput("input image block must hold " + std::to_string(kNumImageTokens) +
                           " tokens, got " + std::to_string(input_vq_indices.size()));
    const bool wants_image = task == Task::Translate || task == Task::Segment;
    if (wants_image != std::holds_alternative<ImageResponse>(response))
        throw InvalidInput(std::string("response type does not match task ") + to_string(task));

    InstructionSample s;
    s.task = task;
    auto push = [&](int64_t id, bool masked) {
        s.ids.push_back(id);
        s.response_mask.push_back(masked ? 1 : 0);
    };
    for (int64_t id : tokenizer.encode_text(instruction)) push(id, false);
    push(vocab.specials().input, false);
    for (int64_t vq : input_vq_indices) push(vocab.image_id_to_lm(vq), false);

    if (wants_image) {
        const auto& block = std::get<ImageResponse>(response).vq_indices;
        if (static_cast<int64_t>(block.size()) != kNumImageTokens)
            throw InvalidInput("response image block must hold " +
                               std::to_string(kNumImageTokens) + " tokens, got " +
                               std::to_string(block.size()));
        push(task == Task::Translate ? vocab.specials().output : vocab.specials().seg, true);
        for (int64_t vq : block) push(vocab.image_id_to_lm(vq), true);
    } else {
        const auto& text = std::get<TextResponse>(response).text;
        if (text.empty()) throw InvalidInput("text response is empty");
        for (int64_t id : tokenizer.encode_text(text)) push(id, true);
        push(ByteTokenizer::kEos, true);
    }
    return s;
}

// The generation-time prefix for the same layout: everything up to and
// including the mode-control token (for image tasks) or the image block (for
// text tasks).
inline std::vector<int64_t> assemble_prefix(const std::string& instruction,
                                            const std::vector<int64_t>& input_vq_indices,
                                            Task task, const ByteTokenizer& tokenizer,
                                            const UnifiedVocab& vocab) {
    if (static_cast<int64_t>(input_vq_indices.size()) != kNumImageTokens)
        throw InvalidInput("input image block must hold " + std::to_string(kNumImageTokens) +
                           " tokens, got " + std::to_string(input_vq_indices.size()));
    std::vector<int64_t> ids = tokenizer.encode_text(instruction);
    ids.push_back(vocab.specials().input);
    for (int64_t vq : input_vq_indices) ids.push_back(vocab.image_id_to_lm(vq));
    if (task == Task::Translate) ids.push_back(vocab.specials().output);
    if (task == Task::Segment) ids.push_back(vocab.specials().seg);
    return ids;
}

}  // namespace mmtf
