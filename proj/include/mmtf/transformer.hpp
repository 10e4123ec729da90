#pragma once

#include <torch/torch.h>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mmtf/common.hpp"
#include "mmtf/instruction.hpp"
#include "mmtf/unified_vocab.hpp"

namespace mmtf {

struct ModelConfig {
    int64_t d_e = 128;
    int64_t n_layers = 4;
    int64_t n_heads = 4;
    int64_t context_length = 512;
    int64_t vocab_total = 0;
    uint64_t seed = 0;
};

inline void validate(const ModelConfig& cfg) {
    if (cfg.d_e <= 0 || cfg.n_layers <= 0 || cfg.n_heads <= 0 || cfg.vocab_total <= 0)
        throw ConfigError("model dimensions must be positive");
    if (cfg.d_e % cfg.n_heads != 0) throw ConfigError("d_e must be divisible by n_heads");
    // the longest layout is instruction + <input> + 144 + <output>/<seg> + 144
    if (cfg.context_length < 2 * kNumImageTokens + 2)
        throw ConfigError("context_length too short for the image-to-image layout");
}

// Grow a pretrained text embedding table by k_img rows. Text rows are copied
// bit-exactly; new rows draw from a seeded normal with the empirical std of
// the pretrained entries so logit scale stays stable.
inline torch::Tensor extend_embeddings(const torch::Tensor& pretrained, int64_t k_img,
                                       uint64_t seed) {
    if (k_img <= 0) throw InvalidInput("k_img must be positive");
    if (pretrained.dim() != 2) throw InvalidInput("pretrained table must be 2-D");
    if (!pretrained.isfinite().all().item<bool>())
        throw InvalidInput("pretrained table has non-finite entries");
    torch::manual_seed(derive_seed(seed, "embed/extend"));
    double scale = pretrained.std().item<double>();
    torch::Tensor rows = torch::randn({k_img, pretrained.size(1)}, pretrained.options()) * scale;
    return torch::cat({pretrained, rows}, 0);
}

struct TransformerBlockImpl : torch::nn::Module {
    TransformerBlockImpl(int64_t d_e, int64_t n_heads) : n_heads(n_heads) {
        ln1 = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_e})));
        ln2 = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_e})));
        qkv = register_module("qkv", torch::nn::Linear(d_e, 3 * d_e));
        proj = register_module("proj", torch::nn::Linear(d_e, d_e));
        fc1 = register_module("fc1", torch::nn::Linear(d_e, 4 * d_e));
        fc2 = register_module("fc2", torch::nn::Linear(4 * d_e, d_e));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        int64_t B = x.size(0), T = x.size(1), C = x.size(2);
        int64_t hd = C / n_heads;
        torch::Tensor h = ln1->forward(x);
        torch::Tensor mixed =
            qkv->forward(h).view({B, T, 3, n_heads, hd}).permute({2, 0, 3, 1, 4});
        torch::Tensor q = mixed[0], k = mixed[1], v = mixed[2];
        torch::Tensor att = q.matmul(k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd));
        torch::Tensor causal = torch::tril(torch::ones({T, T}, torch::kBool));
        att = att.masked_fill(causal.logical_not(),
                              -std::numeric_limits<float>::infinity());
        torch::Tensor y = torch::softmax(att, -1).matmul(v);
        y = y.transpose(1, 2).reshape({B, T, C});
        torch::Tensor mid = x + proj->forward(y);
        return mid + fc2->forward(torch::gelu(fc1->forward(ln2->forward(mid))));
    }

    int64_t n_heads;
    torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
    torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TransformerBlock);

// Decoder-only causal LM over the unified vocabulary. The output projection
// is tied to the embedding table.
struct TinyGptImpl : torch::nn::Module {
    explicit TinyGptImpl(const ModelConfig& cfg_in) : cfg(cfg_in) {
        validate(cfg);
        torch::manual_seed(derive_seed(cfg.seed, "lm/init"));
        tok_emb = register_module("tok_emb", torch::nn::Embedding(cfg.vocab_total, cfg.d_e));
        pos_emb = register_module("pos_emb", torch::nn::Embedding(cfg.context_length, cfg.d_e));
        torch::NoGradGuard ng;
        tok_emb->weight.normal_(0.0, 0.02);
        pos_emb->weight.normal_(0.0, 0.02);
        for (int64_t i = 0; i < cfg.n_layers; ++i)
            blocks->push_back(TransformerBlock(cfg.d_e, cfg.n_heads));
        register_module("blocks", blocks);
        ln_f = register_module("ln_f", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.d_e})));
    }

    // ids: int64 [T] or [B, T] -> logits [T, vocab] or [B, T, vocab]
    torch::Tensor forward(const torch::Tensor& ids_in) {
        torch::Tensor ids = ids_in.dim() == 1 ? ids_in.unsqueeze(0) : ids_in;
        if (ids.dim() != 2 || ids.numel() == 0) throw InvalidInput("ids must be [T] or [B,T]");
        if (ids.size(1) > cfg.context_length)
            throw InvalidInput("sequence length " + std::to_string(ids.size(1)) +
                               " exceeds context " + std::to_string(cfg.context_length));
        if ((ids < 0).any().item<bool>() || (ids >= cfg.vocab_total).any().item<bool>())
            throw InvalidInput("token id outside the vocabulary");
        torch::Tensor h = tok_emb->forward(ids) + pos_emb->forward(torch::arange(ids.size(1)));
        for (const auto& block : *blocks) h = block->as<TransformerBlock>()->forward(h);
        h = ln_f->forward(h);
        torch::Tensor logits = torch::nn::functional::linear(h, tok_emb->weight);
        return ids_in.dim() == 1 ? logits.squeeze(0) : logits;
    }

    torch::Tensor forward_ids(const std::vector<int64_t>& ids) {
        return forward(torch::tensor(ids, torch::kInt64));
    }

    void adopt_embeddings(const torch::Tensor& table) {
        if (!table.sizes().equals(tok_emb->weight.sizes()))
            throw InvalidInput("embedding table shape mismatch: got " + c10::str(table.sizes()) +
                               ", want " + c10::str(tok_emb->weight.sizes()));
        torch::NoGradGuard ng;
        tok_emb->weight.copy_(table);
    }

    ModelConfig cfg;
    torch::nn::Embedding tok_emb{nullptr}, pos_emb{nullptr};
    torch::nn::ModuleList blocks;
    torch::nn::LayerNorm ln_f{nullptr};
};
TORCH_MODULE(TinyGpt);

namespace detail {
// NLL summed over positions whose target is masked, plus the count. logits[i]
// scores ids[i+1].
inline std::pair<torch::Tensor, int64_t> masked_nll(const torch::Tensor& logits,
                                                    const std::vector<int64_t>& ids,
                                                    const std::vector<uint8_t>& response_mask) {
    const int64_t n = static_cast<int64_t>(ids.size());
    if (logits.dim() != 2 || logits.size(0) != n)
        throw InvalidInput("logits must be [len, vocab] aligned with ids");
    if (static_cast<int64_t>(response_mask.size()) != n)
        throw InvalidInput("response mask length differs from ids length");
    std::vector<int64_t> positions, targets;
    for (int64_t i = 1; i < n; ++i) {
        if (!response_mask[i]) continue;
        positions.push_back(i - 1);
        targets.push_back(ids[i]);
    }
    if (positions.empty()) return {torch::zeros({}, logits.options()), 0};
    torch::Tensor rows = logits.index_select(0, torch::tensor(positions, torch::kInt64));
    torch::Tensor logp = torch::log_softmax(rows, 1);
    torch::Tensor picked = logp.gather(1, torch::tensor(targets, torch::kInt64).unsqueeze(1));
    return {-picked.sum(), static_cast<int64_t>(positions.size())};
}
}  // namespace detail

// Mean NLL over masked response targets; unmasked positions contribute
// exactly zero (their logit rows are never touched).
inline torch::Tensor instruct_loss(const torch::Tensor& logits, const std::vector<int64_t>& ids,
                                   const std::vector<uint8_t>& response_mask) {
    auto [sum, count] = detail::masked_nll(logits, ids, response_mask);
    if (count == 0) throw InvalidInput("response mask selects no targets");
    return sum / static_cast<double>(count);
}

enum class GenerateMode { Text, Image };

// Greedy decoding with logits outside [lo, hi) masked to -inf; emits exactly
// `count` tokens. Image mode terminates by count, never by a stop token.
inline std::vector<int64_t> generate_constrained(TinyGpt& model, std::vector<int64_t> ids,
                                                 int64_t lo, int64_t hi, int64_t count) {
    if (lo < 0 || hi > model->cfg.vocab_total || lo >= hi)
        throw ConfigError("constrained id range is empty or out of bounds");
    if (ids.empty()) throw InvalidInput("empty generation prefix");
    if (static_cast<int64_t>(ids.size()) + count > model->cfg.context_length)
        throw InvalidInput("prefix plus " + std::to_string(count) +
                           " generated tokens exceeds the context length");
    torch::NoGradGuard ng;
    model->eval();
    torch::Tensor banned = torch::ones({model->cfg.vocab_total}, torch::kBool);
    banned.index_put_({torch::indexing::Slice(lo, hi)}, false);
    std::vector<int64_t> out;
    for (int64_t step = 0; step < count; ++step) {
        torch::Tensor row = model->forward_ids(ids)[static_cast<int64_t>(ids.size()) - 1];
        row = row.masked_fill(banned, -std::numeric_limits<float>::infinity());
        int64_t next = row.argmax().item<int64_t>();
        ids.push_back(next);
        out.push_back(next);
    }
    return out;
}

// Text mode: greedy over text-range ids until eos or the cap; the returned
// sequence excludes the terminating eos. Image mode: exactly 144 image-range
// tokens.
inline std::vector<int64_t> generate(TinyGpt& model, const std::vector<int64_t>& prefix,
                                     GenerateMode mode, const UnifiedVocab& vocab,
                                     int64_t max_new = 64) {
    if (prefix.empty()) throw InvalidInput("empty generation prefix");
    if (mode == GenerateMode::Image)
        return generate_constrained(model, prefix, vocab.k_text(), vocab.total(),
                                    kNumImageTokens);

    torch::NoGradGuard ng;
    model->eval();
    torch::Tensor banned = torch::zeros({model->cfg.vocab_total}, torch::kBool);
    banned.index_put_({torch::indexing::Slice(vocab.k_text(), vocab.total())}, true);
    std::vector<int64_t> ids = prefix, out;
    while (static_cast<int64_t>(out.size()) < max_new &&
           static_cast<int64_t>(ids.size()) < model->cfg.context_length) {
        torch::Tensor row = model->forward_ids(ids)[static_cast<int64_t>(ids.size()) - 1];
        row = row.masked_fill(banned, -std::numeric_limits<float>::infinity());
        int64_t next = row.argmax().item<int64_t>();
        if (next == ByteTokenizer::kEos) break;
        ids.push_back(next);
        out.push_back(next);
    }
    return out;
}

// One AdamW step on the response-masked loss, pooled over every masked target
// in the batch.
inline double train_lm_step(TinyGpt& model, const std::vector<InstructionSample>& batch,
                            torch::optim::Optimizer& opt) {
    if (batch.empty()) throw InvalidInput("empty batch");
    model->train();
    torch::Tensor total = torch::zeros({});
    int64_t count = 0;
    for (const auto& sample : batch) {
        auto [sum, n] = detail::masked_nll(model->forward_ids(sample.ids), sample.ids,
                                           sample.response_mask);
        total = total + sum;
        count += n;
    }
    if (count == 0) throw InvalidInput("batch has no masked response targets");
    torch::Tensor loss = total / static_cast<double>(count);
    opt.zero_grad();
    loss.backward();
    opt.step();
    return loss.item<double>();
}

}  // namespace mmtf
