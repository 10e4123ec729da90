#pragma once

#include <torch/torch.h>

#include <cmath>
#include <string>
#include <vector>

#include "mmtf/common.hpp"
#include "mmtf/templates.hpp"
#include "mmtf/unified_vocab.hpp"
#include "mmtf/vq_tokenizer.hpp"

namespace mmtf {

// Substitute text encoder standing in for a pretrained biomedical encoder:
// token + position embeddings through a small bidirectional transformer.
// Frozen during refinement training; only the learnable prompt adapts.
struct TextEncoderImpl : torch::nn::Module {
    TextEncoderImpl(const ByteTokenizer& tokenizer_in, int64_t d_txt, uint64_t seed)
        : tokenizer(tokenizer_in) {
        torch::manual_seed(derive_seed(seed, "textenc/init"));
        emb = register_module("emb", torch::nn::Embedding(tokenizer.k_text(), d_txt));
        pos = register_module("pos", torch::nn::Embedding(kMaxLen, d_txt));
        {
            torch::NoGradGuard ng;
            emb->weight.normal_(0.0, 0.02);
            pos->weight.normal_(0.0, 0.02);
        }
        auto layer = torch::nn::TransformerEncoderLayer(
            torch::nn::TransformerEncoderLayerOptions(d_txt, 2)
                .dim_feedforward(2 * d_txt)
                .dropout(0.0));
        encoder = register_module(
            "encoder", torch::nn::TransformerEncoder(torch::nn::TransformerEncoderOptions(layer, 2)));
    }

    torch::Tensor embed_ids(const std::vector<int64_t>& ids) {
        return emb->forward(torch::tensor(ids, torch::kInt64));
    }

    // rows: [n, d_txt] -> contextualized [n, d_txt]
    torch::Tensor encode_sequence(const torch::Tensor& rows) {
        if (rows.size(0) > kMaxLen) throw InvalidInput("prompt sequence too long");
        torch::Tensor x = rows + pos->forward(torch::arange(rows.size(0)));
        return encoder->forward(x.unsqueeze(1)).squeeze(1);
    }

    static constexpr int64_t kMaxLen = 256;
    ByteTokenizer tokenizer;
    torch::nn::Embedding emb{nullptr}, pos{nullptr};
    torch::nn::TransformerEncoder encoder{nullptr};
};
TORCH_MODULE(TextEncoder);

// The learnable prompt P of the conditioning path.
struct PromptStateImpl : torch::nn::Module {
    PromptStateImpl(int64_t p_len, int64_t d_txt, uint64_t seed) {
        if (p_len < 1) throw ConfigError("p_len must be at least 1");
        torch::manual_seed(derive_seed(seed, "prompt/init"));
        learnable = register_parameter("learnable", torch::randn({p_len, d_txt}) * 0.02);
    }
    torch::Tensor learnable;
};
TORCH_MODULE(PromptState);

// Concat(learnable prompt, embedded target text) pushed through the frozen
// text encoder; rows = p_len + token count of the target text.
inline torch::Tensor build_prompt(PromptState& prompt, const std::string& target_text,
                                  TextEncoder& encoder) {
    if (target_text.empty()) throw InvalidInput("empty prompt target text");
    torch::Tensor tok = encoder->embed_ids(encoder->tokenizer.encode_text(target_text));
    return encoder->encode_sequence(torch::cat({prompt->learnable, tok}, 0));
}

// Per-scale conditioning block: GroupNorm -> SiLU -> 3x3 conv -> residual
// cross-attention (image feature queries, prompt keys/values) -> final 1x1
// conv whose weights and bias start at exactly zero.
struct ZeroConvBlockImpl : torch::nn::Module {
    ZeroConvBlockImpl(int64_t channels, int64_t d_txt, bool zero_init) {
        gn = register_module("gn",
                             torch::nn::GroupNorm(std::gcd<int64_t>(8, channels), channels));
        conv = register_module(
            "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
        to_q = register_module("to_q", torch::nn::Linear(channels, channels));
        to_k = register_module("to_k", torch::nn::Linear(d_txt, channels));
        to_v = register_module("to_v", torch::nn::Linear(d_txt, channels));
        attn_out = register_module("attn_out", torch::nn::Linear(channels, channels));
        out_conv = register_module(
            "out_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
        torch::NoGradGuard ng;
        if (zero_init) {
            out_conv->weight.zero_();
            out_conv->bias.zero_();
        } else {
            torch::nn::init::kaiming_normal_(out_conv->weight);
            out_conv->bias.zero_();
        }
    }

    torch::Tensor forward(const torch::Tensor& feat, const torch::Tensor& prompt_seq) {
        torch::Tensor h = conv->forward(torch::silu(gn->forward(feat)));
        int64_t B = h.size(0), C = h.size(1), H = h.size(2), W = h.size(3);
        torch::Tensor q = to_q->forward(h.flatten(2).transpose(1, 2));      // [B, HW, C]
        torch::Tensor k = to_k->forward(prompt_seq);                        // [n, C]
        torch::Tensor v = to_v->forward(prompt_seq);
        torch::Tensor att = torch::softmax(
            q.matmul(k.transpose(0, 1)) / std::sqrt(static_cast<double>(C)), -1);
        torch::Tensor mixed = attn_out->forward(att.matmul(v));             // [B, HW, C]
        h = h + mixed.transpose(1, 2).reshape({B, C, H, W});
        return out_conv->forward(h);
    }

    torch::nn::GroupNorm gn{nullptr};
    torch::nn::Conv2d conv{nullptr}, out_conv{nullptr};
    torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, attn_out{nullptr};
};
TORCH_MODULE(ZeroConvBlock);

// Per-pixel class probabilities from a decoded image.
struct SegHeadImpl : torch::nn::Module {
    SegHeadImpl(int64_t n_classes, uint64_t seed) {
        if (n_classes < 2) throw ConfigError("seg head needs at least 2 classes");
        torch::manual_seed(derive_seed(seed, "seghead/init"));
        net = register_module(
            "net", torch::nn::Sequential(
                       torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 16, 3).padding(1)),
                       torch::nn::GroupNorm(8, 16), torch::nn::SiLU(),
                       torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 16, 3).padding(1)),
                       torch::nn::SiLU(),
                       torch::nn::Conv2d(torch::nn::Conv2dOptions(16, n_classes, 3).padding(1))));
    }

    // (1,H,W) -> [n_classes,H,W]; batched (B,1,H,W) -> [B,n_classes,H,W]
    torch::Tensor forward(const torch::Tensor& image) {
        torch::Tensor x = image.dim() == 3 ? image.unsqueeze(0) : image;
        torch::Tensor probs = torch::softmax(net->forward(x), 1);
        return image.dim() == 3 ? probs.squeeze(0) : probs;
    }
    torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(SegHead);

struct SkipConfig {
    int64_t p_len = 8;
    int64_t d_txt = 64;
    int64_t n_classes = 4;
    double eps_dice = 1e-5;
    bool zero_init = true;
    uint64_t seed = 0;
};

// All trainable Stage II state: one conditioning block per encoder scale,
// the learnable prompt, the frozen substitute text encoder, the seg head.
struct SkipRefinerImpl : torch::nn::Module {
    SkipRefinerImpl(const VqConfig& vq_cfg, const ByteTokenizer& tokenizer, const SkipConfig& sc)
        : cfg(sc) {
        torch::manual_seed(derive_seed(sc.seed, "skip/init"));
        const auto& c = vq_cfg.channels;
        if (c.size() != 4) throw ConfigError("vq.channels must list 4 widths");
        // pyramid scales 192, 96, 48, 24, 12 carry channels c0, c1, c2, c3, c3
        for (int64_t ch : {c[0], c[1], c[2], c[3], c[3]})
            blocks->push_back(ZeroConvBlock(ch, sc.d_txt, sc.zero_init));
        register_module("blocks", blocks);
        prompt = register_module("prompt", PromptState(sc.p_len, sc.d_txt, sc.seed));
        text_encoder = register_module("text_encoder", TextEncoder(tokenizer, sc.d_txt, sc.seed));
        seg = register_module("seg", SegHead(sc.n_classes, sc.seed));
        text_encoder->eval();
        for (auto& p : text_encoder->parameters()) p.requires_grad_(false);
    }

    torch::Tensor prompt_for(const std::string& target_text) {
        return build_prompt(prompt, target_text, text_encoder);
    }

    // one feature per pyramid scale; exactly zero until training moves the
    // final convolutions
    std::vector<torch::Tensor> skip_features(const std::vector<torch::Tensor>& pyramid,
                                             const torch::Tensor& prompt_seq) {
        if (pyramid.size() != blocks->size())
            throw InvalidInput("pyramid has " + std::to_string(pyramid.size()) +
                               " scales, expected " + std::to_string(blocks->size()));
        std::vector<torch::Tensor> out;
        for (size_t i = 0; i < pyramid.size(); ++i)
            out.push_back(blocks[i]->as<ZeroConvBlock>()->forward(pyramid[i], prompt_seq));
        return out;
    }

    SkipConfig cfg;
    torch::nn::ModuleList blocks;
    PromptState prompt{nullptr};
    TextEncoder text_encoder{nullptr};
    SegHead seg{nullptr};
};
TORCH_MODULE(SkipRefiner);

// Soft Dice loss: 1 minus the mean over foreground classes of
// (2*intersection + eps) / (prob mass + target mass + eps).
inline torch::Tensor soft_dice_loss(const torch::Tensor& probs_in, const torch::Tensor& labels_in,
                                    double eps = 1e-5) {
    torch::Tensor probs = probs_in.dim() == 3 ? probs_in.unsqueeze(0) : probs_in;
    torch::Tensor labels = labels_in.dim() == 2 ? labels_in.unsqueeze(0) : labels_in;
    if (probs.dim() != 4 || labels.dim() != 3 || probs.size(0) != labels.size(0) ||
        probs.size(2) != labels.size(1) || probs.size(3) != labels.size(2))
        throw InvalidInput("probability map and label map shapes disagree");
    int64_t n_classes = probs.size(1);
    if ((labels < 0).any().item<bool>() || (labels >= n_classes).any().item<bool>())
        throw InvalidInput("label outside [0, n_classes)");
    torch::Tensor onehot =
        torch::one_hot(labels, n_classes).permute({0, 3, 1, 2}).to(probs.dtype());
    torch::Tensor inter = (probs * onehot).sum({0, 2, 3});
    torch::Tensor mass = probs.sum({0, 2, 3}) + onehot.sum({0, 2, 3});
    torch::Tensor dice = (2.0 * inter + eps) / (mass + eps);
    return 1.0 - dice.slice(0, 1, n_classes).mean();
}

// Eq 7 dispatch: translate -> mean squared error, segment -> soft Dice loss.
inline torch::Tensor stage2_loss(Task task, const torch::Tensor& y, const torch::Tensor& y_hat,
                                 double eps_dice = 1e-5) {
    if (task == Task::Translate) {
        if (!y.sizes().equals(y_hat.sizes()))
            throw InvalidInput("translate target and prediction shapes disagree");
        return (y - y_hat).pow(2).mean();
    }
    if (task == Task::Segment) return soft_dice_loss(y_hat, y, eps_dice);
    throw InvalidInput(std::string("stage2 loss applies to translate or segment, got ") +
                       to_string(task));
}

// Frozen decoder forward with additive skip injection.
inline torch::Tensor refine_decode(VqGan& vq, const torch::Tensor& indices,
                                   const std::vector<torch::Tensor>& skips) {
    return vq->decode(indices, skips);
}

struct Stage2Sample {
    torch::Tensor input_image;   // (1,192,192) source image
    torch::Tensor target_image;  // (1,192,192) translate target, or the mask rendered +/-1
    torch::Tensor labels;        // [192,192] int64 class labels (segment only)
    Task task = Task::Translate;
    std::string target_text;     // y_t: target modality name or roi name
};

// One optimizer step over the refiner parameters; the VQ tokenizer stays
// frozen (teacher forcing: targets come from encoding the ground truth).
inline double train_stage2_step(SkipRefiner& refiner, VqGan& vq,
                                const std::vector<Stage2Sample>& batch,
                                torch::optim::Optimizer& opt) {
    if (batch.empty()) throw InvalidInput("empty batch");
    refiner->train();
    refiner->text_encoder->eval();
    torch::Tensor total = torch::zeros({});
    for (const auto& sample : batch) {
        if (sample.task != Task::Translate && sample.task != Task::Segment)
            throw InvalidInput("stage2 training covers translate and segment only");
        auto [indices, pyramid] = [&] {
            torch::NoGradGuard ng;
            auto pyr = vq->encode_with_pyramid(sample.input_image);
            return std::make_pair(vq->encode(sample.target_image), std::move(pyr.second));
        }();
        torch::Tensor prompt_seq = refiner->prompt_for(sample.target_text);
        std::vector<torch::Tensor> skips = refiner->skip_features(pyramid, prompt_seq);
        torch::Tensor zq = vq->quantizer->lookup(indices.unsqueeze(0)).detach();
        torch::Tensor decoded = vq->decoder->forward(zq, skips).squeeze(0);
        if (sample.task == Task::Translate) {
            total = total + stage2_loss(Task::Translate, sample.target_image, decoded,
                                        refiner->cfg.eps_dice);
        } else {
            torch::Tensor probs = refiner->seg->forward(decoded);
            total = total + stage2_loss(Task::Segment, sample.labels, probs,
                                        refiner->cfg.eps_dice);
        }
    }
    torch::Tensor loss = total / static_cast<double>(batch.size());
    if (!std::isfinite(loss.item<double>())) throw DivergenceError("stage2 loss is not finite");
    opt.zero_grad();
    loss.backward();
    opt.step();
    return loss.item<double>();
}

}  // namespace mmtf
