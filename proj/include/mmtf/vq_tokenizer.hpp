#pragma once

#include <torch/torch.h>

#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mmtf/common.hpp"
#include "mmtf/tensor_io.hpp"

namespace mmtf {

struct VqConfig {
    int64_t codebook_size = 1024;
    int64_t code_dim = 256;
    std::vector<int64_t> channels = {32, 64, 128, 128};  // scales 192, 96, 48, 24 (+12 reuses last)
    double beta_commit = 0.25;
    double lambda_gan = 1.0;
    uint64_t seed = 0;
};

namespace detail {
inline int64_t gn_groups(int64_t channels) { return std::gcd<int64_t>(8, channels); }

// Replicate padding keeps constant inputs exactly spatially constant through
// the encoder (zero padding would break equivariance at the borders).
inline torch::nn::Sequential down_stage(int64_t cin, int64_t cout) {
    return torch::nn::Sequential(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(cin, cout, 4).stride(2).padding(1)
                              .padding_mode(torch::kReplicate)),
        torch::nn::GroupNorm(gn_groups(cout), cout), torch::nn::SiLU(),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(cout, cout, 3).padding(1)
                              .padding_mode(torch::kReplicate)),
        torch::nn::GroupNorm(gn_groups(cout), cout), torch::nn::SiLU());
}

inline torch::nn::Sequential up_stage(int64_t cin, int64_t cout) {
    return torch::nn::Sequential(
        torch::nn::ConvTranspose2d(
            torch::nn::ConvTranspose2dOptions(cin, cout, 4).stride(2).padding(1)),
        torch::nn::GroupNorm(gn_groups(cout), cout), torch::nn::SiLU(),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(cout, cout, 3).padding(1)),
        torch::nn::GroupNorm(gn_groups(cout), cout), torch::nn::SiLU());
}
}  // namespace detail

// Encoder: stem at full resolution plus four stride-2 stages, 192 -> 12. The
// pyramid exposes the activation at every scale for Stage II.
struct VqEncoderImpl : torch::nn::Module {
    VqEncoderImpl(const VqConfig& cfg) {
        const auto& c = cfg.channels;
        if (c.size() != 4) throw ConfigError("vq.channels must list 4 widths");
        stem = register_module(
            "stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, c[0], 3).padding(1)
                                          .padding_mode(torch::kReplicate)));
        stages->push_back(detail::down_stage(c[0], c[1]));  // 96
        stages->push_back(detail::down_stage(c[1], c[2]));  // 48
        stages->push_back(detail::down_stage(c[2], c[3]));  // 24
        stages->push_back(detail::down_stage(c[3], c[3]));  // 12
        register_module("stages", stages);
        to_code = register_module(
            "to_code", torch::nn::Conv2d(torch::nn::Conv2dOptions(c[3], cfg.code_dim, 1)));
    }

    // returns pre-quantization latents [B, code_dim, 12, 12]
    torch::Tensor forward(const torch::Tensor& x) { return forward_pyramid(x).first; }

    std::pair<torch::Tensor, std::vector<torch::Tensor>> forward_pyramid(const torch::Tensor& x) {
        std::vector<torch::Tensor> feats;
        torch::Tensor h = stem->forward(x);
        feats.push_back(h);  // 192
        for (const auto& stage : *stages) {
            h = stage->as<torch::nn::Sequential>()->forward(h);
            feats.push_back(h);  // 96, 48, 24, 12
        }
        return {to_code->forward(h), feats};
    }

    torch::nn::Conv2d stem{nullptr}, to_code{nullptr};
    torch::nn::ModuleList stages;
};
TORCH_MODULE(VqEncoder);

struct QuantizeResult {
    torch::Tensor indices;       // int64 [B, 12, 12]
    torch::Tensor quantized;     // straight-through, gradients flow to latents
    torch::Tensor quantized_raw; // plain codebook gather (gradients to codebook)
    torch::Tensor codebook_loss;
    torch::Tensor commitment_loss;
};

// Nearest-neighbor quantization in Euclidean distance; exact ties resolve to
// the lowest index. Straight-through estimator: z + (q - z).detach().
inline QuantizeResult quantize(const torch::Tensor& latents_in, const torch::Tensor& codebook,
                               double beta = 0.25) {
    if (!latents_in.isfinite().all().item<bool>())
        throw InvalidInput("quantize: non-finite latents");
    torch::Tensor z = latents_in.dim() == 3 ? latents_in.unsqueeze(0) : latents_in;
    int64_t d = codebook.size(1);
    if (z.size(1) != d) throw InvalidInput("quantize: latent dim != codebook dim");
    torch::Tensor flat = z.permute({0, 2, 3, 1}).reshape({-1, d});  // [N, d]
    torch::Tensor d2 = flat.pow(2).sum(1, true) + codebook.pow(2).sum(1).unsqueeze(0) -
                       2.0 * flat.matmul(codebook.transpose(0, 1));
    torch::Tensor idx = d2.argmin(1);  // first minimum on ties
    torch::Tensor q_flat = codebook.index_select(0, idx);
    torch::Tensor q = q_flat.view({z.size(0), z.size(2), z.size(3), d}).permute({0, 3, 1, 2});

    QuantizeResult out;
    out.indices = idx.view({z.size(0), z.size(2), z.size(3)});
    // squared Euclidean distance per latent vector, averaged over positions
    out.codebook_loss = (q - z.detach()).pow(2).sum(1).mean();
    out.commitment_loss = beta * (z - q.detach()).pow(2).sum(1).mean();
    out.quantized_raw = q;
    // straight-through; this arrangement makes the forward value bit-exactly q
    out.quantized = q.detach() + (z - z.detach());
    if (latents_in.dim() == 3) {
        out.indices = out.indices.squeeze(0);
        out.quantized = out.quantized.squeeze(0);
        out.quantized_raw = out.quantized_raw.squeeze(0);
    }
    return out;
}

struct QuantizerImpl : torch::nn::Module {
    QuantizerImpl(int64_t codebook_size, int64_t code_dim, double beta)
        : beta(beta) {
        embeddings = register_parameter(
            "embeddings", torch::randn({codebook_size, code_dim}) * 0.1);
        usage_counts = register_buffer("usage_counts",
                                       torch::zeros({codebook_size}, torch::kInt64));
    }

    QuantizeResult forward(const torch::Tensor& latents) {
        QuantizeResult r = quantize(latents, embeddings, beta);
        if (is_training())
            usage_counts += torch::bincount(r.indices.flatten(), {}, embeddings.size(0));
        return r;
    }

    torch::Tensor lookup(const torch::Tensor& indices) const {
        if ((indices < 0).any().item<bool>() ||
            (indices >= embeddings.size(0)).any().item<bool>())
            throw InvalidInput("codebook index out of range [0," +
                               std::to_string(embeddings.size(0)) + ")");
        torch::Tensor flat = embeddings.index_select(0, indices.flatten());
        std::vector<int64_t> shape(indices.sizes().begin(), indices.sizes().end());
        shape.push_back(embeddings.size(1));
        torch::Tensor q = flat.view(shape);
        // [..., h, w, d] -> [..., d, h, w]
        return q.dim() == 3 ? q.permute({2, 0, 1}) : q.permute({0, 3, 1, 2});
    }

    torch::Tensor embeddings, usage_counts;
    double beta;
};
TORCH_MODULE(Quantizer);

// Decoder: mirror of the encoder; optional additive skip features per scale
// (ordered like the encoder pyramid: 192, 96, 48, 24, 12).
struct VqDecoderImpl : torch::nn::Module {
    VqDecoderImpl(const VqConfig& cfg) {
        const auto& c = cfg.channels;
        from_code = register_module(
            "from_code", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.code_dim, c[3], 1)));
        stages->push_back(detail::up_stage(c[3], c[3]));  // 24
        stages->push_back(detail::up_stage(c[3], c[2]));  // 48
        stages->push_back(detail::up_stage(c[2], c[1]));  // 96
        stages->push_back(detail::up_stage(c[1], c[0]));  // 192
        register_module("stages", stages);
        head = register_module("head",
                               torch::nn::Conv2d(torch::nn::Conv2dOptions(c[0], 1, 3).padding(1)));
    }

    // skips: empty, or 5 tensors aligned to pyramid scales [192, 96, 48, 24, 12]
    torch::Tensor forward(const torch::Tensor& zq, const std::vector<torch::Tensor>& skips = {}) {
        if (!skips.empty() && skips.size() != 5)
            throw InvalidInput("decoder expects 5 skip features, got " +
                               std::to_string(skips.size()));
        auto inject = [&](torch::Tensor h, size_t pyramid_index) {
            if (skips.empty() || !skips[pyramid_index].defined()) return h;
            if (!skips[pyramid_index].sizes().equals(h.sizes()))
                throw InvalidInput("skip feature shape mismatch at pyramid scale " +
                                   std::to_string(pyramid_index));
            return h + skips[pyramid_index];
        };
        torch::Tensor h = inject(from_code->forward(zq), 4);  // 12
        size_t pyramid_index = 3;                              // 24, 48, 96, 192
        for (const auto& stage : *stages) {
            h = stage->as<torch::nn::Sequential>()->forward(h);
            h = inject(h, pyramid_index--);
        }
        return torch::tanh(head->forward(h));
    }

    torch::nn::Conv2d from_code{nullptr}, head{nullptr};
    torch::nn::ModuleList stages;
};
TORCH_MODULE(VqDecoder);

// Small patch discriminator; logits over overlapping patches.
struct PatchDiscriminatorImpl : torch::nn::Module {
    PatchDiscriminatorImpl() {
        net = register_module(
            "net",
            torch::nn::Sequential(
                torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 32, 4).stride(2).padding(1)),
                torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                torch::nn::Conv2d(torch::nn::Conv2dOptions(32, 64, 4).stride(2).padding(1)),
                torch::nn::GroupNorm(8, 64),
                torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                torch::nn::Conv2d(torch::nn::Conv2dOptions(64, 1, 4).stride(1).padding(1))));
    }
    torch::Tensor forward(const torch::Tensor& x) { return net->forward(x); }
    torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

// Non-saturating logistic GAN losses.
inline torch::Tensor gan_generator_loss(const torch::Tensor& fake_logits) {
    return torch::softplus(-fake_logits).mean();
}
inline torch::Tensor gan_discriminator_loss(const torch::Tensor& real_logits,
                                            const torch::Tensor& fake_logits) {
    return torch::softplus(-real_logits).mean() + torch::softplus(fake_logits).mean();
}

struct VqLoss {
    torch::Tensor total;  // generator objective
    // recon, gan, codebook, commitment make up total; disc is reported alongside
    std::map<std::string, double> components;
};

// total = mean||x − x̂||² + λ_gan·L_GAN + (codebook + commitment)
inline VqLoss vqgan_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                         const torch::Tensor& disc_real_logits,
                         const torch::Tensor& disc_fake_logits,
                         const torch::Tensor& codebook_loss,
                         const torch::Tensor& commitment_loss, double lambda_gan) {
    if (!x.sizes().equals(x_hat.sizes())) throw InvalidInput("vqgan_loss: shape mismatch");
    VqLoss out;
    torch::Tensor recon = (x - x_hat).pow(2).mean();
    torch::Tensor gan = gan_generator_loss(disc_fake_logits);
    out.total = recon + lambda_gan * gan + codebook_loss + commitment_loss;
    out.components = {{"recon", recon.item<double>()},
                      {"gan", gan.item<double>()},
                      {"codebook", codebook_loss.item<double>()},
                      {"commitment", commitment_loss.item<double>()},
                      {"disc", gan_discriminator_loss(disc_real_logits, disc_fake_logits)
                                   .item<double>()}};
    for (const auto& [name, v] : out.components)
        if (!std::isfinite(v)) throw DivergenceError("vq loss component is not finite: " + name);
    return out;
}

// The full tokenizer: encoder + codebook + decoder (+ discriminator during
// training). Frozen encode/decode are pure.
struct VqGanImpl : torch::nn::Module {
    explicit VqGanImpl(const VqConfig& cfg_in) : cfg(cfg_in) {
        torch::manual_seed(derive_seed(cfg.seed, "vq/init"));
        encoder = register_module("encoder", VqEncoder(cfg));
        quantizer = register_module("quantizer",
                                    Quantizer(cfg.codebook_size, cfg.code_dim, cfg.beta_commit));
        decoder = register_module("decoder", VqDecoder(cfg));
        discriminator = register_module("discriminator", PatchDiscriminator());
    }

    // single image (1,192,192) -> int64 [12,12]; pure (no usage-count updates)
    torch::Tensor encode(const torch::Tensor& image) {
        check_image_grid(image);
        torch::NoGradGuard ng;
        torch::Tensor z = encoder->forward(image.unsqueeze(0));
        return quantize(z, quantizer->embeddings, cfg.beta_commit).indices.squeeze(0);
    }

    std::pair<torch::Tensor, std::vector<torch::Tensor>> encode_with_pyramid(
        const torch::Tensor& image) {
        check_image_grid(image);
        torch::NoGradGuard ng;
        auto [z, feats] = encoder->forward_pyramid(image.unsqueeze(0));
        return {quantize(z, quantizer->embeddings, cfg.beta_commit).indices.squeeze(0), feats};
    }

    // int64 [12,12] -> (1,192,192); rejects out-of-range indices
    torch::Tensor decode(const torch::Tensor& indices,
                         const std::vector<torch::Tensor>& skips = {}) {
        torch::Tensor idx = indices.dim() == 2 ? indices.unsqueeze(0) : indices;
        if (idx.size(-1) != kGridSide || idx.size(-2) != kGridSide)
            throw InvalidInput("decode expects a 12x12 index grid, got " + c10::str(idx.sizes()));
        torch::NoGradGuard ng;
        torch::Tensor img = decoder->forward(quantizer->lookup(idx), skips);
        return indices.dim() == 2 ? img.squeeze(0) : img;
    }

    VqConfig cfg;
    VqEncoder encoder{nullptr};
    Quantizer quantizer{nullptr};
    VqDecoder decoder{nullptr};
    PatchDiscriminator discriminator{nullptr};
};
TORCH_MODULE(VqGan);

inline std::vector<int64_t> flatten_indices(const torch::Tensor& grid) {
    torch::Tensor flat = grid.to(torch::kInt64).flatten().contiguous();  // row-major
    return std::vector<int64_t>(flat.data_ptr<int64_t>(), flat.data_ptr<int64_t>() + flat.numel());
}

inline torch::Tensor unflatten_indices(const std::vector<int64_t>& flat) {
    if (static_cast<int64_t>(flat.size()) != kNumImageTokens)
        throw InvalidInput("expected " + std::to_string(kNumImageTokens) + " image tokens, got " +
                           std::to_string(flat.size()));
    return torch::tensor(flat, torch::kInt64).view({kGridSide, kGridSide});
}

// One generator step and one discriminator step on a batch of images.
inline std::map<std::string, double> train_tokenizer_step(VqGan& model,
                                                          const torch::Tensor& batch,
                                                          torch::optim::Optimizer& opt_gen,
                                                          torch::optim::Optimizer& opt_disc) {
    if (batch.numel() == 0 || batch.dim() != 4) throw InvalidInput("empty or malformed batch");
    model->train();

    torch::Tensor z = model->encoder->forward(batch);
    QuantizeResult q = model->quantizer->forward(z);
    torch::Tensor x_hat = model->decoder->forward(q.quantized);
    torch::Tensor real_logits;
    {
        torch::NoGradGuard ng;  // real logits feed only the report here
        real_logits = model->discriminator->forward(batch);
    }
    VqLoss loss = vqgan_loss(batch, x_hat, real_logits, model->discriminator->forward(x_hat),
                             q.codebook_loss, q.commitment_loss, model->cfg.lambda_gan);
    opt_gen.zero_grad();
    loss.total.backward();
    opt_gen.step();

    torch::Tensor d_loss = gan_discriminator_loss(model->discriminator->forward(batch),
                                                  model->discriminator->forward(x_hat.detach()));
    opt_disc.zero_grad();
    d_loss.backward();
    opt_disc.step();

    auto report = loss.components;
    report["total"] = loss.total.item<double>();
    report["disc"] = d_loss.item<double>();
    return report;
}

}  // namespace mmtf
