#pragma once

#include <torch/torch.h>

#include <cctype>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mmtf/common.hpp"

namespace mmtf {

// Nested tumor regions: WT = labels {1,2,3} ⊇ TC = {2,3} ⊇ ET = {3}.
enum class Region { WT, TC, ET };

inline const char* to_string(Region r) {
    switch (r) {
        case Region::WT: return "WT";
        case Region::TC: return "TC";
        default: return "ET";
    }
}

inline torch::Tensor region_mask(const torch::Tensor& labels, Region r) {
    switch (r) {
        case Region::WT: return labels >= 1;
        case Region::TC: return labels >= 2;
        default: return labels >= 3;
    }
}

// Hard Dice 2|A∩B| / (|A|+|B|); empty-vs-empty is 1.0 by convention.
inline double dice(const torch::Tensor& pred_labels, const torch::Tensor& gold_labels, Region r) {
    if (!pred_labels.sizes().equals(gold_labels.sizes()))
        throw InvalidInput("dice: shape mismatch " + c10::str(pred_labels.sizes()) + " vs " +
                           c10::str(gold_labels.sizes()));
    torch::Tensor a = region_mask(pred_labels, r), b = region_mask(gold_labels, r);
    double na = a.sum().item<double>(), nb = b.sum().item<double>();
    if (na + nb == 0.0) return 1.0;
    return 2.0 * (a & b).sum().item<double>() / (na + nb);
}

// PSNR in dB over the declared [-1,1] dynamic range (2.0); identical images
// return the +inf sentinel.
inline double psnr(const torch::Tensor& a, const torch::Tensor& b, double range = 2.0) {
    if (!a.sizes().equals(b.sizes())) throw InvalidInput("psnr: shape mismatch");
    double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(range) - 10.0 * std::log10(mse);
}

namespace detail {
inline torch::Tensor gaussian_window(int64_t size, double sigma) {
    torch::Tensor x = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
    torch::Tensor g = torch::exp(-x.pow(2) / (2.0 * sigma * sigma));
    g /= g.sum();
    return torch::outer(g, g);
}
}  // namespace detail

// Windowed SSIM, gaussian 11×11 σ=1.5, valid windows only, mean over windows.
inline double ssim(const torch::Tensor& a_in, const torch::Tensor& b_in, int64_t window = 11,
                   double k1 = 0.01, double k2 = 0.03, double range = 2.0, double sigma = 1.5) {
    torch::Tensor a = a_in.squeeze().to(torch::kFloat64), b = b_in.squeeze().to(torch::kFloat64);
    if (a.dim() != 2 || !a.sizes().equals(b.sizes()))
        throw InvalidInput("ssim expects two equally shaped 2D images");
    if (a.size(0) < window || a.size(1) < window)
        throw InvalidInput("ssim: image smaller than the window");
    torch::NoGradGuard ng;
    torch::Tensor w = detail::gaussian_window(window, sigma).view({1, 1, window, window});
    auto conv = [&](const torch::Tensor& t) {
        return torch::conv2d(t.view({1, 1, a.size(0), a.size(1)}), w).squeeze();
    };
    torch::Tensor mu_a = conv(a), mu_b = conv(b);
    torch::Tensor var_a = conv(a * a) - mu_a * mu_a;
    torch::Tensor var_b = conv(b * b) - mu_b * mu_b;
    torch::Tensor cov = conv(a * b) - mu_a * mu_b;
    double c1 = (k1 * range) * (k1 * range), c2 = (k2 * range) * (k2 * range);
    torch::Tensor num = (2 * mu_a * mu_b + c1) * (2 * cov + c2);
    torch::Tensor den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
    return (num / den).mean().item<double>();
}

namespace detail {
inline std::vector<std::string> rouge_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) out.push_back(cur), cur.clear();
        } else {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}
}  // namespace detail

// ROUGE-L F-measure from the longest common subsequence over whitespace
// tokens, case-folded. Both-empty → 1.0 by convention.
inline double rouge_l(const std::string& candidate, const std::string& reference) {
    std::vector<std::string> c = detail::rouge_tokens(candidate),
                             r = detail::rouge_tokens(reference);
    if (c.empty() && r.empty()) return 1.0;
    if (c.empty() || r.empty()) return 0.0;
    std::vector<std::vector<int>> lcs(c.size() + 1, std::vector<int>(r.size() + 1, 0));
    for (size_t i = 1; i <= c.size(); ++i)
        for (size_t j = 1; j <= r.size(); ++j)
            lcs[i][j] = c[i - 1] == r[j - 1] ? lcs[i - 1][j - 1] + 1
                                             : std::max(lcs[i - 1][j], lcs[i][j - 1]);
    double l = lcs[c.size()][r.size()];
    if (l == 0.0) return 0.0;
    double p = l / static_cast<double>(c.size()), rr = l / static_cast<double>(r.size());
    return 2.0 * p * rr / (p + rr);
}

inline std::string normalize_answer(const std::string& s) {
    std::string out;
    for (char c : s) {
        unsigned char u = static_cast<unsigned char>(c);
        if (std::ispunct(u)) continue;
        out += std::isspace(u) ? ' ' : static_cast<char>(std::tolower(u));
    }
    // collapse runs of spaces and trim
    std::string collapsed;
    for (char c : trim(out))
        if (c != ' ' || (!collapsed.empty() && collapsed.back() != ' ')) collapsed += c;
    return collapsed;
}

// Closed-ended VQA: normalized exact match fraction.
inline double vqa_accuracy(const std::vector<std::string>& answers,
                           const std::vector<std::string>& golds) {
    if (answers.size() != golds.size())
        throw InvalidInput("vqa_accuracy: " + std::to_string(answers.size()) + " answers vs " +
                           std::to_string(golds.size()) + " golds");
    if (answers.empty()) return 0.0;
    size_t hits = 0;
    for (size_t i = 0; i < answers.size(); ++i)
        if (normalize_answer(answers[i]) == normalize_answer(golds[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(answers.size());
}

struct FidResult {
    double value = 0.0;
    bool regularized = false;  // covariance was near-singular, ε=1e-6 added
};

namespace detail {
// Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0.
inline torch::Tensor psd_sqrt(const torch::Tensor& m) {
    auto [vals, vecs] = torch::linalg_eigh(m);
    return vecs.matmul(torch::diag(vals.clamp_min(0).sqrt())).matmul(vecs.transpose(0, 1));
}
}  // namespace detail

// Fréchet distance between Gaussian fits: ||μa−μb||² + tr(Σa+Σb−2(ΣaΣb)^½).
// Features: rows are samples. Unbiased covariance; near-singular covariances
// get 1e-6 added on the diagonal and the result is flagged.
inline FidResult fid_features(const torch::Tensor& fa_in, const torch::Tensor& fb_in) {
    torch::Tensor fa = fa_in.to(torch::kFloat64), fb = fb_in.to(torch::kFloat64);
    if (fa.dim() != 2 || fb.dim() != 2 || fa.size(1) != fb.size(1))
        throw InvalidInput("fid expects [n, d] feature matrices with matching d");
    if (fa.size(0) < 2 || fb.size(0) < 2)
        throw InvalidInput("fid needs at least 2 samples per set");
    torch::NoGradGuard ng;
    auto moments = [](const torch::Tensor& f) {
        torch::Tensor mu = f.mean(0);
        torch::Tensor centered = f - mu;
        torch::Tensor sigma = centered.transpose(0, 1).matmul(centered) /
                              static_cast<double>(f.size(0) - 1);
        return std::make_pair(mu, sigma);
    };
    auto [mu_a, sig_a] = moments(fa);
    auto [mu_b, sig_b] = moments(fb);

    FidResult out;
    auto min_eig = [](const torch::Tensor& s) {
        return std::get<0>(torch::linalg_eigh(s)).min().item<double>();
    };
    if (min_eig(sig_a) < 1e-10 || min_eig(sig_b) < 1e-10) {
        torch::Tensor eye = torch::eye(sig_a.size(0), torch::kFloat64) * 1e-6;
        sig_a = sig_a + eye;
        sig_b = sig_b + eye;
        out.regularized = true;
    }
    torch::Tensor a12 = detail::psd_sqrt(sig_a);
    torch::Tensor geo = detail::psd_sqrt(a12.matmul(sig_b).matmul(a12));
    double tr = (sig_a.trace() + sig_b.trace() - 2.0 * geo.trace()).item<double>();
    out.value = (mu_a - mu_b).pow(2).sum().item<double>() + tr;
    if (out.value < 0 && out.value > -1e-8) out.value = 0.0;  // numerical floor
    return out;
}

using FeatureExtractor = std::function<torch::Tensor(const std::vector<torch::Tensor>&)>;

inline FidResult fid(const std::vector<torch::Tensor>& set_a,
                     const std::vector<torch::Tensor>& set_b,
                     const FeatureExtractor& extractor) {
    return fid_features(extractor(set_a), extractor(set_b));
}

// Named per-sample series; aggregates are always recomputed from the samples.
class MetricReport {
  public:
    void add(const std::string& metric, double value) { series_[metric].push_back(value); }

    const std::map<std::string, std::vector<double>>& series() const { return series_; }

    double mean(const std::string& metric) const {
        const auto& v = at(metric);
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    }

    double stddev(const std::string& metric) const {
        const auto& v = at(metric);
        if (v.size() < 2) return 0.0;
        double m = mean(metric), s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
    }

    size_t count(const std::string& metric) const { return at(metric).size(); }
    bool has(const std::string& metric) const { return series_.count(metric) > 0; }

    // Table 2-style text: per-metric rows, dice split per region plus the
    // region average.
    std::string render() const {
        char buf[160];
        std::string out = "metric                        mean        std       n\n";
        auto row = [&](const std::string& name, double m, double s, size_t n) {
            std::snprintf(buf, sizeof(buf), "%-26s %9.4f  %9.4f  %6zu\n", name.c_str(), m, s, n);
            out += buf;
        };
        for (const auto& [name, v] : series_) row(name, mean(name), stddev(name), v.size());
        if (has("dice.WT") && has("dice.TC") && has("dice.ET"))
            row("dice.Avg", (mean("dice.WT") + mean("dice.TC") + mean("dice.ET")) / 3.0, 0.0,
                count("dice.WT") + count("dice.TC") + count("dice.ET"));
        return out;
    }

  private:
    const std::vector<double>& at(const std::string& metric) const {
        auto it = series_.find(metric);
        if (it == series_.end() || it->second.empty())
            throw InvalidInput("no samples recorded for metric: " + metric);
        return it->second;
    }

    std::map<std::string, std::vector<double>> series_;
};

}  // namespace mmtf
