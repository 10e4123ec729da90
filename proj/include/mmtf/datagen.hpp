#pragma once

#include <charconv>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmtf/common.hpp"
#include "mmtf/records.hpp"
#include "mmtf/templates.hpp"

namespace mmtf {

struct Message {
    enum class Type { Text, Image };
    Type type = Type::Text;
    std::string content;  // text body, or an image reference (path)
};

inline Message text_message(std::string s) { return {Message::Type::Text, std::move(s)}; }
inline Message image_message(std::string ref) { return {Message::Type::Image, std::move(ref)}; }

// Backend abstraction over the text-generating models. Implementations throw
// typed errors on failure and never return empty strings.
class GeneratorClient {
  public:
    virtual ~GeneratorClient() = default;
    virtual std::string name() const = 0;
    virtual std::string generate(const std::vector<Message>& messages) = 0;
};

inline std::string load_prompt_asset(const std::string& filename) {
    return read_file(std::filesystem::path(default_asset_dir()) / "prompts" / filename);
}

namespace detail {
inline uint64_t fingerprint(const std::vector<Message>& messages, uint64_t seed = 0) {
    uint64_t h = seed;
    for (const auto& m : messages) {
        h = fnv1a64(m.type == Message::Type::Text ? "T" : "I", h);
        h = fnv1a64(m.content, h);
    }
    return mix64(h);
}

inline std::string last_text(const std::vector<Message>& messages) {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it)
        if (it->type == Message::Type::Text) return it->content;
    return "";
}

inline bool looks_like_judge_prompt(const std::vector<Message>& messages) {
    return !messages.empty() && messages.front().type == Message::Type::Text &&
           messages.front().content.find("output a single line containing scores") !=
               std::string::npos;
}
}  // namespace detail

// Deterministic offline stand-in for a hosted model. Output is a pure
// function of (tag, messages). Tags beginning with "fail" simulate an
// unavailable backend. When handed the judge prompt it emits a parseable
// score line like a judge would.
class MockGenerator : public GeneratorClient {
  public:
    explicit MockGenerator(std::string tag) : tag_(std::move(tag)) {}
    std::string name() const override { return "mock:" + tag_; }

    std::string generate(const std::vector<Message>& messages) override {
        if (tag_.rfind("fail", 0) == 0) throw DependencyError(name() + ": backend unavailable");
        uint64_t h = detail::fingerprint(messages, fnv1a64(tag_));
        if (detail::looks_like_judge_prompt(messages)) {
            // three hash-dependent scores in [4, 9]: some candidates fall
            // below the default acceptance threshold, some above
            std::ostringstream line;
            for (int i = 0; i < 3; ++i) {
                if (i) line << ' ';
                line << 4 + ((h >> (8 * i)) & 0xffu) % 6;
            }
            line << "\nThe answers are generally grounded in the caption.";
            return line.str();
        }
        return "(" + tag_ + ":" + hex64(h).substr(0, 6) + ") " + detail::last_text(messages);
    }

  private:
    std::string tag_;
};

// "mock:<tag>" -> deterministic mock; anything else is an unknown backend
// (real adapters are deliberately out of the test path).
inline std::unique_ptr<GeneratorClient> make_client(const std::string& spec) {
    if (spec.rfind("mock:", 0) == 0) return std::make_unique<MockGenerator>(spec.substr(5));
    throw ConfigError("unknown client spec '" + spec + "' (expected mock:<tag>)");
}

inline std::string make_caption(const SampleRecord& record, const TemplateLibrary& lib,
                                int template_index) {
    if (record.modality.empty()) throw InvalidInput("record missing modality");
    if (record.plane.empty()) throw InvalidInput("record missing plane");
    if (record.abnormality.empty()) throw InvalidInput("record missing abnormality");
    return lib.make_caption(record.modality, record.plane, record.abnormality, template_index);
}

// Canonical per-sample caption choice; the trainer and evaluator use the same
// derivation so gold text is consistent across the whole pipeline.
inline std::string gold_report_text(const SampleRecord& record, const TemplateLibrary& lib,
                                    uint64_t seed) {
    int idx = static_cast<int>(derive_seed(seed, "caption/" + record.sample_id) %
                               lib.captions().size());
    return make_caption(record, lib, idx);
}

struct FewShot {
    std::string image_ref;
    std::string text;
};

namespace detail {
inline std::vector<Message> build_prompt(const std::string& system_text,
                                         const std::vector<FewShot>& fewshot,
                                         const std::string& image_ref,
                                         const std::string& caption) {
    std::vector<Message> msgs;
    msgs.push_back(text_message(system_text));
    for (const auto& shot : fewshot) {
        if (shot.image_ref.empty() || shot.text.empty())
            throw InvalidInput("few-shot entry needs both an image and text");
        msgs.push_back(image_message(shot.image_ref));
        msgs.push_back(text_message(shot.text));
    }
    msgs.push_back(image_message(image_ref));
    msgs.push_back(text_message(caption));
    return msgs;
}
}  // namespace detail

// Message order: system text, then (image, text) per few-shot pair, then the
// query image and its caption. 2 few-shot pairs -> 1 + 2*2 + 2 = 7 messages.
inline std::vector<Message> build_report_prompt(const SampleRecord& record,
                                                const std::string& caption,
                                                const std::vector<FewShot>& fewshot) {
    return detail::build_prompt(load_prompt_asset("report_system.txt"), fewshot,
                                record.image_path, caption);
}

inline std::vector<Message> build_vqa_prompt(const SampleRecord& record,
                                             const std::string& caption,
                                             const std::vector<FewShot>& fewshot) {
    return detail::build_prompt(load_prompt_asset("vqa_system.txt"), fewshot, record.image_path,
                                caption);
}

struct Candidate {
    std::string source_model;
    std::string text;
};

struct GenerationFailure {
    std::string source_model;
    std::string error;
};

struct CandidateSet {
    std::vector<Candidate> candidates;  // stable by client order
    std::vector<GenerationFailure> failures;
};

// One candidate per responsive client; individual failures degrade, all
// failing is fatal.
inline CandidateSet generate_candidates(const std::vector<Message>& prompt,
                                        const std::vector<GeneratorClient*>& clients) {
    if (clients.empty()) throw InvalidInput("need at least one generator client");
    CandidateSet out;
    for (GeneratorClient* client : clients) {
        try {
            std::string text = client->generate(prompt);
            if (text.empty()) throw DependencyError(client->name() + ": empty response");
            out.candidates.push_back({client->name(), std::move(text)});
        } catch (const std::exception& e) {
            out.failures.push_back({client->name(), e.what()});
        }
    }
    if (out.candidates.empty()) {
        std::string why;
        for (const auto& f : out.failures) why += "\n  " + f.source_model + ": " + f.error;
        throw PipelineError("every generator client failed:" + why);
    }
    return out;
}

struct ScoredCandidate {
    std::string source_model;
    std::string text;
    std::vector<int> scores;  // each in [0, 10]
    std::string raw_judge_output;

    double mean() const {
        if (scores.empty()) return 0.0;
        double s = 0.0;
        for (int v : scores) s += v;
        return s / static_cast<double>(scores.size());
    }
};

// The judge's first line is blank-separated integer scores (one per Q-A
// pair); anything unparseable is an audit-preserving error.
inline std::vector<int> parse_score_line(const std::string& raw) {
    std::string first = raw.substr(0, raw.find('\n'));
    std::istringstream in(first);
    std::vector<int> scores;
    std::string token;
    while (in >> token) {
        int value = 0;
        auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
        if (ec != std::errc() || ptr != token.data() + token.size() || value < 0 || value > 10)
            throw PipelineError("judge output unparseable, raw output: \"" + raw + "\"");
        scores.push_back(value);
    }
    if (scores.empty())
        throw PipelineError("judge output unparseable, raw output: \"" + raw + "\"");
    return scores;
}

inline ScoredCandidate score(const Candidate& candidate, GeneratorClient& judge,
                             const std::string& context) {
    std::vector<Message> messages = {text_message(load_prompt_asset("judge_system.txt")),
                                     text_message(context),
                                     text_message(candidate.text)};
    std::string raw = judge.generate(messages);
    ScoredCandidate scored;
    scored.source_model = candidate.source_model;
    scored.text = candidate.text;
    scored.raw_judge_output = raw;
    scored.scores = parse_score_line(raw);
    return scored;
}

// Candidates with mean below the threshold are dropped; the survivors (or,
// if none survive, all candidates) plus judge feedback go through exactly one
// regeneration pass. If the refiner fails but a survivor exists, the best
// survivor is the result.
inline std::string refine(const std::vector<ScoredCandidate>& scored, GeneratorClient& refiner,
                          double threshold) {
    if (scored.empty()) throw InvalidInput("no scored candidates to refine");
    std::vector<const ScoredCandidate*> survivors;
    for (const auto& c : scored)
        if (c.mean() >= threshold) survivors.push_back(&c);
    const bool all_rejected = survivors.empty();
    if (all_rejected)
        for (const auto& c : scored) survivors.push_back(&c);

    std::vector<Message> messages = {text_message(
        "Rewrite the strongest answer below into one final answer, fixing the judge's "
        "criticisms. Reply with the final answer only.")};
    for (const ScoredCandidate* c : survivors) {
        std::ostringstream block;
        block << "[" << c->source_model << ", mean score " << c->mean() << "] " << c->text
              << "\nJudge: " << c->raw_judge_output;
        messages.push_back(text_message(block.str()));
    }
    try {
        return refiner.generate(messages);
    } catch (const std::exception& e) {
        if (all_rejected)
            throw PipelineError(std::string("all candidates rejected and the refiner failed: ") +
                                e.what());
        const ScoredCandidate* best = survivors.front();
        for (const ScoredCandidate* c : survivors)
            if (c->mean() > best->mean()) best = c;
        return best->text;
    }
}

// Closed-ended gold QA derived from record attributes.
inline std::vector<std::pair<std::string, std::string>> gold_vqa_pairs(
    const SampleRecord& record) {
    return {{"What imaging modality was used?", record.modality},
            {"Which anatomical plane is shown?", record.plane},
            {"What abnormality is present?", record.abnormality}};
}

struct DatagenParams {
    double threshold = 6.0;
    uint64_t seed = 0;
};

struct DatagenRecord {
    std::string sample_id;
    std::string caption;
    std::string report_text;
    std::vector<std::pair<std::string, std::string>> vqa_pairs;
    double threshold = 6.0;
    std::string prompt_hash;
    std::vector<ScoredCandidate> candidates;
    std::vector<GenerationFailure> failures;
};

// One bounded generation -> scoring -> refinement round per sample.
inline DatagenRecord run_datagen_sample(const SampleRecord& record, const TemplateLibrary& lib,
                                        const std::vector<GeneratorClient*>& clients,
                                        GeneratorClient& judge, GeneratorClient& refiner,
                                        const DatagenParams& params) {
    DatagenRecord out;
    out.sample_id = record.sample_id;
    out.threshold = params.threshold;
    out.caption = gold_report_text(record, lib, params.seed);

    std::vector<Message> prompt = build_report_prompt(record, out.caption, {});
    out.prompt_hash = hex64(detail::fingerprint(prompt));
    CandidateSet generated = generate_candidates(prompt, clients);
    out.failures = generated.failures;
    for (const auto& cand : generated.candidates)
        out.candidates.push_back(score(cand, judge, out.caption));
    out.report_text = refine(out.candidates, refiner, params.threshold);
    out.vqa_pairs = gold_vqa_pairs(record);
    return out;
}

inline nlohmann::json to_json(const DatagenRecord& r) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [q, a] : r.vqa_pairs) pairs.push_back({{"question", q}, {"answer", a}});
    nlohmann::json candidates = nlohmann::json::array();
    for (const auto& c : r.candidates)
        candidates.push_back({{"model", c.source_model},
                              {"text", c.text},
                              {"scores", c.scores},
                              {"raw_judge", c.raw_judge_output}});
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : r.failures)
        failures.push_back({{"model", f.source_model}, {"error", f.error}});
    return {{"sample_id", r.sample_id},
            {"caption", r.caption},
            {"report_text", r.report_text},
            {"vqa_pairs", pairs},
            {"provenance",
             {{"prompt_hash", r.prompt_hash},
              {"threshold", r.threshold},
              {"candidates", candidates},
              {"failures", failures}}}};
}

inline void write_datagen_records(const std::filesystem::path& path,
                                  const std::vector<DatagenRecord>& records) {
    std::string body;
    for (const auto& r : records) body += to_json(r).dump() + "\n";
    atomic_write_file(path, body);
}

}  // namespace mmtf
