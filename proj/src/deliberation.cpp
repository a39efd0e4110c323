#include "mdasr/deliberation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mdasr::deliberation {

std::string_view to_string(Strategy s) noexcept {
    switch (s) {
        case Strategy::random: return "random";
        case Strategy::low_confidence: return "low_confidence";
        case Strategy::semi_ar: return "semi_ar";
    }
    return "unknown";
}

Strategy parse_strategy(std::string_view text) {
    if (text == "random") return Strategy::random;
    if (text == "low_confidence" || text == "lowconf") return Strategy::low_confidence;
    if (text == "semi_ar") return Strategy::semi_ar;
    fail(ErrorKind::configuration, "unknown deliberation strategy '" + std::string(text) + "'");
}

void DeliberationConfig::validate() const {
    require(mask_ratio >= 0.0 && mask_ratio <= 1.0, ErrorKind::configuration, "mask ratio must lie in [0, 1]");
    require(sub_blocks >= 1, ErrorKind::configuration, "sub_blocks must be at least 1");
    require(reconstruct_steps >= 1, ErrorKind::configuration, "reconstruct_steps must be at least 1");
    require(block_length >= 1, ErrorKind::configuration, "block_length must be at least 1");
}

std::vector<double> score_transcript(const MaskPredictor& denoiser, const TokenSeq& instruction,
                                     const std::optional<FeatureMatrix>& audio, const TokenSeq& transcript,
                                     std::size_t block_length, bool transcript_visible) {
    require(transcript.size() <= block_length, ErrorKind::length,
            "transcript of " + std::to_string(transcript.size()) + " tokens exceeds block length " +
                std::to_string(block_length));
    nn::PromptLayout layout{instruction, audio,
                            transcript_visible ? transcript : TokenSeq(transcript.size(), vocab::mask)};
    const LogitMatrix logits = denoiser.predict(layout);
    std::vector<double> out(transcript.size());
    for (std::size_t i = 0; i < transcript.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const double mx = static_cast<double>(logits.row(row).maxCoeff());
        double sum = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) sum += std::exp(static_cast<double>(logits(row, j)) - mx);
        out[i] = std::exp(static_cast<double>(logits(row, transcript[i])) - mx) / sum;
    }
    return out;
}

std::size_t mask_count(std::size_t len, double p) {
    const auto count = static_cast<std::size_t>(std::floor(p * static_cast<double>(len) + 0.5));
    return std::min(count, len);
}

std::vector<std::size_t> plan_mask_random(std::size_t len, double p, Rng& rng) {
    require(p >= 0.0 && p <= 1.0, ErrorKind::contract, "mask ratio must lie in [0, 1]");
    std::vector<std::size_t> pool(len);
    std::iota(pool.begin(), pool.end(), 0);
    const std::size_t count = mask_count(len, p);
    for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.below(len - i)]);
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

std::vector<std::size_t> plan_mask_lowconf(const std::vector<double>& confidence, double p) {
    require(p >= 0.0 && p <= 1.0, ErrorKind::contract, "mask ratio must lie in [0, 1]");
    std::vector<std::size_t> order(confidence.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return confidence[a] < confidence[b]; });
    order.resize(mask_count(confidence.size(), p));
    std::sort(order.begin(), order.end());
    return order;
}

Refinement refine_once(const MaskPredictor& denoiser, const TokenSeq& instruction,
                       const std::optional<FeatureMatrix>& audio, const FirstPassTranscript& transcript,
                       const std::vector<std::size_t>& positions, std::size_t steps) {
    Refinement out{transcript, positions, 0};
    if (positions.empty()) return out;
    nn::PromptLayout layout{instruction, audio, transcript.tokens};
    std::vector<double> committed;
    out.denoiser_calls = decoding::denoise_positions(denoiser, layout, positions, steps, false, committed, nullptr).calls;
    out.transcript.tokens = std::move(layout.response);
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> split_spans(std::size_t len, std::size_t parts) {
    require(parts >= 1 && parts <= len, ErrorKind::contract,
            "cannot split " + std::to_string(len) + " tokens into " + std::to_string(parts) + " spans");
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    const std::size_t base = len / parts;
    const std::size_t extra = len % parts;
    std::size_t begin = 0;
    for (std::size_t i = 0; i < parts; ++i) {
        const std::size_t size = base + (i < extra ? 1 : 0);
        spans.emplace_back(begin, begin + size);
        begin += size;
    }
    return spans;
}

Refinement refine_semi_ar(const MaskPredictor& denoiser, const TokenSeq& instruction,
                          const std::optional<FeatureMatrix>& audio, const FirstPassTranscript& transcript,
                          std::size_t sub_blocks, std::size_t steps) {
    Refinement out{transcript, {}, 0};
    nn::PromptLayout layout{instruction, audio, transcript.tokens};
    std::vector<double> committed;
    for (const auto& [begin, end] : split_spans(transcript.tokens.size(), sub_blocks)) {
        std::vector<std::size_t> span(end - begin);
        std::iota(span.begin(), span.end(), begin);
        out.masked_positions.insert(out.masked_positions.end(), span.begin(), span.end());
        out.denoiser_calls +=
            decoding::denoise_positions(denoiser, layout, std::move(span), steps, false, committed, nullptr).calls;
    }
    out.transcript.tokens = std::move(layout.response);
    return out;
}

Refinement deliberate(const MaskPredictor& denoiser, const TokenSeq& instruction,
                      const std::optional<FeatureMatrix>& audio, const FirstPassTranscript& transcript,
                      const DeliberationConfig& cfg, std::uint64_t utterance_key) {
    cfg.validate();
    require(!transcript.tokens.empty(), ErrorKind::contract, "cannot deliberate over an empty transcript");
    require(transcript.tokens.size() <= cfg.block_length, ErrorKind::length,
            "transcript of " + std::to_string(transcript.tokens.size()) + " tokens exceeds block length " +
                std::to_string(cfg.block_length));
    const std::optional<FeatureMatrix> context = cfg.use_audio ? audio : std::nullopt;
    const std::size_t len = transcript.tokens.size();

    Refinement out;
    switch (cfg.strategy) {
        case Strategy::random: {
            Rng rng(mix_seed(cfg.seed, utterance_key));
            out = refine_once(denoiser, instruction, context, transcript, plan_mask_random(len, cfg.mask_ratio, rng),
                              cfg.reconstruct_steps);
            break;
        }
        case Strategy::low_confidence: {
            // p = 1 masks everything, so no scoring pass is needed.
            std::vector<std::size_t> positions(len);
            std::iota(positions.begin(), positions.end(), 0);
            std::size_t scoring_calls = 0;
            if (mask_count(len, cfg.mask_ratio) < len) {
                const auto conf = score_transcript(denoiser, instruction, context, transcript.tokens,
                                                   cfg.block_length, cfg.score_with_transcript);
                positions = plan_mask_lowconf(conf, cfg.mask_ratio);
                scoring_calls = 1;
            }
            out = refine_once(denoiser, instruction, context, transcript, positions, cfg.reconstruct_steps);
            out.denoiser_calls += scoring_calls;
            break;
        }
        case Strategy::semi_ar:
            out = refine_semi_ar(denoiser, instruction, context, transcript, std::min(cfg.sub_blocks, len),
                                 cfg.reconstruct_steps);
            break;
    }
    out.transcript.source = transcript.source + "+" + provenance(cfg);
    return out;
}

std::string provenance(const DeliberationConfig& cfg) {
    std::ostringstream s;
    s << to_string(cfg.strategy);
    if (cfg.strategy == Strategy::semi_ar) {
        s << ":sub_blocks=" << cfg.sub_blocks;
    } else {
        s << ":p=" << cfg.mask_ratio;
    }
    s << (cfg.use_audio ? ":audio" : ":text");
    return s.str();
}

}  // namespace mdasr::deliberation
