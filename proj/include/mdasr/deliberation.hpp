#pragma once

#include "mdasr/decoding.hpp"
#include "mdasr/random.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mdasr::deliberation {

using decoding::MaskPredictor;

enum class Strategy { random, low_confidence, semi_ar };

std::string_view to_string(Strategy s) noexcept;
Strategy parse_strategy(std::string_view text);

struct DeliberationConfig {
    Strategy strategy = Strategy::random;
    double mask_ratio = 0.9;      // random / low_confidence
    std::size_t sub_blocks = 2;   // semi_ar
    bool use_audio = true;
    std::uint64_t seed = 0;
    std::size_t block_length = 32;  // longest transcript the refiner accepts
    // Score low-confidence candidates with the transcript visible instead of
    // a fully masked block.
    bool score_with_transcript = false;
    // Denoising passes used to reconstruct each masked set. 1 reconstructs
    // everything in a single forward pass.
    std::size_t reconstruct_steps = 1;

    void validate() const;
};

struct FirstPassTranscript {
    TokenSeq tokens;
    std::string source;
    double duration_s = 0.0;
};

struct Refinement {
    FirstPassTranscript transcript;
    std::vector<std::size_t> masked_positions;  // union over all passes
    std::size_t denoiser_calls = 0;
};

// Softmax probability of each transcript token at its position, from one
// forward pass. By default the response block is fully masked, so the scores
// depend only on the instruction and audio.
std::vector<double> score_transcript(const MaskPredictor& denoiser, const TokenSeq& instruction,
                                     const std::optional<FeatureMatrix>& audio, const TokenSeq& transcript,
                                     std::size_t block_length, bool transcript_visible = false);

// round_half_up(p * len) distinct positions, uniform without replacement.
std::size_t mask_count(std::size_t len, double p);
std::vector<std::size_t> plan_mask_random(std::size_t len, double p, Rng& rng);
// The mask_count(len, p) lowest-confidence positions, ties to the lowest position.
std::vector<std::size_t> plan_mask_lowconf(const std::vector<double>& confidence, double p);

// Masks `positions`, reconstructs them with `steps` denoising passes (1 by
// default), and keeps every other token as is.
Refinement refine_once(const MaskPredictor& denoiser, const TokenSeq& instruction,
                       const std::optional<FeatureMatrix>& audio, const FirstPassTranscript& transcript,
                       const std::vector<std::size_t>& positions, std::size_t steps = 1);

// Contiguous spans, sizes differing by at most one, remainder to the left.
std::vector<std::pair<std::size_t, std::size_t>> split_spans(std::size_t len, std::size_t parts);

// Left to right, each span fully masked and reconstructed conditioned on the
// already refined spans before it and the original tokens after it.
Refinement refine_semi_ar(const MaskPredictor& denoiser, const TokenSeq& instruction,
                          const std::optional<FeatureMatrix>& audio, const FirstPassTranscript& transcript,
                          std::size_t sub_blocks, std::size_t steps = 1);

// Runs the configured strategy. `utterance_key` decorrelates the random
// plan across utterances while keeping it a function of (seed, key).
Refinement deliberate(const MaskPredictor& denoiser, const TokenSeq& instruction,
                      const std::optional<FeatureMatrix>& audio, const FirstPassTranscript& transcript,
                      const DeliberationConfig& cfg, std::uint64_t utterance_key = 0);

// Provenance string recorded in hypothesis files, e.g. "random:p=0.9:audio".
std::string provenance(const DeliberationConfig& cfg);

}  // namespace mdasr::deliberation
