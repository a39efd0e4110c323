#pragma once

#include "mdasr/nn/model.hpp"

#include <cstddef>
#include <optional>
#include <ostream>
#include <vector>

namespace mdasr::decoding {

using nn::PromptLayout;

// Anything that maps a layout to response logits. Implementations must be
// pure: equal layouts give bit-identical logits.
class MaskPredictor {
public:
    virtual ~MaskPredictor() = default;
    virtual LogitMatrix predict(const PromptLayout& layout) const = 0;
};

class ModelPredictor final : public MaskPredictor {
public:
    explicit ModelPredictor(const nn::Params<float>& params) : params_(&params) {}
    LogitMatrix predict(const PromptLayout& layout) const override { return nn::forward(*params_, layout); }
    const nn::Params<float>& params() const { return *params_; }

private:
    const nn::Params<float>* params_;
};

struct TokenConfidence {
    Token token = vocab::pad;
    double probability = 0.0;
};

// Greedy token and its softmax probability per row. Ties in the argmax go to
// the lowest token id.
std::vector<TokenConfidence> confidences(const LogitMatrix& logits);

// Logits with PAD, BOS and MASK set to -inf: a denoiser may only commit
// content tokens or EOS.
LogitMatrix restrict_to_outputs(const LogitMatrix& logits);

// The min(k, |candidates|) candidates with highest confidence, ties to the
// lowest position, returned in ascending position order. `confidence` is
// indexed by position.
std::vector<std::size_t> select_commit(const std::vector<std::size_t>& candidates,
                                       const std::vector<double>& confidence, std::size_t k);

// If a committed position holds EOS, every position after the first
// committed EOS becomes EOS and leaves the masked set. Returns the positions
// that were force-filled.
std::vector<std::size_t> apply_early_stop(TokenSeq& block, std::vector<std::size_t>& masked_positions);

struct DecodeConfig {
    std::size_t block_length = 32;  // L
    std::size_t steps = 32;         // N
    std::size_t sub_blocks = 1;     // M
    bool early_stop = true;

    void validate() const;
    // clamp(N / M, 1, L / M)
    std::size_t steps_per_sub_block() const;
};

struct Hypothesis {
    TokenSeq tokens;                  // EOS-truncated
    std::vector<double> confidences;  // probability recorded when each token was committed
    std::size_t denoiser_calls = 0;
    double elapsed_s = 0.0;
    bool truncated = false;  // no EOS produced within the block
    TokenSeq block;          // the full final response block
};

struct TraceStep {
    std::size_t iteration = 0;
    std::size_t sub_block = 0;
    std::vector<std::size_t> committed;
    TokenSeq tokens;
    std::vector<double> confidences;
    std::vector<std::size_t> forced;  // filled by early stop
};

using Trace = std::vector<TraceStep>;

// Pure diffusion decoding (M must be 1): start from L MASKs, commit the
// top ceil(L/N) positions per forward pass.
Hypothesis diffusion_decode(const MaskPredictor& denoiser, const TokenSeq& instruction,
                            const std::optional<FeatureMatrix>& audio, const DecodeConfig& cfg,
                            Trace* trace = nullptr);

// Sub-blocks of length L/M decoded left to right; within sub-block b, up to
// clamp(N/M, 1, L/M) passes committing ceil((L/M)/steps) positions each.
Hypothesis semi_ar_decode(const MaskPredictor& denoiser, const TokenSeq& instruction,
                          const std::optional<FeatureMatrix>& audio, const DecodeConfig& cfg, Trace* trace = nullptr);

// Top-K commit loop over an arbitrary set of masked positions of an existing
// layout. Returns the number of predictor calls. Used by the decoders above
// and by multi-pass deliberation.
struct DenoiseOutcome {
    std::size_t calls = 0;
    bool early_stopped = false;
};

DenoiseOutcome denoise_positions(const MaskPredictor& denoiser, PromptLayout& layout,
                                 std::vector<std::size_t> positions, std::size_t steps, bool early_stop,
                                 std::vector<double>& committed_confidence, Trace* trace, std::size_t sub_block = 0,
                                 std::size_t* iteration = nullptr);

void write_trace_csv(std::ostream& out, const Trace& trace);

}  // namespace mdasr::decoding
