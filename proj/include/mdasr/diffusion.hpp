#pragma once

#include "mdasr/nn/model.hpp"
#include "mdasr/nn/optim.hpp"
#include "mdasr/random.hpp"

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

namespace mdasr::diffusion {

// A corrupted response block: tokens[i] == MASK exactly on masked_positions.
struct MaskedBlock {
    TokenSeq tokens;
    std::vector<std::size_t> masked_positions;  // ascending
    double t = 1.0;
};

struct TrainExample {
    TokenSeq instruction;
    std::optional<FeatureMatrix> audio;  // pooled features
    TokenSeq response;                   // EOS-terminated, then the tail fill up to block length
};

// What follows the terminating EOS in a training response. PAD is never
// masked or scored; an EOS tail is supervised like any other token, which
// matches the all-MASK tail the decoder starts from.
enum class TailFill { pad, eos };

// pretrain: response only. sft: instruction + response. audio_sft: all three.
enum class ObjectiveMode { pretrain, sft, audio_sft };

enum class MaskCountMode {
    bernoulli,    // each position independently with probability t
    exact_count,  // exactly ceil(t * maskable) positions, uniform without replacement
};

// t ~ U(0, 1].
double sample_t(Rng& rng);

// PAD positions are never masked. Throws ErrorKind::contract unless 0 < t <= 1.
MaskedBlock forward_mask(const TokenSeq& r0, double t, Rng& rng, MaskCountMode mode = MaskCountMode::bernoulli);

template <typename T>
struct LossResult {
    double loss = 0.0;
    Matrix<T> dlogits;  // zero rows at unmasked positions
};

// (1/t) * sum over masked positions of -log softmax(logits)[r0]. Returns
// nullopt when the masked set is empty: the caller must redraw the mask.
template <typename T>
std::optional<LossResult<T>> masked_ce_loss(const Matrix<T>& logits, const TokenSeq& r0, const MaskedBlock& block);

// The network input for an example under a given objective, with the response
// replaced by `response`.
nn::PromptLayout make_layout(const TrainExample& example, ObjectiveMode mode, const TokenSeq& response);

// Checks that `example` carries exactly the segments `mode` needs.
void check_example(const TrainExample& example, ObjectiveMode mode);

struct TrainConfig {
    ObjectiveMode mode = ObjectiveMode::audio_sft;
    MaskCountMode mask_mode = MaskCountMode::bernoulli;
    std::size_t batch_size = 16;
    // Additionally divide each example's loss by its unpadded response length.
    bool length_normalize = false;
    nn::AdamWHyper adamw{};
    nn::LrSchedule schedule{};
    std::uint64_t seed = 0;
};

struct StepStats {
    std::int64_t step = 0;
    double loss = 0.0;  // mean per-example loss, measured before the update
    double lr = 0.0;
    double t_mean = 0.0, t_min = 0.0, t_max = 0.0;
    int redraws = 0;
};

// Optimizes the mask predictor. Each step draws its randomness from
// (seed, step) alone, so any step is reproducible in isolation.
template <typename T>
class Trainer {
public:
    Trainer(nn::Params<T> params, TrainConfig config);

    // One AdamW step on the mean loss of `batch`; `step` is 1-based.
    StepStats train_step(std::span<const TrainExample> batch, std::int64_t step);

    // Samples batches with replacement from `corpus` until the schedule's
    // total_steps, writing one CSV line per step to `log` when given.
    std::vector<StepStats> fit(std::span<const TrainExample> corpus, std::ostream* log = nullptr,
                               std::int64_t log_every = 1);

    // Mean loss of `batch` under the step's masking draw, no update.
    double evaluate(std::span<const TrainExample> batch, std::int64_t step) const;

    const nn::Params<T>& params() const { return params_; }
    nn::Params<T>& params() { return params_; }
    const TrainConfig& config() const { return config_; }

private:
    double accumulate(std::span<const TrainExample> batch, std::int64_t step, nn::Grads<T>* grads,
                      StepStats* stats) const;

    nn::Params<T> params_;
    TrainConfig config_;
    nn::AdamWState<T> state_;
};

void write_log_header(std::ostream& out);
void write_log_line(std::ostream& out, const StepStats& s);

}  // namespace mdasr::diffusion
