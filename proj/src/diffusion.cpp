#include "mdasr/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>

namespace mdasr::diffusion {

double sample_t(Rng& rng) { return rng.uniform_open_closed(); }

MaskedBlock forward_mask(const TokenSeq& r0, double t, Rng& rng, MaskCountMode mode) {
    require(t > 0.0 && t <= 1.0, ErrorKind::contract, "masking time t must lie in (0, 1], got " + std::to_string(t));
    MaskedBlock block{r0, {}, t};
    if (mode == MaskCountMode::bernoulli) {
        for (std::size_t i = 0; i < r0.size(); ++i) {
            if (r0[i] == vocab::pad) continue;
            if (rng.bernoulli(t)) block.masked_positions.push_back(i);
        }
    } else {
        std::vector<std::size_t> maskable;
        for (std::size_t i = 0; i < r0.size(); ++i) {
            if (r0[i] != vocab::pad) maskable.push_back(i);
        }
        const auto count = std::min(maskable.size(),
                                    static_cast<std::size_t>(std::ceil(t * static_cast<double>(maskable.size()))));
        for (std::size_t i = 0; i < count; ++i) {
            std::swap(maskable[i], maskable[i + rng.below(maskable.size() - i)]);
        }
        block.masked_positions.assign(maskable.begin(), maskable.begin() + static_cast<std::ptrdiff_t>(count));
        std::sort(block.masked_positions.begin(), block.masked_positions.end());
    }
    for (std::size_t i : block.masked_positions) block.tokens[i] = vocab::mask;
    return block;
}

template <typename T>
std::optional<LossResult<T>> masked_ce_loss(const Matrix<T>& logits, const TokenSeq& r0, const MaskedBlock& block) {
    require(static_cast<std::size_t>(logits.rows()) == r0.size() && block.tokens.size() == r0.size(),
            ErrorKind::contract, "logits, clean response and masked block disagree on length");
    require(block.t > 0.0 && block.t <= 1.0, ErrorKind::contract, "masked block carries t outside (0, 1]");
    if (block.masked_positions.empty()) return std::nullopt;

    LossResult<T> out;
    out.dlogits = Matrix<T>::Zero(logits.rows(), logits.cols());
    const double inv_t = 1.0 / block.t;
    double total = 0.0;
    for (std::size_t pos : block.masked_positions) {
        const auto i = static_cast<Eigen::Index>(pos);
        const Token target = r0[pos];
        require(target >= 0 && target < logits.cols(), ErrorKind::contract, "target token out of vocabulary");
        const double mx = static_cast<double>(logits.row(i).maxCoeff());
        double sum = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) sum += std::exp(static_cast<double>(logits(i, j)) - mx);
        const double log_norm = mx + std::log(sum);
        total += log_norm - static_cast<double>(logits(i, target));
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            const double prob = std::exp(static_cast<double>(logits(i, j)) - log_norm);
            out.dlogits(i, j) = static_cast<T>(inv_t * (prob - (j == target ? 1.0 : 0.0)));
        }
    }
    out.loss = inv_t * total;
    return out;
}

template std::optional<LossResult<float>> masked_ce_loss<float>(const Matrix<float>&, const TokenSeq&, const MaskedBlock&);
template std::optional<LossResult<double>> masked_ce_loss<double>(const Matrix<double>&, const TokenSeq&,
                                                                  const MaskedBlock&);

void check_example(const TrainExample& example, ObjectiveMode mode) {
    const bool want_audio = mode == ObjectiveMode::audio_sft;
    require(example.audio.has_value() == want_audio, ErrorKind::contract,
            want_audio ? "audio_sft example lacks audio features" : "example carries audio for an audio-free objective");
    const auto eos_at = std::find(example.response.begin(), example.response.end(), vocab::eos);
    require(eos_at != example.response.end(), ErrorKind::contract, "response must contain an EOS");
    require(std::all_of(example.response.begin(), eos_at, vocab::is_content), ErrorKind::contract,
            "only content tokens may precede the EOS of a training response");
    const bool pad_tail = std::all_of(eos_at + 1, example.response.end(), [](Token t) { return t == vocab::pad; });
    const bool eos_tail = std::all_of(eos_at + 1, example.response.end(), [](Token t) { return t == vocab::eos; });
    require(pad_tail || eos_tail, ErrorKind::contract, "the tail after EOS must be all PAD or all EOS");
}

nn::PromptLayout make_layout(const TrainExample& example, ObjectiveMode mode, const TokenSeq& response) {
    nn::PromptLayout layout;
    if (mode != ObjectiveMode::pretrain) layout.instruction = example.instruction;
    if (mode == ObjectiveMode::audio_sft) layout.audio = example.audio;
    layout.response = response;
    return layout;
}

namespace {

std::uint64_t step_seed(std::uint64_t seed, std::int64_t step) { return mix_seed(seed, static_cast<std::uint64_t>(step)); }

// Length up to and including the first EOS.
std::size_t unpadded_length(const TokenSeq& r) {
    const auto eos_at = std::find(r.begin(), r.end(), vocab::eos);
    return static_cast<std::size_t>(eos_at - r.begin()) + (eos_at == r.end() ? 0 : 1);
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(nn::Params<T> params, TrainConfig config)
    : params_(std::move(params)), config_(config), state_(nn::AdamWState<T>::zeros(params_.config)) {
    config_.schedule.validate();
    require(config_.batch_size >= 1, ErrorKind::configuration, "batch_size must be at least 1");
}

template <typename T>
double Trainer<T>::accumulate(std::span<const TrainExample> batch, std::int64_t step, nn::Grads<T>* grads,
                              StepStats* stats) const {
    require(!batch.empty(), ErrorKind::contract, "empty training batch");
    const std::uint64_t base = step_seed(config_.seed, step);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    double loss_sum = 0.0;
    double t_sum = 0.0, t_min = 1.0, t_max = 0.0;
    int redraws = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const TrainExample& ex = batch[b];
        check_example(ex, config_.mode);
        Rng rng(mix_seed(base, b + 1));
        MaskedBlock block;
        for (;;) {
            const double t = sample_t(rng);
            block = forward_mask(ex.response, t, rng, config_.mask_mode);
            if (!block.masked_positions.empty()) break;
            ++redraws;
        }
        nn::Tape<T> tape;
        nn::Tape<T>* tape_ptr = grads ? &tape : nullptr;
        const Matrix<T> logits = nn::forward(params_, make_layout(ex, config_.mode, block.tokens), tape_ptr);
        auto result = masked_ce_loss(logits, ex.response, block);
        double weight = inv_batch;
        if (config_.length_normalize) weight /= static_cast<double>(unpadded_length(ex.response));
        require(std::isfinite(result->loss), ErrorKind::training,
                "non-finite loss at step " + std::to_string(step) + ", batch item " + std::to_string(b) +
                    " (t=" + std::to_string(block.t) + ", masked=" + std::to_string(block.masked_positions.size()) + ")");
        loss_sum += result->loss * (config_.length_normalize ? 1.0 / static_cast<double>(unpadded_length(ex.response)) : 1.0);
        if (grads) {
            result->dlogits *= static_cast<T>(weight);
            nn::backprop_into(tape, result->dlogits, *grads);
        }
        t_sum += block.t;
        t_min = std::min(t_min, block.t);
        t_max = std::max(t_max, block.t);
    }
    if (stats) {
        stats->step = step;
        stats->loss = loss_sum * inv_batch;
        stats->t_mean = t_sum * inv_batch;
        stats->t_min = t_min;
        stats->t_max = t_max;
        stats->redraws = redraws;
    }
    return loss_sum * inv_batch;
}

template <typename T>
StepStats Trainer<T>::train_step(std::span<const TrainExample> batch, std::int64_t step) {
    nn::Grads<T> grads = nn::Params<T>::zeros(params_.config);
    StepStats stats;
    accumulate(batch, step, &grads, &stats);
    stats.lr = nn::lr_at(config_.schedule, step);
    nn::adamw_update(params_, grads, state_, config_.adamw, stats.lr, step);
    return stats;
}

template <typename T>
double Trainer<T>::evaluate(std::span<const TrainExample> batch, std::int64_t step) const {
    return accumulate(batch, step, nullptr, nullptr);
}

template <typename T>
std::vector<StepStats> Trainer<T>::fit(std::span<const TrainExample> corpus, std::ostream* log, std::int64_t log_every) {
    require(!corpus.empty(), ErrorKind::contract, "empty training corpus");
    std::vector<StepStats> history;
    history.reserve(static_cast<std::size_t>(config_.schedule.total_steps));
    if (log) write_log_header(*log);
    std::vector<TrainExample> batch(config_.batch_size);
    for (std::int64_t step = 1; step <= config_.schedule.total_steps; ++step) {
        Rng pick(mix_seed(step_seed(config_.seed, step), 0));
        for (auto& slot : batch) slot = corpus[pick.below(corpus.size())];
        history.push_back(train_step(batch, step));
        if (log && (step % log_every == 0 || step == config_.schedule.total_steps)) write_log_line(*log, history.back());
    }
    return history;
}

template class Trainer<float>;
template class Trainer<double>;

void write_log_header(std::ostream& out) { out << "step,t_mean,t_min,t_max,redraws,loss,lr\n"; }

void write_log_line(std::ostream& out, const StepStats& s) {
    out << s.step << ',' << std::setprecision(6) << s.t_mean << ',' << s.t_min << ',' << s.t_max << ',' << s.redraws
        << ',' << std::setprecision(9) << s.loss << ',' << s.lr << '\n';
}

}  // namespace mdasr::diffusion
