#include "mdasr/decoding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>

namespace mdasr::decoding {

std::vector<TokenConfidence> confidences(const LogitMatrix& logits) {
    std::vector<TokenConfidence> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < logits.cols(); ++j) {
            if (logits(i, j) > logits(i, best)) best = j;
        }
        const double mx = static_cast<double>(logits(i, best));
        double sum = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) sum += std::exp(static_cast<double>(logits(i, j)) - mx);
        out[static_cast<std::size_t>(i)] = {static_cast<Token>(best), 1.0 / sum};
    }
    return out;
}

LogitMatrix restrict_to_outputs(const LogitMatrix& logits) {
    LogitMatrix out = logits;
    const float ninf = -std::numeric_limits<float>::infinity();
    for (Token t : {vocab::pad, vocab::bos, vocab::mask}) {
        if (t < out.cols()) out.col(t).setConstant(ninf);
    }
    return out;
}

std::vector<std::size_t> select_commit(const std::vector<std::size_t>& candidates,
                                       const std::vector<double>& confidence, std::size_t k) {
    std::vector<std::size_t> order = candidates;
    const std::size_t take = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (confidence[a] != confidence[b]) return confidence[a] > confidence[b];
                          return a < b;
                      });
    order.resize(take);
    std::sort(order.begin(), order.end());
    return order;
}

std::vector<std::size_t> apply_early_stop(TokenSeq& block, std::vector<std::size_t>& masked_positions) {
    const auto first_eos = std::find(block.begin(), block.end(), vocab::eos);
    if (first_eos == block.end()) return {};
    const auto eos_at = static_cast<std::size_t>(first_eos - block.begin());
    std::vector<std::size_t> forced;
    for (std::size_t i = eos_at + 1; i < block.size(); ++i) {
        if (block[i] != vocab::eos) {
            block[i] = vocab::eos;
            forced.push_back(i);
        }
    }
    std::erase_if(masked_positions, [eos_at](std::size_t p) { return p > eos_at; });
    return forced;
}

void DecodeConfig::validate() const {
    require(block_length >= 1, ErrorKind::configuration, "block length must be at least 1");
    require(steps >= 1, ErrorKind::configuration, "denoising steps must be at least 1");
    require(sub_blocks >= 1 && sub_blocks <= block_length, ErrorKind::configuration,
            "sub-block count must lie in [1, block length]");
    require(block_length % sub_blocks == 0, ErrorKind::configuration,
            "sub-block count " + std::to_string(sub_blocks) + " does not divide block length " +
                std::to_string(block_length));
}

std::size_t DecodeConfig::steps_per_sub_block() const {
    const std::size_t span = block_length / sub_blocks;
    return std::clamp<std::size_t>(steps / sub_blocks, 1, span);
}

DenoiseOutcome denoise_positions(const MaskPredictor& denoiser, PromptLayout& layout, std::vector<std::size_t> positions,
                                 std::size_t steps, bool early_stop, std::vector<double>& committed_confidence,
                                 Trace* trace, std::size_t sub_block, std::size_t* iteration) {
    require(steps >= 1, ErrorKind::contract, "denoise_positions needs at least one step");
    TokenSeq& block = layout.response;
    for (std::size_t p : positions) {
        require(p < block.size(), ErrorKind::contract, "position outside the response block");
        block[p] = vocab::mask;
    }
    committed_confidence.resize(block.size(), 0.0);
    const std::size_t k = (positions.size() + steps - 1) / steps;
    DenoiseOutcome outcome;
    std::vector<double> conf(block.size(), 0.0);
    while (!positions.empty()) {
        require(outcome.calls < steps, ErrorKind::contract, "denoising schedule exceeded its step budget");
        const LogitMatrix logits = denoiser.predict(layout);
        ++outcome.calls;
        const auto ranked = confidences(restrict_to_outputs(logits));
        for (std::size_t p : positions) conf[p] = ranked[p].probability;
        const auto chosen = select_commit(positions, conf, k);

        TraceStep step;
        for (std::size_t p : chosen) {
            block[p] = ranked[p].token;
            committed_confidence[p] = conf[p];
            if (trace) {
                step.committed.push_back(p);
                step.tokens.push_back(ranked[p].token);
                step.confidences.push_back(conf[p]);
            }
        }
        std::erase_if(positions, [&](std::size_t p) { return std::binary_search(chosen.begin(), chosen.end(), p); });
        if (early_stop) {
            auto forced = apply_early_stop(block, positions);
            if (!forced.empty()) outcome.early_stopped = true;
            if (trace) step.forced = std::move(forced);
        }
        if (trace) {
            step.iteration = iteration ? (*iteration)++ : outcome.calls - 1;
            step.sub_block = sub_block;
            trace->push_back(std::move(step));
        }
    }
    return outcome;
}

namespace {

using Clock = std::chrono::steady_clock;

Hypothesis finish(const PromptLayout& layout, const std::vector<double>& committed_confidence, std::size_t calls,
                  Clock::time_point start) {
    Hypothesis h;
    h.block = layout.response;
    const auto eos_at = std::find(h.block.begin(), h.block.end(), vocab::eos);
    h.truncated = eos_at == h.block.end();
    h.tokens.assign(h.block.begin(), eos_at);
    h.confidences.assign(committed_confidence.begin(),
                         committed_confidence.begin() + static_cast<std::ptrdiff_t>(h.tokens.size()));
    h.denoiser_calls = calls;
    h.elapsed_s = std::chrono::duration<double>(Clock::now() - start).count();
    return h;
}

PromptLayout masked_layout(const TokenSeq& instruction, const std::optional<FeatureMatrix>& audio, std::size_t length) {
    return PromptLayout{instruction, audio, TokenSeq(length, vocab::mask)};
}

std::vector<std::size_t> iota_positions(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> out(end - begin);
    std::iota(out.begin(), out.end(), begin);
    return out;
}

}  // namespace

Hypothesis diffusion_decode(const MaskPredictor& denoiser, const TokenSeq& instruction,
                            const std::optional<FeatureMatrix>& audio, const DecodeConfig& cfg, Trace* trace) {
    cfg.validate();
    require(cfg.sub_blocks == 1, ErrorKind::configuration, "diffusion_decode requires a single sub-block");
    const auto start = Clock::now();
    PromptLayout layout = masked_layout(instruction, audio, cfg.block_length);
    std::vector<double> committed(cfg.block_length, 0.0);
    const auto outcome = denoise_positions(denoiser, layout, iota_positions(0, cfg.block_length), cfg.steps,
                                           cfg.early_stop, committed, trace);
    return finish(layout, committed, outcome.calls, start);
}

Hypothesis semi_ar_decode(const MaskPredictor& denoiser, const TokenSeq& instruction,
                          const std::optional<FeatureMatrix>& audio, const DecodeConfig& cfg, Trace* trace) {
    cfg.validate();
    const auto start = Clock::now();
    const std::size_t span = cfg.block_length / cfg.sub_blocks;
    const std::size_t steps = cfg.steps_per_sub_block();
    PromptLayout layout = masked_layout(instruction, audio, cfg.block_length);
    std::vector<double> committed(cfg.block_length, 0.0);
    std::size_t calls = 0;
    std::size_t iteration = 0;
    for (std::size_t b = 0; b < cfg.sub_blocks; ++b) {
        std::vector<std::size_t> positions;
        for (std::size_t p = b * span; p < (b + 1) * span; ++p) {
            if (layout.response[p] == vocab::mask) positions.push_back(p);
        }
        if (positions.empty()) continue;
        const auto outcome = denoise_positions(denoiser, layout, std::move(positions), steps, cfg.early_stop,
                                               committed, trace, b, &iteration);
        calls += outcome.calls;
    }
    return finish(layout, committed, calls, start);
}

void write_trace_csv(std::ostream& out, const Trace& trace) {
    out << "iteration,sub_block,position,token,confidence,forced\n";
    for (const auto& step : trace) {
        for (std::size_t i = 0; i < step.committed.size(); ++i) {
            out << step.iteration << ',' << step.sub_block << ',' << step.committed[i] << ',' << step.tokens[i] << ','
                << std::setprecision(9) << step.confidences[i] << ",0\n";
        }
        for (std::size_t p : step.forced) out << step.iteration << ',' << step.sub_block << ',' << p << ',' << vocab::eos << ",,1\n";
    }
}

}  // namespace mdasr::decoding
