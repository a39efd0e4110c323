#pragma once

#include "mdasr/decoding.hpp"
#include "mdasr/random.hpp"

#include <cstdint>

namespace mdasr::testing {

// A pure stand-in for the denoiser: logits are a hash of (seed, row, token,
// visible response contents), so different partial blocks give different
// predictions while equal layouts give identical ones.
class HashPredictor final : public decoding::MaskPredictor {
public:
    HashPredictor(std::uint64_t seed, int vocab_size) : seed_(seed), vocab_(vocab_size) {}

    // Make EOS the clear favourite at `position` and beyond.
    void eos_from(std::size_t position) { eos_from_ = position; }

    LogitMatrix predict(const decoding::PromptLayout& layout) const override {
        std::uint64_t context = seed_;
        for (std::size_t i = 0; i < layout.response.size(); ++i) {
            context = mix_seed(context, static_cast<std::uint64_t>(layout.response[i]) * 131 + i);
        }
        if (layout.audio) context = mix_seed(context, static_cast<std::uint64_t>(layout.audio->rows()));
        LogitMatrix out(static_cast<Eigen::Index>(layout.response.size()), vocab_);
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            for (Eigen::Index j = 0; j < out.cols(); ++j) {
                const std::uint64_t h = mix_seed(mix_seed(context, static_cast<std::uint64_t>(i)), static_cast<std::uint64_t>(j));
                out(i, j) = static_cast<float>(static_cast<double>(h >> 11) * 0x1.0p-53 * 6.0 - 3.0);
            }
            if (static_cast<std::size_t>(i) >= eos_from_) out(i, vocab::eos) = 10.0f;
        }
        return out;
    }

private:
    std::uint64_t seed_;
    int vocab_;
    std::size_t eos_from_ = static_cast<std::size_t>(-1);
};

}  // namespace mdasr::testing
