#include "doctest.h"

#include "support.hpp"

#include "mdasr/decoding.hpp"

#include <sstream>

using namespace mdasr;
using namespace mdasr::decoding;

TEST_CASE("confidences take the argmax with ties to the lowest id") {
    LogitMatrix logits(2, 5);
    logits << 0, 2, 2, 1, 0,  //
        std::log(3.0f), 0, 0, 0, std::log(3.0f);
    const auto c = confidences(logits);
    CHECK(c[0].token == 1);
    CHECK(c[1].token == 0);
    CHECK(c[1].probability == doctest::Approx(3.0 / 9.0));
}

TEST_CASE("restrict_to_outputs blocks PAD, BOS and MASK") {
    LogitMatrix logits = LogitMatrix::Zero(1, 6);
    logits(0, vocab::mask) = 50;
    logits(0, vocab::pad) = 40;
    const auto c = confidences(restrict_to_outputs(logits));
    CHECK(c[0].token == vocab::eos);
}

TEST_CASE("select_commit keeps the top k with ties to the lowest position") {
    const std::vector<double> conf{0.5, 0.9, 0.5, 0.9, 0.1, 0.5};
    CHECK(select_commit({0, 1, 2, 3, 4, 5}, conf, 3) == std::vector<std::size_t>{0, 1, 3});
    CHECK(select_commit({5, 2, 4}, conf, 2) == std::vector<std::size_t>{2, 5});
    CHECK(select_commit({4}, conf, 3) == std::vector<std::size_t>{4});
}

TEST_CASE("early stop fills everything after the first EOS") {
    TokenSeq block(16, vocab::mask);
    block[2] = 7;
    block[5] = vocab::eos;
    block[9] = 8;
    std::vector<std::size_t> masked{0, 1, 3, 4, 6, 7, 8, 10, 11, 12, 13, 14, 15};
    const auto forced = apply_early_stop(block, masked);
    for (std::size_t i = 6; i < 16; ++i) CHECK(block[i] == vocab::eos);
    CHECK(masked == std::vector<std::size_t>{0, 1, 3, 4});
    CHECK(forced.size() == 10);

    TokenSeq none(4, vocab::mask);
    none[1] = 9;
    std::vector<std::size_t> m2{0, 2, 3};
    CHECK(apply_early_stop(none, m2).empty());
    CHECK(none == TokenSeq{vocab::mask, 9, vocab::mask, vocab::mask});

    TokenSeq first(4, vocab::mask);
    first[0] = vocab::eos;
    std::vector<std::size_t> m3{1, 2, 3};
    apply_early_stop(first, m3);
    CHECK(first == TokenSeq(4, vocab::eos));
    CHECK(m3.empty());
}

TEST_CASE("decode config validation") {
    DecodeConfig c;
    c.sub_blocks = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    c.sub_blocks = 4;
    c.steps = 2;
    CHECK(c.steps_per_sub_block() == 1);
    c.steps = 64;
    CHECK(c.steps_per_sub_block() == 8);
    c.steps = 0;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("diffusion decode follows its schedule on every step count") {
    for (std::size_t n : {1, 3, 4, 5, 8, 16, 32, 64}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            testing::HashPredictor denoiser(seed, 20);
            DecodeConfig cfg{32, n, 1, false};
            Trace trace;
            const auto h = diffusion_decode(denoiser, {vocab::bos}, std::nullopt, cfg, &trace);
            const std::size_t k = (32 + n - 1) / n;
            CHECK(h.denoiser_calls == std::min<std::size_t>(n, (32 + k - 1) / k));
            std::vector<bool> seen(32, false);
            for (std::size_t s = 0; s < trace.size(); ++s) {
                const std::size_t expect = std::min(k, 32 - s * k);
                CHECK(trace[s].committed.size() == expect);
                for (std::size_t p : trace[s].committed) {
                    CHECK_FALSE(seen[p]);
                    seen[p] = true;
                }
            }
            CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
        }
    }
}

TEST_CASE("committed tokens are never replaced by predictions") {
    testing::HashPredictor denoiser(3, 20);
    Trace trace;
    const auto h = diffusion_decode(denoiser, {vocab::bos}, std::nullopt, DecodeConfig{32, 8, 1, true}, &trace);
    for (const auto& step : trace) {
        for (std::size_t i = 0; i < step.committed.size(); ++i) {
            const Token final_token = h.block[step.committed[i]];
            // Only the early-stop fill may overwrite, and only with EOS.
            CHECK((final_token == step.tokens[i] || final_token == vocab::eos));
        }
    }
}

TEST_CASE("early stop truncates the hypothesis and saves calls") {
    testing::HashPredictor denoiser(4, 20);
    denoiser.eos_from(10);
    DecodeConfig cfg{32, 32, 1, true};
    const auto h = diffusion_decode(denoiser, {vocab::bos}, std::nullopt, cfg);
    CHECK(h.tokens.size() == 10);
    CHECK(h.confidences.size() == 10);
    CHECK(h.denoiser_calls < 32);
    CHECK_FALSE(h.truncated);
    const auto first_eos = std::find(h.block.begin(), h.block.end(), vocab::eos);
    CHECK(std::all_of(first_eos, h.block.end(), [](Token t) { return t == vocab::eos; }));

    cfg.early_stop = false;
    CHECK(diffusion_decode(denoiser, {vocab::bos}, std::nullopt, cfg).denoiser_calls == 32);
}

TEST_CASE("semi-AR decode fills sub-blocks left to right") {
    testing::HashPredictor denoiser(5, 20);
    DecodeConfig cfg{32, 16, 4, false};
    Trace trace;
    const auto h = semi_ar_decode(denoiser, {vocab::bos}, std::nullopt, cfg, &trace);
    CHECK(h.denoiser_calls == 16);
    std::size_t last_block = 0;
    for (const auto& step : trace) {
        CHECK(step.sub_block >= last_block);
        last_block = step.sub_block;
        for (std::size_t p : step.committed) CHECK(p / 8 == step.sub_block);
    }
}

TEST_CASE("semi-AR with one sub-block is diffusion decoding") {
    for (std::size_t n : {1, 4, 8, 32}) {
        testing::HashPredictor denoiser(6 + n, 20);
        denoiser.eos_from(20);
        const DecodeConfig cfg{32, n, 1, true};
        const auto a = diffusion_decode(denoiser, {vocab::bos}, std::nullopt, cfg);
        const auto b = semi_ar_decode(denoiser, {vocab::bos}, std::nullopt, cfg);
        CHECK(a.block == b.block);
        CHECK(a.confidences == b.confidences);
        CHECK(a.denoiser_calls == b.denoiser_calls);
    }
}

TEST_CASE("semi-AR skips sub-blocks already filled by early stop") {
    testing::HashPredictor denoiser(7, 20);
    denoiser.eos_from(3);
    const auto h = semi_ar_decode(denoiser, {vocab::bos}, std::nullopt, DecodeConfig{32, 32, 4, true});
    CHECK(h.tokens.size() == 3);
    CHECK(h.denoiser_calls <= 8);
}

TEST_CASE("a block without EOS is flagged as truncated") {
    class NoEos final : public MaskPredictor {
    public:
        LogitMatrix predict(const PromptLayout& layout) const override {
            LogitMatrix l = LogitMatrix::Zero(static_cast<Eigen::Index>(layout.response.size()), 10);
            l.col(6).setConstant(1.0f);
            return l;
        }
    } no_eos;
    const auto h = diffusion_decode(no_eos, {vocab::bos}, std::nullopt, DecodeConfig{8, 2, 1, true});
    CHECK(h.truncated);
    CHECK(h.tokens == TokenSeq(8, 6));
}

TEST_CASE("trace CSV lists commits and forced positions") {
    testing::HashPredictor denoiser(9, 20);
    denoiser.eos_from(30);
    Trace trace;
    diffusion_decode(denoiser, {vocab::bos}, std::nullopt, DecodeConfig{32, 4, 1, true}, &trace);
    std::ostringstream out;
    write_trace_csv(out, trace);
    const std::string csv = out.str();
    CHECK(csv.rfind("iteration,sub_block,position,token,confidence,forced\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') >= 33);
    CHECK(csv.find(",1\n") != std::string::npos);
}
