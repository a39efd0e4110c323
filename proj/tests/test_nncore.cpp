#include "doctest.h"

#include "mdasr/diffusion.hpp"
#include "mdasr/nn/checkpoint.hpp"
#include "mdasr/nn/model.hpp"
#include "mdasr/nn/optim.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace mdasr;

namespace {

nn::ModelConfig tiny_config(nn::AttentionMode attention = nn::AttentionMode::bidirectional) {
    nn::ModelConfig c;
    c.vocab_size = 12;
    c.model_dim = 8;
    c.num_layers = 2;
    c.num_heads = 2;
    c.ffn_dim = 16;
    c.max_positions = 20;
    c.feature_dim = 4;
    c.audio_window = 2;
    c.attention = attention;
    return c;
}

FeatureMatrix random_features(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    Rng rng(seed);
    FeatureMatrix f(rows, cols);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.normal());
    return f;
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "mdasr_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("forward returns one logit row per response token") {
    const auto cfg = tiny_config();
    const auto params = nn::init_params<float>(cfg, 3);
    nn::PromptLayout layout{{vocab::bos}, random_features(5, 4, 1), {5, 6, vocab::mask, 7}};
    const auto logits = nn::forward(params, layout);
    CHECK(logits.rows() == 4);
    CHECK(logits.cols() == cfg.vocab_size);
    CHECK(logits.allFinite());
}

TEST_CASE("forward rejects layouts longer than the position table") {
    const auto params = nn::init_params<float>(tiny_config(), 3);
    nn::PromptLayout layout{{vocab::bos}, random_features(10, 4, 1), TokenSeq(10, vocab::mask)};
    try {
        nn::forward(params, layout);
        FAIL("expected a length error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::length);
    }
}

TEST_CASE("causal attention ignores later response tokens") {
    const auto params = nn::init_params<float>(tiny_config(nn::AttentionMode::causal), 4);
    nn::PromptLayout a{{vocab::bos}, random_features(3, 4, 2), {5, 6, 7, 8}};
    nn::PromptLayout b = a;
    b.response[3] = 11;
    const auto la = nn::forward(params, a);
    const auto lb = nn::forward(params, b);
    CHECK(la.topRows(3) == lb.topRows(3));
    CHECK(la.row(3) != lb.row(3));
}

TEST_CASE("bidirectional attention sees later tokens") {
    const auto params = nn::init_params<float>(tiny_config(), 4);
    nn::PromptLayout a{{vocab::bos}, std::nullopt, {5, 6, 7, 8}};
    nn::PromptLayout b = a;
    b.response[3] = 11;
    CHECK(nn::forward(params, a).row(0) != nn::forward(params, b).row(0));
}

TEST_CASE("gradient matches central differences in double precision") {
    const auto cfg = tiny_config();
    auto params = nn::init_params<double>(cfg, 11);
    REQUIRE(params.num_parameters() <= 10000);
    const TokenSeq r0{5, 9, vocab::eos, 7, 4};
    diffusion::MaskedBlock block{{5, vocab::mask, vocab::mask, 7, vocab::mask}, {1, 2, 4}, 0.4};
    nn::PromptLayout layout{{vocab::bos}, random_features(4, 4, 9), block.tokens};

    auto loss_of = [&](const nn::Params<double>& p) {
        return diffusion::masked_ce_loss(nn::forward(p, layout), r0, block)->loss;
    };
    nn::Tape<double> tape;
    const auto logits = nn::forward(params, layout, &tape);
    const auto grads = nn::backprop(tape, diffusion::masked_ce_loss(logits, r0, block)->dlogits);

    auto tensors = params.tensors();
    const auto gtensors = grads.tensors();
    Rng rng(5);
    const double h = 1e-4;
    double worst = 0.0;
    int checked = 0;
    for (int s = 0; s < 120; ++s) {
        const std::size_t ti = rng.below(tensors.size());
        auto& tensor = *tensors[ti].second;
        const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(tensor.size())));
        const double saved = tensor.data()[idx];
        tensor.data()[idx] = saved + h;
        const double up = loss_of(params);
        tensor.data()[idx] = saved - h;
        const double down = loss_of(params);
        tensor.data()[idx] = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = gtensors[ti].second->data()[idx];
        INFO(tensors[ti].first, "[", idx, "] analytic=", analytic, " numeric=", numeric);
        // Key biases cancel in the softmax, so their gradient is exactly zero
        // and the difference quotient is pure round-off.
        if (std::abs(analytic) < 1e-12 && std::abs(numeric) < 1e-9) continue;
        const double rel = std::abs(numeric - analytic) / std::max(std::abs(numeric), std::abs(analytic));
        worst = std::max(worst, rel);
        ++checked;
        CHECK(rel < 1e-5);
    }
    CHECK(checked >= 50);
    MESSAGE("worst relative error ", worst, " over ", checked, " entries");
}

TEST_CASE("backprop rejects mismatched gradient shapes") {
    const auto params = nn::init_params<double>(tiny_config(), 1);
    nn::Tape<double> tape;
    nn::forward(params, nn::PromptLayout{{vocab::bos}, std::nullopt, {5, 6}}, &tape);
    try {
        nn::backprop(tape, Matrix<double>(Matrix<double>::Zero(3, 12)));
        FAIL("expected a contract error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::contract);
    }
}

TEST_CASE("pool_frames averages windows and keeps a partial tail") {
    FeatureMatrix f(5, 2);
    f << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10;
    const auto pooled = nn::pool_frames(f, 2);
    REQUIRE(pooled.rows() == 3);
    CHECK(pooled(0, 0) == doctest::Approx(2));
    CHECK(pooled(1, 1) == doctest::Approx(7));
    CHECK(pooled(2, 0) == doctest::Approx(9));
    CHECK_THROWS_AS(nn::pool_frames(FeatureMatrix(0, 2), 2), Error);
}

TEST_CASE("frontend output has one row per window and the model width") {
    const auto params = nn::init_params<float>(tiny_config(), 2);
    const auto out = nn::frontend_pool<float>(random_features(9, 4, 3), 4, params.audio_projection, params.audio_bias);
    CHECK(out.rows() == 3);
    CHECK(out.cols() == 8);
}

TEST_CASE("lr schedule hits its anchor values") {
    const nn::LrSchedule s{};
    CHECK(nn::lr_at(s, 0) == doctest::Approx(1e-6));
    CHECK(nn::lr_at(s, 3000) == doctest::Approx(3e-5));
    CHECK(nn::lr_at(s, 1500) == doctest::Approx((1e-6 + 3e-5) / 2));
    CHECK(nn::lr_at(s, 30000) == doctest::Approx(1e-5));
    CHECK(nn::lr_at(s, 50000) == doctest::Approx(1e-5));
    CHECK(nn::lr_at(s, 16500) == doctest::Approx(2e-5));
    for (std::int64_t step = 3001; step < 30000; step += 997) {
        CHECK(nn::lr_at(s, step) <= nn::lr_at(s, step - 1));
    }
    nn::LrSchedule bad = s;
    bad.warmup_steps = 40000;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("adamw matches a hand-computed recursion") {
    nn::ModelConfig cfg = tiny_config();
    auto params = nn::init_params<double>(cfg, 1);
    const auto initial = params;
    auto grads = nn::Params<double>::zeros(cfg);
    auto state = nn::AdamWState<double>::zeros(cfg);
    const nn::AdamWHyper hyper{0.9, 0.999, 1e-8, 0.05};
    const double lr = 1e-2;

    double w = initial.output_bias(0, 3), m = 0, v = 0;
    const double gs[] = {0.5, -1.0, 0.25};
    for (int step = 1; step <= 3; ++step) {
        grads.output_bias(0, 3) = gs[step - 1];
        nn::adamw_update(params, grads, state, hyper, lr, step);
        w *= 1 - lr * hyper.weight_decay;
        m = hyper.beta1 * m + (1 - hyper.beta1) * gs[step - 1];
        v = hyper.beta2 * v + (1 - hyper.beta2) * gs[step - 1] * gs[step - 1];
        const double mhat = m / (1 - std::pow(hyper.beta1, step));
        const double vhat = v / (1 - std::pow(hyper.beta2, step));
        w -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
        CHECK(params.output_bias(0, 3) == doctest::Approx(w).epsilon(1e-12));
    }
    // Zero-gradient entries only decay.
    CHECK(params.output_projection(0, 0) ==
          doctest::Approx(initial.output_projection(0, 0) * std::pow(1 - lr * hyper.weight_decay, 3)).epsilon(1e-12));
}

TEST_CASE("adamw refuses non-finite gradients and leaves params untouched") {
    auto cfg = tiny_config();
    auto params = nn::init_params<float>(cfg, 1);
    const auto before = params;
    auto grads = nn::Params<float>::zeros(cfg);
    grads.layers[1].w2(0, 0) = std::numeric_limits<float>::quiet_NaN();
    auto state = nn::AdamWState<float>::zeros(cfg);
    try {
        nn::adamw_update(params, grads, state, nn::AdamWHyper{}, 1e-3, 1);
        FAIL("expected a training error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::training);
        CHECK(std::string(e.what()).find("layers.1.w2") != std::string::npos);
    }
    CHECK(params.token_embedding == before.token_embedding);
}

TEST_CASE("checkpoint round trip is bit exact") {
    const auto cfg = tiny_config();
    const auto params = nn::init_params<float>(cfg, 8);
    const auto path = temp_path("roundtrip.ckpt");
    nn::save_checkpoint(params, path);
    const auto loaded = nn::load_checkpoint<float>(path, cfg);
    CHECK(loaded.config == cfg);
    const auto a = params.tensors();
    const auto b = loaded.tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
    CHECK(nn::read_checkpoint_config(path) == cfg);
}

TEST_CASE("checkpoint errors are classified") {
    const auto cfg = tiny_config();
    const auto path = temp_path("errors.ckpt");
    nn::save_checkpoint(nn::init_params<float>(cfg, 8), path);
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto expect_kind = [](const std::filesystem::path& p, ErrorKind kind, std::optional<nn::ModelConfig> expected = {}) {
        try {
            nn::load_checkpoint<float>(p, expected);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(to_string(e.kind()) == to_string(kind));
        }
    };
    auto write = [](const std::filesystem::path& p, const std::string& data) {
        std::ofstream out(p, std::ios::binary);
        out << data;
    };

    const auto bad_magic = temp_path("bad_magic.ckpt");
    std::string b = bytes;
    b[0] = 'X';
    write(bad_magic, b);
    expect_kind(bad_magic, ErrorKind::format);

    const auto bad_version = temp_path("bad_version.ckpt");
    b = bytes;
    b[4] = 9;
    write(bad_version, b);
    expect_kind(bad_version, ErrorKind::format);

    const auto truncated = temp_path("truncated.ckpt");
    write(truncated, bytes.substr(0, bytes.size() - 7));
    expect_kind(truncated, ErrorKind::corruption);

    auto other = cfg;
    other.model_dim = 16;
    expect_kind(path, ErrorKind::config_mismatch, other);

    CHECK_THROWS_AS(nn::load_checkpoint<double>(path), Error);
}
