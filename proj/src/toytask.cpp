#include "mdasr/toytask.hpp"

#include "mdasr/diffusion.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace mdasr::toytask {

using json = nlohmann::json;

std::string_view to_string(Split split) noexcept {
    switch (split) {
        case Split::train: return "train";
        case Split::dev: return "dev";
        case Split::test_clean: return "test_clean";
        case Split::test_other: return "test_other";
    }
    return "unknown";
}

Split parse_split(std::string_view text) {
    for (Split s : all_splits) {
        if (to_string(s) == text) return s;
    }
    fail(ErrorKind::configuration, "unknown split '" + std::string(text) + "'");
}

std::size_t CorpusConfig::size_of(Split split) const {
    switch (split) {
        case Split::train: return train_size;
        case Split::dev: return dev_size;
        case Split::test_clean: return test_clean_size;
        case Split::test_other: return test_other_size;
    }
    return 0;
}

double CorpusConfig::sigma_of(Split split, std::size_t index) const {
    switch (split) {
        case Split::test_clean: return noise_sigma_clean;
        case Split::test_other: return noise_sigma_other;
        case Split::train:
        case Split::dev: break;
    }
    return index % 2 == 0 ? noise_sigma_clean : noise_sigma_other;
}

void CorpusConfig::validate() const {
    auto check = [](bool ok, const std::string& what) {
        require(ok, ErrorKind::configuration, "invalid corpus config: " + what);
    };
    check(content_vocab >= 2, "content_vocab must be at least 2");
    check(min_length >= 1 && min_length <= max_length, "need 1 <= min_length <= max_length");
    check(static_cast<std::size_t>(max_length) + 1 <= block_length, "max_length + 1 (EOS) must fit the block");
    check(frames_per_token >= 1 && feature_dim >= 1, "frames_per_token and feature_dim must be positive");
    check(frame_period_s > 0.0, "frame_period_s must be positive");
    check(noise_sigma_clean >= 0.0 && noise_sigma_other > noise_sigma_clean,
          "noise_sigma_other must exceed noise_sigma_clean");
    check(branching >= 1 && branching <= content_vocab, "branching must lie in [1, content_vocab]");
}

Source make_source(const CorpusConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0x50'52'4f'54ULL));
    Source s;
    s.prototypes.resize(cfg.content_vocab, cfg.feature_dim);
    for (int i = 0; i < cfg.content_vocab; ++i) {
        Eigen::RowVectorXd v(cfg.feature_dim);
        for (int j = 0; j < cfg.feature_dim; ++j) v(j) = rng.normal();
        v /= v.norm();
        s.prototypes.row(i) = v.cast<float>();
    }
    s.transitions = Matrix<double>::Zero(cfg.content_vocab + 1, cfg.content_vocab);
    std::vector<int> pool(static_cast<std::size_t>(cfg.content_vocab));
    for (int row = 0; row <= cfg.content_vocab; ++row) {
        std::iota(pool.begin(), pool.end(), 0);
        double total = 0.0;
        for (int k = 0; k < cfg.branching; ++k) {
            std::swap(pool[static_cast<std::size_t>(k)], pool[k + rng.below(pool.size() - static_cast<std::size_t>(k))]);
            const double w = 0.2 + rng.uniform();
            s.transitions(row, pool[static_cast<std::size_t>(k)]) = w;
            total += w;
        }
        s.transitions.row(row) /= total;
    }
    return s;
}

namespace {

std::uint64_t split_salt(Split split) { return 0x5350'0000ULL + static_cast<std::uint64_t>(split); }

int draw_categorical(const Matrix<double>& table, int row, Rng& rng) {
    double u = rng.uniform();
    const auto cols = static_cast<int>(table.cols());
    int last_nonzero = 0;
    for (int j = 0; j < cols; ++j) {
        const double p = table(row, j);
        if (p <= 0.0) continue;
        last_nonzero = j;
        if (u < p) return j;
        u -= p;
    }
    return last_nonzero;
}

std::string utterance_id(Split split, std::size_t index) {
    std::ostringstream s;
    s << to_string(split) << '-' << std::setw(6) << std::setfill('0') << index;
    return s.str();
}

}  // namespace

Utterance gen_utterance(const CorpusConfig& cfg, const Source& source, Split split, std::size_t index) {
    Rng rng(mix_seed(mix_seed(cfg.seed, split_salt(split)), index));
    Utterance u;
    u.id = utterance_id(split, index);
    const auto span = static_cast<std::size_t>(cfg.max_length - cfg.min_length + 1);
    const auto len = static_cast<std::size_t>(cfg.min_length) + rng.below(span);
    int prev = 0;
    for (std::size_t i = 0; i < len; ++i) {
        const int next = draw_categorical(source.transitions, prev, rng);
        u.reference.push_back(static_cast<Token>(next + vocab::num_reserved));
        prev = next + 1;
    }
    const double sigma = cfg.sigma_of(split, index);
    const auto fpt = static_cast<Eigen::Index>(cfg.frames_per_token);
    u.frames.resize(static_cast<Eigen::Index>(len) * fpt, cfg.feature_dim);
    for (std::size_t i = 0; i < len; ++i) {
        const auto proto = source.prototypes.row(u.reference[i] - vocab::num_reserved);
        for (Eigen::Index f = 0; f < fpt; ++f) {
            const Eigen::Index r = static_cast<Eigen::Index>(i) * fpt + f;
            for (int j = 0; j < cfg.feature_dim; ++j) {
                u.frames(r, j) = proto(j) + static_cast<float>(sigma * rng.normal());
            }
        }
    }
    u.duration_s = static_cast<double>(u.frames.rows()) * cfg.frame_period_s;
    return u;
}

Corpus gen_corpus(const CorpusConfig& cfg) {
    Corpus c{cfg, make_source(cfg), {}};
    for (Split split : all_splits) {
        auto& out = c.splits[split];
        out.reserve(cfg.size_of(split));
        for (std::size_t i = 0; i < cfg.size_of(split); ++i) out.push_back(gen_utterance(cfg, c.source, split, i));
    }
    return c;
}

namespace {

template <typename U>
void put_le(std::ostream& out, U value) {
    static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::filesystem::path& path) {
    unsigned char bytes[sizeof(U)];
    in.read(reinterpret_cast<char*>(bytes), sizeof(U));
    require(in.gcount() == static_cast<std::streamsize>(sizeof(U)), ErrorKind::corruption,
            "feature file '" + path.string() + "' is truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
}

json config_to_json(const CorpusConfig& c) {
    return json{{"content_vocab", c.content_vocab},     {"min_length", c.min_length},
                {"max_length", c.max_length},           {"frames_per_token", c.frames_per_token},
                {"feature_dim", c.feature_dim},         {"frame_period_s", c.frame_period_s},
                {"noise_sigma_clean", c.noise_sigma_clean}, {"noise_sigma_other", c.noise_sigma_other},
                {"branching", c.branching},             {"train_size", c.train_size},
                {"dev_size", c.dev_size},               {"test_clean_size", c.test_clean_size},
                {"test_other_size", c.test_other_size}, {"block_length", c.block_length},
                {"seed", c.seed}};
}

}  // namespace

void write_features(const std::filesystem::path& path, const std::string& id, const FeatureMatrix& frames) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write feature file '" + path.string() + "'");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(frames.rows()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(frames.cols()));
    for (Eigen::Index i = 0; i < frames.size(); ++i) put_le<float>(out, frames.data()[i]);
    require(static_cast<bool>(out), ErrorKind::io, "write to '" + path.string() + "' failed");
}

FeatureMatrix read_features(const std::filesystem::path& path, std::string* id) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open feature file '" + path.string() + "'");
    const auto id_len = get_le<std::uint32_t>(in, path);
    require(id_len < 4096, ErrorKind::corruption, "implausible id length in '" + path.string() + "'");
    std::string stored(id_len, '\0');
    in.read(stored.data(), id_len);
    require(in.gcount() == static_cast<std::streamsize>(id_len), ErrorKind::corruption,
            "feature file '" + path.string() + "' is truncated");
    const auto rows = get_le<std::uint32_t>(in, path);
    const auto cols = get_le<std::uint32_t>(in, path);
    FeatureMatrix frames(rows, cols);
    for (Eigen::Index i = 0; i < frames.size(); ++i) frames.data()[i] = get_le<float>(in, path);
    if (id) *id = std::move(stored);
    return frames;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream meta(dir / "corpus.json");
        require(static_cast<bool>(meta), ErrorKind::io, "cannot write '" + (dir / "corpus.json").string() + "'");
        meta << config_to_json(corpus.config).dump(2) << '\n';
    }
    for (const auto& [split, utts] : corpus.splits) {
        const auto feat_dir = dir / "features" / std::string(to_string(split));
        std::filesystem::create_directories(feat_dir);
        std::ofstream manifest(dir / ("manifest_" + std::string(to_string(split)) + ".jsonl"));
        require(static_cast<bool>(manifest), ErrorKind::io, "cannot write manifest in '" + dir.string() + "'");
        for (const auto& u : utts) {
            const auto rel = std::filesystem::path("features") / std::string(to_string(split)) / (u.id + ".feat");
            write_features(dir / rel, u.id, u.frames);
            const json record{{"id", u.id},
                              {"reference", join_tokens(u.reference)},
                              {"features", rel.generic_string()},
                              {"num_frames", u.frames.rows()},
                              {"duration_s", u.duration_s}};
            manifest << record.dump() << '\n';
        }
    }
}

std::vector<Utterance> read_split(const std::filesystem::path& dir, Split split) {
    const auto path = dir / ("manifest_" + std::string(to_string(split)) + ".jsonl");
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::missing_input, "manifest '" + path.string() + "' not found");
    std::vector<Utterance> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::exception& e) {
            fail(ErrorKind::format, "bad manifest line in '" + path.string() + "': " + e.what());
        }
        Utterance u;
        u.id = record.at("id").get<std::string>();
        u.reference = parse_tokens(record.at("reference").get<std::string>());
        std::string stored_id;
        u.frames = read_features(dir / record.at("features").get<std::string>(), &stored_id);
        require(stored_id == u.id, ErrorKind::corruption, "feature file id '" + stored_id + "' != manifest id '" + u.id + "'");
        require(u.frames.rows() == record.at("num_frames").get<Eigen::Index>(), ErrorKind::corruption,
                "frame count mismatch for '" + u.id + "'");
        u.duration_s = record.at("duration_s").get<double>();
        out.push_back(std::move(u));
    }
    return out;
}

TokenSeq default_instruction() { return {vocab::bos}; }

diffusion::TrainExample make_example(const Utterance& utt, int audio_window, std::size_t block_length, bool with_audio,
                                     diffusion::TailFill tail) {
    require(utt.reference.size() + 1 <= block_length, ErrorKind::length,
            "reference of '" + utt.id + "' does not fit the block with its EOS");
    diffusion::TrainExample ex;
    ex.instruction = default_instruction();
    if (with_audio) ex.audio = nn::pool_frames(utt.frames, audio_window);
    ex.response = utt.reference;
    ex.response.push_back(vocab::eos);
    ex.response.resize(block_length, tail == diffusion::TailFill::eos ? vocab::eos : vocab::pad);
    return ex;
}

std::vector<diffusion::TrainExample> make_examples(const std::vector<Utterance>& utts, int audio_window,
                                                   std::size_t block_length, bool with_audio, diffusion::TailFill tail) {
    std::vector<diffusion::TrainExample> out;
    out.reserve(utts.size());
    for (const auto& u : utts) out.push_back(make_example(u, audio_window, block_length, with_audio, tail));
    return out;
}

nn::ModelConfig default_model_config(const CorpusConfig& cfg, nn::AttentionMode attention, int audio_window) {
    nn::ModelConfig m;
    m.vocab_size = cfg.vocab_size();
    m.attention = attention;
    m.feature_dim = cfg.feature_dim;
    m.audio_window = audio_window;
    const int max_frames = cfg.max_length * cfg.frames_per_token;
    const int audio_rows = (max_frames + audio_window - 1) / audio_window;
    const int instruction = static_cast<int>(default_instruction().size());
    // The causal baseline's response is [BOS, reference...], at most block_length long.
    m.audio_slots = audio_rows;
    m.max_positions = instruction + audio_rows + static_cast<int>(cfg.block_length) + 1;
    m.validate();
    return m;
}

std::pair<TokenSeq, TokenSeq> ar_teacher_pair(const TokenSeq& padded_response) {
    TokenSeq target;
    for (Token t : padded_response) {
        if (t == vocab::pad) break;
        target.push_back(t);
        if (t == vocab::eos) break;
    }
    require(!target.empty() && target.back() == vocab::eos, ErrorKind::contract, "teacher target must end in EOS");
    TokenSeq input{vocab::bos};
    input.insert(input.end(), target.begin(), target.end() - 1);
    return {input, target};
}

ArTrainer::ArTrainer(nn::Params<float> params, diffusion::TrainConfig config)
    : params_(std::move(params)), config_(config), state_(nn::AdamWState<float>::zeros(params_.config)) {
    require(params_.config.attention == nn::AttentionMode::causal, ErrorKind::configuration,
            "the autoregressive baseline needs causal attention");
    config_.schedule.validate();
}

diffusion::StepStats ArTrainer::train_step(std::span<const diffusion::TrainExample> batch, std::int64_t step) {
    require(!batch.empty(), ErrorKind::contract, "empty training batch");
    nn::Grads<float> grads = nn::Params<float>::zeros(params_.config);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    double loss_sum = 0.0;
    for (const auto& ex : batch) {
        auto [input, target] = ar_teacher_pair(ex.response);
        nn::PromptLayout layout{ex.instruction, ex.audio, input};
        nn::Tape<float> tape;
        const Matrix<float> logits = nn::forward(params_, layout, &tape);
        diffusion::MaskedBlock all{input, {}, 1.0};
        for (std::size_t i = 0; i < input.size(); ++i) all.masked_positions.push_back(i);
        auto result = diffusion::masked_ce_loss(logits, target, all);
        const double per_token = 1.0 / static_cast<double>(target.size());
        require(std::isfinite(result->loss), ErrorKind::training, "non-finite AR loss at step " + std::to_string(step));
        loss_sum += result->loss * per_token;
        result->dlogits *= static_cast<float>(per_token * inv_batch);
        nn::backprop_into(tape, result->dlogits, grads);
    }
    diffusion::StepStats stats;
    stats.step = step;
    stats.loss = loss_sum * inv_batch;
    stats.lr = nn::lr_at(config_.schedule, step);
    stats.t_mean = stats.t_min = stats.t_max = 1.0;
    nn::adamw_update(params_, grads, state_, config_.adamw, stats.lr, step);
    return stats;
}

std::vector<diffusion::StepStats> ArTrainer::fit(std::span<const diffusion::TrainExample> corpus, std::ostream* log,
                                                 std::int64_t log_every) {
    require(!corpus.empty(), ErrorKind::contract, "empty training corpus");
    std::vector<diffusion::StepStats> history;
    if (log) diffusion::write_log_header(*log);
    std::vector<diffusion::TrainExample> batch(config_.batch_size);
    for (std::int64_t step = 1; step <= config_.schedule.total_steps; ++step) {
        Rng pick(mix_seed(mix_seed(config_.seed, static_cast<std::uint64_t>(step)), 0));
        for (auto& slot : batch) slot = corpus[pick.below(corpus.size())];
        history.push_back(train_step(batch, step));
        if (log && (step % log_every == 0 || step == config_.schedule.total_steps)) {
            diffusion::write_log_line(*log, history.back());
        }
    }
    return history;
}

decoding::Hypothesis ar_greedy_transcribe(const nn::Params<float>& ar, const TokenSeq& instruction,
                                          const std::optional<FeatureMatrix>& audio, std::size_t max_len) {
    const auto start = std::chrono::steady_clock::now();
    decoding::Hypothesis h;
    nn::PromptLayout layout{instruction, audio, {vocab::bos}};
    h.truncated = true;
    while (h.tokens.size() < max_len) {
        const LogitMatrix logits = nn::forward(ar, layout);
        ++h.denoiser_calls;
        const LogitMatrix last = decoding::restrict_to_outputs(logits.bottomRows(1));
        const auto best = decoding::confidences(last).front();
        if (best.token == vocab::eos) {
            h.truncated = false;
            break;
        }
        h.tokens.push_back(best.token);
        h.confidences.push_back(best.probability);
        layout.response.push_back(best.token);
    }
    h.block = h.tokens;
    if (!h.truncated) h.block.push_back(vocab::eos);
    h.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return h;
}

}  // namespace mdasr::toytask
