#pragma once

#include "mdasr/decoding.hpp"
#include "mdasr/diffusion.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mdasr::toytask {

enum class Split { train, dev, test_clean, test_other };

inline constexpr std::array<Split, 4> all_splits{Split::train, Split::dev, Split::test_clean, Split::test_other};

std::string_view to_string(Split split) noexcept;
Split parse_split(std::string_view text);

struct CorpusConfig {
    int content_vocab = 32;
    int min_length = 3;
    int max_length = 24;
    int frames_per_token = 4;
    int feature_dim = 16;
    double frame_period_s = 0.025;
    double noise_sigma_clean = 0.3;
    double noise_sigma_other = 0.9;
    // Successors per token in the bigram source.
    int branching = 2;
    std::size_t train_size = 20000;
    std::size_t dev_size = 1000;
    std::size_t test_clean_size = 1000;
    std::size_t test_other_size = 1000;
    std::size_t block_length = 32;
    std::uint64_t seed = 1;

    int vocab_size() const { return content_vocab + vocab::num_reserved; }
    std::size_t size_of(Split split) const;
    // test_clean and test_other use one level each; train and dev alternate
    // clean (even index) and other (odd index) utterances.
    double sigma_of(Split split, std::size_t index) const;
    void validate() const;
};

struct Utterance {
    std::string id;
    TokenSeq reference;
    FeatureMatrix frames;  // (frames_per_token * len) x feature_dim
    double duration_s = 0.0;
};

// The hidden generative source: unit-norm prototypes per content token and a
// sparse bigram table (row 0 is the start distribution).
struct Source {
    FeatureMatrix prototypes;    // content_vocab x feature_dim
    Matrix<double> transitions;  // (content_vocab + 1) x content_vocab
};

Source make_source(const CorpusConfig& cfg);

struct Corpus {
    CorpusConfig config;
    Source source;
    std::map<Split, std::vector<Utterance>> splits;
};

// Deterministic in cfg.seed; each utterance draws from its own seed so the
// result does not depend on generation order.
Corpus gen_corpus(const CorpusConfig& cfg);
Utterance gen_utterance(const CorpusConfig& cfg, const Source& source, Split split, std::size_t index);

// Writes manifest_<split>.jsonl and features/<split>/<id>.feat under `dir`,
// plus corpus.json with the generating config.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
std::vector<Utterance> read_split(const std::filesystem::path& dir, Split split);

// Feature file: u32 id length, id bytes, u32 rows, u32 cols, then row-major
// little-endian f32 data.
void write_features(const std::filesystem::path& path, const std::string& id, const FeatureMatrix& frames);
FeatureMatrix read_features(const std::filesystem::path& path, std::string* id = nullptr);

// The instruction every layout starts with.
TokenSeq default_instruction();

// Pooled audio plus reference + EOS, filled to the block length.
diffusion::TrainExample make_example(const Utterance& utt, int audio_window, std::size_t block_length, bool with_audio,
                                     diffusion::TailFill tail = diffusion::TailFill::eos);
std::vector<diffusion::TrainExample> make_examples(const std::vector<Utterance>& utts, int audio_window,
                                                   std::size_t block_length, bool with_audio,
                                                   diffusion::TailFill tail = diffusion::TailFill::eos);

// Model shape that fits the corpus: instruction + pooled audio + block.
nn::ModelConfig default_model_config(const CorpusConfig& cfg, nn::AttentionMode attention, int audio_window = 4);

// Next-token training of the causal baseline on (audio, reference) pairs.
class ArTrainer {
public:
    ArTrainer(nn::Params<float> params, diffusion::TrainConfig config);

    diffusion::StepStats train_step(std::span<const diffusion::TrainExample> batch, std::int64_t step);
    std::vector<diffusion::StepStats> fit(std::span<const diffusion::TrainExample> corpus, std::ostream* log = nullptr,
                                          std::int64_t log_every = 1);

    const nn::Params<float>& params() const { return params_; }

private:
    nn::Params<float> params_;
    diffusion::TrainConfig config_;
    nn::AdamWState<float> state_;
};

// Input/target pair for teacher forcing: [BOS, r...] -> [r..., EOS].
std::pair<TokenSeq, TokenSeq> ar_teacher_pair(const TokenSeq& padded_response);

// Greedy left-to-right decoding with full recomputation per token. One
// forward per emitted token including EOS; truncated when max_len content
// tokens were produced without EOS.
decoding::Hypothesis ar_greedy_transcribe(const nn::Params<float>& ar, const TokenSeq& instruction,
                                          const std::optional<FeatureMatrix>& audio, std::size_t max_len);

}  // namespace mdasr::toytask
