#pragma once

#include "mdasr/deliberation.hpp"
#include "mdasr/toytask.hpp"

#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace mdasr::harness {

// Token-level error rate; the toy task has no word segmentation.
struct WerBreakdown {
    std::size_t substitutions = 0;
    std::size_t insertions = 0;
    std::size_t deletions = 0;
    std::size_t reference_length = 0;
    double wer = 0.0;

    std::size_t errors() const { return substitutions + insertions + deletions; }
    WerBreakdown& operator+=(const WerBreakdown& other);
};

// Unit-cost Levenshtein alignment. Among minimum-cost alignments the
// backtrace prefers substitution/match, then deletion, then insertion.
WerBreakdown wer(const TokenSeq& reference, const TokenSeq& hypothesis);

// Ratio of sums. Throws ErrorKind::contract for a non-positive duration.
double rtf(double total_elapsed_s, double total_duration_s);

struct HypothesisRecord {
    std::string id;
    TokenSeq tokens;
    std::vector<double> confidences;
    double duration_s = 0.0;
    double elapsed_s = 0.0;
    std::string provenance;
    std::size_t denoiser_calls = 0;
};

// JSON lines: {id, tokens, confidences, duration_s, elapsed_s, provenance, denoiser_calls}.
void write_hypotheses(const std::filesystem::path& path, const std::vector<HypothesisRecord>& records);
std::vector<HypothesisRecord> read_hypotheses(const std::filesystem::path& path);

struct Evaluation {
    WerBreakdown wer;
    double rtf = 0.0;
    double mean_calls = 0.0;
    double elapsed_s = 0.0;
    double duration_s = 0.0;
    std::size_t utterances = 0;
};

// Scores records against the references with matching ids; every utterance
// must have a record.
Evaluation evaluate(const std::vector<toytask::Utterance>& utterances, const std::vector<HypothesisRecord>& records);

std::vector<HypothesisRecord> decode_split(const decoding::MaskPredictor& denoiser,
                                           const std::vector<toytask::Utterance>& utterances, int audio_window,
                                           const decoding::DecodeConfig& cfg, const std::string& provenance);

std::vector<HypothesisRecord> transcribe_split(const nn::Params<float>& ar,
                                               const std::vector<toytask::Utterance>& utterances, int audio_window,
                                               std::size_t max_len);

// First-pass records are matched by id. Empty first-pass transcripts are
// passed through unchanged.
std::vector<HypothesisRecord> deliberate_split(const decoding::MaskPredictor& refiner,
                                               const std::vector<toytask::Utterance>& utterances, int audio_window,
                                               const std::vector<HypothesisRecord>& first_pass,
                                               const deliberation::DeliberationConfig& cfg);

// Key = value files with [section] headers; keys are addressed as
// "section.key".
using Config = boost::property_tree::ptree;

Config read_config(const std::filesystem::path& path);
Config parse_config(const std::string& text);
// Applies "section.key=value" overrides.
void apply_overrides(Config& config, const std::vector<std::string>& overrides);

// `fallback` when the key is absent; ErrorKind::configuration when present
// but not convertible to T.
template <typename T>
T setting(const Config& config, const std::string& key, T fallback) {
    if (!config.get_optional<std::string>(key)) return fallback;
    try {
        return config.get<T>(key);
    } catch (const boost::property_tree::ptree_error&) {
        fail(ErrorKind::configuration, "config key '" + key + "' has an invalid value");
    }
}

std::vector<double> parse_list(const std::string& text);
std::vector<std::string> parse_names(const std::string& text);

toytask::CorpusConfig corpus_config_from(const Config& config);
toytask::CorpusConfig read_corpus_config(const std::filesystem::path& data_dir);
nn::ModelConfig model_config_from(const Config& config, const toytask::CorpusConfig& corpus,
                                  nn::AttentionMode attention);
diffusion::TrainConfig train_config_from(const Config& config);
decoding::DecodeConfig decode_config_from(const Config& config);
deliberation::DeliberationConfig deliberation_config_from(const Config& config);

struct BenchRecord {
    std::string system;
    std::string config;
    std::string split;
    WerBreakdown wer;
    double rtf = 0.0;
    double mean_calls = 0.0;
    bool timed = true;
};

void write_bench_header(std::ostream& out);
void write_bench_row(std::ostream& out, const BenchRecord& record);

struct PlotPoint {
    double x = 0.0;
    double y = 0.0;
    std::string series;
};

void write_plot_data(std::ostream& out, const std::vector<PlotPoint>& points);

inline const std::vector<double> paper_step_grid{1, 4, 8, 16, 32, 64, 128};
inline const std::vector<double> paper_mask_ratios{0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
inline const std::vector<double> paper_deliberation_sub_blocks{2, 4, 6, 8, 10};
inline const std::vector<double> paper_decode_sub_blocks{1, 2, 4, 8, 16};

enum class ExperimentKind { ar_baseline, decode_steps, semi_ar, deliberation_mask, deliberation_blocks };

struct SweepEntry {
    ExperimentKind kind = ExperimentKind::decode_steps;
    std::string system;  // "ar", "diffusion", "semi_ar", "refiner", "text_refiner"
    std::string split;
    decoding::DecodeConfig decode{};
    deliberation::DeliberationConfig deliberation{};
    std::string label() const;
};

struct SweepSpec {
    std::filesystem::path data_dir;
    std::vector<std::string> splits;
    std::size_t limit = 0;  // utterances per split, 0 = all
    std::filesystem::path denoiser, ar;
    std::optional<std::filesystem::path> text_denoiser;
    std::vector<ExperimentKind> experiments;
    std::size_t block_length = 32;
    std::vector<double> steps = paper_step_grid;
    std::vector<double> semi_ar_sub_blocks = paper_decode_sub_blocks;
    std::vector<double> mask_ratios = paper_mask_ratios;
    std::vector<std::string> mask_strategies{"random", "low_confidence"};
    std::vector<double> deliberation_sub_blocks = paper_deliberation_sub_blocks;
    std::uint64_t seed = 0;
    bool timed = true;
    std::filesystem::path csv_out, plot_out;
};

SweepSpec sweep_spec_from(const Config& config);

// Grid expansion only; needs no checkpoints.
std::vector<SweepEntry> plan_sweep(const SweepSpec& spec);

struct SweepResult {
    std::vector<BenchRecord> rows;
    std::vector<PlotPoint> plot;
};

// Verifies every referenced checkpoint first (ErrorKind::missing_input names
// the offending key), then runs each entry with parallelism 1.
SweepResult run_sweep(const SweepSpec& spec, std::ostream* progress = nullptr);
SweepResult run_sweep(const std::filesystem::path& spec_file, std::ostream* progress = nullptr);

}  // namespace mdasr::harness
