#include "mdasr/harness.hpp"

#include "mdasr/nn/checkpoint.hpp"

#include "json.hpp"

#include <boost/property_tree/ini_parser.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <unordered_map>

namespace mdasr::harness {

using json = nlohmann::json;

WerBreakdown& WerBreakdown::operator+=(const WerBreakdown& o) {
    substitutions += o.substitutions;
    insertions += o.insertions;
    deletions += o.deletions;
    reference_length += o.reference_length;
    wer = reference_length ? static_cast<double>(errors()) / static_cast<double>(reference_length) : 0.0;
    return *this;
}

WerBreakdown wer(const TokenSeq& ref, const TokenSeq& hyp) {
    require(!ref.empty(), ErrorKind::contract, "WER needs a non-empty reference");
    const std::size_t n = ref.size();
    const std::size_t m = hyp.size();
    std::vector<std::size_t> d((n + 1) * (m + 1));
    auto at = [m, &d](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
    for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
    for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
        }
    }
    WerBreakdown out;
    out.reference_length = n;
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
            if (ref[i - 1] != hyp[j - 1]) ++out.substitutions;
            --i;
            --j;
        } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            ++out.deletions;
            --i;
        } else {
            ++out.insertions;
            --j;
        }
    }
    out.wer = static_cast<double>(out.errors()) / static_cast<double>(n);
    return out;
}

double rtf(double total_elapsed_s, double total_duration_s) {
    require(total_duration_s > 0.0, ErrorKind::contract, "RTF needs a positive audio duration");
    return total_elapsed_s / total_duration_s;
}

void write_hypotheses(const std::filesystem::path& path, const std::vector<HypothesisRecord>& records) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write '" + path.string() + "'");
    for (const auto& r : records) {
        const json j{{"id", r.id},
                     {"tokens", join_tokens(r.tokens)},
                     {"confidences", r.confidences},
                     {"duration_s", r.duration_s},
                     {"elapsed_s", r.elapsed_s},
                     {"provenance", r.provenance},
                     {"denoiser_calls", r.denoiser_calls}};
        out << j.dump() << '\n';
    }
    require(static_cast<bool>(out), ErrorKind::io, "write to '" + path.string() + "' failed");
}

std::vector<HypothesisRecord> read_hypotheses(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::missing_input, "hypothesis file '" + path.string() + "' not found");
    std::vector<HypothesisRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            HypothesisRecord r;
            r.id = j.at("id").get<std::string>();
            r.tokens = parse_tokens(j.at("tokens").get<std::string>());
            r.confidences = j.value("confidences", std::vector<double>{});
            r.duration_s = j.value("duration_s", 0.0);
            r.elapsed_s = j.value("elapsed_s", 0.0);
            r.provenance = j.value("provenance", std::string{});
            r.denoiser_calls = j.value("denoiser_calls", std::size_t{0});
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            fail(ErrorKind::format, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

Evaluation evaluate(const std::vector<toytask::Utterance>& utterances, const std::vector<HypothesisRecord>& records) {
    std::unordered_map<std::string, const HypothesisRecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    Evaluation e;
    std::size_t calls = 0;
    for (const auto& u : utterances) {
        const auto it = by_id.find(u.id);
        require(it != by_id.end(), ErrorKind::missing_input, "no hypothesis for utterance '" + u.id + "'");
        e.wer += wer(u.reference, it->second->tokens);
        e.elapsed_s += it->second->elapsed_s;
        e.duration_s += u.duration_s;
        calls += it->second->denoiser_calls;
        ++e.utterances;
    }
    if (e.utterances) {
        e.rtf = rtf(e.elapsed_s, e.duration_s);
        e.mean_calls = static_cast<double>(calls) / static_cast<double>(e.utterances);
    }
    return e;
}

std::vector<HypothesisRecord> decode_split(const decoding::MaskPredictor& denoiser,
                                           const std::vector<toytask::Utterance>& utterances, int audio_window,
                                           const decoding::DecodeConfig& cfg, const std::string& provenance) {
    std::vector<HypothesisRecord> out;
    out.reserve(utterances.size());
    const TokenSeq instruction = toytask::default_instruction();
    for (const auto& u : utterances) {
        const auto start = std::chrono::steady_clock::now();
        const std::optional<FeatureMatrix> audio = nn::pool_frames(u.frames, audio_window);
        const decoding::Hypothesis h = cfg.sub_blocks == 1
                                           ? decoding::diffusion_decode(denoiser, instruction, audio, cfg)
                                           : decoding::semi_ar_decode(denoiser, instruction, audio, cfg);
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out.push_back({u.id, h.tokens, h.confidences, u.duration_s, elapsed, provenance, h.denoiser_calls});
    }
    return out;
}

std::vector<HypothesisRecord> transcribe_split(const nn::Params<float>& ar,
                                               const std::vector<toytask::Utterance>& utterances, int audio_window,
                                               std::size_t max_len) {
    std::vector<HypothesisRecord> out;
    out.reserve(utterances.size());
    const TokenSeq instruction = toytask::default_instruction();
    for (const auto& u : utterances) {
        const auto start = std::chrono::steady_clock::now();
        const std::optional<FeatureMatrix> audio = nn::pool_frames(u.frames, audio_window);
        const auto h = toytask::ar_greedy_transcribe(ar, instruction, audio, max_len);
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out.push_back({u.id, h.tokens, h.confidences, u.duration_s, elapsed, "ar-baseline", h.denoiser_calls});
    }
    return out;
}

std::vector<HypothesisRecord> deliberate_split(const decoding::MaskPredictor& refiner,
                                               const std::vector<toytask::Utterance>& utterances, int audio_window,
                                               const std::vector<HypothesisRecord>& first_pass,
                                               const deliberation::DeliberationConfig& cfg) {
    std::unordered_map<std::string, const HypothesisRecord*> by_id;
    for (const auto& r : first_pass) by_id[r.id] = &r;
    std::vector<HypothesisRecord> out;
    out.reserve(utterances.size());
    const TokenSeq instruction = toytask::default_instruction();
    for (std::size_t i = 0; i < utterances.size(); ++i) {
        const auto& u = utterances[i];
        const auto it = by_id.find(u.id);
        require(it != by_id.end(), ErrorKind::missing_input, "no first-pass hypothesis for utterance '" + u.id + "'");
        const HypothesisRecord& fp = *it->second;
        HypothesisRecord rec{u.id, fp.tokens, {}, u.duration_s, 0.0, fp.provenance + "+" + deliberation::provenance(cfg), 0};
        if (!fp.tokens.empty()) {
            const auto start = std::chrono::steady_clock::now();
            const std::optional<FeatureMatrix> audio = nn::pool_frames(u.frames, audio_window);
            TokenSeq tokens = fp.tokens;
            if (tokens.size() > cfg.block_length) tokens.resize(cfg.block_length);
            const auto r = deliberation::deliberate(refiner, instruction, audio, {tokens, fp.provenance, u.duration_s},
                                                    cfg, static_cast<std::uint64_t>(i));
            rec.tokens = r.transcript.tokens;
            rec.denoiser_calls = r.denoiser_calls;
            rec.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        }
        out.push_back(std::move(rec));
    }
    return out;
}

Config read_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::missing_input, "config file '" + path.string() + "' not found");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str());
}

Config parse_config(const std::string& text) {
    // '#' comments are accepted alongside ';'.
    std::istringstream in(text);
    std::ostringstream cleaned;
    std::string line;
    while (std::getline(in, line)) {
        const auto first = line.find_first_not_of(" \t");
        if (first != std::string::npos && line[first] == '#') continue;
        cleaned << line << '\n';
    }
    std::istringstream src(cleaned.str());
    Config config;
    try {
        boost::property_tree::ini_parser::read_ini(src, config);
    } catch (const boost::property_tree::ini_parser_error& e) {
        fail(ErrorKind::format, std::string("config: ") + e.what());
    }
    return config;
}

void apply_overrides(Config& config, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        require(eq != std::string::npos && eq > 0, ErrorKind::configuration,
                "override '" + o + "' is not of the form section.key=value");
        config.put(o.substr(0, eq), o.substr(eq + 1));
    }
}

std::vector<std::string> parse_names(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = item.find_last_not_of(" \t");
        out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

std::vector<double> parse_list(const std::string& text) {
    std::vector<double> out;
    for (const auto& item : parse_names(text)) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            require(used == item.size(), ErrorKind::configuration, "bad number '" + item + "'");
        } catch (const std::logic_error&) {
            fail(ErrorKind::configuration, "bad number '" + item + "' in list '" + text + "'");
        }
    }
    return out;
}

namespace {

template <typename T>
T get(const Config& c, const std::string& key, T fallback) {
    return setting<T>(c, key, fallback);
}

bool get_bool(const Config& c, const std::string& key, bool fallback) {
    const auto text = c.get<std::string>(key, fallback ? "true" : "false");
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    fail(ErrorKind::configuration, "config key '" + key + "' expects a boolean, got '" + text + "'");
}

nn::Params<float> load_model(const std::filesystem::path& path, const std::string& key) {
    require(std::filesystem::exists(path), ErrorKind::missing_input,
            key + ": checkpoint '" + path.string() + "' not found");
    return nn::load_checkpoint<float>(path);
}

}  // namespace

toytask::CorpusConfig corpus_config_from(const Config& c) {
    toytask::CorpusConfig cc;
    cc.content_vocab = get(c, "corpus.content_vocab", cc.content_vocab);
    cc.min_length = get(c, "corpus.min_length", cc.min_length);
    cc.max_length = get(c, "corpus.max_length", cc.max_length);
    cc.frames_per_token = get(c, "corpus.frames_per_token", cc.frames_per_token);
    cc.feature_dim = get(c, "corpus.feature_dim", cc.feature_dim);
    cc.frame_period_s = get(c, "corpus.frame_period_s", cc.frame_period_s);
    cc.noise_sigma_clean = get(c, "corpus.noise_sigma_clean", cc.noise_sigma_clean);
    cc.noise_sigma_other = get(c, "corpus.noise_sigma_other", cc.noise_sigma_other);
    cc.branching = get(c, "corpus.branching", cc.branching);
    cc.train_size = get(c, "corpus.train_size", cc.train_size);
    cc.dev_size = get(c, "corpus.dev_size", cc.dev_size);
    cc.test_clean_size = get(c, "corpus.test_clean_size", cc.test_clean_size);
    cc.test_other_size = get(c, "corpus.test_other_size", cc.test_other_size);
    cc.block_length = get(c, "corpus.block_length", cc.block_length);
    cc.seed = get(c, "run.seed", cc.seed);
    cc.validate();
    return cc;
}

toytask::CorpusConfig read_corpus_config(const std::filesystem::path& data_dir) {
    const auto path = data_dir / "corpus.json";
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::missing_input, "corpus metadata '" + path.string() + "' not found");
    json j;
    try {
        in >> j;
        toytask::CorpusConfig cc;
        cc.content_vocab = j.at("content_vocab");
        cc.min_length = j.at("min_length");
        cc.max_length = j.at("max_length");
        cc.frames_per_token = j.at("frames_per_token");
        cc.feature_dim = j.at("feature_dim");
        cc.frame_period_s = j.at("frame_period_s");
        cc.noise_sigma_clean = j.at("noise_sigma_clean");
        cc.noise_sigma_other = j.at("noise_sigma_other");
        cc.branching = j.at("branching");
        cc.train_size = j.at("train_size");
        cc.dev_size = j.at("dev_size");
        cc.test_clean_size = j.at("test_clean_size");
        cc.test_other_size = j.at("test_other_size");
        cc.block_length = j.at("block_length");
        cc.seed = j.at("seed");
        cc.validate();
        return cc;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, "corpus metadata '" + path.string() + "': " + e.what());
    }
}

nn::ModelConfig model_config_from(const Config& c, const toytask::CorpusConfig& corpus, nn::AttentionMode attention) {
    const int window = get(c, "model.audio_window", 4);
    nn::ModelConfig m = toytask::default_model_config(corpus, attention, window);
    m.model_dim = get(c, "model.model_dim", m.model_dim);
    m.num_layers = get(c, "model.num_layers", m.num_layers);
    m.num_heads = get(c, "model.num_heads", m.num_heads);
    m.ffn_dim = get(c, "model.ffn_dim", m.ffn_dim);
    m.audio_slots = get(c, "model.audio_slots", m.audio_slots);
    m.max_positions = get(c, "model.max_positions", m.max_positions);
    m.validate();
    return m;
}

diffusion::TrainConfig train_config_from(const Config& c) {
    diffusion::TrainConfig t;
    const auto objective = get<std::string>(c, "train.objective", "audio_sft");
    if (objective == "audio_sft") {
        t.mode = diffusion::ObjectiveMode::audio_sft;
    } else if (objective == "sft") {
        t.mode = diffusion::ObjectiveMode::sft;
    } else if (objective == "pretrain") {
        t.mode = diffusion::ObjectiveMode::pretrain;
    } else {
        fail(ErrorKind::configuration, "train.objective must be audio_sft, sft or pretrain");
    }
    const auto masking = get<std::string>(c, "train.masking", "bernoulli");
    require(masking == "bernoulli" || masking == "exact_count", ErrorKind::configuration,
            "train.masking must be bernoulli or exact_count");
    t.mask_mode = masking == "bernoulli" ? diffusion::MaskCountMode::bernoulli : diffusion::MaskCountMode::exact_count;
    t.batch_size = get(c, "train.batch_size", t.batch_size);
    t.length_normalize = get_bool(c, "train.length_normalize", t.length_normalize);
    t.adamw.beta1 = get(c, "train.beta1", t.adamw.beta1);
    t.adamw.beta2 = get(c, "train.beta2", t.adamw.beta2);
    t.adamw.eps = get(c, "train.eps", t.adamw.eps);
    t.adamw.weight_decay = get(c, "train.weight_decay", t.adamw.weight_decay);
    t.schedule.lr_start = get(c, "train.lr_start", 6e-5);
    t.schedule.lr_peak = get(c, "train.lr_peak", 2e-3);
    t.schedule.lr_min = get(c, "train.lr_min", 2e-4);
    t.schedule.total_steps = get<std::int64_t>(c, "train.steps", 10000);
    t.schedule.warmup_steps = get<std::int64_t>(c, "train.warmup_steps", t.schedule.total_steps / 10);
    t.seed = get<std::uint64_t>(c, "run.seed", 0);
    t.schedule.validate();
    return t;
}

decoding::DecodeConfig decode_config_from(const Config& c) {
    decoding::DecodeConfig d;
    d.block_length = get(c, "decode.block_length", d.block_length);
    d.steps = get(c, "decode.steps", d.steps);
    d.sub_blocks = get(c, "decode.sub_blocks", d.sub_blocks);
    d.early_stop = get_bool(c, "decode.early_stop", d.early_stop);
    d.validate();
    return d;
}

deliberation::DeliberationConfig deliberation_config_from(const Config& c) {
    deliberation::DeliberationConfig d;
    d.strategy = deliberation::parse_strategy(get<std::string>(c, "deliberation.strategy", "random"));
    d.mask_ratio = get(c, "deliberation.mask_ratio", d.mask_ratio);
    d.sub_blocks = get(c, "deliberation.sub_blocks", d.sub_blocks);
    d.use_audio = get_bool(c, "deliberation.use_audio", d.use_audio);
    d.block_length = get(c, "deliberation.block_length", d.block_length);
    d.score_with_transcript = get_bool(c, "deliberation.score_with_transcript", d.score_with_transcript);
    d.reconstruct_steps = get(c, "deliberation.reconstruct_steps", d.reconstruct_steps);
    d.seed = get<std::uint64_t>(c, "run.seed", 0);
    d.validate();
    return d;
}

void write_bench_header(std::ostream& out) {
    out << "system,config,split,substitutions,insertions,deletions,reference_length,wer,mean_calls,rtf,timed\n";
}

void write_bench_row(std::ostream& out, const BenchRecord& r) {
    out << r.system << ',' << r.config << ',' << r.split << ',' << r.wer.substitutions << ',' << r.wer.insertions << ','
        << r.wer.deletions << ',' << r.wer.reference_length << ',' << std::setprecision(10) << r.wer.wer << ','
        << r.mean_calls << ',' << r.rtf << ',' << (r.timed ? 1 : 0) << '\n';
}

void write_plot_data(std::ostream& out, const std::vector<PlotPoint>& points) {
    out << "x,y,series\n";
    for (const auto& p : points) out << std::setprecision(10) << p.x << ',' << p.y << ',' << p.series << '\n';
}

std::string SweepEntry::label() const {
    std::ostringstream s;
    switch (kind) {
        case ExperimentKind::ar_baseline: s << "greedy"; break;
        case ExperimentKind::decode_steps:
        case ExperimentKind::semi_ar: s << "L=" << decode.block_length << ";N=" << decode.steps << ";M=" << decode.sub_blocks; break;
        case ExperimentKind::deliberation_mask:
        case ExperimentKind::deliberation_blocks: s << deliberation::provenance(deliberation); break;
    }
    return s.str();
}

namespace {

ExperimentKind parse_experiment(const std::string& name) {
    if (name == "ar_baseline") return ExperimentKind::ar_baseline;
    if (name == "decode_steps") return ExperimentKind::decode_steps;
    if (name == "semi_ar") return ExperimentKind::semi_ar;
    if (name == "deliberation_mask") return ExperimentKind::deliberation_mask;
    if (name == "deliberation_blocks") return ExperimentKind::deliberation_blocks;
    fail(ErrorKind::configuration, "unknown experiment '" + name + "'");
}

std::size_t as_count(double v, const std::string& what) {
    require(v >= 1.0 && std::floor(v) == v, ErrorKind::configuration, what + " must be positive integers");
    return static_cast<std::size_t>(v);
}

}  // namespace

SweepSpec sweep_spec_from(const Config& c) {
    SweepSpec s;
    s.data_dir = get<std::string>(c, "data.dir", "data");
    s.splits = parse_names(get<std::string>(c, "data.splits", "test_clean,test_other"));
    for (const auto& split : s.splits) toytask::parse_split(split);
    s.limit = get<std::size_t>(c, "data.limit", 0);
    s.denoiser = get<std::string>(c, "models.denoiser", "");
    s.ar = get<std::string>(c, "models.ar", "");
    if (const auto text = c.get_optional<std::string>("models.text_denoiser"); text && !text->empty()) {
        s.text_denoiser = *text;
    }
    const auto experiments = parse_names(get<std::string>(
        c, "sweep.experiments", "ar_baseline,decode_steps,semi_ar,deliberation_mask,deliberation_blocks"));
    for (const auto& e : experiments) s.experiments.push_back(parse_experiment(e));
    s.block_length = get(c, "sweep.block_length", s.block_length);
    if (auto v = c.get_optional<std::string>("sweep.steps")) s.steps = parse_list(*v);
    if (auto v = c.get_optional<std::string>("sweep.semi_ar_sub_blocks")) s.semi_ar_sub_blocks = parse_list(*v);
    if (auto v = c.get_optional<std::string>("sweep.mask_ratios")) s.mask_ratios = parse_list(*v);
    if (auto v = c.get_optional<std::string>("sweep.mask_strategies")) s.mask_strategies = parse_names(*v);
    if (auto v = c.get_optional<std::string>("sweep.deliberation_sub_blocks")) s.deliberation_sub_blocks = parse_list(*v);
    s.seed = get<std::uint64_t>(c, "run.seed", 0);
    s.timed = get_bool(c, "sweep.timed", s.timed);
    s.csv_out = get<std::string>(c, "output.csv", "sweep.csv");
    s.plot_out = get<std::string>(c, "output.plot", "sweep_plot.csv");
    return s;
}

std::vector<SweepEntry> plan_sweep(const SweepSpec& spec) {
    std::vector<SweepEntry> out;
    for (const auto& split : spec.splits) {
        for (ExperimentKind kind : spec.experiments) {
            SweepEntry base;
            base.kind = kind;
            base.split = split;
            base.decode.block_length = spec.block_length;
            base.deliberation.block_length = spec.block_length;
            base.deliberation.seed = spec.seed;
            switch (kind) {
                case ExperimentKind::ar_baseline:
                    base.system = "ar";
                    out.push_back(base);
                    break;
                case ExperimentKind::decode_steps:
                    for (double n : spec.steps) {
                        SweepEntry e = base;
                        e.system = "diffusion";
                        e.decode.steps = as_count(n, "sweep.steps");
                        out.push_back(e);
                    }
                    break;
                case ExperimentKind::semi_ar:
                    for (double m : spec.semi_ar_sub_blocks) {
                        for (double n : spec.steps) {
                            SweepEntry e = base;
                            e.system = "semi_ar";
                            e.decode.sub_blocks = as_count(m, "sweep.semi_ar_sub_blocks");
                            e.decode.steps = as_count(n, "sweep.steps");
                            e.decode.validate();
                            out.push_back(e);
                        }
                    }
                    break;
                case ExperimentKind::deliberation_mask:
                    for (const auto& strategy : spec.mask_strategies) {
                        for (double p : spec.mask_ratios) {
                            SweepEntry e = base;
                            e.system = "refiner";
                            e.deliberation.strategy = deliberation::parse_strategy(strategy);
                            require(e.deliberation.strategy != deliberation::Strategy::semi_ar, ErrorKind::configuration,
                                    "sweep.mask_strategies takes random and low_confidence only");
                            e.deliberation.mask_ratio = p;
                            e.deliberation.validate();
                            out.push_back(e);
                        }
                    }
                    if (spec.text_denoiser) {
                        for (double p : spec.mask_ratios) {
                            SweepEntry e = base;
                            e.system = "text_refiner";
                            e.deliberation.strategy = deliberation::Strategy::random;
                            e.deliberation.mask_ratio = p;
                            e.deliberation.use_audio = false;
                            out.push_back(e);
                        }
                    }
                    break;
                case ExperimentKind::deliberation_blocks:
                    for (double m : spec.deliberation_sub_blocks) {
                        SweepEntry e = base;
                        e.system = "refiner";
                        e.deliberation.strategy = deliberation::Strategy::semi_ar;
                        e.deliberation.sub_blocks = as_count(m, "sweep.deliberation_sub_blocks");
                        out.push_back(e);
                    }
                    break;
            }
        }
    }
    return out;
}

SweepResult run_sweep(const SweepSpec& spec, std::ostream* progress) {
    const auto entries = plan_sweep(spec);
    bool need_denoiser = false, need_ar = false, need_text = false;
    for (const auto& e : entries) {
        need_denoiser |= e.system == "diffusion" || e.system == "semi_ar" || e.system == "refiner";
        need_ar |= e.system == "ar" || e.system == "refiner" || e.system == "text_refiner";
        need_text |= e.system == "text_refiner";
    }
    std::optional<nn::Params<float>> denoiser, ar, text;
    if (need_denoiser) denoiser = load_model(spec.denoiser, "models.denoiser");
    if (need_ar) ar = load_model(spec.ar, "models.ar");
    if (need_text) text = load_model(*spec.text_denoiser, "models.text_denoiser");

    const int window = denoiser ? denoiser->config.audio_window : (ar ? ar->config.audio_window : 4);
    std::map<std::string, std::vector<toytask::Utterance>> data;
    std::map<std::string, std::vector<HypothesisRecord>> first_pass;
    for (const auto& split : spec.splits) {
        auto utts = toytask::read_split(spec.data_dir, toytask::parse_split(split));
        if (spec.limit && utts.size() > spec.limit) utts.resize(spec.limit);
        data[split] = std::move(utts);
        if (ar) first_pass[split] = transcribe_split(*ar, data[split], ar->config.audio_window, spec.block_length);
    }

    SweepResult result;
    for (const auto& e : entries) {
        const auto& utts = data.at(e.split);
        std::vector<HypothesisRecord> hyps;
        std::size_t budget = 0;
        switch (e.kind) {
            case ExperimentKind::ar_baseline:
                hyps = first_pass.at(e.split);
                break;
            case ExperimentKind::decode_steps:
            case ExperimentKind::semi_ar: {
                decoding::ModelPredictor predictor(*denoiser);
                hyps = decode_split(predictor, utts, window, e.decode, e.label());
                budget = e.decode.sub_blocks == 1 ? e.decode.steps
                                                  : e.decode.sub_blocks * e.decode.steps_per_sub_block();
                break;
            }
            case ExperimentKind::deliberation_mask:
            case ExperimentKind::deliberation_blocks: {
                decoding::ModelPredictor predictor(e.system == "text_refiner" ? *text : *denoiser);
                hyps = deliberate_split(predictor, utts, window, first_pass.at(e.split), e.deliberation);
                break;
            }
        }
        for (const auto& h : hyps) {
            require(budget == 0 || h.denoiser_calls <= budget, ErrorKind::contract,
                    "decode of '" + h.id + "' used " + std::to_string(h.denoiser_calls) + " calls, budget " +
                        std::to_string(budget));
        }
        const Evaluation ev = evaluate(utts, hyps);
        BenchRecord row{e.system, e.label(), e.split, ev.wer, spec.timed ? ev.rtf : 0.0, ev.mean_calls, spec.timed};
        if (progress) write_bench_row(*progress, row);
        result.rows.push_back(row);

        const std::string suffix = "/" + e.split;
        switch (e.kind) {
            case ExperimentKind::ar_baseline: break;
            case ExperimentKind::decode_steps:
                result.plot.push_back({static_cast<double>(e.decode.steps), ev.wer.wer, "diffusion" + suffix});
                break;
            case ExperimentKind::semi_ar:
                result.plot.push_back({static_cast<double>(e.decode.steps), ev.wer.wer,
                                       "semi_ar_M" + std::to_string(e.decode.sub_blocks) + suffix});
                break;
            case ExperimentKind::deliberation_mask:
                result.plot.push_back({e.deliberation.mask_ratio, ev.wer.wer,
                                       e.system + "_" + std::string(deliberation::to_string(e.deliberation.strategy)) +
                                           suffix});
                break;
            case ExperimentKind::deliberation_blocks:
                result.plot.push_back({static_cast<double>(e.deliberation.sub_blocks), ev.wer.wer, "semi_ar_refiner" + suffix});
                break;
        }
    }

    if (!spec.csv_out.empty()) {
        if (spec.csv_out.has_parent_path()) std::filesystem::create_directories(spec.csv_out.parent_path());
        std::ofstream out(spec.csv_out);
        require(static_cast<bool>(out), ErrorKind::io, "cannot write '" + spec.csv_out.string() + "'");
        write_bench_header(out);
        for (const auto& r : result.rows) write_bench_row(out, r);
    }
    if (!spec.plot_out.empty()) {
        if (spec.plot_out.has_parent_path()) std::filesystem::create_directories(spec.plot_out.parent_path());
        std::ofstream out(spec.plot_out);
        require(static_cast<bool>(out), ErrorKind::io, "cannot write '" + spec.plot_out.string() + "'");
        write_plot_data(out, result.plot);
    }
    return result;
}

SweepResult run_sweep(const std::filesystem::path& spec_file, std::ostream* progress) {
    return run_sweep(sweep_spec_from(read_config(spec_file)), progress);
}

}  // namespace mdasr::harness
