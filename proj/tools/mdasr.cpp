#include "mdasr/harness.hpp"
#include "mdasr/nn/checkpoint.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>

using namespace mdasr;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
    cmd->add_option("--config", c.config, "key = value config file");
    cmd->add_option("--seed", c.seed, "run seed (run.seed)");
    auto* out = cmd->add_option("--out", c.out, "output path");
    if (out_required) out->required();
    cmd->add_option("--set", c.overrides, "section.key=value override")->take_all();
}

harness::Config load(const Common& c) {
    harness::Config cfg = c.config.empty() ? harness::Config{} : harness::read_config(c.config);
    harness::apply_overrides(cfg, c.overrides);
    if (c.seed) cfg.put("run.seed", *c.seed);
    return cfg;
}

std::string get(const harness::Config& cfg, const std::string& key, const std::string& flag) {
    if (!flag.empty()) return flag;
    const auto v = cfg.get_optional<std::string>(key);
    require(v && !v->empty(), ErrorKind::configuration, "missing '" + key + "' (config or flag)");
    return *v;
}

std::vector<toytask::Utterance> load_split(const harness::Config& cfg, const std::string& dir, toytask::Split split) {
    auto utts = toytask::read_split(dir, split);
    const auto limit = harness::setting<std::size_t>(cfg, "data.limit", 0);
    if (limit && utts.size() > limit) utts.resize(limit);
    return utts;
}

diffusion::TailFill tail_fill(const harness::Config& cfg) {
    const auto text = cfg.get<std::string>("train.tail", "eos");
    if (text == "eos") return diffusion::TailFill::eos;
    if (text == "pad") return diffusion::TailFill::pad;
    fail(ErrorKind::configuration, "train.tail must be eos or pad");
}

void train(const Common& c, const std::string& data_flag, nn::AttentionMode attention) {
    const auto cfg = load(c);
    const std::string dir = get(cfg, "data.dir", data_flag);
    const auto corpus = harness::read_corpus_config(dir);
    const auto tc = harness::train_config_from(cfg);
    const auto mc = harness::model_config_from(cfg, corpus, attention);
    const bool with_audio = attention == nn::AttentionMode::causal || tc.mode == diffusion::ObjectiveMode::audio_sft;
    const auto utts = load_split(cfg, dir, toytask::Split::train);
    const auto examples = toytask::make_examples(utts, mc.audio_window, corpus.block_length, with_audio, tail_fill(cfg));

    const std::filesystem::path out(c.out);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    const auto log_path = cfg.get<std::string>("train.log", c.out + ".log.csv");
    std::ofstream log(log_path);
    require(static_cast<bool>(log), ErrorKind::io, "cannot write '" + log_path + "'");
    const auto log_every = harness::setting<std::int64_t>(cfg, "train.log_every", 1);

    auto params = nn::init_params<float>(mc, tc.seed);
    if (attention == nn::AttentionMode::causal) {
        toytask::ArTrainer trainer(std::move(params), tc);
        trainer.fit(examples, &log, log_every);
        nn::save_checkpoint(trainer.params(), out);
    } else {
        diffusion::Trainer<float> trainer(std::move(params), tc);
        trainer.fit(examples, &log, log_every);
        nn::save_checkpoint(trainer.params(), out);
    }
}

struct SplitArgs {
    std::string data, split, model;
};

void add_split_args(CLI::App* cmd, SplitArgs& a) {
    cmd->add_option("--data", a.data, "corpus directory (data.dir)");
    cmd->add_option("--split", a.split, "split name (data.split)");
    cmd->add_option("--model", a.model, "checkpoint (models.denoiser, or models.ar for causal decoding)");
}

void decode(const Common& c, const SplitArgs& a, const std::string& trace_dir) {
    const auto cfg = load(c);
    const auto dir = get(cfg, "data.dir", a.data);
    const auto split = toytask::parse_split(a.split.empty() ? cfg.get<std::string>("data.split", "test_other") : a.split);
    const auto utts = load_split(cfg, dir, split);
    const auto model_path = a.model.empty() ? get(cfg, "models.denoiser", "") : a.model;
    const auto params = nn::load_checkpoint<float>(model_path);
    const auto dc = harness::decode_config_from(cfg);

    std::vector<harness::HypothesisRecord> hyps;
    if (params.config.attention == nn::AttentionMode::causal) {
        hyps = harness::transcribe_split(params, utts, params.config.audio_window, dc.block_length);
    } else {
        decoding::ModelPredictor predictor(params);
        std::ostringstream label;
        label << "diffusion:L=" << dc.block_length << ":N=" << dc.steps << ":M=" << dc.sub_blocks;
        hyps = harness::decode_split(predictor, utts, params.config.audio_window, dc, label.str());
        if (!trace_dir.empty()) {
            std::filesystem::create_directories(trace_dir);
            for (const auto& u : utts) {
                decoding::Trace trace;
                const auto audio = nn::pool_frames(u.frames, params.config.audio_window);
                if (dc.sub_blocks == 1) {
                    decoding::diffusion_decode(predictor, toytask::default_instruction(), audio, dc, &trace);
                } else {
                    decoding::semi_ar_decode(predictor, toytask::default_instruction(), audio, dc, &trace);
                }
                std::ofstream t(std::filesystem::path(trace_dir) / (u.id + ".csv"));
                decoding::write_trace_csv(t, trace);
            }
        }
    }
    harness::write_hypotheses(c.out, hyps);
}

void deliberate(const Common& c, const SplitArgs& a, const std::string& first_pass) {
    const auto cfg = load(c);
    const auto dir = get(cfg, "data.dir", a.data);
    const auto split = toytask::parse_split(a.split.empty() ? cfg.get<std::string>("data.split", "test_other") : a.split);
    const auto utts = load_split(cfg, dir, split);
    const auto model_path = a.model.empty() ? get(cfg, "models.denoiser", "") : a.model;
    const auto params = nn::load_checkpoint<float>(model_path);
    require(params.config.attention == nn::AttentionMode::bidirectional, ErrorKind::configuration,
            "deliberation needs a bidirectional denoiser checkpoint");
    const auto fp = harness::read_hypotheses(get(cfg, "deliberation.first_pass", first_pass));
    decoding::ModelPredictor predictor(params);
    const auto hyps =
        harness::deliberate_split(predictor, utts, params.config.audio_window, fp, harness::deliberation_config_from(cfg));
    harness::write_hypotheses(c.out, hyps);
}

void eval(const Common& c, const SplitArgs& a, const std::string& hyps_path) {
    const auto cfg = load(c);
    const auto dir = get(cfg, "data.dir", a.data);
    const auto split = toytask::parse_split(a.split.empty() ? cfg.get<std::string>("data.split", "test_other") : a.split);
    const auto utts = load_split(cfg, dir, split);
    const auto hyps = harness::read_hypotheses(get(cfg, "eval.hypotheses", hyps_path));
    const auto ev = harness::evaluate(utts, hyps);
    harness::BenchRecord row{hyps.empty() ? "" : hyps.front().provenance, hyps_path, std::string(toytask::to_string(split)),
                             ev.wer, ev.rtf, ev.mean_calls, true};
    harness::write_bench_header(std::cout);
    harness::write_bench_row(std::cout, row);
    if (!c.out.empty()) {
        std::ofstream out(c.out);
        require(static_cast<bool>(out), ErrorKind::io, "cannot write '" + c.out + "'");
        harness::write_bench_header(out);
        harness::write_bench_row(out, row);
    }
}

void sweep(const Common& c) {
    const auto cfg = load(c);
    auto spec = harness::sweep_spec_from(cfg);
    if (!c.out.empty()) {
        std::filesystem::create_directories(c.out);
        spec.csv_out = std::filesystem::path(c.out) / "sweep.csv";
        spec.plot_out = std::filesystem::path(c.out) / "plot.csv";
    }
    harness::write_bench_header(std::cout);
    harness::run_sweep(spec, &std::cout);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked diffusion ASR toolkit"};
    app.require_subcommand(1);

    Common gen_c, den_c, ar_c, dec_c, del_c, eval_c, sweep_c;
    std::string den_data, ar_data, trace_dir, first_pass, hyps_path;
    SplitArgs dec_a, del_a, eval_a;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus into --out");
    add_common(gen, gen_c);
    auto* den = app.add_subcommand("train-denoiser", "train the masked diffusion denoiser; --out is the checkpoint");
    add_common(den, den_c);
    den->add_option("--data", den_data, "corpus directory (data.dir)");
    auto* ar = app.add_subcommand("train-ar", "train the causal baseline; --out is the checkpoint");
    add_common(ar, ar_c);
    ar->add_option("--data", ar_data, "corpus directory (data.dir)");
    auto* dec = app.add_subcommand("decode", "transcribe a split; --out is a JSONL hypothesis file");
    add_common(dec, dec_c);
    add_split_args(dec, dec_a);
    dec->add_option("--trace", trace_dir, "write one decode trace CSV per utterance into this directory");
    auto* del = app.add_subcommand("deliberate", "refine first-pass hypotheses; --out is a JSONL hypothesis file");
    add_common(del, del_c);
    add_split_args(del, del_a);
    del->add_option("--first-pass", first_pass, "first-pass hypothesis file (deliberation.first_pass)");
    auto* ev = app.add_subcommand("eval", "score a hypothesis file; --out receives the CSV row");
    add_common(ev, eval_c, false);
    add_split_args(ev, eval_a);
    ev->add_option("--hyps", hyps_path, "hypothesis file (eval.hypotheses)");
    auto* sw = app.add_subcommand("sweep", "run the experiment grid; --out is the result directory");
    add_common(sw, sweep_c, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << '\n';
        return 2;
    }

    try {
        if (*gen) {
            const auto cfg = load(gen_c);
            toytask::write_corpus(toytask::gen_corpus(harness::corpus_config_from(cfg)), gen_c.out);
        } else if (*den) {
            train(den_c, den_data, nn::AttentionMode::bidirectional);
        } else if (*ar) {
            train(ar_c, ar_data, nn::AttentionMode::causal);
        } else if (*dec) {
            decode(dec_c, dec_a, trace_dir);
        } else if (*del) {
            deliberate(del_c, del_a, first_pass);
        } else if (*ev) {
            eval(eval_c, eval_a, hyps_path);
        } else if (*sw) {
            sweep(sweep_c);
        }
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "error: " << to_string(e.kind()) << ": " << msg << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
