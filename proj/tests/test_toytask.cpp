#include "doctest.h"

#include "mdasr/toytask.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mdasr;
using namespace mdasr::toytask;

namespace {

CorpusConfig small_corpus() {
    CorpusConfig c;
    c.train_size = 30;
    c.dev_size = 5;
    c.test_clean_size = 200;
    c.test_other_size = 200;
    return c;
}

// Brute-force classifier: each token's frames are averaged and matched to the
// closest prototype by Euclidean distance.
double nearest_prototype_error(const std::vector<Utterance>& utts, const Source& source, int fpt) {
    std::size_t errors = 0, total = 0;
    for (const auto& u : utts) {
        for (std::size_t i = 0; i < u.reference.size(); ++i) {
            Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(u.frames.cols());
            for (int f = 0; f < fpt; ++f) mean += u.frames.row(static_cast<Eigen::Index>(i) * fpt + f).cast<double>();
            mean /= fpt;
            int best = 0;
            double best_d = 1e300;
            for (Eigen::Index p = 0; p < source.prototypes.rows(); ++p) {
                const double d = (source.prototypes.row(p).cast<double>() - mean).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(p);
                }
            }
            errors += (best + vocab::num_reserved != u.reference[i]);
            ++total;
        }
    }
    return static_cast<double>(errors) / static_cast<double>(total);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "mdasr_tests" / name;
    std::filesystem::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("utterances respect the corpus shape") {
    const auto cfg = small_corpus();
    const auto corpus = gen_corpus(cfg);
    CHECK(corpus.splits.at(Split::test_other).size() == 200);
    for (const auto& u : corpus.splits.at(Split::train)) {
        CHECK(u.reference.size() >= 3);
        CHECK(u.reference.size() <= 24);
        CHECK(u.frames.rows() == static_cast<Eigen::Index>(4 * u.reference.size()));
        CHECK(u.frames.cols() == 16);
        CHECK(u.frames.allFinite());
        CHECK(u.duration_s == doctest::Approx(0.025 * static_cast<double>(u.frames.rows())));
        for (Token t : u.reference) CHECK(vocab::is_content(t));
    }
}

TEST_CASE("prototypes are unit norm and the bigram rows are distributions") {
    const auto source = make_source(small_corpus());
    for (Eigen::Index i = 0; i < source.prototypes.rows(); ++i) {
        CHECK(source.prototypes.row(i).norm() == doctest::Approx(1.0).epsilon(1e-6));
    }
    for (Eigen::Index r = 0; r < source.transitions.rows(); ++r) {
        CHECK(source.transitions.row(r).sum() == doctest::Approx(1.0));
        CHECK((source.transitions.row(r).array() > 0).count() == small_corpus().branching);
    }
}

TEST_CASE("generation is deterministic and order independent") {
    const auto cfg = small_corpus();
    const auto a = gen_corpus(cfg);
    const auto b = gen_corpus(cfg);
    CHECK(a.splits.at(Split::dev)[3].frames == b.splits.at(Split::dev)[3].frames);
    const auto single = gen_utterance(cfg, a.source, Split::test_other, 17);
    CHECK(single.reference == a.splits.at(Split::test_other)[17].reference);
    CHECK(single.frames == a.splits.at(Split::test_other)[17].frames);
    auto other = cfg;
    other.seed = 2;
    CHECK(gen_corpus(other).splits.at(Split::train)[0].frames != a.splits.at(Split::train)[0].frames);
}

TEST_CASE("written corpora are byte identical and read back exactly") {
    const auto cfg = small_corpus();
    const auto da = temp_dir("corpus_a");
    const auto db = temp_dir("corpus_b");
    write_corpus(gen_corpus(cfg), da);
    write_corpus(gen_corpus(cfg), db);
    for (const char* name : {"corpus.json", "manifest_train.jsonl", "manifest_test_other.jsonl",
                             "features/test_clean/test_clean-000007.feat"}) {
        CHECK(slurp(da / name) == slurp(db / name));
    }
    const auto back = read_split(da, Split::test_clean);
    const auto orig = gen_corpus(cfg).splits.at(Split::test_clean);
    REQUIRE(back.size() == orig.size());
    CHECK(back[5].id == orig[5].id);
    CHECK(back[5].reference == orig[5].reference);
    CHECK(back[5].frames == orig[5].frames);
    CHECK(back[5].duration_s == orig[5].duration_s);
}

TEST_CASE("a missing manifest is reported as missing input") {
    try {
        read_split(temp_dir("nothing_here"), Split::dev);
        FAIL("expected missing-input");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::missing_input);
    }
}

TEST_CASE("noise-free audio is perfectly classified by the nearest prototype") {
    auto cfg = small_corpus();
    cfg.noise_sigma_clean = 0.0;
    const auto corpus = gen_corpus(cfg);
    CHECK(nearest_prototype_error(corpus.splits.at(Split::test_clean), corpus.source, 4) == 0.0);
    CHECK(corpus.splits.at(Split::test_clean)[0].frames.row(0) ==
          corpus.source.prototypes.row(corpus.splits.at(Split::test_clean)[0].reference[0] - vocab::num_reserved));
}

TEST_CASE("very noisy audio drives the nearest prototype towards chance") {
    auto cfg = small_corpus();
    cfg.noise_sigma_other = 20.0;
    const auto corpus = gen_corpus(cfg);
    const double err = nearest_prototype_error(corpus.splits.at(Split::test_other), corpus.source, 4);
    MESSAGE("nearest-prototype error at sigma 20: ", err);
    CHECK(err > 0.85);
}

TEST_CASE("the other split is acoustically harder than the clean split") {
    const auto corpus = gen_corpus(small_corpus());
    const double clean = nearest_prototype_error(corpus.splits.at(Split::test_clean), corpus.source, 4);
    const double other = nearest_prototype_error(corpus.splits.at(Split::test_other), corpus.source, 4);
    MESSAGE("nearest-prototype error clean ", clean, " other ", other);
    CHECK(other > clean);
}

TEST_CASE("examples carry reference, EOS and the chosen tail") {
    const auto corpus = gen_corpus(small_corpus());
    const auto& u = corpus.splits.at(Split::train)[0];
    const auto ex = make_example(u, 4, 32, true);
    CHECK(ex.response.size() == 32);
    CHECK(ex.response[u.reference.size()] == vocab::eos);
    CHECK(ex.response.back() == vocab::eos);
    CHECK(ex.audio->rows() == static_cast<Eigen::Index>(u.reference.size()));
    const auto padded = make_example(u, 4, 32, false, diffusion::TailFill::pad);
    CHECK_FALSE(padded.audio.has_value());
    CHECK(padded.response.back() == vocab::pad);
    CHECK_THROWS_AS(make_example(u, 4, u.reference.size(), true), Error);
}

TEST_CASE("teacher pairs shift the target by one") {
    const auto [input, target] = ar_teacher_pair({5, 6, 7, vocab::eos, vocab::eos});
    CHECK(input == TokenSeq{vocab::bos, 5, 6, 7});
    CHECK(target == TokenSeq{5, 6, 7, vocab::eos});
}

TEST_CASE("the model config fits every layout of the corpus") {
    const auto cfg = small_corpus();
    const auto m = default_model_config(cfg, nn::AttentionMode::causal);
    CHECK(m.vocab_size == 36);
    CHECK(m.audio_slots == 24);
    CHECK(m.max_positions >= 1 + 24 + 32);
}

TEST_CASE("feature files reject truncation") {
    const auto dir = temp_dir("features");
    std::filesystem::create_directories(dir);
    FeatureMatrix f = FeatureMatrix::Constant(3, 2, 0.5f);
    write_features(dir / "x.feat", "x", f);
    std::string id;
    CHECK(read_features(dir / "x.feat", &id) == f);
    CHECK(id == "x");
    const std::string bytes = slurp(dir / "x.feat");
    std::ofstream(dir / "y.feat", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    try {
        read_features(dir / "y.feat");
        FAIL("expected corruption");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::corruption);
    }
}

TEST_CASE("the causal baseline memorizes a single utterance") {
    auto cfg = small_corpus();
    cfg.train_size = 1;
    const auto corpus = gen_corpus(cfg);
    const auto& u = corpus.splits.at(Split::train)[0];
    auto mc = default_model_config(cfg, nn::AttentionMode::causal);
    mc.model_dim = 32;
    mc.ffn_dim = 64;
    diffusion::TrainConfig tc;
    tc.batch_size = 1;
    tc.schedule = {1e-3, 3e-3, 1e-3, 10, 150};
    const std::vector<diffusion::TrainExample> examples{make_example(u, 4, 32, true)};
    ArTrainer trainer(nn::init_params<float>(mc, 1), tc);
    trainer.fit(examples);
    const auto audio = nn::pool_frames(u.frames, 4);
    const auto h = ar_greedy_transcribe(trainer.params(), default_instruction(), audio, 32);
    CHECK(h.tokens == u.reference);
    CHECK_FALSE(h.truncated);
    CHECK(h.denoiser_calls == u.reference.size() + 1);
    CHECK(h.confidences.size() == h.tokens.size());

    const auto again = ar_greedy_transcribe(trainer.params(), default_instruction(), audio, 32);
    CHECK(again.tokens == h.tokens);
    CHECK(again.confidences == h.confidences);

    const auto one = ar_greedy_transcribe(trainer.params(), default_instruction(), audio, 1);
    CHECK(one.tokens.size() == 1);
    CHECK(one.truncated);
}
