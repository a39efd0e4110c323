#include "mdasr/nn/model.hpp"

#include "mdasr/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <type_traits>

namespace mdasr::nn {

void ModelConfig::validate() const {
    auto check = [](bool ok, const std::string& what) {
        require(ok, ErrorKind::configuration, "invalid model config: " + what);
    };
    check(vocab_size > vocab::num_reserved, "vocab_size must exceed the reserved ids");
    check(model_dim > 0, "model_dim must be positive");
    check(num_heads > 0, "num_heads must be positive");
    check(model_dim % num_heads == 0, "model_dim must be divisible by num_heads");
    check(num_layers >= 0, "num_layers must be non-negative");
    check(ffn_dim > 0, "ffn_dim must be positive");
    check(max_positions > 0, "max_positions must be positive");
    check(feature_dim >= 0, "feature_dim must be non-negative");
    check(audio_window >= 1, "audio_window must be at least 1");
    check(audio_slots >= 0, "audio_slots must be non-negative");
}

namespace {

// First position-table row of the response segment.
Eigen::Index response_position(const ModelConfig& c, Eigen::Index n_instr, Eigen::Index n_audio) {
    if (c.audio_slots == 0) return n_instr + n_audio;
    require(n_audio <= c.audio_slots, ErrorKind::length,
            std::to_string(n_audio) + " audio rows exceed the " + std::to_string(c.audio_slots) + " audio slots");
    return n_instr + c.audio_slots;
}

template <typename T>
void push_layer(std::vector<std::pair<std::string, T>>& out, const std::string& p, auto& l) {
    out.emplace_back(p + "ln1_gain", &l.ln1_gain);
    out.emplace_back(p + "ln1_bias", &l.ln1_bias);
    out.emplace_back(p + "wq", &l.wq);
    out.emplace_back(p + "bq", &l.bq);
    out.emplace_back(p + "wk", &l.wk);
    out.emplace_back(p + "bk", &l.bk);
    out.emplace_back(p + "wv", &l.wv);
    out.emplace_back(p + "bv", &l.bv);
    out.emplace_back(p + "wo", &l.wo);
    out.emplace_back(p + "bo", &l.bo);
    out.emplace_back(p + "ln2_gain", &l.ln2_gain);
    out.emplace_back(p + "ln2_bias", &l.ln2_bias);
    out.emplace_back(p + "w1", &l.w1);
    out.emplace_back(p + "b1", &l.b1);
    out.emplace_back(p + "w2", &l.w2);
    out.emplace_back(p + "b2", &l.b2);
}

template <typename P, typename Ptr>
std::vector<std::pair<std::string, Ptr>> collect(P& p) {
    std::vector<std::pair<std::string, Ptr>> out;
    out.emplace_back("token_embedding", &p.token_embedding);
    out.emplace_back("position_embedding", &p.position_embedding);
    out.emplace_back("audio_projection", &p.audio_projection);
    out.emplace_back("audio_bias", &p.audio_bias);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        push_layer<Ptr>(out, "layers." + std::to_string(i) + ".", p.layers[i]);
    }
    out.emplace_back("final_gain", &p.final_gain);
    out.emplace_back("final_bias", &p.final_bias);
    out.emplace_back("output_projection", &p.output_projection);
    out.emplace_back("output_bias", &p.output_bias);
    return out;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> Params<T>::tensors() {
    return collect<Params<T>, Matrix<T>*>(*this);
}

template <typename T>
std::vector<std::pair<std::string, const Matrix<T>*>> Params<T>::tensors() const {
    return collect<const Params<T>, const Matrix<T>*>(*this);
}

template <typename T>
std::size_t Params<T>::num_parameters() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
    return n;
}

template <typename T>
Params<T> Params<T>::zeros(const ModelConfig& c) {
    c.validate();
    const int d = c.model_dim;
    auto z = [](int r, int k) { return Matrix<T>::Zero(r, k).eval(); };
    Params<T> p;
    p.config = c;
    p.token_embedding = z(c.vocab_size, d);
    p.position_embedding = z(c.max_positions, d);
    p.audio_projection = z(c.feature_dim, d);
    p.audio_bias = z(1, d);
    p.layers.resize(static_cast<std::size_t>(c.num_layers));
    for (auto& l : p.layers) {
        l.ln1_gain = z(1, d);
        l.ln1_bias = z(1, d);
        l.wq = z(d, d);
        l.bq = z(1, d);
        l.wk = z(d, d);
        l.bk = z(1, d);
        l.wv = z(d, d);
        l.bv = z(1, d);
        l.wo = z(d, d);
        l.bo = z(1, d);
        l.ln2_gain = z(1, d);
        l.ln2_bias = z(1, d);
        l.w1 = z(d, c.ffn_dim);
        l.b1 = z(1, c.ffn_dim);
        l.w2 = z(c.ffn_dim, d);
        l.b2 = z(1, d);
    }
    p.final_gain = z(1, d);
    p.final_bias = z(1, d);
    p.output_projection = z(d, c.vocab_size);
    p.output_bias = z(1, c.vocab_size);
    return p;
}

template <typename T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    Params<T> p = Params<T>::zeros(config);
    Rng rng(seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(config.model_dim));
    auto fill = [&](Matrix<T>& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
    };
    auto ones = [](Matrix<T>& m) { m.setOnes(); };
    fill(p.token_embedding);
    fill(p.position_embedding);
    fill(p.audio_projection);
    for (auto& l : p.layers) {
        ones(l.ln1_gain);
        ones(l.ln2_gain);
        fill(l.wq);
        fill(l.wk);
        fill(l.wv);
        fill(l.wo);
        fill(l.w1);
        fill(l.w2);
    }
    ones(p.final_gain);
    fill(p.output_projection);
    return p;
}

namespace {

constexpr double layer_norm_eps = 1e-5;

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>* norm_out,
                     std::vector<T>* rstd_out) {
    const Eigen::Index rows = x.rows();
    const Eigen::Index cols = x.cols();
    Matrix<T> norm(rows, cols);
    std::vector<T> rstd(static_cast<std::size_t>(rows));
    for (Eigen::Index i = 0; i < rows; ++i) {
        const T mean = x.row(i).mean();
        const auto centered = (x.row(i).array() - mean).eval();
        const T var = centered.square().mean();
        const T r = T(1) / std::sqrt(var + static_cast<T>(layer_norm_eps));
        norm.row(i) = centered * r;
        rstd[static_cast<std::size_t>(i)] = r;
    }
    Matrix<T> out = (norm.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (norm_out) *norm_out = std::move(norm);
    if (rstd_out) *rstd_out = std::move(rstd);
    return out;
}

// Returns dx; accumulates into dgain/dbias.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& norm, const std::vector<T>& rstd,
                              const Matrix<T>& gain, Matrix<T>& dgain, Matrix<T>& dbias) {
    dgain.row(0) += (dy.array() * norm.array()).colwise().sum().matrix();
    dbias.row(0) += dy.colwise().sum();
    const Matrix<T> dnorm = dy.array().rowwise() * gain.row(0).array();
    Matrix<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const T mean_d = dnorm.row(i).mean();
        const T mean_dn = (dnorm.row(i).array() * norm.row(i).array()).mean();
        dx.row(i) = rstd[static_cast<std::size_t>(i)] *
                    (dnorm.row(i).array() - mean_d - norm.row(i).array() * mean_dn);
    }
    return dx;
}

template <typename T>
constexpr T gelu_c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
T gelu(T x) {
    const T inner = gelu_c<T> * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad(T x) {
    const T inner = gelu_c<T> * (x + T(0.044715) * x * x * x);
    const T th = std::tanh(inner);
    const T dinner = gelu_c<T> * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * dinner;
}

template <typename T>
void add_row_bias(Matrix<T>& m, const Matrix<T>& bias) {
    m.rowwise() += bias.row(0);
}

template <typename T>
void row_softmax(Matrix<T>& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
    }
}

}  // namespace

template <typename T>
Matrix<T> forward(const Params<T>& params, const PromptLayout& layout, Tape<T>* tape) {
    const ModelConfig& c = params.config;
    const auto total = static_cast<Eigen::Index>(layout.length());
    const auto n_instr = static_cast<Eigen::Index>(layout.instruction.size());
    const auto n_audio = static_cast<Eigen::Index>(layout.audio_rows());
    const auto n_resp = static_cast<Eigen::Index>(layout.response.size());
    const auto resp_off = n_instr + n_audio;
    const int d = c.model_dim;

    const auto resp_pos = response_position(c, n_instr, n_audio);
    require(resp_pos + n_resp <= c.max_positions, ErrorKind::length,
            "layout needs " + std::to_string(resp_pos + n_resp) + " positions, max_positions is " +
                std::to_string(c.max_positions));
    if (n_audio > 0) {
        require(c.feature_dim > 0 && layout.audio->cols() == c.feature_dim, ErrorKind::contract,
                "audio features have width " + std::to_string(layout.audio->cols()) + ", model expects " +
                    std::to_string(c.feature_dim));
    }
    auto token_row = [&](Token t) {
        require(t >= 0 && t < c.vocab_size, ErrorKind::contract, "token id " + std::to_string(t) + " out of range");
        return params.token_embedding.row(t);
    };

    Matrix<T> x(total, d);
    for (Eigen::Index i = 0; i < n_instr; ++i) x.row(i) = token_row(layout.instruction[static_cast<std::size_t>(i)]);
    Matrix<T> audio;
    if (n_audio > 0) {
        audio = layout.audio->template cast<T>();
        x.middleRows(n_instr, n_audio).noalias() = audio * params.audio_projection;
        x.middleRows(n_instr, n_audio).rowwise() += params.audio_bias.row(0);
    }
    for (Eigen::Index i = 0; i < n_resp; ++i) x.row(resp_off + i) = token_row(layout.response[static_cast<std::size_t>(i)]);
    x.topRows(resp_off) += params.position_embedding.topRows(resp_off);
    x.bottomRows(n_resp) += params.position_embedding.middleRows(resp_pos, n_resp);

    if (tape) {
        tape->params = &params;
        tape->instruction = layout.instruction;
        tape->response = layout.response;
        tape->audio = std::move(audio);
        tape->layers.assign(params.layers.size(), {});
    }

    const int heads = c.num_heads;
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const bool causal = c.attention == AttentionMode::causal;

    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& l = params.layers[li];
        typename Tape<T>::Layer* rec = tape ? &tape->layers[li] : nullptr;

        Matrix<T> ln1_norm;
        std::vector<T> ln1_rstd;
        Matrix<T> h = layer_norm(x, l.ln1_gain, l.ln1_bias, &ln1_norm, &ln1_rstd);
        Matrix<T> q = h * l.wq;
        add_row_bias(q, l.bq);
        Matrix<T> k = h * l.wk;
        add_row_bias(k, l.bk);
        Matrix<T> v = h * l.wv;
        add_row_bias(v, l.bv);

        Matrix<T> context(total, d);
        std::vector<Matrix<T>> probs;
        if (rec) probs.reserve(static_cast<std::size_t>(heads));
        for (int hd = 0; hd < heads; ++hd) {
            Matrix<T> s = (q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose()) * scale;
            if (causal) {
                for (Eigen::Index i = 0; i < total; ++i) {
                    for (Eigen::Index j = i + 1; j < total; ++j) s(i, j) = -std::numeric_limits<T>::infinity();
                }
            }
            row_softmax(s);
            context.middleCols(hd * dh, dh).noalias() = s * v.middleCols(hd * dh, dh);
            if (rec) probs.push_back(std::move(s));
        }
        Matrix<T> attn = context * l.wo;
        add_row_bias(attn, l.bo);
        Matrix<T> mid = x + attn;

        Matrix<T> ln2_norm;
        std::vector<T> ln2_rstd;
        Matrix<T> h2 = layer_norm(mid, l.ln2_gain, l.ln2_bias, &ln2_norm, &ln2_rstd);
        Matrix<T> pre = h2 * l.w1;
        add_row_bias(pre, l.b1);
        Matrix<T> act = pre.unaryExpr([](T z) { return gelu(z); });
        Matrix<T> ffn = act * l.w2;
        add_row_bias(ffn, l.b2);
        Matrix<T> out = mid + ffn;

        if (rec) {
            rec->input = std::move(x);
            rec->ln1_norm = std::move(ln1_norm);
            rec->ln1_out = std::move(h);
            rec->ln1_rstd = std::move(ln1_rstd);
            rec->q = std::move(q);
            rec->k = std::move(k);
            rec->v = std::move(v);
            rec->probs = std::move(probs);
            rec->context = std::move(context);
            rec->mid = std::move(mid);
            rec->ln2_norm = std::move(ln2_norm);
            rec->ln2_out = std::move(h2);
            rec->ln2_rstd = std::move(ln2_rstd);
            rec->ffn_pre = std::move(pre);
            rec->ffn_act = std::move(act);
        }
        x = std::move(out);
    }

    const Matrix<T> resp_rows = x.middleRows(resp_off, n_resp);
    Matrix<T> final_norm;
    std::vector<T> final_rstd;
    Matrix<T> z = layer_norm(resp_rows, params.final_gain, params.final_bias, &final_norm, &final_rstd);
    Matrix<T> logits = z * params.output_projection;
    add_row_bias(logits, params.output_bias);
    if (tape) {
        tape->final_norm = std::move(final_norm);
        tape->final_rstd = std::move(final_rstd);
        tape->final_out = std::move(z);
    }
    return logits;
}

template <typename T>
void backprop_into(const Tape<T>& tape, const Matrix<T>& dlogits, Grads<T>& g) {
    require(tape.params != nullptr, ErrorKind::contract, "backprop on an empty tape");
    const Params<T>& p = *tape.params;
    const ModelConfig& c = p.config;
    const auto n_resp = static_cast<Eigen::Index>(tape.response.size());
    require(dlogits.rows() == n_resp && dlogits.cols() == c.vocab_size, ErrorKind::contract,
            "dlogits shape " + std::to_string(dlogits.rows()) + "x" + std::to_string(dlogits.cols()) +
                " does not match tape (" + std::to_string(n_resp) + "x" + std::to_string(c.vocab_size) + ")");
    require(g.config == c, ErrorKind::contract, "gradient container built for a different config");

    const auto n_instr = static_cast<Eigen::Index>(tape.instruction.size());
    const auto n_audio = tape.audio.rows();
    const auto resp_off = n_instr + n_audio;
    const auto total = resp_off + n_resp;
    const int d = c.model_dim;
    const int heads = c.num_heads;
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    g.output_projection.noalias() += tape.final_out.transpose() * dlogits;
    g.output_bias.row(0) += dlogits.colwise().sum();
    const Matrix<T> dz = dlogits * p.output_projection.transpose();
    const Matrix<T> dresp = layer_norm_backward(dz, tape.final_norm, tape.final_rstd, p.final_gain, g.final_gain, g.final_bias);

    Matrix<T> dx = Matrix<T>::Zero(total, d);
    dx.middleRows(resp_off, n_resp) = dresp;

    for (std::size_t li = p.layers.size(); li-- > 0;) {
        const auto& l = p.layers[li];
        auto& gl = g.layers[li];
        const auto& rec = tape.layers[li];

        // out = mid + ffn(ln2(mid))
        const Matrix<T>& dout = dx;
        gl.w2.noalias() += rec.ffn_act.transpose() * dout;
        gl.b2.row(0) += dout.colwise().sum();
        Matrix<T> dact = dout * l.w2.transpose();
        Matrix<T> dpre = dact.array() * rec.ffn_pre.unaryExpr([](T z) { return gelu_grad(z); }).array();
        gl.w1.noalias() += rec.ln2_out.transpose() * dpre;
        gl.b1.row(0) += dpre.colwise().sum();
        const Matrix<T> dh2 = dpre * l.w1.transpose();
        Matrix<T> dmid = dout + layer_norm_backward(dh2, rec.ln2_norm, rec.ln2_rstd, l.ln2_gain, gl.ln2_gain, gl.ln2_bias);

        // mid = x + attn(ln1(x))
        gl.wo.noalias() += rec.context.transpose() * dmid;
        gl.bo.row(0) += dmid.colwise().sum();
        const Matrix<T> dcontext = dmid * l.wo.transpose();
        Matrix<T> dq(total, d), dk(total, d), dv(total, d);
        for (int hd = 0; hd < heads; ++hd) {
            const Matrix<T>& a = rec.probs[static_cast<std::size_t>(hd)];
            const auto dctx_h = dcontext.middleCols(hd * dh, dh);
            dv.middleCols(hd * dh, dh).noalias() = a.transpose() * dctx_h;
            const Matrix<T> da = dctx_h * rec.v.middleCols(hd * dh, dh).transpose();
            const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (da.array() * a.array()).rowwise().sum();
            Matrix<T> ds = a.array() * (da.array().colwise() - row_dot.array());
            ds *= scale;
            dq.middleCols(hd * dh, dh).noalias() = ds * rec.k.middleCols(hd * dh, dh);
            dk.middleCols(hd * dh, dh).noalias() = ds.transpose() * rec.q.middleCols(hd * dh, dh);
        }
        gl.wq.noalias() += rec.ln1_out.transpose() * dq;
        gl.bq.row(0) += dq.colwise().sum();
        gl.wk.noalias() += rec.ln1_out.transpose() * dk;
        gl.bk.row(0) += dk.colwise().sum();
        gl.wv.noalias() += rec.ln1_out.transpose() * dv;
        gl.bv.row(0) += dv.colwise().sum();
        Matrix<T> dh1 = dq * l.wq.transpose();
        dh1.noalias() += dk * l.wk.transpose();
        dh1.noalias() += dv * l.wv.transpose();
        dx = dmid + layer_norm_backward(dh1, rec.ln1_norm, rec.ln1_rstd, l.ln1_gain, gl.ln1_gain, gl.ln1_bias);
    }

    const auto resp_pos = response_position(c, n_instr, n_audio);
    g.position_embedding.topRows(resp_off) += dx.topRows(resp_off);
    g.position_embedding.middleRows(resp_pos, n_resp) += dx.bottomRows(n_resp);
    for (Eigen::Index i = 0; i < n_instr; ++i) g.token_embedding.row(tape.instruction[static_cast<std::size_t>(i)]) += dx.row(i);
    if (n_audio > 0) {
        g.audio_projection.noalias() += tape.audio.transpose() * dx.middleRows(n_instr, n_audio);
        g.audio_bias.row(0) += dx.middleRows(n_instr, n_audio).colwise().sum();
    }
    for (Eigen::Index i = 0; i < n_resp; ++i) g.token_embedding.row(tape.response[static_cast<std::size_t>(i)]) += dx.row(resp_off + i);
}

template <typename T>
Grads<T> backprop(const Tape<T>& tape, const Matrix<T>& dlogits) {
    require(tape.params != nullptr, ErrorKind::contract, "backprop on an empty tape");
    Grads<T> g = Params<T>::zeros(tape.params->config);
    backprop_into(tape, dlogits, g);
    return g;
}

FeatureMatrix pool_frames(const FeatureMatrix& frames, int window) {
    require(window >= 1, ErrorKind::contract, "pooling window must be at least 1");
    require(frames.rows() > 0, ErrorKind::contract, "cannot pool an empty frame sequence");
    const Eigen::Index n = (frames.rows() + window - 1) / window;
    FeatureMatrix out(n, frames.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index start = i * window;
        const Eigen::Index len = std::min<Eigen::Index>(window, frames.rows() - start);
        out.row(i) = frames.middleRows(start, len).colwise().sum() / static_cast<float>(len);
    }
    return out;
}

template <typename T>
Matrix<T> frontend_pool(const FeatureMatrix& frames, int window, const Matrix<T>& projection, const Matrix<T>& bias) {
    const FeatureMatrix pooled = pool_frames(frames, window);
    require(projection.rows() == pooled.cols(), ErrorKind::contract, "projection input width does not match features");
    Matrix<T> out = pooled.template cast<T>() * projection;
    out.rowwise() += bias.row(0);
    return out;
}

template <typename T, typename U>
Params<U> cast_params(const Params<T>& params) {
    Params<U> out = Params<U>::zeros(params.config);
    out.config.precision = std::is_same_v<U, double> ? Precision::double_precision : Precision::single;
    auto src = params.tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
}

#define MDASR_INSTANTIATE(T)                                                                              \
    template struct Params<T>;                                                                            \
    template Params<T> init_params<T>(const ModelConfig&, std::uint64_t);                                 \
    template Matrix<T> forward<T>(const Params<T>&, const PromptLayout&, Tape<T>*);                       \
    template Grads<T> backprop<T>(const Tape<T>&, const Matrix<T>&);                                      \
    template void backprop_into<T>(const Tape<T>&, const Matrix<T>&, Grads<T>&);                          \
    template Matrix<T> frontend_pool<T>(const FeatureMatrix&, int, const Matrix<T>&, const Matrix<T>&);

MDASR_INSTANTIATE(float)
MDASR_INSTANTIATE(double)
#undef MDASR_INSTANTIATE

template Params<double> cast_params<float, double>(const Params<float>&);
template Params<float> cast_params<double, float>(const Params<double>&);
template Params<float> cast_params<float, float>(const Params<float>&);
template Params<double> cast_params<double, double>(const Params<double>&);

}  // namespace mdasr::nn
