#pragma once

#include "mdasr/common.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mdasr::nn {

enum class AttentionMode : std::uint8_t { bidirectional = 0, causal = 1 };
enum class Precision : std::uint8_t { single = 0, double_precision = 1 };

struct ModelConfig {
    int vocab_size = 36;
    int model_dim = 48;
    int num_layers = 2;
    int num_heads = 4;
    int ffn_dim = 192;
    int max_positions = 64;
    AttentionMode attention = AttentionMode::bidirectional;
    Precision precision = Precision::single;
    // Acoustic frontend: width of the pooled frame features entering the
    // projection (0 disables the audio segment entirely) and pooling window.
    int feature_dim = 16;
    int audio_window = 4;
    // Position rows reserved for the audio segment. When positive, response
    // positions start at instruction + audio_slots whatever the audio length,
    // so response token i and audio row i sit a fixed distance apart. 0 packs
    // the segments contiguously.
    int audio_slots = 0;

    // Throws ErrorKind::configuration.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Ordered context fed to a network: instruction tokens, optional pooled
// acoustic features (rows x feature_dim, projected inside the model), then the
// response block. Logits are produced only for response positions.
// Position indices follow ModelConfig::audio_slots.
struct PromptLayout {
    TokenSeq instruction;
    std::optional<FeatureMatrix> audio;
    TokenSeq response;

    std::size_t audio_rows() const { return audio ? static_cast<std::size_t>(audio->rows()) : 0; }
    std::size_t response_offset() const { return instruction.size() + audio_rows(); }
    std::size_t length() const { return response_offset() + response.size(); }
};

template <typename T>
struct LayerParams {
    Matrix<T> ln1_gain, ln1_bias;
    Matrix<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix<T> ln2_gain, ln2_bias;
    Matrix<T> w1, b1, w2, b2;
};

// Weights of either network. Biases and gains are stored as 1 x n rows.
// The same layout doubles as the gradient container (see Grads).
template <typename T>
struct Params {
    ModelConfig config;
    Matrix<T> token_embedding;     // vocab x dim
    Matrix<T> position_embedding;  // max_positions x dim
    Matrix<T> audio_projection;    // feature_dim x dim
    Matrix<T> audio_bias;          // 1 x dim
    std::vector<LayerParams<T>> layers;
    Matrix<T> final_gain, final_bias;
    Matrix<T> output_projection;   // dim x vocab
    Matrix<T> output_bias;         // 1 x vocab

    // Every tensor with a stable dotted name, in a fixed order.
    std::vector<std::pair<std::string, Matrix<T>*>> tensors();
    std::vector<std::pair<std::string, const Matrix<T>*>> tensors() const;

    std::size_t num_parameters() const;

    static Params zeros(const ModelConfig& config);
};

template <typename T>
using Grads = Params<T>;

using DenoiserParams = Params<float>;
using ARParams = Params<float>;

// Scaled normal (std = 1/sqrt(model_dim)) for matrices, zero biases, unit
// layer-norm gains. Deterministic for a given seed.
template <typename T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed);

// Activations of one forward pass. Holds a pointer to the params it was
// recorded with; those must outlive the tape.
template <typename T>
struct Tape {
    struct Layer {
        Matrix<T> input;
        Matrix<T> ln1_norm, ln1_out;
        std::vector<T> ln1_rstd;
        Matrix<T> q, k, v;
        std::vector<Matrix<T>> probs;  // one S x S matrix per head
        Matrix<T> context;
        Matrix<T> mid;
        Matrix<T> ln2_norm, ln2_out;
        std::vector<T> ln2_rstd;
        Matrix<T> ffn_pre, ffn_act;
    };

    const Params<T>* params = nullptr;
    TokenSeq instruction;
    TokenSeq response;
    Matrix<T> audio;  // pooled features cast to T; 0 rows when absent
    std::vector<Layer> layers;
    Matrix<T> final_norm;  // response rows only
    std::vector<T> final_rstd;
    Matrix<T> final_out;
};

// Logits over response positions (response_len x vocab_size). When `tape`
// is given it receives everything backprop needs.
template <typename T>
Matrix<T> forward(const Params<T>& params, const PromptLayout& layout, Tape<T>* tape = nullptr);

// Exact reverse-mode gradients of <dlogits, logits> w.r.t. all parameters.
template <typename T>
Grads<T> backprop(const Tape<T>& tape, const Matrix<T>& dlogits);

// Same as backprop but adds into `grads`.
template <typename T>
void backprop_into(const Tape<T>& tape, const Matrix<T>& dlogits, Grads<T>& grads);

// Mean pooling over fixed windows: ceil(rows / window) output rows.
FeatureMatrix pool_frames(const FeatureMatrix& frames, int window);

// Pooling followed by the affine projection into model space.
template <typename T>
Matrix<T> frontend_pool(const FeatureMatrix& frames, int window, const Matrix<T>& projection,
                        const Matrix<T>& bias);

template <typename T, typename U>
Params<U> cast_params(const Params<T>& params);

}  // namespace mdasr::nn
