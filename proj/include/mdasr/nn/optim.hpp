#pragma once

#include "mdasr/nn/model.hpp"

#include <cstdint>

namespace mdasr::nn {

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// First and second moments, shaped like the params they track.
template <typename T>
struct AdamWState {
    Params<T> m;
    Params<T> v;

    static AdamWState zeros(const ModelConfig& config) { return {Params<T>::zeros(config), Params<T>::zeros(config)}; }
};

// Decoupled weight decay: p <- p * (1 - lr * wd) - lr * mhat / (sqrt(vhat) + eps).
// `step` is 1-based and drives bias correction. Non-finite gradients throw
// ErrorKind::training naming the offending tensor; params are left untouched.
template <typename T>
void adamw_update(Params<T>& params, const Grads<T>& grads, AdamWState<T>& state, const AdamWHyper& hyper,
                  double lr, std::int64_t step);

// Linear warmup from lr_start to lr_peak, then cosine decay to lr_min at
// total_steps. Steps past total_steps clamp to lr_min.
struct LrSchedule {
    double lr_start = 1e-6;
    double lr_peak = 3e-5;
    double lr_min = 1e-5;
    std::int64_t warmup_steps = 3000;
    std::int64_t total_steps = 30000;

    void validate() const;
};

double lr_at(const LrSchedule& schedule, std::int64_t step);

}  // namespace mdasr::nn
