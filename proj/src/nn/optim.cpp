#include "mdasr/nn/optim.hpp"

#include <cmath>
#include <numbers>

namespace mdasr::nn {

template <typename T>
void adamw_update(Params<T>& params, const Grads<T>& grads, AdamWState<T>& state, const AdamWHyper& hyper,
                  double lr, std::int64_t step) {
    require(step >= 1, ErrorKind::contract, "adamw step must be >= 1");
    auto p = params.tensors();
    const auto g = grads.tensors();
    auto m = state.m.tensors();
    auto v = state.v.tensors();
    require(p.size() == g.size() && p.size() == m.size(), ErrorKind::contract, "optimizer tensor count mismatch");
    for (const auto& [name, t] : g) {
        require(t->allFinite(), ErrorKind::training, "non-finite gradient in tensor '" + name + "'");
    }

    const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
    const T b1 = static_cast<T>(hyper.beta1);
    const T b2 = static_cast<T>(hyper.beta2);
    const T decay = static_cast<T>(1.0 - lr * hyper.weight_decay);
    for (std::size_t i = 0; i < p.size(); ++i) {
        Matrix<T>& w = *p[i].second;
        const Matrix<T>& grad = *g[i].second;
        Matrix<T>& mom = *m[i].second;
        Matrix<T>& var = *v[i].second;
        mom = b1 * mom + (T(1) - b1) * grad;
        var = b2 * var + (T(1) - b2) * grad.cwiseProduct(grad);
        if (hyper.weight_decay != 0.0) w *= decay;
        for (Eigen::Index j = 0; j < w.size(); ++j) {
            const double mhat = static_cast<double>(mom.data()[j]) / c1;
            const double vhat = static_cast<double>(var.data()[j]) / c2;
            w.data()[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + hyper.eps));
        }
    }
}

template void adamw_update<float>(Params<float>&, const Grads<float>&, AdamWState<float>&, const AdamWHyper&, double,
                                  std::int64_t);
template void adamw_update<double>(Params<double>&, const Grads<double>&, AdamWState<double>&, const AdamWHyper&,
                                   double, std::int64_t);

void LrSchedule::validate() const {
    require(lr_start <= lr_peak, ErrorKind::configuration, "lr_start must not exceed lr_peak");
    require(lr_min <= lr_peak, ErrorKind::configuration, "lr_min must not exceed lr_peak");
    require(warmup_steps >= 0 && warmup_steps <= total_steps, ErrorKind::configuration,
            "warmup_steps must lie in [0, total_steps]");
}

double lr_at(const LrSchedule& s, std::int64_t step) {
    if (step <= 0) return s.warmup_steps == 0 ? s.lr_peak : s.lr_start;
    if (step >= s.total_steps) return s.lr_min;
    if (step < s.warmup_steps) {
        return s.lr_start + (s.lr_peak - s.lr_start) * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    }
    if (step == s.warmup_steps) return s.lr_peak;
    const double progress =
        static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
    return s.lr_min + (s.lr_peak - s.lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mdasr::nn
