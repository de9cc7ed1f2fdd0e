#pragma once

// Central finite-difference oracle for gradient checks. Kept independent of
// the reverse-mode path it verifies: it only re-evaluates the forward function
// at perturbed inputs.

#include <cmath>
#include <functional>
#include <vector>

#include "meshtex/tensor.hpp"

namespace gradcheck {

using meshtex::ad::Tensor;

struct Result {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::int64_t checked = 0;
};

// forward() must rebuild the graph from scratch and return the scalar loss
// value. analytic must hold the reverse-mode gradient of `param` computed
// before the call. h is the central-difference half-step. Differences below
// `atol` sit under the central-difference roundoff floor (~|f| eps / h) and
// carry no relative-error information.
inline Result compare_fd(Tensor<double> param,
                         const std::function<double()>& forward,
                         std::span<const double> analytic, double h = 1e-6,
                         double atol = 1e-9) {
    Result r;
    auto vals = param.value();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double keep = vals[i];
        vals[i] = keep + h;
        const double fp = forward();
        vals[i] = keep - h;
        const double fm = forward();
        vals[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic[i];
        const double abs_err = std::abs(fd - an);
        r.max_abs_err = std::max(r.max_abs_err, abs_err);
        if (abs_err > atol) {
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            r.max_rel_err = std::max(r.max_rel_err, abs_err / denom);
        }
        ++r.checked;
    }
    return r;
}

// Convenience wrapper: builds the graph via `loss_fn`, runs backward, then
// finite-differences every requested parameter.
inline double check_gradients(const std::vector<Tensor<double>>& params,
                              const std::function<Tensor<double>()>& loss_fn,
                              double h = 1e-6, double atol = 1e-9) {
    namespace ad = meshtex::ad;
    ad::Tape<double> tape;
    std::vector<std::vector<double>> analytic;
    {
        ad::Tape<double>::Scope scope(tape);
        for (auto p : params) p.zero_grad();
        auto loss = loss_fn();
        tape.backward(loss);
        for (auto p : params) {
            auto g = p.grad();
            analytic.emplace_back(g.begin(), g.end());
        }
    }
    auto forward_value = [&]() {
        ad::Tape<double> local;  // inactive: pure forward evaluation
        return loss_fn().item();
    };
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto r = compare_fd(params[pi], forward_value, analytic[pi], h, atol);
        worst = std::max(worst, r.max_rel_err);
    }
    return worst;
}

}  // namespace gradcheck
