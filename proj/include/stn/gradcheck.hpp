#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stn/ops.hpp"
#include "stn/tape.hpp"

namespace stn {

// A scalar function of named tensors, built fresh on the given tape each call.
using GradCheckFn =
    std::function<Var(Tape<double>&, const std::vector<Var>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_coord;  // "tensor_index[flat_offset]"
};

// Central finite differences vs the tape gradient, 64-bit only. Relative
// error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckResult grad_check_full(const GradCheckFn& fn,
                                       std::vector<Tensor<double>> point, double step) {
    auto eval = [&](const std::vector<Tensor<double>>& p) {
        Tape<double> tape;
        std::vector<Var> leaves;
        leaves.reserve(p.size());
        for (const auto& t : p) leaves.push_back(tape.leaf(t, false));
        Var out = fn(tape, leaves);
        if (tape.val(out).size() != 1)
            throw ContractError("grad_check: function must return a scalar");
        return tape.val(out)[0];
    };

    // Analytic gradients in one reverse sweep.
    Tape<double> tape;
    std::vector<Var> leaves;
    leaves.reserve(point.size());
    for (const auto& t : point) leaves.push_back(tape.leaf(t, true));
    Var out = fn(tape, leaves);
    if (tape.val(out).size() != 1)
        throw ContractError("grad_check: function must return a scalar");
    tape.backward(out);
    std::vector<Tensor<double>> analytic;
    analytic.reserve(leaves.size());
    for (Var v : leaves) analytic.push_back(tape.grad(v));

    GradCheckResult res;
    for (size_t ti = 0; ti < point.size(); ++ti) {
        for (size_t i = 0; i < point[ti].size(); ++i) {
            const double keep = point[ti][i];
            point[ti][i] = keep + step;
            const double fp = eval(point);
            point[ti][i] = keep - step;
            const double fm = eval(point);
            point[ti][i] = keep;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[ti][i];
            const std::string coord =
                "tensor" + std::to_string(ti) + "[" + std::to_string(i) + "]";
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw InputError("grad_check: NaN at " + coord);
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_coord = coord;
            }
        }
    }
    return res;
}

inline double grad_check(const GradCheckFn& fn, std::vector<Tensor<double>> point,
                         double step = 1e-5) {
    return grad_check_full(fn, std::move(point), step).max_rel_error;
}

}  // namespace stn
