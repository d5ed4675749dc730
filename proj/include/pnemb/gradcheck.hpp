#pragma once

// Central finite-difference verification of analytic gradients.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pnemb/tensor.hpp"

namespace pnemb {

struct GradCheckResult {
    std::string name;
    std::size_t checked = 0;
    std::size_t skipped = 0;   // elements whose +-h step changed a discrete choice
    double worst_error = 0.0;  // max |analytic - numeric| / (1 + |numeric|)
    bool passed = true;
};

/// Compares d loss / d p for every element of every tensor in `params`
/// against (L(p + h) - L(p - h)) / 2h. `loss_fn` must rebuild the whole
/// computation on the graph it is handed.
///
/// An element is skipped when either step changes the graph's selection
/// fingerprint: the step crosses a kink or a jump, and the difference
/// quotient no longer measures the derivative. Skips are counted, and a check where every
/// element was skipped fails.
inline GradCheckResult check_gradients(const std::string& name, const std::function<Tensor(Graph&)>& loss_fn,
                                       std::vector<Tensor> params, double h = 1e-5, double tol = 1e-4) {
    for (auto& p : params) p.zero_grad();
    std::uint64_t base;
    {
        Graph g;
        Tensor loss = loss_fn(g);
        base = g.selection_fingerprint();
        g.backward(loss);
    }
    GradCheckResult r{name};
    for (auto& p : params) {
        std::vector<double> analytic(p.numel(), 0.0);
        if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
        auto x = p.mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double saved = x[i];
            x[i] = saved + h;
            double up;
            bool same = true;
            {
                Graph g(false);
                up = loss_fn(g).item();
                same = same && g.selection_fingerprint() == base;
            }
            x[i] = saved - h;
            double down;
            {
                Graph g(false);
                down = loss_fn(g).item();
                same = same && g.selection_fingerprint() == base;
            }
            x[i] = saved;
            if (!same) {
                ++r.skipped;
                continue;
            }
            const double numeric = (up - down) / (2.0 * h);
            const double err = std::abs(analytic[i] - numeric) / (1.0 + std::abs(numeric));
            if (!(err <= r.worst_error)) r.worst_error = err;
            ++r.checked;
        }
    }
    r.passed = r.worst_error <= tol && (r.checked > 0 || r.skipped == 0);
    return r;
}

} // namespace pnemb
