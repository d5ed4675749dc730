#pragma once

// Registry of finite-difference checks: one case per differentiable op
// family plus whole networks, each run over a range of seeds on small
// randomized shapes.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "pnemb/embedding.hpp"
#include "pnemb/gradcheck.hpp"
#include "pnemb/kitti_io.hpp"
#include "pnemb/networks.hpp"
#include "pnemb/ops.hpp"

namespace pnemb {

struct GradCheckCase {
    std::string family;
    std::function<GradCheckResult(std::uint64_t seed, double h, double tol)> run;
};

namespace detail {

inline std::uint64_t fnv_tag(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.5, 1.5);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// sum(out * w) for a fixed random w, so every output element gets a
/// distinct upstream gradient.
inline Tensor weighted_sum(Graph& g, const Tensor& out, const Tensor& w) { return sum(g, mul(g, out, w)); }

inline std::size_t dim_in(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

/// Builds a case whose inputs are drawn once per seed; `body` maps the
/// inputs to an output tensor that is then reduced by a random weighting.
inline GradCheckCase unary_case(std::string family, std::function<std::vector<Tensor>(Rng&)> make,
                                std::function<Tensor(Graph&, const std::vector<Tensor>&)> body) {
    return {family, [family, make, body](std::uint64_t seed, double h, double tol) {
                Rng rng(derive_key(seed, fnv_tag(family)));
                auto inputs = make(rng);
                Tensor probe;
                {
                    Graph g(false);
                    probe = body(g, inputs);
                }
                Tensor w = random_tensor(rng, probe.shape(), false);
                std::vector<Tensor> params;
                for (const auto& t : inputs) {
                    if (t.requires_grad()) params.push_back(t);
                }
                return check_gradients(family, [&](Graph& g) { return weighted_sum(g, body(g, inputs), w); }, params,
                                       h, tol);
            }};
}

inline FrustumSample gradcheck_sample(std::uint64_t seed, std::size_t n) {
    SynthSpec spec;
    spec.n_points = n;
    spec.clutter = n / 8;
    return synth_dataset(seed, 1, spec)[0];
}

inline NetworkConfig gradcheck_network(Toggles t, std::size_t n) {
    NetworkConfig cfg;
    cfg.toggles = t;
    cfg.n_points = n;
    cfg.k = 3;
    cfg.c_out = 3;
    cfg.widths = Widths::tiny();
    return cfg;
}

/// Moves every normalisation shift off zero. A dense layer normalised over a
/// single row outputs exactly its shift, so at initialisation the following
/// ReLU sits on its kink.
inline void off_kink(FrustumDetector& det, std::uint64_t seed) {
    Rng rng(derive_key(seed, fnv_tag("off_kink")));
    for (const auto& e : det.params().entries()) {
        if (!e.trainable || !e.name.ends_with(".beta")) continue;
        Tensor t = e.tensor;
        for (double& v : t.mutable_data()) v += rng.uniform(-0.1, 0.1);
    }
}

} // namespace detail

inline std::vector<GradCheckCase> default_gradcheck_cases() {
    using detail::dim_in;
    using detail::random_tensor;
    using detail::unary_case;
    using Inputs = std::vector<Tensor>;
    std::vector<GradCheckCase> cases;

    cases.push_back(unary_case(
        "linear",
        [](Rng& r) {
            const auto n = dim_in(r, 2, 5), a = dim_in(r, 2, 4), b = dim_in(r, 1, 4);
            return Inputs{random_tensor(r, {n, a}), random_tensor(r, {a, b}), random_tensor(r, {b})};
        },
        [](Graph& g, const Inputs& x) { return linear(g, x[0], x[1], x[2]); }));
    cases.push_back(unary_case(
        "linear_rank3",
        [](Rng& r) {
            return Inputs{random_tensor(r, {dim_in(r, 2, 3), dim_in(r, 2, 3), 3}), random_tensor(r, {3, 2}),
                          random_tensor(r, {2})};
        },
        [](Graph& g, const Inputs& x) { return linear(g, x[0], x[1], x[2]); }));
    cases.push_back(unary_case(
        "matmul",
        [](Rng& r) {
            const auto n = dim_in(r, 1, 4), m = dim_in(r, 1, 4), p = dim_in(r, 1, 4);
            return Inputs{random_tensor(r, {n, m}), random_tensor(r, {m, p})};
        },
        [](Graph& g, const Inputs& x) { return matmul(g, x[0], x[1]); }));
    cases.push_back(unary_case(
        "transpose", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 1, 4), dim_in(r, 1, 4)})}; },
        [](Graph& g, const Inputs& x) { return transpose(g, x[0]); }));
    cases.push_back(unary_case(
        "relu", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 2, 6), dim_in(r, 1, 4)})}; },
        [](Graph& g, const Inputs& x) { return relu(g, x[0]); }));
    cases.push_back(unary_case(
        "max_pool_axis", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 2, 4), dim_in(r, 2, 5), 3})}; },
        [](Graph& g, const Inputs& x) { return max_pool_axis(g, x[0], 1).values; }));
    cases.push_back(unary_case(
        "concat",
        [](Rng& r) {
            const auto n = dim_in(r, 1, 4);
            return Inputs{random_tensor(r, {n, dim_in(r, 1, 3)}), random_tensor(r, {n, dim_in(r, 1, 3)})};
        },
        [](Graph& g, const Inputs& x) { return concat(g, {x[0], x[1]}, 1); }));
    cases.push_back(unary_case(
        "slice", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 3, 6), 3})}; },
        [](Graph& g, const Inputs& x) { return slice(g, x[0], 0, 1, x[0].dim(0) - 1); }));
    cases.push_back(unary_case(
        "reshape", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 1, 4), 6})}; },
        [](Graph& g, const Inputs& x) { return reshape(g, x[0], {x[0].dim(0) * 2, 3}); }));
    cases.push_back(unary_case(
        "repeat_axis", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 1, 4), 2})}; },
        [](Graph& g, const Inputs& x) { return repeat_axis(g, x[0], 1, 3); }));
    cases.push_back(unary_case(
        "take_rows", [](Rng& r) { return Inputs{random_tensor(r, {4, dim_in(r, 1, 3)})}; },
        [](Graph& g, const Inputs& x) { return take_rows(g, x[0], {3, 0, 0, 2}); }));
    cases.push_back(unary_case(
        "gather_neighbors", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 4, 7), 3})}; },
        [](Graph& g, const Inputs& x) { return gather_neighbors(g, x[0], knn(x[0].clone(), 3)); }));
    cases.push_back(unary_case(
        "elementwise",
        [](Rng& r) {
            const Shape s{dim_in(r, 1, 4), dim_in(r, 1, 4)};
            return Inputs{random_tensor(r, s), random_tensor(r, s)};
        },
        [](Graph& g, const Inputs& x) { return mul(g, add(g, x[0], x[1]), sub(g, x[0], scale(g, x[1], 0.7))); }));
    cases.push_back(unary_case(
        "reductions", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 1, 5), dim_in(r, 1, 3)})}; },
        [](Graph& g, const Inputs& x) {
            return concat(g, {reshape(g, sum(g, x[0]), {1}), reshape(g, mean(g, x[0]), {1})}, 0);
        }));
    cases.push_back(unary_case(
        "huber", [](Rng& r) { return Inputs{random_tensor(r, {dim_in(r, 2, 8)})}; },
        [](Graph& g, const Inputs& x) { return huber(g, scale(g, x[0], 1.7), 1.0); }));
    cases.push_back({"softmax_cross_entropy", [](std::uint64_t seed, double h, double tol) {
                         Rng r(derive_key(seed, detail::fnv_tag("softmax_cross_entropy")));
                         const auto n = dim_in(r, 1, 5), c = dim_in(r, 2, 4);
                         Tensor logits = random_tensor(r, {n, c});
                         std::vector<int> labels(n);
                         for (auto& l : labels) l = static_cast<int>(r.below(c));
                         return check_gradients(
                             "softmax_cross_entropy",
                             [&](Graph& g) { return softmax_cross_entropy(g, logits, labels); }, {logits}, h, tol);
                     }});
    cases.push_back({"feature_norm", [](std::uint64_t seed, double h, double tol) {
                         Rng r(derive_key(seed, detail::fnv_tag("feature_norm")));
                         const auto c = dim_in(r, 1, 3);
                         Tensor x = random_tensor(r, {dim_in(r, 3, 6), c});
                         FeatureNorm norm = FeatureNorm::create(c);
                         for (auto& v : norm.gamma.mutable_data()) v = r.uniform(0.5, 1.5);
                         for (auto& v : norm.beta.mutable_data()) v = r.uniform(-0.5, 0.5);
                         Tensor w = random_tensor(r, x.shape(), false);
                         return check_gradients(
                             "feature_norm",
                             [&](Graph& g) {
                                 return detail::weighted_sum(g, feature_norm(g, x, norm, NormMode::Train), w);
                             },
                             {x, norm.gamma, norm.beta}, h, tol);
                     }});
    cases.push_back({"embed_neighborhood", [](std::uint64_t seed, double h, double tol) {
                         Rng r(derive_key(seed, detail::fnv_tag("embed_neighborhood")));
                         const auto n = dim_in(r, 5, 8), width = dim_in(r, 2, 3);
                         ParamStore store;
                         auto layer = EmbeddingLayer::create(store, "e", width, 3, r);
                         Tensor feats = random_tensor(r, {n, width});
                         Tensor inten = random_tensor(r, {n, 1}, false);
                         const auto index = knn(feats.clone(), 3);
                         Tensor w = random_tensor(r, {n, 3}, false);
                         auto params = store.trainable();
                         params.push_back(feats);
                         return check_gradients(
                             "embed_neighborhood",
                             [&](Graph& g) {
                                 ForwardContext ctx{g, NormMode::Train};
                                 return detail::weighted_sum(g, embed_neighborhood(ctx, feats, inten, index, layer), w);
                             },
                             params, h, tol);
                     }});
    cases.push_back({"orthogonality_penalty", [](std::uint64_t seed, double h, double tol) {
                         Rng r(derive_key(seed, detail::fnv_tag("orthogonality_penalty")));
                         Tensor a = random_tensor(r, {3, 3});
                         return check_gradients(
                             "orthogonality_penalty", [&](Graph& g) { return orthogonality_penalty(g, a); }, {a}, h, tol);
                     }});
    cases.push_back({"spatial_transform", [](std::uint64_t seed, double h, double tol) {
                         Rng r(derive_key(seed, detail::fnv_tag("spatial_transform")));
                         ParamStore store;
                         SpatialTransformConfig cfg{{3, 4}, {3}, true};
                         SpatialTransformNet net(store, "st", cfg, r);
                         // The output layer starts at zero; move it off the identity.
                         for (auto& p : store.trainable()) {
                             for (auto& v : p.mutable_data()) v += r.uniform(-0.3, 0.3);
                         }
                         Tensor coords = random_tensor(r, {dim_in(r, 4, 7), 3});
                         Tensor w = random_tensor(r, coords.shape(), false);
                         auto params = store.trainable();
                         params.push_back(coords);
                         return check_gradients(
                             "spatial_transform",
                             [&](Graph& g) {
                                 ForwardContext ctx{g, NormMode::Train};
                                 return detail::weighted_sum(g, net(ctx, coords).coords, w);
                             },
                             params, h, tol);
                     }});
    for (const auto& row : ablation_rows()) {
        const std::string family = "network[" + row.name() + "]";
        cases.push_back({family, [row, family](std::uint64_t seed, double h, double tol) {
                             const auto s = detail::gradcheck_sample(derive_key(seed, detail::fnv_tag(family)), 16);
                             FrustumDetector det(detail::gradcheck_network(row, 16), seed);
                             detail::off_kink(det, seed);
                             return check_gradients(
                                 family,
                                 [&](Graph& g) {
                                     ForwardContext ctx{g, NormMode::Train};
                                     return det.loss(ctx, s).total;
                                 },
                                 det.params().trainable(), h, tol);
                         }});
    }
    // Three frustums through one graph: normalisation pools all of them.
    cases.push_back({"network_batch[st+lfe+fcr]", [](std::uint64_t seed, double h, double tol) {
                         const std::string family = "network_batch[st+lfe+fcr]";
                         std::vector<FrustumSample> batch;
                         for (std::uint64_t b = 0; b < 3; ++b) {
                             batch.push_back(detail::gradcheck_sample(derive_key(seed, detail::fnv_tag(family) + b), 16));
                         }
                         FrustumDetector det(detail::gradcheck_network({true, true, true}, 16), seed);
                         detail::off_kink(det, seed);
                         return check_gradients(
                             family,
                             [&](Graph& g) {
                                 std::vector<Tensor> losses(batch.size());
                                 BatchGroup(g).run(batch.size(), [&](ForwardContext& ctx) {
                                     losses[ctx.member] = det.loss(ctx, batch[ctx.member]).total;
                                 });
                                 return add(g, add(g, losses[0], losses[1]), losses[2]);
                             },
                             det.params().trainable(), h, tol);
                     }});
    return cases;
}

struct GradCheckReport {
    std::vector<GradCheckResult> families;  // worst result per family over all seeds
    std::vector<std::uint64_t> worst_seed;
    bool passed = true;

    std::string text() const {
        std::string out;
        char buf[256];
        for (std::size_t i = 0; i < families.size(); ++i) {
            const auto& f = families[i];
            std::snprintf(buf, sizeof buf, "%-4s %-28s checked %-7zu skipped %-4zu worst rel err %.3e (seed %llu)\n",
                          f.passed ? "ok" : "FAIL", f.name.c_str(), f.checked, f.skipped, f.worst_error,
                          static_cast<unsigned long long>(worst_seed[i]));
            out += buf;
        }
        std::snprintf(buf, sizeof buf, "%zu families covered, %s\n", families.size(), passed ? "all passed" : "FAILED");
        return out + buf;
    }
};

inline GradCheckReport run_gradcheck(const std::vector<GradCheckCase>& cases, std::uint64_t first_seed,
                                     std::size_t seeds, double h = 1e-5, double tol = 1e-4) {
    GradCheckReport rep;
    for (const auto& c : cases) {
        GradCheckResult worst{c.family};
        std::uint64_t worst_seed = first_seed;
        for (std::uint64_t s = first_seed; s < first_seed + seeds; ++s) {
            auto r = c.run(s, h, tol);
            worst.checked += r.checked;
            worst.skipped += r.skipped;
            worst.passed = worst.passed && r.passed;
            if (r.worst_error > worst.worst_error || !std::isfinite(r.worst_error)) {
                worst.worst_error = r.worst_error;
                worst_seed = s;
            }
        }
        worst.passed = worst.passed && worst.worst_error <= tol;
        rep.passed = rep.passed && worst.passed;
        rep.families.push_back(worst);
        rep.worst_seed.push_back(worst_seed);
    }
    return rep;
}

} // namespace pnemb
