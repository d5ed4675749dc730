#pragma once

// Frustum segmentation network (baseline, with embedding block, and with
// early layers replaced by neighbourhood embeddings), the amodal box head and
// the combined detection pipeline and losses.

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pnemb/checkpoint.hpp"
#include "pnemb/embedding.hpp"
#include "pnemb/errors.hpp"
#include "pnemb/evaluation.hpp"
#include "pnemb/kitti_io.hpp"
#include "pnemb/layers.hpp"
#include "pnemb/neighbor_graph.hpp"
#include "pnemb/ops.hpp"
#include "pnemb/random.hpp"
#include "pnemb/tensor.hpp"

namespace pnemb {

struct Toggles {
    bool st = false;
    bool lfe = false;
    bool fcr = false;

    bool operator==(const Toggles&) const = default;
    std::string name() const {
        if (!st && !lfe && !fcr) return "baseline";
        std::string s;
        for (auto [on, tag] : {std::pair{st, "st"}, {lfe, "lfe"}, {fcr, "fcr"}}) {
            if (!on) continue;
            if (!s.empty()) s += "+";
            s += tag;
        }
        return s;
    }
};

enum class Variant { Baseline, Eb, EbFcr };

inline Toggles variant_toggles(Variant v) {
    switch (v) {
    case Variant::Baseline: return {false, false, false};
    case Variant::Eb: return {true, true, false};
    case Variant::EbFcr: return {true, true, true};
    }
    return {};
}

inline std::optional<Variant> parse_variant(const std::string& s) {
    if (s == "baseline") return Variant::Baseline;
    if (s == "eb") return Variant::Eb;
    if (s == "eb_fcr") return Variant::EbFcr;
    return std::nullopt;
}

inline const char* variant_name(Variant v) {
    switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::Eb: return "eb";
    case Variant::EbFcr: return "eb_fcr";
    }
    return "?";
}

/// The {ST, LFE, FCR} combinations of the sub-block ablation, baseline first.
inline std::vector<Toggles> ablation_rows() {
    return {{false, false, false}, {false, false, true}, {true, false, false},
            {false, true, false},  {true, true, false},  {true, true, true}};
}

/// Layer widths of every sub-network.
struct Widths {
    std::vector<std::size_t> shared{64, 64, 64, 128, 1024};
    std::vector<std::size_t> head{512, 256};
    std::vector<std::size_t> st_point{64, 128, 1024};
    std::vector<std::size_t> st_dense{512, 256};
    std::vector<std::size_t> tnet_point{128, 128, 256};
    std::vector<std::size_t> tnet_dense{256, 128};
    std::vector<std::size_t> box_point{128, 128, 256, 512};
    std::vector<std::size_t> box_dense{512, 256};

    static Widths full() { return {}; }

    /// Narrow profile that trains in minutes on one core.
    static Widths desk() {
        Widths w;
        w.shared = {32, 32, 32, 64, 128};
        w.head = {64, 32};
        w.st_point = {16, 32, 64};
        w.st_dense = {32, 16};
        w.tnet_point = {32, 32, 64};
        w.tnet_dense = {32, 16};
        w.box_point = {32, 32, 64, 128};
        w.box_dense = {64, 32};
        return w;
    }

    /// Smallest shapes, for finite-difference checks.
    static Widths tiny() {
        Widths w;
        w.shared = {3, 3, 3, 4, 5};
        w.head = {4, 3};
        w.st_point = {3, 4};
        w.st_dense = {3};
        w.tnet_point = {3, 4};
        w.tnet_dense = {3};
        w.box_point = {3, 4};
        w.box_dense = {4};
        return w;
    }

    std::vector<std::vector<std::size_t>> all() const {
        return {shared, head, st_point, st_dense, tnet_point, tnet_dense, box_point, box_dense};
    }
};

inline constexpr std::size_t kHeadingBins = 12;
inline constexpr double kHeadingBinWidth = std::numbers::pi / 6.0;

inline std::array<Vec3, kClassCount> default_size_templates() {
    return {{{3.9, 1.6, 1.56}, {0.8, 0.6, 1.73}, {1.76, 0.6, 1.73}}};
}

struct NetworkConfig {
    Toggles toggles{true, true, true};
    std::size_t k = 4;
    std::size_t c_out = 64;
    std::size_t embed_layers = 3;
    bool self_counts_in_k = true;
    std::size_t n_points = 1024;
    std::size_t fcr_layers = 3;
    std::size_t skip_from = 2;  // 1-based shared layers whose outputs skip to the head
    std::size_t skip_to = 3;
    bool use_norm = true;
    Widths widths{};
    std::array<Vec3, kClassCount> size_templates = default_size_templates();

    void validate() const {
        if (n_points == 0) throw InvalidInput("n_points must be positive");
        if (k == 0) throw InvalidInput("k must be at least 1");
        if ((toggles.lfe || toggles.fcr) && neighbor_row_length(k, self_counts_in_k) > n_points) {
            throw InvalidInput("k=" + std::to_string(k) + " needs more than n_points=" + std::to_string(n_points));
        }
        if (c_out == 0 || embed_layers == 0) throw InvalidInput("c_out and embed_layers must be positive");
        if (widths.shared.size() < 2 || widths.head.empty()) throw InvalidInput("network needs shared and head layers");
        if (toggles.fcr && fcr_layers > widths.shared.size() - 1) {
            throw InvalidInput("fcr_layers must leave at least one shared point layer");
        }
        if (skip_from == 0 || skip_to < skip_from || skip_to >= widths.shared.size()) {
            throw InvalidInput("skip layers must lie before the last shared layer");
        }
        for (const auto& ws : widths.all()) {
            for (auto w : ws) {
                if (w == 0) throw InvalidInput("layer widths must be positive");
            }
        }
        for (const auto& t : size_templates) {
            for (double d : t) {
                if (!(d > 0)) throw InvalidInput("size templates must be positive");
            }
        }
    }
};

/// Per-class mean (l, w, h) over a dataset; falls back to the defaults for
/// classes that do not occur.
inline std::array<Vec3, kClassCount> mean_size_templates(const std::vector<FrustumSample>& data) {
    auto out = default_size_templates();
    std::array<Vec3, kClassCount> acc{};
    std::array<std::size_t, kClassCount> count{};
    for (const auto& s : data) {
        const auto c = static_cast<std::size_t>(s.cls);
        for (int d = 0; d < 3; ++d) acc[c][d] += s.gt_box.size[d];
        ++count[c];
    }
    for (std::size_t c = 0; c < kClassCount; ++c) {
        if (count[c] == 0) continue;
        for (int d = 0; d < 3; ++d) out[c][d] = acc[c][d] / static_cast<double>(count[c]);
    }
    return out;
}

namespace detail {

inline Tensor constant_rows(const std::vector<double>& row, std::size_t n) {
    std::vector<double> v;
    v.reserve(row.size() * n);
    for (std::size_t i = 0; i < n; ++i) v.insert(v.end(), row.begin(), row.end());
    return Tensor({n, row.size()}, std::move(v));
}

/// Shared point layers, global max-pool, then dense layers on [global, one_hot].
class GlobalRegressor {
public:
    GlobalRegressor() = default;
    GlobalRegressor(ParamStore& store, const std::string& prefix, std::size_t in,
                    const std::vector<std::size_t>& point, const std::vector<std::size_t>& dense, std::size_t out,
                    Rng& rng, bool use_norm) {
        for (std::size_t i = 0; i < point.size(); ++i) {
            point_.push_back(PointLayer::create(store, prefix + ".point" + std::to_string(i + 1), in, point[i], rng,
                                                use_norm));
            in = point[i];
        }
        in += kClassCount;
        for (std::size_t i = 0; i < dense.size(); ++i) {
            dense_.push_back(PointLayer::create(store, prefix + ".dense" + std::to_string(i + 1), in, dense[i], rng,
                                                use_norm));
            in = dense[i];
        }
        out_ = Dense::create(store, prefix + ".out", in, out, rng, /*zero_init=*/true);
    }

    Tensor operator()(ForwardContext& ctx, const Tensor& x, const Tensor& one_hot) {
        Graph& g = ctx.graph;
        Tensor h = x;
        for (auto& l : point_) h = l(ctx, h);
        h = max_pool_axis(g, h, 0).values;
        h = reshape(g, concat(g, {h, one_hot}, 0), {1, h.dim(0) + kClassCount});
        for (auto& d : dense_) h = d(ctx, h);
        return reshape(g, out_(g, h), {out_.out()});
    }

private:
    std::vector<PointLayer> point_;
    std::vector<PointLayer> dense_;
    Dense out_;
};

} // namespace detail

struct SegmentationOutput {
    Tensor logits;                    // [N, 2]
    Tensor coords;                    // coordinates after the spatial transform (or the input ones)
    std::optional<Tensor> transform;  // 3x3 when the ST net is on
};

/// Per-point foreground/background segmentation of one frustum.
class SegmentationNet {
public:
    SegmentationNet() = default;

    SegmentationNet(ParamStore& store, const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const auto& w = cfg.widths;
        std::size_t in = 4;
        if (cfg.toggles.st || cfg.toggles.lfe) {
            EmbeddingBlockConfig bc;
            bc.k = cfg.k;
            bc.c_out = cfg.c_out;
            bc.layers = cfg.embed_layers;
            bc.self_counts_in_k = cfg.self_counts_in_k;
            bc.use_st = cfg.toggles.st;
            bc.use_lfe = cfg.toggles.lfe;
            bc.use_norm = cfg.use_norm;
            bc.st = {w.st_point, w.st_dense, cfg.use_norm};
            block_ = EmbeddingBlock(store, "seg.block", bc, rng);
            in = block_.output_width();
        }
        const std::size_t replaced = cfg.toggles.fcr ? cfg.fcr_layers : 0;
        for (std::size_t i = 0; i < w.shared.size(); ++i) {
            if (i < replaced) {
                fcr_.push_back(EmbeddingLayer::create(store, "seg.fcr" + std::to_string(i + 1), in, w.shared[i], rng,
                                                      cfg.use_norm));
            } else {
                shared_.push_back(PointLayer::create(store, "seg.shared" + std::to_string(i + 1), in, w.shared[i], rng,
                                                     cfg.use_norm));
            }
            in = w.shared[i];
        }
        in = w.shared.back() + w.shared[cfg.skip_from - 1] + w.shared[cfg.skip_to - 1] + kClassCount + 3 +
             (cfg.toggles.st ? 3 : 0);
        for (std::size_t i = 0; i < w.head.size(); ++i) {
            head_.push_back(PointLayer::create(store, "seg.head" + std::to_string(i + 1), in, w.head[i], rng,
                                               cfg.use_norm));
            in = w.head[i];
        }
        logits_ = Dense::create(store, "seg.logits", in, 2, rng);
    }

    const NetworkConfig& config() const { return cfg_; }

    SegmentationOutput operator()(ForwardContext& ctx, const Tensor& points, const std::vector<double>& one_hot) {
        if (points.rank() != 2 || points.dim(1) != 4 || points.dim(0) != cfg_.n_points) {
            throw InvalidInput("segmentation: expected [" + std::to_string(cfg_.n_points) + ", 4] points, got " +
                               shape_str(points.shape()));
        }
        if (one_hot.size() != kClassCount) throw InvalidInput("segmentation: one-hot must have 3 entries");
        Graph& g = ctx.graph;
        const std::size_t n = points.dim(0);
        Tensor orig_coords = slice(g, points, 1, 0, 3);
        Tensor intensity = slice(g, points, 1, 3, 4);
        SegmentationOutput out;
        Tensor h = points;
        out.coords = orig_coords;
        if (cfg_.toggles.st || cfg_.toggles.lfe) {
            auto r = block_(ctx, points);
            h = r.features;
            out.coords = r.coords;
            out.transform = r.transform;
        }
        std::vector<Tensor> per_layer;
        for (auto& layer : fcr_) {
            NeighborIndex index = knn(h, cfg_.k, cfg_.self_counts_in_k);
            g.note_selection(index.indices);
            h = embed_neighborhood(ctx, h, intensity, index, layer);
            per_layer.push_back(h);
        }
        for (auto& layer : shared_) {
            h = layer(ctx, h);
            per_layer.push_back(h);
        }
        Tensor global = repeat_axis(g, max_pool_axis(g, h, 0).values, 0, n);
        std::vector<Tensor> parts{global, per_layer[cfg_.skip_from - 1], per_layer[cfg_.skip_to - 1],
                                  detail::constant_rows(one_hot, n), orig_coords};
        if (cfg_.toggles.st) parts.push_back(out.coords);
        h = concat(g, parts, 1);
        for (auto& layer : head_) h = layer(ctx, h);
        out.logits = logits_(g, h);
        return out;
    }

private:
    NetworkConfig cfg_{};
    EmbeddingBlock block_;
    std::vector<EmbeddingLayer> fcr_;
    std::vector<PointLayer> shared_;
    std::vector<PointLayer> head_;
    Dense logits_;
};

// ------------------------------------------------------------------ box head

/// Bin whose centre b * pi/6 is nearest to yaw; bin b covers
/// [b pi/6 - pi/12, b pi/6 + pi/12).
inline std::size_t heading_bin(double yaw) {
    const double two_pi = 2.0 * std::numbers::pi;
    double a = std::fmod(yaw + 0.5 * kHeadingBinWidth, two_pi);
    if (a < 0) a += two_pi;
    return static_cast<std::size_t>(std::floor(a / kHeadingBinWidth)) % kHeadingBins;
}

inline double heading_bin_center(std::size_t bin) { return static_cast<double>(bin) * kHeadingBinWidth; }

/// Residual of yaw from its bin centre, in units of half a bin ([-1, 1)).
inline double heading_residual(double yaw, std::size_t bin) {
    return normalize_yaw(yaw - heading_bin_center(bin)) / (0.5 * kHeadingBinWidth);
}

struct BoxHeadOutput {
    Tensor stage1_center;    // [3] centroid + T-Net residual
    Tensor center;           // [3] final centre
    Tensor heading_scores;   // [12]
    Tensor heading_res;      // [12], normalised by half a bin
    Tensor size_scores;      // [3]
    Tensor size_res;         // [9], relative to the templates
    bool fallback = false;   // no foreground points: the whole frustum was used
    std::size_t used_points = 0;
};

inline constexpr std::size_t kBoxOutputs = 3 + kHeadingBins * 2 + kClassCount * 4;

/// Light T-Net centre regression followed by the amodal box regressor, both
/// on foreground points.
class BoxHead {
public:
    BoxHead() = default;

    BoxHead(ParamStore& store, const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
        const auto& w = cfg.widths;
        tnet_ = detail::GlobalRegressor(store, "box.tnet", 4, w.tnet_point, w.tnet_dense, 3, rng, cfg.use_norm);
        net_ = detail::GlobalRegressor(store, "box.net", 4, w.box_point, w.box_dense, kBoxOutputs, rng, cfg.use_norm);
    }

    BoxHeadOutput operator()(ForwardContext& ctx, const Tensor& points, const std::vector<int>& foreground,
                             const std::vector<double>& one_hot) {
        Graph& g = ctx.graph;
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < foreground.size(); ++i) {
            if (foreground[i]) rows.push_back(i);
        }
        BoxHeadOutput out;
        if (rows.empty()) {
            out.fallback = true;
            for (std::size_t i = 0; i < points.dim(0); ++i) rows.push_back(i);
        }
        out.used_points = rows.size();
        const std::size_t m = rows.size();
        Tensor fg = take_rows(g, points, rows);
        std::vector<double> centroid(3, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            for (int d = 0; d < 3; ++d) centroid[d] += fg.at(i, d);
        }
        for (auto& c : centroid) c /= static_cast<double>(m);
        const Tensor one_hot_t({kClassCount}, one_hot);

        Tensor coords = slice(g, fg, 1, 0, 3);
        Tensor intensity = slice(g, fg, 1, 3, 4);
        Tensor local = sub(g, coords, detail::constant_rows(centroid, m));
        Tensor delta1 = tnet_(ctx, concat(g, {local, intensity}, 1), one_hot_t);
        out.stage1_center = add(g, Tensor({3}, centroid), delta1);

        Tensor local2 = sub(g, coords, repeat_axis(g, out.stage1_center, 0, m));
        Tensor y = net_(ctx, concat(g, {local2, intensity}, 1), one_hot_t);
        std::size_t at = 0;
        auto take = [&](std::size_t count) {
            Tensor t = slice(g, y, 0, at, at + count);
            at += count;
            return t;
        };
        out.center = add(g, out.stage1_center, take(3));
        out.heading_scores = take(kHeadingBins);
        out.heading_res = take(kHeadingBins);
        out.size_scores = take(kClassCount);
        out.size_res = take(kClassCount * 3);
        return out;
    }

    /// Arg-max bins plus their residuals, in the frustum frame.
    OrientedBox3D decode(const BoxHeadOutput& o) const {
        auto argmax = [](const Tensor& t) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < t.numel(); ++i) {
                if (t[i] > t[best]) best = i;
            }
            return best;
        };
        const std::size_t hb = argmax(o.heading_scores);
        const double yaw = heading_bin_center(hb) + o.heading_res[hb] * 0.5 * kHeadingBinWidth;
        const std::size_t sb = argmax(o.size_scores);
        Vec3 size{};
        for (int d = 0; d < 3; ++d) {
            size[d] = std::max(0.05, cfg_.size_templates[sb][d] * (1.0 + o.size_res[sb * 3 + d]));
        }
        return OrientedBox3D::make({o.center[0], o.center[1], o.center[2]}, size, yaw);
    }

private:
    NetworkConfig cfg_{};
    detail::GlobalRegressor tnet_;
    detail::GlobalRegressor net_;
};

// ------------------------------------------------------------------ pipeline

struct LossWeights {
    double seg = 1.0;
    double box = 1.0;
    double orthogonality = 0.001;
};

struct LossTerms {
    Tensor total;
    double seg = 0, center = 0, stage1 = 0, heading_cls = 0, heading_res = 0, size_cls = 0, size_res = 0,
           orthogonality = 0;
    double seg_accuracy = 0;  // point accuracy of this forward's logits
};

struct DetectionOutput {
    Tensor logits;                   // [N, 2]
    std::vector<int> predicted_mask;
    OrientedBox3D box;               // camera frame
    OrientedBox3D frustum_box;       // frustum frame
    ObjectClass cls = ObjectClass::Car;
    double confidence = 0.0;
    bool low_confidence = false;
};

inline std::vector<int> argmax_mask(const Tensor& logits) {
    std::vector<int> m(logits.dim(0));
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = logits.at(i, 1) > logits.at(i, 0);
    return m;
}

/// Segmentation network plus box head sharing one parameter store.
class FrustumDetector {
public:
    explicit FrustumDetector(const NetworkConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg.validate();
        Rng rng(derive_key(seed, 0x5eed));
        seg_ = SegmentationNet(store_, cfg, rng);
        box_ = BoxHead(store_, cfg, rng);
    }

    FrustumDetector(const FrustumDetector&) = delete;
    FrustumDetector& operator=(const FrustumDetector&) = delete;

    const NetworkConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    SegmentationNet& segmentation() { return seg_; }
    BoxHead& box_head() { return box_; }

    /// Training loss of one sample; the box head sees the ground-truth mask.
    LossTerms loss(ForwardContext& ctx, const FrustumSample& s, const LossWeights& w = {}) {
        Graph& g = ctx.graph;
        const auto one_hot = s.one_hot();
        auto seg = seg_(ctx, s.points, one_hot);
        LossTerms t;
        Tensor seg_loss = softmax_cross_entropy(g, seg.logits, s.seg_mask);
        auto box = box_(ctx, s.points, s.seg_mask, one_hot);

        const auto& gt = s.gt_box;
        const Tensor gt_center({3}, {gt.center[0], gt.center[1], gt.center[2]});
        Tensor center = sum(g, huber(g, sub(g, box.center, gt_center)));
        Tensor stage1 = sum(g, huber(g, sub(g, box.stage1_center, gt_center)));
        const std::size_t hb = heading_bin(gt.yaw);
        Tensor heading_cls = softmax_cross_entropy(g, reshape(g, box.heading_scores, {1, kHeadingBins}),
                                                   {static_cast<int>(hb)});
        Tensor heading_res =
            sum(g, huber(g, sub(g, slice(g, box.heading_res, 0, hb, hb + 1),
                                Tensor({1}, {heading_residual(gt.yaw, hb)}))));
        const auto sb = static_cast<std::size_t>(s.cls);
        Tensor size_cls = softmax_cross_entropy(g, reshape(g, box.size_scores, {1, kClassCount}),
                                                {static_cast<int>(sb)});
        std::vector<double> size_target(3);
        for (int d = 0; d < 3; ++d) size_target[d] = gt.size[d] / cfg_.size_templates[sb][d] - 1.0;
        Tensor size_res = sum(g, huber(g, sub(g, slice(g, box.size_res, 0, sb * 3, sb * 3 + 3), Tensor({3}, size_target))));

        Tensor box_loss = add(g, add(g, add(g, center, stage1), add(g, heading_cls, heading_res)), add(g, size_cls, size_res));
        Tensor total = add(g, scale(g, seg_loss, w.seg), scale(g, box_loss, w.box));
        if (seg.transform) {
            Tensor ortho = orthogonality_penalty(g, *seg.transform);
            t.orthogonality = ortho.item();
            total = add(g, total, scale(g, ortho, w.orthogonality));
        }
        t.total = total;
        t.seg = seg_loss.item();
        const auto pred = argmax_mask(seg.logits);
        std::size_t hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == s.seg_mask[i];
        t.seg_accuracy = static_cast<double>(hit) / static_cast<double>(pred.size());
        t.center = center.item();
        t.stage1 = stage1.item();
        t.heading_cls = heading_cls.item();
        t.heading_res = heading_res.item();
        t.size_cls = size_cls.item();
        t.size_res = size_res.item();
        return t;
    }

    /// Inference: predicted mask, box in both frames, confidence.
    DetectionOutput detect(const FrustumSample& s) {
        Graph g(false);
        ForwardContext ctx{g, NormMode::Inference};
        const auto one_hot = s.one_hot();
        auto seg = seg_(ctx, s.points, one_hot);
        DetectionOutput out;
        out.logits = seg.logits;
        out.predicted_mask = argmax_mask(seg.logits);
        auto box = box_(ctx, s.points, out.predicted_mask, one_hot);
        out.frustum_box = box_.decode(box);
        out.box = rotate_box_about_y(out.frustum_box, s.frustum_angle);
        out.cls = s.cls;
        out.low_confidence = box.fallback;
        double conf = 0.0;
        std::size_t used = 0;
        for (std::size_t i = 0; i < out.predicted_mask.size(); ++i) {
            if (!out.predicted_mask[i] && !box.fallback) continue;
            const double a = seg.logits.at(i, 0), b = seg.logits.at(i, 1);
            conf += 1.0 / (1.0 + std::exp(a - b));
            ++used;
        }
        out.confidence = conf / static_cast<double>(used);
        if (box.fallback) out.confidence *= 0.1;
        return out;
    }

private:
    NetworkConfig cfg_;
    ParamStore store_;
    SegmentationNet seg_;
    BoxHead box_;
};

} // namespace pnemb
