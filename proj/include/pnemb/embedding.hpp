#pragma once

// Point-neighbourhood embedding: the per-pair input operator D, the
// neighbourhood embedding F (shared linear map over D vectors, max-pooled over
// the K neighbours), the 3x3 spatial transform net, and the embedding block
// that chains them.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pnemb/checkpoint.hpp"
#include "pnemb/errors.hpp"
#include "pnemb/layers.hpp"
#include "pnemb/neighbor_graph.hpp"
#include "pnemb/ops.hpp"
#include "pnemb/random.hpp"
#include "pnemb/tensor.hpp"

namespace pnemb {

/// One point split into comparable attributes (coordinates, metres) and
/// non-comparable attributes (intensity in [0, 1]).
struct PointRecord {
    std::array<double, 3> c{};
    double v = 0.0;

    void validate() const {
        for (double x : c) {
            if (!std::isfinite(x)) throw InvalidInput("PointRecord: non-finite coordinate");
        }
        if (!std::isfinite(v)) throw InvalidInput("PointRecord: non-finite intensity");
    }
};

/// Splits an [N, 4] (x, y, z, intensity) tensor into records.
inline std::vector<PointRecord> to_records(const Tensor& points) {
    if (points.rank() != 2 || points.dim(1) != 4) {
        throw DimensionError("expected [N, 4] points, got " + shape_str(points.shape()));
    }
    std::vector<PointRecord> out(points.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = {{points.at(i, 0), points.at(i, 1), points.at(i, 2)}, points.at(i, 3)};
        out[i].validate();
    }
    return out;
}

/// D^o(p_i, p_j) = (p_i, p_i - p_j, O(p_i)) where at layer 0 the features are
/// the coordinates c and O(p_i) is the original intensity. Width 2 * |p| + 1.
inline std::vector<double> operator_d(std::span<const double> p_i, std::span<const double> p_j, std::size_t layer,
                                      const PointRecord& orig_i) {
    if (p_i.size() != p_j.size()) {
        throw DimensionError("operator_d: feature widths " + std::to_string(p_i.size()) + " and " +
                             std::to_string(p_j.size()) + " differ");
    }
    if (layer == 0 && p_i.size() != 3) {
        throw DimensionError("operator_d: layer 0 operates on 3-D coordinates, got width " +
                             std::to_string(p_i.size()));
    }
    std::vector<double> out;
    out.reserve(2 * p_i.size() + 1);
    out.insert(out.end(), p_i.begin(), p_i.end());
    for (std::size_t c = 0; c < p_i.size(); ++c) out.push_back(p_i[c] - p_j[c]);
    out.push_back(orig_i.v);
    return out;
}

inline std::size_t operator_d_width(std::size_t feature_width) { return 2 * feature_width + 1; }

/// Parameters of one neighbourhood embedding F: feature width of its input,
/// the D width (2 * feature_width + 1) and the output width.
struct EmbeddingLayer {
    std::size_t feature_width = 0;
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    Dense fc;
    FeatureNorm norm;
    bool use_norm = true;

    static EmbeddingLayer create(ParamStore& store, const std::string& prefix, std::size_t feature_width,
                                 std::size_t c_out, Rng& rng, bool use_norm = true) {
        EmbeddingLayer l;
        l.feature_width = feature_width;
        l.c_in = operator_d_width(feature_width);
        l.c_out = c_out;
        l.fc = Dense::create(store, prefix, l.c_in, c_out, rng);
        l.use_norm = use_norm;
        if (use_norm) l.norm = register_norm(store, prefix + ".norm", c_out);
        return l;
    }
};

/// All D vectors of the graph at once: [N, K, 2C + 1].
inline Tensor data_vectors(Graph& g, const Tensor& features, const Tensor& intensity, const NeighborIndex& index) {
    const std::size_t n = features.dim(0);
    if (intensity.rank() != 2 || intensity.dim(0) != n || intensity.dim(1) != 1) {
        throw DimensionError("data_vectors: intensity " + shape_str(intensity.shape()) + " vs features " +
                             shape_str(features.shape()));
    }
    Tensor xj = gather_neighbors(g, features, index);
    Tensor xi = repeat_axis(g, features, 1, index.k);
    Tensor diff = sub(g, xi, xj);
    Tensor it = repeat_axis(g, intensity, 1, index.k);
    return concat(g, {xi, diff, it}, 2);
}

/// F(p_i, N_i) = max over j in N_i of relu(norm(linear(D(p_i, p_j)))).
/// `index` must have been built on `features` themselves.
inline Tensor embed_neighborhood(ForwardContext& ctx, const Tensor& features, const Tensor& intensity,
                                 const NeighborIndex& index, EmbeddingLayer& layer) {
    if (features.rank() != 2 || features.dim(1) != layer.feature_width) {
        throw DimensionError("embed_neighborhood: features " + shape_str(features.shape()) +
                             " do not match layer feature width " + std::to_string(layer.feature_width));
    }
    if (index.n_points != features.dim(0)) {
        throw InvalidInput("embed_neighborhood: stale neighbour index (" + std::to_string(index.n_points) +
                           " points) for " + std::to_string(features.dim(0)) + " features");
    }
    Graph& g = ctx.graph;
    Tensor d = data_vectors(g, features, intensity, index);
    Tensor h = layer.fc(g, d);
    if (layer.use_norm) h = ctx.normalize(h, layer.norm);
    h = relu(g, h);
    return max_pool_axis(g, h, 1).values;
}

struct SpatialTransformConfig {
    std::vector<std::size_t> point_widths{64, 128, 1024};
    std::vector<std::size_t> dense_widths{512, 256};
    bool use_norm = true;
};

struct SpatialTransformResult {
    Tensor coords;     // [N, 3]
    Tensor transform;  // [3, 3]
};

/// Predicts a 3x3 matrix T = I + R(coords) from a shared per-point network
/// and a global max-pool; the last layer starts at zero so T starts at I.
/// Row-vector convention: output = coords * T.
class SpatialTransformNet {
public:
    SpatialTransformNet() = default;

    SpatialTransformNet(ParamStore& store, const std::string& prefix, const SpatialTransformConfig& cfg, Rng& rng) {
        std::size_t in = 3;
        for (std::size_t i = 0; i < cfg.point_widths.size(); ++i) {
            point_.push_back(PointLayer::create(store, prefix + ".point" + std::to_string(i + 1), in,
                                                cfg.point_widths[i], rng, cfg.use_norm));
            in = cfg.point_widths[i];
        }
        for (std::size_t i = 0; i < cfg.dense_widths.size(); ++i) {
            dense_.push_back(PointLayer::create(store, prefix + ".dense" + std::to_string(i + 1), in,
                                                cfg.dense_widths[i], rng, cfg.use_norm));
            in = cfg.dense_widths[i];
        }
        out_ = Dense::create(store, prefix + ".out", in, 9, rng, /*zero_init=*/true);
    }

    SpatialTransformResult operator()(ForwardContext& ctx, const Tensor& coords) {
        if (coords.rank() != 2 || coords.dim(1) != 3) {
            throw DimensionError("spatial_transform: expected [N, 3] coordinates, got " + shape_str(coords.shape()));
        }
        Graph& g = ctx.graph;
        Tensor h = coords;
        for (auto& l : point_) h = l(ctx, h);
        h = reshape(g, max_pool_axis(g, h, 0).values, {1, h.dim(1)});
        for (auto& d : dense_) h = d(ctx, h);
        Tensor residual = reshape(g, out_(g, h), {3, 3});
        Tensor t = add(g, residual, identity3());
        return {matmul(g, coords, t), t};
    }

    static Tensor identity3() { return Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}); }

private:
    std::vector<PointLayer> point_;
    std::vector<PointLayer> dense_;
    Dense out_;
};

/// ||T T^T - I||_F^2, the orthogonality penalty on a predicted transform.
inline Tensor orthogonality_penalty(Graph& g, const Tensor& t) {
    Tensor gram = matmul(g, t, transpose(g, t));
    Tensor r = sub(g, gram, SpatialTransformNet::identity3());
    return sum(g, mul(g, r, r));
}

inline double orthogonality_residual(const Tensor& t) {
    Graph g(false);
    return std::sqrt(orthogonality_penalty(g, t).item());
}

struct EmbeddingBlockConfig {
    std::size_t k = 4;
    std::size_t c_out = 64;
    std::size_t layers = 3;
    bool self_counts_in_k = true;
    bool use_st = true;
    bool use_lfe = true;
    bool use_norm = true;
    SpatialTransformConfig st{};
};

struct EmbeddingBlockResult {
    Tensor features;                  // [N, 4 + c_out] (or [N, 4] without LFE)
    Tensor coords;                    // coordinates after the transform
    std::optional<Tensor> transform;  // 3x3 when the ST net is enabled
};

/// ST net on the coordinate channels, then `layers` chained neighbourhood
/// embeddings, each on a KNN graph rebuilt in its own input space, finally
/// concatenated with the (transformed) coordinates and the intensity.
class EmbeddingBlock {
public:
    EmbeddingBlock() = default;

    EmbeddingBlock(ParamStore& store, const std::string& prefix, const EmbeddingBlockConfig& cfg, Rng& rng)
        : cfg_(cfg) {
        if (cfg.use_st) st_ = SpatialTransformNet(store, prefix + ".st", cfg.st, rng);
        if (cfg.use_lfe) {
            std::size_t width = 3;
            for (std::size_t o = 0; o < cfg.layers; ++o) {
                layers_.push_back(EmbeddingLayer::create(store, prefix + ".embed" + std::to_string(o + 1), width,
                                                         cfg.c_out, rng, cfg.use_norm));
                width = cfg.c_out;
            }
            for (std::size_t o = 0; o + 1 < layers_.size(); ++o) {
                if (layers_[o].c_out != layers_[o + 1].feature_width) {
                    throw DimensionError("embedding block: layer widths do not chain");
                }
            }
        }
    }

    const EmbeddingBlockConfig& config() const { return cfg_; }
    std::size_t output_width() const { return cfg_.use_lfe ? 4 + cfg_.c_out : 4; }

    EmbeddingBlockResult operator()(ForwardContext& ctx, const Tensor& points) {
        if (points.rank() != 2 || points.dim(1) != 4) {
            throw DimensionError("embedding_block: expected [N, 4] points, got " + shape_str(points.shape()));
        }
        const std::size_t n = points.dim(0);
        if (cfg_.use_lfe && neighbor_row_length(cfg_.k, cfg_.self_counts_in_k) > n) {
            throw InvalidInput("embedding_block: " + std::to_string(n) + " points cannot supply k=" +
                               std::to_string(cfg_.k) + " neighbours");
        }
        Graph& g = ctx.graph;
        Tensor coords = slice(g, points, 1, 0, 3);
        Tensor intensity = slice(g, points, 1, 3, 4);
        EmbeddingBlockResult r;
        if (cfg_.use_st) {
            auto st = st_(ctx, coords);
            coords = st.coords;
            r.transform = st.transform;
        }
        r.coords = coords;
        if (!cfg_.use_lfe) {
            r.features = concat(g, {coords, intensity}, 1);
            return r;
        }
        Tensor h = coords;
        for (auto& layer : layers_) {
            NeighborIndex index = knn(h, cfg_.k, cfg_.self_counts_in_k);
            g.note_selection(index.indices);
            h = embed_neighborhood(ctx, h, intensity, index, layer);
        }
        r.features = concat(g, {coords, intensity, h}, 1);
        return r;
    }

private:
    EmbeddingBlockConfig cfg_{};
    SpatialTransformNet st_;
    std::vector<EmbeddingLayer> layers_;
};

} // namespace pnemb
