#pragma once

// Differentiable operations over pnemb::Tensor.
//
// Every op takes the Graph first. Outputs are fresh tensors; when the graph is
// recording and some input requires a gradient, a backward closure is appended.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pnemb/errors.hpp"
#include "pnemb/tensor.hpp"

namespace pnemb {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

inline std::size_t check_axis(const Tensor& t, std::size_t axis, const char* op) {
    if (axis >= t.rank()) {
        throw InvalidInput(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(t.shape()));
    }
    return axis;
}

/// (outer, axis, inner) extents for an axis-wise traversal.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
    }
}

} // namespace detail

/// output[..., j] = sum_k input[..., k] * weight[k, j] + bias[j]. Pass an
/// undefined bias to skip it.
inline Tensor linear(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias = {}) {
    if (weight.rank() != 2 || input.shape().back() != weight.dim(0) ||
        (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(1)))) {
        throw DimensionError("linear: input " + shape_str(input.shape()) + " incompatible with weight " +
                             shape_str(weight.shape()) +
                             (bias.defined() ? " and bias " + shape_str(bias.shape()) : std::string()));
    }
    const std::size_t cin = weight.dim(0);
    const std::size_t cout = weight.dim(1);
    const std::size_t rows = input.numel() / cin;
    Shape out_shape = input.shape();
    out_shape.back() = cout;
    Tensor out = Tensor::zeros(out_shape);

    detail::ConstMap x(input.data().data(), rows, cin);
    detail::ConstMap w(weight.data().data(), cin, cout);
    detail::MutMap y(out.mutable_data().data(), rows, cout);
    y.noalias() = x * w;
    if (bias.defined()) y.rowwise() += detail::ConstVecMap(bias.data().data(), cout);

    if (g.wants(input, weight) || (bias.defined() && g.wants(bias))) {
        g.record("linear", out, [input, weight, bias, out, rows, cin, cout]() mutable {
            detail::ConstMap gy(out.grad().data(), rows, cout);
            if (input.requires_grad()) {
                detail::MutMap gx(input.mutable_grad().data(), rows, cin);
                gx.noalias() += gy * detail::ConstMap(weight.data().data(), cin, cout).transpose();
            }
            if (weight.requires_grad()) {
                detail::MutMap gw(weight.mutable_grad().data(), cin, cout);
                gw.noalias() += detail::ConstMap(input.data().data(), rows, cin).transpose() * gy;
            }
            if (bias.defined() && bias.requires_grad()) {
                auto gb = bias.mutable_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < cout; ++j) gb[j] += gy(r, j);
                }
            }
        });
    }
    return out;
}

/// Plain 2-D matrix product.
inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " are not conformable");
    }
    return linear(g, a, b);
}

inline Tensor transpose(Graph& g, const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    auto o = out.mutable_data();
    auto x = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) o[j * m + i] = x[i * n + j];
    }
    if (g.wants(a)) {
        g.record("transpose", out, [a, out, m, n]() mutable {
            auto ga = a.mutable_grad();
            auto go = out.grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
            }
        });
    }
    return out;
}

inline Tensor relu(Graph& g, const Tensor& input) {
    Tensor out = Tensor::zeros(input.shape());
    auto x = input.data();
    auto y = out.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = x[i] > 0.0 ? x[i] : 0.0;
        // Values within rounding of the kink (single-row normalisation lands
        // exactly there) count as neither side.
        g.note_choice(x[i] > 1e-12 ? 1 : x[i] < -1e-12 ? 0 : 2);
    }
    if (g.wants(input)) {
        g.record("relu", out, [input, out]() mutable {
            auto x = input.data();
            auto gy = out.grad();
            auto gx = input.mutable_grad();
            for (std::size_t i = 0; i < x.size(); ++i) {
                if (x[i] > 0.0) gx[i] += gy[i];
            }
        });
    }
    return out;
}

struct PoolResult {
    Tensor values;
    /// For every output element, the pooled-axis position that won.
    std::vector<std::size_t> argmax;
};

/// Max over one axis; ties resolve to the first (lowest) position, which is
/// also the only position that receives gradient.
inline PoolResult max_pool_axis(Graph& g, const Tensor& input, std::size_t axis) {
    detail::check_axis(input, axis, "max_pool_axis");
    const auto s = detail::split_at(input.shape(), axis);
    if (s.extent == 0) throw InvalidInput("max_pool_axis: pooled axis is empty");
    Shape out_shape;
    for (std::size_t i = 0; i < input.rank(); ++i) {
        if (i != axis) out_shape.push_back(input.dim(i));
    }
    if (out_shape.empty()) out_shape.push_back(1);

    PoolResult r{Tensor::zeros(out_shape), std::vector<std::size_t>(s.outer * s.inner, 0)};
    auto x = input.data();
    auto y = r.values.mutable_data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            std::size_t best = 0;
            double best_v = x[base];
            for (std::size_t k = 1; k < s.extent; ++k) {
                double v = x[base + k * s.inner];
                if (v > best_v) {
                    best_v = v;
                    best = k;
                }
            }
            y[o * s.inner + in] = best_v;
            r.argmax[o * s.inner + in] = best;
        }
    }
    g.note_selection(r.argmax);
    if (g.wants(input)) {
        g.record("max_pool_axis", r.values, [input, out = r.values, arg = r.argmax, s]() mutable {
            auto gy = out.grad();
            auto gx = input.mutable_grad();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t in = 0; in < s.inner; ++in) {
                    const std::size_t idx = o * s.inner + in;
                    gx[o * s.extent * s.inner + arg[idx] * s.inner + in] += gy[idx];
                }
            }
        });
    }
    return r;
}

inline Tensor concat(Graph& g, const std::vector<Tensor>& inputs, std::size_t axis) {
    if (inputs.empty()) throw InvalidInput("concat: no inputs");
    const Tensor& first = inputs.front();
    detail::check_axis(first, axis, "concat");
    Shape out_shape = first.shape();
    out_shape[axis] = 0;
    for (const auto& t : inputs) {
        bool ok = t.rank() == first.rank();
        for (std::size_t i = 0; ok && i < t.rank(); ++i) {
            if (i != axis && t.dim(i) != first.dim(i)) ok = false;
        }
        if (!ok) {
            throw DimensionError("concat: shape " + shape_str(t.shape()) + " does not match " +
                                 shape_str(first.shape()) + " outside axis " + std::to_string(axis));
        }
        out_shape[axis] += t.dim(axis);
    }
    if (inputs.size() == 1) out_shape = first.shape();
    Tensor out = Tensor::zeros(out_shape);
    const auto so = detail::split_at(out_shape, axis);
    auto y = out.mutable_data();
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& t : inputs) {
        const std::size_t w = t.dim(axis) * so.inner;
        auto x = t.data();
        for (std::size_t o = 0; o < so.outer; ++o) {
            std::copy_n(x.begin() + o * w, w, y.begin() + o * so.extent * so.inner + offset);
        }
        offsets.push_back(offset);
        offset += w;
    }
    if (g.wants_any(inputs)) {
        g.record("concat", out, [inputs, out, offsets, so, axis]() mutable {
            auto gy = out.grad();
            for (std::size_t p = 0; p < inputs.size(); ++p) {
                Tensor t = inputs[p];
                if (!t.requires_grad()) continue;
                const std::size_t w = t.dim(axis) * so.inner;
                auto gx = t.mutable_grad();
                for (std::size_t o = 0; o < so.outer; ++o) {
                    const double* src = gy.data() + o * so.extent * so.inner + offsets[p];
                    for (std::size_t i = 0; i < w; ++i) gx[o * w + i] += src[i];
                }
            }
        });
    }
    return out;
}

/// Half-open range [begin, end) along one axis.
inline Tensor slice(Graph& g, const Tensor& input, std::size_t axis, std::size_t begin, std::size_t end) {
    detail::check_axis(input, axis, "slice");
    if (begin >= end || end > input.dim(axis)) {
        throw InvalidInput("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                           ") invalid for axis of size " + std::to_string(input.dim(axis)));
    }
    const auto s = detail::split_at(input.shape(), axis);
    Shape out_shape = input.shape();
    out_shape[axis] = end - begin;
    Tensor out = Tensor::zeros(out_shape);
    const std::size_t w = (end - begin) * s.inner;
    auto x = input.data();
    auto y = out.mutable_data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(x.begin() + (o * s.extent + begin) * s.inner, w, y.begin() + o * w);
    }
    if (g.wants(input)) {
        g.record("slice", out, [input, out, s, begin, w]() mutable {
            auto gy = out.grad();
            auto gx = input.mutable_grad();
            for (std::size_t o = 0; o < s.outer; ++o) {
                double* dst = gx.data() + (o * s.extent + begin) * s.inner;
                for (std::size_t i = 0; i < w; ++i) dst[i] += gy[o * w + i];
            }
        });
    }
    return out;
}

inline Tensor reshape(Graph& g, const Tensor& input, Shape shape) {
    if (shape_numel(shape) != input.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
    }
    Tensor out(std::move(shape), input.values());
    if (g.wants(input)) {
        g.record("reshape", out, [input, out]() mutable {
            auto gy = out.grad();
            auto gx = input.mutable_grad();
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        });
    }
    return out;
}

/// Inserts a new axis of size `count` at position `axis`, copying the input
/// along it. Backward sums over the new axis.
inline Tensor repeat_axis(Graph& g, const Tensor& input, std::size_t axis, std::size_t count) {
    if (axis > input.rank()) throw InvalidInput("repeat_axis: axis out of range");
    if (count == 0) throw InvalidInput("repeat_axis: count must be positive");
    Shape out_shape = input.shape();
    out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= input.dim(i);
    for (std::size_t i = axis; i < input.rank(); ++i) inner *= input.dim(i);
    Tensor out = Tensor::zeros(out_shape);
    auto x = input.data();
    auto y = out.mutable_data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < count; ++c) {
            std::copy_n(x.begin() + o * inner, inner, y.begin() + (o * count + c) * inner);
        }
    }
    if (g.wants(input)) {
        g.record("repeat_axis", out, [input, out, outer, inner, count]() mutable {
            auto gy = out.grad();
            auto gx = input.mutable_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t c = 0; c < count; ++c) {
                    const double* src = gy.data() + (o * count + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) gx[o * inner + i] += src[i];
                }
            }
        });
    }
    return out;
}

/// Selects slices along the first axis; repeated indices accumulate gradient.
inline Tensor take_rows(Graph& g, const Tensor& input, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw InvalidInput("take_rows: empty index list");
    const std::size_t n = input.dim(0);
    const std::size_t w = input.numel() / n;
    for (std::size_t r : rows) {
        if (r >= n) {
            throw InvalidInput("take_rows: index " + std::to_string(r) + " out of range for " + std::to_string(n) +
                               " rows");
        }
    }
    Shape out_shape = input.shape();
    out_shape[0] = rows.size();
    Tensor out = Tensor::zeros(out_shape);
    auto x = input.data();
    auto y = out.mutable_data();
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(x.begin() + rows[i] * w, w, y.begin() + i * w);
    if (g.wants(input)) {
        g.record("take_rows", out, [input, out, rows, w]() mutable {
            auto gy = out.grad();
            auto gx = input.mutable_grad();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                for (std::size_t c = 0; c < w; ++c) gx[rows[i] * w + c] += gy[i * w + c];
            }
        });
    }
    return out;
}

namespace detail {

template <typename Fwd, typename GradA, typename GradB>
Tensor binary_elementwise(Graph& g, const char* name, const Tensor& a, const Tensor& b, Fwd fwd, GradA da,
                          GradB db) {
    require_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape());
    auto x = a.data();
    auto y = b.data();
    auto z = out.mutable_data();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = fwd(x[i], y[i]);
    if (g.wants(a, b)) {
        g.record(name, out, [a, b, out, da, db]() mutable {
            auto go = out.grad();
            auto x = a.data();
            auto y = b.data();
            if (a.requires_grad()) {
                auto ga = a.mutable_grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * da(x[i], y[i]);
            }
            if (b.requires_grad()) {
                auto gb = b.mutable_grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * db(x[i], y[i]);
            }
        });
    }
    return out;
}

} // namespace detail

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        g, "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        g, "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        g, "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Tensor scale(Graph& g, const Tensor& input, double factor) {
    Tensor out = Tensor::zeros(input.shape());
    auto x = input.data();
    auto y = out.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * factor;
    if (g.wants(input)) {
        g.record("scale", out, [input, out, factor]() mutable {
            auto gy = out.grad();
            auto gx = input.mutable_grad();
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
        });
    }
    return out;
}

inline Tensor sum(Graph& g, const Tensor& input) {
    double acc = 0.0;
    for (double v : input.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (g.wants(input)) {
        g.record("sum", out, [input, out]() mutable {
            const double go = out.grad()[0];
            for (double& v : input.mutable_grad()) v += go;
        });
    }
    return out;
}

inline Tensor mean(Graph& g, const Tensor& input) {
    return scale(g, sum(g, input), 1.0 / static_cast<double>(input.numel()));
}

/// Elementwise Huber penalty: 0.5 x^2 inside |x| <= delta, linear outside.
inline Tensor huber(Graph& g, const Tensor& input, double delta = 1.0) {
    Tensor out = Tensor::zeros(input.shape());
    auto x = input.data();
    auto y = out.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double a = std::abs(x[i]);
        y[i] = a <= delta ? 0.5 * x[i] * x[i] : delta * (a - 0.5 * delta);
    }
    if (g.wants(input)) {
        g.record("huber", out, [input, out, delta]() mutable {
            auto x = input.data();
            auto gy = out.grad();
            auto gx = input.mutable_grad();
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double d = std::abs(x[i]) <= delta ? x[i] : (x[i] > 0 ? delta : -delta);
                gx[i] += gy[i] * d;
            }
        });
    }
    return out;
}

/// Mean over rows of -log softmax(logits)[label], stabilised by subtracting
/// the row maximum.
inline Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw DimensionError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= c) {
            throw InvalidInput("softmax_cross_entropy: label " + std::to_string(l) + " outside [0, " +
                               std::to_string(c) + ")");
        }
    }
    std::vector<double> prob(n * c);
    auto z = logits.data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = z.data() + i * c;
        const std::size_t top = static_cast<std::size_t>(std::max_element(row, row + c) - row);
        const double m = row[top];
        // The arg-max term contributes exactly 1; log1p keeps the remainder.
        double rest = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j != top) rest += std::exp(row[j] - m);
        }
        const double denom = 1.0 + rest;
        for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(row[j] - m) / denom;
        total += (m - row[labels[i]]) + std::log1p(rest);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n));
    if (g.wants(logits)) {
        g.record("softmax_cross_entropy", out, [logits, out, prob = std::move(prob), labels, n, c]() mutable {
            const double go = out.grad()[0] / static_cast<double>(n);
            auto gz = logits.mutable_grad();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    double p = prob[i * c + j] - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0);
                    gz[i * c + j] += go * p;
                }
            }
        });
    }
    return out;
}

enum class NormMode { Train, Inference, Off };

/// Per-channel affine normalisation with running statistics.
struct FeatureNorm {
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.9;
    double eps = 1e-5;

    static FeatureNorm create(std::size_t channels) {
        return FeatureNorm{Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true),
                           Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
    }
};

/// Standardises each channel over all leading rows of `input` ([..., C]).
/// Train mode uses (biased) statistics of those rows and folds them into the
/// running averages; Inference uses the running averages; Off is the identity.
inline Tensor feature_norm(Graph& g, const Tensor& input, FeatureNorm& norm, NormMode mode) {
    if (mode == NormMode::Off) return input;
    const std::size_t c = input.shape().back();
    if (norm.gamma.numel() != c) {
        throw DimensionError("feature_norm: input " + shape_str(input.shape()) + " vs " +
                             std::to_string(norm.gamma.numel()) + " norm channels");
    }
    const std::size_t n = input.numel() / c;
    auto x = input.data();
    std::vector<double> mu(c, 0.0), var(c, 0.0);
    const bool batch_stats = mode == NormMode::Train;
    if (batch_stats) {
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < c; ++j) mu[j] += x[r * c + j];
        }
        for (double& m : mu) m /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < c; ++j) {
                const double d = x[r * c + j] - mu[j];
                var[j] += d * d;
            }
        }
        for (double& v : var) v /= static_cast<double>(n);
        auto rm = norm.running_mean.mutable_data();
        auto rv = norm.running_var.mutable_data();
        for (std::size_t j = 0; j < c; ++j) {
            rm[j] = norm.momentum * rm[j] + (1.0 - norm.momentum) * mu[j];
            rv[j] = norm.momentum * rv[j] + (1.0 - norm.momentum) * var[j];
        }
    } else {
        std::copy(norm.running_mean.data().begin(), norm.running_mean.data().end(), mu.begin());
        std::copy(norm.running_var.data().begin(), norm.running_var.data().end(), var.begin());
    }
    std::vector<double> inv_std(c), xhat(n * c);
    for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + norm.eps);
    Tensor out = Tensor::zeros(input.shape());
    auto y = out.mutable_data();
    auto gam = norm.gamma.data();
    auto bet = norm.beta.data();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (x[r * c + j] - mu[j]) * inv_std[j];
            xhat[r * c + j] = h;
            y[r * c + j] = gam[j] * h + bet[j];
        }
    }
    if (g.wants(input, norm.gamma, norm.beta)) {
        g.record("feature_norm", out,
                 [input, gamma = norm.gamma, beta = norm.beta, out, xhat = std::move(xhat),
                  inv_std = std::move(inv_std), n, c, batch_stats]() mutable {
                     auto gy = out.grad();
                     auto gam = gamma.data();
                     if (gamma.requires_grad() || beta.requires_grad()) {
                         std::vector<double> dg(c, 0.0), db(c, 0.0);
                         for (std::size_t r = 0; r < n; ++r) {
                             for (std::size_t j = 0; j < c; ++j) {
                                 dg[j] += gy[r * c + j] * xhat[r * c + j];
                                 db[j] += gy[r * c + j];
                             }
                         }
                         if (gamma.requires_grad()) {
                             auto gg = gamma.mutable_grad();
                             for (std::size_t j = 0; j < c; ++j) gg[j] += dg[j];
                         }
                         if (beta.requires_grad()) {
                             auto gb = beta.mutable_grad();
                             for (std::size_t j = 0; j < c; ++j) gb[j] += db[j];
                         }
                     }
                     if (!input.requires_grad()) return;
                     auto gx = input.mutable_grad();
                     if (!batch_stats) {
                         for (std::size_t r = 0; r < n; ++r) {
                             for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gy[r * c + j] * gam[j] * inv_std[j];
                         }
                         return;
                     }
                     std::vector<double> sum_dh(c, 0.0), sum_dh_h(c, 0.0);
                     for (std::size_t r = 0; r < n; ++r) {
                         for (std::size_t j = 0; j < c; ++j) {
                             const double dh = gy[r * c + j] * gam[j];
                             sum_dh[j] += dh;
                             sum_dh_h[j] += dh * xhat[r * c + j];
                         }
                     }
                     const double inv_n = 1.0 / static_cast<double>(n);
                     for (std::size_t r = 0; r < n; ++r) {
                         for (std::size_t j = 0; j < c; ++j) {
                             const double dh = gy[r * c + j] * gam[j];
                             gx[r * c + j] +=
                                 inv_std[j] * (dh - inv_n * sum_dh[j] - xhat[r * c + j] * inv_n * sum_dh_h[j]);
                         }
                     }
                 });
    }
    return out;
}

} // namespace pnemb
