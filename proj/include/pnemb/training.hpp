#pragma once

// Adam, the stepped learning-rate schedule, the mini-batch training loop
// with resumable state, and dataset-level evaluation of a detector.
//
// A batch is one graph: the samples' forwards run as members of a BatchGroup
// so normalisation statistics pool every point of the batch, and the loss is
// the mean of the samples' losses. Parameter gradients are zeroed explicitly
// before each batch; nothing is zeroed implicitly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pnemb/checkpoint.hpp"
#include "pnemb/errors.hpp"
#include "pnemb/evaluation.hpp"
#include "pnemb/kitti_io.hpp"
#include "pnemb/networks.hpp"
#include "pnemb/random.hpp"

namespace pnemb {

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct TrainConfig {
    std::size_t batch_size = 32;
    double lr0 = 0.001;
    double decay_factor = 0.5;
    std::size_t decay_every_steps = 0;  // 0: steps in 10 epochs of the actual dataset
    std::size_t epochs = 200;
    std::uint64_t seed = 0;
    LossWeights weights{};
    // Optional early stop, checked on the training set every `eval_every` epochs.
    std::size_t eval_every = 0;
    double stop_seg_accuracy = 1.0;
    double stop_mean_iou = 1.0;

    void validate() const {
        if (!(lr0 > 0)) throw InvalidInput("lr0 must be positive");
        if (!(decay_factor > 0 && decay_factor <= 1)) throw InvalidInput("decay_factor must lie in (0, 1]");
        if (batch_size == 0) throw InvalidInput("batch_size must be at least 1");
        if (epochs == 0) throw InvalidInput("epochs must be at least 1");
    }
};

/// lr0 * decay_factor ^ floor(step / decay_every).
inline double lr_schedule(std::uint64_t step, double lr0, double decay_factor, std::uint64_t decay_every) {
    if (decay_every == 0) return lr0;
    return lr0 * std::pow(decay_factor, static_cast<double>(step / decay_every));
}

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update of every parameter from its gradient.
/// Parameters without a gradient buffer are treated as having zero gradient.
inline void adam_step(const std::vector<Tensor>& params, AdamState& s, double lr) {
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(p.numel(), 0.0);
            s.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (s.m.size() != params.size()) {
        throw InvalidInput("adam_step: state holds " + std::to_string(s.m.size()) + " moment arrays for " +
                           std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (s.m[i].size() != params[i].numel() || s.v[i].size() != params[i].numel()) {
            throw InvalidInput("adam_step: moment size mismatch for parameter " + std::to_string(i) + " of shape " +
                               shape_str(params[i].shape()));
        }
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto x = params[i].mutable_data();
        const bool has = params[i].has_grad();
        auto g = params[i].grad();
        auto& m = s.m[i];
        auto& v = s.v[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double gj = has ? g[j] : 0.0;
            m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
            v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
            x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + s.eps);
        }
    }
}

// ------------------------------------------------------------- evaluation

struct DatasetEvaluation {
    std::vector<DetectionOutput> detections;
    double seg_accuracy = 0.0;      // mean over samples
    double seg_foreground_iou = 0.0;
    double mean_iou_3d = 0.0;
    double mean_iou_bev = 0.0;
};

inline DatasetEvaluation evaluate_detector(FrustumDetector& det, const std::vector<FrustumSample>& data) {
    DatasetEvaluation e;
    for (const auto& s : data) {
        auto d = det.detect(s);
        const auto m = segmentation_metrics(d.predicted_mask, s.seg_mask);
        e.seg_accuracy += m.accuracy;
        e.seg_foreground_iou += m.foreground_iou;
        e.mean_iou_3d += iou_3d(d.frustum_box, s.gt_box);
        e.mean_iou_bev += iou_bev(d.frustum_box, s.gt_box);
        e.detections.push_back(std::move(d));
    }
    const double n = static_cast<double>(std::max<std::size_t>(data.size(), 1));
    e.seg_accuracy /= n;
    e.seg_foreground_iou /= n;
    e.mean_iou_3d /= n;
    e.mean_iou_bev /= n;
    return e;
}

/// Class x difficulty AP row. Each sample is grouped into its frame; a
/// detection of class c is compared against the ground truths of class c.
inline ApTableRow ap_row(const std::string& method, const std::vector<FrustumSample>& data,
                         const std::vector<DetectionOutput>& dets, IouKind kind, ApInterpolation interp) {
    if (dets.size() != data.size()) throw InvalidInput("ap_row: one detection per sample expected");
    std::vector<std::string> frames;
    for (const auto& s : data) {
        if (std::find(frames.begin(), frames.end(), s.frame) == frames.end()) frames.push_back(s.frame);
    }
    auto frame_of = [&](const std::string& f) {
        return static_cast<std::size_t>(std::find(frames.begin(), frames.end(), f) - frames.begin());
    };
    ApTableRow row{method, {}};
    for (std::size_t c = 0; c < kClassCount; ++c) {
        std::vector<std::vector<ScoredBox>> scored(frames.size());
        std::vector<std::vector<GroundTruthBox>> truth(frames.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (static_cast<std::size_t>(data[i].cls) != c) continue;
            const std::size_t f = frame_of(data[i].frame);
            truth[f].push_back({data[i].camera_box(), data[i].difficulty});
            scored[f].push_back({dets[i].box, dets[i].confidence});
        }
        for (std::size_t d = 0; d < 3; ++d) {
            auto curve = average_precision(scored, truth, iou_threshold(static_cast<ObjectClass>(c)),
                                           static_cast<Difficulty>(d), kind, interp);
            if (curve) row.ap[c * 3 + d] = curve->ap;
        }
    }
    return row;
}

// ---------------------------------------------------------------- trainer

struct EpochMetrics {
    std::size_t epoch = 0;
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double seg_loss = 0.0;
    double box_loss = 0.0;
    double seg_accuracy = 0.0;
    std::optional<double> eval_seg_accuracy;
    std::optional<double> eval_mean_iou;

    std::string json() const {
        char buf[512];
        int n = std::snprintf(buf, sizeof buf,
                              "{\"epoch\":%zu,\"step\":%llu,\"lr\":%.17g,\"loss\":%.17g,\"seg_loss\":%.17g,"
                              "\"box_loss\":%.17g,\"seg_accuracy\":%.17g",
                              epoch, static_cast<unsigned long long>(step), lr, loss, seg_loss, box_loss, seg_accuracy);
        std::string s(buf, static_cast<std::size_t>(n));
        if (eval_seg_accuracy) {
            std::snprintf(buf, sizeof buf, ",\"eval_seg_accuracy\":%.17g,\"eval_mean_iou_3d\":%.17g", *eval_seg_accuracy,
                          *eval_mean_iou);
            s += buf;
        }
        return s + "}";
    }
};

class Trainer {
public:
    using Sink = std::function<void(const EpochMetrics&)>;

    Trainer(FrustumDetector& det, const std::vector<FrustumSample>& data, TrainConfig cfg)
        : det_(det), data_(data), cfg_(cfg), params_(det.params().trainable()) {
        cfg_.validate();
        if (data.empty()) throw InvalidInput("training set is empty");
        for (const auto& s : data) {
            if (s.size() != det.config().n_points) {
                throw InvalidInput("sample " + s.frame + " has " + std::to_string(s.size()) + " points, network expects " +
                                   std::to_string(det.config().n_points));
            }
        }
    }

    std::size_t steps_per_epoch() const { return (data_.size() + cfg_.batch_size - 1) / cfg_.batch_size; }
    std::uint64_t decay_every() const {
        return cfg_.decay_every_steps ? cfg_.decay_every_steps : 10 * steps_per_epoch();
    }
    double current_lr() const { return lr_schedule(adam_.step, cfg_.lr0, cfg_.decay_factor, decay_every()); }

    std::uint64_t step() const { return adam_.step; }
    std::size_t epoch() const { return epoch_; }
    bool finished() const { return stopped_ || epoch_ >= cfg_.epochs; }
    const AdamState& adam() const { return adam_; }

    /// Runs up to `n` optimizer steps (fewer if training finishes).
    void run_steps(std::uint64_t n, const Sink& sink = {}) {
        for (std::uint64_t i = 0; i < n && !finished(); ++i) one_step(sink);
    }

    void run(const Sink& sink = {}) {
        while (!finished()) one_step(sink);
    }

    /// Parameters, optimizer moments and loop position.
    void save(Checkpoint& ck) const {
        det_.params().write_to(ck);
        const auto& entries = det_.params().entries();
        std::size_t t = 0;
        for (const auto& e : entries) {
            if (!e.trainable) continue;
            if (!adam_.m.empty()) {
                ck.tensors.push_back({"adam/m/" + e.name, Tensor(e.tensor.shape(), adam_.m[t]), false});
                ck.tensors.push_back({"adam/v/" + e.name, Tensor(e.tensor.shape(), adam_.v[t]), false});
            }
            ++t;
        }
        ck.tensors.push_back({"train/state",
                              Tensor({5}, {static_cast<double>(adam_.step), static_cast<double>(epoch_),
                                           static_cast<double>(pos_), static_cast<double>(stopped_),
                                           static_cast<double>(acc_count_)}),
                              false});
        ck.tensors.push_back({"train/accum", Tensor({4}, {acc_loss_, acc_seg_, acc_box_, acc_correct_}), false});
    }

    void load(const Checkpoint& ck) {
        det_.params().read_from(ck);
        const auto* state = ck.find("train/state");
        const auto* accum = ck.find("train/accum");
        if (!state || !accum || state->tensor.numel() != 5 || accum->tensor.numel() != 4) {
            throw CheckpointMismatch("checkpoint has no training state");
        }
        adam_ = AdamState{};
        adam_.step = static_cast<std::uint64_t>(state->tensor[0]);
        epoch_ = static_cast<std::size_t>(state->tensor[1]);
        pos_ = static_cast<std::size_t>(state->tensor[2]);
        stopped_ = state->tensor[3] != 0.0;
        acc_count_ = static_cast<std::size_t>(state->tensor[4]);
        acc_loss_ = accum->tensor[0];
        acc_seg_ = accum->tensor[1];
        acc_box_ = accum->tensor[2];
        acc_correct_ = accum->tensor[3];
        if (adam_.step > 0) {
            for (const auto& e : det_.params().entries()) {
                if (!e.trainable) continue;
                const auto* m = ck.find("adam/m/" + e.name);
                const auto* v = ck.find("adam/v/" + e.name);
                if (!m || !v || m->tensor.numel() != e.tensor.numel() || v->tensor.numel() != e.tensor.numel()) {
                    throw CheckpointMismatch("optimizer state missing or mis-shaped for " + e.name);
                }
                adam_.m.push_back(m->tensor.values());
                adam_.v.push_back(v->tensor.values());
            }
        }
        order_.clear();
    }

private:
    const std::vector<std::size_t>& epoch_order() {
        if (order_.empty()) {
            order_.resize(data_.size());
            for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
            Rng rng(derive_key(cfg_.seed, epoch_));
            rng.shuffle(order_);
        }
        return order_;
    }

    void one_step(const Sink& sink) {
        const auto& order = epoch_order();
        const std::size_t end = std::min(pos_ + cfg_.batch_size, order.size());
        const double inv_b = 1.0 / static_cast<double>(end - pos_);
        const double lr = current_lr();
        for (auto& p : params_) p.zero_grad();
        Graph g;
        std::vector<LossTerms> terms(end - pos_);
        BatchGroup(g).run(terms.size(), [&](ForwardContext& ctx) {
            terms[ctx.member] = det_.loss(ctx, data_[order[pos_ + ctx.member]], cfg_.weights);
        });
        Tensor total;
        for (std::size_t i = 0; i < terms.size(); ++i) {
            const auto& t = terms[i];
            check_finite(t, lr, data_[order[pos_ + i]]);
            Tensor part = scale(g, t.total, inv_b);
            total = i == 0 ? part : add(g, total, part);
            const double box = t.center + t.stage1 + t.heading_cls + t.heading_res + t.size_cls + t.size_res;
            acc_loss_ += t.total.item();
            acc_seg_ += t.seg;
            acc_box_ += box;
            acc_correct_ += t.seg_accuracy;
            ++acc_count_;
        }
        g.backward(total);
        adam_step(params_, adam_, lr);
        pos_ = end;
        if (pos_ == order.size()) finish_epoch(lr, sink);
    }

    void check_finite(const LossTerms& t, double lr, const FrustumSample& s) const {
        const std::pair<const char*, double> terms[] = {
            {"seg", t.seg},       {"center", t.center},     {"stage1_center", t.stage1}, {"heading_cls", t.heading_cls},
            {"heading_res", t.heading_res}, {"size_cls", t.size_cls}, {"size_res", t.size_res},
            {"orthogonality", t.orthogonality}, {"total", t.total.item()}};
        for (const auto& [name, v] : terms) {
            if (!std::isfinite(v)) {
                char buf[256];
                std::snprintf(buf, sizeof buf, "non-finite loss at step %llu (lr %.6g, sample %s): term %s = %g",
                              static_cast<unsigned long long>(adam_.step), lr, s.frame.c_str(), name, v);
                throw NumericalError(buf);
            }
        }
    }

    void finish_epoch(double lr, const Sink& sink) {
        EpochMetrics m;
        m.epoch = epoch_ + 1;
        m.step = adam_.step;
        m.lr = lr;
        const double n = static_cast<double>(acc_count_);
        m.loss = acc_loss_ / n;
        m.seg_loss = acc_seg_ / n;
        m.box_loss = acc_box_ / n;
        m.seg_accuracy = acc_correct_ / n;
        acc_loss_ = acc_seg_ = acc_box_ = acc_correct_ = 0.0;
        acc_count_ = 0;
        ++epoch_;
        pos_ = 0;
        order_.clear();
        if (cfg_.eval_every > 0 && epoch_ % cfg_.eval_every == 0) {
            auto e = evaluate_detector(det_, data_);
            m.eval_seg_accuracy = e.seg_accuracy;
            m.eval_mean_iou = e.mean_iou_3d;
            if (e.seg_accuracy >= cfg_.stop_seg_accuracy && e.mean_iou_3d >= cfg_.stop_mean_iou) stopped_ = true;
        }
        if (sink) sink(m);
    }

    FrustumDetector& det_;
    const std::vector<FrustumSample>& data_;
    TrainConfig cfg_;
    std::vector<Tensor> params_;
    AdamState adam_;
    std::size_t epoch_ = 0;
    std::size_t pos_ = 0;
    bool stopped_ = false;
    std::vector<std::size_t> order_;
    double acc_loss_ = 0, acc_seg_ = 0, acc_box_ = 0, acc_correct_ = 0;
    std::size_t acc_count_ = 0;
};

} // namespace pnemb
