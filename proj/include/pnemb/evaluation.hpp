#pragma once

// Oriented 3-D boxes, bird's-eye-view and volumetric IoU, greedy-matched
// average precision and point-wise segmentation metrics.
//
// Boxes use the camera frame: x right, y down, z forward. Yaw rotates about
// +y; the length axis of a box with yaw t points along (cos t, 0, -sin t).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pnemb/errors.hpp"

namespace pnemb {

inline double normalize_yaw(double yaw) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double y = std::fmod(yaw, two_pi);
    if (y <= -std::numbers::pi) y += two_pi;
    if (y > std::numbers::pi) y -= two_pi;
    return y;
}

struct OrientedBox3D {
    std::array<double, 3> center{};
    std::array<double, 3> size{1, 1, 1};  // length, width, height
    double yaw = 0.0;

    static OrientedBox3D make(std::array<double, 3> center, std::array<double, 3> size, double yaw) {
        OrientedBox3D b{center, size, normalize_yaw(yaw)};
        b.validate();
        return b;
    }

    void validate() const {
        for (double s : size) {
            if (!(s > 0.0) || !std::isfinite(s)) throw InvalidInput("OrientedBox3D: size components must be positive");
        }
        for (double c : center) {
            if (!std::isfinite(c)) throw InvalidInput("OrientedBox3D: non-finite center");
        }
        if (!std::isfinite(yaw)) throw InvalidInput("OrientedBox3D: non-finite yaw");
    }

    double volume() const { return size[0] * size[1] * size[2]; }
    double bev_area() const { return size[0] * size[1]; }
};

/// Rotates a camera-frame point about +y by `angle` (adds `angle` to its azimuth).
inline std::array<double, 3> rotate_about_y(const std::array<double, 3>& p, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    return {c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]};
}

inline OrientedBox3D rotate_box_about_y(const OrientedBox3D& b, double angle) {
    return OrientedBox3D{rotate_about_y(b.center, angle), b.size, normalize_yaw(b.yaw + angle)};
}

/// Inclusive containment test with an absolute tolerance on every face.
inline bool point_in_box(const OrientedBox3D& b, const std::array<double, 3>& p, double tol = 1e-6) {
    const double dx = p[0] - b.center[0], dy = p[1] - b.center[1], dz = p[2] - b.center[2];
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double along = c * dx - s * dz;
    const double across = s * dx + c * dz;
    return std::abs(along) <= 0.5 * b.size[0] + tol && std::abs(across) <= 0.5 * b.size[1] + tol &&
           std::abs(dy) <= 0.5 * b.size[2] + tol;
}

namespace geometry {

struct Point2 {
    double x, y;
};

using Polygon = std::vector<Point2>;

inline double cross(const Point2& o, const Point2& a, const Point2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline double signed_area(const Polygon& p) {
    double a = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto& u = p[i];
        const auto& v = p[(i + 1) % p.size()];
        a += u.x * v.y - v.x * u.y;
    }
    return 0.5 * a;
}

/// Ground-plane footprint (x, z), counter-clockwise.
inline Polygon bev_corners(const OrientedBox3D& b) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double hl = 0.5 * b.size[0], hw = 0.5 * b.size[1];
    Polygon p;
    for (auto [dl, dw] : {std::pair{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}) {
        p.push_back({b.center[0] + c * dl + s * dw, b.center[2] - s * dl + c * dw});
    }
    if (signed_area(p) < 0) std::reverse(p.begin(), p.end());
    return p;
}

/// Sutherland-Hodgman: clips `subject` by each edge of the convex CCW `clip`.
inline Polygon clip_convex(Polygon subject, const Polygon& clip) {
    for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
        const Point2 a = clip[e];
        const Point2 b = clip[(e + 1) % clip.size()];
        Polygon input = std::move(subject);
        subject.clear();
        for (std::size_t i = 0; i < input.size(); ++i) {
            const Point2 p = input[i];
            const Point2 q = input[(i + 1) % input.size()];
            const double sp = cross(a, b, p);
            const double sq = cross(a, b, q);
            if (sp >= 0) subject.push_back(p);
            if ((sp >= 0) != (sq >= 0)) {
                const double t = sp / (sp - sq);
                subject.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
            }
        }
    }
    return subject;
}

inline constexpr double kAreaEpsilon = 1e-12;

inline double intersection_area(const Polygon& a, const Polygon& b) {
    const Polygon inter = clip_convex(a, b);
    if (inter.size() < 3) return 0.0;
    const double area = std::abs(signed_area(inter));
    return area < kAreaEpsilon ? 0.0 : area;
}

} // namespace geometry

inline double bev_intersection(const OrientedBox3D& a, const OrientedBox3D& b) {
    return geometry::intersection_area(geometry::bev_corners(a), geometry::bev_corners(b));
}

inline double iou_bev(const OrientedBox3D& a, const OrientedBox3D& b) {
    const double inter = bev_intersection(a, b);
    if (inter <= 0.0) return 0.0;
    return std::clamp(inter / (a.bev_area() + b.bev_area() - inter), 0.0, 1.0);
}

inline double iou_3d(const OrientedBox3D& a, const OrientedBox3D& b) {
    const double top = std::max(a.center[1] - 0.5 * a.size[2], b.center[1] - 0.5 * b.size[2]);
    const double bottom = std::min(a.center[1] + 0.5 * a.size[2], b.center[1] + 0.5 * b.size[2]);
    const double overlap_h = bottom - top;
    if (overlap_h <= 0.0) return 0.0;
    const double inter = bev_intersection(a, b) * overlap_h;
    if (inter <= 0.0) return 0.0;
    return std::clamp(inter / (a.volume() + b.volume() - inter), 0.0, 1.0);
}

enum class IouKind { Bev, Box3d };

inline double box_iou(const OrientedBox3D& a, const OrientedBox3D& b, IouKind kind) {
    return kind == IouKind::Bev ? iou_bev(a, b) : iou_3d(a, b);
}

enum class ObjectClass { Car = 0, Pedestrian = 1, Cyclist = 2 };
inline constexpr std::size_t kClassCount = 3;
inline constexpr std::array<const char*, kClassCount> kClassNames{"Car", "Pedestrian", "Cyclist"};

/// IoU needed for a true positive: 0.7 for cars, 0.5 otherwise.
inline double iou_threshold(ObjectClass c) { return c == ObjectClass::Car ? 0.7 : 0.5; }

inline std::optional<ObjectClass> parse_class(const std::string& name) {
    for (std::size_t i = 0; i < kClassCount; ++i) {
        if (name == kClassNames[i]) return static_cast<ObjectClass>(i);
    }
    return std::nullopt;
}

enum class Difficulty { Easy = 0, Moderate = 1, Hard = 2, Unknown = 3 };
inline constexpr std::array<const char*, 3> kDifficultyNames{"Easy", "Moderate", "Hard"};

struct ScoredBox {
    OrientedBox3D box;
    double score = 0.0;
};

struct GroundTruthBox {
    OrientedBox3D box;
    Difficulty difficulty = Difficulty::Easy;
};

enum class MatchOutcome { TruePositive, FalsePositive, Ignored };

/// Greedy matching for one frame. Detections are taken in descending score
/// (ties by position); each claims the unmatched ground truth of highest IoU
/// (ties by position) if that IoU reaches the threshold. Ground truths harder
/// than `tier` are "don't care": a detection claiming one is Ignored.
inline std::vector<MatchOutcome> match_frame(const std::vector<ScoredBox>& dets,
                                             const std::vector<GroundTruthBox>& gts, double threshold,
                                             Difficulty tier, IouKind kind) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<bool> taken(gts.size(), false);
    std::vector<MatchOutcome> out(dets.size(), MatchOutcome::FalsePositive);
    for (std::size_t d : order) {
        double best = -1.0;
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            const double iou = box_iou(dets[d].box, gts[g].box, kind);
            if (iou > best) {
                best = iou;
                best_g = g;
            }
        }
        if (best_g == gts.size() || best < threshold) continue;
        taken[best_g] = true;
        out[d] = static_cast<int>(gts[best_g].difficulty) > static_cast<int>(tier) ? MatchOutcome::Ignored
                                                                                     : MatchOutcome::TruePositive;
    }
    return out;
}

enum class ApInterpolation { Eleven = 11, Forty = 40 };

struct PrecisionRecallCurve {
    std::vector<double> thresholds;  // distinct scores, descending
    std::vector<double> precision;
    std::vector<double> recall;
    double ap = 0.0;
};

/// Interpolated AP: mean over recall levels r of the best precision achieved
/// at recall >= r (0 if never reached). Eleven uses r in {0, 0.1, ..., 1};
/// Forty uses r in {1/40, ..., 1}.
inline double interpolated_ap(const std::vector<double>& precision, const std::vector<double>& recall,
                              ApInterpolation interp) {
    const int n = static_cast<int>(interp);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double r = interp == ApInterpolation::Eleven ? i / 10.0 : (i + 1) / 40.0;
        double best = 0.0;
        for (std::size_t k = 0; k < recall.size(); ++k) {
            if (recall[k] >= r) best = std::max(best, precision[k]);
        }
        total += best;
    }
    return total / n;
}

/// Precision/recall over score thresholds after per-frame greedy matching.
/// Returns nullopt when no ground truth falls inside the difficulty tier.
inline std::optional<PrecisionRecallCurve> average_precision(
    const std::vector<std::vector<ScoredBox>>& detections,
    const std::vector<std::vector<GroundTruthBox>>& ground_truth, double iou_threshold_value, Difficulty tier,
    IouKind kind = IouKind::Box3d, ApInterpolation interp = ApInterpolation::Eleven) {
    if (detections.size() != ground_truth.size()) {
        throw InvalidInput("average_precision: " + std::to_string(detections.size()) + " detection frames vs " +
                           std::to_string(ground_truth.size()) + " ground-truth frames");
    }
    std::size_t n_care = 0;
    for (const auto& frame : ground_truth) {
        for (const auto& g : frame) {
            if (static_cast<int>(g.difficulty) <= static_cast<int>(tier)) ++n_care;
        }
    }
    if (n_care == 0) return std::nullopt;

    std::vector<std::pair<double, bool>> scored;  // (score, is_tp)
    for (std::size_t f = 0; f < detections.size(); ++f) {
        for (const auto& d : detections[f]) {
            if (!std::isfinite(d.score)) throw InvalidInput("average_precision: non-finite detection score");
        }
        auto outcome = match_frame(detections[f], ground_truth[f], iou_threshold_value, tier, kind);
        for (std::size_t i = 0; i < outcome.size(); ++i) {
            if (outcome[i] != MatchOutcome::Ignored) {
                scored.emplace_back(detections[f][i].score, outcome[i] == MatchOutcome::TruePositive);
            }
        }
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    PrecisionRecallCurve curve;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scored.size(); ++i) {
        scored[i].second ? ++tp : ++fp;
        if (i + 1 < scored.size() && scored[i + 1].first == scored[i].first) continue;
        curve.thresholds.push_back(scored[i].first);
        curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        curve.recall.push_back(static_cast<double>(tp) / static_cast<double>(n_care));
    }
    curve.ap = interpolated_ap(curve.precision, curve.recall, interp);
    return curve;
}

struct SegmentationMetrics {
    double accuracy = 0.0;
    double foreground_iou = 0.0;
};

/// Point accuracy and foreground IoU; two empty foregrounds count as IoU 1.
inline SegmentationMetrics segmentation_metrics(const std::vector<int>& pred, const std::vector<int>& gt) {
    if (pred.size() != gt.size() || pred.empty()) {
        throw InvalidInput("segmentation_metrics: mask lengths " + std::to_string(pred.size()) + " and " +
                           std::to_string(gt.size()));
    }
    std::size_t correct = 0, inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        correct += p == g;
        inter += p && g;
        uni += p || g;
    }
    return {static_cast<double>(correct) / static_cast<double>(pred.size()),
            uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni)};
}

/// One row of a class x difficulty AP table; entries are AP in [0, 1].
struct ApTableRow {
    std::string method;
    std::array<std::optional<double>, 9> ap{};  // class-major: Car E/M/H, Pedestrian E/M/H, Cyclist E/M/H
};

/// Fixed-width text table with the Easy/Moderate/Hard x class layout; AP is
/// printed as a percentage with two decimals, absent entries as "-".
inline std::string format_ap_table(const std::string& title, const std::vector<ApTableRow>& rows) {
    std::ostringstream os;
    char buf[64];
    os << title << '\n';
    os << "Method          |";
    for (const char* c : {"Cars", "Pedestrians", "Cyclists"}) {
        std::snprintf(buf, sizeof buf, " %-25s|", c);
        os << buf;
    }
    os << '\n' << "                |";
    for (int c = 0; c < 3; ++c) os << " Easy    Moderate  Hard   |";
    os << '\n';
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof buf, "%-16s|", row.method.c_str());
        os << buf;
        for (int c = 0; c < 3; ++c) {
            for (int d = 0; d < 3; ++d) {
                const auto& v = row.ap[c * 3 + d];
                const char* lead = d == 0 ? " " : "";
                const int width = d == 0 ? 8 : d == 1 ? 10 : 7;
                if (v) {
                    std::snprintf(buf, sizeof buf, "%s%-*.2f", lead, width, 100.0 * *v);
                } else {
                    std::snprintf(buf, sizeof buf, "%s%-*s", lead, width, "-");
                }
                os << buf;
            }
            os << '|';
        }
        os << '\n';
    }
    return os.str();
}

} // namespace pnemb
