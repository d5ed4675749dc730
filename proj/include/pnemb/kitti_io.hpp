#pragma once

// KITTI-format scene ingestion, frustum extraction and a seeded synthetic
// frustum generator.
//
// All geometry after loading is in the rectified camera frame (x right,
// y down, z forward). A frustum is rotated about +y by minus the azimuth of
// its 2D box centre ray, so that ray points along +z.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pnemb/checkpoint.hpp"
#include "pnemb/errors.hpp"
#include "pnemb/evaluation.hpp"
#include "pnemb/random.hpp"
#include "pnemb/tensor.hpp"

namespace pnemb {

using Vec3 = std::array<double, 3>;

// ---------------------------------------------------------------- velodyne

/// Little-endian float32 (x, y, z, intensity) records widened to [M, 4].
inline Tensor decode_velodyne(std::string_view bytes, const std::string& what = "velodyne") {
    if (bytes.size() % 16 != 0) {
        throw FormatError(what + ": size " + std::to_string(bytes.size()) +
                          " is not a multiple of 16; trailing record starts at byte offset " +
                          std::to_string(bytes.size() - bytes.size() % 16));
    }
    if (bytes.empty()) throw FormatError(what + ": no points");
    const std::size_t m = bytes.size() / 16;
    bin::Reader r(bytes, what);
    std::vector<double> v(m * 4);
    for (auto& x : v) x = static_cast<double>(r.f32());
    return Tensor({m, 4}, std::move(v));
}

/// Narrows to float32; exact for values that came from decode_velodyne.
inline std::string encode_velodyne(const Tensor& points) {
    if (points.rank() != 2 || points.dim(1) != 4) {
        throw DimensionError("velodyne points must be [M, 4], got " + shape_str(points.shape()));
    }
    std::string out;
    out.reserve(points.numel() * 4);
    for (double x : points.data()) bin::put_f32(out, static_cast<float>(x));
    return out;
}

inline Tensor read_velodyne(const std::string& path) { return decode_velodyne(bin::read_file(path), path); }

inline void write_velodyne(const std::string& path, const Tensor& points) {
    bin::write_file(path, encode_velodyne(points));
}

// ------------------------------------------------------------- text parsing

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream in(line);
    std::vector<std::string> out;
    for (std::string tok; in >> tok;) out.push_back(tok);
    return out;
}

inline double parse_double(const std::string& tok, const std::string& where) {
    double v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size() || !std::isfinite(v)) {
        throw FormatError(where + ": cannot parse number '" + tok + "'");
    }
    return v;
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

} // namespace detail

// -------------------------------------------------------------- calibration

struct Calibration {
    std::array<double, 12> p2{};              // 3x4 camera projection, row-major
    std::array<double, 9> r0_rect{1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::array<double, 12> velo_to_cam{};     // 3x4 rigid transform (bottom row 0 0 0 1 implied)

    Vec3 velo_to_rect(const Vec3& p) const {
        Vec3 cam{};
        for (int r = 0; r < 3; ++r) {
            cam[r] = velo_to_cam[r * 4] * p[0] + velo_to_cam[r * 4 + 1] * p[1] + velo_to_cam[r * 4 + 2] * p[2] +
                     velo_to_cam[r * 4 + 3];
        }
        Vec3 out{};
        for (int r = 0; r < 3; ++r) out[r] = r0_rect[r * 3] * cam[0] + r0_rect[r * 3 + 1] * cam[1] + r0_rect[r * 3 + 2] * cam[2];
        return out;
    }

    /// Pixel coordinates of a rectified-frame point; nullopt behind the camera.
    std::optional<std::array<double, 2>> project(const Vec3& p) const {
        const double w = p2[8] * p[0] + p2[9] * p[1] + p2[10] * p[2] + p2[11];
        if (p[2] <= 0.0 || w <= 0.0) return std::nullopt;
        return std::array<double, 2>{(p2[0] * p[0] + p2[1] * p[1] + p2[2] * p[2] + p2[3]) / w,
                                     (p2[4] * p[0] + p2[5] * p[1] + p2[6] * p[2] + p2[7]) / w};
    }

    /// Rectified-frame point on the ray through pixel (u, v) at the given depth.
    Vec3 unproject(double u, double v, double depth) const {
        const double fu = p2[0], fv = p2[5], cu = p2[2], cv = p2[6];
        const double bx = p2[3] / -fu, by = p2[7] / -fv;
        return {(u - cu) * depth / fu + bx, (v - cv) * depth / fv + by, depth};
    }
};

inline Calibration parse_calibration(const std::string& text, const std::string& what = "calib") {
    Calibration cal;
    bool have_p2 = false, have_r0 = false, have_tr = false;
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto toks = detail::split_ws(line);
        if (toks.empty()) continue;
        const std::string where = what + ":" + std::to_string(line_no);
        std::string key = toks[0];
        if (key.back() != ':') throw FormatError(where + ": expected 'KEY: values'");
        key.pop_back();
        auto fill = [&](auto& arr) {
            if (toks.size() != arr.size() + 1) {
                throw FormatError(where + ": " + key + " needs " + std::to_string(arr.size()) + " values, got " +
                                  std::to_string(toks.size() - 1));
            }
            for (std::size_t i = 0; i < arr.size(); ++i) arr[i] = detail::parse_double(toks[i + 1], where);
        };
        if (key == "P2") {
            fill(cal.p2);
            have_p2 = true;
        } else if (key == "R0_rect") {
            fill(cal.r0_rect);
            have_r0 = true;
        } else if (key == "Tr_velo_to_cam") {
            fill(cal.velo_to_cam);
            have_tr = true;
        } else {
            for (std::size_t i = 1; i < toks.size(); ++i) detail::parse_double(toks[i], where);
        }
    }
    if (!have_p2 || !have_r0 || !have_tr) {
        throw FormatError(what + ": missing " + std::string(!have_p2 ? "P2" : !have_r0 ? "R0_rect" : "Tr_velo_to_cam"));
    }
    if (cal.p2[0] == 0.0 || cal.p2[5] == 0.0) throw FormatError(what + ": P2 has zero focal length");
    return cal;
}

inline Calibration read_calibration(const std::string& path) {
    return parse_calibration(bin::read_file(path), path);
}

// ------------------------------------------------------------------ labels

struct Box2D {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double height() const { return y2 - y1; }
    double center_u() const { return 0.5 * (x1 + x2); }
    double center_v() const { return 0.5 * (y1 + y2); }
};

struct Label {
    std::string type;
    double truncation = 0.0;
    int occlusion = 0;
    double alpha = 0.0;
    Box2D box2d;
    OrientedBox3D box;  // geometric centre, size (l, w, h)
    std::optional<double> score;
};

struct DifficultyRules {
    std::array<double, 3> min_height{40, 25, 25};
    std::array<int, 3> max_occlusion{0, 1, 2};
    std::array<double, 3> max_truncation{0.15, 0.30, 0.50};
};

inline Difficulty classify_difficulty(const Label& l, const DifficultyRules& rules = {}) {
    for (int d = 0; d < 3; ++d) {
        if (l.box2d.height() >= rules.min_height[d] && l.occlusion <= rules.max_occlusion[d] &&
            l.truncation <= rules.max_truncation[d]) {
            return static_cast<Difficulty>(d);
        }
    }
    return Difficulty::Unknown;
}

/// One KITTI label line: type trunc occ alpha x1 y1 x2 y2 h w l x y z ry [score].
/// The file stores the bottom-face centre; the box keeps the geometric centre.
inline Label parse_label_line(const std::string& line, const std::string& where) {
    auto t = detail::split_ws(line);
    if (t.size() != 15 && t.size() != 16) {
        throw FormatError(where + ": expected 15 or 16 fields, got " + std::to_string(t.size()));
    }
    auto num = [&](std::size_t i) { return detail::parse_double(t[i], where); };
    Label l;
    l.type = t[0];
    l.truncation = num(1);
    const double occ = num(2);
    if (occ != std::floor(occ)) throw FormatError(where + ": occlusion must be an integer");
    l.occlusion = static_cast<int>(occ);
    l.alpha = num(3);
    l.box2d = {num(4), num(5), num(6), num(7)};
    const double h = num(8), w = num(9), len = num(10);
    const Vec3 bottom{num(11), num(12), num(13)};
    const double ry = num(14);
    if (t.size() == 16) l.score = num(15);
    if (l.type != "DontCare") {
        if (!(h > 0 && w > 0 && len > 0)) throw FormatError(where + ": non-positive box dimensions");
        l.box = OrientedBox3D::make({bottom[0], bottom[1] - 0.5 * h, bottom[2]}, {len, w, h}, ry);
    }
    return l;
}

inline std::string format_label_line(const Label& l) {
    char buf[512];
    const auto& b = l.box;
    int n = std::snprintf(buf, sizeof buf, "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f",
                          l.type.c_str(), l.truncation, l.occlusion, l.alpha, l.box2d.x1, l.box2d.y1, l.box2d.x2,
                          l.box2d.y2, b.size[2], b.size[1], b.size[0], b.center[0], b.center[1] + 0.5 * b.size[2],
                          b.center[2], b.yaw);
    std::string s(buf, static_cast<std::size_t>(n));
    if (l.score) {
        std::snprintf(buf, sizeof buf, " %.4f", *l.score);
        s += buf;
    }
    return s;
}

inline std::vector<Label> read_labels(const std::string& path) {
    std::vector<Label> out;
    const auto lines = detail::read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (detail::split_ws(lines[i]).empty()) continue;
        out.push_back(parse_label_line(lines[i], path + ":" + std::to_string(i + 1)));
    }
    return out;
}

/// One 2D detection per line: frame class x1 y1 x2 y2 score.
struct Detection2D {
    std::string frame;
    ObjectClass cls = ObjectClass::Car;
    Box2D box;
    double score = 0.0;
};

inline std::vector<Detection2D> read_detections(const std::string& path) {
    std::vector<Detection2D> out;
    const auto lines = detail::read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        auto t = detail::split_ws(lines[i]);
        if (t.empty() || t[0][0] == '#') continue;
        const std::string where = path + ":" + std::to_string(i + 1);
        if (t.size() != 7) throw FormatError(where + ": expected 7 fields, got " + std::to_string(t.size()));
        auto cls = parse_class(t[1]);
        if (!cls) throw FormatError(where + ": unknown class '" + t[1] + "'");
        out.push_back({t[0], *cls,
                       {detail::parse_double(t[2], where), detail::parse_double(t[3], where),
                        detail::parse_double(t[4], where), detail::parse_double(t[5], where)},
                       detail::parse_double(t[6], where)});
    }
    return out;
}

// ------------------------------------------------------------------- scenes

struct Scene {
    std::string frame;
    Tensor points;  // [M, 4] sensor frame
    Calibration calib;
    std::vector<Label> labels;
    int image_width = 1242;
    int image_height = 375;
};

inline Scene load_scene(const std::string& velodyne_path, const std::string& calib_path,
                        const std::string& label_path = {}) {
    Scene s;
    s.frame = std::filesystem::path(velodyne_path).stem().string();
    s.points = read_velodyne(velodyne_path);
    for (std::size_t i = 0; i < s.points.dim(0); ++i) {
        const double v = s.points.at(i, 3);
        if (!(v >= 0.0 && v <= 1.0)) {
            throw FormatError(velodyne_path + ": intensity " + std::to_string(v) + " outside [0, 1] at byte offset " +
                              std::to_string(i * 16 + 12));
        }
    }
    s.calib = read_calibration(calib_path);
    if (!label_path.empty()) s.labels = read_labels(label_path);
    return s;
}

// --------------------------------------------------------------- frustums

struct FrustumSample {
    std::string frame;
    Tensor points;  // [n, 4], frustum-rotated camera frame + intensity
    ObjectClass cls = ObjectClass::Car;
    std::vector<int> seg_mask;
    OrientedBox3D gt_box;
    double frustum_angle = 0.0;
    Difficulty difficulty = Difficulty::Easy;

    std::size_t size() const { return points.dim(0); }

    std::vector<double> one_hot() const {
        std::vector<double> v(kClassCount, 0.0);
        v[static_cast<std::size_t>(cls)] = 1.0;
        return v;
    }

    /// The ground-truth box back in the camera frame.
    OrientedBox3D camera_box() const { return rotate_box_about_y(gt_box, frustum_angle); }
};

inline constexpr double kPointInBoxTolerance = 1e-6;

inline std::vector<int> compute_seg_mask(const Tensor& points, const OrientedBox3D& box) {
    std::vector<int> mask(points.dim(0));
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = point_in_box(box, {points.at(i, 0), points.at(i, 1), points.at(i, 2)}, kPointInBoxTolerance);
    }
    return mask;
}

/// Indices of a fixed-size resample: without replacement when there are
/// enough points, otherwise every point once plus uniform draws with replacement.
inline std::vector<std::size_t> resample_indices(std::size_t available, std::size_t n, Rng& rng) {
    if (available == 0) throw EmptyFrustum("cannot resample an empty point set");
    std::vector<std::size_t> idx(available);
    for (std::size_t i = 0; i < available; ++i) idx[i] = i;
    if (available >= n) {
        for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(available - i)]);
        idx.resize(n);
    } else {
        while (idx.size() < n) idx.push_back(rng.below(available));
    }
    return idx;
}

/// Rotates the raw camera-frame points by -angle, resamples, and labels them
/// against `box` (also rotated).
inline FrustumSample make_frustum(const std::vector<std::array<double, 4>>& camera_points, double angle,
                                  ObjectClass cls, const OrientedBox3D& camera_box, Difficulty difficulty,
                                  std::size_t n_points, Rng& rng) {
    if (camera_points.empty()) throw EmptyFrustum("frustum contains no points");
    const auto pick = resample_indices(camera_points.size(), n_points, rng);
    std::vector<double> v(n_points * 4);
    for (std::size_t i = 0; i < n_points; ++i) {
        const auto& p = camera_points[pick[i]];
        const Vec3 r = rotate_about_y({p[0], p[1], p[2]}, -angle);
        v[i * 4] = r[0];
        v[i * 4 + 1] = r[1];
        v[i * 4 + 2] = r[2];
        v[i * 4 + 3] = p[3];
    }
    FrustumSample s;
    s.points = Tensor({n_points, 4}, std::move(v));
    s.cls = cls;
    s.gt_box = rotate_box_about_y(camera_box, -angle);
    s.seg_mask = compute_seg_mask(s.points, s.gt_box);
    s.frustum_angle = angle;
    s.difficulty = difficulty;
    return s;
}

/// Azimuth atan2(x, z) of the ray through the centre of a 2D box.
inline double frustum_angle(const Calibration& calib, const Box2D& box) {
    const Vec3 p = calib.unproject(box.center_u(), box.center_v(), 20.0);
    return std::atan2(p[0], p[2]);
}

/// Forward points (z > 0) of the scene whose projection lands inside `box`,
/// in the rectified camera frame.
inline std::vector<std::array<double, 4>> frustum_points(const Scene& scene, const Box2D& box) {
    std::vector<std::array<double, 4>> out;
    for (std::size_t i = 0; i < scene.points.dim(0); ++i) {
        const Vec3 p = scene.calib.velo_to_rect({scene.points.at(i, 0), scene.points.at(i, 1), scene.points.at(i, 2)});
        if (p[2] <= 0.0) continue;
        auto uv = scene.calib.project(p);
        if (!uv) continue;
        if ((*uv)[0] >= box.x1 && (*uv)[0] <= box.x2 && (*uv)[1] >= box.y1 && (*uv)[1] <= box.y2) {
            out.push_back({p[0], p[1], p[2], scene.points.at(i, 3)});
        }
    }
    return out;
}

inline FrustumSample extract_frustum(const Scene& scene, const Box2D& box, ObjectClass cls,
                                     const OrientedBox3D& camera_box, Difficulty difficulty, std::size_t n_points,
                                     Rng& rng) {
    if (box.x1 < 0 || box.y1 < 0 || box.x2 > scene.image_width || box.y2 > scene.image_height || box.x2 <= box.x1 ||
        box.y2 <= box.y1) {
        throw InvalidInput("2D box outside image bounds");
    }
    auto pts = frustum_points(scene, box);
    if (pts.empty()) throw EmptyFrustum("no points project into the 2D box of frame " + scene.frame);
    auto s = make_frustum(pts, frustum_angle(scene.calib, box), cls, camera_box, difficulty, n_points, rng);
    s.frame = scene.frame;
    return s;
}

/// Frustums for every Car/Pedestrian/Cyclist label of a scene, using the
/// label's own 2D box. Labels whose frustum is empty are skipped.
inline std::vector<FrustumSample> scene_frustums(const Scene& scene, std::size_t n_points, Rng& rng) {
    std::vector<FrustumSample> out;
    for (const auto& l : scene.labels) {
        auto cls = parse_class(l.type);
        if (!cls) continue;
        Box2D b = l.box2d;
        b.x1 = std::max(0.0, b.x1);
        b.y1 = std::max(0.0, b.y1);
        b.x2 = std::min<double>(scene.image_width, b.x2);
        b.y2 = std::min<double>(scene.image_height, b.y2);
        try {
            out.push_back(extract_frustum(scene, b, *cls, l.box, classify_difficulty(l), n_points, rng));
        } catch (const EmptyFrustum&) {
        } catch (const InvalidInput&) {
        }
    }
    return out;
}

/// Reads <root>/velodyne/*.bin with matching calib/ and label_2/ files.
inline std::vector<FrustumSample> load_kitti_directory(const std::string& root, std::size_t n_points,
                                                       std::uint64_t seed, std::size_t max_frames = 0) {
    namespace fs = std::filesystem;
    const fs::path base(root);
    if (!fs::is_directory(base / "velodyne")) throw FormatError(root + ": no velodyne/ directory");
    std::vector<fs::path> frames;
    for (const auto& e : fs::directory_iterator(base / "velodyne")) {
        if (e.path().extension() == ".bin") frames.push_back(e.path());
    }
    std::sort(frames.begin(), frames.end());
    if (max_frames > 0 && frames.size() > max_frames) frames.resize(max_frames);
    std::vector<FrustumSample> out;
    for (std::size_t f = 0; f < frames.size(); ++f) {
        const std::string id = frames[f].stem().string();
        Scene s = load_scene(frames[f].string(), (base / "calib" / (id + ".txt")).string(),
                             (base / "label_2" / (id + ".txt")).string());
        Rng rng(derive_key(seed, f));
        for (auto& fr : scene_frustums(s, n_points, rng)) out.push_back(std::move(fr));
    }
    return out;
}

// --------------------------------------------------------------- synthetic

struct SynthSpec {
    std::size_t n_points = 128;
    double noise = 0.015;         // gaussian sigma on surface points, metres
    std::size_t clutter = 16;     // free-floating background points per frustum
    double ground_fraction = 0.35;
    double angle_jitter = 0.05;   // radians between object azimuth and frustum axis
    double size_jitter = 0.1;     // relative
    double depth_min = 6.0, depth_max = 40.0;
    double ground_y = 1.65;       // object bottoms rest here
    std::array<Vec3, kClassCount> templates{{{3.9, 1.6, 1.56}, {0.8, 0.6, 1.73}, {1.76, 0.6, 1.73}}};

    void validate() const {
        if (n_points == 0) throw InvalidInput("synth: n_points must be positive");
        if (!(depth_max > depth_min && depth_min > 0)) throw InvalidInput("synth: bad depth range");
        if (!(noise >= 0) || !(angle_jitter >= 0) || !(size_jitter >= 0 && size_jitter < 1)) {
            throw InvalidInput("synth: noise and jitter must be non-negative");
        }
        if (!(ground_fraction >= 0 && ground_fraction < 1)) throw InvalidInput("synth: ground_fraction in [0, 1)");
        for (const auto& t : templates) {
            for (double d : t) {
                if (!(d > 0.1)) throw InvalidInput("synth: template sizes must exceed the 0.05 m surface inset");
            }
        }
    }
};

inline Difficulty depth_difficulty(double depth) {
    return depth < 15.0 ? Difficulty::Easy : depth < 30.0 ? Difficulty::Moderate : Difficulty::Hard;
}

inline std::vector<FrustumSample> synth_dataset(std::uint64_t seed, std::size_t count, const SynthSpec& spec = {}) {
    if (count == 0) throw InvalidInput("synth: count must be at least 1");
    spec.validate();
    constexpr double inset = 0.05;
    std::vector<FrustumSample> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        Rng rng(derive_key(seed, s));
        const auto cls = static_cast<ObjectClass>(rng.below(kClassCount));
        Vec3 size = spec.templates[static_cast<std::size_t>(cls)];
        for (auto& d : size) d *= 1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter);
        const double depth = rng.uniform(spec.depth_min, spec.depth_max);
        const double azimuth = rng.uniform(-0.6, 0.6);
        const double yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
        const auto box = OrientedBox3D::make({depth * std::sin(azimuth), spec.ground_y - 0.5 * size[2],
                                              depth * std::cos(azimuth)},
                                             size, yaw);
        const double c = std::cos(yaw), sn = std::sin(yaw);
        auto to_camera = [&](double along, double down, double across) -> Vec3 {
            return {box.center[0] + c * along + sn * across, box.center[1] + down, box.center[2] - sn * along + c * across};
        };

        std::vector<std::array<double, 4>> pts;
        // Object surface: five faces (no underside) of the inset box, area-weighted.
        const double hl = 0.5 * size[0] - inset, hw = 0.5 * size[1] - inset, hh = 0.5 * size[2] - inset;
        const std::array<double, 3> face_area{4 * hw * hh, 4 * hl * hh, 4 * hl * hw};
        const double total_area = 2 * face_area[0] + 2 * face_area[1] + face_area[2];
        const std::size_t n_obj = static_cast<std::size_t>(spec.n_points * rng.uniform(0.3, 0.6));
        for (std::size_t i = 0; i < n_obj; ++i) {
            double pick = rng.uniform(0, total_area);
            double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
            Vec3 local{};
            if (pick < 2 * face_area[0]) {
                local = {pick < face_area[0] ? hl : -hl, b * hh, a * hw};
            } else if (pick < 2 * face_area[0] + 2 * face_area[1]) {
                local = {a * hl, b * hh, pick < 2 * face_area[0] + face_area[1] ? hw : -hw};
            } else {
                local = {a * hl, -hh, b * hw};
            }
            auto p = to_camera(local[0], local[1], local[2]);
            for (auto& x : p) x += spec.noise * rng.normal();
            pts.push_back({p[0], p[1], p[2], rng.uniform(0.3, 0.9)});
        }
        // Ground patch just below the object footprint plane.
        const std::size_t n_ground = static_cast<std::size_t>(spec.n_points * spec.ground_fraction);
        for (std::size_t i = 0; i < n_ground; ++i) {
            pts.push_back({box.center[0] + rng.uniform(-3, 3), spec.ground_y + 0.05 + spec.noise * rng.normal(),
                           box.center[2] + rng.uniform(-4, 4), rng.uniform(0.0, 0.2)});
        }
        // Clutter anywhere nearby but clear of the object.
        for (std::size_t i = 0; i < spec.clutter;) {
            const Vec3 p{box.center[0] + rng.uniform(-4, 4), rng.uniform(-1.0, spec.ground_y - 0.05),
                         box.center[2] + rng.uniform(-5, 5)};
            if (point_in_box(box, p, 0.1)) continue;
            pts.push_back({p[0], p[1], p[2], rng.uniform()});
            ++i;
        }
        const double angle = azimuth + spec.angle_jitter * rng.normal();
        auto sample = make_frustum(pts, angle, cls, box, depth_difficulty(depth), spec.n_points, rng);
        sample.frame = "synth" + std::to_string(s);
        out.push_back(std::move(sample));
    }
    return out;
}

// --------------------------------------------------------- dataset container

// "PNEMBFS\0", u32 version, u64 count, then per sample: str frame, u8 class,
// u8 difficulty, f64 angle, 7 x f64 box (centre, size, yaw), u64 n,
// n x 4 x f64 points, n x u8 mask.
inline constexpr char kDatasetMagic[8] = {'P', 'N', 'E', 'M', 'B', 'F', 'S', '\0'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string encode_dataset(const std::vector<FrustumSample>& samples) {
    std::string out(kDatasetMagic, 8);
    bin::put_u32(out, kDatasetVersion);
    bin::put_u64(out, samples.size());
    for (const auto& s : samples) {
        bin::put_str(out, s.frame);
        bin::put_u8(out, static_cast<std::uint8_t>(s.cls));
        bin::put_u8(out, static_cast<std::uint8_t>(s.difficulty));
        bin::put_f64(out, s.frustum_angle);
        for (double v : s.gt_box.center) bin::put_f64(out, v);
        for (double v : s.gt_box.size) bin::put_f64(out, v);
        bin::put_f64(out, s.gt_box.yaw);
        bin::put_u64(out, s.size());
        for (double v : s.points.data()) bin::put_f64(out, v);
        for (int m : s.seg_mask) bin::put_u8(out, static_cast<std::uint8_t>(m));
    }
    return out;
}

inline std::vector<FrustumSample> decode_dataset(std::string_view bytes, const std::string& what = "dataset") {
    bin::Reader r(bytes, what);
    if (r.raw(8) != std::string_view(kDatasetMagic, 8)) throw FormatError(what + ": bad magic at byte offset 0");
    if (const auto v = r.u32(); v != kDatasetVersion) r.fail("unsupported version " + std::to_string(v));
    const std::uint64_t count = r.u64();
    std::vector<FrustumSample> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        FrustumSample s;
        s.frame = r.str();
        const auto cls = r.u8();
        if (cls >= kClassCount) r.fail("bad class id " + std::to_string(cls));
        s.cls = static_cast<ObjectClass>(cls);
        const auto diff = r.u8();
        if (diff > 3) r.fail("bad difficulty " + std::to_string(diff));
        s.difficulty = static_cast<Difficulty>(diff);
        s.frustum_angle = r.f64();
        OrientedBox3D b;
        for (auto& v : b.center) v = r.f64();
        for (auto& v : b.size) v = r.f64();
        b.yaw = r.f64();
        try {
            b.validate();
        } catch (const InvalidInput& e) {
            r.fail(e.what());
        }
        s.gt_box = b;
        const std::uint64_t n = r.u64();
        if (n == 0) r.fail("empty sample");
        r.need(n * 4 * 8);
        std::vector<double> v(n * 4);
        for (auto& x : v) x = r.f64();
        s.points = Tensor({n, 4}, std::move(v));
        s.seg_mask.resize(n);
        for (auto& m : s.seg_mask) {
            const auto byte = r.u8();
            if (byte > 1) r.fail("mask byte must be 0 or 1");
            m = byte;
        }
        out.push_back(std::move(s));
    }
    if (!r.at_end()) r.fail("trailing bytes");
    return out;
}

inline void save_dataset(const std::string& path, const std::vector<FrustumSample>& samples) {
    bin::write_file(path, encode_dataset(samples));
}

inline std::vector<FrustumSample> load_dataset(const std::string& path) {
    return decode_dataset(bin::read_file(path), path);
}

} // namespace pnemb
