#pragma once

// Command-line surface: train, eval, infer, ablate, ksweep, gradcheck and
// replay. Every command that writes an output directory also writes
// manifest.json, from which `replay` reruns it and compares artifact hashes.
//
// Exit codes:
//   0  success
//   1  any other failure (including a replay whose artifacts differ)
//   2  configuration error (bad flag, config file, variant, k)
//   3  data error (missing or malformed input)
//   4  numerical failure (non-finite loss, failed gradient check)
//   5  checkpoint does not match the requested configuration

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pnemb/gradcheck_suite.hpp"
#include "pnemb/training.hpp"

namespace pnemb::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumerical = 4, kCheckpoint = 5 };

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// "baseline", "eb", "eb_fcr", or a '+'-joined subset of {st, lfe, fcr}.
inline Toggles parse_toggles(const std::string& s) {
    if (auto v = parse_variant(s)) return variant_toggles(*v);
    Toggles t;
    std::stringstream ss(s);
    std::string tok;
    bool any = false;
    while (std::getline(ss, tok, '+')) {
        if (tok == "st") {
            t.st = true;
        } else if (tok == "lfe") {
            t.lfe = true;
        } else if (tok == "fcr") {
            t.fcr = true;
        } else {
            throw ConfigError("unknown variant '" + s + "' (expected baseline, eb, eb_fcr or a '+'-joined subset of st, lfe, fcr)");
        }
        any = true;
    }
    if (!any) throw ConfigError("empty variant");
    return t;
}

/// Everything that determines a run. Serialized into checkpoints and
/// manifests; its JSON form is what the fingerprint hashes.
struct RunConfig {
    std::string variant = "eb_fcr";
    std::size_t k = 4;
    std::size_t c_out = 64;
    std::size_t n_points = 128;
    std::string widths = "desk";
    bool self_counts_in_k = true;
    std::size_t batch_size = 32;
    double lr0 = 0.001;
    double decay_factor = 0.5;
    std::size_t decay_every_steps = 0;
    std::size_t epochs = 200;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;
    double stop_seg_accuracy = 1.0;
    double stop_mean_iou = 1.0;
    int ap_interp = 11;

    json to_json() const {
        return json{{"variant", variant},
                    {"k", k},
                    {"c_out", c_out},
                    {"n_points", n_points},
                    {"widths", widths},
                    {"self_counts_in_k", self_counts_in_k},
                    {"batch_size", batch_size},
                    {"lr0", lr0},
                    {"decay_factor", decay_factor},
                    {"decay_every_steps", decay_every_steps},
                    {"epochs", epochs},
                    {"seed", seed},
                    {"eval_every", eval_every},
                    {"stop_seg_accuracy", stop_seg_accuracy},
                    {"stop_mean_iou", stop_mean_iou},
                    {"ap_interp", ap_interp}};
    }

    /// Overlays the fields present in `j`; unknown fields and wrong types are
    /// errors naming the field.
    void merge(const json& j, const std::string& where) {
        if (!j.is_object()) throw ConfigError(where + ": top level must be an object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& key = it.key();
            const json& v = it.value();
            auto fail = [&](const char* expected) {
                return ConfigError(where + ": field '" + key + "' must be " + expected + ", got " + v.dump());
            };
            auto get_size = [&](std::size_t& out) {
                if (!v.is_number_unsigned()) throw fail("a non-negative integer");
                out = v.get<std::size_t>();
            };
            auto get_double = [&](double& out) {
                if (!v.is_number()) throw fail("a number");
                out = v.get<double>();
            };
            auto get_string = [&](std::string& out) {
                if (!v.is_string()) throw fail("a string");
                out = v.get<std::string>();
            };
            if (key == "variant") {
                get_string(variant);
            } else if (key == "k") {
                get_size(k);
            } else if (key == "c_out") {
                get_size(c_out);
            } else if (key == "n_points") {
                get_size(n_points);
            } else if (key == "widths") {
                get_string(widths);
            } else if (key == "self_counts_in_k") {
                if (!v.is_boolean()) throw fail("a boolean");
                self_counts_in_k = v.get<bool>();
            } else if (key == "batch_size") {
                get_size(batch_size);
            } else if (key == "lr0") {
                get_double(lr0);
            } else if (key == "decay_factor") {
                get_double(decay_factor);
            } else if (key == "decay_every_steps") {
                get_size(decay_every_steps);
            } else if (key == "epochs") {
                get_size(epochs);
            } else if (key == "seed") {
                if (!v.is_number_unsigned()) throw fail("a non-negative integer");
                seed = v.get<std::uint64_t>();
            } else if (key == "eval_every") {
                get_size(eval_every);
            } else if (key == "stop_seg_accuracy") {
                get_double(stop_seg_accuracy);
            } else if (key == "stop_mean_iou") {
                get_double(stop_mean_iou);
            } else if (key == "ap_interp") {
                if (!v.is_number_integer()) throw fail("11 or 40");
                ap_interp = v.get<int>();
            } else {
                throw ConfigError(where + ": unknown field '" + key + "'");
            }
        }
    }

    Toggles toggles() const { return parse_toggles(variant); }

    NetworkConfig network() const {
        NetworkConfig cfg;
        cfg.toggles = toggles();
        cfg.k = k;
        cfg.c_out = c_out;
        cfg.n_points = n_points;
        cfg.self_counts_in_k = self_counts_in_k;
        if (widths == "desk") {
            cfg.widths = Widths::desk();
        } else if (widths == "full") {
            cfg.widths = Widths::full();
        } else if (widths == "tiny") {
            cfg.widths = Widths::tiny();
        } else {
            throw ConfigError("widths must be desk, full or tiny, got '" + widths + "'");
        }
        return cfg;
    }

    TrainConfig train() const {
        TrainConfig t;
        t.batch_size = batch_size;
        t.lr0 = lr0;
        t.decay_factor = decay_factor;
        t.decay_every_steps = decay_every_steps;
        t.epochs = epochs;
        t.seed = seed;
        t.eval_every = eval_every;
        t.stop_seg_accuracy = stop_seg_accuracy;
        t.stop_mean_iou = stop_mean_iou;
        return t;
    }

    ApInterpolation interpolation() const {
        return ap_interp == 40 ? ApInterpolation::Forty : ApInterpolation::Eleven;
    }

    void validate() const {
        try {
            network().validate();
            train().validate();
        } catch (const InvalidInput& e) {
            throw ConfigError(e.what());
        } catch (const DimensionError& e) {
            throw ConfigError(e.what());
        }
        if (ap_interp != 11 && ap_interp != 40) throw ConfigError("ap_interp must be 11 or 40");
    }

    std::string fingerprint() const { return hex64(fnv1a64(to_json().dump())); }
};

/// Reads a JSON config file; parse errors name the line and column.
inline json read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    const std::string text((std::istreambuf_iterator<char>(in)), {});
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError(path + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
    }
}

// ------------------------------------------------------------------ data

struct SynthUri {
    std::uint64_t seed = 0;
    std::size_t count = 64;
    std::optional<std::size_t> clutter;
    std::optional<double> noise;
};

inline SynthUri parse_synth_uri(const std::string& uri) {
    SynthUri out;
    const std::string body = uri.substr(std::string("synth://").size());
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw DataError(uri + ": expected key=value, got '" + item + "'");
        const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
        try {
            std::size_t used = 0;
            if (key == "seed") {
                out.seed = std::stoull(val, &used);
            } else if (key == "count") {
                out.count = std::stoull(val, &used);
            } else if (key == "clutter") {
                out.clutter = std::stoull(val, &used);
            } else if (key == "noise") {
                out.noise = std::stod(val, &used);
            } else {
                throw DataError(uri + ": unknown key '" + key + "' (expected seed, count, clutter, noise)");
            }
            if (used != val.size()) throw std::invalid_argument(val);
        } catch (const std::logic_error&) {
            throw DataError(uri + ": bad value '" + val + "' for " + key);
        }
    }
    if (out.count == 0) throw DataError(uri + ": count must be at least 1");
    return out;
}

/// `synth://seed=7,count=64`, a dataset container file, or a KITTI-layout
/// directory (velodyne/, calib/, label_2/).
inline std::vector<FrustumSample> load_data(const std::string& spec, const RunConfig& cfg) {
    if (spec.empty()) throw DataError("no --data given");
    if (spec.rfind("synth://", 0) == 0) {
        const auto u = parse_synth_uri(spec);
        SynthSpec s;
        s.n_points = cfg.n_points;
        if (u.clutter) s.clutter = *u.clutter;
        if (u.noise) s.noise = *u.noise;
        return synth_dataset(u.seed, u.count, s);
    }
    if (!fs::exists(spec)) throw DataError("data path does not exist: " + spec);
    std::vector<FrustumSample> data;
    if (fs::is_directory(spec)) {
        data = load_kitti_directory(spec, cfg.n_points, cfg.seed);
    } else {
        data = load_dataset(spec);
        for (const auto& s : data) {
            if (s.size() != cfg.n_points) {
                throw DataError(spec + ": sample " + s.frame + " has " + std::to_string(s.size()) +
                                " points but n_points is " + std::to_string(cfg.n_points));
            }
        }
    }
    if (data.empty()) throw DataError(spec + ": no frustums");
    return data;
}

// -------------------------------------------------------------- manifest

struct RunManifest {
    std::string command;
    RunConfig config;
    std::map<std::string, std::string> inputs;  // data, checkpoint, eval_data, k_list, ...
    std::string out;
    std::map<std::string, std::string> artifacts;  // file name -> FNV-1a of its bytes

    json to_json() const {
        json a = json::object();
        for (const auto& [k, v] : artifacts) a[k] = v;
        return json{{"command", command},    {"config", config.to_json()},
                    {"seed", config.seed},   {"config_fingerprint", config.fingerprint()},
                    {"inputs", inputs},      {"out", out},
                    {"artifacts", a}};
    }

    static RunManifest from_json(const json& j, const std::string& where) {
        RunManifest m;
        try {
            m.command = j.at("command").get<std::string>();
            m.config.merge(j.at("config"), where + ": config");
            m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
            m.out = j.at("out").get<std::string>();
            m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
        } catch (const json::exception& e) {
            throw ConfigError(where + ": " + e.what());
        }
        return m;
    }
};

inline std::string file_hash(const fs::path& p) { return hex64(fnv1a64(bin::read_file(p.string()))); }

inline void write_text(const fs::path& p, const std::string& text) { bin::write_file(p.string(), text); }

/// Hashes the named artifacts and writes manifest.json next to them.
inline void finish_manifest(RunManifest& m, const std::vector<std::string>& artifact_names) {
    for (const auto& n : artifact_names) m.artifacts[n] = file_hash(fs::path(m.out) / n);
    write_text(fs::path(m.out) / "manifest.json", m.to_json().dump(2) + "\n");
}

// -------------------------------------------------------------- commands

struct Output {
    std::ostream& out = std::cout;
    std::ostream& err = std::cerr;
};

inline Checkpoint make_checkpoint(const Trainer& tr, const RunConfig& cfg) {
    Checkpoint ck;
    ck.metadata["config"] = cfg.to_json().dump();
    ck.metadata["config_fingerprint"] = cfg.fingerprint();
    ck.metadata["variant"] = cfg.toggles().name();
    tr.save(ck);
    return ck;
}

/// Trains and writes checkpoint.pnck, metrics.jsonl and params.txt.
inline void train_into(const RunConfig& cfg, const std::vector<FrustumSample>& data, const fs::path& dir,
                       std::ostream& log) {
    fs::create_directories(dir);
    FrustumDetector det(cfg.network(), cfg.seed);
    Trainer tr(det, data, cfg.train());
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
    tr.run([&](const EpochMetrics& m) {
        metrics << m.json() << '\n';
        log << m.json() << '\n';
    });
    metrics.close();
    make_checkpoint(tr, cfg).save((dir / "checkpoint.pnck").string());
    std::string manifest;
    for (const auto& l : det.params().manifest()) manifest += l + "\n";
    write_text(dir / "params.txt", manifest);
}

inline int cmd_train(const RunConfig& cfg, const std::string& data_spec, const std::string& out_dir, Output io) {
    cfg.validate();
    const auto data = load_data(data_spec, cfg);
    RunManifest m{"train", cfg, {{"data", data_spec}}, out_dir, {}};
    train_into(cfg, data, out_dir, io.err);
    finish_manifest(m, {"checkpoint.pnck", "metrics.jsonl", "params.txt"});
    io.out << "trained " << cfg.toggles().name() << " on " << data.size() << " frustums; checkpoint "
           << (fs::path(out_dir) / "checkpoint.pnck").string() << "\n";
    return kOk;
}

/// The run configuration a checkpoint was trained with.
inline RunConfig checkpoint_config(const std::string& path, const Checkpoint& ck) {
    const auto it = ck.metadata.find("config");
    if (it == ck.metadata.end()) throw CheckpointMismatch(path + ": checkpoint carries no run configuration");
    RunConfig stored;
    stored.merge(json::parse(it->second), path);
    return stored;
}

inline RunConfig checkpoint_config(const std::string& path) {
    if (!fs::exists(path)) throw DataError("checkpoint does not exist: " + path);
    return checkpoint_config(path, Checkpoint::load(path));
}

/// Loads a detector from a checkpoint. `requested`, when set, must describe
/// the same network; otherwise the refusal carries the parameter manifest diff.
inline std::pair<RunConfig, std::unique_ptr<FrustumDetector>> load_detector(const std::string& path,
                                                                           const std::optional<RunConfig>& requested) {
    if (!fs::exists(path)) throw DataError("checkpoint does not exist: " + path);
    const auto ck = Checkpoint::load(path);
    const RunConfig stored = checkpoint_config(path, ck);
    RunConfig use = stored;
    if (requested) {
        const auto a = stored.network(), b = requested->network();
        FrustumDetector want(b, 0), have(a, 0);
        if (want.params().manifest() != have.params().manifest() || a.k != b.k ||
            a.self_counts_in_k != b.self_counts_in_k) {
            throw CheckpointMismatch(
                path + " was trained as " + stored.toggles().name() + " (k=" + std::to_string(a.k) +
                ") but " + requested->toggles().name() + " (k=" + std::to_string(b.k) + ") was requested:\n" +
                ParamStore::manifest_diff(want.params().manifest(), have.params().manifest()));
        }
        use.ap_interp = requested->ap_interp;
    }
    auto det = std::make_unique<FrustumDetector>(use.network(), use.seed);
    det->params().read_from(ck);
    return {use, std::move(det)};
}

struct EvalSummary {
    DatasetEvaluation eval;
    ApTableRow row3d;
    ApTableRow row_bev;
};

inline EvalSummary evaluate(FrustumDetector& det, const std::vector<FrustumSample>& data, const std::string& method,
                            ApInterpolation interp) {
    EvalSummary s;
    s.eval = evaluate_detector(det, data);
    s.row3d = ap_row(method, data, s.eval.detections, IouKind::Box3d, interp);
    s.row_bev = ap_row(method, data, s.eval.detections, IouKind::Bev, interp);
    return s;
}

/// Plot-ready precision/recall series: class, difficulty, kind, recall, precision.
inline std::string curve_series(const std::vector<FrustumSample>& data, const std::vector<DetectionOutput>& dets,
                                ApInterpolation interp) {
    static constexpr const char* kDiff[] = {"Easy", "Moderate", "Hard"};
    std::string out = "class\tdifficulty\tkind\trecall\tprecision\n";
    for (auto kind : {IouKind::Box3d, IouKind::Bev}) {
        for (std::size_t c = 0; c < kClassCount; ++c) {
            std::vector<std::vector<ScoredBox>> scored(data.size());
            std::vector<std::vector<GroundTruthBox>> truth(data.size());
            for (std::size_t i = 0; i < data.size(); ++i) {
                if (static_cast<std::size_t>(data[i].cls) != c) continue;
                truth[i].push_back({data[i].camera_box(), data[i].difficulty});
                scored[i].push_back({dets[i].box, dets[i].confidence});
            }
            for (std::size_t d = 0; d < 3; ++d) {
                auto curve = average_precision(scored, truth, iou_threshold(static_cast<ObjectClass>(c)),
                                               static_cast<Difficulty>(d), kind, interp);
                if (!curve) continue;
                for (std::size_t i = 0; i < curve->recall.size(); ++i) {
                    char buf[160];
                    std::snprintf(buf, sizeof buf, "%s\t%s\t%s\t%.6f\t%.6f\n", kClassNames[c], kDiff[d],
                                  kind == IouKind::Bev ? "bev" : "3d", curve->recall[i], curve->precision[i]);
                    out += buf;
                }
            }
        }
    }
    return out;
}

inline std::string fmt_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline int cmd_eval(const std::string& checkpoint, const std::optional<RunConfig>& requested,
                    const std::string& data_spec, const std::string& out_dir, Output io) {
    auto [cfg, det] = load_detector(checkpoint, requested);
    const auto data = load_data(data_spec, cfg);
    const auto s = evaluate(*det, data, cfg.toggles().name(), cfg.interpolation());
    const std::string tables = format_ap_table("3D AP (" + data_spec + ")", {s.row3d}) + "\n" +
                               format_ap_table("BEV AP (" + data_spec + ")", {s.row_bev});
    io.out << tables;
    io.out << "segmentation accuracy " << fmt_metric(s.eval.seg_accuracy) << ", mean 3D IoU "
           << fmt_metric(s.eval.mean_iou_3d) << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        RunConfig mcfg = cfg;
        RunManifest m{"eval", mcfg, {{"data", data_spec}, {"checkpoint", checkpoint}}, out_dir, {}};
        write_text(fs::path(out_dir) / "eval.txt", tables);
        write_text(fs::path(out_dir) / "curves.tsv", curve_series(data, s.eval.detections, cfg.interpolation()));
        json summary{{"seg_accuracy", s.eval.seg_accuracy},
                     {"seg_foreground_iou", s.eval.seg_foreground_iou},
                     {"mean_iou_3d", s.eval.mean_iou_3d},
                     {"mean_iou_bev", s.eval.mean_iou_bev},
                     {"frustums", data.size()}};
        write_text(fs::path(out_dir) / "eval.json", summary.dump(2) + "\n");
        finish_manifest(m, {"eval.txt", "curves.tsv", "eval.json"});
    }
    return kOk;
}

inline int cmd_infer(const std::string& checkpoint, const std::optional<RunConfig>& requested,
                     const std::string& data_spec, const std::string& out_dir, Output io) {
    auto [cfg, det] = load_detector(checkpoint, requested);
    const auto data = load_data(data_spec, cfg);
    std::string text;
    for (const auto& s : data) {
        const auto d = det->detect(s);
        Label l;
        l.type = kClassNames[static_cast<std::size_t>(d.cls)];
        l.box = d.box;
        l.alpha = normalize_yaw(d.box.yaw - std::atan2(d.box.center[0], d.box.center[2]));
        l.score = d.confidence;
        text += s.frame + " " + format_label_line(l) + (d.low_confidence ? " # low-confidence" : "") + "\n";
    }
    if (out_dir.empty()) {
        io.out << text;
    } else {
        fs::create_directories(out_dir);
        RunManifest m{"infer", cfg, {{"data", data_spec}, {"checkpoint", checkpoint}}, out_dir, {}};
        write_text(fs::path(out_dir) / "detections.txt", text);
        finish_manifest(m, {"detections.txt"});
        io.out << "wrote " << data.size() << " detections to " << (fs::path(out_dir) / "detections.txt").string()
               << "\n";
    }
    return kOk;
}

struct SweepResult {
    std::string label;
    RunConfig cfg;
    EvalSummary summary;
};

/// Trains `cfg` into `dir` and evaluates it on `eval_data`.
inline SweepResult train_and_evaluate(const std::string& label, const RunConfig& cfg,
                                      const std::vector<FrustumSample>& train_data,
                                      const std::vector<FrustumSample>& eval_data, const std::string& data_spec,
                                      const fs::path& dir, std::ostream& log) {
    RunManifest m{"train", cfg, {{"data", data_spec}}, dir.string(), {}};
    train_into(cfg, train_data, dir, log);
    finish_manifest(m, {"checkpoint.pnck", "metrics.jsonl", "params.txt"});
    auto [_, det] = load_detector((dir / "checkpoint.pnck").string(), cfg);
    return {label, cfg, evaluate(*det, eval_data, label, cfg.interpolation())};
}

inline std::string opt_cell(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
    return buf;
}

inline std::vector<FrustumSample> eval_set(const std::string& eval_spec, const RunConfig& cfg,
                                           const std::vector<FrustumSample>& train_data) {
    return eval_spec.empty() ? train_data : load_data(eval_spec, cfg);
}

inline int cmd_ablate(const RunConfig& base, const std::string& data_spec, const std::string& eval_spec,
                      const std::string& out_dir, Output io) {
    base.validate();
    const auto data = load_data(data_spec, base);
    const auto eval_data = eval_set(eval_spec, base, data);
    fs::create_directories(out_dir);
    std::vector<SweepResult> rows;
    for (const auto& t : ablation_rows()) {
        RunConfig cfg = base;
        cfg.variant = t.name();
        io.err << "ablate: training " << cfg.variant << "\n";
        rows.push_back(train_and_evaluate(cfg.variant, cfg, data, eval_data, data_spec, fs::path(out_dir) / cfg.variant,
                                          io.err));
    }
    std::string table = "ST   LFE  FCR  | Car 3D AP Easy  Moderate  Hard   | seg acc  mean 3D IoU\n";
    std::string tsv = "st\tlfe\tfcr\tcar_easy\tcar_moderate\tcar_hard\tseg_accuracy\tmean_iou_3d\n";
    for (const auto& r : rows) {
        const auto t = r.cfg.toggles();
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-4s %-4s %-4s | %-15s %-9s %-6s | %-8.4f %.4f\n", t.st ? "x" : "-",
                      t.lfe ? "x" : "-", t.fcr ? "x" : "-", opt_cell(r.summary.row3d.ap[0]).c_str(),
                      opt_cell(r.summary.row3d.ap[1]).c_str(), opt_cell(r.summary.row3d.ap[2]).c_str(),
                      r.summary.eval.seg_accuracy, r.summary.eval.mean_iou_3d);
        table += buf;
        std::snprintf(buf, sizeof buf, "%d\t%d\t%d\t%s\t%s\t%s\t%.17g\t%.17g\n", t.st, t.lfe, t.fcr,
                      opt_cell(r.summary.row3d.ap[0]).c_str(), opt_cell(r.summary.row3d.ap[1]).c_str(),
                      opt_cell(r.summary.row3d.ap[2]).c_str(), r.summary.eval.seg_accuracy,
                      r.summary.eval.mean_iou_3d);
        tsv += buf;
    }
    io.out << table;
    RunManifest m{"ablate", base, {{"data", data_spec}, {"eval_data", eval_spec}}, out_dir, {}};
    write_text(fs::path(out_dir) / "ablation.txt", table);
    write_text(fs::path(out_dir) / "ablation.tsv", tsv);
    std::vector<std::string> artifacts{"ablation.txt", "ablation.tsv"};
    for (const auto& r : rows) artifacts.push_back(r.cfg.variant + "/checkpoint.pnck");
    finish_manifest(m, artifacts);
    return kOk;
}

inline std::vector<std::size_t> parse_k_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        std::size_t used = 0;
        try {
            const long long v = std::stoll(tok, &used);
            if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::logic_error&) {
            throw ConfigError("invalid k '" + tok + "' in k list '" + s + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty k list");
    return out;
}

inline std::string join_k(const std::vector<std::size_t>& ks) {
    std::string s;
    for (auto k : ks) s += (s.empty() ? "" : ",") + std::to_string(k);
    return s;
}

inline int cmd_ksweep(const RunConfig& base, const std::string& data_spec, const std::string& eval_spec,
                      const std::vector<std::size_t>& ks, const std::string& out_dir, Output io) {
    base.validate();
    for (auto k : ks) {
        if (k < 1 || k > base.n_points) {
            throw ConfigError("k=" + std::to_string(k) + " outside [1, " + std::to_string(base.n_points) + "]");
        }
        RunConfig c = base;
        c.k = k;
        c.validate();
    }
    const auto data = load_data(data_spec, base);
    const auto eval_data = eval_set(eval_spec, base, data);
    fs::create_directories(out_dir);
    static constexpr const char* kDiff[] = {"Easy", "Moderate", "Hard"};
    std::string tsv = "k\tdifficulty\tcar_ap_3d\n";
    for (auto k : ks) {
        RunConfig cfg = base;
        cfg.k = k;
        const std::string label = "k" + std::to_string(k);
        io.err << "ksweep: training k=" << k << "\n";
        const auto r = train_and_evaluate(label, cfg, data, eval_data, data_spec, fs::path(out_dir) / label, io.err);
        for (std::size_t d = 0; d < 3; ++d) {
            const auto& v = r.summary.row3d.ap[d];
            char buf[96];
            std::snprintf(buf, sizeof buf, "%zu\t%s\t%s\n", k, kDiff[d], v ? fmt_metric(*v).c_str() : "nan");
            tsv += buf;
        }
    }
    io.out << tsv;
    RunManifest m{"ksweep", base, {{"data", data_spec}, {"eval_data", eval_spec}, {"k_list", join_k(ks)}}, out_dir, {}};
    write_text(fs::path(out_dir) / "ksweep.tsv", tsv);
    finish_manifest(m, {"ksweep.tsv"});
    return kOk;
}

inline int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, const std::string& out_dir, Output io) {
    const auto rep = run_gradcheck(default_gradcheck_cases(), seed, seeds);
    io.out << rep.text();
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        RunConfig cfg;
        cfg.seed = seed;
        RunManifest m{"gradcheck", cfg, {{"seeds", std::to_string(seeds)}}, out_dir, {}};
        write_text(fs::path(out_dir) / "gradcheck.txt", rep.text());
        finish_manifest(m, {"gradcheck.txt"});
    }
    return rep.passed ? kOk : kNumerical;
}

inline std::string input_or_empty(const RunManifest& m, const std::string& key) {
    auto it = m.inputs.find(key);
    return it == m.inputs.end() ? std::string() : it->second;
}

/// Reruns the command recorded in a manifest into `out_dir` and compares the
/// artifact hashes with the recorded ones.
inline int cmd_replay(const std::string& manifest_path, std::string out_dir, Output io) {
    if (!fs::exists(manifest_path)) throw DataError("manifest does not exist: " + manifest_path);
    json j;
    try {
        j = json::parse(bin::read_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw ConfigError(manifest_path + ": " + e.what());
    }
    const auto m = RunManifest::from_json(j, manifest_path);
    if (out_dir.empty()) out_dir = (fs::path(m.out) / "replay").string();
    if (fs::weakly_canonical(out_dir) == fs::weakly_canonical(m.out)) {
        throw ConfigError("replay output directory must differ from the recorded one");
    }
    std::ostringstream sink;
    Output quiet{sink, io.err};
    const std::string data = input_or_empty(m, "data");
    int rc;
    if (m.command == "train") {
        rc = cmd_train(m.config, data, out_dir, quiet);
    } else if (m.command == "eval") {
        rc = cmd_eval(input_or_empty(m, "checkpoint"), m.config, data, out_dir, quiet);
    } else if (m.command == "infer") {
        rc = cmd_infer(input_or_empty(m, "checkpoint"), m.config, data, out_dir, quiet);
    } else if (m.command == "ablate") {
        rc = cmd_ablate(m.config, data, input_or_empty(m, "eval_data"), out_dir, quiet);
    } else if (m.command == "ksweep") {
        rc = cmd_ksweep(m.config, data, input_or_empty(m, "eval_data"), parse_k_list(input_or_empty(m, "k_list")),
                        out_dir, quiet);
    } else if (m.command == "gradcheck") {
        rc = cmd_gradcheck(m.config.seed, std::stoull(input_or_empty(m, "seeds")), out_dir, quiet);
    } else {
        throw ConfigError(manifest_path + ": cannot replay command '" + m.command + "'");
    }
    if (rc != kOk) return rc;
    bool same = true;
    for (const auto& [name, hash] : m.artifacts) {
        const fs::path p = fs::path(out_dir) / name;
        const std::string got = fs::exists(p) ? file_hash(p) : "missing";
        const bool ok = got == hash;
        same = same && ok;
        io.out << (ok ? "identical " : "DIFFERS   ") << name << " " << hash << (ok ? "" : " vs " + got) << "\n";
    }
    io.out << (same ? "replay reproduced all artifacts\n" : "replay produced different artifacts\n");
    return same ? kOk : kOther;
}

// ------------------------------------------------------------------ main

/// Parses argv, runs one command and maps failures to exit codes.
inline int run(int argc, const char* const* argv, Output io = {}) {
    CLI::App app{"Point-cloud neighbourhood-embedding frustum detector"};
    app.require_subcommand(1);

    struct Flags {
        std::string data, out, config, checkpoint, eval_data, manifest;
        std::optional<std::string> variant, widths;
        std::optional<std::size_t> k, c_out, epochs, batch, n_points, eval_every;
        std::optional<std::uint64_t> seed;
        std::optional<bool> self_counts_in_k;
        std::optional<int> ap_interp;
        std::optional<double> lr;
        std::string k_list = "2,4,5,8,16";
        std::size_t seeds = 20;
    } f;

    auto common = [&](CLI::App* sub, bool data_required) {
        auto* d = sub->add_option("--data", f.data, "synth://seed=S,count=N, a dataset file, or a KITTI directory");
        if (data_required) d->required();
        sub->add_option("--out", f.out, "output directory");
        sub->add_option("--config", f.config, "JSON config file; flags override it");
        sub->add_option("--variant", f.variant, "baseline | eb | eb_fcr (or st+lfe style toggles)");
        sub->add_option("--k", f.k, "neighbours per point");
        sub->add_option("--c-out", f.c_out, "embedding width");
        sub->add_option("--seed", f.seed, "run seed");
        sub->add_option("--epochs", f.epochs, "training epochs");
        sub->add_option("--batch", f.batch, "mini-batch size");
        sub->add_option("--lr", f.lr, "initial learning rate");
        sub->add_option("--n-points", f.n_points, "points per frustum");
        sub->add_option("--widths", f.widths, "layer width profile: desk | full | tiny");
        sub->add_option("--eval-every", f.eval_every, "epochs between early-stop evaluations (0 = never)");
        sub->add_option("--self-counts-in-k", f.self_counts_in_k, "whether a point occupies one of its k slots");
        sub->add_option("--ap-interp", f.ap_interp, "AP interpolation points: 11 or 40");
    };

    auto* train = app.add_subcommand("train", "train a detector");
    common(train, true);
    train->get_option("--out")->required();
    auto* eval = app.add_subcommand("eval", "3D and BEV AP tables for a checkpoint");
    common(eval, true);
    eval->add_option("--checkpoint", f.checkpoint, "checkpoint file")->required();
    auto* infer = app.add_subcommand("infer", "write one detection per frustum");
    common(infer, true);
    infer->add_option("--checkpoint", f.checkpoint, "checkpoint file")->required();
    auto* ablate = app.add_subcommand("ablate", "train and compare the six sub-block combinations");
    common(ablate, true);
    ablate->get_option("--out")->required();
    ablate->add_option("--eval-data", f.eval_data, "evaluation data (default: the training data)");
    auto* ksweep = app.add_subcommand("ksweep", "train and evaluate over a list of k");
    common(ksweep, true);
    ksweep->get_option("--out")->required();
    ksweep->add_option("--eval-data", f.eval_data, "evaluation data (default: the training data)");
    ksweep->add_option("--k-list", f.k_list, "comma-separated k values");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op family and network");
    gradcheck->add_option("--seed", f.seed, "first seed");
    gradcheck->add_option("--seeds", f.seeds, "number of seeds");
    gradcheck->add_option("--out", f.out, "output directory");
    auto* replay = app.add_subcommand("replay", "rerun a manifest and compare artifacts");
    replay->add_option("--manifest", f.manifest, "manifest.json")->required();
    replay->add_option("--out", f.out, "output directory (default: <recorded out>/replay)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, io.out, io.err);
        return rc == 0 ? kOk : kConfig;
    }

    auto resolve = [&]() {
        RunConfig cfg;
        if (!f.config.empty()) cfg.merge(read_config_file(f.config), f.config);
        if (f.variant) cfg.variant = *f.variant;
        if (f.widths) cfg.widths = *f.widths;
        if (f.k) cfg.k = *f.k;
        if (f.c_out) cfg.c_out = *f.c_out;
        if (f.epochs) cfg.epochs = *f.epochs;
        if (f.batch) cfg.batch_size = *f.batch;
        if (f.n_points) cfg.n_points = *f.n_points;
        if (f.eval_every) cfg.eval_every = *f.eval_every;
        if (f.seed) cfg.seed = *f.seed;
        if (f.self_counts_in_k) cfg.self_counts_in_k = *f.self_counts_in_k;
        if (f.ap_interp) cfg.ap_interp = *f.ap_interp;
        if (f.lr) cfg.lr0 = *f.lr;
        cfg.validate();
        return cfg;
    };
    // eval/infer take the configuration from the checkpoint; flags and a
    // config file that describe the network are checked against it.
    auto requested = [&]() -> std::optional<RunConfig> {
        if (f.config.empty() && !f.variant && !f.k && !f.c_out && !f.widths && !f.n_points && !f.self_counts_in_k &&
            !f.ap_interp) {
            return std::nullopt;
        }
        RunConfig cfg = checkpoint_config(f.checkpoint);
        if (!f.config.empty()) cfg.merge(read_config_file(f.config), f.config);
        if (f.variant) cfg.variant = *f.variant;
        if (f.k) cfg.k = *f.k;
        if (f.c_out) cfg.c_out = *f.c_out;
        if (f.widths) cfg.widths = *f.widths;
        if (f.n_points) cfg.n_points = *f.n_points;
        if (f.self_counts_in_k) cfg.self_counts_in_k = *f.self_counts_in_k;
        if (f.ap_interp) cfg.ap_interp = *f.ap_interp;
        cfg.validate();
        return cfg;
    };

    try {
        if (*train) return cmd_train(resolve(), f.data, f.out, io);
        if (*eval) return cmd_eval(f.checkpoint, requested(), f.data, f.out, io);
        if (*infer) return cmd_infer(f.checkpoint, requested(), f.data, f.out, io);
        if (*ablate) return cmd_ablate(resolve(), f.data, f.eval_data, f.out, io);
        if (*ksweep) return cmd_ksweep(resolve(), f.data, f.eval_data, parse_k_list(f.k_list), f.out, io);
        if (*gradcheck) return cmd_gradcheck(f.seed.value_or(0), f.seeds, f.out, io);
        if (*replay) return cmd_replay(f.manifest, f.out, io);
    } catch (const ConfigError& e) {
        io.err << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const CheckpointMismatch& e) {
        io.err << "checkpoint mismatch: " << e.what() << "\n";
        return kCheckpoint;
    } catch (const NumericalError& e) {
        io.err << "numerical error: " << e.what() << "\n";
        return kNumerical;
    } catch (const DataError& e) {
        io.err << "data error: " << e.what() << "\n";
        return kData;
    } catch (const FormatError& e) {
        io.err << "data error: " << e.what() << "\n";
        return kData;
    } catch (const EmptyFrustum& e) {
        io.err << "data error: " << e.what() << "\n";
        return kData;
    } catch (const json::exception& e) {
        io.err << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const std::exception& e) {
        io.err << "error: " << e.what() << "\n";
        return kOther;
    }
    return kOther;
}

} // namespace pnemb::cli
