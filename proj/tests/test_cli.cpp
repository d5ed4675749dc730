#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "pnemb/cli.hpp"

using namespace pnemb;
namespace fs = std::filesystem;

namespace {

struct Result {
    int rc;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "pnemb");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int rc = cli::run(static_cast<int>(argv.size()), argv.data(), {out, err});
    return {rc, out.str(), err.str()};
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = fs::temp_directory_path() / ("pnemb_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    std::string path(const std::string& name) const { return (dir / name).string(); }

    // Small enough to train in well under a second.
    std::vector<std::string> quick(std::vector<std::string> extra) const {
        std::vector<std::string> args = {"--n-points", "16", "--widths", "tiny", "--c-out", "4", "--k", "3",
                                         "--epochs", "1", "--batch", "4"};
        args.insert(args.end(), extra.begin(), extra.end());
        return args;
    }

    Result train(const std::string& out, std::vector<std::string> extra = {}) {
        std::vector<std::string> args = {"train", "--data", "synth://seed=7,count=6", "--out", path(out)};
        for (auto& a : quick(extra)) args.push_back(a);
        return run_cli(args);
    }

    std::string slurp(const std::string& name) const { return bin::read_file(path(name)); }

    fs::path dir;
};

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

} // namespace

TEST_F(Cli, TrainWritesCheckpointMetricsAndManifest) {
    const auto r = train("t", {"--variant", "eb_fcr"});
    ASSERT_EQ(r.rc, 0) << r.err;
    for (const char* f : {"t/checkpoint.pnck", "t/metrics.jsonl", "t/params.txt", "t/manifest.json"}) {
        EXPECT_TRUE(fs::exists(path(f))) << f;
    }
    const auto m = cli::json::parse(slurp("t/manifest.json"));
    EXPECT_EQ(m["command"], "train");
    EXPECT_EQ(m["config"]["variant"], "eb_fcr");
    EXPECT_EQ(m["inputs"]["data"], "synth://seed=7,count=6");
    EXPECT_EQ(m["artifacts"]["checkpoint.pnck"], cli::file_hash(path("t/checkpoint.pnck")));
    EXPECT_EQ(lines_of(slurp("t/metrics.jsonl")).size(), 1u);
}

TEST_F(Cli, MissingDataPathIsADataErrorNamingThePath) {
    const auto r = run_cli({"train", "--data", path("absent.pnds"), "--out", path("t")});
    EXPECT_EQ(r.rc, cli::kData);
    EXPECT_NE(r.err.find(path("absent.pnds")), std::string::npos) << r.err;
}

TEST_F(Cli, BaselineManifestHasNoEmbeddingBlock) {
    ASSERT_EQ(train("b", {"--variant", "baseline"}).rc, 0);
    const auto params = slurp("b/params.txt");
    EXPECT_EQ(params.find("seg.block"), std::string::npos);
    EXPECT_EQ(params.find("seg.fcr"), std::string::npos);
    ASSERT_EQ(train("e", {"--variant", "eb"}).rc, 0);
    EXPECT_NE(slurp("e/params.txt").find("seg.block.embed1"), std::string::npos);
}

TEST_F(Cli, IdenticalRunsGiveIdenticalCheckpoints) {
    ASSERT_EQ(train("a").rc, 0);
    ASSERT_EQ(train("b").rc, 0);
    EXPECT_EQ(slurp("a/checkpoint.pnck"), slurp("b/checkpoint.pnck"));
    ASSERT_EQ(train("c", {"--seed", "1"}).rc, 0);
    EXPECT_NE(slurp("a/checkpoint.pnck"), slurp("c/checkpoint.pnck"));
}

TEST_F(Cli, ConfigFileIsOverriddenByFlags) {
    std::ofstream(path("cfg.json")) << "{\n  \"variant\": \"baseline\",\n  \"k\": 5,\n  \"seed\": 3\n}\n";
    const auto r = train("t", {"--config", path("cfg.json")});  // quick() passes --k 3
    ASSERT_EQ(r.rc, 0) << r.err;
    const auto m = cli::json::parse(slurp("t/manifest.json"));
    EXPECT_EQ(m["config"]["variant"], "baseline");
    EXPECT_EQ(m["config"]["k"], 3);
    EXPECT_EQ(m["config"]["seed"], 3);
}

TEST_F(Cli, ConfigErrorsNameFieldOrLine) {
    std::ofstream(path("bad_field.json")) << "{\"batch\": 4}";
    auto r = train("t", {"--config", path("bad_field.json")});
    EXPECT_EQ(r.rc, cli::kConfig);
    EXPECT_NE(r.err.find("'batch'"), std::string::npos) << r.err;

    std::ofstream(path("bad_type.json")) << "{\"lr0\": \"fast\"}";
    r = train("t", {"--config", path("bad_type.json")});
    EXPECT_EQ(r.rc, cli::kConfig);
    EXPECT_NE(r.err.find("'lr0'"), std::string::npos) << r.err;

    std::ofstream(path("bad_syntax.json")) << "{\n  \"k\": 4,\n  \"seed\" 3\n}\n";
    r = train("t", {"--config", path("bad_syntax.json")});
    EXPECT_EQ(r.rc, cli::kConfig);
    EXPECT_NE(r.err.find("bad_syntax.json:3:"), std::string::npos) << r.err;
}

TEST_F(Cli, InvalidFlagValuesAreConfigErrors) {
    EXPECT_EQ(train("t", {"--variant", "resnet"}).rc, cli::kConfig);
    EXPECT_EQ(train("t", {"--ap-interp", "12"}).rc, cli::kConfig);
    EXPECT_EQ(train("t", {"--batch", "0"}).rc, cli::kConfig);
    EXPECT_EQ(run_cli({"train", "--out", path("t")}).rc, cli::kConfig);  // --data is required
    EXPECT_EQ(run_cli({"train", "--data", "synth://seed=1,colour=red", "--out", path("t")}).rc, cli::kData);
}

TEST_F(Cli, EvalWritesBothTablesInTheGoldenLayout) {
    ASSERT_EQ(train("t").rc, 0);
    const auto r = run_cli({"eval", "--checkpoint", path("t/checkpoint.pnck"), "--data", "synth://seed=9,count=6",
                            "--out", path("e")});
    ASSERT_EQ(r.rc, 0) << r.err;
    const auto text = slurp("e/eval.txt");
    EXPECT_NE(text.find("3D AP"), std::string::npos);
    EXPECT_NE(text.find("BEV AP"), std::string::npos);
    // Header rows follow the golden fixture.
    const auto golden = lines_of(bin::read_file(std::string(PNEMB_FIXTURE_DIR) + "/ap_table.txt"));
    const auto got = lines_of(text);
    ASSERT_GE(got.size(), 4u);
    EXPECT_EQ(got[1], golden[1]);
    EXPECT_EQ(got[2], golden[2]);
    EXPECT_EQ(got[3].size(), golden[3].size());
    EXPECT_TRUE(fs::exists(path("e/curves.tsv")));
    EXPECT_EQ(lines_of(slurp("e/curves.tsv"))[0], "class\tdifficulty\tkind\trecall\tprecision");
}

TEST_F(Cli, EvalRefusesOtherVariantWithManifestDiff) {
    ASSERT_EQ(train("t", {"--variant", "eb_fcr"}).rc, 0);
    const auto r = run_cli({"eval", "--checkpoint", path("t/checkpoint.pnck"), "--data", "synth://seed=9,count=4",
                            "--variant", "baseline"});
    EXPECT_EQ(r.rc, cli::kCheckpoint);
    EXPECT_NE(r.err.find("- seg.shared1.w"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("+ seg.block"), std::string::npos) << r.err;
    // Matching flags are accepted.
    EXPECT_EQ(run_cli({"eval", "--checkpoint", path("t/checkpoint.pnck"), "--data", "synth://seed=9,count=4",
                       "--variant", "eb_fcr", "--ap-interp", "40"})
                  .rc,
              0);
}

TEST_F(Cli, InferWritesOneLabelLinePerFrustum) {
    ASSERT_EQ(train("t").rc, 0);
    const auto r = run_cli({"infer", "--checkpoint", path("t/checkpoint.pnck"), "--data", "synth://seed=9,count=5",
                            "--out", path("i")});
    ASSERT_EQ(r.rc, 0) << r.err;
    const auto lines = lines_of(slurp("i/detections.txt"));
    ASSERT_EQ(lines.size(), 5u);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        EXPECT_EQ(lines[i].rfind("synth" + std::to_string(i) + " ", 0), 0u) << lines[i];
        std::string frame, rest;
        std::istringstream in(lines[i]);
        in >> frame;
        std::getline(in, rest);
        rest = rest.substr(1, rest.find(" #") == std::string::npos ? std::string::npos : rest.find(" #") - 1);
        const auto l = parse_label_line(rest, "detection");
        EXPECT_TRUE(l.score.has_value());
    }
}

TEST_F(Cli, AblateReportsTheSixRowsUnderOneSeed) {
    std::vector<std::string> args = {"ablate", "--data", "synth://seed=3,count=4", "--out", path("a"), "--seed", "5"};
    for (auto& a : quick({})) args.push_back(a);
    const auto r = run_cli(args);
    ASSERT_EQ(r.rc, 0) << r.err;
    const auto tsv = lines_of(slurp("a/ablation.tsv"));
    ASSERT_EQ(tsv.size(), 7u);
    const std::vector<std::string> rows = {"0\t0\t0", "0\t0\t1", "1\t0\t0", "0\t1\t0", "1\t1\t0", "1\t1\t1"};
    for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(tsv[i + 1].rfind(rows[i], 0), 0u) << tsv[i + 1];
    for (const auto& t : ablation_rows()) {
        const auto m = cli::json::parse(slurp("a/" + t.name() + "/manifest.json"));
        EXPECT_EQ(m["seed"], 5);
        EXPECT_EQ(m["config"]["variant"], t.name());
    }
    // Each row replays from its own manifest.
    const auto rep = run_cli({"replay", "--manifest", path("a/st+lfe/manifest.json"), "--out", path("replay")});
    EXPECT_EQ(rep.rc, 0) << rep.out << rep.err;
}

TEST_F(Cli, KsweepEmitsThreePointsPerK) {
    std::vector<std::string> args = {"ksweep", "--data", "synth://seed=3,count=4", "--out", path("k"), "--k-list",
                                     "2,3,5"};
    for (auto& a : quick({})) args.push_back(a);
    const auto r = run_cli(args);
    ASSERT_EQ(r.rc, 0) << r.err;
    const auto tsv = lines_of(slurp("k/ksweep.tsv"));
    ASSERT_EQ(tsv.size(), 1u + 3 * 3);
    EXPECT_EQ(tsv[1].rfind("2\tEasy\t", 0), 0u);
    EXPECT_EQ(tsv[9].rfind("5\tHard\t", 0), 0u);
}

TEST_F(Cli, KsweepRejectsInvalidKBeforeTraining) {
    for (const char* ks : {"2,0,4", "2,17", "4,x"}) {
        std::vector<std::string> args = {"ksweep", "--data", "synth://seed=3,count=4", "--out", path("k"), "--k-list",
                                         ks};
        for (auto& a : quick({})) args.push_back(a);
        EXPECT_EQ(run_cli(args).rc, cli::kConfig) << ks;
        EXPECT_FALSE(fs::exists(path("k"))) << ks;
    }
}

TEST(CliDefaults, KsweepDefaultList) {
    EXPECT_EQ(cli::parse_k_list("2,4,5,8,16"), (std::vector<std::size_t>{2, 4, 5, 8, 16}));
    cli::RunConfig cfg;
    EXPECT_EQ(cfg.k, 4u);
    EXPECT_EQ(cfg.c_out, 64u);
    EXPECT_EQ(cfg.batch_size, 32u);
    EXPECT_EQ(cfg.epochs, 200u);
    EXPECT_EQ(cfg.lr0, 0.001);
    EXPECT_EQ(cfg.ap_interp, 11);
}

TEST_F(Cli, GradcheckPassesAndListsFamilies) {
    const auto r = run_cli({"gradcheck", "--seeds", "1", "--out", path("g")});
    EXPECT_EQ(r.rc, 0) << r.out;
    std::size_t ok_lines = 0;
    for (const auto& l : lines_of(r.out)) ok_lines += l.rfind("ok ", 0) == 0;
    EXPECT_GE(ok_lines, 8u);
}

TEST_F(Cli, ReplayReproducesAndDetectsTampering) {
    ASSERT_EQ(train("t").rc, 0);
    auto r = run_cli({"replay", "--manifest", path("t/manifest.json"), "--out", path("r1")});
    EXPECT_EQ(r.rc, 0) << r.out << r.err;
    EXPECT_NE(r.out.find("identical checkpoint.pnck"), std::string::npos);

    auto m = cli::json::parse(slurp("t/manifest.json"));
    m["artifacts"]["metrics.jsonl"] = "0000000000000000";
    std::ofstream(path("t/manifest.json"), std::ios::trunc) << m.dump(2);
    r = run_cli({"replay", "--manifest", path("t/manifest.json"), "--out", path("r2")});
    EXPECT_EQ(r.rc, cli::kOther);
    EXPECT_NE(r.out.find("DIFFERS   metrics.jsonl"), std::string::npos) << r.out;
}

TEST_F(Cli, DatasetFileInputMatchesSynthUri) {
    SynthSpec spec;
    spec.n_points = 16;
    save_dataset(path("d.pnds"), synth_dataset(7, 6, spec));
    ASSERT_EQ(train("uri").rc, 0);
    std::vector<std::string> args = {"train", "--data", path("d.pnds"), "--out", path("file")};
    for (auto& a : quick({})) args.push_back(a);
    ASSERT_EQ(run_cli(args).rc, 0);
    EXPECT_EQ(slurp("uri/checkpoint.pnck"), slurp("file/checkpoint.pnck"));
}

TEST(EvalSemantics, GroundTruthAsDetectionsScoresOne) {
    SynthSpec spec;
    spec.n_points = 16;
    const auto data = synth_dataset(12, 30, spec);
    std::vector<DetectionOutput> dets(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        dets[i].box = data[i].camera_box();
        dets[i].confidence = 1.0;
    }
    for (auto kind : {IouKind::Box3d, IouKind::Bev}) {
        const auto row = ap_row("gt", data, dets, kind, ApInterpolation::Eleven);
        std::size_t present = 0;
        for (const auto& v : row.ap) {
            if (v) {
                EXPECT_DOUBLE_EQ(*v, 1.0);
                ++present;
            }
        }
        EXPECT_GT(present, 0u);
    }
}

TEST(EvalSemantics, NoDetectionsScoreZero) {
    SynthSpec spec;
    spec.n_points = 16;
    const auto data = synth_dataset(12, 10, spec);
    std::vector<std::vector<ScoredBox>> dets(data.size());
    std::vector<std::vector<GroundTruthBox>> gts(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) gts[i].push_back({data[i].camera_box(), Difficulty::Easy});
    const auto curve = average_precision(dets, gts, 0.7, Difficulty::Hard, IouKind::Box3d);
    ASSERT_TRUE(curve.has_value());
    EXPECT_EQ(curve->ap, 0.0);
}

TEST_F(Cli, GoldenCheckpointStillLoads) {
    const std::string ck = std::string(PNEMB_FIXTURE_DIR) + "/checkpoint_tiny.pnck";
    const auto r = run_cli({"infer", "--checkpoint", ck, "--data", "synth://seed=21,count=4", "--n-points", "16",
                            "--out", path("i")});
    ASSERT_EQ(r.rc, 0) << r.err;
    EXPECT_EQ(lines_of(slurp("i/detections.txt")).size(), 4u);
}
