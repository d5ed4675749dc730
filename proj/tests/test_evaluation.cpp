#include <gtest/gtest.h>

#include <fstream>
#include <numbers>
#include <sstream>

#include "oracles.hpp"
#include "pnemb/evaluation.hpp"
#include "pnemb/random.hpp"

using namespace pnemb;

namespace {

constexpr double kPi = std::numbers::pi;

OrientedBox3D unit_box(double x = 0, double y = 0, double z = 0, double yaw = 0) {
    return OrientedBox3D::make({x, y, z}, {1, 1, 1}, yaw);
}

OrientedBox3D random_box(Rng& rng, double spread = 1.0) {
    return OrientedBox3D::make({rng.uniform(-spread, spread), rng.uniform(-0.5, 0.5), rng.uniform(-spread, spread)},
                               {rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)},
                               rng.uniform(-kPi, kPi));
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST(Yaw, NormalisedToHalfOpenInterval) {
    EXPECT_DOUBLE_EQ(normalize_yaw(kPi), kPi);
    EXPECT_DOUBLE_EQ(normalize_yaw(-kPi), kPi);
    EXPECT_NEAR(normalize_yaw(3 * kPi / 2), -kPi / 2, 1e-12);
    EXPECT_NEAR(normalize_yaw(0.3 + 4 * kPi), 0.3, 1e-12);
}

TEST(OrientedBox, RejectsDegenerateSize) {
    EXPECT_THROW(OrientedBox3D::make({0, 0, 0}, {0, 1, 1}, 0), InvalidInput);
    EXPECT_THROW(OrientedBox3D::make({0, 0, 0}, {1, -1, 1}, 0), InvalidInput);
}

TEST(OrientedBox, LengthAxisFollowsYaw) {
    const auto b = OrientedBox3D::make({0, 0, 0}, {4, 1, 1}, kPi / 2);
    // yaw pi/2: length runs along -z.
    EXPECT_TRUE(point_in_box(b, {0, 0, -1.9}));
    EXPECT_FALSE(point_in_box(b, {1.9, 0, 0}));
}

TEST(IouBev, HandCases) {
    EXPECT_NEAR(iou_bev(unit_box(), unit_box()), 1.0, 1e-12);
    EXPECT_EQ(iou_bev(unit_box(), unit_box(5, 0, 0)), 0.0);
    EXPECT_NEAR(iou_bev(unit_box(), unit_box(0.5, 0, 0)), 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(iou_bev(unit_box(), unit_box(0, 0, 0.5)), 1.0 / 3.0, 1e-12);
    // Rotating a square by a quarter turn is the same footprint.
    EXPECT_NEAR(iou_bev(unit_box(), unit_box(0, 0, 0, kPi / 2)), 1.0, 1e-12);
}

TEST(IouBev, TouchingEdgesHaveZeroOverlap) {
    EXPECT_EQ(iou_bev(unit_box(), unit_box(1.0, 0, 0)), 0.0);
    EXPECT_EQ(iou_bev(unit_box(), unit_box(1.0, 0, 1.0)), 0.0);
}

TEST(Iou3d, HandCases) {
    EXPECT_NEAR(iou_3d(unit_box(), unit_box()), 1.0, 1e-12);
    EXPECT_EQ(iou_3d(unit_box(), unit_box(0, 2, 0)), 0.0);
    EXPECT_NEAR(iou_3d(unit_box(), unit_box(0, 0.5, 0)), 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(iou_3d(unit_box(), unit_box(0.5, 0, 0)), 1.0 / 3.0, 1e-12);
    // Half shift on two axes: overlap 0.25, union 1.75.
    EXPECT_NEAR(iou_3d(unit_box(), unit_box(0.5, 0.5, 0)), 0.25 / 1.75, 1e-12);
}

TEST(IouBev, MatchesMonteCarloOracle) {
    Rng rng(31);
    Rng mc(32);
    for (int trial = 0; trial < 12; ++trial) {
        const auto a = random_box(rng), b = random_box(rng);
        EXPECT_NEAR(iou_bev(a, b), oracle::mc_iou_bev(a, b, mc, 1000), 2e-3) << "trial " << trial;
    }
}

TEST(Iou3d, MatchesMonteCarloOracle) {
    Rng rng(41);
    Rng mc(42);
    for (int trial = 0; trial < 8; ++trial) {
        const auto a = random_box(rng), b = random_box(rng);
        EXPECT_NEAR(iou_3d(a, b), oracle::mc_iou_3d(a, b, mc, 100), 2e-3) << "trial " << trial;
    }
}

TEST(Iou, SymmetricTranslationRotationAndScaleInvariant) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = random_box(rng), b = random_box(rng);
        for (IouKind kind : {IouKind::Bev, IouKind::Box3d}) {
            const double base = box_iou(a, b, kind);
            ASSERT_GE(base, 0.0);
            ASSERT_LE(base, 1.0);
            EXPECT_NEAR(box_iou(b, a, kind), base, 1e-12);

            const double tx = rng.uniform(-50, 50), ty = rng.uniform(-5, 5), tz = rng.uniform(-50, 50);
            auto shift = [&](OrientedBox3D box) {
                box.center = {box.center[0] + tx, box.center[1] + ty, box.center[2] + tz};
                return box;
            };
            EXPECT_NEAR(box_iou(shift(a), shift(b), kind), base, 1e-9);

            const double angle = rng.uniform(-kPi, kPi);
            EXPECT_NEAR(box_iou(rotate_box_about_y(a, angle), rotate_box_about_y(b, angle), kind), base, 1e-9);

            const double s = rng.uniform(0.1, 10);
            auto scale = [&](const OrientedBox3D& box) {
                return OrientedBox3D::make({box.center[0] * s, box.center[1] * s, box.center[2] * s},
                                           {box.size[0] * s, box.size[1] * s, box.size[2] * s}, box.yaw);
            };
            EXPECT_NEAR(box_iou(scale(a), scale(b), kind), base, 1e-9);
        }
    }
}

TEST(Iou, ContainedBoxIsVolumeRatio) {
    const auto outer = OrientedBox3D::make({0, 0, 0}, {4, 2, 2}, 0.4);
    const auto inner = OrientedBox3D::make({0.2, 0.1, -0.1}, {1, 1, 1}, 1.3);
    EXPECT_NEAR(iou_3d(outer, inner), 1.0 / 16.0, 1e-12);
    EXPECT_NEAR(iou_bev(outer, inner), 1.0 / 8.0, 1e-12);
}

TEST(Rotation, InverseRecoversPoint) {
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const std::array<double, 3> p{rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-9, 9)};
        const double a = rng.uniform(-kPi, kPi);
        const auto q = rotate_about_y(rotate_about_y(p, a), -a);
        for (int d = 0; d < 3; ++d) EXPECT_NEAR(q[d], p[d], 1e-12);
    }
    // Rotation adds to the azimuth atan2(x, z).
    const auto r = rotate_about_y({0, 0, 1}, 0.3);
    EXPECT_NEAR(std::atan2(r[0], r[2]), 0.3, 1e-12);
}

TEST(Rotation, PointInBoxConsistentUnderJointRotation) {
    Rng rng(3);
    for (int i = 0; i < 2000; ++i) {
        const auto b = random_box(rng);
        const std::array<double, 3> p{rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(-3, 3)};
        const double a = rng.uniform(-kPi, kPi);
        const bool inside = point_in_box(b, p, 0.0);
        // Stay away from faces where rounding could flip the answer.
        if (point_in_box(b, p, 1e-9) != point_in_box(b, p, -1e-9)) continue;
        EXPECT_EQ(point_in_box(rotate_box_about_y(b, a), rotate_about_y(p, a), 0.0), inside);
    }
}

TEST(Thresholds, PerClass) {
    EXPECT_EQ(iou_threshold(ObjectClass::Car), 0.7);
    EXPECT_EQ(iou_threshold(ObjectClass::Pedestrian), 0.5);
    EXPECT_EQ(iou_threshold(ObjectClass::Cyclist), 0.5);
    EXPECT_EQ(parse_class("Cyclist"), ObjectClass::Cyclist);
    EXPECT_FALSE(parse_class("Van").has_value());
}

TEST(AveragePrecision, PerfectDetectionsGiveOne) {
    std::vector<std::vector<GroundTruthBox>> gts{{{unit_box(0, 0, 10), Difficulty::Easy}},
                                                 {{unit_box(3, 0, 10), Difficulty::Moderate},
                                                  {unit_box(-3, 0, 12), Difficulty::Easy}}};
    std::vector<std::vector<ScoredBox>> dets{{{gts[0][0].box, 0.9}}, {{gts[1][0].box, 0.8}, {gts[1][1].box, 0.7}}};
    for (auto interp : {ApInterpolation::Eleven, ApInterpolation::Forty}) {
        auto curve = average_precision(dets, gts, 0.7, Difficulty::Hard, IouKind::Box3d, interp);
        ASSERT_TRUE(curve);
        EXPECT_DOUBLE_EQ(curve->ap, 1.0);
    }
}

TEST(AveragePrecision, NoDetectionsGiveZero) {
    std::vector<std::vector<GroundTruthBox>> gts{{{unit_box(), Difficulty::Easy}}};
    auto curve = average_precision({{}}, gts, 0.7, Difficulty::Easy);
    ASSERT_TRUE(curve);
    EXPECT_EQ(curve->ap, 0.0);
}

TEST(AveragePrecision, NoGroundTruthInTierIsAbsent) {
    std::vector<std::vector<GroundTruthBox>> gts{{{unit_box(), Difficulty::Hard}}};
    std::vector<std::vector<ScoredBox>> dets{{{unit_box(), 0.5}}};
    EXPECT_FALSE(average_precision(dets, gts, 0.7, Difficulty::Moderate).has_value());
    EXPECT_FALSE(average_precision({{}}, {{}}, 0.7, Difficulty::Hard).has_value());
}

TEST(AveragePrecision, DontCareMatchIsNeitherTpNorFp) {
    std::vector<std::vector<GroundTruthBox>> gts{{{unit_box(0, 0, 10), Difficulty::Easy},
                                                  {unit_box(5, 0, 10), Difficulty::Hard}}};
    std::vector<std::vector<ScoredBox>> dets{{{unit_box(5, 0, 10), 0.95}, {unit_box(0, 0, 10), 0.5}}};
    auto easy = average_precision(dets, gts, 0.7, Difficulty::Easy);
    ASSERT_TRUE(easy);
    EXPECT_DOUBLE_EQ(easy->ap, 1.0);
    EXPECT_EQ(easy->thresholds.size(), 1u);
}

TEST(AveragePrecision, DuplicatesCountOnce) {
    std::vector<std::vector<GroundTruthBox>> gts{{{unit_box(), Difficulty::Easy}}};
    std::vector<std::vector<ScoredBox>> dets{{{unit_box(), 0.9}, {unit_box(0.01, 0, 0), 0.8}, {unit_box(), 0.7}}};
    auto out = match_frame(dets[0], gts[0], 0.7, Difficulty::Easy, IouKind::Box3d);
    EXPECT_EQ(std::count(out.begin(), out.end(), MatchOutcome::TruePositive), 1);
    EXPECT_EQ(out[0], MatchOutcome::TruePositive);
    auto curve = average_precision(dets, gts, 0.7, Difficulty::Easy);
    EXPECT_DOUBLE_EQ(curve->precision.back(), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(curve->recall.back(), 1.0);
}

TEST(AveragePrecision, HandBuiltThreeFrameScenario) {
    // Frame 0: one hit plus a lower-scored duplicate. Frame 1: one ground truth
    // missed entirely. Frame 2: one hit and one stray detection.
    std::vector<std::vector<GroundTruthBox>> gts{
        {{unit_box(0, 0, 10), Difficulty::Easy}},
        {{unit_box(2, 0, 15), Difficulty::Easy}},
        {{unit_box(-2, 0, 8), Difficulty::Easy}},
    };
    std::vector<std::vector<ScoredBox>> dets{
        {{unit_box(0, 0, 10), 0.9}, {unit_box(0.05, 0, 10), 0.6}},
        {},
        {{unit_box(-2, 0, 8), 0.8}, {unit_box(6, 0, 20), 0.7}},
    };
    auto curve = average_precision(dets, gts, 0.7, Difficulty::Hard);
    ASSERT_TRUE(curve);
    // Ranked: TP(0.9) TP(0.8) FP(0.7) FP(0.6); recall tops out at 2/3.
    EXPECT_EQ(curve->precision, (std::vector<double>{1.0, 1.0, 2.0 / 3.0, 0.5}));
    EXPECT_EQ(curve->recall, (std::vector<double>{1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0}));
    EXPECT_DOUBLE_EQ(curve->ap, 7.0 / 11.0);
    EXPECT_EQ(curve->ap, oracle::ap_enumeration(dets, gts, 0.7, Difficulty::Hard, IouKind::Box3d,
                                                 ApInterpolation::Eleven));
}

TEST(AveragePrecision, MatchesEnumerationOracle) {
    Rng rng(17);
    for (int scenario = 0; scenario < 50; ++scenario) {
        const std::size_t frames = 1 + rng.below(3);
        std::vector<std::vector<GroundTruthBox>> gts(frames);
        std::vector<std::vector<ScoredBox>> dets(frames);
        for (std::size_t f = 0; f < frames; ++f) {
            const std::size_t ng = rng.below(4);
            for (std::size_t g = 0; g < ng; ++g) {
                gts[f].push_back({random_box(rng, 2.0), static_cast<Difficulty>(rng.below(3))});
            }
            const std::size_t nd = rng.below(7);
            for (std::size_t d = 0; d < nd; ++d) {
                OrientedBox3D box = random_box(rng, 2.0);
                if (!gts[f].empty() && rng.uniform() < 0.6) {
                    box = gts[f][rng.below(gts[f].size())].box;
                    box.center[0] += rng.normal(0, 0.1);
                    box.center[2] += rng.normal(0, 0.1);
                }
                // Coarse scores so ties occur.
                dets[f].push_back({box, std::round(rng.uniform() * 5) / 5});
            }
        }
        for (auto tier : {Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard}) {
            for (auto interp : {ApInterpolation::Eleven, ApInterpolation::Forty}) {
                for (auto kind : {IouKind::Bev, IouKind::Box3d}) {
                    auto curve = average_precision(dets, gts, 0.5, tier, kind, interp);
                    const bool any = std::any_of(gts.begin(), gts.end(), [&](const auto& fr) {
                        return std::any_of(fr.begin(), fr.end(), [&](const auto& g) {
                            return static_cast<int>(g.difficulty) <= static_cast<int>(tier);
                        });
                    });
                    ASSERT_EQ(curve.has_value(), any);
                    if (curve) {
                        EXPECT_EQ(curve->ap, oracle::ap_enumeration(dets, gts, 0.5, tier, kind, interp));
                    }
                }
            }
        }
    }
}

TEST(AveragePrecision, CurveInvariants) {
    Rng rng(23);
    for (int scenario = 0; scenario < 30; ++scenario) {
        std::vector<std::vector<GroundTruthBox>> gts(2);
        std::vector<std::vector<ScoredBox>> dets(2);
        for (int f = 0; f < 2; ++f) {
            for (int g = 0; g < 3; ++g) gts[f].push_back({random_box(rng, 3.0), Difficulty::Easy});
            for (int d = 0; d < 5; ++d) dets[f].push_back({random_box(rng, 3.0), rng.uniform()});
        }
        auto curve = average_precision(dets, gts, 0.3, Difficulty::Hard, IouKind::Bev);
        ASSERT_TRUE(curve);
        EXPECT_TRUE(std::is_sorted(curve->recall.begin(), curve->recall.end()));
        EXPECT_TRUE(std::is_sorted(curve->thresholds.rbegin(), curve->thresholds.rend()));
        for (double p : curve->precision) {
            EXPECT_GE(p, 0.0);
            EXPECT_LE(p, 1.0);
        }
        EXPECT_GE(curve->ap, 0.0);
        EXPECT_LE(curve->ap, 1.0);
    }
}

TEST(AveragePrecision, RaisingTruePositiveScoreNeverLowersAp) {
    Rng rng(29);
    for (int scenario = 0; scenario < 100; ++scenario) {
        // Ground truths spaced far apart so each detection can only match its own.
        std::vector<std::vector<GroundTruthBox>> gts(1);
        std::vector<std::vector<ScoredBox>> dets(1);
        for (int g = 0; g < 5; ++g) gts[0].push_back({unit_box(10.0 * g, 0, 20), Difficulty::Easy});
        for (int d = 0; d < 8; ++d) {
            const bool hit = rng.uniform() < 0.6;
            const double x = hit ? 10.0 * static_cast<double>(rng.below(5)) + rng.normal(0, 0.02) : 5.0 + 10.0 * d;
            dets[0].push_back({unit_box(x, 0, 20), rng.uniform()});
        }
        const auto before = average_precision(dets, gts, 0.7, Difficulty::Easy);
        auto outcome = match_frame(dets[0], gts[0], 0.7, Difficulty::Easy, IouKind::Box3d);
        for (std::size_t d = 0; d < dets[0].size(); ++d) {
            if (outcome[d] != MatchOutcome::TruePositive) continue;
            auto raised = dets;
            raised[0][d].score = std::min(1.0, raised[0][d].score + rng.uniform(0, 0.5));
            // The raised detection must still be the one that claims its ground truth.
            auto re = match_frame(raised[0], gts[0], 0.7, Difficulty::Easy, IouKind::Box3d);
            if (re[d] != MatchOutcome::TruePositive) continue;
            EXPECT_GE(average_precision(raised, gts, 0.7, Difficulty::Easy)->ap, before->ap);
        }
    }
}

TEST(AveragePrecision, RejectsMismatchedFramesAndNonFiniteScores) {
    EXPECT_THROW(average_precision({{}, {}}, {{}}, 0.7, Difficulty::Easy), InvalidInput);
    std::vector<std::vector<GroundTruthBox>> gts{{{unit_box(), Difficulty::Easy}}};
    std::vector<std::vector<ScoredBox>> dets{{{unit_box(), std::nan("")}}};
    EXPECT_THROW(average_precision(dets, gts, 0.7, Difficulty::Easy), InvalidInput);
}

TEST(SegmentationMetrics, HandCases) {
    auto same = segmentation_metrics({1, 0, 1, 0}, {1, 0, 1, 0});
    EXPECT_EQ(same.accuracy, 1.0);
    EXPECT_EQ(same.foreground_iou, 1.0);
    EXPECT_EQ(segmentation_metrics({1, 0, 1, 0}, {0, 1, 0, 1}).accuracy, 0.0);
    auto half = segmentation_metrics({1, 1, 0, 0}, {0, 1, 1, 0});
    EXPECT_DOUBLE_EQ(half.foreground_iou, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(half.accuracy, 0.5);
    EXPECT_EQ(segmentation_metrics({0, 0}, {0, 0}).foreground_iou, 1.0);
    EXPECT_THROW(segmentation_metrics({0}, {0, 1}), InvalidInput);
}

TEST(ApTable, MatchesGoldenLayout) {
    std::vector<ApTableRow> rows(2);
    rows[0].method = "baseline";
    rows[0].ap = {0.8062, 0.6465, 0.5669, 0.5097, 0.4237, 0.3860, 0.7177, 0.5639, 0.5005};
    rows[1].method = "eb_fcr";
    rows[1].ap = {0.853, 0.7, std::nullopt, 1.0, 0.0, 0.5, std::nullopt, std::nullopt, 0.12345};
    const std::string table = format_ap_table("3D AP (val)", rows);
    EXPECT_EQ(table, read_text(std::string(PNEMB_FIXTURE_DIR) + "/ap_table.txt"));
    // Every line of the body has the same width.
    std::istringstream in(table);
    std::string line;
    std::getline(in, line);
    std::size_t width = 0;
    while (std::getline(in, line)) {
        if (width == 0) width = line.size();
        EXPECT_EQ(line.size(), width) << line;
    }
}
