#include <catch2/catch_amalgamated.hpp>

#include "dyss/metrics.hpp"

#include "test_helpers.hpp"

using namespace dyss;

namespace {

Detection det(double x, double y, double score, int cls = 0, std::size_t scene = 0) {
    Detection d;
    d.box.x = x;
    d.box.y = y;
    d.box.w = d.box.l = 2.0;
    d.box.h = 1.5;
    d.score = score;
    d.class_id = cls;
    d.scene = scene;
    return d;
}

GtBox gt(double x, double y, int cls = 0, std::size_t scene = 0) {
    GtBox g;
    g.box.x = x;
    g.box.y = y;
    g.box.w = g.box.l = 2.0;
    g.box.h = 1.5;
    g.class_id = cls;
    g.scene = scene;
    return g;
}

}  // namespace

TEST_CASE("exact predictions all match at the 0.5 m threshold") {
    std::vector<Detection> dets{det(1, 1, 0.9), det(-3, 2, 0.8)};
    std::vector<GtBox> gts{gt(1, 1), gt(-3, 2)};
    auto m = match_predictions(dets, gts, 0.5);
    CHECK(m.size() == 2);
}

TEST_CASE("empty predictions produce zero matches") {
    std::vector<GtBox> gts{gt(0, 0)};
    CHECK(match_predictions({}, gts, 2.0).empty());
}

TEST_CASE("with one GT and two candidates in range, the higher score wins") {
    std::vector<Detection> dets{det(0.3, 0, 0.4), det(-0.3, 0, 0.7)};
    std::vector<GtBox> gts{gt(0, 0)};
    auto m = match_predictions(dets, gts, 2.0);
    REQUIRE(m.size() == 1);
    CHECK(m[0].det == 1);
}

TEST_CASE("matches never pair across scenes") {
    std::vector<Detection> dets{det(0, 0, 0.9, 0, /*scene=*/0)};
    std::vector<GtBox> gts{gt(0, 0, 0, /*scene=*/1)};
    CHECK(match_predictions(dets, gts, 4.0).empty());
}

TEST_CASE("perfect detector has AP 1, detector with no TPs has AP 0") {
    std::vector<Detection> dets{det(0, 0, 0.9), det(5, 5, 0.8)};
    CHECK(average_precision(dets, {true, true}, 2) == 1.0);
    CHECK(average_precision(dets, {false, false}, 2) == 0.0);
}

TEST_CASE("AP hand cases: TP-then-FP is 1.0, FP-then-TP is 0.5 interpolated") {
    std::vector<Detection> a{det(0, 0, 0.9), det(9, 9, 0.5)};
    CHECK_THAT(average_precision(a, {true, false}, 1), Catch::Matchers::WithinAbs(1.0, 1e-12));
    std::vector<Detection> b{det(9, 9, 0.9), det(0, 0, 0.5)};
    CHECK_THAT(average_precision(b, {false, true}, 1), Catch::Matchers::WithinAbs(0.5, 1e-12));
}

TEST_CASE("AP monotonicity: a TP never hurts, an FP never helps") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        std::size_t n = 3 + rng.index(6);
        std::vector<Detection> dets;
        std::vector<bool> tp;
        std::size_t n_tp = 0;
        for (std::size_t i = 0; i < n; ++i) {
            dets.push_back(det(0, 0, rng.uniform(0.01, 0.99)));
            tp.push_back(rng.bernoulli(0.5));
            n_tp += tp.back() ? 1 : 0;
        }
        std::size_t n_gt = n_tp + 1 + rng.index(3);
        double base = average_precision(dets, tp, n_gt);

        auto with_tp = dets;
        auto tp2 = tp;
        with_tp.push_back(det(0, 0, rng.uniform(0.01, 0.99)));
        tp2.push_back(true);
        CHECK(average_precision(with_tp, tp2, n_gt) >= base - 1e-12);

        auto with_fp = dets;
        auto tp3 = tp;
        with_fp.push_back(det(0, 0, rng.uniform(0.01, 0.99)));
        tp3.push_back(false);
        CHECK(average_precision(with_fp, tp3, n_gt) <= base + 1e-12);
    }
}

TEST_CASE("TP errors: exact match is all zeros") {
    std::vector<Detection> dets{det(1, 2, 0.9)};
    std::vector<GtBox> gts{gt(1, 2)};
    auto m = match_predictions(dets, gts, 2.0);
    auto e = tp_errors(dets, gts, m);
    CHECK(e.ate == 0.0);
    CHECK(e.ase == 0.0);
    CHECK(e.aoe == 0.0);
    CHECK(e.ave == 0.0);
    CHECK_FALSE(e.no_matches);
}

TEST_CASE("TP errors: quarter-turn yaw gives AOE pi/2") {
    const double pi = 3.14159265358979323846;
    std::vector<Detection> dets{det(0, 0, 0.9)};
    dets[0].box.theta = pi / 2.0;
    std::vector<GtBox> gts{gt(0, 0)};
    auto e = tp_errors(dets, gts, match_predictions(dets, gts, 2.0));
    CHECK_THAT(e.aoe, Catch::Matchers::WithinAbs(pi / 2.0, 1e-12));
}

TEST_CASE("TP errors: half-scale box has ASE 1 - 1/8") {
    std::vector<Detection> dets{det(0, 0, 0.9)};
    dets[0].box.w = 1.0;
    dets[0].box.l = 1.0;
    dets[0].box.h = 0.75;
    std::vector<GtBox> gts{gt(0, 0)};
    auto e = tp_errors(dets, gts, match_predictions(dets, gts, 2.0));
    CHECK_THAT(e.ase, Catch::Matchers::WithinAbs(1.0 - 1.0 / 8.0, 1e-12));
}

TEST_CASE("zero matches report worst-case errors with the flag") {
    std::vector<Detection> dets{det(50, 50, 0.9)};
    std::vector<GtBox> gts{gt(0, 0)};
    auto e = tp_errors(dets, gts, match_predictions(dets, gts, 2.0));
    CHECK(e.no_matches);
    CHECK(e.ate == 1.0);
    CHECK(e.ase == 1.0);
}

TEST_CASE("composite reaches 1.0 exactly for a perfect detector") {
    std::vector<Detection> dets;
    std::vector<GtBox> gts;
    for (int c = 0; c < 3; ++c) {
        gts.push_back(gt(3.0 * c, -2.0, c));
        Detection d = det(3.0 * c, -2.0, 0.9, c);
        dets.push_back(d);
    }
    auto rep = evaluate_detections(dets, gts, 4);
    CHECK(rep.mAP == 1.0);
    CHECK(rep.composite == 1.0);
    CHECK(rep.per_class_ap.size() == 3);  // class 3 absent -> skipped
}

TEST_CASE("imperfect detections keep the composite strictly below 1") {
    std::vector<Detection> dets{det(0.4, 0, 0.9), det(10, 10, 0.8)};
    std::vector<GtBox> gts{gt(0, 0)};
    auto rep = evaluate_detections(dets, gts, 4);
    CHECK(rep.composite < 1.0);
    CHECK(rep.mATE > 0.0);
}

TEST_CASE("evaluation is invariant to detection input order") {
    Rng rng(5);
    std::vector<Detection> dets;
    std::vector<GtBox> gts;
    for (int i = 0; i < 12; ++i) {
        dets.push_back(det(rng.uniform(-10, 10), rng.uniform(-10, 10),
                           rng.uniform(0.01, 0.99), static_cast<int>(rng.index(3))));
        if (i % 2 == 0)
            gts.push_back(gt(rng.uniform(-10, 10), rng.uniform(-10, 10),
                             static_cast<int>(rng.index(3))));
    }
    auto rep1 = evaluate_detections(dets, gts, 4);
    std::vector<Detection> shuffled = dets;
    std::reverse(shuffled.begin(), shuffled.end());
    auto rep2 = evaluate_detections(shuffled, gts, 4);
    CHECK(rep1.mAP == rep2.mAP);
    CHECK(rep1.mATE == rep2.mATE);
    CHECK(rep1.composite == rep2.composite);
}

TEST_CASE("report serializes with the documented schema") {
    std::vector<Detection> dets{det(0, 0, 0.9)};
    std::vector<GtBox> gts{gt(0, 0)};
    auto rep = evaluate_detections(dets, gts, 4);
    auto j = report_to_json(rep);
    for (const char* key : {"mAP", "mATE", "mASE", "mAOE", "mAVE", "composite", "per_class_ap",
                            "per_threshold_ap", "n_detections", "n_ground_truth"})
        CHECK(j.contains(key));
}

TEST_CASE("decode_detections takes argmax class and sigmoid score") {
    Tensor logits(Shape{2, 3}, {0.0, 2.0, -1.0, 3.0, -3.0, 1.0});
    Tensor boxes(Shape{2, 9});
    boxes.at(0, kBoxX) = 4.0;
    auto dets = decode_detections(logits, boxes, 7);
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].class_id == 1);
    CHECK_THAT(dets[0].score, Catch::Matchers::WithinAbs(1.0 / (1.0 + std::exp(-2.0)), 1e-12));
    CHECK(dets[0].box.x == 4.0);
    CHECK(dets[0].scene == 7);
    CHECK(dets[1].class_id == 0);
}
