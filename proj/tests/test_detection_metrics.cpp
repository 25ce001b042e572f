#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"

#include "metdet/detection_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace metdet;

namespace {

Heatmap make_heatmap(const std::string& id, std::initializer_list<std::initializer_list<float>> rows) {
  Heatmap h{id, kCellSize, HeatmapGrid(Eigen::Index(rows.size()), Eigen::Index(rows.begin()->size()))};
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (float v : row) h.prob(r, c++) = v;
    ++r;
  }
  return h;
}

std::shared_ptr<const RegionLabeling> labeling(const AnnotationMask& m, double mpp = 1.0) {
  return std::make_shared<RegionLabeling>(m, mpp);
}

}  // namespace

TEST_CASE("nms examples") {
  const Heatmap h = make_heatmap("s", {{0.9f, 0.85f}, {0.2f, 0.1f}});
  const auto one = nms_points(h, 1.0, 0.5);
  REQUIRE(one.size() == 1);
  CHECK(one[0].score == doctest::Approx(0.9));
  CHECK(one[0].x == 64);
  CHECK(one[0].y == 64);
  const auto two = nms_points(h, 0.0, 0.5);
  REQUIRE(two.size() == 2);
  CHECK(two[0].score == doctest::Approx(0.9));
  CHECK(two[1].score == doctest::Approx(0.85));
  CHECK(two[1].x == 192);
  CHECK(nms_points(make_heatmap("s", {{0.5f, 0.2f}}), 1.0, 0.5).empty());

  // Ties go to the smallest (row, col).
  const auto tie = nms_points(make_heatmap("s", {{0.1f, 0.7f}, {0.7f, 0.1f}}), 1.5, 0.5);
  REQUIRE(tie.size() == 1);
  CHECK(tie[0].x == 192);
  CHECK(tie[0].y == 64);
}

TEST_CASE("nms agrees with a sorted greedy replay and keeps its invariants") {
  Rng rng(42);
  for (int trial = 0; trial < 300; ++trial) {
    const Heatmap h = test::random_heatmap(rng, 64);
    const double r = double(rng() % 9);
    const double t = 0.3 + 0.1 * double(rng() % 5);
    const auto pts = nms_points(h, r, t);
    const auto want = test::nms_simulator(h, r, t);
    REQUIRE(pts.size() == want.size());
    for (std::size_t k = 0; k < pts.size(); ++k) {
      REQUIRE(pts[k].y == want[k].first * kCellSize + kCellSize / 2);
      REQUIRE(pts[k].x == want[k].second * kCellSize + kCellSize / 2);
      REQUIRE(pts[k].score == double(h.prob(want[k].first, want[k].second)));
      REQUIRE(pts[k].score > t);
      if (k) REQUIRE(pts[k].score <= pts[k - 1].score);
      for (std::size_t m = 0; m < k; ++m) {
        const double dx = (pts[k].x - pts[m].x) / double(kCellSize), dy = (pts[k].y - pts[m].y) / double(kCellSize);
        REQUIRE(std::sqrt(dx * dx + dy * dy) > r);
      }
    }
    // Every unreported cell above t is covered by some emitted point.
    for (int i = 0; i < h.rows(); ++i)
      for (int j = 0; j < h.cols(); ++j) {
        if (!(h.prob(i, j) > t)) continue;
        bool covered = false;
        for (auto [er, ec] : want) covered |= double((er - i) * (er - i) + (ec - j) * (ec - j)) <= r * r;
        REQUIRE(covered);
      }
    // Lowering t only appends points.
    const auto low = nms_points(h, r, t - 0.2);
    std::vector<DetectionPoint> kept;
    for (const auto& p : low)
      if (p.score > t) kept.push_back(p);
    REQUIRE(kept == pts);
  }
}

TEST_CASE("connected component points") {
  const Heatmap two = make_heatmap("s", {{0.9f, 0.8f, 0.0f}, {0.0f, 0.0f, 0.0f}, {0.6f, 0.7f, 0.0f}});
  const auto pts = cc_points(two, 0.5);
  REQUIRE(pts.size() == 2);
  CHECK(cc_points(make_heatmap("s", {{0.1f, 0.2f}}), 0.5).empty());
  const auto single = cc_points(make_heatmap("s", {{0.1f, 0.2f}, {0.3f, 0.77f}}), 0.5);
  REQUIRE(single.size() == 1);
  CHECK(single[0].score == doctest::Approx(0.77));
  CHECK(single[0].x == 192);
  CHECK(single[0].y == 192);

  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const Heatmap h = test::random_heatmap(rng, 64);
    const double t = 0.4 + 0.1 * double(rng() % 5);
    REQUIRE(int(cc_points(h, t).size()) == test::flood_components(h, t));
  }
}

TEST_CASE("match points to regions") {
  std::map<std::string, SlideTruth> truth;
  truth["t"] = {SlideLabel::kTumor, labeling(test::rect_mask("t", 1024, 1024, 0, 0, 300, 300))};
  truth["n"] = {SlideLabel::kNormal, labeling(AnnotationMask("n", 1024, 1024))};
  truth["u"] = {SlideLabel::kTumor, nullptr};

  const std::vector<DetectionPoint> inside{{"t", 64, 64, 0.6}, {"t", 192, 192, 0.8}};
  const MatchResult m = match_points(inside, truth);
  REQUIRE(m.regions.size() == 1);
  CHECK(m.regions[0].score == std::optional<double>(0.8));
  CHECK(m.false_positives.empty());

  const std::vector<DetectionPoint> mixed{{"n", 64, 64, 0.9}, {"t", 576, 576, 0.7}, {"u", 10, 10, 0.99}};
  const MatchResult fp = match_points(mixed, truth);
  CHECK(fp.false_positives.size() == 2);
  CHECK(fp.ignored_points == 1);
  CHECK_FALSE(fp.regions[0].score.has_value());

  const std::vector<DetectionPoint> unknown{{"zz", 0, 0, 0.9}};
  CHECK_THROWS_AS(match_points(unknown, truth), ArgumentError);
}

TEST_CASE("froc hand scenario and edge cases") {
  // 2 tumors: one hit at 0.9, one missed; one FP at 0.8; two negative slides.
  const std::vector<std::optional<double>> regions{0.9, std::nullopt};
  const std::vector<double> fps{0.8};
  const FrocCurve curve = froc_curve(regions, fps, 2.0);
  for (double rate : kFrocFpRates) CHECK(sensitivity_at(curve, rate) == 0.5);
  CHECK(froc_score(curve) == 0.5);

  const std::vector<std::optional<double>> all_hit{0.7, 0.9, 0.6};
  CHECK(froc_score(froc_curve(all_hit, std::vector<double>{}, 3.0)) == 1.0);
  const std::vector<std::optional<double>> none{std::nullopt, std::nullopt};
  CHECK(froc_score(froc_curve(none, std::vector<double>{}, 3.0)) == 0.0);
  CHECK_THROWS_AS(froc_curve(all_hit, fps, 0.0), ArgumentError);
  CHECK_THROWS_AS(froc_curve(std::vector<std::optional<double>>{}, fps, 1.0), ArgumentError);

  // Curve shape properties on random inputs.
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::optional<double>> rs(1 + rng() % 10);
    for (auto& r : rs)
      if (rng() % 3) r = u(rng);
    std::vector<double> fs(rng() % 40);
    for (auto& f : fs) f = u(rng);
    const FrocCurve c = froc_curve(rs, fs, double(1 + rng() % 5));
    REQUIRE(c.points.front().fp_rate == 0.0);
    REQUIRE(c.points.front().sensitivity == 0.0);
    for (std::size_t k = 1; k < c.points.size(); ++k) {
      REQUIRE(c.points[k].fp_rate >= c.points[k - 1].fp_rate);
      REQUIRE(c.points[k].sensitivity >= c.points[k - 1].sensitivity);
    }
    double prev = 0;
    for (double rate : {0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 8.0, 100.0}) {
      const double s = sensitivity_at(c, rate);
      REQUIRE(s >= prev);
      prev = s;
    }
    const double f = froc_score(c);
    REQUIRE(f >= 0.0);
    REQUIRE(f <= 1.0);
    REQUIRE(sensitivity_at(c, 8.0) >= sensitivity_at(c, 0.25));
  }
}

TEST_CASE("roc auc") {
  CHECK(roc_auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
  CHECK(roc_auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{1, 0, 0}) == 0.5);
  CHECK(roc_auc(std::vector<double>{0.8, 0.4, 0.6, 0.2}, std::vector<int>{1, 1, 0, 0}) == 0.75);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.8, 0.4}, std::vector<int>{1, 1}), ArgumentError);

  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 199;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng() % 20) / 20.0;
      y[i] = int(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    REQUIRE(std::abs(roc_auc(s, y) - test::pairwise_auc(s, y)) <= 1e-12);
  }

  const auto curve = roc_curve(std::vector<double>{0.8, 0.4, 0.6, 0.2}, std::vector<int>{1, 1, 0, 0});
  CHECK(curve.front().fpr == 0.0);
  CHECK(curve.front().tpr == 0.0);
  CHECK(curve.back().fpr == 1.0);
  CHECK(curve.back().tpr == 1.0);
}

TEST_CASE("percentiles and bootstrap intervals") {
  CHECK(percentile({1, 2, 3, 4}, 50) == 2.5);
  CHECK(percentile({5, 1, 3}, 0) == 1);
  CHECK(percentile({5, 1, 3}, 100) == 5);
  CHECK(percentile({0, 10}, 25) == 2.5);

  BootstrapOptions opt;
  opt.seed = 1;
  const std::vector<double> single{0.42};
  const auto mean = [&](std::span<const std::size_t> idx) -> std::optional<double> {
    double s = 0;
    for (auto i : idx) s += single[i];
    return s / double(idx.size());
  };
  const ConfidenceInterval ci = bootstrap_ci(1, mean, opt);
  CHECK(ci.lo == 0.42);
  CHECK(ci.hi == 0.42);

  const std::vector<double> sep{0.9, 0.8, 0.7, 0.3, 0.2, 0.1};
  const std::vector<int> lab{1, 1, 1, 0, 0, 0};
  const ConfidenceInterval perfect = auc_ci(sep, lab, opt);
  CHECK(perfect.lo == 1.0);
  CHECK(perfect.hi == 1.0);

  opt.max_redraws = 5;
  const auto never = [](std::span<const std::size_t>) -> std::optional<double> { return std::nullopt; };
  CHECK_THROWS_AS(bootstrap_ci(3, never, opt), CiUndefinedError);

  // Same seed, same interval.
  BootstrapOptions o2;
  o2.seed = 9;
  o2.resamples = 300;
  const std::vector<double> noisy{0.9, 0.2, 0.7, 0.4, 0.6, 0.5, 0.3, 0.8};
  const std::vector<int> nl{1, 0, 1, 1, 0, 0, 0, 1};
  const auto a = auc_ci(noisy, nl, o2), b = auc_ci(noisy, nl, o2);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
}

TEST_CASE("auc intervals cover the full-sample estimate across seeds") {
  int covered = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 1000);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
      y[i] = int(i % 2);
      s[i] = n(rng) + (y[i] ? 1.0 : 0.0);
    }
    BootstrapOptions opt;
    opt.seed = seed;
    const ConfidenceInterval ci = auc_ci(s, y, opt);
    const double est = roc_auc(s, y);
    covered += ci.lo <= est && est <= ci.hi;
  }
  CHECK(covered >= 95);
}

TEST_CASE("froc intervals") {
  const std::vector<std::optional<double>> regions{0.9, 0.8, std::nullopt, 0.7};
  const std::vector<double> fps{0.95, 0.6, 0.55};
  BootstrapOptions opt;
  opt.seed = 3;
  opt.resamples = 500;
  const FrocIntervals ci = froc_ci(regions, fps, 2.0, opt);
  CHECK(ci.froc.lo <= ci.froc.hi);
  CHECK(ci.at_8fp.lo <= ci.at_8fp.hi);
  CHECK(ci.froc.lo >= 0.0);
  CHECK(ci.at_8fp.hi <= 1.0);

  const std::vector<std::optional<double>> perfect{0.9, 0.8};
  const FrocIntervals p = froc_ci(perfect, std::vector<double>{}, 2.0, opt);
  CHECK(p.froc.lo == 1.0);
  CHECK(p.at_8fp.hi == 1.0);
}

TEST_CASE("end-to-end evaluation on hand-made heatmaps") {
  // Tumor slide with two separated regions, a normal slide, and an unannotated tumor slide.
  AnnotationMask mask("t", 1024, 1024);
  for (int y = 0; y < 256; ++y) mask.add_run(y, 0, 256);
  for (int y = 640; y < 1024; ++y) mask.add_run(y, 640, 1024);
  std::vector<SlideEvaluation> slides(3);
  slides[0] = {"t", SlideLabel::kTumor, {"t", kCellSize, HeatmapGrid::Zero(8, 8)}, labeling(mask, 6.0)};
  slides[0].heatmap.prob(0, 0) = 0.9f;
  slides[0].heatmap.prob(0, 1) = 0.8f;
  slides[0].heatmap.prob(6, 6) = 0.95f;
  slides[0].heatmap.prob(7, 7) = 0.6f;
  slides[1] = {"n", SlideLabel::kNormal, {"n", kCellSize, HeatmapGrid::Zero(8, 8)}, nullptr};
  slides[2] = {"u", SlideLabel::kTumor, {"u", kCellSize, HeatmapGrid::Zero(8, 8)}, nullptr};
  slides[2].heatmap.prob(3, 3) = 0.99f;

  EvalOptions opt;
  opt.bootstrap.resamples = 200;
  const EvalOutput nms = evaluate_slides(slides, opt);
  CHECK(nms.report.froc == 1.0);
  CHECK(nms.report.at_8fp == 1.0);
  CHECK(nms.report.auc == 1.0);
  CHECK(nms.report.n_tumors == 2);
  CHECK(nms.report.n_false_positives == 0);
  CHECK(nms.report.size_classes.at("macro").n_tumors == 1);
  CHECK(nms.report.size_classes.at("micro").n_tumors == 1);

  opt.points_mode = PointsMode::kConnectedComponents;
  const EvalOutput cc = evaluate_slides(slides, opt);
  CHECK(cc.report.froc == nms.report.froc);
  CHECK(cc.points.at("t").size() == 2);

  const nlohmann::json j = report_to_json(nms.report);
  CHECK(validate_report_json(j).empty());
  nlohmann::json broken = j;
  broken["froc"] = 1.5;
  CHECK_FALSE(validate_report_json(broken).empty());
  broken = j;
  broken.erase("auc_ci");
  CHECK_FALSE(validate_report_json(broken).empty());

  // Every emitted point clears the threshold.
  for (const auto& [id, pts] : nms.points)
    for (const auto& p : pts) CHECK(p.score > 0.5);

  slides.pop_back();
  slides.pop_back();
  CHECK_THROWS_AS(evaluate_slides(slides, opt), ArgumentError);
}

TEST_CASE("points csv and curve files") {
  test::TempDir dir("pts");
  const std::vector<DetectionPoint> pts{{"s", 64, 192, 0.75}, {"s", 320, 64, 0.5000001}};
  write_points_csv(pts, dir / "s.csv");
  CHECK(read_points_csv(dir / "s.csv", "s") == pts);
  CHECK(test::read_file(dir / "s.csv").rfind("0.75,64,192\n", 0) == 0);

  const std::vector<std::optional<double>> regions{0.9, std::nullopt};
  const FrocCurve curve = froc_curve(regions, std::vector<double>{0.8}, 2.0);
  write_froc_svg(curve, dir / "froc.svg");
  const auto roc = roc_curve(std::vector<double>{0.8, 0.2}, std::vector<int>{1, 0});
  write_roc_svg(roc, 1.0, dir / "roc.svg");
  CHECK(test::read_file(dir / "froc.svg").find("<svg") != std::string::npos);
  CHECK(test::read_file(dir / "roc.svg").find("<svg") != std::string::npos);
}
