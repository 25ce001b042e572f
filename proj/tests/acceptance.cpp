// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero if
// any criterion fails.

#include "metdet/classifier.hpp"
#include "metdet/cli.hpp"
#include "metdet/color_norm.hpp"
#include "metdet/detection_metrics.hpp"
#include "metdet/heatmap_engine.hpp"
#include "metdet/patch_pipeline.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "json.hpp"

using namespace metdet;
namespace fs = std::filesystem;
using colornorm::Matrix2;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void run(int id, const char* name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  failures += !o.pass;
  std::printf("%s %d %s (%.1f s)%s%s\n", o.pass ? "PASS" : "FAIL", id, name, seconds_since(t0),
              o.detail.empty() ? "" : ": ", o.detail.c_str());
  std::fflush(stdout);
}

int cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) std::cerr << "metdet " << args.front() << " failed (" << code << "): " << err.str();
  return code;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(test::read_file(p)); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// FNV-1a over every file path and its bytes, in path order.
std::uint64_t tree_hash(const fs::path& root) {
  std::map<std::string, fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = e.path();
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const std::string& s) {
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  };
  for (const auto& [rel, p] : files) {
    mix(rel);
    mix(test::read_file(p));
  }
  return h;
}

Matrix2<double> random_spd(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> logscale(-3.0, 1.0);
  Matrix2<double> a;
  a << n(rng), n(rng), n(rng), n(rng);
  return std::pow(10.0, logscale(rng)) * (a * a.transpose() + 0.05 * Matrix2<double>::Identity());
}

}  // namespace

int main() {
  test::TempDir work("acceptance");
  const std::string oracle_data = (work / "oracle").string();
  const std::string oracle_manifest = (work / "oracle" / "manifest.json").string();

  run(1, "oracle end-to-end", [&] {
    Outcome o;
    const auto t0 = Clock::now();
    o.require(cli({"synth", "--out", oracle_data, "--slides", "20", "--size", "1024", "--splits", "test", "--seed",
                   "2024", "--workers", "1"}) == 0,
              "synth");
    o.require(cli({"infer", "--manifest", oracle_manifest, "--out", (work / "hm0").string(), "--oracle", "--no-noise",
                   "--workers", "1"}) == 0,
              "infer");
    o.require(cli({"evaluate", "--manifest", oracle_manifest, "--heatmaps", (work / "hm0").string(), "--out",
                   (work / "rep0").string(), "--nms-radius", "6", "--threshold", "0.5", "--workers", "1"}) == 0,
              "evaluate");
    const double wall = seconds_since(t0);
    if (!o.pass) return o;
    const nlohmann::json r = read_json(work / "rep0" / "report.json");
    const nlohmann::json unit = nlohmann::json::array({1.0, 1.0});
    o.require(r["counts"]["tumor_slides"] == 10 && r["counts"]["negative_slides"] == 10, "slide counts");
    o.require(r["froc"] == 1.0, "froc " + r["froc"].dump());
    o.require(r["at_8fp"] == 1.0, "@8fp " + r["at_8fp"].dump());
    o.require(r["auc"] == 1.0, "auc " + r["auc"].dump());
    o.require(r["froc_ci"] == unit && r["at_8fp_ci"] == unit && r["auc_ci"] == unit, "intervals");
    o.require(wall < 120.0, "wall " + fmt(wall) + " s");
    o.detail = o.pass ? "froc=1.000 @8fp=1.000 auc=1.000 ci=[1,1] wall=" + fmt(wall) + " s" : o.detail;
    return o;
  });

  run(2, "metric oracles", [&] {
    Outcome o;
    Rng rng(20240);
    double worst_auc = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 2 + rng() % 199;
      std::vector<double> s(n);
      std::vector<int> y(n);
      const int levels = 2 + int(rng() % 50);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = double(rng() % std::uint64_t(levels)) / levels;
        y[i] = int(rng() % 2);
      }
      y[0] = 1;
      y[1] = 0;
      worst_auc = std::max(worst_auc, std::abs(roc_auc(s, y) - test::pairwise_auc(s, y)));
    }
    o.require(worst_auc <= 1e-12, "auc deviation " + sci(worst_auc));

    const std::vector<std::optional<double>> regions{0.9, std::nullopt};
    const double hand = froc_score(froc_curve(regions, std::vector<double>{0.8}, 2.0));
    o.require(hand == 0.5, "hand froc " + fmt(hand));

    int nms_mismatch = 0;
    for (int trial = 0; trial < 500; ++trial) {
      const Heatmap h = test::random_heatmap(rng, 64);
      const double r = double(rng() % 9), t = 0.3 + 0.1 * double(rng() % 5);
      const auto got = nms_points(h, r, t);
      const auto want = test::nms_simulator(h, r, t);
      bool same = got.size() == want.size();
      for (std::size_t k = 0; same && k < got.size(); ++k)
        same = got[k].y == want[k].first * kCellSize + kCellSize / 2 &&
               got[k].x == want[k].second * kCellSize + kCellSize / 2 &&
               got[k].score == double(h.prob(want[k].first, want[k].second));
      nms_mismatch += !same;
    }
    o.require(nms_mismatch == 0, std::to_string(nms_mismatch) + " nms mismatches");
    if (o.pass) o.detail = "max auc deviation " + sci(worst_auc) + ", hand froc 0.5, 500/500 nms";
    return o;
  });

  run(3, "HSD round trip", [&] {
    Outcome o;
    const auto t0 = Clock::now();
    int worst = 0;
    auto check = [&](int r, int g, int b) {
      const auto out = colornorm::hsd_to_rgb(colornorm::rgb_to_hsd(std::uint8_t(r), std::uint8_t(g), std::uint8_t(b)));
      worst = std::max({worst, std::abs(out[0] - r), std::abs(out[1] - g), std::abs(out[2] - b)});
    };
    auto level = [](int i) { return (i * 255 + 15) / 31; };
    for (int r = 0; r < 32; ++r)
      for (int g = 0; g < 32; ++g)
        for (int b = 0; b < 32; ++b) check(level(r), level(g), level(b));
    Rng rng(77);
    for (int i = 0; i < 1'000'000; ++i) {
      const std::uint64_t v = rng();
      check(int(v & 255), int((v >> 8) & 255), int((v >> 16) & 255));
    }
    const double wall = seconds_since(t0);
    o.require(worst <= 1, "max error " + std::to_string(worst));
    o.require(wall < 30.0, "wall " + fmt(wall) + " s");
    if (o.pass) o.detail = "max error " + std::to_string(worst);
    return o;
  });

  run(4, "Monge-Kantorovich transform", [&] {
    Outcome o;
    Rng rng(4);
    double worst = 0;
    for (int t = 0; t < 1000; ++t) {
      const Matrix2<double> s = random_spd(rng), r = random_spd(rng);
      const Matrix2<double> T = colornorm::mk_transform<double>(s, r);
      worst = std::max(worst, (T * s * T.transpose() - r).norm() / r.norm());
    }
    o.require(worst < 1e-10, "relative error " + sci(worst));
    const Matrix2<double> I = Matrix2<double>::Identity();
    Matrix2<double> d, want;
    d << 4, 0, 0, 9;
    want << 0.5, 0, 0, 1.0 / 3.0;
    double closed = (colornorm::mk_transform<double>(I, I) - I).cwiseAbs().maxCoeff();
    closed = std::max(closed, (colornorm::mk_transform<double>(4 * I, I) - 0.5 * I).cwiseAbs().maxCoeff());
    closed = std::max(closed, (colornorm::mk_transform<double>(d, I) - want).cwiseAbs().maxCoeff());
    o.require(closed <= 1e-12, "closed forms off by " + sci(closed));
    if (o.pass) o.detail = "max relative error " + sci(worst);
    return o;
  });

  run(5, "sampler statistics", [&] {
    Outcome o;
    std::vector<SamplerSlide> slides;
    std::vector<SyntheticSlide> keep;
    for (int i = 0; i < 8; ++i) {
      const bool tumor = i % 2;
      SyntheticSlideConfig cfg;
      cfg.slide_id = (tumor ? "tumor" : "normal") + std::to_string(i);
      cfg.seed = 500 + std::uint64_t(i);
      cfg.tumor_count = tumor ? 1 : 0;
      keep.push_back(generate_synthetic_slide(cfg));
      const SyntheticSlide& s = keep.back();
      // Slide 1 is a tumor slide with non-exhaustive annotations.
      slides.push_back(make_sampler_slide(cfg.slide_id, tumor ? SlideLabel::kTumor : SlideLabel::kNormal, i != 1,
                                          tissue_grid(s.slide), tumor ? &s.mask : nullptr));
    }
    const BalancedSampler sampler(slides, 31337);
    constexpr int kDraws = 100'000;
    std::vector<int> per_slide[2] = {std::vector<int>(slides.size()), std::vector<int>(slides.size())};
    int tumor_draws = 0, bad_normals = 0;
    for (std::uint64_t i = 0; i < kDraws; ++i) {
      const TrainingDraw d = sampler.draw(i);
      tumor_draws += d.drawn_class;
      ++per_slide[d.drawn_class][d.slide_index];
      bad_normals += d.drawn_class == 0 && !slides[d.slide_index].exhaustive_annotations;
    }
    const double frac = double(tumor_draws) / kDraws;
    o.require(std::abs(frac - 0.5) <= 0.015, "tumor fraction " + fmt(frac));
    o.require(bad_normals == 0, std::to_string(bad_normals) + " normal draws from non-exhaustive slides");
    double min_p = 1;
    for (int cls : {0, 1}) {
      std::vector<std::size_t> eligible;
      for (std::size_t s = 0; s < slides.size(); ++s)
        if (!(cls ? slides[s].tumor_cells : slides[s].normal_cells).empty()) eligible.push_back(s);
      const int total = cls ? tumor_draws : kDraws - tumor_draws;
      const double e = double(total) / double(eligible.size());
      double stat = 0;
      for (std::size_t s : eligible) stat += (per_slide[cls][s] - e) * (per_slide[cls][s] - e) / e;
      min_p = std::min(min_p, test::chi_square_p_upper(stat, int(eligible.size()) - 1));
    }
    o.require(min_p > 0.001, "chi-square p " + fmt(min_p));
    if (o.pass) o.detail = "tumor fraction " + fmt(frac) + ", min chi-square p " + fmt(min_p);
    return o;
  });

  run(6, "determinism", [&] {
    Outcome o;
    for (const char* name : {"s1", "s2"})
      o.require(cli({"synth", "--out", (work / name).string(), "--slides", "4", "--size", "512", "--splits",
                     "train,test", "--seed", "9"}) == 0,
                "synth");
    const std::uint64_t h1 = tree_hash(work / "s1"), h2 = tree_hash(work / "s2");
    o.require(h1 == h2, "synth hashes differ");
    for (const char* w : {"1", "8"})
      o.require(cli({"infer", "--manifest", oracle_manifest, "--out", (work / (std::string("w") + w)).string(),
                     "--oracle", "--noise", "0.1", "--workers", w}) == 0,
                "infer");
    o.require(tree_hash(work / "w1") == tree_hash(work / "w8"), "heatmaps differ between 1 and 8 workers");
    if (o.pass) o.detail = "synth hash " + std::to_string(h1);
    return o;
  });

  run(7, "toy model training", [&] {
    Outcome o;
    Rng rng(13);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
      const int rows = 16, cols = 3 * kHistogramBins;
      Eigen::MatrixXd x(rows, cols);
      Eigen::VectorXd y(rows), w(cols);
      for (auto& v : x.reshaped()) v = u(rng);
      for (auto& v : y) v = double(u(rng) > 0.5);
      for (auto& v : w) v = n(rng);
      const double b = n(rng), h = 1e-5;
      const LossAndGradient lg = log_loss_and_gradient(w, b, x, y);
      Eigen::VectorXd numeric(cols + 1), analytic(cols + 1);
      for (int j = 0; j < cols; ++j) {
        Eigen::VectorXd wp = w, wm = w;
        wp(j) += h;
        wm(j) -= h;
        numeric(j) = (log_loss_and_gradient(wp, b, x, y).loss - log_loss_and_gradient(wm, b, x, y).loss) / (2 * h);
        analytic(j) = lg.grad_weights(j);
      }
      numeric(cols) = (log_loss_and_gradient(w, b + h, x, y).loss - log_loss_and_gradient(w, b - h, x, y).loss) / (2 * h);
      analytic(cols) = lg.grad_bias;
      worst = std::max(worst, (numeric - analytic).norm() / analytic.norm());
    }
    o.require(worst < 1e-4, "gradient relative error " + sci(worst));

    const auto t0 = Clock::now();
    const std::string data = (work / "toy").string(), manifest = (work / "toy" / "manifest.json").string();
    const std::string model = (work / "toy_model.json").string();
    o.require(cli({"synth", "--out", data, "--slides", "10", "--size", "1024", "--splits", "train,test", "--seed",
                   "77"}) == 0,
              "synth");
    o.require(cli({"train-toy", "--manifest", manifest, "--out", model, "--steps", "5000", "--seed", "77"}) == 0,
              "train-toy");
    o.require(cli({"infer", "--manifest", manifest, "--out", (work / "toy_hm").string(), "--model", model}) == 0,
              "infer");
    o.require(cli({"evaluate", "--manifest", manifest, "--heatmaps", (work / "toy_hm").string(), "--out",
                   (work / "toy_rep").string()}) == 0,
              "evaluate");
    const double wall = seconds_since(t0);
    if (!o.pass) return o;
    const double auc = read_json(work / "toy_rep" / "report.json")["auc"].get<double>();
    o.require(auc > 0.95, "slide auc " + fmt(auc));
    o.require(wall < 300.0, "wall " + fmt(wall) + " s");
    if (o.pass)
      o.detail = "gradient error " + sci(worst) + ", slide auc " + fmt(auc) + ", wall " + fmt(wall) + " s";
    return o;
  });

  run(8, "degradation monotonicity", [&] {
    Outcome o;
    std::vector<double> medians;
    for (const char* sigma : {"0", "0.1", "0.3"}) {
      std::vector<double> frocs;
      for (int seed = 1; seed <= 5; ++seed) {
        const std::string tag = std::string("deg_") + sigma + "_" + std::to_string(seed);
        const std::string hm = (work / (tag + "_hm")).string(), rep = (work / (tag + "_rep")).string();
        o.require(cli({"infer", "--manifest", oracle_manifest, "--out", hm, "--oracle", "--noise", sigma, "--seed",
                       std::to_string(seed)}) == 0,
                  "infer");
        o.require(cli({"evaluate", "--manifest", oracle_manifest, "--heatmaps", hm, "--out", rep, "--resamples",
                       "100"}) == 0,
                  "evaluate");
        if (!o.pass) return o;
        frocs.push_back(read_json(fs::path(rep) / "report.json")["froc"].get<double>());
        fs::remove_all(hm);
        fs::remove_all(rep);
      }
      std::sort(frocs.begin(), frocs.end());
      medians.push_back(frocs[2]);
    }
    o.require(medians[0] >= medians[1] && medians[1] >= medians[2], "medians not non-increasing");
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("median froc ") + fmt(medians[0]) + ", " +
                fmt(medians[1]) + ", " + fmt(medians[2]);
    return o;
  });

  run(9, "TTA consistency", [&] {
    Outcome o;
    o.require(cli({"infer", "--manifest", oracle_manifest, "--out", (work / "tta").string(), "--classifier",
                   "constant:0.7", "--tta"}) == 0,
              "infer tta");
    o.require(cli({"infer", "--manifest", oracle_manifest, "--out", (work / "notta").string(), "--classifier",
                   "constant:0.7", "--no-tta"}) == 0,
              "infer no-tta");
    o.require(tree_hash(work / "tta") == tree_hash(work / "notta"), "constant heatmaps differ");

    // Symmetric under the dihedral group: depends only on the sorted pair of
    // distances to the center.
    RgbImagef patch(kPatchSize, kPatchSize);
    const int c = kPatchSize / 2;
    for (int y = 0; y < kPatchSize; ++y)
      for (int x = 0; x < kPatchSize; ++x) {
        const int a = std::abs(x - c), b = std::abs(y - c), lo = std::min(a, b), hi = std::max(a, b);
        patch.channels[0](y, x) = float(std::sin(0.05 * lo + 0.11 * hi));
        patch.channels[1](y, x) = float(std::cos(0.07 * lo * hi / 50.0));
        patch.channels[2](y, x) = float((lo + 2 * hi) % 17) / 8.5f - 1.0f;
      }
    Rng rng(9);
    std::normal_distribution<double> n(0.0, 5.0);
    Eigen::VectorXd w(3 * kHistogramBins);
    for (auto& v : w) v = n(rng);
    const ToyHistogramClassifier model({Magnification::k40x}, kHistogramBins, w, 0.3);
    const PatchGroup g{"sym", {0, 0}, {{Magnification::k40x, patch}}};
    std::vector<double> preds;
    for (Orientation orientation : kAllOrientations) preds.push_back(model.predict(orient(g, orientation)));
    const bool identical = std::all_of(preds.begin(), preds.end(), [&](double p) { return p == preds[0]; });
    o.require(identical, "toy predictions differ across orientations");
    if (o.pass) o.detail = "toy prediction " + fmt(preds[0]) + " in all 8 orientations";
    return o;
  });

  std::printf("%d of 9 criteria failed\n", failures);
  return failures ? 1 : 0;
}
