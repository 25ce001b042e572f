#include "doctest.h"
#include "test_util.hpp"

#include "metdet/cli.hpp"
#include "metdet/detection_metrics.hpp"
#include "metdet/heatmap_engine.hpp"

#include <map>
#include <sstream>

#include "json.hpp"

using namespace metdet;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = test::read_file(e.path());
  return files;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(test::read_file(p)); }

// One small test-split dataset shared by the cases below.
const fs::path& dataset() {
  static test::TempDir dir("cli_data");
  static const bool made = [] {
    const CliRun r = cli({"synth", "--out", (dir / "d").string(), "--slides", "4", "--size", "1024", "--splits", "train,test",
                       "--seed", "11"});
    REQUIRE(r.code == 0);
    return true;
  }();
  (void)made;
  static const fs::path root = dir / "d";
  return root;
}

std::string manifest() { return (dataset() / "manifest.json").string(); }

}  // namespace

TEST_CASE("usage and help exit codes") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"bogus"}).code == kExitUsage);
  test::TempDir dir("cli_usage");
  CHECK(cli({"synth", "--out", (dir / "x").string(), "--size", "100"}).code == kExitUsage);
  CHECK(cli({"synth", "--out", (dir / "x").string(), "--slides", "2", "--tumor-slides", "3"}).code == kExitUsage);
  CHECK(cli({"infer", "--manifest", manifest(), "--out", (dir / "h").string()}).code == kExitUsage);
  CHECK(cli({"infer", "--manifest", manifest(), "--out", (dir / "h").string(), "--oracle", "--classifier",
             "constant:0.5"})
            .code == kExitUsage);
  CHECK(cli({"infer", "--manifest", (dir / "none.json").string(), "--out", (dir / "h").string(), "--oracle"}).code ==
        kExitData);
}

TEST_CASE("synth is deterministic in the seed") {
  test::TempDir dir("cli_synth");
  const std::vector<std::string> base{"synth", "--slides", "2", "--size", "512", "--splits", "test"};
  auto with_out = [&](const std::string& name, std::vector<std::string> extra = {}) {
    std::vector<std::string> a = base;
    a.insert(a.end(), {"--out", (dir / name).string()});
    if (extra.empty() || extra[0] != "--seed") a.insert(a.end(), {"--seed", "3"});
    a.insert(a.end(), extra.begin(), extra.end());
    REQUIRE(cli(a).code == 0);
    return tree(dir / name);
  };
  const auto a = with_out("a"), b = with_out("b");
  CHECK(a.size() > 5);
  CHECK(a == b);
  const auto c = with_out("c", {"--seed", "4"});
  CHECK(c.at("masks/test_tumor_000.png") != a.at("masks/test_tumor_000.png"));

  const auto normal = with_out("n", {"--tumor-slides", "0"});
  for (const auto& [k, v] : normal) CHECK(k.rfind("masks/", 0) != 0);
  const nlohmann::json m = read_json(dir / "n" / "manifest.json");
  for (const auto& e : m) CHECK(e["label"] == "normal");
}

TEST_CASE("oracle inference and evaluation") {
  test::TempDir dir("cli_oracle");
  const std::string hm = (dir / "hm").string(), rep = (dir / "rep").string();
  REQUIRE(cli({"infer", "--manifest", manifest(), "--out", hm, "--oracle", "--no-noise", "--csv"}).code == 0);
  for (const auto& e : fs::directory_iterator(hm)) {
    if (e.path().extension() != ".hmap") continue;
    const Heatmap h = load_heatmap(e.path());
    CHECK(h.rows() == 8);
    CHECK(h.cols() == 8);
  }
  CHECK(fs::exists(dir / "hm" / "test_tumor_000.csv"));

  REQUIRE(cli({"evaluate", "--manifest", manifest(), "--heatmaps", hm, "--out", rep, "--resamples", "200"}).code == 0);
  const nlohmann::json r = read_json(dir / "rep" / "report.json");
  CHECK(validate_report_json(r).empty());
  CHECK(r["froc"] == 1.0);
  CHECK(r["at_8fp"] == 1.0);
  CHECK(r["auc"] == 1.0);
  CHECK(r["auc_ci"] == nlohmann::json::array({1.0, 1.0}));

  for (const auto& e : fs::directory_iterator(dir / "rep" / "points"))
    for (const DetectionPoint& p : read_points_csv(e.path(), e.path().stem().string())) CHECK(p.score > 0.5);

  const std::string cc = (dir / "cc").string();
  REQUIRE(cli({"evaluate", "--manifest", manifest(), "--heatmaps", hm, "--out", cc, "--points-mode", "cc",
               "--resamples", "200"})
              .code == 0);
  CHECK(read_json(dir / "cc" / "report.json")["froc"] == r["froc"]);

  fs::remove(dir / "hm" / "test_normal_000.hmap");
  const CliRun missing = cli({"evaluate", "--manifest", manifest(), "--heatmaps", hm, "--out", rep});
  CHECK(missing.code == kExitData);
  CHECK(missing.err.find("test_normal_000") != std::string::npos);
}

TEST_CASE("noisy oracle heatmaps do not depend on the worker count") {
  test::TempDir dir("cli_workers");
  REQUIRE(cli({"infer", "--manifest", manifest(), "--out", (dir / "w1").string(), "--oracle", "--workers", "1"}).code ==
          0);
  REQUIRE(cli({"infer", "--manifest", manifest(), "--out", (dir / "w8").string(), "--oracle", "--workers", "8"}).code ==
          0);
  const auto a = tree(dir / "w1"), b = tree(dir / "w8");
  CHECK(a.size() == 4);
  CHECK(a == b);
}

TEST_CASE("constant classifier gives a flat heatmap on tissue") {
  test::TempDir dir("cli_const");
  REQUIRE(cli({"infer", "--manifest", manifest(), "--out", (dir / "h").string(), "--classifier", "constant:0.7",
               "--no-tta"})
              .code == 0);
  const Heatmap h = load_heatmap(dir / "h" / "test_normal_000.hmap");
  int tissue = 0;
  for (Eigen::Index i = 0; i < h.prob.size(); ++i) {
    CHECK((h.prob(i) == 0.7f || h.prob(i) == 0.0f));
    tissue += h.prob(i) == 0.7f;
  }
  CHECK(tissue > 0);
}

TEST_CASE("training, color normalization and sampling commands run end to end") {
  test::TempDir dir("cli_pipeline");
  CHECK(cli({"tissue-mask", "--manifest", manifest(), "--out", (dir / "tissue").string()}).code == 0);
  CHECK(fs::exists(dir / "tissue" / "tissue.json"));

  CHECK(cli({"sample-patches", "--manifest", manifest(), "--out", (dir / "samples").string(), "--count", "6"}).code ==
        0);
  CHECK(tree(dir / "samples").size() >= 6);

  CHECK(cli({"fit-colornorm", "--manifest", manifest(), "--out", (dir / "stats").string()}).code == 0);
  CHECK(fs::exists(dir / "stats" / "reference.json"));
  CHECK(cli({"inspect-colornorm", (dir / "stats" / "reference.json").string()}).code == 0);
  CHECK(cli({"apply-colornorm", "--manifest", manifest(), "--stats", (dir / "stats").string(), "--split", "test", "--out",
             (dir / "norm").string()})
            .code == 0);
  CHECK(fs::exists(dir / "norm" / "manifest.json"));

  const std::string model = (dir / "model.json").string();
  REQUIRE(cli({"train-toy", "--manifest", manifest(), "--out", model, "--steps", "5", "--batch", "8", "--loss-log",
               (dir / "loss.csv").string()})
              .code == 0);
  CHECK(cli({"infer", "--manifest", manifest(), "--out", (dir / "toy").string(), "--model", model, "--no-tta"}).code ==
        0);
  CHECK(load_heatmap(dir / "toy" / "test_tumor_000.hmap").rows() == 8);
}
