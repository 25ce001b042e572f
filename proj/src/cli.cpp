#include "metdet/cli.hpp"

#include "metdet/classifier.hpp"
#include "metdet/color_norm.hpp"
#include "metdet/detection_metrics.hpp"
#include "metdet/heatmap_engine.hpp"
#include "metdet/patch_pipeline.hpp"
#include "metdet/png_io.hpp"
#include "metdet/slide_store.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace metdet {

namespace fs = std::filesystem;

namespace {

class UsageError : public Error {
  using Error::Error;
};

std::string format(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

// Child seed for one (subcommand, slide) pair.
std::uint64_t slide_seed(std::uint64_t seed, std::string_view subcommand, const std::string& slide_id) {
  return derive_seed(seed, subcommand, {hash_string(slide_id)});
}

std::vector<ManifestEntry> select_split(const DatasetManifest& manifest, const std::string& split) {
  if (split == "all") return manifest.entries();
  return manifest.split(parse_split(split));
}

std::vector<Magnification> parse_mags_option(const std::string& text) {
  try {
    return parse_magnifications(text);
  } catch (const ArgumentError& e) {
    throw UsageError(e.what());
  }
}

struct LoadedSlide {
  ManifestEntry entry;
  SlidePyramid pyramid;
  std::optional<AnnotationMask> mask;
};

LoadedSlide load_slide(const DatasetManifest& manifest, const ManifestEntry& e, bool with_mask) {
  LoadedSlide s{e, open_slide(manifest.image_path(e)), std::nullopt};
  if (s.pyramid.slide_id() != e.slide_id)
    throw FormatError("pyramid at " + manifest.image_path(e).string() + " holds slide '" + s.pyramid.slide_id() +
                      "', manifest expects '" + e.slide_id + "'");
  if (with_mask) s.mask = manifest.load_mask(e, s.pyramid.width(), s.pyramid.height());
  return s;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  int slides = 20;
  int tumor_slides = -1;
  int tumors_per_slide = 1;
  int size = 1024;
  double mpp = 1.0;
  std::string splits = "train,test";
  int non_exhaustive = 0;
};

int cmd_synth(const SynthArgs& a, std::uint64_t seed, std::ostream& out) {
  if (a.slides < 0) throw UsageError("--slides must be non-negative");
  const int tumor_slides = a.tumor_slides < 0 ? a.slides / 2 : a.tumor_slides;
  if (tumor_slides > a.slides) throw UsageError("--tumor-slides exceeds --slides");
  if (a.non_exhaustive > tumor_slides) throw UsageError("--non-exhaustive exceeds the tumor slide count");
  if (a.size <= 0 || a.size % kCellSize != 0)
    throw UsageError("--size must be a positive multiple of " + std::to_string(kCellSize));
  if (!(a.mpp > 0)) throw UsageError("--mpp must be positive");

  std::vector<Split> splits;
  std::stringstream ss(a.splits);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      splits.push_back(parse_split(tok));
    } catch (const ArgumentError& e) {
      throw UsageError(e.what());
    }
  }

  fs::create_directories(a.out / "slides");
  fs::create_directories(a.out / "masks");
  const double scale = double(a.size) / 1024.0;
  std::vector<ManifestEntry> entries;
  for (Split split : splits) {
    for (int i = 0; i < a.slides; ++i) {
      const bool tumor = i < tumor_slides;
      char id[64];
      std::snprintf(id, sizeof id, "%s_%s_%03d", std::string(to_string(split)).c_str(), tumor ? "tumor" : "normal",
                    tumor ? i : i - tumor_slides);
      SyntheticSlideConfig cfg;
      cfg.slide_id = id;
      cfg.width = cfg.height = a.size;
      cfg.mpp = a.mpp;
      cfg.seed = slide_seed(seed, "synth", cfg.slide_id);
      cfg.blob_radius_min *= scale;
      cfg.blob_radius_max *= scale;
      // Tumors keep their absolute size on larger slides so they still cover a full cell.
      const double shrink = std::min(1.0, scale);
      cfg.tumor_radius_min *= shrink;
      cfg.tumor_radius_max *= shrink;
      cfg.tumor_margin *= shrink;
      cfg.min_separation *= shrink;
      cfg.tumor_count = tumor ? a.tumors_per_slide : 0;
      const SyntheticSlide s = generate_synthetic_slide(cfg);
      write_pyramid(s.slide, a.out / "slides" / cfg.slide_id);

      ManifestEntry e;
      e.slide_id = cfg.slide_id;
      e.image = "slides/" + cfg.slide_id;
      e.label = tumor ? SlideLabel::kTumor : SlideLabel::kNormal;
      e.split = split;
      e.mpp = a.mpp;
      e.exhaustive_annotations = !(tumor && i < a.non_exhaustive);
      if (tumor) {
        e.mask = "masks/" + cfg.slide_id + ".png";
        write_mask(s.mask, a.out / *e.mask);
      }
      entries.push_back(std::move(e));
    }
  }
  DatasetManifest(std::move(entries), a.out).save(a.out / "manifest.json");
  out << "wrote " << splits.size() * std::size_t(a.slides) << " slides to " << a.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// tissue-mask
// ---------------------------------------------------------------------------

int cmd_tissue_mask(const fs::path& manifest_path, const std::string& split, const fs::path& out_dir,
                    double threshold, std::ostream& out) {
  const DatasetManifest manifest = DatasetManifest::load(manifest_path);
  fs::create_directories(out_dir);
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& e : select_split(manifest, split)) {
    const LoadedSlide s = load_slide(manifest, e, false);
    const TissueGrid grid = tissue_grid(s.pyramid, threshold);
    std::vector<std::uint8_t> bits(std::size_t(grid.cells.size()));
    for (Eigen::Index i = 0; i < grid.cells.size(); ++i) bits[std::size_t(i)] = grid.cells(i) ? 1 : 0;
    png::write_bitmask(out_dir / (e.slide_id + ".png"), int(grid.cols()), int(grid.rows()), bits);
    summary[e.slide_id] = {{"rows", grid.rows()}, {"cols", grid.cols()}, {"tissue_cells", grid.count()}};
    out << e.slide_id << ": " << grid.count() << " of " << grid.cells.size() << " cells are tissue\n";
  }
  std::ofstream(out_dir / "tissue.json") << summary.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Shared training setup
// ---------------------------------------------------------------------------

struct TrainingData {
  std::vector<SamplerSlide> sampler_slides;
  std::map<std::string, SlidePyramid> pyramids;
};

TrainingData load_training_data(const DatasetManifest& manifest, const std::string& split) {
  TrainingData d;
  for (const auto& e : select_split(manifest, split)) {
    LoadedSlide s = load_slide(manifest, e, true);
    const TissueGrid grid = tissue_grid(s.pyramid);
    d.sampler_slides.push_back(
        make_sampler_slide(e.slide_id, e.label, e.exhaustive_annotations, grid, s.mask ? &*s.mask : nullptr));
    d.pyramids.emplace(e.slide_id, std::move(s.pyramid));
  }
  if (d.sampler_slides.empty()) throw ArgumentError("split '" + split + "' has no slides");
  return d;
}

// ---------------------------------------------------------------------------
// sample-patches
// ---------------------------------------------------------------------------

struct SampleArgs {
  fs::path manifest;
  std::string split = "train";
  fs::path out;
  std::uint64_t count = 16;
  std::uint64_t first = 0;
  std::string magnifications = "40x";
  bool augment = true;
};

int cmd_sample_patches(const SampleArgs& a, std::uint64_t seed, std::ostream& out) {
  const auto mags = parse_mags_option(a.magnifications);
  const DatasetManifest manifest = DatasetManifest::load(a.manifest);
  TrainingData data = load_training_data(manifest, a.split);
  const BalancedSampler sampler(data.sampler_slides, derive_seed(seed, "sample-patches", {hash_string("sampler")}));
  std::optional<AugmentParams> aug;
  if (a.augment) aug = AugmentParams{};
  const TrainingStream stream(sampler, std::move(data.pyramids), mags, aug,
                              derive_seed(seed, "sample-patches", {hash_string("augment")}));
  PatchDumpWriter writer(a.out);
  for (std::uint64_t i = a.first; i < a.first + a.count; ++i) {
    TrainingDraw d;
    std::optional<AugmentDraw> ad;
    writer.write(d, stream.unit_patch(i, &d, &ad), ad);
  }
  out << "wrote " << a.count << " samples to " << a.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Color normalization
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> tissue_pixels(const SlidePyramid& slide) {
  const TissueGrid grid = tissue_grid(slide);
  std::vector<std::uint8_t> mask(std::size_t(slide.width()) * slide.height(), 0);
  for (int y = 0; y < slide.height(); ++y)
    for (int x = 0; x < slide.width(); ++x)
      mask[std::size_t(y) * slide.width() + x] = grid.cells(y / grid.stride, x / grid.stride) ? 1 : 0;
  return mask;
}

colornorm::ColorStatsd fit_slide_stats(const SlidePyramid& slide) {
  const Rgb8Image base = slide.read_level(1);
  std::vector<std::uint8_t> mask = tissue_pixels(slide);
  if (std::count(mask.begin(), mask.end(), 1) < 2) mask.clear();  // no tissue: use every pixel
  return colornorm::fit_color_stats(colornorm::collect_hsd(base, mask));
}

void print_stats(const std::string& name, const colornorm::ColorStatsd& s, std::ostream& out) {
  out << name << ": mu=(" << format("%.6g", s.mean(0)) << ", " << format("%.6g", s.mean(1)) << ") sigma=["
      << format("%.6g", s.cov(0, 0)) << " " << format("%.6g", s.cov(0, 1)) << "; " << format("%.6g", s.cov(1, 0))
      << " " << format("%.6g", s.cov(1, 1)) << "] D=" << format("%.6g", s.density_mean) << "+/-"
      << format("%.6g", std::sqrt(s.density_var)) << " n=" << s.pixel_count << (s.degenerate ? " (degenerate)" : "")
      << "\n";
}

int cmd_fit_colornorm(const fs::path& manifest_path, const std::string& split, const fs::path& out_dir,
                      std::ostream& out) {
  const DatasetManifest manifest = DatasetManifest::load(manifest_path);
  fs::create_directories(out_dir);
  std::vector<colornorm::ColorStatsd> all;
  for (const auto& e : select_split(manifest, split)) {
    const LoadedSlide s = load_slide(manifest, e, false);
    all.push_back(fit_slide_stats(s.pyramid));
    colornorm::save_stats(all.back(), out_dir / (e.slide_id + ".json"));
    print_stats(e.slide_id, all.back(), out);
  }
  if (all.empty()) throw ArgumentError("split '" + split + "' has no slides");
  const auto ref = colornorm::reference_stats(all);
  colornorm::save_stats(ref, out_dir / "reference.json");
  print_stats("reference", ref, out);
  return kExitOk;
}

int cmd_inspect_colornorm(const std::vector<fs::path>& files, std::ostream& out) {
  for (const auto& f : files) print_stats(f.string(), colornorm::load_stats(f), out);
  return kExitOk;
}

int cmd_apply_colornorm(const fs::path& manifest_path, const std::string& split, const fs::path& stats_dir,
                        const fs::path& reference, const fs::path& out_dir, std::ostream& out) {
  const DatasetManifest manifest = DatasetManifest::load(manifest_path);
  const colornorm::ColorStatsd ref =
      colornorm::load_stats(reference.empty() ? stats_dir / "reference.json" : reference);
  fs::create_directories(out_dir / "slides");
  std::vector<ManifestEntry> entries;
  for (const auto& e : select_split(manifest, split)) {
    const LoadedSlide s = load_slide(manifest, e, false);
    const fs::path stats_file = stats_dir / (e.slide_id + ".json");
    const colornorm::ColorStatsd stats =
        fs::exists(stats_file) ? colornorm::load_stats(stats_file) : fit_slide_stats(s.pyramid);
    Rgb8Image base = s.pyramid.read_level(1);
    const std::uint64_t clamped = colornorm::apply_normalization_inplace(base, stats, ref);
    std::vector<int> factors = s.pyramid.factors();
    write_pyramid(build_pyramid(e.slide_id, s.pyramid.mpp(), std::move(base), factors), out_dir / "slides" / e.slide_id);
    ManifestEntry ne = e;
    ne.image = "slides/" + e.slide_id;
    if (auto mp = manifest.mask_path(e)) ne.mask = fs::relative(fs::absolute(*mp), fs::absolute(out_dir)).string();
    entries.push_back(std::move(ne));
    out << e.slide_id << ": normalized, " << clamped << " clamped channel values\n";
  }
  DatasetManifest(std::move(entries), out_dir).save(out_dir / "manifest.json");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path manifest;
  std::string split = "train";
  fs::path out;
  std::string magnifications = "40x";
  TrainConfig config;
  bool augment = true;
  fs::path loss_log;
};

int cmd_train_toy(TrainArgs a, std::uint64_t seed, int workers, std::ostream& out) {
  const auto mags = parse_mags_option(a.magnifications);
  const DatasetManifest manifest = DatasetManifest::load(a.manifest);
  TrainingData data = load_training_data(manifest, a.split);
  const BalancedSampler sampler(data.sampler_slides, derive_seed(seed, "train-toy", {hash_string("sampler")}));
  std::optional<AugmentParams> aug;
  if (a.augment) aug = AugmentParams{};
  const TrainingStream stream(sampler, std::move(data.pyramids), mags, aug,
                              derive_seed(seed, "train-toy", {hash_string("augment")}));
  a.config.workers = workers;
  std::vector<double> losses;
  const ToyHistogramClassifier model = train_toy(stream, a.config, &losses);
  if (auto parent = a.out.parent_path(); !parent.empty()) fs::create_directories(parent);
  model.save(a.out);
  if (!a.loss_log.empty()) {
    std::ofstream log(a.loss_log);
    if (!log) throw IoError("cannot write " + a.loss_log.string());
    for (std::size_t i = 0; i < losses.size(); ++i) log << i << "," << format("%.9g", losses[i]) << "\n";
  }
  out << "trained " << a.config.steps << " steps; final batch loss "
      << (losses.empty() ? std::string("n/a") : format("%.4f", losses.back())) << "; model written to "
      << a.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct InferArgs {
  fs::path manifest;
  std::string split = "test";
  fs::path out;
  bool oracle = false;
  double noise = 0.1;
  bool no_noise = false;
  std::string classifier;
  std::vector<fs::path> models;
  std::string magnifications;
  bool tta = true;
  int stride = kCellSize;
  bool csv = false;
};

ClassifierPtr make_classifier(const InferArgs& a, const DatasetManifest& manifest,
                              const std::vector<ManifestEntry>& entries, std::uint64_t seed) {
  const int chosen = int(a.oracle) + int(!a.classifier.empty()) + int(!a.models.empty());
  if (chosen != 1) throw UsageError("choose exactly one of --oracle, --classifier, --model");
  if (a.oracle) {
    if (!a.magnifications.empty() && parse_mags_option(a.magnifications) != std::vector{Magnification::k40x})
      throw UsageError("the oracle classifier reads 40x only");
    auto masks = std::make_shared<MaskTable>();
    for (const auto& e : entries) {
      const LoadedSlide s = load_slide(manifest, e, true);
      if (s.mask) masks->emplace(e.slide_id, *s.mask);
    }
    const double sigma = a.no_noise ? 0.0 : a.noise;
    if (!(sigma >= 0)) throw UsageError("--noise must be non-negative");
    return std::make_shared<OracleClassifier>(masks, sigma, derive_seed(seed, "infer"));
  }
  if (!a.classifier.empty()) {
    const std::string prefix = "constant:";
    if (a.classifier.rfind(prefix, 0) != 0) throw UsageError("unknown classifier '" + a.classifier + "'");
    double p = 0;
    try {
      std::size_t used = 0;
      p = std::stod(a.classifier.substr(prefix.size()), &used);
      if (used != a.classifier.size() - prefix.size()) throw std::invalid_argument("trailing text");
    } catch (const std::exception&) {
      throw UsageError("bad constant in '" + a.classifier + "'");
    }
    if (!(p >= 0 && p <= 1)) throw UsageError("constant probability must lie in [0, 1]");
    const auto mags =
        a.magnifications.empty() ? std::vector{Magnification::k40x} : parse_mags_option(a.magnifications);
    return std::make_shared<ConstantClassifier>(p, mags);
  }
  std::vector<ClassifierPtr> members;
  for (const auto& m : a.models) {
    members.push_back(std::make_shared<ToyHistogramClassifier>(ToyHistogramClassifier::load(m)));
    if (members.back()->magnifications() != members.front()->magnifications())
      throw UsageError("ensembled models must share magnifications");
  }
  if (!a.magnifications.empty() && parse_mags_option(a.magnifications) != members.front()->magnifications())
    throw UsageError("--magnifications differs from the model's magnifications");
  return ensemble_average(std::move(members));
}

int cmd_infer(const InferArgs& a, std::uint64_t seed, int workers, std::ostream& out, std::ostream& err) {
  const DatasetManifest manifest = DatasetManifest::load(a.manifest);
  const auto entries = select_split(manifest, a.split);
  if (entries.empty()) throw ArgumentError("split '" + a.split + "' has no slides");
  const ClassifierPtr classifier = make_classifier(a, manifest, entries, seed);
  InferenceConfig cfg;
  cfg.stride = a.stride;
  cfg.tta = a.tta;
  cfg.workers = workers;
  fs::create_directories(a.out);
  int failures = 0;
  for (const auto& e : entries) {
    try {
      const LoadedSlide s = load_slide(manifest, e, false);
      const Heatmap hm = infer_heatmap(s.pyramid, *classifier, cfg);
      save_heatmap(hm, a.out / (e.slide_id + ".hmap"));
      if (a.csv) export_heatmap_csv(hm, a.out / (e.slide_id + ".csv"));
      out << e.slide_id << ": " << hm.rows() << "x" << hm.cols() << " heatmap, max "
          << format("%.4f", slide_score(hm)) << "\n";
    } catch (const Error& ex) {
      ++failures;
      err << "error: slide " << e.slide_id << ": " << ex.what() << "\n";
    }
  }
  return failures ? kExitData : kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  fs::path manifest;
  fs::path heatmaps;
  std::string split = "test";
  fs::path out;
  EvalOptions options;
  std::string points_mode = "nms";
  std::string fp_denominator = "negative";
};

int cmd_evaluate(EvaluateArgs a, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  if (a.points_mode == "nms")
    a.options.points_mode = PointsMode::kNms;
  else if (a.points_mode == "cc")
    a.options.points_mode = PointsMode::kConnectedComponents;
  else
    throw UsageError("--points-mode must be nms or cc");
  if (a.fp_denominator == "negative")
    a.options.fp_denominator = FpDenominator::kNegativeSlides;
  else if (a.fp_denominator == "all")
    a.options.fp_denominator = FpDenominator::kAllSlides;
  else
    throw UsageError("--fp-denominator must be negative or all");
  a.options.bootstrap.seed = derive_seed(seed, "evaluate");

  const DatasetManifest manifest = DatasetManifest::load(a.manifest);
  const auto entries = select_split(manifest, a.split);
  std::vector<std::string> missing;
  for (const auto& e : entries)
    if (!fs::exists(a.heatmaps / (e.slide_id + ".hmap"))) missing.push_back(e.slide_id);
  if (!missing.empty()) {
    err << "error: missing heatmaps for " << missing.size() << " slide(s):";
    for (const auto& id : missing) err << " " << id;
    err << "\n";
    return kExitData;
  }

  std::vector<SlideEvaluation> slides;
  for (const auto& e : entries) {
    SlideEvaluation s;
    s.slide_id = e.slide_id;
    s.label = e.label;
    s.heatmap = load_heatmap(a.heatmaps / (e.slide_id + ".hmap"));
    if (s.heatmap.slide_id != e.slide_id)
      throw FormatError("heatmap for " + e.slide_id + " is labeled '" + s.heatmap.slide_id + "'");
    // Mask dimensions come from the pyramid, not the heatmap grid.
    const SlidePyramid pyr = open_slide(manifest.image_path(e));
    if (auto mask = manifest.load_mask(e, pyr.width(), pyr.height()); mask && e.label == SlideLabel::kTumor)
      s.regions = std::make_shared<RegionLabeling>(*mask, e.mpp);
    slides.push_back(std::move(s));
  }

  const EvalOutput result = evaluate_slides(slides, a.options);
  const nlohmann::json report = report_to_json(result.report);
  if (const auto problems = validate_report_json(report); !problems.empty())
    throw NumericError("report failed validation: " + problems.front());

  fs::create_directories(a.out / "points");
  std::ofstream(a.out / "report.json") << report.dump(2) << "\n";
  write_froc_svg(result.report.curve, a.out / "froc.svg");
  write_roc_svg(result.report.roc, result.report.auc, a.out / "roc.svg");
  for (const auto& [id, pts] : result.points) write_points_csv(pts, a.out / "points" / (id + ".csv"));

  const EvalReport& r = result.report;
  out << "FROC " << format("%.3f", r.froc) << " [" << format("%.3f", r.froc_ci.lo) << ", "
      << format("%.3f", r.froc_ci.hi) << "]  @8FP " << format("%.3f", r.at_8fp) << " ["
      << format("%.3f", r.at_8fp_ci.lo) << ", " << format("%.3f", r.at_8fp_ci.hi) << "]  AUC "
      << format("%.3f", r.auc) << " [" << format("%.3f", r.auc_ci.lo) << ", " << format("%.3f", r.auc_ci.hi)
      << "]\n";
  out << r.n_slides << " slides, " << r.n_tumors << " tumors, " << r.n_points << " points, "
      << r.n_false_positives << " false positives\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Metastasis detection pipeline: synthetic slides, inference, FROC/AUC evaluation", "metdet"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  int workers = 1;
  app.add_option("--seed", seed, "Master seed; every subcommand derives its streams from it")->capture_default_str();
  app.add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  // Accept the global flags after the subcommand name too.
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Master seed");
    sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  };

  std::function<int()> action;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset (pyramids, masks, manifest)");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--slides", synth.slides, "Slides per split")->capture_default_str();
  s->add_option("--tumor-slides", synth.tumor_slides, "Tumor slides per split (default: half)");
  s->add_option("--tumors-per-slide", synth.tumors_per_slide, "Tumor regions per tumor slide")->capture_default_str();
  s->add_option("--size", synth.size, "Slide side length in pixels")->capture_default_str();
  s->add_option("--mpp", synth.mpp, "Microns per base pixel")->capture_default_str();
  s->add_option("--splits", synth.splits, "Comma-separated splits")->capture_default_str();
  s->add_option("--non-exhaustive", synth.non_exhaustive, "Tumor slides per split flagged non-exhaustive")
      ->capture_default_str();
  common(s);
  s->callback([&] { action = [&] { return cmd_synth(synth, seed, out); }; });

  fs::path tm_manifest, tm_out;
  std::string tm_split = "all";
  double tm_threshold = 0.8;
  auto* tm = app.add_subcommand("tissue-mask", "Write per-slide tissue cell masks");
  tm->add_option("--manifest", tm_manifest, "Dataset manifest")->required();
  tm->add_option("--split", tm_split, "train, validation, test or all")->capture_default_str();
  tm->add_option("--out", tm_out, "Output directory")->required();
  tm->add_option("--gray-threshold", tm_threshold, "Background gray level")->capture_default_str();
  common(tm);
  tm->callback([&] { action = [&] { return cmd_tissue_mask(tm_manifest, tm_split, tm_out, tm_threshold, out); }; });

  SampleArgs sample;
  bool sample_no_aug = false;
  auto* sp = app.add_subcommand("sample-patches", "Dump balanced training samples as PNG + JSONL");
  sp->add_option("--manifest", sample.manifest, "Dataset manifest")->required();
  sp->add_option("--split", sample.split, "Split to sample from")->capture_default_str();
  sp->add_option("--out", sample.out, "Output directory")->required();
  sp->add_option("--count", sample.count, "Number of samples")->capture_default_str();
  sp->add_option("--first", sample.first, "Index of the first draw")->capture_default_str();
  sp->add_option("--magnifications", sample.magnifications, "e.g. 40x,20x")->capture_default_str();
  sp->add_flag("--no-augment", sample_no_aug, "Disable orientation and color augmentation");
  common(sp);
  sp->callback([&] {
    action = [&] {
      sample.augment = !sample_no_aug;
      return cmd_sample_patches(sample, seed, out);
    };
  });

  fs::path fc_manifest, fc_out;
  std::string fc_split = "train";
  auto* fc = app.add_subcommand("fit-colornorm", "Fit per-slide HSD color statistics and a reference");
  fc->add_option("--manifest", fc_manifest, "Dataset manifest")->required();
  fc->add_option("--split", fc_split, "Split to fit")->capture_default_str();
  fc->add_option("--out", fc_out, "Output directory for stats JSON")->required();
  common(fc);
  fc->callback([&] { action = [&] { return cmd_fit_colornorm(fc_manifest, fc_split, fc_out, out); }; });

  std::vector<fs::path> ic_files;
  auto* ic = app.add_subcommand("inspect-colornorm", "Print color statistics files");
  ic->add_option("files", ic_files, "Stats JSON files")->required();
  ic->callback([&] { action = [&] { return cmd_inspect_colornorm(ic_files, out); }; });

  fs::path ac_manifest, ac_stats, ac_reference, ac_out;
  std::string ac_split = "all";
  auto* ac = app.add_subcommand("apply-colornorm", "Write color-normalized pyramids and a new manifest");
  ac->add_option("--manifest", ac_manifest, "Dataset manifest")->required();
  ac->add_option("--split", ac_split, "Split to normalize")->capture_default_str();
  ac->add_option("--stats", ac_stats, "Directory of per-slide stats (missing slides are fitted)")->required();
  ac->add_option("--reference", ac_reference, "Reference stats (default: <stats>/reference.json)");
  ac->add_option("--out", ac_out, "Output directory")->required();
  common(ac);
  ac->callback([&] {
    action = [&] { return cmd_apply_colornorm(ac_manifest, ac_split, ac_stats, ac_reference, ac_out, out); };
  });

  TrainArgs train;
  bool train_no_aug = false;
  auto* tt = app.add_subcommand("train-toy", "Train the histogram logistic-regression model");
  tt->add_option("--manifest", train.manifest, "Dataset manifest")->required();
  tt->add_option("--split", train.split, "Training split")->capture_default_str();
  tt->add_option("--out", train.out, "Model JSON path")->required();
  tt->add_option("--magnifications", train.magnifications, "e.g. 40x,20x")->capture_default_str();
  tt->add_option("--steps", train.config.steps, "Optimizer steps")->capture_default_str();
  tt->add_option("--batch", train.config.batch_size, "Patches per step")->capture_default_str();
  tt->add_option("--lr", train.config.learning_rate, "Initial learning rate")->capture_default_str();
  tt->add_option("--lr-decay-examples", train.config.lr_decay_examples, "Examples per learning-rate halving")
      ->capture_default_str();
  tt->add_option("--loss-log", train.loss_log, "Write per-step batch loss CSV");
  tt->add_flag("--no-augment", train_no_aug, "Disable augmentation");
  common(tt);
  tt->callback([&] {
    action = [&] {
      train.augment = !train_no_aug;
      return cmd_train_toy(train, seed, workers, out);
    };
  });

  InferArgs infer;
  auto* in = app.add_subcommand("infer", "Compute heatmaps for one split");
  in->add_option("--manifest", infer.manifest, "Dataset manifest")->required();
  in->add_option("--split", infer.split, "Split to process")->capture_default_str();
  in->add_option("--out", infer.out, "Heatmap output directory")->required();
  in->add_flag("--oracle", infer.oracle, "Use the mask oracle classifier");
  in->add_option("--noise", infer.noise, "Oracle noise sigma")->capture_default_str();
  in->add_flag("--no-noise", infer.no_noise, "Oracle without noise");
  in->add_option("--classifier", infer.classifier, "Built-in classifier, e.g. constant:0.7");
  in->add_option("--model", infer.models, "Toy model JSON; repeat to average an ensemble");
  in->add_option("--magnifications", infer.magnifications, "e.g. 40x,20x");
  in->add_flag("--tta,!--no-tta", infer.tta, "Average over the 8 orientations (default on)");
  in->add_option("--stride", infer.stride, "Cell stride in base pixels")->capture_default_str();
  in->add_flag("--csv", infer.csv, "Also write row,col,prob CSV");
  common(in);
  in->callback([&] { action = [&] { return cmd_infer(infer, seed, workers, out, err); }; });

  EvaluateArgs ev;
  auto* evs = app.add_subcommand("evaluate", "FROC, AUC and bootstrap intervals from heatmaps");
  evs->add_option("--manifest", ev.manifest, "Dataset manifest")->required();
  evs->add_option("--heatmaps", ev.heatmaps, "Directory of <slide>.hmap files")->required();
  evs->add_option("--split", ev.split, "Split to evaluate")->capture_default_str();
  evs->add_option("--out", ev.out, "Report directory")->required();
  evs->add_option("--nms-radius", ev.options.nms_radius, "NMS radius in cells")->capture_default_str();
  evs->add_option("--threshold", ev.options.threshold, "Point threshold")->capture_default_str();
  evs->add_option("--points-mode", ev.points_mode, "nms or cc")->capture_default_str();
  evs->add_option("--fp-denominator", ev.fp_denominator, "negative or all")->capture_default_str();
  evs->add_option("--resamples", ev.options.bootstrap.resamples, "Bootstrap resamples")->capture_default_str();
  common(evs);
  evs->callback([&] { action = [&] { return cmd_evaluate(ev, seed, out, err); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    return action ? action() : kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const TrainingError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace metdet
