#pragma once

// Detection points from heatmaps, lesion-level FROC and slide-level ROC AUC,
// with percentile bootstrap confidence intervals.

#include "metdet/heatmap_engine.hpp"
#include "metdet/random.hpp"
#include "metdet/slide_store.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace metdet {

struct DetectionPoint {
  std::string slide_id;
  int x = 0;  // base pixels, cell center
  int y = 0;
  double score = 0.0;
  friend bool operator==(const DetectionPoint&, const DetectionPoint&) = default;
};

inline constexpr double kDefaultNmsRadius = 6.0;
inline constexpr double kDefaultPointThreshold = 0.5;

/// Repeatedly report the global maximum above `threshold` (ties: smallest
/// (row, col)) and zero every cell within Euclidean cell distance `radius`.
std::vector<DetectionPoint> nms_points(const Heatmap& heatmap, double radius = kDefaultNmsRadius,
                                       double threshold = kDefaultPointThreshold);

/// One point per 8-connected component of {cells > threshold}, placed at the
/// component's maximum.
std::vector<DetectionPoint> cc_points(const Heatmap& heatmap, double threshold = kDefaultPointThreshold);

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

struct SlideTruth {
  SlideLabel label = SlideLabel::kNormal;
  /// Null for tumor slides without pixel annotations; their points are ignored.
  std::shared_ptr<const RegionLabeling> regions;
};

struct RegionHit {
  std::string slide_id;
  int region_id = 0;
  SizeClass size_class = SizeClass::kIsolated;
  std::optional<double> score;  // best score of points on the region's pixels
};

struct MatchResult {
  std::vector<RegionHit> regions;
  std::vector<DetectionPoint> false_positives;
  std::size_t ignored_points = 0;
};

/// Points on a region's mask pixels credit that region (highest score kept);
/// every other point is a false positive.
MatchResult match_points(std::span<const DetectionPoint> points, const std::map<std::string, SlideTruth>& truth);

// ---------------------------------------------------------------------------
// FROC
// ---------------------------------------------------------------------------

inline constexpr std::array<double, 6> kFrocFpRates{0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

struct FrocPoint {
  double threshold = 0.0;  // points with score >= threshold are kept
  double fp_rate = 0.0;
  double sensitivity = 0.0;
};

struct FrocCurve {
  std::vector<FrocPoint> points;  // ascending fp_rate, starting at (0, 0)
  std::size_t n_tumors = 0;
  double fp_denominator = 0.0;
};

/// Sweeps a threshold across every distinct score. `region_scores` holds one
/// entry per tumor (nullopt when missed); FP rate = kept FPs / fp_denominator.
FrocCurve froc_curve(std::span<const std::optional<double>> region_scores, std::span<const double> fp_scores,
                     double fp_denominator);
FrocCurve froc_curve(const MatchResult& matches, std::size_t n_normalizing_slides,
                     std::optional<SizeClass> only_class = std::nullopt);

/// Largest sensitivity among operating points with fp_rate <= target.
double sensitivity_at(const FrocCurve& curve, double fp_rate);
/// Mean sensitivity at 0.25, 0.5, 1, 2, 4 and 8 FPs per slide.
double froc_score(const FrocCurve& curve);

// ---------------------------------------------------------------------------
// ROC
// ---------------------------------------------------------------------------

/// Mann-Whitney estimate P(s+ > s-) + P(s+ = s-) / 2.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

struct ConfidenceInterval {
  double lo = 0.0;
  double hi = 0.0;
};

struct BootstrapOptions {
  std::size_t resamples = 2000;
  std::uint64_t seed = 0;
  /// Redraws allowed per resample before the CI is declared undefined.
  std::size_t max_redraws = 1000;
  double lower_percentile = 2.5;
  double upper_percentile = 97.5;
};

/// Linear-interpolated percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

/// Index vectors for resample b: n draws with replacement, seeded by
/// (seed, b, attempt). `estimator(indices)` returns nullopt for degenerate
/// samples, which are redrawn. Returns one vector of statistics per resample.
template <typename Estimator>
std::vector<std::vector<double>> bootstrap_statistics(std::size_t n, const Estimator& estimator,
                                                      const BootstrapOptions& options) {
  if (n == 0) throw ArgumentError("bootstrap of an empty sample");
  std::vector<std::vector<double>> stats;
  stats.reserve(options.resamples);
  std::vector<std::size_t> idx(n);
  for (std::size_t b = 0; b < options.resamples; ++b) {
    bool ok = false;
    for (std::size_t attempt = 0; attempt <= options.max_redraws && !ok; ++attempt) {
      Rng rng(derive_seed(options.seed, "bootstrap", {b, attempt}));
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (auto& i : idx) i = pick(rng);
      std::optional<std::vector<double>> v = estimator(std::span<const std::size_t>(idx));
      if (v) {
        stats.push_back(std::move(*v));
        ok = true;
      }
    }
    if (!ok) throw CiUndefinedError("bootstrap resample " + std::to_string(b) + " stayed degenerate after " +
                                    std::to_string(options.max_redraws) + " redraws");
  }
  return stats;
}

/// Percentile interval of a scalar estimator.
template <typename Estimator>
ConfidenceInterval bootstrap_ci(std::size_t n, const Estimator& estimator, const BootstrapOptions& options) {
  auto stats = bootstrap_statistics(
      n,
      [&](std::span<const std::size_t> idx) -> std::optional<std::vector<double>> {
        std::optional<double> v = estimator(idx);
        if (!v) return std::nullopt;
        return std::vector<double>{*v};
      },
      options);
  std::vector<double> values;
  values.reserve(stats.size());
  for (const auto& s : stats) values.push_back(s[0]);
  return {percentile(values, options.lower_percentile), percentile(std::move(values), options.upper_percentile)};
}

/// Slides are the resampling unit; single-class resamples are redrawn.
ConfidenceInterval auc_ci(std::span<const double> scores, std::span<const int> labels, const BootstrapOptions& options);

struct FrocIntervals {
  ConfidenceInterval froc;
  ConfidenceInterval at_8fp;
};

/// Resamples the FROC's scored items: one per tumor region (its retained
/// prediction, or a miss) and one per false-positive point. The FP
/// normalization stays fixed; resamples without any tumor item are redrawn.
FrocIntervals froc_ci(std::span<const std::optional<double>> region_scores, std::span<const double> fp_scores,
                      double fp_denominator, const BootstrapOptions& options);

// ---------------------------------------------------------------------------
// End-to-end evaluation
// ---------------------------------------------------------------------------

enum class PointsMode { kNms, kConnectedComponents };
enum class FpDenominator { kNegativeSlides, kAllSlides };

std::string_view to_string(PointsMode m);
std::string_view to_string(FpDenominator d);

struct EvalOptions {
  PointsMode points_mode = PointsMode::kNms;
  double nms_radius = kDefaultNmsRadius;
  double threshold = kDefaultPointThreshold;
  FpDenominator fp_denominator = FpDenominator::kNegativeSlides;
  BootstrapOptions bootstrap;
};

struct SlideEvaluation {
  std::string slide_id;
  SlideLabel label = SlideLabel::kNormal;
  Heatmap heatmap;
  std::shared_ptr<const RegionLabeling> regions;  // null: unannotated
};

struct SizeClassResult {
  std::size_t n_tumors = 0;
  std::optional<double> froc;
  std::optional<double> at_8fp;
};

struct EvalReport {
  double froc = 0.0;
  ConfidenceInterval froc_ci;
  double at_8fp = 0.0;
  ConfidenceInterval at_8fp_ci;
  double auc = 0.0;
  ConfidenceInterval auc_ci;
  std::array<double, 6> sensitivities{};
  std::map<std::string, SizeClassResult> size_classes;  // "macro", "micro"
  std::size_t n_slides = 0;
  std::size_t n_tumor_slides = 0;
  std::size_t n_negative_slides = 0;
  std::size_t n_tumors = 0;
  std::size_t n_points = 0;
  std::size_t n_false_positives = 0;
  EvalOptions options;

  FrocCurve curve;
  std::vector<RocPoint> roc;
};

struct EvalOutput {
  EvalReport report;
  std::map<std::string, std::vector<DetectionPoint>> points;
};

EvalOutput evaluate_slides(const std::vector<SlideEvaluation>& slides, const EvalOptions& options);

nlohmann::json report_to_json(const EvalReport& report);
/// Empty when `j` satisfies the report schema; otherwise one message per problem.
std::vector<std::string> validate_report_json(const nlohmann::json& j);

/// Camelyon-style `probability,x,y` lines, no header.
void write_points_csv(std::span<const DetectionPoint> points, const std::filesystem::path& path);
std::vector<DetectionPoint> read_points_csv(const std::filesystem::path& path, const std::string& slide_id);

void write_froc_svg(const FrocCurve& curve, const std::filesystem::path& path);
void write_roc_svg(std::span<const RocPoint> roc, double auc, const std::filesystem::path& path);

}  // namespace metdet
