#pragma once

// Tissue masking, patch labels, balanced training sampling, multi-magnification
// patch extraction and the augmentation stack.

#include "metdet/core.hpp"
#include "metdet/random.hpp"
#include "metdet/slide_store.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace metdet {

// ---------------------------------------------------------------------------
// Tissue grid
// ---------------------------------------------------------------------------

struct TissueGrid {
  int stride = kCellSize;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cells;

  Eigen::Index rows() const { return cells.rows(); }
  Eigen::Index cols() const { return cells.cols(); }
  Eigen::Index count() const { return cells.count(); }
};

/// A cell is background iff the mean gray (mean of R, G, B) of its in-bounds
/// base pixels exceeds `gray_threshold`.
TissueGrid tissue_grid(const SlidePyramid& slide, double gray_threshold = 0.8, int stride = kCellSize);

/// Base-pixel center of grid cell (row, col).
inline Point2i cell_center(Eigen::Index row, Eigen::Index col, int stride = kCellSize) {
  return {static_cast<int>(col) * stride + stride / 2, static_cast<int>(row) * stride + stride / 2};
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// Center region for `center` is [x-64, x+64) x [y-64, y+64).
std::int64_t center_region_tumor_pixels(const AnnotationMask& mask, Point2i center);
int patch_hard_label(const AnnotationMask& mask, Point2i center);
double patch_soft_label(const AnnotationMask& mask, Point2i center);

// ---------------------------------------------------------------------------
// Balanced sampler
// ---------------------------------------------------------------------------

struct SampleCell {
  Point2i center;
  double soft_label = 0.0;
};

/// Per-slide eligible cells for each class.
struct SamplerSlide {
  std::string slide_id;
  SlideLabel label = SlideLabel::kNormal;
  bool exhaustive_annotations = true;
  std::vector<SampleCell> tumor_cells;
  std::vector<SampleCell> normal_cells;
};

/// Tissue cells split by hard label. Normal cells of non-exhaustively
/// annotated tumor slides are dropped; a missing mask yields no cells for
/// tumor slides and all-normal cells for normal slides.
SamplerSlide make_sampler_slide(const std::string& slide_id, SlideLabel label, bool exhaustive_annotations,
                                const TissueGrid& tissue, const AnnotationMask* mask);

struct TrainingDraw {
  std::uint64_t index = 0;
  std::size_t slide_index = 0;
  std::string slide_id;
  int drawn_class = 0;  // 1 = tumor
  Point2i cell_center;
  Point2i jitter;
  Point2i center;  // cell_center + jitter
  int hard_label = 0;
  double soft_label = 0.0;
};

/// Two-stage balanced sampler: class with probability 1/2, then a slide
/// uniformly among slides holding that class, then a cell uniformly within the
/// slide, then an integer jitter uniform in [-jitter_max, jitter_max] per axis.
/// Draw i depends only on (seed, i). Labels describe the selected cell.
class BalancedSampler {
 public:
  BalancedSampler(std::vector<SamplerSlide> slides, std::uint64_t seed, int jitter_max = 8);

  bool has_class(int cls) const { return !(cls ? tumor_slides_ : normal_slides_).empty(); }
  const std::vector<SamplerSlide>& slides() const { return slides_; }
  std::uint64_t seed() const { return seed_; }

  /// Throws SamplingError if the drawn class has no eligible slide.
  TrainingDraw draw(std::uint64_t index) const;

 private:
  std::vector<SamplerSlide> slides_;
  std::vector<std::size_t> tumor_slides_;
  std::vector<std::size_t> normal_slides_;
  std::uint64_t seed_;
  int jitter_max_;
};

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

struct PatchSpec {
  std::string slide_id;
  Point2i center;
  std::vector<Magnification> magnifications{Magnification::k40x};
};

struct PatchGroup {
  std::string slide_id;
  Point2i center;
  std::vector<std::pair<Magnification, RgbImagef>> members;

  const RgbImagef& at(Magnification m) const;
};

/// Base-pixel origin of the field of view of a patch read at `factor`:
/// the window is [c - floor(299 f / 2), c - floor(299 f / 2) + 299 f).
inline Point2i patch_origin(Point2i center, int factor) {
  const int half = (kPatchSize * factor) / 2;
  return {center.x - half, center.y - half};
}

/// Reads each magnification's 299x299 patch centered on spec.center, white
/// padded. The center must lie on the slide unless `allow_off_slide` (used for
/// border cells of slides whose size is not a multiple of the stride).
PatchGroup extract_patch_group(const SlidePyramid& slide, const PatchSpec& spec, bool allow_off_slide = false);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct Orientation {
  int rotations = 0;  // counterclockwise quarter turns, 0..3
  bool flip = false;  // left-right flip, applied before rotating
  friend bool operator==(const Orientation&, const Orientation&) = default;
};

/// The eight dihedral orientations in TTA summation order.
inline constexpr std::array<Orientation, 8> kAllOrientations{{{0, false},
                                                              {1, false},
                                                              {2, false},
                                                              {3, false},
                                                              {0, true},
                                                              {1, true},
                                                              {2, true},
                                                              {3, true}}};

namespace detail {

// out(i, j) for k counterclockwise quarter turns of an n x n plane:
//   k=1: in(j, n-1-i)   k=2: in(n-1-i, n-1-j)   k=3: in(n-1-j, i)
template <typename Scalar, typename Expr>
Plane<Scalar> rotate_ccw(const Expr& e, int k) {
  switch (k) {
    case 1: return e.transpose().colwise().reverse();
    case 2: return e.reverse();
    case 3: return e.transpose().rowwise().reverse();
    default: return e;
  }
}

}  // namespace detail

template <typename Scalar>
Plane<Scalar> orient_plane(const Plane<Scalar>& p, Orientation o) {
  const int k = ((o.rotations % 4) + 4) % 4;
  return o.flip ? detail::rotate_ccw<Scalar>(p.rowwise().reverse(), k) : detail::rotate_ccw<Scalar>(p, k);
}

template <typename Scalar>
RgbImage<Scalar> orient(const RgbImage<Scalar>& img, Orientation o) {
  if (img.rows() != img.cols()) throw ArgumentError("orient requires a square patch");
  RgbImage<Scalar> out;
  for (std::size_t c = 0; c < 3; ++c) out.channels[c] = orient_plane(img.channels[c], o);
  return out;
}

PatchGroup orient(const PatchGroup& group, Orientation o);

struct AugmentParams {
  double brightness_delta_max = 64.0 / 255.0;
  double saturation_delta_max = 0.25;
  double hue_delta_max = 0.04;
  double contrast_delta_max = 0.75;
  int jitter_max = 8;

  void validate() const;
};

/// One realization of the color perturbation. Identity: {0, 1, 0, 1}.
struct ColorDraws {
  double brightness = 0.0;  // additive
  double saturation = 1.0;  // HSV saturation scale
  double hue = 0.0;         // fraction of the hue circle
  double contrast = 1.0;    // per-channel contrast factor
};

ColorDraws sample_color_draws(Rng& rng, const AugmentParams& params);

/// brightness -> saturation -> hue -> contrast, then clip to [0,1]. Identity
/// stages are skipped, so identity draws return the input bit for bit. The
/// contrast mean is accumulated in double over four interleaved partial sums.
RgbImagef apply_color(const RgbImagef& patch, const ColorDraws& draws);
void apply_color_inplace(RgbImagef& patch, const ColorDraws& draws);

RgbImagef perturb_color(const RgbImagef& patch, Rng& rng, const AugmentParams& params);

/// clamp(x, 0, 1) * 2 - 1
template <typename Scalar>
RgbImage<Scalar> to_model_range(const RgbImage<Scalar>& patch) {
  RgbImage<Scalar> out;
  for (std::size_t c = 0; c < 3; ++c)
    out.channels[c] = patch.channels[c].max(Scalar(0)).min(Scalar(1)) * Scalar(2) - Scalar(1);
  return out;
}

PatchGroup to_model_range(const PatchGroup& group);

struct AugmentDraw {
  Orientation orientation;
  ColorDraws color;
};

AugmentDraw sample_augment(Rng& rng, const AugmentParams& params);
/// Orientation then color on every member of the group.
PatchGroup apply_augment(const PatchGroup& group, const AugmentDraw& draw);

// ---------------------------------------------------------------------------
// Sampled-patch dump: PNG per member plus one JSONL record per sample.
// ---------------------------------------------------------------------------

class PatchDumpWriter {
 public:
  explicit PatchDumpWriter(const std::filesystem::path& dir);

  void write(const TrainingDraw& draw, const PatchGroup& group, const std::optional<AugmentDraw>& augment);

 private:
  std::filesystem::path dir_;
  std::ofstream jsonl_;
};

}  // namespace metdet
