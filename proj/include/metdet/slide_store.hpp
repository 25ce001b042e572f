#pragma once

// Slide pyramids, tumor annotation masks, dataset manifests and the synthetic
// slide generator.
//
// Coordinates are base-resolution (40X) pixels throughout. A level with
// downsample factor f stores ceil(W/f) x ceil(H/f) pixels; level pixel (i, j)
// is the area average of base block [i*f, (i+1)*f) x [j*f, (j+1)*f) clipped to
// the slide.

#include "metdet/core.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace metdet {

// ---------------------------------------------------------------------------
// SlidePyramid
// ---------------------------------------------------------------------------

/// Source of decoded level pixels. Implementations must tolerate concurrent calls.
class LevelSource {
 public:
  virtual ~LevelSource() = default;
  /// Copies the in-bounds part of level rectangle [x, x+w) x [y, y+h) into
  /// `out` (interleaved RGB8, w*h). Out-of-level pixels are left untouched.
  virtual void read(int level_index, int x, int y, int w, int h, std::uint8_t* out) const = 0;
};

struct PyramidLevel {
  int factor = 1;
  int width = 0;
  int height = 0;
};

class SlidePyramid {
 public:
  SlidePyramid() = default;
  SlidePyramid(std::string slide_id, int width, int height, double mpp, std::vector<PyramidLevel> levels,
               std::shared_ptr<const LevelSource> source);

  /// In-memory pyramid holding fully decoded levels.
  static SlidePyramid from_levels(std::string slide_id, double mpp, std::vector<std::pair<int, Rgb8Image>> levels);

  const std::string& slide_id() const { return slide_id_; }
  int width() const { return width_; }
  int height() const { return height_; }
  double mpp() const { return mpp_; }
  const std::vector<PyramidLevel>& levels() const { return levels_; }
  std::vector<int> factors() const;
  bool has_factor(int factor) const;

  /// Base-pixel rectangle [x, x+w) x [y, y+h) read at `factor`; returns
  /// (h/f) x (w/f) pixels in [0,1]. Output pixel i maps to level pixel
  /// floor(x/f) + i. Area outside the slide is white (1.0).
  RgbImagef read_region(int factor, int x, int y, int w, int h) const;

  /// Raw 8-bit read in level coordinates, white-padded.
  Rgb8Image read_level_rect(int factor, int lx, int ly, int lw, int lh) const;

  /// Full level as 8-bit raster.
  Rgb8Image read_level(int factor) const;

 private:
  int level_index(int factor) const;

  std::string slide_id_;
  int width_ = 0;
  int height_ = 0;
  double mpp_ = 0.0;
  std::vector<PyramidLevel> levels_;
  std::shared_ptr<const LevelSource> source_;
};

/// Area-averaged downsample of a base raster (rounded to nearest 8-bit).
Rgb8Image downsample_area(const Rgb8Image& base, int factor);

/// Builds levels {1, 2, 4} from a base raster.
SlidePyramid build_pyramid(std::string slide_id, double mpp, Rgb8Image base, const std::vector<int>& factors = {1, 2, 4});

struct PyramidWriteOptions {
  int tile_size = 256;
};

/// Writes `meta.json` plus `L{factor}/r{row}_c{col}.png` tiles.
void write_pyramid(const SlidePyramid& slide, const std::filesystem::path& dir, PyramidWriteOptions options = {});

/// Opens a pyramid directory. Tiles are decoded on demand and cached.
SlidePyramid open_slide(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// AnnotationMask
// ---------------------------------------------------------------------------

/// Half-open run [begin, end) of set pixels within one row.
struct Run {
  int begin = 0;
  int end = 0;
  friend bool operator==(const Run&, const Run&) = default;
};

/// Binary tumor mask at base resolution, stored as sorted, non-overlapping,
/// non-adjacent runs per row.
class AnnotationMask {
 public:
  AnnotationMask() = default;
  AnnotationMask(std::string slide_id, int width, int height);

  static AnnotationMask from_dense(std::string slide_id, int width, int height, const std::vector<std::uint8_t>& bits);

  const std::string& slide_id() const { return slide_id_; }
  int width() const { return width_; }
  int height() const { return height_; }
  const std::vector<Run>& row(int y) const { return rows_[std::size_t(y)]; }

  /// Adds a run, merging with existing runs. Clips to bounds.
  void add_run(int y, int begin, int end);

  bool at(int x, int y) const;
  /// Set pixels in [x0, x1) x [y0, y1), clipped to the mask.
  std::int64_t count_in_rect(int x0, int y0, int x1, int y1) const;
  std::int64_t count() const;
  bool empty() const { return count() == 0; }

  std::vector<std::uint8_t> to_dense() const;

  friend bool operator==(const AnnotationMask&, const AnnotationMask&) = default;

 private:
  std::string slide_id_;
  int width_ = 0;
  int height_ = 0;
  std::vector<std::vector<Run>> rows_;
};

void write_mask(const AnnotationMask& mask, const std::filesystem::path& path);
AnnotationMask read_mask(const std::filesystem::path& path, std::string slide_id);

// ---------------------------------------------------------------------------
// Tumor regions
// ---------------------------------------------------------------------------

enum class SizeClass { kMacro, kMicro, kIsolated };

std::string_view to_string(SizeClass s);
/// > 2000 um macro; (200, 2000] micro; otherwise isolated cells.
SizeClass classify_diameter(double diameter_um);

struct TumorRegion {
  int region_id = 0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive bounding box
  std::int64_t pixel_count = 0;
  double diameter_um = 0.0;
  SizeClass size_class = SizeClass::kIsolated;
};

/// 8-connected components of a mask plus a per-run region index for
/// point-in-region lookups.
class RegionLabeling {
 public:
  RegionLabeling() = default;
  RegionLabeling(const AnnotationMask& mask, double mpp);

  const std::vector<TumorRegion>& regions() const { return regions_; }
  /// Region id whose mask pixels contain (x, y), if any.
  std::optional<int> region_at(int x, int y) const;

 private:
  struct LabeledRun {
    Run run;
    int region = 0;
  };
  int width_ = 0;
  int height_ = 0;
  std::vector<std::vector<LabeledRun>> rows_;
  std::vector<TumorRegion> regions_;
};

/// Maximal 8-connected components; diameter = longest bbox side * mpp.
std::vector<TumorRegion> connected_regions(const AnnotationMask& mask, double mpp);

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

enum class SlideLabel { kNormal, kTumor };
enum class Split { kTrain, kValidation, kTest };

std::string_view to_string(SlideLabel l);
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct ManifestEntry {
  std::string slide_id;
  std::string image;                // pyramid directory, relative to the manifest
  std::optional<std::string> mask;  // mask PNG, relative to the manifest
  SlideLabel label = SlideLabel::kNormal;
  Split split = Split::kTrain;
  bool exhaustive_annotations = true;
  double mpp = 0.25;
};

class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(std::vector<ManifestEntry> entries, std::filesystem::path base_dir = {});

  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::vector<ManifestEntry> split(Split s) const;
  const ManifestEntry& find(const std::string& slide_id) const;

  std::filesystem::path image_path(const ManifestEntry& e) const { return base_dir_ / e.image; }
  std::optional<std::filesystem::path> mask_path(const ManifestEntry& e) const;

  /// Loads the mask; a normal slide without a mask gets an empty one. Tumor
  /// slides with a mask must contain at least one tumor pixel.
  std::optional<AnnotationMask> load_mask(const ManifestEntry& e, int width, int height) const;

 private:
  void validate() const;

  std::vector<ManifestEntry> entries_;
  std::filesystem::path base_dir_;
};

// ---------------------------------------------------------------------------
// Synthetic slides
// ---------------------------------------------------------------------------

struct SyntheticSlideConfig {
  std::string slide_id = "synthetic";
  int width = 1024;
  int height = 1024;
  double mpp = 1.0;
  std::uint64_t seed = 0;

  double background_gray = 0.93;

  int tissue_blob_count = 1;
  double blob_radius_min = 440;
  double blob_radius_max = 470;

  int tumor_count = 0;
  double tumor_radius_min = 190;
  double tumor_radius_max = 230;
  /// Minimum distance from a tumor edge to the tissue edge, base pixels.
  double tumor_margin = 192;
  /// Minimum gap between tumor edges, base pixels.
  double min_separation = 64;

  std::array<double, 3> tissue_rgb{0.86, 0.56, 0.72};
  std::array<double, 3> tumor_rgb{0.42, 0.24, 0.60};
  double texture_amplitude = 0.06;
};

struct SyntheticSlide {
  SlidePyramid slide;
  AnnotationMask mask;
};

SyntheticSlide generate_synthetic_slide(const SyntheticSlideConfig& config);

}  // namespace metdet
