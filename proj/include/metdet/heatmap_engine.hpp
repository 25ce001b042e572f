#pragma once

#include "metdet/classifier.hpp"
#include "metdet/patch_pipeline.hpp"
#include "metdet/slide_store.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace metdet {

using HeatmapGrid = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Cell (r, c) covers base region [c s, (c+1) s) x [r s, (r+1) s) for stride s;
/// background cells hold exactly 0.
struct Heatmap {
  std::string slide_id;
  int stride = kCellSize;
  HeatmapGrid prob;

  Eigen::Index rows() const { return prob.rows(); }
  Eigen::Index cols() const { return prob.cols(); }
  Point2i cell_center(Eigen::Index row, Eigen::Index col) const { return metdet::cell_center(row, col, stride); }

  friend bool operator==(const Heatmap& a, const Heatmap& b) {
    return a.slide_id == b.slide_id && a.stride == b.stride && a.prob.rows() == b.prob.rows() &&
           a.prob.cols() == b.prob.cols() && (a.prob == b.prob).all();
  }
};

struct InferenceConfig {
  int stride = kCellSize;
  bool tta = true;
  double gray_threshold = 0.8;
  int workers = 1;
};

/// Sliding-window inference. Every tissue cell gets the classifier output at
/// the cell center, averaged over the eight orientations when `tta` (summed in
/// kAllOrientations order, then divided by 8). The result does not depend on
/// `workers`.
Heatmap infer_heatmap(const SlidePyramid& slide, const PatchClassifier& classifier, const InferenceConfig& config,
                      const TissueGrid* precomputed_tissue = nullptr);

/// Maximum cell value.
double slide_score(const Heatmap& heatmap);

/// Binary layout, little-endian:
///   "MDHM" | u32 version=1 | u32 id_len | id bytes | u32 rows | u32 cols |
///   u32 stride | rows*cols float32, row-major
void save_heatmap(const Heatmap& heatmap, const std::filesystem::path& path);
Heatmap load_heatmap(const std::filesystem::path& path);

/// `row,col,prob` with a header line.
void export_heatmap_csv(const Heatmap& heatmap, const std::filesystem::path& path);
Heatmap import_heatmap_csv(const std::filesystem::path& path, std::string slide_id, int stride = kCellSize);

}  // namespace metdet
