#include "metdet/heatmap_engine.hpp"

#include "metdet/parallel.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace metdet {

Heatmap infer_heatmap(const SlidePyramid& slide, const PatchClassifier& classifier, const InferenceConfig& config,
                      const TissueGrid* precomputed_tissue) {
  if (config.stride <= 0 || kCellSize % config.stride != 0)
    throw ArgumentError("inference stride must divide " + std::to_string(kCellSize));
  const auto mags = classifier.magnifications();
  for (Magnification m : mags)
    if (!slide.has_factor(downsample_factor(m)))
      throw LoadError(LoadErrorKind::kMissingLevel, "slide " + slide.slide_id() + " lacks the " +
                                                        std::string(to_string(m)) + " level required by the classifier");
  TissueGrid tissue;
  if (precomputed_tissue) {
    if (precomputed_tissue->stride != config.stride) throw ArgumentError("tissue grid stride differs from inference stride");
    tissue = *precomputed_tissue;
  } else {
    tissue = tissue_grid(slide, config.gray_threshold, config.stride);
  }

  Heatmap hm{slide.slide_id(), config.stride, HeatmapGrid::Zero(tissue.rows(), tissue.cols())};
  std::vector<Eigen::Index> cells;
  for (Eigen::Index i = 0; i < tissue.cells.size(); ++i)
    if (tissue.cells(i)) cells.push_back(i);

  parallel_for(cells.size(), config.workers, [&](std::size_t k) {
    const Eigen::Index flat = cells[k];
    const Eigen::Index r = flat / tissue.cols(), c = flat % tissue.cols();
    double p = 0.0;
    try {
      const PatchGroup raw = extract_patch_group(slide, {slide.slide_id(), hm.cell_center(r, c), mags}, true);
      auto eval = [&](const PatchGroup& g) {
        const double v = classifier.predict(g);
        if (!(v >= 0.0 && v <= 1.0)) throw NumericError("classifier returned " + std::to_string(v));
        return v;
      };
      if (config.tta) {
        double sum = 0.0;
        for (const Orientation& o : kAllOrientations) sum += eval(to_model_range(orient(raw, o)));
        p = sum / 8.0;
      } else {
        p = eval(to_model_range(raw));
      }
    } catch (const std::exception& e) {
      throw InferenceError(static_cast<int>(r), static_cast<int>(c), e.what());
    }
    hm.prob(r, c) = static_cast<float>(p);
  });
  return hm;
}

double slide_score(const Heatmap& heatmap) {
  if (heatmap.prob.size() == 0) throw ArgumentError("slide_score of an empty heatmap");
  return heatmap.prob.maxCoeff();
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'D', 'H', 'M'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "heatmap I/O assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("truncated heatmap file: " + what);
  return v;
}

}  // namespace

void save_heatmap(const Heatmap& hm, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write heatmap " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(hm.slide_id.size()));
  out.write(hm.slide_id.data(), std::streamsize(hm.slide_id.size()));
  put_u32(out, static_cast<std::uint32_t>(hm.rows()));
  put_u32(out, static_cast<std::uint32_t>(hm.cols()));
  put_u32(out, static_cast<std::uint32_t>(hm.stride));
  out.write(reinterpret_cast<const char*>(hm.prob.data()), std::streamsize(hm.prob.size() * sizeof(float)));
  if (!out) throw IoError("write failed for heatmap " + path.string());
}

Heatmap load_heatmap(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open heatmap " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + " is not a heatmap file");
  const std::uint32_t version = get_u32(in, path.string());
  if (version != kVersion) throw FormatError("unsupported heatmap version " + std::to_string(version));
  const std::uint32_t id_len = get_u32(in, path.string());
  if (id_len > 4096) throw FormatError("corrupt heatmap header in " + path.string());
  Heatmap hm;
  hm.slide_id.resize(id_len);
  if (!in.read(hm.slide_id.data(), id_len)) throw FormatError("truncated heatmap file: " + path.string());
  const std::uint32_t rows = get_u32(in, path.string());
  const std::uint32_t cols = get_u32(in, path.string());
  hm.stride = static_cast<int>(get_u32(in, path.string()));
  if (hm.stride <= 0) throw FormatError("invalid stride in " + path.string());
  hm.prob.resize(rows, cols);
  const std::streamsize bytes = std::streamsize(std::size_t(rows) * cols * sizeof(float));
  if (bytes > 0 && !in.read(reinterpret_cast<char*>(hm.prob.data()), bytes))
    throw FormatError("truncated heatmap file: " + path.string());
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in heatmap file " + path.string());
  return hm;
}

void export_heatmap_csv(const Heatmap& hm, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "row,col,prob\n";
  char buf[64];
  for (Eigen::Index r = 0; r < hm.rows(); ++r)
    for (Eigen::Index c = 0; c < hm.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%ld,%ld,%.9g\n", long(r), long(c), double(hm.prob(r, c)));
      out << buf;
    }
}

Heatmap import_heatmap_csv(const std::filesystem::path& path, std::string slide_id, int stride) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "row,col,prob") throw FormatError("missing CSV header in " + path.string());
  std::vector<std::tuple<long, long, float>> cells;
  long rows = 0, cols = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    long r, c;
    double p;
    if (std::sscanf(line.c_str(), "%ld,%ld,%lf", &r, &c, &p) != 3 || r < 0 || c < 0)
      throw FormatError("bad CSV line '" + line + "' in " + path.string());
    cells.emplace_back(r, c, static_cast<float>(p));
    rows = std::max(rows, r + 1);
    cols = std::max(cols, c + 1);
  }
  Heatmap hm{std::move(slide_id), stride, HeatmapGrid::Zero(rows, cols)};
  for (auto [r, c, p] : cells) hm.prob(r, c) = p;
  return hm;
}

}  // namespace metdet
