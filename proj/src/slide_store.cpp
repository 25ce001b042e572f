#include "metdet/slide_store.hpp"

#include "metdet/png_io.hpp"
#include "metdet/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <list>
#include <mutex>
#include <numbers>
#include <random>
#include <set>
#include <unordered_map>

namespace metdet {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

int floor_div(int a, int b) {
  int q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

class InMemorySource final : public LevelSource {
 public:
  explicit InMemorySource(std::vector<Rgb8Image> levels) : levels_(std::move(levels)) {}

  void read(int level_index, int x, int y, int w, int h, std::uint8_t* out) const override {
    const Rgb8Image& img = levels_[std::size_t(level_index)];
    for (int r = 0; r < h; ++r) std::copy_n(img.pixel(x, y + r), std::size_t(w) * 3, out + std::size_t(r) * w * 3);
  }

 private:
  std::vector<Rgb8Image> levels_;
};

class TileDirectorySource final : public LevelSource {
 public:
  TileDirectorySource(fs::path dir, std::vector<PyramidLevel> levels, int tile_size, std::size_t cache_tiles = 512)
      : dir_(std::move(dir)), levels_(std::move(levels)), tile_size_(tile_size), capacity_(cache_tiles) {}

  static fs::path tile_path(const fs::path& dir, int factor, int row, int col) {
    return dir / ("L" + std::to_string(factor)) / ("r" + std::to_string(row) + "_c" + std::to_string(col) + ".png");
  }

  std::pair<int, int> tile_dims(const PyramidLevel& level, int row, int col) const {
    return {std::min(tile_size_, level.width - col * tile_size_), std::min(tile_size_, level.height - row * tile_size_)};
  }

  void read(int level_index, int x, int y, int w, int h, std::uint8_t* out) const override {
    const PyramidLevel& level = levels_[std::size_t(level_index)];
    const int c0 = x / tile_size_, c1 = (x + w - 1) / tile_size_;
    const int r0 = y / tile_size_, r1 = (y + h - 1) / tile_size_;
    for (int tr = r0; tr <= r1; ++tr) {
      for (int tc = c0; tc <= c1; ++tc) {
        auto tile = fetch(level_index, level, tr, tc);
        const int tx0 = tc * tile_size_, ty0 = tr * tile_size_;
        const int ix0 = std::max(x, tx0), ix1 = std::min(x + w, tx0 + tile->width);
        const int iy0 = std::max(y, ty0), iy1 = std::min(y + h, ty0 + tile->height);
        for (int yy = iy0; yy < iy1; ++yy)
          std::copy_n(tile->pixel(ix0 - tx0, yy - ty0), std::size_t(ix1 - ix0) * 3,
                      out + (std::size_t(yy - y) * w + (ix0 - x)) * 3);
      }
    }
  }

 private:
  using Key = std::uint64_t;

  std::shared_ptr<const Rgb8Image> fetch(int level_index, const PyramidLevel& level, int row, int col) const {
    const Key key = (Key(level_index) << 48) | (Key(row) << 24) | Key(col);
    {
      std::lock_guard lock(mutex_);
      if (auto it = index_.find(key); it != index_.end()) {
        lru_.splice(lru_.begin(), lru_, it->second);
        return it->second->second;
      }
    }
    const fs::path path = tile_path(dir_, level.factor, row, col);
    Rgb8Image img;
    try {
      img = png::read_rgb8(path);
    } catch (const FormatError& e) {
      if (!fs::exists(path)) throw LoadError(LoadErrorKind::kMissingTile, "missing tile " + path.string());
      throw LoadError(LoadErrorKind::kCorruptTile, e.what());
    }
    auto [ew, eh] = tile_dims(level, row, col);
    if (img.width != ew || img.height != eh)
      throw LoadError(LoadErrorKind::kDimensionMismatch, "tile " + path.string() + " is " + std::to_string(img.width) +
                                                             "x" + std::to_string(img.height) + ", expected " +
                                                             std::to_string(ew) + "x" + std::to_string(eh));
    auto tile = std::make_shared<const Rgb8Image>(std::move(img));
    std::lock_guard lock(mutex_);
    if (auto it = index_.find(key); it != index_.end()) return it->second->second;
    lru_.emplace_front(key, tile);
    index_[key] = lru_.begin();
    if (lru_.size() > capacity_) {
      index_.erase(lru_.back().first);
      lru_.pop_back();
    }
    return tile;
  }

  fs::path dir_;
  std::vector<PyramidLevel> levels_;
  int tile_size_;
  std::size_t capacity_;
  mutable std::mutex mutex_;
  mutable std::list<std::pair<Key, std::shared_ptr<const Rgb8Image>>> lru_;
  mutable std::unordered_map<Key, decltype(lru_)::iterator> index_;
};

}  // namespace

// ---------------------------------------------------------------------------
// SlidePyramid
// ---------------------------------------------------------------------------

SlidePyramid::SlidePyramid(std::string slide_id, int width, int height, double mpp, std::vector<PyramidLevel> levels,
                           std::shared_ptr<const LevelSource> source)
    : slide_id_(std::move(slide_id)), width_(width), height_(height), mpp_(mpp), levels_(std::move(levels)),
      source_(std::move(source)) {
  if (width_ <= 0 || height_ <= 0) throw ArgumentError("slide dimensions must be positive");
  if (levels_.empty() || levels_.front().factor != 1)
    throw LoadError(LoadErrorKind::kMissingLevel, "slide " + slide_id_ + " has no factor-1 level");
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    const auto& l = levels_[i];
    if (i > 0 && l.factor <= levels_[i - 1].factor) throw ArgumentError("level factors must be strictly increasing");
    if (l.width != ceil_div(width_, l.factor) || l.height != ceil_div(height_, l.factor))
      throw LoadError(LoadErrorKind::kDimensionMismatch,
                      "level factor " + std::to_string(l.factor) + " has wrong dimensions for slide " + slide_id_);
  }
}

SlidePyramid SlidePyramid::from_levels(std::string slide_id, double mpp, std::vector<std::pair<int, Rgb8Image>> levels) {
  std::sort(levels.begin(), levels.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  if (levels.empty() || levels.front().first != 1)
    throw LoadError(LoadErrorKind::kMissingLevel, "slide " + slide_id + " has no factor-1 level");
  const int w = levels.front().second.width, h = levels.front().second.height;
  std::vector<PyramidLevel> meta;
  std::vector<Rgb8Image> images;
  for (auto& [f, img] : levels) {
    meta.push_back({f, img.width, img.height});
    images.push_back(std::move(img));
  }
  return SlidePyramid(std::move(slide_id), w, h, mpp, std::move(meta),
                      std::make_shared<InMemorySource>(std::move(images)));
}

std::vector<int> SlidePyramid::factors() const {
  std::vector<int> out;
  for (const auto& l : levels_) out.push_back(l.factor);
  return out;
}

bool SlidePyramid::has_factor(int factor) const {
  return std::any_of(levels_.begin(), levels_.end(), [&](const auto& l) { return l.factor == factor; });
}

int SlidePyramid::level_index(int factor) const {
  for (std::size_t i = 0; i < levels_.size(); ++i)
    if (levels_[i].factor == factor) return static_cast<int>(i);
  throw LoadError(LoadErrorKind::kMissingLevel,
                  "slide " + slide_id_ + " has no level with downsample factor " + std::to_string(factor));
}

Rgb8Image SlidePyramid::read_level_rect(int factor, int lx, int ly, int lw, int lh) const {
  if (lw <= 0 || lh <= 0) throw ArgumentError("read extent must be positive");
  const int li = level_index(factor);
  const PyramidLevel& level = levels_[std::size_t(li)];
  Rgb8Image out(lw, lh, 255);
  const int x0 = std::max(lx, 0), x1 = std::min(lx + lw, level.width);
  const int y0 = std::max(ly, 0), y1 = std::min(ly + lh, level.height);
  if (x0 >= x1 || y0 >= y1) return out;
  if (x0 == lx && y0 == ly && x1 == lx + lw && y1 == ly + lh) {
    source_->read(li, lx, ly, lw, lh, out.data.data());
    return out;
  }
  Rgb8Image inner(x1 - x0, y1 - y0);
  source_->read(li, x0, y0, inner.width, inner.height, inner.data.data());
  for (int y = y0; y < y1; ++y)
    std::copy_n(inner.pixel(0, y - y0), std::size_t(inner.width) * 3, out.pixel(x0 - lx, y - ly));
  return out;
}

RgbImagef SlidePyramid::read_region(int factor, int x, int y, int w, int h) const {
  if (w <= 0 || h <= 0) throw ArgumentError("read_region extent must be positive");
  if (factor <= 0) throw ArgumentError("downsample factor must be positive");
  const int ow = w / factor, oh = h / factor;
  if (ow == 0 || oh == 0) throw ArgumentError("read_region extent smaller than the downsample factor");
  return to_float(read_level_rect(factor, floor_div(x, factor), floor_div(y, factor), ow, oh));
}

Rgb8Image SlidePyramid::read_level(int factor) const {
  const auto& l = levels_[std::size_t(level_index(factor))];
  return read_level_rect(factor, 0, 0, l.width, l.height);
}

Rgb8Image downsample_area(const Rgb8Image& base, int factor) {
  if (factor <= 0) throw ArgumentError("downsample factor must be positive");
  if (factor == 1) return base;
  Rgb8Image out(ceil_div(base.width, factor), ceil_div(base.height, factor));
  for (int oy = 0; oy < out.height; ++oy) {
    const int y0 = oy * factor, y1 = std::min(y0 + factor, base.height);
    for (int ox = 0; ox < out.width; ++ox) {
      const int x0 = ox * factor, x1 = std::min(x0 + factor, base.width);
      unsigned sum[3] = {0, 0, 0};
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const std::uint8_t* p = base.pixel(x, y);
          sum[0] += p[0];
          sum[1] += p[1];
          sum[2] += p[2];
        }
      const unsigned n = unsigned((y1 - y0) * (x1 - x0));
      std::uint8_t* q = out.pixel(ox, oy);
      for (int c = 0; c < 3; ++c) q[c] = static_cast<std::uint8_t>((2 * sum[c] + n) / (2 * n));
    }
  }
  return out;
}

SlidePyramid build_pyramid(std::string slide_id, double mpp, Rgb8Image base, const std::vector<int>& factors) {
  std::vector<std::pair<int, Rgb8Image>> levels;
  for (int f : factors)
    if (f != 1) levels.emplace_back(f, downsample_area(base, f));
  levels.emplace_back(1, std::move(base));
  return SlidePyramid::from_levels(std::move(slide_id), mpp, std::move(levels));
}

void write_pyramid(const SlidePyramid& slide, const fs::path& dir, PyramidWriteOptions options) {
  if (options.tile_size <= 0) throw ArgumentError("tile size must be positive");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json meta = {{"slide_id", slide.slide_id()}, {"width", slide.width()},         {"height", slide.height()},
               {"mpp", slide.mpp()},           {"tile_size", options.tile_size}, {"factors", slide.factors()}};
  {
    std::ofstream out(dir / "meta.json");
    if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
    out << meta.dump(2) << "\n";
  }
  const int ts = options.tile_size;
  for (const auto& level : slide.levels()) {
    fs::create_directories(dir / ("L" + std::to_string(level.factor)), ec);
    if (ec) throw IoError("cannot create level directory under " + dir.string());
    for (int r = 0; r * ts < level.height; ++r)
      for (int c = 0; c * ts < level.width; ++c) {
        const int w = std::min(ts, level.width - c * ts), h = std::min(ts, level.height - r * ts);
        png::write_rgb8(TileDirectorySource::tile_path(dir, level.factor, r, c),
                        slide.read_level_rect(level.factor, c * ts, r * ts, w, h));
      }
  }
}

SlidePyramid open_slide(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw LoadError(LoadErrorKind::kMissingMetadata, "missing " + meta_path.string());
  json meta;
  std::string slide_id;
  int width = 0, height = 0, tile_size = 0;
  double mpp = 0;
  std::vector<int> factors;
  try {
    in >> meta;
    slide_id = meta.at("slide_id").get<std::string>();
    width = meta.at("width").get<int>();
    height = meta.at("height").get<int>();
    mpp = meta.at("mpp").get<double>();
    tile_size = meta.at("tile_size").get<int>();
    factors = meta.at("factors").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::kMissingMetadata, "invalid " + meta_path.string() + ": " + e.what());
  }
  if (width <= 0 || height <= 0 || tile_size <= 0)
    throw LoadError(LoadErrorKind::kDimensionMismatch, "non-positive dimensions in " + meta_path.string());
  if (std::find(factors.begin(), factors.end(), 1) == factors.end())
    throw LoadError(LoadErrorKind::kMissingLevel, "slide " + slide_id + " declares no factor-1 level");
  std::vector<PyramidLevel> levels;
  for (int f : factors) {
    if (f <= 0) throw LoadError(LoadErrorKind::kDimensionMismatch, "invalid factor in " + meta_path.string());
    const PyramidLevel level{f, ceil_div(width, f), ceil_div(height, f)};
    const fs::path level_dir = dir / ("L" + std::to_string(f));
    if (!fs::is_directory(level_dir)) throw LoadError(LoadErrorKind::kMissingLevel, "missing level " + level_dir.string());
    const int rows = ceil_div(level.height, tile_size), cols = ceil_div(level.width, tile_size);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        if (!fs::exists(TileDirectorySource::tile_path(dir, f, r, c)))
          throw LoadError(LoadErrorKind::kMissingTile,
                          "missing tile " + TileDirectorySource::tile_path(dir, f, r, c).string());
    // Probe the first and last tile headers; remaining tiles are checked on decode.
    for (auto [r, c] : {std::pair{0, 0}, std::pair{rows - 1, cols - 1}}) {
      const fs::path p = TileDirectorySource::tile_path(dir, f, r, c);
      std::pair<int, int> dims;
      try {
        dims = png::read_dimensions(p);
      } catch (const FormatError& e) {
        throw LoadError(LoadErrorKind::kCorruptTile, e.what());
      }
      const int ew = std::min(tile_size, level.width - c * tile_size);
      const int eh = std::min(tile_size, level.height - r * tile_size);
      if (dims.first != ew || dims.second != eh)
        throw LoadError(LoadErrorKind::kDimensionMismatch, "tile " + p.string() + " does not match meta.json");
    }
    levels.push_back(level);
  }
  std::sort(levels.begin(), levels.end(), [](const auto& a, const auto& b) { return a.factor < b.factor; });
  auto source = std::make_shared<TileDirectorySource>(dir, levels, tile_size);
  return SlidePyramid(std::move(slide_id), width, height, mpp, std::move(levels), std::move(source));
}

// ---------------------------------------------------------------------------
// AnnotationMask
// ---------------------------------------------------------------------------

AnnotationMask::AnnotationMask(std::string slide_id, int width, int height)
    : slide_id_(std::move(slide_id)), width_(width), height_(height), rows_(std::size_t(std::max(height, 0))) {
  if (width < 0 || height < 0) throw ArgumentError("mask dimensions must be non-negative");
}

AnnotationMask AnnotationMask::from_dense(std::string slide_id, int width, int height,
                                          const std::vector<std::uint8_t>& bits) {
  if (bits.size() != std::size_t(width) * std::size_t(height)) throw ArgumentError("dense mask size mismatch");
  AnnotationMask m(std::move(slide_id), width, height);
  for (int y = 0; y < height; ++y) {
    const std::uint8_t* row = bits.data() + std::size_t(y) * width;
    auto& runs = m.rows_[std::size_t(y)];
    int x = 0;
    while (x < width) {
      while (x < width && !row[x]) ++x;
      if (x == width) break;
      const int b = x;
      while (x < width && row[x]) ++x;
      runs.push_back({b, x});
    }
  }
  return m;
}

void AnnotationMask::add_run(int y, int begin, int end) {
  if (y < 0 || y >= height_) return;
  begin = std::max(begin, 0);
  end = std::min(end, width_);
  if (begin >= end) return;
  auto& runs = rows_[std::size_t(y)];
  std::vector<Run> merged;
  merged.reserve(runs.size() + 1);
  Run cur{begin, end};
  bool placed = false;
  for (const Run& r : runs) {
    if (r.end < cur.begin) {
      merged.push_back(r);
    } else if (cur.end < r.begin) {
      if (!placed) {
        merged.push_back(cur);
        placed = true;
      }
      merged.push_back(r);
    } else {
      cur.begin = std::min(cur.begin, r.begin);
      cur.end = std::max(cur.end, r.end);
    }
  }
  if (!placed) merged.push_back(cur);
  runs = std::move(merged);
}

bool AnnotationMask::at(int x, int y) const {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return false;
  const auto& runs = rows_[std::size_t(y)];
  auto it = std::upper_bound(runs.begin(), runs.end(), x, [](int v, const Run& r) { return v < r.end; });
  return it != runs.end() && it->begin <= x;
}

std::int64_t AnnotationMask::count_in_rect(int x0, int y0, int x1, int y1) const {
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, width_);
  y1 = std::min(y1, height_);
  std::int64_t n = 0;
  for (int y = y0; y < y1; ++y) {
    const auto& runs = rows_[std::size_t(y)];
    auto it = std::upper_bound(runs.begin(), runs.end(), x0, [](int v, const Run& r) { return v < r.end; });
    for (; it != runs.end() && it->begin < x1; ++it) n += std::min(it->end, x1) - std::max(it->begin, x0);
  }
  return n;
}

std::int64_t AnnotationMask::count() const { return count_in_rect(0, 0, width_, height_); }

std::vector<std::uint8_t> AnnotationMask::to_dense() const {
  std::vector<std::uint8_t> bits(std::size_t(width_) * height_, 0);
  for (int y = 0; y < height_; ++y)
    for (const Run& r : rows_[std::size_t(y)])
      std::fill(bits.begin() + std::ptrdiff_t(y) * width_ + r.begin, bits.begin() + std::ptrdiff_t(y) * width_ + r.end,
                1);
  return bits;
}

void write_mask(const AnnotationMask& mask, const fs::path& path) {
  png::write_bitmask(path, mask.width(), mask.height(), mask.to_dense());
}

AnnotationMask read_mask(const fs::path& path, std::string slide_id) {
  png::Gray8 g;
  try {
    g = png::read_gray8(path);
  } catch (const FormatError& e) {
    if (!fs::exists(path)) throw LoadError(LoadErrorKind::kMissingTile, "missing mask " + path.string());
    throw LoadError(LoadErrorKind::kCorruptTile, e.what());
  }
  for (auto& v : g.data) v = v >= 128 ? 1 : 0;
  return AnnotationMask::from_dense(std::move(slide_id), g.width, g.height, g.data);
}

// ---------------------------------------------------------------------------
// Regions
// ---------------------------------------------------------------------------

std::string_view to_string(SizeClass s) {
  switch (s) {
    case SizeClass::kMacro: return "macro";
    case SizeClass::kMicro: return "micro";
    case SizeClass::kIsolated: return "isolated";
  }
  return "?";
}

SizeClass classify_diameter(double diameter_um) {
  if (diameter_um > 2000.0) return SizeClass::kMacro;
  if (diameter_um > 200.0) return SizeClass::kMicro;
  return SizeClass::kIsolated;
}

RegionLabeling::RegionLabeling(const AnnotationMask& mask, double mpp)
    : width_(mask.width()), height_(mask.height()), rows_(std::size_t(mask.height())) {
  // Union-find over runs; two runs in adjacent rows touch under 8-connectivity
  // when their intervals overlap after widening by one pixel.
  std::vector<int> parent;
  auto find = [&](int a) {
    while (parent[std::size_t(a)] != a) {
      parent[std::size_t(a)] = parent[std::size_t(parent[std::size_t(a)])];
      a = parent[std::size_t(a)];
    }
    return a;
  };
  auto unite = [&](int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::size_t(std::max(a, b))] = std::min(a, b);
  };
  for (int y = 0; y < height_; ++y) {
    auto& row = rows_[std::size_t(y)];
    for (const Run& r : mask.row(y)) {
      const int id = static_cast<int>(parent.size());
      parent.push_back(id);
      row.push_back({r, id});
    }
    if (y == 0) continue;
    const auto& prev = rows_[std::size_t(y - 1)];
    std::size_t j = 0;
    for (const auto& cur : row) {
      while (j < prev.size() && prev[j].run.end < cur.run.begin) ++j;
      for (std::size_t k = j; k < prev.size() && prev[k].run.begin <= cur.run.end; ++k) unite(cur.region, prev[k].region);
    }
  }
  std::vector<int> compact(parent.size(), -1);
  for (auto& row : rows_) {
    for (auto& lr : row) {
      const int root = find(lr.region);
      if (compact[std::size_t(root)] < 0) {
        compact[std::size_t(root)] = static_cast<int>(regions_.size());
        TumorRegion t;
        t.region_id = compact[std::size_t(root)];
        t.x0 = width_;
        t.y0 = height_;
        t.x1 = -1;
        t.y1 = -1;
        regions_.push_back(t);
      }
      lr.region = compact[std::size_t(root)];
    }
  }
  for (int y = 0; y < height_; ++y)
    for (const auto& lr : rows_[std::size_t(y)]) {
      TumorRegion& t = regions_[std::size_t(lr.region)];
      t.x0 = std::min(t.x0, lr.run.begin);
      t.x1 = std::max(t.x1, lr.run.end - 1);
      t.y0 = std::min(t.y0, y);
      t.y1 = std::max(t.y1, y);
      t.pixel_count += lr.run.end - lr.run.begin;
    }
  for (auto& t : regions_) {
    t.diameter_um = double(std::max(t.x1 - t.x0 + 1, t.y1 - t.y0 + 1)) * mpp;
    t.size_class = classify_diameter(t.diameter_um);
  }
}

std::optional<int> RegionLabeling::region_at(int x, int y) const {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return std::nullopt;
  const auto& row = rows_[std::size_t(y)];
  auto it = std::upper_bound(row.begin(), row.end(), x, [](int v, const LabeledRun& r) { return v < r.run.end; });
  if (it != row.end() && it->run.begin <= x) return it->region;
  return std::nullopt;
}

std::vector<TumorRegion> connected_regions(const AnnotationMask& mask, double mpp) {
  return RegionLabeling(mask, mpp).regions();
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::string_view to_string(SlideLabel l) { return l == SlideLabel::kTumor ? "tumor" : "normal"; }

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "validation") return Split::kValidation;
  if (s == "test") return Split::kTest;
  throw ArgumentError("unknown split '" + std::string(s) + "'");
}

namespace {

SlideLabel parse_label(std::string_view s) {
  if (s == "tumor") return SlideLabel::kTumor;
  if (s == "normal") return SlideLabel::kNormal;
  throw FormatError("unknown slide label '" + std::string(s) + "'");
}

}  // namespace

DatasetManifest::DatasetManifest(std::vector<ManifestEntry> entries, fs::path base_dir)
    : entries_(std::move(entries)), base_dir_(std::move(base_dir)) {
  validate();
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries_) {
    if (e.slide_id.empty()) throw FormatError("manifest entry with empty slide_id");
    if (!ids.insert(e.slide_id).second) throw FormatError("duplicate slide_id '" + e.slide_id + "' in manifest");
    if (!e.exhaustive_annotations && e.label != SlideLabel::kTumor)
      throw FormatError("slide '" + e.slide_id + "': only tumor slides may have non-exhaustive annotations");
    if (!(e.mpp > 0)) throw FormatError("slide '" + e.slide_id + "': mpp must be positive");
  }
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  try {
    json j;
    in >> j;
    if (!j.is_array()) throw FormatError("manifest must be a JSON array");
    for (const auto& r : j) {
      ManifestEntry e;
      e.slide_id = r.at("slide_id").get<std::string>();
      e.image = r.at("image").get<std::string>();
      if (!r.at("mask").is_null()) e.mask = r.at("mask").get<std::string>();
      e.label = parse_label(r.at("label").get<std::string>());
      e.split = parse_split(r.at("split").get<std::string>());
      e.exhaustive_annotations = r.at("exhaustive_annotations").get<bool>();
      e.mpp = r.at("mpp").get<double>();
      entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError("invalid manifest " + path.string() + ": " + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError("invalid manifest " + path.string() + ": " + e.what());
  }
  return DatasetManifest(std::move(entries), path.parent_path());
}

void DatasetManifest::save(const fs::path& path) const {
  json j = json::array();
  for (const auto& e : entries_) {
    j.push_back({{"slide_id", e.slide_id},
                 {"image", e.image},
                 {"mask", e.mask ? json(*e.mask) : json(nullptr)},
                 {"label", to_string(e.label)},
                 {"split", to_string(e.split)},
                 {"exhaustive_annotations", e.exhaustive_annotations},
                 {"mpp", e.mpp}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<ManifestEntry> DatasetManifest::split(Split s) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out), [&](const auto& e) { return e.split == s; });
  return out;
}

const ManifestEntry& DatasetManifest::find(const std::string& slide_id) const {
  for (const auto& e : entries_)
    if (e.slide_id == slide_id) return e;
  throw LookupError("slide '" + slide_id + "' not in manifest");
}

std::optional<fs::path> DatasetManifest::mask_path(const ManifestEntry& e) const {
  if (!e.mask) return std::nullopt;
  return base_dir_ / *e.mask;
}

std::optional<AnnotationMask> DatasetManifest::load_mask(const ManifestEntry& e, int width, int height) const {
  if (!e.mask) {
    if (e.label == SlideLabel::kNormal) return AnnotationMask(e.slide_id, width, height);
    return std::nullopt;
  }
  AnnotationMask m = read_mask(*mask_path(e), e.slide_id);
  if (m.width() != width || m.height() != height)
    throw LoadError(LoadErrorKind::kDimensionMismatch, "mask for slide '" + e.slide_id + "' does not match slide size");
  if (e.label == SlideLabel::kTumor && m.empty())
    throw FormatError("tumor slide '" + e.slide_id + "' has a mask without tumor pixels");
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

namespace {

struct Disc {
  double cx, cy, r;
  bool contains(double x, double y) const { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; }
};

void check_config(const SyntheticSlideConfig& c) {
  if (c.width <= 0 || c.height <= 0 || c.width % kCellSize != 0 || c.height % kCellSize != 0)
    throw ConfigError("synthetic slide dimensions must be positive multiples of 128");
  if (!(c.mpp > 0)) throw ConfigError("mpp must be positive");
  if (c.tissue_blob_count < 0 || c.tumor_count < 0) throw ConfigError("counts must be non-negative");
  if (!(c.blob_radius_min > 0) || c.blob_radius_max < c.blob_radius_min)
    throw ConfigError("invalid tissue blob radius range");
  if (!(c.tumor_radius_min > 0) || c.tumor_radius_max < c.tumor_radius_min)
    throw ConfigError("invalid tumor radius range");
  if (c.tumor_margin < 0 || c.min_separation < 0) throw ConfigError("margins must be non-negative");
  const double tumor_area = c.tumor_count * std::numbers::pi * c.tumor_radius_min * c.tumor_radius_min;
  const double tissue_area = c.tissue_blob_count * std::numbers::pi * c.blob_radius_max * c.blob_radius_max;
  if (c.tumor_count > 0 && tumor_area > tissue_area) throw ConfigError("tumor area exceeds tissue area");
}

}  // namespace

SyntheticSlide generate_synthetic_slide(const SyntheticSlideConfig& c) {
  check_config(c);
  Rng rng(derive_seed(c.seed, "synthetic-layout"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Disc> blobs;
  for (int i = 0; i < c.tissue_blob_count; ++i) {
    const double r = c.blob_radius_min + (c.blob_radius_max - c.blob_radius_min) * unit(rng);
    auto place = [&](int extent) {
      if (2 * r >= extent) return extent / 2.0;
      return r + (extent - 2 * r) * unit(rng);
    };
    const double cx = place(c.width);
    const double cy = place(c.height);
    blobs.push_back({cx, cy, r});
  }

  std::vector<Disc> tumors;
  constexpr int kAttempts = 10000;
  for (int i = 0; i < c.tumor_count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
      const Disc& blob = blobs[std::size_t(rng() % blobs.size())];
      const double r = c.tumor_radius_min + (c.tumor_radius_max - c.tumor_radius_min) * unit(rng);
      const double reach = blob.r - r - c.tumor_margin;
      if (reach < 0) continue;
      const double rho = reach * std::sqrt(unit(rng));
      const double theta = 2 * std::numbers::pi * unit(rng);
      const Disc t{blob.cx + rho * std::cos(theta), blob.cy + rho * std::sin(theta), r};
      if (t.cx - r < 0 || t.cy - r < 0 || t.cx + r > c.width || t.cy + r > c.height) continue;
      // +2 keeps discretized discs out of each other's 8-neighborhood.
      const bool clear = std::all_of(tumors.begin(), tumors.end(), [&](const Disc& o) {
        return std::hypot(o.cx - t.cx, o.cy - t.cy) > o.r + t.r + c.min_separation + 2;
      });
      if (!clear) continue;
      tumors.push_back(t);
      placed = true;
    }
    if (!placed) throw ConfigError("could not place tumor " + std::to_string(i) + " within tissue");
  }

  Rgb8Image base(c.width, c.height);
  std::vector<std::uint8_t> bits(std::size_t(c.width) * c.height, 0);
  Rng texture(derive_seed(c.seed, "synthetic-texture"));
  std::uniform_real_distribution<double> noise(-1.0, 1.0);
  for (int y = 0; y < c.height; ++y) {
    for (int x = 0; x < c.width; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      std::array<double, 3> rgb{c.background_gray, c.background_gray, c.background_gray};
      double amp = 0.01;
      const bool in_tumor = std::any_of(tumors.begin(), tumors.end(), [&](const Disc& d) { return d.contains(px, py); });
      if (in_tumor) {
        rgb = c.tumor_rgb;
        amp = c.texture_amplitude;
        bits[std::size_t(y) * c.width + x] = 1;
      } else if (std::any_of(blobs.begin(), blobs.end(), [&](const Disc& d) { return d.contains(px, py); })) {
        rgb = c.tissue_rgb;
        amp = c.texture_amplitude;
      }
      const double shade = amp * noise(texture);
      std::uint8_t* p = base.pixel(x, y);
      for (int ch = 0; ch < 3; ++ch) p[ch] = quantize_unit(rgb[std::size_t(ch)] + shade + 0.25 * amp * noise(texture));
    }
  }
  SyntheticSlide out{build_pyramid(c.slide_id, c.mpp, std::move(base)),
                     AnnotationMask::from_dense(c.slide_id, c.width, c.height, bits)};
  return out;
}

}  // namespace metdet
