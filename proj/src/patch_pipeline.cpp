#include "metdet/patch_pipeline.hpp"

#include "metdet/png_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>

namespace metdet {

TissueGrid tissue_grid(const SlidePyramid& slide, double gray_threshold, int stride) {
  if (stride <= 0) throw ArgumentError("tissue grid stride must be positive");
  TissueGrid grid;
  grid.stride = stride;
  const int rows = (slide.height() + stride - 1) / stride;
  const int cols = (slide.width() + stride - 1) / stride;
  grid.cells.resize(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const int y0 = r * stride;
    const int h = std::min(stride, slide.height() - y0);
    const Rgb8Image strip = slide.read_level_rect(1, 0, y0, slide.width(), h);
    for (int c = 0; c < cols; ++c) {
      const int x0 = c * stride;
      const int w = std::min(stride, slide.width() - x0);
      std::uint64_t sum = 0;
      for (int y = 0; y < h; ++y) {
        const std::uint8_t* p = strip.pixel(x0, y);
        for (int x = 0; x < w * 3; ++x) sum += p[x];
      }
      const double mean_gray = double(sum) / (255.0 * 3.0 * double(w) * double(h));
      grid.cells(r, c) = !(mean_gray > gray_threshold);
    }
  }
  return grid;
}

std::int64_t center_region_tumor_pixels(const AnnotationMask& mask, Point2i center) {
  const int half = kCellSize / 2;
  return mask.count_in_rect(center.x - half, center.y - half, center.x + half, center.y + half);
}

int patch_hard_label(const AnnotationMask& mask, Point2i center) {
  return center_region_tumor_pixels(mask, center) > 0 ? 1 : 0;
}

double patch_soft_label(const AnnotationMask& mask, Point2i center) {
  return double(center_region_tumor_pixels(mask, center)) / double(kCellSize * kCellSize);
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

SamplerSlide make_sampler_slide(const std::string& slide_id, SlideLabel label, bool exhaustive_annotations,
                                const TissueGrid& tissue, const AnnotationMask* mask) {
  SamplerSlide s{slide_id, label, exhaustive_annotations, {}, {}};
  if (!mask && label == SlideLabel::kTumor) return s;
  const bool keep_normal = label == SlideLabel::kNormal || exhaustive_annotations;
  for (Eigen::Index r = 0; r < tissue.rows(); ++r)
    for (Eigen::Index c = 0; c < tissue.cols(); ++c) {
      if (!tissue.cells(r, c)) continue;
      const Point2i center = cell_center(r, c, tissue.stride);
      const double soft = mask ? patch_soft_label(*mask, center) : 0.0;
      if (soft > 0)
        s.tumor_cells.push_back({center, soft});
      else if (keep_normal)
        s.normal_cells.push_back({center, 0.0});
    }
  return s;
}

BalancedSampler::BalancedSampler(std::vector<SamplerSlide> slides, std::uint64_t seed, int jitter_max)
    : slides_(std::move(slides)), seed_(seed), jitter_max_(jitter_max) {
  if (jitter_max < 0) throw ArgumentError("jitter must be non-negative");
  for (std::size_t i = 0; i < slides_.size(); ++i) {
    if (!slides_[i].tumor_cells.empty()) tumor_slides_.push_back(i);
    if (!slides_[i].normal_cells.empty()) normal_slides_.push_back(i);
  }
}

TrainingDraw BalancedSampler::draw(std::uint64_t index) const {
  Rng rng(derive_seed(seed_, "training-draw", {index}));
  const int cls = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
  const auto& pool = cls ? tumor_slides_ : normal_slides_;
  if (pool.empty())
    throw SamplingError(std::string("no slide holds eligible ") + (cls ? "tumor" : "normal") + " patches");
  const std::size_t slide_index = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  const SamplerSlide& slide = slides_[slide_index];
  const auto& cells = cls ? slide.tumor_cells : slide.normal_cells;
  const SampleCell& cell = cells[std::uniform_int_distribution<std::size_t>(0, cells.size() - 1)(rng)];
  std::uniform_int_distribution<int> jitter(-jitter_max_, jitter_max_);
  TrainingDraw d;
  d.index = index;
  d.slide_index = slide_index;
  d.slide_id = slide.slide_id;
  d.drawn_class = cls;
  d.cell_center = cell.center;
  d.jitter.x = jitter(rng);
  d.jitter.y = jitter(rng);
  d.center = {cell.center.x + d.jitter.x, cell.center.y + d.jitter.y};
  d.hard_label = cls;
  d.soft_label = cell.soft_label;
  return d;
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

const RgbImagef& PatchGroup::at(Magnification m) const {
  for (const auto& [mag, img] : members)
    if (mag == m) return img;
  throw LookupError("patch group has no " + std::string(to_string(m)) + " member");
}

PatchGroup extract_patch_group(const SlidePyramid& slide, const PatchSpec& spec, bool allow_off_slide) {
  if (!allow_off_slide && (spec.center.x < 0 || spec.center.y < 0 || spec.center.x >= slide.width() || spec.center.y >= slide.height()))
    throw ArgumentError("patch center outside slide " + slide.slide_id());
  if (spec.magnifications.empty()) throw ArgumentError("patch spec without magnifications");
  PatchGroup g{spec.slide_id.empty() ? slide.slide_id() : spec.slide_id, spec.center, {}};
  for (Magnification m : spec.magnifications) {
    const int f = downsample_factor(m);
    const Point2i o = patch_origin(spec.center, f);
    g.members.emplace_back(m, slide.read_region(f, o.x, o.y, kPatchSize * f, kPatchSize * f));
  }
  return g;
}

PatchGroup orient(const PatchGroup& group, Orientation o) {
  PatchGroup out{group.slide_id, group.center, {}};
  for (const auto& [m, img] : group.members) out.members.emplace_back(m, orient(img, o));
  return out;
}

PatchGroup to_model_range(const PatchGroup& group) {
  PatchGroup out{group.slide_id, group.center, {}};
  for (const auto& [m, img] : group.members) out.members.emplace_back(m, to_model_range(img));
  return out;
}

// ---------------------------------------------------------------------------
// Color
// ---------------------------------------------------------------------------

void AugmentParams::validate() const {
  if (brightness_delta_max < 0 || saturation_delta_max < 0 || hue_delta_max < 0 || contrast_delta_max < 0 ||
      jitter_max < 0)
    throw ArgumentError("augmentation maxima must be non-negative");
}

ColorDraws sample_color_draws(Rng& rng, const AugmentParams& p) {
  p.validate();
  auto sym = [&](double m) { return m > 0 ? std::uniform_real_distribution<double>(-m, m)(rng) : 0.0; };
  ColorDraws d;
  d.brightness = sym(p.brightness_delta_max);
  d.saturation = 1.0 + sym(p.saturation_delta_max);
  d.hue = sym(p.hue_delta_max);
  d.contrast = 1.0 + sym(p.contrast_delta_max);
  return d;
}

namespace {

[[gnu::target_clones("avx2", "default")]] void shift_hue_saturation(float* __restrict R, float* __restrict G, float* __restrict B, Eigen::Index n, float scale,
                          float shift6) {
  // Branch-free HSV round trip so the loop vectorizes. Gray and black pixels
  // keep their value: hue and saturation changes are no-ops there.
  for (Eigen::Index i = 0; i < n; ++i) {
    const float r = R[i], g = G[i], b = B[i];
    const float mx = std::max(r, std::max(g, b));
    const float delta = mx - std::min(r, std::min(g, b));
    const bool chromatic = (delta > 0.0f) & (mx > 0.0f);
    const float safe_delta = chromatic ? delta : 1.0f;
    const float safe_mx = chromatic ? mx : 1.0f;
    const float hr = (g - b) / safe_delta, hg = (b - r) / safe_delta + 2.0f, hb = (r - g) / safe_delta + 4.0f;
    float h6 = mx == g ? hg : hb;
    h6 = mx == r ? hr : h6;
    // h6 lies in [-1, 5) before the shift, so one wrap each way suffices.
    h6 += shift6;
    h6 = h6 < 0.0f ? h6 + 6.0f : h6;
    h6 = h6 >= 6.0f ? h6 - 6.0f : h6;
    const float vs = mx * std::min(delta * scale / safe_mx, 1.0f);
    // Channel with offset o in {5, 3, 1}: v - v s clamp(min(k, 4 - k), 0, 1), k = (o + h6) mod 6.
    float kr = h6 + 5.0f, kg = h6 + 3.0f, kb = h6 + 1.0f;
    kr = kr >= 6.0f ? kr - 6.0f : kr;
    kg = kg >= 6.0f ? kg - 6.0f : kg;
    kb = kb >= 6.0f ? kb - 6.0f : kb;
    const float nr = mx - vs * std::min(std::max(std::min(kr, 4.0f - kr), 0.0f), 1.0f);
    const float ng = mx - vs * std::min(std::max(std::min(kg, 4.0f - kg), 0.0f), 1.0f);
    const float nb = mx - vs * std::min(std::max(std::min(kb, 4.0f - kb), 0.0f), 1.0f);
    R[i] = chromatic ? nr : r;
    G[i] = chromatic ? ng : g;
    B[i] = chromatic ? nb : b;
  }
}

// Four interleaved double partials, combined in a fixed order.
double sum_in_order(const float* v, Eigen::Index n) {
  double part[4] = {0.0, 0.0, 0.0, 0.0};
  Eigen::Index i = 0;
  for (; i + 4 <= n; i += 4)
    for (int k = 0; k < 4; ++k) part[k] += double(v[i + k]);
  for (; i < n; ++i) part[0] += double(v[i]);
  return (part[0] + part[1]) + (part[2] + part[3]);
}

// clip((v - mean) f + mean) to [0, 1]; f = 1, mean = 0 is a plain clip.
[[gnu::target_clones("avx2", "default")]] void contrast_clip(float* __restrict v, Eigen::Index n, float mean, float f) {
  if (f == 1.0f) {
    for (Eigen::Index i = 0; i < n; ++i) v[i] = std::min(std::max(v[i], 0.0f), 1.0f);
    return;
  }
  for (Eigen::Index i = 0; i < n; ++i) v[i] = std::min(std::max((v[i] - mean) * f + mean, 0.0f), 1.0f);
}

}  // namespace

void apply_color_inplace(RgbImagef& img, const ColorDraws& d) {
  float* ch[3] = {img.channels[0].data(), img.channels[1].data(), img.channels[2].data()};
  const Eigen::Index n = img.channels[0].size();
  const bool shift_color = d.saturation != 1.0 || d.hue != 0.0;
  const bool contrast = d.contrast != 1.0;
  const float brightness = static_cast<float>(d.brightness);
  const float scale = static_cast<float>(d.saturation);
  const float shift6 = static_cast<float>(d.hue - std::round(d.hue)) * 6.0f;  // in [-3, 3]
  // Chunked so each stage runs on cache-resident data.
  constexpr Eigen::Index kChunk = 4096;
  std::array<double, 3> sums{0.0, 0.0, 0.0};
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index len = std::min(kChunk, n - start);
    if (brightness != 0.0f)
      for (float* c : ch)
        for (Eigen::Index i = start; i < start + len; ++i) c[i] += brightness;
    if (shift_color) shift_hue_saturation(ch[0] + start, ch[1] + start, ch[2] + start, len, scale, shift6);
    if (contrast)
      for (std::size_t c = 0; c < 3; ++c) sums[c] += sum_in_order(ch[c] + start, len);
  }
  for (std::size_t c = 0; c < 3; ++c) {
    if (contrast)
      contrast_clip(ch[c], n, static_cast<float>(sums[c] / double(n)), static_cast<float>(d.contrast));
    else
      contrast_clip(ch[c], n, 0.0f, 1.0f);
  }
}

RgbImagef apply_color(const RgbImagef& patch, const ColorDraws& d) {
  RgbImagef out = patch;
  apply_color_inplace(out, d);
  return out;
}

RgbImagef perturb_color(const RgbImagef& patch, Rng& rng, const AugmentParams& params) {
  return apply_color(patch, sample_color_draws(rng, params));
}

AugmentDraw sample_augment(Rng& rng, const AugmentParams& params) {
  AugmentDraw a;
  a.orientation = kAllOrientations[std::uniform_int_distribution<std::size_t>(0, 7)(rng)];
  a.color = sample_color_draws(rng, params);
  return a;
}

PatchGroup apply_augment(const PatchGroup& group, const AugmentDraw& draw) {
  PatchGroup out{group.slide_id, group.center, {}};
  for (const auto& [m, img] : group.members) out.members.emplace_back(m, apply_color(orient(img, draw.orientation), draw.color));
  return out;
}

// ---------------------------------------------------------------------------
// Dump
// ---------------------------------------------------------------------------

PatchDumpWriter::PatchDumpWriter(const std::filesystem::path& dir) : dir_(dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
  jsonl_.open(dir_ / "samples.jsonl");
  if (!jsonl_) throw IoError("cannot write " + (dir_ / "samples.jsonl").string());
}

void PatchDumpWriter::write(const TrainingDraw& draw, const PatchGroup& group, const std::optional<AugmentDraw>& augment) {
  char stem[32];
  std::snprintf(stem, sizeof stem, "%06llu", static_cast<unsigned long long>(draw.index));
  nlohmann::json files = nlohmann::json::array();
  for (const auto& [m, img] : group.members) {
    const std::string name = std::string(stem) + "_" + std::string(to_string(m)) + ".png";
    png::write_rgb8(dir_ / name, to_rgb8(img));
    files.push_back(name);
  }
  nlohmann::json rec = {{"index", draw.index},
                        {"slide_id", draw.slide_id},
                        {"center", {draw.center.x, draw.center.y}},
                        {"cell_center", {draw.cell_center.x, draw.cell_center.y}},
                        {"jitter", {draw.jitter.x, draw.jitter.y}},
                        {"hard_label", draw.hard_label},
                        {"soft_label", draw.soft_label},
                        {"files", files}};
  if (augment) {
    rec["augment"] = {{"rotations", augment->orientation.rotations},
                      {"flip", augment->orientation.flip},
                      {"brightness", augment->color.brightness},
                      {"saturation", augment->color.saturation},
                      {"hue", augment->color.hue},
                      {"contrast", augment->color.contrast}};
  } else {
    rec["augment"] = nullptr;
  }
  jsonl_ << rec.dump() << "\n";
  if (!jsonl_) throw IoError("write failed for " + (dir_ / "samples.jsonl").string());
}

}  // namespace metdet
