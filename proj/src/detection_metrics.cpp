#include "metdet/detection_metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace metdet {

// ---------------------------------------------------------------------------
// Point extraction
// ---------------------------------------------------------------------------

std::vector<DetectionPoint> nms_points(const Heatmap& heatmap, double radius, double threshold) {
  if (!(radius >= 0)) throw ArgumentError("NMS radius must be non-negative");
  if (!(threshold > 0 && threshold < 1)) throw ArgumentError("NMS threshold must lie in (0, 1)");
  HeatmapGrid work = heatmap.prob;
  const Eigen::Index rows = work.rows(), cols = work.cols();
  const auto reach = static_cast<Eigen::Index>(std::floor(radius));
  const double r2 = radius * radius;
  std::vector<DetectionPoint> points;
  for (;;) {
    Eigen::Index best_r = -1, best_c = -1;
    float best = 0.0f;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        if (best_r < 0 || work(r, c) > best) {
          best = work(r, c);
          best_r = r;
          best_c = c;
        }
    if (best_r < 0 || !(double(best) > threshold)) break;
    const Point2i p = heatmap.cell_center(best_r, best_c);
    points.push_back({heatmap.slide_id, p.x, p.y, double(best)});
    for (Eigen::Index r = std::max<Eigen::Index>(0, best_r - reach); r <= std::min(rows - 1, best_r + reach); ++r)
      for (Eigen::Index c = std::max<Eigen::Index>(0, best_c - reach); c <= std::min(cols - 1, best_c + reach); ++c) {
        const double dr = double(r - best_r), dc = double(c - best_c);
        if (dr * dr + dc * dc <= r2) work(r, c) = 0.0f;
      }
  }
  return points;
}

std::vector<DetectionPoint> cc_points(const Heatmap& heatmap, double threshold) {
  if (!(threshold > 0 && threshold < 1)) throw ArgumentError("component threshold must lie in (0, 1)");
  const Eigen::Index rows = heatmap.rows(), cols = heatmap.cols();
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> label =
      Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(rows, cols, -1);
  std::vector<DetectionPoint> points;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> stack;
  int next = 0;
  for (Eigen::Index r0 = 0; r0 < rows; ++r0)
    for (Eigen::Index c0 = 0; c0 < cols; ++c0) {
      if (label(r0, c0) >= 0 || !(double(heatmap.prob(r0, c0)) > threshold)) continue;
      Eigen::Index best_r = r0, best_c = c0;
      label(r0, c0) = next;
      stack.assign(1, {r0, c0});
      while (!stack.empty()) {
        auto [r, c] = stack.back();
        stack.pop_back();
        const float v = heatmap.prob(r, c), b = heatmap.prob(best_r, best_c);
        if (v > b || (v == b && std::pair(r, c) < std::pair(best_r, best_c))) {
          best_r = r;
          best_c = c;
        }
        for (Eigen::Index dr = -1; dr <= 1; ++dr)
          for (Eigen::Index dc = -1; dc <= 1; ++dc) {
            const Eigen::Index rr = r + dr, cc = c + dc;
            if (rr < 0 || cc < 0 || rr >= rows || cc >= cols || label(rr, cc) >= 0) continue;
            if (!(double(heatmap.prob(rr, cc)) > threshold)) continue;
            label(rr, cc) = next;
            stack.emplace_back(rr, cc);
          }
      }
      const Point2i p = heatmap.cell_center(best_r, best_c);
      points.push_back({heatmap.slide_id, p.x, p.y, double(heatmap.prob(best_r, best_c))});
      ++next;
    }
  return points;
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

MatchResult match_points(std::span<const DetectionPoint> points, const std::map<std::string, SlideTruth>& truth) {
  MatchResult out;
  std::map<std::string, std::size_t> first_region;
  for (const auto& [id, t] : truth) {
    if (!t.regions) continue;
    first_region[id] = out.regions.size();
    for (const auto& r : t.regions->regions()) out.regions.push_back({id, r.region_id, r.size_class, std::nullopt});
  }
  for (const DetectionPoint& p : points) {
    auto it = truth.find(p.slide_id);
    if (it == truth.end()) throw ArgumentError("detection point on unknown slide '" + p.slide_id + "'");
    const SlideTruth& t = it->second;
    if (!t.regions) {
      if (t.label == SlideLabel::kTumor) {
        ++out.ignored_points;
        continue;
      }
      out.false_positives.push_back(p);
      continue;
    }
    if (auto region = t.regions->region_at(p.x, p.y)) {
      auto& hit = out.regions[first_region.at(p.slide_id) + std::size_t(*region)];
      hit.score = hit.score ? std::max(*hit.score, p.score) : p.score;
    } else {
      out.false_positives.push_back(p);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// FROC
// ---------------------------------------------------------------------------

FrocCurve froc_curve(std::span<const std::optional<double>> region_scores, std::span<const double> fp_scores,
                     double fp_denominator) {
  if (region_scores.empty()) throw ArgumentError("FROC needs at least one tumor");
  if (!(fp_denominator > 0)) throw ArgumentError("FROC needs at least one slide in the FP denominator");
  std::vector<double> hits;
  for (const auto& s : region_scores)
    if (s) hits.push_back(*s);
  std::vector<double> fps(fp_scores.begin(), fp_scores.end());
  std::sort(hits.begin(), hits.end(), std::greater<>());
  std::sort(fps.begin(), fps.end(), std::greater<>());
  std::vector<double> thresholds = hits;
  thresholds.insert(thresholds.end(), fps.begin(), fps.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  FrocCurve curve;
  curve.n_tumors = region_scores.size();
  curve.fp_denominator = fp_denominator;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t h = 0, f = 0;
  for (double t : thresholds) {
    while (h < hits.size() && hits[h] >= t) ++h;
    while (f < fps.size() && fps[f] >= t) ++f;
    curve.points.push_back({t, double(f) / fp_denominator, double(h) / double(curve.n_tumors)});
  }
  return curve;
}

FrocCurve froc_curve(const MatchResult& matches, std::size_t n_normalizing_slides, std::optional<SizeClass> only_class) {
  std::vector<std::optional<double>> regions;
  for (const auto& r : matches.regions)
    if (!only_class || r.size_class == *only_class) regions.push_back(r.score);
  std::vector<double> fps;
  for (const auto& p : matches.false_positives) fps.push_back(p.score);
  return froc_curve(regions, fps, double(n_normalizing_slides));
}

double sensitivity_at(const FrocCurve& curve, double fp_rate) {
  double best = 0.0;
  for (const auto& p : curve.points)
    if (p.fp_rate <= fp_rate * (1 + 1e-12)) best = std::max(best, p.sensitivity);
  return best;
}

double froc_score(const FrocCurve& curve) {
  double sum = 0.0;
  for (double r : kFrocFpRates) sum += sensitivity_at(curve, r);
  return sum / double(kFrocFpRates.size());
}

// ---------------------------------------------------------------------------
// ROC
// ---------------------------------------------------------------------------

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ArgumentError("scores and labels differ in length");
  bool pos = false, neg = false;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ArgumentError("labels must be 0 or 1");
    (l ? pos : neg) = true;
  }
  if (!pos || !neg) throw ArgumentError("ROC AUC needs both classes");
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (double(i + 1) + double(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const double n_neg = double(n - n_pos);
  return (rank_sum - double(n_pos) * double(n_pos + 1) / 2.0) / (double(n_pos) * n_neg);
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double n_pos = double(std::count(labels.begin(), labels.end(), 1));
  const double n_neg = double(labels.size()) - n_pos;
  std::vector<RocPoint> out{{0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tp : fp) += 1;
      ++j;
    }
    out.push_back({fp / n_neg, tp / n_pos});
    i = j;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * double(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - double(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

ConfidenceInterval auc_ci(std::span<const double> scores, std::span<const int> labels, const BootstrapOptions& options) {
  check_binary(scores, labels);
  std::vector<double> s;
  std::vector<int> l;
  return bootstrap_ci(
      scores.size(),
      [&](std::span<const std::size_t> idx) -> std::optional<double> {
        s.clear();
        l.clear();
        for (std::size_t i : idx) {
          s.push_back(scores[i]);
          l.push_back(labels[i]);
        }
        const auto pos = std::count(l.begin(), l.end(), 1);
        if (pos == 0 || pos == std::ptrdiff_t(l.size())) return std::nullopt;
        return roc_auc(s, l);
      },
      options);
}

FrocIntervals froc_ci(std::span<const std::optional<double>> region_scores, std::span<const double> fp_scores,
                      double fp_denominator, const BootstrapOptions& options) {
  if (region_scores.empty()) throw ArgumentError("FROC needs at least one tumor");
  const std::size_t n_regions = region_scores.size();
  std::vector<std::optional<double>> regions;
  std::vector<double> fps;
  auto stats = bootstrap_statistics(
      n_regions + fp_scores.size(),
      [&](std::span<const std::size_t> idx) -> std::optional<std::vector<double>> {
        regions.clear();
        fps.clear();
        for (std::size_t i : idx) {
          if (i < n_regions)
            regions.push_back(region_scores[i]);
          else
            fps.push_back(fp_scores[i - n_regions]);
        }
        if (regions.empty()) return std::nullopt;
        const FrocCurve c = froc_curve(regions, fps, fp_denominator);
        return std::vector<double>{froc_score(c), sensitivity_at(c, 8.0)};
      },
      options);
  std::vector<double> froc, at8;
  for (const auto& s : stats) {
    froc.push_back(s[0]);
    at8.push_back(s[1]);
  }
  FrocIntervals out;
  out.froc = {percentile(froc, options.lower_percentile), percentile(froc, options.upper_percentile)};
  out.at_8fp = {percentile(at8, options.lower_percentile), percentile(at8, options.upper_percentile)};
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

std::string_view to_string(PointsMode m) { return m == PointsMode::kNms ? "nms" : "cc"; }
std::string_view to_string(FpDenominator d) { return d == FpDenominator::kNegativeSlides ? "negative" : "all"; }

EvalOutput evaluate_slides(const std::vector<SlideEvaluation>& slides, const EvalOptions& options) {
  if (slides.empty()) throw ArgumentError("nothing to evaluate");
  EvalOutput out;
  EvalReport& rep = out.report;
  rep.options = options;
  std::map<std::string, SlideTruth> truth;
  std::vector<DetectionPoint> all_points;
  std::vector<double> slide_scores;
  std::vector<int> slide_labels;
  for (const auto& s : slides) {
    if (truth.count(s.slide_id)) throw ArgumentError("slide '" + s.slide_id + "' evaluated twice");
    auto pts = options.points_mode == PointsMode::kNms ? nms_points(s.heatmap, options.nms_radius, options.threshold)
                                                       : cc_points(s.heatmap, options.threshold);
    for (auto& p : pts) p.slide_id = s.slide_id;
    all_points.insert(all_points.end(), pts.begin(), pts.end());
    out.points[s.slide_id] = std::move(pts);
    std::shared_ptr<const RegionLabeling> regions = s.regions;
    if (!regions && s.label == SlideLabel::kNormal)
      regions = std::make_shared<RegionLabeling>();  // no regions: every point is an FP
    truth[s.slide_id] = {s.label, regions};
    slide_scores.push_back(slide_score(s.heatmap));
    slide_labels.push_back(s.label == SlideLabel::kTumor ? 1 : 0);
    ++rep.n_slides;
    (s.label == SlideLabel::kTumor ? rep.n_tumor_slides : rep.n_negative_slides)++;
  }
  rep.n_points = all_points.size();

  const MatchResult matches = match_points(all_points, truth);
  rep.n_tumors = matches.regions.size();
  rep.n_false_positives = matches.false_positives.size();
  const std::size_t denom =
      options.fp_denominator == FpDenominator::kNegativeSlides ? rep.n_negative_slides : rep.n_slides;
  if (denom == 0) throw ArgumentError("FROC needs at least one tumor-negative slide");
  if (rep.n_tumors == 0) throw ArgumentError("FROC needs at least one annotated tumor region");

  rep.curve = froc_curve(matches, denom);
  rep.froc = froc_score(rep.curve);
  rep.at_8fp = sensitivity_at(rep.curve, 8.0);
  for (std::size_t i = 0; i < kFrocFpRates.size(); ++i) rep.sensitivities[i] = sensitivity_at(rep.curve, kFrocFpRates[i]);

  for (SizeClass sc : {SizeClass::kMacro, SizeClass::kMicro}) {
    SizeClassResult r;
    r.n_tumors = std::size_t(std::count_if(matches.regions.begin(), matches.regions.end(),
                                           [&](const RegionHit& h) { return h.size_class == sc; }));
    if (r.n_tumors > 0) {
      const FrocCurve c = froc_curve(matches, denom, sc);
      r.froc = froc_score(c);
      r.at_8fp = sensitivity_at(c, 8.0);
    }
    rep.size_classes[std::string(to_string(sc))] = r;
  }

  std::vector<std::optional<double>> region_scores;
  for (const auto& r : matches.regions) region_scores.push_back(r.score);
  std::vector<double> fp_scores;
  for (const auto& p : matches.false_positives) fp_scores.push_back(p.score);
  BootstrapOptions froc_boot = options.bootstrap;
  froc_boot.seed = derive_seed(options.bootstrap.seed, "froc-ci");
  const FrocIntervals fi = froc_ci(region_scores, fp_scores, double(denom), froc_boot);
  rep.froc_ci = fi.froc;
  rep.at_8fp_ci = fi.at_8fp;

  if (rep.n_tumor_slides == 0 || rep.n_negative_slides == 0) throw ArgumentError("AUC needs tumor and normal slides");
  rep.auc = roc_auc(slide_scores, slide_labels);
  BootstrapOptions auc_boot = options.bootstrap;
  auc_boot.seed = derive_seed(options.bootstrap.seed, "auc-ci");
  rep.auc_ci = auc_ci(slide_scores, slide_labels, auc_boot);
  rep.roc = roc_curve(slide_scores, slide_labels);
  return out;
}

// ---------------------------------------------------------------------------
// Report I/O
// ---------------------------------------------------------------------------

nlohmann::json report_to_json(const EvalReport& r) {
  using nlohmann::json;
  auto ci = [](const ConfidenceInterval& c) { return json::array({c.lo, c.hi}); };
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json sens = json::object();
  for (std::size_t i = 0; i < kFrocFpRates.size(); ++i) {
    char key[16];
    std::snprintf(key, sizeof key, "%g", kFrocFpRates[i]);
    sens[key] = r.sensitivities[i];
  }
  json classes = json::object();
  for (const auto& [name, sc] : r.size_classes)
    classes[name] = {{"n_tumors", sc.n_tumors}, {"froc", opt(sc.froc)}, {"at_8fp", opt(sc.at_8fp)}};
  json curve = json::array();
  for (const auto& p : r.curve.points) curve.push_back({{"fp_rate", p.fp_rate}, {"sensitivity", p.sensitivity}});
  json roc = json::array();
  for (const auto& p : r.roc) roc.push_back({{"fpr", p.fpr}, {"tpr", p.tpr}});
  return {{"schema", "metdet.eval_report/1"},
          {"froc", r.froc},
          {"froc_ci", ci(r.froc_ci)},
          {"at_8fp", r.at_8fp},
          {"at_8fp_ci", ci(r.at_8fp_ci)},
          {"auc", r.auc},
          {"auc_ci", ci(r.auc_ci)},
          {"sensitivities", sens},
          {"size_classes", classes},
          {"counts",
           {{"slides", r.n_slides},
            {"tumor_slides", r.n_tumor_slides},
            {"negative_slides", r.n_negative_slides},
            {"tumors", r.n_tumors},
            {"points", r.n_points},
            {"false_positives", r.n_false_positives}}},
          {"options",
           {{"points_mode", to_string(r.options.points_mode)},
            {"nms_radius", r.options.nms_radius},
            {"threshold", r.options.threshold},
            {"fp_denominator", to_string(r.options.fp_denominator)},
            {"resamples", r.options.bootstrap.resamples},
            {"seed", r.options.bootstrap.seed}}},
          {"froc_curve", curve},
          {"roc_curve", roc}};
}

std::vector<std::string> validate_report_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  if (!j.is_object()) return {"report must be a JSON object"};
  auto unit = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_number()) {
      errors.push_back(std::string(key) + ": missing or not a number");
      return;
    }
    const double v = j[key].get<double>();
    if (!(v >= 0.0 && v <= 1.0)) errors.push_back(std::string(key) + ": outside [0, 1]");
  };
  auto interval = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != 2 || !j[key][0].is_number() ||
        !j[key][1].is_number()) {
      errors.push_back(std::string(key) + ": expected [lo, hi]");
      return;
    }
    const double lo = j[key][0].get<double>(), hi = j[key][1].get<double>();
    if (!(lo >= 0.0 && hi <= 1.0 && lo <= hi)) errors.push_back(std::string(key) + ": invalid interval");
  };
  if (j.value("schema", std::string()) != "metdet.eval_report/1") errors.push_back("schema: unexpected identifier");
  for (const char* k : {"froc", "at_8fp", "auc"}) unit(k);
  for (const char* k : {"froc_ci", "at_8fp_ci", "auc_ci"}) interval(k);
  if (!j.contains("sensitivities") || !j["sensitivities"].is_object()) {
    errors.push_back("sensitivities: missing");
  } else {
    double sum = 0.0;
    double prev = -1.0;
    for (double rate : kFrocFpRates) {
      char key[16];
      std::snprintf(key, sizeof key, "%g", rate);
      const auto& s = j["sensitivities"];
      if (!s.contains(key) || !s[key].is_number()) {
        errors.push_back(std::string("sensitivities.") + key + ": missing");
        continue;
      }
      const double v = s[key].get<double>();
      if (v < prev) errors.push_back("sensitivities: not non-decreasing");
      prev = v;
      sum += v;
    }
    if (j.contains("froc") && j["froc"].is_number() &&
        std::abs(sum / double(kFrocFpRates.size()) - j["froc"].get<double>()) > 1e-9)
      errors.push_back("froc: not the mean of the six sensitivities");
  }
  if (!j.contains("size_classes") || !j["size_classes"].is_object()) errors.push_back("size_classes: missing");
  if (!j.contains("counts") || !j["counts"].is_object()) {
    errors.push_back("counts: missing");
  } else {
    for (const char* k : {"slides", "tumor_slides", "negative_slides", "tumors", "points", "false_positives"})
      if (!j["counts"].contains(k) || !j["counts"][k].is_number_unsigned())
        errors.push_back(std::string("counts.") + k + ": missing or not a count");
  }
  if (!j.contains("options") || !j["options"].is_object()) errors.push_back("options: missing");
  return errors;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

void write_points_csv(std::span<const DetectionPoint> points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.9g,%d,%d\n", p.score, p.x, p.y);
    out << buf;
  }
}

std::vector<DetectionPoint> read_points_csv(const std::filesystem::path& path, const std::string& slide_id) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<DetectionPoint> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    DetectionPoint p{slide_id, 0, 0, 0.0};
    if (std::sscanf(line.c_str(), "%lf,%d,%d", &p.score, &p.x, &p.y) != 3)
      throw FormatError("bad points line '" + line + "' in " + path.string());
    out.push_back(p);
  }
  return out;
}

namespace {

constexpr double kW = 480, kH = 360, kMargin = 48;

std::string svg_frame(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
    << " " << kH << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<rect x=\"" << kMargin << "\" y=\"" << kMargin / 2 << "\" width=\"" << kW - 1.5 * kMargin << "\" height=\""
    << kH - 2 * kMargin << "\" fill=\"none\" stroke=\"black\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"16\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 8 << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel
    << "</text>\n"
    << "<text x=\"14\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
    << kH / 2 << ")\">" << ylabel << "</text>\n";
  return s.str();
}

// Maps unit coordinates to the plot rectangle.
std::pair<double, double> to_px(double u, double v) {
  const double x0 = kMargin, y0 = kMargin / 2, w = kW - 1.5 * kMargin, h = kH - 2 * kMargin;
  return {x0 + u * w, y0 + (1 - v) * h};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

void write_froc_svg(const FrocCurve& curve, const std::filesystem::path& path) {
  // log2 FP axis over [1/8, 8]
  auto xu = [](double fp) { return (std::log2(std::clamp(fp, 0.125, 8.0)) + 3.0) / 6.0; };
  std::ostringstream s;
  s << svg_frame("FROC (score " + std::to_string(froc_score(curve)).substr(0, 5) + ")",
                 "average false positives per normalizing slide", "sensitivity");
  for (double r : kFrocFpRates) {
    auto [x, y] = to_px(xu(r), 0);
    s << "<text x=\"" << x << "\" y=\"" << y + 14 << "\" text-anchor=\"middle\" font-size=\"10\">" << r << "</text>\n";
  }
  s << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"";
  double prev_sens = 0.0;
  for (const auto& p : curve.points) {
    if (p.fp_rate > 8.0) break;
    auto [x, y0] = to_px(xu(p.fp_rate), prev_sens);
    auto [x1, y1] = to_px(xu(p.fp_rate), p.sensitivity);
    s << x << "," << y0 << " " << x1 << "," << y1 << " ";
    prev_sens = p.sensitivity;
  }
  auto [xe, ye] = to_px(1.0, sensitivity_at(curve, 8.0));
  s << xe << "," << ye << "\"/>\n</svg>\n";
  write_text(path, s.str());
}

void write_roc_svg(std::span<const RocPoint> roc, double auc, const std::filesystem::path& path) {
  std::ostringstream s;
  s << svg_frame("ROC (AUC " + std::to_string(auc).substr(0, 5) + ")", "false positive rate", "true positive rate");
  s << "<polyline fill=\"none\" stroke=\"#2c3e50\" stroke-width=\"2\" points=\"";
  for (const auto& p : roc) {
    auto [x, y] = to_px(p.fpr, p.tpr);
    s << x << "," << y << " ";
  }
  s << "\"/>\n</svg>\n";
  write_text(path, s.str());
}

}  // namespace metdet
