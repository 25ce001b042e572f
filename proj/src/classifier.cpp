#include "metdet/classifier.hpp"

#include "metdet/parallel.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <random>

namespace metdet {

ConstantClassifier::ConstantClassifier(double p, std::vector<Magnification> mags) : p_(p), mags_(std::move(mags)) {
  if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("constant prediction must lie in [0, 1]");
  if (mags_.empty()) throw ArgumentError("classifier needs at least one magnification");
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

OracleClassifier::OracleClassifier(std::shared_ptr<const MaskTable> masks, double noise_sigma, std::uint64_t seed,
                                   double gamma)
    : masks_(std::move(masks)), noise_sigma_(noise_sigma), seed_(seed), gamma_(gamma) {
  if (!masks_) throw ArgumentError("oracle needs a mask table");
  if (!(noise_sigma >= 0.0)) throw ArgumentError("oracle noise sigma must be non-negative");
  if (!(gamma > 0.0)) throw ArgumentError("oracle gamma must be positive");
}

double OracleClassifier::predict_at(const std::string& slide_id, Point2i center) const {
  auto it = masks_->find(slide_id);
  if (it == masks_->end()) throw LookupError("oracle has no mask for slide '" + slide_id + "'");
  const double soft = patch_soft_label(it->second, center);
  double p = soft > 0 ? std::pow(soft, gamma_) : 0.0;
  if (noise_sigma_ > 0) {
    Rng rng(derive_seed(seed_, slide_id, {std::uint64_t(std::uint32_t(center.x)), std::uint64_t(std::uint32_t(center.y))}));
    p += std::normal_distribution<double>(0.0, noise_sigma_)(rng);
  }
  return std::clamp(p, 0.0, 1.0);
}

double OracleClassifier::predict(const PatchGroup& group) const { return predict_at(group.slide_id, group.center); }

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

namespace {

[[gnu::target_clones("avx2", "default")]] void bin_indices(const float* __restrict v, std::int32_t* __restrict ip,
                                                           Eigen::Index n, int bins, bool unit_input) {
  const float half_bins = 0.5f * float(bins);
  const std::int32_t last = bins - 1;
  if (unit_input) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const float m = std::min(std::max(v[i], 0.0f), 1.0f) * 2.0f - 1.0f;
      const auto b = static_cast<std::int32_t>((std::min(std::max(m, -1.0f), 1.0f) + 1.0f) * half_bins);
      ip[i] = std::min(b, last);
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto b = static_cast<std::int32_t>((std::min(std::max(v[i], -1.0f), 1.0f) + 1.0f) * half_bins);
      ip[i] = std::min(b, last);
    }
  }
}

// Bin of v is floor((clamp(v, -1, 1) + 1) bins / 2), capped at bins - 1. With
// `unit_input`, v is first mapped through to_model_range's clamp(x, 0, 1) * 2 - 1
// using the same float operations.
std::vector<std::uint32_t> histogram(const float* v, Eigen::Index n, int bins, bool unit_input) {
  std::unique_ptr<std::int32_t[]> idx(new std::int32_t[std::size_t(n)]);
  std::int32_t* ip = idx.get();
  bin_indices(v, ip, n, bins, unit_input);
  // Four interleaved tables keep consecutive increments independent.
  std::vector<std::uint32_t> tables(4 * std::size_t(bins), 0);
  Eigen::Index i = 0;
  for (; i + 4 <= n; i += 4) {
    ++tables[std::size_t(ip[i])];
    ++tables[std::size_t(bins + ip[i + 1])];
    ++tables[std::size_t(2 * bins + ip[i + 2])];
    ++tables[std::size_t(3 * bins + ip[i + 3])];
  }
  for (; i < n; ++i) ++tables[std::size_t(ip[i])];
  std::vector<std::uint32_t> counts(static_cast<std::size_t>(bins));
  for (int k = 0; k < bins; ++k)
    counts[std::size_t(k)] = tables[std::size_t(k)] + tables[std::size_t(bins + k)] + tables[std::size_t(2 * bins + k)] +
                             tables[std::size_t(3 * bins + k)];
  return counts;
}

Eigen::VectorXd histogram_features_impl(const PatchGroup& group, const std::vector<Magnification>& mags, int bins,
                                        bool unit_input) {
  if (bins <= 0) throw ArgumentError("histogram needs at least one bin");
  Eigen::VectorXd phi = Eigen::VectorXd::Zero(Eigen::Index(mags.size()) * 3 * bins);
  Eigen::Index offset = 0;
  for (Magnification m : mags) {
    const RgbImagef& img = group.at(m);
    const double inv_n = 1.0 / double(img.rows() * img.cols());
    for (std::size_t c = 0; c < 3; ++c, offset += bins) {
      const auto counts = histogram(img.channels[c].data(), img.channels[c].size(), bins, unit_input);
      for (int b = 0; b < bins; ++b) phi(offset + b) = double(counts[std::size_t(b)]) * inv_n;
    }
  }
  return phi;
}

}  // namespace

Eigen::VectorXd histogram_features(const PatchGroup& group, const std::vector<Magnification>& mags, int bins) {
  return histogram_features_impl(group, mags, bins, false);
}

Eigen::VectorXd unit_histogram_features(const PatchGroup& group, const std::vector<Magnification>& mags, int bins) {
  return histogram_features_impl(group, mags, bins, true);
}

ToyHistogramClassifier::ToyHistogramClassifier(std::vector<Magnification> mags, int bins)
    : ToyHistogramClassifier(mags, bins, Eigen::VectorXd::Zero(Eigen::Index(mags.size()) * 3 * bins), 0.0) {}

ToyHistogramClassifier::ToyHistogramClassifier(std::vector<Magnification> mags, int bins, Eigen::VectorXd weights,
                                               double bias)
    : mags_(std::move(mags)), bins_(bins), weights_(std::move(weights)), bias_(bias) {
  if (mags_.empty()) throw ArgumentError("classifier needs at least one magnification");
  if (bins_ <= 0) throw ArgumentError("histogram needs at least one bin");
  if (weights_.size() != Eigen::Index(mags_.size()) * 3 * bins_)
    throw ArgumentError("weight vector does not match the feature layout");
}

double ToyHistogramClassifier::predict_features(const Eigen::Ref<const Eigen::VectorXd>& features) const {
  return logistic(weights_.dot(features) + bias_);
}

double ToyHistogramClassifier::predict(const PatchGroup& group) const {
  return predict_features(histogram_features(group, mags_, bins_));
}

void ToyHistogramClassifier::save(const std::filesystem::path& path) const {
  nlohmann::json mags = nlohmann::json::array();
  for (auto m : mags_) mags.push_back(std::string(to_string(m)));
  nlohmann::json j = {{"type", "toy_histogram"},
                      {"version", 1},
                      {"magnifications", mags},
                      {"bins", bins_},
                      {"weights", std::vector<double>(weights_.data(), weights_.data() + weights_.size())},
                      {"bias", bias_}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write model " + path.string());
  out << j.dump(2) << "\n";
}

ToyHistogramClassifier ToyHistogramClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    if (j.at("type").get<std::string>() != "toy_histogram") throw FormatError("unsupported model type in " + path.string());
    std::vector<Magnification> mags;
    for (const auto& m : j.at("magnifications")) mags.push_back(parse_magnification(m.get<std::string>()));
    const auto w = j.at("weights").get<std::vector<double>>();
    return ToyHistogramClassifier(std::move(mags), j.at("bins").get<int>(),
                                  Eigen::Map<const Eigen::VectorXd>(w.data(), Eigen::Index(w.size())),
                                  j.at("bias").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid model file " + path.string() + ": " + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError("invalid model file " + path.string() + ": " + e.what());
  }
}

LossAndGradient log_loss_and_gradient(const Eigen::VectorXd& weights, double bias, const Eigen::MatrixXd& features,
                                      const Eigen::VectorXd& labels) {
  const Eigen::Index n = features.rows();
  if (n == 0 || labels.size() != n || features.cols() != weights.size())
    throw ArgumentError("log_loss_and_gradient: shape mismatch");
  const Eigen::VectorXd z = (features * weights).array() + bias;
  LossAndGradient out;
  Eigen::VectorXd residual(n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = logistic(z(i));
    residual(i) = p - labels(i);
    // log(1 + e^z) - y z, stable for both signs of z
    const double softplus = z(i) > 0 ? z(i) + std::log1p(std::exp(-z(i))) : std::log1p(std::exp(z(i)));
    loss += softplus - labels(i) * z(i);
  }
  out.loss = loss / double(n);
  out.grad_weights = features.transpose() * residual / double(n);
  out.grad_bias = residual.sum() / double(n);
  return out;
}

TrainingStream::TrainingStream(const BalancedSampler& sampler, std::map<std::string, SlidePyramid> slides,
                               std::vector<Magnification> mags, std::optional<AugmentParams> augment,
                               std::uint64_t seed, int bins)
    : sampler_(&sampler), slides_(std::move(slides)), mags_(std::move(mags)), augment_(augment), seed_(seed),
      bins_(bins) {
  if (mags_.empty()) throw ArgumentError("training stream needs at least one magnification");
  if (augment_) augment_->validate();
  for (const auto& s : sampler.slides())
    if (!slides_.count(s.slide_id)) throw LookupError("training stream has no pyramid for slide '" + s.slide_id + "'");
}

PatchGroup TrainingStream::patch(std::uint64_t index, TrainingDraw* draw_out, std::optional<AugmentDraw>* aug_out) const {
  return to_model_range(unit_patch(index, draw_out, aug_out));
}

PatchGroup TrainingStream::unit_patch(std::uint64_t index, TrainingDraw* draw_out,
                                      std::optional<AugmentDraw>* aug_out) const {
  const TrainingDraw draw = sampler_->draw(index);
  const SlidePyramid& slide = slides_.at(draw.slide_id);
  // Jitter can push border cells off the slide; keep the center on it.
  const Point2i center{std::clamp(draw.center.x, 0, slide.width() - 1), std::clamp(draw.center.y, 0, slide.height() - 1)};
  PatchGroup group = extract_patch_group(slide, {draw.slide_id, center, mags_});
  std::optional<AugmentDraw> aug;
  if (augment_) {
    Rng rng(derive_seed(seed_, "augment", {index}));
    aug = sample_augment(rng, *augment_);
    group = apply_augment(group, *aug);
  }
  if (draw_out) *draw_out = draw;
  if (aug_out) *aug_out = aug;
  return group;
}

Eigen::VectorXd TrainingStream::features(std::uint64_t index, TrainingDraw* draw_out) const {
  const TrainingDraw draw = sampler_->draw(index);
  const SlidePyramid& slide = slides_.at(draw.slide_id);
  const Point2i center{std::clamp(draw.center.x, 0, slide.width() - 1), std::clamp(draw.center.y, 0, slide.height() - 1)};
  PatchGroup group = extract_patch_group(slide, {draw.slide_id, center, mags_});
  if (augment_) {
    Rng rng(derive_seed(seed_, "augment", {index}));
    const AugmentDraw aug = sample_augment(rng, *augment_);
    for (auto& member : group.members) apply_color_inplace(member.second, aug.color);
  }
  if (draw_out) *draw_out = draw;
  return unit_histogram_features(group, mags_, bins_);
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> TrainingStream::batch(std::uint64_t first, std::size_t count,
                                                                  int workers) const {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(count), Eigen::Index(mags_.size()) * 3 * bins_);
  Eigen::VectorXd y(static_cast<Eigen::Index>(count));
  parallel_for(count, workers, [&](std::size_t i) {
    TrainingDraw d;
    x.row(Eigen::Index(i)) = features(first + i, &d).transpose();
    y(Eigen::Index(i)) = d.hard_label;
  });
  return {std::move(x), std::move(y)};
}

ToyHistogramClassifier train_toy(const TrainingStream& stream, const TrainConfig& cfg, std::vector<double>* loss_trace) {
  if (!stream.sampler().has_class(0) || !stream.sampler().has_class(1))
    throw TrainingError("training stream must yield both normal and tumor patches");
  if (cfg.batch_size == 0) throw TrainingError("batch size must be positive");
  if (cfg.lr_decay_examples == 0) throw TrainingError("learning-rate decay interval must be positive");
  ToyHistogramClassifier model(stream.magnifications(), stream.bins());
  const Eigen::Index dim = model.feature_count();
  Eigen::VectorXd ms_w = Eigen::VectorXd::Zero(dim), mom_w = Eigen::VectorXd::Zero(dim);
  double ms_b = 0.0, mom_b = 0.0;
  std::uint64_t examples = 0;
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    auto [x, y] = stream.batch(cfg.first_index + step * cfg.batch_size, cfg.batch_size, cfg.workers);
    const LossAndGradient lg = log_loss_and_gradient(model.weights(), model.bias(), x, y);
    if (!std::isfinite(lg.loss)) throw NumericError("training loss diverged at step " + std::to_string(step));
    if (loss_trace) loss_trace->push_back(lg.loss);
    const double lr =
        cfg.learning_rate * std::pow(cfg.lr_decay_factor, double(examples / cfg.lr_decay_examples));
    ms_w = cfg.rms_decay * ms_w + (1.0 - cfg.rms_decay) * lg.grad_weights.cwiseAbs2();
    ms_b = cfg.rms_decay * ms_b + (1.0 - cfg.rms_decay) * lg.grad_bias * lg.grad_bias;
    mom_w = cfg.momentum * mom_w + lr * (lg.grad_weights.array() / (ms_w.array() + cfg.epsilon).sqrt()).matrix();
    mom_b = cfg.momentum * mom_b + lr * lg.grad_bias / std::sqrt(ms_b + cfg.epsilon);
    model.weights() -= mom_w;
    model.bias() -= mom_b;
    examples += cfg.batch_size;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

EnsembleClassifier::EnsembleClassifier(std::vector<ClassifierPtr> members) : members_(std::move(members)) {
  if (members_.empty()) throw ArgumentError("ensemble needs at least one member");
  const auto mags = members_.front()->magnifications();
  for (const auto& m : members_) {
    if (!m) throw ArgumentError("null ensemble member");
    if (m->magnifications() != mags) throw ArgumentError("ensemble members require different magnifications");
  }
}

double EnsembleClassifier::predict(const PatchGroup& group) const {
  double sum = 0.0;
  for (const auto& m : members_) sum += m->predict(group);
  return sum / double(members_.size());
}

ClassifierPtr ensemble_average(std::vector<ClassifierPtr> members) {
  if (members.size() == 1) return members.front();
  return std::make_shared<EnsembleClassifier>(std::move(members));
}

}  // namespace metdet
