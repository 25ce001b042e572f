#pragma once

// Patch classifier contract and the reference implementations used to drive
// the pipeline without a CNN.

#include "metdet/core.hpp"
#include "metdet/patch_pipeline.hpp"
#include "metdet/slide_store.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace metdet {

/// Maps a patch group in model range [-1, 1] to a tumor probability in [0, 1].
/// Implementations are immutable and safe to call concurrently.
class PatchClassifier {
 public:
  virtual ~PatchClassifier() = default;
  virtual std::vector<Magnification> magnifications() const = 0;
  virtual double predict(const PatchGroup& group) const = 0;
};

using ClassifierPtr = std::shared_ptr<const PatchClassifier>;

class ConstantClassifier final : public PatchClassifier {
 public:
  explicit ConstantClassifier(double p, std::vector<Magnification> mags = {Magnification::k40x});
  std::vector<Magnification> magnifications() const override { return mags_; }
  double predict(const PatchGroup&) const override { return p_; }

 private:
  double p_;
  std::vector<Magnification> mags_;
};

using MaskTable = std::map<std::string, AnnotationMask>;

/// Ground-truth classifier: p = clamp(soft^gamma + N(0, sigma), 0, 1), where
/// soft is the tumor fraction of the center region. The noise draw is keyed on
/// (seed, slide, center), so every orientation of a patch sees the same value.
class OracleClassifier final : public PatchClassifier {
 public:
  static constexpr double kDefaultGamma = 0.25;

  OracleClassifier(std::shared_ptr<const MaskTable> masks, double noise_sigma, std::uint64_t seed,
                   double gamma = kDefaultGamma);

  std::vector<Magnification> magnifications() const override { return {Magnification::k40x}; }
  double predict(const PatchGroup& group) const override;
  double predict_at(const std::string& slide_id, Point2i center) const;

 private:
  std::shared_ptr<const MaskTable> masks_;
  double noise_sigma_;
  std::uint64_t seed_;
  double gamma_;
};

// ---------------------------------------------------------------------------
// Toy trainable model: logistic regression on color histograms.
// ---------------------------------------------------------------------------

inline constexpr int kHistogramBins = 8;

/// Per magnification, per channel, the fraction of pixels falling in each of
/// `bins` equal bins over [-1, 1]. Orientation invariant.
Eigen::VectorXd histogram_features(const PatchGroup& group, const std::vector<Magnification>& mags,
                                   int bins = kHistogramBins);
/// histogram_features(to_model_range(group)) without the intermediate copy.
Eigen::VectorXd unit_histogram_features(const PatchGroup& group, const std::vector<Magnification>& mags,
                                        int bins = kHistogramBins);

class ToyHistogramClassifier final : public PatchClassifier {
 public:
  ToyHistogramClassifier(std::vector<Magnification> mags, int bins = kHistogramBins);
  ToyHistogramClassifier(std::vector<Magnification> mags, int bins, Eigen::VectorXd weights, double bias);

  std::vector<Magnification> magnifications() const override { return mags_; }
  double predict(const PatchGroup& group) const override;
  double predict_features(const Eigen::Ref<const Eigen::VectorXd>& features) const;

  int bins() const { return bins_; }
  Eigen::Index feature_count() const { return weights_.size(); }
  const Eigen::VectorXd& weights() const { return weights_; }
  double bias() const { return bias_; }
  Eigen::VectorXd& weights() { return weights_; }
  double& bias() { return bias_; }

  void save(const std::filesystem::path& path) const;
  static ToyHistogramClassifier load(const std::filesystem::path& path);

 private:
  std::vector<Magnification> mags_;
  int bins_;
  Eigen::VectorXd weights_;
  double bias_ = 0.0;
};

inline double logistic(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

struct LossAndGradient {
  double loss = 0.0;
  Eigen::VectorXd grad_weights;
  double grad_bias = 0.0;
};

/// Mean log-loss of logistic(X w + b) against labels in [0, 1]; rows of X are
/// examples.
LossAndGradient log_loss_and_gradient(const Eigen::VectorXd& weights, double bias, const Eigen::MatrixXd& features,
                                      const Eigen::VectorXd& labels);

/// Produces (features, label) for sample index i, deterministically in (seed, i).
class TrainingStream {
 public:
  TrainingStream(const BalancedSampler& sampler, std::map<std::string, SlidePyramid> slides,
                 std::vector<Magnification> mags, std::optional<AugmentParams> augment, std::uint64_t seed,
                 int bins = kHistogramBins);

  const BalancedSampler& sampler() const { return *sampler_; }
  const std::vector<Magnification>& magnifications() const { return mags_; }
  int bins() const { return bins_; }

  /// Model-range patch group for draw i, augmented when configured.
  PatchGroup patch(std::uint64_t index, TrainingDraw* draw = nullptr, std::optional<AugmentDraw>* aug = nullptr) const;
  /// Same sample before the shift to [-1, 1].
  PatchGroup unit_patch(std::uint64_t index, TrainingDraw* draw = nullptr,
                        std::optional<AugmentDraw>* aug = nullptr) const;

  /// Rows [first, first + count) as a feature matrix plus hard labels.
  /// Features of sample i, equal to histogram_features(patch(i)) up to the
  /// contrast mean's summation order: histograms ignore pixel order, so the
  /// drawn orientation is not materialized.
  Eigen::VectorXd features(std::uint64_t index, TrainingDraw* draw = nullptr) const;
  std::pair<Eigen::MatrixXd, Eigen::VectorXd> batch(std::uint64_t first, std::size_t count, int workers = 1) const;

 private:
  const BalancedSampler* sampler_;
  std::map<std::string, SlidePyramid> slides_;
  std::vector<Magnification> mags_;
  std::optional<AugmentParams> augment_;
  std::uint64_t seed_;
  int bins_;
};

/// RMSProp with momentum, TensorFlow formulation:
///   ms  <- decay * ms + (1 - decay) g^2
///   mom <- momentum * mom + lr g / sqrt(ms + epsilon)
///   w   <- w - mom
/// with lr = learning_rate * lr_decay_factor^floor(examples / lr_decay_examples).
struct TrainConfig {
  std::uint64_t steps = 1000;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double rms_decay = 0.9;
  double momentum = 0.9;
  double epsilon = 1.0;
  double lr_decay_factor = 0.5;
  std::uint64_t lr_decay_examples = 2'000'000;
  /// Sample index offset; stream indices are offset + step * batch + j.
  std::uint64_t first_index = 0;
  int workers = 1;
};

/// Trains from zero weights. Bitwise reproducible for fixed stream and config;
/// the batch gradient is reduced in sample order regardless of `workers`.
ToyHistogramClassifier train_toy(const TrainingStream& stream, const TrainConfig& config,
                                 std::vector<double>* loss_trace = nullptr);

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

class EnsembleClassifier final : public PatchClassifier {
 public:
  explicit EnsembleClassifier(std::vector<ClassifierPtr> members);
  std::vector<Magnification> magnifications() const override { return members_.front()->magnifications(); }
  double predict(const PatchGroup& group) const override;

 private:
  std::vector<ClassifierPtr> members_;
};

/// Arithmetic mean of member predictions. Members must agree on magnifications.
ClassifierPtr ensemble_average(std::vector<ClassifierPtr> members);

}  // namespace metdet
