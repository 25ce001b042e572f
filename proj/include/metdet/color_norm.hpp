#pragma once

// Stain normalization in Hue-Saturation-Density space.
//
// Optical densities D_v = -ln((I_v + 1) / 257) are split into intensity
// D = (D_R + D_G + D_B) / 3 and chroma c_x = D_R / D - 1,
// c_y = (D_G - D_B) / (sqrt(3) D). A slide's chroma is modeled as a Gaussian
// and moved onto reference statistics with the linear Monge-Kantorovitch map
//   T = S^-1/2 (S^1/2 S_R S^1/2)^1/2 S^-1/2,   c' = T (c - mu) + mu_R,
// which satisfies T S T^T = S_R. Intensity gets the 1-D analogue.

#include "metdet/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <vector>

namespace metdet::colornorm {

template <typename Scalar>
using Vector2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Matrix2 = Eigen::Matrix<Scalar, 2, 2>;

template <typename Scalar>
struct HsdPixel {
  Scalar cx = 0;
  Scalar cy = 0;
  Scalar density = 0;
};

template <typename Scalar>
Scalar optical_density(std::uint8_t intensity) {
  return -std::log((Scalar(intensity) + Scalar(1)) / Scalar(257));
}

template <typename Scalar = double>
HsdPixel<Scalar> rgb_to_hsd(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const Scalar dr = optical_density<Scalar>(r);
  const Scalar dg = optical_density<Scalar>(g);
  const Scalar db = optical_density<Scalar>(b);
  const Scalar d = (dr + dg + db) / Scalar(3);
  return {dr / d - Scalar(1), (dg - db) / (std::sqrt(Scalar(3)) * d), d};
}

/// Counts channels clamped into [0, 255] by hsd_to_rgb.
struct ClampCounter {
  std::uint64_t clamped_channels = 0;
};

template <typename Scalar>
std::array<std::uint8_t, 3> hsd_to_rgb(const HsdPixel<Scalar>& p, ClampCounter* counter = nullptr) {
  const Scalar d = p.density;
  const Scalar dr = d * (p.cx + Scalar(1));
  const Scalar sum_gb = d * (Scalar(2) - p.cx);
  const Scalar diff_gb = std::sqrt(Scalar(3)) * d * p.cy;
  const Scalar densities[3] = {dr, (sum_gb + diff_gb) / Scalar(2), (sum_gb - diff_gb) / Scalar(2)};
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c) {
    Scalar v = std::exp(-densities[c]) * Scalar(257) - Scalar(1);
    if (!(v >= Scalar(0)) || v > Scalar(255)) {
      if (counter) ++counter->clamped_channels;
      v = v > Scalar(255) ? Scalar(255) : (v >= Scalar(0) ? v : Scalar(0));
    }
    out[std::size_t(c)] = static_cast<std::uint8_t>(std::lround(v));
  }
  return out;
}

template <typename Scalar>
struct ColorStats {
  Vector2<Scalar> mean = Vector2<Scalar>::Zero();
  Matrix2<Scalar> cov = Matrix2<Scalar>::Zero();
  Scalar density_mean = 0;
  Scalar density_var = 0;
  std::uint64_t pixel_count = 0;
  bool degenerate = false;
};

using ColorStatsd = ColorStats<double>;

/// Unbiased mean/covariance of chroma and mean/variance of density.
template <typename Scalar>
ColorStats<Scalar> fit_color_stats(std::span<const HsdPixel<Scalar>> pixels) {
  if (pixels.size() < 2) throw ArgumentError("fit_color_stats needs at least two pixels");
  const auto n = static_cast<Eigen::Index>(pixels.size());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3> samples(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = pixels[std::size_t(i)];
    samples.row(i) << p.cx, p.cy, p.density;
  }
  const Eigen::Matrix<Scalar, 1, 3> mean = samples.colwise().mean();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 3> centered = samples.rowwise() - mean;
  const Eigen::Matrix<Scalar, 3, 3> cov = (centered.transpose() * centered) / Scalar(n - 1);
  ColorStats<Scalar> s;
  s.mean = mean.template head<2>().transpose();
  s.cov = cov.template topLeftCorner<2, 2>();
  s.cov = Scalar(0.5) * (s.cov + s.cov.transpose()).eval();
  s.density_mean = mean(2);
  s.density_var = cov(2, 2);
  s.pixel_count = std::uint64_t(n);
  s.degenerate = s.cov.norm() == Scalar(0);
  return s;
}

template <typename Scalar>
ColorStats<Scalar> fit_color_stats(const std::vector<HsdPixel<Scalar>>& pixels) {
  return fit_color_stats(std::span<const HsdPixel<Scalar>>(pixels));
}

/// Near-singular covariances get this added to their diagonal before roots.
inline constexpr double kCovarianceRegularizer = 1e-8;

/// Returns S unchanged when its smallest eigenvalue is at least the
/// regularizer; otherwise S + 1e-8 I.
template <typename Scalar>
Matrix2<Scalar> regularize(const Matrix2<Scalar>& cov) {
  Eigen::SelfAdjointEigenSolver<Matrix2<Scalar>> es(cov, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() >= Scalar(kCovarianceRegularizer)) return cov;
  return cov + Scalar(kCovarianceRegularizer) * Matrix2<Scalar>::Identity();
}

template <typename Scalar>
Matrix2<Scalar> mk_transform(const Matrix2<Scalar>& sigma, const Matrix2<Scalar>& sigma_ref) {
  const Scalar tol = Scalar(1e-12) * std::max<Scalar>(Scalar(1), sigma_ref.norm());
  Eigen::SelfAdjointEigenSolver<Matrix2<Scalar>> ref_es(sigma_ref, Eigen::EigenvaluesOnly);
  if (!sigma.allFinite() || !sigma_ref.allFinite() || ref_es.eigenvalues().minCoeff() < -tol)
    throw NumericError("reference covariance is not positive semi-definite");
  const Matrix2<Scalar> s = regularize<Scalar>(Scalar(0.5) * (sigma + sigma.transpose()));
  Eigen::SelfAdjointEigenSolver<Matrix2<Scalar>> es(s);
  if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= Scalar(0))
    throw NumericError("covariance is not positive definite after regularization");
  const Matrix2<Scalar> root = es.operatorSqrt();
  const Matrix2<Scalar> inv_root = es.operatorInverseSqrt();
  const Matrix2<Scalar> inner = root * sigma_ref * root;
  Eigen::SelfAdjointEigenSolver<Matrix2<Scalar>> inner_es(Scalar(0.5) * (inner + inner.transpose()));
  const Vector2<Scalar> lambda = inner_es.eigenvalues().cwiseMax(Scalar(0)).cwiseSqrt();
  const Matrix2<Scalar> inner_root =
      inner_es.eigenvectors() * lambda.asDiagonal() * inner_es.eigenvectors().transpose();
  Matrix2<Scalar> t = inv_root * inner_root * inv_root;
  return Scalar(0.5) * (t + t.transpose());
}

/// Nearest positive semi-definite matrix in Frobenius norm (eigenvalue clip).
template <typename Scalar>
Matrix2<Scalar> project_psd(const Matrix2<Scalar>& m) {
  const Matrix2<Scalar> sym = Scalar(0.5) * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix2<Scalar>> es(sym);
  const Vector2<Scalar> lambda = es.eigenvalues().cwiseMax(Scalar(0));
  return es.eigenvectors() * lambda.asDiagonal() * es.eigenvectors().transpose();
}

template <typename Scalar>
Scalar median(std::vector<Scalar> values) {
  if (values.empty()) throw ArgumentError("median of an empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + std::ptrdiff_t(mid), values.end());
  const Scalar hi = values[mid];
  if (values.size() % 2 == 1) return hi;
  const Scalar lo = *std::max_element(values.begin(), values.begin() + std::ptrdiff_t(mid));
  return (lo + hi) / Scalar(2);
}

/// Component-wise medians; covariance re-symmetrized and clipped to PSD.
template <typename Scalar>
ColorStats<Scalar> reference_stats(std::span<const ColorStats<Scalar>> stats) {
  if (stats.empty()) throw ArgumentError("reference_stats needs at least one slide");
  auto med = [&](auto&& get) {
    std::vector<Scalar> v;
    v.reserve(stats.size());
    for (const auto& s : stats) v.push_back(get(s));
    return median(std::move(v));
  };
  ColorStats<Scalar> r;
  r.mean << med([](const auto& s) { return s.mean(0); }), med([](const auto& s) { return s.mean(1); });
  r.cov << med([](const auto& s) { return s.cov(0, 0); }), med([](const auto& s) { return s.cov(0, 1); }),
      med([](const auto& s) { return s.cov(1, 0); }), med([](const auto& s) { return s.cov(1, 1); });
  r.cov = project_psd<Scalar>(r.cov);
  r.density_mean = med([](const auto& s) { return s.density_mean; });
  r.density_var = std::max(Scalar(0), med([](const auto& s) { return s.density_var; }));
  std::uint64_t total = 0;
  for (const auto& s : stats) total += s.pixel_count;
  r.pixel_count = total;
  r.degenerate = r.cov.norm() == Scalar(0);
  return r;
}

template <typename Scalar>
ColorStats<Scalar> reference_stats(const std::vector<ColorStats<Scalar>>& stats) {
  return reference_stats(std::span<const ColorStats<Scalar>>(stats));
}

inline constexpr double kDensityVarianceFloor = 1e-12;

template <typename Scalar>
struct TransferMap {
  Matrix2<Scalar> transform = Matrix2<Scalar>::Identity();
  Vector2<Scalar> mean = Vector2<Scalar>::Zero();
  Vector2<Scalar> ref_mean = Vector2<Scalar>::Zero();
  Scalar density_scale = 1;
  Scalar density_offset = 0;  // D' = scale * D + offset

  static TransferMap fit(const ColorStats<Scalar>& stats, const ColorStats<Scalar>& ref) {
    TransferMap m;
    m.transform = mk_transform<Scalar>(stats.cov, ref.cov);
    m.mean = stats.mean;
    m.ref_mean = ref.mean;
    m.density_scale = std::sqrt(ref.density_var / std::max(stats.density_var, Scalar(kDensityVarianceFloor)));
    m.density_offset = ref.density_mean - m.density_scale * stats.density_mean;
    return m;
  }

  HsdPixel<Scalar> operator()(const HsdPixel<Scalar>& p) const {
    const Vector2<Scalar> c = transform * (Vector2<Scalar>(p.cx, p.cy) - mean) + ref_mean;
    return {c(0), c(1), density_scale * p.density + density_offset};
  }
};

using TransferMapd = TransferMap<double>;

// ---------------------------------------------------------------------------
// Raster-level helpers
// ---------------------------------------------------------------------------

/// HSD coordinates of pixels in `mask`-selected positions (all when empty).
std::vector<HsdPixel<double>> collect_hsd(const Rgb8Image& img, const std::vector<std::uint8_t>& mask = {});

/// Maps every pixel. Returns the number of clamped channels.
std::uint64_t apply_normalization_inplace(Rgb8Image& img, const ColorStatsd& stats, const ColorStatsd& ref);

inline Rgb8Image apply_normalization(Rgb8Image img, const ColorStatsd& stats, const ColorStatsd& ref) {
  apply_normalization_inplace(img, stats, ref);
  return img;
}

void save_stats(const ColorStatsd& stats, const std::filesystem::path& path);
ColorStatsd load_stats(const std::filesystem::path& path);

}  // namespace metdet::colornorm
