#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace metdet {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class SamplingError : public Error { using Error::Error; };
class LookupError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class CiUndefinedError : public NumericError { using NumericError::NumericError; };

enum class LoadErrorKind { kMissingMetadata, kMissingLevel, kMissingTile, kDimensionMismatch, kCorruptTile };

class LoadError : public Error {
 public:
  LoadError(LoadErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  LoadErrorKind kind() const noexcept { return kind_; }

 private:
  LoadErrorKind kind_;
};

/// Raised by heatmap inference; carries the grid cell whose patch failed.
class InferenceError : public Error {
 public:
  InferenceError(int row, int col, const std::string& what)
      : Error("cell (" + std::to_string(row) + "," + std::to_string(col) + "): " + what), row_(row), col_(col) {}
  int row() const noexcept { return row_; }
  int col() const noexcept { return col_; }

 private:
  int row_;
  int col_;
};

// ---------------------------------------------------------------------------
// Geometry constants
// ---------------------------------------------------------------------------

/// Side of the labeled center region and of one heatmap cell, in base pixels.
inline constexpr int kCellSize = 128;
/// Model input side.
inline constexpr int kPatchSize = 299;

enum class Magnification { k40x = 1, k20x = 2, k10x = 4 };

constexpr int downsample_factor(Magnification m) { return static_cast<int>(m); }
std::string_view to_string(Magnification m);
Magnification parse_magnification(std::string_view text);
/// Parses a comma separated list such as "40x,20x".
std::vector<Magnification> parse_magnifications(std::string_view text);

struct Point2i {
  int x = 0;
  int y = 0;
  friend bool operator==(const Point2i&, const Point2i&) = default;
};

// ---------------------------------------------------------------------------
// Dense image types
// ---------------------------------------------------------------------------

template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Planar three-channel image.
template <typename Scalar>
struct RgbImage {
  std::array<Plane<Scalar>, 3> channels;

  RgbImage() = default;
  RgbImage(Eigen::Index rows, Eigen::Index cols) {
    for (auto& c : channels) c.resize(rows, cols);
  }

  static RgbImage constant(Eigen::Index rows, Eigen::Index cols, Scalar value) {
    RgbImage img(rows, cols);
    for (auto& c : img.channels) c.setConstant(value);
    return img;
  }

  Eigen::Index rows() const { return channels[0].rows(); }
  Eigen::Index cols() const { return channels[0].cols(); }
  Plane<Scalar>& operator[](std::size_t c) { return channels[c]; }
  const Plane<Scalar>& operator[](std::size_t c) const { return channels[c]; }

  friend bool operator==(const RgbImage& a, const RgbImage& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (std::size_t c = 0; c < 3; ++c)
      if (!(a.channels[c] == b.channels[c]).all()) return false;
    return true;
  }
};

using RgbImagef = RgbImage<float>;

/// Interleaved 8-bit RGB raster, the storage format of pyramid levels.
struct Rgb8Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // row-major, RGBRGB...

  Rgb8Image() = default;
  Rgb8Image(int w, int h, std::uint8_t fill = 0) : width(w), height(h), data(std::size_t(w) * h * 3, fill) {}

  std::uint8_t* pixel(int x, int y) { return data.data() + (std::size_t(y) * width + x) * 3; }
  const std::uint8_t* pixel(int x, int y) const { return data.data() + (std::size_t(y) * width + x) * 3; }

  friend bool operator==(const Rgb8Image&, const Rgb8Image&) = default;
};

RgbImagef to_float(const Rgb8Image& img);
/// Rounds to nearest after clamping to [0,1].
Rgb8Image to_rgb8(const RgbImagef& img);

inline std::uint8_t quantize_unit(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

}  // namespace metdet
