#include "metdet/core.hpp"

#include <array>

#include <cctype>
#include <string>

namespace metdet {

std::string_view to_string(Magnification m) {
  switch (m) {
    case Magnification::k40x: return "40x";
    case Magnification::k20x: return "20x";
    case Magnification::k10x: return "10x";
  }
  return "?";
}

Magnification parse_magnification(std::string_view text) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "40x") return Magnification::k40x;
  if (t == "20x") return Magnification::k20x;
  if (t == "10x") return Magnification::k10x;
  throw ArgumentError("unknown magnification '" + std::string(text) + "' (expected 40x, 20x or 10x)");
}

std::vector<Magnification> parse_magnifications(std::string_view text) {
  std::vector<Magnification> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    if (comma == std::string_view::npos) comma = text.size();
    auto item = text.substr(start, comma - start);
    if (!item.empty()) {
      auto m = parse_magnification(item);
      for (auto existing : out)
        if (existing == m) throw ArgumentError("duplicate magnification '" + std::string(item) + "'");
      out.push_back(m);
    }
    start = comma + 1;
  }
  if (out.empty()) throw ArgumentError("empty magnification list");
  return out;
}

namespace {

[[gnu::target_clones("avx2", "default")]] void deinterleave_unit(const std::uint8_t* __restrict p, float* __restrict r,
                                                                 float* __restrict g, float* __restrict b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    r[i] = static_cast<float>(p[3 * i]) / 255.0f;
    g[i] = static_cast<float>(p[3 * i + 1]) / 255.0f;
    b[i] = static_cast<float>(p[3 * i + 2]) / 255.0f;
  }
}

}  // namespace

RgbImagef to_float(const Rgb8Image& img) {
  RgbImagef out(img.height, img.width);
  deinterleave_unit(img.data.data(), out.channels[0].data(), out.channels[1].data(), out.channels[2].data(),
                    std::size_t(img.width) * std::size_t(img.height));
  return out;
}

Rgb8Image to_rgb8(const RgbImagef& img) {
  Rgb8Image out(static_cast<int>(img.cols()), static_cast<int>(img.rows()));
  std::uint8_t* p = out.data.data();
  for (Eigen::Index y = 0; y < img.rows(); ++y)
    for (Eigen::Index x = 0; x < img.cols(); ++x, p += 3)
      for (int c = 0; c < 3; ++c) p[c] = quantize_unit(img.channels[c](y, x));
  return out;
}

}  // namespace metdet
