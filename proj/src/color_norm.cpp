#include "metdet/color_norm.hpp"

#include "json.hpp"

#include <fstream>

namespace metdet::colornorm {

std::vector<HsdPixel<double>> collect_hsd(const Rgb8Image& img, const std::vector<std::uint8_t>& mask) {
  const std::size_t n = std::size_t(img.width) * img.height;
  if (!mask.empty() && mask.size() != n) throw ArgumentError("pixel mask size mismatch");
  std::vector<HsdPixel<double>> out;
  out.reserve(mask.empty() ? n : std::size_t(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; })));
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const std::uint8_t* p = img.data.data() + i * 3;
    out.push_back(rgb_to_hsd<double>(p[0], p[1], p[2]));
  }
  return out;
}

std::uint64_t apply_normalization_inplace(Rgb8Image& img, const ColorStatsd& stats, const ColorStatsd& ref) {
  const TransferMapd map = TransferMapd::fit(stats, ref);
  ClampCounter counter;
  const std::size_t n = std::size_t(img.width) * img.height;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint8_t* p = img.data.data() + i * 3;
    const auto rgb = hsd_to_rgb(map(rgb_to_hsd<double>(p[0], p[1], p[2])), &counter);
    p[0] = rgb[0];
    p[1] = rgb[1];
    p[2] = rgb[2];
  }
  return counter.clamped_channels;
}

void save_stats(const ColorStatsd& s, const std::filesystem::path& path) {
  nlohmann::json j = {{"mu", {s.mean(0), s.mean(1)}},
                      {"sigma", {s.cov(0, 0), s.cov(0, 1), s.cov(1, 0), s.cov(1, 1)}},
                      {"density_mean", s.density_mean},
                      {"density_var", s.density_var},
                      {"pixel_count", s.pixel_count},
                      {"degenerate", s.degenerate}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

ColorStatsd load_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    ColorStatsd s;
    const auto mu = j.at("mu").get<std::vector<double>>();
    const auto sigma = j.at("sigma").get<std::vector<double>>();
    if (mu.size() != 2 || sigma.size() != 4) throw FormatError("stats file " + path.string() + " has wrong shapes");
    s.mean << mu[0], mu[1];
    s.cov << sigma[0], sigma[1], sigma[2], sigma[3];
    s.density_mean = j.at("density_mean").get<double>();
    s.density_var = j.at("density_var").get<double>();
    s.pixel_count = j.at("pixel_count").get<std::uint64_t>();
    s.degenerate = j.value("degenerate", s.cov.norm() == 0.0);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid stats file " + path.string() + ": " + e.what());
  }
}

}  // namespace metdet::colornorm
