#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "celldino/image.hpp"

namespace celldino {

inline constexpr std::int64_t kCropSize = 512;

// Centroid-centered cutout of one cell instance, zero-padded at the FOV
// borders; inherits the FOV's annotations.
struct CellCrop {
  std::string fov_id;
  std::uint16_t instance_id = 0;
  Tensor<float> planes;  // (C, 512, 512)
  std::int64_t centroid_r = 0, centroid_c = 0;
  double black_fraction = 0.0;  // pixels exactly 0 in the protein channel
  AnnotationSet labels;
};

struct CellCropOptions {
  bool mask_out_other_cells = false;
  std::string protein_channel = "protein";
};

namespace detail {

inline std::int64_t round_half_up(double v) {
  return static_cast<std::int64_t>(std::floor(v + 0.5));
}

}  // namespace detail

// One crop per distinct positive instance id, ascending. The centroid pixel
// lands at crop coordinate (256, 256).
inline std::vector<CellCrop> extract_cells(const MultiChannelImage& fov,
                                           const Tensor<std::uint16_t>& mask,
                                           const CellCropOptions& opts = {}) {
  if (mask.ndim() != 2 || mask.dim(0) != fov.height() ||
      mask.dim(1) != fov.width())
    throw ShapeError("extract_cells: mask dims do not match FOV");
  const std::int64_t h = fov.height(), w = fov.width();
  const std::int64_t c = fov.n_channels();

  // centroid accumulation per instance id
  std::map<std::uint16_t, std::array<double, 3>> acc;  // id -> (sum_r, sum_c, n)
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const std::uint16_t id = mask.at2(y, x);
      if (id == 0) continue;
      auto& a = acc[id];
      a[0] += double(y);
      a[1] += double(x);
      a[2] += 1.0;
    }

  std::int64_t protein = 0;
  for (std::size_t i = 0; i < fov.channels.size(); ++i)
    if (fov.channels[i] == opts.protein_channel)
      protein = static_cast<std::int64_t>(i);

  std::vector<CellCrop> crops;
  for (const auto& [id, a] : acc) {
    CellCrop crop;
    crop.fov_id = fov.id;
    crop.instance_id = id;
    crop.centroid_r = detail::round_half_up(a[0] / a[2]);
    crop.centroid_c = detail::round_half_up(a[1] / a[2]);
    crop.labels = fov.labels;
    crop.planes = Tensor<float>({c, kCropSize, kCropSize}, 0.0f);

    const std::int64_t top = crop.centroid_r - kCropSize / 2;
    const std::int64_t left = crop.centroid_c - kCropSize / 2;
    const std::int64_t y0 = std::max<std::int64_t>(0, top);
    const std::int64_t y1 = std::min(h, top + kCropSize);
    const std::int64_t x0 = std::max<std::int64_t>(0, left);
    const std::int64_t x1 = std::min(w, left + kCropSize);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = y0; y < y1; ++y) {
        const float* src = fov.plane(ch) + y * w;
        float* dst =
            crop.planes.data() + (ch * kCropSize + (y - top)) * kCropSize;
        for (std::int64_t x = x0; x < x1; ++x) {
          float v = src[x];
          if (opts.mask_out_other_cells) {
            const std::uint16_t m = mask.at2(y, x);
            if (m != 0 && m != id) v = 0.0f;
          }
          dst[x - left] = v;
        }
      }

    std::int64_t black = 0;
    const float* p = crop.planes.data() + protein * kCropSize * kCropSize;
    for (std::int64_t i = 0; i < kCropSize * kCropSize; ++i)
      if (p[i] == 0.0f) ++black;
    crop.black_fraction = double(black) / double(kCropSize * kCropSize);
    crops.push_back(std::move(crop));
  }
  return crops;
}

// Central 256x256 region upsampled by 2 with bilinear interpolation, so the
// content appears twice as large at the same 512x512 size.
inline CellCrop zoom2x(const CellCrop& crop) {
  if (crop.planes.dim(1) != kCropSize || crop.planes.dim(2) != kCropSize)
    throw ShapeError("zoom2x: expected a 512x512 crop");
  CellCrop out = crop;
  const auto central = img::crop(crop.planes, kCropSize / 4, kCropSize / 4,
                                 kCropSize / 2, kCropSize / 2);
  out.planes = img::resize_bilinear(central, kCropSize, kCropSize);
  return out;
}

struct BlackFilterResult {
  std::vector<bool> kept;
  double threshold = 0.0;  // nearest-rank percentile of the batch
};

// Drops crops whose black-pixel fraction strictly exceeds the given
// percentile (nearest-rank) of the batch distribution.
inline BlackFilterResult filter_black_flags(const std::vector<CellCrop>& crops,
                                            double percentile = 99.7) {
  if (crops.empty()) throw DataError("filter_black: no crops");
  std::vector<double> fractions;
  fractions.reserve(crops.size());
  for (const auto& c : crops) fractions.push_back(c.black_fraction);
  std::vector<double> sorted = fractions;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(percentile / 100.0 * double(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  BlackFilterResult r;
  r.threshold = sorted[rank - 1];
  r.kept.reserve(n);
  for (const auto& f : fractions) r.kept.push_back(!(f > r.threshold));
  return r;
}

inline std::vector<CellCrop> filter_black(std::vector<CellCrop> crops,
                                          double percentile = 99.7) {
  const auto flags = filter_black_flags(crops, percentile);
  std::vector<CellCrop> out;
  for (std::size_t i = 0; i < crops.size(); ++i)
    if (flags.kept[i]) out.push_back(std::move(crops[i]));
  return out;
}

// Output layout: cells/<fov_id>/<instance_id>.ctf plus a JSON sidecar, and a
// manifest CSV row per crop (kept or not).
inline void write_crop(const std::filesystem::path& root, const CellCrop& crop) {
  const auto dir = root / crop.fov_id;
  std::filesystem::create_directories(dir);
  const auto stem = std::to_string(crop.instance_id);
  ctf::write(dir / (stem + ".ctf"), crop.planes);
  nlohmann::json j;
  j["fov_id"] = crop.fov_id;
  j["instance_id"] = crop.instance_id;
  j["centroid"] = {crop.centroid_r, crop.centroid_c};
  j["black_fraction"] = crop.black_fraction;
  j["labels"] = crop.labels;
  std::ofstream f(dir / (stem + ".json"));
  if (!f) throw IoError("cannot write crop sidecar under " + dir.string());
  f << j.dump(2) << "\n";
}

inline void write_crop_manifest(const std::filesystem::path& csv_path,
                                const std::vector<CellCrop>& crops,
                                const std::vector<bool>& kept) {
  std::ofstream f(csv_path);
  if (!f) throw IoError("cannot write crop manifest: " + csv_path.string());
  f << "fov_id,instance_id,centroid_r,centroid_c,black_fraction,kept\n";
  f.precision(8);
  for (std::size_t i = 0; i < crops.size(); ++i)
    f << crops[i].fov_id << "," << crops[i].instance_id << ","
      << crops[i].centroid_r << "," << crops[i].centroid_c << ","
      << crops[i].black_fraction << "," << (kept[i] ? 1 : 0) << "\n";
}

}  // namespace celldino
