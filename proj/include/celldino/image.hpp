#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "celldino/ctf.hpp"
#include "celldino/error.hpp"
#include "celldino/parallel.hpp"
#include "celldino/tensor.hpp"

namespace celldino {

// class name -> grade in 1..3 (3 = prominent localization).
using AnnotationSet = std::map<std::string, int>;

// Named-channel image sample: per-channel planes stacked (C, H, W), an
// optional instance mask, and a multi-label annotation set.
struct MultiChannelImage {
  std::string id;
  std::vector<std::string> channels;
  Tensor<float> planes;            // (C, H, W), normalized intensities
  Tensor<std::uint16_t> mask;      // (H, W) or empty
  AnnotationSet labels;

  std::int64_t n_channels() const { return planes.ndim() ? planes.dim(0) : 0; }
  std::int64_t height() const { return planes.dim(1); }
  std::int64_t width() const { return planes.dim(2); }

  std::int64_t channel_index(const std::string& name) const {
    for (std::size_t i = 0; i < channels.size(); ++i)
      if (channels[i] == name) return static_cast<std::int64_t>(i);
    throw DataError("unknown channel '" + name + "' in sample " + id);
  }

  const float* plane(std::int64_t c) const {
    return planes.data() + c * height() * width();
  }
};

namespace img {

// Bilinear sampling with the half-pixel convention:
// src = (dst + 0.5) * (in / out) - 0.5, clamped at the borders.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::int64_t out_h,
                          std::int64_t out_w) {
  if (image.ndim() != 3) throw ShapeError("resize: expected (C,H,W)");
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (out_h < 1 || out_w < 1) throw ShapeError("resize: empty output");
  Tensor<T> out({c, out_h, out_w});
  const double sy = double(h) / double(out_h);
  const double sx = double(w) / double(out_w);
  parallel_for(c * out_h, [&](std::int64_t row) {
    const std::int64_t ch = row / out_h;
    const std::int64_t y = row % out_h;
    const double fy = (double(y) + 0.5) * sy - 0.5;
    const std::int64_t y0 =
        std::clamp<std::int64_t>(std::int64_t(std::floor(fy)), 0, h - 1);
    const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, h - 1);
    const double wy = std::clamp(fy - double(y0), 0.0, 1.0);
    const T* src = image.data() + ch * h * w;
    T* dst = out.data() + (ch * out_h + y) * out_w;
    for (std::int64_t x = 0; x < out_w; ++x) {
      const double fx = (double(x) + 0.5) * sx - 0.5;
      const std::int64_t x0 =
          std::clamp<std::int64_t>(std::int64_t(std::floor(fx)), 0, w - 1);
      const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, w - 1);
      const double wx = std::clamp(fx - double(x0), 0.0, 1.0);
      const double top = double(src[y0 * w + x0]) * (1.0 - wx) +
                         double(src[y0 * w + x1]) * wx;
      const double bot = double(src[y1 * w + x0]) * (1.0 - wx) +
                         double(src[y1 * w + x1]) * wx;
      dst[x] = static_cast<T>(top * (1.0 - wy) + bot * wy);
    }
  }, 4);
  return out;
}

template <class T>
Tensor<T> crop(const Tensor<T>& image, std::int64_t top, std::int64_t left,
               std::int64_t ch, std::int64_t cw) {
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (top < 0 || left < 0 || top + ch > h || left + cw > w)
    throw ShapeError("crop: window out of bounds");
  Tensor<T> out({c, ch, cw});
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t y = 0; y < ch; ++y)
      std::copy(image.data() + (k * h + top + y) * w + left,
                image.data() + (k * h + top + y) * w + left + cw,
                out.data() + (k * ch + y) * cw);
  return out;
}

template <class T>
void flip_horizontal(Tensor<T>& image) {
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t y = 0; y < h; ++y) {
      T* row = image.data() + (k * h + y) * w;
      std::reverse(row, row + w);
    }
}

template <class T>
void flip_vertical(Tensor<T>& image) {
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t y = 0; y < h / 2; ++y)
      std::swap_ranges(image.data() + (k * h + y) * w,
                       image.data() + (k * h + y + 1) * w,
                       image.data() + (k * h + (h - 1 - y)) * w);
}

}  // namespace img

// FOV files on disk: `<id>.ctf` (C,H,W f32), optional `<id>.mask.ctf`
// (H,W u16) and a JSON sidecar `<id>.json` with channels and labels.
inline void save_fov(const std::filesystem::path& dir,
                     const MultiChannelImage& s) {
  std::filesystem::create_directories(dir);
  ctf::write(dir / (s.id + ".ctf"), s.planes);
  if (!s.mask.empty()) ctf::write(dir / (s.id + ".mask.ctf"), s.mask);
  nlohmann::json j;
  j["id"] = s.id;
  j["channels"] = s.channels;
  j["labels"] = s.labels;
  std::ofstream f(dir / (s.id + ".json"));
  if (!f) throw IoError("cannot write sidecar for " + s.id);
  f << j.dump(2) << "\n";
}

inline MultiChannelImage load_fov(const std::filesystem::path& ctf_path) {
  MultiChannelImage s;
  s.planes = ctf::read<float>(ctf_path);
  if (s.planes.ndim() != 3)
    throw DataError("FOV tensor must be (C,H,W): " + ctf_path.string());
  auto sidecar = ctf_path;
  sidecar.replace_extension(".json");
  if (std::filesystem::exists(sidecar)) {
    std::ifstream f(sidecar);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corrupt sidecar " + sidecar.string() + ": " + e.what());
    }
    s.id = j.value("id", ctf_path.stem().string());
    s.channels = j.value("channels", std::vector<std::string>{});
    if (j.contains("labels"))
      s.labels = j["labels"].get<AnnotationSet>();
  } else {
    s.id = ctf_path.stem().string();
  }
  if (s.channels.empty())
    for (std::int64_t c = 0; c < s.planes.dim(0); ++c)
      s.channels.push_back("ch" + std::to_string(c));
  if (static_cast<std::int64_t>(s.channels.size()) != s.planes.dim(0))
    throw DataError("channel list does not match plane count in " + s.id);
  auto mask_path = ctf_path;
  mask_path.replace_extension();
  mask_path += ".mask.ctf";
  if (std::filesystem::exists(mask_path))
    s.mask = ctf::read<std::uint16_t>(mask_path);
  return s;
}

}  // namespace celldino
