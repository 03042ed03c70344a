#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "celldino/image.hpp"
#include "celldino/rng.hpp"

namespace celldino {

// Desk-scale stand-in for fluorescence microscopy FOVs: elliptical nuclei in
// a "nucleus" channel and a class-dependent protein pattern (overlapping the
// nucleus, filling the surrounding soma, or scattered foci). Optional extra
// channels render filament-like and perinuclear structures so that channel
// semantics are distinguishable across slots.
struct SynthConfig {
  std::string name = "synth-cell";
  int n_samples = 600;
  std::int64_t image_size = 96;
  std::vector<std::string> channels = {"protein", "nucleus"};
  std::vector<std::string> classes = {"nuclear", "cytoplasmic", "punctate"};
  int cells_min = 3;
  int cells_max = 6;
  bool with_masks = true;
  double second_label_prob = 0.0;  // chance of an extra grade-1 label

  void validate() const {
    if (n_samples < 1) throw ConfigError("gen-synthetic: n_samples < 1");
    if (image_size < 32) throw ConfigError("gen-synthetic: image_size < 32");
    if (classes.empty()) throw ConfigError("gen-synthetic: no classes");
    if (cells_min < 1 || cells_max < cells_min)
      throw ConfigError("gen-synthetic: bad cells-per-image range");
    bool has_protein = false, has_nucleus = false;
    for (const auto& c : channels) {
      if (c == "protein") has_protein = true;
      if (c == "nucleus") has_nucleus = true;
    }
    if (!has_protein || !has_nucleus)
      throw ConfigError("gen-synthetic: channels must include protein and nucleus");
  }

  nlohmann::json to_json() const {
    return {{"name", name},           {"n_samples", n_samples},
            {"image_size", image_size}, {"channels", channels},
            {"classes", classes},     {"cells_min", cells_min},
            {"cells_max", cells_max}, {"with_masks", with_masks},
            {"second_label_prob", second_label_prob}};
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.name = j.value("name", c.name);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.image_size = j.value("image_size", c.image_size);
    c.channels = j.value("channels", c.channels);
    c.classes = j.value("classes", c.classes);
    c.cells_min = j.value("cells_min", c.cells_min);
    c.cells_max = j.value("cells_max", c.cells_max);
    c.with_masks = j.value("with_masks", c.with_masks);
    c.second_label_prob = j.value("second_label_prob", c.second_label_prob);
    c.validate();
    return c;
  }
};

namespace synth {

struct Cell {
  double cy, cx;       // center
  double ra, rb;       // nucleus semi-axes
  double angle;        // orientation
  double soma_scale;   // soma radius / nucleus radius
  double brightness;
};

// Normalized elliptical distance: <1 inside the nucleus, <soma_scale inside
// the soma.
inline double nucleus_dist(const Cell& c, double y, double x) {
  const double dy = y - c.cy, dx = x - c.cx;
  const double ca = std::cos(c.angle), sa = std::sin(c.angle);
  const double u = (ca * dx + sa * dy) / c.ra;
  const double v = (-sa * dx + ca * dy) / c.rb;
  return std::sqrt(u * u + v * v);
}

inline double edge(double d, double at, double sharpness = 8.0) {
  return 1.0 / (1.0 + std::exp((d - at) * sharpness));
}

}  // namespace synth

inline MultiChannelImage render_synthetic_fov(const SynthConfig& cfg,
                                              std::int64_t index,
                                              std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "sample", std::uint64_t(index)));
  const std::int64_t s = cfg.image_size;
  const double unit = double(s) / 96.0;

  const std::size_t class_index =
      static_cast<std::size_t>(index) % cfg.classes.size();
  const std::string& cls = cfg.classes[class_index];

  const int n_cells =
      cfg.cells_min +
      static_cast<int>(rng.uniform_index(
          std::uint64_t(cfg.cells_max - cfg.cells_min + 1)));
  std::vector<synth::Cell> cells;
  for (int i = 0; i < n_cells; ++i) {
    synth::Cell c;
    const double margin = 14.0 * unit;
    c.cy = rng.uniform(margin, double(s) - margin);
    c.cx = rng.uniform(margin, double(s) - margin);
    c.ra = rng.uniform(5.0, 9.0) * unit;
    c.rb = rng.uniform(5.0, 9.0) * unit;
    c.angle = rng.uniform(0.0, 3.14159265358979323846);
    c.soma_scale = rng.uniform(1.8, 2.4);
    c.brightness = rng.uniform(0.7, 1.0);
    cells.push_back(c);
  }

  // per-cell foci for the punctate class (drawn regardless of class to keep
  // the stream layout fixed)
  std::vector<std::vector<std::array<double, 2>>> foci(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const int n_foci = 6 + static_cast<int>(rng.uniform_index(7));
    for (int f = 0; f < n_foci; ++f) {
      const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double rad = rng.uniform(0.2, 0.95) * cells[i].soma_scale;
      foci[static_cast<std::size_t>(i)].push_back(
          {cells[i].cy + rad * cells[i].rb * std::sin(ang),
           cells[i].cx + rad * cells[i].ra * std::cos(ang)});
    }
  }

  // microtubule filaments (used only when a "microtubule" channel exists)
  std::vector<std::vector<double>> filaments(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const int n_fil = 8 + static_cast<int>(rng.uniform_index(7));
    for (int f = 0; f < n_fil; ++f)
      filaments[i].push_back(rng.uniform(0.0, 2.0 * 3.14159265358979323846));
  }

  MultiChannelImage img;
  img.id = cfg.name + "-" + std::to_string(index);
  img.channels = cfg.channels;
  img.planes = Tensor<float>(
      {static_cast<std::int64_t>(cfg.channels.size()), s, s});
  if (cfg.with_masks) img.mask = Tensor<std::uint16_t>({s, s}, 0);

  img.labels[cls] = 3;
  if (cfg.second_label_prob > 0.0 && rng.bernoulli(cfg.second_label_prob)) {
    const std::size_t other =
        (class_index + 1 + rng.uniform_index(cfg.classes.size() - 1)) %
        cfg.classes.size();
    img.labels[cfg.classes[other]] = 1;
  }

  auto channel_ptr = [&](const std::string& name) -> float* {
    for (std::size_t i = 0; i < cfg.channels.size(); ++i)
      if (cfg.channels[i] == name) return img.planes.data() + std::int64_t(i) * s * s;
    return nullptr;
  };
  float* nucleus = channel_ptr("nucleus");
  float* protein = channel_ptr("protein");
  float* microtubule = channel_ptr("microtubule");
  float* er = channel_ptr("er");

  Rng noise_rng(derive_seed(seed, "noise", std::uint64_t(index)));
  for (std::int64_t y = 0; y < s; ++y)
    for (std::int64_t x = 0; x < s; ++x) {
      double nuc = 0.0, prot = 0.0, mt = 0.0, ern = 0.0;
      std::size_t owner = 0;
      double owner_soma = 1e9;
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& c = cells[i];
        const double d = synth::nucleus_dist(c, double(y), double(x));
        const double soma_d = d / c.soma_scale;
        if (soma_d < owner_soma) {
          owner_soma = soma_d;
          owner = i;
        }
        nuc = std::max(nuc, c.brightness * synth::edge(d, 1.0));

        if (cls == "nuclear") {
          prot = std::max(prot, c.brightness * synth::edge(d, 0.95));
        } else if (cls == "cytoplasmic") {
          const double soma = synth::edge(soma_d, 1.0, 10.0);
          const double hole = 1.0 - synth::edge(d, 1.05, 10.0);
          prot = std::max(prot, 0.9 * c.brightness * soma * hole);
        } else {  // punctate foci scattered over the soma
          for (const auto& f : foci[i]) {
            const double fd2 = (double(y) - f[0]) * (double(y) - f[0]) +
                               (double(x) - f[1]) * (double(x) - f[1]);
            prot = std::max(prot,
                            c.brightness * std::exp(-fd2 / (2.2 * unit * unit)));
          }
        }

        if (microtubule) {
          const double soma = synth::edge(soma_d, 1.0, 10.0);
          if (soma > 0.02) {
            const double ang =
                std::atan2(double(y) - c.cy, double(x) - c.cx);
            for (const double fil : filaments[i]) {
              double delta = std::abs(ang - fil);
              delta = std::min(delta, 2.0 * 3.14159265358979323846 - delta);
              const double cross = delta * std::max(d, 0.3) * c.ra;
              mt = std::max(mt, 0.8 * soma * std::exp(-cross * cross / (1.2 * unit * unit)));
            }
          }
        }
        if (er) {
          // perinuclear haze concentrated just outside the nuclear envelope
          const double band = std::abs(d - 1.25);
          ern = std::max(ern, 0.85 * c.brightness * std::exp(-band * band / 0.18) *
                                  synth::edge(soma_d, 1.0, 10.0));
        }
      }

      const double base = 0.01;
      if (nucleus)
        nucleus[y * s + x] = static_cast<float>(
            std::min(1.0, nuc + base + 0.02 * noise_rng.uniform()));
      if (protein)
        protein[y * s + x] = static_cast<float>(
            std::min(1.0, prot + base + 0.02 * noise_rng.uniform()));
      if (microtubule)
        microtubule[y * s + x] = static_cast<float>(
            std::min(1.0, mt + base + 0.02 * noise_rng.uniform()));
      if (er)
        er[y * s + x] = static_cast<float>(
            std::min(1.0, ern + base + 0.02 * noise_rng.uniform()));

      if (cfg.with_masks && owner_soma <= 1.0)
        img.mask.at2(y, x) = static_cast<std::uint16_t>(owner + 1);
    }

  return img;
}

}  // namespace celldino
