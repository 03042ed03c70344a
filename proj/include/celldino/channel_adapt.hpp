#pragma once

#include <json.hpp>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "celldino/backbone.hpp"
#include "celldino/image.hpp"

namespace celldino {

// Injective mapping from source channel names to input slots of a
// fixed-channel backbone; unmapped slots are filled with a constant
// (zero: blank channels).
struct ChannelMap {
  std::vector<std::pair<std::string, std::int64_t>> entries;  // src -> slot
  std::int64_t target_slots = 0;
  float fill = 0.0f;

  void validate() const {
    if (target_slots < 1) throw ConfigError("channel map: no target slots");
    std::vector<bool> used(static_cast<std::size_t>(target_slots), false);
    for (const auto& [name, slot] : entries) {
      if (slot < 0 || slot >= target_slots)
        throw ConfigError("channel map: slot " + std::to_string(slot) +
                          " out of range for " + name);
      if (used[static_cast<std::size_t>(slot)])
        throw ConfigError("channel map: duplicate target slot " +
                          std::to_string(slot));
      used[static_cast<std::size_t>(slot)] = true;
      for (const auto& [other, _] : entries)
        if (&other != &name && other == name)
          throw ConfigError("channel map: duplicate source " + name);
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [name, slot] : entries) m[name] = slot;
    return {{"target_slots", target_slots}, {"map", m}};
  }

  static ChannelMap from_json(const nlohmann::json& j) {
    ChannelMap cm;
    cm.target_slots = j.at("target_slots").get<std::int64_t>();
    for (const auto& [key, value] : j.at("map").items())
      cm.entries.emplace_back(key, value.get<std::int64_t>());
    cm.fill = j.value("fill", 0.0f);
    cm.validate();
    return cm;
  }

  // CLI shorthand: "protein=1,nucleus=2"
  static ChannelMap parse_shorthand(const std::string& text,
                                    std::int64_t slots) {
    ChannelMap cm;
    cm.target_slots = slots;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const std::size_t comma = text.find(',', pos);
      const std::string item =
          text.substr(pos, comma == std::string::npos ? comma : comma - pos);
      const std::size_t eq = item.find('=');
      if (eq == std::string::npos)
        throw ConfigError("channel map shorthand: expected name=slot in '" +
                          item + "'");
      cm.entries.emplace_back(item.substr(0, eq),
                              std::stoll(item.substr(eq + 1)));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    cm.validate();
    return cm;
  }

  std::string describe() const {
    std::string s;
    for (const auto& [name, slot] : entries) {
      if (!s.empty()) s += ",";
      s += name + "=" + std::to_string(slot);
    }
    return s;
  }
};

// Mapped planes are bit-identical copies; unmapped slots hold the fill value.
inline Tensor<float> channel_map_apply(const MultiChannelImage& image,
                                       const ChannelMap& map) {
  map.validate();
  const std::int64_t h = image.height(), w = image.width();
  Tensor<float> out({map.target_slots, h, w}, map.fill);
  for (const auto& [name, slot] : map.entries) {
    const std::int64_t src = image.channel_index(name);  // throws if unknown
    std::copy(image.plane(src), image.plane(src) + h * w,
              out.data() + slot * h * w);
  }
  return out;
}

// Embeds each source channel independently by replicating its plane into all
// backbone input slots, then concatenates the per-channel embeddings in
// source order. Output length = n_channels * D.
template <class T>
Tensor<T> replicate_embed(const Vit<T>& backbone,
                          const MultiChannelImage& image) {
  const std::int64_t n = image.n_channels();
  if (n < 1) throw DataError("replicate_embed: image has no channels");
  const std::int64_t h = image.height(), w = image.width();
  if (h != backbone.cfg.image_size || w != backbone.cfg.image_size)
    throw ShapeError("replicate_embed: spatial dims " + std::to_string(h) +
                     "x" + std::to_string(w) + " do not match backbone size " +
                     std::to_string(backbone.cfg.image_size));
  const std::int64_t c_in = backbone.cfg.input_channels;
  const std::int64_t d = backbone.cfg.embed_dim;
  Tensor<T> batch({n, c_in, h, w});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t slot = 0; slot < c_in; ++slot)
      for (std::int64_t px = 0; px < h * w; ++px)
        batch.data()[(i * c_in + slot) * h * w + px] =
            static_cast<T>(image.plane(i)[px]);
  const Tensor<T> emb = backbone.forward(batch, nullptr);  // (n, D)
  return emb.reshaped({n * d});
}

// ---------------------------------------------------------------------------
// Natural-mapping presets.
// ---------------------------------------------------------------------------

// Channel layouts of the supported dataset families. Slot order of the
// four-channel fluorescence layout: microtubule, protein, nucleus, er.
inline std::map<std::string, std::vector<std::string>>& channel_registry() {
  static std::map<std::string, std::vector<std::string>> reg = {
      {"opencell", {"protein", "nucleus"}},
      {"hpa-fov", {"microtubule", "protein", "nucleus", "er"}},
      {"hpa-single-cell", {"microtubule", "protein", "nucleus", "er"}},
      {"imagenet-rgb", {"red", "green", "blue"}},
  };
  return reg;
}

inline void register_dataset_channels(const std::string& name,
                                      std::vector<std::string> channels) {
  channel_registry()[name] = std::move(channels);
}

// Semantic fallbacks when the target has no channel of the same name.
// Fluorescence onto RGB: protein -> green, nucleus -> blue.
inline const std::map<std::string, std::string>& rgb_aliases() {
  static const std::map<std::string, std::string> alias = {
      {"protein", "green"}, {"nucleus", "blue"}};
  return alias;
}

inline ChannelMap natural_map(const std::string& source_dataset,
                              const std::string& target_backbone) {
  const auto& reg = channel_registry();
  const auto src_it = reg.find(source_dataset);
  const auto tgt_it = reg.find(target_backbone);
  if (src_it == reg.end())
    throw ConfigError("natural_map: unknown dataset '" + source_dataset + "'");
  if (tgt_it == reg.end())
    throw ConfigError("natural_map: unknown backbone layout '" +
                      target_backbone + "'");
  const auto& src = src_it->second;
  const auto& tgt = tgt_it->second;
  auto slot_of = [&tgt](const std::string& name) -> std::int64_t {
    for (std::size_t i = 0; i < tgt.size(); ++i)
      if (tgt[i] == name) return static_cast<std::int64_t>(i);
    return -1;
  };
  ChannelMap cm;
  cm.target_slots = static_cast<std::int64_t>(tgt.size());
  for (const auto& ch : src) {
    std::int64_t slot = slot_of(ch);
    if (slot < 0) {
      const auto alias = rgb_aliases().find(ch);
      if (alias != rgb_aliases().end()) slot = slot_of(alias->second);
    }
    if (slot < 0)
      throw ConfigError("natural_map: no natural slot for channel '" + ch +
                        "' of " + source_dataset + " in " + target_backbone);
    cm.entries.emplace_back(ch, slot);
  }
  cm.validate();
  return cm;
}

// All ordered injections of the source channels into the target slots,
// count = C!/(C-n)!, in lexicographic slot order.
inline std::vector<ChannelMap> enumerate_maps(
    const std::vector<std::string>& source_channels, std::int64_t c_target) {
  const std::int64_t n = static_cast<std::int64_t>(source_channels.size());
  if (n > c_target)
    throw ConfigError("enumerate_maps: more source channels than target slots");
  std::vector<ChannelMap> out;
  std::vector<std::int64_t> slots(static_cast<std::size_t>(n), 0);
  std::vector<bool> used(static_cast<std::size_t>(c_target), false);
  auto recurse = [&](auto&& self, std::int64_t depth) -> void {
    if (depth == n) {
      ChannelMap cm;
      cm.target_slots = c_target;
      for (std::int64_t i = 0; i < n; ++i)
        cm.entries.emplace_back(source_channels[static_cast<std::size_t>(i)],
                                slots[static_cast<std::size_t>(i)]);
      cm.validate();
      out.push_back(std::move(cm));
      return;
    }
    for (std::int64_t s = 0; s < c_target; ++s) {
      if (used[static_cast<std::size_t>(s)]) continue;
      used[static_cast<std::size_t>(s)] = true;
      slots[static_cast<std::size_t>(depth)] = s;
      self(self, depth + 1);
      used[static_cast<std::size_t>(s)] = false;
    }
  };
  recurse(recurse, 0);
  return out;
}

inline std::vector<ChannelMap> enumerate_maps(std::int64_t n_source,
                                              std::int64_t c_target) {
  std::vector<std::string> names;
  for (std::int64_t i = 0; i < n_source; ++i)
    names.push_back("src" + std::to_string(i));
  return enumerate_maps(names, c_target);
}

}  // namespace celldino
