#include <catch2/catch_amalgamated.hpp>
#include <set>

#include "celldino/channel_adapt.hpp"
#include "celldino/rng.hpp"

using namespace celldino;
using Catch::Approx;

namespace {

MultiChannelImage sample_image(std::int64_t size, std::uint64_t seed) {
  MultiChannelImage img;
  img.id = "sample";
  img.channels = {"protein", "nucleus"};
  img.planes = Tensor<float>({2, size, size});
  Rng rng(seed);
  for (std::int64_t i = 0; i < img.planes.numel(); ++i)
    img.planes[i] = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST_CASE("channel_map_apply copies planes bit-exactly and zero-fills") {
  const auto img = sample_image(16, 3);
  ChannelMap map;
  map.target_slots = 4;
  map.entries = {{"protein", 1}, {"nucleus", 2}};

  const auto out = channel_map_apply(img, map);
  REQUIRE(out.shape() == Shape{4, 16, 16});
  const std::int64_t plane = 16 * 16;
  for (std::int64_t i = 0; i < plane; ++i) {
    REQUIRE(out[0 * plane + i] == 0.0f);
    REQUIRE(out[1 * plane + i] == img.plane(0)[i]);
    REQUIRE(out[2 * plane + i] == img.plane(1)[i]);
    REQUIRE(out[3 * plane + i] == 0.0f);
  }
}

TEST_CASE("single channel identity map") {
  MultiChannelImage img;
  img.id = "one";
  img.channels = {"protein"};
  img.planes = Tensor<float>({1, 8, 8});
  for (std::int64_t i = 0; i < img.planes.numel(); ++i)
    img.planes[i] = float(i);
  ChannelMap map;
  map.target_slots = 1;
  map.entries = {{"protein", 0}};
  const auto out = channel_map_apply(img, map);
  REQUIRE(out == img.planes);
}

TEST_CASE("channel map validation errors") {
  const auto img = sample_image(8, 1);
  ChannelMap unknown;
  unknown.target_slots = 3;
  unknown.entries = {{"er", 0}};
  REQUIRE_THROWS_AS(channel_map_apply(img, unknown), DataError);

  ChannelMap dup;
  dup.target_slots = 3;
  dup.entries = {{"protein", 1}, {"nucleus", 1}};
  REQUIRE_THROWS_AS(dup.validate(), ConfigError);

  ChannelMap out_of_range;
  out_of_range.target_slots = 2;
  out_of_range.entries = {{"protein", 2}};
  REQUIRE_THROWS_AS(out_of_range.validate(), ConfigError);
}

TEST_CASE("channel map JSON and shorthand round trip") {
  const auto cm = ChannelMap::parse_shorthand("protein=1,nucleus=2", 4);
  REQUIRE(cm.target_slots == 4);
  REQUIRE(cm.entries.size() == 2);

  const auto j = cm.to_json();
  REQUIRE(j["target_slots"] == 4);
  REQUIRE(j["map"]["protein"] == 1);
  REQUIRE(j["map"]["nucleus"] == 2);

  const auto back = ChannelMap::from_json(j);
  REQUIRE(back.target_slots == 4);
  // json object iteration is alphabetical; compare as sets
  std::map<std::string, std::int64_t> a(cm.entries.begin(), cm.entries.end());
  std::map<std::string, std::int64_t> b(back.entries.begin(),
                                        back.entries.end());
  REQUIRE(a == b);

  REQUIRE_THROWS_AS(ChannelMap::parse_shorthand("protein", 4), ConfigError);
}

TEST_CASE("natural map presets") {
  const auto hpa = natural_map("opencell", "hpa-fov");
  REQUIRE(hpa.target_slots == 4);
  std::map<std::string, std::int64_t> m(hpa.entries.begin(), hpa.entries.end());
  REQUIRE(m["protein"] == 1);
  REQUIRE(m["nucleus"] == 2);

  const auto rgb = natural_map("opencell", "imagenet-rgb");
  REQUIRE(rgb.target_slots == 3);
  std::map<std::string, std::int64_t> r(rgb.entries.begin(), rgb.entries.end());
  REQUIRE(r["protein"] == 1);  // green
  REQUIRE(r["nucleus"] == 2);  // blue

  const auto self = natural_map("opencell", "opencell");
  std::map<std::string, std::int64_t> s(self.entries.begin(),
                                        self.entries.end());
  REQUIRE(s["protein"] == 0);
  REQUIRE(s["nucleus"] == 1);

  REQUIRE_THROWS_AS(natural_map("no-such-dataset", "hpa-fov"), ConfigError);

  register_dataset_channels("custom4",
                            {"microtubule", "protein", "nucleus", "er"});
  const auto custom = natural_map("opencell", "custom4");
  REQUIRE(custom.entries.size() == 2);
}

TEST_CASE("enumerate_maps counts and uniqueness") {
  const auto six = enumerate_maps(2, 3);
  REQUIRE(six.size() == 6);

  const auto twelve = enumerate_maps(2, 4);
  REQUIRE(twelve.size() == 12);

  const auto all = enumerate_maps(3, 3);
  REQUIRE(all.size() == 6);  // 3!

  REQUIRE_THROWS_AS(enumerate_maps(4, 3), ConfigError);

  std::set<std::string> seen;
  for (const auto& m : twelve) {
    m.validate();
    seen.insert(m.describe());
  }
  REQUIRE(seen.size() == twelve.size());
}

TEST_CASE("replicate_embed concatenates independent per-channel features") {
  BackboneConfig cfg;
  cfg.input_channels = 3;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 32;
  cfg.depth = 2;
  cfg.heads = 2;
  Vit<float> backbone(cfg, 5);

  auto img = sample_image(16, 9);
  const auto feat = replicate_embed(backbone, img);
  REQUIRE(feat.shape() == Shape{2 * 32});

  // segment i equals the embedding of channel i replicated into all slots
  for (std::int64_t ch = 0; ch < 2; ++ch) {
    Tensor<float> rep({3, 16, 16});
    for (std::int64_t s = 0; s < 3; ++s)
      std::copy(img.plane(ch), img.plane(ch) + 256, rep.data() + s * 256);
    const auto emb = backbone.embed_image(rep);
    for (std::int64_t j = 0; j < 32; ++j)
      REQUIRE(feat[ch * 32 + j] == emb[j]);
  }

  // scribbling on the other channel leaves segment 0 untouched
  const auto before = feat;
  Rng rng(33);
  for (std::int64_t i = 0; i < 256; ++i)
    img.planes[256 + i] = static_cast<float>(rng.uniform());
  const auto after = replicate_embed(backbone, img);
  for (std::int64_t j = 0; j < 32; ++j) REQUIRE(after[j] == before[j]);
  bool changed = false;
  for (std::int64_t j = 32; j < 64; ++j)
    if (after[j] != before[j]) changed = true;
  REQUIRE(changed);

  // identical channels give identical segments
  MultiChannelImage twin = sample_image(16, 2);
  std::copy(twin.plane(0), twin.plane(0) + 256, twin.planes.data() + 256);
  const auto tf = replicate_embed(backbone, twin);
  for (std::int64_t j = 0; j < 32; ++j) REQUIRE(tf[j] == tf[32 + j]);

  // spatial mismatch is a shape error
  const auto wrong = sample_image(32, 4);
  REQUIRE_THROWS_AS(replicate_embed(backbone, wrong), ShapeError);
}
