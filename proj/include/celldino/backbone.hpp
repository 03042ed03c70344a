#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "celldino/ops.hpp"
#include "celldino/params.hpp"
#include "celldino/rng.hpp"
#include "celldino/tensor.hpp"

namespace celldino {

struct BackboneConfig {
  std::int64_t input_channels = 2;
  std::int64_t image_size = 64;
  std::int64_t patch_size = 4;
  std::int64_t embed_dim = 64;
  std::int64_t depth = 3;
  std::int64_t heads = 4;
  double mlp_ratio = 4.0;
  std::string preset = "custom";

  std::int64_t patches_per_side() const { return image_size / patch_size; }
  std::int64_t n_patches() const {
    return patches_per_side() * patches_per_side();
  }
  std::int64_t seq_len() const { return n_patches() + 1; }
  std::int64_t mlp_hidden() const {
    return static_cast<std::int64_t>(embed_dim * mlp_ratio);
  }

  void validate() const {
    if (input_channels < 1) throw ConfigError("backbone: input_channels < 1");
    if (image_size % patch_size != 0)
      throw ConfigError("backbone: image_size not divisible by patch_size");
    if (embed_dim % heads != 0)
      throw ConfigError("backbone: embed_dim not divisible by heads");
    if (depth < 1) throw ConfigError("backbone: depth < 1");
  }

  static BackboneConfig preset_config(const std::string& name,
                                      std::int64_t input_channels) {
    BackboneConfig c;
    c.preset = name;
    c.input_channels = input_channels;
    if (name == "vit-tiny/4") {
      c.embed_dim = 64;
      c.depth = 3;
      c.heads = 4;
      c.image_size = 64;
      c.patch_size = 4;
    } else if (name == "vit-small/8") {
      c.embed_dim = 384;
      c.depth = 12;
      c.heads = 6;
      c.image_size = 224;
      c.patch_size = 8;
    } else if (name == "vit-base/8") {
      c.embed_dim = 768;
      c.depth = 12;
      c.heads = 12;
      c.image_size = 224;
      c.patch_size = 8;
    } else if (name == "vit-base/16") {
      c.embed_dim = 768;
      c.depth = 12;
      c.heads = 12;
      c.image_size = 224;
      c.patch_size = 16;
    } else {
      throw ConfigError("unknown backbone preset: " + name);
    }
    return c;
  }

  nlohmann::json to_json() const {
    return {{"input_channels", input_channels}, {"image_size", image_size},
            {"patch_size", patch_size},         {"embed_dim", embed_dim},
            {"depth", depth},                   {"heads", heads},
            {"mlp_ratio", mlp_ratio},           {"preset", preset}};
  }

  static BackboneConfig from_json(const nlohmann::json& j) {
    BackboneConfig c;
    if (j.contains("preset") && j["preset"].get<std::string>() != "custom")
      c = preset_config(j["preset"].get<std::string>(),
                        j.value("input_channels", std::int64_t(2)));
    c.input_channels = j.value("input_channels", c.input_channels);
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.preset = j.value("preset", c.preset);
    c.validate();
    return c;
  }

  bool operator==(const BackboneConfig& o) const {
    return input_channels == o.input_channels && image_size == o.image_size &&
           patch_size == o.patch_size && embed_dim == o.embed_dim &&
           depth == o.depth && heads == o.heads && mlp_ratio == o.mlp_ratio;
  }
};

// image (C, H, W) -> (N, C*P*P) tokens in row-major patch order; each token
// is the flattened C x P x P patch.
template <class T>
Tensor<T> patchify(const Tensor<T>& image, std::int64_t patch) {
  if (image.ndim() != 3) throw ShapeError("patchify: expected (C,H,W)");
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h % patch != 0 || w % patch != 0)
    throw ShapeError("patchify: dims not divisible by patch size");
  const std::int64_t gy = h / patch, gx = w / patch;
  Tensor<T> out({gy * gx, c * patch * patch});
  for (std::int64_t ty = 0; ty < gy; ++ty)
    for (std::int64_t tx = 0; tx < gx; ++tx) {
      T* dst = out.data() + (ty * gx + tx) * c * patch * patch;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t py = 0; py < patch; ++py) {
          const T* src =
              image.data() + (ch * h + ty * patch + py) * w + tx * patch;
          for (std::int64_t px = 0; px < patch; ++px)
            dst[(ch * patch + py) * patch + px] = src[px];
        }
    }
  return out;
}

// Small Vision Transformer encoder: linear patch projection, class token,
// learnable positional embeddings, pre-norm blocks, final layer norm. The
// class-token row of the final norm output is the image embedding.
template <class T>
class Vit {
 public:
  BackboneConfig cfg;
  ParamStore<T> params;

  explicit Vit(BackboneConfig config) : cfg(config) {
    cfg.validate();
    register_params();
  }

  Vit(BackboneConfig config, std::uint64_t seed) : Vit(config) { init(seed); }

  void init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "backbone-init"));
    for (auto& p : params) {
      const bool is_bias = p.name.ends_with(".bias");
      const bool is_norm_gain = p.name.find("norm") != std::string::npos &&
                                p.name.ends_with(".weight");
      if (is_norm_gain) {
        p.value.fill(T(1));
      } else if (is_bias) {
        p.value.zero();
      } else {
        for (std::int64_t i = 0; i < p.value.numel(); ++i)
          p.value[i] = static_cast<T>(rng.trunc_normal(0.0, 0.02));
      }
    }
  }

  struct BlockCache {
    Tensor<T> x_in;
    ops::LayerNormCache<T> ln1;
    Tensor<T> ln1_out;
    ops::MhaCache<T> mha;
    Tensor<T> x_mid;
    ops::LayerNormCache<T> ln2;
    Tensor<T> ln2_out;
    Tensor<T> fc1_out;
    Tensor<T> gelu_out;
  };

  struct Cache {
    std::int64_t batch = 0;
    Tensor<T> patches;  // (B*N, C*P^2)
    std::vector<BlockCache> blocks;
    Tensor<T> x_last;  // input to the final norm
    ops::LayerNormCache<T> ln_f;
  };

  // images: (B, C, H, W) with H = W = cfg.image_size. Returns (B, D)
  // class-token embeddings. Pass a cache to enable backward.
  Tensor<T> forward(const Tensor<T>& images, Cache* cache) const {
    if (images.ndim() != 4) throw ShapeError("vit: expected (B,C,H,W)");
    if (images.dim(1) != cfg.input_channels)
      throw ShapeError("vit: channel count " + std::to_string(images.dim(1)) +
                       " does not match config " +
                       std::to_string(cfg.input_channels));
    if (images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size)
      throw ShapeError("vit: spatial dims " + std::to_string(images.dim(2)) +
                       "x" + std::to_string(images.dim(3)) +
                       " do not match config image_size " +
                       std::to_string(cfg.image_size));
    const std::int64_t b = images.dim(0);
    const std::int64_t n = cfg.n_patches(), s = cfg.seq_len();
    const std::int64_t d = cfg.embed_dim;
    const std::int64_t pdim = cfg.input_channels * cfg.patch_size * cfg.patch_size;

    Tensor<T> patches({b * n, pdim});
    parallel_for(b, [&](std::int64_t i) {
      Tensor<T> img({cfg.input_channels, cfg.image_size, cfg.image_size});
      std::copy(images.data() + i * img.numel(),
                images.data() + (i + 1) * img.numel(), img.data());
      const Tensor<T> p = patchify(img, cfg.patch_size);
      std::copy(p.data(), p.data() + p.numel(), patches.data() + i * n * pdim);
    });

    Tensor<T> tok = ops::linear_forward(patches, value(patch_w_), value(patch_b_));

    Tensor<T> x({b * s, d});
    const Tensor<T>& cls = value(cls_token_);
    const Tensor<T>& pos = value(pos_embed_);
    parallel_for(b, [&](std::int64_t i) {
      T* xr = x.data() + i * s * d;
      for (std::int64_t j = 0; j < d; ++j) xr[j] = cls[j] + pos[j];
      const T* tr = tok.data() + i * n * d;
      for (std::int64_t row = 0; row < n; ++row)
        for (std::int64_t j = 0; j < d; ++j)
          xr[(row + 1) * d + j] = tr[row * d + j] + pos[(row + 1) * d + j];
    });

    if (cache) {
      cache->batch = b;
      cache->patches = std::move(patches);
      cache->blocks.resize(static_cast<std::size_t>(cfg.depth));
    }

    for (std::int64_t l = 0; l < cfg.depth; ++l) {
      BlockCache tmp;
      BlockCache& bc = cache ? cache->blocks[static_cast<std::size_t>(l)] : tmp;
      const BlockIdx& ix = blocks_[static_cast<std::size_t>(l)];

      bc.x_in = x;
      bc.ln1_out = ops::layernorm_forward(bc.x_in, value(ix.ln1_w),
                                          value(ix.ln1_b), &bc.ln1);
      Tensor<T> attn = ops::mha_forward(bc.ln1_out, b, s, cfg.heads,
                                        value(ix.qkv_w), value(ix.qkv_b),
                                        value(ix.proj_w), value(ix.proj_b),
                                        cache ? &bc.mha : nullptr);
      bc.x_mid = bc.x_in;
      add_inplace(bc.x_mid, attn);

      bc.ln2_out = ops::layernorm_forward(bc.x_mid, value(ix.ln2_w),
                                          value(ix.ln2_b), &bc.ln2);
      bc.fc1_out = ops::linear_forward(bc.ln2_out, value(ix.fc1_w), value(ix.fc1_b));
      bc.gelu_out = ops::gelu_forward(bc.fc1_out);
      Tensor<T> mlp = ops::linear_forward(bc.gelu_out, value(ix.fc2_w), value(ix.fc2_b));
      x = bc.x_mid;
      add_inplace(x, mlp);
      if (!cache) bc = BlockCache{};  // drop eagerly in eval mode
    }

    Tensor<T> ln_out;
    if (cache) {
      cache->x_last = std::move(x);
      ln_out = ops::layernorm_forward(cache->x_last, value(norm_w_),
                                      value(norm_b_), &cache->ln_f);
    } else {
      ln_out = ops::layernorm_forward(x, value(norm_w_), value(norm_b_),
                                      (ops::LayerNormCache<T>*)nullptr);
    }

    Tensor<T> out({b, d});
    for (std::int64_t i = 0; i < b; ++i)
      std::copy(ln_out.data() + i * s * d, ln_out.data() + i * s * d + d,
                out.data() + i * d);
    return out;
  }

  // d_embed: (B, D) gradient at the class-token embeddings. Accumulates
  // parameter gradients; optionally returns the input-image gradient.
  void backward(const Tensor<T>& d_embed, const Cache& cache,
                Tensor<T>* d_images = nullptr) {
    const std::int64_t b = cache.batch;
    const std::int64_t n = cfg.n_patches(), s = cfg.seq_len();
    const std::int64_t d = cfg.embed_dim;

    Tensor<T> d_ln({b * s, d}, T(0));
    for (std::int64_t i = 0; i < b; ++i)
      std::copy(d_embed.data() + i * d, d_embed.data() + (i + 1) * d,
                d_ln.data() + i * s * d);

    Tensor<T> dx = ops::layernorm_backward(cache.x_last, value(norm_w_), d_ln,
                                           cache.ln_f, grad(norm_w_),
                                           grad(norm_b_));

    for (std::int64_t l = cfg.depth - 1; l >= 0; --l) {
      const BlockCache& bc = cache.blocks[static_cast<std::size_t>(l)];
      const BlockIdx& ix = blocks_[static_cast<std::size_t>(l)];

      // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
      Tensor<T> d_gelu = ops::linear_backward(bc.gelu_out, value(ix.fc2_w), dx,
                                              grad(ix.fc2_w), grad(ix.fc2_b));
      Tensor<T> d_fc1 = ops::gelu_backward(bc.fc1_out, d_gelu);
      Tensor<T> d_ln2 = ops::linear_backward(bc.ln2_out, value(ix.fc1_w), d_fc1,
                                             grad(ix.fc1_w), grad(ix.fc1_b));
      Tensor<T> d_mid = ops::layernorm_backward(bc.x_mid, value(ix.ln2_w),
                                                d_ln2, bc.ln2, grad(ix.ln2_w),
                                                grad(ix.ln2_b));
      add_inplace(d_mid, dx);  // residual path

      // x_mid = x_in + proj(attn(ln1(x_in)))
      Tensor<T> d_ln1 = ops::mha_backward(
          bc.ln1_out, b, s, cfg.heads, value(ix.qkv_w), value(ix.proj_w),
          bc.mha, d_mid, grad(ix.qkv_w), grad(ix.qkv_b), grad(ix.proj_w),
          grad(ix.proj_b));
      dx = ops::layernorm_backward(bc.x_in, value(ix.ln1_w), d_ln1, bc.ln1,
                                   grad(ix.ln1_w), grad(ix.ln1_b));
      add_inplace(dx, d_mid);  // residual path
    }

    // split into class-token, positional and patch-token gradients
    Tensor<T>& d_cls = grad(cls_token_);
    Tensor<T>& d_pos = grad(pos_embed_);
    Tensor<T> d_tok({b * n, d});
    for (std::int64_t i = 0; i < b; ++i) {
      const T* dxr = dx.data() + i * s * d;
      for (std::int64_t j = 0; j < d; ++j) {
        d_cls[j] += dxr[j];
        d_pos[j] += dxr[j];
      }
      for (std::int64_t row = 0; row < n; ++row)
        for (std::int64_t j = 0; j < d; ++j) {
          const T g = dxr[(row + 1) * d + j];
          d_pos[(row + 1) * d + j] += g;
          d_tok[(i * n + row) * d + j] = g;
        }
    }

    Tensor<T> d_patches = ops::linear_backward(
        cache.patches, value(patch_w_), d_tok, grad(patch_w_), grad(patch_b_));

    if (d_images) {
      *d_images = Tensor<T>({b, cfg.input_channels, cfg.image_size, cfg.image_size});
      const std::int64_t gx = cfg.patches_per_side();
      const std::int64_t p = cfg.patch_size;
      const std::int64_t h = cfg.image_size;
      parallel_for(b, [&](std::int64_t i) {
        T* img = d_images->data() + i * cfg.input_channels * h * h;
        const T* dp = d_patches.data() +
                      i * n * cfg.input_channels * p * p;
        for (std::int64_t t = 0; t < n; ++t) {
          const std::int64_t ty = t / gx, tx = t % gx;
          for (std::int64_t ch = 0; ch < cfg.input_channels; ++ch)
            for (std::int64_t py = 0; py < p; ++py)
              for (std::int64_t px = 0; px < p; ++px)
                img[(ch * h + ty * p + py) * h + tx * p + px] =
                    dp[t * cfg.input_channels * p * p + (ch * p + py) * p + px];
        }
      });
    }
  }

  // Embeds one (C, H, W) image in eval mode.
  Tensor<T> embed_image(const Tensor<T>& image) const {
    Tensor<T> batch =
        image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
    Tensor<T> out = forward(batch, nullptr);
    return out.reshaped({cfg.embed_dim});
  }

 private:
  struct BlockIdx {
    int ln1_w, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    int ln2_w, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  int patch_w_ = -1, patch_b_ = -1, cls_token_ = -1, pos_embed_ = -1;
  std::vector<BlockIdx> blocks_;
  int norm_w_ = -1, norm_b_ = -1;

  const Tensor<T>& value(int i) const { return params[i].value; }
  Tensor<T>& grad(int i) { return params[i].grad; }

  static void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    parallel_for(a.numel(), [&](std::int64_t i) { a[i] += b[i]; }, 4096);
  }

  void register_params() {
    const std::int64_t d = cfg.embed_dim;
    const std::int64_t pdim = cfg.input_channels * cfg.patch_size * cfg.patch_size;
    const std::int64_t hidden = cfg.mlp_hidden();
    patch_w_ = params.add("patch_embed.weight", {pdim, d});
    patch_b_ = params.add("patch_embed.bias", {d});
    cls_token_ = params.add("cls_token", {d});
    pos_embed_ = params.add("pos_embed", {cfg.seq_len(), d});
    for (std::int64_t l = 0; l < cfg.depth; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      BlockIdx ix;
      ix.ln1_w = params.add(p + "norm1.weight", {d});
      ix.ln1_b = params.add(p + "norm1.bias", {d});
      ix.qkv_w = params.add(p + "attn.qkv.weight", {d, 3 * d});
      ix.qkv_b = params.add(p + "attn.qkv.bias", {3 * d});
      ix.proj_w = params.add(p + "attn.proj.weight", {d, d});
      ix.proj_b = params.add(p + "attn.proj.bias", {d});
      ix.ln2_w = params.add(p + "norm2.weight", {d});
      ix.ln2_b = params.add(p + "norm2.bias", {d});
      ix.fc1_w = params.add(p + "mlp.fc1.weight", {d, hidden});
      ix.fc1_b = params.add(p + "mlp.fc1.bias", {hidden});
      ix.fc2_w = params.add(p + "mlp.fc2.weight", {hidden, d});
      ix.fc2_b = params.add(p + "mlp.fc2.bias", {d});
      blocks_.push_back(ix);
    }
    norm_w_ = params.add("norm.weight", {d});
    norm_b_ = params.add("norm.bias", {d});
  }
};

}  // namespace celldino
