#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "celldino/backbone.hpp"
#include "celldino/channel_adapt.hpp"
#include "celldino/checkpoint.hpp"
#include "celldino/image.hpp"
#include "celldino/optim.hpp"
#include "celldino/ops.hpp"

namespace celldino {

struct DinoConfig {
  double tau_s = 0.1;   // student temperature
  double tau_t = 0.04;  // teacher temperature (sharper)
  std::int64_t proj_dim = 1024;
  std::int64_t proj_hidden = 256;
  int n_local = 8;
  std::int64_t global_size = 64;
  double global_scale_min = 0.4, global_scale_max = 1.0;
  std::int64_t local_size = 32;
  double local_scale_min = 0.05, local_scale_max = 0.4;
  double flip_prob = 0.5;
  bool warp = false;  // mild elastic deformation
  double warp_max_px = 4.0;
  int epochs = 30;
  int batch_size = 16;
  double lambda_base = 0.996;  // EMA momentum, cosine ramp to 1.0
  bool centering = true;
  double center_momentum = 0.9;
  double lr = 5e-4;
  double lr_end = 1e-6;
  double warmup_frac = 0.1;
  double weight_decay = 0.04;

  void validate() const {
    if (!(tau_t > 0) || !(tau_t <= tau_s))
      throw ConfigError("dino: need 0 < tau_t <= tau_s");
    if (proj_dim < 2 || proj_hidden < 1) throw ConfigError("dino: bad head dims");
    if (n_local < 0) throw ConfigError("dino: n_local < 0");
    auto unit = [](double lo, double hi) {
      return lo > 0.0 && hi <= 1.0 && lo <= hi;
    };
    if (!unit(global_scale_min, global_scale_max) ||
        !unit(local_scale_min, local_scale_max))
      throw ConfigError("dino: scale ranges must be within (0,1]");
    if (local_size >= global_size)
      throw ConfigError("dino: local crop must be smaller than global crop");
    if (epochs < 1 || batch_size < 1) throw ConfigError("dino: bad loop sizes");
    if (lambda_base < 0.0 || lambda_base > 1.0)
      throw ConfigError("dino: lambda_base outside [0,1]");
  }

  nlohmann::json to_json() const {
    return {{"tau_s", tau_s},
            {"tau_t", tau_t},
            {"proj_dim", proj_dim},
            {"proj_hidden", proj_hidden},
            {"n_local", n_local},
            {"global_size", global_size},
            {"global_scale_min", global_scale_min},
            {"global_scale_max", global_scale_max},
            {"local_size", local_size},
            {"local_scale_min", local_scale_min},
            {"local_scale_max", local_scale_max},
            {"flip_prob", flip_prob},
            {"warp", warp},
            {"warp_max_px", warp_max_px},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lambda_base", lambda_base},
            {"centering", centering},
            {"center_momentum", center_momentum},
            {"lr", lr},
            {"lr_end", lr_end},
            {"warmup_frac", warmup_frac},
            {"weight_decay", weight_decay}};
  }

  static DinoConfig from_json(const nlohmann::json& j) {
    DinoConfig c;
    c.tau_s = j.value("tau_s", c.tau_s);
    c.tau_t = j.value("tau_t", c.tau_t);
    c.proj_dim = j.value("proj_dim", c.proj_dim);
    c.proj_hidden = j.value("proj_hidden", c.proj_hidden);
    c.n_local = j.value("n_local", c.n_local);
    c.global_size = j.value("global_size", c.global_size);
    c.global_scale_min = j.value("global_scale_min", c.global_scale_min);
    c.global_scale_max = j.value("global_scale_max", c.global_scale_max);
    c.local_size = j.value("local_size", c.local_size);
    c.local_scale_min = j.value("local_scale_min", c.local_scale_min);
    c.local_scale_max = j.value("local_scale_max", c.local_scale_max);
    c.flip_prob = j.value("flip_prob", c.flip_prob);
    c.warp = j.value("warp", c.warp);
    c.warp_max_px = j.value("warp_max_px", c.warp_max_px);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lambda_base = j.value("lambda_base", c.lambda_base);
    c.centering = j.value("centering", c.centering);
    c.center_momentum = j.value("center_momentum", c.center_momentum);
    c.lr = j.value("lr", c.lr);
    c.lr_end = j.value("lr_end", c.lr_end);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.validate();
    return c;
  }
};

// Two global views plus n_local smaller views of one source sample.
struct ViewSet {
  std::string source_id;
  std::vector<Tensor<float>> globals;  // exactly 2, (C, g, g)
  std::vector<Tensor<float>> locals;   // n_local, (C, l, l)

  std::size_t total() const { return globals.size() + locals.size(); }
};

namespace detail {

// Square random-resized crop: area fraction from [lo, hi], then bilinear
// resize to out_size. Degenerate windows are retried a few times.
inline Tensor<float> random_resized_crop(const Tensor<float>& planes,
                                         std::int64_t out_size, double lo,
                                         double hi, Rng& rng) {
  const std::int64_t h = planes.dim(1), w = planes.dim(2);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = rng.uniform(lo, hi) * double(h) * double(w);
    const std::int64_t side =
        static_cast<std::int64_t>(std::llround(std::sqrt(area)));
    if (side < 1 || side > h || side > w) continue;
    const std::int64_t top =
        static_cast<std::int64_t>(rng.uniform_index(std::uint64_t(h - side + 1)));
    const std::int64_t left =
        static_cast<std::int64_t>(rng.uniform_index(std::uint64_t(w - side + 1)));
    const auto window = img::crop(planes, top, left, side, side);
    return img::resize_bilinear(window, out_size, out_size);
  }
  throw DataError("random_resized_crop: no valid window after 10 attempts");
}

// Mild elastic deformation: a 4x4 grid of random displacements (bounded by
// max_px) bilinearly upsampled to a dense field.
inline Tensor<float> elastic_warp(const Tensor<float>& planes, double max_px,
                                  Rng& rng) {
  const std::int64_t c = planes.dim(0), h = planes.dim(1), w = planes.dim(2);
  constexpr std::int64_t g = 4;
  std::vector<double> dy(g * g), dx(g * g);
  for (auto& v : dy) v = rng.uniform(-max_px, max_px);
  for (auto& v : dx) v = rng.uniform(-max_px, max_px);
  auto field = [&](const std::vector<double>& grid, double y, double x) {
    const double gy = y / double(h - 1) * double(g - 1);
    const double gx = x / double(w - 1) * double(g - 1);
    const std::int64_t y0 = std::min<std::int64_t>(std::int64_t(gy), g - 2);
    const std::int64_t x0 = std::min<std::int64_t>(std::int64_t(gx), g - 2);
    const double fy = gy - double(y0), fx = gx - double(x0);
    return grid[y0 * g + x0] * (1 - fy) * (1 - fx) +
           grid[y0 * g + x0 + 1] * (1 - fy) * fx +
           grid[(y0 + 1) * g + x0] * fy * (1 - fx) +
           grid[(y0 + 1) * g + x0 + 1] * fy * fx;
  };
  Tensor<float> out(planes.shape());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double sy = std::clamp(double(y) + field(dy, y, x), 0.0, double(h - 1));
        const double sx = std::clamp(double(x) + field(dx, y, x), 0.0, double(w - 1));
        const std::int64_t y0 = std::int64_t(sy), x0 = std::int64_t(sx);
        const std::int64_t y1 = std::min(y0 + 1, h - 1);
        const std::int64_t x1 = std::min(x0 + 1, w - 1);
        const double fy = sy - double(y0), fx = sx - double(x0);
        const float* p = planes.data() + ch * h * w;
        out.data()[(ch * h + y) * w + x] = static_cast<float>(
            p[y0 * w + x0] * (1 - fy) * (1 - fx) + p[y0 * w + x1] * (1 - fy) * fx +
            p[y1 * w + x0] * fy * (1 - fx) + p[y1 * w + x1] * fy * fx);
      }
  return out;
}

inline Tensor<float> one_view(const Tensor<float>& planes, std::int64_t size,
                              double lo, double hi, const DinoConfig& cfg,
                              Rng& rng) {
  Tensor<float> v = random_resized_crop(planes, size, lo, hi, rng);
  if (rng.bernoulli(cfg.flip_prob)) img::flip_horizontal(v);
  if (rng.bernoulli(cfg.flip_prob)) img::flip_vertical(v);
  if (cfg.warp) v = elastic_warp(v, cfg.warp_max_px, rng);
  return v;
}

}  // namespace detail

// 2 global + n_local local views; deterministic under a fixed seed.
inline ViewSet make_views(const MultiChannelImage& image, const DinoConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  if (image.height() < 2 || image.width() < 2)
    throw DataError("make_views: image too small");
  Rng rng(seed);
  ViewSet vs;
  vs.source_id = image.id;
  for (int i = 0; i < 2; ++i)
    vs.globals.push_back(detail::one_view(image.planes, cfg.global_size,
                                          cfg.global_scale_min,
                                          cfg.global_scale_max, cfg, rng));
  for (int i = 0; i < cfg.n_local; ++i)
    vs.locals.push_back(detail::one_view(image.planes, cfg.local_size,
                                         cfg.local_scale_min,
                                         cfg.local_scale_max, cfg, rng));
  return vs;
}

// Projection head: 3-layer MLP (GELU) mapping the backbone embedding to the
// K-dimensional space of the self-distillation loss. Discarded after
// training.
template <class T>
class DinoHead {
 public:
  ParamStore<T> params;

  DinoHead(std::int64_t in_dim, std::int64_t hidden, std::int64_t out_dim)
      : in_(in_dim), hidden_(hidden), out_(out_dim) {
    fc1_w_ = params.add("head.fc1.weight", {in_, hidden_});
    fc1_b_ = params.add("head.fc1.bias", {hidden_});
    fc2_w_ = params.add("head.fc2.weight", {hidden_, hidden_});
    fc2_b_ = params.add("head.fc2.bias", {hidden_});
    fc3_w_ = params.add("head.fc3.weight", {hidden_, out_});
    fc3_b_ = params.add("head.fc3.bias", {out_});
  }

  DinoHead(std::int64_t in_dim, std::int64_t hidden, std::int64_t out_dim,
           std::uint64_t seed)
      : DinoHead(in_dim, hidden, out_dim) {
    init(seed);
  }

  void init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "dino-head-init"));
    for (auto& p : params) {
      if (p.name.ends_with(".bias")) {
        p.value.zero();
      } else {
        for (std::int64_t i = 0; i < p.value.numel(); ++i)
          p.value[i] = static_cast<T>(rng.trunc_normal(0.0, 0.02));
      }
    }
  }

  struct Cache {
    Tensor<T> x, fc1, g1, fc2, g2;
  };

  // x: (B, in) -> (B, K)
  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (x.dim(1) != in_) throw ShapeError("dino head: input dim mismatch");
    Tensor<T> fc1 = ops::linear_forward(x, params[fc1_w_].value, params[fc1_b_].value);
    Tensor<T> g1 = ops::gelu_forward(fc1);
    Tensor<T> fc2 = ops::linear_forward(g1, params[fc2_w_].value, params[fc2_b_].value);
    Tensor<T> g2 = ops::gelu_forward(fc2);
    Tensor<T> out = ops::linear_forward(g2, params[fc3_w_].value, params[fc3_b_].value);
    if (cache) {
      cache->x = x;
      cache->fc1 = std::move(fc1);
      cache->g1 = std::move(g1);
      cache->fc2 = std::move(fc2);
      cache->g2 = std::move(g2);
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& d_out, const Cache& cache) {
    Tensor<T> d_g2 = ops::linear_backward(cache.g2, params[fc3_w_].value, d_out,
                                          params[fc3_w_].grad, params[fc3_b_].grad);
    Tensor<T> d_fc2 = ops::gelu_backward(cache.fc2, d_g2);
    Tensor<T> d_g1 = ops::linear_backward(cache.g1, params[fc2_w_].value, d_fc2,
                                          params[fc2_w_].grad, params[fc2_b_].grad);
    Tensor<T> d_fc1 = ops::gelu_backward(cache.fc1, d_g1);
    return ops::linear_backward(cache.x, params[fc1_w_].value, d_fc1,
                                params[fc1_w_].grad, params[fc1_b_].grad);
  }

  std::int64_t out_dim() const { return out_; }
  std::int64_t in_dim() const { return in_; }

 private:
  std::int64_t in_, hidden_, out_;
  int fc1_w_, fc1_b_, fc2_w_, fc2_b_, fc3_w_, fc3_b_;
};

// Self-distillation loss: sum over global views x and all other views x' of
// H(P_t(x), P_s(x')), exactly 2*(|V|-1) terms. Teacher probabilities use
// tau_t after optional center subtraction; gradients flow only through the
// student logits.
template <class T>
struct DinoLossResult {
  T loss = 0;
  std::vector<Tensor<T>> d_student;  // per view, same shapes as inputs
  std::int64_t n_terms = 0;
};

template <class T>
DinoLossResult<T> dino_loss(const std::vector<Tensor<T>>& teacher_logits,
                            const std::vector<Tensor<T>>& student_logits,
                            const DinoConfig& cfg,
                            const Tensor<T>* center = nullptr) {
  if (teacher_logits.size() != 2)
    throw DataError("dino_loss: teacher must see exactly the 2 global views");
  if (student_logits.size() < 2)
    throw DataError("dino_loss: need at least the 2 global student views");
  const std::int64_t k = teacher_logits[0].numel();

  std::vector<Tensor<T>> p_t;
  for (const auto& z : teacher_logits) {
    if (z.numel() != k) throw ShapeError("dino_loss: logit size mismatch");
    Tensor<T> shifted = z;
    if (center) {
      if (center->numel() != k)
        throw ShapeError("dino_loss: center size mismatch");
      for (std::int64_t i = 0; i < k; ++i) shifted[i] -= (*center)[i];
    }
    p_t.push_back(ops::softmax_temp(shifted, static_cast<T>(cfg.tau_t)));
  }

  std::vector<Tensor<T>> p_s;
  for (const auto& z : student_logits) {
    if (z.numel() != k) throw ShapeError("dino_loss: logit size mismatch");
    p_s.push_back(ops::softmax_temp(z, static_cast<T>(cfg.tau_s)));
  }

  DinoLossResult<T> r;
  for (const auto& z : student_logits)
    r.d_student.emplace_back(z.shape(), T(0));

  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t v = 0; v < student_logits.size(); ++v) {
      if (v == g) continue;  // views share indexing: 0,1 are the globals
      r.loss += ops::cross_entropy_soft(p_t[g], p_s[v]);
      // d/dz H(p_t, softmax(z/tau_s)) = (p_s - p_t) / tau_s
      Tensor<T>& dz = r.d_student[v];
      for (std::int64_t i = 0; i < k; ++i)
        dz[i] += (p_s[v][i] - p_t[g][i]) / static_cast<T>(cfg.tau_s);
      ++r.n_terms;
    }
  }
  return r;
}

struct TraceRow {
  int epoch;
  std::int64_t step;
  double loss;
  double lr;
  double lambda;
};

inline void write_trace_csv(const std::filesystem::path& path,
                            const std::vector<TraceRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write trace: " + path.string());
  f << "epoch,step,loss,lr,lambda\n";
  f.precision(10);
  for (const auto& r : rows)
    f << r.epoch << "," << r.step << "," << r.loss << "," << r.lr << ","
      << r.lambda << "\n";
}

struct SslResult {
  BackboneConfig backbone_cfg;
  ParamStore<float> teacher_backbone;  // heads dropped
  std::vector<TraceRow> trace;
  std::vector<double> epoch_loss;
};

// DINO training loop. Per step: multi-crop views, student forward on all
// views, teacher forward on the globals, self-distillation loss, AdamW step
// on the student (backbone + head), EMA teacher update with the ramped
// momentum, optional centering update. Deterministic under a fixed seed.
class SslTrainer {
 public:
  SslTrainer(BackboneConfig bcfg, DinoConfig cfg, std::uint64_t seed)
      : bcfg_(bcfg),
        cfg_(cfg),
        seed_(seed),
        student_(bcfg, seed),
        teacher_(bcfg),
        student_head_(bcfg.embed_dim, cfg.proj_hidden, cfg.proj_dim, seed),
        teacher_head_(bcfg.embed_dim, cfg.proj_hidden, cfg.proj_dim),
        center_({cfg.proj_dim}, 0.0f) {
    cfg_.validate();
    if (cfg_.global_size != bcfg_.image_size)
      throw ConfigError("ssl: global crop size must match backbone image size");
    teacher_.params.copy_values_from(student_.params);
    teacher_head_.params.copy_values_from(student_head_.params);
  }

  // Fine-tuning: both student and teacher start from the checkpoint.
  void load_init(const std::filesystem::path& ckpt_dir) {
    const auto config_json = checkpoint::load_into(ckpt_dir, student_.params);
    const auto loaded = BackboneConfig::from_json(config_json);
    if (!(loaded == bcfg_))
      throw ConfigError("ssl init checkpoint config does not match: " +
                        ckpt_dir.string());
    teacher_.params.copy_values_from(student_.params);
  }

  SslResult train(const std::vector<MultiChannelImage>& dataset,
                  const std::optional<ChannelMap>& adapter) {
    if (dataset.empty()) throw DataError("ssl_train: empty dataset");
    const std::int64_t n = static_cast<std::int64_t>(dataset.size());
    const std::int64_t steps_per_epoch =
        (n + cfg_.batch_size - 1) / cfg_.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg_.epochs;

    Schedule lambda_sched{ScheduleKind::CosineRamp, cfg_.lambda_base, 1.0,
                          total_steps};
    WarmupCosine lr_sched{cfg_.lr, cfg_.lr_end,
                          static_cast<std::int64_t>(cfg_.warmup_frac *
                                                    double(total_steps)),
                          total_steps};

    AdamW<float> opt_backbone({cfg_.lr, cfg_.weight_decay, 0.9, 0.999, 1e-8});
    AdamW<float> opt_head(opt_backbone.cfg);
    opt_backbone.attach(student_.params);
    opt_head.attach(student_head_.params);

    SslResult result;
    result.backbone_cfg = bcfg_;

    const int v_total = 2 + cfg_.n_local;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::vector<std::int64_t> order(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      Rng shuffle_rng(derive_seed(seed_, "epoch-order", std::uint64_t(epoch)));
      for (std::int64_t i = n - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)],
                  order[static_cast<std::size_t>(
                      shuffle_rng.uniform_index(std::uint64_t(i + 1)))]);

      double epoch_loss_sum = 0.0;
      std::int64_t epoch_batches = 0;
      for (std::int64_t base = 0; base < n; base += cfg_.batch_size) {
        const std::int64_t bsz = std::min<std::int64_t>(cfg_.batch_size, n - base);
        const double lr_now = lr_sched.value(step);
        const double lambda_now = lambda_sched.value(step);

        // views for the batch, all resized to the backbone input size
        std::vector<Tensor<float>> views;  // bsz * v_total entries
        views.reserve(static_cast<std::size_t>(bsz * v_total));
        for (std::int64_t bi = 0; bi < bsz; ++bi) {
          const auto& sample = dataset[static_cast<std::size_t>(
              order[static_cast<std::size_t>(base + bi)])];
          MultiChannelImage adapted;
          const MultiChannelImage* input = &sample;
          if (adapter) {
            adapted.id = sample.id;
            adapted.planes = channel_map_apply(sample, *adapter);
            adapted.channels.resize(
                static_cast<std::size_t>(adapter->target_slots));
            input = &adapted;
          }
          if (input->n_channels() != bcfg_.input_channels)
            throw ShapeError("ssl_train: sample " + sample.id + " has " +
                             std::to_string(input->n_channels()) +
                             " channels, backbone expects " +
                             std::to_string(bcfg_.input_channels) +
                             " (needs a channel adapter?)");
          const std::uint64_t vseed = derive_seed(
              seed_, "views", std::uint64_t(epoch) * std::uint64_t(n) +
                                  std::uint64_t(order[static_cast<std::size_t>(
                                      base + bi)]));
          ViewSet vs = make_views(*input, cfg_, vseed);
          for (auto& g : vs.globals) views.push_back(std::move(g));
          for (auto& l : vs.locals)
            views.push_back(
                img::resize_bilinear(l, bcfg_.image_size, bcfg_.image_size));
        }

        const double loss = train_step(views, bsz, v_total);
        if (!std::isfinite(loss))
          throw NumericError("ssl_train: non-finite loss at step " +
                             std::to_string(step) + " (lambda=" +
                             std::to_string(lambda_now) + ", lr=" +
                             std::to_string(lr_now) + ")");

        opt_backbone.cfg.lr = lr_now;
        opt_head.cfg.lr = lr_now;
        opt_backbone.step(student_.params);
        opt_head.step(student_head_.params);
        ema_update(teacher_.params, student_.params, lambda_now);
        ema_update(teacher_head_.params, student_head_.params, lambda_now);

        result.trace.push_back({epoch, step, loss, lr_now, lambda_now});
        epoch_loss_sum += loss;
        ++epoch_batches;
        ++step;
      }
      result.epoch_loss.push_back(epoch_loss_sum / double(epoch_batches));
    }

    result.teacher_backbone = teacher_.params;
    return result;
  }

  const Vit<float>& teacher() const { return teacher_; }
  const Vit<float>& student() const { return student_; }
  Vit<float>& mutable_teacher() { return teacher_; }
  const DinoHead<float>& teacher_head() const { return teacher_head_; }

 private:
  // One optimizer-ready step over a prepared view batch: fills gradients and
  // returns the batch-mean loss. Views are ordered sample-major, the first
  // two views of each sample are the globals. Samples are processed in
  // cache-bounded chunks; gradients accumulate across chunks in a fixed
  // order, so the result does not depend on the chunk size.
  double train_step(const std::vector<Tensor<float>>& views, std::int64_t bsz,
                    int v_total) {
    const std::int64_t k = cfg_.proj_dim;
    const std::int64_t img_elems =
        bcfg_.input_channels * bcfg_.image_size * bcfg_.image_size;

    student_.params.zero_grads();
    student_head_.params.zero_grads();

    // teacher forward on the 2 global views per sample
    Tensor<float> teacher_batch({bsz * 2, bcfg_.input_channels,
                                 bcfg_.image_size, bcfg_.image_size});
    for (std::int64_t bi = 0; bi < bsz; ++bi)
      for (int g = 0; g < 2; ++g)
        std::copy(views[static_cast<std::size_t>(bi * v_total + g)].data(),
                  views[static_cast<std::size_t>(bi * v_total + g)].data() +
                      img_elems,
                  teacher_batch.data() + (bi * 2 + g) * img_elems);
    const Tensor<float> t_embed = teacher_.forward(teacher_batch, nullptr);
    const Tensor<float> t_logits = teacher_head_.forward(t_embed, nullptr);

    const std::int64_t samples_per_chunk =
        std::max<std::int64_t>(1, kMicroBatchViews / v_total);
    double loss_sum = 0.0;
    const float inv_b = 1.0f / float(bsz);

    for (std::int64_t s0 = 0; s0 < bsz; s0 += samples_per_chunk) {
      const std::int64_t sc = std::min(samples_per_chunk, bsz - s0);
      const std::int64_t count = sc * v_total;
      Tensor<float> chunk({count, bcfg_.input_channels, bcfg_.image_size,
                           bcfg_.image_size});
      for (std::int64_t i = 0; i < count; ++i)
        std::copy(
            views[static_cast<std::size_t>(s0 * v_total + i)].data(),
            views[static_cast<std::size_t>(s0 * v_total + i)].data() + img_elems,
            chunk.data() + i * img_elems);

      typename Vit<float>::Cache vit_cache;
      typename DinoHead<float>::Cache head_cache;
      const Tensor<float> e = student_.forward(chunk, &vit_cache);
      const Tensor<float> z = student_head_.forward(e, &head_cache);

      Tensor<float> dz({count, k});
      for (std::int64_t si = 0; si < sc; ++si) {
        std::vector<Tensor<float>> tl, sl;
        for (int g = 0; g < 2; ++g) {
          Tensor<float> row({k});
          std::copy(t_logits.data() + ((s0 + si) * 2 + g) * k,
                    t_logits.data() + ((s0 + si) * 2 + g + 1) * k, row.data());
          tl.push_back(std::move(row));
        }
        for (int v = 0; v < v_total; ++v) {
          Tensor<float> row({k});
          std::copy(z.data() + (si * v_total + v) * k,
                    z.data() + (si * v_total + v + 1) * k, row.data());
          sl.push_back(std::move(row));
        }
        const auto r =
            dino_loss<float>(tl, sl, cfg_, cfg_.centering ? &center_ : nullptr);
        loss_sum += double(r.loss);
        for (int v = 0; v < v_total; ++v)
          for (std::int64_t i = 0; i < k; ++i)
            dz.at2(si * v_total + v, i) =
                r.d_student[static_cast<std::size_t>(v)][i] * inv_b;
      }

      const Tensor<float> d_embed = student_head_.backward(dz, head_cache);
      student_.backward(d_embed, vit_cache);
    }

    // centering update from this batch's teacher logits
    if (cfg_.centering) {
      const float m = static_cast<float>(cfg_.center_momentum);
      for (std::int64_t i = 0; i < k; ++i) {
        float mean = 0.0f;
        for (std::int64_t r = 0; r < bsz * 2; ++r) mean += t_logits.at2(r, i);
        mean /= float(bsz * 2);
        center_[i] = m * center_[i] + (1.0f - m) * mean;
      }
    }

    return loss_sum / double(bsz);
  }

  static constexpr std::int64_t kMicroBatchViews = 24;

  BackboneConfig bcfg_;
  DinoConfig cfg_;
  std::uint64_t seed_;
  Vit<float> student_;
  Vit<float> teacher_;
  DinoHead<float> student_head_;
  DinoHead<float> teacher_head_;
  Tensor<float> center_;
};

}  // namespace celldino
