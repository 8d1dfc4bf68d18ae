#pragma once

// Condition-aware fusion: per-modality/per-level feature adapters, 7x7 window
// partitioning, CT-weighted addition (CAA), windowed condition-aware
// cross-attention (CA^2) assembled MWCA-style, the static fusion baselines,
// and training-time modality dropout.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "condfuse/condition.hpp"
#include "condfuse/nn.hpp"

namespace cf {

inline constexpr int kNumModalities = 4;

enum class Modality : int { kRgb = 0, kLidar = 1, kRadar = 2, kEvent = 3 };

inline const char* modality_name(int m) {
  static const char* names[4] = {"rgb", "lidar", "radar", "event"};
  return names[m];
}

enum class FusionKind { kMean, kRandom, kLearnedStatic, kCaa, kCa2 };
enum class CtTarget { kQ, kKv, kQkv, kNone };

inline std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::kMean: return "mean";
    case FusionKind::kRandom: return "random";
    case FusionKind::kLearnedStatic: return "learned_static";
    case FusionKind::kCaa: return "caa";
    case FusionKind::kCa2: return "ca2";
  }
  return "";
}
inline FusionKind fusion_kind_from(const std::string& s) {
  if (s == "mean") return FusionKind::kMean;
  if (s == "random") return FusionKind::kRandom;
  if (s == "learned_static") return FusionKind::kLearnedStatic;
  if (s == "caa") return FusionKind::kCaa;
  if (s == "ca2") return FusionKind::kCa2;
  op_fail("fusion.kind", "unknown strategy '" + s + "'");
}
inline std::string to_string(CtTarget t) {
  switch (t) {
    case CtTarget::kQ: return "q";
    case CtTarget::kKv: return "kv";
    case CtTarget::kQkv: return "qkv";
    case CtTarget::kNone: return "none";
  }
  return "";
}
inline CtTarget ct_target_from(const std::string& s) {
  if (s == "q") return CtTarget::kQ;
  if (s == "kv") return CtTarget::kKv;
  if (s == "qkv") return CtTarget::kQkv;
  if (s == "none") return CtTarget::kNone;
  op_fail("fusion.ct_target", "unknown variant '" + s + "'");
}

// Reporting-side value type; fusion math keeps weights in the graph.
struct FusionWeights {
  std::array<double, 4> w{0, 0, 0, 0};

  void validate() const {
    double sum = 0.0;
    for (double x : w) {
      require(x >= 0.0, "FusionWeights", "negative weight");
      sum += x;
    }
    require(std::fabs(sum - 1.0) <= 1e-9, "FusionWeights",
            "weights sum to " + std::to_string(sum));
  }
};

// ---------------------------------------------------------------------------
// adapters
// ---------------------------------------------------------------------------

// 2-layer channel MLP with 4x hidden reduction and a learnable residual blend:
// out = alpha * MLP(x) + (1 - alpha) * x, alpha = sigmoid(a).
struct Adapter {
  Linear fc1, fc2;
  Tensor blend;  // pre-sigmoid scalar, init 0 so alpha starts at 1/2

  static Adapter create(ParamStore& ps, const std::string& prefix, int64_t channels, Rng& rng) {
    require(channels % 4 == 0, "adapter_forward",
            "channel count " + std::to_string(channels) + " not divisible by 4");
    Adapter a;
    a.fc1 = Linear::create(ps, prefix + "/mlp/fc1", channels, channels / 4, rng);
    a.fc2 = Linear::create(ps, prefix + "/mlp/fc2", channels / 4, channels, rng);
    a.blend = ps.add_zeros(prefix + "/blend", {1});
    return a;
  }

  Tensor forward(const Tensor& feature_map) const {
    require(feature_map.ndim() == 3 && feature_map.dim(0) == fc1.w.dim(0), "adapter_forward",
            "expected [" + std::to_string(fc1.w.dim(0)) + ",H,W], got " +
                shape_str(feature_map.shape()));
    const int64_t c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
    Tensor tokens = transpose(reshape(feature_map, {c, h * w}), {1, 0});
    Tensor adapted = fc2.forward(gelu(fc1.forward(tokens)));
    Tensor alpha = sigmoid(blend);
    Tensor keep = sub(Tensor::full({1}, 1.0), alpha);
    Tensor blended = add(mul_scalar(adapted, alpha), mul_scalar(tokens, keep));
    return reshape(transpose(blended, {1, 0}), {c, h, w});
  }
};

// 4 modalities x 4 levels = 16 individual adapters.
struct AdapterBank {
  std::array<std::array<Adapter, 4>, 4> adapters;  // [modality][level]

  static AdapterBank create(ParamStore& ps, const std::string& prefix,
                            const std::array<int64_t, 4>& level_channels, Rng& rng) {
    AdapterBank bank;
    for (int m = 0; m < kNumModalities; ++m)
      for (int l = 0; l < 4; ++l)
        bank.adapters[static_cast<size_t>(m)][static_cast<size_t>(l)] = Adapter::create(
            ps, prefix + "/" + modality_name(m) + "/l" + std::to_string(l + 1),
            level_channels[static_cast<size_t>(l)], rng);
    return bank;
  }

  Tensor forward(const Tensor& feature_map, int modality, int level) const {
    return adapters[static_cast<size_t>(modality)][static_cast<size_t>(level)].forward(feature_map);
  }

  FeaturePyramid forward(const FeaturePyramid& pyramid, int modality) const {
    FeaturePyramid out;
    for (int l = 0; l < 4; ++l)
      out.levels[static_cast<size_t>(l)] = forward(pyramid.levels[static_cast<size_t>(l)], modality, l);
    return out;
  }
};

// ---------------------------------------------------------------------------
// window partitioning
// ---------------------------------------------------------------------------

inline constexpr int kWindowSize = 7;

struct WindowPadInfo {
  int64_t height = 0, width = 0;      // original dims
  int64_t padded_h = 0, padded_w = 0;
  int64_t tiles_y = 0, tiles_x = 0;
  int window = kWindowSize;

  int64_t count() const { return tiles_y * tiles_x; }
};

// [C,H,W] -> [Nw, window^2, C] channel-last tokens; H,W zero-padded up to
// multiples of the window, original dims recorded for the reverse pass.
inline std::pair<Tensor, WindowPadInfo> window_partition(const Tensor& map, int window = kWindowSize) {
  require(map.ndim() == 3, "window_partition", "expects [C,H,W], got " + shape_str(map.shape()));
  require(window >= 1, "window_partition", "window must be positive");
  const int64_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
  WindowPadInfo info;
  info.height = h;
  info.width = w;
  info.window = window;
  info.tiles_y = (h + window - 1) / window;
  info.tiles_x = (w + window - 1) / window;
  info.padded_h = info.tiles_y * window;
  info.padded_w = info.tiles_x * window;
  const int64_t nw = info.count();
  const int64_t tokens = static_cast<int64_t>(window) * window;
  std::vector<double> v(static_cast<size_t>(nw * tokens * c), 0.0);
  for (int64_t ty = 0; ty < info.tiles_y; ++ty)
    for (int64_t tx = 0; tx < info.tiles_x; ++tx) {
      const int64_t win = ty * info.tiles_x + tx;
      for (int wy = 0; wy < window; ++wy) {
        const int64_t y = ty * window + wy;
        if (y >= h) continue;
        for (int wx = 0; wx < window; ++wx) {
          const int64_t x = tx * window + wx;
          if (x >= w) continue;
          double* dst = v.data() + ((win * tokens) + (wy * window + wx)) * c;
          for (int64_t ch = 0; ch < c; ++ch) dst[ch] = map.data()[(ch * h + y) * w + x];
        }
      }
    }
  Tensor out = make_op("window_partition", {nw, tokens, c}, std::move(v), {map},
                       [info, c](Node& o) {
                         Node* in = o.inputs[0].get();
                         in->ensure_grad();
                         const int64_t tokens =
                             static_cast<int64_t>(info.window) * info.window;
                         for (int64_t ty = 0; ty < info.tiles_y; ++ty)
                           for (int64_t tx = 0; tx < info.tiles_x; ++tx) {
                             const int64_t win = ty * info.tiles_x + tx;
                             for (int wy = 0; wy < info.window; ++wy) {
                               const int64_t y = ty * info.window + wy;
                               if (y >= info.height) continue;
                               for (int wx = 0; wx < info.window; ++wx) {
                                 const int64_t x = tx * info.window + wx;
                                 if (x >= info.width) continue;
                                 const double* g =
                                     o.grad.data() + ((win * tokens) + (wy * info.window + wx)) * c;
                                 for (int64_t ch = 0; ch < c; ++ch)
                                   in->grad[static_cast<size_t>((ch * info.height + y) * info.width +
                                                                x)] += g[ch];
                               }
                             }
                           }
                       });
  return {out, info};
}

// Inverse of window_partition: padding tokens are discarded.
inline Tensor window_reverse(const Tensor& windows, const WindowPadInfo& info, int64_t channels) {
  const int64_t tokens = static_cast<int64_t>(info.window) * info.window;
  require(windows.ndim() == 3 && windows.dim(0) == info.count() && windows.dim(1) == tokens &&
              windows.dim(2) == channels,
          "window_reverse", "windows shape " + shape_str(windows.shape()) + " does not match pad info");
  std::vector<double> v(static_cast<size_t>(channels * info.height * info.width), 0.0);
  for (int64_t ty = 0; ty < info.tiles_y; ++ty)
    for (int64_t tx = 0; tx < info.tiles_x; ++tx) {
      const int64_t win = ty * info.tiles_x + tx;
      for (int wy = 0; wy < info.window; ++wy) {
        const int64_t y = ty * info.window + wy;
        if (y >= info.height) continue;
        for (int wx = 0; wx < info.window; ++wx) {
          const int64_t x = tx * info.window + wx;
          if (x >= info.width) continue;
          const double* src = windows.data() + ((win * tokens) + (wy * info.window + wx)) * channels;
          for (int64_t ch = 0; ch < channels; ++ch)
            v[static_cast<size_t>((ch * info.height + y) * info.width + x)] = src[ch];
        }
      }
    }
  return make_op("window_reverse", {channels, info.height, info.width}, std::move(v), {windows},
                 [info, channels](Node& o) {
                   Node* in = o.inputs[0].get();
                   in->ensure_grad();
                   const int64_t tokens = static_cast<int64_t>(info.window) * info.window;
                   for (int64_t ty = 0; ty < info.tiles_y; ++ty)
                     for (int64_t tx = 0; tx < info.tiles_x; ++tx) {
                       const int64_t win = ty * info.tiles_x + tx;
                       for (int wy = 0; wy < info.window; ++wy) {
                         const int64_t y = ty * info.window + wy;
                         if (y >= info.height) continue;
                         for (int wx = 0; wx < info.window; ++wx) {
                           const int64_t x = tx * info.window + wx;
                           if (x >= info.width) continue;
                           double* dst =
                               in->grad.data() + ((win * tokens) + (wy * info.window + wx)) * channels;
                           const double* g = o.grad.data();
                           for (int64_t ch = 0; ch < channels; ++ch)
                             dst[ch] += g[(ch * info.height + y) * info.width + x];
                         }
                       }
                     }
                 });
}

// ---------------------------------------------------------------------------
// weighted-addition fusion (CAA + static baselines)
// ---------------------------------------------------------------------------

namespace detail {

// fused level = sum of per-modality maps scaled by [1]-tensor weights
inline FeaturePyramid weighted_sum(const std::array<FeaturePyramid, 4>& pyramids,
                                   const std::vector<int>& active,
                                   const std::vector<Tensor>& weights) {
  FeaturePyramid fused;
  for (int l = 0; l < 4; ++l) {
    Tensor acc;
    for (size_t i = 0; i < active.size(); ++i) {
      Tensor term = mul_scalar(
          pyramids[static_cast<size_t>(active[i])].levels[static_cast<size_t>(l)], weights[i]);
      acc = acc.defined() ? add(acc, term) : term;
    }
    fused.levels[static_cast<size_t>(l)] = acc;
  }
  return fused;
}

inline void check_same_level_shapes(const std::array<FeaturePyramid, 4>& pyramids,
                                    const std::vector<int>& active, const char* op) {
  for (int l = 0; l < 4; ++l) {
    const Shape& ref = pyramids[static_cast<size_t>(active[0])].levels[static_cast<size_t>(l)].shape();
    for (int m : active)
      require(pyramids[static_cast<size_t>(m)].levels[static_cast<size_t>(l)].shape() == ref, op,
              "level " + std::to_string(l + 1) + " shape mismatch across modalities");
  }
}

}  // namespace detail

struct CaaResult {
  FeaturePyramid fused;
  Tensor weights_active;       // [|active|] softmax weights, in-graph
  FusionWeights weights_full;  // 4-slot view for reporting, inactive = 0
};

// One FC head predicts a weight per modality from the CT; a single weight
// vector is shared across all four levels. Zero-initialized: fusion starts at
// the exact mean and the routing differentiates as training provides signal,
// instead of saturating the softmax on random logits.
struct CaaFusion {
  Linear fc;  // D_ct -> 4

  static CaaFusion create(ParamStore& ps, const std::string& prefix, int64_t d_ct, Rng& rng) {
    (void)rng;
    CaaFusion c;
    c.fc = Linear::create_zero(ps, prefix + "/fc", d_ct, kNumModalities);
    return c;
  }

  CaaResult fuse(const std::array<FeaturePyramid, 4>& adapted, const Tensor& ct,
                 const std::vector<int>& active) const {
    require(!active.empty(), "caa_fuse", "no active modalities");
    detail::check_same_level_shapes(adapted, active, "caa_fuse");
    Tensor logits = reshape(fc.forward(reshape(ct, {1, ct.numel()})), {kNumModalities});
    std::vector<Tensor> picked;
    for (int m : active) picked.push_back(slice(logits, {m}, {1}));
    Tensor weights = softmax(picked.size() == 1 ? picked[0] : concat(picked, 0));
    std::vector<Tensor> per_mod;
    for (size_t i = 0; i < active.size(); ++i)
      per_mod.push_back(slice(weights, {static_cast<int64_t>(i)}, {1}));
    CaaResult out;
    out.fused = detail::weighted_sum(adapted, active, per_mod);
    out.weights_active = weights;
    for (size_t i = 0; i < active.size(); ++i)
      out.weights_full.w[static_cast<size_t>(active[i])] = weights.data()[i];
    return out;
  }
};

// mean / random / learned_static baselines share the weighted-sum path.
struct StaticFusion {
  Tensor logits;  // [4] learnable, used by learned_static only

  static StaticFusion create(ParamStore& ps, const std::string& prefix) {
    StaticFusion s;
    s.logits = ps.add_zeros(prefix + "/logits", {kNumModalities});
    return s;
  }

  CaaResult fuse(const std::array<FeaturePyramid, 4>& adapted, FusionKind kind,
                 const std::vector<int>& active, Rng& rng) const {
    require(kind == FusionKind::kMean || kind == FusionKind::kRandom ||
                kind == FusionKind::kLearnedStatic,
            "static_fuse", "kind must be mean, random or learned_static");
    require(!active.empty(), "static_fuse", "no active modalities");
    detail::check_same_level_shapes(adapted, active, "static_fuse");
    CaaResult out;
    std::vector<Tensor> per_mod;
    if (kind == FusionKind::kMean) {
      const double w = 1.0 / static_cast<double>(active.size());
      for (size_t i = 0; i < active.size(); ++i) per_mod.push_back(Tensor::full({1}, w));
      out.weights_active = Tensor::full({static_cast<int64_t>(active.size())}, w);
    } else if (kind == FusionKind::kRandom) {
      // fresh standard-normal draws through a softmax, every forward pass
      std::vector<double> draws(active.size());
      for (double& d : draws) d = rng.normal();
      const double mx = *std::max_element(draws.begin(), draws.end());
      double denom = 0.0;
      for (double& d : draws) {
        d = std::exp(d - mx);
        denom += d;
      }
      for (double& d : draws) d /= denom;
      for (double d : draws) per_mod.push_back(Tensor::full({1}, d));
      out.weights_active = Tensor::from(draws, {static_cast<int64_t>(active.size())});
    } else {
      std::vector<Tensor> picked;
      for (int m : active) picked.push_back(slice(logits, {m}, {1}));
      Tensor weights = softmax(picked.size() == 1 ? picked[0] : concat(picked, 0));
      for (size_t i = 0; i < active.size(); ++i)
        per_mod.push_back(slice(weights, {static_cast<int64_t>(i)}, {1}));
      out.weights_active = weights;
    }
    out.fused = detail::weighted_sum(adapted, active, per_mod);
    for (size_t i = 0; i < active.size(); ++i)
      out.weights_full.w[static_cast<size_t>(active[i])] = out.weights_active.data()[i];
    return out;
  }
};

// ---------------------------------------------------------------------------
// CA^2 windowed cross-attention fusion
// ---------------------------------------------------------------------------

// Q from [rgb tokens ; projected CT], K/V from the secondary window (or the CT
// appended to K/V for those variants); the CT query row is dropped afterwards
// so spatial dimensions are preserved.
inline Tensor ca2_window_attention(const Tensor& rgb_window, const Tensor& ct_projected,
                                   const Tensor& secondary_window, const MultiheadAttention& attn,
                                   CtTarget target) {
  require(rgb_window.ndim() == 2 && secondary_window.ndim() == 2, "ca2_window_attention",
          "expects [T,D] windows, got " + shape_str(rgb_window.shape()) + " and " +
              shape_str(secondary_window.shape()));
  require_same_shape("ca2_window_attention", rgb_window.shape(), secondary_window.shape());
  const int64_t t = rgb_window.dim(0), d = rgb_window.dim(1);
  require(ct_projected.ndim() == 2 && ct_projected.dim(0) == 1 && ct_projected.dim(1) == d,
          "ca2_window_attention", "projected CT must be [1," + std::to_string(d) + "], got " +
                                      shape_str(ct_projected.shape()));
  const bool ct_in_q = target == CtTarget::kQ || target == CtTarget::kQkv;
  const bool ct_in_kv = target == CtTarget::kKv || target == CtTarget::kQkv;
  Tensor queries = ct_in_q ? concat({rgb_window, ct_projected}, 0) : rgb_window;
  Tensor keys_values = ct_in_kv ? concat({secondary_window, ct_projected}, 0) : secondary_window;
  Tensor out = attn.forward(queries, keys_values);
  if (ct_in_q) out = slice(out, {0, 0}, {t, d});  // drop the CT row
  return out;
}

struct Ca2SecondaryBlock {
  MultiheadAttention attn;
  Linear proj_back;  // zero-initialized: fusion starts as the identity
};

struct Ca2Fusion {
  int window = kWindowSize;
  std::array<Linear, 4> ct_proj;  // per level, shared across secondaries
  std::array<std::array<Ca2SecondaryBlock, 3>, 4> blocks;  // [level][secondary-1]

  static Ca2Fusion create(ParamStore& ps, const std::string& prefix,
                          const std::array<int64_t, 4>& level_channels, int64_t d_ct, Rng& rng,
                          int num_heads = 1) {
    Ca2Fusion f;
    for (int l = 0; l < 4; ++l) {
      const int64_t c = level_channels[static_cast<size_t>(l)];
      const std::string lvl = prefix + "/l" + std::to_string(l + 1);
      f.ct_proj[static_cast<size_t>(l)] = Linear::create(ps, lvl + "/ct_proj", d_ct, c, rng);
      for (int s = 0; s < 3; ++s) {
        Ca2SecondaryBlock& blk = f.blocks[static_cast<size_t>(l)][static_cast<size_t>(s)];
        const std::string sec = lvl + "/" + modality_name(s + 1);
        blk.attn = MultiheadAttention::create(ps, sec + "/attn", {c, num_heads}, rng);
        blk.proj_back = Linear::create_zero(ps, sec + "/proj_back", c, c);
      }
    }
    return f;
  }

  // adapted[0] is RGB; secondaries attend in parallel and their projected
  // outputs sum residually onto the RGB level.
  FeaturePyramid fuse(const std::array<FeaturePyramid, 4>& adapted, const Tensor& ct,
                      CtTarget target, const std::vector<int>& active_secondaries) const {
    FeaturePyramid fused;
    for (int l = 0; l < 4; ++l) {
      const Tensor& rgb_level = adapted[0].levels[static_cast<size_t>(l)];
      const int64_t c = rgb_level.dim(0);
      if (active_secondaries.empty()) {
        fused.levels[static_cast<size_t>(l)] = rgb_level;
        continue;
      }
      for (int m : active_secondaries)
        require(adapted[static_cast<size_t>(m)].levels[static_cast<size_t>(l)].shape() ==
                    rgb_level.shape(),
                "mwca_ca2_fuse", "level " + std::to_string(l + 1) + " shape mismatch for " +
                                     modality_name(m));
      auto [rgb_windows, info] = window_partition(rgb_level, window);
      Tensor ct_l = ct_proj[static_cast<size_t>(l)].forward(reshape(ct, {1, ct.numel()}));
      const int64_t tokens = static_cast<int64_t>(window) * window;

      std::vector<Tensor> sec_windows;
      for (int m : active_secondaries)
        sec_windows.push_back(
            window_partition(adapted[static_cast<size_t>(m)].levels[static_cast<size_t>(l)], window)
                .first);

      std::vector<Tensor> out_windows;
      for (int64_t wi = 0; wi < info.count(); ++wi) {
        Tensor rgb_w = reshape(slice(rgb_windows, {wi, 0, 0}, {1, tokens, c}), {tokens, c});
        Tensor acc;
        for (size_t si = 0; si < active_secondaries.size(); ++si) {
          const Ca2SecondaryBlock& blk =
              blocks[static_cast<size_t>(l)][static_cast<size_t>(active_secondaries[si] - 1)];
          Tensor sec_w = reshape(slice(sec_windows[si], {wi, 0, 0}, {1, tokens, c}), {tokens, c});
          Tensor attn_out = ca2_window_attention(rgb_w, ct_l, sec_w, blk.attn, target);
          Tensor projected = blk.proj_back.forward(attn_out);
          acc = acc.defined() ? add(acc, projected) : projected;
        }
        out_windows.push_back(reshape(acc, {1, tokens, c}));
      }
      Tensor stacked = out_windows.size() == 1 ? out_windows[0] : concat(out_windows, 0);
      Tensor delta = window_reverse(stacked, info, c);
      fused.levels[static_cast<size_t>(l)] = add(rgb_level, delta);
    }
    return fused;
  }
};

// ---------------------------------------------------------------------------
// modality dropout
// ---------------------------------------------------------------------------

// Independently zero whole modality inputs with probability p. If the draw
// removes every active modality, RGB is restored: the condition token needs it.
inline std::array<Tensor, 4> modality_dropout(const std::array<Tensor, 4>& images, double p,
                                              Rng& rng, const std::vector<int>& active = {0, 1, 2, 3}) {
  require(p >= 0.0 && p <= 1.0, "modality_dropout", "drop rate " + std::to_string(p));
  std::array<bool, 4> dropped{false, false, false, false};
  bool all_dropped = true;
  for (int m : active) {
    dropped[static_cast<size_t>(m)] = rng.bernoulli(p);
    all_dropped = all_dropped && dropped[static_cast<size_t>(m)];
  }
  if (all_dropped) dropped[0] = false;
  std::array<Tensor, 4> out = images;
  for (int m : active)
    if (dropped[static_cast<size_t>(m)])
      out[static_cast<size_t>(m)] = Tensor::zeros(images[static_cast<size_t>(m)].shape());
  return out;
}

}  // namespace cf
