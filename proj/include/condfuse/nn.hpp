#pragma once

// Reusable blocks: linear/MLP, multi-head attention, pre-norm transformer
// layers, and the small shared 4-level conv backbone. Blocks are pure
// functions of (input, parameters); parameters live in a ParamStore.

#include <array>
#include <string>
#include <vector>

#include "condfuse/checkpoint.hpp"
#include "condfuse/rng.hpp"
#include "condfuse/tensor.hpp"

namespace cf {

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]

  static Linear create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng) {
    Linear l;
    l.w = ps.add_normal(prefix + "/w", {in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    l.b = ps.add_zeros(prefix + "/b", {out});
    return l;
  }
  // Zero weights and bias: used where fusion must start as an identity.
  static Linear create_zero(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out) {
    Linear l;
    l.w = ps.add_zeros(prefix + "/w", {in, out});
    l.b = ps.add_zeros(prefix + "/b", {out});
    return l;
  }

  Tensor forward(const Tensor& x) const { return add_rows(matmul(x, w), b); }
};

struct LayerNormBlock {
  Tensor gain;
  Tensor bias;

  static LayerNormBlock create(ParamStore& ps, const std::string& prefix, int64_t dim) {
    LayerNormBlock ln;
    ln.gain = ps.add_full(prefix + "/g", {dim}, 1.0);
    ln.bias = ps.add_zeros(prefix + "/b", {dim});
    return ln;
  }
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Two-layer GELU MLP with 4x expansion, the transformer default here.
struct Mlp {
  Linear fc1, fc2;

  static Mlp create(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t hidden, Rng& rng) {
    Mlp m;
    m.fc1 = Linear::create(ps, prefix + "/fc1", dim, hidden, rng);
    m.fc2 = Linear::create(ps, prefix + "/fc2", hidden, dim, rng);
    return m;
  }
  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

struct AttentionConfig {
  int64_t model_dim = 64;
  int num_heads = 1;

  int64_t head_dim() const { return model_dim / num_heads; }
  void validate() const {
    require(num_heads >= 1 && model_dim % num_heads == 0, "AttentionConfig",
            "model_dim " + std::to_string(model_dim) + " not divisible by heads " +
                std::to_string(num_heads));
  }
};

// Scaled dot-product cross-attention with per-head projections and an output
// projection. Self-attention is the query==key/value special case.
struct MultiheadAttention {
  AttentionConfig cfg;
  Linear q, k, v, o;

  static MultiheadAttention create(ParamStore& ps, const std::string& prefix, AttentionConfig cfg,
                                   Rng& rng) {
    cfg.validate();
    MultiheadAttention m;
    m.cfg = cfg;
    m.q = Linear::create(ps, prefix + "/q", cfg.model_dim, cfg.model_dim, rng);
    m.k = Linear::create(ps, prefix + "/k", cfg.model_dim, cfg.model_dim, rng);
    m.v = Linear::create(ps, prefix + "/v", cfg.model_dim, cfg.model_dim, rng);
    m.o = Linear::create(ps, prefix + "/o", cfg.model_dim, cfg.model_dim, rng);
    return m;
  }

  Tensor forward(const Tensor& query_tokens, const Tensor& key_value_tokens) const {
    require(query_tokens.ndim() == 2 && key_value_tokens.ndim() == 2, "multihead_cross_attention",
            "expects [Nq,D] and [Nk,D], got " + shape_str(query_tokens.shape()) + " and " +
                shape_str(key_value_tokens.shape()));
    require(query_tokens.dim(0) >= 1 && key_value_tokens.dim(0) >= 1, "multihead_cross_attention",
            "zero tokens");
    require(query_tokens.dim(1) == cfg.model_dim && key_value_tokens.dim(1) == cfg.model_dim,
            "multihead_cross_attention",
            "token dim mismatch " + shape_str(query_tokens.shape()) + " vs model_dim " +
                std::to_string(cfg.model_dim));
    const int64_t nq = query_tokens.dim(0), nk = key_value_tokens.dim(0);
    const int64_t dh = cfg.head_dim();
    Tensor qp = q.forward(query_tokens);
    Tensor kp = k.forward(key_value_tokens);
    Tensor vp = v.forward(key_value_tokens);
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.num_heads));
    for (int h = 0; h < cfg.num_heads; ++h) {
      Tensor qh = slice(qp, {0, h * dh}, {nq, dh});
      Tensor kh = slice(kp, {0, h * dh}, {nk, dh});
      Tensor vh = slice(vp, {0, h * dh}, {nk, dh});
      Tensor scores = scale(matmul(qh, transpose(kh, {1, 0})), inv_scale);
      Tensor attn = softmax(scores);
      heads.push_back(matmul(attn, vh));
    }
    Tensor merged = heads.size() == 1 ? heads[0] : concat(heads, 1);
    return o.forward(merged);
  }
};

struct EncoderLayer {
  LayerNormBlock ln1, ln2;
  MultiheadAttention attn;
  Mlp mlp;

  static EncoderLayer create(ParamStore& ps, const std::string& prefix, AttentionConfig cfg, Rng& rng) {
    EncoderLayer e;
    e.ln1 = LayerNormBlock::create(ps, prefix + "/ln1", cfg.model_dim);
    e.ln2 = LayerNormBlock::create(ps, prefix + "/ln2", cfg.model_dim);
    e.attn = MultiheadAttention::create(ps, prefix + "/attn", cfg, rng);
    e.mlp = Mlp::create(ps, prefix + "/mlp", cfg.model_dim, cfg.model_dim * 4, rng);
    return e;
  }

  Tensor forward(const Tensor& x) const {
    Tensor n1 = ln1.forward(x);
    Tensor y = add(x, attn.forward(n1, n1));
    return add(y, mlp.forward(ln2.forward(y)));
  }
};

struct DecoderLayer {
  LayerNormBlock ln_self, ln_cross, ln_mlp;
  MultiheadAttention self_attn, cross_attn;
  Mlp mlp;

  static DecoderLayer create(ParamStore& ps, const std::string& prefix, AttentionConfig cfg, Rng& rng) {
    DecoderLayer d;
    d.ln_self = LayerNormBlock::create(ps, prefix + "/ln_self", cfg.model_dim);
    d.ln_cross = LayerNormBlock::create(ps, prefix + "/ln_cross", cfg.model_dim);
    d.ln_mlp = LayerNormBlock::create(ps, prefix + "/ln_mlp", cfg.model_dim);
    d.self_attn = MultiheadAttention::create(ps, prefix + "/self", cfg, rng);
    d.cross_attn = MultiheadAttention::create(ps, prefix + "/cross", cfg, rng);
    d.mlp = Mlp::create(ps, prefix + "/mlp", cfg.model_dim, cfg.model_dim * 4, rng);
    return d;
  }

  Tensor forward(const Tensor& queries, const Tensor& memory) const {
    Tensor n1 = ln_self.forward(queries);
    Tensor x = add(queries, self_attn.forward(n1, n1));
    x = add(x, cross_attn.forward(ln_cross.forward(x), memory));
    return add(x, mlp.forward(ln_mlp.forward(x)));
  }
};

// Encoder stack over the sequence, decoder stack over learnable query seeds.
// Positional information, when wanted, is added by the caller.
inline Tensor transformer_encode_decode(const Tensor& sequence,
                                        const std::vector<EncoderLayer>& encoders,
                                        const std::vector<DecoderLayer>& decoders,
                                        const Tensor& query_seeds) {
  require(sequence.ndim() == 2 && sequence.dim(0) >= 1, "transformer_encode_decode",
          "empty sequence " + shape_str(sequence.shape()));
  require(query_seeds.ndim() == 2 && query_seeds.dim(0) >= 1, "transformer_encode_decode",
          "empty query seeds " + shape_str(query_seeds.shape()));
  Tensor memory = sequence;
  for (const auto& e : encoders) memory = e.forward(memory);
  Tensor q = query_seeds;
  for (const auto& d : decoders) q = d.forward(q, memory);
  return q;
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

struct BackboneConfig {
  std::array<int64_t, 4> level_channels{16, 32, 64, 128};
  int blocks_per_level = 1;
  // strides relative to the input are fixed at 4/8/16/32

  static constexpr std::array<int, 4> strides{4, 8, 16, 32};

  void validate() const {
    for (int i = 1; i < 4; ++i)
      require(level_channels[static_cast<size_t>(i)] > level_channels[static_cast<size_t>(i - 1)],
              "BackboneConfig", "level channels must strictly increase");
    require(blocks_per_level >= 1, "BackboneConfig", "blocks_per_level must be positive");
  }
};

struct FeaturePyramid {
  std::array<Tensor, 4> levels;
};

struct ConvParams {
  Tensor w, b;

  static ConvParams create(ParamStore& ps, const std::string& prefix, int64_t cout, int64_t cin,
                           int64_t k, Rng& rng) {
    ConvParams c;
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    c.w = ps.add_normal(prefix + "/w", {cout, cin, k, k}, rng, stddev);
    c.b = ps.add_zeros(prefix + "/b", {cout});
    return c;
  }
};

// conv -> GELU -> conv with a residual skip; no normalization at this scale.
struct ResidualBlock {
  ConvParams conv1, conv2;

  static ResidualBlock create(ParamStore& ps, const std::string& prefix, int64_t c, Rng& rng) {
    ResidualBlock r;
    r.conv1 = ConvParams::create(ps, prefix + "/conv1", c, c, 3, rng);
    r.conv2 = ConvParams::create(ps, prefix + "/conv2", c, c, 3, rng);
    return r;
  }
  Tensor forward(const Tensor& x) const {
    return add(x, conv2d(gelu(conv2d(x, conv1.w, conv1.b, 1, 1)), conv2.w, conv2.b, 1, 1));
  }
};

// Patchify stem (4x4 stride 4) then three stride-2 downsamples, residual
// blocks at every level. One parameter set serves all modalities.
struct Backbone {
  BackboneConfig cfg;
  ConvParams stem;
  std::array<ConvParams, 3> down;  // levels 2..4
  std::vector<ResidualBlock> blocks;  // level-major, blocks_per_level each

  static Backbone create(ParamStore& ps, const std::string& prefix, const BackboneConfig& cfg,
                         Rng& rng) {
    cfg.validate();
    Backbone b;
    b.cfg = cfg;
    b.stem = ConvParams::create(ps, prefix + "/stem", cfg.level_channels[0], 3, 4, rng);
    for (int l = 1; l < 4; ++l)
      b.down[static_cast<size_t>(l - 1)] =
          ConvParams::create(ps, prefix + "/l" + std::to_string(l + 1) + "/down",
                             cfg.level_channels[static_cast<size_t>(l)],
                             cfg.level_channels[static_cast<size_t>(l - 1)], 3, rng);
    for (int l = 0; l < 4; ++l)
      for (int k = 0; k < cfg.blocks_per_level; ++k)
        b.blocks.push_back(ResidualBlock::create(
            ps, prefix + "/l" + std::to_string(l + 1) + "/res" + std::to_string(k),
            cfg.level_channels[static_cast<size_t>(l)], rng));
    return b;
  }

  FeaturePyramid forward(const Tensor& image) const {
    require(image.ndim() == 3 && image.dim(0) == 3, "backbone_forward",
            "expects [3,H,W], got " + shape_str(image.shape()));
    require(image.dim(1) % 32 == 0 && image.dim(2) % 32 == 0, "backbone_forward",
            "H,W must be divisible by 32, got " + shape_str(image.shape()));
    FeaturePyramid p;
    Tensor x = conv2d(image, stem.w, stem.b, 4, 0);
    for (int k = 0; k < cfg.blocks_per_level; ++k) x = blocks[static_cast<size_t>(k)].forward(x);
    p.levels[0] = x;
    for (int l = 1; l < 4; ++l) {
      const ConvParams& d = down[static_cast<size_t>(l - 1)];
      x = conv2d(x, d.w, d.b, 2, 1);
      for (int k = 0; k < cfg.blocks_per_level; ++k)
        x = blocks[static_cast<size_t>(l * cfg.blocks_per_level + k)].forward(x);
      p.levels[static_cast<size_t>(l)] = x;
    }
    return p;
  }
};

}  // namespace cf
