#pragma once

// Lightweight per-pixel semantic decoder over a fused pyramid, plus the
// combined segmentation + condition training objective.

#include <vector>

#include "condfuse/condition.hpp"
#include "condfuse/nn.hpp"

namespace cf {

// Upsample every level to the stride-4 grid, concatenate channels, mix with a
// 1x1 conv, refine with a 3x3 conv down to K classes, then upsample to the
// input resolution.
struct SegDecoder {
  int64_t hidden = 64;
  int64_t num_classes = 6;
  ConvParams mix;     // 1x1
  ConvParams refine;  // 3x3

  static SegDecoder create(ParamStore& ps, const std::string& prefix,
                           const std::array<int64_t, 4>& level_channels, int64_t num_classes,
                           Rng& rng, int64_t hidden = 64) {
    SegDecoder d;
    d.hidden = hidden;
    d.num_classes = num_classes;
    int64_t total = 0;
    for (int64_t c : level_channels) total += c;
    d.mix = ConvParams::create(ps, prefix + "/mix", hidden, total, 1, rng);
    d.refine = ConvParams::create(ps, prefix + "/refine", num_classes, hidden, 3, rng);
    return d;
  }

  Tensor decode(const FeaturePyramid& fused) const {
    const int64_t h1 = fused.levels[0].dim(1), w1 = fused.levels[0].dim(2);
    std::vector<Tensor> gathered;
    for (int l = 0; l < 4; ++l) {
      const Tensor& level = fused.levels[static_cast<size_t>(l)];
      require(level.ndim() == 3, "decode", "pyramid level must be [C,H,W]");
      require(h1 % level.dim(1) == 0 && w1 % level.dim(2) == 0, "decode",
              "level " + std::to_string(l + 1) + " dims " + shape_str(level.shape()) +
                  " incompatible with level 1 " + shape_str(fused.levels[0].shape()));
      const int factor = static_cast<int>(h1 / level.dim(1));
      require(w1 / level.dim(2) == factor, "decode", "anisotropic level scaling unsupported");
      gathered.push_back(factor == 1 ? level : upsample_nearest2d(level, factor));
    }
    Tensor stacked = concat(gathered, 0);
    Tensor mixed = gelu(conv2d(stacked, mix.w, mix.b, 1, 0));
    Tensor logits = conv2d(mixed, refine.w, refine.b, 1, 1);
    return upsample_nearest2d(logits, 4);
  }
};

// Per-pixel mean cross-entropy over [K,H,W] logits and a flat class-id map.
inline Tensor segmentation_loss(const Tensor& logits, const std::vector<uint8_t>& gt) {
  require(logits.ndim() == 3, "total_loss", "logits must be [K,H,W], got " + shape_str(logits.shape()));
  const int64_t k = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  require(static_cast<int64_t>(gt.size()) == plane, "total_loss",
          "ground truth has " + std::to_string(gt.size()) + " pixels for " + std::to_string(plane));
  std::vector<int64_t> targets(gt.begin(), gt.end());
  Tensor rows = transpose(reshape(logits, {k, plane}), {1, 0});
  return cross_entropy_mean(rows, targets);
}

// Batch objective: mean per-scene pixel cross-entropy plus the weighted
// condition-contrastive term. The contrastive part is omitted when its
// weight is zero (the condition-loss ablation) or no embeddings are given.
inline Tensor total_loss(const std::vector<Tensor>& logits_batch,
                         const std::vector<const std::vector<uint8_t>*>& gt_batch,
                         const Tensor& ct_batch, const Tensor& text_batch, const Tensor& temperature,
                         double lambda_cond,
                         const std::vector<Tensor>& attr_slots = {}) {
  require(!logits_batch.empty() && logits_batch.size() == gt_batch.size(), "total_loss",
          "batch size mismatch");
  Tensor ce;
  for (size_t i = 0; i < logits_batch.size(); ++i) {
    Tensor term = segmentation_loss(logits_batch[i], *gt_batch[i]);
    ce = ce.defined() ? add(ce, term) : term;
  }
  ce = scale(ce, 1.0 / static_cast<double>(logits_batch.size()));
  if (lambda_cond == 0.0 || !ct_batch.defined()) return ce;
  Tensor cond = full_condition_loss(ct_batch, text_batch, attr_slots, temperature);
  return add(ce, scale(cond, lambda_cond));
}

// Argmax with ties broken toward the lowest class id.
inline std::vector<int> predict_classes(const Tensor& logits) {
  const int64_t k = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  std::vector<int> pred(static_cast<size_t>(plane));
  for (int64_t i = 0; i < plane; ++i) {
    int best = 0;
    double best_v = logits.data()[i];
    for (int c = 1; c < k; ++c) {
      const double v = logits.data()[c * plane + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    pred[static_cast<size_t>(i)] = best;
  }
  return pred;
}

}  // namespace cf
