#pragma once

// The assembled condition-aware fusion model: shared (or per-modality)
// backbone, adapter bank, CT generation with text supervision, one of five
// fusion strategies, and the per-pixel decoder.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "condfuse/condition.hpp"
#include "condfuse/fusion.hpp"
#include "condfuse/nn.hpp"
#include "condfuse/scenes.hpp"
#include "condfuse/seghead.hpp"

namespace cf {

struct ModelConfig {
  BackboneConfig backbone;
  int64_t input_hw = 32;
  int64_t d_ct = 64;
  int64_t decoder_hidden = 64;
  int num_classes = kNumClasses;
  FusionKind fusion = FusionKind::kCa2;
  CtTarget ct_target = CtTarget::kQ;
  bool shared_backbone = true;
  bool use_adapters = true;
  uint32_t modality_mask = 0b1111;  // bit m: modality m participates
  int ca2_heads = 1;

  bool condition_aware() const {
    return fusion == FusionKind::kCaa || fusion == FusionKind::kCa2;
  }
  std::vector<int> active_modalities() const {
    std::vector<int> out;
    for (int m = 0; m < kNumModalities; ++m)
      if (modality_mask & (1u << m)) out.push_back(m);
    return out;
  }
  std::vector<int> active_secondaries() const {
    std::vector<int> out;
    for (int m = 1; m < kNumModalities; ++m)
      if (modality_mask & (1u << m)) out.push_back(m);
    return out;
  }
  void validate() const {
    backbone.validate();
    require(modality_mask & 1u, "ModelConfig", "modality mask must include RGB");
    require(input_hw >= 32 && input_hw % 32 == 0, "ModelConfig",
            "input H,W must be divisible by 32");
    require(d_ct >= 1 && decoder_hidden >= 1 && num_classes >= 2, "ModelConfig", "bad dimensions");
  }
};

class FusionModel {
 public:
  FusionModel(const ModelConfig& cfg, uint64_t seed)
      : cfg_(cfg), vocab_(Vocabulary::template_lexicon()) {
    cfg_.validate();
    Rng rng = Rng(seed).fork("init");
    if (cfg_.shared_backbone) {
      backbones_.push_back(Backbone::create(ps_, "backbone/shared", cfg_.backbone, rng));
    } else {
      for (int m = 0; m < kNumModalities; ++m)
        backbones_.push_back(Backbone::create(
            ps_, std::string("backbone/") + modality_name(m), cfg_.backbone, rng));
    }
    if (cfg_.use_adapters)
      adapters_ = AdapterBank::create(ps_, "adapter", cfg_.backbone.level_channels, rng);
    if (cfg_.condition_aware()) {
      const int64_t grid = (cfg_.input_hw / 32) * (cfg_.input_hw / 32);
      ct_gen_ = CtGenerator::create(ps_, "ct", cfg_.backbone.level_channels[3], grid, cfg_.d_ct, rng);
      text_ = TextEncoder::create(ps_, "text", vocab_.size(), cfg_.d_ct, rng);
      log_tau_ = ps_.add_full("cond/log_tau", {1}, std::log(kDefaultTemperature));
    }
    switch (cfg_.fusion) {
      case FusionKind::kCaa:
        caa_ = CaaFusion::create(ps_, "fusion/caa", cfg_.d_ct, rng);
        break;
      case FusionKind::kCa2:
        ca2_ = Ca2Fusion::create(ps_, "fusion/ca2", cfg_.backbone.level_channels, cfg_.d_ct, rng,
                                 cfg_.ca2_heads);
        break;
      case FusionKind::kLearnedStatic:
        static_ = StaticFusion::create(ps_, "fusion/static");
        break;
      case FusionKind::kMean:
      case FusionKind::kRandom:
        static_ = StaticFusion::create(ps_, "fusion/static");
        break;
    }
    decoder_ = SegDecoder::create(ps_, "head", cfg_.backbone.level_channels, cfg_.num_classes, rng,
                                  cfg_.decoder_hidden);
  }

  struct SceneOutput {
    Tensor logits;                        // [K,H,W]
    Tensor ct;                            // [D_ct], defined for caa/ca2
    std::optional<FusionWeights> weights; // defined for weighted-addition kinds
  };

  // images: normalized [3,H,W] per modality; inactive slots are ignored.
  // fusion_rng drives the random-weights baseline (fresh draws each pass).
  SceneOutput forward(const std::array<Tensor, 4>& images, Rng& fusion_rng) const {
    const std::vector<int> active = cfg_.active_modalities();
    std::array<FeaturePyramid, 4> pyramids;
    for (int m : active)
      pyramids[static_cast<size_t>(m)] =
          backbone_for(m).forward(images[static_cast<size_t>(m)]);

    SceneOutput out;
    if (cfg_.condition_aware()) out.ct = ct_gen_.generate(pyramids[0].levels[3]);

    std::array<FeaturePyramid, 4> adapted;
    for (int m : active)
      adapted[static_cast<size_t>(m)] = cfg_.use_adapters
                                            ? adapters_.forward(pyramids[static_cast<size_t>(m)], m)
                                            : pyramids[static_cast<size_t>(m)];

    FeaturePyramid fused;
    switch (cfg_.fusion) {
      case FusionKind::kMean:
      case FusionKind::kRandom:
      case FusionKind::kLearnedStatic: {
        CaaResult r = static_.fuse(adapted, cfg_.fusion, active, fusion_rng);
        fused = r.fused;
        out.weights = r.weights_full;
        break;
      }
      case FusionKind::kCaa: {
        CaaResult r = caa_.fuse(adapted, out.ct, active);
        fused = r.fused;
        out.weights = r.weights_full;
        break;
      }
      case FusionKind::kCa2:
        fused = ca2_.fuse(adapted, out.ct, cfg_.ct_target, cfg_.active_secondaries());
        break;
    }
    out.logits = decoder_.decode(fused);
    return out;
  }

  const Backbone& backbone_for(int modality) const {
    return cfg_.shared_backbone ? backbones_[0]
                                : backbones_[static_cast<size_t>(modality)];
  }

  Tensor temperature() const {
    require(log_tau_.defined(), "FusionModel", "temperature only exists for condition-aware kinds");
    return exp_op(log_tau_);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const Vocabulary& vocab() const { return vocab_; }
  const TextEncoder& text_encoder() const { return text_; }
  const CtGenerator& ct_generator() const { return ct_gen_; }
  const AdapterBank& adapter_bank() const { return adapters_; }

  void save(const std::string& path) const { save_checkpoint(ps_, path); }
  void load(const std::string& path) { load_checkpoint(ps_, path); }

 private:
  ModelConfig cfg_;
  ParamStore ps_;
  Vocabulary vocab_;
  std::vector<Backbone> backbones_;
  AdapterBank adapters_;
  CtGenerator ct_gen_;
  TextEncoder text_;
  Tensor log_tau_;
  CaaFusion caa_;
  StaticFusion static_;
  Ca2Fusion ca2_;
  SegDecoder decoder_;
};

// Parameter accounting, grouped by the leading path segment.
struct ParamCounts {
  int64_t total = 0;
  std::vector<std::pair<std::string, int64_t>> by_group;
};

inline ParamCounts count_parameters(const FusionModel& model) {
  ParamCounts out;
  std::map<std::string, int64_t> groups;
  for (const auto& [name, t] : model.params().entries()) {
    out.total += t.numel();
    groups[name.substr(0, name.find('/'))] += t.numel();
  }
  out.by_group.assign(groups.begin(), groups.end());
  return out;
}

}  // namespace cf
