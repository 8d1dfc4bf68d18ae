#include <catch2/catch_amalgamated.hpp>

#include "condfuse/model.hpp"
#include "condfuse/seghead.hpp"
#include "test_util.hpp"

using namespace cf;
using cftest::random_tensor;

namespace {

FeaturePyramid pyramid_like_backbone(Rng& rng) {
  FeaturePyramid p;
  p.levels[0] = random_tensor({16, 8, 8}, rng);
  p.levels[1] = random_tensor({32, 4, 4}, rng);
  p.levels[2] = random_tensor({64, 2, 2}, rng);
  p.levels[3] = random_tensor({128, 1, 1}, rng);
  return p;
}

}  // namespace

TEST_CASE("decoder emits class logits at the input resolution", "[seghead]") {
  Rng rng(501);
  ParamStore ps;
  auto dec = SegDecoder::create(ps, "head", {16, 32, 64, 128}, 6, rng);
  FeaturePyramid p = pyramid_like_backbone(rng);
  Tensor logits = dec.decode(p);
  REQUIRE(logits.shape() == Shape{6, 32, 32});

  FeaturePyramid bad = p;
  bad.levels[2] = random_tensor({64, 3, 3}, rng);  // 8 % 3 != 0
  REQUIRE_THROWS_AS(dec.decode(bad), TensorError);
}

TEST_CASE("zero pyramid with zero biases gives uniform logits and lowest-id argmax", "[seghead]") {
  Rng rng(503);
  ParamStore ps;
  auto dec = SegDecoder::create(ps, "head", {16, 32, 64, 128}, 6, rng);  // biases init zero
  FeaturePyramid p;
  p.levels[0] = Tensor::zeros({16, 8, 8});
  p.levels[1] = Tensor::zeros({32, 4, 4});
  p.levels[2] = Tensor::zeros({64, 2, 2});
  p.levels[3] = Tensor::zeros({128, 1, 1});
  Tensor logits = dec.decode(p);
  for (int64_t i = 0; i < logits.numel(); ++i) REQUIRE(logits.data()[i] == 0.0);
  auto pred = predict_classes(logits);
  for (int v : pred) REQUIRE(v == 0);  // ties break toward the lowest class id
}

TEST_CASE("argmax prefers the lowest class id on exact ties", "[seghead]") {
  Tensor logits = Tensor::from({1.0, 0.5, 1.0, 0.5, 0.2, 1.0}, {3, 1, 2});
  auto pred = predict_classes(logits);
  REQUIRE(pred == std::vector<int>{0, 2});
}

TEST_CASE("segmentation loss saturates to zero for confident correct logits", "[seghead]") {
  const int64_t k = 6, h = 4, w = 4;
  std::vector<uint8_t> gt(static_cast<size_t>(h * w));
  Rng rng(509);
  for (auto& g : gt) g = static_cast<uint8_t>(rng.randint(k));
  std::vector<double> logits(static_cast<size_t>(k * h * w), 0.0);
  for (int64_t i = 0; i < h * w; ++i) logits[static_cast<size_t>(gt[static_cast<size_t>(i)] * h * w + i)] = 25.0;
  double loss = segmentation_loss(Tensor::from(logits, {k, h, w}), gt).item();
  REQUIRE(loss >= 0.0);
  REQUIRE(loss <= 1e-6);

  std::vector<uint8_t> bad = gt;
  bad[0] = 6;  // class id out of range
  REQUIRE_THROWS_AS(segmentation_loss(Tensor::from(logits, {k, h, w}), bad), TensorError);
}

TEST_CASE("total loss composes segmentation and condition terms", "[seghead]") {
  Rng rng(521);
  const int64_t k = 6, h = 4, w = 4;
  std::vector<uint8_t> gt1(static_cast<size_t>(h * w)), gt2(gt1);
  for (auto& g : gt1) g = static_cast<uint8_t>(rng.randint(k));
  for (auto& g : gt2) g = static_cast<uint8_t>(rng.randint(k));
  Tensor l1 = random_tensor({k, h, w}, rng);
  Tensor l2 = random_tensor({k, h, w}, rng);
  Tensor cts = random_tensor({2, 8}, rng);
  Tensor texts = random_tensor({2, 8}, rng);
  Tensor tau = Tensor::from({0.07}, {1});

  const double ce = 0.5 * (segmentation_loss(l1, gt1).item() + segmentation_loss(l2, gt2).item());
  const double cond = condition_contrastive_loss(cts, texts, tau).item();

  // lambda = 0 reproduces pure segmentation training
  REQUIRE(total_loss({l1, l2}, {&gt1, &gt2}, cts, texts, tau, 0.0).item() ==
          Catch::Approx(ce).margin(1e-12));
  // positive lambda adds the weighted condition term and is monotone in it
  const double at_half = total_loss({l1, l2}, {&gt1, &gt2}, cts, texts, tau, 0.5).item();
  const double at_one = total_loss({l1, l2}, {&gt1, &gt2}, cts, texts, tau, 1.0).item();
  REQUIRE(at_half == Catch::Approx(ce + 0.5 * cond).margin(1e-12));
  REQUIRE(at_one >= at_half);
  REQUIRE(at_half >= 0.0);

  // singleton batches contribute exactly zero contrastive signal
  Tensor ct1 = random_tensor({1, 8}, rng);
  Tensor tx1 = random_tensor({1, 8}, rng);
  REQUIRE(total_loss({l1}, {&gt1}, ct1, tx1, tau, 0.7).item() ==
          Catch::Approx(segmentation_loss(l1, gt1).item()).margin(1e-12));
}

TEST_CASE("decode over fused features passes gradcheck on a 4x4 stack", "[seghead][gradcheck]") {
  Rng rng(523);
  ParamStore ps;
  constexpr std::array<int64_t, 4> ch{4, 8, 12, 16};
  auto bank = AdapterBank::create(ps, "adapter", ch, rng);
  auto caa = CaaFusion::create(ps, "caa", 4, rng);
  auto dec = SegDecoder::create(ps, "head", ch, 3, rng, 8);
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) {
    p.levels[0] = random_tensor({4, 4, 4}, rng);
    p.levels[1] = random_tensor({8, 2, 2}, rng);
    p.levels[2] = random_tensor({12, 1, 1}, rng);
    p.levels[3] = random_tensor({16, 1, 1}, rng);
  }
  Tensor ct0 = random_tensor({4}, rng);
  std::vector<uint8_t> gt(16 * 16);
  for (auto& g : gt) g = static_cast<uint8_t>(rng.randint(3));
  const std::vector<int> all{0, 1, 2, 3};

  auto forward = [&](const std::array<FeaturePyramid, 4>& ps4, const Tensor& ct) {
    std::array<FeaturePyramid, 4> adapted;
    for (int m : all) adapted[static_cast<size_t>(m)] = bank.forward(ps4[static_cast<size_t>(m)], m);
    CaaResult fused = caa.fuse(adapted, ct, all);
    return segmentation_loss(dec.decode(fused.fused), gt);
  };
  double worst = cftest::gradcheck(
      [&](const Tensor& lvl) {
        auto ps4 = pyramids;
        ps4[1].levels[0] = lvl;
        return forward(ps4, ct0);
      },
      pyramids[1].levels[0]);
  worst = std::max(worst,
                   cftest::gradcheck([&](const Tensor& ct) { return forward(pyramids, ct); }, ct0));
  worst = std::max(worst,
                   cftest::gradcheck_wrt([&] { return forward(pyramids, ct0); }, dec.mix.w));
  INFO("max relative error " << worst);
  REQUIRE(worst <= 1e-4);
}
