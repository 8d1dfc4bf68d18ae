#include <catch2/catch_amalgamated.hpp>

#include "condfuse/fusion.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cf;
using cftest::extract_attn_weights;
using cftest::random_tensor;

namespace {

FeaturePyramid random_pyramid(const std::array<int64_t, 4>& channels,
                              const std::array<std::pair<int64_t, int64_t>, 4>& dims, Rng& rng) {
  FeaturePyramid p;
  for (int l = 0; l < 4; ++l)
    p.levels[static_cast<size_t>(l)] = random_tensor(
        {channels[static_cast<size_t>(l)], dims[static_cast<size_t>(l)].first,
         dims[static_cast<size_t>(l)].second},
        rng);
  return p;
}

constexpr std::array<int64_t, 4> kCh{8, 12, 16, 20};
constexpr std::array<std::pair<int64_t, int64_t>, 4> kDims{{{8, 8}, {4, 4}, {2, 2}, {1, 1}}};

}  // namespace

TEST_CASE("adapter blend degenerate cases", "[fusion]") {
  Rng rng(301);
  ParamStore ps;
  auto ad = Adapter::create(ps, "ad", 8, rng);
  Tensor x = random_tensor({8, 3, 2}, rng);

  ad.blend.data()[0] = -40.0;  // alpha ~ 0: identity
  Tensor out = ad.forward(x);
  for (int64_t i = 0; i < x.numel(); ++i)
    REQUIRE(std::fabs(out.data()[i] - x.data()[i]) <= 1e-12);

  ad.blend.data()[0] = 40.0;  // alpha ~ 1 with a zeroed second layer: zero output
  std::fill(ad.fc2.w.vec().begin(), ad.fc2.w.vec().end(), 0.0);
  std::fill(ad.fc2.b.vec().begin(), ad.fc2.b.vec().end(), 0.0);
  Tensor zero_out = ad.forward(x);
  for (int64_t i = 0; i < x.numel(); ++i) REQUIRE(std::fabs(zero_out.data()[i]) <= 1e-12);
}

TEST_CASE("adapter MLP parameter count follows the 4x-reduction formula", "[fusion]") {
  Rng rng(307);
  ParamStore ps;
  Adapter::create(ps, "ad", 8, rng);
  // 8->2->8: weights plus biases
  REQUIRE(ps.elements_with_prefix("ad/mlp") == 8 * 2 + 2 + 2 * 8 + 8);
  REQUIRE(ps.elements_with_prefix("ad") == 42 + 1);  // plus the blend scalar
  REQUIRE_THROWS_AS(Adapter::create(ps, "bad", 10, rng), TensorError);
}

TEST_CASE("adapter bank builds 16 adapters and passes gradcheck", "[fusion][gradcheck]") {
  Rng rng(311);
  ParamStore ps;
  auto bank = AdapterBank::create(ps, "adapter", {8, 12, 16, 20}, rng);
  int count = 0;
  for (int m = 0; m < 4; ++m)
    for (int l = 0; l < 4; ++l)
      if (ps.contains("adapter/" + std::string(modality_name(m)) + "/l" + std::to_string(l + 1) +
                      "/blend"))
        ++count;
  REQUIRE(count == 16);

  Tensor x0 = random_tensor({8, 2, 3}, rng);
  cftest::WeightedLoss wl(8 * 2 * 3, rng);
  double worst =
      cftest::gradcheck([&](const Tensor& x) { return wl(bank.forward(x, 1, 0)); }, x0);
  Adapter& ad = bank.adapters[1][0];
  worst = std::max(worst, cftest::gradcheck_wrt([&] { return wl(bank.forward(x0, 1, 0)); }, ad.blend));
  worst = std::max(worst, cftest::gradcheck_wrt([&] { return wl(bank.forward(x0, 1, 0)); }, ad.fc1.w));
  INFO("max relative error " << worst);
  REQUIRE(worst <= 1e-4);
}

TEST_CASE("caa weights follow the CT head", "[fusion]") {
  Rng rng(313);
  ParamStore ps;
  auto caa = CaaFusion::create(ps, "caa", 6, rng);
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) p = random_pyramid(kCh, kDims, rng);
  Tensor ct = random_tensor({6}, rng);
  const std::vector<int> all{0, 1, 2, 3};

  SECTION("zero head gives the elementwise mean") {
    std::fill(caa.fc.w.vec().begin(), caa.fc.w.vec().end(), 0.0);
    CaaResult r = caa.fuse(pyramids, ct, all);
    r.weights_full.validate();
    for (double w : r.weights_full.w) REQUIRE(w == Catch::Approx(0.25).margin(1e-15));
    for (int l = 0; l < 4; ++l) {
      const Tensor& f = r.fused.levels[static_cast<size_t>(l)];
      for (int64_t i = 0; i < f.numel(); ++i) {
        double mean = 0.0;
        for (int m = 0; m < 4; ++m)
          mean += pyramids[static_cast<size_t>(m)].levels[static_cast<size_t>(l)].data()[i];
        mean /= 4.0;
        REQUIRE(f.data()[i] == Catch::Approx(mean).margin(1e-12));
      }
    }
  }

  SECTION("one-hot logits select the RGB pyramid") {
    std::fill(caa.fc.w.vec().begin(), caa.fc.w.vec().end(), 0.0);
    caa.fc.b.vec() = {40.0, -40.0, -40.0, -40.0};
    CaaResult r = caa.fuse(pyramids, ct, all);
    for (int l = 0; l < 4; ++l) {
      const Tensor& f = r.fused.levels[static_cast<size_t>(l)];
      const Tensor& rgb = pyramids[0].levels[static_cast<size_t>(l)];
      for (int64_t i = 0; i < f.numel(); ++i)
        REQUIRE(std::fabs(f.data()[i] - rgb.data()[i]) <= 1e-12);
    }
  }

  SECTION("forced weights reproduce the hand-computed weighted sum") {
    std::fill(caa.fc.w.vec().begin(), caa.fc.w.vec().end(), 0.0);
    caa.fc.b.vec() = {std::log(0.1), std::log(0.2), std::log(0.3), std::log(0.4)};
    CaaResult r = caa.fuse(pyramids, ct, all);
    const double w[4] = {0.1, 0.2, 0.3, 0.4};
    for (int l = 0; l < 4; ++l) {
      const Tensor& f = r.fused.levels[static_cast<size_t>(l)];
      for (int64_t i = 0; i < f.numel(); ++i) {
        double expect = 0.0;
        for (int m = 0; m < 4; ++m)
          expect += w[m] * pyramids[static_cast<size_t>(m)].levels[static_cast<size_t>(l)].data()[i];
        REQUIRE(f.data()[i] == Catch::Approx(expect).margin(1e-12));
      }
    }
  }

  SECTION("weights respect the active subset and still sum to one") {
    CaaResult r = caa.fuse(pyramids, ct, {0, 2});
    r.weights_full.validate();
    REQUIRE(r.weights_full.w[1] == 0.0);
    REQUIRE(r.weights_full.w[3] == 0.0);
  }
}

TEST_CASE("caa fusion is linear in each modality", "[fusion]") {
  Rng rng(317);
  ParamStore ps;
  auto caa = CaaFusion::create(ps, "caa", 6, rng);
  std::array<FeaturePyramid, 4> base;
  for (auto& p : base) p = random_pyramid(kCh, kDims, rng);
  Tensor ct = random_tensor({6}, rng);
  const std::vector<int> all{0, 1, 2, 3};
  CaaResult r0 = caa.fuse(base, ct, all);

  std::array<FeaturePyramid, 4> bumped = base;
  Tensor delta = random_tensor(base[2].levels[1].shape(), rng);
  bumped[2].levels[1] = add(base[2].levels[1], delta);
  CaaResult r1 = caa.fuse(bumped, ct, all);
  const double w2 = r0.weights_full.w[2];
  const Tensor& f0 = r0.fused.levels[1];
  const Tensor& f1 = r1.fused.levels[1];
  for (int64_t i = 0; i < f0.numel(); ++i)
    REQUIRE(f1.data()[i] - f0.data()[i] == Catch::Approx(w2 * delta.data()[i]).margin(1e-12));
}

TEST_CASE("window partition arithmetic and round-trip", "[fusion]") {
  Rng rng(331);
  {
    auto [win, info] = window_partition(random_tensor({3, 14, 14}, rng));
    REQUIRE(info.count() == 4);
    REQUIRE(win.shape() == Shape{4, 49, 3});
  }
  {
    auto [win, info] = window_partition(random_tensor({2, 15, 10}, rng));
    REQUIRE(info.padded_h == 21);
    REQUIRE(info.padded_w == 14);
    REQUIRE(info.count() == 6);
  }
  for (auto dims : std::vector<std::pair<int64_t, int64_t>>{{7, 7}, {15, 10}, {1, 1}, {8, 20}}) {
    Tensor x = random_tensor({5, dims.first, dims.second}, rng);
    auto [win, info] = window_partition(x);
    Tensor back = window_reverse(win, info, 5);
    REQUIRE(back.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) REQUIRE(back.data()[i] == x.data()[i]);
  }
}

TEST_CASE("window ops pass gradcheck", "[fusion][gradcheck]") {
  Rng rng(337);
  Tensor x0 = random_tensor({2, 9, 8}, rng);
  cftest::WeightedLoss wl(2 * 2 * 49 * 2, rng);
  double worst = cftest::gradcheck(
      [&](const Tensor& x) { return wl(window_partition(x).first); }, x0);
  auto [win0, info] = window_partition(x0);
  cftest::WeightedLoss wl2(2 * 9 * 8, rng);
  double worst2 = cftest::gradcheck(
      [&](const Tensor& w) { return wl2(window_reverse(w, info, 2)); }, win0);
  INFO("partition " << worst << " reverse " << worst2);
  REQUIRE(std::max(worst, worst2) <= 1e-4);
}

TEST_CASE("ca2 window attention contracts", "[fusion]") {
  Rng rng(347);
  ParamStore ps;
  auto attn = MultiheadAttention::create(ps, "attn", {8, 1}, rng);
  Tensor ct1 = random_tensor({1, 8}, rng);
  Tensor ct2 = random_tensor({1, 8}, rng);
  Tensor rgb = random_tensor({49, 8}, rng);

  SECTION("output keeps 49 rows for every variant") {
    Tensor sec = random_tensor({49, 8}, rng);
    for (CtTarget t : {CtTarget::kQ, CtTarget::kKv, CtTarget::kQkv, CtTarget::kNone})
      REQUIRE(ca2_window_attention(rgb, ct1, sec, attn, t).shape() == Shape{49, 8});
  }

  SECTION("identical secondary tokens collapse the output rows") {
    Tensor u = random_tensor({1, 8}, rng);
    std::vector<double> rep;
    for (int i = 0; i < 49; ++i) rep.insert(rep.end(), u.vec().begin(), u.vec().end());
    Tensor sec = Tensor::from(rep, {49, 8});
    Tensor out1 = ca2_window_attention(rgb, ct1, sec, attn, CtTarget::kQ);
    Tensor out2 = ca2_window_attention(rgb, ct2, sec, attn, CtTarget::kQ);
    for (int64_t i = 0; i < 49; ++i)
      for (int64_t j = 0; j < 8; ++j) {
        REQUIRE(out1.data()[i * 8 + j] == Catch::Approx(out1.data()[j]).margin(1e-12));
        // CT only modulates attention weights; identical values hide it
        REQUIRE(out1.data()[i * 8 + j] == Catch::Approx(out2.data()[i * 8 + j]).margin(1e-12));
      }
  }

  SECTION("matches the dense oracle on random windows, all variants") {
    auto w = extract_attn_weights(attn);
    for (auto [target, place] :
         std::vector<std::pair<CtTarget, cforacle::CtPlacement>>{
             {CtTarget::kQ, cforacle::CtPlacement::kQuery},
             {CtTarget::kKv, cforacle::CtPlacement::kKeyValue},
             {CtTarget::kQkv, cforacle::CtPlacement::kBoth},
             {CtTarget::kNone, cforacle::CtPlacement::kNone}}) {
      Tensor sec = random_tensor({49, 8}, rng);
      Tensor out = ca2_window_attention(rgb, ct1, sec, attn, target);
      auto ref = cforacle::ca2_window(rgb.vec(), sec.vec(), 49, ct1.vec(), w, place);
      for (int64_t i = 0; i < out.numel(); ++i)
        REQUIRE(std::fabs(out.data()[i] - ref[static_cast<size_t>(i)]) <= 1e-10);
    }
  }
}

TEST_CASE("mwca fusion preserves the RGB pyramid at zero-initialized projections", "[fusion]") {
  Rng rng(349);
  ParamStore ps;
  auto ca2 = Ca2Fusion::create(ps, "fusion", kCh, 6, rng);
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) p = random_pyramid(kCh, kDims, rng);
  Tensor ct = random_tensor({6}, rng);
  FeaturePyramid fused = ca2.fuse(pyramids, ct, CtTarget::kQ, {1, 2, 3});
  for (int l = 0; l < 4; ++l) {
    const Tensor& f = fused.levels[static_cast<size_t>(l)];
    const Tensor& rgb = pyramids[0].levels[static_cast<size_t>(l)];
    REQUIRE(f.shape() == rgb.shape());
    for (int64_t i = 0; i < f.numel(); ++i) REQUIRE(f.data()[i] == rgb.data()[i]);
  }
}

namespace {

// forces the residual path to matter in equivalence tests
void randomize_projections(Ca2Fusion& f, Rng& rng) {
  for (auto& level : f.blocks)
    for (auto& blk : level) {
      for (double& x : blk.proj_back.w.vec()) x = rng.uniform(-0.4, 0.4);
      for (double& x : blk.proj_back.b.vec()) x = rng.uniform(-0.1, 0.1);
    }
}

}  // namespace

TEST_CASE("mwca variant none ignores the condition token", "[fusion]") {
  Rng rng(353);
  ParamStore ps;
  auto ca2 = Ca2Fusion::create(ps, "fusion", kCh, 6, rng);
  randomize_projections(ca2, rng);
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) p = random_pyramid(kCh, kDims, rng);
  FeaturePyramid f1 = ca2.fuse(pyramids, random_tensor({6}, rng), CtTarget::kNone, {1, 2, 3});
  FeaturePyramid f2 = ca2.fuse(pyramids, random_tensor({6}, rng), CtTarget::kNone, {1, 2, 3});
  for (int l = 0; l < 4; ++l)
    for (int64_t i = 0; i < f1.levels[static_cast<size_t>(l)].numel(); ++i)
      REQUIRE(f1.levels[static_cast<size_t>(l)].data()[i] ==
              f2.levels[static_cast<size_t>(l)].data()[i]);
}

TEST_CASE("ct placement determines whether retained rows can see it", "[fusion]") {
  // Row-wise softmax computes each query independently, so appending the CT
  // to the queries and dropping its output row leaves the 49 retained rows
  // bit-identical to the no-CT variant. Key/value placement does couple it.
  Rng rng(354);
  ParamStore ps;
  auto ca2 = Ca2Fusion::create(ps, "fusion", kCh, 6, rng);
  randomize_projections(ca2, rng);
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) p = random_pyramid(kCh, kDims, rng);
  Tensor ct = random_tensor({6}, rng);

  FeaturePyramid none = ca2.fuse(pyramids, ct, CtTarget::kNone, {1, 2, 3});
  FeaturePyramid q = ca2.fuse(pyramids, ct, CtTarget::kQ, {1, 2, 3});
  for (int l = 0; l < 4; ++l)
    for (int64_t i = 0; i < none.levels[static_cast<size_t>(l)].numel(); ++i)
      REQUIRE(q.levels[static_cast<size_t>(l)].data()[i] ==
              none.levels[static_cast<size_t>(l)].data()[i]);

  for (CtTarget t : {CtTarget::kKv, CtTarget::kQkv}) {
    FeaturePyramid a = ca2.fuse(pyramids, ct, t, {1, 2, 3});
    FeaturePyramid b = ca2.fuse(pyramids, random_tensor({6}, rng), t, {1, 2, 3});
    bool differs = false;
    for (int64_t i = 0; i < a.levels[0].numel(); ++i)
      if (a.levels[0].data()[i] != b.levels[0].data()[i]) differs = true;
    REQUIRE(differs);
  }
}

TEST_CASE("mwca is invariant to secondary ordering", "[fusion]") {
  Rng rng(359);
  ParamStore ps;
  auto ca2 = Ca2Fusion::create(ps, "fusion", kCh, 6, rng);
  randomize_projections(ca2, rng);
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) p = random_pyramid(kCh, kDims, rng);
  Tensor ct = random_tensor({6}, rng);
  FeaturePyramid f1 = ca2.fuse(pyramids, ct, CtTarget::kQ, {1, 2, 3});
  FeaturePyramid f2 = ca2.fuse(pyramids, ct, CtTarget::kQ, {3, 1, 2});
  for (int l = 0; l < 4; ++l)
    for (int64_t i = 0; i < f1.levels[static_cast<size_t>(l)].numel(); ++i)
      REQUIRE(f1.levels[static_cast<size_t>(l)].data()[i] ==
              Catch::Approx(f2.levels[static_cast<size_t>(l)].data()[i]).margin(1e-12));
}

TEST_CASE("mwca matches the dense per-window reference", "[fusion][oracle]") {
  Rng rng(367);
  ParamStore ps;
  auto ca2 = Ca2Fusion::create(ps, "fusion", kCh, 6, rng);
  randomize_projections(ca2, rng);
  // l1 at 9x8 exercises padding; deeper levels are degenerate single windows
  std::array<std::pair<int64_t, int64_t>, 4> dims{{{9, 8}, {4, 4}, {2, 2}, {1, 1}}};
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) p = random_pyramid(kCh, dims, rng);
  Tensor ct = random_tensor({6}, rng);

  for (auto [target, place] : std::vector<std::pair<CtTarget, cforacle::CtPlacement>>{
           {CtTarget::kQ, cforacle::CtPlacement::kQuery},
           {CtTarget::kKv, cforacle::CtPlacement::kKeyValue},
           {CtTarget::kQkv, cforacle::CtPlacement::kBoth},
           {CtTarget::kNone, cforacle::CtPlacement::kNone}}) {
    FeaturePyramid fused = ca2.fuse(pyramids, ct, target, {1, 2, 3});
    for (int l = 0; l < 4; ++l) {
      const int64_t c = kCh[static_cast<size_t>(l)];
      std::vector<std::vector<double>> secs;
      std::vector<cforacle::Ca2BlockRef> blocks;
      for (int m = 1; m < 4; ++m) {
        secs.push_back(pyramids[static_cast<size_t>(m)].levels[static_cast<size_t>(l)].vec());
        const auto& blk = ca2.blocks[static_cast<size_t>(l)][static_cast<size_t>(m - 1)];
        blocks.push_back({extract_attn_weights(blk.attn), blk.proj_back.w.vec(), blk.proj_back.b.vec()});
      }
      auto ref = cforacle::mwca_level_reference(
          pyramids[0].levels[static_cast<size_t>(l)].vec(), c, dims[static_cast<size_t>(l)].first,
          dims[static_cast<size_t>(l)].second, secs, ct.vec(), 6,
          ca2.ct_proj[static_cast<size_t>(l)].w.vec(), ca2.ct_proj[static_cast<size_t>(l)].b.vec(),
          blocks, place);
      const Tensor& got = fused.levels[static_cast<size_t>(l)];
      REQUIRE(got.shape() ==
              pyramids[0].levels[static_cast<size_t>(l)].shape());  // spatial preservation
      for (int64_t i = 0; i < got.numel(); ++i)
        REQUIRE(std::fabs(got.data()[i] - ref[static_cast<size_t>(i)]) <= 1e-10);
    }
  }
}

TEST_CASE("static fusion baselines", "[fusion]") {
  Rng rng(373);
  ParamStore ps;
  auto st = StaticFusion::create(ps, "static");
  std::array<FeaturePyramid, 4> pyramids;
  FeaturePyramid shared = random_pyramid(kCh, kDims, rng);
  const std::vector<int> all{0, 1, 2, 3};

  SECTION("mean of four identical pyramids is that pyramid") {
    for (auto& p : pyramids) p = shared;
    CaaResult r = st.fuse(pyramids, FusionKind::kMean, all, rng);
    for (int l = 0; l < 4; ++l)
      for (int64_t i = 0; i < shared.levels[static_cast<size_t>(l)].numel(); ++i)
        REQUIRE(r.fused.levels[static_cast<size_t>(l)].data()[i] ==
                Catch::Approx(shared.levels[static_cast<size_t>(l)].data()[i]).margin(1e-12));
  }

  SECTION("learned logits at zero behave as the mean") {
    for (auto& p : pyramids) p = random_pyramid(kCh, kDims, rng);
    CaaResult learned = st.fuse(pyramids, FusionKind::kLearnedStatic, all, rng);
    CaaResult mean = st.fuse(pyramids, FusionKind::kMean, all, rng);
    for (int l = 0; l < 4; ++l)
      for (int64_t i = 0; i < learned.fused.levels[static_cast<size_t>(l)].numel(); ++i)
        REQUIRE(learned.fused.levels[static_cast<size_t>(l)].data()[i] ==
                Catch::Approx(mean.fused.levels[static_cast<size_t>(l)].data()[i]).margin(1e-12));
  }

  SECTION("random weights are symmetric across modalities") {
    for (auto& p : pyramids) p = random_pyramid(kCh, {{{1, 1}, {1, 1}, {1, 1}, {1, 1}}}, rng);
    std::array<double, 4> mean_w{0, 0, 0, 0};
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
      CaaResult r = st.fuse(pyramids, FusionKind::kRandom, all, rng);
      r.weights_full.validate();
      for (int m = 0; m < 4; ++m) mean_w[static_cast<size_t>(m)] += r.weights_full.w[static_cast<size_t>(m)];
    }
    for (int m = 0; m < 4; ++m)
      REQUIRE(mean_w[static_cast<size_t>(m)] / trials == Catch::Approx(0.25).margin(0.01));
  }
}

TEST_CASE("modality dropout degenerate rates and statistics", "[fusion]") {
  Rng rng(379);
  std::array<Tensor, 4> images;
  for (auto& t : images) t = random_tensor({3, 4, 4}, rng);

  SECTION("p=0 is the identity") {
    auto out = modality_dropout(images, 0.0, rng);
    for (int m = 0; m < 4; ++m)
      for (int64_t i = 0; i < images[static_cast<size_t>(m)].numel(); ++i)
        REQUIRE(out[static_cast<size_t>(m)].data()[i] == images[static_cast<size_t>(m)].data()[i]);
  }

  SECTION("p=1 keeps only RGB via the restore rule") {
    auto out = modality_dropout(images, 1.0, rng);
    for (int64_t i = 0; i < images[0].numel(); ++i) REQUIRE(out[0].data()[i] == images[0].data()[i]);
    for (int m = 1; m < 4; ++m)
      for (int64_t i = 0; i < out[static_cast<size_t>(m)].numel(); ++i)
        REQUIRE(out[static_cast<size_t>(m)].data()[i] == 0.0);
  }

  SECTION("empirical drop rates over 10k scenes") {
    std::array<Tensor, 4> probe;
    for (auto& t : probe) t = Tensor::full({1, 1, 1}, 1.0);
    std::array<int, 4> drops{0, 0, 0, 0};
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
      auto out = modality_dropout(probe, 0.2, rng);
      for (int m = 0; m < 4; ++m)
        if (out[static_cast<size_t>(m)].data()[0] == 0.0) ++drops[static_cast<size_t>(m)];
    }
    const double rgb_rate = static_cast<double>(drops[0]) / trials;
    REQUIRE(rgb_rate == Catch::Approx(0.2 * (1.0 - 0.2 * 0.2 * 0.2)).margin(0.01));
    for (int m = 1; m < 4; ++m)
      REQUIRE(static_cast<double>(drops[static_cast<size_t>(m)]) / trials ==
              Catch::Approx(0.2).margin(0.01));
  }
}

TEST_CASE("caa fuse and ca2 window attention pass gradcheck", "[fusion][gradcheck]") {
  Rng rng(383);
  ParamStore ps;
  auto caa = CaaFusion::create(ps, "caa", 4, rng);
  constexpr std::array<int64_t, 4> ch{4, 8, 12, 16};
  constexpr std::array<std::pair<int64_t, int64_t>, 4> dims{{{2, 2}, {2, 2}, {1, 1}, {1, 1}}};
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) p = random_pyramid(ch, dims, rng);
  Tensor ct0 = random_tensor({4}, rng);
  const std::vector<int> all{0, 1, 2, 3};
  cftest::WeightedLoss wl(4 * 2 * 2, rng);
  auto caa_loss = [&](const std::array<FeaturePyramid, 4>& ps4, const Tensor& ct) {
    CaaResult r = caa.fuse(ps4, ct, all);
    Tensor obj = wl(r.fused.levels[0]);
    for (int l = 1; l < 4; ++l) obj = add(obj, mean_all(r.fused.levels[static_cast<size_t>(l)]));
    return obj;
  };
  double worst = cftest::gradcheck(
      [&](const Tensor& ct) { return caa_loss(pyramids, ct); }, ct0);
  worst = std::max(worst, cftest::gradcheck(
                              [&](const Tensor& lvl) {
                                auto ps4 = pyramids;
                                ps4[2].levels[0] = lvl;
                                return caa_loss(ps4, ct0);
                              },
                              pyramids[2].levels[0]));
  worst = std::max(worst,
                   cftest::gradcheck_wrt([&] { return caa_loss(pyramids, ct0); }, caa.fc.w));

  ParamStore ps2;
  auto attn = MultiheadAttention::create(ps2, "attn", {6, 1}, rng);
  Tensor rgb0 = random_tensor({4, 6}, rng);
  Tensor sec0 = random_tensor({4, 6}, rng);
  Tensor ctp0 = random_tensor({1, 6}, rng);
  cftest::WeightedLoss wl2(4 * 6, rng);
  for (CtTarget t : {CtTarget::kQ, CtTarget::kKv, CtTarget::kQkv, CtTarget::kNone}) {
    worst = std::max(worst, cftest::gradcheck(
                                [&](const Tensor& r) {
                                  return wl2(ca2_window_attention(r, ctp0, sec0, attn, t));
                                },
                                rgb0));
    worst = std::max(worst, cftest::gradcheck(
                                [&](const Tensor& s) {
                                  return wl2(ca2_window_attention(rgb0, ctp0, s, attn, t));
                                },
                                sec0));
    worst = std::max(worst, cftest::gradcheck(
                                [&](const Tensor& c) {
                                  return wl2(ca2_window_attention(rgb0, c, sec0, attn, t));
                                },
                                ctp0));
  }
  INFO("max relative error " << worst);
  REQUIRE(worst <= 1e-4);
}

TEST_CASE("mwca composes window partition, attention and projection", "[fusion][oracle]") {
  // single 7x7 level with one secondary equals the hand-built composition
  Rng rng(389);
  ParamStore ps;
  constexpr std::array<int64_t, 4> ch{8, 12, 16, 20};
  auto ca2 = Ca2Fusion::create(ps, "fusion", ch, 6, rng);
  randomize_projections(ca2, rng);
  std::array<std::pair<int64_t, int64_t>, 4> dims{{{7, 7}, {4, 4}, {2, 2}, {1, 1}}};
  std::array<FeaturePyramid, 4> pyramids;
  for (auto& p : pyramids) p = random_pyramid(ch, dims, rng);
  Tensor ct = random_tensor({6}, rng);

  FeaturePyramid fused = ca2.fuse(pyramids, ct, CtTarget::kQ, {2});

  auto [rgb_win, info] = window_partition(pyramids[0].levels[0], 7);
  auto [sec_win, info2] = window_partition(pyramids[2].levels[0], 7);
  Tensor rgb_tokens = reshape(rgb_win, {49, 8});
  Tensor sec_tokens = reshape(sec_win, {49, 8});
  Tensor ct_l = ca2.ct_proj[0].forward(reshape(ct, {1, 6}));
  const auto& blk = ca2.blocks[0][1];  // level 1, radar slot
  Tensor attn_out = ca2_window_attention(rgb_tokens, ct_l, sec_tokens, blk.attn, CtTarget::kQ);
  Tensor delta = window_reverse(reshape(blk.proj_back.forward(attn_out), {1, 49, 8}), info, 8);
  Tensor expect = add(pyramids[0].levels[0], delta);
  for (int64_t i = 0; i < expect.numel(); ++i)
    REQUIRE(fused.levels[0].data()[i] == Catch::Approx(expect.data()[i]).margin(1e-12));
}
