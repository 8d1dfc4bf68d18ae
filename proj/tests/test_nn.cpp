#include <catch2/catch_amalgamated.hpp>

#include "condfuse/nn.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cf;
using cftest::random_tensor;

namespace {

cforacle::AttnWeights extract_weights(const MultiheadAttention& m) {
  cforacle::AttnWeights w;
  w.wq = m.q.w.vec();
  w.bq = m.q.b.vec();
  w.wk = m.k.w.vec();
  w.bk = m.k.b.vec();
  w.wv = m.v.w.vec();
  w.bv = m.v.b.vec();
  w.wo = m.o.w.vec();
  w.bo = m.o.b.vec();
  w.dim = m.cfg.model_dim;
  w.heads = m.cfg.num_heads;
  return w;
}

}  // namespace

TEST_CASE("attention with identical key/value tokens collapses to one output", "[nn]") {
  Rng rng(101);
  ParamStore ps;
  auto mha = MultiheadAttention::create(ps, "mha", {8, 2}, rng);
  Tensor u = random_tensor({1, 8}, rng);
  std::vector<double> kv5;
  for (int i = 0; i < 5; ++i) kv5.insert(kv5.end(), u.vec().begin(), u.vec().end());
  Tensor kv = Tensor::from(kv5, {5, 8});
  Tensor q = random_tensor({3, 8}, rng);
  Tensor out = mha.forward(q, kv);
  Tensor single = mha.forward(q, u);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 8; ++j) {
      REQUIRE(out.data()[i * 8 + j] == Catch::Approx(out.data()[j]).margin(1e-12));
      REQUIRE(out.data()[i * 8 + j] == Catch::Approx(single.data()[i * 8 + j]).margin(1e-12));
    }
}

TEST_CASE("singleton key/value makes attention weights exactly one", "[nn]") {
  Rng rng(103);
  ParamStore ps;
  auto mha = MultiheadAttention::create(ps, "mha", {6, 1}, rng);
  Tensor u = random_tensor({1, 6}, rng);
  Tensor q1 = random_tensor({2, 6}, rng);
  Tensor q2 = random_tensor({2, 6}, rng);
  Tensor o1 = mha.forward(q1, u);
  Tensor o2 = mha.forward(q2, u);
  // output rows are independent of the query when the softmax is a singleton
  for (int64_t i = 0; i < o1.numel(); ++i) REQUIRE(o1.data()[i] == o2.data()[i]);
}

TEST_CASE("multihead attention matches the dense oracle", "[nn][oracle]") {
  Rng rng(107);
  for (int heads : {1, 2}) {
    ParamStore ps;
    auto mha = MultiheadAttention::create(ps, "mha", {8, heads}, rng);
    Tensor q = random_tensor({3, 8}, rng);
    Tensor kv = random_tensor({5, 8}, rng);
    Tensor out = mha.forward(q, kv);
    auto ref = cforacle::attention(q.vec(), 3, kv.vec(), 5, extract_weights(mha));
    for (int64_t i = 0; i < out.numel(); ++i)
      REQUIRE(std::fabs(out.data()[i] - ref[static_cast<size_t>(i)]) <= 1e-10);
  }
}

TEST_CASE("attention is invariant to joint key/value permutation", "[nn]") {
  Rng rng(109);
  ParamStore ps;
  auto mha = MultiheadAttention::create(ps, "mha", {8, 2}, rng);
  Tensor q = random_tensor({4, 8}, rng);
  Tensor kv = random_tensor({6, 8}, rng);
  std::vector<int64_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<double> shuffled(6 * 8);
  for (int64_t i = 0; i < 6; ++i)
    std::copy_n(kv.data() + perm[static_cast<size_t>(i)] * 8, 8, shuffled.begin() + i * 8);
  Tensor out1 = mha.forward(q, kv);
  Tensor out2 = mha.forward(q, Tensor::from(shuffled, {6, 8}));
  for (int64_t i = 0; i < out1.numel(); ++i)
    REQUIRE(out1.data()[i] == Catch::Approx(out2.data()[i]).margin(1e-10));
}

TEST_CASE("attention rejects bad shapes", "[nn]") {
  Rng rng(113);
  ParamStore ps;
  auto mha = MultiheadAttention::create(ps, "mha", {8, 2}, rng);
  REQUIRE_THROWS_AS(mha.forward(random_tensor({3, 4}, rng), random_tensor({5, 8}, rng)), TensorError);
  AttentionConfig bad{6, 4};
  REQUIRE_THROWS_AS(bad.validate(), TensorError);
}

TEST_CASE("encode-decode output shape follows the query seeds", "[nn]") {
  Rng rng(127);
  ParamStore ps;
  AttentionConfig cfg{8, 2};
  std::vector<EncoderLayer> encs{EncoderLayer::create(ps, "enc0", cfg, rng),
                                 EncoderLayer::create(ps, "enc1", cfg, rng)};
  std::vector<DecoderLayer> decs{DecoderLayer::create(ps, "dec0", cfg, rng),
                                 DecoderLayer::create(ps, "dec1", cfg, rng)};
  Tensor seeds = random_tensor({1, 8}, rng);
  for (int64_t n : {1, 3, 9}) {
    Tensor out = transformer_encode_decode(random_tensor({n, 8}, rng), encs, decs, seeds);
    REQUIRE(out.shape() == Shape{1, 8});
  }
  REQUIRE_THROWS_AS(transformer_encode_decode(Tensor::zeros({1, 8}), encs, decs, Tensor::zeros({1, 4})),
                    TensorError);
}

TEST_CASE("decoder output is invariant to input sequence permutation", "[nn]") {
  // no positional embeddings inside the stack, so keys/values are a set
  Rng rng(131);
  ParamStore ps;
  AttentionConfig cfg{8, 2};
  std::vector<EncoderLayer> encs{EncoderLayer::create(ps, "enc0", cfg, rng)};
  std::vector<DecoderLayer> decs{DecoderLayer::create(ps, "dec0", cfg, rng)};
  Tensor seeds = random_tensor({2, 8}, rng);
  Tensor seq = random_tensor({5, 8}, rng);
  std::vector<int64_t> perm{4, 2, 0, 3, 1};
  std::vector<double> shuffled(5 * 8);
  for (int64_t i = 0; i < 5; ++i)
    std::copy_n(seq.data() + perm[static_cast<size_t>(i)] * 8, 8, shuffled.begin() + i * 8);
  Tensor o1 = transformer_encode_decode(seq, encs, decs, seeds);
  Tensor o2 = transformer_encode_decode(Tensor::from(shuffled, {5, 8}), encs, decs, seeds);
  for (int64_t i = 0; i < o1.numel(); ++i)
    REQUIRE(o1.data()[i] == Catch::Approx(o2.data()[i]).margin(1e-10));
}

TEST_CASE("transformer blocks pass gradcheck", "[nn][gradcheck]") {
  Rng rng(137);
  ParamStore ps;
  AttentionConfig cfg{4, 2};
  auto mha = MultiheadAttention::create(ps, "mha", cfg, rng);
  Tensor q0 = random_tensor({3, 4}, rng);
  Tensor kv0 = random_tensor({5, 4}, rng);
  cftest::WeightedLoss wl(3 * 4, rng);

  double worst = 0.0;
  worst = std::max(worst, cftest::gradcheck([&](const Tensor& q) { return wl(mha.forward(q, kv0)); }, q0));
  worst = std::max(worst, cftest::gradcheck([&](const Tensor& kv) { return wl(mha.forward(q0, kv)); }, kv0));
  worst = std::max(worst, cftest::gradcheck_wrt([&] { return wl(mha.forward(q0, kv0)); }, mha.q.w));
  worst = std::max(worst, cftest::gradcheck_wrt([&] { return wl(mha.forward(q0, kv0)); }, mha.v.b));

  auto enc = EncoderLayer::create(ps, "enc", cfg, rng);
  worst = std::max(worst, cftest::gradcheck([&](const Tensor& x) { return wl(enc.forward(x)); },
                                            random_tensor({3, 4}, rng)));
  auto dec = DecoderLayer::create(ps, "dec", cfg, rng);
  Tensor mem = random_tensor({5, 4}, rng);
  worst = std::max(worst, cftest::gradcheck([&](const Tensor& x) { return wl(dec.forward(x, mem)); },
                                            random_tensor({3, 4}, rng)));

  // M=1, N=1 encode-decode, w.r.t. the sequence
  std::vector<EncoderLayer> encs{EncoderLayer::create(ps, "ed/enc", cfg, rng)};
  std::vector<DecoderLayer> decs{DecoderLayer::create(ps, "ed/dec", cfg, rng)};
  Tensor seeds = random_tensor({1, 4}, rng);
  worst = std::max(worst, cftest::gradcheck(
                              [&](const Tensor& s) {
                                return mean_all(transformer_encode_decode(s, encs, decs, seeds));
                              },
                              random_tensor({1, 4}, rng)));
  INFO("max relative error " << worst);
  REQUIRE(worst <= 1e-4);
}

TEST_CASE("backbone produces the documented pyramid shapes", "[nn]") {
  Rng rng(139);
  ParamStore ps;
  auto bb = Backbone::create(ps, "backbone", BackboneConfig{}, rng);
  FeaturePyramid p = bb.forward(random_tensor({3, 32, 32}, rng));
  REQUIRE(p.levels[0].shape() == Shape{16, 8, 8});
  REQUIRE(p.levels[1].shape() == Shape{32, 4, 4});
  REQUIRE(p.levels[2].shape() == Shape{64, 2, 2});
  REQUIRE(p.levels[3].shape() == Shape{128, 1, 1});
  REQUIRE_THROWS_AS(bb.forward(random_tensor({3, 30, 32}, rng)), TensorError);
}

TEST_CASE("zero image with zero biases yields a zero pyramid", "[nn]") {
  Rng rng(149);
  ParamStore ps;
  auto bb = Backbone::create(ps, "backbone", BackboneConfig{}, rng);  // biases start at zero
  FeaturePyramid p = bb.forward(Tensor::zeros({3, 32, 32}));
  for (const Tensor& level : p.levels)
    for (int64_t i = 0; i < level.numel(); ++i) REQUIRE(level.data()[i] == 0.0);
}

TEST_CASE("backbone is deterministic and input-sensitive", "[nn]") {
  Rng rng(151);
  ParamStore ps;
  auto bb = Backbone::create(ps, "backbone", BackboneConfig{}, rng);
  Tensor img1 = random_tensor({3, 32, 32}, rng);
  Tensor img2 = random_tensor({3, 32, 32}, rng);
  FeaturePyramid a = bb.forward(img1);
  FeaturePyramid b = bb.forward(img1);
  for (int l = 0; l < 4; ++l)
    for (int64_t i = 0; i < a.levels[static_cast<size_t>(l)].numel(); ++i)
      REQUIRE(a.levels[static_cast<size_t>(l)].data()[i] == b.levels[static_cast<size_t>(l)].data()[i]);
  FeaturePyramid c = bb.forward(img2);
  bool any_diff = false;
  for (int64_t i = 0; i < a.levels[0].numel(); ++i)
    if (a.levels[0].data()[i] != c.levels[0].data()[i]) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("residual block and backbone pass gradcheck", "[nn][gradcheck]") {
  Rng rng(157);
  ParamStore ps;
  auto block = ResidualBlock::create(ps, "res", 4, rng);
  Tensor x0 = random_tensor({4, 3, 3}, rng);
  cftest::WeightedLoss wl(4 * 3 * 3, rng);
  double worst = cftest::gradcheck([&](const Tensor& x) { return wl(block.forward(x)); }, x0);
  worst = std::max(worst, cftest::gradcheck_wrt([&] { return wl(block.forward(x0)); }, block.conv2.w));

  // full backbone: sampled input coordinates and one stem weight sweep
  ParamStore ps2;
  auto bb = Backbone::create(ps2, "backbone", BackboneConfig{}, rng);
  Tensor img = random_tensor({3, 32, 32}, rng);
  cftest::WeightedLoss lvl3(128, rng);
  auto fwd = [&] {
    FeaturePyramid p = bb.forward(img);
    return add(lvl3(reshape(p.levels[3], {128})), mean_all(p.levels[0]));
  };
  std::vector<int64_t> coords;
  for (int i = 0; i < 24; ++i) coords.push_back(rng.randint(img.numel()));
  img.node()->requires_grad = true;
  worst = std::max(worst, cftest::gradcheck_wrt_sampled(fwd, img, coords));
  std::vector<int64_t> wcoords;
  for (int i = 0; i < 12; ++i) wcoords.push_back(rng.randint(bb.stem.w.numel()));
  worst = std::max(worst, cftest::gradcheck_wrt_sampled(fwd, bb.stem.w, wcoords));
  INFO("max relative error " << worst);
  REQUIRE(worst <= 1e-4);
}
