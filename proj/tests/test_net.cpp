#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "pointpillars/net.hpp"
#include "pointpillars/pipeline.hpp"
#include "support.hpp"

using namespace pointpillars;

namespace {

Tensor3 random_map(Rng& rng, int c, int h, int w) {
  Tensor3 t(c, h, w);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

Tensor random_kernel(Rng& rng, int f, int c, int k) {
  Tensor t({static_cast<std::uint32_t>(f), static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(k),
            static_cast<std::uint32_t>(k)});
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

double dot(const Tensor3& a, const Tensor3& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
  return s;
}

/// Overwrites one parameter tensor by value.
ParamSet with_param(const ParamSet& p, const std::string& name, const std::vector<float>& values) {
  TensorMap t = p.tensors();
  t.at(name).data = values;
  return ParamSet(p.architecture(), t);
}

PillarTensor small_tensor(std::uint64_t seed, int P, int N, int points = 600) {
  Rng rng(seed);
  GridSpec g;
  g.max_pillars = P, g.max_points_per_pillar = N;
  std::vector<Point> pts;
  for (int i = 0; i < points; ++i)
    pts.push_back({static_cast<float>(rng.uniform(10, 12)), static_cast<float>(rng.uniform(-1, 1)),
                   static_cast<float>(rng.uniform(-2, 0)), static_cast<float>(rng.uniform01())});
  Rng r(seed);
  return pillarize(pts, g, r);
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  Rng rng(1);
  const Tensor3 x = random_map(rng, 1, 6, 7);
  Tensor k({1, 1, 1, 1}, 1.f);
  const Tensor3 y = conv2d(x, k, 1, 0);
  EXPECT_EQ(y.data, x.data);
}

TEST(Conv2d, OnesKernelOnConstantInput) {
  const Tensor3 x(1, 5, 5, 1.f);
  Tensor k({1, 1, 3, 3}, 1.f);
  const Tensor3 y = conv2d(x, k, 1, 1);
  ASSERT_EQ(y.height, 5);
  ASSERT_EQ(y.width, 5);
  EXPECT_EQ(y.at(0, 2, 2), 9.f);
  EXPECT_EQ(y.at(0, 0, 0), 4.f);
  EXPECT_EQ(y.at(0, 4, 4), 4.f);
  EXPECT_EQ(y.at(0, 0, 2), 6.f);
}

TEST(Conv2d, StrideTwoShapeIsCeil) {
  Rng rng(2);
  const Tensor3 x = random_map(rng, 3, 9, 8);
  const Tensor3 y = conv2d(x, random_kernel(rng, 4, 3, 3), 2, 1);
  EXPECT_EQ(y.channels, 4);
  EXPECT_EQ(y.height, 5);
  EXPECT_EQ(y.width, 4);
  EXPECT_EQ(conv_output_size(500, 3, 2, 1), 250);
  EXPECT_EQ(conv_output_size(440, 3, 2, 1), 220);
}

TEST(Conv2d, MatchesDirectSummation) {
  Rng rng(3);
  const Tensor3 x = random_map(rng, 3, 7, 6);
  const Tensor k = random_kernel(rng, 2, 3, 3);
  const std::vector<float> bias = {0.5f, -0.25f};
  for (int s : {1, 2}) {
    const Tensor3 y = conv2d(x, k, s, 1, bias);
    for (int f = 0; f < 2; ++f)
      for (int i = 0; i < y.height; ++i)
        for (int j = 0; j < y.width; ++j) {
          double acc = bias[f];
          for (int c = 0; c < 3; ++c)
            for (int u = 0; u < 3; ++u)
              for (int v = 0; v < 3; ++v) {
                const int r = i * s + u - 1, q = j * s + v - 1;
                if (r < 0 || q < 0 || r >= 7 || q >= 6) continue;
                acc += static_cast<double>(k.data[((f * 3 + c) * 3 + u) * 3 + v]) * x.at(c, r, q);
              }
          EXPECT_NEAR(y.at(f, i, j), acc, 1e-5);
        }
  }
}

TEST(Conv2d, Linearity) {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor3 x = random_map(rng, 4, 11, 9), y = random_map(rng, 4, 11, 9);
    const Tensor k = random_kernel(rng, 3, 4, 3);
    const float a = static_cast<float>(rng.uniform(-2, 2)), b = static_cast<float>(rng.uniform(-2, 2));
    Tensor3 mix = x;
    for (std::size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = a * x.data[i] + b * y.data[i];
    const int stride = 1 + trial % 2;
    const Tensor3 lhs = conv2d(mix, k, stride, 1), cx = conv2d(x, k, stride, 1), cy = conv2d(y, k, stride, 1);
    for (std::size_t i = 0; i < lhs.data.size(); ++i) {
      const double rhs = static_cast<double>(a) * cx.data[i] + static_cast<double>(b) * cy.data[i];
      EXPECT_NEAR(lhs.data[i], rhs, 1e-5 * std::max(1.0, std::abs(rhs)));
    }
  }
}

TEST(Tconv2d, IdentityFactorOne) {
  Rng rng(5);
  const Tensor3 x = random_map(rng, 1, 4, 5);
  const Tensor3 y = tconv2d(x, Tensor({1, 1, 1, 1}, 1.f), 1);
  EXPECT_EQ(y.data, x.data);
}

TEST(Tconv2d, AdjointOfStridedConv) {
  Rng rng(6);
  struct Case {
    int cin, cout, h, w, f;
  };
  for (const Case c : {Case{1, 1, 4, 4, 2}, Case{3, 2, 6, 4, 2}, Case{2, 5, 3, 5, 4}}) {
    // conv maps (cout, H*f, W*f) -> (cin, H, W); tconv goes back.
    const Tensor k = random_kernel(rng, c.cin, c.cout, c.f);
    const Tensor3 x = random_map(rng, c.cout, c.h * c.f, c.w * c.f);
    const Tensor3 y = random_map(rng, c.cin, c.h, c.w);
    const Tensor3 cx = conv2d(x, k, c.f, 0);
    const Tensor3 ty = tconv2d(y, k, c.f);
    ASSERT_EQ(ty.height, c.h * c.f);
    ASSERT_EQ(ty.width, c.w * c.f);
    const double lhs = dot(cx, y), rhs = dot(x, ty);
    EXPECT_NEAR(lhs, rhs, 1e-5 * std::max(1.0, std::abs(lhs)));
  }
}

TEST(Tconv2d, UpsampleShape) {
  Rng rng(7);
  const Tensor3 x(8, 125, 110);
  const Tensor3 y = tconv2d(x, random_kernel(rng, 8, 8, 4), 4);
  EXPECT_EQ(y.height, 500);
  EXPECT_EQ(y.width, 440);
  EXPECT_THROW(tconv2d(x, random_kernel(rng, 8, 8, 3), 4), ShapeError);
  EXPECT_THROW(tconv2d(x, random_kernel(rng, 8, 8, 3), 0), ConfigError);
}

TEST(BatchNorm, AffinePerChannel) {
  Rng rng(8);
  const ParamSet base = init_params(rng, Architecture::car(4));
  const ParamSet p = with_param(
      with_param(with_param(with_param(base, "pfn.bn.gamma", {1.5f, 0.5f, 2.f, 1.f}), "pfn.bn.beta",
                            {0.1f, -0.2f, 0.f, 0.3f}),
                 "pfn.bn.running_mean", {0.2f, 0.f, -1.f, 0.5f}),
      "pfn.bn.running_var", {4.f, 0.25f, 1.f, 0.f});
  const auto bn = BatchNormAffine::from(p, "pfn.bn");
  const auto& g = p.get("pfn.bn.gamma").data;
  const auto& b = p.get("pfn.bn.beta").data;
  const auto& m = p.get("pfn.bn.running_mean").data;
  const auto& v = p.get("pfn.bn.running_var").data;
  for (int c = 0; c < 4; ++c) {
    auto ref = [&](double x) { return g[c] * (x - m[c]) / std::sqrt(v[c] + 1e-5) + b[c]; };
    // two-point interpolation: a = slope, c = intercept
    const double a = ref(1) - ref(0), c0 = ref(0);
    EXPECT_NEAR(bn.scale[c], a, 1e-5 * std::max(1.0, std::abs(a)));
    EXPECT_NEAR(bn.shift[c], c0, 1e-5 * std::max(1.0, std::abs(c0)));
    EXPECT_NEAR(bn.scale[c] * 3.7 + bn.shift[c], ref(3.7), 1e-4 * std::max(1.0, std::abs(ref(3.7))));
  }
}

TEST(Pfn, IdentityNetworkSinglePoint) {
  Rng rng(9);
  const ParamSet base = init_params(rng, Architecture::car(4));
  std::vector<float> w(4 * 9, 0.f);
  for (int c = 0; c < 4; ++c) w[c * 9 + c] = 1.f;
  ParamSet p = with_param(base, "pfn.linear.weight", w);
  p = with_param(p, "pfn.bn.running_var", std::vector<float>(4, 1.f - 1e-5f));  // exact identity scale
  GridSpec g;
  g.max_pillars = 2, g.max_points_per_pillar = 3;
  const std::vector<Point> pts = {{10.f, -0.5f, 0.75f, 0.25f}};
  Rng r(0);
  const PillarTensor t = pillarize(pts, g, r);
  const PillarFeatures f = pfn_forward(t, p);
  EXPECT_FLOAT_EQ(f.at(0, 0), 10.f);
  EXPECT_FLOAT_EQ(f.at(1, 0), 0.f);  // ReLU(-0.5)
  EXPECT_FLOAT_EQ(f.at(2, 0), 0.75f);
  EXPECT_FLOAT_EQ(f.at(3, 0), 0.25f);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(f.at(c, 1), 0.f);  // empty slot
}

TEST(Pfn, AllPaddingPillarIsZero) {
  Rng rng(10);
  const ParamSet p = with_param(init_params(rng, Architecture::car(8)), "pfn.bn.beta", std::vector<float>(8, 3.f));
  PillarTensor t(2, 4, {4, 4});
  t.indices[0] = {1, 1};  // used slot with no real points
  const PillarFeatures f = pfn_forward(t, p);
  for (int c = 0; c < 8; ++c) EXPECT_EQ(f.at(c, 0), 0.f);
}

TEST(Pfn, PointPermutationInvariant) {
  Rng rng(11);
  const ParamSet params = init_params(rng, Architecture::car(16));
  const PillarTensor base = small_tensor(3, 64, 32);
  PillarTensor shuffled = base;
  for (int p = 0; p < base.max_pillars; ++p) {
    const int n = base.valid_counts[p];
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
      for (int d = 0; d < kDecoratedDims; ++d) std::swap(shuffled.at(d, p, i), shuffled.at(d, p, j));
    }
  }
  EXPECT_EQ(pfn_forward(shuffled, params).data, pfn_forward(base, params).data);
}

TEST(Pfn, PillarSlotPermutationEquivariant) {
  Rng rng(12);
  const ParamSet params = init_params(rng, Architecture::car(8));
  const PillarTensor base = small_tensor(4, 40, 16);
  std::vector<int> perm(base.max_pillars);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = base.max_pillars - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
  PillarTensor moved = base;
  for (int p = 0; p < base.max_pillars; ++p) {
    const int q = perm[p];
    moved.indices[q] = base.indices[p];
    moved.valid_counts[q] = base.valid_counts[p];
    for (int n = 0; n < base.max_points; ++n) {
      moved.mask[static_cast<std::size_t>(q) * base.max_points + n] =
          base.mask[static_cast<std::size_t>(p) * base.max_points + n];
      for (int d = 0; d < kDecoratedDims; ++d) moved.at(d, q, n) = base.at(d, p, n);
    }
  }
  const PillarFeatures a = pfn_forward(base, params), b = pfn_forward(moved, params);
  for (int p = 0; p < base.max_pillars; ++p)
    for (int c = 0; c < a.channels; ++c) EXPECT_EQ(a.at(c, p), b.at(c, perm[p]));
}

TEST(Pfn, MaskedSlotsDoNotLeak) {
  // Padding rows set to large values must not change the output.
  Rng rng(13);
  const ParamSet params = init_params(rng, Architecture::car(8));
  const PillarTensor base = small_tensor(5, 32, 40);
  PillarTensor dirty = base;
  for (int p = 0; p < base.max_pillars; ++p)
    for (int n = base.valid_counts[p]; n < base.max_points; ++n)
      for (int d = 0; d < kDecoratedDims; ++d) dirty.at(d, p, n) = 100.f;
  EXPECT_EQ(pfn_forward(dirty, params).data, pfn_forward(base, params).data);
}

// The linear layer as a 1x1 convolution over the (9, P, N) tensor.
TEST(Pfn, MatchesOneByOneConvolution) {
  Rng rng(14);
  const int C = 16;
  const ParamSet params = init_params(rng, Architecture::car(C));
  const PillarTensor t = small_tensor(6, 48, 20);
  Tensor3 as_image(kDecoratedDims, t.max_pillars, t.max_points);
  as_image.data = t.data;
  Tensor k({static_cast<std::uint32_t>(C), 9, 1, 1});
  k.data = params.get("pfn.linear.weight").data;
  Tensor3 y = conv2d(as_image, k, 1, 0);
  batchnorm_relu_inplace(y, BatchNormAffine::from(params, "pfn.bn"));
  const PillarFeatures f = pfn_forward(t, params);
  for (int p = 0; p < t.max_pillars; ++p)
    for (int c = 0; c < C; ++c) {
      float best = 0.f;
      for (int n = 0; n < t.max_points; ++n)
        if (t.valid(p, n)) best = std::max(best, y.at(c, p, n));
      EXPECT_NEAR(f.at(c, p), best, 1e-6 * std::max(1.f, best));
    }
}

TEST(Backbone, CarShapeAndFinite) {
  Rng rng(15);
  const ParamSet params = init_params(rng, Architecture::car());
  const Tensor3 out = backbone_forward(Tensor3(64, 500, 440), params);
  EXPECT_EQ(out.channels, 384);
  EXPECT_EQ(out.height, 250);
  EXPECT_EQ(out.width, 220);
  EXPECT_TRUE(out.all_finite());
  const HeadMaps maps = head_forward(out, params);
  EXPECT_EQ(maps.cls.channels, 2);
  EXPECT_EQ(maps.box.channels, 14);
  EXPECT_EQ(maps.dir.channels, 4);
  EXPECT_EQ(maps.cls.height, 250);
  EXPECT_EQ(maps.cls.width, 220);
}

TEST(Backbone, PedCycShape) {
  Rng rng(16);
  const ParamSet params = init_params(rng, Architecture::pedcyc());
  const Tensor3 in = random_map(rng, 64, 250, 300);
  const Tensor3 out = backbone_forward(in, params);
  EXPECT_EQ(out.channels, 384);
  EXPECT_EQ(out.height, 250);
  EXPECT_EQ(out.width, 300);
  EXPECT_TRUE(out.all_finite());
  EXPECT_EQ(head_forward(out, params).cls.channels, 4);
}

TEST(Head, ZeroWeightsGiveBias) {
  Rng rng(17);
  const ParamSet params = init_params(rng, Architecture::car(4), InitMode::zero);
  Rng other(18);
  const HeadMaps maps = head_forward(random_map(other, 24, 5, 6), params);
  for (float v : maps.cls.data) EXPECT_EQ(v, kClsPriorBias);
  for (float v : maps.box.data) EXPECT_EQ(v, 0.f);
}

TEST(InitParams, BoundsMeanAndReproducibility) {
  Rng a(19), b(19);
  const ParamSet p = init_params(a, Architecture::car()), q = init_params(b, Architecture::car());
  EXPECT_EQ(p.tensors(), q.tensors());
  for (const auto& [name, t] : p.tensors()) {
    if (name.ends_with(".gamma") || name.ends_with(".running_var")) {
      for (float v : t.data) ASSERT_EQ(v, 1.f) << name;
      continue;
    }
    if (!name.ends_with(".weight")) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(t.size() / t.shape[0]));
    double s = 0;
    for (float v : t.data) {
      ASSERT_LE(std::abs(v), bound) << name;
      s += v;
    }
    // U(-b, b) has sd b / sqrt(3); the mean of n draws has sd b / sqrt(3 n)
    const double n = static_cast<double>(t.size());
    EXPECT_LT(std::abs(s / n), 3 * bound / std::sqrt(3 * n)) << name;
  }
}

TEST(Container, RoundTripBitExact) {
  pptest::TempDir dir("net");
  Rng rng(20);
  const ParamSet p = init_params(rng, Architecture::car(8));
  save_params(p, dir / "w.ppw");
  const ParamSet q = load_params(dir / "w.ppw", Architecture::car(8));
  ASSERT_EQ(p.tensors().size(), q.tensors().size());
  for (const auto& [name, t] : p.tensors()) {
    const Tensor& u = q.get(name);
    ASSERT_EQ(t.shape, u.shape);
    ASSERT_EQ(0, std::memcmp(t.data.data(), u.data.data(), t.data.size() * sizeof(float))) << name;
  }
  save_params(q, dir / "w2.ppw");
  EXPECT_TRUE(pptest::same_bytes(dir / "w.ppw", dir / "w2.ppw"));
}

TEST(Container, ByteLayout) {
  TensorMap m;
  Tensor t({2});
  t.data = {1.f, -2.f};
  m.emplace("ab", t);
  const auto bytes = encode_container(m);
  const std::vector<std::uint8_t> want = {'P', 'P', 'W', '1', 1, 0, 0, 0,    2,    0,    'a',  'b', 1,
                                          2,   0,   0,   0,   0, 0, 0x80, 0x3f, 0,    0,    0,    0xc0};
  EXPECT_EQ(bytes, want);
  EXPECT_EQ(decode_container(bytes), m);
}

TEST(Container, RejectsCorruptInput) {
  Rng rng(21);
  const auto bytes = encode_container(init_params(rng, Architecture::car(4)).tensors());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_container(bad), FormatError);
  bad = bytes;
  bad[3] = '2';
  EXPECT_THROW(decode_container(bad), FormatError);
  bad = bytes;
  bad.resize(bad.size() - 1);
  EXPECT_THROW(decode_container(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_container(bad), FormatError);
}

TEST(Container, ShapeMismatchIsNamed) {
  Rng rng(22);
  TensorMap t = init_params(rng, Architecture::car()).tensors();
  t["pfn.linear.weight"] = Tensor({64, 8});
  try {
    ParamSet(Architecture::car(), t);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pfn.linear.weight"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(64,9)"), std::string::npos) << e.what();
  }
}

TEST(Container, UnknownNameRejected) {
  Rng rng(23);
  TensorMap t = init_params(rng, Architecture::car(4)).tensors();
  t.emplace("extra.weight", Tensor({1}));
  EXPECT_THROW(ParamSet(Architecture::car(4), t), ShapeError);
}

TEST(Forward, GoldenChecksumStable) {
  // Same seed and frame twice: bit-identical maps.
  RunConfig cfg;
  cfg.net_features = 8;
  Rng init(24);
  const ParamSet params = init_params(init, architecture_for(cfg));
  const Scene s = synthetic::make_scene(1);
  const auto pts = kitti::fov_filter(s.points, kitti::CalibMatrices::kitti_typical(), 1242, 375);
  Rng a(5), b(5);
  const NetworkOutput x = forward(pts, cfg, params, a), y = forward(pts, cfg, params, b);
  EXPECT_EQ(x.maps.cls.data, y.maps.cls.data);
  EXPECT_EQ(x.maps.box.data, y.maps.box.data);
  EXPECT_EQ(x.maps.dir.data, y.maps.dir.data);
  EXPECT_TRUE(x.maps.cls.all_finite());
}
