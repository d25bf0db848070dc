#include <gtest/gtest.h>

#include <cmath>

#include "arrag/sfb.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace arrag {
namespace {

struct Instance {
  HiddenGrid<double> grid;
  std::vector<std::vector<double>> centers;
  std::size_t i = 0, j = 0;
  std::vector<double> h_res, delta;
  SfbParams<double> params;

  SfbLayerInput<double> input() const { return {&grid, i, j, h_res, delta}; }
};

std::vector<double> normal_vec(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

/// Random grid where the cells before (i, j) in raster order are generated.
Instance random_instance(std::size_t side, std::size_t d, std::size_t q, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  Instance in;
  in.grid = HiddenGrid<double>(side, d);
  in.i = rng.below(side);
  in.j = rng.below(side);
  for (std::size_t n = 0; n < in.i * side + in.j; ++n) in.grid.set(n / side, n % side, normal_vec(d, rng));
  for (std::size_t c = 0; c < k; ++c) in.centers.push_back(normal_vec(d, rng));
  in.h_res = normal_vec(d, rng);
  in.delta = normal_vec(d, rng);
  in.params = SfbParams<double>(q, d);
  for (auto& x : in.params.data()) x = 0.3 * rng.normal();
  return in;
}

std::vector<SfbConfig> all_configs() {
  std::vector<SfbConfig> out;
  for (auto w : {ScaleWeighting::kSoftmax, ScaleWeighting::kUniform})
    for (auto s : {ScoreMode::kRaw, ScoreMode::kSigmoid})
      for (auto a : {SmoothingActivation::kNone, SmoothingActivation::kTanh}) out.push_back({w, s, a});
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t e = 0; e < a.size(); ++e) m = std::max(m, std::abs(a[e] - b[e]));
  return m;
}

TEST(SfbForward, MatchesStraightLoopOracle) {
  std::uint64_t seed = 0;
  for (const auto& cfg : all_configs())
    for (int t = 0; t < 8; ++t) {
      const auto in = random_instance(t % 2 ? 8 : 4, t % 3 ? 4 : 8, t % 4 == 0 ? 2 : 3, 1 + t % 3, ++seed);
      const auto got = sfb_forward(in.input(), std::span<const std::vector<double>>(in.centers), in.params, cfg);
      const auto grid = oracle::to_grid(in.grid);
      const auto want = oracle::sfb_forward(grid, in.centers, in.i, in.j, in.h_res, in.delta, in.params, cfg);
      EXPECT_LT(max_abs_diff(got.out, want), 1e-10);
      for (std::size_t k = 0; k < in.centers.size(); ++k)
        EXPECT_LT(max_abs_diff(got.refined[k], oracle::smooth(grid, in.centers[k], in.i, in.j, in.params, cfg)), 1e-10);
    }
}

TEST(Smooth, SingleScaleIsThatScale) {
  auto in = random_instance(5, 4, 2, 1, 77);
  const auto a = smooth(in.grid, std::span<const double>(in.centers[0]), in.i, in.j, in.params);
  in.params.omega()[0] = 42.0;
  const auto b = smooth(in.grid, std::span<const double>(in.centers[0]), in.i, in.j, in.params);
  EXPECT_EQ(a, b);
  const auto w = scale_weights(in.params, ScaleWeighting::kSoftmax);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0], 1.0);
}

TEST(Smooth, ZeroKernelsGiveZero) {
  auto in = random_instance(6, 4, 3, 1, 5);
  std::fill(in.params.data().begin(), in.params.data().end(), 0.0);
  const auto r = smooth(in.grid, std::span<const double>(in.centers[0]), in.i, in.j, in.params);
  for (double x : r) EXPECT_EQ(x, 0.0);
}

TEST(Smooth, IsLocalAndDoesNotMutateGrid) {
  const std::size_t side = 12, q = 3;
  auto in = random_instance(side, 4, q, 1, 6);
  in.i = 9;
  in.j = 9;
  Rng rng(7);
  for (std::size_t n = 0; n < 9 * side + 9; ++n) in.grid.set(n / side, n % side, normal_vec(4, rng));
  const auto before = in.grid.data;
  const auto ref = smooth(in.grid, std::span<const double>(in.centers[0]), in.i, in.j, in.params);
  EXPECT_EQ(in.grid.data, before);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const long dr = std::abs(static_cast<long>(r) - 9), dc = std::abs(static_cast<long>(c) - 9);
      if (std::max(dr, dc) < static_cast<long>(q) || !in.grid.generated[r * side + c]) continue;
      auto moved = in.grid;
      moved.data[(r * side + c) * 4] += 10.0;
      EXPECT_EQ(smooth(moved, std::span<const double>(in.centers[0]), in.i, in.j, in.params), ref);
    }
}

TEST(Smooth, WindowsSpanningWholeGridAreZeroPadded) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto in = random_instance(3, 3, 3, 1, 300 + seed);
    const auto got = smooth(in.grid, std::span<const double>(in.centers[0]), in.i, in.j, in.params);
    const auto want = oracle::smooth(oracle::to_grid(in.grid), in.centers[0], in.i, in.j, in.params, {});
    EXPECT_LT(max_abs_diff(got, want), 1e-10);
  }
  HiddenGrid<double> narrow(2, 3);
  const std::vector<double> c(3, 1.0);
  EXPECT_THROW(smooth(narrow, std::span<const double>(c), 0, 0, SfbParams<double>(3, 3)), Error);
}

TEST(ScaleWeights, SoftmaxIsNormalised) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    SfbParams<double> p(2 + rng.below(4), 2);
    for (auto& x : p.omega()) x = 3 * rng.normal();
    const auto w = scale_weights(p, ScaleWeighting::kSoftmax);
    double s = 0;
    for (double x : w) {
      EXPECT_GT(x, 0.0);
      EXPECT_LE(x, 1.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Compatibility, DotProducts) {
  Rng rng(10);
  const auto w = normal_vec(6, rng);
  std::vector<std::vector<double>> refined = {w, normal_vec(6, rng), normal_vec(6, rng)};
  const auto s = compatibility<double>(refined, w);
  double ww = 0;
  for (double x : w) ww += x * x;
  EXPECT_NEAR(s[0], ww, 1e-12);
  for (std::size_t k = 0; k < refined.size(); ++k) {
    long double ref = 0;
    for (std::size_t e = 0; e < 6; ++e) ref += static_cast<long double>(refined[k][e]) * w[e];
    EXPECT_NEAR(s[k], static_cast<double>(ref), 1e-12);
  }
  const std::vector<double> zero(6, 0.0);
  for (double x : compatibility<double>(refined, zero)) EXPECT_EQ(x, 0.0);
  for (double x : compatibility<double>(refined, zero, ScoreMode::kSigmoid)) EXPECT_EQ(x, 0.5);
}

TEST(Blend, ResidualAndCancellation) {
  Rng rng(11);
  const auto h = normal_vec(4, rng), dh = normal_vec(4, rng), r = normal_vec(4, rng);
  std::vector<double> plain(4);
  for (int e = 0; e < 4; ++e) plain[e] = h[e] + dh[e];
  EXPECT_EQ(blend<double>(h, dh, {}, {}), plain);
  const std::vector<std::vector<double>> two = {r, r};
  const std::vector<double> zero = {0, 0}, cancel = {1, -1};
  EXPECT_EQ(blend<double>(h, dh, two, zero), plain);
  EXPECT_EQ(blend<double>(h, dh, two, cancel), plain);
  const std::vector<double> one = {1};
  EXPECT_THROW(blend<double>(h, dh, two, one), Error);
}

TEST(SfbForward, ZeroProjectionIsIdentity) {
  auto in = random_instance(6, 4, 3, 3, 12);
  std::fill(in.params.w().begin(), in.params.w().end(), 0.0);
  const auto out = sfb_forward(in.input(), std::span<const std::vector<double>>(in.centers), in.params).out;
  for (int e = 0; e < 4; ++e) EXPECT_EQ(out[e], in.h_res[e] + in.delta[e]);
  // Freshly initialised modules contribute exactly zero as well.
  in.params = SfbParams<double>::init(3, 4, 1);
  const auto fresh = sfb_forward(in.input(), std::span<const std::vector<double>>(in.centers), in.params).out;
  for (int e = 0; e < 4; ++e) EXPECT_EQ(fresh[e], in.h_res[e] + in.delta[e]);
}

TEST(SfbForward, ConstructedPassthrough) {
  auto in = random_instance(6, 4, 2, 1, 13);
  std::fill(in.params.data().begin(), in.params.data().end(), 0.0);
  const auto& c = in.centers[0];
  double cc = 0;
  for (double x : c) cc += x * x;
  for (int e = 0; e < 4; ++e) {
    in.params.bias2(2)[e] = c[e];
    in.params.w()[e] = c[e] / cc;
  }
  const auto out = sfb_forward(in.input(), std::span<const std::vector<double>>(in.centers), in.params).out;
  for (int e = 0; e < 4; ++e) EXPECT_NEAR(out[e], in.h_res[e] + in.delta[e] + c[e], 1e-12);
}

TEST(LiftRetrieved, TableLookup) {
  std::vector<double> table(5 * 3);
  for (std::size_t k = 0; k < table.size(); ++k) table[k] = static_cast<double>(k) * 0.5;
  const EmbeddingView<double> emb{table.data(), 5, 3};
  const std::vector<RetrievalHit> hits = {{4, {}, 0.0, 0}, {1, {}, 0.0, 0}, {4, {}, 0.0, 0}};
  const auto rows = lift_retrieved<double>(hits, emb);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], std::vector<double>({6.0, 6.5, 7.0}));
  EXPECT_EQ(rows[1], std::vector<double>({1.5, 2.0, 2.5}));
  EXPECT_EQ(rows[0], rows[2]);
  EXPECT_TRUE(lift_retrieved<double>({}, emb).empty());
  const std::vector<RetrievalHit> bad = {{5, {}, 0.0, 0}};
  EXPECT_THROW(lift_retrieved<double>(bad, emb), Error);
}

/// Scalar objective <upstream, out> and its finite-difference gradients.
struct GradientCheck {
  Instance in;
  std::vector<double> upstream;
  SfbConfig cfg;

  double objective() const {
    const auto out = sfb_forward(in.input(), std::span<const std::vector<double>>(in.centers), in.params, cfg).out;
    double s = 0;
    for (std::size_t e = 0; e < out.size(); ++e) s += upstream[e] * out[e];
    return s;
  }
  SfbGradients<double> analytic() const {
    return sfb_backward(in.input(), std::span<const std::vector<double>>(in.centers), in.params,
                        std::span<const double>(upstream), cfg);
  }
};

GradientCheck make_check(std::size_t side, std::size_t d, std::size_t q, std::size_t k, std::uint64_t seed,
                         SfbConfig cfg = {}) {
  GradientCheck g{random_instance(side, d, q, k, seed), {}, cfg};
  Rng rng(seed + 1000);
  g.upstream = normal_vec(d, rng);
  return g;
}

TEST(SfbBackward, ParameterGradientsMatchFiniteDifferences) {
  for (const auto& cfg : all_configs()) {
    auto chk = make_check(8, 8, 3, 2, 21, cfg);
    const auto grad = chk.analytic();
    double worst = 0;
    for (std::size_t p = 0; p < chk.in.params.data().size(); ++p) {
      const double fd = oracle::central_difference([&] { return chk.objective(); }, chk.in.params.data()[p], 1e-5);
      worst = std::max(worst, oracle::relative_error(grad.params.data()[p], fd));
    }
    EXPECT_LT(worst, 1e-4);
  }
}

TEST(SfbBackward, InputGradientsMatchFiniteDifferences) {
  auto chk = make_check(6, 4, 3, 2, 22);
  const auto grad = chk.analytic();
  double worst = 0;
  for (std::size_t k = 0; k < chk.in.centers.size(); ++k)
    for (std::size_t e = 0; e < 4; ++e) {
      const double fd = oracle::central_difference([&] { return chk.objective(); }, chk.in.centers[k][e], 1e-5);
      worst = std::max(worst, oracle::relative_error(grad.centers[k][e], fd));
    }
  for (std::size_t c = 0; c < chk.in.grid.data.size(); ++c) {
    if (!chk.in.grid.generated[c / 4]) continue;
    const double fd = oracle::central_difference([&] { return chk.objective(); }, chk.in.grid.data[c], 1e-5);
    worst = std::max(worst, oracle::relative_error(grad.grid.data[c], fd));
  }
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(grad.h_res[e], chk.upstream[e]);
    EXPECT_EQ(grad.delta[e], chk.upstream[e]);
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(SfbBackward, DirectionalDerivatives) {
  auto chk = make_check(8, 8, 3, 2, 23);
  const auto grad = chk.analytic();
  Rng rng(24);
  auto& theta = chk.in.params.data();
  const auto base = theta;
  for (int t = 0; t < 10; ++t) {
    const auto dir = normal_vec(theta.size(), rng);
    double analytic = 0;
    for (std::size_t p = 0; p < theta.size(); ++p) analytic += grad.params.data()[p] * dir[p];
    const double eps = 1e-5;
    for (std::size_t p = 0; p < theta.size(); ++p) theta[p] = base[p] + eps * dir[p];
    const double up = chk.objective();
    for (std::size_t p = 0; p < theta.size(); ++p) theta[p] = base[p] - eps * dir[p];
    const double down = chk.objective();
    theta = base;
    EXPECT_LT(oracle::relative_error(analytic, (up - down) / (2 * eps)), 1e-4);
  }
}

TEST(SfbBackward, DegenerateCases) {
  auto single = make_check(5, 4, 2, 2, 25);
  EXPECT_EQ(single.analytic().params.omega()[0], 0.0);
  auto zero = make_check(5, 4, 3, 2, 26);
  std::fill(zero.upstream.begin(), zero.upstream.end(), 0.0);
  const auto grads = zero.analytic();
  for (double g : grads.params.data()) EXPECT_EQ(g, 0.0);
}

TEST(Placement, EvenlySpacedLayers) {
  EXPECT_EQ(placement(12, 3), std::vector<std::size_t>({4, 8, 12}));
  EXPECT_EQ(placement(12, 1), std::vector<std::size_t>({12}));
  EXPECT_EQ(placement(4, 2), std::vector<std::size_t>({2, 4}));
  EXPECT_THROW(placement(4, 5), Error);
  EXPECT_THROW(placement(4, 0), Error);
  const auto stack = SfbStack<float>::init(4, 2, 3, 8, 0);
  EXPECT_EQ(stack.at_layer(0), nullptr);
  EXPECT_EQ(stack.at_layer(1), &stack.modules[0]);
  EXPECT_EQ(stack.index_at_layer(3), 1);
}

TEST(SfbFile, RoundTripIsBitExact) {
  auto p = SfbParams<float>::init(3, 8, 4);
  Rng rng(27);
  for (auto& x : p.omega()) x = static_cast<float>(rng.normal());
  for (auto& x : p.w()) x = static_cast<float>(rng.normal());
  testing::TempDir dir;
  save_sfb(p, dir.file("p.arsf"));
  EXPECT_EQ(load_sfb<float>(dir.file("p.arsf")), p);
  auto stack = SfbStack<float>::init(4, 2, 3, 8, 5);
  stack.modules[1] = p;
  save_sfb_stack(stack, dir.file("s.arsf"));
  const auto back = load_sfb_stack<float>(dir.file("s.arsf"), 4);
  EXPECT_EQ(back.modules, stack.modules);
  EXPECT_EQ(back.layers, stack.layers);
  const auto bytes = testing::read_file(dir.file("p.arsf"));
  testing::write_file(dir.file("t.arsf"), bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_sfb<float>(dir.file("t.arsf")), Error);
}

}  // namespace
}  // namespace arrag
