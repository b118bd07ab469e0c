#include <gtest/gtest.h>

#include "apo/kronprecond.hpp"

using namespace apo;

namespace {

KronBlocks random_blocks(Rng& rng, std::size_t fi, std::size_t fo) {
  return {random_normal(rng, fo, fo), random_normal(rng, fi, fi), random_normal(rng, fi, fo)};
}

Matrix dense_apply(const KronBlocks& k, const Matrix& g) {
  return unvec_cm<double>(matvec(dense_precond(k), vec_cm(g)), g.rows(), g.cols());
}

}  // namespace

TEST(ApplyPrecond, IdentityBlocksLeaveGradient) {
  Rng rng(1);
  const Matrix g = random_normal(rng, 3, 5);
  EXPECT_EQ(apply_precond(KronBlocks::identity(3, 5), g), g);
}

TEST(ApplyPrecond, ScalarBlocks) {
  const KronBlocks k{Matrix{{2.0}}, Matrix{{3.0}}, Matrix{{0.5}}};
  EXPECT_DOUBLE_EQ(apply_precond(k, Matrix{{4.0}})(0, 0), 36.0);
  EXPECT_DOUBLE_EQ(dense_precond(k)(0, 0), 9.0);
}

TEST(ApplyPrecond, MatchesDenseOn4x4) {
  Rng rng(2);
  const KronBlocks k = random_blocks(rng, 4, 4);
  const Matrix g = random_normal(rng, 4, 4);
  EXPECT_LT(max_rel_diff(apply_precond(k, g), dense_apply(k, g)), 1e-12);
}

TEST(ApplyPrecond, MatchesDenseForAllShapesUpTo8) {
  Rng rng(3);
  for (std::size_t fi = 1; fi <= 8; ++fi)
    for (std::size_t fo = 1; fo <= 8; ++fo) {
      const KronBlocks k = random_blocks(rng, fi, fo);
      const Matrix g = random_normal(rng, fi, fo);
      EXPECT_LT(max_rel_diff(apply_precond(k, g), dense_apply(k, g)), 1e-12) << fi << "x" << fo;
    }
}

TEST(ApplyPrecond, ShapeMismatch) {
  EXPECT_THROW(apply_precond(KronBlocks::identity(2, 3), Matrix(3, 2)), DimensionError);
  KronBlocks bad = KronBlocks::identity(2, 3);
  bad.a = Matrix::identity(2);
  EXPECT_THROW(apply_precond(bad, Matrix(2, 3)), DimensionError);
}

TEST(DensePrecond, IdentityBlocksGiveIdentity) {
  EXPECT_EQ(dense_precond(KronBlocks::identity(3, 4)), Matrix::identity(12));
}

TEST(DensePrecond, QuadraticInS) {
  Rng rng(4);
  KronBlocks k = random_blocks(rng, 3, 2);
  const Matrix p = dense_precond(k);
  k.s *= 1.7;
  EXPECT_LT(max_rel_diff(dense_precond(k), p * (1.7 * 1.7)), 1e-13);
}

TEST(DensePrecond, PsdAndSymmetric) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const KronBlocks k = random_blocks(rng, 1 + rng.below(8), 1 + rng.below(8));
    const Matrix p = dense_precond(k);
    EXPECT_TRUE(is_symmetric(p, 1e-12));
    EXPECT_GE(sym_eig_min(symmetrize(p)) / std::max(1.0, max_abs(p)), -1e-10);
  }
}

TEST(DensePrecond, NonAscentDirection) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    const KronBlocks k = random_blocks(rng, 1 + rng.below(6), 1 + rng.below(6));
    const Matrix g = random_normal(rng, k.fan_in(), k.fan_out());
    EXPECT_GE(dot(g.data(), apply_precond(k, g).data()), 0.0);
  }
}

TEST(DensePrecond, ScaleGuard) {
  EXPECT_THROW(dense_precond(KronBlocks::identity(8, 9)), OracleScaleError);
  EXPECT_NO_THROW(dense_precond(KronBlocks::identity(8, 8)));
}

TEST(InitIdentity, BlocksAndScale) {
  const Model m = make_mlp({5, 3, 2}, Activation::relu, Head::regression);
  const PrecondPhi phi = init_identity(m);
  EXPECT_EQ(phi.scale, 0.9);
  ASSERT_EQ(phi.blocks.size(), 2u);
  EXPECT_EQ(dense_precond(phi.blocks[0]), Matrix::identity(15));
  EXPECT_EQ(phi.blocks[1].s, Matrix(3, 2, 1.0));
  EXPECT_EQ(phi.bias_diag[1], Vector(2, 1.0));
}

TEST(InitIdentity, FirstStepIsPointNineGradient) {
  const Model m = make_mlp({4, 3, 2}, Activation::sigmoid, Head::regression);
  Rng rng(7);
  const ParamSet theta = init_params(m, rng);
  const Batch b{random_normal(rng, 5, 4), random_normal(rng, 5, 2), {}};
  const ParamSet g = grad_params(m, theta, b);
  const PrecondPhi phi = init_identity(m);
  EXPECT_EQ(precondition(phi, g), g);
  ParamSet expected = theta;
  expected.axpy(-0.9, g);
  EXPECT_EQ(apply_precond_update(theta, phi, g), expected);
}

TEST(ApplyPrecondUpdate, ZeroGradientKeepsTheta) {
  const Model m = make_mlp({3, 2}, Activation::linear, Head::regression);
  Rng rng(8);
  const ParamSet theta = init_params(m, rng);
  PrecondPhi phi = init_identity(m);
  phi.blocks[0] = random_blocks(rng, 3, 2);
  EXPECT_EQ(apply_precond_update(theta, phi, theta.zeros_like()), theta);
}

TEST(ApplyPrecondUpdate, IdentityWithUnitScaleIsSgd) {
  const Model m = make_mlp({3, 4, 2}, Activation::relu, Head::regression);
  Rng rng(9);
  const ParamSet theta = init_params(m, rng), g = init_params(m, rng);
  ParamSet expected = theta;
  expected.axpy(-1.0, g);
  EXPECT_EQ(apply_precond_update(theta, init_identity(m, 1.0), g), expected);
}

TEST(ApplyPrecondUpdate, ScalarLayer) {
  const Model m = make_mlp({1, 1}, Activation::linear, Head::regression, false);
  PrecondPhi phi = init_identity(m, 1.0);
  phi.blocks[0] = {Matrix{{2.0}}, Matrix{{3.0}}, Matrix{{0.5}}};
  const ParamSet theta{{{Matrix{{1.0}}, {}}}}, g{{{Matrix{{4.0}}, {}}}};
  EXPECT_DOUBLE_EQ(apply_precond_update(theta, phi, g).layers[0].weight(0, 0), -35.0);
}

TEST(ApplyPrecondUpdate, BiasUsesSquaredDiagonal) {
  const Model m = make_mlp({2, 2}, Activation::linear, Head::regression);
  PrecondPhi phi = init_identity(m, 1.0);
  phi.bias_diag[0] = {2.0, -0.5};
  const ParamSet theta{{{Matrix(2, 2), Vector{0.0, 0.0}}}}, g{{{Matrix(2, 2), Vector{1.0, 1.0}}}};
  const ParamSet r = apply_precond_update(theta, phi, g);
  EXPECT_DOUBLE_EQ(r.layers[0].bias[0], -4.0);
  EXPECT_DOUBLE_EQ(r.layers[0].bias[1], -0.25);
}

TEST(PrecondPhiTest, ParameterCount) {
  const Model m = make_mlp({6, 4, 3}, Activation::relu, Head::regression, false);
  const PrecondPhi phi = init_identity(m);
  EXPECT_EQ(phi.blocks[0].num_params(), 36u + 16u + 24u);
  EXPECT_EQ(phi.blocks[1].num_params(), 16u + 9u + 12u);
  EXPECT_EQ(phi.num_params(), 76u + 37u);
  EXPECT_EQ(phi.flatten().size(), phi.num_params());
}

TEST(PrecondPhiTest, FlattenAssignRoundTrip) {
  const Model m = make_mlp({3, 2, 2}, Activation::relu, Head::regression);
  Rng rng(10);
  PrecondPhi phi = init_identity(m);
  Vector v = phi.flatten();
  for (auto& x : v) x = rng.normal();
  phi.assign(v);
  EXPECT_EQ(phi.flatten(), v);
  EXPECT_NEAR(phi.frobenius_norm(), norm2(v), 1e-14);
}

TEST(PrecondVjp, MatchesFiniteDifferences) {
  Rng rng(11);
  const KronBlocks k = random_blocks(rng, 3, 2);
  const Matrix g = random_normal(rng, 3, 2), u = random_normal(rng, 3, 2);
  const KronBlocks d = apply_precond_vjp(k, g, u);
  auto f = [&](const KronBlocks& kk) { return dot(u.data(), apply_precond(kk, g).data()); };
  for (Matrix KronBlocks::*field : {&KronBlocks::a, &KronBlocks::b, &KronBlocks::s}) {
    for (std::size_t i = 0; i < (k.*field).size(); ++i) {
      KronBlocks kp = k, km = k;
      (kp.*field).data()[i] += 1e-6;
      (km.*field).data()[i] -= 1e-6;
      const double fd = (f(kp) - f(km)) / 2e-6;
      EXPECT_NEAR((d.*field).data()[i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(PrecondJson, RoundTrip) {
  const Model m = make_mlp({3, 2, 2}, Activation::relu, Head::regression);
  Rng rng(12);
  PrecondPhi phi = init_identity(m);
  Vector v = phi.flatten();
  for (auto& x : v) x = rng.normal();
  phi.assign(v);
  const nlohmann::json j = to_json(phi);
  EXPECT_TRUE(j["layers"].contains("layer0"));
  EXPECT_TRUE(j["layers"].contains("layer1"));
  const PrecondPhi back = precond_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back, phi);
}

TEST(PrecondConformance, LayerMismatchRejected) {
  const Model m = make_mlp({3, 2}, Activation::linear, Head::regression);
  const Model other = make_mlp({2, 2}, Activation::linear, Head::regression);
  Rng rng(13);
  EXPECT_THROW(precondition(init_identity(other), init_params(m, rng)), DimensionError);
}
