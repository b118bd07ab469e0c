#include <gtest/gtest.h>

#include <cmath>

#include "apo/oracles.hpp"

using namespace apo;

namespace {

ParamSet scalar_params(double w) { return ParamSet{{{Matrix{{w}}, {}}}}; }

double rel_norm_gap(const Vector& a, const Vector& b, const Vector& origin) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += (b[i] - origin[i]) * (b[i] - origin[i]);
  }
  return std::sqrt(num / den);
}

}  // namespace

// --- FSD curvature ----------------------------------------------------------

TEST(FsdHessian, ScalarLinearGaussianIsOne) {
  const Model m = make_mlp({1, 1}, Activation::linear, Head::regression, false);
  const Matrix g = fsd_hessian_exact(m, scalar_params(0.7), Matrix{{1.0}}, FsdKind::kl_gaussian);
  EXPECT_EQ(g, (Matrix{{1.0}}));
}

TEST(FsdHessian, SquaredDistanceDoublesGaussian) {
  const Model m = make_mlp({2, 3}, Activation::linear, Head::regression);
  Rng rng(1);
  const ParamSet theta = init_params(m, rng);
  const Matrix x = random_normal(rng, 5, 2);
  const Matrix gk = fsd_hessian_exact(m, theta, x, FsdKind::kl_gaussian);
  const Matrix gs = fsd_hessian_exact(m, theta, x, FsdKind::squared_distance);
  EXPECT_LT(max_rel_diff(gs, 2.0 * gk), 1e-14);
}

TEST(FsdHessian, SoftmaxOutputHessianAtEqualLogits) {
  const Matrix h = fsd_output_hessian(FsdKind::kl_categorical, Vector{0.0, 0.0});
  EXPECT_DOUBLE_EQ(h(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(h(1, 1), 0.25);
  EXPECT_DOUBLE_EQ(h(0, 1), -0.25);
  EXPECT_DOUBLE_EQ(h(1, 0), -0.25);
}

TEST(FsdHessian, SymmetricPsdOnRandomNetworks) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Model m = make_mlp({3, 4, 3}, trial % 2 ? Activation::sigmoid : Activation::relu, Head::classification);
    const ParamSet theta = init_params(m, rng);
    const Matrix g = fsd_hessian_exact(m, theta, random_normal(rng, 12, 3), FsdKind::kl_categorical);
    EXPECT_TRUE(is_symmetric(g));
    EXPECT_GE(sym_eig_min(g), -1e-10);
  }
}

TEST(FsdHessian, CategoricalMatchesSampledFisher) {
  const Model m = make_mlp({2, 3}, Activation::linear, Head::classification);
  Rng rng(3);
  const ParamSet theta = init_params(m, rng);
  const Matrix x = random_normal(rng, 4, 2);
  const Matrix exact = fsd_hessian_exact(m, theta, x, FsdKind::kl_categorical);
  const SampledFisher mc = sampled_fisher(m, theta, x, 100000, rng);
  for (std::size_t k = 0; k < exact.size(); ++k) {
    EXPECT_LE(std::abs(mc.mean.data()[k] - exact.data()[k]), 3.0 * mc.std_error.data()[k] + 1e-12) << "entry " << k;
  }
}

TEST(FsdHessian, EmptyInputsRejected) {
  const Model m = make_mlp({1, 1}, Activation::linear, Head::regression);
  EXPECT_THROW(fsd_hessian_exact(m, zero_params(m), Matrix(0, 1), FsdKind::kl_gaussian), ContractError);
}

TEST(FsdHessian, ParameterLimit) {
  const Model m = make_mlp({50, 50}, Activation::linear, Head::regression);
  EXPECT_THROW(fsd_hessian_exact(m, zero_params(m), Matrix(1, 50), FsdKind::kl_gaussian), OracleScaleError);
}

// --- Optimal dense preconditioner -------------------------------------------

TEST(OptimalPrecond, DiagonalCurvature) {
  const Matrix p = optimal_dense_precond(Matrix{{2, 0}, {0, 4}}, 1.0, 0.0);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p(1, 1), 0.25);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.0);
}

TEST(OptimalPrecond, WeightSpaceOnly) {
  const Matrix p = optimal_dense_precond(Matrix{{3, 1}, {1, 5}}, 0.0, 2.0);
  EXPECT_LT(max_abs(p - 0.5 * Matrix::identity(2)), 1e-15);
}

TEST(OptimalPrecond, IdentityCurvatureUnitLambdas) {
  const Matrix p = optimal_dense_precond(Matrix::identity(3), 1.0, 1.0);
  EXPECT_LT(max_abs(p - 0.5 * Matrix::identity(3)), 1e-15);
}

TEST(OptimalPrecond, InvertsRegularizedCurvature) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const Matrix r = random_normal(rng, n + 2, n);
    const Matrix g = symmetrize(matmul_tn(r, r));
    const double lf = rng.uniform(0.1, 3.0), lw = rng.uniform(0.01, 1.0);
    const Matrix p = optimal_dense_precond(g, lf, lw);
    EXPECT_LE(max_abs(matmul(p, regularized_curvature(g, lf, lw)) - Matrix::identity(n)), 1e-8);
  }
}

TEST(OptimalPrecond, Errors) {
  EXPECT_THROW(optimal_dense_precond(Matrix::identity(2), -1.0, 1.0), ContractError);
  EXPECT_THROW(optimal_dense_precond(Matrix{{1, 0}, {0, 0}}, 1.0, 0.0), NumericalError);
  EXPECT_THROW(optimal_dense_precond(Matrix(2, 3), 1.0, 1.0), DimensionError);
}

TEST(VerifyOptimalPrecond, DiagonalCase) {
  Rng rng(5);
  const Matrix grads = random_normal(rng, 16, 2);
  const Report r = verify_thm1(Matrix{{2, 0}, {0, 4}}, grads, 1.0, 0.5, rng);
  ASSERT_EQ(r.checks.size(), 2u);
  EXPECT_TRUE(r.all_pass()) << r.checks[0].measured << " " << r.checks[1].measured;
}

TEST(VerifyOptimalPrecond, NoFunctionSpaceTerm) {
  Rng rng(6);
  const Matrix grads = random_normal(rng, 16, 3);
  EXPECT_TRUE(verify_thm1(Matrix{{1, 0.2, 0}, {0.2, 1, 0}, {0, 0, 1}}, grads, 0.0, 1.5, rng).all_pass());
}

TEST(VerifyOptimalPrecond, RandomInstancesPass) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng.below(12);
    const Matrix r = random_normal(rng, m, m);
    const Matrix g = symmetrize(matmul_tn(r, r));
    const Matrix grads = random_normal(rng, 4 * m, m);
    EXPECT_TRUE(verify_thm1(g, grads, rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0), rng).all_pass()) << m;
  }
}

TEST(VerifyOptimalPrecond, OffsetCandidateFails) {
  Rng rng(8);
  const Matrix g{{2, 0}, {0, 4}};
  const Matrix grads = random_normal(rng, 16, 2);
  Matrix off = optimal_dense_precond(g, 1.0, 0.5);
  for (auto& v : off.data()) v += 1e-2;
  const Report r = verify_thm1(g, grads, 1.0, 0.5, rng, off);
  EXPECT_FALSE(r.checks[0].pass);
  EXPECT_FALSE(r.all_pass());
}

TEST(VerifyOptimalPrecond, Guards) {
  Rng rng(9);
  EXPECT_THROW(verify_thm1(Matrix::identity(13), random_normal(rng, 30, 13), 1, 1, rng), OracleScaleError);
  // Rank-one second moment.
  EXPECT_THROW(verify_thm1(Matrix::identity(2), Matrix{{1, 1}, {2, 2}}, 1, 1, rng), ContractError);
}

TEST(QuadraticMetaGradient, MatchesFiniteDifferences) {
  Rng rng(10);
  const Matrix r = random_normal(rng, 4, 4);
  const Matrix g = symmetrize(matmul_tn(r, r));
  const Matrix grads = random_normal(rng, 10, 4);
  const Matrix p = random_normal(rng, 4, 4);
  const Matrix an = quadratic_meta_gradient(p, g, grads, 0.7, 0.3);
  const double h = 1e-6;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      Matrix pp = p, pm = p;
      pp(i, j) += h;
      pm(i, j) -= h;
      const double fd = (quadratic_meta_objective(pp, g, grads, 0.7, 0.3) -
                         quadratic_meta_objective(pm, g, grads, 0.7, 0.3)) / (2 * h);
      EXPECT_NEAR(fd, an(i, j), 1e-6 * std::max(1.0, std::abs(an(i, j))));
    }
}

// --- Closed-form steps ------------------------------------------------------

TEST(ApproxPpm, ZeroGradientStaysPut) {
  const Vector u = approx_ppm_update(Vector{1.0, -2.0}, Vector{0.0, 0.0}, Matrix{{2, 0.5}, {0.5, 1}}, 1.0, 1.0);
  EXPECT_EQ(u, (Vector{1.0, -2.0}));
}

TEST(ApproxPpm, ScalarCase) {
  const Vector u = approx_ppm_update(Vector{0.0}, Vector{2.0}, Matrix{{1.0}}, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(u[0], -1.0);
}

TEST(ApproxPpm, LargeWeightPenaltyFreezes) {
  double prev = std::numeric_limits<double>::infinity();
  for (double lw : {1.0, 1e2, 1e4, 1e8}) {
    const Vector u = approx_ppm_update(Vector{1.0, 1.0}, Vector{3.0, -1.0}, Matrix{{1, 0}, {0, 2}}, 1.0, lw);
    const double step = std::hypot(u[0] - 1.0, u[1] - 1.0);
    EXPECT_LT(step, prev);
    prev = step;
  }
  EXPECT_LT(prev, 1e-7);
}

TEST(ApproxPpm, ParamSetOverloadAgrees) {
  const ParamSet theta{{{Matrix{{1.0, 2.0}}, Vector{0.5, -0.5}}}};
  const ParamSet grad{{{Matrix{{0.1, -0.3}}, Vector{0.2, 0.4}}}};
  const Matrix g = Matrix::identity(4) * 2.0;
  EXPECT_EQ(approx_ppm_update(theta, grad, g, 1.0, 1.0).flatten(),
            approx_ppm_update(theta.flatten(), grad.flatten(), g, 1.0, 1.0));
}

TEST(ApproxPpm, SizeMismatch) {
  EXPECT_THROW(approx_ppm_update(Vector{0.0}, Vector{1.0, 1.0}, Matrix::identity(2), 1, 1), DimensionError);
}

TEST(DampedNewton, ExactNewtonOnQuadratic) {
  // J = (theta - 0)^2 with H = 2, g = 2 at theta = 1.
  EXPECT_NEAR(damped_newton_update(Vector{1.0}, Vector{2.0}, Matrix{{2.0}}, 0.0)[0], 0.0, 1e-15);
}

TEST(DampedNewton, DampingHalvesTheStep) {
  EXPECT_DOUBLE_EQ(damped_newton_update(Vector{1.0}, Vector{2.0}, Matrix{{2.0}}, 2.0)[0], 0.5);
}

TEST(DampedNewton, ZeroGradient) {
  EXPECT_EQ(damped_newton_update(Vector{3.0, 4.0}, Vector{0.0, 0.0}, Matrix::identity(2), 1.0), (Vector{3.0, 4.0}));
}

TEST(LossHessianFd, QuadraticRegression) {
  // Loss mean (x w - y)^2 has Hessian 2 mean x^2.
  const Model m = make_mlp({1, 1}, Activation::linear, Head::regression, false);
  const Batch b{Matrix{{1.0}, {2.0}}, Matrix{{0.0}, {1.0}}, {}};
  const Matrix h = loss_hessian_fd(m, scalar_params(0.3), b);
  EXPECT_NEAR(h(0, 0), 5.0, 1e-6);
}

// --- Exact proximal step ----------------------------------------------------

TEST(ExactPpm, ExactFitIsFixedPoint) {
  const Model m = make_mlp({1, 1}, Activation::linear, Head::regression);
  const ParamSet theta{{{Matrix{{2.0}}, Vector{1.0}}}};
  const Batch b{Matrix{{1.0}, {-1.0}}, Matrix{{3.0}, {-1.0}}, {}};
  const PpmProblem p{m, theta, b, b, 1.0, 1.0, FsdKind::kl_gaussian};
  const PpmResult r = exact_ppm_solve(p);
  EXPECT_EQ(r.u, theta);
  EXPECT_EQ(r.iterations, 0u);
  EXPECT_EQ(r.objective, 0.0);
}

TEST(ExactPpm, OneParameterClosedForm) {
  // 0.5 u^2 + 0.5 (u - 1)^2 is minimized at u = 0.5.
  const Model m = make_mlp({1, 1}, Activation::linear, Head::regression, false);
  const ParamSet theta = scalar_params(1.0);
  const Batch b{Matrix{{1.0 / std::sqrt(2.0)}}, Matrix{{0.0}}, {}};
  for (PpmMethod method : {PpmMethod::gradient_descent, PpmMethod::lbfgs}) {
    PpmSolveOptions opt;
    opt.method = method;
    const PpmResult r = exact_ppm_solve({m, theta, b, b, 0.0, 1.0, FsdKind::kl_gaussian}, opt);
    EXPECT_NEAR(r.u.layers[0].weight(0, 0), 0.5, 1e-10);
    EXPECT_NEAR(r.objective, 0.25, 1e-12);
    EXPECT_LE(r.grad_norm, 1e-10);
  }
}

TEST(ExactPpm, HugeWeightPenaltyBarelyMoves) {
  const Model m = make_mlp({2, 3, 1}, Activation::sigmoid, Head::regression);
  Rng rng(11);
  const ParamSet theta = init_params(m, rng);
  const Batch b{random_normal(rng, 4, 2), random_normal(rng, 4, 1), {}};
  const PpmResult r = exact_ppm_solve({m, theta, b, b, 0.0, 1e6, FsdKind::kl_gaussian});
  const Vector g = grad_params(m, theta, b).flatten();
  double dist = 0.0;
  const Vector u = r.u.flatten(), t = theta.flatten();
  for (std::size_t i = 0; i < u.size(); ++i) dist += (u[i] - t[i]) * (u[i] - t[i]);
  EXPECT_LE(std::sqrt(dist), 1.01 * norm2(g) / 1e6);
}

TEST(ExactPpm, ClosedFormApproachesExactAsPenaltyGrows) {
  const Model m = make_mlp({1, 4, 1}, Activation::sigmoid, Head::regression);
  Rng rng(12);
  const ParamSet theta = init_params(m, rng);
  const Batch b{Matrix{{0.5}}, Matrix{{2.0}}, {}};
  const Batch fsd_b{random_normal(rng, 8, 1), Matrix(8, 1), {}};
  const Matrix gfsd = fsd_hessian_exact(m, theta, fsd_b.inputs, FsdKind::kl_gaussian);
  const ParamSet grad = grad_params(m, theta, b);
  std::vector<double> gaps;
  for (double lw : {10.0, 100.0, 1000.0}) {
    const Vector exact = exact_ppm_solve({m, theta, b, fsd_b, 1.0, lw, FsdKind::kl_gaussian}).u.flatten();
    const Vector approx = approx_ppm_update(theta, grad, gfsd, 1.0, lw).flatten();
    gaps.push_back(rel_norm_gap(approx, exact, theta.flatten()));
  }
  EXPECT_GT(gaps[0], gaps[1]);
  EXPECT_GT(gaps[1], gaps[2]);
}

TEST(ExactPpm, IterationCapThrows) {
  const Model m = make_mlp({2, 3, 1}, Activation::sigmoid, Head::regression);
  Rng rng(13);
  const ParamSet theta = init_params(m, rng);
  const Batch b{random_normal(rng, 4, 2), random_normal(rng, 4, 1), {}};
  PpmSolveOptions opt;
  opt.max_iter = 2;
  try {
    exact_ppm_solve({m, theta, b, b, 1.0, 0.1, FsdKind::kl_gaussian}, opt);
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.last_grad_norm(), 0.0);
  }
}

TEST(ExactPpm, Guards) {
  const Model m = make_mlp({1, 1}, Activation::linear, Head::regression);
  const ParamSet theta = zero_params(m);
  const Batch b{Matrix{{1.0}}, Matrix{{1.0}}, {}};
  PpmSolveOptions opt;
  opt.tol = 0.0;
  EXPECT_THROW(exact_ppm_solve({m, theta, b, b, 1, 1, FsdKind::kl_gaussian}, opt), ContractError);
  const Model big = make_mlp({30, 30}, Activation::linear, Head::regression);
  const ParamSet tb = zero_params(big);
  const Batch bb{Matrix(1, 30), Matrix(1, 30), {}};
  EXPECT_THROW(exact_ppm_solve({big, tb, bb, bb, 1, 1, FsdKind::kl_gaussian}), OracleScaleError);
}

// --- KFAC -------------------------------------------------------------------

TEST(KfacBlocks, SingleExampleOuterProducts) {
  const Model m = make_mlp({2, 2}, Activation::linear, Head::regression);
  Rng rng(14);
  const ParamSet theta = init_params(m, rng);
  const Matrix x{{0.5, -2.0}};
  auto [out, trace] = forward(m, theta, x);
  const Matrix d{{1.0, 3.0}};
  const auto f = kfac_blocks(m, theta, trace, d);
  ASSERT_EQ(f.size(), 1u);
  const Matrix a{{0.25, -1.0, 0.5}, {-1.0, 4.0, -2.0}, {0.5, -2.0, 1.0}};
  EXPECT_LT(max_abs(f[0].a - a), 1e-15);
  EXPECT_LT(max_abs(f[0].b - Matrix{{1.0, 3.0}, {3.0, 9.0}}), 1e-15);
}

TEST(KfacBlocks, ShapesAndPsd) {
  const Model m = make_mlp({3, 5, 2}, Activation::relu, Head::classification);
  Rng rng(15);
  const ParamSet theta = init_params(m, rng);
  const auto f = kfac_blocks(m, theta, random_normal(rng, 20, 3), rng);
  ASSERT_EQ(f.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(f[l].a.rows(), m.layers[l].fan_in + 1);
    EXPECT_EQ(f[l].a.cols(), m.layers[l].fan_in + 1);
    EXPECT_EQ(f[l].b.rows(), m.layers[l].fan_out);
    EXPECT_GE(sym_eig_min(f[l].a), -1e-12);
    EXPECT_GE(sym_eig_min(f[l].b), -1e-12);
  }
}

TEST(KfacBlocks, EmptyDatasetRejected) {
  const Model m = make_mlp({2, 2}, Activation::linear, Head::regression);
  Rng rng(16);
  EXPECT_THROW(kfac_blocks(m, zero_params(m), Matrix(0, 2), rng), ContractError);
}

TEST(KfacUpdate, IdentityFactorsGiveSgd) {
  const ParamSet theta{{{Matrix{{1.0, 2.0}}, Vector{3.0, 4.0}}}};
  const ParamSet grad{{{Matrix{{0.5, -1.0}}, Vector{2.0, 0.0}}}};
  const std::vector<KfacFactors> id{{Matrix::identity(2), Matrix::identity(2)}};
  const ParamSet out = kfac_update(theta, grad, id, 0.0, 0.1);
  ParamSet sgd = theta;
  sgd.axpy(-0.1, grad);
  EXPECT_LT(max_rel_diff(Matrix::column(out.flatten()), Matrix::column(sgd.flatten())), 1e-15);
}

TEST(KfacUpdate, ScalarCase) {
  const ParamSet out =
      kfac_update(scalar_params(2.0), scalar_params(1.0), {{Matrix{{2.0}}, Matrix{{0.5}}}}, 0.0, 1.0);
  EXPECT_DOUBLE_EQ(out.layers[0].weight(0, 0), 1.0);
}

TEST(KfacUpdate, HeavyDampingFreezes) {
  const ParamSet out =
      kfac_update(scalar_params(2.0), scalar_params(1.0), {{Matrix{{2.0}}, Matrix{{0.5}}}}, 1e8, 1.0);
  EXPECT_NEAR(out.layers[0].weight(0, 0), 2.0, 1e-15);
}

TEST(KfacUpdate, Errors) {
  EXPECT_THROW(kfac_update(scalar_params(1), scalar_params(1), {{Matrix{{1.0}}, Matrix{{1.0}}}}, -1.0, 1.0),
               ContractError);
  EXPECT_THROW(kfac_update(scalar_params(1), scalar_params(1), {}, 0.0, 1.0), DimensionError);
  EXPECT_THROW(kfac_update(scalar_params(1), scalar_params(1), {{Matrix::identity(2), Matrix{{1.0}}}}, 0.0, 1.0),
               DimensionError);
}

TEST(KfacRecovery, IdentityInstance) {
  const KfacInstance inst{Matrix{{1.0, 0.0}, {0.0, 1.0}} * std::sqrt(2.0), Matrix::identity(2)};
  EXPECT_TRUE(verify_kfac_recovery(inst).all_pass());
}

TEST(KfacRecovery, DiagonalInstanceMatchesHandInverse) {
  // E[x x^T] = diag(1, 2), Lambda = [3]; the optimum is diag(1/3, 1/6).
  const KfacInstance inst{Matrix{{std::sqrt(2.0), 0.0}, {0.0, 2.0}}, Matrix{{3.0}}};
  const Report r = verify_kfac_recovery(inst);
  EXPECT_TRUE(r.all_pass());
  const Matrix a_kfac = matmul_tn(inst.inputs, inst.inputs) * 0.5;
  const Matrix p = kron_dense(inverse_spd(inst.precision), inverse_spd(a_kfac));
  EXPECT_NEAR(p(0, 0), 1.0 / 3.0, 1e-14);
  EXPECT_NEAR(p(1, 1), 1.0 / 6.0, 1e-14);
  EXPECT_EQ(p(0, 1), 0.0);
}

TEST(KfacRecovery, RandomInstances) {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t fi = 1 + rng.below(4), fo = 1 + rng.below(4);
    const Report r = verify_kfac_recovery(random_kfac_instance(rng, fi, fo, 5 * fi + 3));
    EXPECT_TRUE(r.all_pass()) << fi << "x" << fo << ": " << r.checks[0].measured << " " << r.checks[1].measured;
  }
}

TEST(KfacRecovery, Guards) {
  Rng rng(18);
  EXPECT_THROW(verify_kfac_recovery(random_kfac_instance(rng, 5, 4, 30)), OracleScaleError);
  EXPECT_THROW(verify_kfac_recovery({Matrix{{1.0}}, Matrix{{-1.0}}}), ContractError);
}

TEST(ColumnStacking, PermutesRowMajorFlatten) {
  // A 2x2 weight flattened row-major as (w00, w01, w10, w11); column stacking
  // orders it (w00, w10, w01, w11).
  Matrix d(4, 4);
  for (std::size_t i = 0; i < 4; ++i) d(i, i) = static_cast<double>(i);
  const Matrix c = to_column_stacking(d, 2, 2);
  EXPECT_EQ(c(1, 1), 2.0);
  EXPECT_EQ(c(2, 2), 1.0);
  EXPECT_EQ(c(3, 3), 3.0);
}

// --- Determinism and reports ------------------------------------------------

TEST(Oracles, DeterministicUnderFixedSeed) {
  auto run = [] {
    Rng rng(19);
    const Model m = make_mlp({2, 3}, Activation::linear, Head::classification);
    const ParamSet theta = init_params(m, rng);
    const Matrix x = random_normal(rng, 5, 2);
    const auto f = kfac_blocks(m, theta, x, rng);
    return std::make_pair(sampled_fisher(m, theta, x, 500, rng).mean, f[0].b);
  };
  EXPECT_EQ(run(), run());
}

TEST(Report, JsonShape) {
  Report r;
  r.add("a", 1.0, 2.0, true);
  r.add("b", 3.0, 2.0, false, "why");
  const auto j = to_json(r);
  EXPECT_FALSE(j["pass"].get<bool>());
  ASSERT_EQ(j["checks"].size(), 2u);
  EXPECT_EQ(j["checks"][1]["detail"], "why");
  EXPECT_FALSE(j["checks"][0].contains("detail"));
}
