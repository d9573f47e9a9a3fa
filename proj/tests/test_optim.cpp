#include <cmath>

#include <gtest/gtest.h>

#include "kvsculpt/optim.hpp"
#include "test_support.hpp"

using namespace kvsculpt;

namespace {

// f(x) = ½ xᵀ A x − bᵀ x with SPD A = Mᵀ M + I.
struct Quadratic {
    Matrix a;
    std::vector<double> b;
    std::size_t calls = 0;

    double operator()(std::span<const double> x, std::span<double> g)
    {
        ++calls;
        double f = 0.0;
        for (std::size_t i = 0; i < b.size(); ++i) {
            double ax = 0.0;
            for (std::size_t j = 0; j < b.size(); ++j) { ax += a(i, j) * x[j]; }
            g[i] = ax - b[i];
            f += 0.5 * x[i] * ax - b[i] * x[i];
        }
        return f;
    }
};

Quadratic random_quadratic(Rng& rng, std::size_t n)
{
    Matrix m = kvtest::random_matrix(rng, n, n, 0.5);
    Matrix a = matmul_tn(m, m);
    for (std::size_t i = 0; i < n; ++i) { a(i, i) += 1.0; }
    return {a, kvtest::random_vector(rng, n)};
}

double rosenbrock(std::span<const double> x, std::span<double> g)
{
    const double a = 1.0 - x[0];
    const double b = x[1] - x[0] * x[0];
    g[0] = -2.0 * a - 400.0 * x[0] * b;
    g[1] = 200.0 * b;
    return a * a + 100.0 * b * b;
}

} // namespace

TEST(Lbfgs, SolvesQuadraticToEigenOracle)
{
    Rng rng{61};
    for (int rep = 0; rep < 5; ++rep) {
        auto q = random_quadratic(rng, 8);
        std::vector<double> x(8, 0.0);
        LbfgsOptions opt;
        opt.max_iters = 200;
        opt.initial_step = 1.0;
        LbfgsState st;
        (void)lbfgs_run(q, x, opt, st);
        Eigen::VectorXd eb = Eigen::Map<Eigen::VectorXd>(q.b.data(), 8);
        Eigen::VectorXd xs = kvtest::to_eigen(q.a).ldlt().solve(eb);
        for (std::size_t i = 0; i < 8; ++i) { EXPECT_NEAR(x[i], xs(static_cast<Eigen::Index>(i)), 1e-6); }
    }
}

TEST(Lbfgs, MinimizesRosenbrock)
{
    std::vector<double> x{-1.2, 1.0};
    LbfgsOptions opt;
    opt.max_iters = 500;
    opt.initial_step = 1.0;
    LbfgsState st;
    auto rep = lbfgs_run(rosenbrock, x, opt, st);
    EXPECT_NEAR(x[0], 1.0, 1e-5);
    EXPECT_NEAR(x[1], 1.0, 1e-5);
    EXPECT_LT(rep.f, 1e-10);
}

TEST(Lbfgs, ZeroGradientStopsImmediately)
{
    Quadratic q{Matrix::identity(3), {0.0, 0.0, 0.0}};
    std::vector<double> x(3, 0.0);
    LbfgsState st;
    auto rep = lbfgs_run(q, x, LbfgsOptions{}, st);
    EXPECT_TRUE(rep.converged);
    EXPECT_EQ(rep.iterations, 0U);
    EXPECT_EQ(rep.evaluations, 1U);
    EXPECT_EQ(x, (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(Lbfgs, NeverIncreasesObjective)
{
    Rng rng{62};
    for (int rep = 0; rep < 20; ++rep) {
        auto q = random_quadratic(rng, 6);
        std::vector<double> x = kvtest::random_vector(rng, 6, 3.0);
        std::vector<double> g(6);
        double prev = q(x, g);
        LbfgsState st;
        for (int call = 0; call < 5; ++call) {
            LbfgsOptions opt;
            opt.max_iters = 2;
            auto r = lbfgs_run(q, x, opt, st);
            EXPECT_LE(r.f, prev);
            prev = r.f;
        }
    }
}

TEST(Lbfgs, HistoryIsBounded)
{
    Rng rng{63};
    auto q = random_quadratic(rng, 12);
    std::vector<double> x(12, 1.0);
    LbfgsOptions opt;
    opt.history = 3;
    opt.max_iters = 30;
    LbfgsState st;
    (void)lbfgs_run(q, x, opt, st);
    EXPECT_LE(st.pairs.size(), 3U);
    st.invalidate();
    EXPECT_TRUE(st.pairs.empty());
    EXPECT_FALSE(st.has_point);
}

TEST(Lbfgs, StateCachesPointAcrossCalls)
{
    Rng rng{64};
    auto q = random_quadratic(rng, 4);
    std::vector<double> x(4, 1.0);
    LbfgsOptions opt;
    opt.max_iters = 1;
    LbfgsState st;
    auto r1 = lbfgs_run(q, x, opt, st);
    auto r2 = lbfgs_run(q, x, opt, st);
    // the second call reuses the cached value and gradient
    EXPECT_EQ(r2.evaluations + 1, r1.evaluations + (r2.evaluations - r1.evaluations + 1));
    EXPECT_EQ(q.calls, r1.evaluations + r2.evaluations);
}

TEST(Lbfgs, RejectsBadOptionsAndNonFiniteStart)
{
    LbfgsOptions opt;
    opt.c1 = 0.95;
    EXPECT_THROW(opt.validate(), std::invalid_argument);
    std::vector<double> x{1.0};
    LbfgsState st;
    auto nan_f = [](std::span<const double>, std::span<double> g) {
        g[0] = 0.0;
        return std::numeric_limits<double>::quiet_NaN();
    };
    EXPECT_THROW((void)lbfgs_run(nan_f, x, LbfgsOptions{}, st), std::runtime_error);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    // bias correction makes the first update exactly −step·sign(g) (up to ε)
    auto f = [](std::span<const double> x, std::span<double> g) {
        g[0] = 2.0 * (x[0] - 3.0);
        return (x[0] - 3.0) * (x[0] - 3.0);
    };
    std::vector<double> x{0.0};
    AdamState st;
    auto rep = adam_run(f, x, 1, AdamOptions{}, st);
    EXPECT_EQ(rep.evaluations, 1U);
    EXPECT_NEAR(x[0], 0.01, 1e-9);
    EXPECT_DOUBLE_EQ(rep.f, 9.0);
}

TEST(Adam, ConvergesOnScalarQuadratic)
{
    auto f = [](std::span<const double> x, std::span<double> g) {
        g[0] = 2.0 * (x[0] - 0.5);
        return (x[0] - 0.5) * (x[0] - 0.5);
    };
    std::vector<double> x{0.0};
    AdamState st;
    AdamOptions opt;
    opt.step = 0.05;
    (void)adam_run(f, x, 2000, opt, st);
    EXPECT_NEAR(x[0], 0.5, 1e-3);
}

TEST(Adam, DetectsDivergence)
{
    double scale = 1.0;
    auto f = [&](std::span<const double>, std::span<double> g) {
        g[0] = 1.0;
        scale *= 100.0;
        return scale;
    };
    std::vector<double> x{0.0};
    AdamState st;
    auto rep = adam_run(f, x, 10, AdamOptions{}, st);
    EXPECT_TRUE(rep.diverged);
    // reference 100; first value above 1e8 is 1e10
    EXPECT_EQ(rep.evaluations, 5U);
}
