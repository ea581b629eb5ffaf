#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "nbnet/norta.hpp"

#include "helpers.hpp"

using namespace nbnet;

namespace {

double off(const std::vector<double>& m, std::size_t k, std::size_t i, std::size_t j) {
    return m[i * k + j];
}

std::vector<double> column(const Tensor<double>& t, std::size_t j) {
    std::vector<double> out(t.dim(0));
    for (std::size_t i = 0; i < t.dim(0); ++i) out[i] = t.data()[i * t.dim(1) + j];
    return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = mean_of(a), mb = mean_of(b), num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    return num / std::sqrt(da * db);
}

}  // namespace

TEST_CASE("marginal moments and quantile/cdf coherence", "[norta]") {
    Marginal n = Marginal::normal(2.0, 3.0);
    Marginal u = Marginal::uniform(-1.0, 3.0);
    Marginal e = Marginal::exponential(0.5);

    REQUIRE(n.mean() == 2.0);
    REQUIRE(n.variance() == 9.0);
    REQUIRE(u.mean() == 1.0);
    REQUIRE(u.variance() == Catch::Approx(16.0 / 12.0));
    REQUIRE(e.mean() == 2.0);
    REQUIRE(e.variance() == 4.0);

    for (const Marginal& m : {n, u, e}) {
        double prev = m.quantile(0.01);
        for (double p : {0.1, 0.25, 0.5, 0.75, 0.9, 0.99}) {
            double x = m.quantile(p);
            REQUIRE(x >= prev);
            REQUIRE(m.cdf(x) == Catch::Approx(p).margin(1e-9));
            prev = x;
        }
    }
    REQUIRE(n.quantile(0.5) == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(u.quantile(0.25) == 0.0);
    REQUIRE(e.quantile(0.5) == Catch::Approx(2.0 * std::log(2.0)));

    REQUIRE_THROWS_WITH(Marginal::normal(0, 0),
                        Catch::Matchers::ContainsSubstring("stddev > 0"));
    REQUIRE_THROWS_WITH(Marginal::uniform(1, 1), Catch::Matchers::ContainsSubstring("hi > lo"));
    REQUIRE_THROWS_WITH(Marginal::exponential(-1),
                        Catch::Matchers::ContainsSubstring("rate > 0"));
    REQUIRE_THROWS_WITH(Marginal::empirical({1.0}),
                        Catch::Matchers::ContainsSubstring("at least 2 samples"));
}

TEST_CASE("empirical marginal follows the sorted-sample staircase", "[norta]") {
    Marginal m = Marginal::empirical({3.0, 1.0, 4.0, 2.0});
    REQUIRE(m.quantile(0.25) == 1.0);
    REQUIRE(m.quantile(0.26) == 2.0);
    REQUIRE(m.quantile(0.5) == 2.0);
    REQUIRE(m.quantile(0.99) == 4.0);
    REQUIRE(m.cdf(2.0) == 0.5);
    REQUIRE(m.cdf(0.5) == 0.0);
    REQUIRE(m.cdf(4.5) == 1.0);
    REQUIRE(m.mean() == 2.5);
    REQUIRE(m.variance() == 1.25);
    REQUIRE_THAT(m.describe(), Catch::Matchers::ContainsSubstring("empirical(n=4)"));
}

TEST_CASE("marginal json survives a roundtrip", "[norta]") {
    for (const Marginal& m :
         {Marginal::normal(1, 2), Marginal::uniform(0, 5), Marginal::exponential(3),
          Marginal::empirical({0.0, 1.0, 2.0})}) {
        Marginal back = marginal_from_json(marginal_to_json(m));
        REQUIRE(back.describe() == m.describe());
        REQUIRE(back.quantile(0.37) == m.quantile(0.37));
    }
    REQUIRE_THROWS_WITH(marginal_from_json({{"kind", "weibull"}}),
                        Catch::Matchers::ContainsSubstring("unknown marginal kind 'weibull'"));
}

TEST_CASE("independent coordinates have near-zero transformed covariance", "[norta]") {
    Quadrature q = gauss_hermite(40);
    Marginal u = Marginal::uniform(0, 1);
    Marginal e = Marginal::exponential(1);
    REQUIRE(std::abs(detail::pair_cov(u, u, 0.0, q)) < 1e-12);
    REQUIRE(std::abs(detail::pair_cov(u, e, 0.0, q)) < 1e-12);
    REQUIRE(std::abs(detail::pair_cov(e, e, 0.0, q)) < 1e-12);
}

TEST_CASE("normal marginals leave the correlation untouched", "[norta]") {
    std::vector<Marginal> ms{Marginal::normal(1, 2), Marginal::normal(-3, 0.5)};
    std::vector<double> sigma_b{4.0, 0.3, 0.3, 0.25};
    std::vector<double> lam = match_base_correlation(sigma_b, ms);
    REQUIRE(lam[0] == 1.0);
    REQUIRE(lam[3] == 1.0);
    REQUIRE(off(lam, 2, 0, 1) == Catch::Approx(0.3).margin(1e-6));
    REQUIRE(off(lam, 2, 1, 0) == off(lam, 2, 0, 1));
}

TEST_CASE("uniform pairs match the arcsine rule", "[norta]") {
    std::vector<Marginal> ms{Marginal::uniform(0, 1), Marginal::uniform(0, 1)};
    double v = 1.0 / 12.0;
    std::vector<double> sigma_b{v, 0.5 * v, 0.5 * v, v};
    std::vector<double> lam = match_base_correlation(sigma_b, ms);
    double want = 2.0 * std::sin(M_PI * 0.5 / 6.0);
    REQUIRE(off(lam, 2, 0, 1) == Catch::Approx(want).margin(1e-6));

    sigma_b[1] = sigma_b[2] = 0.0;
    lam = match_base_correlation(sigma_b, ms);
    REQUIRE(off(lam, 2, 0, 1) == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("matching rejects malformed targets", "[norta]") {
    std::vector<Marginal> ms{Marginal::normal(0, 1), Marginal::normal(0, 1)};
    REQUIRE_THROWS_WITH(match_base_correlation({1.0, 0.0, 0.0, 2.0}, ms),
                        Catch::Matchers::ContainsSubstring(
                            "does not match the variance of normal(0,1)"));
    REQUIRE_THROWS_WITH(match_base_correlation({1.0, 0.2, 0.3, 1.0}, ms),
                        Catch::Matchers::ContainsSubstring("not symmetric"));
    REQUIRE_THROWS_WITH(match_base_correlation({1.0, 0.0, 0.0, 1.0}, ms, 8),
                        Catch::Matchers::ContainsSubstring("need >= 32 nodes"));
    REQUIRE_THROWS_WITH(match_base_correlation({1.0, 0.0, 0.0}, ms),
                        Catch::Matchers::ContainsSubstring("matrix is not 2x2"));

    std::vector<Marginal> es{Marginal::exponential(1), Marginal::exponential(1)};
    REQUIRE_THROWS_WITH(match_base_correlation({1.0, -0.9, -0.9, 1.0}, es),
                        Catch::Matchers::ContainsSubstring("outside attainable range"));
    REQUIRE_THROWS_WITH(match_base_correlation({1.0, -0.9, -0.9, 1.0}, es),
                        Catch::Matchers::ContainsSubstring("pair (0,1)"));
}

TEST_CASE("psd correlation matrices pass through repair untouched", "[norta]") {
    std::vector<double> good{1.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.0};
    CorrelationRepair rep = repair_correlation(good, 3);
    REQUIRE(!rep.adjusted);
    REQUIRE(rep.iterations == 0);
    REQUIRE(rep.sigma == good);

    REQUIRE_THROWS_WITH(repair_correlation({2.0, 0.0, 0.0, 1.0}, 2),
                        Catch::Matchers::ContainsSubstring("diagonal entry 0 is not 1"));
}

TEST_CASE("an impossible 2x2 correlation clips to the boundary", "[norta]") {
    CorrelationRepair rep = repair_correlation({1.0, 1.4, 1.4, 1.0}, 2);
    REQUIRE(rep.adjusted);
    REQUIRE(rep.sigma[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(rep.sigma[3] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(rep.sigma[1] == Catch::Approx(1.0).margin(1e-4));
    REQUIRE(rep.sigma[1] == rep.sigma[2]);
}

TEST_CASE("repair reproduces the published nearest correlation matrix", "[norta]") {
    std::vector<double> a{1, 1, 0, 1, 1, 1, 0, 1, 1};
    CorrelationRepair rep = repair_correlation(a, 3);
    REQUIRE(rep.adjusted);
    REQUIRE(off(rep.sigma, 3, 0, 1) == Catch::Approx(0.7607).margin(1e-3));
    REQUIRE(off(rep.sigma, 3, 0, 2) == Catch::Approx(0.1573).margin(1e-3));
    REQUIRE(off(rep.sigma, 3, 1, 2) == Catch::Approx(0.7607).margin(1e-3));
    EigenSym e = jacobi_eigen_sym(rep.sigma, 3);
    REQUIRE(e.values.front() >= -1e-10);
    for (int i = 0; i < 3; ++i)
        REQUIRE(rep.sigma[i * 3 + i] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("correlation factors are lower triangular square roots", "[norta]") {
    std::vector<double> eye{1, 0, 0, 1};
    REQUIRE(factor_correlation(eye, 2) == eye);

    std::vector<double> m = factor_correlation({1.0, 0.6, 0.6, 1.0}, 2);
    REQUIRE(m[0] == 1.0);
    REQUIRE(m[1] == 0.0);
    REQUIRE(m[2] == Catch::Approx(0.6).margin(1e-15));
    REQUIRE(m[3] == Catch::Approx(0.8).margin(1e-15));

    std::vector<double> ones(9, 1.0);
    std::vector<double> f = factor_correlation(ones, 3);
    REQUIRE(max_abs_diff(mat_mul_t(f, 3), ones) < 1e-12);
    REQUIRE(f[4] == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("a single normal coordinate is the plain quantile transform", "[norta]") {
    NortaModel model = build_norta({Marginal::normal(2.0, 3.0)}, {9.0});
    REQUIRE(!model.adjusted);
    Tensor<double> z = uniform_inputs(64, 1, 5);
    Tensor<double> x = norta_sample(model, z);
    for (std::size_t i = 0; i < 64; ++i) {
        double want = 2.0 + 3.0 * normal_quantile(z.data()[i]);
        REQUIRE(x.data()[i] == Catch::Approx(want).margin(1e-9));
    }
}

TEST_CASE("correlated uniforms hit the target dependence and marginals", "[norta]") {
    double v = 1.0 / 12.0;
    NortaModel model =
        build_norta({Marginal::uniform(0, 1), Marginal::uniform(0, 1)}, {v, 0.5 * v, 0.5 * v, v});
    const std::size_t n = 100000;
    Tensor<double> x = norta_sample(model, uniform_inputs(n, 2, 77));

    std::vector<double> c0 = column(x, 0), c1 = column(x, 1);
    REQUIRE(pearson(c0, c1) == Catch::Approx(0.5).margin(0.02));
    auto ucdf = [](double t) { return std::min(1.0, std::max(0.0, t)); };
    REQUIRE(ks_statistic(c0, ucdf) < ks_critical(n, 0.01));
    REQUIRE(ks_statistic(c1, ucdf) < ks_critical(n, 0.01));
}

TEST_CASE("an indefinite base correlation is repaired before factoring", "[norta]") {
    double v = 1.0 / 12.0, r = -0.49 * v;
    std::vector<Marginal> ms{Marginal::uniform(0, 1), Marginal::uniform(0, 1),
                             Marginal::uniform(0, 1)};
    NortaModel model = build_norta(ms, {v, r, r, r, v, r, r, r, v});
    REQUIRE(model.adjusted);
    REQUIRE(off(model.lambda_a, 3, 0, 1) < -0.5);
    EigenSym lam = jacobi_eigen_sym(model.lambda_a, 3);
    REQUIRE(lam.values.front() < -1e-10);
    EigenSym rep = jacobi_eigen_sym(model.sigma_a, 3);
    REQUIRE(rep.values.front() >= -1e-10);
    REQUIRE(off(model.sigma_a, 3, 0, 1) == Catch::Approx(-0.5).margin(2e-3));
    REQUIRE(max_abs_diff(mat_mul_t(model.m, 3), model.sigma_a) < 1e-10);
}

TEST_CASE("sampling is a pure function of the model and inputs", "[norta]") {
    NortaModel model =
        build_norta({Marginal::normal(0, 1), Marginal::exponential(2)}, {1.0, 0.2, 0.2, 0.25});
    Tensor<double> z1 = uniform_inputs(32, 2, 9);
    Tensor<double> z2 = uniform_inputs(32, 2, 9);
    REQUIRE(std::equal(z1.data(), z1.data() + z1.numel(), z2.data()));
    Tensor<double> a = norta_sample(model, z1), b = norta_sample(model, z2);
    REQUIRE(std::equal(a.data(), a.data() + a.numel(), b.data()));
    Tensor<double> z3 = uniform_inputs(32, 2, 10);
    REQUIRE(!std::equal(z1.data(), z1.data() + z1.numel(), z3.data()));

    Tensor<double> bad({2, 3}, 0.5);
    REQUIRE_THROWS_WITH(norta_sample(model, bad),
                        Catch::Matchers::ContainsSubstring("z must be (n,2)"));
    Tensor<double> edge({1, 2}, 0.5);
    edge.data()[1] = 0.0;
    REQUIRE_THROWS_WITH(norta_sample(model, edge),
                        Catch::Matchers::ContainsSubstring("is not inside (0,1)"));
}

TEST_CASE("norta models survive a save/load roundtrip", "[norta]") {
    tst::TempDir tmp;
    NortaModel model = build_norta(
        {Marginal::normal(1, 2), Marginal::uniform(-1, 1), Marginal::exponential(0.5)},
        {4.0, 0.2, 0.3, 0.2, 1.0 / 3.0, 0.1, 0.3, 0.1, 4.0});
    std::string path = tmp.file("model.norta");
    save_norta(model, path);
    NortaModel back = load_norta(path);

    REQUIRE(back.k() == 3);
    REQUIRE(back.adjusted == model.adjusted);
    REQUIRE(back.sigma_b == model.sigma_b);
    REQUIRE(back.lambda_a == model.lambda_a);
    REQUIRE(back.sigma_a == model.sigma_a);
    REQUIRE(back.m == model.m);
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE(back.marginals[i].describe() == model.marginals[i].describe());

    Tensor<double> z = uniform_inputs(16, 3, 21);
    Tensor<double> a = norta_sample(model, z), b = norta_sample(back, z);
    REQUIRE(std::equal(a.data(), a.data() + a.numel(), b.data()));
}
