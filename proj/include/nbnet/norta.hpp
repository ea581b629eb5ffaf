#ifndef NBNET_NORTA_HPP
#define NBNET_NORTA_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbnet/errors.hpp"
#include "nbnet/linalg.hpp"
#include "nbnet/rng.hpp"
#include "nbnet/serialize.hpp"
#include "nbnet/stats.hpp"
#include "nbnet/tensor.hpp"

namespace nbnet {

/**
 * Correlated random vectors with prescribed marginals: draw a ~ N(0, Sigma_a),
 * push each coordinate through Phi, then through the target quantile. Building
 * a model means finding the base correlation Sigma_a whose image has the
 * requested covariance.
 */

struct Marginal {
    enum class Kind { normal, uniform, exponential, empirical };
    Kind kind = Kind::normal;
    double p1 = 0.0, p2 = 1.0;    // normal mean/stddev, uniform lo/hi, exponential rate in p1
    std::vector<double> samples;  // empirical only, sorted ascending

    static Marginal normal(double mu, double sigma) {
        if (!(sigma > 0)) throw ValidationError("normal marginal needs stddev > 0");
        Marginal m;
        m.kind = Kind::normal;
        m.p1 = mu;
        m.p2 = sigma;
        return m;
    }

    static Marginal uniform(double lo, double hi) {
        if (!(hi > lo)) throw ValidationError("uniform marginal needs hi > lo");
        Marginal m;
        m.kind = Kind::uniform;
        m.p1 = lo;
        m.p2 = hi;
        return m;
    }

    static Marginal exponential(double rate) {
        if (!(rate > 0)) throw ValidationError("exponential marginal needs rate > 0");
        Marginal m;
        m.kind = Kind::exponential;
        m.p1 = rate;
        m.p2 = 0;
        return m;
    }

    static Marginal empirical(std::vector<double> xs) {
        if (xs.size() < 2) throw ValidationError("empirical marginal needs at least 2 samples");
        std::sort(xs.begin(), xs.end());
        Marginal m;
        m.kind = Kind::empirical;
        m.samples = std::move(xs);
        return m;
    }

    double quantile(double u) const {
        switch (kind) {
            case Kind::normal: return p1 + p2 * normal_quantile(u);
            case Kind::uniform: return p1 + u * (p2 - p1);
            case Kind::exponential: return -std::log1p(-u) / p1;
            case Kind::empirical: {
                // smallest sorted value whose empirical CDF reaches u
                double n = double(samples.size());
                std::size_t idx = std::size_t(std::ceil(u * n - 1e-12));
                if (idx > 0) --idx;
                return samples[std::min(idx, samples.size() - 1)];
            }
        }
        throw ValidationError("marginal kind out of range");
    }

    double cdf(double x) const {
        switch (kind) {
            case Kind::normal: return normal_cdf((x - p1) / p2);
            case Kind::uniform:
                return std::min(1.0, std::max(0.0, (x - p1) / (p2 - p1)));
            case Kind::exponential: return x <= 0 ? 0.0 : -std::expm1(-p1 * x);
            case Kind::empirical: {
                auto it = std::upper_bound(samples.begin(), samples.end(), x);
                return double(it - samples.begin()) / double(samples.size());
            }
        }
        throw ValidationError("marginal kind out of range");
    }

    double mean() const {
        switch (kind) {
            case Kind::normal: return p1;
            case Kind::uniform: return 0.5 * (p1 + p2);
            case Kind::exponential: return 1.0 / p1;
            case Kind::empirical: {
                double s = 0;
                for (double x : samples) s += x;
                return s / double(samples.size());
            }
        }
        return 0;
    }

    double variance() const {
        switch (kind) {
            case Kind::normal: return p2 * p2;
            case Kind::uniform: return (p2 - p1) * (p2 - p1) / 12.0;
            case Kind::exponential: return 1.0 / (p1 * p1);
            case Kind::empirical: {
                double m = mean(), s = 0;
                for (double x : samples) s += (x - m) * (x - m);
                return s / double(samples.size());
            }
        }
        return 0;
    }

    std::string describe() const {
        char buf[96];
        switch (kind) {
            case Kind::normal: std::snprintf(buf, sizeof buf, "normal(%g,%g)", p1, p2); break;
            case Kind::uniform: std::snprintf(buf, sizeof buf, "uniform(%g,%g)", p1, p2); break;
            case Kind::exponential: std::snprintf(buf, sizeof buf, "exponential(%g)", p1); break;
            case Kind::empirical:
                std::snprintf(buf, sizeof buf, "empirical(n=%zu)", samples.size());
                break;
        }
        return buf;
    }
};

inline nlohmann::json marginal_to_json(const Marginal& m) {
    nlohmann::json j;
    switch (m.kind) {
        case Marginal::Kind::normal:
            j["kind"] = "normal";
            j["mean"] = m.p1;
            j["stddev"] = m.p2;
            break;
        case Marginal::Kind::uniform:
            j["kind"] = "uniform";
            j["lo"] = m.p1;
            j["hi"] = m.p2;
            break;
        case Marginal::Kind::exponential:
            j["kind"] = "exponential";
            j["rate"] = m.p1;
            break;
        case Marginal::Kind::empirical:
            j["kind"] = "empirical";
            j["samples"] = m.samples;
            break;
    }
    return j;
}

inline Marginal marginal_from_json(const nlohmann::json& j) {
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "normal")
        return Marginal::normal(j.at("mean").get<double>(), j.at("stddev").get<double>());
    if (kind == "uniform")
        return Marginal::uniform(j.at("lo").get<double>(), j.at("hi").get<double>());
    if (kind == "exponential") return Marginal::exponential(j.at("rate").get<double>());
    if (kind == "empirical")
        return Marginal::empirical(j.at("samples").get<std::vector<double>>());
    throw ValidationError("unknown marginal kind '" + kind + "'");
}

namespace detail {

// Quantiles blow up at 0/1 and normal_cdf saturates there in double
// precision, so every u passed to a quantile gets pulled inside.
inline double interior(double u) {
    return std::min(1.0 - 1e-12, std::max(1e-12, u));
}

// E[q(A)] for A standard normal, by Gauss-Hermite.
inline double gh_mean(const Marginal& m, const Quadrature& q) {
    const double s2 = std::sqrt(2.0);
    double e = 0;
    for (std::size_t i = 0; i < q.nodes.size(); ++i)
        e += q.weights[i] * m.quantile(interior(normal_cdf(s2 * q.nodes[i])));
    return e / std::sqrt(M_PI);
}

/**
 * Cov(q_i(A), q_j(B)) for (A,B) standard bivariate normal with correlation
 * rho, via tensorized Gauss-Hermite after the substitution a = sqrt(2) x,
 * b = sqrt(2) (rho x + sqrt(1-rho^2) y). Means come from the same rule so the
 * rho = 0 covariance is exactly zero.
 */
inline double pair_cov(const Marginal& mi, const Marginal& mj, double rho, const Quadrature& q) {
    const double s2 = std::sqrt(2.0);
    const std::size_t n = q.nodes.size();
    double e = 0;
    if (std::abs(rho) >= 1.0 - 1e-14) {
        double sign = rho > 0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < n; ++i)
            e += q.weights[i] * mi.quantile(interior(normal_cdf(s2 * q.nodes[i]))) *
                 mj.quantile(interior(normal_cdf(sign * s2 * q.nodes[i])));
        e /= std::sqrt(M_PI);
    } else {
        double c = std::sqrt(1.0 - rho * rho);
        for (std::size_t i = 0; i < n; ++i) {
            double gi = mi.quantile(interior(normal_cdf(s2 * q.nodes[i])));
            double row = 0;
            for (std::size_t j = 0; j < n; ++j)
                row += q.weights[j] *
                       mj.quantile(interior(normal_cdf(s2 * (rho * q.nodes[i] + c * q.nodes[j]))));
            e += q.weights[i] * gi * row;
        }
        e /= M_PI;
    }
    return e - gh_mean(mi, q) * gh_mean(mj, q);
}

/**
 * Solves f(rho) = target on [-1,1] for a non-decreasing f. The curve is
 * probed on a coarse grid first; a decreasing segment means the pair has no
 * well-defined inverse and is rejected.
 */
inline double bisection_match(const std::function<double(double)>& f, double target,
                              double scale = 1.0) {
    const double slack = 1e-9 * std::max(scale, 1.0);
    const int grid = 16;
    std::vector<double> probe(grid + 1);
    for (int i = 0; i <= grid; ++i) probe[i] = f(-1.0 + 2.0 * i / grid);
    for (int i = 1; i <= grid; ++i)
        if (probe[i] < probe[i - 1] - slack)
            throw NumericError("pair covariance is not monotone in the base correlation");
    if (target < probe[0] - slack || target > probe[grid] + slack)
        throw ValidationError("target covariance " + std::to_string(target) +
                              " outside attainable range [" + std::to_string(probe[0]) + ", " +
                              std::to_string(probe[grid]) + "]");
    if (target <= probe[0]) return -1.0;
    if (target >= probe[grid]) return 1.0;
    double lo = -1.0, hi = 1.0;
    for (int it = 0; it < 80 && hi - lo > 1e-14; ++it) {
        double mid = 0.5 * (lo + hi);
        if (f(mid) < target)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

inline void check_square_symmetric(const std::vector<double>& a, std::size_t k,
                                   const std::string& who) {
    if (a.size() != k * k) throw ValidationError(who + ": matrix is not " + std::to_string(k) +
                                                 "x" + std::to_string(k));
    double scale = 0;
    for (double v : a) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j)
            if (std::abs(a[i * k + j] - a[j * k + i]) > 1e-9 * std::max(scale, 1.0))
                throw ValidationError(who + ": matrix is not symmetric at (" + std::to_string(i) +
                                      "," + std::to_string(j) + ")");
}

}  // namespace detail

/**
 * Per-pair inversion of the covariance map: entry (i,j) of the result is the
 * base normal correlation whose transformed covariance equals sigma_b[i,j].
 * Diagonal entries of sigma_b must equal the marginal variances, since the
 * transform cannot rescale a coordinate.
 */
inline std::vector<double> match_base_correlation(const std::vector<double>& sigma_b,
                                                  const std::vector<Marginal>& marginals,
                                                  std::size_t gh_nodes = 40) {
    const std::size_t k = marginals.size();
    if (k == 0) throw ValidationError("match_base_correlation: no marginals");
    if (gh_nodes < 32) throw ValidationError("match_base_correlation: need >= 32 nodes per axis");
    detail::check_square_symmetric(sigma_b, k, "match_base_correlation");
    for (std::size_t i = 0; i < k; ++i) {
        double var = marginals[i].variance();
        if (!(sigma_b[i * k + i] > 0))
            throw ValidationError("match_base_correlation: diagonal entry " + std::to_string(i) +
                                  " is not positive");
        if (std::abs(sigma_b[i * k + i] - var) > 1e-3 * std::max(var, 1.0))
            throw ValidationError("match_base_correlation: diagonal entry " + std::to_string(i) +
                                  " (" + std::to_string(sigma_b[i * k + i]) +
                                  ") does not match the variance of " + marginals[i].describe() +
                                  " (" + std::to_string(var) + ")");
    }
    Quadrature q = gauss_hermite(gh_nodes);
    std::vector<double> lambda(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i) lambda[i * k + i] = 1.0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j) {
            double scale = std::sqrt(marginals[i].variance() * marginals[j].variance());
            double rho;
            try {
                rho = detail::bisection_match(
                    [&](double r) { return detail::pair_cov(marginals[i], marginals[j], r, q); },
                    sigma_b[i * k + j], scale);
            } catch (const Error& e) {
                throw ValidationError("pair (" + std::to_string(i) + "," + std::to_string(j) +
                                      ") " + marginals[i].describe() + " vs " +
                                      marginals[j].describe() + ": " + e.what());
            }
            lambda[i * k + j] = lambda[j * k + i] = rho;
        }
    return lambda;
}

struct CorrelationRepair {
    std::vector<double> sigma;
    bool adjusted = false;
    int iterations = 0;
    double residual = 0;
};

/**
 * Nearest correlation matrix in Frobenius norm by alternating projections
 * (PSD cone and unit-diagonal plane) with Dykstra's correction. PSD inputs
 * pass through untouched.
 */
inline CorrelationRepair repair_correlation(const std::vector<double>& lambda, std::size_t k,
                                            double tol = 1e-8, int max_iters = 1000) {
    detail::check_square_symmetric(lambda, k, "repair_correlation");
    for (std::size_t i = 0; i < k; ++i)
        if (std::abs(lambda[i * k + i] - 1.0) > 1e-9)
            throw ValidationError("repair_correlation: diagonal entry " + std::to_string(i) +
                                  " is not 1");
    CorrelationRepair out;
    {
        EigenSym e = jacobi_eigen_sym(lambda, k);
        if (e.values.front() >= -1e-10) {
            out.sigma = lambda;
            return out;
        }
    }
    auto proj_psd = [&](const std::vector<double>& a) {
        EigenSym e = jacobi_eigen_sym(a, k);
        std::vector<double> x(k * k, 0.0);
        for (std::size_t j = 0; j < k; ++j) {
            double lam = std::max(0.0, e.values[j]);
            if (lam == 0) continue;
            for (std::size_t r = 0; r < k; ++r)
                for (std::size_t c = 0; c < k; ++c)
                    x[r * k + c] += lam * e.vectors[r * k + j] * e.vectors[c * k + j];
        }
        for (std::size_t r = 0; r < k; ++r)
            for (std::size_t c = r + 1; c < k; ++c) {
                double v = 0.5 * (x[r * k + c] + x[c * k + r]);
                x[r * k + c] = x[c * k + r] = v;
            }
        return x;
    };

    std::vector<double> y = lambda, ds(k * k, 0.0);
    out.adjusted = true;
    for (int it = 1; it <= max_iters; ++it) {
        std::vector<double> r(k * k);
        for (std::size_t i = 0; i < k * k; ++i) r[i] = y[i] - ds[i];
        std::vector<double> x = proj_psd(r);
        for (std::size_t i = 0; i < k * k; ++i) ds[i] = x[i] - r[i];
        std::vector<double> y_next = x;
        for (std::size_t i = 0; i < k; ++i) y_next[i * k + i] = 1.0;
        double change = std::max(max_abs_diff(y_next, y), max_abs_diff(x, y_next));
        y = std::move(y_next);
        out.iterations = it;
        out.residual = change;
        if (change < tol) break;
    }
    if (out.residual >= tol)
        throw NumericError("repair_correlation did not converge in " +
                           std::to_string(max_iters) + " iterations, residual " +
                           std::to_string(out.residual));
    // polish: clip any residual negative curvature, then renormalize the
    // diagonal exactly to 1 by congruence (keeps PSD)
    y = proj_psd(y);
    std::vector<double> d(k);
    for (std::size_t i = 0; i < k; ++i) {
        if (!(y[i * k + i] > 0))
            throw NumericError("repair_correlation produced a degenerate diagonal");
        d[i] = 1.0 / std::sqrt(y[i * k + i]);
    }
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) y[i * k + j] *= d[i] * d[j];
    out.sigma = std::move(y);
    return out;
}

// Lower-triangular M with M M^T = sigma_a, tolerant of semi-definite inputs.
inline std::vector<double> factor_correlation(const std::vector<double>& sigma_a, std::size_t k) {
    std::vector<double> m = psd_cholesky(sigma_a, k, 1e-12);
    double err = max_abs_diff(mat_mul_t(m, k), sigma_a);
    if (err >= 1e-10)
        throw NumericError("correlation factorization residual " + std::to_string(err) +
                           " exceeds 1e-10");
    return m;
}

struct NortaModel {
    std::vector<Marginal> marginals;
    std::vector<double> sigma_b;   // requested covariance
    std::vector<double> lambda_a;  // matched base correlation, possibly indefinite
    std::vector<double> sigma_a;   // repaired base correlation
    std::vector<double> m;         // factor, sigma_a = m m^T
    bool adjusted = false;

    std::size_t k() const { return marginals.size(); }
};

inline NortaModel build_norta(std::vector<Marginal> marginals, std::vector<double> sigma_b,
                              std::size_t gh_nodes = 40) {
    NortaModel model;
    model.lambda_a = match_base_correlation(sigma_b, marginals, gh_nodes);
    CorrelationRepair rep = repair_correlation(model.lambda_a, marginals.size());
    model.sigma_a = rep.sigma;
    model.adjusted = rep.adjusted;
    model.m = factor_correlation(model.sigma_a, marginals.size());
    model.marginals = std::move(marginals);
    model.sigma_b = std::move(sigma_b);
    return model;
}

/**
 * Transforms uniform inputs z (n,k) into samples with the model's marginals
 * and covariance. Pure function of (model, z); coordinates exactly at 0 or 1
 * are rejected, anything closer to an endpoint than 1e-12 is clamped.
 */
inline Tensor<double> norta_sample(const NortaModel& model, const Tensor<double>& z) {
    const std::size_t k = model.k();
    if (z.rank() != 2 || z.dim(1) != k)
        throw ShapeError("norta_sample: z must be (n," + std::to_string(k) + ")");
    Tensor<double> b({z.dim(0), k});
    std::vector<double> w(k), a(k);
    for (std::size_t r = 0; r < z.dim(0); ++r) {
        for (std::size_t i = 0; i < k; ++i) {
            double u = z.data()[r * k + i];
            if (!(u > 0.0 && u < 1.0))
                throw ValidationError("norta_sample: z[" + std::to_string(r) + "," +
                                      std::to_string(i) + "] = " + std::to_string(u) +
                                      " is not inside (0,1)");
            w[i] = normal_quantile(detail::interior(u));
        }
        for (std::size_t i = 0; i < k; ++i) {
            double s = 0;
            for (std::size_t j = 0; j <= i; ++j) s += model.m[i * k + j] * w[j];
            a[i] = s;
        }
        for (std::size_t i = 0; i < k; ++i)
            b.data()[r * k + i] =
                model.marginals[i].quantile(detail::interior(normal_cdf(a[i])));
    }
    return b;
}

// Strictly interior uniform draws for feeding norta_sample.
inline Tensor<double> uniform_inputs(std::size_t n, std::size_t k, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x0a17ull));
    Tensor<double> z({n, k});
    for (std::size_t i = 0; i < n * k; ++i) {
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        z.data()[i] = u;
    }
    return z;
}

inline void save_norta(const NortaModel& model, const std::string& path) {
    const std::size_t k = model.k();
    CheckpointWriter w(path, "NBNO", 1);
    nlohmann::json jm = nlohmann::json::array();
    for (auto& m : model.marginals) jm.push_back(marginal_to_json(m));
    w.add_text("marginals", jm.dump());
    w.add_text("adjusted", model.adjusted ? "1" : "0");
    auto put = [&](const char* name, const std::vector<double>& v) {
        Tensor<double> t({k, k});
        std::copy(v.begin(), v.end(), t.data());
        w.add_tensor(name, t);
    };
    put("sigma_b", model.sigma_b);
    put("lambda_a", model.lambda_a);
    put("sigma_a", model.sigma_a);
    put("m", model.m);
    w.finish();
}

inline NortaModel load_norta(const std::string& path) {
    CheckpointReader r(path, "NBNO", 1);
    NortaModel model;
    for (auto& j : nlohmann::json::parse(r.text("marginals")))
        model.marginals.push_back(marginal_from_json(j));
    model.adjusted = r.text("adjusted") == "1";
    auto get = [&](const char* name) {
        Tensor<double> t = r.tensor<double>(name);
        return std::vector<double>(t.data(), t.data() + t.numel());
    };
    model.sigma_b = get("sigma_b");
    model.lambda_a = get("lambda_a");
    model.sigma_a = get("sigma_a");
    model.m = get("m");
    const std::size_t k = model.marginals.size();
    if (model.sigma_b.size() != k * k || model.m.size() != k * k)
        throw CheckpointError("norta model dimensions are inconsistent");
    return model;
}

}

#endif
