#ifndef NBNET_STATS_HPP
#define NBNET_STATS_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "nbnet/errors.hpp"
#include "nbnet/linalg.hpp"

namespace nbnet {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/**
 * Inverse standard normal CDF, Wichura's PPND16 rational approximations
 * (accurate to about 1e-15 over (0,1)).
 */
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw ValidationError("normal_quantile requires p in (0,1), got " + std::to_string(p));
    double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        double r = 0.180625 - q * q;
        double num = (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                            6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
                          1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
                        1.3314166789178437745e+2) * r + 3.3871328727963666080e+0);
        double den = (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                            3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
                          5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
                        4.2313330701600911252e+1) * r + 1.0);
        return q * num / den;
    }
    double r = (q < 0) ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double x;
    if (r <= 5.0) {
        r -= 1.6;
        double num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                            2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
                          3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
                        4.63033784615654529590e+0) * r + 1.42343711074968357734e+0);
        double den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                            1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                          6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
                        2.05319162663775882187e+0) * r + 1.0);
        x = num / den;
    } else {
        r -= 5.0;
        double num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                            1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                          2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
                        5.46378491116411436990e+0) * r + 6.65790464350110377720e+0);
        double den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                            1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                          1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
                        5.99832206555887937690e-1) * r + 1.0);
        x = num / den;
    }
    return q < 0 ? -x : x;
}

struct Quadrature {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/**
 * Gauss-Hermite rule for weight exp(-x^2) via Golub-Welsch on the Jacobi
 * matrix of the Hermite recurrence. Exact for polynomials up to degree 2n-1.
 */
inline Quadrature gauss_hermite(std::size_t n) {
    if (n < 1) throw ValidationError("gauss_hermite needs n >= 1");
    std::vector<double> jac(n * n, 0.0);
    for (std::size_t k = 1; k < n; ++k) {
        double b = std::sqrt(double(k) / 2.0);
        jac[(k - 1) * n + k] = b;
        jac[k * n + (k - 1)] = b;
    }
    EigenSym e = jacobi_eigen_sym(std::move(jac), n, 200, 1e-15);
    Quadrature q;
    q.nodes = e.values;
    q.weights.resize(n);
    const double mu0 = std::sqrt(M_PI);  // integral of exp(-x^2)
    for (std::size_t j = 0; j < n; ++j) {
        double v0 = e.vectors[0 * n + j];
        q.weights[j] = mu0 * v0 * v0;
    }
    return q;
}

// Kolmogorov-Smirnov statistic of a sample against a CDF. Handles step CDFs
// by checking both one-sided gaps at each observed point.
inline double ks_statistic(std::vector<double> sample, const std::function<double(double)>& cdf) {
    if (sample.empty()) throw ValidationError("ks_statistic: empty sample");
    std::sort(sample.begin(), sample.end());
    double n = double(sample.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
        double f = cdf(sample[i]);
        d = std::max(d, std::abs(double(i + 1) / n - f));
        d = std::max(d, std::abs(double(i) / n - f));
    }
    return d;
}

// Asymptotic two-sided KS critical value at level alpha.
inline double ks_critical(std::size_t n, double alpha) {
    return std::sqrt(-0.5 * std::log(alpha / 2.0)) / std::sqrt(double(n));
}

inline double mean_of(const std::vector<double>& xs) {
    double s = 0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / double(xs.size());
}

// Population standard deviation.
inline double stddev_of(const std::vector<double>& xs) {
    double m = mean_of(xs), s = 0;
    for (double x : xs) s += (x - m) * (x - m);
    return xs.empty() ? 0.0 : std::sqrt(s / double(xs.size()));
}

}

#endif
