#ifndef NBNET_LINALG_HPP
#define NBNET_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "nbnet/errors.hpp"

namespace nbnet {

// Small dense helpers on row-major square matrices stored as vector<double>.
// These back the correlation-matrix machinery; sizes stay tiny (k <= a few
// hundred), so cyclic Jacobi is plenty.

struct EigenSym {
    std::vector<double> values;   // ascending
    std::vector<double> vectors;  // column j = eigenvector of values[j], row-major n x n
};

inline EigenSym jacobi_eigen_sym(std::vector<double> a, std::size_t n,
                                 int max_sweeps = 100, double tol = 1e-14) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

    auto off = [&]() {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) s += a[i * n + j] * a[i * n + j];
        return std::sqrt(2 * s);
    };

    double scale = 0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a[i * n + i]));
    for (double x : a) scale = std::max(scale, std::abs(x));
    if (scale == 0) scale = 1;

    for (int sweep = 0; sweep < max_sweeps && off() > tol * scale * double(n); ++sweep) {
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (std::abs(apq) <= tol * scale) continue;
                double app = a[p * n + p], aqq = a[q * n + q];
                double theta = (aqq - app) / (2 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double vkp = v[k * n + p], vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    EigenSym e;
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) e.values[i] = a[i * n + i];
    // sort ascending, permuting columns
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t x, std::size_t y) { return e.values[x] < e.values[y]; });
    EigenSym out;
    out.values.resize(n);
    out.vectors.assign(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        out.values[j] = e.values[idx[j]];
        for (std::size_t i = 0; i < n; ++i) out.vectors[i * n + j] = v[i * n + idx[j]];
    }
    return out;
}

/**
 * Cholesky for positive semi-definite matrices. Pivots below `tol` (relative
 * to the largest diagonal) zero out their whole column instead of failing, so
 * rank-deficient correlation matrices factor cleanly. A significantly
 * negative pivot throws.
 */
inline std::vector<double> psd_cholesky(const std::vector<double>& a, std::size_t n,
                                        double tol = 1e-12) {
    std::vector<double> l(n * n, 0.0);
    double dmax = 0;
    for (std::size_t i = 0; i < n; ++i) dmax = std::max(dmax, std::abs(a[i * n + i]));
    if (dmax == 0) dmax = 1;
    for (std::size_t j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
        if (d > tol * dmax) {
            l[j * n + j] = std::sqrt(d);
            for (std::size_t i = j + 1; i < n; ++i) {
                double s = a[i * n + j];
                for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
                l[i * n + j] = s / l[j * n + j];
            }
        } else if (d > -1e3 * tol * dmax) {
            l[j * n + j] = 0.0;  // semidefinite direction: skip the column
        } else {
            throw NumericError("matrix is not positive semi-definite: pivot " +
                               std::to_string(d) + " at index " + std::to_string(j));
        }
    }
    return l;
}

inline std::vector<double> mat_mul(const std::vector<double>& a, const std::vector<double>& b,
                                   std::size_t n) {
    std::vector<double> c(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            double aik = a[i * n + k];
            if (aik == 0) continue;
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aik * b[k * n + j];
        }
    return c;
}

inline std::vector<double> mat_mul_t(const std::vector<double>& a, std::size_t n) {
    // A * A^T
    std::vector<double> c(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < n; ++k) s += a[i * n + k] * a[j * n + k];
            c[i * n + j] = s;
        }
    return c;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}

#endif
