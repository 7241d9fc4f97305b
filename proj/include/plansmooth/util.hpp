#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace plansmooth {

// Pairwise (cascade) summation. Error grows like O(log n) in the number of
// terms instead of O(n) for naive left-to-right accumulation, which matters
// for the 1e-12 mass and marginal tolerances used throughout.
namespace detail {

template <typename F>
double pairwise_sum_impl(const F& term, std::size_t lo, std::size_t hi) {
    const std::size_t n = hi - lo;
    if (n <= 32) {
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += term(i);
        return s;
    }
    const std::size_t mid = lo + n / 2;
    return pairwise_sum_impl(term, lo, mid) + pairwise_sum_impl(term, mid, hi);
}

}  // namespace detail

template <typename F>
double pairwise_sum_fn(std::size_t n, const F& term) {
    if (n == 0) return 0.0;
    return detail::pairwise_sum_impl(term, 0, n);
}

inline double pairwise_sum(const std::vector<double>& v) {
    return pairwise_sum_fn(v.size(), [&](std::size_t i) { return v[i]; });
}

inline double pairwise_sum(const double* v, std::size_t n) {
    return pairwise_sum_fn(n, [&](std::size_t i) { return v[i]; });
}

inline double sq(double x) { return x * x; }

// Shortest exact decimal form used for all numeric file output so that
// identical runs produce byte-identical files.
inline std::string format_g17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
}

// Dense inverse for the small covariance matrices used by the Gaussian
// builders (ambient dimension at most 3).
inline std::vector<double> invert_small(const std::vector<double>& a, int n) {
    if (n < 1 || n > 3 || static_cast<int>(a.size()) != n * n)
        throw std::invalid_argument("invert_small: matrix must be 1x1, 2x2 or 3x3");
    std::vector<double> inv(a.size());
    if (n == 1) {
        if (a[0] == 0.0) throw std::invalid_argument("invert_small: singular matrix");
        inv[0] = 1.0 / a[0];
        return inv;
    }
    if (n == 2) {
        const double det = a[0] * a[3] - a[1] * a[2];
        if (det == 0.0) throw std::invalid_argument("invert_small: singular matrix");
        inv[0] = a[3] / det;
        inv[1] = -a[1] / det;
        inv[2] = -a[2] / det;
        inv[3] = a[0] / det;
        return inv;
    }
    const double c00 = a[4] * a[8] - a[5] * a[7];
    const double c01 = a[5] * a[6] - a[3] * a[8];
    const double c02 = a[3] * a[7] - a[4] * a[6];
    const double det = a[0] * c00 + a[1] * c01 + a[2] * c02;
    if (det == 0.0) throw std::invalid_argument("invert_small: singular matrix");
    inv[0] = c00 / det;
    inv[1] = (a[2] * a[7] - a[1] * a[8]) / det;
    inv[2] = (a[1] * a[5] - a[2] * a[4]) / det;
    inv[3] = c01 / det;
    inv[4] = (a[0] * a[8] - a[2] * a[6]) / det;
    inv[5] = (a[2] * a[3] - a[0] * a[5]) / det;
    inv[6] = c02 / det;
    inv[7] = (a[1] * a[6] - a[0] * a[7]) / det;
    inv[8] = (a[0] * a[4] - a[1] * a[3]) / det;
    return inv;
}

}  // namespace plansmooth
