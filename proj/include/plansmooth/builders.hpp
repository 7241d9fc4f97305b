#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "field.hpp"
#include "grid.hpp"
#include "measures.hpp"
#include "util.hpp"

namespace plansmooth {

// Standard 1-d Gaussian density sampled at the axis nodes. Not renormalized:
// on boxes with several-sigma margins the midpoint mass is already 1 to
// near machine precision, and tests rely on the analytic values.
inline DensityField gaussian_density(const AxisGrid& axis, double mean, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_density: sigma must be positive");
    if (axis.dim != 1) throw std::invalid_argument("gaussian_density: axis form is 1-d only");
    std::vector<double> v(axis.count);
    const double norm = 1.0 / (sigma * std::sqrt(2.0 * std::numbers::pi));
    for (std::size_t i = 0; i < axis.count; ++i)
        v[i] = norm * std::exp(-0.5 * sq((axis.node(i) - mean) / sigma));
    return make_field(axis, std::move(v));
}

// Centered Gaussian with the given covariance over all scalar axes of the
// grid (total dimension at most 3, which covers every desk-scale scenario).
inline DensityField gaussian_density(const ProductGrid& grid, const std::vector<double>& mean,
                                     const std::vector<double>& cov) {
    validate(grid);
    const int na = grid.axis_count();
    if (static_cast<int>(mean.size()) != na)
        throw std::invalid_argument("gaussian_density: mean size does not match grid axes");
    if (static_cast<int>(cov.size()) != na * na)
        throw std::invalid_argument("gaussian_density: covariance size does not match grid axes");
    const std::vector<double> prec = invert_small(cov, na);
    double det = 1.0;
    if (na == 1) det = cov[0];
    if (na == 2) det = cov[0] * cov[3] - cov[1] * cov[2];
    if (na == 3)
        det = cov[0] * (cov[4] * cov[8] - cov[5] * cov[7]) -
              cov[1] * (cov[3] * cov[8] - cov[5] * cov[6]) +
              cov[2] * (cov[3] * cov[7] - cov[4] * cov[6]);
    if (!(det > 0.0)) throw std::invalid_argument("gaussian_density: covariance must be positive definite");
    const double norm = std::pow(2.0 * std::numbers::pi, -0.5 * na) / std::sqrt(det);

    const auto strides = grid.strides();
    std::vector<double> out(grid.total_nodes());
    std::vector<double> z(static_cast<std::size_t>(na));
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        std::size_t rem = flat;
        for (int a = 0; a < na; ++a) {
            const std::size_t ia = rem / strides[static_cast<std::size_t>(a)];
            rem %= strides[static_cast<std::size_t>(a)];
            z[static_cast<std::size_t>(a)] = grid.axis_coord(a, ia) - mean[static_cast<std::size_t>(a)];
        }
        double q = 0.0;
        for (int a = 0; a < na; ++a)
            for (int b = 0; b < na; ++b)
                q += z[static_cast<std::size_t>(a)] * prec[static_cast<std::size_t>(a * na + b)] *
                     z[static_cast<std::size_t>(b)];
        out[flat] = norm * std::exp(-0.5 * q);
    }
    return make_field(grid, std::move(out));
}

// Indicator of [a, b] renormalized so the discrete mass is exactly 1.
inline DensityField uniform_density(const AxisGrid& axis, double a, double b) {
    if (!(b > a)) throw std::invalid_argument("uniform_density: need b > a");
    if (axis.dim != 1) throw std::invalid_argument("uniform_density: axis form is 1-d only");
    std::vector<double> v(axis.count, 0.0);
    for (std::size_t i = 0; i < axis.count; ++i)
        if (axis.node(i) >= a && axis.node(i) <= b) v[i] = 1.0;
    const double m = pairwise_sum(v) * axis.spacing;
    if (!(m > 0.0)) throw std::invalid_argument("uniform_density: no grid node lies in [a, b]");
    for (double& x : v) x /= m;
    return make_field(axis, std::move(v));
}

// max(sin x, 0)^power, optionally renormalized to unit discrete mass. The
// unnormalized form is the stock example whose root-energy integrand is not
// integrable near the zeros of sin.
inline DensityField sine_power_density(const AxisGrid& axis, double power, bool normalize = false) {
    if (!(power > 0.0)) throw std::invalid_argument("sine_power_density: power must be positive");
    if (axis.dim != 1) throw std::invalid_argument("sine_power_density: axis form is 1-d only");
    std::vector<double> v(axis.count);
    for (std::size_t i = 0; i < axis.count; ++i) {
        const double s = std::sin(axis.node(i));
        v[i] = s > 0.0 ? std::pow(s, power) : 0.0;
    }
    if (normalize) {
        const double m = pairwise_sum(v) * axis.spacing;
        if (!(m > 0.0)) throw std::invalid_argument("sine_power_density: zero mass on this axis");
        for (double& x : v) x /= m;
    }
    return make_field(axis, std::move(v));
}

struct GridPlan {
    DensityField joint;
    std::vector<DensityField> marginals;  // discrete projections of the joint
};

// Two-factor Gaussian plan with unit marginal variances and correlation r,
// on [-halfwidth, halfwidth] per axis. Marginals are the exact discrete
// projections of the table, which keeps every downstream marginal identity
// sharp at summation precision.
inline GridPlan correlated_gaussian_plan(std::size_t n, double r, double halfwidth = 8.0) {
    if (!(std::abs(r) < 1.0))
        throw std::invalid_argument("correlated_gaussian_plan: need |r| < 1");
    const AxisGrid axis = make_axis_grid(-halfwidth, halfwidth, n);
    ProductGrid grid({axis, axis});
    GridPlan plan;
    plan.joint = gaussian_density(grid, {0.0, 0.0}, {1.0, r, r, 1.0});
    plan.marginals.push_back(marginal(plan.joint, 0));
    plan.marginals.push_back(marginal(plan.joint, 1));
    return plan;
}

}  // namespace plansmooth
