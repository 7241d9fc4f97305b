#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "field.hpp"
#include "grid.hpp"
#include "measures.hpp"
#include "parallel.hpp"
#include "util.hpp"

namespace plansmooth {

// Isotropic Gaussian mollifier with variance epsilon per coordinate:
// eta(z) = (2 pi eps)^{-d/2} exp(-|z|^2 / (2 eps)).
struct KernelSpec {
    double epsilon = 0.1;
    int dim = 1;
};

inline void validate(const KernelSpec& k) {
    if (!(k.epsilon > 0.0)) throw std::invalid_argument("KernelSpec: epsilon must be positive");
    if (k.dim < 1 || k.dim > 3)
        throw std::invalid_argument("KernelSpec: supported kernel dimensions are 1, 2 and 3");
}

inline double eta1(double z, double eps) {
    return std::exp(-0.5 * z * z / eps) / std::sqrt(2.0 * std::numbers::pi * eps);
}

inline double eta(const double* z, const KernelSpec& k) {
    double q = 0.0;
    for (int i = 0; i < k.dim; ++i) q += z[i] * z[i];
    return std::exp(-0.5 * q / k.epsilon) *
           std::pow(2.0 * std::numbers::pi * k.epsilon, -0.5 * k.dim);
}

// grad eta(z) = -(z / eps) eta(z).
inline void grad_eta(const double* z, const KernelSpec& k, double* out) {
    const double v = eta(z, k);
    for (int i = 0; i < k.dim; ++i) out[i] = -z[i] / k.epsilon * v;
}

namespace detail {

inline double surface_area(int d) {  // of the unit sphere in R^d
    return 2.0 * std::pow(std::numbers::pi, 0.5 * d) / std::tgamma(0.5 * d);
}

// Composite Simpson rule on [a, b].
template <typename F>
double simpson(const F& f, double a, double b, int n) {
    if (n % 2 != 0) ++n;
    const double h = (b - a) / n;
    double s = f(a) + f(b);
    for (int i = 1; i < n; ++i) s += f(a + h * i) * (i % 2 ? 4.0 : 2.0);
    return s * h / 3.0;
}

}  // namespace detail

struct TailEstimate {
    double measured;  // radial quadrature of the kernel mass outside radius tau
    double bound;     // K(d) exp(-tau^2 / (4 eps))
};

// K(d) = (sigma_d / 2) (2/pi)^{d/2} Gamma(d/2); the exponential tail bound
// K(d) e^{-tau^2/4eps} dominates the true mass for every tau >= 0.
inline double tail_constant(int d) {
    return 0.5 * detail::surface_area(d) * std::pow(2.0 / std::numbers::pi, 0.5 * d) *
           std::tgamma(0.5 * d);
}

inline TailEstimate tail_mass(double tau, const KernelSpec& k) {
    validate(k);
    if (!(tau >= 0.0)) throw std::invalid_argument("tail_mass: tau must be nonnegative");
    const double se = std::sqrt(k.epsilon);
    const double norm = std::pow(2.0 * std::numbers::pi * k.epsilon, -0.5 * k.dim);
    const double sigma_d = detail::surface_area(k.dim);
    const auto radial = [&](double r) {
        return sigma_d * std::pow(r, k.dim - 1) * norm * std::exp(-0.5 * r * r / k.epsilon);
    };
    TailEstimate t;
    t.measured = detail::simpson(radial, tau, tau + 12.0 * se, 16384);
    t.bound = tail_constant(k.dim) * std::exp(-0.25 * tau * tau / k.epsilon);
    return t;
}

struct KernelConstants {
    double K_d;           // tail constant
    double c_d_over_eps;  // int |grad eta|_2^2 / eta = d / eps
    double C_d_p_eps;     // int |grad eta|_p^p / eta^{p-1} = d m_p eps^{-p/2}
    double c_d_p;         // sqrt(eps) C^{1/p} / p, independent of eps
    double clarkson_c_p;  // 2^{(p-1)/p}
};

// Quadrature values cross-checked against the closed forms; a disagreement
// beyond 1e-6 relative means the quadrature failed and is reported as such.
inline KernelConstants kernel_constants(const KernelSpec& k, double p) {
    validate(k);
    if (!(p >= 1.0)) throw std::invalid_argument("kernel_constants: need p >= 1");
    const double eps = k.epsilon;
    const double se = std::sqrt(eps);
    KernelConstants c;
    c.K_d = tail_constant(k.dim);

    // |grad eta|_2^2 / eta = (|z|^2 / eps^2) eta(z); radial integral.
    const double norm = std::pow(2.0 * std::numbers::pi * eps, -0.5 * k.dim);
    const double sigma_d = detail::surface_area(k.dim);
    const auto radial2 = [&](double r) {
        return sigma_d * std::pow(r, k.dim + 1) / (eps * eps) * norm *
               std::exp(-0.5 * r * r / eps);
    };
    c.c_d_over_eps = detail::simpson(radial2, 0.0, 14.0 * se, 16384);
    if (std::abs(c.c_d_over_eps * eps - k.dim) > 1e-6 * k.dim)
        throw std::runtime_error("kernel_constants: quadrature for the squared-gradient "
                                 "integral failed to converge");

    // |grad eta|_p^p / eta^{p-1} = eps^{-p} sum_i |z_i|^p eta(z); by Fubini
    // this reduces to d one-dimensional absolute moments (the p-norm summand
    // is not radial for p != 2, so no radial shortcut here).
    const auto one_dim = [&](double t) { return std::pow(t, p) * eta1(t, eps); };
    const double moment = 2.0 * detail::simpson(one_dim, 0.0, 14.0 * se, 16384);
    c.C_d_p_eps = k.dim * moment / std::pow(eps, p);
    const double m_p = std::pow(2.0, 0.5 * p) * std::tgamma(0.5 * (p + 1.0)) /
                       std::sqrt(std::numbers::pi);
    if (std::abs(c.C_d_p_eps - k.dim * m_p * std::pow(eps, -0.5 * p)) >
        1e-6 * k.dim * m_p * std::pow(eps, -0.5 * p))
        throw std::runtime_error("kernel_constants: quadrature for the p-gradient "
                                 "integral failed to converge");

    c.c_d_p = se * std::pow(c.C_d_p_eps, 1.0 / p) / p;
    c.clarkson_c_p = std::pow(2.0, (p - 1.0) / p);
    return c;
}

// ------------------------------------------------------------- convolutions

// Dense midpoint-rule convolution of a single-factor 1-d field with eta,
// evaluated on an arbitrary target axis (defaults to the source axis).
// The full sum keeps the output positive wherever the kernel reach allows.
inline std::vector<double> convolve_values(const std::vector<double>& v, const AxisGrid& src,
                                           const AxisGrid& dst, double eps) {
    const double h = src.spacing;
    std::vector<double> out(dst.count);
    parallel_for(dst.count, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const double y = dst.node(i);
            out[i] = pairwise_sum_fn(src.count,
                                     [&](std::size_t j) { return eta1(y - src.node(j), eps) * v[j]; }) *
                     h;
        }
    });
    return out;
}

inline DensityField convolve(const DensityField& rho, const KernelSpec& k) {
    validate(k);
    if (rho.grid.n_factors() != 1 || rho.grid.dim() != 1)
        throw std::invalid_argument("convolve: expected a single-factor 1-d field");
    const AxisGrid& axis = rho.grid.factors.front();
    return make_field(axis, convolve_values(rho.values, axis, axis, k.epsilon));
}

inline DensityField convolve_to(const DensityField& rho, const KernelSpec& k,
                                const AxisGrid& target) {
    validate(k);
    if (rho.grid.n_factors() != 1 || rho.grid.dim() != 1)
        throw std::invalid_argument("convolve_to: expected a single-factor 1-d field");
    return make_field(target,
                      convolve_values(rho.values, rho.grid.factors.front(), target, k.epsilon));
}

struct AtomConvolution {
    DensityField field;
    double truncated_mass;  // kernel mass falling outside the grid box, by the erf form
    bool margin_ok;         // every atom at least 6 sqrt(eps) from each box edge
};

// Exact kernel sums of an atomic plan on a product grid: one separable
// Gaussian bump per atom, accumulated factor by factor.
inline AtomConvolution convolve_atoms(const AtomicPlan& plan, const KernelSpec& k,
                                      const ProductGrid& grid) {
    validate(k);
    validate(grid);
    if (plan.d != 1 || grid.dim() != 1)
        throw std::invalid_argument("convolve_atoms: atomic plans are supported for 1-d factors");
    if (grid.n_factors() != plan.N)
        throw std::invalid_argument("convolve_atoms: grid factor count does not match the plan");
    const double eps = k.epsilon;
    const double se = std::sqrt(eps);
    const std::size_t M = plan.size();
    const int N = plan.N;

    // Per-factor kernel rows at the grid nodes.
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(N));
    double min_margin = std::numeric_limits<double>::infinity();
    double truncated = 0.0;
    for (int j = 0; j < N; ++j)
        rows[static_cast<std::size_t>(j)].resize(M * grid.factors[static_cast<std::size_t>(j)].count);
    for (std::size_t i = 0; i < M; ++i) {
        double covered = 1.0;
        for (int j = 0; j < N; ++j) {
            const AxisGrid& ax = grid.factors[static_cast<std::size_t>(j)];
            const double a = plan.coord(i, j);
            min_margin = std::min(min_margin, std::min(a - ax.box_lo(), ax.box_hi() - a));
            covered *= 0.5 * (std::erf((ax.box_hi() - a) / (se * std::numbers::sqrt2)) -
                              std::erf((ax.box_lo() - a) / (se * std::numbers::sqrt2)));
            double* row = rows[static_cast<std::size_t>(j)].data() + i * ax.count;
            for (std::size_t q = 0; q < ax.count; ++q) row[q] = eta1(ax.node(q) - a, eps);
        }
        truncated += plan.weights[i] * (1.0 - covered);
    }

    std::vector<double> out(grid.total_nodes(), 0.0);
    if (N == 1) {
        const std::size_t n0 = grid.factors[0].count;
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t q = 0; q < n0; ++q) out[q] += plan.weights[i] * rows[0][i * n0 + q];
    } else if (N == 2) {
        const std::size_t n0 = grid.factors[0].count, n1 = grid.factors[1].count;
        parallel_for(n0, [&](std::size_t q0lo, std::size_t q0hi) {
            for (std::size_t i = 0; i < M; ++i) {
                const double* r0 = rows[0].data() + i * n0;
                const double* r1 = rows[1].data() + i * n1;
                const double w = plan.weights[i];
                for (std::size_t q0 = q0lo; q0 < q0hi; ++q0) {
                    const double f = w * r0[q0];
                    double* slice = out.data() + q0 * n1;
                    for (std::size_t q1 = 0; q1 < n1; ++q1) slice[q1] += f * r1[q1];
                }
            }
        });
    } else if (N == 3) {
        const std::size_t n0 = grid.factors[0].count, n1 = grid.factors[1].count,
                          n2 = grid.factors[2].count;
        parallel_for(n0, [&](std::size_t q0lo, std::size_t q0hi) {
            for (std::size_t i = 0; i < M; ++i) {
                const double* r0 = rows[0].data() + i * n0;
                const double* r1 = rows[1].data() + i * n1;
                const double* r2 = rows[2].data() + i * n2;
                const double w = plan.weights[i];
                for (std::size_t q0 = q0lo; q0 < q0hi; ++q0) {
                    const double f0 = w * r0[q0];
                    for (std::size_t q1 = 0; q1 < n1; ++q1) {
                        const double f1 = f0 * r1[q1];
                        double* slice = out.data() + (q0 * n1 + q1) * n2;
                        for (std::size_t q2 = 0; q2 < n2; ++q2) slice[q2] += f1 * r2[q2];
                    }
                }
            }
        });
    } else {
        throw std::invalid_argument("convolve_atoms: supported factor counts are 1, 2 and 3");
    }

    AtomConvolution res{make_field(grid, std::move(out)), truncated, min_margin >= 6.0 * se};
    return res;
}

}  // namespace plansmooth
