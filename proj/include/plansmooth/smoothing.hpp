#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "field.hpp"
#include "grid.hpp"
#include "kernel.hpp"
#include "measures.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "sobolev.hpp"
#include "util.hpp"

namespace plansmooth {

struct SmoothingConfig {
    double epsilon = 0.1;
    double p = 2.0;
    double density_floor = 1e-12;
    double marginal_tol = 1e-6;
};

inline void validate(const SmoothingConfig& cfg) {
    if (!(cfg.epsilon > 0.0)) throw std::invalid_argument("SmoothingConfig: epsilon must be positive");
    if (!(cfg.p >= 1.0)) throw std::invalid_argument("SmoothingConfig: need p >= 1");
    if (!(cfg.density_floor >= 0.0))
        throw std::invalid_argument("SmoothingConfig: density floor must be nonnegative");
    if (!(cfg.marginal_tol > 0.0))
        throw std::invalid_argument("SmoothingConfig: marginal tolerance must be positive");
}

struct BoundCertificate {
    std::string name;
    double measured = 0.0;
    double bound = 0.0;
    double margin = 0.0;  // bound - measured
    bool passed = false;
};

inline BoundCertificate make_certificate(std::string name, double measured, double bound) {
    BoundCertificate c;
    c.name = std::move(name);
    c.measured = measured;
    c.bound = bound;
    c.margin = bound - measured;
    c.passed = c.margin >= -1e-8 * std::max(1.0, std::abs(bound));
    return c;
}

namespace detail {

// Dense matrix with a per-row active column range; rows outside [lo, hi)
// are exact zeros coming from the 8 sqrt(eps) kernel cutoff.
struct BandedMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> a;
    std::vector<std::size_t> lo, hi;

    void init(std::size_t r, std::size_t c) {
        rows = r;
        cols = c;
        a.assign(r * c, 0.0);
        lo.assign(r, 0);
        hi.assign(r, 0);
    }
    double* row(std::size_t r) { return a.data() + r * cols; }
    const double* row(std::size_t r) const { return a.data() + r * cols; }
};

// Contract one axis of a row-major array with a banded matrix:
// out[o, r, i] = sum_x M[r][x] in[o, x, i]. The axis extent changes from
// M.cols to M.rows; `counts` is updated accordingly.
inline std::vector<double> apply_axis(const std::vector<double>& in,
                                      std::vector<std::size_t>& counts, int axis,
                                      const BandedMatrix& M) {
    std::size_t outer = 1, inner = 1;
    for (int b = 0; b < axis; ++b) outer *= counts[static_cast<std::size_t>(b)];
    for (std::size_t b = static_cast<std::size_t>(axis) + 1; b < counts.size(); ++b)
        inner *= counts[b];
    if (counts[static_cast<std::size_t>(axis)] != M.cols)
        throw std::invalid_argument("apply_axis: axis extent does not match the matrix");
    std::vector<double> out(outer * M.rows * inner, 0.0);
    parallel_for(outer * M.rows, [&](std::size_t w0, std::size_t w1) {
        for (std::size_t w = w0; w < w1; ++w) {
            const std::size_t o = w / M.rows;
            const std::size_t r = w % M.rows;
            double* dst = out.data() + (o * M.rows + r) * inner;
            const double* mrow = M.row(r);
            for (std::size_t x = M.lo[r]; x < M.hi[r]; ++x) {
                const double c = mrow[x];
                if (c == 0.0) continue;
                const double* src = in.data() + (o * M.cols + x) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += c * src[i];
            }
        }
    });
    counts[static_cast<std::size_t>(axis)] = M.rows;
    return out;
}

// One factor of the smoothing pipeline. The y axis extends the marginal
// axis by the kernel reach, den is the node-sum convolution (rho * eta) on
// it, and W carries the correction weights W[x][q] = eta(y_q - x) h_y /
// den(q) truncated at 8 sqrt(eps).
struct FactorContext {
    AxisGrid x_axis;
    AxisGrid y_axis;
    std::size_t margin_cells = 0;
    std::vector<double> rho;
    std::vector<double> drho;
    std::vector<double> den;
    BandedMatrix W;    // n_x rows, n_y cols
    BandedMatrix S;    // n_x rows, n_x cols: S[xo][xi] = h_x sum_q W[xo][q] eta(y_q - x_i)
    BandedMatrix A;    // n_y rows, n_x cols: A[q][x] = eta(y_q - x) h_x (for Lambda)
};

}  // namespace detail

class ThetaContext;

// Smoothed plan with its companion objects: theta on the marginal product
// grid, the plain mollification lambda on the kernel-extended grid, the
// supplied marginals, and the recorded mismatch of the input plan's own
// marginals against them.
struct SmoothedPlan {
    DensityField theta;
    DensityField lambda;
    SmoothingConfig config;
    std::vector<DensityField> marginals;
    double input_mismatch = 0.0;
    double marginal_check_tol = 0.0;
    std::shared_ptr<const ThetaContext> ctx;
};

class ThetaContext {
  public:
    SmoothingConfig cfg;
    std::vector<detail::FactorContext> factors;
    std::variant<AtomicPlan, DensityField> plan;
    std::vector<std::vector<double>> atom_g;  // atomic path: per factor, g_k(x, a_i) as M x n
    std::vector<double> rho_outer;            // product of marginals on the core grid

    int n_factors() const { return static_cast<int>(factors.size()); }
    bool atomic() const { return std::holds_alternative<AtomicPlan>(plan); }

    ProductGrid core_grid() const {
        std::vector<AxisGrid> f;
        for (const auto& fc : factors) f.push_back(fc.x_axis);
        return ProductGrid(std::move(f));
    }
    ProductGrid extended_grid() const {
        std::vector<AxisGrid> f;
        for (const auto& fc : factors) f.push_back(fc.y_axis);
        return ProductGrid(std::move(f));
    }
};

namespace detail {

inline void build_factor(FactorContext& fc, const DensityField& marginal_field, double eps) {
    if (marginal_field.grid.n_factors() != 1 || marginal_field.grid.dim() != 1)
        throw std::invalid_argument("theta_eps: marginals must be single-factor 1-d fields");
    if (!marginal_field.probability)
        throw std::invalid_argument("theta_eps: marginal with mass " +
                                    format_g17(marginal_field.mass) +
                                    " is not a probability field");
    fc.x_axis = marginal_field.grid.factors.front();
    const double h = fc.x_axis.spacing;
    const double se = std::sqrt(eps);
    if (h > se * 1.000001)
        throw std::invalid_argument(
            "theta_eps: grid spacing " + format_g17(h) + " exceeds sqrt(eps) = " + format_g17(se) +
            "; the kernel is unresolved at this resolution");
    fc.margin_cells = static_cast<std::size_t>(std::ceil(8.0 * se / h));
    fc.y_axis = extend_axis(fc.x_axis, fc.margin_cells);
    fc.rho = marginal_field.values;
    const GradientField gr = gradient(marginal_field);
    fc.drho = gr.comps.front();
    fc.den = convolve_values(fc.rho, fc.x_axis, fc.y_axis, eps);
    for (std::size_t q = 0; q < fc.den.size(); ++q)
        if (!(fc.den[q] >= 1e-250))
            throw std::runtime_error("theta_eps: smoothed marginal vanishes at y = " +
                                     format_g17(fc.y_axis.node(q)) +
                                     "; support too thin for this epsilon");

    const std::size_t n = fc.x_axis.count, ny = fc.y_axis.count, m = fc.margin_cells;
    fc.W.init(n, ny);
    const double hy = fc.y_axis.spacing;
    for (std::size_t i = 0; i < n; ++i) {
        // y band of node i: the y axis is the x axis shifted left by m cells.
        fc.W.lo[i] = i;  // y_{i} = x_i - m h, y_{i+2m} = x_i + m h
        fc.W.hi[i] = std::min(ny, i + 2 * m + 1);
        double* row = fc.W.row(i);
        const double x = fc.x_axis.node(i);
        for (std::size_t q = fc.W.lo[i]; q < fc.W.hi[i]; ++q)
            row[q] = eta1(fc.y_axis.node(q) - x, eps) * hy / fc.den[q];
    }

    fc.A.init(ny, n);
    for (std::size_t q = 0; q < ny; ++q) {
        const double y = fc.y_axis.node(q);
        const std::ptrdiff_t ic = static_cast<std::ptrdiff_t>(q) - static_cast<std::ptrdiff_t>(m);
        fc.A.lo[q] = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, ic - static_cast<std::ptrdiff_t>(m)));
        fc.A.hi[q] = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
            ic + static_cast<std::ptrdiff_t>(m) + 1, 0, static_cast<std::ptrdiff_t>(n)));
        double* row = fc.A.row(q);
        for (std::size_t x = fc.A.lo[q]; x < fc.A.hi[q]; ++x)
            row[x] = eta1(y - fc.x_axis.node(x), eps) * h;
    }

    fc.S.init(n, n);
    parallel_for(n, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t xo = i0; xo < i1; ++xo) {
            fc.S.lo[xo] = xo >= 2 * m ? xo - 2 * m : 0;
            fc.S.hi[xo] = std::min(n, xo + 2 * m + 1);
            double* srow = fc.S.row(xo);
            const double* wrow = fc.W.row(xo);
            for (std::size_t xi = fc.S.lo[xo]; xi < fc.S.hi[xo]; ++xi) {
                const double x_in = fc.x_axis.node(xi);
                const std::size_t qlo = std::max(fc.W.lo[xo], xi);
                const std::size_t qhi = std::min(fc.W.hi[xo], std::min(ny, xi + 2 * m + 1));
                double acc = 0.0;
                for (std::size_t q = qlo; q < qhi; ++q)
                    acc += wrow[q] * eta1(fc.y_axis.node(q) - x_in, eps);
                srow[xi] = acc * h;
            }
        }
    });
}

// g_k(x, a) = sum_q W[x][q] eta(y_q - a) for one factor and all atoms,
// stored atom-major: out[i * n + x].
inline std::vector<double> atom_g_matrix(const FactorContext& fc, const AtomicPlan& plan, int j,
                                         double eps) {
    const std::size_t n = fc.x_axis.count, ny = fc.y_axis.count, m = fc.margin_cells;
    const std::size_t M = plan.size();
    std::vector<double> out(M * n, 0.0);
    parallel_for(M, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const double a = plan.coord(i, j);
            const double qa = (a - fc.y_axis.origin) / fc.y_axis.spacing;
            const std::size_t alo = static_cast<std::size_t>(
                std::max(0.0, std::floor(qa - static_cast<double>(m))));
            const std::size_t ahi = static_cast<std::size_t>(std::min<double>(
                static_cast<double>(ny), std::ceil(qa + static_cast<double>(m)) + 1.0));
            double* dst = out.data() + i * n;
            for (std::size_t x = 0; x < n; ++x) {
                const std::size_t qlo = std::max(fc.W.lo[x], alo);
                const std::size_t qhi = std::min(fc.W.hi[x], ahi);
                if (qlo >= qhi) continue;
                const double* wrow = fc.W.row(x);
                double acc = 0.0;
                for (std::size_t q = qlo; q < qhi; ++q)
                    acc += wrow[q] * eta1(fc.y_axis.node(q) - a, eps);
                dst[x] = acc;
            }
        }
    });
    return out;
}

// Accumulate sum_i w_i outer(rows_k[i]) over a 2- or 3-factor core grid.
inline std::vector<double> accumulate_outer(const std::vector<const std::vector<double>*>& gmats,
                                            const std::vector<double>& weights,
                                            const std::vector<std::size_t>& counts) {
    const std::size_t M = weights.size();
    const int N = static_cast<int>(counts.size());
    std::size_t total = 1;
    for (std::size_t c : counts) total *= c;
    std::vector<double> out(total, 0.0);
    if (N == 2) {
        const std::size_t n0 = counts[0], n1 = counts[1];
        parallel_for(n0, [&](std::size_t q0lo, std::size_t q0hi) {
            for (std::size_t i = 0; i < M; ++i) {
                const double* g0 = gmats[0]->data() + i * n0;
                const double* g1 = gmats[1]->data() + i * n1;
                const double w = weights[i];
                for (std::size_t q0 = q0lo; q0 < q0hi; ++q0) {
                    const double f = w * g0[q0];
                    if (f == 0.0) continue;
                    double* slice = out.data() + q0 * n1;
                    for (std::size_t q1 = 0; q1 < n1; ++q1) slice[q1] += f * g1[q1];
                }
            }
        });
    } else if (N == 3) {
        const std::size_t n0 = counts[0], n1 = counts[1], n2 = counts[2];
        parallel_for(n0, [&](std::size_t q0lo, std::size_t q0hi) {
            for (std::size_t i = 0; i < M; ++i) {
                const double* g0 = gmats[0]->data() + i * n0;
                const double* g1 = gmats[1]->data() + i * n1;
                const double* g2 = gmats[2]->data() + i * n2;
                const double w = weights[i];
                for (std::size_t q0 = q0lo; q0 < q0hi; ++q0) {
                    const double f0 = w * g0[q0];
                    if (f0 == 0.0) continue;
                    for (std::size_t q1 = 0; q1 < n1; ++q1) {
                        const double f1 = f0 * g1[q1];
                        if (f1 == 0.0) continue;
                        double* slice = out.data() + (q0 * n1 + q1) * n2;
                        for (std::size_t q2 = 0; q2 < n2; ++q2) slice[q2] += f1 * g2[q2];
                    }
                }
            }
        });
    } else {
        throw std::invalid_argument("theta_eps: supported factor counts are 2 and 3");
    }
    return out;
}

}  // namespace detail

// Plain mollification of the plan by the product kernel, on the extended
// grid where the smoothed plan keeps essentially all of its mass.
inline DensityField lambda_eps(const DensityField& plan, const SmoothingConfig& cfg) {
    validate(cfg);
    validate(plan.grid);
    const double se = std::sqrt(cfg.epsilon);
    std::vector<AxisGrid> yaxes;
    std::vector<detail::BandedMatrix> mats;
    std::vector<std::size_t> counts;
    for (const AxisGrid& ax : plan.grid.factors) {
        if (ax.dim != 1) throw std::invalid_argument("lambda_eps: 1-d factors only");
        const std::size_t m = static_cast<std::size_t>(std::ceil(8.0 * se / ax.spacing));
        const AxisGrid ya = extend_axis(ax, m);
        detail::BandedMatrix A;
        A.init(ya.count, ax.count);
        for (std::size_t q = 0; q < ya.count; ++q) {
            const double y = ya.node(q);
            const std::ptrdiff_t ic = static_cast<std::ptrdiff_t>(q) - static_cast<std::ptrdiff_t>(m);
            A.lo[q] = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, ic - static_cast<std::ptrdiff_t>(m)));
            A.hi[q] = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                ic + static_cast<std::ptrdiff_t>(m) + 1, 0, static_cast<std::ptrdiff_t>(ax.count)));
            for (std::size_t x = A.lo[q]; x < A.hi[q]; ++x)
                A.row(q)[x] = eta1(y - ax.node(x), cfg.epsilon) * ax.spacing;
        }
        yaxes.push_back(ya);
        mats.push_back(std::move(A));
        counts.push_back(ax.count);
    }
    std::vector<double> vals = plan.values;
    for (int k = 0; k < static_cast<int>(mats.size()); ++k)
        vals = detail::apply_axis(vals, counts, k, mats[static_cast<std::size_t>(k)]);
    return make_field(ProductGrid(std::move(yaxes)), std::move(vals));
}

inline DensityField lambda_eps(const AtomicPlan& plan, const ProductGrid& core_grid,
                               const SmoothingConfig& cfg) {
    validate(cfg);
    const double se = std::sqrt(cfg.epsilon);
    std::vector<AxisGrid> yaxes;
    for (const AxisGrid& ax : core_grid.factors) {
        const std::size_t m = static_cast<std::size_t>(std::ceil(8.0 * se / ax.spacing));
        yaxes.push_back(extend_axis(ax, m));
    }
    return convolve_atoms(plan, KernelSpec{cfg.epsilon, 1}, ProductGrid(std::move(yaxes))).field;
}

namespace detail {

inline SmoothedPlan finish_theta(std::shared_ptr<ThetaContext> ctx,
                                 std::vector<DensityField> marginals, double mismatch,
                                 DensityField lambda) {
    const SmoothingConfig& cfg = ctx->cfg;
    const int N = ctx->n_factors();
    const ProductGrid core = ctx->core_grid();

    // rho_outer = product of the marginals at the core nodes.
    ctx->rho_outer = product_plan(marginals).values;

    std::vector<std::size_t> counts;
    for (const auto& fc : ctx->factors) counts.push_back(fc.x_axis.count);

    std::vector<double> T;
    if (ctx->atomic()) {
        const AtomicPlan& plan = std::get<AtomicPlan>(ctx->plan);
        ctx->atom_g.resize(static_cast<std::size_t>(N));
        for (int j = 0; j < N; ++j)
            ctx->atom_g[static_cast<std::size_t>(j)] =
                atom_g_matrix(ctx->factors[static_cast<std::size_t>(j)], plan, j, cfg.epsilon);
        std::vector<const std::vector<double>*> mats;
        for (const auto& g : ctx->atom_g) mats.push_back(&g);
        T = accumulate_outer(mats, plan.weights, counts);
    } else {
        T = std::get<DensityField>(ctx->plan).values;
        for (int k = 0; k < N; ++k)
            T = apply_axis(T, counts, k, ctx->factors[static_cast<std::size_t>(k)].S);
    }
    for (std::size_t q = 0; q < T.size(); ++q) T[q] *= ctx->rho_outer[q];

    SmoothedPlan sp;
    sp.theta = make_field(core, std::move(T));
    sp.lambda = std::move(lambda);
    sp.config = cfg;
    sp.marginals = std::move(marginals);
    sp.input_mismatch = mismatch;
    sp.marginal_check_tol = std::max(cfg.marginal_tol, 2.0 * mismatch + 1e-9);
    sp.ctx = std::move(ctx);

    // The construction preserves the supplied marginals by telescoping; a
    // violation here means the resolution or margins are inadequate.
    for (int j = 0; j < N; ++j) {
        const double gap = l1_distance(marginal(sp.theta, j), sp.marginals[static_cast<std::size_t>(j)]);
        if (!(gap <= sp.marginal_check_tol))
            throw std::runtime_error("theta_eps: marginal " + std::to_string(j) +
                                     " of the smoothed plan is off by L1 " + format_g17(gap) +
                                     ", tolerance " + format_g17(sp.marginal_check_tol));
    }
    return sp;
}

inline std::shared_ptr<ThetaContext> start_context(const std::vector<DensityField>& marginals,
                                                   const SmoothingConfig& cfg) {
    validate(cfg);
    if (marginals.size() < 2)
        throw std::invalid_argument("theta_eps: need at least two marginals");
    auto ctx = std::make_shared<ThetaContext>();
    ctx->cfg = cfg;
    ctx->factors.resize(marginals.size());
    for (std::size_t j = 0; j < marginals.size(); ++j)
        build_factor(ctx->factors[j], marginals[j], cfg.epsilon);
    return ctx;
}

}  // namespace detail

// Marginal-preserving smoothing of a grid plan. The supplied marginals must
// be the plan's own projections up to a small mismatch; the correction
// weights are always built from the supplied marginals.
inline SmoothedPlan theta_eps(const DensityField& plan, const std::vector<DensityField>& marginals,
                              const SmoothingConfig& cfg) {
    auto ctx = detail::start_context(marginals, cfg);
    if (plan.grid.n_factors() != static_cast<int>(marginals.size()) || plan.grid.dim() != 1)
        throw std::invalid_argument("theta_eps: plan grid does not match the marginal list");
    for (std::size_t j = 0; j < marginals.size(); ++j)
        if (!(plan.grid.factors[j] == ctx->factors[j].x_axis))
            throw std::invalid_argument("theta_eps: plan factor " + std::to_string(j) +
                                        " lives on a different axis than its marginal");
    double mismatch = 0.0;
    for (std::size_t j = 0; j < marginals.size(); ++j)
        mismatch = std::max(mismatch,
                            l1_distance(marginal(plan, static_cast<int>(j)), marginals[j]));
    if (mismatch > 0.1)
        throw std::invalid_argument("theta_eps: plan marginals differ from the supplied ones by " +
                                    format_g17(mismatch) + " in L1; they do not describe the same plan");
    DensityField lam = lambda_eps(plan, cfg);
    ctx->plan = plan;
    return detail::finish_theta(std::move(ctx), marginals, mismatch, std::move(lam));
}

inline SmoothedPlan theta_eps(const AtomicPlan& plan, const std::vector<DensityField>& marginals,
                              const SmoothingConfig& cfg) {
    auto ctx = detail::start_context(marginals, cfg);
    if (plan.N != static_cast<int>(marginals.size()) || plan.d != 1)
        throw std::invalid_argument("theta_eps: plan shape does not match the marginal list");
    double mismatch = 0.0;
    for (int j = 0; j < plan.N; ++j)
        mismatch = std::max(
            mismatch, l1_distance(marginal_atoms(plan, j, ctx->factors[static_cast<std::size_t>(j)].x_axis),
                                  marginals[static_cast<std::size_t>(j)]));
    if (mismatch > 0.1)
        throw std::invalid_argument("theta_eps: plan marginals differ from the supplied ones by " +
                                    format_g17(mismatch) + " in L1; they do not describe the same plan");
    // Atoms enter the pipeline at grid resolution: each coordinate moves to
    // the center of its cell (the same binning marginal_atoms uses). On the
    // lattice the plan-side and marginal-side kernel sums are identical
    // finite sums, so the smoothed marginals reproduce the binned
    // projections at summation precision; off-lattice atoms would leave an
    // irreducible O(h^2/eps) drift no correction weight can cancel.
    AtomicPlan snapped = plan;
    for (std::size_t i = 0; i < snapped.size(); ++i)
        for (int j = 0; j < snapped.N; ++j) {
            const AxisGrid& g = ctx->factors[static_cast<std::size_t>(j)].x_axis;
            double& x = snapped.coords[i * static_cast<std::size_t>(snapped.row_len()) +
                                       static_cast<std::size_t>(j)];
            const auto cell = static_cast<std::size_t>(
                std::min<double>(static_cast<double>(g.count - 1),
                                 std::max(0.0, std::floor((x - g.box_lo()) / g.spacing))));
            x = g.node(cell);
        }
    DensityField lam = lambda_eps(snapped, ctx->core_grid(), cfg);
    ctx->plan = std::move(snapped);
    return detail::finish_theta(std::move(ctx), marginals, mismatch, std::move(lam));
}

// Marginal certificates of the smoothed plan.
inline std::vector<BoundCertificate> verify_marginals(const SmoothedPlan& sp) {
    std::vector<BoundCertificate> out;
    for (std::size_t j = 0; j < sp.marginals.size(); ++j) {
        const double gap = l1_distance(marginal(sp.theta, static_cast<int>(j)), sp.marginals[j]);
        out.push_back(make_certificate("marginal_" + std::to_string(j), gap, sp.marginal_check_tol));
    }
    return out;
}

// Closed-form gradient of theta in the coordinate of factor j:
// (rho_j'/rho_j) theta + rho_outer * (contraction with the derivative kernel
// ((y - x)/eps) eta(y - x) in slot j). This is the exact derivative of the
// discrete theta expression in x_j up to the y-quadrature.
inline std::vector<double> theta_gradient(const SmoothedPlan& sp, int j) {
    const ThetaContext& ctx = *sp.ctx;
    const SmoothingConfig& cfg = ctx.cfg;
    const int N = ctx.n_factors();
    if (j < 0 || j >= N) throw std::invalid_argument("theta_gradient: factor index out of range");
    const auto& fc = ctx.factors[static_cast<std::size_t>(j)];
    const std::size_t n = fc.x_axis.count, ny = fc.y_axis.count;
    const double eps = cfg.epsilon;

    // Derivative weights Wd[x][q] = ((y_q - x)/eps) W[x][q].
    detail::BandedMatrix Wd;
    Wd.init(n, ny);
    Wd.lo = fc.W.lo;
    Wd.hi = fc.W.hi;
    for (std::size_t x = 0; x < n; ++x) {
        const double* wrow = fc.W.row(x);
        double* drow = Wd.row(x);
        const double xc = fc.x_axis.node(x);
        for (std::size_t q = Wd.lo[x]; q < Wd.hi[x]; ++q)
            drow[q] = (fc.y_axis.node(q) - xc) / eps * wrow[q];
    }

    std::vector<std::size_t> counts;
    for (const auto& f : ctx.factors) counts.push_back(f.x_axis.count);

    std::vector<double> term2;
    if (ctx.atomic()) {
        const AtomicPlan& plan = std::get<AtomicPlan>(ctx.plan);
        // gd[i * n + x] = sum_q Wd[x][q] eta(y_q - a_ij)
        std::vector<double> gd(plan.size() * n, 0.0);
        const std::size_t m = fc.margin_cells;
        parallel_for(plan.size(), [&](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) {
                const double a = plan.coord(i, j);
                const double qa = (a - fc.y_axis.origin) / fc.y_axis.spacing;
                const std::size_t alo = static_cast<std::size_t>(
                    std::max(0.0, std::floor(qa - static_cast<double>(m))));
                const std::size_t ahi = static_cast<std::size_t>(std::min<double>(
                    static_cast<double>(ny), std::ceil(qa + static_cast<double>(m)) + 1.0));
                double* dst = gd.data() + i * n;
                for (std::size_t x = 0; x < n; ++x) {
                    const std::size_t qlo = std::max(Wd.lo[x], alo);
                    const std::size_t qhi = std::min(Wd.hi[x], ahi);
                    if (qlo >= qhi) continue;
                    const double* drow = Wd.row(x);
                    double acc = 0.0;
                    for (std::size_t q = qlo; q < qhi; ++q)
                        acc += drow[q] * eta1(fc.y_axis.node(q) - a, eps);
                    dst[x] = acc;
                }
            }
        });
        std::vector<const std::vector<double>*> mats;
        for (int k = 0; k < N; ++k)
            mats.push_back(k == j ? &gd : &ctx.atom_g[static_cast<std::size_t>(k)]);
        term2 = detail::accumulate_outer(mats, plan.weights, counts);
    } else {
        // Sd[xo][xi] = h sum_q Wd[xo][q] eta(y_q - x_i)
        detail::BandedMatrix Sd;
        Sd.init(n, n);
        Sd.lo = fc.S.lo;
        Sd.hi = fc.S.hi;
        const std::size_t m = fc.margin_cells;
        const double h = fc.x_axis.spacing;
        parallel_for(n, [&](std::size_t i0, std::size_t i1) {
            for (std::size_t xo = i0; xo < i1; ++xo) {
                double* srow = Sd.row(xo);
                const double* drow = Wd.row(xo);
                for (std::size_t xi = Sd.lo[xo]; xi < Sd.hi[xo]; ++xi) {
                    const double x_in = fc.x_axis.node(xi);
                    const std::size_t qlo = std::max(Wd.lo[xo], xi);
                    const std::size_t qhi = std::min(Wd.hi[xo], std::min(ny, xi + 2 * m + 1));
                    double acc = 0.0;
                    for (std::size_t q = qlo; q < qhi; ++q)
                        acc += drow[q] * eta1(fc.y_axis.node(q) - x_in, eps);
                    srow[xi] = acc * h;
                }
            }
        });
        term2 = std::get<DensityField>(ctx.plan).values;
        for (int k = 0; k < N; ++k)
            term2 = detail::apply_axis(term2, counts, k,
                                       k == j ? Sd : ctx.factors[static_cast<std::size_t>(k)].S);
    }

    // Assemble (drho_j/rho_j) theta + rho_outer * term2 node-wise.
    const ProductGrid core = sp.theta.grid;
    const auto strides = core.strides();
    const std::size_t sj = strides[static_cast<std::size_t>(j)];
    const std::size_t nj = core.axis_nodes(j);
    std::vector<double> out(sp.theta.values.size());
    parallel_for(out.size(), [&](std::size_t q0, std::size_t q1) {
        for (std::size_t q = q0; q < q1; ++q) {
            const std::size_t xj = (q / sj) % nj;
            const double rj = fc.rho[xj];
            const double ratio = rj >= cfg.density_floor ? fc.drho[xj] / rj : 0.0;
            out[q] = ratio * sp.theta.values[q] + ctx.rho_outer[q] * term2[q];
        }
    });
    return out;
}

// ----------------------------------------------------------- energy bounds

// Flat kernel bound at p = 2: E(theta) <= sum_j E(rho_j) + N d / eps, with
// the kernel constant taken from the certified quadrature.
inline BoundCertificate energy_bound_flat2(const SmoothedPlan& sp) {
    const SobolevConfig scfg{2.0, sp.config.density_floor};
    const double measured = energy(sp.theta, scfg);
    double bound = 0.0;
    for (const auto& rho : sp.marginals) bound += energy(rho, scfg);
    const KernelConstants kc = kernel_constants(KernelSpec{sp.config.epsilon, 1}, 2.0);
    bound += static_cast<double>(sp.marginals.size()) * kc.c_d_over_eps;
    return make_certificate("energy_flat_2", measured, bound);
}

// Flat kernel bound for general p: E(theta) <= sum_j (E_j^{1/p} + c(d,p)/sqrt(eps))^p.
inline BoundCertificate energy_bound_flat(const SmoothedPlan& sp) {
    const double p = sp.config.p;
    const SobolevConfig scfg{p, sp.config.density_floor};
    const double measured = energy(sp.theta, scfg);
    const KernelConstants kc = kernel_constants(KernelSpec{sp.config.epsilon, 1}, p);
    const double kterm = kc.c_d_p / std::sqrt(sp.config.epsilon);
    double bound = 0.0;
    for (const auto& rho : sp.marginals)
        bound += std::pow(std::pow(energy(rho, scfg), 1.0 / p) + kterm, p);
    return make_certificate("energy_flat_p", measured, bound);
}

// Mollification energy drop of one marginal, combined into the exponent
// 1/p along the branch valid for the given p. Negative brackets within
// 1e-10 are resolution noise and clamp to zero; anything larger is an error.
inline double delta_p(const DensityField& rho, const SmoothingConfig& cfg) {
    if (!(cfg.p > 1.0)) throw std::invalid_argument("delta_p: need p > 1");
    const SobolevConfig scfg{cfg.p, cfg.density_floor};
    const double e = energy(rho, scfg);
    const AxisGrid& ax = rho.grid.factors.front();
    const std::size_t m =
        static_cast<std::size_t>(std::ceil(8.0 * std::sqrt(cfg.epsilon) / ax.spacing));
    const DensityField conv = convolve_to(rho, KernelSpec{cfg.epsilon, 1}, extend_axis(ax, m));
    const double ee = energy(conv, scfg);
    const auto clamp_bracket = [](double v, const char* what) {
        if (v < -1e-10)
            throw std::runtime_error(std::string("delta_p: ") + what + " is negative (" +
                                     format_g17(v) + "); the grid does not resolve this marginal");
        return std::max(0.0, v);
    };
    if (cfg.p >= 2.0)
        return std::pow(clamp_bracket(e - ee, "energy drop"), 1.0 / cfg.p);
    const double q = 1.0 / (cfg.p - 1.0);
    const double inner =
        clamp_bracket(std::pow(e + ee, q) - 2.0 * std::pow(ee, q), "concavity bracket");
    return std::pow(inner, (cfg.p - 1.0) / cfg.p);
}

// Mollified-plan bound: E(theta)^{1/p} is controlled block-wise by the
// gradient of lambda's root plus the marginal mollification drop. At p = 2
// the sharp constant 1 applies; away from 2 the Clarkson factor 2^{(p-1)/p}.
inline double regular_energy_bound_value(const DensityField& lambda,
                                         const std::vector<DensityField>& marginals,
                                         const SmoothingConfig& cfg) {
    const double p = cfg.p;
    const SobolevConfig scfg{p, cfg.density_floor};
    const GradientField gl = p_root_gradient(lambda, scfg);
    const double vol = lambda.grid.cell_volume();
    const double cp = p == 2.0 ? 1.0 : std::pow(2.0, (p - 1.0) / p);
    double bound = 0.0;
    for (std::size_t j = 0; j < marginals.size(); ++j) {
        const double lj = std::pow(
            pairwise_sum_fn(lambda.values.size(),
                            [&](std::size_t q) {
                                return std::pow(std::abs(gl.comps[j][q]), p);
                            }) *
                vol,
            1.0 / p);
        bound += std::pow(lj + cp * delta_p(marginals[j], cfg), p);
    }
    return bound;
}

inline BoundCertificate energy_bound_regular(const SmoothedPlan& sp) {
    const SobolevConfig scfg{sp.config.p, sp.config.density_floor};
    const double measured = energy(sp.theta, scfg);
    const double bound = regular_energy_bound_value(sp.lambda, sp.marginals, sp.config);
    return make_certificate("energy_regular", measured, bound);
}

// ------------------------------------------------- pointwise kernel bounds

// Node-wise upper bound: lambda(Y) <= (2 pi eps)^{-(N-1)d/2} prod_k
// den_k(y_k)^{1/N}. The generalized Hoelder step contributes a factor
// (2 pi eps)^{-d(N-1)/(2N)} for each of the N marginals.
inline BoundCertificate lambda_upper_bound(const SmoothedPlan& sp) {
    const ThetaContext& ctx = *sp.ctx;
    const int N = ctx.n_factors();
    const double C = std::pow(2.0 * std::numbers::pi * sp.config.epsilon,
                              -0.5 * static_cast<double>(N - 1));
    const auto strides = sp.lambda.grid.strides();
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < sp.lambda.values.size(); ++q) {
        double rhs = C;
        std::size_t rem = q;
        for (int a = 0; a < N; ++a) {
            const std::size_t ia = rem / strides[static_cast<std::size_t>(a)];
            rem %= strides[static_cast<std::size_t>(a)];
            rhs *= std::pow(ctx.factors[static_cast<std::size_t>(a)].den[ia],
                            1.0 / static_cast<double>(N));
        }
        worst = std::max(worst, sp.lambda.values[q] - rhs);
    }
    return make_certificate("lambda_upper", worst, 0.0);
}

// Node-wise lower bound on the smoothed marginal given that rho_j puts mass
// gamma on the centered ball of radius R.
inline BoundCertificate marginal_conv_lower_bound(const SmoothedPlan& sp, int j, double R,
                                                  double gamma) {
    if (j < 0 || j >= sp.ctx->n_factors())
        throw std::invalid_argument("marginal_conv_lower_bound: factor index out of range");
    if (!(R >= 0.0) || !(gamma >= 0.0) || gamma > 1.0)
        throw std::invalid_argument("marginal_conv_lower_bound: need R >= 0 and gamma in [0, 1]");
    const double ball = box_mass(sp.marginals[static_cast<std::size_t>(j)], -R, R);
    if (ball < gamma)
        throw std::invalid_argument("marginal_conv_lower_bound: marginal " + std::to_string(j) +
                                    " carries only " + format_g17(ball) + " of mass on [-" +
                                    format_g17(R) + ", " + format_g17(R) + "], below gamma = " +
                                    format_g17(gamma));
    const auto& fc = sp.ctx->factors[static_cast<std::size_t>(j)];
    const double eps = sp.config.epsilon;
    const double norm = gamma / std::sqrt(2.0 * std::numbers::pi * eps);
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < fc.den.size(); ++q) {
        const double y = std::abs(fc.y_axis.node(q));
        const double lower = norm * std::exp(-0.5 * sq(y + R) / eps);
        worst = std::max(worst, lower - fc.den[q]);
    }
    return make_certificate("lambda_lower_" + std::to_string(j), worst, 0.0);
}

// --------------------------------------------------------- diagonal spread

struct DiagonalReport {
    BoundCertificate surrogate;  // per-coordinate union bound against N K(d) e^{-r^2/4N eps}
    double mc_p = 0.0, mc_q = 0.0;  // direct event frequencies under both couplings
    double se_p = 0.0, se_q = 0.0;
    std::size_t samples = 0;
};

// Mass that the couplings place at |X - Y| >= r. The per-coordinate events
// |x_j - y_j| >= r/sqrt(N) have exactly the kernel tail mass, so their sum
// is both a valid surrogate and a quantity with a closed reference value.
inline DiagonalReport diagonal_mass(const SmoothedPlan& sp, double r, std::size_t samples,
                                    std::uint64_t seed) {
    if (!(r > 0.0)) throw std::invalid_argument("diagonal_mass: need r > 0");
    const ThetaContext& ctx = *sp.ctx;
    const int N = ctx.n_factors();
    const double eps = sp.config.epsilon;
    const double se = std::sqrt(eps);

    DiagonalReport rep;
    const double nd = static_cast<double>(N);
    const TailEstimate tail = tail_mass(r / std::sqrt(nd), KernelSpec{eps, 1});
    rep.surrogate = make_certificate("diagonal_mass", nd * tail.measured, nd * tail.bound);
    rep.samples = samples;
    if (samples == 0) return rep;

    // Cumulative weights for sampling X from the plan.
    std::vector<double> cum;
    const AtomicPlan* atoms = ctx.atomic() ? &std::get<AtomicPlan>(ctx.plan) : nullptr;
    const DensityField* table = ctx.atomic() ? nullptr : &std::get<DensityField>(ctx.plan);
    if (atoms) {
        cum.resize(atoms->size());
        double acc = 0.0;
        for (std::size_t i = 0; i < atoms->size(); ++i) cum[i] = acc += atoms->weights[i];
    } else {
        cum.resize(table->values.size());
        double acc = 0.0;
        for (std::size_t i = 0; i < cum.size(); ++i) cum[i] = acc += table->values[i];
    }
    const double cum_total = cum.back();

    GaussianSampler rng(seed);
    std::vector<double> X(static_cast<std::size_t>(N)), Y(static_cast<std::size_t>(N));
    std::vector<std::size_t> idx(static_cast<std::size_t>(N));
    std::size_t hits_q = 0, hits_p = 0;
    for (std::size_t s = 0; s < samples; ++s) {
        // X ~ plan, Y = X + sqrt(eps) xi: the joint law of the lifted plan.
        const double u = rng.uniform() * cum_total;
        const std::size_t pick = static_cast<std::size_t>(
            std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
        if (atoms) {
            for (int k = 0; k < N; ++k) X[static_cast<std::size_t>(k)] = atoms->coord(pick, k);
        } else {
            table->grid.unflatten(std::min(pick, cum.size() - 1), idx.data());
            for (int k = 0; k < N; ++k)
                X[static_cast<std::size_t>(k)] =
                    table->grid.axis_coord(k, idx[static_cast<std::size_t>(k)]);
        }
        double d2 = 0.0;
        for (int k = 0; k < N; ++k) {
            Y[static_cast<std::size_t>(k)] = X[static_cast<std::size_t>(k)] + se * rng.normal();
            d2 += sq(Y[static_cast<std::size_t>(k)] - X[static_cast<std::size_t>(k)]);
        }
        if (d2 >= r * r) ++hits_q;

        // Resample X | Y from the corrected kernel: x_k ~ eta(y_k - .) rho_k.
        double d2p = 0.0;
        for (int k = 0; k < N; ++k) {
            const auto& fc = ctx.factors[static_cast<std::size_t>(k)];
            const double y = Y[static_cast<std::size_t>(k)];
            double tot = 0.0;
            for (std::size_t i = 0; i < fc.x_axis.count; ++i)
                tot += eta1(y - fc.x_axis.node(i), eps) * fc.rho[i];
            double target = rng.uniform() * tot;
            double acc = 0.0;
            std::size_t pick_x = fc.x_axis.count - 1;
            for (std::size_t i = 0; i < fc.x_axis.count; ++i) {
                acc += eta1(y - fc.x_axis.node(i), eps) * fc.rho[i];
                if (acc >= target) {
                    pick_x = i;
                    break;
                }
            }
            d2p += sq(y - fc.x_axis.node(pick_x));
        }
        if (d2p >= r * r) ++hits_p;
    }
    rep.mc_q = static_cast<double>(hits_q) / static_cast<double>(samples);
    rep.mc_p = static_cast<double>(hits_p) / static_cast<double>(samples);
    rep.se_q = std::sqrt(std::max(rep.mc_q * (1.0 - rep.mc_q), 1.0 / static_cast<double>(samples)) /
                         static_cast<double>(samples));
    rep.se_p = std::sqrt(std::max(rep.mc_p * (1.0 - rep.mc_p), 1.0 / static_cast<double>(samples)) /
                         static_cast<double>(samples));
    return rep;
}

// ------------------------------------------------------------- domination

// Node-wise inequality |grad_j theta|^p theta^{1-p} <= 2^{p-1} (
// (|rho_j'|/rho_j)^p theta + D_j ) on nodes above the floor, where D_j is
// the plan contraction with the kernel |(y-x)/eps|^p weight in slot j.
// The split is the triangle inequality plus Hoelder with the same discrete
// weights, so it holds at summation precision.
inline BoundCertificate domination_check(const SmoothedPlan& sp, int j) {
    const ThetaContext& ctx = *sp.ctx;
    const SmoothingConfig& cfg = ctx.cfg;
    const double p = cfg.p;
    const int N = ctx.n_factors();
    if (j < 0 || j >= N) throw std::invalid_argument("domination_check: factor index out of range");
    const auto& fc = ctx.factors[static_cast<std::size_t>(j)];
    const std::size_t n = fc.x_axis.count, ny = fc.y_axis.count;
    const double eps = cfg.epsilon;

    // |(y - x)/eps|^p weights.
    detail::BandedMatrix Wp;
    Wp.init(n, ny);
    Wp.lo = fc.W.lo;
    Wp.hi = fc.W.hi;
    for (std::size_t x = 0; x < n; ++x) {
        const double* wrow = fc.W.row(x);
        double* prow = Wp.row(x);
        const double xc = fc.x_axis.node(x);
        for (std::size_t q = Wp.lo[x]; q < Wp.hi[x]; ++q)
            prow[q] = std::pow(std::abs(fc.y_axis.node(q) - xc) / eps, p) * wrow[q];
    }

    std::vector<std::size_t> counts;
    for (const auto& f : ctx.factors) counts.push_back(f.x_axis.count);

    std::vector<double> dterm;
    if (ctx.atomic()) {
        const AtomicPlan& plan = std::get<AtomicPlan>(ctx.plan);
        const std::size_t m = fc.margin_cells;
        std::vector<double> gp(plan.size() * n, 0.0);
        parallel_for(plan.size(), [&](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) {
                const double a = plan.coord(i, j);
                const double qa = (a - fc.y_axis.origin) / fc.y_axis.spacing;
                const std::size_t alo = static_cast<std::size_t>(
                    std::max(0.0, std::floor(qa - static_cast<double>(m))));
                const std::size_t ahi = static_cast<std::size_t>(std::min<double>(
                    static_cast<double>(ny), std::ceil(qa + static_cast<double>(m)) + 1.0));
                double* dst = gp.data() + i * n;
                for (std::size_t x = 0; x < n; ++x) {
                    const std::size_t qlo = std::max(Wp.lo[x], alo);
                    const std::size_t qhi = std::min(Wp.hi[x], ahi);
                    if (qlo >= qhi) continue;
                    const double* prow = Wp.row(x);
                    double acc = 0.0;
                    for (std::size_t q = qlo; q < qhi; ++q)
                        acc += prow[q] * eta1(fc.y_axis.node(q) - a, eps);
                    dst[x] = acc;
                }
            }
        });
        std::vector<const std::vector<double>*> mats;
        for (int k = 0; k < N; ++k)
            mats.push_back(k == j ? &gp : &ctx.atom_g[static_cast<std::size_t>(k)]);
        dterm = detail::accumulate_outer(mats, plan.weights, counts);
    } else {
        detail::BandedMatrix Sp;
        Sp.init(n, n);
        Sp.lo = fc.S.lo;
        Sp.hi = fc.S.hi;
        const std::size_t m = fc.margin_cells;
        const double h = fc.x_axis.spacing;
        parallel_for(n, [&](std::size_t i0, std::size_t i1) {
            for (std::size_t xo = i0; xo < i1; ++xo) {
                double* srow = Sp.row(xo);
                const double* prow = Wp.row(xo);
                for (std::size_t xi = Sp.lo[xo]; xi < Sp.hi[xo]; ++xi) {
                    const double x_in = fc.x_axis.node(xi);
                    const std::size_t qlo = std::max(Wp.lo[xo], xi);
                    const std::size_t qhi = std::min(Wp.hi[xo], std::min(ny, xi + 2 * m + 1));
                    double acc = 0.0;
                    for (std::size_t q = qlo; q < qhi; ++q)
                        acc += prow[q] * eta1(fc.y_axis.node(q) - x_in, eps);
                    srow[xi] = acc * h;
                }
            }
        });
        dterm = std::get<DensityField>(ctx.plan).values;
        for (int k = 0; k < N; ++k)
            dterm = detail::apply_axis(dterm, counts, k,
                                       k == j ? Sp : ctx.factors[static_cast<std::size_t>(k)].S);
    }

    const std::vector<double> grad = theta_gradient(sp, j);
    const ProductGrid core = sp.theta.grid;
    const auto strides = core.strides();
    const std::size_t sj = strides[static_cast<std::size_t>(j)];
    const std::size_t nj = core.axis_nodes(j);
    const double cpow = std::pow(2.0, p - 1.0);
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < grad.size(); ++q) {
        const double th = sp.theta.values[q];
        const std::size_t xj = (q / sj) % nj;
        const double rj = fc.rho[xj];
        if (th < cfg.density_floor || rj < cfg.density_floor) continue;
        const double lhs = std::pow(std::abs(grad[q]), p) * std::pow(th, 1.0 - p);
        const double rhs = cpow * (std::pow(std::abs(fc.drho[xj]) / rj, p) * th +
                                   ctx.rho_outer[q] * dterm[q]);
        worst = std::max(worst, lhs - rhs);
    }
    return make_certificate("domination_" + std::to_string(j), worst, 0.0);
}

}  // namespace plansmooth
