#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "field.hpp"
#include "grid.hpp"
#include "util.hpp"

namespace plansmooth {

// Discrete transport plan: M weighted atoms in the N-fold product of d-dim
// factors. Row i of `coords` holds the N*d coordinates of atom i (factor 0
// first). Weights are nonnegative and sum to 1.
struct AtomicPlan {
    int d = 1;
    int N = 2;
    std::vector<double> coords;
    std::vector<double> weights;

    std::size_t size() const { return weights.size(); }
    int row_len() const { return N * d; }
    const double* atom(std::size_t i) const { return coords.data() + i * static_cast<std::size_t>(row_len()); }
    // Coordinate t of factor j in atom i.
    double coord(std::size_t i, int j, int t = 0) const { return atom(i)[j * d + t]; }
};

inline AtomicPlan make_atomic_plan(int d, int N, std::vector<double> coords,
                                   std::vector<double> weights) {
    if (d < 1 || N < 1) throw std::invalid_argument("make_atomic_plan: need d >= 1 and N >= 1");
    const std::size_t row = static_cast<std::size_t>(N) * static_cast<std::size_t>(d);
    if (weights.empty()) throw std::invalid_argument("make_atomic_plan: empty plan");
    if (coords.size() != weights.size() * row)
        throw std::invalid_argument("make_atomic_plan: coordinate row length does not match N*d");
    for (double c : coords)
        if (!std::isfinite(c)) throw std::invalid_argument("make_atomic_plan: non-finite coordinate");
    for (std::size_t i = 0; i < weights.size(); ++i)
        if (!(weights[i] >= 0.0))
            throw std::invalid_argument("make_atomic_plan: negative weight at atom " + std::to_string(i));
    const double total = pairwise_sum(weights);
    if (std::abs(total - 1.0) > 1e-12)
        throw std::invalid_argument("make_atomic_plan: weights sum to " + format_g17(total) +
                                    ", expected 1 within 1e-12");
    AtomicPlan p;
    p.d = d;
    p.N = N;
    p.coords = std::move(coords);
    p.weights = std::move(weights);
    return p;
}

template <typename Fn>
double integrate(const AtomicPlan& p, const Fn& fn) {
    return pairwise_sum_fn(p.size(), [&](std::size_t i) { return p.weights[i] * fn(p.atom(i)); });
}

// ------------------------------------------------------------------ marginals

// j-th marginal of a grid plan: integrate out every factor except j.
// Linear in the plan and mass preserving up to summation roundoff.
inline DensityField marginal(const DensityField& plan, int j) {
    const int N = plan.grid.n_factors();
    if (j < 0 || j >= N) throw std::invalid_argument("marginal: factor index out of range");
    const int d = plan.grid.dim();
    const auto strides = plan.grid.strides();

    const AxisGrid& fj = plan.grid.factors[static_cast<std::size_t>(j)];
    const std::size_t n_out = fj.nodes();

    // Strides and node counts of the complement axes.
    std::vector<std::size_t> comp_strides, comp_counts;
    double comp_vol = 1.0;
    for (int a = 0; a < plan.grid.axis_count(); ++a) {
        if (a / d == j) continue;
        comp_strides.push_back(strides[static_cast<std::size_t>(a)]);
        comp_counts.push_back(plan.grid.axis_nodes(a));
        comp_vol *= plan.grid.axis_spacing(a);
    }
    std::size_t n_comp = 1;
    for (std::size_t c : comp_counts) n_comp *= c;

    // Offsets of all complement combinations, enumerated once.
    std::vector<std::size_t> comp_offsets(n_comp, 0);
    {
        std::vector<std::size_t> idx(comp_counts.size(), 0);
        for (std::size_t c = 0; c < n_comp; ++c) {
            std::size_t off = 0;
            for (std::size_t a = 0; a < comp_counts.size(); ++a) off += idx[a] * comp_strides[a];
            comp_offsets[c] = off;
            for (std::size_t a = comp_counts.size(); a-- > 0;) {
                if (++idx[a] < comp_counts[a]) break;
                idx[a] = 0;
            }
        }
    }

    std::vector<double> out(n_out);
    std::vector<std::size_t> jstrides(static_cast<std::size_t>(d));
    for (int t = 0; t < d; ++t) jstrides[t] = strides[static_cast<std::size_t>(j * d + t)];
    for (std::size_t o = 0; o < n_out; ++o) {
        // Decompose the output node into the factor-j axis indices.
        std::size_t base = 0, rem = o;
        for (int t = d - 1; t >= 0; --t) {
            base += (rem % fj.count) * jstrides[static_cast<std::size_t>(t)];
            rem /= fj.count;
        }
        out[o] = pairwise_sum_fn(n_comp, [&](std::size_t c) {
                     return plan.values[base + comp_offsets[c]];
                 }) *
                 comp_vol;
    }
    return make_field(fj, std::move(out));
}

// Histogram of the j-th factor coordinates of an atomic plan on the given
// factor grid. Atoms must land inside the covered box.
inline DensityField marginal_atoms(const AtomicPlan& plan, int j, const AxisGrid& grid) {
    if (j < 0 || j >= plan.N) throw std::invalid_argument("marginal_atoms: factor index out of range");
    if (grid.dim != plan.d)
        throw std::invalid_argument("marginal_atoms: grid dimension does not match plan factors");
    validate(grid);
    std::vector<double> out(grid.nodes(), 0.0);
    const double inv_vol = 1.0 / grid.cell_volume();
    for (std::size_t i = 0; i < plan.size(); ++i) {
        std::size_t flat = 0;
        for (int t = 0; t < plan.d; ++t) {
            const double x = plan.coord(i, j, t);
            if (x < grid.box_lo() || x > grid.box_hi())
                throw std::invalid_argument("marginal_atoms: atom " + std::to_string(i) +
                                            " of factor " + std::to_string(j) + " at coordinate " +
                                            format_g17(x) + " lies outside [" +
                                            format_g17(grid.box_lo()) + ", " +
                                            format_g17(grid.box_hi()) + "]");
            auto cell = static_cast<std::size_t>(
                std::min<double>(static_cast<double>(grid.count - 1),
                                 std::max(0.0, std::floor((x - grid.box_lo()) / grid.spacing))));
            flat = flat * grid.count + cell;
        }
        out[flat] += plan.weights[i] * inv_vol;
    }
    return make_field(grid, std::move(out));
}

// ---------------------------------------------------------------- plan makers

inline DensityField product_plan(const std::vector<DensityField>& marginals) {
    if (marginals.empty()) throw std::invalid_argument("product_plan: need at least one marginal");
    std::vector<AxisGrid> factors;
    for (const auto& m : marginals) {
        if (m.grid.n_factors() != 1)
            throw std::invalid_argument("product_plan: marginals must be single-factor fields");
        factors.push_back(m.grid.factors.front());
    }
    ProductGrid grid(std::move(factors));
    validate(grid);
    std::vector<double> out(grid.total_nodes());
    std::vector<std::size_t> counts;
    for (const auto& m : marginals) counts.push_back(m.values.size());
    std::vector<std::size_t> idx(marginals.size(), 0);
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        double v = 1.0;
        for (std::size_t k = 0; k < marginals.size(); ++k) v *= marginals[k].values[idx[k]];
        out[flat] = v;
        for (std::size_t k = marginals.size(); k-- > 0;) {
            if (++idx[k] < counts[k]) break;
            idx[k] = 0;
        }
    }
    return make_field(std::move(grid), std::move(out));
}

namespace detail {

// Piecewise-linear cumulative distribution of a single-factor 1-d field:
// exact integral of the piecewise-constant density up to each cell edge.
struct PiecewiseCdf {
    std::vector<double> edges;  // count + 1 cell edges
    std::vector<double> cum;    // cumulative mass at each edge, cum.front() == 0
    double total;

    explicit PiecewiseCdf(const DensityField& rho) {
        if (rho.grid.n_factors() != 1 || rho.grid.dim() != 1)
            throw std::invalid_argument("quantile machinery needs single-factor 1-d fields");
        const AxisGrid& g = rho.grid.factors.front();
        edges.resize(g.count + 1);
        cum.resize(g.count + 1);
        cum[0] = 0.0;
        for (std::size_t m = 0; m < g.count; ++m) {
            edges[m] = g.box_lo() + g.spacing * static_cast<double>(m);
            cum[m + 1] = cum[m] + rho.values[m] * g.spacing;
        }
        edges[g.count] = g.box_hi();
        total = cum[g.count];
        if (!(total > 0.0)) throw std::invalid_argument("quantile machinery: field has zero mass");
    }

    // Inverse of the cdf at mass level t in [0, total], linear within cells.
    double quantile(double t) const {
        t = std::min(std::max(t, 0.0), total);
        auto it = std::lower_bound(cum.begin(), cum.end(), t);
        std::size_t m = static_cast<std::size_t>(it - cum.begin());
        if (m > 0) --m;                      // cell [edges[m], edges[m+1]] holds level t
        m = std::min(m, cum.size() - 2);
        const double cell_mass = cum[m + 1] - cum[m];
        const double width = edges[m + 1] - edges[m];
        if (cell_mass <= 0.0) return edges[m] + 0.5 * width;
        return edges[m] + (t - cum[m]) / cell_mass * width;
    }
};

}  // namespace detail

// Monotone coupling sampled at the M mass midpoints (i + 1/2)/M of the two
// quantile functions; every atom carries weight 1/M.
inline AtomicPlan quantile_coupling(const DensityField& rho1, const DensityField& rho2,
                                    std::size_t M) {
    if (M < 1) throw std::invalid_argument("quantile_coupling: need at least one atom");
    detail::PiecewiseCdf c1(rho1), c2(rho2);
    std::vector<double> coords, weights;
    coords.reserve(2 * M);
    weights.assign(M, 1.0 / static_cast<double>(M));
    for (std::size_t i = 0; i < M; ++i) {
        const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(M);
        coords.push_back(c1.quantile(t * c1.total));
        coords.push_back(c2.quantile(t * c2.total));
    }
    return make_atomic_plan(1, 2, std::move(coords), std::move(weights));
}

// Exact monotone coupling of the node measures of N single-factor 1-d
// marginals: a cumulative sweep over the per-node masses. Atoms sit at grid
// nodes and each factor's atom histogram reproduces its node masses exactly,
// up to normalization of each marginal to unit mass.
inline AtomicPlan monotone_node_coupling(const std::vector<DensityField>& marginals) {
    const std::size_t N = marginals.size();
    if (N < 2) throw std::invalid_argument("monotone_node_coupling: need at least two marginals");
    std::vector<std::vector<double>> cum(N);   // normalized cumulative node masses
    std::vector<const AxisGrid*> grids(N);
    for (std::size_t k = 0; k < N; ++k) {
        const auto& m = marginals[k];
        if (m.grid.n_factors() != 1 || m.grid.dim() != 1)
            throw std::invalid_argument("monotone_node_coupling: marginals must be single-factor 1-d fields");
        grids[k] = &m.grid.factors.front();
        const double total = mass(m);
        if (!(total > 0.0)) throw std::invalid_argument("monotone_node_coupling: marginal has zero mass");
        auto& c = cum[k];
        c.resize(m.values.size());
        double acc = 0.0;
        for (std::size_t i = 0; i < m.values.size(); ++i) {
            acc += m.values[i] * grids[k]->spacing / total;
            c[i] = acc;
        }
        c.back() = 1.0;
    }
    std::vector<std::size_t> pos(N, 0);
    std::vector<double> coords, weights;
    double t = 0.0;
    while (t < 1.0) {
        double next = 1.0;
        for (std::size_t k = 0; k < N; ++k) next = std::min(next, cum[k][pos[k]]);
        if (next > t) {
            for (std::size_t k = 0; k < N; ++k) coords.push_back(grids[k]->node(pos[k]));
            weights.push_back(next - t);
        }
        for (std::size_t k = 0; k < N; ++k)
            while (pos[k] + 1 < cum[k].size() && cum[k][pos[k]] <= next) ++pos[k];
        t = next;
    }
    // Sweep weights telescope to 1 exactly except for roundoff; normalize.
    const double total = pairwise_sum(weights);
    for (double& w : weights) w /= total;
    return make_atomic_plan(1, static_cast<int>(N), std::move(coords), std::move(weights));
}

// Convex combination of grid plans on one shared grid.
inline DensityField mixture(const std::vector<const DensityField*>& parts,
                            const std::vector<double>& weights) {
    if (parts.empty() || parts.size() != weights.size())
        throw std::invalid_argument("mixture: need matching non-empty parts and weights");
    double wsum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("mixture: negative weight");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-12)
        throw std::invalid_argument("mixture: weights sum to " + format_g17(wsum) +
                                    ", expected 1 within 1e-12");
    const DensityField& first = *parts.front();
    std::vector<double> out(first.values.size(), 0.0);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        require_same_grid(first, *parts[k], "mixture");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[k] * parts[k]->values[i];
    }
    return make_field(first.grid, std::move(out));
}

}  // namespace plansmooth
