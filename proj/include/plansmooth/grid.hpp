#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace plansmooth {

// Uniform cell-centered grid for one factor of a product space. The factor
// is dim-dimensional and uses the same scalar axis (origin, spacing, count)
// along each of its dim coordinates, so it carries count^dim nodes. Nodes
// are cell centers; the covered box is [origin - spacing/2, last + spacing/2].
struct AxisGrid {
    double origin = 0.0;
    double spacing = 1.0;
    std::size_t count = 2;
    int dim = 1;

    double node(std::size_t i) const { return origin + spacing * static_cast<double>(i); }
    double box_lo() const { return origin - 0.5 * spacing; }
    double box_hi() const { return node(count - 1) + 0.5 * spacing; }
    std::size_t nodes() const {
        std::size_t n = 1;
        for (int k = 0; k < dim; ++k) n *= count;
        return n;
    }
    double cell_volume() const { return std::pow(spacing, dim); }

    bool operator==(const AxisGrid& o) const {
        return origin == o.origin && spacing == o.spacing && count == o.count && dim == o.dim;
    }
};

inline void validate(const AxisGrid& g) {
    if (!(g.spacing > 0.0)) throw std::invalid_argument("AxisGrid: spacing must be positive");
    if (g.count < 2) throw std::invalid_argument("AxisGrid: need at least 2 nodes per axis");
    if (g.dim < 1) throw std::invalid_argument("AxisGrid: dimension must be at least 1");
    if (!std::isfinite(g.origin)) throw std::invalid_argument("AxisGrid: origin must be finite");
}

// Cell-centered grid with `cells` cells covering [lo, hi] along each of the
// dim coordinates of the factor.
inline AxisGrid make_axis_grid(double lo, double hi, std::size_t cells, int dim = 1) {
    if (!(hi > lo)) throw std::invalid_argument("make_axis_grid: need hi > lo");
    if (cells < 2) throw std::invalid_argument("make_axis_grid: need at least 2 cells");
    AxisGrid g;
    g.spacing = (hi - lo) / static_cast<double>(cells);
    g.origin = lo + 0.5 * g.spacing;
    g.count = cells;
    g.dim = dim;
    validate(g);
    return g;
}

// Same spacing, `extra` additional cells on each side.
inline AxisGrid extend_axis(const AxisGrid& g, std::size_t extra) {
    AxisGrid e = g;
    e.origin = g.origin - g.spacing * static_cast<double>(extra);
    e.count = g.count + 2 * extra;
    return e;
}

// Product of N factors sharing one ambient dimension d. Scalar axes are
// numbered 0 .. N*d-1 with axis a belonging to factor a/d; flattened node
// indices are row-major with axis 0 slowest.
struct ProductGrid {
    std::vector<AxisGrid> factors;

    ProductGrid() = default;
    explicit ProductGrid(std::vector<AxisGrid> f) : factors(std::move(f)) {}
    explicit ProductGrid(const AxisGrid& f) : factors{f} {}

    int n_factors() const { return static_cast<int>(factors.size()); }
    int dim() const { return factors.empty() ? 0 : factors.front().dim; }
    int axis_count() const { return n_factors() * dim(); }

    const AxisGrid& factor_of_axis(int a) const { return factors[static_cast<std::size_t>(a) / dim()]; }
    std::size_t axis_nodes(int a) const { return factor_of_axis(a).count; }
    double axis_origin(int a) const { return factor_of_axis(a).origin; }
    double axis_spacing(int a) const { return factor_of_axis(a).spacing; }
    double axis_coord(int a, std::size_t i) const { return factor_of_axis(a).node(i); }

    std::size_t total_nodes() const {
        std::size_t n = 1;
        for (const auto& f : factors) n *= f.nodes();
        return n;
    }
    double cell_volume() const {
        double v = 1.0;
        for (const auto& f : factors) v *= f.cell_volume();
        return v;
    }

    // Stride of each scalar axis in the flattened array.
    std::vector<std::size_t> strides() const {
        const int na = axis_count();
        std::vector<std::size_t> s(static_cast<std::size_t>(na), 1);
        for (int a = na - 2; a >= 0; --a)
            s[a] = s[a + 1] * axis_nodes(a + 1);
        return s;
    }

    void unflatten(std::size_t flat, std::size_t* idx) const {
        for (int a = axis_count() - 1; a >= 0; --a) {
            const std::size_t n = axis_nodes(a);
            idx[a] = flat % n;
            flat /= n;
        }
    }

    bool operator==(const ProductGrid& o) const { return factors == o.factors; }
};

inline void validate(const ProductGrid& g) {
    if (g.factors.empty()) throw std::invalid_argument("ProductGrid: need at least one factor");
    for (const auto& f : g.factors) validate(f);
    for (const auto& f : g.factors)
        if (f.dim != g.factors.front().dim)
            throw std::invalid_argument("ProductGrid: factors must share one ambient dimension");
}

}  // namespace plansmooth
