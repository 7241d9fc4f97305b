#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"
#include "util.hpp"

namespace plansmooth {

// Nonnegative density sampled at the cell centers of a ProductGrid, with the
// midpoint-rule mass cached at construction. `probability` records whether
// the mass was within tolerance of 1 when the field was built.
struct DensityField {
    ProductGrid grid;
    std::vector<double> values;
    double mass = 0.0;
    bool probability = false;
};

// Recomputed midpoint-rule integral (pairwise summation).
inline double mass(const DensityField& f) {
    return pairwise_sum(f.values) * f.grid.cell_volume();
}

inline DensityField make_field(ProductGrid grid, std::vector<double> values,
                               double mass_tol = 1e-6) {
    validate(grid);
    if (values.size() != grid.total_nodes())
        throw std::invalid_argument("make_field: expected " + std::to_string(grid.total_nodes()) +
                                    " values, got " + std::to_string(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!(values[i] >= 0.0) || !std::isfinite(values[i]))
            throw std::invalid_argument("make_field: negative or non-finite value " +
                                        format_g17(values[i]) + " at node " + std::to_string(i));
    }
    DensityField f;
    f.grid = std::move(grid);
    f.values = std::move(values);
    f.mass = pairwise_sum(f.values) * f.grid.cell_volume();
    f.probability = std::abs(f.mass - 1.0) <= mass_tol;
    return f;
}

inline DensityField make_field(const AxisGrid& axis, std::vector<double> values,
                               double mass_tol = 1e-6) {
    return make_field(ProductGrid(axis), std::move(values), mass_tol);
}

inline void require_same_grid(const DensityField& a, const DensityField& b, const char* who) {
    if (!(a.grid == b.grid))
        throw std::invalid_argument(std::string(who) + ": fields live on different grids");
}

// L1 distance by midpoint rule.
inline double l1_distance(const DensityField& a, const DensityField& b) {
    require_same_grid(a, b, "l1_distance");
    return pairwise_sum_fn(a.values.size(),
                           [&](std::size_t i) { return std::abs(a.values[i] - b.values[i]); }) *
           a.grid.cell_volume();
}

inline double sup_distance(const DensityField& a, const DensityField& b) {
    require_same_grid(a, b, "sup_distance");
    double m = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i)
        m = std::max(m, std::abs(a.values[i] - b.values[i]));
    return m;
}

// Midpoint-rule integral of fn(coords) against the density. fn receives the
// node coordinates as a pointer to axis_count() doubles.
template <typename Fn>
double integrate(const DensityField& f, const Fn& fn) {
    const int na = f.grid.axis_count();
    std::vector<std::size_t> strides = f.grid.strides();
    std::vector<double> coords(static_cast<std::size_t>(na));
    std::vector<std::size_t> idx(static_cast<std::size_t>(na));
    const double vol = f.grid.cell_volume();
    return pairwise_sum_fn(f.values.size(), [&](std::size_t flat) {
               std::size_t rem = flat;
               for (int a = 0; a < na; ++a) {
                   idx[a] = rem / strides[a];
                   rem %= strides[a];
                   coords[a] = f.grid.axis_coord(a, idx[a]);
               }
               return f.values[flat] * fn(coords.data());
           }) *
           vol;
}

// Mass of the sub-box given by per-axis coordinate bounds [lo, hi].
inline double box_mass(const DensityField& f, double lo, double hi) {
    return integrate(f, [&](const double* x) {
        for (int a = 0; a < f.grid.axis_count(); ++a)
            if (x[a] < lo || x[a] > hi) return 0.0;
        return 1.0;
    });
}

}  // namespace plansmooth
