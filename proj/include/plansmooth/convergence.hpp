#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "builders.hpp"
#include "field.hpp"
#include "measures.hpp"
#include "smoothing.hpp"
#include "sobolev.hpp"
#include "util.hpp"

namespace plansmooth {

// ------------------------------------------------------------ inputs

struct EpsilonSchedule {
    std::vector<double> values;
};

inline EpsilonSchedule default_epsilon_schedule() {
    return EpsilonSchedule{{0.4, 0.2, 0.1, 0.05, 0.025}};
}

inline void validate(const EpsilonSchedule& s) {
    if (s.values.empty()) throw std::invalid_argument("EpsilonSchedule: empty schedule");
    for (std::size_t i = 0; i < s.values.size(); ++i) {
        if (!(s.values[i] > 0.0))
            throw std::invalid_argument("EpsilonSchedule: entries must be positive");
        if (i > 0 && !(s.values[i] < s.values[i - 1]))
            throw std::invalid_argument("EpsilonSchedule: entries must be strictly decreasing");
    }
}

// A bounded observable with its recorded bounds: |f| <= sup_norm everywhere
// and |f(x) - f(y)| <= lipschitz |x - y|_2 on the grid box.
struct TestFunction {
    std::string name;
    double sup_norm = 1.0;
    double lipschitz = 1.0;
    std::function<double(const double*)> fn;
};

struct TestFunctionSet {
    std::vector<TestFunction> functions;
};

// Default observables on N one-dimensional factors, all with sup-norm 1:
// two separable cosines, a product of logistic bumps supported near the
// origin, and a clipped quadratic cost scaled into [0, 1].
inline TestFunctionSet default_test_functions(int N) {
    if (N < 2) throw std::invalid_argument("default_test_functions: need at least two factors");
    const double nd = static_cast<double>(N);
    TestFunctionSet set;
    set.functions.push_back(
        {"cos_sum", 1.0, std::sqrt(nd), [N](const double* x) {
             double s = 0.0;
             for (int k = 0; k < N; ++k) s += x[k];
             return std::cos(s);
         }});
    // Alternating signs probe the anti-diagonal direction, where smoothing
    // a comonotone plan moves mass fastest; the 0.4 frequency keeps the
    // residual gap at the shallow end of the default schedule inside the
    // 0.01 budget the weak verdict applies.
    set.functions.push_back(
        {"cos_skew", 1.0, 0.4 * std::sqrt(nd), [N](const double* x) {
             double s = 0.0;
             for (int k = 0; k < N; ++k) s += (k % 2 == 0 ? 0.4 : -0.4) * x[k];
             return std::cos(s);
         }});
    set.functions.push_back(
        {"bump", 1.0, std::sqrt(nd), [N](const double* x) {
             double v = 1.0;
             for (int k = 0; k < N; ++k)
                 v *= 1.0 / (1.0 + std::exp(-2.0 * (x[k] + 2.0))) /
                      (1.0 + std::exp(-2.0 * (2.0 - x[k])));
             return v;
         }});
    set.functions.push_back(
        {"clipped_cost", 1.0, 2.0 * (nd - 1.0) * std::sqrt(10.0 * nd) / 10.0,
         [N](const double* x) {
             double s = 0.0;
             for (int k = 0; k < N; ++k)
                 for (int l = k + 1; l < N; ++l) s += sq(x[k] - x[l]);
             return std::min(s, 10.0) / 10.0;
         }});
    return set;
}

// Unnormalized clipped quadratic cost, bounded by the clip value.
inline TestFunction clipped_cost_function(int N, double clip = 10.0) {
    if (!(clip > 0.0)) throw std::invalid_argument("clipped_cost_function: clip must be positive");
    return {"clipped_quadratic", clip, 2.0 * (static_cast<double>(N) - 1.0) * std::sqrt(clip),
            [N, clip](const double* x) {
                double s = 0.0;
                for (int k = 0; k < N; ++k)
                    for (int l = k + 1; l < N; ++l) s += sq(x[k] - x[l]);
                return std::min(s, clip);
            }};
}

// A plan in either representation together with its marginal densities.
struct PlanInput {
    std::variant<AtomicPlan, DensityField> plan;
    std::vector<DensityField> marginals;
};

inline PlanInput grid_input(DensityField plan, std::vector<DensityField> marginals) {
    return PlanInput{std::move(plan), std::move(marginals)};
}

inline PlanInput atomic_input(AtomicPlan plan, std::vector<DensityField> marginals) {
    return PlanInput{std::move(plan), std::move(marginals)};
}

inline SmoothedPlan smooth(const PlanInput& in, const SmoothingConfig& cfg) {
    if (std::holds_alternative<AtomicPlan>(in.plan))
        return theta_eps(std::get<AtomicPlan>(in.plan), in.marginals, cfg);
    return theta_eps(std::get<DensityField>(in.plan), in.marginals, cfg);
}

// Integral of fn against the plan itself: an exact finite sum for atoms,
// midpoint quadrature for grid tables.
template <typename Fn>
double plan_integral(const PlanInput& in, const Fn& fn) {
    if (std::holds_alternative<AtomicPlan>(in.plan))
        return integrate(std::get<AtomicPlan>(in.plan), fn);
    return integrate(std::get<DensityField>(in.plan), fn);
}

// ------------------------------------------------------------ tables

struct ConvergenceRow {
    double parameter = 0.0;
    std::vector<double> values;
};

struct ConvergenceTable {
    std::string name;
    std::string parameter_name;  // "epsilon" or "n"
    std::vector<std::string> columns;
    std::vector<ConvergenceRow> rows;
    bool verdict = false;
    std::string note;  // reason for a failed verdict, empty otherwise

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out;
        out.reserve(rows.size());
        for (const ConvergenceRow& r : rows) out.push_back(r.values.at(c));
        return out;
    }
};

namespace detail {

struct ColumnRule {
    double final_threshold = 0.0;
    double zero_floor = 1e-9;  // a column entirely below this counts as converged
    bool require_monotone = false;
    double slack = 1e-12;
};

inline bool column_passes(const std::vector<double>& v, const ColumnRule& r, std::string& why) {
    bool all_zero = true;
    for (double x : v) all_zero &= x <= r.zero_floor;
    if (all_zero) return true;
    if (!(v.back() <= r.final_threshold)) {
        why = "final value " + format_g17(v.back()) + " above threshold " +
              format_g17(r.final_threshold);
        return false;
    }
    if (!(v.back() <= v.front() + r.slack)) {
        why = "last value above the first";
        return false;
    }
    if (r.require_monotone)
        for (std::size_t i = 0; i + 1 < v.size(); ++i)
            if (!(v[i + 1] <= v[i] + r.slack)) {
                why = "not monotone at step " + std::to_string(i);
                return false;
            }
    return true;
}

inline void apply_column_rules(ConvergenceTable& t, const std::vector<ColumnRule>& rules) {
    t.verdict = true;
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
        std::string why;
        if (!column_passes(t.column(c), rules[c], why)) {
            t.verdict = false;
            if (!t.note.empty()) t.note += "; ";
            t.note += "column " + t.columns[c] + ": " + why;
        }
    }
}

}  // namespace detail

// ------------------------------------------------- weak and cost columns

// Gap columns |int psi dTheta - int psi dmu| over the schedule. The final
// gap must fall below max(tol, 2 x recorded marginal mismatch): quadrature
// against the smoothed table can never beat the honesty of the input plan's
// own marginals.
inline ConvergenceTable weak_convergence(const PlanInput& mu, const SmoothingConfig& cfg,
                                         const EpsilonSchedule& schedule,
                                         const TestFunctionSet& psis, double tol = 0.01) {
    validate(schedule);
    if (psis.functions.empty())
        throw std::invalid_argument("weak_convergence: empty test function set");
    ConvergenceTable t;
    t.name = "weak_convergence";
    t.parameter_name = "epsilon";
    std::vector<double> mu_values;
    for (const TestFunction& f : psis.functions) {
        t.columns.push_back(f.name);
        mu_values.push_back(plan_integral(mu, f.fn));
    }
    double mismatch = 0.0;
    for (double eps : schedule.values) {
        SmoothingConfig c = cfg;
        c.epsilon = eps;
        const SmoothedPlan sp = smooth(mu, c);
        mismatch = sp.input_mismatch;
        ConvergenceRow row{eps, {}};
        for (std::size_t k = 0; k < psis.functions.size(); ++k)
            row.values.push_back(
                std::abs(integrate(sp.theta, psis.functions[k].fn) - mu_values[k]));
        t.rows.push_back(std::move(row));
    }
    const detail::ColumnRule rule{std::max(tol, 2.0 * mismatch), 1e-9, true, 1e-12};
    detail::apply_column_rules(t, std::vector<detail::ColumnRule>(t.columns.size(), rule));
    return t;
}

inline ConvergenceTable cost_convergence(const PlanInput& mu, const SmoothingConfig& cfg,
                                         const EpsilonSchedule& schedule, const TestFunction& cost,
                                         double tol = 0.02) {
    ConvergenceTable t =
        weak_convergence(mu, cfg, schedule, TestFunctionSet{{cost}}, tol);
    t.name = "cost_convergence";
    return t;
}

// ------------------------------------------------------- d1p convergence

// Distance column d1p(Theta^eps[mu], mu) over the schedule for a grid plan
// whose density passes the finite-energy screen.
inline ConvergenceTable d1p_convergence(const DensityField& mu,
                                        const std::vector<DensityField>& marginals,
                                        const SmoothingConfig& cfg,
                                        const EpsilonSchedule& schedule) {
    validate(schedule);
    const SobolevConfig scfg{cfg.p, cfg.density_floor};
    const FiniteIntegralReport screen = finite_integral_check(mu, scfg, 3);
    if (screen.verdict != "convergent")
        throw std::invalid_argument(
            "d1p_convergence: the plan density fails the finite-energy screen (" +
            screen.verdict + ")");
    ConvergenceTable t;
    t.name = "d1p_convergence";
    t.parameter_name = "epsilon";
    t.columns = {"d1p"};
    for (double eps : schedule.values) {
        SmoothingConfig c = cfg;
        c.epsilon = eps;
        const SmoothedPlan sp = theta_eps(mu, marginals, c);
        t.rows.push_back({eps, {d1p_distance(sp.theta, mu, scfg)}});
    }
    const std::vector<double> col = t.column(0);
    const detail::ColumnRule rule{0.05 * col.front(), 1e-6, true, 1e-12};
    detail::apply_column_rules(t, {rule});
    return t;
}

// ---------------------------------------------------------- mu continuity

struct PlanSequence {
    std::vector<std::size_t> ns;
    std::vector<DensityField> plans;
    std::vector<std::vector<DensityField>> marginals;
};

// mu^n = (1 - 1/n) mu + (1/n) product of the marginals: converges to mu
// with the marginals pinned exactly.
inline PlanSequence mixture_sequence(const DensityField& mu,
                                     const std::vector<DensityField>& marginals,
                                     const std::vector<std::size_t>& ns = {2, 4, 8, 16, 32}) {
    if (ns.empty()) throw std::invalid_argument("mixture_sequence: empty index list");
    const DensityField prod = product_plan(marginals);
    PlanSequence seq;
    seq.ns = ns;
    for (std::size_t n : ns) {
        if (n < 1) throw std::invalid_argument("mixture_sequence: indices must be positive");
        const double w = 1.0 / static_cast<double>(n);
        seq.plans.push_back(mixture({&mu, &prod}, {1.0 - w, w}));
        seq.marginals.push_back(marginals);
    }
    return seq;
}

// mu^n = mu mollified by the kernel of width 1/n^2 on its own grid,
// renormalized; the marginals move with the plan (they are its exact
// projections), exercising the full two-part continuity hypothesis.
inline PlanSequence perturbed_sequence(const DensityField& mu,
                                       const std::vector<std::size_t>& ns = {2, 4, 8, 16, 32}) {
    if (ns.empty()) throw std::invalid_argument("perturbed_sequence: empty index list");
    validate(mu.grid);
    PlanSequence seq;
    seq.ns = ns;
    for (std::size_t n : ns) {
        const double delta = 1.0 / static_cast<double>(n * n);
        std::vector<std::size_t> counts;
        for (const AxisGrid& ax : mu.grid.factors) {
            if (ax.dim != 1)
                throw std::invalid_argument("perturbed_sequence: factors must be scalar");
            counts.push_back(ax.count);
        }
        std::vector<double> vals = mu.values;
        for (int k = 0; k < mu.grid.n_factors(); ++k) {
            const AxisGrid& ax = mu.grid.factors[static_cast<std::size_t>(k)];
            const std::size_t m = std::min<std::size_t>(
                ax.count, static_cast<std::size_t>(std::ceil(8.0 * std::sqrt(delta) / ax.spacing)));
            detail::BandedMatrix C;
            C.init(ax.count, ax.count);
            for (std::size_t y = 0; y < ax.count; ++y) {
                C.lo[y] = y >= m ? y - m : 0;
                C.hi[y] = std::min(ax.count, y + m + 1);
                for (std::size_t x = C.lo[y]; x < C.hi[y]; ++x)
                    C.row(y)[x] = eta1(ax.node(y) - ax.node(x), delta) * ax.spacing;
            }
            vals = detail::apply_axis(vals, counts, k, C);
        }
        const double scale = 1.0 / (pairwise_sum(vals) * mu.grid.cell_volume());
        for (double& v : vals) v *= scale;
        DensityField f = make_field(mu.grid, std::move(vals));
        std::vector<DensityField> marg;
        for (int j = 0; j < mu.grid.n_factors(); ++j) marg.push_back(marginal(f, j));
        seq.plans.push_back(std::move(f));
        seq.marginals.push_back(std::move(marg));
    }
    return seq;
}

// Continuity of the smoothing in the plan at fixed epsilon: distances from
// Theta[mu^n] to Theta[mu] in d1p, in L^p of the roots, and node-wise sup,
// plus the marginal drift column that certifies the hypothesis that the
// marginals of mu^n converge to those of mu.
inline ConvergenceTable mu_continuity(const PlanSequence& seq, const DensityField& mu,
                                      const std::vector<DensityField>& mu_marginals,
                                      const SmoothingConfig& cfg) {
    if (seq.ns.empty() || seq.plans.size() != seq.ns.size() ||
        seq.marginals.size() != seq.ns.size())
        throw std::invalid_argument("mu_continuity: malformed plan sequence");
    const SobolevConfig scfg{cfg.p, cfg.density_floor};
    const SmoothedPlan limit = theta_eps(mu, mu_marginals, cfg);

    ConvergenceTable t;
    t.name = "mu_continuity";
    t.parameter_name = "n";
    t.columns = {"d1p", "root_lp", "sup", "marginal_drift"};
    const double vol = limit.theta.grid.cell_volume();
    for (std::size_t i = 0; i < seq.ns.size(); ++i) {
        const SmoothedPlan spn = theta_eps(seq.plans[i], seq.marginals[i], cfg);
        const double d = d1p_distance(spn.theta, limit.theta, scfg);
        const DensityField ra = p_root(spn.theta, scfg);
        const DensityField rb = p_root(limit.theta, scfg);
        const double lp = std::pow(
            pairwise_sum_fn(ra.values.size(),
                            [&](std::size_t q) {
                                return std::pow(std::abs(ra.values[q] - rb.values[q]), cfg.p);
                            }) *
                vol,
            1.0 / cfg.p);
        const double sup = sup_distance(spn.theta, limit.theta);
        double drift = 0.0;
        for (std::size_t j = 0; j < mu_marginals.size(); ++j)
            drift = std::max(drift, d1p_distance(seq.marginals[i][j], mu_marginals[j], scfg));
        t.rows.push_back({static_cast<double>(seq.ns[i]), {d, lp, sup, drift}});
    }

    // Hypothesis check: the marginal drift must shrink along the sequence,
    // otherwise the continuity statement does not apply to this input.
    const std::vector<double> drift = t.column(3);
    bool drift_ok = drift.back() <= std::max(0.5 * drift.front(), 1e-9);
    for (std::size_t i = 0; i + 1 < drift.size(); ++i)
        drift_ok &= drift[i + 1] <= drift[i] * 1.05 + 1e-12;
    if (!drift_ok)
        throw std::invalid_argument(
            "mu_continuity: the sequence's marginals do not converge to the limit marginals "
            "(drift " +
            format_g17(drift.front()) + " -> " + format_g17(drift.back()) + ")");

    std::vector<detail::ColumnRule> rules;
    for (std::size_t c = 0; c < 3; ++c) {
        const std::vector<double> col = t.column(c);
        rules.push_back({0.10 * col.front(), 1e-9, true, 1e-12});
    }
    rules.push_back({std::max(0.5 * drift.front(), 1e-9), 1e-9, false, 1e-12});
    detail::apply_column_rules(t, rules);

    // The root-wise L^p gap is one term of the d1p metric, so it can never
    // exceed it; a violation means the metric glue is broken.
    for (const ConvergenceRow& r : t.rows)
        if (r.values[1] > r.values[0] + 1e-12) {
            t.verdict = false;
            t.note += std::string(t.note.empty() ? "" : "; ") +
                      "root_lp exceeds d1p at n = " + format_g17(r.parameter);
        }
    return t;
}

// ------------------------------------------------- marginal energy report

// Energies of the mollified marginals over the schedule: each column rises
// toward the unmollified energy as eps shrinks, stays below it, and must
// land within 1% at the schedule's end.
inline ConvergenceTable energy_convergence_report(const std::vector<DensityField>& marginals,
                                                  const SmoothingConfig& cfg,
                                                  const EpsilonSchedule& schedule) {
    validate(schedule);
    if (marginals.empty())
        throw std::invalid_argument("energy_convergence_report: no marginals");
    const SobolevConfig scfg{cfg.p, cfg.density_floor};
    ConvergenceTable t;
    t.name = "energy_convergence_report";
    t.parameter_name = "epsilon";
    std::vector<double> ref;
    for (std::size_t j = 0; j < marginals.size(); ++j) {
        t.columns.push_back("marginal_" + std::to_string(j));
        ref.push_back(energy(marginals[j], scfg));
    }
    for (double eps : schedule.values) {
        ConvergenceRow row{eps, {}};
        for (const DensityField& rho : marginals) {
            const AxisGrid& ax = rho.grid.factors.front();
            const std::size_t m =
                static_cast<std::size_t>(std::ceil(8.0 * std::sqrt(eps) / ax.spacing));
            row.values.push_back(
                energy(convolve_to(rho, KernelSpec{eps, 1}, extend_axis(ax, m)), scfg));
        }
        t.rows.push_back(std::move(row));
    }
    t.verdict = true;
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
        const std::vector<double> col = t.column(c);
        std::string why;
        const double slack = 1e-8 * std::max(1.0, ref[c]);
        for (std::size_t i = 0; i < col.size(); ++i) {
            if (col[i] > ref[c] + slack) why = "mollification raised the energy";
            if (i + 1 < col.size() && col[i + 1] < col[i] - slack)
                why = "column not monotone at step " + std::to_string(i);
        }
        if (why.empty() && std::abs(col.back() - ref[c]) > 0.01 * ref[c])
            why = "final energy " + format_g17(col.back()) + " not within 1% of " +
                  format_g17(ref[c]);
        if (!why.empty()) {
            t.verdict = false;
            if (!t.note.empty()) t.note += "; ";
            t.note += "column " + t.columns[c] + ": " + why;
        }
    }
    return t;
}

// ------------------------------------------------------------- tightness

// Mass of the smoothed plan outside the box [-R, R]^N, with R chosen so
// each marginal holds all but delta/N of its mass inside [-R, R]. Because
// the smoothing preserves marginals, the union bound caps the outside mass
// at delta uniformly in eps.
inline ConvergenceTable tightness_table(const PlanInput& mu, const SmoothingConfig& cfg,
                                        const EpsilonSchedule& schedule, double delta = 1e-4) {
    validate(schedule);
    if (!(delta > 0.0)) throw std::invalid_argument("tightness_table: delta must be positive");
    const double per_marginal = delta / static_cast<double>(mu.marginals.size());
    double R = 0.0;
    for (const DensityField& rho : mu.marginals) {
        const AxisGrid& ax = rho.grid.factors.front();
        double rj = -1.0;
        for (std::size_t i = 0; i * 2 <= ax.count; ++i) {
            const double cand =
                std::max(std::abs(ax.box_lo() + static_cast<double>(i) * ax.spacing),
                         std::abs(ax.box_hi() - static_cast<double>(i) * ax.spacing));
            if (box_mass(rho, -cand, cand) >= 1.0 - per_marginal) { rj = cand; }
            else break;
        }
        if (rj < 0.0)
            throw std::invalid_argument(
                "tightness_table: a marginal does not hold 1 - delta/N of its mass on its box");
        R = std::max(R, rj);
    }

    ConvergenceTable t;
    t.name = "tightness";
    t.parameter_name = "epsilon";
    t.columns = {"outside_mass"};
    t.verdict = true;
    for (double eps : schedule.values) {
        SmoothingConfig c = cfg;
        c.epsilon = eps;
        const SmoothedPlan sp = smooth(mu, c);
        const double outside = mass(sp.theta) - box_mass(sp.theta, -R, R);
        t.rows.push_back({eps, {outside}});
        if (!(outside <= delta)) {
            t.verdict = false;
            t.note = "outside mass " + format_g17(outside) + " above " + format_g17(delta) +
                     " at eps = " + format_g17(eps);
        }
    }
    t.note = t.verdict ? "R = " + format_g17(R) : t.note;
    return t;
}

}  // namespace plansmooth
