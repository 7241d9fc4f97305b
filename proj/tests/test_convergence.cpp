#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include <plansmooth/builders.hpp>
#include <plansmooth/convergence.hpp>

using namespace plansmooth;
using Catch::Approx;

namespace {

// Weak gap of the smoothing against cos(x0 + x1) for the monotone coupling
// of N(0,1) and N(1,1). Pushing a point (x, x+1) through the kernel and the
// per-factor posteriors keeps x0 + x1 Gaussian with mean 1 and variance
// (4 + 4 eps + 2 eps^2) / (1 + eps)^2, so the gap has a closed form.
double quantile_cos_gap(double eps) {
    const double var = (4.0 + 4.0 * eps + 2.0 * eps * eps) / sq(1.0 + eps);
    return std::cos(1.0) * (std::exp(-0.5 * var) - std::exp(-2.0));
}

// E (X0' - X1')^2 for the identity coupling of two N(0,1) marginals: the
// posterior draws decorrelate the pair by 2 eps (2 + eps) / (1 + eps)^2.
double identity_cost_gap(double eps) {
    return 2.0 * eps * (2.0 + eps) / sq(1.0 + eps);
}

PlanInput quantile_pair_input(std::size_t n, std::size_t atoms) {
    const AxisGrid ax0 = make_axis_grid(-4.0, 4.0, n);
    const AxisGrid ax1 = make_axis_grid(-3.0, 5.0, n);
    AtomicPlan plan = quantile_coupling(gaussian_density(ax0, 0.0, 1.0),
                                        gaussian_density(ax1, 1.0, 1.0), atoms);
    std::vector<DensityField> marg{marginal_atoms(plan, 0, ax0), marginal_atoms(plan, 1, ax1)};
    return atomic_input(std::move(plan), std::move(marg));
}

}  // namespace

TEST_CASE("epsilon schedules validate their shape", "[convergence]") {
    CHECK(default_epsilon_schedule().values == std::vector<double>{0.4, 0.2, 0.1, 0.05, 0.025});
    CHECK_NOTHROW(validate(EpsilonSchedule{{0.4, 0.1}}));
    CHECK_THROWS_AS(validate(EpsilonSchedule{{}}), std::invalid_argument);
    CHECK_THROWS_AS(validate(EpsilonSchedule{{0.1, 0.1}}), std::invalid_argument);
    CHECK_THROWS_AS(validate(EpsilonSchedule{{0.1, -0.05}}), std::invalid_argument);
    CHECK_THROWS_AS(validate(EpsilonSchedule{{0.0, 0.1}}), std::invalid_argument);
}

TEST_CASE("default test functions match hand-computed values", "[convergence]") {
    const TestFunctionSet set = default_test_functions(2);
    REQUIRE(set.functions.size() == 4);
    CHECK(set.functions[0].name == "cos_sum");
    CHECK(set.functions[1].name == "cos_skew");
    CHECK(set.functions[2].name == "bump");
    CHECK(set.functions[3].name == "clipped_cost");

    const double x[2] = {0.3, -0.1};
    CHECK(set.functions[0].fn(x) == Approx(0.9800665778412416).margin(1e-15));
    // 0.4 * (0.3 - (-0.1)) = 0.16 inside the skew cosine.
    CHECK(set.functions[1].fn(x) == Approx(0.9872272833756269).margin(1e-15));
    const double origin[2] = {0.0, 0.0};
    CHECK(set.functions[2].fn(origin) == Approx(0.9299730128737141).margin(1e-12));
    const double far[2] = {4.0, -4.0};
    CHECK(set.functions[3].fn(far) == Approx(1.0).margin(1e-15));
    const double near[2] = {0.5, 0.2};
    CHECK(set.functions[3].fn(near) == Approx(0.009).margin(1e-15));

    for (const TestFunction& f : set.functions) {
        CHECK(f.sup_norm == 1.0);
        CHECK(f.lipschitz > 0.0);
    }
    CHECK_THROWS_AS(default_test_functions(1), std::invalid_argument);

    const TestFunction cost = clipped_cost_function(3);
    const double y[3] = {1.0, 2.0, 3.0};
    CHECK(cost.fn(y) == Approx(6.0).margin(1e-15));
    CHECK(cost.sup_norm == 10.0);
    CHECK_THROWS_AS(clipped_cost_function(2, 0.0), std::invalid_argument);
}

TEST_CASE("product plans register as weak fixed points", "[convergence]") {
    const AxisGrid ax = make_axis_grid(-8.0, 8.0, 128);
    const DensityField prod =
        product_plan({gaussian_density(ax, 0.0, 1.0), gaussian_density(ax, 0.5, 0.9)});
    std::vector<DensityField> marg{marginal(prod, 0), marginal(prod, 1)};
    const PlanInput in = grid_input(prod, marg);

    TestFunctionSet psis = default_test_functions(2);
    psis.functions.push_back({"unit", 1.0, 0.0, [](const double*) { return 1.0; }});

    const ConvergenceTable t =
        weak_convergence(in, SmoothingConfig{}, EpsilonSchedule{{0.4, 0.1, 0.025}}, psis);
    CHECK(t.verdict);
    CHECK(t.note.empty());
    CHECK(t.parameter_name == "epsilon");
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[0].parameter == 0.4);
    CHECK(t.rows[2].parameter == 0.025);
    REQUIRE(t.columns.size() == 5);
    for (const ConvergenceRow& row : t.rows)
        for (double gap : row.values) CHECK(gap < 1e-8);

    CHECK_THROWS_AS(weak_convergence(in, SmoothingConfig{}, EpsilonSchedule{{0.1}},
                                     TestFunctionSet{}),
                    std::invalid_argument);
}

TEST_CASE("weak gaps for the quantile Gaussian pair track the closed form", "[convergence]") {
    const PlanInput in = quantile_pair_input(256, 2000);
    const TestFunctionSet psi{
        {{"cos_pair", 1.0, std::sqrt(2.0),
          [](const double* x) { return std::cos(x[0] + x[1]); }}}};
    const ConvergenceTable t =
        weak_convergence(in, SmoothingConfig{}, default_epsilon_schedule(), psi);

    CHECK(t.verdict);
    REQUIRE(t.rows.size() == 5);
    for (const ConvergenceRow& row : t.rows) {
        const double oracle = quantile_cos_gap(row.parameter);
        CHECK(row.values[0] == Approx(oracle).epsilon(0.15).margin(5e-4));
    }
    for (std::size_t i = 0; i + 1 < t.rows.size(); ++i)
        CHECK(t.rows[i + 1].values[0] < t.rows[i].values[0]);
    CHECK(t.rows.back().values[0] < 0.01);
}

TEST_CASE("identity coupling cost gap tracks the closed form", "[convergence]") {
    const AxisGrid ax = make_axis_grid(-4.0, 4.0, 256);
    const DensityField rho = gaussian_density(ax, 0.0, 1.0);
    AtomicPlan plan = quantile_coupling(rho, rho, 2000);
    std::vector<DensityField> marg{marginal_atoms(plan, 0, ax), marginal_atoms(plan, 1, ax)};
    const PlanInput in = atomic_input(std::move(plan), std::move(marg));

    const TestFunction cost = clipped_cost_function(2);
    // Every atom sits on the diagonal, so the plan's own cost vanishes exactly.
    CHECK(plan_integral(in, cost.fn) == 0.0);

    const EpsilonSchedule sched{{0.1, 0.05, 0.025}};
    const ConvergenceTable t = cost_convergence(in, SmoothingConfig{}, sched, cost, 0.12);
    CHECK(t.name == "cost_convergence");
    CHECK(t.verdict);
    REQUIRE(t.rows.size() == 3);
    for (const ConvergenceRow& row : t.rows)
        CHECK(row.values[0] == Approx(identity_cost_gap(row.parameter)).epsilon(0.10).margin(1e-3));

    // At the default 0.02 tolerance this truncated schedule has not converged
    // yet, and the note names the offending final gap.
    const ConvergenceTable strict = cost_convergence(in, SmoothingConfig{}, sched, cost);
    CHECK_FALSE(strict.verdict);
    CHECK(strict.note.find("final value") != std::string::npos);
}

TEST_CASE("d1p column shrinks linearly along the deep schedule", "[convergence]") {
    const GridPlan gp = correlated_gaussian_plan(256, 0.5);
    const EpsilonSchedule sched{{0.4, 0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625}};
    const ConvergenceTable t = d1p_convergence(gp.joint, gp.marginals, SmoothingConfig{}, sched);

    CHECK(t.verdict);
    CHECK(t.columns == std::vector<std::string>{"d1p"});
    const std::vector<double> col = t.column(0);
    REQUIRE(col.size() == 7);
    for (std::size_t i = 0; i + 1 < col.size(); ++i) CHECK(col[i + 1] < col[i]);
    CHECK(col.back() < 0.05 * col.front());
    // The distance is first order in the kernel width: halving eps should
    // roughly halve the column while it is far above quadrature noise.
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(col[i + 1] / col[i] > 0.35);
        CHECK(col[i + 1] / col[i] < 0.75);
    }
}

TEST_CASE("d1p verdicts flag truncated schedules and irregular inputs", "[convergence]") {
    const GridPlan gp = correlated_gaussian_plan(128, 0.5);
    const ConvergenceTable t = d1p_convergence(gp.joint, gp.marginals, SmoothingConfig{},
                                               EpsilonSchedule{{0.4, 0.2, 0.1}});
    CHECK_FALSE(t.verdict);
    CHECK(t.note.find("final value") != std::string::npos);

    // A product plan is a fixed point, so its column sits at quadrature noise
    // and passes through the zero floor.
    const AxisGrid ax = make_axis_grid(-8.0, 8.0, 128);
    const DensityField prod =
        product_plan({gaussian_density(ax, 0.0, 1.0), gaussian_density(ax, 0.5, 0.9)});
    const ConvergenceTable fixed =
        d1p_convergence(prod, {marginal(prod, 0), marginal(prod, 1)}, SmoothingConfig{},
                        EpsilonSchedule{{0.4, 0.1}});
    CHECK(fixed.verdict);
    for (double v : fixed.column(0)) CHECK(v < 1e-6);

    // sin^(1/2) vanishes fast enough at the box ends that the root-energy
    // integrand grows under refinement, so the screen rejects the plan.
    const AxisGrid sax = make_axis_grid(0.0, std::numbers::pi, 128);
    const DensityField s = sine_power_density(sax, 0.5, true);
    const DensityField irregular = product_plan({s, s});
    CHECK_THROWS_AS(d1p_convergence(irregular, {marginal(irregular, 0), marginal(irregular, 1)},
                                    SmoothingConfig{}, EpsilonSchedule{{0.4, 0.1}}),
                    std::invalid_argument);
}

TEST_CASE("mixture sequences contract linearly toward the limit plan", "[convergence]") {
    const GridPlan gp = correlated_gaussian_plan(128, 0.3, 6.0);
    const SmoothingConfig cfg{0.1, 2.0, 1e-12, 1e-6};
    const std::vector<std::size_t> ns{2, 4, 8, 16, 32, 64};
    const PlanSequence seq = mixture_sequence(gp.joint, gp.marginals, ns);
    REQUIRE(seq.plans.size() == 6);

    // The smoothing is affine in the plan once the marginals are pinned, so
    // the smoothed mixture equals the mixture of the smoothed endpoints.
    const DensityField prod = product_plan(gp.marginals);
    const DensityField th_mu = theta_eps(gp.joint, gp.marginals, cfg).theta;
    const DensityField th_pr = theta_eps(prod, gp.marginals, cfg).theta;
    const DensityField th_4 = theta_eps(seq.plans[1], seq.marginals[1], cfg).theta;
    double worst = 0.0;
    for (std::size_t q = 0; q < th_4.values.size(); ++q)
        worst = std::max(worst, std::abs(th_4.values[q] - 0.75 * th_mu.values[q] -
                                         0.25 * th_pr.values[q]));
    CHECK(worst < 1e-10);

    const ConvergenceTable t = mu_continuity(seq, gp.joint, gp.marginals, cfg);
    CHECK(t.verdict);
    CHECK(t.parameter_name == "n");
    CHECK(t.columns ==
          std::vector<std::string>{"d1p", "root_lp", "sup", "marginal_drift"});
    REQUIRE(t.rows.size() == 6);

    // The sup column is exactly linear in the mixture weight 1/n.
    const std::vector<double> sup = t.column(2);
    CHECK(sup.front() / sup.back() == Approx(32.0).epsilon(1e-6));
    for (const ConvergenceRow& row : t.rows) {
        CHECK(row.values[1] <= row.values[0] + 1e-12);  // root_lp never beats d1p
        CHECK(row.values[3] == 0.0);                    // marginals are pinned
    }

    CHECK_THROWS_AS(mixture_sequence(gp.joint, gp.marginals, {}), std::invalid_argument);
    CHECK_THROWS_AS(mixture_sequence(gp.joint, gp.marginals, {2, 0}), std::invalid_argument);
}

TEST_CASE("constant sequences read as already converged", "[convergence]") {
    const AxisGrid ax = make_axis_grid(-6.0, 6.0, 96);
    const std::vector<DensityField> marg{gaussian_density(ax, 0.0, 1.0),
                                         gaussian_density(ax, 0.3, 1.1)};
    const DensityField prod = product_plan(marg);
    const PlanSequence seq = mixture_sequence(prod, marg, {2, 4, 8});
    const ConvergenceTable t = mu_continuity(seq, prod, marg, SmoothingConfig{});
    CHECK(t.verdict);
    for (std::size_t c = 0; c < 3; ++c)
        for (double v : t.column(c)) CHECK(v < 1e-9);
}

TEST_CASE("perturbed sequences move their marginals with the plan", "[convergence]") {
    const GridPlan gp = correlated_gaussian_plan(256, 0.5);
    const PlanSequence seq = perturbed_sequence(gp.joint);
    REQUIRE(seq.ns == std::vector<std::size_t>{2, 4, 8, 16, 32});

    // Mollifying the correlated Gaussian by width 1/16 widens each marginal
    // to variance 1 + 1/16, a closed form the projected marginal must hit.
    const AxisGrid ax = gp.joint.grid.factors.front();
    const DensityField ref = gaussian_density(ax, 0.0, std::sqrt(1.0 + 1.0 / 16.0));
    CHECK(l1_distance(seq.marginals[1][0], ref) < 1e-10);
    CHECK(seq.plans[1].probability);

    const SmoothingConfig cfg{0.1, 2.0, 1e-12, 1e-6};
    const ConvergenceTable t = mu_continuity(seq, gp.joint, gp.marginals, cfg);
    CHECK(t.verdict);
    const std::vector<double> drift = t.column(3);
    for (std::size_t i = 0; i + 1 < drift.size(); ++i) CHECK(drift[i + 1] < drift[i]);
    CHECK(drift.front() > 1e-3);

    // A sequence whose marginals stay away from the limit's marginals fails
    // the continuity hypothesis and is rejected up front.
    PlanSequence frozen;
    frozen.ns = {2, 4, 8};
    for (int k = 0; k < 3; ++k) {
        frozen.plans.push_back(seq.plans[0]);
        frozen.marginals.push_back(seq.marginals[0]);
    }
    CHECK_THROWS_AS(mu_continuity(frozen, gp.joint, gp.marginals, cfg), std::invalid_argument);

    PlanSequence malformed;
    malformed.ns = {2, 4};
    malformed.plans.push_back(seq.plans[0]);
    malformed.marginals.push_back(seq.marginals[0]);
    CHECK_THROWS_AS(mu_continuity(malformed, gp.joint, gp.marginals, cfg),
                    std::invalid_argument);
}

TEST_CASE("marginal energies rise to their unmollified limits", "[convergence]") {
    const AxisGrid ax = make_axis_grid(-8.0, 8.0, 512);
    const std::vector<DensityField> marg{gaussian_density(ax, 0.0, 1.0),
                                         gaussian_density(ax, 0.5, 0.8)};
    const EpsilonSchedule deep{{0.4, 0.1, 0.025, 0.01, 0.0025}};
    const ConvergenceTable t = energy_convergence_report(marg, SmoothingConfig{}, deep);
    CHECK(t.verdict);
    CHECK(t.columns == std::vector<std::string>{"marginal_0", "marginal_1"});

    // Mollifying N(m, s^2) by the width-eps kernel gives N(m, s^2 + eps)
    // whose energy is 1 / (4 (s^2 + eps)).
    const double sig2[2] = {1.0, 0.64};
    for (const ConvergenceRow& row : t.rows)
        for (std::size_t c = 0; c < 2; ++c)
            CHECK(row.values[c] ==
                  Approx(1.0 / (4.0 * (sig2[c] + row.parameter))).epsilon(1e-5));

    // The default schedule stops at eps = 0.025 where the energies are still
    // 2.4% short of their limits, which the verdict must call out.
    const ConvergenceTable shallow =
        energy_convergence_report(marg, SmoothingConfig{}, default_epsilon_schedule());
    CHECK_FALSE(shallow.verdict);
    CHECK(shallow.note.find("not within 1%") != std::string::npos);

    CHECK_THROWS_AS(energy_convergence_report({}, SmoothingConfig{}, deep),
                    std::invalid_argument);
}

TEST_CASE("smoothed plans stay inside the marginal tightness box", "[convergence]") {
    const GridPlan gp = correlated_gaussian_plan(128, 0.5);
    const PlanInput in = grid_input(gp.joint, gp.marginals);
    const ConvergenceTable t =
        tightness_table(in, SmoothingConfig{}, default_epsilon_schedule());
    CHECK(t.verdict);
    // Each N(0,1) marginal needs [-R, R] to hold all but 5e-5 of its mass;
    // the first node-aligned radius that works on this grid is 4.125.
    CHECK(t.note == "R = 4.125");
    for (double v : t.column(0)) {
        CHECK(v <= 1e-4);
        CHECK(v >= -1e-12);
    }

    const PlanInput atoms = quantile_pair_input(128, 2000);
    const ConvergenceTable ta =
        tightness_table(atoms, SmoothingConfig{}, EpsilonSchedule{{0.1, 0.05}});
    CHECK(ta.verdict);
    CHECK(ta.note.rfind("R = 4.", 0) == 0);

    CHECK_THROWS_AS(tightness_table(in, SmoothingConfig{}, default_epsilon_schedule(), 0.0),
                    std::invalid_argument);
}
