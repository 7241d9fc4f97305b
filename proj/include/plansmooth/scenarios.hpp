#pragma once

// Experiment configurations and the five built-in scenario pipelines. A
// scenario turns a validated config into certificates, convergence tables
// and fields; write_run lays those out as the on-disk artifact tree.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "builders.hpp"
#include "convergence.hpp"
#include "io.hpp"
#include "kernel.hpp"
#include "measures.hpp"
#include "smoothing.hpp"
#include "sobolev.hpp"
#include "version.hpp"

namespace plansmooth {

// ----------------------------------------------------------- configuration

struct ExperimentConfig {
    std::string scenario = "product";
    int d = 1;                         // ambient dimension per factor
    int N = 2;                         // number of factors
    std::size_t n = 128;               // grid cells per axis
    double p = 2.0;                    // Sobolev exponent
    std::vector<double> epsilon_schedule = default_epsilon_schedule().values;
    std::size_t M = 2000;              // atom count for quantile plans
    std::uint64_t seed = 1;            // reserved for sampled constructions
    std::string output_dir = "out";
    // Tolerance overrides.
    double marginal_tol = 1e-6;
    double weak_tol = 0.01;
    double cost_tol = 0.02;
    double density_floor = 1e-12;
};

inline const std::vector<std::pair<std::string, std::string>>& scenario_catalog() {
    static const std::vector<std::pair<std::string, std::string>> cat = {
        {"product",
         "product of Gaussian marginals; the smoothing fixed point with zero gap columns"},
        {"quantile_gaussians",
         "atomic quantile coupling of two Gaussians; marginal preservation and weak decay"},
        {"correlated_gaussian",
         "correlated Gaussian table; Sobolev distance decay and energy bounds"},
        {"mixture_sequence",
         "plan sequences converging to a correlated Gaussian; continuity of the smoother"},
        {"counterexample",
         "sine-power density whose root energy diverges under refinement"},
    };
    return cat;
}

inline bool known_scenario(const std::string& name) {
    for (const auto& [s, _] : scenario_catalog())
        if (s == name) return true;
    return false;
}

// Defaults that depend on the scenario: the deep schedules and finer grids
// some pipelines need to land their stated thresholds.
inline ExperimentConfig default_config(const std::string& scenario) {
    ExperimentConfig cfg;
    cfg.scenario = scenario;
    if (scenario == "quantile_gaussians") {
        cfg.n = 256;
    } else if (scenario == "correlated_gaussian") {
        cfg.n = 256;
        cfg.epsilon_schedule = {0.4, 0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625};
    } else if (scenario == "mixture_sequence") {
        cfg.epsilon_schedule = {0.1};
    }
    return cfg;
}

// Half-width of the symmetric boxes each scenario builds its measures on.
inline double scenario_halfwidth(const std::string& scenario) {
    if (scenario == "quantile_gaussians") return 4.0;
    if (scenario == "mixture_sequence") return 6.0;
    return 8.0;
}

// Semantic validation. Returns one diagnostic per problem, each starting
// with the offending field name; empty means the config is runnable.
inline std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
    std::vector<std::string> out;
    if (!known_scenario(cfg.scenario)) {
        std::string names;
        for (const auto& [s, _] : scenario_catalog()) {
            if (!names.empty()) names += ", ";
            names += s;
        }
        out.push_back("scenario: unknown scenario '" + cfg.scenario + "'; expected one of " +
                      names);
        return out;  // nothing else is checkable against an unknown pipeline
    }
    if (cfg.d != 1) out.push_back("d: scenario pipelines run with ambient dimension 1");
    if (cfg.N < 2) out.push_back("N: a transport plan needs at least 2 factors");
    if (cfg.scenario != "product" && cfg.scenario != "counterexample" && cfg.N != 2)
        out.push_back("N: scenario '" + cfg.scenario + "' is a two-factor construction");
    if (cfg.n < 8 || cfg.n > 4096)
        out.push_back("n: grid must have between 8 and 4096 cells per axis");
    if (!(cfg.p > 1.0) || !std::isfinite(cfg.p))
        out.push_back("p: need a finite exponent greater than 1");
    if (!(cfg.marginal_tol > 0.0)) out.push_back("marginal_tol: must be positive");
    if (!(cfg.weak_tol > 0.0)) out.push_back("weak_tol: must be positive");
    if (!(cfg.cost_tol > 0.0)) out.push_back("cost_tol: must be positive");
    if (!(cfg.density_floor > 0.0) || cfg.density_floor > 1e-3)
        out.push_back("density_floor: must lie in (0, 1e-3]");
    if (cfg.output_dir.empty()) out.push_back("output_dir: must not be empty");

    try {
        validate(EpsilonSchedule{cfg.epsilon_schedule});
    } catch (const std::invalid_argument& e) {
        out.push_back(std::string("epsilon_schedule: ") + e.what());
    }

    if (cfg.scenario == "counterexample") {
        if (cfg.n % 8 != 0 || cfg.n < 16)
            out.push_back("n: the four-level refinement ladder needs n >= 16 divisible by 8");
    } else {
        if ((cfg.scenario == "product" || cfg.scenario == "correlated_gaussian") &&
            cfg.n % 4 != 0)
            out.push_back("n: the Sobolev distance pipeline coarsens the grid twice; n must "
                          "be divisible by 4");
        if (!cfg.epsilon_schedule.empty() && cfg.n >= 8) {
            // The banded kernel quadrature needs the grid to resolve the
            // smallest bandwidth in play.
            const double eps_ref = cfg.scenario == "mixture_sequence"
                                       ? cfg.epsilon_schedule.front()
                                       : cfg.epsilon_schedule.back();
            const double h =
                2.0 * scenario_halfwidth(cfg.scenario) / static_cast<double>(cfg.n);
            if (eps_ref > 0.0 && h > std::sqrt(eps_ref)) {
                const auto need = static_cast<std::size_t>(std::ceil(
                    2.0 * scenario_halfwidth(cfg.scenario) / std::sqrt(eps_ref)));
                out.push_back("epsilon_schedule: bandwidth " + format_g17(eps_ref) +
                              " needs spacing at most its square root (raise n to " +
                              std::to_string(need) + " or more)");
            }
        }
    }
    if (cfg.scenario == "product" && cfg.N >= 2 && cfg.n >= 8) {
        double nodes = 1.0;
        for (int j = 0; j < cfg.N; ++j) nodes *= static_cast<double>(cfg.n);
        if (nodes > 2e7)
            out.push_back("N: the joint grid would have " + format_g17(nodes) +
                          " nodes; lower N or n (budget 2e7)");
    }
    if (cfg.scenario == "quantile_gaussians" && cfg.M < 1)
        out.push_back("M: the quantile coupling needs at least one atom");
    return out;
}

inline ordered_json to_json(const ExperimentConfig& cfg) {
    ordered_json j;
    j["scenario"] = cfg.scenario;
    j["d"] = cfg.d;
    j["N"] = cfg.N;
    j["n"] = cfg.n;
    j["p"] = json_number(cfg.p);
    ordered_json sched = ordered_json::array();
    for (double e : cfg.epsilon_schedule) sched.push_back(json_number(e));
    j["epsilon_schedule"] = sched;
    j["M"] = cfg.M;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["marginal_tol"] = json_number(cfg.marginal_tol);
    j["weak_tol"] = json_number(cfg.weak_tol);
    j["cost_tol"] = json_number(cfg.cost_tol);
    j["density_floor"] = json_number(cfg.density_floor);
    return j;
}

// Parse a config document on top of the scenario's defaults. Structural
// problems (unknown fields, wrong types) are appended to `diagnostics`
// with the field name first, mirroring validate_config.
inline ExperimentConfig config_from_json(const ordered_json& j,
                                         std::vector<std::string>& diagnostics) {
    if (!j.is_object()) {
        diagnostics.push_back("config: the document must be a JSON object");
        return ExperimentConfig{};
    }
    std::string scenario = "product";
    if (j.contains("scenario")) {
        if (j.at("scenario").is_string())
            scenario = j.at("scenario").get<std::string>();
        else
            diagnostics.push_back("scenario: must be a string");
    }
    ExperimentConfig cfg = default_config(scenario);

    const auto number_field = [&](const char* name, auto setter) {
        if (!j.contains(name)) return;
        if (!j.at(name).is_number()) {
            diagnostics.push_back(std::string(name) + ": must be a number");
            return;
        }
        setter(j.at(name));
    };
    number_field("d", [&](const ordered_json& v) { cfg.d = v.get<int>(); });
    number_field("N", [&](const ordered_json& v) { cfg.N = v.get<int>(); });
    number_field("n", [&](const ordered_json& v) { cfg.n = v.get<std::size_t>(); });
    number_field("p", [&](const ordered_json& v) { cfg.p = v.get<double>(); });
    number_field("M", [&](const ordered_json& v) { cfg.M = v.get<std::size_t>(); });
    number_field("seed", [&](const ordered_json& v) { cfg.seed = v.get<std::uint64_t>(); });
    number_field("marginal_tol",
                 [&](const ordered_json& v) { cfg.marginal_tol = v.get<double>(); });
    number_field("weak_tol", [&](const ordered_json& v) { cfg.weak_tol = v.get<double>(); });
    number_field("cost_tol", [&](const ordered_json& v) { cfg.cost_tol = v.get<double>(); });
    number_field("density_floor",
                 [&](const ordered_json& v) { cfg.density_floor = v.get<double>(); });
    if (j.contains("output_dir")) {
        if (j.at("output_dir").is_string())
            cfg.output_dir = j.at("output_dir").get<std::string>();
        else
            diagnostics.push_back("output_dir: must be a string");
    }
    if (j.contains("epsilon_schedule")) {
        const auto& js = j.at("epsilon_schedule");
        if (!js.is_array() ||
            std::any_of(js.begin(), js.end(), [](const auto& v) { return !v.is_number(); })) {
            diagnostics.push_back("epsilon_schedule: must be an array of numbers");
        } else {
            cfg.epsilon_schedule.clear();
            for (const auto& v : js) cfg.epsilon_schedule.push_back(v.get<double>());
        }
    }

    static const char* known[] = {"scenario", "d",    "N",
                                  "n",        "p",    "epsilon_schedule",
                                  "M",        "seed", "output_dir",
                                  "marginal_tol", "weak_tol", "cost_tol",
                                  "density_floor"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || (it.key() == k);
        if (!ok) diagnostics.push_back(it.key() + ": unknown config field");
    }
    return cfg;
}

// ------------------------------------------------------------ run products

struct ScenarioRun {
    std::vector<BoundCertificate> certificates;
    std::vector<ConvergenceTable> tables;
    std::vector<std::pair<std::string, DensityField>> fields;
};

namespace detail {

inline SmoothingConfig smoothing_config(const ExperimentConfig& cfg, double eps) {
    SmoothingConfig s;
    s.epsilon = eps;
    s.p = cfg.p;
    s.density_floor = cfg.density_floor;
    s.marginal_tol = cfg.marginal_tol;
    return s;
}

inline std::string eps_prefix(std::size_t i) { return "eps" + std::to_string(i) + "/"; }

// Marginal preservation and unit-mass certificates for one smoothed plan.
inline void push_plan_certificates(std::vector<BoundCertificate>& certs, const SmoothedPlan& sp,
                                   const std::string& prefix) {
    for (auto c : verify_marginals(sp)) {
        c.name = prefix + c.name;
        certs.push_back(c);
    }
    const double m = mass(sp.theta);
    certs.push_back(make_certificate(prefix + "theta_mass_gap", std::abs(m - 1.0), 1e-8));
}

}  // namespace detail

// Product of Gaussian marginals: the smoother's fixed point. Every gap
// column is numerically zero and the marginal certificates hold at
// summation precision.
inline ScenarioRun run_product(const ExperimentConfig& cfg) {
    const AxisGrid axis = make_axis_grid(-8.0, 8.0, cfg.n);
    static const double means[4] = {0.0, 0.5, -0.5, 0.25};
    static const double sigmas[4] = {1.0, 0.8, 1.2, 0.9};
    std::vector<DensityField> marginals;
    for (int j = 0; j < cfg.N; ++j)
        marginals.push_back(gaussian_density(axis, means[j % 4], sigmas[j % 4]));
    const DensityField plan = product_plan(marginals);
    const PlanInput input = grid_input(plan, marginals);
    const EpsilonSchedule schedule{cfg.epsilon_schedule};

    ScenarioRun run;
    SmoothedPlan last;
    for (std::size_t i = 0; i < cfg.epsilon_schedule.size(); ++i) {
        const SmoothingConfig scfg = detail::smoothing_config(cfg, cfg.epsilon_schedule[i]);
        last = theta_eps(plan, marginals, scfg);
        detail::push_plan_certificates(run.certificates, last, detail::eps_prefix(i));
        run.certificates.push_back([&] {
            auto c = energy_bound_flat2(last);
            c.name = detail::eps_prefix(i) + c.name;
            return c;
        }());
        run.certificates.push_back([&] {
            // The product plan is invariant under the smoother; certify the
            // pointwise gap, not only the marginals.
            const double gap = sup_distance(last.theta, plan);
            return make_certificate(detail::eps_prefix(i) + "fixed_point_sup", gap, 1e-8);
        }());
    }

    const SmoothingConfig base = detail::smoothing_config(cfg, cfg.epsilon_schedule.front());
    run.tables.push_back(
        weak_convergence(input, base, schedule, default_test_functions(cfg.N), cfg.weak_tol));
    run.tables.push_back(d1p_convergence(plan, marginals, base, schedule));
    run.tables.push_back(tightness_table(input, base, schedule));
    run.fields.emplace_back("theta_final", last.theta);
    run.fields.emplace_back("lambda_final", last.lambda);
    return run;
}

// Atomic quantile coupling of N(0,1) and N(1,1). Marginals are the binned
// projections of the atoms, so preservation holds at the stated tolerance
// for every bandwidth in the schedule.
inline ScenarioRun run_quantile_gaussians(const ExperimentConfig& cfg) {
    const AxisGrid ax0 = make_axis_grid(-4.0, 4.0, cfg.n);
    const AxisGrid ax1 = make_axis_grid(-3.0, 5.0, cfg.n);
    const AtomicPlan atoms = quantile_coupling(gaussian_density(ax0, 0.0, 1.0),
                                               gaussian_density(ax1, 1.0, 1.0), cfg.M);
    std::vector<DensityField> marginals;
    marginals.push_back(marginal_atoms(atoms, 0, ax0));
    marginals.push_back(marginal_atoms(atoms, 1, ax1));
    const PlanInput input = atomic_input(atoms, marginals);
    const EpsilonSchedule schedule{cfg.epsilon_schedule};

    ScenarioRun run;
    SmoothedPlan last;
    for (std::size_t i = 0; i < cfg.epsilon_schedule.size(); ++i) {
        const SmoothingConfig scfg = detail::smoothing_config(cfg, cfg.epsilon_schedule[i]);
        last = theta_eps(atoms, marginals, scfg);
        detail::push_plan_certificates(run.certificates, last, detail::eps_prefix(i));
        for (const auto& maker : {energy_bound_flat2, lambda_upper_bound}) {
            auto c = maker(last);
            c.name = detail::eps_prefix(i) + c.name;
            run.certificates.push_back(c);
        }
    }
    for (int j = 0; j < 2; ++j) {
        auto c = domination_check(last, j);
        c.name = detail::eps_prefix(cfg.epsilon_schedule.size() - 1) + c.name;
        run.certificates.push_back(c);
    }

    const SmoothingConfig base = detail::smoothing_config(cfg, cfg.epsilon_schedule.front());
    run.tables.push_back(
        weak_convergence(input, base, schedule, default_test_functions(2), cfg.weak_tol));
    run.tables.push_back(tightness_table(input, base, schedule));
    run.fields.emplace_back("theta_final", last.theta);
    run.fields.emplace_back("lambda_final", last.lambda);
    return run;
}

// Correlated Gaussian table: Sobolev-distance decay to the plan, the energy
// bound family, and the mollified-marginal energy trend.
inline ScenarioRun run_correlated_gaussian(const ExperimentConfig& cfg) {
    const GridPlan plan = correlated_gaussian_plan(cfg.n, 0.5);
    const PlanInput input = grid_input(plan.joint, plan.marginals);
    const EpsilonSchedule schedule{cfg.epsilon_schedule};
    const SmoothingConfig base = detail::smoothing_config(cfg, cfg.epsilon_schedule.front());
    const SobolevConfig scfg{cfg.p, cfg.density_floor};

    ScenarioRun run;
    const SmoothingConfig fin =
        detail::smoothing_config(cfg, cfg.epsilon_schedule.back());
    const SmoothedPlan sp = theta_eps(plan.joint, plan.marginals, fin);
    detail::push_plan_certificates(run.certificates, sp, "");
    for (const auto& maker :
         {energy_bound_flat2, energy_bound_flat, energy_bound_regular, lambda_upper_bound})
        run.certificates.push_back(maker(sp));
    run.certificates.push_back([&] {
        // Plans can only carry at least as much energy as their marginals
        // together; certify that the smoothed table respects this floor.
        double floor_sum = 0.0;
        for (const auto& rho : plan.marginals) floor_sum += energy(rho, scfg);
        return make_certificate("energy_superadditive", floor_sum - energy(sp.theta, scfg),
                                0.0);
    }());

    run.tables.push_back(d1p_convergence(plan.joint, plan.marginals, base, schedule));
    run.tables.push_back(energy_convergence_report(plan.marginals, base, schedule));
    run.tables.push_back(tightness_table(input, base, schedule));
    run.fields.emplace_back("theta_final", sp.theta);
    run.fields.emplace_back("lambda_final", sp.lambda);
    return run;
}

// Sequences of plans converging to a correlated Gaussian, smoothed at one
// fixed bandwidth: mixtures with a vanishing product component and
// mollified perturbations with shrinking width.
inline ScenarioRun run_mixture_sequence(const ExperimentConfig& cfg) {
    const GridPlan plan = correlated_gaussian_plan(cfg.n, 0.3, 6.0);
    const double eps = cfg.epsilon_schedule.front();
    const SmoothingConfig scfg = detail::smoothing_config(cfg, eps);

    ScenarioRun run;
    const SmoothedPlan sp = theta_eps(plan.joint, plan.marginals, scfg);
    detail::push_plan_certificates(run.certificates, sp, "");

    ConvergenceTable mix =
        mu_continuity(mixture_sequence(plan.joint, plan.marginals), plan.joint,
                      plan.marginals, scfg);
    mix.name = "mixture_continuity";
    run.tables.push_back(std::move(mix));
    ConvergenceTable pert =
        mu_continuity(perturbed_sequence(plan.joint), plan.joint, plan.marginals, scfg);
    pert.name = "perturbed_continuity";
    run.tables.push_back(std::move(pert));
    run.fields.emplace_back("theta_final", sp.theta);
    run.fields.emplace_back("lambda_final", sp.lambda);
    return run;
}

// Density whose root carries infinite Sobolev energy: the refinement ladder
// must diagnose divergence, with a Gaussian of known energy as the
// convergent reference.
inline ScenarioRun run_counterexample(const ExperimentConfig& cfg) {
    const int levels = 4;
    const SobolevConfig scfg{cfg.p, cfg.density_floor};

    // sin(x)^(p-1) is the canonical density whose p-th root just misses
    // finite Sobolev energy; the exponent tracks the configured p.
    const AxisGrid sine_axis = make_axis_grid(0.0, std::numbers::pi, cfg.n);
    const DensityField sine = sine_power_density(sine_axis, cfg.p - 1.0, true);
    const DensityField sine_plan = product_plan({sine, sine});
    const FiniteIntegralReport bad = finite_integral_check(sine_plan, scfg, levels);

    const AxisGrid gauss_axis = make_axis_grid(-8.0, 8.0, cfg.n);
    const DensityField gauss = gaussian_density(gauss_axis, 0.0, 1.0);
    const DensityField gauss_plan = product_plan({gauss, gauss});
    const FiniteIntegralReport good = finite_integral_check(gauss_plan, scfg, levels);

    ScenarioRun run;
    const auto ladder_table = [&](const char* name, const FiniteIntegralReport& rep) {
        ConvergenceTable t;
        t.name = name;
        t.parameter_name = "cells_per_axis";
        t.columns = {"root_energy_integral"};
        std::size_t cells = cfg.n >> (levels - 1);
        for (double v : rep.integrals) {
            t.rows.push_back({static_cast<double>(cells), {v}});
            cells *= 2;
        }
        t.note = rep.verdict;
        return t;
    };
    ConvergenceTable tb = ladder_table("divergence_ladder", bad);
    tb.verdict = bad.verdict == "divergent";
    if (!tb.verdict) tb.note += "; expected a divergent ladder";
    run.tables.push_back(std::move(tb));
    ConvergenceTable tg = ladder_table("reference_ladder", good);
    tg.verdict = good.verdict == "convergent";
    if (!tg.verdict) tg.note += "; expected a convergent ladder";
    run.tables.push_back(std::move(tg));

    // Worst growth shortfall against the 10 percent divergence margin; at
    // most zero exactly when every doubling grows the integral enough.
    double shortfall = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + 1 < bad.integrals.size(); ++k)
        shortfall = std::max(shortfall, 1.1 - bad.integrals[k + 1] / bad.integrals[k]);
    run.certificates.push_back(make_certificate("irregularity_detected", shortfall, 0.0));
    if (cfg.p == 2.0) {
        // At p = 2 the ladder value is four times the Sobolev energy; for a
        // pair of standard normal factors that limit is 2.
        run.certificates.push_back(
            make_certificate("reference_ladder_limit", std::abs(good.integrals.back() - 2.0),
                             1e-3));
    }
    run.fields.emplace_back("irregular_density", sine_plan);
    return run;
}

inline ScenarioRun run_scenario(const ExperimentConfig& cfg) {
    const auto problems = validate_config(cfg);
    if (!problems.empty()) {
        std::string msg = "run_scenario: invalid config";
        for (const auto& p : problems) msg += "\n  " + p;
        throw std::invalid_argument(msg);
    }
    if (cfg.scenario == "product") return run_product(cfg);
    if (cfg.scenario == "quantile_gaussians") return run_quantile_gaussians(cfg);
    if (cfg.scenario == "correlated_gaussian") return run_correlated_gaussian(cfg);
    if (cfg.scenario == "mixture_sequence") return run_mixture_sequence(cfg);
    return run_counterexample(cfg);
}

// ------------------------------------------------------------ artifact tree

// Writes certificates.json, tables/*.csv, fields/*.{json,bin} and
// manifest.json under `dir` and returns the certificates document. The wall
// time goes to timing.txt, a plain-text file outside the set of artifacts
// that identical configs reproduce byte for byte.
inline ordered_json write_run(const ExperimentConfig& cfg, const ScenarioRun& run,
                              const std::filesystem::path& dir, double wall_seconds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    fs::create_directories(dir / "tables");
    std::vector<std::string> artifacts;

    std::vector<TableSummary> summaries;
    for (const auto& t : run.tables) {
        const std::string rel = "tables/" + t.name + ".csv";
        write_text_file(dir / rel, to_csv(t));
        summaries.push_back({t.name, t.verdict, t.note, rel});
        artifacts.push_back(rel);
    }
    for (const auto& [name, field] : run.fields) {
        save_field(field, dir / "fields", name);
        artifacts.push_back("fields/" + name + ".json");
        artifacts.push_back("fields/" + name + ".bin");
    }

    const ordered_json certdoc = certificates_document(run.certificates, summaries);
    write_json_file(dir / "certificates.json", certdoc);
    artifacts.push_back("certificates.json");

    std::sort(artifacts.begin(), artifacts.end());
    ordered_json manifest;
    manifest["tool"] = "plansmooth";
    manifest["version"] = version();
    manifest["config"] = to_json(cfg);
    manifest["artifacts"] = artifacts;
    write_json_file(dir / "manifest.json", manifest);
    write_text_file(dir / "timing.txt",
                    "wall_seconds " + format_g17(wall_seconds) + "\n");
    return certdoc;
}

}  // namespace plansmooth
