#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <plansmooth/io.hpp>
#include <plansmooth/scenarios.hpp>

using namespace plansmooth;
using Catch::Approx;

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& leaf) {
    const fs::path dir = fs::temp_directory_path() / "plansmooth_io_tests" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout followed by stderr
};

// Run the installed binary with the given arguments and capture everything.
CliResult run_cli(const std::string& args) {
    const fs::path dir = fs::temp_directory_path() / "plansmooth_io_tests";
    fs::create_directories(dir);
    const fs::path out = dir / "cli_stdout.txt";
    const fs::path err = dir / "cli_stderr.txt";
    const std::string cmd = std::string("\"") + PLANSMOOTH_CLI_PATH + "\" " + args + " > \"" +
                            out.string() + "\" 2> \"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = read_text_file(out) + read_text_file(err);
    return r;
}

ExperimentConfig small_product_config(const fs::path& out) {
    ExperimentConfig cfg = default_config("product");
    cfg.n = 64;
    cfg.epsilon_schedule = {0.4, 0.2};
    cfg.output_dir = out.string();
    return cfg;
}

}  // namespace

TEST_CASE("tables and atom lists survive the CSV round trip", "[io]") {
    ConvergenceTable t;
    t.name = "demo";
    t.parameter_name = "epsilon";
    t.columns = {"alpha", "beta"};
    t.rows.push_back({0.4, {1.0 / 3.0, 2e-17}});
    t.rows.push_back({0.2, {-0.125, 123456.78901234567}});
    const std::string csv = to_csv(t);
    CHECK(csv.substr(0, 19) == "epsilon,alpha,beta\n");

    const ConvergenceTable back = table_from_csv("demo", csv);
    REQUIRE(back.columns == t.columns);
    REQUIRE(back.rows.size() == t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        CHECK(back.rows[i].parameter == t.rows[i].parameter);
        CHECK(back.rows[i].values == t.rows[i].values);
    }

    ConvergenceTable bad = t;
    bad.columns[0] = "with,comma";
    CHECK_THROWS_AS(to_csv(bad), std::invalid_argument);
    bad = t;
    bad.rows[1].values.pop_back();
    CHECK_THROWS_AS(to_csv(bad), std::invalid_argument);
    CHECK_THROWS_AS(table_from_csv("x", ""), std::invalid_argument);
    CHECK_THROWS_AS(table_from_csv("x", "epsilon\n0.4\n"), std::invalid_argument);
    CHECK_THROWS_AS(table_from_csv("x", "epsilon,a\n"), std::invalid_argument);
    CHECK_THROWS_AS(table_from_csv("x", "epsilon,a\n0.4,oops\n"), std::invalid_argument);

    const AxisGrid ax = make_axis_grid(-2.0, 2.0, 8);
    const AtomicPlan plan = monotone_node_coupling(
        {gaussian_density(ax, 0.0, 1.0), gaussian_density(ax, 0.0, 1.0)});
    const AtomicPlan rt = atoms_from_csv(to_csv(plan), 1);
    CHECK(rt.N == plan.N);
    CHECK(rt.coords == plan.coords);
    CHECK(rt.weights == plan.weights);
    CHECK_THROWS_AS(atoms_from_csv("weight,x0\n", 1), std::invalid_argument);
    CHECK_THROWS_AS(atoms_from_csv("w,x0\n0.5,0\n0.5,1\n", 1), std::invalid_argument);
    CHECK_THROWS_AS(atoms_from_csv(to_csv(plan), 3), std::invalid_argument);
}

TEST_CASE("fields round trip through metadata plus payload files", "[io]") {
    const fs::path dir = scratch_dir("fields");
    const AxisGrid ax = make_axis_grid(-3.0, 3.0, 24);
    const DensityField f = product_plan(
        {gaussian_density(ax, 0.0, 1.0), gaussian_density(ax, 0.5, 0.8)});
    save_field(f, dir, "joint");
    CHECK(fs::exists(dir / "joint.json"));
    CHECK(fs::exists(dir / "joint.bin"));

    const DensityField back = load_field(dir, "joint");
    CHECK(back.values == f.values);
    CHECK(back.mass == f.mass);
    CHECK(back.probability == f.probability);
    REQUIRE(back.grid.factors.size() == 2);
    CHECK(back.grid.factors[0].origin == f.grid.factors[0].origin);
    CHECK(back.grid.factors[0].spacing == f.grid.factors[0].spacing);
    CHECK(back.grid.factors[0].count == f.grid.factors[0].count);

    // A payload that no longer matches its metadata must be rejected.
    std::vector<double> vals = read_doubles_bin(dir / "joint.bin");
    vals.pop_back();
    write_doubles_bin(dir / "joint.bin", vals);
    CHECK_THROWS_AS(load_field(dir, "joint"), std::invalid_argument);

    save_field(f, dir, "joint");
    vals = read_doubles_bin(dir / "joint.bin");
    vals[0] += 1.0;
    write_doubles_bin(dir / "joint.bin", vals);
    CHECK_THROWS_AS(load_field(dir, "joint"), std::invalid_argument);

    CHECK_THROWS_AS(load_field(dir, "missing"), std::runtime_error);
}

TEST_CASE("json helpers keep non-finite numbers and grids intact", "[io]") {
    CHECK(number_from_json(json_number(0.1), "x") == 0.1);
    CHECK(number_from_json(json_number(std::numeric_limits<double>::infinity()), "x") ==
          std::numeric_limits<double>::infinity());
    CHECK(number_from_json(json_number(-std::numeric_limits<double>::infinity()), "x") ==
          -std::numeric_limits<double>::infinity());
    CHECK(std::isnan(
        number_from_json(json_number(std::numeric_limits<double>::quiet_NaN()), "x")));
    CHECK_THROWS_AS(number_from_json(ordered_json("word"), "x"), std::invalid_argument);

    const AxisGrid ax = make_axis_grid(-1.0, 3.0, 16);
    const AxisGrid back = axis_grid_from_json(to_json(ax));
    CHECK(back.origin == ax.origin);
    CHECK(back.spacing == ax.spacing);
    CHECK(back.count == ax.count);
    CHECK(back.dim == ax.dim);
    ordered_json bad = to_json(ax);
    bad["count"] = 0;
    CHECK_THROWS_AS(axis_grid_from_json(bad), std::invalid_argument);
}

TEST_CASE("certificate documents aggregate verdicts and name failures", "[io]") {
    const BoundCertificate good = make_certificate("tight", 0.5, 1.0);
    const BoundCertificate bad = make_certificate("loose", 2.0, 1.0);
    CHECK(good.passed);
    CHECK_FALSE(bad.passed);

    const BoundCertificate rt = certificate_from_json(to_json(bad));
    CHECK(rt.name == bad.name);
    CHECK(rt.measured == bad.measured);
    CHECK(rt.bound == bad.bound);
    CHECK(rt.margin == bad.margin);
    CHECK(rt.passed == bad.passed);

    TableSummary ok_table{"trend", true, "", "tables/trend.csv"};
    TableSummary bad_table{"drift", false, "column x: not monotone at step 1",
                           "tables/drift.csv"};

    ordered_json doc = certificates_document({good}, {ok_table});
    CHECK(doc.at("all_passed").get<bool>());
    CHECK(first_failure(doc).empty());

    doc = certificates_document({good, bad}, {ok_table});
    CHECK_FALSE(doc.at("all_passed").get<bool>());
    CHECK(first_failure(doc) == "loose");

    doc = certificates_document({good}, {bad_table, ok_table});
    CHECK_FALSE(doc.at("all_passed").get<bool>());
    CHECK(first_failure(doc) == "drift");
    CHECK(doc.at("tables")[0].at("note").get<std::string>() ==
          "column x: not monotone at step 1");
}

TEST_CASE("scenario defaults and config parsing report field problems", "[io]") {
    CHECK(default_config("product").n == 128);
    CHECK(default_config("quantile_gaussians").n == 256);
    CHECK(default_config("quantile_gaussians").epsilon_schedule ==
          default_epsilon_schedule().values);
    CHECK(default_config("correlated_gaussian").epsilon_schedule.back() == 0.00625);
    CHECK(default_config("mixture_sequence").epsilon_schedule ==
          std::vector<double>{0.1});

    ExperimentConfig cfg = default_config("correlated_gaussian");
    cfg.seed = 42;
    cfg.output_dir = "elsewhere";
    std::vector<std::string> diags;
    const ExperimentConfig back = config_from_json(to_json(cfg), diags);
    CHECK(diags.empty());
    CHECK(back.scenario == cfg.scenario);
    CHECK(back.n == cfg.n);
    CHECK(back.epsilon_schedule == cfg.epsilon_schedule);
    CHECK(back.seed == cfg.seed);
    CHECK(back.output_dir == cfg.output_dir);
    CHECK(back.marginal_tol == cfg.marginal_tol);

    diags.clear();
    ordered_json doc = {{"scenario", "product"}, {"bogus", 1}};
    config_from_json(doc, diags);
    REQUIRE(diags.size() == 1);
    CHECK(diags[0].find("bogus") == 0);

    diags.clear();
    doc = {{"scenario", "product"}, {"n", "many"}};
    config_from_json(doc, diags);
    REQUIRE(diags.size() == 1);
    CHECK(diags[0].find("n:") == 0);

    diags.clear();
    config_from_json(ordered_json::array(), diags);
    REQUIRE(diags.size() == 1);
    CHECK(diags[0].find("config:") == 0);
}

TEST_CASE("config validation names each offending field", "[io]") {
    const auto diag_starting = [](const ExperimentConfig& cfg, const std::string& field) {
        for (const auto& d : validate_config(cfg))
            if (d.rfind(field, 0) == 0) return true;
        return false;
    };

    CHECK(validate_config(default_config("product")).empty());
    CHECK(validate_config(default_config("quantile_gaussians")).empty());
    CHECK(validate_config(default_config("correlated_gaussian")).empty());
    CHECK(validate_config(default_config("mixture_sequence")).empty());
    CHECK(validate_config(default_config("counterexample")).empty());

    ExperimentConfig cfg = default_config("nowhere");
    CHECK(diag_starting(cfg, "scenario:"));

    cfg = default_config("product");
    cfg.d = 2;
    CHECK(diag_starting(cfg, "d:"));
    cfg = default_config("product");
    cfg.N = 1;
    CHECK(diag_starting(cfg, "N:"));
    cfg = default_config("quantile_gaussians");
    cfg.N = 3;
    CHECK(diag_starting(cfg, "N:"));
    cfg = default_config("product");
    cfg.N = 4;  // joint grid would hold 128^4 nodes
    CHECK(diag_starting(cfg, "N:"));
    cfg = default_config("product");
    cfg.n = 5000;
    CHECK(diag_starting(cfg, "n:"));
    cfg = default_config("product");
    cfg.n = 126;  // not divisible by 4
    CHECK(diag_starting(cfg, "n:"));
    cfg = default_config("counterexample");
    cfg.n = 100;  // not divisible by 8
    CHECK(diag_starting(cfg, "n:"));
    cfg = default_config("product");
    cfg.p = 1.0;
    CHECK(diag_starting(cfg, "p:"));
    cfg = default_config("product");
    cfg.epsilon_schedule = {0.1, 0.2};
    CHECK(diag_starting(cfg, "epsilon_schedule:"));
    cfg = default_config("product");
    cfg.epsilon_schedule = {0.4, 1e-6};  // unresolvable bandwidth at n = 128
    CHECK(diag_starting(cfg, "epsilon_schedule:"));
    cfg = default_config("quantile_gaussians");
    cfg.M = 0;
    CHECK(diag_starting(cfg, "M:"));
    cfg = default_config("product");
    cfg.output_dir.clear();
    CHECK(diag_starting(cfg, "output_dir:"));
    cfg = default_config("product");
    cfg.weak_tol = 0.0;
    CHECK(diag_starting(cfg, "weak_tol:"));
    cfg = default_config("product");
    cfg.density_floor = 0.5;
    CHECK(diag_starting(cfg, "density_floor:"));
}

TEST_CASE("the counterexample scenario diagnoses the divergent ladder", "[io]") {
    ExperimentConfig cfg = default_config("counterexample");
    const ScenarioRun run = run_scenario(cfg);

    REQUIRE(run.tables.size() == 2);
    const ConvergenceTable& bad = run.tables[0];
    CHECK(bad.name == "divergence_ladder");
    CHECK(bad.verdict);
    CHECK(bad.note == "divergent");
    REQUIRE(bad.rows.size() == 4);
    CHECK(bad.rows.front().parameter == 16.0);
    CHECK(bad.rows.back().parameter == 128.0);
    for (std::size_t i = 0; i + 1 < bad.rows.size(); ++i)
        CHECK(bad.rows[i + 1].values[0] >= 1.1 * bad.rows[i].values[0]);

    const ConvergenceTable& good = run.tables[1];
    CHECK(good.name == "reference_ladder");
    CHECK(good.verdict);
    CHECK(good.note == "convergent");

    REQUIRE(run.certificates.size() == 2);
    CHECK(run.certificates[0].name == "irregularity_detected");
    CHECK(run.certificates[0].passed);
    CHECK(run.certificates[1].name == "reference_ladder_limit");
    CHECK(run.certificates[1].passed);
    // Four times the energy of a pair of standard normal factors.
    CHECK(run.tables[1].rows.back().values[0] == Approx(2.0).margin(1e-3));

    cfg.n = 20;  // cannot halve three times
    CHECK_THROWS_AS(run_scenario(cfg), std::invalid_argument);
}

TEST_CASE("write_run lays out the artifact tree the manifest describes", "[io]") {
    const fs::path dir = scratch_dir("tree");
    const ExperimentConfig cfg = small_product_config(dir);
    const ScenarioRun run = run_scenario(cfg);
    const ordered_json certdoc = write_run(cfg, run, dir, 1.25);

    CHECK(certdoc.at("all_passed").get<bool>());
    CHECK(first_failure(certdoc).empty());
    for (const char* name :
         {"manifest.json", "certificates.json", "timing.txt", "tables/weak_convergence.csv",
          "tables/d1p_convergence.csv", "tables/tightness.csv", "fields/theta_final.json",
          "fields/theta_final.bin", "fields/lambda_final.json", "fields/lambda_final.bin"})
        CHECK(fs::exists(dir / name));

    const ordered_json manifest = read_json_file(dir / "manifest.json");
    CHECK(manifest.at("tool").get<std::string>() == "plansmooth");
    CHECK(manifest.at("version").get<std::string>() == std::string(version()));
    CHECK(manifest.at("config") == to_json(cfg));
    for (const auto& rel : manifest.at("artifacts"))
        CHECK(fs::exists(dir / rel.get<std::string>()));

    // The stored field reproduces the in-memory one exactly.
    const DensityField theta = load_field(dir / "fields", "theta_final");
    CHECK(theta.values == run.fields[0].second.values);

    const std::string timing = read_text_file(dir / "timing.txt");
    CHECK(timing == "wall_seconds 1.25\n");

    ExperimentConfig broken = cfg;
    broken.p = 0.5;
    CHECK_THROWS_AS(run_scenario(broken), std::invalid_argument);
}

TEST_CASE("the command line reports scenarios, validity and verdicts", "[io]") {
    const CliResult listed = run_cli("list-scenarios");
    CHECK(listed.exit_code == 0);
    for (const auto& [name, what] : scenario_catalog()) {
        CHECK(listed.output.find(name) != std::string::npos);
        CHECK(listed.output.find(what) != std::string::npos);
    }

    CHECK(run_cli("validate --scenario product").exit_code == 0);

    const CliResult unknown = run_cli("validate --scenario nowhere");
    CHECK(unknown.exit_code == 2);
    CHECK(unknown.output.find("scenario:") != std::string::npos);

    const CliResult bad_p = run_cli("validate --scenario product --p 0.5");
    CHECK(bad_p.exit_code == 2);
    CHECK(bad_p.output.find("p:") != std::string::npos);

    const CliResult bad_eps = run_cli("validate --scenario product --epsilon-schedule 0.4,0");
    CHECK(bad_eps.exit_code == 2);
    CHECK(bad_eps.output.find("epsilon_schedule") != std::string::npos);

    const CliResult bad_flag = run_cli("validate --no-such-flag");
    CHECK(bad_flag.exit_code == 2);

    const CliResult no_sub = run_cli("");
    CHECK(no_sub.exit_code == 2);
}

TEST_CASE("cli runs write the tree and identical configs reproduce it", "[io]") {
    const fs::path dir = scratch_dir("cli_run");
    const fs::path cfg_path = dir / "config.json";
    ExperimentConfig cfg = small_product_config(dir / "out");
    write_json_file(cfg_path, to_json(cfg));

    const CliResult first = run_cli("run --config \"" + cfg_path.string() + "\"");
    CHECK(first.exit_code == 0);
    CHECK(first.output.find("all checks passed") != std::string::npos);

    // Stash the artifacts, rerun the identical config, compare byte for
    // byte. Wall time lives in timing.txt, outside this comparison.
    std::vector<std::pair<std::string, std::string>> before;
    const ordered_json manifest = read_json_file(dir / "out" / "manifest.json");
    for (const auto& rel : manifest.at("artifacts"))
        before.emplace_back(rel.get<std::string>(),
                            read_text_file(dir / "out" / rel.get<std::string>()));
    before.emplace_back("manifest.json", read_text_file(dir / "out" / "manifest.json"));

    const CliResult second = run_cli("run --config \"" + cfg_path.string() + "\"");
    CHECK(second.exit_code == 0);
    for (const auto& [rel, content] : before)
        CHECK(read_text_file(dir / "out" / rel) == content);

    // A schedule too shallow for the weak thresholds must fail the run and
    // name the offending table.
    const fs::path fdir = scratch_dir("cli_fail");
    ExperimentConfig shallow = default_config("quantile_gaussians");
    shallow.n = 128;
    shallow.M = 500;
    shallow.epsilon_schedule = {0.4, 0.2, 0.1};
    shallow.output_dir = (fdir / "out").string();
    write_json_file(fdir / "config.json", to_json(shallow));
    const CliResult failed = run_cli("run --config \"" + (fdir / "config.json").string() + "\"");
    CHECK(failed.exit_code == 1);
    CHECK(failed.output.find("check failed: weak_convergence") != std::string::npos);
    const ordered_json doc = read_json_file(fdir / "out" / "certificates.json");
    CHECK_FALSE(doc.at("all_passed").get<bool>());
    CHECK(first_failure(doc) == "weak_convergence");

    // Flags override the file: move the output and shrink the schedule.
    const fs::path odir = scratch_dir("cli_flags");
    const CliResult moved =
        run_cli("run --config \"" + cfg_path.string() + "\" --output \"" +
                (odir / "out").string() + "\" --epsilon-schedule 0.4 --grid 100");
    CHECK(moved.exit_code == 0);
    const ordered_json echo = read_json_file(odir / "out" / "manifest.json").at("config");
    CHECK(echo.at("n").get<std::size_t>() == 100);
    CHECK(echo.at("epsilon_schedule").size() == 1);

    // A grid too coarse for the finite-energy screen aborts with the
    // pipeline named rather than writing a partial tree.
    const CliResult coarse =
        run_cli("run --config \"" + cfg_path.string() + "\" --output \"" +
                (odir / "coarse").string() + "\" --epsilon-schedule 0.4 --grid 32");
    CHECK(coarse.exit_code == 1);
    CHECK(coarse.output.find("d1p_convergence") != std::string::npos);
    CHECK_FALSE(fs::exists(odir / "coarse" / "manifest.json"));
}
