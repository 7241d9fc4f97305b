// Command-line front end: run a scenario and write its artifact tree,
// validate a configuration, or list the built-in scenarios.
//
// Exit status: 0 when every certificate and table verdict passes, 1 when a
// check fails (the first failing name is printed) or the run aborts, 2 when
// the configuration is invalid (one diagnostic per field).

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <plansmooth/scenarios.hpp>

namespace {

struct CliOverrides {
    std::optional<std::string> config_path;
    std::optional<std::string> scenario;
    std::optional<std::string> output_dir;
    std::optional<std::string> epsilon_schedule;  // comma-separated list
    std::optional<double> p;
    std::optional<std::size_t> grid;
    std::optional<std::uint64_t> seed;
};

void add_config_flags(CLI::App* cmd, CliOverrides& o) {
    cmd->add_option("--config", o.config_path, "JSON configuration file");
    cmd->add_option("--scenario", o.scenario, "scenario name (see list-scenarios)");
    cmd->add_option("--output", o.output_dir, "directory for the artifact tree");
    cmd->add_option("--epsilon-schedule", o.epsilon_schedule,
                    "comma-separated decreasing bandwidths, e.g. 0.4,0.2,0.1");
    cmd->add_option("--p", o.p, "Sobolev exponent");
    cmd->add_option("--grid", o.grid, "grid cells per axis");
    cmd->add_option("--seed", o.seed, "seed for sampled constructions");
}

std::vector<double> parse_schedule(const std::string& text, std::vector<std::string>& diags) {
    std::vector<double> values;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t pos = std::min(text.find(',', start), text.size());
        const std::string cell = text.substr(start, pos - start);
        char* end = nullptr;
        const double v = std::strtod(cell.c_str(), &end);
        if (cell.empty() || end == cell.c_str() || *end != '\0') {
            diags.push_back("epsilon_schedule: bad entry '" + cell + "' in --epsilon-schedule");
            return values;
        }
        values.push_back(v);
        start = pos + 1;
    }
    return values;
}

// Resolve defaults, config file and command-line flags (in rising
// precedence) into one ExperimentConfig.
plansmooth::ExperimentConfig resolve_config(const CliOverrides& o,
                                            std::vector<std::string>& diags) {
    plansmooth::ordered_json doc = plansmooth::ordered_json::object();
    if (o.config_path) {
        try {
            doc = plansmooth::read_json_file(*o.config_path);
        } catch (const std::exception& e) {
            diags.push_back(std::string("config: ") + e.what());
            return plansmooth::ExperimentConfig{};
        }
        if (!doc.is_object()) {
            diags.push_back("config: the document must be a JSON object");
            return plansmooth::ExperimentConfig{};
        }
    }
    if (o.scenario) doc["scenario"] = *o.scenario;

    plansmooth::ExperimentConfig cfg = plansmooth::config_from_json(doc, diags);
    if (o.output_dir) cfg.output_dir = *o.output_dir;
    if (o.p) cfg.p = *o.p;
    if (o.grid) cfg.n = *o.grid;
    if (o.seed) cfg.seed = *o.seed;
    if (o.epsilon_schedule) cfg.epsilon_schedule = parse_schedule(*o.epsilon_schedule, diags);

    for (const auto& d : plansmooth::validate_config(cfg)) diags.push_back(d);
    return cfg;
}

int report_invalid(const std::vector<std::string>& diags) {
    std::cerr << "invalid config:\n";
    for (const auto& d : diags) std::cerr << "  " << d << "\n";
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"marginal-preserving smoothing of multi-marginal transport plans"};
    app.require_subcommand(1);

    CliOverrides run_opts;
    CLI::App* run_cmd = app.add_subcommand("run", "run a scenario and write its artifacts");
    add_config_flags(run_cmd, run_opts);

    CliOverrides val_opts;
    CLI::App* val_cmd = app.add_subcommand("validate", "check a configuration and exit");
    add_config_flags(val_cmd, val_opts);

    CLI::App* list_cmd = app.add_subcommand("list-scenarios", "print the built-in scenarios");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "invalid config:\n  command_line: " << e.what() << "\n";
        return 2;
    }

    if (list_cmd->parsed()) {
        for (const auto& [name, what] : plansmooth::scenario_catalog())
            std::cout << name << "  " << what << "\n";
        return 0;
    }

    if (val_cmd->parsed()) {
        std::vector<std::string> diags;
        const plansmooth::ExperimentConfig cfg = resolve_config(val_opts, diags);
        if (!diags.empty()) return report_invalid(diags);
        std::cout << "config ok\n" << plansmooth::to_json(cfg).dump(2) << "\n";
        return 0;
    }

    std::vector<std::string> diags;
    const plansmooth::ExperimentConfig cfg = resolve_config(run_opts, diags);
    if (!diags.empty()) return report_invalid(diags);

    try {
        const auto t0 = std::chrono::steady_clock::now();
        const plansmooth::ScenarioRun run = plansmooth::run_scenario(cfg);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const plansmooth::ordered_json certdoc =
            plansmooth::write_run(cfg, run, cfg.output_dir, wall);
        std::cout << "wrote " << cfg.output_dir << " ("
                  << certdoc.at("certificates").size() << " certificates, "
                  << certdoc.at("tables").size() << " tables)\n";
        const std::string failed = plansmooth::first_failure(certdoc);
        if (failed.empty()) {
            std::cout << "all checks passed\n";
            return 0;
        }
        std::cerr << "check failed: " << failed << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "run aborted: " << e.what() << "\n";
        return 1;
    }
}
