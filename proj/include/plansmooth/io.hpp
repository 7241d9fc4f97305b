#pragma once

// File formats for experiment artifacts. Fields are stored as a JSON
// metadata file next to a raw binary payload of doubles; certificates and
// manifests are JSON documents; convergence tables are plain CSV. Every
// number printed to CSV goes through format_g17 and every JSON double is
// emitted by the shortest round-trip printer, so two runs that compute the
// same values produce byte-identical files.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "convergence.hpp"
#include "field.hpp"
#include "grid.hpp"
#include "measures.hpp"
#include "smoothing.hpp"
#include "util.hpp"

namespace plansmooth {

using ordered_json = nlohmann::ordered_json;

// ------------------------------------------------------------ file helpers

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_text_file: cannot open " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write_text_file: short write to " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_text_file: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void write_doubles_bin(const std::filesystem::path& path, const std::vector<double>& v) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_doubles_bin: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!out) throw std::runtime_error("write_doubles_bin: short write to " + path.string());
}

inline std::vector<double> read_doubles_bin(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("read_doubles_bin: cannot open " + path.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes % sizeof(double) != 0)
        throw std::runtime_error("read_doubles_bin: " + path.string() +
                                 " is not a whole number of doubles");
    std::vector<double> v(bytes / sizeof(double));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw std::runtime_error("read_doubles_bin: short read from " + path.string());
    return v;
}

inline void write_json_file(const std::filesystem::path& path, const ordered_json& doc) {
    write_text_file(path, doc.dump(2) + "\n");
}

inline ordered_json read_json_file(const std::filesystem::path& path) {
    try {
        return ordered_json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument("read_json_file: " + path.string() + ": " + e.what());
    }
}

// JSON numbers cannot carry infinities or NaN, which certificate margins can
// in principle produce; those fall back to a tagged string.
inline ordered_json json_number(double x) {
    if (std::isfinite(x)) return x;
    if (std::isnan(x)) return "nan";
    return x > 0 ? "inf" : "-inf";
}

inline double number_from_json(const ordered_json& j, const std::string& what) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
    }
    throw std::invalid_argument("expected a number for " + what);
}

// ------------------------------------------------------------------- grids

inline ordered_json to_json(const AxisGrid& g) {
    ordered_json j;
    j["origin"] = json_number(g.origin);
    j["spacing"] = json_number(g.spacing);
    j["count"] = g.count;
    j["dim"] = g.dim;
    return j;
}

inline AxisGrid axis_grid_from_json(const ordered_json& j) {
    AxisGrid g;
    g.origin = number_from_json(j.at("origin"), "axis origin");
    g.spacing = number_from_json(j.at("spacing"), "axis spacing");
    g.count = j.at("count").get<std::size_t>();
    g.dim = j.at("dim").get<int>();
    if (g.count == 0 || g.dim < 1 || !(g.spacing > 0.0))
        throw std::invalid_argument("axis_grid_from_json: degenerate axis");
    return g;
}

// ------------------------------------------------------------------ fields

// A field <name> becomes <dir>/<name>.json (metadata) plus <dir>/<name>.bin
// (the node values as raw doubles in native byte order).
inline void save_field(const DensityField& f, const std::filesystem::path& dir,
                       const std::string& name) {
    std::filesystem::create_directories(dir);
    ordered_json j;
    j["kind"] = "density_field";
    ordered_json axes = ordered_json::array();
    for (const auto& ax : f.grid.factors) axes.push_back(to_json(ax));
    j["axes"] = axes;
    j["value_count"] = f.values.size();
    j["mass"] = json_number(f.mass);
    j["probability"] = f.probability;
    j["values"] = name + ".bin";
    write_json_file(dir / (name + ".json"), j);
    write_doubles_bin(dir / (name + ".bin"), f.values);
}

inline DensityField load_field(const std::filesystem::path& dir, const std::string& name) {
    const ordered_json j = read_json_file(dir / (name + ".json"));
    if (j.value("kind", "") != std::string("density_field"))
        throw std::invalid_argument("load_field: " + name + " is not a density field file");
    std::vector<AxisGrid> axes;
    for (const auto& a : j.at("axes")) axes.push_back(axis_grid_from_json(a));
    ProductGrid grid(std::move(axes));
    std::vector<double> values =
        read_doubles_bin(dir / j.at("values").get<std::string>());
    if (values.size() != j.at("value_count").get<std::size_t>() ||
        values.size() != grid.total_nodes())
        throw std::invalid_argument("load_field: " + name + " payload size does not match axes");
    DensityField f;
    f.grid = std::move(grid);
    f.values = std::move(values);
    f.mass = number_from_json(j.at("mass"), "field mass");
    f.probability = j.at("probability").get<bool>();
    // Integrity check: the payload must reproduce the recorded mass.
    const double m = pairwise_sum(f.values) * f.grid.cell_volume();
    if (!(std::abs(m - f.mass) <= 1e-9 * std::max(1.0, std::abs(f.mass))))
        throw std::invalid_argument("load_field: " + name + " payload mass " + format_g17(m) +
                                    " does not match recorded mass " + format_g17(f.mass));
    return f;
}

// ------------------------------------------------------------ certificates

inline ordered_json to_json(const BoundCertificate& c) {
    ordered_json j;
    j["name"] = c.name;
    j["measured"] = json_number(c.measured);
    j["bound"] = json_number(c.bound);
    j["margin"] = json_number(c.margin);
    j["passed"] = c.passed;
    return j;
}

inline BoundCertificate certificate_from_json(const ordered_json& j) {
    BoundCertificate c;
    c.name = j.at("name").get<std::string>();
    c.measured = number_from_json(j.at("measured"), "certificate measured");
    c.bound = number_from_json(j.at("bound"), "certificate bound");
    c.margin = number_from_json(j.at("margin"), "certificate margin");
    c.passed = j.at("passed").get<bool>();
    return c;
}

// Summary row for a convergence table inside the certificates document; the
// numeric payload lives in the referenced CSV.
struct TableSummary {
    std::string name;
    bool verdict = false;
    std::string note;
    std::string csv_path;  // relative to the run directory
};

inline ordered_json certificates_document(const std::vector<BoundCertificate>& certs,
                                          const std::vector<TableSummary>& tables) {
    ordered_json doc;
    bool all = true;
    ordered_json jc = ordered_json::array();
    for (const auto& c : certs) {
        jc.push_back(to_json(c));
        all = all && c.passed;
    }
    ordered_json jt = ordered_json::array();
    for (const auto& t : tables) {
        ordered_json j;
        j["name"] = t.name;
        j["verdict"] = t.verdict;
        j["note"] = t.note;
        j["csv"] = t.csv_path;
        jt.push_back(j);
        all = all && t.verdict;
    }
    doc["certificates"] = jc;
    doc["tables"] = jt;
    doc["all_passed"] = all;
    return doc;
}

// Name of the first failing certificate or table, empty when everything
// passed. Drives the process exit status.
inline std::string first_failure(const ordered_json& certificates_doc) {
    for (const auto& c : certificates_doc.at("certificates"))
        if (!c.at("passed").get<bool>()) return c.at("name").get<std::string>();
    for (const auto& t : certificates_doc.at("tables"))
        if (!t.at("verdict").get<bool>()) return t.at("name").get<std::string>();
    return std::string();
}

// -------------------------------------------------------------------- CSV

namespace detail {

inline void require_plain_cell(const std::string& s, const char* what) {
    if (s.empty() || s.find_first_of(",\n\r\"") != std::string::npos)
        throw std::invalid_argument(std::string(what) + " '" + s +
                                    "' cannot be used as a CSV cell");
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            cells.push_back(line.substr(start));
            return cells;
        }
        cells.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

inline double parse_double_cell(const std::string& cell, const char* what) {
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end == cell.c_str() || *end != '\0')
        throw std::invalid_argument(std::string(what) + ": bad numeric cell '" + cell + "'");
    return v;
}

}  // namespace detail

// Header row is the parameter name followed by the column names; every
// numeric cell is the 17-significant-digit form. Verdict and note are not
// part of the CSV; they travel in the certificates document.
inline std::string to_csv(const ConvergenceTable& t) {
    detail::require_plain_cell(t.parameter_name, "table parameter name");
    std::string out = t.parameter_name;
    for (const auto& c : t.columns) {
        detail::require_plain_cell(c, "table column name");
        out += ",";
        out += c;
    }
    out += "\n";
    for (const auto& row : t.rows) {
        if (row.values.size() != t.columns.size())
            throw std::invalid_argument("to_csv: row width does not match column count");
        out += format_g17(row.parameter);
        for (double v : row.values) {
            out += ",";
            out += format_g17(v);
        }
        out += "\n";
    }
    return out;
}

inline ConvergenceTable table_from_csv(const std::string& name, const std::string& csv) {
    ConvergenceTable t;
    t.name = name;
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line))
        throw std::invalid_argument("table_from_csv: empty document");
    const auto head = detail::split_csv_line(line);
    if (head.size() < 2)
        throw std::invalid_argument("table_from_csv: header needs a parameter and a column");
    t.parameter_name = head.front();
    t.columns.assign(head.begin() + 1, head.end());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != head.size())
            throw std::invalid_argument("table_from_csv: row width does not match header");
        ConvergenceRow row;
        row.parameter = detail::parse_double_cell(cells.front(), "table_from_csv");
        for (std::size_t i = 1; i < cells.size(); ++i)
            row.values.push_back(detail::parse_double_cell(cells[i], "table_from_csv"));
        t.rows.push_back(std::move(row));
    }
    if (t.rows.empty()) throw std::invalid_argument("table_from_csv: no data rows");
    return t;
}

// Atom list as CSV: one row per atom, weight first, then the coordinates in
// factor-major order (x<j> for scalar factors, x<j>_<t> for d > 1).
inline std::string to_csv(const AtomicPlan& plan) {
    std::string out = "weight";
    for (int j = 0; j < plan.N; ++j)
        for (int t = 0; t < plan.d; ++t) {
            out += ",x" + std::to_string(j);
            if (plan.d > 1) out += "_" + std::to_string(t);
        }
    out += "\n";
    const auto row_len = static_cast<std::size_t>(plan.row_len());
    for (std::size_t i = 0; i < plan.size(); ++i) {
        out += format_g17(plan.weights[i]);
        for (std::size_t a = 0; a < row_len; ++a) {
            out += ",";
            out += format_g17(plan.coords[i * row_len + a]);
        }
        out += "\n";
    }
    return out;
}

inline AtomicPlan atoms_from_csv(const std::string& csv, int d) {
    if (d < 1) throw std::invalid_argument("atoms_from_csv: need d >= 1");
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("atoms_from_csv: empty document");
    const auto head = detail::split_csv_line(line);
    if (head.size() < 2 || head.front() != "weight" ||
        (static_cast<int>(head.size()) - 1) % d != 0)
        throw std::invalid_argument("atoms_from_csv: malformed header");
    const int N = (static_cast<int>(head.size()) - 1) / d;
    std::vector<double> coords;
    std::vector<double> weights;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != head.size())
            throw std::invalid_argument("atoms_from_csv: row width does not match header");
        weights.push_back(detail::parse_double_cell(cells.front(), "atoms_from_csv"));
        for (std::size_t a = 1; a < cells.size(); ++a)
            coords.push_back(detail::parse_double_cell(cells[a], "atoms_from_csv"));
    }
    return make_atomic_plan(d, N, std::move(coords), std::move(weights));
}

}  // namespace plansmooth
