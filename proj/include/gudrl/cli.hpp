#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gudrl/agent.hpp"

namespace gudrl::cli {

// Process exit codes.
enum ExitCode : int {
    ok = 0,
    usage_error = 2,
    missing_dataset = 3,
    output_unwritable = 4,
    bad_checkpoint = 5,
    bad_input = 6,
    run_failed = 7,
};

// "3", "0..4" (inclusive) or "1,4,9".
std::vector<std::uint64_t> parse_seeds(const std::string& spec);

struct RunConfig {
    std::string subcommand = "train";
    agent::SettingConfig setting = agent::SettingConfig::defaults(agent::Setting::online);
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::string dataset;  // empty when the setting trains online
    std::filesystem::path out;
};

// Key = value text, one field per line; read_config(write_config(c)) == c.
std::string write_config(const RunConfig& c, std::uint64_t seed);
RunConfig read_config(const std::string& text);

struct CurvePoint {
    std::size_t progress = 0;
    std::string condition;
    double mean_return = 0;
    double std_return = 0;
    std::uint64_t seed = 0;
};

std::vector<CurvePoint> curve_points(const std::vector<agent::EvalReport>& reports, std::uint64_t seed);
std::string format_curve(const std::vector<CurvePoint>& points);

class CurveError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Parses the CSV produced by format_curve; errors carry the line number.
std::vector<CurvePoint> parse_curve(const std::string& text);

struct PlotOptions {
    std::string title;
    std::string x_label = "steps";
    std::optional<double> dataset_mean;  // dashed reference line
};

// Self-contained SVG: per-condition mean across seeds with a +-1 std band
// across seeds (omitted for a single seed).
std::string render_plot(const std::vector<CurvePoint>& points, const PlotOptions& options);

}  // namespace gudrl::cli
