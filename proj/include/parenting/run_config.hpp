#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "parenting/model.hpp"
#include "parenting/pretrain.hpp"
#include "parenting/probe.hpp"
#include "parenting/synth.hpp"
#include "parenting/tuning.hpp"

namespace parenting {

inline constexpr std::string_view kOutputRootVariable = "PARENTING_OUTPUT_ROOT";

struct RunConfig {
    std::uint64_t seed = 1;
    std::string run_id;                  // empty derives "seed-<seed>"
    std::filesystem::path output_dir;    // empty derives <output root>/<run id>
    ModelConfig model;
    FactSpec facts;
    CorpusOptions corpus;
    PretrainConfig pretrain;
    DatasetSizes sizes;
    ProbeConfig probe;
    double tau = 1.0;
    TuneConfig tune;
    std::vector<double> sweep_ratios{1.0 / 5.0, 1.0 / 3.0, 1.0, 3.0, 5.0};
    std::string sweep_ratios_text = "1/5,1/3,1,3,5";

    /// Assigns one key from its text form. Throws ConfigError naming the key
    /// for unknown keys and malformed or out-of-range values.
    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;
    static const std::vector<std::string>& keys();

    /// Propagates the run seed into every component and range-checks the result.
    void finalize();

    std::string effective_run_id() const;
    /// --out wins, then the output-root variable, then ./runs.
    std::filesystem::path effective_output_dir() const;

    std::vector<std::pair<std::string, std::string>> entries() const;
};

/// `key = value` lines; '#' starts a comment; blank lines are ignored.
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& origin);

/// Accepts decimals and fractions such as "1/3".
double parse_ratio(std::string_view text);

}  // namespace parenting
