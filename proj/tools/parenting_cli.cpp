#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <map>
#include <optional>
#include <string>

#include "parenting/errors.hpp"
#include "parenting/pipeline.hpp"
#include "parenting/run_config.hpp"

namespace {

enum ExitCode : int {
    kOk = 0,
    kUnexpected = 1,
    kConfig = 2,
    kInput = 3,
    kIo = 4,
    kStageDependency = 5,
    kGeneration = 6,
    kInternal = 7,
};

std::string dashed(std::string name) {
    for (char& c : name)
        if (c == '_') c = '-';
    return name;
}

int run(int argc, char** argv) {
    CLI::App app{"Behavior-subspace localization and tailored tuning on a micro-transformer"};
    app.set_version_flag("--version", std::string(parenting::kToolVersion));

    std::string stage_name;
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> assignments;
    bool quiet = false;
    app.add_option("stage", stage_name, "gen-data | pretrain | probe | localize | tune | eval | sweep | heatmap | all")
        ->required();
    app.add_option("--config", config_path, "key = value configuration file");
    app.add_option("--out", out_dir, "Run directory (overrides the output-root variable)");
    app.add_option("--set", assignments, "Extra key=value override, may repeat");
    app.add_flag("--quiet", quiet, "Only report warnings and errors");

    std::map<std::string, std::optional<std::string>> overrides;
    for (const auto& key : parenting::RunConfig::keys()) {
        auto& slot = overrides[key];
        std::string names = "--" + key;
        if (dashed(key) != key) names += ",--" + dashed(key);
        app.add_option_function<std::string>(names, [&slot](const std::string& v) { slot = v; },
                                             "Override '" + key + "'");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }
    if (quiet) spdlog::set_level(spdlog::level::warn);

    parenting::RunConfig cfg;
    if (!config_path.empty()) parenting::apply_config_file(cfg, config_path);
    for (const auto& [key, value] : overrides)
        if (value) cfg.set(key, *value);
    for (const auto& a : assignments) parenting::apply_config_text(cfg, a, "--set");
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    cfg.finalize();

    if (stage_name == "all") {
        parenting::run_all(cfg);
    } else {
        parenting::run_stage(parenting::parse_stage(stage_name), cfg);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const parenting::StageDependencyError& e) {
        std::fprintf(stderr, "stage dependency error (missing stage: %s): %s\n", e.missing_stage().c_str(), e.what());
        return kStageDependency;
    } catch (const parenting::ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kConfig;
    } catch (const parenting::InputError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return kInput;
    } catch (const parenting::IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const parenting::GenerationError& e) {
        std::fprintf(stderr, "generation error: %s\n", e.what());
        return kGeneration;
    } catch (const parenting::InternalError& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return kInternal;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return kUnexpected;
    }
}
