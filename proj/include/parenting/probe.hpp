#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "parenting/model.hpp"

namespace parenting {

enum class Behavior : std::uint8_t { adherence, robustness };

std::string_view to_string(Behavior behavior);
Behavior parse_behavior(std::string_view text);

struct ActivationProfile {
    std::vector<double> layer_mean;     // p per layer
    std::vector<double> layer_weight;   // softmax of layer_mean over layers
};

/// Fraction of counted tokens on which each neuron fired.
std::vector<double> neuron_probabilities(const LayerActivation& layer);
double mean_probability(const LayerActivation& layer);
std::vector<double> softmax(std::span<const double> values);
ActivationProfile activation_profile(const ActivationRecord& record);

/// Throws InputError on an empty input set. The model is only read.
ActivationProfile activation_probabilities(const MicroTransformer& model, std::span<const TokenSequence> inputs);

inline double sensitivity(double weight, double grad) { return weight * grad < 0 ? -(weight * grad) : weight * grad; }

struct EmaState {
    double smoothed = 0.0;     // running sensitivity
    double uncertainty = 0.0;  // running deviation
    long step = 0;
};

/// One smoothing step; the deviation term uses the freshly smoothed value.
EmaState ema_update(const EmaState& state, double current, double alpha1, double alpha2);

inline double importance_score(double layer_weight, double smoothed, double uncertainty) {
    return layer_weight * smoothed * uncertainty;
}

struct ProbeConfig {
    double alpha1 = 0.85;
    double alpha2 = 0.85;
    int iterations = 100;
    int batch_size = 32;
    double learning_rate = 1e-3;  // only used with update_weights
    bool update_weights = false;
    bool no_layer_clue = false;
    std::uint64_t seed = 1;

    /// Throws ConfigError naming the offending key.
    void validate() const;
};

/// Per-parameter tensors aligned with the model's units.
struct ProbeResult {
    ActivationProfile profile;
    GradientMap smoothed;
    GradientMap uncertainty;
    GradientMap scores;  // per-parameter importance
};

/// Activation profile from `inputs`, then `iterations` mini-batches of
/// `examples` feeding the smoothed sensitivity and uncertainty estimates.
/// Weights change only when cfg.update_weights is set.
ProbeResult run_probe(MicroTransformer& model, std::span<const SupervisedSequence> examples,
                      std::span<const TokenSequence> inputs, const ProbeConfig& cfg, Behavior behavior);

struct UnitImportance {
    ParameterUnitId id;
    double value = 0.0;
};

struct ImportanceDistribution {
    Behavior behavior = Behavior::adherence;
    std::vector<UnitImportance> units;  // sorted by unit id

    double at(const ParameterUnitId& id) const;
    std::vector<double> values() const;
};

/// Mean per-parameter score of each unit. Throws InternalError when a unit is
/// missing or its score tensor has the wrong shape.
ImportanceDistribution aggregate_units(const MicroTransformer& model, const GradientMap& scores, Behavior behavior);

/// Line format: header, then "behavior<TAB>layer<TAB>kind<TAB>value" per unit.
void write_importance(const std::filesystem::path& path, const std::vector<ImportanceDistribution>& dists);
std::vector<ImportanceDistribution> read_importance(const std::filesystem::path& path);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double value);

}  // namespace parenting
