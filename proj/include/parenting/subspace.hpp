#pragma once

#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "parenting/model.hpp"
#include "parenting/probe.hpp"

namespace parenting {

/// Population z-scores; all zero when every value is equal. Throws InputError
/// for fewer than two values.
std::vector<double> zscores(std::span<const double> values);

struct ZScores {
    Behavior behavior = Behavior::adherence;
    std::vector<UnitImportance> units;  // z value per unit, sorted by id
    double mean = 0.0;
    double stddev = 0.0;
};

ZScores zscores(const ImportanceDistribution& dist);

enum class Subspace : std::uint8_t { entangled, adherence, robustness, other };

std::string_view to_string(Subspace subspace);
Subspace parse_subspace(std::string_view text);

struct GammaWeights {
    double adherence = 0.5;
    double robustness = 0.5;
};

/// Two-way softmax of the mean z-scores over the entangled set.
GammaWeights gamma_weights(double mean_z_adherence, double mean_z_robustness);

struct PartitionEntry {
    ParameterUnitId id;
    double z_adherence = 0.0;
    double z_robustness = 0.0;
    Subspace subspace = Subspace::other;
};

struct SubspacePartition {
    double tau = 1.0;
    GammaWeights gamma;
    std::vector<PartitionEntry> entries;  // sorted by id
    UnitSet entangled;
    UnitSet adherence;
    UnitSet robustness;
    UnitSet other;

    Subspace subspace_of(const ParameterUnitId& id) const;
    /// Every unit outside the frozen set.
    UnitSet trainable() const;
    const UnitSet& members(Subspace subspace) const;
};

/// Strictly above tau counts as important; the complement takes the rest.
/// An empty entangled set falls back to equal gamma weights with a warning.
SubspacePartition localize(const ZScores& adherence, const ZScores& robustness, double tau);

/// Header lines carry tau and gamma; then "unit<TAB>z_a<TAB>z_r<TAB>subspace".
void write_partition(const std::filesystem::path& path, const SubspacePartition& partition);
SubspacePartition read_partition(const std::filesystem::path& path);

}  // namespace parenting
