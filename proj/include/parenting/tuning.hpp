#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "parenting/model.hpp"
#include "parenting/optim.hpp"
#include "parenting/subspace.hpp"

namespace parenting {

struct Ablation {
    bool no_layer_clue = false;  // consumed by the probe
    bool no_boundary = false;
    bool no_extraction = false;

    bool operator==(const Ablation&) const = default;
};

struct TuneConfig {
    double delta1 = 0.5;
    double learning_rate = 0.03;
    int epochs = 3;
    int batch_size = 32;
    Ablation ablation;
    bool sequential = false;
    OptimizerKind optimizer = OptimizerKind::gd;
    std::uint64_t seed = 1;

    /// Throws ConfigError naming the offending key.
    void validate() const;
};

/// Weights of the three behavior gradients for one subspace.
struct Mix {
    double adherence = 0.0;
    double robustness = 0.0;
    double extraction = 0.0;
};

Mix subspace_mix(Subspace subspace, double delta1, const GammaWeights& gamma, const Ablation& ablation);

struct LossBreakdown {
    double adherence = 0.0;   // L_a
    double robustness = 0.0;  // L_r
    double extraction = 0.0;  // L_c
    double entangled_objective = 0.0;   // L_cx
    double adherence_objective = 0.0;   // L_ax
    double robustness_objective = 0.0;  // L_rx
};

/// Fills the three composite objectives from the raw losses.
LossBreakdown compose_losses(double loss_a, double loss_r, double loss_c, double delta1, const GammaWeights& gamma,
                             const Ablation& ablation);

/// Per-unit mixture of the behavior gradients; frozen units get zeros.
/// `grads_c` may be empty when the extraction weight is zero everywhere.
GradientMap composite_gradient(const GradientMap& grads_a, const GradientMap& grads_r, const GradientMap& grads_c,
                               const SubspacePartition& partition, double delta1, const Ablation& ablation = {});

struct StepRecord {
    long step = 0;
    LossBreakdown losses;
    double grad_norm[4] = {0.0, 0.0, 0.0, 0.0};  // indexed by Subspace
};

struct TuningBatches {
    std::span<const SupervisedSequence> adherence;
    std::span<const SupervisedSequence> robustness;
    std::span<const SupervisedSequence> extraction;
};

/// One synchronized update over the trainable subspaces (or three refreshed
/// sub-updates when cfg.sequential is set).
StepRecord tuning_step(MicroTransformer& model, const TuningBatches& batches, const SubspacePartition& partition,
                       const TuneConfig& cfg, UnitOptimizer& optimizer);

struct EpochRecord {
    int epoch = 0;
    int steps = 0;
    LossBreakdown mean_losses;
    double mean_grad_norm[4] = {0.0, 0.0, 0.0, 0.0};
};

struct TrainingLog {
    std::vector<EpochRecord> epochs;
};

struct TuningData {
    std::span<const SupervisedSequence> adherence;
    std::span<const SupervisedSequence> robustness;
    std::span<const SupervisedSequence> extraction;
};

using StepObserver = std::function<void(const StepRecord&)>;

/// Each epoch runs ceil(largest stream / batch) steps; every stream cycles
/// through its own seeded permutation.
TrainingLog train(MicroTransformer& model, const TuningData& data, const SubspacePartition& partition,
                  const TuneConfig& cfg, const StepObserver& observer = {});

void write_training_log(const std::filesystem::path& path, const TrainingLog& log);

}  // namespace parenting
