#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "parenting/evaluation.hpp"
#include "parenting/pretrain.hpp"
#include "parenting/probe.hpp"
#include "parenting/run_config.hpp"
#include "parenting/subspace.hpp"
#include "parenting/synth.hpp"
#include "parenting/tuning.hpp"

namespace parenting {

inline constexpr std::string_view kToolVersion = "parenting 1.0.0";
inline constexpr int kManifestVersion = 1;

enum class Stage { gen_data, pretrain, probe, localize, tune, eval, sweep, heatmap };

std::string_view to_string(Stage stage);
/// Throws ConfigError for unknown names.
Stage parse_stage(std::string_view name);
/// Stages whose artifacts `stage` reads.
const std::vector<Stage>& stage_requirements(Stage stage);
/// The stages `all` runs, in order. The ratio sweep is not part of it.
const std::vector<Stage>& full_pipeline();

struct StageRecord {
    int sequence = 0;  // logical completion order within the run directory
    std::map<std::string, std::string> inputs;   // relative path -> sha256
    std::map<std::string, std::string> outputs;  // relative path -> sha256
};

class RunManifest {
public:
    /// An absent file yields an empty manifest. Throws InputError when the file is malformed.
    static RunManifest load(const std::filesystem::path& run_dir);
    void save(const std::filesystem::path& run_dir) const;

    bool has(Stage stage) const { return stages_.contains(std::string(to_string(stage))); }
    const StageRecord& record(Stage stage) const;

    /// Throws StageDependencyError naming the first missing or stale predecessor.
    void require(Stage stage, const std::filesystem::path& run_dir) const;

    /// Checksums the listed files. A rerun with unchanged inputs and outputs
    /// keeps its sequence number.
    void complete(Stage stage, const std::filesystem::path& run_dir, const std::vector<std::string>& inputs,
                  const std::vector<std::string>& outputs);
    void set_config(std::vector<std::pair<std::string, std::string>> entries) { config_ = std::move(entries); }
    void clear() { stages_.clear(); }

    /// Every artifact recorded by any stage, relative path -> sha256.
    std::map<std::string, std::string> artifacts() const;
    std::string to_json() const;

private:
    std::vector<std::pair<std::string, std::string>> config_;
    std::map<std::string, StageRecord> stages_;
};

// In-memory building blocks shared by the stages and the experiments.

struct World {
    FactBase facts;
    PromptLayout layout;
    std::vector<SupervisedSequence> corpus;
    FactSplit split;
};

World generate_world(const RunConfig& cfg);

struct PretrainedState {
    MicroTransformer model;
    PretrainResult result;
    AlphaMap alpha;
    DatasetBundle bundle;
};

PretrainedState pretrain_world(const RunConfig& cfg, const World& world);

struct ProbeOutputs {
    ProbeResult adherence;
    ProbeResult robustness;
    std::vector<ImportanceDistribution> dists;  // adherence, robustness
};

/// Probes a copy of the model, so the caller's weights never change.
ProbeOutputs probe_units(const RunConfig& cfg, const MicroTransformer& model, const DatasetBundle& bundle,
                         const PromptLayout& layout);
SubspacePartition localize_units(const std::vector<ImportanceDistribution>& dists, double tau);

TrainingLog tune_model(const RunConfig& cfg, MicroTransformer& model, const DatasetBundle& bundle,
                       const SubspacePartition& partition, const PromptLayout& layout,
                       const StepObserver& observer = {});

struct SweepPools {
    std::vector<ProbeExample> adherence;
    std::vector<ProbeExample> robustness;
};

/// Training-fact pools large enough for every configured ratio. Their first
/// m_a / m_r examples coincide with the bundle's S_a / S_r.
SweepPools build_sweep_pools(const RunConfig& cfg, const FactBase& facts, const AlphaMap& alpha,
                             const FactSplit& split);

SweepTable run_sweep(const RunConfig& cfg, const MicroTransformer& pretrained, const DatasetBundle& bundle,
                     const SweepPools& pools, const SubspacePartition& partition, const PromptLayout& layout);

/// Runs one stage inside cfg.effective_output_dir() and updates the manifest.
void run_stage(Stage stage, const RunConfig& cfg);
/// Starts a fresh manifest and runs full_pipeline().
void run_all(const RunConfig& cfg);

// Artifact names relative to the run directory.
namespace artifact {
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kFacts = "facts.jsonl";
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kSplit = "split.jsonl";
inline constexpr const char* kPretrained = "model_pretrained.ckpt";
inline constexpr const char* kPretrainLog = "pretrain_log.tsv";
inline constexpr const char* kAlpha = "alpha.jsonl";
inline constexpr const char* kAdherenceSet = "data/s_a.jsonl";
inline constexpr const char* kRobustnessSet = "data/s_r.jsonl";
inline constexpr const char* kExtractionSet = "data/s_c.jsonl";
inline constexpr const char* kEvalConflicting = "data/eval_conflicting.jsonl";
inline constexpr const char* kEvalIrrelevant = "data/eval_irrelevant.jsonl";
inline constexpr const char* kRecognition = "data/recognition.jsonl";
inline constexpr const char* kImportance = "importance.tsv";
inline constexpr const char* kActivation = "activation_profile.tsv";
inline constexpr const char* kPartition = "partition.tsv";
inline constexpr const char* kTuned = "model_tuned.ckpt";
inline constexpr const char* kTrainingLog = "training_log.tsv";
inline constexpr const char* kEvalReport = "eval_report.tsv";
inline constexpr const char* kHeatmap = "heatmap_importance.tsv";
inline constexpr const char* kHeatmapSubspace = "heatmap_subspace.tsv";
inline constexpr const char* kSweep = "sweep.tsv";
inline constexpr const char* kSweepAdherence = "data/sweep_s_a.jsonl";
inline constexpr const char* kSweepRobustness = "data/sweep_s_r.jsonl";
}  // namespace artifact

}  // namespace parenting
