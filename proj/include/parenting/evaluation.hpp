#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "parenting/model.hpp"
#include "parenting/probe.hpp"
#include "parenting/subspace.hpp"
#include "parenting/synth.hpp"
#include "parenting/tuning.hpp"

namespace parenting {

struct RateCount {
    std::size_t hits = 0;
    std::size_t total = 0;

    double rate() const { return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total); }
};

struct RobustnessCount {
    RateCount strict;  // decode equals alpha, optionally after the no-clue marker
    RateCount loose;   // decode repeats no value token found in the context
};

/// Greedy answers with the end marker stripped.
std::vector<std::vector<int>> decode_answers(const MicroTransformer& model, const std::vector<TokenSequence>& prompts,
                                             const PromptLayout& layout);

/// Throws InputError on an empty set.
RateCount eval_adherence(const MicroTransformer& model, const std::vector<ProbeExample>& set,
                         const PromptLayout& layout);
RobustnessCount eval_robustness(const MicroTransformer& model, const std::vector<ProbeExample>& set,
                                const PromptLayout& layout);

bool is_robust_answer(const std::vector<int>& decoded, const std::vector<int>& alpha);

/// Scoring of already decoded answers, aligned with the example set.
RateCount score_adherence(const std::vector<std::vector<int>>& decoded, const std::vector<ProbeExample>& set);
RobustnessCount score_robustness(const std::vector<std::vector<int>>& decoded, const std::vector<ProbeExample>& set);
/// `predicted_labels` holds the first document label chosen per item.
RateCount score_recognition(const std::vector<int>& predicted_labels, const std::vector<ProbeExample>& set);
RateCount score_memorization(const std::vector<std::vector<int>>& decoded, const std::vector<ProbeExample>& set);

/// The first document label predicted for a single-document extraction prompt
/// decides: a relevant label means evidence, any other label means noise.
RateCount noise_recognition(const MicroTransformer& model, const std::vector<ProbeExample>& set,
                            const PromptLayout& layout);

/// Closed-book answers compared against the substituted training answers.
RateCount memorization_rate(const MicroTransformer& model, const std::vector<ProbeExample>& adherence_set,
                            const PromptLayout& layout);

struct EvalReport {
    RateCount adherence;
    RobustnessCount robustness;
    RateCount noise;
    RateCount memorization;
};

EvalReport evaluate(const MicroTransformer& model, const DatasetBundle& bundle, const PromptLayout& layout);

/// Tab-separated: header line, then one row per named report.
void write_eval_reports(const std::filesystem::path& path, const std::vector<std::pair<std::string, EvalReport>>& rows);

struct SweepRow {
    double ratio = 1.0;
    std::string method;
    std::size_t adherence_examples = 0;
    std::size_t robustness_examples = 0;
    double r_ad = 0.0;
    double r_ro = 0.0;
};

struct SweepTable {
    std::vector<SweepRow> rows;  // grouped by method, ratios increasing

    std::vector<SweepRow> method_rows(const std::string& method) const;
};

struct SweepSubsetSizes {
    std::size_t adherence = 0;
    std::size_t robustness = 0;
};

/// Equal halves at ratio 1; the larger side grows by the ratio while the other
/// stays at half of `base_size`. Throws ConfigError when a side exceeds its pool.
SweepSubsetSizes sweep_subset_sizes(double ratio, std::size_t base_size, std::size_t adherence_pool,
                                    std::size_t robustness_pool);

struct SweepMethod {
    std::string name;
    Ablation ablation;
};

struct SweepInputs {
    const MicroTransformer* pretrained = nullptr;
    std::string pretrained_checksum;
    const std::vector<ProbeExample>* adherence_pool = nullptr;
    const std::vector<ProbeExample>* robustness_pool = nullptr;
    const std::vector<ProbeExample>* extraction_set = nullptr;
    const DatasetBundle* bundle = nullptr;  // evaluation sets
    std::size_t base_size = 0;              // |S_a| of the main run
    PromptLayout layout;
};

/// Trains a fresh copy of the pretrained model per (method, ratio) cell.
/// Throws InternalError if a copy does not match the recorded checksum.
SweepTable ratio_sweep(const SweepInputs& inputs, const SubspacePartition& partition, const TuneConfig& cfg,
                       const std::vector<double>& ratios, const std::vector<SweepMethod>& methods);

void write_sweep_table(const std::filesystem::path& path, const SweepTable& table);

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Rows are layers and columns unit kinds, one block per behavior; the
/// companion file lists each cell's subspace in the same layout.
void export_heatmap(const std::filesystem::path& values_path, const std::filesystem::path& subspace_path,
                    const std::vector<ImportanceDistribution>& dists, const SubspacePartition& partition);

}  // namespace parenting
