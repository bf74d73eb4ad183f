#pragma once

#include <cstdint>
#include <vector>

#include "parenting/model.hpp"
#include "parenting/synth.hpp"

namespace parenting {

struct PretrainConfig {
    int max_epochs = 300;
    int batch_size = 32;
    double learning_rate = 3e-3;
    double target_accuracy = 1.0;  // stop once closed-book accuracy reaches this
    int check_every = 5;           // epochs between accuracy checks
};

struct PretrainEpoch {
    int epoch = 0;
    double mean_loss = 0.0;
    double accuracy = -1.0;  // negative when not measured this epoch
};

struct PretrainResult {
    std::vector<PretrainEpoch> history;
    double final_accuracy = 0.0;
};

/// Adam over every trainable tensor. In low-rank mode the adapter factors are
/// left at their initial values so tuning starts from an identity adapter.
PretrainResult pretrain(MicroTransformer& model, const std::vector<SupervisedSequence>& corpus,
                        const FactBase& facts, const PromptLayout& layout, const PretrainConfig& cfg,
                        std::uint64_t seed);

}  // namespace parenting
