#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "parenting/model.hpp"

namespace parenting {

enum class OptimizerKind : std::uint8_t { gd, adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view text);

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Element-wise Adam moments for one matrix.
struct AdamSlot {
    Matrix first;
    Matrix second;

    /// values -= lr * mhat / (sqrt(vhat) + eps); `step` is 1-based.
    void apply(Matrix& values, const Matrix& grad, double lr, long step, const AdamHyper& hyper);
};

/// Update rule restricted to a unit mask. Plain gradient descent delegates to
/// masked_update; Adam keeps moments only for units that were ever updated.
class UnitOptimizer {
public:
    UnitOptimizer(OptimizerKind kind, double learning_rate, AdamHyper hyper = {});

    void step(MicroTransformer& model, const GradientMap& grads, const UnitSet& mask);

    OptimizerKind kind() const noexcept { return kind_; }
    double learning_rate() const noexcept { return lr_; }

private:
    OptimizerKind kind_;
    double lr_;
    AdamHyper hyper_;
    long steps_ = 0;
    std::vector<ParameterUnitId> slot_ids_;
    std::vector<AdamSlot> slots_;
};

}  // namespace parenting
