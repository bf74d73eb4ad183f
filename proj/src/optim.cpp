#include "parenting/optim.hpp"

#include <algorithm>
#include <cmath>

#include "parenting/errors.hpp"

namespace parenting {

std::string_view to_string(OptimizerKind kind) {
    return kind == OptimizerKind::adam ? "adam" : "gd";
}

OptimizerKind parse_optimizer_kind(std::string_view text) {
    if (text == "gd") return OptimizerKind::gd;
    if (text == "adam") return OptimizerKind::adam;
    throw ConfigError("optimizer: expected gd or adam, got " + std::string(text));
}

void AdamSlot::apply(Matrix& values, const Matrix& grad, double lr, long step, const AdamHyper& hyper) {
    if (first.size() == 0) {
        first = Matrix::Zero(grad.rows(), grad.cols());
        second = Matrix::Zero(grad.rows(), grad.cols());
    }
    first = hyper.beta1 * first + (1.0 - hyper.beta1) * grad;
    second = hyper.beta2 * second + (1.0 - hyper.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
    values.array() -= lr * (first.array() / c1) / ((second.array() / c2).sqrt() + hyper.eps);
}

UnitOptimizer::UnitOptimizer(OptimizerKind kind, double learning_rate, AdamHyper hyper)
    : kind_(kind), lr_(learning_rate), hyper_(hyper) {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning_rate: must be non-negative and finite");
}

void UnitOptimizer::step(MicroTransformer& model, const GradientMap& grads, const UnitSet& mask) {
    if (kind_ == OptimizerKind::gd) {
        masked_update(model, grads, mask, lr_);
        return;
    }
    ++steps_;
    for (const auto& id : mask) {
        auto& unit = model.unit(id);
        const Matrix& g = grads.at(id);
        if (g.rows() != unit.rows() || g.cols() != unit.cols())
            throw InternalError("optimizer: shape mismatch at " + id.to_string());
        auto it = std::lower_bound(slot_ids_.begin(), slot_ids_.end(), id);
        const auto pos = static_cast<std::size_t>(it - slot_ids_.begin());
        if (it == slot_ids_.end() || !(*it == id)) {
            slot_ids_.insert(it, id);
            slots_.insert(slots_.begin() + static_cast<std::ptrdiff_t>(pos), AdamSlot{});
        }
        slots_[pos].apply(unit.values, g, lr_, steps_, hyper_);
    }
}

}  // namespace parenting
