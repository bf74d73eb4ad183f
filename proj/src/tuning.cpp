#include "parenting/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "parenting/errors.hpp"
#include "parenting/rng.hpp"
#include "parenting/textio.hpp"

namespace parenting {

void TuneConfig::validate() const {
    if (!(delta1 > 0.0 && delta1 < 1.0)) throw ConfigError("delta1: must lie in (0, 1)");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning_rate: must be non-negative and finite");
    if (epochs < 1) throw ConfigError("epochs: must be positive");
    if (batch_size < 1) throw ConfigError("batch_size: must be positive");
}

Mix subspace_mix(Subspace subspace, double delta1, const GammaWeights& gamma, const Ablation& ablation) {
    if (subspace == Subspace::other) return {};
    if (ablation.no_boundary) subspace = Subspace::entangled;
    const double behavior_weight = ablation.no_extraction ? 1.0 : delta1;
    const double extraction_weight = ablation.no_extraction ? 0.0 : 1.0 - delta1;
    switch (subspace) {
        case Subspace::entangled:
            return {behavior_weight * gamma.adherence, behavior_weight * gamma.robustness, extraction_weight};
        case Subspace::adherence: return {behavior_weight, 0.0, extraction_weight};
        case Subspace::robustness: return {0.0, behavior_weight, extraction_weight};
        case Subspace::other: break;
    }
    return {};
}

LossBreakdown compose_losses(double loss_a, double loss_r, double loss_c, double delta1, const GammaWeights& gamma,
                             const Ablation& ablation) {
    LossBreakdown out;
    out.adherence = loss_a;
    out.robustness = loss_r;
    out.extraction = loss_c;
    auto apply = [&](Subspace s) {
        const Mix m = subspace_mix(s, delta1, gamma, Ablation{false, false, ablation.no_extraction});
        return m.adherence * loss_a + m.robustness * loss_r + m.extraction * loss_c;
    };
    out.entangled_objective = apply(Subspace::entangled);
    out.adherence_objective = apply(Subspace::adherence);
    out.robustness_objective = apply(Subspace::robustness);
    return out;
}

GradientMap composite_gradient(const GradientMap& grads_a, const GradientMap& grads_r, const GradientMap& grads_c,
                               const SubspacePartition& partition, double delta1, const Ablation& ablation) {
    grads_a.check_aligned(grads_r);
    const bool have_c = grads_c.size() > 0;
    if (have_c) grads_a.check_aligned(grads_c);
    GradientMap out(std::vector<ParameterUnitId>(grads_a.ids().begin(), grads_a.ids().end()),
                    std::vector<Matrix>(grads_a.size()));
    const auto ids = grads_a.ids();
    for (std::size_t u = 0; u < grads_a.size(); ++u) {
        const Mix m = subspace_mix(partition.subspace_of(ids[u]), delta1, partition.gamma, ablation);
        Matrix g = Matrix::Zero(grads_a[u].rows(), grads_a[u].cols());
        if (m.adherence != 0.0) g.noalias() += m.adherence * grads_a[u];
        if (m.robustness != 0.0) g.noalias() += m.robustness * grads_r[u];
        if (m.extraction != 0.0) {
            if (!have_c) throw InputError("composite gradient: extraction gradient required");
            g.noalias() += m.extraction * grads_c[u];
        }
        out[u] = std::move(g);
    }
    return out;
}

namespace {

struct BehaviorGrads {
    LossAndGrads adherence;
    LossAndGrads robustness;
    LossAndGrads extraction;
};

BehaviorGrads behavior_grads(const MicroTransformer& model, const TuningBatches& batches, bool need_extraction) {
    if (batches.adherence.empty() || batches.robustness.empty())
        throw InputError("tuning step: adherence and robustness batches are required");
    if (need_extraction && batches.extraction.empty())
        throw InputError("tuning step: extraction batch is required");
    BehaviorGrads g;
    g.adherence = loss_and_grads(model, batches.adherence);
    g.robustness = loss_and_grads(model, batches.robustness);
    if (need_extraction) g.extraction = loss_and_grads(model, batches.extraction);
    return g;
}

void record_norms(StepRecord& rec, const GradientMap& combined, const SubspacePartition& partition) {
    double sq[4] = {0.0, 0.0, 0.0, 0.0};
    const auto ids = combined.ids();
    for (std::size_t u = 0; u < combined.size(); ++u)
        sq[static_cast<int>(partition.subspace_of(ids[u]))] += combined[u].squaredNorm();
    for (int s = 0; s < 4; ++s) rec.grad_norm[s] = std::sqrt(sq[s]);
}

}  // namespace

StepRecord tuning_step(MicroTransformer& model, const TuningBatches& batches, const SubspacePartition& partition,
                       const TuneConfig& cfg, UnitOptimizer& optimizer) {
    const bool need_extraction = !cfg.ablation.no_extraction;
    StepRecord rec;
    BehaviorGrads g = behavior_grads(model, batches, need_extraction);
    rec.losses = compose_losses(g.adherence.loss, g.robustness.loss, g.extraction.loss, cfg.delta1, partition.gamma,
                                cfg.ablation);
    GradientMap combined =
        composite_gradient(g.adherence.grads, g.robustness.grads, g.extraction.grads, partition, cfg.delta1, cfg.ablation);
    if (!combined.all_finite()) throw InternalError("tuning step: non-finite gradient");
    record_norms(rec, combined, partition);

    if (!cfg.sequential) {
        optimizer.step(model, combined, partition.trainable());
        return rec;
    }
    const Subspace order[3] = {Subspace::entangled, Subspace::adherence, Subspace::robustness};
    for (int i = 0; i < 3; ++i) {
        if (i > 0) {
            g = behavior_grads(model, batches, need_extraction);
            combined = composite_gradient(g.adherence.grads, g.robustness.grads, g.extraction.grads, partition,
                                          cfg.delta1, cfg.ablation);
        }
        optimizer.step(model, combined, partition.members(order[i]));
    }
    return rec;
}

namespace {

/// Endless shuffled pass over one dataset.
class Stream {
public:
    Stream(std::span<const SupervisedSequence> data, std::mt19937_64& rng) : data_(data), rng_(rng) {
        order_.resize(data.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        cursor_ = order_.size();
    }

    void next(std::size_t count, std::vector<SupervisedSequence>& out) {
        out.clear();
        if (data_.empty()) return;
        while (out.size() < count && out.size() < data_.size()) {
            if (cursor_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                cursor_ = 0;
            }
            out.push_back(data_[order_[cursor_++]]);
        }
    }

private:
    std::span<const SupervisedSequence> data_;
    std::mt19937_64& rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace

TrainingLog train(MicroTransformer& model, const TuningData& data, const SubspacePartition& partition,
                  const TuneConfig& cfg, const StepObserver& observer) {
    cfg.validate();
    if (data.adherence.empty() || data.robustness.empty()) throw InputError("train: empty adherence or robustness set");
    if (!cfg.ablation.no_extraction && data.extraction.empty()) throw InputError("train: empty extraction set");
    auto rng = make_rng(cfg.seed, kStreamTune);
    Stream sa(data.adherence, rng);
    Stream sr(data.robustness, rng);
    Stream sc(data.extraction, rng);
    UnitOptimizer optimizer(cfg.optimizer, cfg.learning_rate);

    std::size_t largest = std::max(data.adherence.size(), data.robustness.size());
    if (!cfg.ablation.no_extraction) largest = std::max(largest, data.extraction.size());
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    const int steps_per_epoch = static_cast<int>((largest + batch - 1) / batch);

    TrainingLog log;
    long step = 0;
    std::vector<SupervisedSequence> ba, br, bc;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochRecord er;
        er.epoch = epoch;
        for (int s = 0; s < steps_per_epoch; ++s) {
            sa.next(batch, ba);
            sr.next(batch, br);
            if (!cfg.ablation.no_extraction) sc.next(batch, bc);
            StepRecord rec = tuning_step(model, {ba, br, bc}, partition, cfg, optimizer);
            rec.step = ++step;
            if (observer) observer(rec);
            er.mean_losses.adherence += rec.losses.adherence;
            er.mean_losses.robustness += rec.losses.robustness;
            er.mean_losses.extraction += rec.losses.extraction;
            er.mean_losses.entangled_objective += rec.losses.entangled_objective;
            er.mean_losses.adherence_objective += rec.losses.adherence_objective;
            er.mean_losses.robustness_objective += rec.losses.robustness_objective;
            for (int k = 0; k < 4; ++k) er.mean_grad_norm[k] += rec.grad_norm[k];
        }
        er.steps = steps_per_epoch;
        const double n = steps_per_epoch;
        er.mean_losses.adherence /= n;
        er.mean_losses.robustness /= n;
        er.mean_losses.extraction /= n;
        er.mean_losses.entangled_objective /= n;
        er.mean_losses.adherence_objective /= n;
        er.mean_losses.robustness_objective /= n;
        for (double& v : er.mean_grad_norm) v /= n;
        log.epochs.push_back(er);
    }
    if (!model.all_finite()) throw InternalError("train: non-finite weights after tuning");
    return log;
}

void write_training_log(const std::filesystem::path& path, const TrainingLog& log) {
    std::ostringstream out;
    out << "# parenting training log v1\n"
        << "epoch\tsteps\tloss_adherence\tloss_robustness\tloss_extraction\tobjective_entangled\t"
           "objective_adherence\tobjective_robustness\tgrad_norm_entangled\tgrad_norm_adherence\t"
           "grad_norm_robustness\tgrad_norm_other\n";
    for (const auto& e : log.epochs) {
        out << e.epoch << '\t' << e.steps << '\t' << format_double(e.mean_losses.adherence) << '\t'
            << format_double(e.mean_losses.robustness) << '\t' << format_double(e.mean_losses.extraction) << '\t'
            << format_double(e.mean_losses.entangled_objective) << '\t'
            << format_double(e.mean_losses.adherence_objective) << '\t'
            << format_double(e.mean_losses.robustness_objective);
        for (double v : e.mean_grad_norm) out << '\t' << format_double(v);
        out << '\n';
    }
    write_text_file(path, out.str());
}

}  // namespace parenting
