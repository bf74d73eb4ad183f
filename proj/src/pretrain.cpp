#include "parenting/pretrain.hpp"

#include <algorithm>
#include <numeric>

#include "parenting/errors.hpp"
#include "parenting/optim.hpp"
#include "parenting/rng.hpp"

namespace parenting {

PretrainResult pretrain(MicroTransformer& model, const std::vector<SupervisedSequence>& corpus,
                        const FactBase& facts, const PromptLayout& layout, const PretrainConfig& cfg,
                        std::uint64_t seed) {
    if (corpus.empty()) throw InputError("pretrain: empty corpus");
    if (cfg.max_epochs < 1) throw ConfigError("pretrain_epochs: must be positive");
    if (cfg.batch_size < 1) throw ConfigError("pretrain_batch: must be positive");
    if (!(cfg.learning_rate > 0.0)) throw ConfigError("pretrain_lr: must be positive");
    if (cfg.check_every < 1) throw ConfigError("pretrain_check_every: must be positive");

    const bool train_units = model.config().adapter_mode == AdapterMode::full;
    auto rng = make_rng(seed, kStreamPretrain);
    const AdamHyper hyper;
    std::vector<AdamSlot> unit_slots(model.units().size());
    std::vector<AdamSlot> other_slots(model.others().size());
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    PretrainResult result;
    long step = 0;
    FullGradient grads;
    std::vector<SupervisedSequence> batch;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(corpus[order[i]]);
            loss_sum += loss_and_full_grads(model, batch, grads);
            ++batches;
            ++step;
            if (train_units) {
                auto units = model.units();
                for (std::size_t u = 0; u < units.size(); ++u)
                    unit_slots[u].apply(units[u].values, grads.units[u], cfg.learning_rate, step, hyper);
            }
            auto others = model.others();
            for (std::size_t o = 0; o < others.size(); ++o)
                other_slots[o].apply(others[o].values, grads.others[o], cfg.learning_rate, step, hyper);
        }
        PretrainEpoch record{epoch, loss_sum / static_cast<double>(batches), -1.0};
        const bool last = epoch == cfg.max_epochs;
        if (epoch % cfg.check_every == 0 || last) {
            record.accuracy = closed_book_accuracy(facts, extract_parametric_knowledge(model, facts, layout));
            result.final_accuracy = record.accuracy;
        }
        result.history.push_back(record);
        if (record.accuracy >= cfg.target_accuracy) break;
    }
    if (!model.all_finite()) throw InternalError("pretrain: non-finite weights");
    return result;
}

}  // namespace parenting
