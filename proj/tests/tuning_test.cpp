#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "parenting/errors.hpp"
#include "parenting/tuning.hpp"

using namespace parenting;

namespace {

ModelConfig small_config(AdapterMode mode = AdapterMode::full) {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.model_dim = 16;
    cfg.num_heads = 2;
    cfg.vocab_size = 24;
    cfg.max_seq_len = 12;
    cfg.adapter_mode = mode;
    cfg.adapter_rank = 2;
    cfg.seed = 11;
    return cfg;
}

std::vector<SupervisedSequence> examples(int count, int salt) {
    std::vector<SupervisedSequence> out;
    for (int i = 0; i < count; ++i) {
        SupervisedSequence s;
        s.prompt.tokens = {2 + (i + salt) % 5, 7 + i % 3, 11 + salt % 2, 4};
        s.prompt.offset = i % 2;
        s.target = {13 + (i * 7 + salt) % 9, 1};
        out.push_back(s);
    }
    return out;
}

GradientMap random_map(const MicroTransformer& model, std::uint64_t seed) {
    GradientMap g = GradientMap::zeros_like(model);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t u = 0; u < g.size(); ++u)
        for (Eigen::Index i = 0; i < g[u].size(); ++i) g[u].data()[i] = n(rng);
    return g;
}

// Layer 1 attention units entangled, layer 1 FFN split between the two
// behaviors, layer 2 frozen.
SubspacePartition fixed_partition(const MicroTransformer& model) {
    SubspacePartition p;
    p.gamma = {0.6, 0.4};
    for (const auto& u : model.units()) {
        PartitionEntry e{u.id, 0.0, 0.0, Subspace::other};
        if (u.id.layer == 1) {
            if (u.id.kind <= UnitKind::Wo) e.subspace = Subspace::entangled;
            else if (u.id.kind == UnitKind::W1Gate) e.subspace = Subspace::adherence;
            else e.subspace = Subspace::robustness;
        }
        p.entries.push_back(e);
        switch (e.subspace) {
            case Subspace::entangled: p.entangled.insert(e.id); break;
            case Subspace::adherence: p.adherence.insert(e.id); break;
            case Subspace::robustness: p.robustness.insert(e.id); break;
            case Subspace::other: p.other.insert(e.id); break;
        }
    }
    return p;
}

std::string others_checksum_with_frozen(const MicroTransformer& model, const SubspacePartition& p) {
    return model.checksum_others() + model.checksum(p.other);
}

}  // namespace

TEST(TuneConfig, RangeChecksNameTheKey) {
    TuneConfig cfg;
    cfg.delta1 = 1.5;
    try {
        cfg.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("delta1"), std::string::npos);
    }
    cfg.delta1 = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = TuneConfig{};
    cfg.learning_rate = -1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = TuneConfig{};
    cfg.epochs = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SubspaceMix, Coefficients) {
    const GammaWeights half{0.5, 0.5};
    const Mix c = subspace_mix(Subspace::entangled, 0.5, half, {});
    EXPECT_EQ(c.adherence, 0.25);
    EXPECT_EQ(c.robustness, 0.25);
    EXPECT_EQ(c.extraction, 0.5);
    const Mix o = subspace_mix(Subspace::other, 0.5, half, {});
    EXPECT_EQ(o.adherence + o.robustness + o.extraction, 0.0);
    const Mix ax = subspace_mix(Subspace::adherence, 0.999, half, {});
    EXPECT_EQ(ax.adherence, 0.999);
    EXPECT_EQ(ax.robustness, 0.0);
    EXPECT_NEAR(ax.extraction, 0.001, 1e-15);
    Ablation no_extraction;
    no_extraction.no_extraction = true;
    const Mix ax_only = subspace_mix(Subspace::adherence, 0.5, half, no_extraction);
    EXPECT_EQ(ax_only.adherence, 1.0);
    EXPECT_EQ(ax_only.extraction, 0.0);
    const GammaWeights skew{0.7, 0.3};
    const Mix c_only = subspace_mix(Subspace::entangled, 0.4, skew, no_extraction);
    EXPECT_DOUBLE_EQ(c_only.adherence + c_only.robustness, 1.0);
}

TEST(CompositeGradient, SubspaceRouting) {
    const auto model = MicroTransformer::init(small_config());
    const auto p = fixed_partition(model);
    const auto ga = random_map(model, 1), gr = random_map(model, 2), gc = random_map(model, 3);
    const double d = 0.3;
    const auto g = composite_gradient(ga, gr, gc, p, d);
    const auto ids = g.ids();
    for (std::size_t u = 0; u < g.size(); ++u) {
        Matrix expected;
        switch (p.subspace_of(ids[u])) {
            case Subspace::entangled:
                expected = d * (0.6 * ga[u] + 0.4 * gr[u]) + (1 - d) * gc[u];
                break;
            case Subspace::adherence: expected = d * ga[u] + (1 - d) * gc[u]; break;
            case Subspace::robustness: expected = d * gr[u] + (1 - d) * gc[u]; break;
            case Subspace::other: expected = Matrix::Zero(ga[u].rows(), ga[u].cols()); break;
        }
        EXPECT_LT((g[u] - expected).cwiseAbs().maxCoeff(), 1e-14) << ids[u].to_string();
        if (p.subspace_of(ids[u]) == Subspace::other) EXPECT_TRUE(g[u].isZero(0.0));
    }
}

TEST(CompositeGradient, SignalIsolationOnZeroFixtures) {
    const auto model = MicroTransformer::init(small_config());
    const auto p = fixed_partition(model);
    const auto zero = GradientMap::zeros_like(model);
    const auto gr = random_map(model, 5), ga = random_map(model, 6);
    // Only the robustness loss carries signal: adherence units stay untouched.
    const auto only_r = composite_gradient(zero, gr, zero, p, 0.5);
    for (const auto& id : p.adherence) EXPECT_TRUE(only_r.at(id).isZero(0.0)) << id.to_string();
    for (const auto& id : p.robustness) EXPECT_FALSE(only_r.at(id).isZero(0.0));
    // Only the adherence loss carries signal: robustness units stay untouched.
    const auto only_a = composite_gradient(ga, zero, zero, p, 0.5);
    for (const auto& id : p.robustness) EXPECT_TRUE(only_a.at(id).isZero(0.0)) << id.to_string();
    for (const auto& id : p.adherence) EXPECT_FALSE(only_a.at(id).isZero(0.0));
    // With the behavior gradient zero the unit receives only the extraction share.
    const auto gc = random_map(model, 7);
    const auto only_c = composite_gradient(ga, zero, gc, p, 0.5);
    for (const auto& id : p.robustness) EXPECT_TRUE(only_c.at(id) == (0.5 * gc.at(id)).eval());
}

TEST(CompositeGradient, AblationSemantics) {
    const auto model = MicroTransformer::init(small_config());
    const auto p = fixed_partition(model);
    const auto ga = random_map(model, 1), gr = random_map(model, 2), gc = random_map(model, 3);
    Ablation nb;
    nb.no_boundary = true;
    const auto g = composite_gradient(ga, gr, gc, p, 0.5, nb);
    const auto ids = g.ids();
    for (std::size_t u = 0; u < g.size(); ++u) {
        if (p.subspace_of(ids[u]) == Subspace::other) {
            EXPECT_TRUE(g[u].isZero(0.0));
            continue;
        }
        const Matrix entangled = 0.5 * (0.6 * ga[u] + 0.4 * gr[u]) + 0.5 * gc[u];
        EXPECT_LT((g[u] - entangled).cwiseAbs().maxCoeff(), 1e-14);
    }
    Ablation ne;
    ne.no_extraction = true;
    const auto h = composite_gradient(ga, gr, GradientMap{}, p, 0.5, ne);
    for (const auto& id : p.adherence) EXPECT_TRUE(h.at(id) == ga.at(id));
    for (const auto& id : p.robustness) EXPECT_TRUE(h.at(id) == gr.at(id));
    EXPECT_THROW(composite_gradient(ga, gr, GradientMap{}, p, 0.5), InputError);
}

TEST(CompositeGradient, LinearInEachInput) {
    const auto model = MicroTransformer::init(small_config());
    const auto p = fixed_partition(model);
    const auto ga = random_map(model, 1), gr = random_map(model, 2), gc = random_map(model, 3);
    const auto ga2 = random_map(model, 4);
    GradientMap sum = ga;
    sum.add_scaled(ga2, 2.0);
    const auto lhs = composite_gradient(sum, gr, gc, p, 0.5);
    auto rhs = composite_gradient(ga, gr, gc, p, 0.5);
    const auto zero = GradientMap::zeros_like(model);
    rhs.add_scaled(composite_gradient(ga2, zero, zero, p, 0.5), 2.0);
    for (std::size_t u = 0; u < lhs.size(); ++u) EXPECT_LT((lhs[u] - rhs[u]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ComposeLosses, LinearForms) {
    const GammaWeights g{0.7, 0.3};
    const auto l = compose_losses(1.25, 2.5, 0.75, 0.4, g, {});
    EXPECT_NEAR(l.entangled_objective, 0.4 * (0.7 * 1.25 + 0.3 * 2.5) + 0.6 * 0.75, 1e-15);
    EXPECT_NEAR(l.adherence_objective, 0.4 * 1.25 + 0.6 * 0.75, 1e-15);
    EXPECT_NEAR(l.robustness_objective, 0.4 * 2.5 + 0.6 * 0.75, 1e-15);
    Ablation ne;
    ne.no_extraction = true;
    const auto m = compose_losses(1.25, 2.5, 0.0, 0.4, g, ne);
    EXPECT_NEAR(m.entangled_objective, 0.7 * 1.25 + 0.3 * 2.5, 1e-15);
    EXPECT_EQ(m.adherence_objective, 1.25);
    EXPECT_EQ(m.robustness_objective, 2.5);
}

TEST(TuningStep, FrozenUnitsAndEmbeddingsUnchanged) {
    auto model = MicroTransformer::init(small_config());
    const auto p = fixed_partition(model);
    const std::string frozen = others_checksum_with_frozen(model, p);
    const std::string trainable = model.checksum(p.trainable());
    const auto a = examples(6, 0), r = examples(6, 1), c = examples(6, 2);
    TuneConfig cfg;
    cfg.learning_rate = 0.1;
    UnitOptimizer opt(cfg.optimizer, cfg.learning_rate);
    tuning_step(model, {a, r, c}, p, cfg, opt);
    EXPECT_EQ(others_checksum_with_frozen(model, p), frozen);
    EXPECT_NE(model.checksum(p.trainable()), trainable);
    EXPECT_THROW(tuning_step(model, {a, {}, c}, p, cfg, opt), InputError);
}

TEST(TuningStep, MatchesManualCompositeUpdate) {
    auto model = MicroTransformer::init(small_config());
    auto manual = model;
    const auto p = fixed_partition(model);
    const auto a = examples(5, 0), r = examples(5, 1), c = examples(5, 2);
    TuneConfig cfg;
    cfg.learning_rate = 0.05;
    UnitOptimizer opt(cfg.optimizer, cfg.learning_rate);
    const StepRecord rec = tuning_step(model, {a, r, c}, p, cfg, opt);
    const auto la = loss_and_grads(manual, a), lr = loss_and_grads(manual, r), lc = loss_and_grads(manual, c);
    masked_update(manual, composite_gradient(la.grads, lr.grads, lc.grads, p, cfg.delta1), p.trainable(),
                  cfg.learning_rate);
    EXPECT_TRUE(model.bit_identical(manual));
    EXPECT_EQ(rec.losses.adherence, la.loss);
    EXPECT_EQ(rec.losses.robustness, lr.loss);
    EXPECT_EQ(rec.losses.extraction, lc.loss);
}

TEST(TuningStep, SequentialVariantRefreshesBetweenSubspaces) {
    auto seq = MicroTransformer::init(small_config());
    auto sim = seq;
    const auto p = fixed_partition(seq);
    const auto a = examples(5, 0), r = examples(5, 1), c = examples(5, 2);
    TuneConfig cfg;
    cfg.learning_rate = 0.2;
    cfg.sequential = true;
    UnitOptimizer opt1(cfg.optimizer, cfg.learning_rate);
    tuning_step(seq, {a, r, c}, p, cfg, opt1);
    cfg.sequential = false;
    UnitOptimizer opt2(cfg.optimizer, cfg.learning_rate);
    tuning_step(sim, {a, r, c}, p, cfg, opt2);
    // Entangled units move first, so they agree; later subspaces see refreshed weights.
    EXPECT_EQ(seq.checksum(p.entangled), sim.checksum(p.entangled));
    EXPECT_NE(seq.checksum(p.robustness), sim.checksum(p.robustness));
    EXPECT_EQ(seq.checksum(p.other), sim.checksum(p.other));
}

TEST(Train, DeterministicAndConsistentLosses) {
    const auto base = MicroTransformer::init(small_config());
    const auto p = fixed_partition(base);
    const auto a = examples(10, 0), r = examples(7, 1), c = examples(12, 2);
    TuneConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    auto m1 = base, m2 = base;
    long steps = 0;
    double worst = 0.0;
    const auto log = train(m1, {a, r, c}, p, cfg, [&](const StepRecord& rec) {
        ++steps;
        const auto expect = compose_losses(rec.losses.adherence, rec.losses.robustness, rec.losses.extraction,
                                           cfg.delta1, p.gamma, cfg.ablation);
        worst = std::max({worst, std::abs(rec.losses.entangled_objective - expect.entangled_objective),
                          std::abs(rec.losses.adherence_objective - expect.adherence_objective),
                          std::abs(rec.losses.robustness_objective - expect.robustness_objective)});
    });
    train(m2, {a, r, c}, p, cfg);
    EXPECT_TRUE(m1.bit_identical(m2));
    ASSERT_EQ(log.epochs.size(), 2u);
    EXPECT_EQ(log.epochs[0].steps, 3);  // ceil(12 / 4)
    EXPECT_EQ(steps, 6);
    EXPECT_LT(worst, 1e-12);
    EXPECT_EQ(log.epochs[0].mean_grad_norm[static_cast<int>(Subspace::other)], 0.0);
}

TEST(Train, ZeroLearningRateLeavesModel) {
    auto model = MicroTransformer::init(small_config());
    const auto before = model;
    const auto p = fixed_partition(model);
    const auto a = examples(4, 0), r = examples(4, 1), c = examples(4, 2);
    TuneConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 1;
    train(model, {a, r, c}, p, cfg);
    EXPECT_TRUE(model.bit_identical(before));
    cfg.optimizer = OptimizerKind::adam;
    train(model, {a, r, c}, p, cfg);
    EXPECT_TRUE(model.bit_identical(before));
}

TEST(Train, AdamRespectsMaskInLowRankMode) {
    auto model = MicroTransformer::init(small_config(AdapterMode::low_rank));
    const auto p = fixed_partition(model);
    const std::string frozen = others_checksum_with_frozen(model, p);
    const auto a = examples(6, 0), r = examples(6, 1), c = examples(6, 2);
    TuneConfig cfg;
    cfg.optimizer = OptimizerKind::adam;
    cfg.learning_rate = 0.01;
    cfg.epochs = 2;
    cfg.batch_size = 3;
    const std::string before = model.checksum(p.trainable());
    train(model, {a, r, c}, p, cfg);
    EXPECT_EQ(others_checksum_with_frozen(model, p), frozen);
    EXPECT_NE(model.checksum(p.trainable()), before);
}

TEST(Train, NoExtractionNeedsNoExtractionSet) {
    auto model = MicroTransformer::init(small_config());
    const auto p = fixed_partition(model);
    const auto a = examples(4, 0), r = examples(4, 1);
    TuneConfig cfg;
    cfg.epochs = 1;
    EXPECT_THROW(train(model, {a, r, {}}, p, cfg), InputError);
    cfg.ablation.no_extraction = true;
    EXPECT_NO_THROW(train(model, {a, r, {}}, p, cfg));
}
