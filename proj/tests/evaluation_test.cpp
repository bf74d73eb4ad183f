#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "parenting/errors.hpp"
#include "parenting/evaluation.hpp"
#include "parenting/textio.hpp"

using namespace parenting;

namespace {

struct World {
    FactBase facts;
    AlphaMap alpha;
    DatasetBundle bundle;
};

World make_world() {
    World w;
    w.facts = generate_fact_base(FactSpec{}, 5, 128);
    for (std::size_t i = 0; i < w.facts.facts.size(); ++i) w.alpha.push_back({w.facts.facts[i].value});
    DatasetSizes sizes;
    sizes.m_a = 60;
    sizes.m_r = 60;
    sizes.m_c = 40;
    sizes.eval_items = 40;
    w.bundle = build_bundle(w.facts, w.alpha, sizes, 5);
    return w;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.model_dim = 16;
    cfg.num_heads = 2;
    cfg.seed = 3;
    return cfg;
}

std::vector<std::vector<int>> evidence_echo(const std::vector<ProbeExample>& set) {
    std::vector<std::vector<int>> out;
    for (const auto& ex : set)
        for (const auto& doc : ex.context)
            if (doc.kind == DocKind::evidence) out.push_back({doc.tokens.back()});
    return out;
}

}  // namespace

TEST(Scoring, AdherenceRatio) {
    const auto w = make_world();
    std::vector<ProbeExample> ten(w.bundle.eval_conflicting.begin(), w.bundle.eval_conflicting.begin() + 10);
    std::vector<std::vector<int>> decoded;
    for (std::size_t i = 0; i < ten.size(); ++i) decoded.push_back(i < 7 ? ten[i].answer : ten[i].parametric);
    const auto rc = score_adherence(decoded, ten);
    EXPECT_EQ(rc.hits, 7u);
    EXPECT_EQ(rc.total, 10u);
    EXPECT_DOUBLE_EQ(rc.rate(), 0.7);
}

TEST(Scoring, EvidenceEchoOracleIsPerfect) {
    const auto w = make_world();
    const auto& set = w.bundle.eval_conflicting;
    const auto decoded = evidence_echo(set);
    ASSERT_EQ(decoded.size(), set.size());
    EXPECT_EQ(score_adherence(decoded, set).rate(), 1.0);
}

TEST(Scoring, RobustnessDefinitions) {
    EXPECT_TRUE(is_robust_answer({Vocabulary::kNoClue, 40}, {40}));
    EXPECT_TRUE(is_robust_answer({40}, {40}));
    EXPECT_FALSE(is_robust_answer({Vocabulary::kNoClue}, {40}));
    EXPECT_FALSE(is_robust_answer({Vocabulary::kNoClue, 41}, {40}));
    EXPECT_FALSE(is_robust_answer({Vocabulary::kNoClue, 40, 40}, {40}));

    const auto w = make_world();
    const auto& set = w.bundle.eval_irrelevant;
    std::vector<std::vector<int>> alpha_oracle, marked, leaking;
    for (const auto& ex : set) {
        alpha_oracle.push_back(ex.parametric);
        std::vector<int> m{Vocabulary::kNoClue};
        m.insert(m.end(), ex.parametric.begin(), ex.parametric.end());
        marked.push_back(m);
        leaking.push_back({ex.context.front().tokens.back()});
    }
    EXPECT_EQ(score_robustness(alpha_oracle, set).strict.rate(), 1.0);
    EXPECT_EQ(score_robustness(marked, set).strict.rate(), 1.0);
    EXPECT_EQ(score_robustness(marked, set).loose.rate(), 1.0);
    const auto leak = score_robustness(leaking, set);
    EXPECT_EQ(leak.strict.hits, 0u);
    EXPECT_EQ(leak.loose.hits, 0u);
    EXPECT_EQ(leak.strict.total, set.size());
}

TEST(Scoring, RecognitionFixtures) {
    const auto w = make_world();
    const auto& set = w.bundle.recognition;
    std::vector<int> perfect, constant;
    std::size_t evidence = 0;
    for (const auto& ex : set) {
        perfect.push_back(ex.relevance == 1 ? Vocabulary::kRelevant : Vocabulary::kSameTopic);
        constant.push_back(Vocabulary::kRelevant);
        evidence += ex.relevance == 1 ? 1 : 0;
    }
    EXPECT_EQ(evidence * 2, set.size());
    EXPECT_EQ(score_recognition(perfect, set).rate(), 1.0);
    EXPECT_EQ(score_recognition(constant, set).rate(), 0.5);
    std::vector<int> off(set.size(), Vocabulary::kOffTopic);
    EXPECT_EQ(score_recognition(off, set).rate(), 0.5);
}

TEST(Scoring, MemorizationExtremes) {
    const auto w = make_world();
    const auto& set = w.bundle.s_a;
    std::vector<std::vector<int>> alpha_everywhere, substitute_everywhere;
    for (const auto& ex : set) {
        alpha_everywhere.push_back(ex.parametric);
        substitute_everywhere.push_back(ex.answer);
    }
    EXPECT_EQ(score_memorization(alpha_everywhere, set).rate(), 0.0);
    EXPECT_EQ(score_memorization(substitute_everywhere, set).rate(), 1.0);
}

TEST(Scoring, MisalignedInputsRejected) {
    const auto w = make_world();
    std::vector<std::vector<int>> short_list(3);
    EXPECT_THROW(score_adherence(short_list, w.bundle.eval_conflicting), InputError);
}

TEST(Evaluate, ReadOnlyAndRatesInRange) {
    const auto w = make_world();
    const auto cfg = tiny_config();
    const auto model = MicroTransformer::init(cfg);
    const auto layout = PromptLayout::for_model(cfg, 4);
    const auto before = model.checksum();
    const auto r = evaluate(model, w.bundle, layout);
    EXPECT_EQ(model.checksum(), before);
    for (const RateCount* rc : {&r.adherence, &r.robustness.strict, &r.robustness.loose, &r.noise, &r.memorization}) {
        EXPECT_GT(rc->total, 0u);
        EXPECT_LE(rc->hits, rc->total);
        EXPECT_GE(rc->rate(), 0.0);
        EXPECT_LE(rc->rate(), 1.0);
    }
    EXPECT_EQ(r.adherence.total, w.bundle.eval_conflicting.size());
    EXPECT_EQ(r.robustness.strict.total, w.bundle.eval_irrelevant.size());
    EXPECT_THROW(eval_adherence(model, {}, layout), InputError);
    EXPECT_THROW(eval_robustness(model, {}, layout), InputError);
}

TEST(Evaluate, ReportFileHasOneRowPerModel) {
    EvalReport a;
    a.adherence = {3, 4};
    a.robustness.strict = {1, 4};
    a.robustness.loose = {2, 4};
    a.noise = {5, 10};
    a.memorization = {0, 8};
    const auto path = std::filesystem::temp_directory_path() / "parenting_eval.tsv";
    write_eval_reports(path, {{"untuned", a}, {"tuned", a}});
    const auto lines = read_lines(path);
    ASSERT_EQ(lines.size(), 3u);
    const auto fields = split_fields(lines[1], '\t');
    EXPECT_EQ(fields[0], "untuned");
    EXPECT_EQ(fields[1], "0.75");
    EXPECT_EQ(fields[2], "0.25");
    EXPECT_EQ(fields[3], "0.5");
}

TEST(Sweep, SubsetSizesFollowTheRatioRule) {
    auto s = sweep_subset_sizes(1.0, 2000, 5000, 5000);
    EXPECT_EQ(s.adherence, 1000u);
    EXPECT_EQ(s.robustness, 1000u);
    s = sweep_subset_sizes(3.0, 2000, 5000, 5000);
    EXPECT_EQ(s.adherence, 3000u);
    EXPECT_EQ(s.robustness, 1000u);
    s = sweep_subset_sizes(1.0 / 5.0, 2000, 5000, 5000);
    EXPECT_EQ(s.adherence, 1000u);
    EXPECT_EQ(s.robustness, 5000u);
    EXPECT_THROW(sweep_subset_sizes(3.0, 2000, 2000, 5000), ConfigError);
    EXPECT_THROW(sweep_subset_sizes(1.0 / 3.0, 2000, 5000, 2000), ConfigError);
    EXPECT_THROW(sweep_subset_sizes(0.0, 2000, 5000, 5000), ConfigError);
}

TEST(Sweep, RatiosMustIncludeOneAndIncrease) {
    const auto w = make_world();
    const auto cfg = tiny_config();
    const auto model = MicroTransformer::init(cfg);
    SweepInputs in;
    in.pretrained = &model;
    in.pretrained_checksum = model.checksum();
    in.adherence_pool = &w.bundle.s_a;
    in.robustness_pool = &w.bundle.s_r;
    in.extraction_set = &w.bundle.s_c;
    in.bundle = &w.bundle;
    in.base_size = 20;
    in.layout = PromptLayout::for_model(cfg, 4);
    SubspacePartition p;
    const std::vector<SweepMethod> methods{{"parenting", {}}};
    EXPECT_THROW(ratio_sweep(in, p, TuneConfig{}, {0.5, 2.0}, methods), ConfigError);
    EXPECT_THROW(ratio_sweep(in, p, TuneConfig{}, {2.0, 1.0}, methods), ConfigError);
    in.pretrained_checksum = "mismatch";
    EXPECT_THROW(ratio_sweep(in, p, TuneConfig{}, {1.0}, methods), InternalError);
}

TEST(Sweep, SpearmanHandValues) {
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4, 5}, {2, 4, 6, 8, 10}), 1.0);
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4, 5}, {9, 7, 5, 3, 1}), -1.0);
    // ranks y = (1, 3, 2): 1 - 6*2/(3*8)
    EXPECT_NEAR(spearman({1, 2, 3}, {1, 3, 2}), 0.5, 1e-15);
    // tie ranks y = (1.5, 1.5, 3): Pearson on ranks
    EXPECT_NEAR(spearman({1, 2, 3}, {4, 4, 9}), std::sqrt(3.0) / 2.0, 1e-15);
    EXPECT_EQ(spearman({1, 2, 3}, {7, 7, 7}), 0.0);
    EXPECT_THROW(spearman({1}, {1}), InputError);
}

TEST(Heatmap, ShapeLosslessAndIdempotent) {
    const auto model = MicroTransformer::init(tiny_config());
    std::vector<ImportanceDistribution> dists;
    for (Behavior b : {Behavior::adherence, Behavior::robustness}) {
        ImportanceDistribution d;
        d.behavior = b;
        double v = b == Behavior::adherence ? 0.1 : 7.0;
        for (const auto& u : model.units()) {
            d.units.push_back({u.id, v});
            v = v * 1.37 + 1.0 / 3.0;
        }
        dists.push_back(d);
    }
    SubspacePartition p;
    p.tau = 1.0;
    for (const auto& u : model.units()) {
        const Subspace s = u.id.layer == 1 ? Subspace::entangled : Subspace::other;
        p.entries.push_back({u.id, 0.0, 0.0, s});
        (s == Subspace::entangled ? p.entangled : p.other).insert(u.id);
    }
    const auto dir = std::filesystem::temp_directory_path();
    const auto values = dir / "parenting_heat.tsv", subspaces = dir / "parenting_heat_subspace.tsv";
    export_heatmap(values, subspaces, dists, p);

    const auto lines = read_lines(values);
    ASSERT_EQ(lines.size(), 2u * (1 + 1 + 2));
    std::size_t line = 0;
    for (const auto& d : dists) {
        EXPECT_EQ(lines[line++], "# behavior=" + std::string(to_string(d.behavior)));
        const auto header = split_fields(lines[line++], '\t');
        ASSERT_EQ(header.size(), 1u + kBlockMatrices);
        EXPECT_EQ(header[0], "layer");
        for (int layer = 1; layer <= 2; ++layer) {
            const auto cells = split_fields(lines[line++], '\t');
            ASSERT_EQ(cells.size(), 1u + kBlockMatrices);
            EXPECT_EQ(parse_int(cells[0]), layer);
            for (int c = 1; c <= kBlockMatrices; ++c)
                EXPECT_EQ(parse_double(cells[c]), d.at(ParameterUnitId::from_label(layer, header[c])));
        }
    }
    const auto grid = read_lines(subspaces);
    ASSERT_EQ(grid.size(), 4u);
    EXPECT_EQ(grid[0], "# tau=1");
    EXPECT_EQ(split_fields(grid[2], '\t')[1], "entangled");
    EXPECT_EQ(split_fields(grid[3], '\t')[1], "other");

    const auto first = read_text_file(values), first_grid = read_text_file(subspaces);
    export_heatmap(values, subspaces, dists, p);
    EXPECT_EQ(read_text_file(values), first);
    EXPECT_EQ(read_text_file(subspaces), first_grid);
}
