#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "parenting/pipeline.hpp"

using namespace parenting;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int number, bool pass, const std::string& title, const std::string& detail) {
    std::printf("%s criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", number, title.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* pattern, double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, value);
    return buf;
}

std::vector<SupervisedSequence> random_batch(const ModelConfig& cfg, int count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> token(0, cfg.vocab_size - 1);
    std::uniform_int_distribution<int> prompt_len(4, 12);
    std::vector<SupervisedSequence> batch;
    for (int i = 0; i < count; ++i) {
        SupervisedSequence s;
        const int len = prompt_len(rng);
        for (int t = 0; t < len; ++t) s.prompt.tokens.push_back(token(rng));
        s.prompt.offset = i;
        s.target = {token(rng), token(rng), Vocabulary::kEos};
        batch.push_back(s);
    }
    return batch;
}

void gradient_correctness() {
    const auto start = Clock::now();
    ModelConfig cfg;
    cfg.seed = 17;
    auto model = MicroTransformer::init(cfg);
    const auto batch = random_batch(cfg, 4, 23);
    FullGradient full;
    (void)loss_and_full_grads(model, batch, full);

    std::vector<std::pair<Matrix*, const Matrix*>> tensors;
    for (std::size_t i = 0; i < model.units().size(); ++i) tensors.emplace_back(&model.units()[i].values, &full.units[i]);
    for (std::size_t i = 0; i < model.others().size(); ++i)
        tensors.emplace_back(&model.others()[i].values, &full.others[i]);

    constexpr double step = 1e-4;
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<std::size_t> pick_tensor(0, tensors.size() - 1);
    int checked = 0, attempts = 0;
    double worst = 0.0;
    while (checked < 120 && attempts < 5000) {
        ++attempts;
        auto [values, grad] = tensors[pick_tensor(rng)];
        std::uniform_int_distribution<Eigen::Index> pick(0, values->size() - 1);
        const Eigen::Index idx = pick(rng);
        const double w0 = values->data()[idx];
        values->data()[idx] = w0 + step;
        const double up = loss_only(model, batch);
        values->data()[idx] = w0 - step;
        const double down = loss_only(model, batch);
        values->data()[idx] = w0;
        const double numeric = (up - down) / (2 * step);
        const double analytic = grad->data()[idx];
        if (std::abs(analytic) < 1e-7 && std::abs(numeric) < 1e-7) continue;
        worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)));
        ++checked;
    }
    const double elapsed = seconds_since(start);
    report(1, checked >= 100 && worst < 1e-4 && elapsed < 60.0, "analytic gradients match central differences",
           std::to_string(checked) + " parameters, max relative error " + fmt("%.3g", worst) + ", " +
               fmt("%.1f s", elapsed));
}

void activation_profile_soundness(const std::vector<ActivationProfile>& profiles) {
    Matrix pre(2, 4);
    pre << 1, -1, 2, 0, 3, -2, -1, 1;
    LayerActivation layer;
    layer.positive_counts.assign(4, 0);
    tally_positive(pre, layer);
    const auto p = neuron_probabilities(layer);
    const bool fixture = p == std::vector<double>{1.0, 0.0, 0.5, 0.5} && mean_probability(layer) == 0.5;
    double worst = 0.0;
    for (const auto& profile : profiles) {
        const double total = std::accumulate(profile.layer_weight.begin(), profile.layer_weight.end(), 0.0);
        worst = std::max(worst, std::abs(total - 1.0));
    }
    report(2, fixture && worst <= 1e-9 && !profiles.empty(), "activation probabilities and layer weights",
           std::string("fixture ") + (fixture ? "exact" : "mismatch") + ", " + std::to_string(profiles.size()) +
               " profiles, max |sum - 1| = " + fmt("%.3g", worst));
}

void ema_closed_form() {
    constexpr double c = 0.37;
    EmaState state;
    double worst = 0.0;
    for (int t = 1; t <= 10; ++t) {
        state = ema_update(state, c, 0.85, 0.85);
        worst = std::max(worst, std::abs(state.smoothed - c * (1.0 - std::pow(0.85, t))));
    }
    report(3, worst < 1e-12, "smoothed sensitivity follows the geometric closed form",
           "max deviation " + fmt("%.3g", worst));
}

ImportanceDistribution random_distribution(const std::vector<ParameterUnitId>& ids, Behavior behavior,
                                           std::mt19937_64& rng) {
    std::lognormal_distribution<double> value(0.0, 1.5);
    ImportanceDistribution d;
    d.behavior = behavior;
    for (const auto& id : ids) d.units.push_back({id, value(rng)});
    return d;
}

ImportanceDistribution affine(ImportanceDistribution d, double scale, double shift) {
    for (auto& u : d.units) u.value = scale * u.value + shift;
    return d;
}

void zscore_and_partition() {
    const double raw[] = {1.0, 2.0, 3.0};
    const auto z = zscores(raw);
    const bool hand = std::abs(z[0] + 1.22474) <= 1e-5 && std::abs(z[1]) <= 1e-5 && std::abs(z[2] - 1.22474) <= 1e-5;

    const auto ids = MicroTransformer::init(ModelConfig{}).unit_ids();
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> scale(0.01, 100.0), shift(-50.0, 50.0);
    const auto level = spdlog::get_level();
    spdlog::set_level(spdlog::level::err);
    int sound = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto a = random_distribution(ids, Behavior::adherence, rng);
        const auto r = random_distribution(ids, Behavior::robustness, rng);
        const auto part = localize(zscores(a), zscores(r), 1.0);
        UnitSet seen;
        std::size_t total = 0;
        for (const UnitSet* set : {&part.entangled, &part.adherence, &part.robustness, &part.other}) {
            total += set->size();
            seen.insert(set->begin(), set->end());
        }
        const bool complete = total == ids.size() && seen.size() == ids.size();
        const double c = scale(rng), b = shift(rng);
        const auto moved = localize(zscores(affine(a, c, b)), zscores(affine(r, c, b)), 1.0);
        const bool invariant = moved.entangled == part.entangled && moved.adherence == part.adherence &&
                               moved.robustness == part.robustness && moved.other == part.other;
        if (complete && invariant) ++sound;
    }
    spdlog::set_level(level);
    report(4, hand && sound == 1000, "z-scores and partition soundness",
           std::string("hand values ") + (hand ? "match" : "differ") + ", " + std::to_string(sound) +
               "/1000 random maps disjoint, complete and affine invariant");
}

void gamma_weights_check() {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> mean(-3.0, 3.0);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto g = gamma_weights(mean(rng), mean(rng));
        worst = std::max(worst, std::abs(g.adherence + g.robustness - 1.0));
    }
    const auto sym = gamma_weights(1.7, 1.7);
    const auto gap = gamma_weights(2.0, 1.0);
    const bool ok = worst <= 1e-12 && sym.adherence == 0.5 && sym.robustness == 0.5 &&
                    std::abs(gap.adherence - 0.73106) <= 1e-5;
    report(5, ok, "gamma weights", "max |sum - 1| = " + fmt("%.3g", worst) + ", symmetric " +
                                       fmt("%.17g", sym.adherence) + ", gap of one " + fmt("%.6f", gap.adherence));
}

struct SeedOutcome {
    std::uint64_t seed = 0;
    double pretrain_accuracy = 0.0;
    EvalReport untuned, parenting, no_boundary;
    bool frozen_intact = false;
    double worst_objective_gap = 0.0;
    long observed_steps = 0;
    ActivationProfile profiles[2];
};

double min_rate(const EvalReport& r) { return std::min(r.adherence.rate(), r.robustness.strict.rate()); }

std::string rates(const EvalReport& r) {
    return "Ad " + fmt("%.3f", r.adherence.rate()) + " Ro " + fmt("%.3f", r.robustness.strict.rate());
}

RunConfig config_for(std::uint64_t seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.finalize();
    return cfg;
}

struct SeedState {
    SeedOutcome outcome;
    World world;
    PretrainedState pre;
    SubspacePartition partition;
};

SeedState run_seed(std::uint64_t seed) {
    const RunConfig cfg = config_for(seed);
    World world = generate_world(cfg);
    PretrainedState pre = pretrain_world(cfg, world);
    SeedState s{{}, std::move(world), std::move(pre), {}};
    s.outcome.seed = seed;
    s.outcome.pretrain_accuracy = closed_book_accuracy(s.world.facts, s.pre.alpha);
    s.outcome.untuned = evaluate(s.pre.model, s.pre.bundle, s.world.layout);

    const ProbeOutputs probes = probe_units(cfg, s.pre.model, s.pre.bundle, s.world.layout);
    s.outcome.profiles[0] = probes.adherence.profile;
    s.outcome.profiles[1] = probes.robustness.profile;
    s.partition = localize_units(probes.dists, cfg.tau);

    MicroTransformer tuned = s.pre.model;
    const std::string frozen_before = tuned.checksum(s.partition.other) + tuned.checksum_others();
    const auto observer = [&](const StepRecord& rec) {
        const auto& l = rec.losses;
        const LossBreakdown expected =
            compose_losses(l.adherence, l.robustness, l.extraction, cfg.tune.delta1, s.partition.gamma, {});
        const double d1 = cfg.tune.delta1;
        const auto& g = s.partition.gamma;
        const double cx = d1 * (g.adherence * l.adherence + g.robustness * l.robustness) + (1 - d1) * l.extraction;
        const double ax = d1 * l.adherence + (1 - d1) * l.extraction;
        const double rx = d1 * l.robustness + (1 - d1) * l.extraction;
        for (double gap : {l.entangled_objective - cx, l.adherence_objective - ax, l.robustness_objective - rx,
                           expected.entangled_objective - cx})
            s.outcome.worst_objective_gap = std::max(s.outcome.worst_objective_gap, std::abs(gap));
        ++s.outcome.observed_steps;
    };
    (void)tune_model(cfg, tuned, s.pre.bundle, s.partition, s.world.layout, observer);
    s.outcome.frozen_intact = tuned.checksum(s.partition.other) + tuned.checksum_others() == frozen_before;
    s.outcome.parenting = evaluate(tuned, s.pre.bundle, s.world.layout);

    RunConfig ablated = cfg;
    ablated.tune.ablation.no_boundary = true;
    MicroTransformer boundary_free = s.pre.model;
    (void)tune_model(ablated, boundary_free, s.pre.bundle, s.partition, s.world.layout);
    s.outcome.no_boundary = evaluate(boundary_free, s.pre.bundle, s.world.layout);

    std::printf("seed %llu: pretrain %.3f | untuned %s | parenting %s | no_boundary %s | mem %.3f\n",
                static_cast<unsigned long long>(seed), s.outcome.pretrain_accuracy,
                rates(s.outcome.untuned).c_str(), rates(s.outcome.parenting).c_str(),
                rates(s.outcome.no_boundary).c_str(), s.outcome.parenting.memorization.rate());
    std::fflush(stdout);
    return s;
}

void signal_isolation(const std::vector<SeedState>& states, const std::vector<SeedOutcome>& outcomes) {
    // A partition with every subspace populated, applied to real gradients of a
    // default-size model where one behavior gradient is replaced by zeros.
    const auto& s = states.front();
    const auto& model = s.pre.model;
    SubspacePartition p;
    p.gamma = {0.5, 0.5};
    for (const auto& id : model.unit_ids()) {
        Subspace sub = Subspace::other;
        if (id.layer == 1) sub = Subspace::entangled;
        if (id.layer == 2) sub = Subspace::adherence;
        if (id.layer == 3) sub = Subspace::robustness;
        p.entries.push_back({id, 0.0, 0.0, sub});
        switch (sub) {
            case Subspace::entangled: p.entangled.insert(id); break;
            case Subspace::adherence: p.adherence.insert(id); break;
            case Subspace::robustness: p.robustness.insert(id); break;
            case Subspace::other: p.other.insert(id); break;
        }
    }
    const auto sa = to_supervised(std::vector<ProbeExample>(s.pre.bundle.s_a.begin(), s.pre.bundle.s_a.begin() + 16),
                                  s.world.layout);
    const auto sr = to_supervised(std::vector<ProbeExample>(s.pre.bundle.s_r.begin(), s.pre.bundle.s_r.begin() + 16),
                                  s.world.layout);
    const auto ga = loss_and_grads(model, sa).grads;
    const auto gr = loss_and_grads(model, sr).grads;
    const auto zero = GradientMap::zeros_like(model);
    const auto only_r = composite_gradient(zero, gr, zero, p, 0.5);
    const auto only_a = composite_gradient(ga, zero, zero, p, 0.5);
    bool isolated = true;
    for (const auto& id : p.adherence) isolated = isolated && only_r.at(id).isZero(0.0) && !only_a.at(id).isZero(0.0);
    for (const auto& id : p.robustness) isolated = isolated && only_a.at(id).isZero(0.0) && !only_r.at(id).isZero(0.0);

    bool frozen = true;
    for (const auto& o : outcomes) frozen = frozen && o.frozen_intact;
    report(6, isolated && frozen, "frozen subspace and boundary isolation",
           std::string("frozen units, embeddings and head ") + (frozen ? "bit-identical" : "changed") +
               " on every seed, zero-gradient fixtures " + (isolated ? "isolated" : "leaked"));
}

void objective_consistency(const std::vector<SeedOutcome>& outcomes) {
    double worst = 0.0;
    long steps = 0;
    for (const auto& o : outcomes) {
        worst = std::max(worst, o.worst_objective_gap);
        steps += o.observed_steps;
    }
    report(7, steps > 0 && worst <= 1e-12, "reported composite objectives equal their linear forms",
           std::to_string(steps) + " steps, max gap " + fmt("%.3g", worst));
}

void end_to_end(const std::vector<SeedOutcome>& outcomes, double total_seconds) {
    bool pretrained = true, improved = true;
    std::string detail;
    for (const auto& o : outcomes) {
        pretrained = pretrained && o.pretrain_accuracy >= 0.95;
        const bool ad = o.parenting.adherence.rate() > o.untuned.adherence.rate();
        const bool ro = o.parenting.robustness.strict.rate() > o.untuned.robustness.strict.rate();
        improved = improved && ad && ro;
        detail += "seed " + std::to_string(o.seed) + " acc " + fmt("%.3f", o.pretrain_accuracy) + " Ad " +
                  fmt("%.3f", o.untuned.adherence.rate()) + "->" + fmt("%.3f", o.parenting.adherence.rate()) +
                  " Ro " + fmt("%.3f", o.untuned.robustness.strict.rate()) + "->" +
                  fmt("%.3f", o.parenting.robustness.strict.rate()) + "; ";
    }
    detail += "total " + fmt("%.0f s", total_seconds);
    report(8, pretrained && improved && total_seconds < 1800.0, "end-to-end tuning improves both behaviors", detail);
}

void ablation_ordering(const std::vector<SeedOutcome>& outcomes) {
    int wins = 0;
    std::string detail;
    for (const auto& o : outcomes) {
        const bool win = min_rate(o.parenting) >= min_rate(o.no_boundary);
        wins += win ? 1 : 0;
        detail += "seed " + std::to_string(o.seed) + " " + fmt("%.3f", min_rate(o.parenting)) + " vs " +
                  fmt("%.3f", min_rate(o.no_boundary)) + "; ";
    }
    detail += std::to_string(wins) + "/" + std::to_string(outcomes.size()) + " seeds";
    report(9, wins >= 2, "boundary control beats the boundary-free ablation", detail);
}

void ratio_sweep_shape(const SeedState& s) {
    const RunConfig cfg = config_for(s.outcome.seed);
    const SweepPools pools = build_sweep_pools(cfg, s.world.facts, s.pre.alpha, s.world.split);
    const SweepTable table = run_sweep(cfg, s.pre.model, s.pre.bundle, pools, s.partition, s.world.layout);
    auto column = [](const std::vector<SweepRow>& rows, bool adherence) {
        std::vector<double> out;
        for (const auto& r : rows) out.push_back(adherence ? r.r_ad : r.r_ro);
        return out;
    };
    auto range = [](const std::vector<double>& v) {
        const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        return *hi - *lo;
    };
    const auto par = table.method_rows("parenting");
    const auto nob = table.method_rows("no_boundary");
    std::string rows;
    for (const auto* set : {&par, &nob})
        for (const auto& r : *set)
            rows += r.method + "@" + fmt("%.3g", r.ratio) + "=(" + fmt("%.3f", r.r_ad) + "," + fmt("%.3f", r.r_ro) +
                    ") ";
    std::printf("sweep: %s\n", rows.c_str());
    const double rho = spearman(column(nob, true), column(nob, false));
    const double par_range = range(column(par, false));
    const double nob_range = range(column(nob, false));
    report(10, rho < 0.0 && par_range < nob_range, "ratio sweep shape",
           "no_boundary Spearman " + fmt("%.3f", rho) + ", robustness range parenting " + fmt("%.3f", par_range) +
               " vs no_boundary " + fmt("%.3f", nob_range));
}

void memorization(const std::vector<SeedOutcome>& outcomes) {
    bool ok = true;
    std::string detail;
    for (const auto& o : outcomes) {
        ok = ok && o.parenting.memorization.rate() <= 0.05;
        detail += "seed " + std::to_string(o.seed) + " " + fmt("%.3f", o.parenting.memorization.rate()) + "; ";
    }
    report(11, ok, "tuned model does not memorize substituted answers", detail);
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        files[fs::relative(entry.path(), dir).generic_string()] =
            std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return files;
}

void reproducibility(const std::string& cli) {
    const fs::path root = fs::temp_directory_path() / "parenting_acceptance_repro";
    fs::remove_all(root);
    bool ran = true;
    for (const char* name : {"first", "second"}) {
        const std::string cmd = "\"" + cli + "\" all --seed 1 --quiet --out \"" + (root / name).string() + "\"";
        ran = std::system(cmd.c_str()) == 0 && ran;
    }
    const auto a = snapshot(root / "first");
    const auto b = snapshot(root / "second");
    std::size_t differing = 0;
    for (const auto& [name, bytes] : a) {
        const auto it = b.find(name);
        if (it == b.end() || it->second != bytes) ++differing;
    }
    const bool has_core = a.contains(artifact::kManifest) && a.contains(artifact::kPretrained) &&
                          a.contains(artifact::kTuned) && a.contains(artifact::kEvalReport);
    report(12, ran && has_core && a.size() == b.size() && differing == 0, "two full runs are byte-identical",
           std::to_string(a.size()) + " files, " + std::to_string(differing) + " differ");
    fs::remove_all(root);
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_level(spdlog::level::warn);
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <path-to-parenting-cli>\n");
        return 2;
    }
    try {
        std::vector<SeedState> states;
        std::vector<SeedOutcome> outcomes;
        const auto start = Clock::now();
        for (std::uint64_t seed : {1, 2, 3}) {
            states.push_back(run_seed(seed));
            outcomes.push_back(states.back().outcome);
        }
        const double experiment_seconds = seconds_since(start);
        std::vector<ActivationProfile> profiles;
        for (const auto& o : outcomes) profiles.insert(profiles.end(), std::begin(o.profiles), std::end(o.profiles));

        gradient_correctness();
        activation_profile_soundness(profiles);
        ema_closed_form();
        zscore_and_partition();
        gamma_weights_check();
        signal_isolation(states, outcomes);
        objective_consistency(outcomes);
        end_to_end(outcomes, experiment_seconds);
        ablation_ordering(outcomes);
        ratio_sweep_shape(states.front());
        memorization(outcomes);
        reproducibility(argv[1]);
    } catch (const std::exception& e) {
        std::printf("FAIL acceptance aborted: %s\n", e.what());
        return 1;
    }
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
