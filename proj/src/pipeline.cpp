#include "parenting/pipeline.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "parenting/checkpoint.hpp"
#include "parenting/checksum.hpp"
#include "parenting/dataset_io.hpp"
#include "parenting/errors.hpp"
#include "parenting/rng.hpp"
#include "parenting/textio.hpp"

namespace parenting {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kStageNames[] = {"gen-data", "pretrain", "probe", "localize", "tune", "eval", "sweep", "heatmap"};

std::string file_checksum(const fs::path& run_dir, const std::string& rel) {
    const fs::path path = run_dir / rel;
    if (!fs::exists(path)) throw InternalError("artifact " + rel + " was not written");
    return sha256_file(path);
}

}  // namespace

std::string_view to_string(Stage stage) { return kStageNames[static_cast<int>(stage)]; }

Stage parse_stage(std::string_view name) {
    for (int i = 0; i < static_cast<int>(std::size(kStageNames)); ++i)
        if (name == kStageNames[i]) return static_cast<Stage>(i);
    throw ConfigError("stage: unknown stage '" + std::string(name) + "'");
}

const std::vector<Stage>& stage_requirements(Stage stage) {
    static const std::vector<Stage> none{};
    static const std::vector<Stage> gen{Stage::gen_data};
    static const std::vector<Stage> pre{Stage::pretrain};
    static const std::vector<Stage> probe{Stage::probe};
    static const std::vector<Stage> tune{Stage::pretrain, Stage::localize};
    static const std::vector<Stage> eval{Stage::pretrain, Stage::tune};
    static const std::vector<Stage> sweep{Stage::gen_data, Stage::pretrain, Stage::localize};
    static const std::vector<Stage> heat{Stage::probe, Stage::localize};
    switch (stage) {
        case Stage::gen_data: return none;
        case Stage::pretrain: return gen;
        case Stage::probe: return pre;
        case Stage::localize: return probe;
        case Stage::tune: return tune;
        case Stage::eval: return eval;
        case Stage::sweep: return sweep;
        case Stage::heatmap: return heat;
    }
    return none;
}

const std::vector<Stage>& full_pipeline() {
    static const std::vector<Stage> stages{Stage::gen_data, Stage::pretrain, Stage::probe, Stage::localize,
                                           Stage::tune,     Stage::eval,     Stage::heatmap};
    return stages;
}

// ---------------------------------------------------------------------------
// Manifest

RunManifest RunManifest::load(const fs::path& run_dir) {
    RunManifest m;
    const fs::path path = run_dir / artifact::kManifest;
    if (!fs::exists(path)) return m;
    try {
        const json doc = json::parse(read_text_file(path));
        if (doc.at("version").get<int>() != kManifestVersion)
            throw InputError("manifest: unsupported version");
        for (const auto& [key, value] : doc.at("config").items()) m.config_.emplace_back(key, value.get<std::string>());
        for (const auto& [name, rec] : doc.at("stages").items()) {
            (void)parse_stage(name);
            StageRecord r;
            r.sequence = rec.at("sequence").get<int>();
            r.inputs = rec.at("inputs").get<std::map<std::string, std::string>>();
            r.outputs = rec.at("outputs").get<std::map<std::string, std::string>>();
            m.stages_[name] = std::move(r);
        }
    } catch (const json::exception& e) {
        throw InputError("manifest " + path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw InputError("manifest " + path.string() + ": " + e.what());
    }
    return m;
}

void RunManifest::save(const fs::path& run_dir) const { write_text_file(run_dir / artifact::kManifest, to_json()); }

const StageRecord& RunManifest::record(Stage stage) const {
    const auto it = stages_.find(std::string(to_string(stage)));
    if (it == stages_.end()) throw InternalError("manifest: no record for stage " + std::string(to_string(stage)));
    return it->second;
}

void RunManifest::require(Stage stage, const fs::path& run_dir) const {
    const std::string wanted(to_string(stage));
    for (Stage dep : stage_requirements(stage)) {
        const std::string name(to_string(dep));
        const auto it = stages_.find(name);
        if (it == stages_.end())
            throw StageDependencyError(name, "stage '" + wanted + "' needs stage '" + name + "' to run first");
        for (const auto& [rel, sum] : it->second.outputs) {
            const fs::path path = run_dir / rel;
            if (!fs::exists(path))
                throw StageDependencyError(name, "stage '" + wanted + "' needs stage '" + name + "': " + rel +
                                                     " is missing");
            if (sha256_file(path) != sum)
                throw StageDependencyError(name, "stage '" + wanted + "' needs stage '" + name + "': " + rel +
                                                     " does not match its recorded checksum");
        }
    }
}

void RunManifest::complete(Stage stage, const fs::path& run_dir, const std::vector<std::string>& inputs,
                           const std::vector<std::string>& outputs) {
    StageRecord r;
    for (const auto& rel : inputs) r.inputs[rel] = file_checksum(run_dir, rel);
    for (const auto& rel : outputs) r.outputs[rel] = file_checksum(run_dir, rel);
    const std::string name(to_string(stage));
    const auto it = stages_.find(name);
    if (it != stages_.end() && it->second.inputs == r.inputs && it->second.outputs == r.outputs) return;
    int last = 0;
    for (const auto& [n, rec] : stages_) last = std::max(last, rec.sequence);
    r.sequence = last + 1;
    stages_[name] = std::move(r);
}

std::map<std::string, std::string> RunManifest::artifacts() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, rec] : stages_)
        for (const auto& [rel, sum] : rec.outputs) out[rel] = sum;
    return out;
}

std::string RunManifest::to_json() const {
    json doc;
    doc["format"] = "parenting-manifest";
    doc["version"] = kManifestVersion;
    doc["tool"] = std::string(kToolVersion);
    json cfg = json::object();
    for (const auto& [k, v] : config_) cfg[k] = v;
    doc["config"] = cfg;
    json stages = json::object();
    for (const auto& [name, rec] : stages_)
        stages[name] = {{"sequence", rec.sequence}, {"inputs", rec.inputs}, {"outputs", rec.outputs}};
    doc["stages"] = stages;
    doc["artifacts"] = artifacts();
    return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// In-memory building blocks

World generate_world(const RunConfig& cfg) {
    World w;
    w.layout = PromptLayout::for_model(cfg.model, cfg.sizes.k);
    w.facts = generate_fact_base(cfg.facts, cfg.seed, cfg.model.vocab_size);
    w.corpus = render_pretrain_corpus(w.facts, w.layout, cfg.corpus, cfg.seed);
    w.split = split_facts(w.facts, cfg.sizes.eval_fraction, cfg.seed);
    return w;
}

PretrainedState pretrain_world(const RunConfig& cfg, const World& world) {
    PretrainedState s{MicroTransformer::init(cfg.model), {}, {}, {}};
    s.result = pretrain(s.model, world.corpus, world.facts, world.layout, cfg.pretrain, cfg.seed);
    s.alpha = extract_parametric_knowledge(s.model, world.facts, world.layout);
    s.bundle = build_bundle(world.facts, s.alpha, cfg.sizes, cfg.seed);
    if (s.bundle.split.train != world.split.train || s.bundle.split.eval != world.split.eval)
        throw InternalError("pretrain: dataset split differs from the generated split");
    return s;
}

ProbeOutputs probe_units(const RunConfig& cfg, const MicroTransformer& model, const DatasetBundle& bundle,
                         const PromptLayout& layout) {
    MicroTransformer work = model;
    ProbeOutputs out;
    const auto sa = to_supervised(bundle.s_a, layout);
    const auto sr = to_supervised(bundle.s_r, layout);
    out.adherence = run_probe(work, sa, bundle.c_a(layout), cfg.probe, Behavior::adherence);
    out.robustness = run_probe(work, sr, bundle.c_r(layout), cfg.probe, Behavior::robustness);
    out.dists.push_back(aggregate_units(work, out.adherence.scores, Behavior::adherence));
    out.dists.push_back(aggregate_units(work, out.robustness.scores, Behavior::robustness));
    return out;
}

SubspacePartition localize_units(const std::vector<ImportanceDistribution>& dists, double tau) {
    const ImportanceDistribution* a = nullptr;
    const ImportanceDistribution* r = nullptr;
    for (const auto& d : dists) (d.behavior == Behavior::adherence ? a : r) = &d;
    if (!a || !r) throw InputError("localize: importance for both behaviors is required");
    return localize(zscores(*a), zscores(*r), tau);
}

TrainingLog tune_model(const RunConfig& cfg, MicroTransformer& model, const DatasetBundle& bundle,
                       const SubspacePartition& partition, const PromptLayout& layout,
                       const StepObserver& observer) {
    const auto sa = to_supervised(bundle.s_a, layout);
    const auto sr = to_supervised(bundle.s_r, layout);
    const auto sc = to_supervised(bundle.s_c, layout);
    return train(model, {sa, sr, sc}, partition, cfg.tune, observer);
}

SweepPools build_sweep_pools(const RunConfig& cfg, const FactBase& facts, const AlphaMap& alpha,
                             const FactSplit& split) {
    std::size_t need_a = static_cast<std::size_t>(cfg.sizes.m_a);
    std::size_t need_r = static_cast<std::size_t>(cfg.sizes.m_r);
    for (double ratio : cfg.sweep_ratios) {
        const auto s = sweep_subset_sizes(ratio, static_cast<std::size_t>(cfg.sizes.m_a),
                                          std::numeric_limits<std::size_t>::max(),
                                          std::numeric_limits<std::size_t>::max());
        need_a = std::max(need_a, s.adherence);
        need_r = std::max(need_r, s.robustness);
    }
    SweepPools pools;
    pools.adherence = build_adherence_set(facts, alpha, split.train, static_cast<int>(need_a), cfg.seed);
    pools.robustness = build_robustness_set(facts, alpha, split.train, static_cast<int>(need_r), cfg.seed);
    return pools;
}

SweepTable run_sweep(const RunConfig& cfg, const MicroTransformer& pretrained, const DatasetBundle& bundle,
                     const SweepPools& pools, const SubspacePartition& partition, const PromptLayout& layout) {
    SweepInputs in;
    in.pretrained = &pretrained;
    in.pretrained_checksum = pretrained.checksum();
    in.adherence_pool = &pools.adherence;
    in.robustness_pool = &pools.robustness;
    in.extraction_set = &bundle.s_c;
    in.bundle = &bundle;
    in.base_size = static_cast<std::size_t>(cfg.sizes.m_a);
    in.layout = layout;
    Ablation boundary_free;
    boundary_free.no_boundary = true;
    const std::vector<SweepMethod> methods{{"parenting", Ablation{}}, {"no_boundary", boundary_free}};
    return ratio_sweep(in, partition, cfg.tune, cfg.sweep_ratios, methods);
}

// ---------------------------------------------------------------------------
// Stages

namespace {

struct StageContext {
    const RunConfig& cfg;
    fs::path dir;
    RunManifest manifest;
    PromptLayout layout;
};

DatasetBundle load_bundle(const StageContext& ctx) {
    DatasetBundle b;
    b.sizes = ctx.cfg.sizes;
    b.split = read_split(ctx.dir / artifact::kSplit);
    b.s_a = read_dataset(ctx.dir / artifact::kAdherenceSet);
    b.s_r = read_dataset(ctx.dir / artifact::kRobustnessSet);
    b.s_c = read_dataset(ctx.dir / artifact::kExtractionSet);
    b.eval_conflicting = read_dataset(ctx.dir / artifact::kEvalConflicting);
    b.eval_irrelevant = read_dataset(ctx.dir / artifact::kEvalIrrelevant);
    b.recognition = read_dataset(ctx.dir / artifact::kRecognition);
    return b;
}

const std::vector<std::string>& bundle_files() {
    static const std::vector<std::string> files{artifact::kSplit,          artifact::kAdherenceSet,
                                                artifact::kRobustnessSet,  artifact::kExtractionSet,
                                                artifact::kEvalConflicting, artifact::kEvalIrrelevant,
                                                artifact::kRecognition};
    return files;
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

void write_pretrain_log(const fs::path& path, const PretrainResult& r) {
    std::ostringstream out;
    out << "epoch\tmean_loss\tclosed_book_accuracy\n";
    for (const auto& e : r.history)
        out << e.epoch << '\t' << format_double(e.mean_loss) << '\t'
            << (e.accuracy < 0.0 ? std::string("NA") : format_double(e.accuracy)) << '\n';
    write_text_file(path, out.str());
}

void write_activation_profiles(const fs::path& path, const ProbeOutputs& p) {
    std::ostringstream out;
    out << "behavior\tlayer\tpositive_rate\tlayer_weight\n";
    const std::pair<Behavior, const ProbeResult*> rows[] = {{Behavior::adherence, &p.adherence},
                                                            {Behavior::robustness, &p.robustness}};
    for (const auto& [behavior, result] : rows)
        for (std::size_t j = 0; j < result->profile.layer_mean.size(); ++j)
            out << to_string(behavior) << '\t' << j + 1 << '\t' << format_double(result->profile.layer_mean[j]) << '\t'
                << format_double(result->profile.layer_weight[j]) << '\n';
    write_text_file(path, out.str());
}

void stage_gen_data(StageContext& ctx) {
    const World w = generate_world(ctx.cfg);
    write_facts(ctx.dir / artifact::kFacts, w.facts);
    write_corpus(ctx.dir / artifact::kCorpus, w.corpus);
    write_split(ctx.dir / artifact::kSplit, w.split);
    spdlog::info("gen-data: {} facts, {} corpus sequences", w.facts.facts.size(), w.corpus.size());
    ctx.manifest.complete(Stage::gen_data, ctx.dir, {}, {artifact::kFacts, artifact::kCorpus, artifact::kSplit});
}

void stage_pretrain(StageContext& ctx) {
    World w;
    w.layout = ctx.layout;
    w.facts = read_facts(ctx.dir / artifact::kFacts);
    w.corpus = read_corpus(ctx.dir / artifact::kCorpus);
    w.split = read_split(ctx.dir / artifact::kSplit);
    const PretrainedState s = pretrain_world(ctx.cfg, w);
    spdlog::info("pretrain: closed-book accuracy {:.3f} after {} epochs", s.result.final_accuracy,
                 s.result.history.empty() ? 0 : s.result.history.back().epoch);
    save_checkpoint(s.model, ctx.dir / artifact::kPretrained);
    write_pretrain_log(ctx.dir / artifact::kPretrainLog, s.result);
    write_alpha(ctx.dir / artifact::kAlpha, w.facts, s.alpha);
    fs::create_directories(ctx.dir / "data");
    write_dataset(ctx.dir / artifact::kAdherenceSet, "s_a", s.bundle.s_a);
    write_dataset(ctx.dir / artifact::kRobustnessSet, "s_r", s.bundle.s_r);
    write_dataset(ctx.dir / artifact::kExtractionSet, "s_c", s.bundle.s_c);
    write_dataset(ctx.dir / artifact::kEvalConflicting, "eval_conflicting", s.bundle.eval_conflicting);
    write_dataset(ctx.dir / artifact::kEvalIrrelevant, "eval_irrelevant", s.bundle.eval_irrelevant);
    write_dataset(ctx.dir / artifact::kRecognition, "recognition", s.bundle.recognition);
    std::vector<std::string> outputs{artifact::kPretrained, artifact::kPretrainLog, artifact::kAlpha};
    for (const auto& f : bundle_files())
        if (f != std::string(artifact::kSplit)) outputs.push_back(f);
    ctx.manifest.complete(Stage::pretrain, ctx.dir, {artifact::kFacts, artifact::kCorpus, artifact::kSplit}, outputs);
}

void stage_probe(StageContext& ctx) {
    const MicroTransformer model = load_checkpoint(ctx.dir / artifact::kPretrained, ctx.cfg.model);
    const DatasetBundle bundle = load_bundle(ctx);
    const ProbeOutputs p = probe_units(ctx.cfg, model, bundle, ctx.layout);
    write_importance(ctx.dir / artifact::kImportance, p.dists);
    write_activation_profiles(ctx.dir / artifact::kActivation, p);
    ctx.manifest.complete(Stage::probe, ctx.dir, concat({artifact::kPretrained}, bundle_files()),
                          {artifact::kImportance, artifact::kActivation});
}

void stage_localize(StageContext& ctx) {
    const auto dists = read_importance(ctx.dir / artifact::kImportance);
    const SubspacePartition p = localize_units(dists, ctx.cfg.tau);
    write_partition(ctx.dir / artifact::kPartition, p);
    spdlog::info("localize: entangled {}, adherence {}, robustness {}, other {}", p.entangled.size(),
                 p.adherence.size(), p.robustness.size(), p.other.size());
    ctx.manifest.complete(Stage::localize, ctx.dir, {artifact::kImportance}, {artifact::kPartition});
}

void stage_tune(StageContext& ctx) {
    MicroTransformer model = load_checkpoint(ctx.dir / artifact::kPretrained, ctx.cfg.model);
    const DatasetBundle bundle = load_bundle(ctx);
    const SubspacePartition partition = read_partition(ctx.dir / artifact::kPartition);
    const TrainingLog log = tune_model(ctx.cfg, model, bundle, partition, ctx.layout);
    save_checkpoint(model, ctx.dir / artifact::kTuned);
    write_training_log(ctx.dir / artifact::kTrainingLog, log);
    ctx.manifest.complete(Stage::tune, ctx.dir,
                          concat({artifact::kPretrained, artifact::kPartition}, bundle_files()),
                          {artifact::kTuned, artifact::kTrainingLog});
}

void stage_eval(StageContext& ctx) {
    const MicroTransformer untuned = load_checkpoint(ctx.dir / artifact::kPretrained, ctx.cfg.model);
    const MicroTransformer tuned = load_checkpoint(ctx.dir / artifact::kTuned, ctx.cfg.model);
    const DatasetBundle bundle = load_bundle(ctx);
    const EvalReport before = evaluate(untuned, bundle, ctx.layout);
    const EvalReport after = evaluate(tuned, bundle, ctx.layout);
    spdlog::info("eval: R_Ad {:.3f} -> {:.3f}, R_Ro {:.3f} -> {:.3f}", before.adherence.rate(), after.adherence.rate(),
                 before.robustness.strict.rate(), after.robustness.strict.rate());
    write_eval_reports(ctx.dir / artifact::kEvalReport, {{"untuned", before}, {"tuned", after}});
    ctx.manifest.complete(Stage::eval, ctx.dir, concat({artifact::kPretrained, artifact::kTuned}, bundle_files()),
                          {artifact::kEvalReport});
}

void stage_heatmap(StageContext& ctx) {
    const auto dists = read_importance(ctx.dir / artifact::kImportance);
    const SubspacePartition partition = read_partition(ctx.dir / artifact::kPartition);
    export_heatmap(ctx.dir / artifact::kHeatmap, ctx.dir / artifact::kHeatmapSubspace, dists, partition);
    ctx.manifest.complete(Stage::heatmap, ctx.dir, {artifact::kImportance, artifact::kPartition},
                          {artifact::kHeatmap, artifact::kHeatmapSubspace});
}

void stage_sweep(StageContext& ctx) {
    const MicroTransformer model = load_checkpoint(ctx.dir / artifact::kPretrained, ctx.cfg.model);
    const FactBase facts = read_facts(ctx.dir / artifact::kFacts);
    const AlphaMap alpha = read_alpha(ctx.dir / artifact::kAlpha, facts);
    const DatasetBundle bundle = load_bundle(ctx);
    const SubspacePartition partition = read_partition(ctx.dir / artifact::kPartition);
    const SweepPools pools = build_sweep_pools(ctx.cfg, facts, alpha, bundle.split);
    write_dataset(ctx.dir / artifact::kSweepAdherence, "sweep_s_a", pools.adherence);
    write_dataset(ctx.dir / artifact::kSweepRobustness, "sweep_s_r", pools.robustness);
    const SweepTable table = run_sweep(ctx.cfg, model, bundle, pools, partition, ctx.layout);
    write_sweep_table(ctx.dir / artifact::kSweep, table);
    ctx.manifest.complete(Stage::sweep, ctx.dir,
                          concat({artifact::kFacts, artifact::kAlpha, artifact::kPretrained, artifact::kPartition},
                                 bundle_files()),
                          {artifact::kSweep, artifact::kSweepAdherence, artifact::kSweepRobustness});
}

void execute(Stage stage, StageContext& ctx) {
    ctx.manifest.require(stage, ctx.dir);
    spdlog::info("stage {} in {}", to_string(stage), ctx.dir.string());
    switch (stage) {
        case Stage::gen_data: stage_gen_data(ctx); break;
        case Stage::pretrain: stage_pretrain(ctx); break;
        case Stage::probe: stage_probe(ctx); break;
        case Stage::localize: stage_localize(ctx); break;
        case Stage::tune: stage_tune(ctx); break;
        case Stage::eval: stage_eval(ctx); break;
        case Stage::sweep: stage_sweep(ctx); break;
        case Stage::heatmap: stage_heatmap(ctx); break;
    }
    ctx.manifest.set_config(ctx.cfg.entries());
    ctx.manifest.save(ctx.dir);
}

StageContext open_run(const RunConfig& cfg) {
    const fs::path dir = cfg.effective_output_dir();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    return StageContext{cfg, dir, RunManifest::load(dir), PromptLayout::for_model(cfg.model, cfg.sizes.k)};
}

}  // namespace

void run_stage(Stage stage, const RunConfig& cfg) {
    StageContext ctx = open_run(cfg);
    execute(stage, ctx);
}

void run_all(const RunConfig& cfg) {
    StageContext ctx = open_run(cfg);
    ctx.manifest.clear();
    for (Stage stage : full_pipeline()) execute(stage, ctx);
}

}  // namespace parenting
