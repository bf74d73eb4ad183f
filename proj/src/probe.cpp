#include "parenting/probe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "parenting/errors.hpp"
#include "parenting/rng.hpp"
#include "parenting/textio.hpp"

namespace parenting {

std::string_view to_string(Behavior behavior) {
    return behavior == Behavior::adherence ? "adherence" : "robustness";
}

Behavior parse_behavior(std::string_view text) {
    if (text == "adherence") return Behavior::adherence;
    if (text == "robustness") return Behavior::robustness;
    throw InputError("unknown behavior: " + std::string(text));
}

std::vector<double> neuron_probabilities(const LayerActivation& layer) {
    if (layer.token_count <= 0) throw InputError("activation record holds no tokens");
    std::vector<double> p(layer.positive_counts.size());
    for (std::size_t k = 0; k < p.size(); ++k)
        p[k] = static_cast<double>(layer.positive_counts[k]) / static_cast<double>(layer.token_count);
    return p;
}

double mean_probability(const LayerActivation& layer) {
    const auto p = neuron_probabilities(layer);
    if (p.empty()) throw InputError("activation record holds no neurons");
    return std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
}

std::vector<double> softmax(std::span<const double> values) {
    if (values.empty()) return {};
    const double top = *std::max_element(values.begin(), values.end());
    std::vector<double> out(values.size());
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = std::exp(values[i] - top);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

ActivationProfile activation_profile(const ActivationRecord& record) {
    ActivationProfile profile;
    for (const auto& layer : record.layers) profile.layer_mean.push_back(mean_probability(layer));
    profile.layer_weight = softmax(profile.layer_mean);
    return profile;
}

ActivationProfile activation_probabilities(const MicroTransformer& model, std::span<const TokenSequence> inputs) {
    if (inputs.empty()) throw InputError("activation probabilities: empty input set");
    return activation_profile(record_activations(model, inputs));
}

EmaState ema_update(const EmaState& state, double current, double alpha1, double alpha2) {
    EmaState next;
    next.smoothed = alpha1 * state.smoothed + (1.0 - alpha1) * current;
    next.uncertainty = alpha2 * state.uncertainty + (1.0 - alpha2) * std::abs(current - next.smoothed);
    next.step = state.step + 1;
    return next;
}

void ProbeConfig::validate() const {
    if (!(alpha1 > 0.0 && alpha1 < 1.0)) throw ConfigError("alpha1: must lie in (0, 1)");
    if (!(alpha2 > 0.0 && alpha2 < 1.0)) throw ConfigError("alpha2: must lie in (0, 1)");
    if (iterations < 1) throw ConfigError("probe_iterations: must be positive");
    if (batch_size < 1) throw ConfigError("probe_batch: must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("probe_lr: must be non-negative");
}

ProbeResult run_probe(MicroTransformer& model, std::span<const SupervisedSequence> examples,
                      std::span<const TokenSequence> inputs, const ProbeConfig& cfg, Behavior behavior) {
    cfg.validate();
    if (examples.empty()) throw InputError("probe: empty example set");
    ProbeResult result;
    result.profile = activation_probabilities(model, inputs);
    result.smoothed = GradientMap::zeros_like(model);
    result.uncertainty = GradientMap::zeros_like(model);

    auto rng = make_rng(cfg.seed, behavior == Behavior::adherence ? kStreamProbeAdherence : kStreamProbeRobustness);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    std::vector<SupervisedSequence> batch;
    const UnitSet everything = model.all_units();

    for (int t = 0; t < cfg.iterations; ++t) {
        batch.clear();
        while (batch.size() < static_cast<std::size_t>(cfg.batch_size) && batch.size() < examples.size()) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(examples[order[cursor++]]);
        }
        const LossAndGrads lg = loss_and_grads(model, batch);
        if (!lg.grads.all_finite()) throw InternalError("probe: non-finite gradient");
        const auto units = model.units();
        for (std::size_t u = 0; u < units.size(); ++u) {
            const auto current = (units[u].values.array() * lg.grads[u].array()).abs();
            Matrix& smoothed = result.smoothed[u];
            Matrix& uncertainty = result.uncertainty[u];
            smoothed = cfg.alpha1 * smoothed.array() + (1.0 - cfg.alpha1) * current;
            uncertainty = cfg.alpha2 * uncertainty.array() + (1.0 - cfg.alpha2) * (current - smoothed.array()).abs();
        }
        if (cfg.update_weights && cfg.learning_rate > 0.0) masked_update(model, lg.grads, everything, cfg.learning_rate);
    }

    result.scores = GradientMap::zeros_like(model);
    const auto ids = result.scores.ids();
    for (std::size_t u = 0; u < result.scores.size(); ++u) {
        const double layer_weight =
            cfg.no_layer_clue ? 1.0 : result.profile.layer_weight[static_cast<std::size_t>(ids[u].layer - 1)];
        result.scores[u] = layer_weight * result.smoothed[u].array() * result.uncertainty[u].array();
    }
    return result;
}

double ImportanceDistribution::at(const ParameterUnitId& id) const {
    auto it = std::lower_bound(units.begin(), units.end(), id,
                               [](const UnitImportance& u, const ParameterUnitId& key) { return u.id < key; });
    if (it == units.end() || !(it->id == id)) throw InputError("importance: no entry for " + id.to_string());
    return it->value;
}

std::vector<double> ImportanceDistribution::values() const {
    std::vector<double> out;
    out.reserve(units.size());
    for (const auto& u : units) out.push_back(u.value);
    return out;
}

ImportanceDistribution aggregate_units(const MicroTransformer& model, const GradientMap& scores, Behavior behavior) {
    ImportanceDistribution dist;
    dist.behavior = behavior;
    for (const auto& unit : model.units()) {
        const auto ids = scores.ids();
        if (std::find(ids.begin(), ids.end(), unit.id) == ids.end())
            throw InternalError("importance: missing scores for " + unit.id.to_string());
        const Matrix& s = scores.at(unit.id);
        if (s.rows() != unit.rows() || s.cols() != unit.cols())
            throw InternalError("importance: shape mismatch at " + unit.id.to_string());
        dist.units.push_back({unit.id, s.mean()});
    }
    return dist;
}

std::string format_double(double value) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
}

namespace {
constexpr std::string_view kImportanceHeader = "# parenting importance v1";
constexpr std::string_view kImportanceColumns = "behavior\tlayer\tkind\timportance";
}  // namespace

void write_importance(const std::filesystem::path& path, const std::vector<ImportanceDistribution>& dists) {
    std::ostringstream out;
    out << kImportanceHeader << '\n' << kImportanceColumns << '\n';
    for (const auto& dist : dists) {
        for (const auto& u : dist.units)
            out << to_string(dist.behavior) << '\t' << u.id.layer << '\t' << u.id.kind_label() << '\t'
                << format_double(u.value) << '\n';
    }
    write_text_file(path, out.str());
}

std::vector<ImportanceDistribution> read_importance(const std::filesystem::path& path) {
    const auto lines = read_lines(path);
    if (lines.size() < 2 || lines[0] != kImportanceHeader || lines[1] != kImportanceColumns)
        throw InputError("importance file " + path.string() + ": missing or unsupported header");
    std::vector<ImportanceDistribution> out;
    for (std::size_t i = 2; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto fields = split_fields(lines[i], '\t');
        if (fields.size() != 4)
            throw InputError("importance file " + path.string() + ": line " + std::to_string(i + 1) + " malformed");
        const Behavior behavior = parse_behavior(fields[0]);
        const auto id = ParameterUnitId::from_label(parse_int(fields[1]), fields[2]);
        const double value = parse_double(fields[3]);
        if (out.empty() || out.back().behavior != behavior) {
            for (const auto& d : out)
                if (d.behavior == behavior) throw InputError("importance file: behavior block repeated");
            out.push_back({behavior, {}});
        }
        auto& units = out.back().units;
        if (!units.empty() && !(units.back().id < id)) throw InputError("importance file: units out of order");
        units.push_back({id, value});
    }
    return out;
}

}  // namespace parenting
