#include "parenting/run_config.hpp"

#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>

#include "parenting/errors.hpp"
#include "parenting/optim.hpp"
#include "parenting/textio.hpp"

namespace parenting {

namespace {

std::string trim(std::string_view text) {
    const auto first = text.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = text.find_last_not_of(" \t\r");
    return std::string(text.substr(first, last - first + 1));
}

int to_int(std::string_view key, std::string_view value) {
    try {
        return parse_int(value);
    } catch (const InputError&) {
        throw ConfigError(std::string(key) + ": expected an integer, got '" + std::string(value) + "'");
    }
}

int to_positive(std::string_view key, std::string_view value) {
    const int v = to_int(key, value);
    if (v <= 0) throw ConfigError(std::string(key) + ": must be positive (got " + std::to_string(v) + ")");
    return v;
}

double to_double(std::string_view key, std::string_view value) {
    try {
        const double v = parse_double(value);
        if (!std::isfinite(v)) throw InputError("non-finite");
        return v;
    } catch (const InputError&) {
        throw ConfigError(std::string(key) + ": expected a finite number, got '" + std::string(value) + "'");
    }
}

double to_unit_open(std::string_view key, std::string_view value) {
    const double v = to_double(key, value);
    if (!(v > 0.0 && v < 1.0)) throw ConfigError(std::string(key) + ": must lie in (0, 1) (got " + std::string(value) + ")");
    return v;
}

double to_nonnegative(std::string_view key, std::string_view value) {
    const double v = to_double(key, value);
    if (v < 0.0) throw ConfigError(std::string(key) + ": must be non-negative (got " + std::string(value) + ")");
    return v;
}

bool to_bool(std::string_view key, std::string_view value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(value) + "'");
}

std::uint64_t to_seed(std::string_view key, std::string_view value) {
    const long long v = [&] {
        try {
            return parse_int64(value);
        } catch (const InputError&) {
            throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" + std::string(value) + "'");
        }
    }();
    if (v < 0) throw ConfigError(std::string(key) + ": must be non-negative");
    return static_cast<std::uint64_t>(v);
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

struct Field {
    std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
    std::function<std::string(const RunConfig&)> get;
};

using FieldTable = std::vector<std::pair<std::string, Field>>;

#define PARENTING_INT_FIELD(name, member) \
    {name, {[](RunConfig& c, std::string_view k, std::string_view v) { c.member = to_positive(k, v); }, \
            [](const RunConfig& c) { return std::to_string(c.member); }}}
#define PARENTING_BOOL_FIELD(name, member) \
    {name, {[](RunConfig& c, std::string_view k, std::string_view v) { c.member = to_bool(k, v); }, \
            [](const RunConfig& c) { return bool_text(c.member); }}}

const FieldTable& fields() {
    static const FieldTable table = {
        {"seed", {[](RunConfig& c, std::string_view k, std::string_view v) { c.seed = to_seed(k, v); },
                  [](const RunConfig& c) { return std::to_string(c.seed); }}},
        {"run_id", {[](RunConfig& c, std::string_view k, std::string_view v) {
                        const std::string id(v);
                        if (id.find_first_of("/\\") != std::string::npos || id == "." || id == "..")
                            throw ConfigError(std::string(k) + ": must be a plain directory name");
                        c.run_id = id;
                    },
                    [](const RunConfig& c) { return c.run_id; }}},
        PARENTING_INT_FIELD("num_layers", model.num_layers),
        PARENTING_INT_FIELD("model_dim", model.model_dim),
        PARENTING_INT_FIELD("num_heads", model.num_heads),
        {"ffn_dim", {[](RunConfig& c, std::string_view k, std::string_view v) {
                         const int d = to_int(k, v);
                         if (d < 0) throw ConfigError(std::string(k) + ": must be positive, or 0 for 4*model_dim");
                         c.model.ffn_dim = d;
                     },
                     [](const RunConfig& c) { return std::to_string(c.model.ffn_dim); }}},
        PARENTING_INT_FIELD("vocab_size", model.vocab_size),
        PARENTING_INT_FIELD("max_seq_len", model.max_seq_len),
        {"adapter_mode", {[](RunConfig& c, std::string_view k, std::string_view v) {
                              try {
                                  c.model.adapter_mode = parse_adapter_mode(v);
                              } catch (const Error&) {
                                  throw ConfigError(std::string(k) + ": expected full or low-rank, got '" +
                                                    std::string(v) + "'");
                              }
                          },
                          [](const RunConfig& c) { return std::string(to_string(c.model.adapter_mode)); }}},
        PARENTING_INT_FIELD("adapter_rank", model.adapter_rank),
        PARENTING_INT_FIELD("entities", facts.num_entities),
        PARENTING_INT_FIELD("attributes", facts.num_attributes),
        {"values_per_attribute", {[](RunConfig& c, std::string_view k, std::string_view v) {
                                      const int n = to_int(k, v);
                                      if (n < 2) throw ConfigError(std::string(k) + ": must be at least 2");
                                      c.facts.values_per_attribute = n;
                                  },
                                  [](const RunConfig& c) { return std::to_string(c.facts.values_per_attribute); }}},
        PARENTING_INT_FIELD("topics", facts.num_topics),
        {"reading_entities", {[](RunConfig& c, std::string_view k, std::string_view v) {
                                  const int n = to_int(k, v);
                                  if (n < 0) throw ConfigError(std::string(k) + ": must be non-negative");
                                  c.facts.reading_entities = n;
                              },
                              [](const RunConfig& c) { return std::to_string(c.facts.reading_entities); }}},
        PARENTING_INT_FIELD("corpus_repeats", corpus.repeats),
        PARENTING_INT_FIELD("corpus_max_docs", corpus.max_docs),
        {"corpus_unanswerable", {[](RunConfig& c, std::string_view k, std::string_view v) {
                                     const double p = to_double(k, v);
                                     if (!(p >= 0.0 && p < 1.0)) throw ConfigError(std::string(k) + ": must lie in [0, 1)");
                                     c.corpus.unanswerable = p;
                                 },
                                 [](const RunConfig& c) { return format_double(c.corpus.unanswerable); }}},
        {"corpus_known_subject", {[](RunConfig& c, std::string_view k, std::string_view v) {
                                      const double p = to_double(k, v);
                                      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(k) + ": must lie in [0, 1]");
                                      c.corpus.known_subject = p;
                                  },
                                  [](const RunConfig& c) { return format_double(c.corpus.known_subject); }}},
        PARENTING_INT_FIELD("pretrain_max_epochs", pretrain.max_epochs),
        PARENTING_INT_FIELD("pretrain_batch", pretrain.batch_size),
        {"pretrain_lr", {[](RunConfig& c, std::string_view k, std::string_view v) {
                             c.pretrain.learning_rate = to_nonnegative(k, v);
                         },
                         [](const RunConfig& c) { return format_double(c.pretrain.learning_rate); }}},
        {"pretrain_target", {[](RunConfig& c, std::string_view k, std::string_view v) {
                                 const double t = to_double(k, v);
                                 if (!(t > 0.0 && t <= 1.0)) throw ConfigError(std::string(k) + ": must lie in (0, 1]");
                                 c.pretrain.target_accuracy = t;
                             },
                             [](const RunConfig& c) { return format_double(c.pretrain.target_accuracy); }}},
        PARENTING_INT_FIELD("pretrain_check_every", pretrain.check_every),
        PARENTING_INT_FIELD("m_a", sizes.m_a),
        PARENTING_INT_FIELD("m_r", sizes.m_r),
        PARENTING_INT_FIELD("m_c", sizes.m_c),
        {"k", {[](RunConfig& c, std::string_view key, std::string_view v) {
                   const int k = to_int(key, v);
                   if (k < 2) throw ConfigError(std::string(key) + ": must be at least 2");
                   c.sizes.k = k;
               },
               [](const RunConfig& c) { return std::to_string(c.sizes.k); }}},
        PARENTING_INT_FIELD("eval_items", sizes.eval_items),
        {"eval_fraction", {[](RunConfig& c, std::string_view k, std::string_view v) {
                               c.sizes.eval_fraction = to_unit_open(k, v);
                           },
                           [](const RunConfig& c) { return format_double(c.sizes.eval_fraction); }}},
        {"alpha1", {[](RunConfig& c, std::string_view k, std::string_view v) { c.probe.alpha1 = to_unit_open(k, v); },
                    [](const RunConfig& c) { return format_double(c.probe.alpha1); }}},
        {"alpha2", {[](RunConfig& c, std::string_view k, std::string_view v) { c.probe.alpha2 = to_unit_open(k, v); },
                    [](const RunConfig& c) { return format_double(c.probe.alpha2); }}},
        PARENTING_INT_FIELD("probe_iterations", probe.iterations),
        PARENTING_INT_FIELD("probe_batch", probe.batch_size),
        {"probe_lr", {[](RunConfig& c, std::string_view k, std::string_view v) {
                          c.probe.learning_rate = to_nonnegative(k, v);
                      },
                      [](const RunConfig& c) { return format_double(c.probe.learning_rate); }}},
        PARENTING_BOOL_FIELD("probe_update_weights", probe.update_weights),
        {"tau", {[](RunConfig& c, std::string_view k, std::string_view v) { c.tau = to_double(k, v); },
                 [](const RunConfig& c) { return format_double(c.tau); }}},
        {"delta1", {[](RunConfig& c, std::string_view k, std::string_view v) { c.tune.delta1 = to_unit_open(k, v); },
                    [](const RunConfig& c) { return format_double(c.tune.delta1); }}},
        {"learning_rate", {[](RunConfig& c, std::string_view k, std::string_view v) {
                               c.tune.learning_rate = to_nonnegative(k, v);
                           },
                           [](const RunConfig& c) { return format_double(c.tune.learning_rate); }}},
        PARENTING_INT_FIELD("epochs", tune.epochs),
        PARENTING_INT_FIELD("batch_size", tune.batch_size),
        {"optimizer", {[](RunConfig& c, std::string_view k, std::string_view v) {
                           try {
                               c.tune.optimizer = parse_optimizer_kind(v);
                           } catch (const Error&) {
                               throw ConfigError(std::string(k) + ": expected gd or adam, got '" + std::string(v) + "'");
                           }
                       },
                       [](const RunConfig& c) { return std::string(to_string(c.tune.optimizer)); }}},
        PARENTING_BOOL_FIELD("sequential", tune.sequential),
        PARENTING_BOOL_FIELD("no_layer_clue", tune.ablation.no_layer_clue),
        PARENTING_BOOL_FIELD("no_boundary", tune.ablation.no_boundary),
        PARENTING_BOOL_FIELD("no_extraction", tune.ablation.no_extraction),
        {"sweep_ratios", {[](RunConfig& c, std::string_view k, std::string_view v) {
                              std::vector<double> ratios;
                              for (const auto& part : split_fields(v, ',')) {
                                  try {
                                      ratios.push_back(parse_ratio(trim(part)));
                                  } catch (const ConfigError& e) {
                                      throw ConfigError(std::string(k) + ": " + e.what());
                                  }
                              }
                              bool has_one = false;
                              for (std::size_t i = 0; i < ratios.size(); ++i) {
                                  has_one = has_one || ratios[i] == 1.0;
                                  if (i > 0 && !(ratios[i] > ratios[i - 1]))
                                      throw ConfigError(std::string(k) + ": ratios must be strictly increasing");
                              }
                              if (!has_one) throw ConfigError(std::string(k) + ": must include 1");
                              c.sweep_ratios = ratios;
                              c.sweep_ratios_text = std::string(v);
                          },
                          [](const RunConfig& c) { return c.sweep_ratios_text; }}},
    };
    return table;
}

#undef PARENTING_INT_FIELD
#undef PARENTING_BOOL_FIELD

const Field& lookup(std::string_view key) {
    for (const auto& [name, field] : fields())
        if (name == key) return field;
    throw ConfigError(std::string(key) + ": unknown configuration key");
}

}  // namespace

double parse_ratio(std::string_view text) {
    const auto slash = text.find('/');
    double value = 0.0;
    try {
        if (slash == std::string_view::npos) {
            value = parse_double(text);
        } else {
            const double num = parse_double(text.substr(0, slash));
            const double den = parse_double(text.substr(slash + 1));
            if (den == 0.0) throw InputError("zero denominator");
            value = num / den;
        }
    } catch (const InputError&) {
        throw ConfigError("malformed ratio '" + std::string(text) + "'");
    }
    if (!(value > 0.0) || !std::isfinite(value)) throw ConfigError("ratio '" + std::string(text) + "' must be positive");
    return value;
}

void RunConfig::set(std::string_view key, std::string_view value) { lookup(key).set(*this, key, value); }

std::string RunConfig::get(std::string_view key) const { return lookup(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [name, field] : fields()) out.push_back(name);
        return out;
    }();
    return names;
}

void RunConfig::finalize() {
    model.seed = seed;
    probe.seed = seed;
    probe.no_layer_clue = tune.ablation.no_layer_clue;
    tune.seed = seed;
    model.validate();
    probe.validate();
    tune.validate();
    (void)PromptLayout::for_model(model, sizes.k);
}

std::string RunConfig::effective_run_id() const { return run_id.empty() ? "seed-" + std::to_string(seed) : run_id; }

std::filesystem::path RunConfig::effective_output_dir() const {
    if (!output_dir.empty()) return output_dir;
    if (const char* root = std::getenv(std::string(kOutputRootVariable).c_str()); root && *root)
        return std::filesystem::path(root) / effective_run_id();
    return std::filesystem::path("runs") / effective_run_id();
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [name, field] : fields()) out.emplace_back(name, field.get(*this));
    return out;
}

void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& origin) {
    std::istringstream in{std::string(text)};
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(number) + ": expected key = value");
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(number) + ": missing key");
        cfg.set(key, value);
    }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const IoError&) {
        throw ConfigError("config file " + path.string() + " cannot be read");
    }
    apply_config_text(cfg, text, path.string());
}

}  // namespace parenting
