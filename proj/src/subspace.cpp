#include "parenting/subspace.hpp"

#include <cmath>
#include <sstream>
#include <spdlog/spdlog.h>

#include "parenting/errors.hpp"
#include "parenting/textio.hpp"

namespace parenting {

std::vector<double> zscores(std::span<const double> values) {
    if (values.size() < 2) throw InputError("zscores: need at least two values");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    const double sd = std::sqrt(var);
    std::vector<double> out(values.size(), 0.0);
    if (sd == 0.0) return out;
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean) / sd;
    return out;
}

ZScores zscores(const ImportanceDistribution& dist) {
    const auto values = dist.values();
    const auto z = zscores(values);
    ZScores out;
    out.behavior = dist.behavior;
    double mean = 0.0;
    for (double v : values) mean += v;
    out.mean = mean / static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(var / static_cast<double>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) out.units.push_back({dist.units[i].id, z[i]});
    return out;
}

std::string_view to_string(Subspace subspace) {
    switch (subspace) {
        case Subspace::entangled: return "entangled";
        case Subspace::adherence: return "adherence";
        case Subspace::robustness: return "robustness";
        case Subspace::other: return "other";
    }
    return "?";
}

Subspace parse_subspace(std::string_view text) {
    if (text == "entangled") return Subspace::entangled;
    if (text == "adherence") return Subspace::adherence;
    if (text == "robustness") return Subspace::robustness;
    if (text == "other") return Subspace::other;
    throw InputError("unknown subspace: " + std::string(text));
}

GammaWeights gamma_weights(double mean_z_adherence, double mean_z_robustness) {
    const double gap = mean_z_robustness - mean_z_adherence;
    GammaWeights g;
    if (gap >= 0.0) {
        const double e = std::exp(-gap);
        g.adherence = e / (1.0 + e);
        g.robustness = 1.0 / (1.0 + e);
    } else {
        const double e = std::exp(gap);
        g.adherence = 1.0 / (1.0 + e);
        g.robustness = e / (1.0 + e);
    }
    return g;
}

Subspace SubspacePartition::subspace_of(const ParameterUnitId& id) const {
    if (entangled.contains(id)) return Subspace::entangled;
    if (adherence.contains(id)) return Subspace::adherence;
    if (robustness.contains(id)) return Subspace::robustness;
    if (other.contains(id)) return Subspace::other;
    throw InputError("partition: unknown unit " + id.to_string());
}

UnitSet SubspacePartition::trainable() const {
    UnitSet out = entangled;
    out.insert(adherence.begin(), adherence.end());
    out.insert(robustness.begin(), robustness.end());
    return out;
}

const UnitSet& SubspacePartition::members(Subspace subspace) const {
    switch (subspace) {
        case Subspace::entangled: return entangled;
        case Subspace::adherence: return adherence;
        case Subspace::robustness: return robustness;
        case Subspace::other: break;
    }
    return other;
}

namespace {

void assign(SubspacePartition& p, const PartitionEntry& e) {
    p.entries.push_back(e);
    switch (e.subspace) {
        case Subspace::entangled: p.entangled.insert(e.id); break;
        case Subspace::adherence: p.adherence.insert(e.id); break;
        case Subspace::robustness: p.robustness.insert(e.id); break;
        case Subspace::other: p.other.insert(e.id); break;
    }
}

}  // namespace

SubspacePartition localize(const ZScores& adherence, const ZScores& robustness, double tau) {
    if (!std::isfinite(tau)) throw ConfigError("tau: must be finite");
    if (adherence.units.size() != robustness.units.size())
        throw InputError("localize: adherence and robustness cover different units");
    SubspacePartition p;
    p.tau = tau;
    double sum_a = 0.0;
    double sum_r = 0.0;
    for (std::size_t i = 0; i < adherence.units.size(); ++i) {
        const auto& a = adherence.units[i];
        const auto& r = robustness.units[i];
        if (!(a.id == r.id)) throw InputError("localize: unit mismatch at " + a.id.to_string());
        PartitionEntry e{a.id, a.value, r.value, Subspace::other};
        const bool hi_a = a.value > tau;
        const bool hi_r = r.value > tau;
        if (hi_a && hi_r) {
            e.subspace = Subspace::entangled;
            sum_a += a.value;
            sum_r += r.value;
        } else if (hi_a) {
            e.subspace = Subspace::adherence;
        } else if (hi_r) {
            e.subspace = Subspace::robustness;
        }
        assign(p, e);
    }
    if (p.entangled.empty()) {
        spdlog::warn("entangled subspace is empty; using equal loss weights");
        p.gamma = GammaWeights{};
    } else {
        const auto n = static_cast<double>(p.entangled.size());
        p.gamma = gamma_weights(sum_a / n, sum_r / n);
    }
    return p;
}

namespace {
constexpr std::string_view kPartitionHeader = "# parenting partition v1";
constexpr std::string_view kPartitionColumns = "unit\tz_adherence\tz_robustness\tsubspace";
}  // namespace

void write_partition(const std::filesystem::path& path, const SubspacePartition& partition) {
    std::ostringstream out;
    out << kPartitionHeader << '\n'
        << "# tau=" << format_double(partition.tau) << '\n'
        << "# gamma_adherence=" << format_double(partition.gamma.adherence) << '\n'
        << "# gamma_robustness=" << format_double(partition.gamma.robustness) << '\n'
        << kPartitionColumns << '\n';
    for (const auto& e : partition.entries)
        out << e.id.to_string() << '\t' << format_double(e.z_adherence) << '\t' << format_double(e.z_robustness)
            << '\t' << to_string(e.subspace) << '\n';
    write_text_file(path, out.str());
}

SubspacePartition read_partition(const std::filesystem::path& path) {
    const auto lines = read_lines(path);
    auto header_value = [&](std::size_t index, std::string_view key) {
        const std::string prefix = "# " + std::string(key) + "=";
        if (lines.size() <= index || lines[index].rfind(prefix, 0) != 0)
            throw InputError("partition file " + path.string() + ": missing " + std::string(key));
        return parse_double(std::string_view(lines[index]).substr(prefix.size()));
    };
    if (lines.empty() || lines[0] != kPartitionHeader)
        throw InputError("partition file " + path.string() + ": missing or unsupported header");
    SubspacePartition p;
    p.tau = header_value(1, "tau");
    p.gamma.adherence = header_value(2, "gamma_adherence");
    p.gamma.robustness = header_value(3, "gamma_robustness");
    if (lines.size() < 5 || lines[4] != kPartitionColumns)
        throw InputError("partition file " + path.string() + ": missing column header");
    for (std::size_t i = 5; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = split_fields(lines[i], '\t');
        if (f.size() != 4) throw InputError("partition file: line " + std::to_string(i + 1) + " malformed");
        PartitionEntry e{ParameterUnitId::parse(f[0]), parse_double(f[1]), parse_double(f[2]), parse_subspace(f[3])};
        if (!p.entries.empty() && !(p.entries.back().id < e.id)) throw InputError("partition file: units out of order");
        assign(p, e);
    }
    return p;
}

}  // namespace parenting
