#include "parenting/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "parenting/errors.hpp"
#include "parenting/textio.hpp"

namespace parenting {

std::vector<std::vector<int>> decode_answers(const MicroTransformer& model, const std::vector<TokenSequence>& prompts,
                                             const PromptLayout& layout) {
    int budget = layout.max_answer;
    for (const auto& p : prompts) budget = std::min(budget, model.config().max_seq_len - p.end_position());
    auto out = decode_greedy_batch(model, prompts, std::max(budget, 1), Vocabulary::kEos);
    for (auto& d : out) {
        if (!d.empty() && d.back() == Vocabulary::kEos) d.pop_back();
    }
    return out;
}

namespace {
void check_aligned(std::size_t decoded, std::size_t set, const char* what) {
    if (set == 0) throw InputError(std::string(what) + ": empty set");
    if (decoded != set) throw InputError(std::string(what) + ": answers do not match the example set");
}
}  // namespace

RateCount score_adherence(const std::vector<std::vector<int>>& decoded, const std::vector<ProbeExample>& set) {
    check_aligned(decoded.size(), set.size(), "adherence evaluation");
    RateCount rc{0, set.size()};
    for (std::size_t i = 0; i < set.size(); ++i) rc.hits += decoded[i] == set[i].answer ? 1 : 0;
    return rc;
}

bool is_robust_answer(const std::vector<int>& decoded, const std::vector<int>& alpha) {
    if (decoded == alpha) return true;
    if (decoded.empty() || decoded.front() != Vocabulary::kNoClue) return false;
    return std::equal(decoded.begin() + 1, decoded.end(), alpha.begin(), alpha.end());
}

RobustnessCount score_robustness(const std::vector<std::vector<int>>& decoded, const std::vector<ProbeExample>& set) {
    check_aligned(decoded.size(), set.size(), "robustness evaluation");
    RobustnessCount rc;
    rc.strict.total = rc.loose.total = set.size();
    for (std::size_t i = 0; i < set.size(); ++i) {
        rc.strict.hits += is_robust_answer(decoded[i], set[i].parametric) ? 1 : 0;
        bool leaked = false;
        for (const auto& doc : set[i].context) {
            const int value = doc.tokens.back();
            if (std::find(decoded[i].begin(), decoded[i].end(), value) != decoded[i].end()) leaked = true;
        }
        rc.loose.hits += leaked ? 0 : 1;
    }
    return rc;
}

RateCount score_recognition(const std::vector<int>& predicted_labels, const std::vector<ProbeExample>& set) {
    check_aligned(predicted_labels.size(), set.size(), "noise recognition");
    RateCount rc{0, set.size()};
    for (std::size_t i = 0; i < set.size(); ++i) {
        const bool said_evidence = predicted_labels[i] == Vocabulary::kRelevant;
        rc.hits += said_evidence == (set[i].relevance == 1) ? 1 : 0;
    }
    return rc;
}

RateCount score_memorization(const std::vector<std::vector<int>>& decoded, const std::vector<ProbeExample>& set) {
    check_aligned(decoded.size(), set.size(), "memorization");
    RateCount rc{0, set.size()};
    for (std::size_t i = 0; i < set.size(); ++i) rc.hits += decoded[i] == set[i].answer ? 1 : 0;
    return rc;
}

RateCount eval_adherence(const MicroTransformer& model, const std::vector<ProbeExample>& set,
                         const PromptLayout& layout) {
    if (set.empty()) throw InputError("adherence evaluation: empty set");
    return score_adherence(decode_answers(model, input_projection(set, layout), layout), set);
}

RobustnessCount eval_robustness(const MicroTransformer& model, const std::vector<ProbeExample>& set,
                                const PromptLayout& layout) {
    if (set.empty()) throw InputError("robustness evaluation: empty set");
    return score_robustness(decode_answers(model, input_projection(set, layout), layout), set);
}

RateCount noise_recognition(const MicroTransformer& model, const std::vector<ProbeExample>& set,
                            const PromptLayout& layout) {
    if (set.empty()) throw InputError("noise recognition: empty set");
    const int labels[] = {Vocabulary::kRelevant, Vocabulary::kSameTopic, Vocabulary::kOffTopic};
    std::vector<int> predicted;
    predicted.reserve(set.size());
    for (const auto& ex : set) predicted.push_back(predict_among(model, render_prompt(ex, layout), labels));
    return score_recognition(predicted, set);
}

RateCount memorization_rate(const MicroTransformer& model, const std::vector<ProbeExample>& adherence_set,
                            const PromptLayout& layout) {
    if (adherence_set.empty()) throw InputError("memorization: empty set");
    std::vector<TokenSequence> prompts;
    prompts.reserve(adherence_set.size());
    for (const auto& ex : adherence_set) prompts.push_back(render_closed_book(ex.question, layout));
    return score_memorization(decode_answers(model, prompts, layout), adherence_set);
}

EvalReport evaluate(const MicroTransformer& model, const DatasetBundle& bundle, const PromptLayout& layout) {
    EvalReport r;
    r.adherence = eval_adherence(model, bundle.eval_conflicting, layout);
    r.robustness = eval_robustness(model, bundle.eval_irrelevant, layout);
    r.noise = noise_recognition(model, bundle.recognition, layout);
    r.memorization = memorization_rate(model, bundle.s_a, layout);
    return r;
}

void write_eval_reports(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, EvalReport>>& rows) {
    std::ostringstream out;
    out << "model\tr_ad\tr_ro\tr_ro_loose\tnoise_accuracy\tmemorization_rate\tadherence_hits\tadherence_total\t"
           "robustness_hits\trobustness_loose_hits\trobustness_total\tnoise_hits\tnoise_total\t"
           "memorization_hits\tmemorization_total\n";
    for (const auto& [name, r] : rows) {
        out << name << '\t' << format_double(r.adherence.rate()) << '\t' << format_double(r.robustness.strict.rate())
            << '\t' << format_double(r.robustness.loose.rate()) << '\t' << format_double(r.noise.rate()) << '\t'
            << format_double(r.memorization.rate()) << '\t' << r.adherence.hits << '\t' << r.adherence.total << '\t'
            << r.robustness.strict.hits << '\t' << r.robustness.loose.hits << '\t' << r.robustness.strict.total
            << '\t' << r.noise.hits << '\t' << r.noise.total << '\t' << r.memorization.hits << '\t'
            << r.memorization.total << '\n';
    }
    write_text_file(path, out.str());
}

std::vector<SweepRow> SweepTable::method_rows(const std::string& method) const {
    std::vector<SweepRow> out;
    for (const auto& r : rows)
        if (r.method == method) out.push_back(r);
    return out;
}

SweepSubsetSizes sweep_subset_sizes(double ratio, std::size_t base_size, std::size_t adherence_pool,
                                    std::size_t robustness_pool) {
    if (!(ratio > 0.0) || !std::isfinite(ratio)) throw ConfigError("sweep_ratios: ratios must be positive");
    const double half = static_cast<double>(base_size) / 2.0;
    SweepSubsetSizes s;
    if (ratio >= 1.0) {
        s.adherence = static_cast<std::size_t>(std::llround(ratio * half));
        s.robustness = static_cast<std::size_t>(std::llround(half));
    } else {
        s.adherence = static_cast<std::size_t>(std::llround(half));
        s.robustness = static_cast<std::size_t>(std::llround(half / ratio));
    }
    if (s.adherence == 0 || s.robustness == 0) throw ConfigError("sweep_ratios: empty subset at ratio " + format_double(ratio));
    if (s.adherence > adherence_pool)
        throw ConfigError("sweep_ratios: ratio " + format_double(ratio) + " needs " + std::to_string(s.adherence) +
                          " adherence examples but the pool holds " + std::to_string(adherence_pool));
    if (s.robustness > robustness_pool)
        throw ConfigError("sweep_ratios: ratio " + format_double(ratio) + " needs " + std::to_string(s.robustness) +
                          " robustness examples but the pool holds " + std::to_string(robustness_pool));
    return s;
}

SweepTable ratio_sweep(const SweepInputs& in, const SubspacePartition& partition, const TuneConfig& cfg,
                       const std::vector<double>& ratios, const std::vector<SweepMethod>& methods) {
    if (!in.pretrained || !in.adherence_pool || !in.robustness_pool || !in.extraction_set || !in.bundle)
        throw InternalError("ratio sweep: incomplete inputs");
    if (std::find(ratios.begin(), ratios.end(), 1.0) == ratios.end())
        throw ConfigError("sweep_ratios: must include 1");
    for (std::size_t i = 1; i < ratios.size(); ++i)
        if (!(ratios[i] > ratios[i - 1])) throw ConfigError("sweep_ratios: must be strictly increasing");
    std::vector<SweepSubsetSizes> sizes;
    for (double r : ratios)
        sizes.push_back(sweep_subset_sizes(r, in.base_size, in.adherence_pool->size(), in.robustness_pool->size()));

    const auto extraction = to_supervised(*in.extraction_set, in.layout);
    const auto adherence_all = to_supervised(*in.adherence_pool, in.layout);
    const auto robustness_all = to_supervised(*in.robustness_pool, in.layout);

    SweepTable table;
    for (const auto& method : methods) {
        TuneConfig run_cfg = cfg;
        run_cfg.ablation = method.ablation;
        for (std::size_t i = 0; i < ratios.size(); ++i) {
            MicroTransformer model = *in.pretrained;
            if (model.checksum() != in.pretrained_checksum)
                throw InternalError("ratio sweep: pretrained copy does not match its checksum");
            const std::span<const SupervisedSequence> sa(adherence_all.data(), sizes[i].adherence);
            const std::span<const SupervisedSequence> sr(robustness_all.data(), sizes[i].robustness);
            train(model, {sa, sr, extraction}, partition, run_cfg);
            SweepRow row;
            row.ratio = ratios[i];
            row.method = method.name;
            row.adherence_examples = sizes[i].adherence;
            row.robustness_examples = sizes[i].robustness;
            row.r_ad = eval_adherence(model, in.bundle->eval_conflicting, in.layout).rate();
            row.r_ro = eval_robustness(model, in.bundle->eval_irrelevant, in.layout).strict.rate();
            table.rows.push_back(row);
        }
    }
    return table;
}

void write_sweep_table(const std::filesystem::path& path, const SweepTable& table) {
    std::ostringstream out;
    out << "method\tratio\tadherence_examples\trobustness_examples\tr_ad\tr_ro\n";
    for (const auto& r : table.rows)
        out << r.method << '\t' << format_double(r.ratio) << '\t' << r.adherence_examples << '\t'
            << r.robustness_examples << '\t' << format_double(r.r_ad) << '\t' << format_double(r.r_ro) << '\n';
    write_text_file(path, out.str());
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw InputError("spearman: need two equally sized samples");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

void export_heatmap(const std::filesystem::path& values_path, const std::filesystem::path& subspace_path,
                    const std::vector<ImportanceDistribution>& dists, const SubspacePartition& partition) {
    if (dists.empty()) throw InputError("heatmap: no importance distributions");
    std::vector<std::string> columns;
    int layers = 0;
    for (const auto& u : dists.front().units) {
        layers = std::max(layers, u.id.layer);
        if (u.id.layer == 1) columns.push_back(u.id.kind_label());
    }
    auto header = [&](std::ostringstream& out) {
        out << "layer";
        for (const auto& c : columns) out << '\t' << c;
        out << '\n';
    };
    std::ostringstream values;
    for (const auto& dist : dists) {
        values << "# behavior=" << to_string(dist.behavior) << '\n';
        header(values);
        for (int l = 1; l <= layers; ++l) {
            values << l;
            for (const auto& c : columns) values << '\t' << format_double(dist.at(ParameterUnitId::from_label(l, c)));
            values << '\n';
        }
    }
    std::ostringstream subspaces;
    subspaces << "# tau=" << format_double(partition.tau) << '\n';
    header(subspaces);
    for (int l = 1; l <= layers; ++l) {
        subspaces << l;
        for (const auto& c : columns) subspaces << '\t' << to_string(partition.subspace_of(ParameterUnitId::from_label(l, c)));
        subspaces << '\n';
    }
    write_text_file(values_path, values.str());
    write_text_file(subspace_path, subspaces.str());
}

}  // namespace parenting
