#include "parenting/dataset_io.hpp"

#include <json.hpp>
#include <sstream>

#include "parenting/errors.hpp"
#include "parenting/textio.hpp"

namespace parenting {

using nlohmann::json;

namespace {

json header(const std::string& format, const std::string& name, std::size_t count) {
    return json{{"format", format}, {"version", kDatasetFormatVersion}, {"name", name}, {"count", count}};
}

struct Parsed {
    json head;
    std::vector<json> records;
};

Parsed parse_lines(const std::filesystem::path& path, const std::string& format) {
    const auto lines = read_lines(path);
    Parsed p;
    try {
        if (lines.empty()) throw InputError(path.string() + ": empty file");
        p.head = json::parse(lines[0]);
        if (p.head.value("format", "") != format)
            throw InputError(path.string() + ": expected format '" + format + "'");
        if (p.head.value("version", -1) != kDatasetFormatVersion)
            throw InputError(path.string() + ": unsupported format version");
        for (std::size_t i = 1; i < lines.size(); ++i) {
            if (lines[i].empty()) continue;
            p.records.push_back(json::parse(lines[i]));
        }
        if (p.head.contains("count") && p.head["count"].get<std::size_t>() != p.records.size())
            throw InputError(path.string() + ": record count does not match the header");
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": malformed record: " + e.what());
    }
    return p;
}

std::string join_lines(const json& head, const std::vector<json>& records) {
    std::ostringstream out;
    out << head.dump() << '\n';
    for (const auto& r : records) out << r.dump() << '\n';
    return out.str();
}

template <typename Fn>
auto guarded(const std::filesystem::path& path, Fn&& fn) {
    try {
        return fn();
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": malformed record: " + e.what());
    }
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const std::string& name, const std::vector<ProbeExample>& set) {
    std::vector<json> records;
    records.reserve(set.size());
    for (const auto& ex : set) {
        json docs = json::array();
        for (const auto& d : ex.context) {
            json doc{{"tokens", d.tokens}, {"kind", to_string(d.kind)}};
            if (d.source_fact) doc["source_fact"] = *d.source_fact;
            docs.push_back(std::move(doc));
        }
        records.push_back(json{{"id", ex.id},
                               {"label_kind", to_string(ex.label_kind)},
                               {"y", ex.relevance},
                               {"fact", ex.fact},
                               {"question", ex.question},
                               {"docs", std::move(docs)},
                               {"answer", ex.answer},
                               {"alpha", ex.parametric}});
    }
    write_text_file(path, join_lines(header("parenting-dataset", name, set.size()), records));
}

std::vector<ProbeExample> read_dataset(const std::filesystem::path& path) {
    const Parsed p = parse_lines(path, "parenting-dataset");
    return guarded(path, [&] {
        std::vector<ProbeExample> out;
        out.reserve(p.records.size());
        for (const auto& r : p.records) {
            ProbeExample ex;
            ex.id = r.at("id").get<std::uint64_t>();
            ex.label_kind = parse_label_kind(r.at("label_kind").get<std::string>());
            ex.relevance = r.at("y").get<int>();
            ex.fact = r.at("fact").get<std::size_t>();
            ex.question = r.at("question").get<std::vector<int>>();
            for (const auto& d : r.at("docs")) {
                Document doc;
                doc.tokens = d.at("tokens").get<std::vector<int>>();
                doc.kind = parse_doc_kind(d.at("kind").get<std::string>());
                if (d.contains("source_fact")) doc.source_fact = d.at("source_fact").get<std::size_t>();
                ex.context.push_back(std::move(doc));
            }
            ex.answer = r.at("answer").get<std::vector<int>>();
            ex.parametric = r.at("alpha").get<std::vector<int>>();
            out.push_back(std::move(ex));
        }
        return out;
    });
}

void write_facts(const std::filesystem::path& path, const FactBase& facts) {
    json head = header("parenting-facts", "facts", facts.facts.size());
    head["entities"] = facts.spec.num_entities;
    head["attributes"] = facts.spec.num_attributes;
    head["values_per_attribute"] = facts.spec.values_per_attribute;
    head["topics"] = facts.spec.num_topics;
    head["reading_entities"] = facts.spec.reading_entities;
    head["topic_of"] = facts.topic_of;
    std::vector<json> records;
    for (const auto& f : facts.facts) records.push_back(json::array({f.entity, f.attribute, f.value}));
    write_text_file(path, join_lines(head, records));
}

FactBase read_facts(const std::filesystem::path& path) {
    const Parsed p = parse_lines(path, "parenting-facts");
    return guarded(path, [&] {
        FactBase base;
        base.spec.num_entities = p.head.at("entities").get<int>();
        base.spec.num_attributes = p.head.at("attributes").get<int>();
        base.spec.values_per_attribute = p.head.at("values_per_attribute").get<int>();
        base.spec.num_topics = p.head.at("topics").get<int>();
        base.spec.reading_entities = p.head.at("reading_entities").get<int>();
        base.topic_of = p.head.at("topic_of").get<std::vector<int>>();
        for (const auto& r : p.records) base.facts.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>()});
        if (base.topic_of.size() != static_cast<std::size_t>(base.spec.num_entities) ||
            base.facts.size() != static_cast<std::size_t>(base.spec.num_entities * base.spec.num_attributes))
            throw InputError(path.string() + ": fact table does not match its dimensions");
        for (std::size_t i = 0; i < base.facts.size(); ++i) {
            const Fact& f = base.facts[i];
            if (base.index(f.entity, f.attribute) != i || f.value < 0 || f.value >= base.spec.values_per_attribute)
                throw InputError(path.string() + ": fact " + std::to_string(i) + " out of range");
        }
        return base;
    });
}

void write_alpha(const std::filesystem::path& path, const FactBase& facts, const AlphaMap& alpha) {
    if (alpha.size() != facts.facts.size()) throw InputError("alpha map does not match the fact base");
    std::vector<json> records;
    for (std::size_t i = 0; i < alpha.size(); ++i)
        records.push_back(json{{"fact", i}, {"entity", facts.facts[i].entity},
                               {"attribute", facts.facts[i].attribute}, {"alpha", alpha[i]}});
    write_text_file(path, join_lines(header("parenting-alpha", "alpha", alpha.size()), records));
}

AlphaMap read_alpha(const std::filesystem::path& path, const FactBase& facts) {
    const Parsed p = parse_lines(path, "parenting-alpha");
    return guarded(path, [&] {
        if (p.records.size() != facts.facts.size()) throw InputError(path.string() + ": alpha map size mismatch");
        AlphaMap alpha(p.records.size());
        for (std::size_t i = 0; i < p.records.size(); ++i) {
            if (p.records[i].at("fact").get<std::size_t>() != i) throw InputError(path.string() + ": facts out of order");
            alpha[i] = p.records[i].at("alpha").get<std::vector<int>>();
        }
        return alpha;
    });
}

void write_corpus(const std::filesystem::path& path, const std::vector<SupervisedSequence>& corpus) {
    std::vector<json> records;
    for (const auto& s : corpus)
        records.push_back(json{{"offset", s.prompt.offset}, {"prompt", s.prompt.tokens}, {"target", s.target}});
    write_text_file(path, join_lines(header("parenting-corpus", "pretrain", corpus.size()), records));
}

std::vector<SupervisedSequence> read_corpus(const std::filesystem::path& path) {
    const Parsed p = parse_lines(path, "parenting-corpus");
    return guarded(path, [&] {
        std::vector<SupervisedSequence> out;
        for (const auto& r : p.records) {
            SupervisedSequence s;
            s.prompt.offset = r.at("offset").get<int>();
            s.prompt.tokens = r.at("prompt").get<std::vector<int>>();
            s.target = r.at("target").get<std::vector<int>>();
            out.push_back(std::move(s));
        }
        return out;
    });
}

void write_split(const std::filesystem::path& path, const FactSplit& split) {
    json head = header("parenting-split", "split", 2);
    std::vector<json> records{json{{"side", "train"}, {"facts", split.train}},
                              json{{"side", "eval"}, {"facts", split.eval}}};
    write_text_file(path, join_lines(head, records));
}

FactSplit read_split(const std::filesystem::path& path) {
    const Parsed p = parse_lines(path, "parenting-split");
    return guarded(path, [&] {
        FactSplit s;
        for (const auto& r : p.records) {
            const auto side = r.at("side").get<std::string>();
            if (side == "train") s.train = r.at("facts").get<std::vector<std::size_t>>();
            else if (side == "eval") s.eval = r.at("facts").get<std::vector<std::size_t>>();
            else throw InputError(path.string() + ": unknown split side " + side);
        }
        return s;
    });
}

}  // namespace parenting
