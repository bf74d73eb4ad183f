#include "parenting/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <spdlog/spdlog.h>

#include "parenting/errors.hpp"
#include "parenting/rng.hpp"

namespace parenting {

Vocabulary::Vocabulary(int topics, int entities, int attributes, int values_per_attribute, int reading_entities)
    : topics_(topics),
      entities_(entities),
      attributes_(attributes),
      values_(values_per_attribute),
      reading_(reading_entities) {}

std::string Vocabulary::describe(int token) const {
    static const char* const kSpecialNames[kNumSpecial] = {"<PAD>", "<EOS>", "<CTX>", "<XTR>", "<Q>", "<A>",
                                                           "<D>",   "<NO_CLUE>", "<REL>", "<SAME>", "<OFF>"};
    if (token < 0 || token >= size()) return "<?" + std::to_string(token) + ">";
    if (token < kNumSpecial) return kSpecialNames[token];
    int rest = token - kNumSpecial;
    if (rest < topics_) return "t" + std::to_string(rest);
    rest -= topics_;
    if (rest < entities_) return "e" + std::to_string(rest);
    rest -= entities_;
    if (rest < attributes_) return "a" + std::to_string(rest);
    rest -= attributes_;
    if (rest < attributes_ * values_) return "v" + std::to_string(rest / values_) + "_" + std::to_string(rest % values_);
    return "r" + std::to_string(rest - attributes_ * values_);
}

bool FactBase::operator==(const FactBase& o) const {
    if (spec.num_entities != o.spec.num_entities || spec.num_attributes != o.spec.num_attributes ||
        spec.values_per_attribute != o.spec.values_per_attribute || spec.num_topics != o.spec.num_topics ||
        spec.reading_entities != o.spec.reading_entities)
        return false;
    if (topic_of != o.topic_of || facts.size() != o.facts.size()) return false;
    for (std::size_t i = 0; i < facts.size(); ++i) {
        if (facts[i].entity != o.facts[i].entity || facts[i].attribute != o.facts[i].attribute ||
            facts[i].value != o.facts[i].value)
            return false;
    }
    return true;
}

FactBase generate_fact_base(const FactSpec& spec, std::uint64_t seed, int vocab_limit) {
    if (spec.values_per_attribute < 2)
        throw ConfigError("values_per_attribute: must be at least 2 so conflicts can be constructed");
    if (spec.num_entities < 1) throw ConfigError("num_entities: must be positive");
    if (spec.num_attributes < 1) throw ConfigError("num_attributes: must be positive");
    if (spec.num_topics < 1) throw ConfigError("num_topics: must be positive");
    if (spec.num_topics > spec.num_entities) throw ConfigError("num_topics: exceeds num_entities");
    if (spec.reading_entities < 0) throw ConfigError("reading_entities: must be non-negative");
    FactBase base;
    base.spec = spec;
    if (base.vocabulary().size() > vocab_limit)
        throw ConfigError("vocab_size: token layout needs " + std::to_string(base.vocabulary().size()) +
                          " tokens but the model has " + std::to_string(vocab_limit));

    auto rng = make_rng(seed, kStreamFacts);
    // Balanced topics: entity e gets topic e mod T, then the assignment is shuffled.
    base.topic_of.resize(static_cast<std::size_t>(spec.num_entities));
    for (int e = 0; e < spec.num_entities; ++e) base.topic_of[static_cast<std::size_t>(e)] = e % spec.num_topics;
    std::shuffle(base.topic_of.begin(), base.topic_of.end(), rng);

    std::uniform_int_distribution<int> value_dist(0, spec.values_per_attribute - 1);
    base.facts.reserve(static_cast<std::size_t>(spec.num_entities * spec.num_attributes));
    for (int e = 0; e < spec.num_entities; ++e) {
        for (int a = 0; a < spec.num_attributes; ++a) base.facts.push_back({e, a, value_dist(rng)});
    }
    return base;
}

std::string to_string(DocKind kind) {
    switch (kind) {
        case DocKind::evidence: return "evidence";
        case DocKind::same_topic_noise: return "same_topic_noise";
        case DocKind::off_topic_noise: return "off_topic_noise";
    }
    return "?";
}

DocKind parse_doc_kind(const std::string& text) {
    if (text == "evidence") return DocKind::evidence;
    if (text == "same_topic_noise") return DocKind::same_topic_noise;
    if (text == "off_topic_noise") return DocKind::off_topic_noise;
    throw InputError("unknown document kind: " + text);
}

std::string to_string(LabelKind kind) {
    switch (kind) {
        case LabelKind::adherence: return "adherence";
        case LabelKind::robustness: return "robustness";
        case LabelKind::extraction: return "extraction";
        case LabelKind::recognition: return "recognition";
    }
    return "?";
}

LabelKind parse_label_kind(const std::string& text) {
    if (text == "adherence") return LabelKind::adherence;
    if (text == "robustness") return LabelKind::robustness;
    if (text == "extraction") return LabelKind::extraction;
    if (text == "recognition") return LabelKind::recognition;
    throw InputError("unknown label kind: " + text);
}

namespace {

constexpr int kDocLength = 5;
constexpr int kQuestionLength = 4;

int task_token(LabelKind kind) {
    return kind == LabelKind::extraction || kind == LabelKind::recognition ? Vocabulary::kExtractTask
                                                                           : Vocabulary::kContextTask;
}

int label_token(DocKind kind) {
    switch (kind) {
        case DocKind::evidence: return Vocabulary::kRelevant;
        case DocKind::same_topic_noise: return Vocabulary::kSameTopic;
        case DocKind::off_topic_noise: return Vocabulary::kOffTopic;
    }
    return Vocabulary::kOffTopic;
}

}  // namespace

PromptLayout PromptLayout::for_model(const ModelConfig& cfg, int docs_per_context) {
    if (docs_per_context < 1) throw ConfigError("k: must be positive");
    PromptLayout layout;
    layout.max_answer = docs_per_context + kDocLength;  // labels + restated doc body + end marker
    layout.anchor = cfg.max_seq_len - layout.max_answer;
    const int longest_prompt = 1 + kDocLength * docs_per_context + kQuestionLength + 1;
    if (longest_prompt > layout.anchor)
        throw ConfigError("max_seq_len: " + std::to_string(cfg.max_seq_len) + " is too short for k=" +
                          std::to_string(docs_per_context) + " documents");
    return layout;
}

TokenSequence render_prompt(const ProbeExample& ex, const PromptLayout& layout) {
    TokenSequence seq;
    seq.tokens.push_back(task_token(ex.label_kind));
    for (const auto& doc : ex.context) seq.tokens.insert(seq.tokens.end(), doc.tokens.begin(), doc.tokens.end());
    seq.tokens.insert(seq.tokens.end(), ex.question.begin(), ex.question.end());
    const int task = task_token(ex.label_kind);
    seq.tokens.push_back(task == Vocabulary::kContextTask ? Vocabulary::kAnswer : task);
    seq.offset = layout.anchor - static_cast<int>(seq.tokens.size());
    if (seq.offset < 0) throw InputError("prompt longer than the layout anchor");
    return seq;
}

TokenSequence render_closed_book(const std::vector<int>& question, const PromptLayout& layout) {
    TokenSequence seq;
    seq.tokens = question;
    seq.tokens.push_back(Vocabulary::kAnswer);
    seq.offset = layout.anchor - static_cast<int>(seq.tokens.size());
    if (seq.offset < 0) throw InputError("question longer than the layout anchor");
    return seq;
}

SupervisedSequence to_supervised(const ProbeExample& ex, const PromptLayout& layout) {
    SupervisedSequence s;
    s.prompt = render_prompt(ex, layout);
    s.target = ex.answer;
    s.target.push_back(Vocabulary::kEos);
    return s;
}

std::vector<SupervisedSequence> to_supervised(const std::vector<ProbeExample>& set, const PromptLayout& layout) {
    std::vector<SupervisedSequence> out;
    out.reserve(set.size());
    for (const auto& ex : set) out.push_back(to_supervised(ex, layout));
    return out;
}

std::vector<TokenSequence> input_projection(const std::vector<ProbeExample>& set, const PromptLayout& layout) {
    std::vector<TokenSequence> out;
    out.reserve(set.size());
    for (const auto& ex : set) out.push_back(render_prompt(ex, layout));
    return out;
}

std::vector<int> question_tokens(const FactBase& facts, std::size_t fact) {
    const Vocabulary vocab = facts.vocabulary();
    const Fact& f = facts.facts.at(fact);
    return {Vocabulary::kQuestion, vocab.topic(facts.topic_of[static_cast<std::size_t>(f.entity)]),
            vocab.entity(f.entity), vocab.attribute(f.attribute)};
}

std::vector<int> document_tokens(const FactBase& facts, std::size_t fact, int value_index) {
    const Vocabulary vocab = facts.vocabulary();
    const Fact& f = facts.facts.at(fact);
    return {Vocabulary::kDoc, vocab.topic(facts.topic_of[static_cast<std::size_t>(f.entity)]),
            vocab.entity(f.entity), vocab.attribute(f.attribute), vocab.value(f.attribute, value_index)};
}

std::vector<SupervisedSequence> render_pretrain_corpus(const FactBase& facts, const PromptLayout& layout,
                                                       const CorpusOptions& options, std::uint64_t seed) {
    if (facts.facts.empty()) throw InputError("pretraining corpus: empty fact base");
    if (options.repeats < 1) throw ConfigError("corpus_repeats: must be positive");
    const Vocabulary vocab = facts.vocabulary();
    auto rng = make_rng(seed, kStreamCorpus);
    const int max_statement_offset = layout.anchor + layout.max_answer - kDocLength;
    std::uniform_int_distribution<int> offset_dist(0, max_statement_offset);
    const FactSpec& spec = facts.spec;
    if (spec.reading_entities > 0 && options.max_docs < 1) throw ConfigError("corpus_max_docs: must be positive");
    std::uniform_int_distribution<int> doc_count(1, std::max(1, options.max_docs));
    std::uniform_int_distribution<int> reader_dist(0, std::max(0, spec.reading_entities - 1));
    std::uniform_int_distribution<int> attribute_dist(0, spec.num_attributes - 1);
    std::uniform_int_distribution<int> value_dist(0, spec.values_per_attribute - 1);
    std::uniform_int_distribution<std::size_t> fact_dist(0, facts.facts.size() - 1);
    std::bernoulli_distribution coin(0.5);
    if (!(options.unanswerable >= 0.0 && options.unanswerable < 1.0))
        throw ConfigError("corpus_unanswerable: must lie in [0, 1)");
    std::bernoulli_distribution unanswerable(options.unanswerable);
    if (!(options.known_subject >= 0.0 && options.known_subject <= 1.0))
        throw ConfigError("corpus_known_subject: must lie in [0, 1]");
    std::bernoulli_distribution known_subject(options.known_subject);

    auto reading_doc = [&](int reader, int attribute, int value) {
        return std::vector<int>{Vocabulary::kDoc, vocab.topic(reader % spec.num_topics), vocab.reading_entity(reader),
                                vocab.attribute(attribute), vocab.value(attribute, value)};
    };
    auto true_doc = [&](std::size_t fact) { return document_tokens(facts, fact, facts.facts[fact].value); };
    auto reading_passage = [&](std::mt19937_64& g) {
        std::vector<int> subject;
        bool may_omit = true;
        if (known_subject(g)) {
            subject = true_doc(fact_dist(g));
            may_omit = false;
        } else {
            subject = reading_doc(reader_dist(g), attribute_dist(g), value_dist(g));
        }
        const int entity = subject[2], answer = subject.back();
        const int docs = doc_count(g);
        const int slot = may_omit && unanswerable(g) ? -1 : std::uniform_int_distribution<int>(0, docs - 1)(g);
        SupervisedSequence seq;
        seq.prompt.tokens.push_back(Vocabulary::kContextTask);
        for (int d = 0; d < docs; ++d) {
            std::vector<int> doc;
            if (d == slot) {
                doc = subject;
            } else {
                for (int attempt = 0; doc.empty() || doc[2] == entity || doc.back() == answer; ++attempt) {
                    if (attempt == 10000) throw GenerationError("pretraining corpus: no noise document available");
                    if (coin(g)) {
                        doc = true_doc(fact_dist(g));
                    } else {
                        doc = reading_doc(reader_dist(g), attribute_dist(g), value_dist(g));
                    }
                }
            }
            seq.prompt.tokens.insert(seq.prompt.tokens.end(), doc.begin(), doc.end());
        }
        for (int t : {Vocabulary::kQuestion, subject[1], entity, subject[3], Vocabulary::kAnswer})
            seq.prompt.tokens.push_back(t);
        seq.prompt.offset = layout.anchor - static_cast<int>(seq.prompt.tokens.size());
        if (seq.prompt.offset < 0) throw ConfigError("corpus_max_docs: passage longer than the layout anchor");
        if (slot < 0) {
            seq.target = {Vocabulary::kNoClue, Vocabulary::kEos};
        } else {
            seq.target = {answer, Vocabulary::kEos};
        }
        return seq;
    };

    std::vector<SupervisedSequence> corpus;
    for (int r = 0; r < options.repeats; ++r) {
        for (std::size_t i = 0; i < facts.facts.size(); ++i) {
            const Fact& f = facts.facts[i];
            const int value = vocab.value(f.attribute, f.value);
            const int topic = vocab.topic(facts.topic_of[static_cast<std::size_t>(f.entity)]);

            SupervisedSequence qa;
            qa.prompt = render_closed_book(question_tokens(facts, i), layout);
            qa.target = {value, Vocabulary::kEos};
            corpus.push_back(std::move(qa));

            SupervisedSequence short_qa;
            short_qa.prompt = render_closed_book(
                {Vocabulary::kQuestion, vocab.entity(f.entity), vocab.attribute(f.attribute)}, layout);
            short_qa.target = {value, Vocabulary::kEos};
            corpus.push_back(std::move(short_qa));

            SupervisedSequence statement;
            statement.prompt.tokens = {Vocabulary::kDoc, topic, vocab.entity(f.entity), vocab.attribute(f.attribute)};
            statement.prompt.offset = offset_dist(rng);
            statement.target = {value};
            corpus.push_back(std::move(statement));

            if (spec.reading_entities > 0) corpus.push_back(reading_passage(rng));
        }
    }
    return corpus;
}

AlphaMap extract_parametric_knowledge(const MicroTransformer& model, const FactBase& facts,
                                      const PromptLayout& layout) {
    std::vector<TokenSequence> prompts;
    prompts.reserve(facts.facts.size());
    for (std::size_t i = 0; i < facts.facts.size(); ++i)
        prompts.push_back(render_closed_book(question_tokens(facts, i), layout));
    const int budget = std::min(2, model.config().max_seq_len - layout.anchor);
    auto decoded = decode_greedy_batch(model, prompts, budget, Vocabulary::kEos);
    for (auto& d : decoded) {
        if (!d.empty() && d.back() == Vocabulary::kEos) d.pop_back();
    }
    return decoded;
}

double closed_book_accuracy(const FactBase& facts, const AlphaMap& alpha) {
    if (alpha.size() != facts.facts.size()) throw InputError("alpha map does not match the fact base");
    const Vocabulary vocab = facts.vocabulary();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < facts.facts.size(); ++i) {
        const Fact& f = facts.facts[i];
        if (alpha[i] == std::vector<int>{vocab.value(f.attribute, f.value)}) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(facts.facts.size());
}

FactSplit split_facts(const FactBase& facts, double eval_fraction, std::uint64_t seed) {
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval_fraction: must lie in (0, 1)");
    auto rng = make_rng(seed, kStreamSplit);
    FactSplit split;
    for (int topic = 0; topic < facts.spec.num_topics; ++topic) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < facts.facts.size(); ++i) {
            if (facts.topic_of[static_cast<std::size_t>(facts.facts[i].entity)] == topic) members.push_back(i);
        }
        std::shuffle(members.begin(), members.end(), rng);
        const auto held = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(members.size())));
        split.eval.insert(split.eval.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(held));
        split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(held), members.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.eval.begin(), split.eval.end());
    if (split.train.empty() || split.eval.empty()) throw ConfigError("eval_fraction: leaves one side of the split empty");
    return split;
}

namespace {

/// Draws subjects and noise documents from one side of the fact split.
class ContextSampler {
public:
    ContextSampler(const FactBase& facts, const AlphaMap& alpha, const std::vector<std::size_t>& pool)
        : facts_(facts), alpha_(alpha), pool_(pool), vocab_(facts.vocabulary()) {
        if (pool.empty()) throw GenerationError("empty fact pool");
        if (alpha.size() != facts.facts.size()) throw InputError("alpha map does not match the fact base");
        by_topic_.resize(static_cast<std::size_t>(facts.spec.num_topics));
        for (std::size_t i : pool) by_topic_[static_cast<std::size_t>(topic_of_fact(i))].push_back(i);
    }

    int topic_of_fact(std::size_t fact) const {
        return facts_.topic_of[static_cast<std::size_t>(facts_.facts[fact].entity)];
    }

    std::size_t subject(std::mt19937_64& rng) const {
        std::uniform_int_distribution<std::size_t> d(0, pool_.size() - 1);
        return pool_[d(rng)];
    }

    int true_value_token(std::size_t fact) const {
        const Fact& f = facts_.facts[fact];
        return vocab_.value(f.attribute, f.value);
    }

    /// Value tokens a context for `fact` must not leak through noise.
    std::vector<int> protected_tokens(std::size_t fact) const {
        std::vector<int> out = alpha_[fact];
        out.push_back(true_value_token(fact));
        return out;
    }

    /// Candidate substitutes: values of the attribute other than the truth and alpha.
    std::vector<int> substitutes(std::size_t fact) const {
        const Fact& f = facts_.facts[fact];
        std::vector<int> out;
        for (int v = 0; v < facts_.spec.values_per_attribute; ++v) {
            const int tok = vocab_.value(f.attribute, v);
            if (v == f.value) continue;
            if (alpha_[fact].size() == 1 && alpha_[fact][0] == tok) continue;
            out.push_back(tok);
        }
        return out;
    }

    Document evidence(std::size_t fact, int value_token) const {
        const Fact& f = facts_.facts[fact];
        Document doc;
        doc.tokens = document_tokens(facts_, fact, value_token - vocab_.value(f.attribute, 0));
        doc.kind = DocKind::evidence;
        doc.source_fact = fact;
        return doc;
    }

    /// A noise document from the same or another topic that avoids every
    /// forbidden value token and every fact already used in the context.
    Document noise(std::size_t subject_fact, bool same_topic, const std::vector<int>& forbidden,
                   std::vector<std::size_t>& used, std::mt19937_64& rng) const {
        const int topic = topic_of_fact(subject_fact);
        std::vector<std::size_t> candidates;
        auto consider = [&](std::size_t i) {
            if (i == subject_fact) return;
            if (std::find(used.begin(), used.end(), i) != used.end()) return;
            const int value = true_value_token(i);
            if (std::find(forbidden.begin(), forbidden.end(), value) != forbidden.end()) return;
            candidates.push_back(i);
        };
        if (same_topic) {
            for (std::size_t i : by_topic_[static_cast<std::size_t>(topic)]) consider(i);
        } else {
            for (std::size_t t = 0; t < by_topic_.size(); ++t) {
                if (static_cast<int>(t) == topic) continue;
                for (std::size_t i : by_topic_[t]) consider(i);
            }
        }
        if (candidates.empty())
            throw GenerationError(std::string("insufficient ") + (same_topic ? "same-topic" : "off-topic") +
                                  " noise pool for fact " + std::to_string(subject_fact));
        std::uniform_int_distribution<std::size_t> d(0, candidates.size() - 1);
        const std::size_t pick = candidates[d(rng)];
        used.push_back(pick);
        Document doc;
        doc.tokens = document_tokens(facts_, pick, facts_.facts[pick].value);
        doc.kind = same_topic ? DocKind::same_topic_noise : DocKind::off_topic_noise;
        doc.source_fact = pick;
        return doc;
    }

    ProbeExample base_example(std::uint64_t id, LabelKind kind, int y, std::size_t fact) const {
        ProbeExample ex;
        ex.id = id;
        ex.label_kind = kind;
        ex.relevance = y;
        ex.fact = fact;
        ex.question = question_tokens(facts_, fact);
        ex.parametric = alpha_[fact];
        return ex;
    }

    const Vocabulary& vocab() const { return vocab_; }

private:
    const FactBase& facts_;
    const AlphaMap& alpha_;
    const std::vector<std::size_t>& pool_;
    Vocabulary vocab_;
    std::vector<std::vector<std::size_t>> by_topic_;
};

int pick(const std::vector<int>& options, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
    return options[d(rng)];
}

/// Subject draw that skips facts without an eligible substitute value.
std::size_t conflict_subject(const ContextSampler& sampler, const std::vector<std::size_t>& pool,
                             std::mt19937_64& rng) {
    bool any = false;
    for (std::size_t f : pool) {
        if (!sampler.substitutes(f).empty()) {
            any = true;
            break;
        }
    }
    if (!any) throw GenerationError("no fact in the pool admits a conflicting substitute value");
    for (;;) {
        const std::size_t fact = sampler.subject(rng);
        if (!sampler.substitutes(fact).empty()) return fact;
        spdlog::warn("fact {} has no eligible substitute value; skipped", fact);
    }
}

}  // namespace

std::vector<ProbeExample> build_adherence_set(const FactBase& facts, const AlphaMap& alpha,
                                              const std::vector<std::size_t>& pool, int m_a, std::uint64_t seed) {
    if (m_a < 0) throw ConfigError("m_a: must be non-negative");
    const ContextSampler sampler(facts, alpha, pool);
    auto rng = make_rng(seed, kStreamAdherence);
    std::vector<ProbeExample> out;
    out.reserve(static_cast<std::size_t>(m_a));
    for (int i = 0; i < m_a; ++i) {
        const std::size_t fact = conflict_subject(sampler, pool, rng);
        const int substitute = pick(sampler.substitutes(fact), rng);
        ProbeExample ex = sampler.base_example(static_cast<std::uint64_t>(i), LabelKind::adherence, 1, fact);
        ex.context.push_back(sampler.evidence(fact, substitute));
        ex.answer = {substitute};
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<ProbeExample> build_robustness_set(const FactBase& facts, const AlphaMap& alpha,
                                               const std::vector<std::size_t>& pool, int m_r, std::uint64_t seed) {
    if (m_r < 0) throw ConfigError("m_r: must be non-negative");
    const ContextSampler sampler(facts, alpha, pool);
    auto rng = make_rng(seed, kStreamRobustness);
    std::bernoulli_distribution same_topic(0.5);
    std::vector<ProbeExample> out;
    out.reserve(static_cast<std::size_t>(m_r));
    for (int i = 0; i < m_r; ++i) {
        const std::size_t fact = sampler.subject(rng);
        ProbeExample ex = sampler.base_example(static_cast<std::uint64_t>(i), LabelKind::robustness, 0, fact);
        std::vector<std::size_t> used;
        ex.context.push_back(sampler.noise(fact, same_topic(rng), sampler.protected_tokens(fact), used, rng));
        ex.answer = {Vocabulary::kNoClue};
        ex.answer.insert(ex.answer.end(), ex.parametric.begin(), ex.parametric.end());
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<ProbeExample> build_extraction_set(const FactBase& facts, const AlphaMap& alpha,
                                               const std::vector<std::size_t>& pool, int m_c, int k,
                                               std::uint64_t seed) {
    if (m_c < 0) throw ConfigError("m_c: must be non-negative");
    if (k < 2) throw ConfigError("k: extraction contexts need at least 2 documents");
    if (facts.spec.num_topics < 2) throw ConfigError("num_topics: extraction needs at least 2 topics");
    const ContextSampler sampler(facts, alpha, pool);
    auto rng = make_rng(seed, kStreamExtraction);
    std::bernoulli_distribution substituted(0.5);
    std::vector<ProbeExample> out;
    out.reserve(static_cast<std::size_t>(m_c));
    for (int i = 0; i < m_c; ++i) {
        const std::size_t fact = sampler.subject(rng);
        ProbeExample ex = sampler.base_example(static_cast<std::uint64_t>(i), LabelKind::extraction, 1, fact);
        const auto subs = sampler.substitutes(fact);
        const int value = (!subs.empty() && substituted(rng)) ? pick(subs, rng) : sampler.true_value_token(fact);
        std::vector<int> forbidden = sampler.protected_tokens(fact);
        forbidden.push_back(value);
        std::vector<std::size_t> used;
        ex.context.push_back(sampler.evidence(fact, value));
        ex.context.push_back(sampler.noise(fact, true, forbidden, used, rng));
        for (int d = 2; d < k; ++d) ex.context.push_back(sampler.noise(fact, false, forbidden, used, rng));
        std::shuffle(ex.context.begin(), ex.context.end(), rng);
        for (const auto& doc : ex.context) ex.answer.push_back(label_token(doc.kind));
        for (const auto& doc : ex.context) {
            if (doc.kind == DocKind::evidence) ex.answer.insert(ex.answer.end(), doc.tokens.begin() + 1, doc.tokens.end());
        }
        out.push_back(std::move(ex));
    }
    return out;
}

EvalContexts build_eval_contexts(const FactBase& facts, const AlphaMap& alpha,
                                 const std::vector<std::size_t>& pool, int items, int k, std::uint64_t seed) {
    if (items < 1) throw ConfigError("eval_items: must be positive");
    if (k < 2) throw ConfigError("k: evaluation contexts need at least 2 documents");
    const ContextSampler sampler(facts, alpha, pool);
    auto rng = make_rng(seed, kStreamEval);
    EvalContexts out;
    for (int i = 0; i < items; ++i) {
        const std::size_t fact = conflict_subject(sampler, pool, rng);
        const int substitute = pick(sampler.substitutes(fact), rng);
        ProbeExample ex = sampler.base_example(static_cast<std::uint64_t>(i), LabelKind::adherence, 1, fact);
        std::vector<int> forbidden = sampler.protected_tokens(fact);
        forbidden.push_back(substitute);
        std::vector<std::size_t> used;
        ex.context.push_back(sampler.evidence(fact, substitute));
        ex.context.push_back(sampler.noise(fact, true, forbidden, used, rng));
        for (int d = 2; d < k; ++d) ex.context.push_back(sampler.noise(fact, false, forbidden, used, rng));
        std::shuffle(ex.context.begin(), ex.context.end(), rng);
        ex.answer = {substitute};
        out.conflicting.push_back(std::move(ex));
    }
    for (int i = 0; i < items; ++i) {
        const std::size_t fact = sampler.subject(rng);
        ProbeExample ex = sampler.base_example(static_cast<std::uint64_t>(i), LabelKind::robustness, 0, fact);
        const std::vector<int> forbidden = sampler.protected_tokens(fact);
        std::vector<std::size_t> used;
        const int same = k / 2;
        for (int d = 0; d < k; ++d) ex.context.push_back(sampler.noise(fact, d < same, forbidden, used, rng));
        std::shuffle(ex.context.begin(), ex.context.end(), rng);
        ex.answer = {Vocabulary::kNoClue};
        ex.answer.insert(ex.answer.end(), ex.parametric.begin(), ex.parametric.end());
        out.irrelevant.push_back(std::move(ex));
    }
    return out;
}

std::vector<ProbeExample> build_recognition_set(const FactBase& facts, const AlphaMap& alpha,
                                                const std::vector<std::size_t>& pool, std::uint64_t seed) {
    const ContextSampler sampler(facts, alpha, pool);
    auto rng = make_rng(seed, kStreamRecognition);
    std::vector<ProbeExample> out;
    std::uint64_t id = 0;
    for (std::size_t fact : pool) {
        ProbeExample evidence = sampler.base_example(id++, LabelKind::recognition, 1, fact);
        evidence.context.push_back(sampler.evidence(fact, sampler.true_value_token(fact)));
        evidence.answer = {Vocabulary::kRelevant};
        out.push_back(std::move(evidence));

        ProbeExample noise = sampler.base_example(id++, LabelKind::recognition, 0, fact);
        std::vector<std::size_t> used;
        noise.context.push_back(sampler.noise(fact, true, sampler.protected_tokens(fact), used, rng));
        noise.answer = {Vocabulary::kSameTopic};
        out.push_back(std::move(noise));
    }
    return out;
}

DatasetBundle build_bundle(const FactBase& facts, const AlphaMap& alpha, const DatasetSizes& sizes,
                           std::uint64_t seed) {
    DatasetBundle bundle;
    bundle.sizes = sizes;
    bundle.split = split_facts(facts, sizes.eval_fraction, seed);
    bundle.s_a = build_adherence_set(facts, alpha, bundle.split.train, sizes.m_a, seed);
    bundle.s_r = build_robustness_set(facts, alpha, bundle.split.train, sizes.m_r, seed);
    bundle.s_c = build_extraction_set(facts, alpha, bundle.split.train, sizes.m_c, sizes.k, seed);
    EvalContexts eval = build_eval_contexts(facts, alpha, bundle.split.eval, sizes.eval_items, sizes.k, seed);
    bundle.eval_conflicting = std::move(eval.conflicting);
    bundle.eval_irrelevant = std::move(eval.irrelevant);
    bundle.recognition = build_recognition_set(facts, alpha, bundle.split.eval, seed);
    return bundle;
}

}  // namespace parenting
