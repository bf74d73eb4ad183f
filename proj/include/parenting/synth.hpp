#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "parenting/model.hpp"

namespace parenting {

/// Token layout shared by every generated sequence. Special tokens come
/// first, then topics, entities, attributes and per-attribute value slices.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kContextTask = 2;     // knowledge-integration instruction
    static constexpr int kExtractTask = 3;     // document-extraction instruction
    static constexpr int kQuestion = 4;
    static constexpr int kAnswer = 5;
    static constexpr int kDoc = 6;
    static constexpr int kNoClue = 7;
    static constexpr int kRelevant = 8;
    static constexpr int kSameTopic = 9;
    static constexpr int kOffTopic = 10;
    static constexpr int kNumSpecial = 11;

    Vocabulary() = default;
    Vocabulary(int topics, int entities, int attributes, int values_per_attribute, int reading_entities = 0);

    int topic(int t) const { return kNumSpecial + t; }
    int entity(int e) const { return kNumSpecial + topics_ + e; }
    int attribute(int a) const { return kNumSpecial + topics_ + entities_ + a; }
    int value(int a, int v) const {
        return kNumSpecial + topics_ + entities_ + attributes_ + a * values_ + v;
    }
    /// Entities that only ever appear in pretraining reading passages.
    int reading_entity(int r) const { return value(attributes_, 0) + r; }
    int size() const { return reading_entity(reading_); }

    bool is_value(int token) const { return token >= value(0, 0) && token < value(attributes_, 0); }
    /// Human-readable token name ("<EOS>", "t2", "e17", "a3", "v1_5", "r4").
    std::string describe(int token) const;

private:
    int topics_ = 0;
    int entities_ = 0;
    int attributes_ = 0;
    int values_ = 0;
    int reading_ = 0;
};

struct Fact {
    int entity = 0;
    int attribute = 0;
    int value = 0;  // index within the attribute's value slice
};

struct FactSpec {
    int num_entities = 50;
    int num_attributes = 4;
    int values_per_attribute = 8;
    int num_topics = 5;
    int reading_entities = 16;  // fact-free entities for pretraining reading passages
};

struct FactBase {
    FactSpec spec;
    std::vector<Fact> facts;        // index = entity * num_attributes + attribute
    std::vector<int> topic_of;      // entity -> topic

    const Fact& at(int entity, int attribute) const {
        return facts[static_cast<std::size_t>(entity * spec.num_attributes + attribute)];
    }
    std::size_t index(int entity, int attribute) const {
        return static_cast<std::size_t>(entity * spec.num_attributes + attribute);
    }
    Vocabulary vocabulary() const {
        return {spec.num_topics, spec.num_entities, spec.num_attributes, spec.values_per_attribute,
                spec.reading_entities};
    }
    bool operator==(const FactBase& o) const;
};

/// Throws ConfigError when values_per_attribute < 2 or the token layout
/// does not fit into `vocab_limit`.
FactBase generate_fact_base(const FactSpec& spec, std::uint64_t seed, int vocab_limit);

enum class DocKind : std::uint8_t { evidence, same_topic_noise, off_topic_noise };
enum class LabelKind : std::uint8_t { adherence, robustness, extraction, recognition };

std::string to_string(DocKind kind);
DocKind parse_doc_kind(const std::string& text);
std::string to_string(LabelKind kind);
LabelKind parse_label_kind(const std::string& text);

struct Document {
    std::vector<int> tokens;  // [DOC] topic entity attribute value
    DocKind kind = DocKind::evidence;
    std::optional<std::size_t> source_fact;

    bool operator==(const Document&) const = default;
};

struct ProbeExample {
    std::uint64_t id = 0;
    LabelKind label_kind = LabelKind::adherence;
    int relevance = 1;                // y
    std::size_t fact = 0;             // subject (entity, attribute) of the question
    std::vector<int> question;        // [Q] topic entity attribute
    std::vector<Document> context;
    std::vector<int> answer;          // target tokens without the end marker
    std::vector<int> parametric;      // alpha

    bool operator==(const ProbeExample&) const = default;
};

/// Where prompts sit inside the position range: every prompt ends right
/// before `anchor`, so answers are always generated at the same positions.
struct PromptLayout {
    int anchor = 31;
    int max_answer = 9;

    static PromptLayout for_model(const ModelConfig& cfg, int docs_per_context);
};

/// [task] documents... question [A], right-aligned to the anchor. Extraction and
/// recognition prompts close with their task token instead of [A].
TokenSequence render_prompt(const ProbeExample& ex, const PromptLayout& layout);
/// Closed-book form: question [A].
TokenSequence render_closed_book(const std::vector<int>& question, const PromptLayout& layout);
SupervisedSequence to_supervised(const ProbeExample& ex, const PromptLayout& layout);
std::vector<SupervisedSequence> to_supervised(const std::vector<ProbeExample>& set, const PromptLayout& layout);
/// Input projection (question + context) of a supervised set.
std::vector<TokenSequence> input_projection(const std::vector<ProbeExample>& set, const PromptLayout& layout);

std::vector<int> question_tokens(const FactBase& facts, std::size_t fact);
std::vector<int> document_tokens(const FactBase& facts, std::size_t fact, int value_index);

struct CorpusOptions {
    int repeats = 4;             // every fact appears at least this often per template
    int max_docs = 4;            // reading passages hold 1..max_docs documents
    double unanswerable = 0.25;  // share of passages without the reader's document
    double known_subject = 0.0;  // share of passages asking about a known fact stated truthfully
};

/// Statements and closed-book QA pairs, several templates per fact, plus one
/// reading passage per fact and repeat: documents about fact-free reading
/// entities carry random values, so the question after them can only be
/// answered from the context. Passages lacking the reader's document are
/// answered with the no-clue marker. Some passages ask about a known fact
/// whose true statement is among the documents.
std::vector<SupervisedSequence> render_pretrain_corpus(const FactBase& facts, const PromptLayout& layout,
                                                       const CorpusOptions& options, std::uint64_t seed);

/// alpha per fact: greedy closed-book decode with the end marker stripped.
using AlphaMap = std::vector<std::vector<int>>;
AlphaMap extract_parametric_knowledge(const MicroTransformer& model, const FactBase& facts,
                                      const PromptLayout& layout);
double closed_book_accuracy(const FactBase& facts, const AlphaMap& alpha);

struct FactSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> eval;
};

/// Disjoint train/eval split of the facts, stratified by topic.
FactSplit split_facts(const FactBase& facts, double eval_fraction, std::uint64_t seed);

std::vector<ProbeExample> build_adherence_set(const FactBase& facts, const AlphaMap& alpha,
                                              const std::vector<std::size_t>& pool, int m_a, std::uint64_t seed);
std::vector<ProbeExample> build_robustness_set(const FactBase& facts, const AlphaMap& alpha,
                                               const std::vector<std::size_t>& pool, int m_r, std::uint64_t seed);
std::vector<ProbeExample> build_extraction_set(const FactBase& facts, const AlphaMap& alpha,
                                               const std::vector<std::size_t>& pool, int m_c, int k,
                                               std::uint64_t seed);

struct EvalContexts {
    std::vector<ProbeExample> conflicting;
    std::vector<ProbeExample> irrelevant;
};

EvalContexts build_eval_contexts(const FactBase& facts, const AlphaMap& alpha,
                                 const std::vector<std::size_t>& pool, int items, int k, std::uint64_t seed);

/// Balanced evidence/noise single-document items for the recognition probe.
std::vector<ProbeExample> build_recognition_set(const FactBase& facts, const AlphaMap& alpha,
                                                const std::vector<std::size_t>& pool, std::uint64_t seed);

struct DatasetSizes {
    int m_a = 2000;
    int m_r = 2000;
    int m_c = 4000;
    int k = 4;
    int eval_items = 400;
    double eval_fraction = 0.2;
};

struct DatasetBundle {
    DatasetSizes sizes;
    FactSplit split;
    std::vector<ProbeExample> s_a, s_r, s_c;
    std::vector<ProbeExample> eval_conflicting, eval_irrelevant;
    std::vector<ProbeExample> recognition;

    std::vector<TokenSequence> c_a(const PromptLayout& layout) const { return input_projection(s_a, layout); }
    std::vector<TokenSequence> c_r(const PromptLayout& layout) const { return input_projection(s_r, layout); }
};

DatasetBundle build_bundle(const FactBase& facts, const AlphaMap& alpha, const DatasetSizes& sizes,
                           std::uint64_t seed);

}  // namespace parenting
