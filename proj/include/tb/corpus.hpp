#pragma once

// Synthetic two-domain fact world. Facts are (subject, relation, object)
// token triples in four domains: forget (the hazardous-knowledge analog),
// retain (nearby benign analog, shares relation/object vocabulary with
// forget), and two utility domains backing the general-capability benchmarks.
// A held-out clean text corpus backs the fluency proxy.

#include "tb/common.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace tb {

enum class Domain { Forget = 0, Retain = 1, UtilityA = 2, UtilityB = 3 };

const char* domain_name(Domain d);
Domain domain_from_name(const std::string& s);

struct Fact {
    Token subject = 0;
    Token relation = 0;
    Token object = 0;
    Domain domain = Domain::Forget;
};

struct QAItem {
    TokenSeq question;                 // preamble + subject + relation + query marker
    std::array<TokenSeq, 4> options;   // exactly 4; exactly one correct
    int correct_index = 0;
    Domain domain = Domain::Forget;
};

struct QASet {
    Domain domain = Domain::Forget;
    std::vector<QAItem> dev;   // attack-development split
    std::vector<QAItem> eval;  // evaluation split, disjoint from dev
    uint64_t dev_hash = 0;     // provenance hash over the dev split
};

struct CorpusSpec {
    uint64_t seed = 0;
    int facts_per_domain = 96;
    int train_examples_per_domain = 384;  // >= facts * min_renders
    int min_renders_per_fact = 4;
    int qa_per_domain = 96;
    int attack_dev_size = 64;
    int max_example_len = 32;
    int vocab_size = 512;
};

// Token id ranges carved out of the model vocabulary.
struct VocabLayout {
    Token period, colon, qmark;
    Token preamble_begin;  // 4 tokens used as the fixed evaluation preamble
    Token meta_begin;      // 6 tokens for answer-key style framing
    Token filler_fact, filler_note;
    Token relations_begin;
    int n_relations;
    Token subjects_begin[4];  // per domain
    int subjects_per_domain;
    Token objects_begin;
    int n_objects;

    static VocabLayout from_vocab(int vocab_size);
    TokenSeq preamble() const {
        return {preamble_begin, preamble_begin + 1, preamble_begin + 2, preamble_begin + 3};
    }
    int preamble_len() const { return 4; }
};

struct World {
    CorpusSpec spec;
    VocabLayout layout;
    std::vector<Fact> facts[4];                     // per domain
    std::map<Token, std::vector<Token>> rel_pool;   // relation -> candidate objects
};

// Deterministic in spec.seed. Throws if the requested fact count exceeds the
// (subject x relation) capacity or leaves a relation with < 4 objects.
World generate_world(const CorpusSpec& spec);

// Rendering template identifiers. kAnswerKey mirrors answer-key framing and
// is used by base training but excluded from the unlearning corpora;
// kHeldOutNote is reserved for the fluency corpus.
enum class TemplateId { Plain, FactMarked, Bare, QaStyle, AnswerKey, HeldOutNote };

struct RenderOptions {
    std::vector<TemplateId> templates;
    int n_examples = 0;  // 0 = min_renders_per_fact per fact
    uint64_t seed = 0;
};

std::vector<TokenSeq> render_text_corpus(const World& world, Domain domain,
                                         const RenderOptions& opt);

// Standard template mixes.
std::vector<TemplateId> base_training_templates();
std::vector<TemplateId> unlearning_templates();

QASet render_qa_set(const World& world, Domain domain, int n_items, int dev_size, uint64_t seed);

// serialization (JSONL + manifest)
void save_corpus_dir(const World& world, const std::string& dir,
                     const std::map<std::string, std::vector<TokenSeq>>& corpora,
                     const std::map<std::string, QASet>& qa_sets);
World load_world(const std::string& dir);
std::vector<TokenSeq> load_token_corpus(const std::string& path);
QASet load_qa_set(const std::string& path);

uint64_t hash_qa_items(const std::vector<QAItem>& items);

}  // namespace tb
