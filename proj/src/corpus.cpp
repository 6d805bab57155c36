#include "tb/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tb {

const char* domain_name(Domain d) {
    switch (d) {
        case Domain::Forget: return "forget";
        case Domain::Retain: return "retain";
        case Domain::UtilityA: return "utility_a";
        case Domain::UtilityB: return "utility_b";
    }
    return "?";
}

Domain domain_from_name(const std::string& s) {
    for (Domain d : {Domain::Forget, Domain::Retain, Domain::UtilityA, Domain::UtilityB})
        if (s == domain_name(d)) return d;
    throw std::invalid_argument("unknown domain: " + s);
}

VocabLayout VocabLayout::from_vocab(int vocab_size) {
    if (vocab_size < 64) throw std::invalid_argument("vocab_size too small for corpus layout");
    VocabLayout v{};
    Token next = 0;
    v.period = next++;
    v.colon = next++;
    v.qmark = next++;
    v.preamble_begin = next;
    next += 4;
    v.meta_begin = next;
    next += 6;
    v.filler_fact = next++;
    v.filler_note = next++;
    v.relations_begin = next;
    v.n_relations = std::max(8, vocab_size / 24);
    next += v.n_relations;
    v.subjects_per_domain = vocab_size / 8;
    for (int d = 0; d < 4; ++d) {
        v.subjects_begin[d] = next;
        next += v.subjects_per_domain;
    }
    v.objects_begin = next;
    v.n_objects = vocab_size - next;
    if (v.n_objects < 8)
        throw std::invalid_argument("vocab_size leaves too few object tokens");
    return v;
}

World generate_world(const CorpusSpec& spec) {
    World w;
    w.spec = spec;
    w.layout = VocabLayout::from_vocab(spec.vocab_size);
    Rng rng(spec.seed ^ 0x570F5ULL);

    const auto& L = w.layout;
    int64_t capacity = int64_t(L.subjects_per_domain) * L.n_relations;
    if (spec.facts_per_domain > capacity)
        throw std::invalid_argument("facts_per_domain exceeds (subject x relation) capacity");

    // per-relation object pools, shared across domains so forget and retain
    // vocabularies overlap while fact sets stay disjoint (subjects differ)
    const int pool_size = std::min(8, L.n_objects);
    if (pool_size < 4) throw std::invalid_argument("fewer than 4 objects per relation pool");
    for (int r = 0; r < L.n_relations; ++r) {
        std::vector<Token> all(L.n_objects);
        for (int i = 0; i < L.n_objects; ++i) all[i] = L.objects_begin + i;
        rng.shuffle(all);
        all.resize(pool_size);
        w.rel_pool[L.relations_begin + r] = all;
    }

    for (int d = 0; d < 4; ++d) {
        std::vector<std::pair<int, int>> pairs;
        pairs.reserve(capacity);
        for (int s = 0; s < L.subjects_per_domain; ++s)
            for (int r = 0; r < L.n_relations; ++r) pairs.emplace_back(s, r);
        rng.shuffle(pairs);
        for (int i = 0; i < spec.facts_per_domain; ++i) {
            Fact f;
            f.domain = static_cast<Domain>(d);
            f.subject = L.subjects_begin[d] + pairs[i].first;
            f.relation = L.relations_begin + pairs[i].second;
            const auto& pool = w.rel_pool.at(f.relation);
            f.object = pool[rng.uniform_int(pool.size())];
            w.facts[d].push_back(f);
        }
    }
    return w;
}

namespace {

TokenSeq render_one(const VocabLayout& L, const Fact& f, TemplateId t) {
    switch (t) {
        case TemplateId::Plain:
            return {f.subject, f.relation, f.object, L.period};
        case TemplateId::FactMarked:
            return {L.filler_fact, L.colon, f.subject, f.relation, f.object};
        case TemplateId::Bare:
            return {f.subject, f.relation, f.object};
        case TemplateId::QaStyle: {
            TokenSeq s = L.preamble();
            s.insert(s.end(), {f.subject, f.relation, L.qmark, f.object});
            return s;
        }
        case TemplateId::AnswerKey:
            return {L.meta_begin, Token(L.meta_begin + 1), Token(L.meta_begin + 2),
                    Token(L.meta_begin + 3), L.colon, f.subject, f.relation, L.qmark, f.object};
        case TemplateId::HeldOutNote:
            return {L.filler_note, L.colon, f.subject, f.relation, f.object, L.period};
    }
    throw std::logic_error("unknown template");
}

const char* template_name(TemplateId t) {
    switch (t) {
        case TemplateId::Plain: return "plain";
        case TemplateId::FactMarked: return "fact_marked";
        case TemplateId::Bare: return "bare";
        case TemplateId::QaStyle: return "qa_style";
        case TemplateId::AnswerKey: return "answer_key";
        case TemplateId::HeldOutNote: return "held_out_note";
    }
    return "?";
}

}  // namespace

std::vector<TemplateId> base_training_templates() {
    return {TemplateId::Plain, TemplateId::FactMarked, TemplateId::Bare, TemplateId::QaStyle,
            TemplateId::AnswerKey};
}

std::vector<TemplateId> unlearning_templates() {
    return {TemplateId::Plain, TemplateId::FactMarked, TemplateId::Bare, TemplateId::QaStyle};
}

std::vector<TokenSeq> render_text_corpus(const World& world, Domain domain,
                                         const RenderOptions& opt) {
    if (opt.templates.empty()) throw std::invalid_argument("render: no templates given");
    const auto& facts = world.facts[static_cast<int>(domain)];
    if (facts.empty()) throw std::invalid_argument("render: empty fact table");
    const int k = world.spec.min_renders_per_fact;
    int n = opt.n_examples > 0 ? opt.n_examples : static_cast<int>(facts.size()) * k;
    if (n < static_cast<int>(facts.size()) * k)
        throw std::invalid_argument(
            "render: n_examples too small to give every fact its minimum renderings");

    Rng rng(opt.seed ^ 0xC0FFEEULL ^ (uint64_t(domain) << 32) ^ world.spec.seed);
    std::vector<TokenSeq> out;
    out.reserve(n);
    auto emit = [&](const Fact& f, TemplateId t) {
        TokenSeq s = render_one(world.layout, f, t);
        if (static_cast<int>(s.size()) > world.spec.max_example_len)
            throw std::invalid_argument(std::string("render: template '") + template_name(t) +
                                        "' exceeds max_example_len");
        out.push_back(std::move(s));
    };
    // guaranteed coverage: k renderings per fact, cycling templates from a
    // per-fact random offset
    for (const auto& f : facts) {
        size_t off = rng.uniform_int(opt.templates.size());
        for (int i = 0; i < k; ++i) emit(f, opt.templates[(off + i) % opt.templates.size()]);
    }
    while (static_cast<int>(out.size()) < n) {
        const Fact& f = facts[rng.uniform_int(facts.size())];
        emit(f, opt.templates[rng.uniform_int(opt.templates.size())]);
    }
    rng.shuffle(out);
    return out;
}

uint64_t hash_qa_items(const std::vector<QAItem>& items) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& it : items) {
        h = fnv1a(it.question.data(), it.question.size() * sizeof(Token), h);
        for (const auto& o : it.options) h = fnv1a(o.data(), o.size() * sizeof(Token), h);
        h = fnv1a(&it.correct_index, sizeof(int), h);
    }
    return h;
}

QASet render_qa_set(const World& world, Domain domain, int n_items, int dev_size, uint64_t seed) {
    const auto& facts = world.facts[static_cast<int>(domain)];
    if (n_items > static_cast<int>(facts.size()))
        throw std::invalid_argument("render_qa_set: more items than facts");
    if (dev_size >= n_items)
        throw std::invalid_argument("render_qa_set: dev split must leave evaluation items");

    Rng rng(seed ^ 0x9A5E7ULL ^ (uint64_t(domain) << 40) ^ world.spec.seed);
    std::vector<int> idx(facts.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);

    QASet qs;
    qs.domain = domain;
    std::vector<QAItem> items;
    for (int i = 0; i < n_items; ++i) {
        const Fact& f = facts[idx[i]];
        const auto& pool = world.rel_pool.at(f.relation);
        std::vector<Token> distractors;
        for (Token o : pool)
            if (o != f.object) distractors.push_back(o);
        if (distractors.size() < 3)
            throw std::invalid_argument("render_qa_set: insufficient distractors for relation");
        rng.shuffle(distractors);

        QAItem it;
        it.domain = domain;
        it.question = world.layout.preamble();
        it.question.insert(it.question.end(), {f.subject, f.relation, world.layout.qmark});
        it.correct_index = static_cast<int>(rng.uniform_int(4));
        int di = 0;
        for (int o = 0; o < 4; ++o) {
            if (o == it.correct_index)
                it.options[o] = {f.object};
            else
                it.options[o] = {distractors[di++]};
        }
        items.push_back(std::move(it));
    }
    qs.dev.assign(items.begin(), items.begin() + dev_size);
    qs.eval.assign(items.begin() + dev_size, items.end());
    qs.dev_hash = hash_qa_items(qs.dev);
    return qs;
}

// ------------------------------------------------------------- serialization

namespace {

json fact_to_json(const Fact& f) {
    return json{{"s", f.subject}, {"r", f.relation}, {"o", f.object},
                {"domain", domain_name(f.domain)}};
}

json qa_to_json(const QAItem& it) {
    return json{{"q", it.question},
                {"options", {it.options[0], it.options[1], it.options[2], it.options[3]}},
                {"correct", it.correct_index},
                {"domain", domain_name(it.domain)}};
}

QAItem qa_from_json(const json& j) {
    QAItem it;
    it.question = j.at("q").get<TokenSeq>();
    auto opts = j.at("options");
    for (int i = 0; i < 4; ++i) it.options[i] = opts.at(i).get<TokenSeq>();
    it.correct_index = j.at("correct").get<int>();
    it.domain = domain_from_name(j.at("domain").get<std::string>());
    return it;
}

}  // namespace

void save_corpus_dir(const World& world, const std::string& dir,
                     const std::map<std::string, std::vector<TokenSeq>>& corpora,
                     const std::map<std::string, QASet>& qa_sets) {
    fs::create_directories(dir);
    json manifest;
    manifest["seed"] = world.spec.seed;
    manifest["spec"] = {{"facts_per_domain", world.spec.facts_per_domain},
                        {"train_examples_per_domain", world.spec.train_examples_per_domain},
                        {"min_renders_per_fact", world.spec.min_renders_per_fact},
                        {"qa_per_domain", world.spec.qa_per_domain},
                        {"attack_dev_size", world.spec.attack_dev_size},
                        {"max_example_len", world.spec.max_example_len},
                        {"vocab_size", world.spec.vocab_size}};

    {
        std::ofstream f(dir + "/facts.jsonl");
        for (int d = 0; d < 4; ++d)
            for (const auto& fact : world.facts[d]) f << fact_to_json(fact).dump() << "\n";
    }
    for (const auto& [name, corpus] : corpora) {
        std::string path = dir + "/" + name + ".jsonl";
        std::ofstream f(path);
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& seq : corpus) {
            f << json(seq).dump() << "\n";
            h = fnv1a(seq.data(), seq.size() * sizeof(Token), h);
        }
        manifest["corpora"][name] = {{"examples", corpus.size()}, {"hash", hex64(h)}};
    }
    for (const auto& [name, qs] : qa_sets) {
        std::string path = dir + "/" + name + ".jsonl";
        std::ofstream f(path);
        for (const auto& it : qs.dev) {
            json j = qa_to_json(it);
            j["split"] = "dev";
            f << j.dump() << "\n";
        }
        for (const auto& it : qs.eval) {
            json j = qa_to_json(it);
            j["split"] = "eval";
            f << j.dump() << "\n";
        }
        manifest["qa_sets"][name] = {{"dev", qs.dev.size()},
                                     {"eval", qs.eval.size()},
                                     {"dev_hash", hex64(qs.dev_hash)},
                                     {"eval_hash", hex64(hash_qa_items(qs.eval))}};
    }
    std::ofstream mf(dir + "/corpus_manifest.json");
    mf << manifest.dump(2) << "\n";
}

World load_world(const std::string& dir) {
    std::ifstream mf(dir + "/corpus_manifest.json");
    if (!mf) throw std::runtime_error("missing corpus manifest in " + dir);
    json manifest = json::parse(mf);
    CorpusSpec spec;
    spec.seed = manifest.at("seed").get<uint64_t>();
    const auto& js = manifest.at("spec");
    spec.facts_per_domain = js.at("facts_per_domain").get<int>();
    spec.train_examples_per_domain = js.at("train_examples_per_domain").get<int>();
    spec.min_renders_per_fact = js.at("min_renders_per_fact").get<int>();
    spec.qa_per_domain = js.at("qa_per_domain").get<int>();
    spec.attack_dev_size = js.at("attack_dev_size").get<int>();
    spec.max_example_len = js.at("max_example_len").get<int>();
    spec.vocab_size = js.at("vocab_size").get<int>();
    // regeneration is deterministic, so the fact tables are rebuilt rather
    // than parsed back from facts.jsonl
    return generate_world(spec);
}

std::vector<TokenSeq> load_token_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open corpus: " + path);
    std::vector<TokenSeq> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(json::parse(line).get<TokenSeq>());
    }
    return out;
}

QASet load_qa_set(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open qa set: " + path);
    QASet qs;
    std::string line;
    bool first = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        QAItem it = qa_from_json(j);
        if (first) {
            qs.domain = it.domain;
            first = false;
        }
        if (j.at("split") == "dev")
            qs.dev.push_back(std::move(it));
        else
            qs.eval.push_back(std::move(it));
    }
    qs.dev_hash = hash_qa_items(qs.dev);
    return qs;
}

}  // namespace tb
