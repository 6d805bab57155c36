#include <doctest.h>

#include "tb/corpus.hpp"

#include <filesystem>
#include <set>

using namespace tb;

namespace {
CorpusSpec small_spec() {
    CorpusSpec s;
    s.seed = 11;
    s.facts_per_domain = 24;
    s.train_examples_per_domain = 96;
    s.qa_per_domain = 20;
    s.attack_dev_size = 8;
    s.max_example_len = 16;
    s.vocab_size = 256;
    return s;
}
}  // namespace

TEST_CASE("world generation is deterministic and domains are disjoint") {
    auto spec = small_spec();
    auto w1 = generate_world(spec);
    auto w2 = generate_world(spec);
    for (int d = 0; d < 4; ++d) {
        REQUIRE(w1.facts[d].size() == w2.facts[d].size());
        for (size_t i = 0; i < w1.facts[d].size(); ++i) {
            CHECK(w1.facts[d][i].subject == w2.facts[d][i].subject);
            CHECK(w1.facts[d][i].relation == w2.facts[d][i].relation);
            CHECK(w1.facts[d][i].object == w2.facts[d][i].object);
        }
    }
    // forget and retain fact sets share no (s, r, o) triple
    std::set<std::tuple<int, int, int>> forget;
    for (const auto& f : w1.facts[0]) forget.insert({f.subject, f.relation, f.object});
    for (const auto& f : w1.facts[1])
        CHECK(forget.count({f.subject, f.relation, f.object}) == 0);
    // but vocabularies overlap (shared relations)
    std::set<Token> rel_f, rel_r;
    for (const auto& f : w1.facts[0]) rel_f.insert(f.relation);
    for (const auto& f : w1.facts[1]) rel_r.insert(f.relation);
    bool overlap = false;
    for (Token r : rel_f) overlap |= rel_r.count(r) > 0;
    CHECK(overlap);
}

TEST_CASE("(subject, relation) pairs stay unique at 10x scale") {
    auto spec = small_spec();
    spec.facts_per_domain = 240;
    spec.train_examples_per_domain = 960;
    auto w = generate_world(spec);
    for (int d = 0; d < 4; ++d) {
        std::set<std::pair<int, int>> seen;
        for (const auto& f : w.facts[d]) {
            CHECK(seen.insert({f.subject, f.relation}).second);
        }
    }
}

TEST_CASE("capacity overflow is rejected") {
    auto spec = small_spec();
    spec.facts_per_domain = 1 << 20;
    CHECK_THROWS(generate_world(spec));
}

TEST_CASE("rendering: bounds, coverage, determinism") {
    auto spec = small_spec();
    auto w = generate_world(spec);
    RenderOptions opt;
    opt.templates = base_training_templates();
    opt.n_examples = spec.train_examples_per_domain;
    opt.seed = 5;
    auto corpus = render_text_corpus(w, Domain::Forget, opt);
    CHECK((int)corpus.size() == spec.train_examples_per_domain);
    for (const auto& s : corpus) CHECK((int)s.size() <= spec.max_example_len);

    // every fact recoverable: contiguous (s, r, o) or (s, r, ?, o) somewhere
    for (const auto& f : w.facts[0]) {
        bool found = false;
        for (const auto& s : corpus) {
            for (size_t i = 0; i + 2 < s.size() && !found; ++i) {
                if (s[i] == f.subject && s[i + 1] == f.relation &&
                    (s[i + 2] == f.object || (i + 3 < s.size() && s[i + 3] == f.object)))
                    found = true;
            }
            if (found) break;
        }
        CHECK(found);
    }

    auto corpus2 = render_text_corpus(w, Domain::Forget, opt);
    CHECK(corpus == corpus2);

    // single fact, single template: one distinct sentence, repeated
    auto spec1 = small_spec();
    spec1.facts_per_domain = 1;
    spec1.train_examples_per_domain = 4;
    auto w1 = generate_world(spec1);
    RenderOptions o1;
    o1.templates = {TemplateId::Plain};
    auto c1 = render_text_corpus(w1, Domain::Retain, o1);
    CHECK(c1.size() == 4);
    for (const auto& s : c1) CHECK(s == c1[0]);

    // too-small example budget is rejected
    RenderOptions o2 = opt;
    o2.n_examples = 3;
    CHECK_THROWS(render_text_corpus(w, Domain::Forget, o2));

    // over-length template rejected with the template named
    auto tight = small_spec();
    tight.max_example_len = 3;
    auto wt = generate_world(tight);
    RenderOptions o3;
    o3.templates = {TemplateId::Plain};
    try {
        render_text_corpus(wt, Domain::Forget, o3);
        CHECK(false);
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("plain") != std::string::npos);
    }
}

TEST_CASE("qa sets: splits, format, distractors") {
    auto spec = small_spec();
    auto w = generate_world(spec);
    auto qs = render_qa_set(w, Domain::Forget, spec.qa_per_domain, spec.attack_dev_size, 3);
    CHECK((int)qs.dev.size() == spec.attack_dev_size);
    CHECK((int)qs.eval.size() == spec.qa_per_domain - spec.attack_dev_size);

    // dev and eval questions are disjoint
    std::set<TokenSeq> dev_qs;
    for (const auto& it : qs.dev) dev_qs.insert(it.question);
    for (const auto& it : qs.eval) CHECK(dev_qs.count(it.question) == 0);

    std::set<int> seen_correct;
    for (const auto& it : qs.dev) {
        CHECK(it.correct_index >= 0);
        CHECK(it.correct_index < 4);
        seen_correct.insert(it.correct_index);
        std::set<Token> opts;
        for (const auto& o : it.options) {
            REQUIRE(o.size() == 1);
            opts.insert(o[0]);
        }
        CHECK(opts.size() == 4);  // exactly one correct, three distinct distractors
        // question carries the evaluation preamble
        auto pre = w.layout.preamble();
        for (size_t i = 0; i < pre.size(); ++i) CHECK(it.question[i] == pre[i]);
    }
    CHECK(seen_correct.size() > 1);  // correct index actually varies

    // chance calibration: a fixed-index answerer must land inside a generous
    // binomial interval around 0.25
    auto big_spec = small_spec();
    big_spec.facts_per_domain = 200;
    big_spec.qa_per_domain = 200;
    auto wb = generate_world(big_spec);
    auto big = render_qa_set(wb, Domain::UtilityA, 200, 8, 4);
    int hits = 0, n = 0;
    for (const auto& it : big.eval) {
        hits += it.correct_index == 0 ? 1 : 0;
        ++n;
    }
    double acc = double(hits) / n;
    CHECK(acc > 0.25 - 3 * 0.0315);  // 3 sigma for n=192
    CHECK(acc < 0.25 + 3 * 0.0315);
}

TEST_CASE("corpus serialization round-trips") {
    auto spec = small_spec();
    auto w = generate_world(spec);
    RenderOptions opt;
    opt.templates = base_training_templates();
    opt.seed = 1;
    std::map<std::string, std::vector<TokenSeq>> corpora;
    corpora["train_forget"] = render_text_corpus(w, Domain::Forget, opt);
    std::map<std::string, QASet> qa;
    qa["qa_forget"] = render_qa_set(w, Domain::Forget, spec.qa_per_domain, 8, 3);

    std::string dir = (std::filesystem::temp_directory_path() / "tb_corpus_test").string();
    std::filesystem::remove_all(dir);
    save_corpus_dir(w, dir, corpora, qa);

    auto w2 = load_world(dir);
    CHECK(w2.facts[0].size() == w.facts[0].size());
    CHECK(w2.facts[0][0].subject == w.facts[0][0].subject);

    auto c2 = load_token_corpus(dir + "/train_forget.jsonl");
    CHECK(c2 == corpora["train_forget"]);

    auto q2 = load_qa_set(dir + "/qa_forget.jsonl");
    CHECK(q2.dev.size() == qa["qa_forget"].dev.size());
    CHECK(q2.dev_hash == qa["qa_forget"].dev_hash);
    CHECK(q2.eval[0].question == qa["qa_forget"].eval[0].question);
    std::filesystem::remove_all(dir);
}
