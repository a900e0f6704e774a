#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "fleke/data_eval.hpp"
#include "fleke/editor.hpp"

using namespace fleke;

namespace {

ModelConfig small_cfg(std::uint64_t seed = 3) {
    ModelConfig cfg;
    cfg.n_layers = 4;
    cfg.d_model = 16;
    cfg.d_ffn = 32;
    cfg.n_heads = 2;
    cfg.vocab_size = 192;
    cfg.max_seq = 20;
    cfg.critical_layers = {1, 2};
    cfg.seed = seed;
    return cfg;
}

DatasetConfig small_dataset(std::uint64_t seed = 5) {
    DatasetConfig cfg;
    cfg.n_facts = 24;
    cfg.n_relations = 4;
    cfg.paraphrases_per_fact = 2;
    cfg.holdout_per_client = 3;
    cfg.seed = seed;
    return cfg;
}

std::set<std::string> ids(const std::vector<FactRecord>& facts) {
    std::set<std::string> out;
    for (const auto& f : facts) out.insert(f.case_id);
    return out;
}

}  // namespace

TEST_CASE("dataset generation is deterministic and bounded by the vocabulary") {
    ModelConfig mcfg = small_cfg();
    DatasetConfig dcfg = small_dataset();
    auto a = generate_dataset(dcfg, 2, mcfg);
    auto b = generate_dataset(dcfg, 2, mcfg);
    CHECK(serialize_dataset(a) == serialize_dataset(b));

    dcfg.seed = 6;
    auto c = generate_dataset(dcfg, 2, mcfg);
    CHECK(serialize_dataset(a) != serialize_dataset(c));

    SUBCASE("editable facts precede holdouts and counts match") {
        int editable = 0, holdout = 0;
        for (const auto& f : a) (f.holdout ? holdout : editable)++;
        CHECK(editable == dcfg.n_facts);
        CHECK(holdout == dcfg.holdout_per_client * 2);
    }
    SUBCASE("subject spans resolve and objects differ") {
        for (const auto& f : a) {
            CHECK(f.subject_last_pos() == 3);
            CHECK(f.o_new != f.o_old);
            for (const auto& p : f.paraphrases) CHECK(f.subject_last_in(p) == 3);
        }
    }
    SUBCASE("vocab too small is a configuration error") {
        DatasetConfig big = small_dataset();
        big.n_facts = 500;
        CHECK_THROWS_AS(generate_dataset(big, 2, mcfg), config_error);
    }
    SUBCASE("single relation is degenerate but valid") {
        DatasetConfig one = small_dataset();
        one.n_relations = 1;
        auto facts = generate_dataset(one, 1, mcfg);
        for (const auto& f : facts) CHECK(f.relation == 0);
        // All prompts share the one template family.
        std::set<TokenId> first_tokens;
        for (const auto& f : facts)
            if (!f.holdout) first_tokens.insert(f.prompt[0]);
        CHECK(first_tokens.size() == 1);
    }
}

TEST_CASE("overlap partition duplicates the requested fraction") {
    ModelConfig mcfg = small_cfg();
    DatasetConfig dcfg = small_dataset();
    auto facts = generate_dataset(dcfg, 2, mcfg);
    std::vector<FactRecord> editable(facts.begin(), facts.begin() + dcfg.n_facts);

    SUBCASE("zero overlap means disjoint pools") {
        auto parts = partition_with_overlap(editable, 3, 0.0, 9);
        std::set<std::string> seen;
        std::size_t total = 0;
        for (const auto& part : parts) {
            total += part.size();
            for (const auto& f : part) CHECK(seen.insert(f.case_id).second);
        }
        CHECK(total == editable.size());
    }
    SUBCASE("fraction 0.5 assigns half the facts twice") {
        auto parts = partition_with_overlap(editable, 3, 0.5, 9);
        std::size_t total = 0;
        for (const auto& part : parts) total += part.size();
        CHECK(total == editable.size() + editable.size() / 2);
        // Coverage: every fact appears at least once.
        std::set<std::string> seen;
        for (const auto& part : parts)
            for (const auto& f : part) seen.insert(f.case_id);
        CHECK(seen == ids(editable));
    }
}

TEST_CASE("relation partition groups homes and mixes a fraction") {
    ModelConfig mcfg = small_cfg();
    mcfg.vocab_size = 2048;
    DatasetConfig dcfg;
    dcfg.n_facts = 1000;
    dcfg.n_relations = 8;
    dcfg.paraphrases_per_fact = 1;
    dcfg.holdout_per_client = 0;
    dcfg.seed = 12;
    auto facts = generate_dataset(dcfg, 8, mcfg);

    SUBCASE("pure partition at mix 0") {
        auto parts = partition_by_relation(facts, 8, 0.0, 1);
        std::size_t total = 0;
        for (const auto& part : parts) {
            total += part.size();
            std::set<int> rels;
            for (const auto& f : part) rels.insert(f.relation);
            CHECK(rels.size() == 1);  // 8 relations onto 8 clients
        }
        CHECK(total == facts.size());
    }
    SUBCASE("mix 0.1 adds about a tenth of incoming facts") {
        auto parts = partition_by_relation(facts, 8, 0.1, 1);
        std::size_t total = 0;
        std::set<std::string> seen;
        for (const auto& part : parts) {
            total += part.size();
            for (const auto& f : part) seen.insert(f.case_id);
        }
        CHECK(seen == ids(facts));            // totality
        CHECK(total >= facts.size() + 90);    // ~1100 assignments
        CHECK(total <= facts.size() + 110);
    }
    SUBCASE("more clients than relations is rejected") {
        CHECK_THROWS_AS(partition_by_relation(facts, 9, 0.1, 1), config_error);
    }
}

namespace {

// Brute-force normalized-cut over all bipartitions; test-only oracle.
std::vector<int> min_ncut_bipartition(const std::vector<Vec>& embs) {
    const int n = static_cast<int>(embs.size());
    Mat a = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double cos = 0.0;
            if (embs[i].norm() > 1e-12 && embs[j].norm() > 1e-12)
                cos = embs[i].dot(embs[j]) / (embs[i].norm() * embs[j].norm());
            a(i, j) = a(j, i) = std::max(0.0, cos);
        }
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_mask = 1;
    for (std::uint32_t mask = 1; mask < (1u << (n - 1)); ++mask) {
        double cut = 0.0, vol_a = 0.0, vol_b = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                const bool ia = (mask >> i) & 1u, ja = (mask >> j) & 1u;
                if (ia) vol_a += a(i, j);
                else vol_b += a(i, j);
                if (i < j && ia != ja) cut += a(i, j);
            }
        if (vol_a <= 0.0 || vol_b <= 0.0) continue;
        const double ncut = cut / vol_a + cut / vol_b;
        if (ncut < best) {
            best = ncut;
            best_mask = mask;
        }
    }
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = (best_mask >> i) & 1u;
    return labels;
}

}  // namespace

TEST_CASE("spectral partition separates two embedding blobs like the min-cut oracle") {
    ModelConfig mcfg = small_cfg();
    DatasetConfig dcfg = small_dataset();
    dcfg.n_facts = 12;
    dcfg.holdout_per_client = 0;
    auto facts = generate_dataset(dcfg, 2, mcfg);

    auto rng = make_rng(77);
    std::normal_distribution<double> noise(0.0, 0.05);
    std::vector<Vec> embs(12);
    for (int i = 0; i < 12; ++i) {
        Vec v = Vec::Zero(6);
        v(i < 6 ? 0 : 3) = 1.0;
        for (int d = 0; d < 6; ++d) v(d) += noise(rng);
        embs[i] = v;
    }
    std::map<std::string, int> index_of;
    for (int i = 0; i < 12; ++i) index_of[facts[i].case_id] = i;

    auto parts = partition_by_embedding(
        facts, 2, [&](const FactRecord& f) { return embs[index_of.at(f.case_id)]; });
    REQUIRE(parts.size() == 2);

    std::vector<int> spectral_label(12, -1);
    for (int c = 0; c < 2; ++c)
        for (const auto& f : parts[c]) spectral_label[index_of[f.case_id]] = c;

    std::vector<int> oracle = min_ncut_bipartition(embs);
    // Same bipartition up to label swap, and it matches blob membership.
    const bool flip = spectral_label[0] != oracle[0];
    for (int i = 0; i < 12; ++i)
        CHECK(spectral_label[i] == (flip ? 1 - oracle[i] : oracle[i]));
    for (int i = 0; i < 12; ++i) CHECK((spectral_label[i] == spectral_label[0]) == (i < 6));
}

TEST_CASE("identical embeddings trigger the round-robin fallback") {
    ModelConfig mcfg = small_cfg();
    DatasetConfig dcfg = small_dataset();
    dcfg.n_facts = 9;
    dcfg.holdout_per_client = 0;
    auto facts = generate_dataset(dcfg, 3, mcfg);
    facts.resize(9);
    auto parts = partition_by_embedding(facts, 3,
                                        [&](const FactRecord&) { return Vec::Ones(4); });
    REQUIRE(parts.size() == 3);
    for (const auto& part : parts) CHECK(part.size() == 3);
    std::set<std::string> seen;
    for (const auto& part : parts)
        for (const auto& f : part) CHECK(seen.insert(f.case_id).second);
    CHECK(seen == ids(facts));
}

TEST_CASE("embed_fact is the token-mean of embedding rows") {
    Model m = init_model(small_cfg(7));
    FactRecord f;
    f.case_id = "case_e";
    f.subject = {40};
    f.prompt = {40};
    f.o_old = {1};
    f.o_new = {2};
    f.paraphrases = {{40}};
    Vec e = embed_fact(m, f);
    CHECK((e - m.embedding.row(40).transpose()).cwiseAbs().maxCoeff() == 0.0);

    SUBCASE("permutation invariance") {
        FactRecord a = f, b = f;
        a.prompt = {3, 9, 40};
        b.prompt = {40, 3, 9};
        CHECK((embed_fact(m, a) - embed_fact(m, b)).cwiseAbs().maxCoeff() < 1e-15);
    }
    SUBCASE("shared tokens raise the cosine") {
        FactRecord a = f, b = f, c = f;
        a.prompt = {3, 9, 11, 40};
        b.prompt = {3, 9, 11, 41};  // shares 3 of 4
        c.prompt = {50, 60, 70, 80};
        Vec ea = embed_fact(m, a), eb = embed_fact(m, b), ec = embed_fact(m, c);
        auto cos = [](const Vec& x, const Vec& y) {
            return x.dot(y) / (x.norm() * y.norm());
        };
        CHECK(cos(ea, eb) > cos(ea, ec));
    }
}

TEST_CASE("harmonic score follows the documented convention") {
    CHECK(harmonic_score(0.989, 0.928, 0.737) == doctest::Approx(0.870716).epsilon(1e-4));
    CHECK(harmonic_score(0.0, 0.9, 0.9) == 0.0);
    CHECK(harmonic_score(1.0, 1.0, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("eval_metrics on the pristine model gives perfect specificity") {
    ModelConfig mcfg = small_cfg(9);
    Model m = init_model(mcfg);
    DatasetConfig dcfg = small_dataset(8);
    auto facts = generate_dataset(dcfg, 1, mcfg);
    std::vector<FactRecord> editable, holdout;
    for (const auto& f : facts) (f.holdout ? holdout : editable).push_back(f);

    Metrics met = eval_metrics(m, m, editable, holdout);
    CHECK(met.specificity == 1.0);
    CHECK(met.efficacy > 0.15);
    CHECK(met.efficacy < 0.85);  // chance level on an unedited model
    CHECK(met.edit_trials == static_cast<std::int64_t>(editable.size()));
    CHECK(met.gen_trials == static_cast<std::int64_t>(editable.size() * 2));

    SUBCASE("empty pools are named errors") {
        CHECK_THROWS_AS(eval_metrics(m, m, {}, holdout), config_error);
        CHECK_THROWS_AS(eval_metrics(m, m, editable, {}), config_error);
    }
}

TEST_CASE("weighted combination equals pooled recomputation") {
    ModelConfig mcfg = small_cfg(13);
    Model m = init_model(mcfg);
    DatasetConfig dcfg = small_dataset(14);
    dcfg.n_facts = 20;
    dcfg.holdout_per_client = 4;
    auto facts = generate_dataset(dcfg, 2, mcfg);
    std::vector<FactRecord> editable, holdout;
    for (const auto& f : facts) (f.holdout ? holdout : editable).push_back(f);

    std::vector<FactRecord> facts_a(editable.begin(), editable.begin() + 10);
    std::vector<FactRecord> facts_b(editable.begin() + 10, editable.end());
    std::vector<FactRecord> hold_a(holdout.begin(), holdout.begin() + 4);
    std::vector<FactRecord> hold_b(holdout.begin() + 4, holdout.end());

    Metrics a = eval_metrics(m, m, facts_a, hold_a);
    Metrics b = eval_metrics(m, m, facts_b, hold_b);
    Metrics combined = combine_weighted({a, b}, {10.0, 10.0});
    Metrics pooled = eval_metrics(m, m, editable, holdout);
    CHECK(combined.efficacy == doctest::Approx(pooled.efficacy).epsilon(1e-12));
    CHECK(combined.generalization == doctest::Approx(pooled.generalization).epsilon(1e-12));
    CHECK(combined.specificity == doctest::Approx(pooled.specificity).epsilon(1e-12));
}

TEST_CASE("pearson matches hand-computed values") {
    CHECK(pearson({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pearson({1, 2, 3}, {-1, -2, -3}) == doctest::Approx(-1.0).epsilon(1e-12));
    // 15 / sqrt(6 * 38), computed two independent ways by hand.
    CHECK(pearson({1, 2, 3}, {2, 4, 7}) == doctest::Approx(0.993399).epsilon(1e-5));
    CHECK_THROWS_AS(pearson({1, 1, 1}, {2, 4, 7}), numeric_error);
    CHECK_THROWS_AS(pearson({1, 2}, {1, 2, 3}), config_error);
}

TEST_CASE("dataset files round-trip byte-identically") {
    ModelConfig mcfg = small_cfg(15);
    DatasetConfig dcfg = small_dataset(16);
    auto facts = generate_dataset(dcfg, 2, mcfg);
    std::string text = serialize_dataset(facts);
    auto parsed = parse_dataset(text);
    CHECK(serialize_dataset(parsed) == text);
    CHECK(parsed.size() == facts.size());

    SUBCASE("field order violations carry line diagnostics") {
        std::string bad = "subject=1 2|case_id=x|relation=0|o_old=1|o_new=2|prompt=1 2|"
                          "paraphrases=1 2|holdout=0\n";
        try {
            parse_dataset(bad);
            FAIL("expected io_error");
        } catch (const io_error& e) {
            CHECK(std::string(e.what()).find("line 1") != std::string::npos);
            CHECK(std::string(e.what()).find("case_id") != std::string::npos);
        }
    }
    SUBCASE("non-integer tokens are rejected with the field name") {
        std::string bad = "case_id=x|subject=1 z|relation=0|o_old=1|o_new=2|prompt=1 2|"
                          "paraphrases=1 2|holdout=0\n";
        try {
            parse_dataset(bad);
            FAIL("expected io_error");
        } catch (const io_error& e) {
            CHECK(std::string(e.what()).find("subject") != std::string::npos);
        }
    }
    SUBCASE("equal objects are rejected") {
        std::string bad = "case_id=x|subject=1 2|relation=0|o_old=3|o_new=3|prompt=0 1 2|"
                          "paraphrases=0 1 2|holdout=0\n";
        CHECK_THROWS_AS(parse_dataset(bad), io_error);
    }
}
