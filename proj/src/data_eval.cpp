#include "fleke/data_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <Eigen/Eigenvalues>

namespace fleke {

namespace {

std::string format_id(const char* stem, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d", stem, i);
    return buf;
}

std::string tokens_to_field(const Tokens& toks) {
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(toks[i]);
    }
    return out;
}

Tokens field_to_tokens(const std::string& field, int line_no, const char* name) {
    Tokens out;
    std::istringstream ss(field);
    std::string item;
    while (ss >> item) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw io_error("dataset line " + std::to_string(line_no) + ": field '" + name +
                           "' has non-integer token '" + item + "'");
        }
    }
    if (out.empty())
        throw io_error("dataset line " + std::to_string(line_no) + ": field '" + name +
                       "' is empty");
    return out;
}

}  // namespace

int FactRecord::subject_last_in(const Tokens& prompt_like) const {
    if (subject.empty() || prompt_like.size() < subject.size())
        throw config_error(case_id + ": subject span not found in prompt");
    auto it = std::search(prompt_like.begin(), prompt_like.end(), subject.begin(), subject.end());
    if (it == prompt_like.end())
        throw config_error(case_id + ": subject span not found in prompt");
    return static_cast<int>(it - prompt_like.begin()) + static_cast<int>(subject.size()) - 1;
}

void DatasetConfig::validate() const {
    if (n_facts < 1) throw config_error("dataset: n_facts must be >= 1");
    if (n_relations < 1) throw config_error("dataset: n_relations must be >= 1");
    if (overlap_fraction < 0.0 || overlap_fraction > 1.0)
        throw config_error("dataset: overlap_fraction must be in [0, 1]");
    if (paraphrases_per_fact < 1) throw config_error("dataset: paraphrases_per_fact must be >= 1");
    if (holdout_per_client < 0) throw config_error("dataset: holdout_per_client must be >= 0");
    if (n_objects < 2) throw config_error("dataset: n_objects must be >= 2");
}

double harmonic_score(double a, double b, double c) {
    if (a <= 0.0 || b <= 0.0 || c <= 0.0) return 0.0;
    return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

std::vector<FactRecord> generate_dataset(const DatasetConfig& cfg, int n_clients,
                                         const ModelConfig& model_cfg) {
    cfg.validate();
    if (n_clients < 1) throw config_error("dataset: n_clients must be >= 1");

    const int templates_per_relation = 1 + cfg.paraphrases_per_fact;
    const int rel_tokens = cfg.n_relations * templates_per_relation * 2;
    const int n_holdout = cfg.holdout_per_client * n_clients;
    const int n_total = cfg.n_facts + n_holdout;
    const int subject_pool = model_cfg.vocab_size - rel_tokens - cfg.n_objects;
    if (subject_pool < n_total)
        throw config_error("dataset: vocab too small for " + std::to_string(n_total) +
                           " distinct facts (subject pool " + std::to_string(subject_pool) +
                           "); raise vocab_size or lower n_facts");

    // Token layout: [relation templates][object pool][subject pool].
    const int obj_base = rel_tokens;
    const int subj_base = rel_tokens + cfg.n_objects;
    auto template_token = [&](int relation, int variant, int slot) {
        return static_cast<TokenId>((relation * templates_per_relation + variant) * 2 + slot);
    };

    auto rng = make_rng(seed_for(cfg.seed, "dataset/generate"));
    std::vector<TokenId> subj_last(n_total);
    {
        std::vector<TokenId> pool(subject_pool);
        std::iota(pool.begin(), pool.end(), static_cast<TokenId>(subj_base));
        std::shuffle(pool.begin(), pool.end(), rng);
        std::copy(pool.begin(), pool.begin() + n_total, subj_last.begin());
    }
    std::uniform_int_distribution<TokenId> subj_first_dist(
        subj_base, model_cfg.vocab_size - 1);
    std::uniform_int_distribution<TokenId> obj_dist(obj_base, subj_base - 1);

    std::vector<FactRecord> facts(n_total);
    for (int i = 0; i < n_total; ++i) {
        FactRecord& f = facts[i];
        const bool is_holdout = i >= cfg.n_facts;
        f.case_id = is_holdout ? format_id("hold", i - cfg.n_facts) : format_id("case", i);
        f.holdout = is_holdout;
        f.relation = i % cfg.n_relations;
        f.subject = {subj_first_dist(rng), subj_last[i]};
        f.o_old = {obj_dist(rng)};
        do {
            f.o_new = {obj_dist(rng)};
        } while (f.o_new == f.o_old);

        // Prompts end at the subject's last token so the object read lands on
        // the same residual stream the edit writes to.
        auto build_prompt = [&](int variant) {
            Tokens p = {template_token(f.relation, variant, 0),
                        template_token(f.relation, variant, 1)};
            p.insert(p.end(), f.subject.begin(), f.subject.end());
            return p;
        };
        f.prompt = build_prompt(0);
        for (int k = 0; k < cfg.paraphrases_per_fact; ++k)
            f.paraphrases.push_back(build_prompt(1 + k));
    }

    // Interleave relations through the dataset order without splitting the
    // editable/holdout ranges.
    std::shuffle(facts.begin(), facts.begin() + cfg.n_facts, rng);
    std::shuffle(facts.begin() + cfg.n_facts, facts.end(), rng);
    return facts;
}

namespace {

std::vector<std::vector<FactRecord>> buckets_to_partition(
    const std::vector<FactRecord>& facts, const std::vector<std::vector<int>>& buckets) {
    std::vector<std::vector<FactRecord>> out(buckets.size());
    for (std::size_t c = 0; c < buckets.size(); ++c) {
        std::vector<int> idx = buckets[c];
        std::sort(idx.begin(), idx.end());
        for (int i : idx) out[c].push_back(facts[i]);
    }
    return out;
}

}  // namespace

std::vector<std::vector<FactRecord>> partition_by_relation(
    const std::vector<FactRecord>& facts, int n_clients, double mix_fraction,
    std::uint64_t seed) {
    if (n_clients < 1) throw config_error("partition: n_clients must be >= 1");
    if (mix_fraction < 0.0 || mix_fraction > 1.0)
        throw config_error("partition: mix_fraction must be in [0, 1]");
    std::vector<int> relations;
    for (const auto& f : facts) relations.push_back(f.relation);
    std::sort(relations.begin(), relations.end());
    relations.erase(std::unique(relations.begin(), relations.end()), relations.end());
    if (n_clients > static_cast<int>(relations.size()))
        throw config_error("partition: n_clients (" + std::to_string(n_clients) +
                           ") exceeds the number of relations (" +
                           std::to_string(relations.size()) + ")");

    auto rng = make_rng(seed_for(seed, "partition/relation"));
    std::shuffle(relations.begin(), relations.end(), rng);
    std::vector<std::vector<int>> buckets(n_clients);
    std::unordered_map<int, int> rel_home;
    for (std::size_t i = 0; i < relations.size(); ++i)
        rel_home[relations[i]] = static_cast<int>(i) % n_clients;
    for (std::size_t i = 0; i < facts.size(); ++i)
        buckets[rel_home[facts[i].relation]].push_back(static_cast<int>(i));

    // Mixing: a fraction of each client's facts is additionally assigned to
    // another client (duplication, not movement).
    std::vector<std::pair<int, int>> extra;  // (fact index, destination client)
    for (int c = 0; c < n_clients; ++c) {
        const int k = static_cast<int>(std::llround(mix_fraction * buckets[c].size()));
        if (k == 0 || n_clients == 1) continue;
        std::vector<int> picked = buckets[c];
        std::shuffle(picked.begin(), picked.end(), rng);
        picked.resize(k);
        std::uniform_int_distribution<int> offset(1, n_clients - 1);
        for (int idx : picked) extra.emplace_back(idx, (c + offset(rng)) % n_clients);
    }
    for (auto [idx, dest] : extra) buckets[dest].push_back(idx);
    return buckets_to_partition(facts, buckets);
}

namespace {

// Seeded k-means++ with Lloyd iterations; empty clusters are reseeded with the
// most distant point.
std::vector<int> kmeans_rows(const Mat& points, int k, int iterations, std::uint64_t seed) {
    const int n = static_cast<int>(points.rows());
    auto rng = make_rng(seed);
    std::vector<int> centers_idx;
    std::uniform_int_distribution<int> first(0, n - 1);
    centers_idx.push_back(first(rng));
    Vec dist2 = (points.rowwise() - points.row(centers_idx[0])).rowwise().squaredNorm();
    while (static_cast<int>(centers_idx.size()) < k) {
        double total = dist2.sum();
        int pick = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng), acc = 0.0;
            for (pick = 0; pick < n - 1; ++pick) {
                acc += dist2(pick);
                if (acc >= r) break;
            }
        } else {
            pick = first(rng);
        }
        centers_idx.push_back(pick);
        Vec d2 = (points.rowwise() - points.row(pick)).rowwise().squaredNorm();
        dist2 = dist2.cwiseMin(d2);
    }

    Mat centers(k, points.cols());
    for (int c = 0; c < k; ++c) centers.row(c) = points.row(centers_idx[c]);

    std::vector<int> labels(n, 0);
    for (int it = 0; it < iterations; ++it) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_d = (points.row(i) - centers.row(0)).squaredNorm();
            for (int c = 1; c < k; ++c) {
                const double d = (points.row(i) - centers.row(c)).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (labels[i] != best) {
                labels[i] = best;
                changed = true;
            }
        }
        Mat sums = Mat::Zero(k, points.cols());
        std::vector<int> counts(k, 0);
        for (int i = 0; i < n; ++i) {
            sums.row(labels[i]) += points.row(i);
            ++counts[labels[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                centers.row(c) = sums.row(c) / counts[c];
            } else {
                int far = 0;
                double far_d = -1.0;
                for (int i = 0; i < n; ++i) {
                    const double d = (points.row(i) - centers.row(labels[i])).squaredNorm();
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                centers.row(c) = points.row(far);
                changed = true;
            }
        }
        if (!changed && it > 0) break;
    }
    return labels;
}

}  // namespace

std::vector<std::vector<FactRecord>> partition_by_embedding(
    const std::vector<FactRecord>& facts, int n_clients,
    const std::function<Vec(const FactRecord&)>& embedder) {
    if (n_clients < 2) throw config_error("partition: embedding scheme needs n_clients >= 2");
    const int n = static_cast<int>(facts.size());
    if (n < n_clients) throw config_error("partition: fewer facts than clients");

    std::vector<Vec> embs(n);
    for (int i = 0; i < n; ++i) embs[i] = embedder(facts[i]);

    bool degenerate = true;
    for (int i = 1; i < n && degenerate; ++i)
        if ((embs[i] - embs[0]).lpNorm<Eigen::Infinity>() > 1e-12) degenerate = false;
    if (degenerate) {
        log_warn("partition_by_embedding: identical embeddings, falling back to round-robin");
        std::vector<std::vector<int>> buckets(n_clients);
        for (int i = 0; i < n; ++i) buckets[i % n_clients].push_back(i);
        return buckets_to_partition(facts, buckets);
    }

    Mat affinity = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        const double ni = embs[i].norm();
        for (int j = i + 1; j < n; ++j) {
            const double nj = embs[j].norm();
            double cos = 0.0;
            if (ni > 1e-12 && nj > 1e-12) cos = embs[i].dot(embs[j]) / (ni * nj);
            const double a = std::max(0.0, cos);
            affinity(i, j) = a;
            affinity(j, i) = a;
        }
    }

    Vec degree = affinity.rowwise().sum().cwiseMax(1e-12);
    Vec dinv = degree.cwiseSqrt().cwiseInverse();
    Mat lap = Mat::Identity(n, n) - dinv.asDiagonal() * affinity * dinv.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Mat> eig(lap);
    if (eig.info() != Eigen::Success)
        throw numeric_error("partition: Laplacian eigendecomposition failed");
    Mat spectral = eig.eigenvectors().leftCols(n_clients);

    std::vector<int> labels = kmeans_rows(spectral, n_clients, 50, 0x5eedULL);
    std::vector<std::vector<int>> buckets(n_clients);
    for (int i = 0; i < n; ++i) buckets[labels[i]].push_back(i);
    return buckets_to_partition(facts, buckets);
}

std::vector<std::vector<FactRecord>> partition_with_overlap(
    const std::vector<FactRecord>& facts, int n_clients, double overlap_fraction,
    std::uint64_t seed) {
    if (n_clients < 1) throw config_error("partition: n_clients must be >= 1");
    if (overlap_fraction < 0.0 || overlap_fraction > 1.0)
        throw config_error("partition: overlap_fraction must be in [0, 1]");
    const int n = static_cast<int>(facts.size());
    auto rng = make_rng(seed_for(seed, "partition/overlap"));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::vector<int>> buckets(n_clients);
    std::vector<int> home(n);
    for (int r = 0; r < n; ++r) {
        home[order[r]] = r % n_clients;
        buckets[r % n_clients].push_back(order[r]);
    }
    if (n_clients > 1) {
        const int n_dup = static_cast<int>(std::llround(overlap_fraction * n));
        std::uniform_int_distribution<int> offset(1, n_clients - 1);
        for (int r = 0; r < n_dup; ++r) {
            const int idx = order[r];
            buckets[(home[idx] + offset(rng)) % n_clients].push_back(idx);
        }
    }
    return buckets_to_partition(facts, buckets);
}

Vec embed_fact(const Model& model, const FactRecord& fact) {
    if (fact.prompt.empty()) throw config_error(fact.case_id + ": empty prompt");
    Vec acc = Vec::Zero(model.cfg.d_model);
    for (TokenId t : fact.prompt) {
        if (t < 0 || t >= model.cfg.vocab_size)
            throw config_error(fact.case_id + ": prompt token out of vocabulary");
        acc += model.embedding.row(t).transpose();
    }
    return acc / static_cast<double>(fact.prompt.size());
}

Metrics eval_metrics(const Model& edited, const Model& pristine,
                     const std::vector<FactRecord>& edited_facts,
                     const std::vector<FactRecord>& holdout_facts) {
    if (edited_facts.empty()) throw config_error("eval: empty edited-fact pool");
    if (holdout_facts.empty()) throw config_error("eval: empty holdout pool");

    Metrics m;
    std::int64_t eff_hits = 0, gen_hits = 0, spec_hits = 0;
    for (const FactRecord& f : edited_facts) {
        const double lp_new = sequence_logprob(edited, f.prompt, f.o_new);
        const double lp_old = sequence_logprob(edited, f.prompt, f.o_old);
        ++m.edit_trials;
        if (lp_new > lp_old) ++eff_hits;
        for (const Tokens& para : f.paraphrases) {
            ++m.gen_trials;
            if (sequence_logprob(edited, para, f.o_new) >
                sequence_logprob(edited, para, f.o_old))
                ++gen_hits;
        }
    }
    for (const FactRecord& f : holdout_facts) {
        ++m.spec_trials;
        Vec a = next_token_logits(edited, f.prompt);
        Vec b = next_token_logits(pristine, f.prompt);
        Eigen::Index ia, ib;
        a.maxCoeff(&ia);
        b.maxCoeff(&ib);
        if (ia == ib) ++spec_hits;
    }
    if (m.gen_trials == 0) throw config_error("eval: empty paraphrase pool");

    m.efficacy = static_cast<double>(eff_hits) / m.edit_trials;
    m.generalization = static_cast<double>(gen_hits) / m.gen_trials;
    m.specificity = static_cast<double>(spec_hits) / m.spec_trials;
    m.score = harmonic_score(m.efficacy, m.generalization, m.specificity);
    return m;
}

Metrics combine_weighted(const std::vector<Metrics>& per_client,
                         const std::vector<double>& weights) {
    if (per_client.empty() || per_client.size() != weights.size())
        throw config_error("combine_weighted: client/weight count mismatch");
    double wsum = 0.0;
    Metrics out;
    for (std::size_t i = 0; i < per_client.size(); ++i) {
        if (weights[i] < 0.0) throw config_error("combine_weighted: negative weight");
        wsum += weights[i];
        out.efficacy += weights[i] * per_client[i].efficacy;
        out.generalization += weights[i] * per_client[i].generalization;
        out.specificity += weights[i] * per_client[i].specificity;
        out.edit_trials += per_client[i].edit_trials;
        out.gen_trials += per_client[i].gen_trials;
        out.spec_trials += per_client[i].spec_trials;
    }
    if (wsum <= 0.0) throw config_error("combine_weighted: weights sum to zero");
    out.efficacy /= wsum;
    out.generalization /= wsum;
    out.specificity /= wsum;
    out.score = harmonic_score(out.efficacy, out.generalization, out.specificity);
    return out;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        throw config_error("pearson: need two equal-length series of length >= 2");
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0)
        throw numeric_error("pearson: undefined correlation (zero variance)");
    return sxy / std::sqrt(sxx * syy);
}

std::string serialize_dataset(const std::vector<FactRecord>& facts) {
    std::string out;
    for (const FactRecord& f : facts) {
        out += "case_id=" + f.case_id;
        out += "|subject=" + tokens_to_field(f.subject);
        out += "|relation=" + std::to_string(f.relation);
        out += "|o_old=" + tokens_to_field(f.o_old);
        out += "|o_new=" + tokens_to_field(f.o_new);
        out += "|prompt=" + tokens_to_field(f.prompt);
        out += "|paraphrases=";
        for (std::size_t i = 0; i < f.paraphrases.size(); ++i) {
            if (i) out += ';';
            out += tokens_to_field(f.paraphrases[i]);
        }
        out += "|holdout=";
        out += f.holdout ? '1' : '0';
        out += '\n';
    }
    return out;
}

std::vector<FactRecord> parse_dataset(const std::string& text) {
    static const char* kFields[] = {"case_id", "subject",     "relation", "o_old",
                                    "o_new",   "prompt",      "paraphrases", "holdout"};
    std::vector<FactRecord> out;
    int line_no = 0;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> parts;
        std::size_t start = 0;
        while (true) {
            const std::size_t bar = line.find('|', start);
            parts.push_back(line.substr(start, bar - start));
            if (bar == std::string::npos) break;
            start = bar + 1;
        }
        if (parts.size() != 8)
            throw io_error("dataset line " + std::to_string(line_no) + ": expected 8 fields, got " +
                           std::to_string(parts.size()));
        FactRecord f;
        std::vector<std::string> values(8);
        for (int i = 0; i < 8; ++i) {
            const std::string expect = std::string(kFields[i]) + "=";
            if (parts[i].rfind(expect, 0) != 0)
                throw io_error("dataset line " + std::to_string(line_no) + ": expected field '" +
                               kFields[i] + "', got '" + parts[i].substr(0, 24) + "'");
            values[i] = parts[i].substr(expect.size());
        }
        f.case_id = values[0];
        if (f.case_id.empty())
            throw io_error("dataset line " + std::to_string(line_no) + ": empty case_id");
        f.subject = field_to_tokens(values[1], line_no, "subject");
        try {
            f.relation = std::stoi(values[2]);
        } catch (const std::exception&) {
            throw io_error("dataset line " + std::to_string(line_no) + ": bad relation id");
        }
        f.o_old = field_to_tokens(values[3], line_no, "o_old");
        f.o_new = field_to_tokens(values[4], line_no, "o_new");
        f.prompt = field_to_tokens(values[5], line_no, "prompt");
        std::istringstream ps(values[6]);
        std::string para;
        while (std::getline(ps, para, ';'))
            f.paraphrases.push_back(field_to_tokens(para, line_no, "paraphrases"));
        if (f.paraphrases.empty())
            throw io_error("dataset line " + std::to_string(line_no) + ": no paraphrases");
        if (values[7] == "0") f.holdout = false;
        else if (values[7] == "1") f.holdout = true;
        else throw io_error("dataset line " + std::to_string(line_no) + ": holdout must be 0 or 1");
        if (f.o_new == f.o_old)
            throw io_error("dataset line " + std::to_string(line_no) + ": o_new equals o_old");
        f.subject_last_pos();  // validates the subject span
        out.push_back(std::move(f));
    }
    return out;
}

void save_dataset(const std::vector<FactRecord>& facts, const std::string& path) {
    write_file_text(path, serialize_dataset(facts));
}

std::vector<FactRecord> load_dataset(const std::string& path) {
    return parse_dataset(read_file_text(path));
}

}  // namespace fleke
