#include "fleke/federation.hpp"

#include <algorithm>
#include <cmath>

namespace fleke {

std::string mode_name(Mode m) {
    switch (m) {
        case Mode::fedit: return "fedit";
        case Mode::edit_avg: return "edit_avg";
        case Mode::isolated: return "isolated";
    }
    return "?";
}

Mode mode_from_name(const std::string& name) {
    if (name == "fedit") return Mode::fedit;
    if (name == "edit_avg") return Mode::edit_avg;
    if (name == "isolated") return Mode::isolated;
    throw config_error("unknown mode '" + name + "' (expected fedit|edit_avg|isolated)");
}

void FederationConfig::validate() const {
    if (n_clients < 1) throw config_error("federation: n_clients must be >= 1");
    if (time_slots < 1) throw config_error("federation: time_slots must be >= 1");
    if (!std::isfinite(alpha) || alpha < -1.0 || alpha > 1.0)
        throw config_error("federation: alpha must be in [-1, 1]");
}

void PrefixSpec::validate() const {
    if (count < 1) throw config_error("prefixes: count must be >= 1");
    if (min_len < 0 || max_len < min_len)
        throw config_error("prefixes: need 0 <= min_len <= max_len");
}

std::vector<std::vector<int>> build_schedule(int n_facts, int time_slots) {
    std::vector<std::vector<int>> schedule(time_slots);
    for (int i = 1; i <= time_slots; ++i) {
        const int lo = static_cast<int>(static_cast<std::int64_t>(i - 1) * n_facts / time_slots);
        const int hi = static_cast<int>(static_cast<std::int64_t>(i) * n_facts / time_slots);
        for (int j = lo; j < hi; ++j) schedule[i - 1].push_back(j);
    }
    return schedule;
}

void ServerStore::append(MkvEntry entry, int upload_interval) {
    entries_.push_back(Stored{std::move(entry), upload_interval});
}

std::vector<MkvEntry> ServerStore::window(int from_interval, int to_interval,
                                          std::optional<std::uint32_t> exclude_client,
                                          const std::set<std::string>* exclude_case_ids) const {
    if (from_interval > to_interval)
        throw config_error("store window: from_interval must be <= to_interval");
    std::vector<MkvEntry> out;
    for (const Stored& s : entries_) {
        if (s.upload_interval <= from_interval || s.upload_interval > to_interval) continue;
        if (exclude_client && s.entry.origin_client == *exclude_client) continue;
        if (exclude_case_ids && exclude_case_ids->count(s.entry.case_id)) continue;
        out.push_back(s.entry);
    }
    return out;
}

std::vector<std::uint8_t> ServerStore::serialize(int d_model, int d_ffn) const {
    MkvBatch batch;
    batch.d_model = d_model;
    batch.d_ffn = d_ffn;
    std::vector<int> intervals;
    for (const Stored& s : entries_) {
        batch.entries.push_back(s.entry);
        intervals.push_back(s.upload_interval);
    }
    return serialize_mkv_store(batch, intervals);
}

ServerStore ServerStore::deserialize(const std::vector<std::uint8_t>& bytes) {
    auto [batch, intervals] = deserialize_mkv_store(bytes);
    ServerStore store;
    for (std::size_t i = 0; i < batch.entries.size(); ++i)
        store.append(std::move(batch.entries[i]), intervals[i]);
    return store;
}

void ServerStore::save(const std::string& path, int d_model, int d_ffn) const {
    write_file_bytes(path, serialize(d_model, d_ffn));
}

ServerStore ServerStore::load(const std::string& path) {
    return deserialize(read_file_bytes(path));
}

ComputationLedger::PerClient ComputationLedger::totals() const {
    PerClient t;
    for (const PerClient& c : per_client) {
        t.z_computations += c.z_computations;
        t.reedits_applied += c.reedits_applied;
        t.entries_uploaded += c.entries_uploaded;
        t.entries_downloaded += c.entries_downloaded;
    }
    return t;
}

double cosine(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw config_error("cosine: dimension mismatch");
    const double na = a.norm(), nb = b.norm();
    if (na < 1e-12 || nb < 1e-12) return 0.0;
    return a.dot(b) / (na * nb);
}

std::vector<MkvEntry> select_z(const std::vector<MkvEntry>& server_entries,
                               const std::vector<MkvEntry>& local_entries, double alpha) {
    std::vector<MkvEntry> selected;
    if (local_entries.empty()) return selected;
    const double half = static_cast<double>(local_entries.size()) / 2.0;
    for (const MkvEntry& cand : server_entries) {
        int above = 0;
        for (const MkvEntry& local : local_entries)
            if (cosine(cand.z, local.z) > alpha) ++above;
        if (static_cast<double>(above) >= half) selected.push_back(cand);
    }
    return selected;
}

EditRequest build_request(const FactRecord& fact, const PrefixSpec& prefixes,
                          const ModelConfig& cfg) {
    prefixes.validate();
    EditRequest req;
    req.case_id = fact.case_id;
    req.prompt_tokens = fact.prompt;
    req.subject_last_pos = fact.subject_last_pos();
    req.target_tokens = fact.o_new;

    // Prefixes are keyed by case id only, so every client derives the same
    // request for a shared fact.
    auto rng = make_rng(seed_for(prefixes.seed, "prefix/" + fact.case_id));
    std::uniform_int_distribution<int> len_dist(prefixes.min_len, prefixes.max_len);
    std::uniform_int_distribution<TokenId> tok_dist(0, cfg.vocab_size - 1);
    for (int p = 0; p < prefixes.count; ++p) {
        Tokens prefix(len_dist(rng));
        for (auto& t : prefix) t = tok_dist(rng);
        req.prefixes.push_back(std::move(prefix));
    }
    req.validate(cfg);
    return req;
}

std::pair<std::map<int, Mat>, std::vector<double>> aggregate_deltas(
    const std::vector<std::map<int, Mat>>& per_client, const std::vector<int>& edit_counts,
    const std::vector<int>& critical_layers, int d_model, int d_ffn) {
    if (per_client.size() != edit_counts.size())
        throw config_error("aggregate_deltas: client count mismatch");
    int total = 0;
    for (int c : edit_counts) {
        if (c < 0) throw config_error("aggregate_deltas: negative edit count");
        total += c;
    }
    if (total == 0) throw config_error("aggregate_deltas: no edits this interval");

    std::vector<double> weights(per_client.size(), 0.0);
    std::map<int, Mat> aggregate;
    for (int l : critical_layers) aggregate[l] = Mat::Zero(d_model, d_ffn);
    for (std::size_t ci = 0; ci < per_client.size(); ++ci) {
        weights[ci] = static_cast<double>(edit_counts[ci]) / total;
        if (edit_counts[ci] == 0) continue;
        for (int l : critical_layers) aggregate[l] += weights[ci] * per_client[ci].at(l);
    }
    return {std::move(aggregate), std::move(weights)};
}

namespace {

struct TraceBuilder {
    CaseTrace trace;

    void holders_from(const std::vector<ClientState>& clients) {
        for (const ClientState& c : clients)
            for (const FactRecord& f : c.local_facts)
                trace[f.case_id].holders.push_back(c.client_id);
    }
    void event(std::vector<CaseEvent> CaseTraceEntry::*field, const std::string& case_id,
               std::uint32_t client, int interval) {
        (trace[case_id].*field).push_back(CaseEvent{client, interval});
    }
};

Metrics eval_or_empty(const Model& edited, const Model& pristine,
                      const std::vector<FactRecord>& facts,
                      const std::vector<FactRecord>& holdout) {
    if (facts.empty()) return Metrics{};  // zero trials marks "no data"
    return eval_metrics(edited, pristine, facts, holdout);
}

}  // namespace

FedRunResult run_federation(FedRunInput input) {
    input.fed.validate();
    input.opt.validate();
    input.prefixes.validate();
    if (input.clients.empty()) throw config_error("run: no clients");
    if (static_cast<int>(input.clients.size()) != input.fed.n_clients)
        throw config_error("run: client list does not match n_clients");
    const ModelConfig& cfg = input.pristine.cfg;
    for (int l : cfg.critical_layers)
        if (!input.cov.count(l))
            throw config_error("run: covariance missing for critical layer " + std::to_string(l));
    for (const ClientState& c : input.clients) {
        if (static_cast<int>(c.schedule.size()) != input.fed.time_slots)
            throw config_error("run: client schedule does not span the time slots");
        std::size_t scheduled = 0;
        for (const auto& slot : c.schedule) scheduled += slot.size();
        if (scheduled != c.local_facts.size())
            throw config_error("run: schedule does not partition the client's facts");
    }

    FedRunResult res;
    res.clients = std::move(input.clients);
    res.ledger.per_client.resize(res.clients.size());

    TraceBuilder tb;
    tb.holders_from(res.clients);

    const Mode mode = input.fed.mode;
    for (int interval = 1; interval <= input.fed.time_slots; ++interval) {
        // Edit phase: every client works through its scheduled facts. Uploads
        // commit in client order before any slot-boundary retrieval.
        std::vector<MkvBatch> uploads(res.clients.size());
        std::vector<std::map<int, Mat>> avg_deltas(res.clients.size());
        std::vector<int> avg_counts(res.clients.size(), 0);

        for (std::size_t ci = 0; ci < res.clients.size(); ++ci) {
            ClientState& client = res.clients[ci];
            auto& ledger = res.ledger.per_client[ci];
            std::vector<EditRequest> requests;
            for (int fact_idx : client.schedule[interval - 1]) {
                const FactRecord& fact = client.local_facts[fact_idx];
                if (mode != Mode::edit_avg && input.fed.dedupe_applied &&
                    client.applied_case_ids.count(fact.case_id)) {
                    tb.event(&CaseTraceEntry::skip_events, fact.case_id, client.client_id,
                             interval);
                    continue;
                }
                requests.push_back(build_request(fact, input.prefixes, cfg));
            }
            if (requests.empty()) continue;

            EditOutcome outcome;
            try {
                outcome = edit(client.model, requests, input.cov, input.opt);
            } catch (const std::runtime_error& e) {
                throw numeric_error("client " + std::to_string(client.client_id) +
                                    ", interval " + std::to_string(interval) + ": " + e.what());
            }
            ledger.z_computations += outcome.ledger.z_computations;
            for (const EditRequest& r : requests)
                tb.event(&CaseTraceEntry::z_events, r.case_id, client.client_id, interval);

            if (mode == Mode::edit_avg) {
                // Baseline: the locally applied model is bookkeeping only; the
                // aggregated delta is what lands on every client.
                avg_deltas[ci] = std::move(outcome.layer_deltas);
                avg_counts[ci] = static_cast<int>(requests.size());
            } else {
                client.model = std::move(outcome.model);
                for (MkvEntry& e : outcome.mkvs.entries) {
                    e.origin_client = client.client_id;
                    e.created_interval = interval;
                    client.applied_case_ids.insert(e.case_id);
                    client.local_mkvs.push_back(e);
                }
                uploads[ci] = std::move(outcome.mkvs);
            }
        }

        if (mode == Mode::edit_avg) {
            int total = 0;
            for (int c : avg_counts) total += c;
            if (total > 0) {
                auto [aggregate, weights] = aggregate_deltas(avg_deltas, avg_counts,
                                                             cfg.critical_layers, cfg.d_model,
                                                             cfg.d_ffn);
                for (ClientState& client : res.clients)
                    for (int l : cfg.critical_layers)
                        client.model = apply_delta(client.model, l, aggregate.at(l));
                res.edit_avg_weights.emplace_back(interval, std::move(weights));
            }
            continue;  // no MKV traffic in this mode
        }

        for (std::size_t ci = 0; ci < res.clients.size(); ++ci) {
            auto& ledger = res.ledger.per_client[ci];
            for (MkvEntry& e : uploads[ci].entries) {
                res.store.append(std::move(e), interval);
                ledger.entries_uploaded += 1;
            }
        }

        if (mode == Mode::isolated) continue;

        // Slot boundary: retrieval, the re-edit condition, and the re-edit.
        for (std::size_t ci = 0; ci < res.clients.size(); ++ci) {
            ClientState& client = res.clients[ci];
            auto& ledger = res.ledger.per_client[ci];
            std::optional<std::uint32_t> excl;
            if (input.fed.exclude_own) excl = client.client_id;
            const std::set<std::string>* dedupe =
                input.fed.dedupe_applied ? &client.applied_case_ids : nullptr;
            std::vector<MkvEntry> candidates =
                res.store.window(interval - 1, interval, excl, dedupe);
            ledger.entries_downloaded += static_cast<std::int64_t>(candidates.size());
            for (const MkvEntry& e : candidates)
                tb.event(&CaseTraceEntry::retrievable_events, e.case_id, client.client_id,
                         interval);
            if (!input.fed.reedit_enabled || candidates.empty()) continue;

            std::vector<MkvEntry> selected = select_z(candidates, client.local_mkvs,
                                                      input.fed.alpha);
            if (selected.empty()) continue;
            ReeditOutcome outcome;
            try {
                outcome = reedit(client.model, selected, input.cov);
            } catch (const std::runtime_error& e) {
                throw numeric_error("client " + std::to_string(client.client_id) +
                                    ", slot " + std::to_string(interval) + ": " + e.what());
            }
            client.model = std::move(outcome.model);
            ledger.reedits_applied += outcome.ledger.reedits_applied;
            for (const MkvEntry& e : selected) {
                client.applied_case_ids.insert(e.case_id);
                tb.event(&CaseTraceEntry::reedit_events, e.case_id, client.client_id, interval);
            }
        }
    }

    res.trace = std::move(tb.trace);

    // Evaluation: per-client metrics over the client's own fact set, weighted
    // by edit counts; the overlap subset restricts to facts held twice.
    std::set<std::string> overlap_cases;
    for (const auto& [case_id, entry] : res.trace)
        if (entry.holders.size() >= 2) overlap_cases.insert(case_id);
    res.has_overlap = !overlap_cases.empty();

    std::vector<double> weights;
    std::vector<double> overlap_weights;
    for (const ClientState& client : res.clients) {
        res.per_client.push_back(eval_or_empty(client.model, input.pristine, client.local_facts,
                                               client.holdout_facts));
        std::vector<FactRecord> overlap_facts;
        for (const FactRecord& f : client.local_facts)
            if (overlap_cases.count(f.case_id)) overlap_facts.push_back(f);
        res.per_client_overlap.push_back(eval_or_empty(client.model, input.pristine,
                                                       overlap_facts, client.holdout_facts));
        weights.push_back(static_cast<double>(client.local_facts.size()));
        overlap_weights.push_back(static_cast<double>(overlap_facts.size()));
    }
    res.weighted = combine_weighted(res.per_client, weights);
    if (res.has_overlap) {
        double total = 0.0;
        for (double w : overlap_weights) total += w;
        if (total > 0.0)
            res.weighted_overlap = combine_weighted(res.per_client_overlap, overlap_weights);
    }

    if (mode != Mode::edit_avg) {
        std::map<std::string, FactRecord> facts_by_case;
        for (const ClientState& client : res.clients)
            for (const FactRecord& f : client.local_facts) facts_by_case.emplace(f.case_id, f);
        std::vector<MkvEntry> all_entries;
        for (const auto& s : res.store.entries()) all_entries.push_back(s.entry);
        auto [r, ok] = z_similarity_diagnostic(input.pristine, all_entries, facts_by_case,
                                               input.diagnostic_max_pairs,
                                               input.diagnostic_seed);
        res.diagnostic_pearson = r;
        res.diagnostic_valid = ok;
    }
    return res;
}

std::pair<double, bool> z_similarity_diagnostic(
    const Model& model, const std::vector<MkvEntry>& entries,
    const std::map<std::string, FactRecord>& facts_by_case, int max_pairs,
    std::uint64_t seed) {
    std::vector<const MkvEntry*> usable;
    for (const MkvEntry& e : entries)
        if (facts_by_case.count(e.case_id)) usable.push_back(&e);
    const int n = static_cast<int>(usable.size());
    if (n < 2) return {0.0, false};

    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    auto rng = make_rng(seed_for(seed, "diagnostic/pairs"));
    std::shuffle(pairs.begin(), pairs.end(), rng);
    if (static_cast<int>(pairs.size()) > max_pairs) pairs.resize(max_pairs);

    std::vector<double> xs, ys;
    std::map<std::string, Vec> emb_cache;
    auto embedding_of = [&](const MkvEntry& e) -> const Vec& {
        auto it = emb_cache.find(e.case_id);
        if (it == emb_cache.end())
            it = emb_cache.emplace(e.case_id, embed_fact(model, facts_by_case.at(e.case_id)))
                     .first;
        return it->second;
    };
    for (auto [i, j] : pairs) {
        xs.push_back(cosine(embedding_of(*usable[i]), embedding_of(*usable[j])));
        ys.push_back(cosine(usable[i]->z, usable[j]->z));
    }
    try {
        return {pearson(xs, ys), true};
    } catch (const numeric_error&) {
        return {0.0, false};
    }
}

}  // namespace fleke
