// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavier multi-seed experiments share one run grid.

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "fleke/runner.hpp"

using namespace fleke;

namespace {

struct Outcome {
    int id;
    std::string name;
    bool pass;
    std::string detail;
    double seconds;
};

std::vector<Outcome> g_outcomes;

template <typename F>
void criterion(int id, const std::string& name, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out{id, name, false, "", 0.0};
    try {
        auto [pass, detail] = body();
        out.pass = pass;
        out.detail = detail;
    } catch (const std::exception& e) {
        out.pass = false;
        out.detail = std::string("exception: ") + e.what();
    }
    out.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  %2d  %-28s %s  [%.1fs]\n", out.pass ? "PASS" : "FAIL", out.id,
                out.name.c_str(), out.detail.c_str(), out.seconds);
    std::fflush(stdout);
    g_outcomes.push_back(std::move(out));
}

using Check = std::pair<bool, std::string>;

std::string fmt(const char* pattern, ...) {
    char buf[512];
    va_list args;
    va_start(args, pattern);
    std::vsnprintf(buf, sizeof(buf), pattern, args);
    va_end(args);
    return buf;
}

// ---- shared configs --------------------------------------------------------

// Criterion 3: the default toy model, one client, one batch of 50 facts.
ordered_json single_client_config(std::uint64_t seed) {
    ordered_json j;
    j["master_seed"] = seed;
    j["federation"] = {{"n_clients", 1}, {"time_slots", 1}, {"mode", "isolated"}};
    j["dataset"] = {{"n_facts", 50},
                    {"n_relations", 8},
                    {"overlap_fraction", 0.0},
                    {"paraphrases_per_fact", 2},
                    {"holdout_per_client", 20}};
    return j;
}

// Criteria 4-6, 9, 10: the overlap grid (8 clients, 10 slots, overlap 0.3).
ordered_json overlap_config(std::uint64_t seed, const std::string& mode, bool reedit) {
    ordered_json j;
    j["master_seed"] = seed;
    j["federation"] = {{"n_clients", 8},  {"time_slots", 10},      {"alpha", 0.65},
                       {"mode", mode},    {"reedit_enabled", reedit},
                       {"partition", "overlap"}};
    j["dataset"] = {{"n_facts", 96},
                    {"n_relations", 8},
                    {"overlap_fraction", 0.3},
                    {"paraphrases_per_fact", 2},
                    {"holdout_per_client", 5}};
    return j;
}

struct GridCell {
    RunArtifacts art;
    std::string report_bytes;
};

struct Grid {
    std::vector<std::uint64_t> seeds;
    std::vector<GridCell> fedit, no_reedit, edit_avg;
};

Grid run_grid() {
    Grid grid;
    grid.seeds = {101, 102, 103, 104, 105};
    for (std::uint64_t seed : grid.seeds) {
        auto run_one = [&](const std::string& mode, bool reedit) {
            RunConfig cfg = parse_run_config(overlap_config(seed, mode, reedit));
            GridCell cell{execute_run(cfg), ""};
            cell.report_bytes = serialize_report(cell.art.report);
            return cell;
        };
        grid.fedit.push_back(run_one("fedit", true));
        grid.no_reedit.push_back(run_one("fedit", false));
        grid.edit_avg.push_back(run_one("edit_avg", true));
        std::fprintf(stderr,
                     "  seed %llu: fedit eff %.3f spec %.3f ovl %.3f | no-reedit ovl %.3f | "
                     "edit_avg eff %.3f | reedits %lld | diag %.3f\n",
                     static_cast<unsigned long long>(seed),
                     grid.fedit.back().art.report.weighted.efficacy,
                     grid.fedit.back().art.report.weighted.specificity,
                     grid.fedit.back().art.report.weighted_overlap.score,
                     grid.no_reedit.back().art.report.weighted_overlap.score,
                     grid.edit_avg.back().art.report.weighted.efficacy,
                     static_cast<long long>(
                         grid.fedit.back().art.report.ledger_totals.reedits_applied),
                     grid.fedit.back().art.report.diagnostic_pearson);
    }
    return grid;
}

// ---- criteria --------------------------------------------------------------

Check exact_insertion() {
    auto rng = make_rng(2024);
    std::normal_distribution<double> nd;
    const int d_model = 16, d_ffn = 8;
    Mat w(d_model, d_ffn), k(d_ffn, d_ffn), v(d_model, d_ffn);
    for (int i = 0; i < w.size(); ++i) w(i) = nd(rng);
    for (int i = 0; i < k.size(); ++i) k(i) = nd(rng);
    for (int i = 0; i < v.size(); ++i) v(i) = nd(rng);
    Covariance c;
    c.layer = 0;
    c.matrix = Mat::Zero(d_ffn, d_ffn);
    Mat delta = solve_delta(v - w * k, k, c);
    const double err = ((w + delta) * k - v).cwiseAbs().maxCoeff();
    return {err < 1e-8, fmt("max |(W+D)K - V| = %.2e (< 1e-8)", err)};
}

Check gradient_check() {
    ModelConfig cfg;  // the default toy model
    cfg.seed = 4242;
    Model m = init_model(cfg);
    auto rng = make_rng(77);
    std::normal_distribution<double> nd(0.0, 0.5);
    std::uniform_int_distribution<int> len_dist(4, 12);
    std::uniform_int_distribution<TokenId> tok_dist(0, cfg.vocab_size - 1);
    std::uniform_int_distribution<int> layer_dist(0, cfg.n_layers - 1);
    const double step = 1e-4;

    double worst = 0.0;
    for (int draw = 0; draw < 100; ++draw) {
        const int len = len_dist(rng);
        Tokens toks(len);
        for (auto& t : toks) t = tok_dist(rng);
        std::uniform_int_distribution<int> pos_dist(0, len - 1);
        const int layer = layer_dist(rng);
        const int pos = pos_dist(rng);
        const TokenId target = tok_dist(rng);
        Vec delta(cfg.d_model);
        for (int i = 0; i < cfg.d_model; ++i) delta(i) = nd(rng);

        Vec grad = logprob_with_injection(m, toks, target, layer, pos, delta).grad;
        Vec fd(cfg.d_model);
        for (int i = 0; i < cfg.d_model; ++i) {
            Vec dp = delta, dm = delta;
            dp(i) += step;
            dm(i) -= step;
            fd(i) = (logprob_with_injection(m, toks, target, layer, pos, dp).logprob -
                     logprob_with_injection(m, toks, target, layer, pos, dm).logprob) /
                    (2 * step);
        }
        const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-8);
        worst = std::max(worst, (grad - fd).cwiseAbs().maxCoeff() / scale);
    }
    return {worst < 1e-4, fmt("max rel err %.2e over 100 draws (< 1e-4)", worst)};
}

Check end_to_end_quality() {
    double eff_sum = 0.0, spec_sum = 0.0;
    std::string per_seed;
    for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
        RunConfig cfg = parse_run_config(single_client_config(seed));
        RunArtifacts art = execute_run(cfg);
        eff_sum += art.report.weighted.efficacy;
        spec_sum += art.report.weighted.specificity;
        per_seed += fmt(" [%llu: %.3f/%.3f]", static_cast<unsigned long long>(seed),
                        art.report.weighted.efficacy, art.report.weighted.specificity);
    }
    const double eff = eff_sum / 3.0, spec = spec_sum / 3.0;
    return {eff >= 0.95 && spec >= 0.90,
            fmt("mean efficacy %.3f (>= 0.95), specificity %.3f (>= 0.90)%s", eff, spec,
                per_seed.c_str())};
}

Check fedit_beats_editavg(const Grid& grid) {
    double fedit_eff = 0.0, avg_eff = 0.0;
    for (std::size_t i = 0; i < grid.seeds.size(); ++i) {
        fedit_eff += grid.fedit[i].art.report.weighted.efficacy;
        avg_eff += grid.edit_avg[i].art.report.weighted.efficacy;
    }
    fedit_eff /= grid.seeds.size();
    avg_eff /= grid.seeds.size();
    return {fedit_eff > avg_eff,
            fmt("mean efficacy fedit %.3f > edit_avg %.3f over 5 seeds", fedit_eff, avg_eff)};
}

Check reedit_ablation(const Grid& grid) {
    int lowered = 0;
    std::string detail;
    for (std::size_t i = 0; i < grid.seeds.size(); ++i) {
        const double with = grid.fedit[i].art.report.weighted_overlap.score;
        const double without = grid.no_reedit[i].art.report.weighted_overlap.score;
        if (without < with) ++lowered;
        detail += fmt(" [%.3f vs %.3f]", with, without);
    }
    return {lowered >= 4,
            fmt("no-reedit lowered the overlap score in %d/5 seeds (need >= 4):%s", lowered,
                detail.c_str())};
}

Check once_only(const Grid& grid) {
    std::int64_t checked = 0, violations = 0;
    for (const GridCell& cell : grid.fedit) {
        for (const auto& [case_id, t] : cell.art.report.trace) {
            if (t.holders.size() < 2) continue;
            // Scheduled interval per holder: the interval it edited or skipped.
            bool retrievable_before = false;
            for (std::uint32_t holder : t.holders) {
                int sched = -1;
                for (const CaseEvent& e : t.z_events)
                    if (e.client == holder) sched = e.interval;
                for (const CaseEvent& e : t.skip_events)
                    if (e.client == holder) sched = e.interval;
                if (sched < 0) continue;
                for (const CaseEvent& e : t.retrievable_events)
                    if (e.client == holder && e.interval < sched) retrievable_before = true;
            }
            if (!retrievable_before) continue;
            ++checked;
            if (static_cast<std::int64_t>(t.z_events.size()) != 1) ++violations;
        }
    }
    return {checked > 0 && violations == 0,
            fmt("%lld qualifying overlap cases across 5 seeds, %lld with != 1 z-computation",
                static_cast<long long>(checked), static_cast<long long>(violations))};
}

Check reedit_fidelity() {
    ModelConfig cfg;
    cfg.seed = 321;
    cfg.critical_layers = {5};  // single critical layer: snapshots coincide
    Model m = init_model(cfg);
    CovarianceMap cov = estimate_covariances(m, cfg.critical_layers, 400, 1e4, 9);

    std::vector<EditRequest> reqs;
    auto rng = make_rng(55);
    std::uniform_int_distribution<TokenId> tok(0, cfg.vocab_size - 1);
    for (int i = 0; i < 8; ++i) {
        EditRequest r;
        r.case_id = fmt("case_%02d", i);
        r.prompt_tokens = {tok(rng), tok(rng), tok(rng), tok(rng)};
        r.subject_last_pos = 3;
        r.target_tokens = {tok(rng)};
        for (int p = 0; p < 3; ++p) {
            Tokens prefix(2 + p % 3);
            for (auto& t : prefix) t = tok(rng);
            r.prefixes.push_back(std::move(prefix));
        }
        reqs.push_back(std::move(r));
    }
    OptimizerConfig opt;
    EditOutcome edited = edit(m, reqs, cov, opt);
    ReeditOutcome replay = reedit(m, edited.mkvs.entries, cov);  // rolled back to m

    double worst = 0.0;
    for (int l : cfg.critical_layers)
        worst = std::max(worst, (replay.model.layers[l].w_ffn_out -
                                 edited.model.layers[l].w_ffn_out)
                                    .cwiseAbs()
                                    .maxCoeff());
    return {worst < 1e-6, fmt("max weight diff %.2e (< 1e-6)", worst)};
}

Check select_z_oracle() {
    auto rng = make_rng(888);
    std::normal_distribution<double> nd;
    std::uniform_int_distribution<int> count_dist(0, 8);
    std::uniform_int_distribution<int> zero_dist(0, 9);
    std::uniform_real_distribution<double> alpha_dist(-1.0, 1.0);

    for (int trial = 0; trial < 1000; ++trial) {
        const int n_server = count_dist(rng), n_local = count_dist(rng);
        auto rand_entry = [&](const std::string& id) {
            MkvEntry e;
            e.case_id = id;
            Vec z(5);
            for (int i = 0; i < 5; ++i) z(i) = nd(rng);
            if (zero_dist(rng) == 0) z.setZero();
            e.z = z;
            e.h_L = Vec::Zero(5);
            e.keys[0] = Vec::Ones(2);
            return e;
        };
        std::vector<MkvEntry> server, locals;
        for (int i = 0; i < n_server; ++i) server.push_back(rand_entry("s" + std::to_string(i)));
        for (int i = 0; i < n_local; ++i) locals.push_back(rand_entry("l" + std::to_string(i)));
        const double alpha = alpha_dist(rng);

        // Brute-force restatement of the rule.
        std::vector<std::string> expect;
        if (!locals.empty()) {
            for (const auto& cand : server) {
                int above = 0;
                for (const auto& local : locals) {
                    double sim = 0.0;
                    if (cand.z.norm() >= 1e-12 && local.z.norm() >= 1e-12)
                        sim = cand.z.dot(local.z) / (cand.z.norm() * local.z.norm());
                    if (sim > alpha) ++above;
                }
                if (2 * above >= static_cast<int>(locals.size())) expect.push_back(cand.case_id);
            }
        }
        auto got = select_z(server, locals, alpha);
        if (got.size() != expect.size())
            return {false, fmt("disagreement at trial %d (count)", trial)};
        for (std::size_t i = 0; i < got.size(); ++i)
            if (got[i].case_id != expect[i])
                return {false, fmt("disagreement at trial %d (order)", trial)};
    }
    return {true, "1000 random instances agree exactly"};
}

Check determinism(const Grid& grid) {
    RunConfig fedit_cfg = parse_run_config(overlap_config(grid.seeds[0], "fedit", true));
    RunConfig avg_cfg = parse_run_config(overlap_config(grid.seeds[0], "edit_avg", true));
    const std::string fedit_again = serialize_report(execute_run(fedit_cfg).report);
    const std::string avg_again = serialize_report(execute_run(avg_cfg).report);
    const bool ok = fedit_again == grid.fedit[0].report_bytes &&
                    avg_again == grid.edit_avg[0].report_bytes;
    return {ok, ok ? "re-executions produced byte-identical reports"
                   : "re-execution diverged from the first report"};
}

Check diagnostic_direction(const Grid& grid) {
    const RunArtifacts& art = grid.fedit[0].art;
    std::map<std::string, FactRecord> by_case;
    for (const ClientState& c : art.fed.clients)
        for (const FactRecord& f : c.local_facts) by_case.emplace(f.case_id, f);
    std::vector<MkvEntry> entries;
    for (const auto& s : art.fed.store.entries()) entries.push_back(s.entry);
    const std::int64_t n = static_cast<std::int64_t>(entries.size());
    const std::int64_t pairs = std::min<std::int64_t>(n * (n - 1) / 2, 400);
    if (pairs < 200) return {false, fmt("only %lld pairs available", (long long)pairs)};
    auto [r, ok] = z_similarity_diagnostic(art.pristine, entries, by_case, 400,
                                           seed_for(grid.seeds[0], "diagnostic"));
    return {ok && r > 0.0, fmt("pearson %.3f over %lld pairs (> 0)", r, (long long)pairs)};
}

}  // namespace

int main() {
    std::printf("== acceptance suite ==\n");

    criterion(1, "exact-insertion oracle", exact_insertion);
    criterion(2, "gradient check", gradient_check);
    criterion(7, "re-edit fidelity", reedit_fidelity);
    criterion(8, "select_z oracle", select_z_oracle);
    criterion(3, "end-to-end edit quality", end_to_end_quality);

    std::fprintf(stderr, "running the overlap grid (5 seeds x 3 modes)...\n");
    Grid grid = run_grid();
    criterion(4, "fedit beats edit_avg", [&] { return fedit_beats_editavg(grid); });
    criterion(5, "re-edit ablation", [&] { return reedit_ablation(grid); });
    criterion(6, "once-only computation", [&] { return once_only(grid); });
    criterion(9, "determinism", [&] { return determinism(grid); });
    criterion(10, "diagnostic direction", [&] { return diagnostic_direction(grid); });

    int failed = 0;
    for (const Outcome& o : g_outcomes)
        if (!o.pass) ++failed;
    std::printf("== %zu criteria, %d failed ==\n", g_outcomes.size(), failed);
    return failed == 0 ? 0 : 1;
}
