#include "fleke/runner.hpp"

#include <algorithm>
#include <filesystem>

namespace fleke {

namespace {

std::vector<std::vector<FactRecord>> partition_facts(const RunConfig& cfg,
                                                     const std::vector<FactRecord>& editable,
                                                     const Model& pristine) {
    const std::uint64_t seed = seed_for(cfg.master_seed, "partition");
    switch (cfg.partition) {
        case PartitionScheme::overlap:
            return partition_with_overlap(editable, cfg.federation.n_clients,
                                          cfg.dataset.overlap_fraction, seed);
        case PartitionScheme::relation:
            return partition_by_relation(editable, cfg.federation.n_clients, cfg.mix_fraction,
                                         seed);
        case PartitionScheme::embedding:
            return partition_by_embedding(editable, cfg.federation.n_clients,
                                          [&](const FactRecord& f) {
                                              return embed_fact(pristine, f);
                                          });
    }
    throw config_error("unknown partition scheme");
}

}  // namespace

std::vector<FactRecord> build_dataset(const RunConfig& cfg) {
    DatasetConfig dcfg = cfg.dataset;
    dcfg.seed = seed_for(cfg.master_seed, "dataset");
    return generate_dataset(dcfg, cfg.federation.n_clients, cfg.model);
}

RunArtifacts execute_run(const RunConfig& cfg) { return execute_run(cfg, build_dataset(cfg)); }

RunArtifacts execute_run(const RunConfig& cfg, const std::vector<FactRecord>& dataset) {
    cfg.validate();
    RunArtifacts art;
    art.dataset = dataset;

    ModelConfig mcfg = cfg.model;
    mcfg.seed = seed_for(cfg.master_seed, "model");
    art.pristine = init_model(mcfg);

    std::vector<FactRecord> editable, holdout;
    for (const FactRecord& f : dataset) (f.holdout ? holdout : editable).push_back(f);
    if (editable.empty()) throw config_error("run: dataset has no editable facts");

    auto partition = partition_facts(cfg, editable, art.pristine);

    FedRunInput input;
    input.fed = cfg.federation;
    input.opt = cfg.optimizer;
    input.prefixes = cfg.prefixes;
    input.prefixes.seed = seed_for(cfg.master_seed, "prefixes");
    input.pristine = art.pristine;
    input.diagnostic_seed = seed_for(cfg.master_seed, "diagnostic");

    const std::uint64_t cov_seed = seed_for(cfg.master_seed, "covariance");
    input.cov = estimate_covariances(art.pristine, mcfg.critical_layers,
                                     cfg.covariance.n_samples, cfg.covariance.lambda, cov_seed);

    input.clients.resize(cfg.federation.n_clients);
    for (int c = 0; c < cfg.federation.n_clients; ++c) {
        ClientState& client = input.clients[c];
        client.client_id = static_cast<std::uint32_t>(c);
        client.model = art.pristine;
        client.local_facts = std::move(partition[c]);
        std::sort(client.local_facts.begin(), client.local_facts.end(),
                  [](const FactRecord& a, const FactRecord& b) { return a.case_id < b.case_id; });
        client.schedule = build_schedule(static_cast<int>(client.local_facts.size()),
                                         cfg.federation.time_slots);
    }
    for (std::size_t i = 0; i < holdout.size(); ++i)
        input.clients[i % cfg.federation.n_clients].holdout_facts.push_back(holdout[i]);

    art.fed = run_federation(std::move(input));

    Report& rep = art.report;
    rep.config_echo = run_config_to_json(cfg);
    rep.seeds = {{"master", cfg.master_seed},
                 {"model", seed_for(cfg.master_seed, "model")},
                 {"dataset", seed_for(cfg.master_seed, "dataset")},
                 {"partition", seed_for(cfg.master_seed, "partition")},
                 {"covariance", cov_seed},
                 {"prefixes", seed_for(cfg.master_seed, "prefixes")},
                 {"diagnostic", seed_for(cfg.master_seed, "diagnostic")}};
    for (std::size_t c = 0; c < art.fed.clients.size(); ++c) {
        Report::ClientRow row;
        row.client_id = art.fed.clients[c].client_id;
        row.edit_count = static_cast<std::int64_t>(art.fed.clients[c].local_facts.size());
        row.metrics = art.fed.per_client[c];
        row.overlap_metrics = art.fed.per_client_overlap[c];
        row.ledger = art.fed.ledger.per_client[c];
        rep.clients.push_back(std::move(row));
    }
    rep.weighted = art.fed.weighted;
    rep.has_overlap = art.fed.has_overlap;
    rep.weighted_overlap = art.fed.weighted_overlap;
    rep.ledger_totals = art.fed.ledger.totals();
    rep.diagnostic_valid = art.fed.diagnostic_valid;
    rep.diagnostic_pearson = art.fed.diagnostic_pearson;
    rep.edit_avg_weights = art.fed.edit_avg_weights;
    rep.trace = art.fed.trace;
    return art;
}

void write_run_outputs(const RunArtifacts& artifacts, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create output directory " + out_dir + ": " + ec.message());

    save_report(artifacts.report, out_dir + "/report.json");
    save_dataset(artifacts.dataset, out_dir + "/dataset.txt");
    const ModelConfig& cfg = artifacts.pristine.cfg;
    artifacts.fed.store.save(out_dir + "/store.mkv", cfg.d_model, cfg.d_ffn);
    for (const ClientState& client : artifacts.fed.clients) {
        char name[48];
        std::snprintf(name, sizeof(name), "/client_%02u.toylm", client.client_id);
        save_model(client.model, out_dir + name);
    }
}

Metrics eval_checkpoint(const Model& model, const std::vector<FactRecord>& dataset) {
    std::vector<FactRecord> editable, holdout;
    for (const FactRecord& f : dataset) (f.holdout ? holdout : editable).push_back(f);
    Model pristine = init_model(model.cfg);
    return eval_metrics(model, pristine, editable, holdout);
}

}  // namespace fleke
