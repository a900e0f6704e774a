#pragma once

#include <string>
#include <vector>

#include "fleke/report.hpp"

namespace fleke {

struct RunArtifacts {
    Report report;
    FedRunResult fed;
    std::vector<FactRecord> dataset;  // editable facts followed by holdouts
    Model pristine;
};

// Dataset for a config (editable + holdout records), deterministic in the
// config's master seed.
std::vector<FactRecord> build_dataset(const RunConfig& cfg);

// Full simulation: dataset (generated inline unless provided), partitioning,
// covariance estimation, the federation run, and the report.
RunArtifacts execute_run(const RunConfig& cfg);
RunArtifacts execute_run(const RunConfig& cfg, const std::vector<FactRecord>& dataset);

// Persists report.json, store.mkv, dataset.txt and per-client checkpoints.
void write_run_outputs(const RunArtifacts& artifacts, const std::string& out_dir);

// Single-model evaluation over a dataset file's fact pools, with the pristine
// reference re-derived from the checkpoint's embedded config.
Metrics eval_checkpoint(const Model& model, const std::vector<FactRecord>& dataset);

}  // namespace fleke
