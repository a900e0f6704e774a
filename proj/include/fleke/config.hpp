#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "fleke/data_eval.hpp"
#include "fleke/federation.hpp"

namespace fleke {

using ordered_json = nlohmann::ordered_json;

enum class PartitionScheme { overlap, relation, embedding };

std::string partition_name(PartitionScheme s);
PartitionScheme partition_from_name(const std::string& name);

struct CovarianceConfig {
    int n_samples = 1000;
    double lambda = 1e4;

    void validate() const;
};

// Full experiment configuration. The master seed fans out to per-purpose
// seeds (model, dataset, partition, covariance, prefixes, diagnostic) via
// seed_for(master, purpose).
struct RunConfig {
    std::uint64_t master_seed = 0;
    ModelConfig model;
    OptimizerConfig optimizer;
    FederationConfig federation;
    PartitionScheme partition = PartitionScheme::overlap;
    double mix_fraction = 0.1;  // relation scheme only
    DatasetConfig dataset;
    CovarianceConfig covariance;
    PrefixSpec prefixes;
    std::string output_dir = "out";

    void validate() const;
};

// Strict parse: unknown keys anywhere are configuration errors.
RunConfig parse_run_config(const ordered_json& j);
RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Canonical echo; parse_run_config(run_config_to_json(c)) reproduces c.
ordered_json run_config_to_json(const RunConfig& cfg);

}  // namespace fleke
