#include "fleke/config.hpp"

#include <set>

namespace fleke {

namespace {

void check_keys(const ordered_json& j, const std::string& section,
                const std::set<std::string>& known) {
    if (!j.is_object()) throw config_error("config section '" + section + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw config_error("config: unknown key '" + section + "." + it.key() + "'");
}

template <typename T>
T get_or(const ordered_json& j, const std::string& section, const std::string& key,
         const T& fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw config_error("config: malformed field '" + section + "." + key + "'");
    }
}

}  // namespace

std::string partition_name(PartitionScheme s) {
    switch (s) {
        case PartitionScheme::overlap: return "overlap";
        case PartitionScheme::relation: return "relation";
        case PartitionScheme::embedding: return "embedding";
    }
    return "?";
}

PartitionScheme partition_from_name(const std::string& name) {
    if (name == "overlap") return PartitionScheme::overlap;
    if (name == "relation") return PartitionScheme::relation;
    if (name == "embedding") return PartitionScheme::embedding;
    throw config_error("unknown partition scheme '" + name +
                       "' (expected overlap|relation|embedding)");
}

void CovarianceConfig::validate() const {
    if (n_samples < 1) throw config_error("covariance: n_samples must be >= 1");
    if (lambda < 0.0) throw config_error("covariance: lambda must be >= 0");
}

void RunConfig::validate() const {
    model.validate();
    optimizer.validate();
    federation.validate();
    dataset.validate();
    covariance.validate();
    prefixes.validate();
    if (mix_fraction < 0.0 || mix_fraction > 1.0)
        throw config_error("federation: mix_fraction must be in [0, 1]");
    if (output_dir.empty()) throw config_error("output: dir must be nonempty");
}

RunConfig parse_run_config(const ordered_json& j) {
    check_keys(j, "<root>",
               {"master_seed", "model", "optimizer", "federation", "dataset", "covariance",
                "prefixes", "output"});
    RunConfig cfg;
    cfg.master_seed = get_or<std::uint64_t>(j, "<root>", "master_seed", cfg.master_seed);

    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "model",
                   {"n_layers", "d_model", "d_ffn", "n_heads", "vocab_size", "max_seq",
                    "critical_layers", "activation"});
        cfg.model.n_layers = get_or(m, "model", "n_layers", cfg.model.n_layers);
        cfg.model.d_model = get_or(m, "model", "d_model", cfg.model.d_model);
        cfg.model.d_ffn = get_or(m, "model", "d_ffn", cfg.model.d_ffn);
        cfg.model.n_heads = get_or(m, "model", "n_heads", cfg.model.n_heads);
        cfg.model.vocab_size = get_or(m, "model", "vocab_size", cfg.model.vocab_size);
        cfg.model.max_seq = get_or(m, "model", "max_seq", cfg.model.max_seq);
        cfg.model.critical_layers =
            get_or(m, "model", "critical_layers", cfg.model.critical_layers);
        const std::string act = get_or<std::string>(m, "model", "activation", "gelu");
        if (act == "gelu") cfg.model.activation = Activation::gelu;
        else if (act == "relu") cfg.model.activation = Activation::relu;
        else throw config_error("config: malformed field 'model.activation'");
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        check_keys(o, "optimizer", {"max_steps", "learning_rate", "clamp_factor", "stop_logprob"});
        cfg.optimizer.max_steps = get_or(o, "optimizer", "max_steps", cfg.optimizer.max_steps);
        cfg.optimizer.learning_rate =
            get_or(o, "optimizer", "learning_rate", cfg.optimizer.learning_rate);
        cfg.optimizer.clamp_factor =
            get_or(o, "optimizer", "clamp_factor", cfg.optimizer.clamp_factor);
        cfg.optimizer.stop_logprob =
            get_or(o, "optimizer", "stop_logprob", cfg.optimizer.stop_logprob);
    }
    if (j.contains("federation")) {
        const auto& f = j.at("federation");
        check_keys(f, "federation",
                   {"n_clients", "time_slots", "alpha", "reedit_enabled", "exclude_own",
                    "dedupe_applied", "mode", "partition", "mix_fraction"});
        cfg.federation.n_clients = get_or(f, "federation", "n_clients", cfg.federation.n_clients);
        cfg.federation.time_slots =
            get_or(f, "federation", "time_slots", cfg.federation.time_slots);
        cfg.federation.alpha = get_or(f, "federation", "alpha", cfg.federation.alpha);
        cfg.federation.reedit_enabled =
            get_or(f, "federation", "reedit_enabled", cfg.federation.reedit_enabled);
        cfg.federation.exclude_own =
            get_or(f, "federation", "exclude_own", cfg.federation.exclude_own);
        cfg.federation.dedupe_applied =
            get_or(f, "federation", "dedupe_applied", cfg.federation.dedupe_applied);
        cfg.federation.mode =
            mode_from_name(get_or<std::string>(f, "federation", "mode", "fedit"));
        cfg.partition =
            partition_from_name(get_or<std::string>(f, "federation", "partition", "overlap"));
        cfg.mix_fraction = get_or(f, "federation", "mix_fraction", cfg.mix_fraction);
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, "dataset",
                   {"n_facts", "n_relations", "overlap_fraction", "paraphrases_per_fact",
                    "holdout_per_client", "n_objects"});
        cfg.dataset.n_facts = get_or(d, "dataset", "n_facts", cfg.dataset.n_facts);
        cfg.dataset.n_relations = get_or(d, "dataset", "n_relations", cfg.dataset.n_relations);
        cfg.dataset.overlap_fraction =
            get_or(d, "dataset", "overlap_fraction", cfg.dataset.overlap_fraction);
        cfg.dataset.paraphrases_per_fact =
            get_or(d, "dataset", "paraphrases_per_fact", cfg.dataset.paraphrases_per_fact);
        cfg.dataset.holdout_per_client =
            get_or(d, "dataset", "holdout_per_client", cfg.dataset.holdout_per_client);
        cfg.dataset.n_objects = get_or(d, "dataset", "n_objects", cfg.dataset.n_objects);
    }
    if (j.contains("covariance")) {
        const auto& c = j.at("covariance");
        check_keys(c, "covariance", {"n_samples", "lambda"});
        cfg.covariance.n_samples = get_or(c, "covariance", "n_samples", cfg.covariance.n_samples);
        cfg.covariance.lambda = get_or(c, "covariance", "lambda", cfg.covariance.lambda);
    }
    if (j.contains("prefixes")) {
        const auto& p = j.at("prefixes");
        check_keys(p, "prefixes", {"count", "min_len", "max_len"});
        cfg.prefixes.count = get_or(p, "prefixes", "count", cfg.prefixes.count);
        cfg.prefixes.min_len = get_or(p, "prefixes", "min_len", cfg.prefixes.min_len);
        cfg.prefixes.max_len = get_or(p, "prefixes", "max_len", cfg.prefixes.max_len);
    }
    if (j.contains("output")) {
        const auto& o = j.at("output");
        check_keys(o, "output", {"dir"});
        cfg.output_dir = get_or<std::string>(o, "output", "dir", cfg.output_dir);
    }

    // Seeds fan out from the master; per-purpose streams keep axes independent.
    cfg.model.seed = seed_for(cfg.master_seed, "model");
    cfg.dataset.seed = seed_for(cfg.master_seed, "dataset");
    cfg.prefixes.seed = seed_for(cfg.master_seed, "prefixes");
    cfg.validate();
    return cfg;
}

RunConfig parse_run_config_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("config: invalid JSON: ") + e.what());
    }
    return parse_run_config(j);
}

RunConfig load_run_config(const std::string& path) {
    return parse_run_config_text(read_file_text(path));
}

ordered_json run_config_to_json(const RunConfig& cfg) {
    ordered_json j;
    j["master_seed"] = cfg.master_seed;
    j["model"] = {{"n_layers", cfg.model.n_layers},
                  {"d_model", cfg.model.d_model},
                  {"d_ffn", cfg.model.d_ffn},
                  {"n_heads", cfg.model.n_heads},
                  {"vocab_size", cfg.model.vocab_size},
                  {"max_seq", cfg.model.max_seq},
                  {"critical_layers", cfg.model.critical_layers},
                  {"activation", cfg.model.activation == Activation::gelu ? "gelu" : "relu"}};
    j["optimizer"] = {{"max_steps", cfg.optimizer.max_steps},
                      {"learning_rate", cfg.optimizer.learning_rate},
                      {"clamp_factor", cfg.optimizer.clamp_factor},
                      {"stop_logprob", cfg.optimizer.stop_logprob}};
    j["federation"] = {{"n_clients", cfg.federation.n_clients},
                       {"time_slots", cfg.federation.time_slots},
                       {"alpha", cfg.federation.alpha},
                       {"reedit_enabled", cfg.federation.reedit_enabled},
                       {"exclude_own", cfg.federation.exclude_own},
                       {"dedupe_applied", cfg.federation.dedupe_applied},
                       {"mode", mode_name(cfg.federation.mode)},
                       {"partition", partition_name(cfg.partition)},
                       {"mix_fraction", cfg.mix_fraction}};
    j["dataset"] = {{"n_facts", cfg.dataset.n_facts},
                    {"n_relations", cfg.dataset.n_relations},
                    {"overlap_fraction", cfg.dataset.overlap_fraction},
                    {"paraphrases_per_fact", cfg.dataset.paraphrases_per_fact},
                    {"holdout_per_client", cfg.dataset.holdout_per_client},
                    {"n_objects", cfg.dataset.n_objects}};
    j["covariance"] = {{"n_samples", cfg.covariance.n_samples},
                       {"lambda", cfg.covariance.lambda}};
    j["prefixes"] = {{"count", cfg.prefixes.count},
                     {"min_len", cfg.prefixes.min_len},
                     {"max_len", cfg.prefixes.max_len}};
    j["output"] = {{"dir", cfg.output_dir}};
    return j;
}

}  // namespace fleke
