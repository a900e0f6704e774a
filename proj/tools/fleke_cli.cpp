#include <chrono>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fleke/runner.hpp"

namespace {

using namespace fleke;

void print_metrics_line(const char* label, const Metrics& m) {
    std::printf("%-10s efficacy=%.4f generalization=%.4f specificity=%.4f score=%.4f\n", label,
                m.efficacy, m.generalization, m.specificity, m.score);
}

struct RunOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;
    bool no_reedit = false;
    std::optional<double> alpha;
    std::optional<int> clients;
    std::optional<int> time_slots;

    RunConfig apply(RunConfig cfg) const {
        ordered_json j = run_config_to_json(cfg);
        if (seed) j["master_seed"] = *seed;
        if (mode) j["federation"]["mode"] = *mode;
        if (no_reedit) j["federation"]["reedit_enabled"] = false;
        if (alpha) j["federation"]["alpha"] = *alpha;
        if (clients) j["federation"]["n_clients"] = *clients;
        if (time_slots) j["federation"]["time_slots"] = *time_slots;
        return parse_run_config(j);
    }
};

int cmd_generate(const std::string& config_path, const std::string& out_path) {
    RunConfig cfg = load_run_config(config_path);
    std::vector<FactRecord> facts = build_dataset(cfg);
    save_dataset(facts, out_path);
    std::printf("wrote %zu records (%d editable) to %s\n", facts.size(),
                cfg.dataset.n_facts, out_path.c_str());
    return exit_ok;
}

int cmd_run(const std::string& config_path, const std::string& dataset_path,
            const std::string& out_dir, const RunOverrides& overrides) {
    RunConfig cfg = overrides.apply(load_run_config(config_path));
    if (!out_dir.empty()) cfg.output_dir = out_dir;

    const auto t0 = std::chrono::steady_clock::now();
    RunArtifacts art = dataset_path.empty()
                           ? execute_run(cfg)
                           : execute_run(cfg, load_dataset(dataset_path));
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    write_run_outputs(art, cfg.output_dir);
    log_info("run wall-clock: " + std::to_string(ms) + " ms");

    std::printf("mode=%s clients=%d slots=%d seed=%llu\n",
                mode_name(cfg.federation.mode).c_str(), cfg.federation.n_clients,
                cfg.federation.time_slots,
                static_cast<unsigned long long>(cfg.master_seed));
    print_metrics_line("weighted", art.report.weighted);
    if (art.report.has_overlap) print_metrics_line("overlap", art.report.weighted_overlap);
    const auto totals = art.report.ledger_totals;
    std::printf("ledger     z=%lld reedits=%lld uploads=%lld downloads=%lld\n",
                static_cast<long long>(totals.z_computations),
                static_cast<long long>(totals.reedits_applied),
                static_cast<long long>(totals.entries_uploaded),
                static_cast<long long>(totals.entries_downloaded));
    std::printf("report: %s/report.json\n", cfg.output_dir.c_str());
    return exit_ok;
}

int cmd_sweep(const std::string& config_path, const std::string& axis,
              std::vector<int> values, const std::string& out_dir,
              const RunOverrides& overrides) {
    if (axis != "clients" && axis != "time_slots")
        throw config_error("sweep: axis must be clients|time_slots");
    if (values.empty()) throw config_error("sweep: no values given");
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());

    RunConfig base = overrides.apply(load_run_config(config_path));
    std::string summary = "axis value efficacy generalization specificity score\n";
    for (int v : values) {
        RunConfig cfg = base;
        ordered_json j = run_config_to_json(cfg);
        j["federation"][axis == "clients" ? "n_clients" : "time_slots"] = v;
        cfg = parse_run_config(j);
        cfg.output_dir = out_dir + "/" + axis + "_" + std::to_string(v);
        RunArtifacts art = execute_run(cfg);
        write_run_outputs(art, cfg.output_dir);
        char row[160];
        std::snprintf(row, sizeof(row), "%s %d %.4f %.4f %.4f %.4f\n", axis.c_str(), v,
                      art.report.weighted.efficacy, art.report.weighted.generalization,
                      art.report.weighted.specificity, art.report.weighted.score);
        summary += row;
    }
    write_file_text(out_dir + "/summary.txt", summary);
    std::fputs(summary.c_str(), stdout);
    return exit_ok;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
             const std::string& out_path) {
    Model model = load_model(checkpoint_path);
    std::vector<FactRecord> dataset = load_dataset(dataset_path);
    Metrics m = eval_checkpoint(model, dataset);
    print_metrics_line("eval", m);
    if (!out_path.empty()) {
        ordered_json j;
        j["format_version"] = "fleke-eval-1";
        j["checkpoint"] = checkpoint_path;
        j["dataset"] = dataset_path;
        j["metrics"] = metrics_to_json(m);
        write_file_text(out_path, j.dump(2) + "\n");
    }
    return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated locate-then-edit knowledge editing simulator"};
    app.require_subcommand(1);

    std::string config_path, dataset_path, out_path, checkpoint_path, axis;
    std::vector<int> sweep_values;
    RunOverrides overrides;
    std::optional<std::uint64_t> seed_flag;
    std::optional<std::string> mode_flag;
    std::optional<double> alpha_flag;
    std::optional<int> clients_flag, slots_flag;

    auto* gen = app.add_subcommand("generate", "Write a dataset file from a config");
    gen->add_option("--config", config_path, "Run config (JSON)")->required();
    gen->add_option("--out", out_path, "Output dataset path")->required();

    auto* run = app.add_subcommand("run", "Execute a full simulation");
    run->add_option("--config", config_path, "Run config (JSON)")->required();
    run->add_option("--dataset", dataset_path, "Existing dataset file (else generated inline)");
    run->add_option("--out", out_path, "Output directory (overrides config)");
    run->add_option("--seed", seed_flag, "Master seed override");
    run->add_option("--mode", mode_flag, "Mode override: fedit|edit_avg|isolated");
    run->add_flag("--no-reedit", overrides.no_reedit, "Disable the re-edit phase");
    run->add_option("--alpha", alpha_flag, "Similarity threshold override");
    run->add_option("--clients", clients_flag, "Client count override");
    run->add_option("--time-slots", slots_flag, "Time slot count override");

    auto* sweep = app.add_subcommand("sweep", "Run once per axis value and summarize");
    sweep->add_option("--config", config_path, "Run config (JSON)")->required();
    sweep->add_option("--axis", axis, "clients|time_slots")->required();
    sweep->add_option("--values", sweep_values, "Axis values")->required()->delimiter(',');
    sweep->add_option("--out", out_path, "Output directory")->required();
    sweep->add_option("--seed", seed_flag, "Master seed override");
    sweep->add_option("--mode", mode_flag, "Mode override");
    sweep->add_flag("--no-reedit", overrides.no_reedit, "Disable the re-edit phase");
    sweep->add_option("--alpha", alpha_flag, "Similarity threshold override");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint against a dataset file");
    eval->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
    eval->add_option("--dataset", dataset_path, "Dataset file")->required();
    eval->add_option("--out", out_path, "Metrics JSON output path");

    CLI11_PARSE(app, argc, argv);

    overrides.seed = seed_flag;
    overrides.mode = mode_flag;
    overrides.alpha = alpha_flag;
    overrides.clients = clients_flag;
    overrides.time_slots = slots_flag;

    try {
        if (gen->parsed()) return cmd_generate(config_path, out_path);
        if (run->parsed()) return cmd_run(config_path, dataset_path, out_path, overrides);
        if (sweep->parsed()) return cmd_sweep(config_path, axis, sweep_values, out_path, overrides);
        if (eval->parsed()) return cmd_eval(checkpoint_path, dataset_path, out_path);
    } catch (const fleke::config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return fleke::exit_config;
    } catch (const fleke::io_error& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return fleke::exit_io;
    } catch (const fleke::numeric_error& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return fleke::exit_numeric;
    } catch (const fleke::protocol_error& e) {
        std::fprintf(stderr, "protocol error: %s\n", e.what());
        return fleke::exit_protocol;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return fleke::exit_ok;
}
