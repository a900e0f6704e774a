#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "fleke/runner.hpp"

using namespace fleke;

namespace {

// Small enough for sub-second runs, large enough to exercise every phase.
ordered_json tiny_config_json() {
    return ordered_json::parse(R"({
        "master_seed": 11,
        "model": {"n_layers": 3, "d_model": 16, "d_ffn": 32, "n_heads": 2,
                   "vocab_size": 160, "max_seq": 16, "critical_layers": [1, 2]},
        "optimizer": {"max_steps": 6, "learning_rate": 0.5},
        "federation": {"n_clients": 2, "time_slots": 2, "alpha": 0.2,
                        "mode": "fedit", "partition": "overlap"},
        "dataset": {"n_facts": 8, "n_relations": 2, "overlap_fraction": 0.25,
                     "paraphrases_per_fact": 1, "holdout_per_client": 2},
        "covariance": {"n_samples": 48, "lambda": 100.0},
        "prefixes": {"count": 2, "min_len": 1, "max_len": 3}
    })");
}

std::string test_data_dir() {
#ifdef FLEKE_TEST_DATA_DIR
    return FLEKE_TEST_DATA_DIR;
#else
    return "tests";
#endif
}

}  // namespace

TEST_CASE("config parsing applies defaults and rejects unknown or malformed keys") {
    RunConfig defaults = parse_run_config(ordered_json::parse("{}"));
    CHECK(defaults.model.n_layers == 8);
    CHECK(defaults.federation.n_clients == 8);
    CHECK(defaults.federation.time_slots == 10);
    CHECK(defaults.federation.alpha == 0.65);
    CHECK(defaults.covariance.n_samples == 1000);
    CHECK(defaults.covariance.lambda == 1e4);
    CHECK(defaults.optimizer.max_steps == 25);
    CHECK(defaults.optimizer.learning_rate == 0.5);
    CHECK(defaults.optimizer.clamp_factor == 4.0);

    SUBCASE("unknown root key") {
        auto j = tiny_config_json();
        j["modell"] = ordered_json::object();
        try {
            parse_run_config(j);
            FAIL("expected config_error");
        } catch (const config_error& e) {
            CHECK(std::string(e.what()).find("modell") != std::string::npos);
        }
    }
    SUBCASE("unknown nested key") {
        auto j = tiny_config_json();
        j["federation"]["alpha_"] = 0.5;
        try {
            parse_run_config(j);
            FAIL("expected config_error");
        } catch (const config_error& e) {
            CHECK(std::string(e.what()).find("federation.alpha_") != std::string::npos);
        }
    }
    SUBCASE("malformed field names the field") {
        auto j = tiny_config_json();
        j["dataset"]["n_facts"] = "many";
        try {
            parse_run_config(j);
            FAIL("expected config_error");
        } catch (const config_error& e) {
            CHECK(std::string(e.what()).find("dataset.n_facts") != std::string::npos);
        }
    }
    SUBCASE("invalid JSON is a config error") {
        CHECK_THROWS_AS(parse_run_config_text("{"), config_error);
    }
    SUBCASE("canonical echo round-trips") {
        RunConfig cfg = parse_run_config(tiny_config_json());
        RunConfig again = parse_run_config(run_config_to_json(cfg));
        CHECK(run_config_to_json(again) == run_config_to_json(cfg));
    }
}

TEST_CASE("seed fan-out separates purposes deterministically") {
    const std::uint64_t master = 42;
    CHECK(seed_for(master, "model") == seed_for(master, "model"));
    CHECK(seed_for(master, "model") != seed_for(master, "dataset"));
    CHECK(seed_for(master, "model") != seed_for(43, "model"));

    RunConfig cfg = parse_run_config(tiny_config_json());
    CHECK(cfg.model.seed == seed_for(cfg.master_seed, "model"));
    CHECK(cfg.dataset.seed == seed_for(cfg.master_seed, "dataset"));
}

TEST_CASE("runs are reproducible to the byte and replayable from the echo") {
    RunConfig cfg = parse_run_config(tiny_config_json());
    RunArtifacts a = execute_run(cfg);
    RunArtifacts b = execute_run(cfg);
    const std::string report_a = serialize_report(a.report);
    CHECK(report_a == serialize_report(b.report));

    SUBCASE("re-serialization is byte-stable") {
        Report parsed = parse_report(report_a);
        CHECK(serialize_report(parsed) == report_a);
    }
    SUBCASE("the config echo replays to identical metrics") {
        Report parsed = parse_report(report_a);
        RunConfig replay_cfg = parse_run_config(parsed.config_echo);
        RunArtifacts replay = execute_run(replay_cfg);
        CHECK(metrics_to_json(replay.report.weighted) == metrics_to_json(a.report.weighted));
        CHECK(serialize_report(replay.report) == report_a);
    }
    SUBCASE("ledger and trace are internally consistent") {
        std::int64_t z_total = 0;
        for (const auto& [case_id, t] : a.report.trace) z_total += t.z_events.size();
        CHECK(z_total == a.report.ledger_totals.z_computations);
    }
}

TEST_CASE("golden report bytes stay fixed") {
    const std::string path = test_data_dir() + "/golden/tiny_report.json";
    RunConfig cfg = parse_run_config(tiny_config_json());
    const std::string produced = serialize_report(execute_run(cfg).report);
    if (std::getenv("FLEKE_REGEN_GOLDEN")) {
        std::filesystem::create_directories(test_data_dir() + "/golden");
        write_file_text(path, produced);
    }
    CHECK(produced == read_file_text(path));
}

TEST_CASE("isolated mode equals single-client federation outside the config echo") {
    auto j = tiny_config_json();
    j["federation"]["n_clients"] = 1;
    j["federation"]["mode"] = "fedit";
    j["dataset"]["overlap_fraction"] = 0.0;
    RunConfig fedit_cfg = parse_run_config(j);
    j["federation"]["mode"] = "isolated";
    RunConfig iso_cfg = parse_run_config(j);

    ordered_json a = report_to_json(execute_run(fedit_cfg).report);
    ordered_json b = report_to_json(execute_run(iso_cfg).report);
    a.erase("config");
    b.erase("config");
    CHECK(a.dump(2) == b.dump(2));
}

TEST_CASE("checkpoint evaluation replays an isolated run's metrics") {
    auto j = tiny_config_json();
    j["federation"]["n_clients"] = 1;
    j["federation"]["mode"] = "isolated";
    j["dataset"]["overlap_fraction"] = 0.0;
    RunConfig cfg = parse_run_config(j);
    RunArtifacts art = execute_run(cfg);

    Metrics replay = eval_checkpoint(art.fed.clients[0].model, art.dataset);
    CHECK(replay.efficacy == art.report.clients[0].metrics.efficacy);
    CHECK(replay.generalization == art.report.clients[0].metrics.generalization);
    CHECK(replay.specificity == art.report.clients[0].metrics.specificity);

    SUBCASE("the pristine model evaluates with perfect specificity") {
        Metrics pristine = eval_checkpoint(art.pristine, art.dataset);
        CHECK(pristine.specificity == 1.0);
    }
}

TEST_CASE("run outputs land on disk and reload") {
    RunConfig cfg = parse_run_config(tiny_config_json());
    RunArtifacts art = execute_run(cfg);
    const std::string dir = "harness_out";
    write_run_outputs(art, dir);

    Report rep = load_report(dir + "/report.json");
    CHECK(rep.config_echo == art.report.config_echo);
    auto facts = load_dataset(dir + "/dataset.txt");
    CHECK(facts.size() == art.dataset.size());
    ServerStore store = ServerStore::load(dir + "/store.mkv");
    CHECK(store.size() == art.fed.store.size());
    Model client0 = load_model(dir + "/client_00.toylm");
    CHECK(model_fingerprint(client0) == model_fingerprint(art.fed.clients[0].model));
    std::filesystem::remove_all(dir);
}
