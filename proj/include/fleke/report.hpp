#pragma once

#include <string>
#include <vector>

#include "fleke/config.hpp"
#include "fleke/federation.hpp"

namespace fleke {

struct Report {
    std::string format_version = "fleke-report-1";
    ordered_json config_echo;
    std::vector<std::pair<std::string, std::uint64_t>> seeds;

    struct ClientRow {
        std::uint32_t client_id = 0;
        std::int64_t edit_count = 0;
        Metrics metrics;
        Metrics overlap_metrics;
        ComputationLedger::PerClient ledger;
    };
    std::vector<ClientRow> clients;

    Metrics weighted;
    bool has_overlap = false;
    Metrics weighted_overlap;
    ComputationLedger::PerClient ledger_totals;
    bool diagnostic_valid = false;
    double diagnostic_pearson = 0.0;
    std::vector<std::pair<int, std::vector<double>>> edit_avg_weights;
    CaseTrace trace;
};

ordered_json metrics_to_json(const Metrics& m);
Metrics metrics_from_json(const ordered_json& j);

ordered_json report_to_json(const Report& r);
std::string serialize_report(const Report& r);
Report parse_report(const std::string& text);
void save_report(const Report& r, const std::string& path);
Report load_report(const std::string& path);

}  // namespace fleke
