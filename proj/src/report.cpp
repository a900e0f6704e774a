#include "fleke/report.hpp"

namespace fleke {

namespace {

ordered_json ledger_to_json(const ComputationLedger::PerClient& l) {
    return {{"z_computations", l.z_computations},
            {"reedits_applied", l.reedits_applied},
            {"entries_uploaded", l.entries_uploaded},
            {"entries_downloaded", l.entries_downloaded}};
}

ComputationLedger::PerClient ledger_from_json(const ordered_json& j) {
    ComputationLedger::PerClient l;
    l.z_computations = j.at("z_computations").get<std::int64_t>();
    l.reedits_applied = j.at("reedits_applied").get<std::int64_t>();
    l.entries_uploaded = j.at("entries_uploaded").get<std::int64_t>();
    l.entries_downloaded = j.at("entries_downloaded").get<std::int64_t>();
    return l;
}

ordered_json events_to_json(const std::vector<CaseEvent>& events) {
    ordered_json arr = ordered_json::array();
    for (const CaseEvent& e : events)
        arr.push_back({{"client", e.client}, {"interval", e.interval}});
    return arr;
}

std::vector<CaseEvent> events_from_json(const ordered_json& arr) {
    std::vector<CaseEvent> out;
    for (const auto& e : arr)
        out.push_back(CaseEvent{e.at("client").get<std::uint32_t>(),
                                e.at("interval").get<int>()});
    return out;
}

}  // namespace

ordered_json metrics_to_json(const Metrics& m) {
    return {{"efficacy", m.efficacy},
            {"generalization", m.generalization},
            {"specificity", m.specificity},
            {"score", m.score},
            {"edit_trials", m.edit_trials},
            {"gen_trials", m.gen_trials},
            {"spec_trials", m.spec_trials}};
}

Metrics metrics_from_json(const ordered_json& j) {
    Metrics m;
    m.efficacy = j.at("efficacy").get<double>();
    m.generalization = j.at("generalization").get<double>();
    m.specificity = j.at("specificity").get<double>();
    m.score = j.at("score").get<double>();
    m.edit_trials = j.at("edit_trials").get<std::int64_t>();
    m.gen_trials = j.at("gen_trials").get<std::int64_t>();
    m.spec_trials = j.at("spec_trials").get<std::int64_t>();
    return m;
}

ordered_json report_to_json(const Report& r) {
    ordered_json j;
    j["format_version"] = r.format_version;
    j["config"] = r.config_echo;
    ordered_json seeds;
    for (const auto& [name, value] : r.seeds) seeds[name] = value;
    j["seeds"] = seeds;

    ordered_json clients = ordered_json::array();
    for (const Report::ClientRow& c : r.clients) {
        ordered_json row;
        row["client_id"] = c.client_id;
        row["edit_count"] = c.edit_count;
        row["metrics"] = metrics_to_json(c.metrics);
        row["overlap_metrics"] = metrics_to_json(c.overlap_metrics);
        row["ledger"] = ledger_to_json(c.ledger);
        clients.push_back(std::move(row));
    }
    j["clients"] = clients;
    j["weighted"] = metrics_to_json(r.weighted);
    j["overlap"] = {{"present", r.has_overlap},
                    {"weighted", metrics_to_json(r.weighted_overlap)}};
    j["ledger_totals"] = ledger_to_json(r.ledger_totals);
    j["diagnostic"] = {{"valid", r.diagnostic_valid}, {"pearson", r.diagnostic_pearson}};
    ordered_json avg = ordered_json::array();
    for (const auto& [interval, weights] : r.edit_avg_weights)
        avg.push_back({{"interval", interval}, {"weights", weights}});
    j["edit_avg_weights"] = avg;

    ordered_json cases = ordered_json::array();
    for (const auto& [case_id, entry] : r.trace) {
        ordered_json row;
        row["case_id"] = case_id;
        row["holders"] = entry.holders;
        row["z"] = events_to_json(entry.z_events);
        row["reedits"] = events_to_json(entry.reedit_events);
        row["skips"] = events_to_json(entry.skip_events);
        row["retrievable"] = events_to_json(entry.retrievable_events);
        cases.push_back(std::move(row));
    }
    j["case_trace"] = cases;
    return j;
}

std::string serialize_report(const Report& r) { return report_to_json(r).dump(2) + "\n"; }

Report parse_report(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw protocol_error(std::string("report: invalid JSON: ") + e.what());
    }
    Report r;
    try {
        r.format_version = j.at("format_version").get<std::string>();
        if (r.format_version != "fleke-report-1")
            throw protocol_error("report: unsupported format version '" + r.format_version + "'");
        r.config_echo = j.at("config");
        for (auto it = j.at("seeds").begin(); it != j.at("seeds").end(); ++it)
            r.seeds.emplace_back(it.key(), it.value().get<std::uint64_t>());
        for (const auto& row : j.at("clients")) {
            Report::ClientRow c;
            c.client_id = row.at("client_id").get<std::uint32_t>();
            c.edit_count = row.at("edit_count").get<std::int64_t>();
            c.metrics = metrics_from_json(row.at("metrics"));
            c.overlap_metrics = metrics_from_json(row.at("overlap_metrics"));
            c.ledger = ledger_from_json(row.at("ledger"));
            r.clients.push_back(std::move(c));
        }
        r.weighted = metrics_from_json(j.at("weighted"));
        r.has_overlap = j.at("overlap").at("present").get<bool>();
        r.weighted_overlap = metrics_from_json(j.at("overlap").at("weighted"));
        r.ledger_totals = ledger_from_json(j.at("ledger_totals"));
        r.diagnostic_valid = j.at("diagnostic").at("valid").get<bool>();
        r.diagnostic_pearson = j.at("diagnostic").at("pearson").get<double>();
        for (const auto& row : j.at("edit_avg_weights"))
            r.edit_avg_weights.emplace_back(row.at("interval").get<int>(),
                                            row.at("weights").get<std::vector<double>>());
        for (const auto& row : j.at("case_trace")) {
            CaseTraceEntry entry;
            entry.holders = row.at("holders").get<std::vector<std::uint32_t>>();
            entry.z_events = events_from_json(row.at("z"));
            entry.reedit_events = events_from_json(row.at("reedits"));
            entry.skip_events = events_from_json(row.at("skips"));
            entry.retrievable_events = events_from_json(row.at("retrievable"));
            r.trace[row.at("case_id").get<std::string>()] = std::move(entry);
        }
    } catch (const nlohmann::json::exception& e) {
        throw protocol_error(std::string("report: missing or malformed field: ") + e.what());
    }
    return r;
}

void save_report(const Report& r, const std::string& path) {
    write_file_text(path, serialize_report(r));
}

Report load_report(const std::string& path) { return parse_report(read_file_text(path)); }

}  // namespace fleke
