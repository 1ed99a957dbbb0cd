#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "servesim/config.hpp"
#include "servesim/memory.hpp"
#include "servesim/power.hpp"

namespace servesim {

struct RequestMetrics {
    std::string id;
    std::string model;
    std::string msg;
    double arrival = 0;
    int input_len = 0;
    int output_len = 0;
    int prefix_hit_tokens = 0;
    std::optional<double> sched_time;
    std::optional<double> first_token_time;
    std::optional<double> done_time;
    std::uint64_t kv_peak_bytes = 0;

    bool complete() const { return done_time.has_value(); }
    std::optional<double> queueing_delay() const;
    std::optional<double> ttft() const;
    /// (e2e - ttft) / (output_len - 1); empty for single-token outputs.
    std::optional<double> tpot() const;
    std::optional<double> e2e() const;
};

struct TokenEvent {
    double time = 0;
    int msg = -1;
    std::uint64_t tokens = 0;
};

struct PrefixEvent {
    double time = 0;
    int msg = -1;
    int hit_tokens = 0;
    int eligible_tokens = 0;
};

struct SimulationReport {
    std::vector<RequestMetrics> requests;
    std::vector<std::string> msg_ids;
    std::vector<std::string> tier_names;
    std::vector<TokenEvent> tokens;
    std::vector<PrefixEvent> prefix;
    std::vector<UsageSample> usage;
    EnergyLedger energy;
    double end_time = 0;
    bool truncated = false;  // stopped by `until` before every request finished
    std::uint64_t events = 0;
    std::uint64_t graphs = 0;
};

struct Stat {
    std::size_t n = 0;
    double mean = 0;
    double p50 = 0;
    double p90 = 0;
    double p99 = 0;
    double max = 0;
};

/// Nearest-rank percentile of an ascending-sorted sample; p in (0, 100].
double nearest_rank(const std::vector<double>& sorted, double p);
Stat describe(std::vector<double> xs);

struct Summary {
    std::size_t requests = 0;
    std::size_t completed = 0;
    std::uint64_t input_tokens = 0;
    std::uint64_t generated_tokens = 0;
    double makespan = 0;  // last completion - first arrival
    double throughput_tps = 0;
    Stat queueing;
    Stat ttft;
    Stat tpot;
    Stat e2e;
    double prefix_hit_rate = 0;
    std::optional<double> energy_j;
    std::optional<double> mean_power_w;
    std::optional<double> joules_per_token;
};

Summary summarize(const std::vector<RequestMetrics>& requests, std::optional<double> energy_j = std::nullopt,
                  std::optional<double> duration = std::nullopt);
Summary summarize(const SimulationReport& report);
json to_json(const Summary& s);
std::string format_summary(const Summary& s);

struct TimeSeriesRow {
    double time = 0;
    std::string metric;
    std::string entity;
    double value = 0;
};

/// Long-format rows per bucket [k w, (k+1) w): tokens per MSG, tier bytes
/// used at bucket end, cumulative prefix hit rate per MSG, mean watts per
/// component.
std::vector<TimeSeriesRow> time_series(const SimulationReport& report, double bucket = 1.0);

std::string requests_csv(const std::vector<RequestMetrics>& requests);
std::vector<RequestMetrics> parse_requests_csv(const std::string& text, const std::string& ctx = "requests.csv");
std::vector<RequestMetrics> read_requests_csv(const std::string& path);
std::string timeseries_csv(const std::vector<TimeSeriesRow>& rows);
json energy_json(const EnergyLedger& ledger);

/// Writes requests.csv, timeseries.csv, energy.json and summary.json.
void write_outputs(const SimulationReport& report, const std::string& dir, double bucket = 1.0);

/// Shortest round-trip decimal for a double ("%.17g" trimmed).
std::string format_number(double v);

}  // namespace servesim
