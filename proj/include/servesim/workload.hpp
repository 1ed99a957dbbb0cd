#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "servesim/config.hpp"

namespace servesim {

struct RequestSpec {
    std::string id;
    std::string model;
    double arrival = 0;
    int input_len = 1;
    int output_len = 1;
    // Leading input tokens shared with other requests; synthetic ids, only
    // identity matters.
    std::vector<std::int32_t> prefix_tokens;
    std::optional<std::string> session;

    bool operator==(const RequestSpec&) const = default;
};

struct Trace {
    std::vector<RequestSpec> requests;
    std::uint64_t seed = 0;
    std::string provenance;

    /// Sorted non-decreasing arrivals, unique ids, per-request invariants.
    void check() const;
};

/// Seeded generator with platform-independent derived distributions
/// (std:: distributions are implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double exponential(double rate) { return -std::log1p(-uniform()) / rate; }
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }
    std::uint64_t next() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

struct TraceParams {
    std::string model = "model";
    LengthDist input = LengthDist::constant(128);
    LengthDist output = LengthDist::constant(128);
    std::optional<PrefixPoolSpec> prefix_pool;
};

Trace gen_poisson(double rate, int n, const TraceParams& params, std::uint64_t seed);
Trace gen_pulses(int k, int pulses, double interval, const TraceParams& params, std::uint64_t seed);
/// Poisson arrivals at burst_rate during the first duty*period of each period
/// and idle_rate otherwise, until n requests are drawn.
Trace gen_burst_idle(double burst_rate, double idle_rate, double period, double duty, int n,
                     const TraceParams& params, std::uint64_t seed);
Trace gen_fixed(int n, int input_len, int output_len, const std::string& model = "model");

/// Dispatches on the workload's generator block (or reads the trace file).
Trace make_trace(const WorkloadSpec& w, std::optional<std::uint64_t> seed_override = std::nullopt);

json to_json(const RequestSpec& r);
RequestSpec parse_request(const json& j, const std::string& ctx);
void write_trace_jsonl(const Trace& t, const std::string& path);
std::string trace_to_jsonl(const Trace& t);
Trace read_trace_jsonl(const std::string& path);

}  // namespace servesim
