// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "servesim/engine.hpp"
#include "servesim/metrics.hpp"
#include "servesim/runner.hpp"
#include "servesim/sysnet.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace servesim;
using namespace servesim::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

bool rel_close(double a, double b, double rel) {
    return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b));
}

std::string scenario_path(const std::string& name) {
    return std::string(SERVESIM_SCENARIO_DIR) + "/" + name + "/scenario.json";
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// ---- A1 ----

Outcome a1() {
    const auto t0 = Clock::now();
    const double ms = 1e-3;
    ClusterSpec c = single_node(1);
    ModelSpec model = dense_model("tiny", 1);
    c.msgs.push_back(msg("m0", "tiny", {"gpu0"}));
    ProfileSet profiles;
    profiles.add(constant_profile("tiny", "const", ms));
    Trace trace;
    trace.requests.push_back(RequestSpec{"r0", "tiny", 0.0, 4, 3, {}, {}});

    ServingEngine engine(c, {model}, profiles, trace);
    SimulationReport rep = engine.run();
    const RequestMetrics& r = rep.requests.at(0);

    // Prefill chain: embed, norm, qkv_proj, attention_prefill, out_proj, norm,
    // ffn_up, ffn_down, lm_head. Decode swaps attention_decode in.
    const double ttft_expected = 9 * ms;
    const double tpot_expected = 9 * ms;
    const double tol = 1e-12;
    const double ttft = r.ttft().value_or(-1);
    const double tpot = r.tpot().value_or(-1);
    const double runtime = seconds_since(t0);
    Outcome o;
    o.pass = std::abs(ttft - ttft_expected) <= tol && std::abs(tpot - tpot_expected) <= tol && runtime < 1.0;
    o.detail = "ttft=" + format_number(ttft) + " tpot=" + format_number(tpot) + " expected 0.009/0.009, runtime " +
               fmt("%.3fs", runtime);
    return o;
}

// ---- A2 ----

const std::vector<std::string> kScenarios{"single_dense", "multi_instance", "pd_1x1",     "pd_1x2",   "moe_ep",
                                          "pim",          "pim_sbi",        "pulses",     "burst_prefix", "poisson_tp4"};

struct RunFiles {
    std::string requests, timeseries, energy;
    double seconds = 0;
    bool operator==(const RunFiles& o) const {
        return requests == o.requests && timeseries == o.timeseries && energy == o.energy;
    }
};

RunFiles run_scenario(const std::string& name, const fs::path& dir) {
    const auto t0 = Clock::now();
    Scenario s = load_scenario(scenario_path(name));
    SimulationReport rep = simulate(load_inputs(s), EngineOptions{});
    write_outputs(rep, dir.string());
    RunFiles f{slurp(dir / "requests.csv"), slurp(dir / "timeseries.csv"), slurp(dir / "energy.json"), 0};
    f.seconds = seconds_since(t0);
    return f;
}

Outcome a2(const fs::path& scratch) {
    Outcome o{true, ""};
    std::map<std::string, RunFiles> first;
    double slowest = 0;
    std::string slowest_name;
    for (int run = 0; run < 3; ++run) {
        for (const auto& name : kScenarios) {
            RunFiles f = run_scenario(name, scratch / ("a2_" + name + "_" + std::to_string(run)));
            if (f.seconds > slowest) {
                slowest = f.seconds;
                slowest_name = name;
            }
            if (run == 0) {
                first[name] = f;
            } else if (!(f == first[name])) {
                o.pass = false;
                o.detail += name + " differs on run " + std::to_string(run + 1) + "; ";
            }
        }
    }
    // All scenarios at once, one thread each.
    std::map<std::string, RunFiles> threaded;
    std::vector<std::thread> pool;
    std::vector<std::pair<std::string, RunFiles>> results(kScenarios.size());
    std::vector<std::string> errors(kScenarios.size());
    for (std::size_t i = 0; i < kScenarios.size(); ++i) {
        pool.emplace_back([&, i] {
            try {
                results[i] = {kScenarios[i], run_scenario(kScenarios[i], scratch / ("a2_" + kScenarios[i] + "_mt"))};
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (std::size_t i = 0; i < kScenarios.size(); ++i) {
        if (!errors[i].empty() || !(results[i].second == first[kScenarios[i]])) {
            o.pass = false;
            o.detail += kScenarios[i] + " differs under " + std::to_string(kScenarios.size()) + " threads; ";
        }
    }
    if (slowest >= 60.0) o.pass = false;
    o.detail += std::to_string(kScenarios.size()) + " scenarios x 3 runs + threaded run; slowest " + slowest_name + " " +
                fmt("%.2fs", slowest);
    return o;
}

// ---- A3 ----

// Brute-force cache model: the set of block-aligned prefixes each cache holds.
struct PrefixOracle {
    std::map<int, std::set<std::vector<std::int32_t>>> held;
    std::map<int, int> block;

    static std::vector<std::int32_t> head(const std::vector<std::int32_t>& t, std::size_t n) {
        return {t.begin(), t.begin() + static_cast<std::ptrdiff_t>(n)};
    }
    void insert(int cache, const std::vector<std::int32_t>& t) {
        const std::size_t bs = static_cast<std::size_t>(block.at(cache));
        for (std::size_t n = bs; n <= t.size(); n += bs) held[cache].insert(head(t, n));
    }
    // Evicting a prefix that has a longer cached extension would orphan it.
    bool evict(int cache, const std::vector<std::int32_t>& t) {
        auto& s = held[cache];
        if (!s.erase(t)) return false;
        for (const auto& p : s) {
            if (p.size() > t.size() && std::equal(t.begin(), t.end(), p.begin())) return false;
        }
        return true;
    }
    int longest(int cache, const std::vector<std::int32_t>& t) const {
        auto it = held.find(cache);
        const std::size_t bs = static_cast<std::size_t>(block.at(cache));
        int best = 0;
        if (it == held.end()) return 0;
        for (std::size_t n = bs; n <= t.size(); n += bs) {
            if (!it->second.count(head(t, n))) break;
            best = static_cast<int>(n);
        }
        return best;
    }
};

Inputs tight_burst_inputs(bool shared_host) {
    Inputs in = load_inputs(load_scenario(scenario_path("burst_prefix")));
    const ModelSpec& model = in.workload.models.at(0);
    const std::uint64_t mib = 1ULL << 20;
    for (auto& n : in.cluster.nodes) {
        for (auto& d : n.devices) d.mem_capacity = model.weight_bytes + 400 * mib;
    }
    for (auto& t : in.cluster.tiers) {
        if (t.tier == TierKind::host) t.capacity = 100 * mib;
    }
    for (auto& m : in.cluster.msgs) {
        m.prefix_cache_tiers = shared_host ? std::vector<TierKind>{TierKind::device, TierKind::host}
                                           : std::vector<TierKind>{TierKind::device};
    }
    return in;
}

Outcome a3() {
    Inputs in = tight_burst_inputs(true);
    EngineOptions opt;
    opt.log_cache_events = true;
    ServingEngine engine(in.cluster, in.workload.models, in.profiles, in.trace, opt);
    SimulationReport rep = engine.run();
    const MemorySystem& mem = engine.memory();

    PrefixOracle oracle;
    for (std::size_t c = 0; c < mem.cache_count(); ++c) oracle.block[static_cast<int>(c)] = mem.cache(static_cast<int>(c)).block_size();

    std::size_t lookups = 0, evicts = 0, lookup_mismatch = 0, bad_evicts = 0;
    // request -> hits of its latest lookup pass
    std::map<int, int> hit;
    std::map<int, int> last_first_cache;
    for (const auto& e : mem.events()) {
        switch (e.kind) {
            case CacheEvent::Kind::insert: oracle.insert(e.cache, e.tokens); break;
            case CacheEvent::Kind::evict:
                ++evicts;
                if (!oracle.evict(e.cache, e.tokens)) ++bad_evicts;
                break;
            case CacheEvent::Kind::lookup: {
                ++lookups;
                const int expect = oracle.longest(e.cache, e.tokens);
                if (expect != e.matched) ++lookup_mismatch;
                if (e.request < 0) break;
                const int r = e.request;
                const MsgRuntime& m = engine.msgs().at(static_cast<std::size_t>(engine.requests().at(static_cast<std::size_t>(r)).msg));
                const int first = m.device_cache >= 0 ? m.device_cache : m.shared_caches.at(0);
                if (e.cache == first) hit[r] = 0;
                hit[r] = std::max(hit[r], expect);
                last_first_cache[r] = first;
                break;
            }
        }
    }
    std::size_t request_mismatch = 0;
    long hit_sum = 0;
    for (std::size_t i = 0; i < rep.requests.size(); ++i) {
        auto it = hit.find(static_cast<int>(i));
        const int expect = it == hit.end() ? 0 : it->second;
        if (rep.requests[i].prefix_hit_tokens != expect) ++request_mismatch;
        hit_sum += rep.requests[i].prefix_hit_tokens;
    }

    Inputs solo = tight_burst_inputs(false);
    SimulationReport rep_solo = simulate(solo);
    const double shared_rate = summarize(rep).prefix_hit_rate;
    const double solo_rate = summarize(rep_solo).prefix_hit_rate;

    Outcome o;
    o.pass = rep.requests.size() == 200 && lookup_mismatch == 0 && bad_evicts == 0 && request_mismatch == 0 &&
             evicts > 0 && hit_sum > 0 && shared_rate >= solo_rate;
    o.detail = std::to_string(rep.requests.size()) + " requests, " + std::to_string(lookups) + " lookups (" +
               std::to_string(lookup_mismatch) + " mismatched), " + std::to_string(evicts) + " evictions (" +
               std::to_string(bad_evicts) + " non-leaf), " + std::to_string(request_mismatch) +
               " per-request mismatches; hit rate shared host " + fmt("%.4f", shared_rate) + " vs device-only " +
               fmt("%.4f", solo_rate);
    return o;
}

// ---- A4 ----

Outcome a4() {
    const double MiB = 1024.0 * 1024.0, GiB = MiB * 1024.0;
    const double ar = collective_time(CollectiveKind::all_reduce, 64 * MiB, 4, 64 * GiB, 0.0);
    const double a2a = collective_time(CollectiveKind::all_to_all, 1 * MiB, 2, 1 * GiB, 0.0);
    Outcome o;
    o.pass = ar == 1.46484375e-3 && a2a == 488.28125e-6;
    o.detail = "all_reduce " + format_number(ar * 1e3) + " ms, all_to_all " + format_number(a2a * 1e6) + " us";
    return o;
}

// ---- A5 ----

// Event-stepped fluid replay with bottleneck-first water filling.
std::vector<double> water_filling(const std::vector<double>& capacity, const std::vector<FlowSpec>& flows) {
    const std::size_t n = flows.size();
    std::vector<double> left(n), finish(n, -1);
    std::vector<bool> started(n, false);
    for (std::size_t i = 0; i < n; ++i) left[i] = flows[i].bytes;
    double t = 0;
    std::size_t done = 0;
    while (done < n) {
        std::vector<std::size_t> active;
        for (std::size_t i = 0; i < n; ++i) {
            if (!started[i] && flows[i].start <= t) started[i] = true;
            if (started[i] && finish[i] < 0) active.push_back(i);
        }
        std::vector<double> rate(n, 0);
        std::vector<double> residual = capacity;
        std::set<std::size_t> open(active.begin(), active.end());
        while (!open.empty()) {
            double best = INFINITY;
            std::size_t bottleneck = 0;
            for (std::size_t r = 0; r < capacity.size(); ++r) {
                int users = 0;
                for (std::size_t i : open) users += std::count(flows[i].resources.begin(), flows[i].resources.end(), static_cast<int>(r)) > 0;
                if (users > 0 && residual[r] / users < best) {
                    best = residual[r] / users;
                    bottleneck = r;
                }
            }
            std::vector<std::size_t> fixed;
            for (std::size_t i : open) {
                const auto& res = flows[i].resources;
                if (std::find(res.begin(), res.end(), static_cast<int>(bottleneck)) != res.end()) fixed.push_back(i);
            }
            for (std::size_t i : fixed) {
                rate[i] = best;
                for (int r : flows[i].resources) residual[static_cast<std::size_t>(r)] -= best;
                open.erase(i);
            }
        }
        double next = INFINITY;
        for (std::size_t i = 0; i < n; ++i) {
            if (!started[i]) next = std::min(next, flows[i].start);
        }
        for (std::size_t i : active) next = std::min(next, t + left[i] / rate[i]);
        for (std::size_t i : active) {
            left[i] -= rate[i] * (next - t);
            if (left[i] <= 1e-9 * flows[i].bytes) {
                finish[i] = next;
                ++done;
            }
        }
        t = next;
    }
    return finish;
}

Outcome a5() {
    const double bytes = 0x1p30, cap = 0x1p34;
    const double solo = simulate_flows({cap}, {{{0}, bytes, 0}}).at(0);
    const auto pair = simulate_flows({cap}, {{{0}, bytes, 0}, {{0}, bytes, 0}});
    const bool equal_ok = pair[0] == 2 * solo && pair[1] == 2 * solo;

    std::mt19937_64 rng(20240611);
    std::uniform_real_distribution<double> U(0, 1);
    const int instances = 2000;
    const double tol = 1e-9;
    int bad = 0;
    double worst = 0;
    for (int k = 0; k < instances; ++k) {
        const int nres = 1 + static_cast<int>(rng() % 3);
        const int nflow = 1 + static_cast<int>(rng() % 4);
        std::vector<double> capacity;
        for (int r = 0; r < nres; ++r) capacity.push_back(1e8 + 9e8 * U(rng));
        std::vector<FlowSpec> flows;
        for (int f = 0; f < nflow; ++f) {
            FlowSpec s;
            for (int r = 0; r < nres; ++r) {
                if (rng() % 2) s.resources.push_back(r);
            }
            if (s.resources.empty()) s.resources.push_back(static_cast<int>(rng() % static_cast<unsigned>(nres)));
            s.bytes = 1e6 + 1e8 * U(rng);
            s.start = k % 5 == 0 ? 0.0 : 0.2 * U(rng);
            flows.push_back(s);
        }
        std::sort(flows.begin(), flows.end(), [](const FlowSpec& a, const FlowSpec& b) { return a.start < b.start; });
        auto got = simulate_flows(capacity, flows);
        auto want = water_filling(capacity, flows);
        for (std::size_t i = 0; i < flows.size(); ++i) {
            const double err = std::abs(got[i] - want[i]) / want[i];
            worst = std::max(worst, err);
            if (err > tol) ++bad;
        }
    }
    Outcome o;
    o.pass = equal_ok && bad == 0;
    o.detail = "solo " + format_number(solo) + " s, pair " + format_number(pair[0]) + "/" + format_number(pair[1]) +
               " s; " + std::to_string(instances) + " staggered instances, worst relative error " + fmt("%.3g", worst);
    return o;
}

// ---- A6 ----

struct PulseRun {
    std::map<std::string, std::vector<std::pair<double, double>>> active;  // merged, per used device
    double peak_w = 0;
    double total = 0;
    double recomputed = 0;
    double worst_union_err = 0;
};

PulseRun pulse_run(int tp) {
    ClusterSpec c = single_node(2);
    ModelSpec model = dense_model("pulse", 4);
    std::vector<std::string> pool{"gpu0"};
    if (tp == 2) pool.push_back("gpu1");
    c.msgs.push_back(msg("m0", "pulse", pool, tp));
    c.nodes[0].cpu_w = 100;
    c.nodes[0].other_w = 30;
    ProfileSet profiles;
    profiles.add(constant_profile("pulse", "const", 1e-3));
    TraceParams params;
    params.model = "pulse";
    params.input = LengthDist::constant(128);
    params.output = LengthDist::constant(32);
    Trace trace = gen_pulses(10, 3, 60.0, params, 7);

    EngineOptions opt;
    opt.log_ops = true;
    ServingEngine engine(c, {model}, profiles, trace, opt);
    SimulationReport rep = engine.run();
    const EnergyLedger& led = engine.ledger();

    PulseRun out;
    std::map<int, std::vector<std::pair<double, double>>> raw;
    for (const auto& iv : led.intervals()) {
        if (iv.state == DeviceState::active && iv.end > iv.start) raw[iv.device].push_back({iv.start, iv.end});
    }
    for (auto& [d, ivs] : raw) {
        std::sort(ivs.begin(), ivs.end());
        std::vector<std::pair<double, double>> merged;
        for (auto iv : ivs) {
            if (!merged.empty() && iv.first <= merged.back().second) {
                merged.back().second = std::max(merged.back().second, iv.second);
            } else {
                merged.push_back(iv);
            }
        }
        out.active[led.devices().at(static_cast<std::size_t>(d)).id] = merged;
    }
    for (const auto& w : led.power_series(1.0)) {
        double s = 0;
        for (double x : w) s += x;
        out.peak_w = std::max(out.peak_w, s);
    }
    out.total = led.total();
    for (const auto& iv : led.intervals()) out.recomputed += iv.watts * (iv.end - iv.start);
    for (const auto& tr : led.transfers()) out.recomputed += static_cast<double>(tr.bytes) * tr.energy_per_byte;
    for (const auto& k : led.constants()) out.recomputed += k.watts * led.duration();

    // Active time per device must equal the union of its occupying ops in the op log.
    std::map<std::string, std::vector<std::pair<double, double>>> ops;
    for (const auto& r : engine.system().log()) {
        if (!occupies_devices(r.kind)) continue;
        for (int d : r.devices) ops[engine.topology().device(d).id].push_back({r.start, r.end});
    }
    for (auto& [id, ivs] : ops) {
        std::sort(ivs.begin(), ivs.end());
        double len = 0, lo = -1, hi = -1;
        for (auto [a, b] : ivs) {
            if (a > hi) {
                len += hi - lo;
                lo = a;
                hi = b;
            } else {
                hi = std::max(hi, b);
            }
        }
        len += hi - lo;
        double ledger_len = 0;
        for (auto [a, b] : out.active[id]) ledger_len += b - a;
        out.worst_union_err = std::max(out.worst_union_err, std::abs(len - ledger_len) / len);
    }
    (void)rep;
    return out;
}

Outcome a6() {
    PulseRun one = pulse_run(1);
    PulseRun two = pulse_run(2);
    const double rel = 1e-9;
    bool ok = one.active.size() == 1 && two.active.size() == 2;
    std::string counts;
    for (const PulseRun* r : {&one, &two}) {
        for (const auto& [id, ivs] : r->active) {
            counts += id + ":" + std::to_string(ivs.size()) + " ";
            if (ivs.size() != 3) ok = false;
            for (std::size_t k = 0; k < ivs.size(); ++k) {
                // Pulse k arrives at 60 k; its activity must end before the next pulse.
                if (ivs[k].first < 60.0 * static_cast<double>(k) || ivs[k].second >= 60.0 * static_cast<double>(k + 1)) ok = false;
            }
        }
    }
    ok = ok && two.peak_w > one.peak_w;
    ok = ok && rel_close(one.total, one.recomputed, rel) && rel_close(two.total, two.recomputed, rel);
    ok = ok && one.worst_union_err <= rel && two.worst_union_err <= rel;
    Outcome o;
    o.pass = ok;
    o.detail = "active pulses " + counts + "; peak tp1 " + fmt("%.1f W", one.peak_w) + " tp2 " + fmt("%.1f W", two.peak_w) +
               "; ledger vs recomputation " + fmt("%.3g", std::abs(one.total - one.recomputed) / one.total) + "/" +
               fmt("%.3g", std::abs(two.total - two.recomputed) / two.total);
    return o;
}

// ---- A7 ----

Outcome a7() {
    ClusterSpec c = single_node(2);
    ModelSpec model = dense_model("pd32", 32);
    MsgSpec p = msg("p", "pd32", {"gpu0"});
    p.role = MsgRole::prefill;
    p.pd_peers = {"d"};
    MsgSpec d = msg("d", "pd32", {"gpu1"});
    d.role = MsgRole::decode;
    c.msgs = {p, d};
    ProfileSet profiles;
    profiles.add(constant_profile("pd32", "const", 1e-3));
    Trace trace;
    trace.requests.push_back(RequestSpec{"r0", "pd32", 0.0, 100, 4, {}, {}});

    std::vector<ExecutionGraph> graphs;
    EngineOptions opt;
    opt.log_ops = true;
    opt.on_graph = [&](const ExecutionGraph& g) { graphs.push_back(g); };
    ServingEngine engine(c, {model}, profiles, trace, opt);
    SimulationReport rep = engine.run();

    int decode_msg = -1;
    for (const auto& m : engine.msgs()) {
        if (m.spec.id == "d") decode_msg = m.index;
    }
    std::size_t transfers = 0;
    std::uint64_t bytes = 0;
    for (const auto& g : graphs) {
        for (const auto& op : g.ops) {
            if (op.kind == OpKind::p2p && op.tag == "kv_transfer") {
                ++transfers;
                bytes += op.bytes;
            }
        }
    }
    double last_transfer = -1, first_decode = INFINITY;
    for (const auto& r : engine.system().log()) {
        const ExecutionGraph& g = graphs.at(static_cast<std::size_t>(r.graph));
        const MappedOp& op = g.ops.at(static_cast<std::size_t>(r.op));
        if (op.tag == "kv_transfer") last_transfer = std::max(last_transfer, r.end);
        if (g.msg == decode_msg) first_decode = std::min(first_decode, r.start);
    }
    const std::uint64_t expected = 100 * kv_bytes_per_token(model);
    Outcome o;
    o.pass = transfers == 32 && bytes == expected && last_transfer >= 0 && first_decode >= last_transfer &&
             rep.requests.at(0).done_time.has_value();
    o.detail = std::to_string(transfers) + " kv_transfer ops, " + std::to_string(bytes) + " bytes (expected " +
               std::to_string(expected) + "); last transfer ends " + format_number(last_transfer) +
               " s, decode starts " + format_number(first_decode) + " s";
    return o;
}

// ---- A8 ----

struct ExpertLoadCheck {
    std::size_t graphs = 0;
    std::size_t loads = 0;
    std::size_t violations = 0;
};

ExpertLoadCheck expert_loads(int tp, int ep) {
    ClusterSpec c = single_node(2);
    MemoryTierSpec host;
    host.tier = TierKind::host;
    host.capacity = 64'000'000'000ULL;
    host.bandwidth = 50e9;
    c.tiers.push_back(host);
    ModelSpec model = moe_model("moe", 4, 8, 2, ExpertRouting::random);
    MsgSpec m = msg("m0", "moe", tp == 2 ? std::vector<std::string>{"gpu0", "gpu1"} : std::vector<std::string>{"gpu0"}, tp);
    m.ep_degree = ep;
    OffloadRule rule;
    rule.op_class = OffloadClass::expert_ffn;
    rule.target = "host";
    rule.experts = {6, 7};
    m.offload_rules.push_back(rule);
    c.msgs.push_back(m);
    ProfileSet profiles;
    profiles.add(constant_profile("moe", "const", 1e-4));
    TraceParams params;
    params.model = "moe";
    params.input = LengthDist::constant(2);
    params.output = LengthDist::constant(3);
    Trace trace = gen_poisson(200.0, 12, params, 3);

    ExpertLoadCheck out;
    EngineOptions opt;
    opt.on_graph = [&](const ExecutionGraph& g) {
        ++out.graphs;
        std::map<std::pair<int, int>, int> loads;  // (layer, expert)
        std::set<std::pair<int, int>> used;
        for (const auto& op : g.ops) {
            if (op.kind == OpKind::mem_load && op.tag.rfind("expert_load:", 0) == 0) {
                ++loads[{op.layer, std::stoi(op.tag.substr(12))}];
                ++out.loads;
            }
            if (op.kind == OpKind::compute && op.key.op == OpClass::expert_ffn) {
                used.insert({op.layer, std::stoi(op.tag.substr(op.tag.find(':') + 1))});
            }
        }
        for (int l = 0; l < model.num_layers; ++l) {
            for (int e = 0; e < 8; ++e) {
                const bool offloaded = e >= 6;
                const int want = offloaded && used.count({l, e}) ? 1 : 0;
                auto it = loads.find({l, e});
                if ((it == loads.end() ? 0 : it->second) != want) ++out.violations;
            }
        }
    };
    ServingEngine engine(c, {model}, profiles, trace, opt);
    engine.run();
    return out;
}

Outcome a8() {
    int spread_bad = 0, cases = 0;
    for (int tokens : {1, 7, 64, 1000, 4097}) {
        for (auto [E, k] : {std::pair{8, 2}, {16, 1}, {60, 4}, {5, 3}}) {
            for (std::uint64_t layer = 0; layer < 4; ++layer) {
                auto counts = route_experts(ExpertRouting::proportional_load, tokens, E, k, layer);
                auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
                ++cases;
                if (*hi - *lo > 1) ++spread_bad;
            }
        }
    }
    const int T = 10000, E = 8, K = 2;
    auto counts = route_experts(ExpertRouting::random, T, E, K, 12345);
    const double p = static_cast<double>(K) / E;
    const double mean = T * p, sigma = std::sqrt(T * p * (1 - p));
    double worst_z = 0;
    for (int c : counts) worst_z = std::max(worst_z, std::abs(c - mean) / sigma);

    ExpertLoadCheck a = expert_loads(2, 1);
    ExpertLoadCheck b = expert_loads(2, 2);
    Outcome o;
    o.pass = spread_bad == 0 && worst_z <= 3.0 && a.violations == 0 && b.violations == 0 && a.loads > 0 && b.loads > 0;
    o.detail = "proportional spread >1 in " + std::to_string(spread_bad) + "/" + std::to_string(cases) +
               " cases; random worst |z| " + fmt("%.2f", worst_z) + "; expert loads tp2 " + std::to_string(a.loads) +
               " over " + std::to_string(a.graphs) + " graphs, ep2 " + std::to_string(b.loads) + " over " +
               std::to_string(b.graphs) + " graphs, " + std::to_string(a.violations + b.violations) + " violations";
    return o;
}

// ---- A9 ----

struct DecodeStats {
    double decode_tps = 0;
    double joules_per_token = 0;
    double makespan = 0;
};

DecodeStats decode_stats(const SimulationReport& rep) {
    DecodeStats s;
    double first = INFINITY, last = 0;
    std::uint64_t decode_tokens = 0, tokens = 0;
    for (const auto& r : rep.requests) {
        first = std::min(first, *r.first_token_time);
        last = std::max(last, *r.done_time);
        decode_tokens += static_cast<std::uint64_t>(r.output_len - 1);
        tokens += static_cast<std::uint64_t>(r.output_len);
    }
    s.decode_tps = static_cast<double>(decode_tokens) / (last - first);
    s.joules_per_token = rep.energy.total() / static_cast<double>(tokens);
    s.makespan = summarize(rep).makespan;
    return s;
}

Inputs gpu_only(Inputs in) {
    for (auto& n : in.cluster.nodes) {
        std::erase_if(n.devices, [](const DeviceSpec& d) { return d.kind == DeviceKind::pim_stack; });
    }
    std::erase_if(in.cluster.links, [&](const LinkSpec& l) {
        return l.endpoints[0] == "pim0" || l.endpoints[1] == "pim0";
    });
    for (auto& m : in.cluster.msgs) {
        m.offload_rules.clear();
        m.sbi_enabled = false;
    }
    return in;
}

Inputs with_batch(Inputs in, int n, bool sbi) {
    in.trace = gen_fixed(n, 128, 32, in.workload.models.at(0).name);
    for (auto& m : in.cluster.msgs) {
        m.sbi_enabled = sbi;
        m.sbi_threshold = std::min(m.sbi_threshold, n);
    }
    return in;
}

Outcome a9() {
    Inputs pim = load_inputs(load_scenario(scenario_path("pim")));
    DecodeStats with_pim = decode_stats(simulate(pim));
    DecodeStats gpu = decode_stats(simulate(gpu_only(pim)));
    const double speedup = with_pim.decode_tps / gpu.decode_tps;

    DecodeStats sbi256 = decode_stats(simulate(with_batch(pim, 256, true)));
    DecodeStats plain256 = decode_stats(simulate(with_batch(pim, 256, false)));
    DecodeStats sbi8 = decode_stats(simulate(with_batch(pim, 8, true)));
    DecodeStats plain8 = decode_stats(simulate(with_batch(pim, 8, false)));

    Outcome o;
    o.pass = speedup > 1.1 && with_pim.joules_per_token < gpu.joules_per_token && sbi256.makespan <= plain256.makespan &&
             !(sbi8.makespan < plain8.makespan);
    o.detail = "decode throughput x" + fmt("%.3f", speedup) + ", J/token " + fmt("%.4f", with_pim.joules_per_token) +
               " vs " + fmt("%.4f", gpu.joules_per_token) + "; makespan batch 256 sbi " + fmt("%.4f", sbi256.makespan) +
               " vs " + fmt("%.4f", plain256.makespan) + ", batch 8 sbi " + fmt("%.4f", sbi8.makespan) + " vs " +
               fmt("%.4f", plain8.makespan);
    return o;
}

// ---- A10 ----

Outcome a10() {
    const auto t0 = Clock::now();
    Inputs in = load_inputs(load_scenario(scenario_path("poisson_tp4")));
    SimulationReport rep = simulate(in);
    const double elapsed = seconds_since(t0);
    const Summary s = summarize(rep);
    Outcome o;
    o.pass = elapsed < 300.0 && s.requests == 300 && s.completed == 300;
    o.detail = std::to_string(s.completed) + "/" + std::to_string(s.requests) + " completed in " + fmt("%.2fs", elapsed);
    return o;
}

// ---- A11 ----

struct FuzzState {
    MemorySystem mem;
    std::vector<std::pair<int, RequestKv>> held;
};

// Independent accounting: capacity, single ownership, and every block accounted for.
std::string audit(const FuzzState& s) {
    std::map<BlockId, int> owners;
    for (const auto& [r, kv] : s.held) {
        for (BlockId b : kv.blocks) {
            ++owners[b];
            if (!s.mem.tier(kv.tier).blocks().count(b)) return "request block not resident";
        }
    }
    for (std::size_t c = 0; c < s.mem.cache_count(); ++c) {
        const auto& cache = s.mem.cache(static_cast<int>(c));
        for (int n : cache.live_nodes()) {
            const BlockId b = cache.node(n).block;
            ++owners[b];
            if (!s.mem.tier(cache.tier()).blocks().count(b)) return "cache block not resident";
        }
    }
    for (std::size_t t = 0; t < s.mem.tier_count(); ++t) {
        const auto& tier = s.mem.tier(static_cast<int>(t));
        std::uint64_t sum = 0;
        for (const auto& [id, b] : tier.blocks()) {
            sum += b.bytes;
            if (owners[id] != 1) return "block owned " + std::to_string(owners[id]) + " times";
        }
        if (sum > tier.capacity()) return "tier over capacity";
        if (sum != tier.used()) return "tier used bytes drift";
    }
    std::size_t resident = 0;
    for (std::size_t t = 0; t < s.mem.tier_count(); ++t) resident += s.mem.tier(static_cast<int>(t)).blocks().size();
    if (resident != owners.size()) return "orphaned block";
    return {};
}

Outcome a11() {
    const int sequences = 10000;
    std::mt19937_64 rng(99);
    std::size_t ops = 0, approved = 0, rejected = 0;
    std::string failure;
    for (int seq = 0; seq < sequences && failure.empty(); ++seq) {
        FuzzState s{MemorySystem(64 + rng() % 64), {}};
        const int bs = rng() % 2 ? 16 : 8;
        const int host_bs = rng() % 3 ? bs : 2 * bs;
        const std::uint64_t per = s.mem.kv_bytes_per_token();
        const int dev = s.mem.add_tier("dev", TierKind::device, per * static_cast<std::uint64_t>(64 + rng() % 512), 1e12, bs, 0);
        const int host = s.mem.add_tier("host", TierKind::host, per * static_cast<std::uint64_t>(rng() % 512), 1e11, host_bs, 0);
        const int dc = s.mem.add_cache("dev/m", dev, TierScope::per_device);
        const int hc = s.mem.add_cache("host/m", host, TierScope::per_node);
        if (rng() % 2) s.mem.cache(dc).demote_to = hc;
        const bool use_host = rng() % 2;
        int next_request = 0;
        const int steps = 10 + static_cast<int>(rng() % 30);
        for (int step = 0; step < steps; ++step) {
            s.mem.set_clock(step);
            const int group = static_cast<int>(rng() % 4);
            const int plen = static_cast<int>(rng() % 96);
            std::vector<std::int32_t> prefix(static_cast<std::size_t>(plen));
            for (int i = 0; i < plen; ++i) prefix[static_cast<std::size_t>(i)] = group * 1000 + (i < 48 ? i : static_cast<int>(rng() % 3) + i * 10);
            const auto action = rng() % 10;
            if (action < 5) {
                AdmissionRequest ar;
                ar.request = next_request++;
                ar.pool_tier = dev;
                ar.device_cache = rng() % 4 ? dc : -1;
                if (use_host) ar.shared_caches = {hc};
                ar.promote_on_hit = rng() % 2;
                ar.prefix = prefix;
                ar.kv_tokens = plen + 1 + static_cast<int>(rng() % 64);
                ar.lookup_limit = ar.kv_tokens - 1;
                Admission a = s.mem.admit_request(ar);
                if (a.approved) {
                    ++approved;
                    s.held.emplace_back(ar.request, std::move(a.kv));
                } else {
                    ++rejected;
                }
            } else if (action < 8) {
                if (!s.held.empty()) {
                    const std::size_t i = rng() % s.held.size();
                    if (rng() % 3 == 0) {
                        s.mem.release_transient(s.held[i].second);
                    } else {
                        s.mem.release_request(s.held[i].second);
                        s.held.erase(s.held.begin() + static_cast<std::ptrdiff_t>(i));
                    }
                }
            } else if (action < 9) {
                s.mem.prefix_insert(rng() % 2 ? dc : hc, prefix, rng() % 2);
            } else {
                s.mem.admit(rng() % 2 ? dev : host, per * (rng() % 128));
            }
            ++ops;
            try {
                s.mem.check_invariants();
            } catch (const std::exception& e) {
                failure = std::string("sequence ") + std::to_string(seq) + ": " + e.what();
                break;
            }
            if (auto err = audit(s); !err.empty()) {
                failure = "sequence " + std::to_string(seq) + " step " + std::to_string(step) + ": " + err;
                break;
            }
        }
    }
    Outcome o;
    o.pass = failure.empty();
    o.detail = std::to_string(sequences) + " sequences, " + std::to_string(ops) + " ops (" + std::to_string(approved) +
               " admitted, " + std::to_string(rejected) + " rejected)" + (failure.empty() ? "" : "; " + failure);
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<std::string> only(argv + 1, argv + argc);
    const fs::path scratch = fs::temp_directory_path() / ("servesim-acceptance-" + std::to_string(::getpid()));
    fs::create_directories(scratch);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
        {"A1", a1},
        {"A2", [&] { return a2(scratch); }},
        {"A3", a3},
        {"A4", a4},
        {"A5", a5},
        {"A6", a6},
        {"A7", a7},
        {"A8", a8},
        {"A9", a9},
        {"A10", a10},
        {"A11", a11},
    };
    int failed = 0;
    for (const auto& [id, fn] : checks) {
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        const auto t0 = Clock::now();
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%-4s %s  %s [%.2fs]\n", id.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    fs::remove_all(scratch);
    std::printf("%d failed\n", failed);
    return failed == 0 ? 0 : 1;
}
