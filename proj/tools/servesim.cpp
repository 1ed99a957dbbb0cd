// servesim command-line driver.
//
// Exit codes: 0 success, 1 invalid input (parse, validation, usage),
// 2 runtime failure (deadlock, watchdog, IO while writing outputs).

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "servesim/engine.hpp"
#include "servesim/metrics.hpp"
#include "servesim/profile.hpp"
#include "servesim/runner.hpp"
#include "servesim/validate.hpp"
#include "servesim/workload.hpp"

using namespace servesim;

namespace {

enum Exit { kOk = 0, kInvalid = 1, kRuntime = 2 };

struct SimulateArgs {
    std::string cluster;
    std::string workload;
    std::vector<std::string> profiles;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::optional<double> until;
    bool dump_graphs = false;
    bool dump_events = false;
    bool strict = false;
    double bucket = 1.0;
    std::vector<std::string> scenarios;
    int jobs = 1;
};

std::string event_type_name(EventType t) {
    switch (t) {
        case EventType::op_done: return "op_done";
        case EventType::flow_activate: return "flow_activate";
        case EventType::flow_done: return "flow_done";
        case EventType::arrival: return "arrival";
        case EventType::schedule: return "schedule";
        case EventType::timeout: return "timeout";
    }
    return "?";
}

// Runs one simulation; output text goes to `log` so parallel jobs print in order.
int run_one(const Scenario& sc, const SimulateArgs& args, std::ostream& log) {
    Inputs in;
    try {
        in = load_inputs(sc);
    } catch (const ConfigError& e) {
        log << "error: " << e.what() << "\n";
        return kInvalid;
    }
    ValidationReport rep = validate(in.cluster, in.workload.models, in.profiles);
    if (!rep.ok(args.strict)) {
        log << rep.text();
        return kInvalid;
    }
    for (const auto& w : rep.warnings) log << "warning: " << w << "\n";

    std::error_code ec;
    std::filesystem::create_directories(sc.out, ec);
    if (ec) {
        log << "error: " << sc.out << ": " << ec.message() << "\n";
        return kRuntime;
    }
    std::unique_ptr<std::ofstream> graphs, events;
    EngineOptions opts;
    opts.until = sc.until;
    if (args.dump_graphs) {
        graphs = std::make_unique<std::ofstream>(std::filesystem::path(sc.out) / "graphs.jsonl", std::ios::binary);
        opts.on_graph = [&graphs](const ExecutionGraph& g) { *graphs << to_json(g).dump() << '\n'; };
    }
    if (args.dump_events) {
        events = std::make_unique<std::ofstream>(std::filesystem::path(sc.out) / "events.jsonl", std::ios::binary);
        opts.on_event = [&events](const Event& e) {
            json j;
            j["time"] = e.time;
            j["priority"] = e.priority;
            j["owner"] = e.owner;
            j["seq"] = e.seq;
            j["type"] = event_type_name(e.type);
            j["a"] = e.a;
            j["b"] = e.b;
            *events << j.dump() << '\n';
        };
    }
    try {
        SimulationReport report = simulate(in, std::move(opts));
        write_outputs(report, sc.out, args.bucket);
        log << "== " << sc.name << " -> " << sc.out << "\n" << format_summary(summarize(report));
    } catch (const ConfigError& e) {
        log << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const std::exception& e) {
        log << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kOk;
}

int cmd_simulate(const SimulateArgs& args) {
    std::vector<Scenario> runs;
    try {
        for (const auto& p : args.scenarios) runs.push_back(load_scenario(p));
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    }
    if (runs.empty()) {
        if (args.cluster.empty() || args.workload.empty()) {
            std::cerr << "error: simulate needs --cluster and --workload (or --scenario)\n";
            return kInvalid;
        }
        Scenario s;
        s.name = std::filesystem::path(args.cluster).stem().string();
        s.cluster = args.cluster;
        s.workload = args.workload;
        s.profiles = args.profiles;
        s.out = args.out;
        runs.push_back(std::move(s));
    }
    for (auto& s : runs) {
        if (args.seed) s.seed = args.seed;
        if (args.until) s.until = args.until;
    }

    std::vector<std::ostringstream> logs(runs.size());
    std::vector<int> codes(runs.size(), kOk);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < runs.size(); i = next++) codes[i] = run_one(runs[i], args, logs[i]);
    };
    const auto n = static_cast<std::size_t>(std::max(1, args.jobs));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::min(n, runs.size()); ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    int code = kOk;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        (codes[i] == kOk ? std::cout : std::cerr) << logs[i].str();
        code = std::max(code, codes[i]);
    }
    return code;
}

struct GenWorkloadArgs {
    std::string workload;
    bool poisson = false, pulses = false, burst_idle = false, fixed = false;
    double rate = 10;
    int n = 300;
    int k = 10;
    int pulse_count = 3;
    double interval = 60;
    double burst_rate = 20, idle_rate = 1, period = 10, duty = 0.5;
    int input_len = 128, output_len = 128;
    int prefix_groups = 0, prefix_len = 0;
    double share_prob = 1.0;
    std::string model = "model";
    std::uint64_t seed = 0;
    std::string out = "trace.jsonl";
};

int cmd_gen_workload(const GenWorkloadArgs& a) {
    Trace t;
    try {
        if (!a.workload.empty()) {
            WorkloadSpec w = load_workload_config(a.workload);
            t = make_trace(w, a.seed ? std::optional<std::uint64_t>(a.seed) : std::nullopt);
        } else {
            const int modes = a.poisson + a.pulses + a.burst_idle + a.fixed;
            if (modes != 1) {
                std::cerr << "error: pick exactly one of --poisson, --pulses, --burst-idle, --fixed (or --workload)\n";
                return kInvalid;
            }
            TraceParams p;
            p.model = a.model;
            p.input = LengthDist::constant(a.input_len);
            p.output = LengthDist::constant(a.output_len);
            if (a.prefix_groups > 0) p.prefix_pool = PrefixPoolSpec{a.prefix_groups, a.prefix_len, a.share_prob};
            if (a.poisson) t = gen_poisson(a.rate, a.n, p, a.seed);
            if (a.pulses) t = gen_pulses(a.k, a.pulse_count, a.interval, p, a.seed);
            if (a.burst_idle) t = gen_burst_idle(a.burst_rate, a.idle_rate, a.period, a.duty, a.n, p, a.seed);
            if (a.fixed) t = gen_fixed(a.n, a.input_len, a.output_len, a.model);
        }
        write_trace_jsonl(t, a.out);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    std::cout << "wrote " << t.requests.size() << " requests to " << a.out << "\n";
    return kOk;
}

struct GenProfileArgs {
    std::string workload;
    std::string model;
    std::string cluster;
    std::string device;
    std::string kind = "gpu";
    std::string profile_ref;
    double mem_bandwidth = 0;
    int pim_channels = 0;
    double peak_flops = 0;
    int max_batch = 256;
    std::int64_t max_seq = 8192;
    std::string out;
};

int cmd_gen_profile(const GenProfileArgs& a) {
    try {
        WorkloadSpec w = load_workload_config(a.workload);
        const ModelSpec* model = a.model.empty() ? (w.models.empty() ? nullptr : &w.models.front()) : w.find_model(a.model);
        if (!model) throw ConfigError(a.workload + ": model '" + a.model + "' not found");
        DeviceSpec dev;
        if (!a.cluster.empty()) {
            ClusterSpec c = load_cluster_config(a.cluster);
            const DeviceSpec* d = c.find_device(a.device);
            if (!d) throw ConfigError(a.cluster + ": no device '" + a.device + "'");
            dev = *d;
        } else {
            static const std::pair<const char*, DeviceKind> kinds[] = {{"gpu", DeviceKind::gpu},
                                                                       {"npu", DeviceKind::npu},
                                                                       {"tpu", DeviceKind::tpu},
                                                                       {"pim_stack", DeviceKind::pim_stack},
                                                                       {"cxl_device", DeviceKind::cxl_device}};
            auto it = std::find_if(std::begin(kinds), std::end(kinds), [&](const auto& p) { return a.kind == p.first; });
            if (it == std::end(kinds)) throw ConfigError("--kind: unknown device kind '" + a.kind + "'");
            dev.id = a.kind;
            dev.kind = it->second;
            dev.mem_bandwidth = a.mem_bandwidth;
            if (a.pim_channels > 0) dev.pim_channels = a.pim_channels;
            if (!(dev.mem_bandwidth > 0)) throw ConfigError("--mem-bandwidth must be > 0");
        }
        if (!a.profile_ref.empty()) dev.profile_ref = a.profile_ref;
        SynthOptions opts;
        opts.max_batch = a.max_batch;
        opts.max_seq = a.max_seq;
        ProfileTable t = synth_profile(dev, *model, a.peak_flops, opts);
        save_profile(t, a.out);
        std::cout << "wrote " << t.size() << " samples (" << t.model() << " on " << t.device_kind() << ") to " << a.out
                  << "\n";
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kOk;
}

int cmd_validate(const SimulateArgs& a) {
    std::vector<Scenario> runs;
    try {
        for (const auto& p : a.scenarios) runs.push_back(load_scenario(p));
        if (runs.empty()) {
            Scenario s;
            s.name = a.cluster;
            s.cluster = a.cluster;
            s.workload = a.workload;
            s.profiles = a.profiles;
            runs.push_back(std::move(s));
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    }
    int code = kOk;
    for (const auto& s : runs) {
        try {
            Inputs in = load_inputs(s);
            ValidationReport rep = validate(in.cluster, in.workload.models, in.profiles);
            std::cout << "== " << s.name << "\n" << rep.text();
            if (!rep.ok(a.strict)) code = kInvalid;
        } catch (const ConfigError& e) {
            std::cout << "== " << s.name << "\nerror: " << e.what() << "\nFAILED\n";
            code = kInvalid;
        }
    }
    return code;
}

int cmd_report(const std::string& path, bool as_json) {
    try {
        Summary s = summarize(read_requests_csv(path));
        if (as_json) {
            std::cout << to_json(s).dump(2) << "\n";
        } else {
            std::cout << format_summary(s);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"servesim: discrete-event simulator for LLM serving clusters"};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "Run a simulation and write requests/timeseries/energy/summary");
    simulate->add_option("--cluster", sim.cluster, "Cluster config (JSON)");
    simulate->add_option("--workload", sim.workload, "Workload config (JSON)");
    simulate->add_option("--profiles", sim.profiles, "Profile tables (JSON)");
    simulate->add_option("--out", sim.out, "Output directory");
    simulate->add_option("--seed", sim.seed, "Override the workload seed");
    simulate->add_option("--until", sim.until, "Stop at this simulated time (s)");
    simulate->add_flag("--dump-graphs", sim.dump_graphs, "Write every execution graph to graphs.jsonl");
    simulate->add_flag("--dump-events", sim.dump_events, "Write every processed event to events.jsonl");
    simulate->add_flag("--strict", sim.strict, "Treat validation warnings as errors");
    simulate->add_option("--bucket", sim.bucket, "Time-series bucket width (s)")->check(CLI::PositiveNumber);
    simulate->add_option("--scenario", sim.scenarios, "Scenario file(s) bundling cluster/workload/profiles/out");
    simulate->add_option("--jobs,-j", sim.jobs, "Scenario files simulated in parallel")->check(CLI::PositiveNumber);

    GenWorkloadArgs gw;
    auto* genw = app.add_subcommand("gen-workload", "Generate a JSONL request trace");
    genw->add_option("--workload", gw.workload, "Use the generator block of this workload config");
    genw->add_flag("--poisson", gw.poisson, "Poisson arrivals (--rate, --n)");
    genw->add_flag("--pulses", gw.pulses, "k simultaneous requests per pulse (--k, --pulse-count, --interval)");
    genw->add_flag("--burst-idle", gw.burst_idle, "Alternating burst and idle Poisson phases");
    genw->add_flag("--fixed", gw.fixed, "n requests at t = 0");
    genw->add_option("--rate", gw.rate, "Arrival rate (1/s)");
    genw->add_option("--n", gw.n, "Request count");
    genw->add_option("--k", gw.k, "Requests per pulse");
    genw->add_option("--pulse-count", gw.pulse_count, "Number of pulses");
    genw->add_option("--interval", gw.interval, "Seconds between pulses");
    genw->add_option("--burst-rate", gw.burst_rate);
    genw->add_option("--idle-rate", gw.idle_rate);
    genw->add_option("--period", gw.period);
    genw->add_option("--duty", gw.duty);
    genw->add_option("--input-len", gw.input_len);
    genw->add_option("--output-len", gw.output_len);
    genw->add_option("--prefix-groups", gw.prefix_groups);
    genw->add_option("--prefix-len", gw.prefix_len);
    genw->add_option("--share-prob", gw.share_prob);
    genw->add_option("--model", gw.model);
    genw->add_option("--seed", gw.seed);
    genw->add_option("--out", gw.out, "Trace path");

    GenProfileArgs gp;
    bool roofline = true;
    auto* genp = app.add_subcommand("gen-profile", "Synthesize a roofline profile table");
    genp->add_flag("--roofline", roofline, "Roofline latency model (the only synthesizer)");
    genp->add_option("--workload", gp.workload, "Workload config holding the model")->required();
    genp->add_option("--model", gp.model, "Model name (default: first)");
    genp->add_option("--cluster", gp.cluster, "Take the device spec from this cluster config");
    genp->add_option("--device", gp.device, "Device id within --cluster");
    genp->add_option("--kind", gp.kind, "Device kind when no --cluster is given");
    genp->add_option("--profile-ref", gp.profile_ref, "Profile id written into the table");
    genp->add_option("--mem-bandwidth", gp.mem_bandwidth, "Bytes/s (per channel for pim_stack)");
    genp->add_option("--pim-channels", gp.pim_channels);
    genp->add_option("--peak-flops", gp.peak_flops, "Peak FLOP/s")->required();
    genp->add_option("--max-batch", gp.max_batch);
    genp->add_option("--max-seq", gp.max_seq);
    genp->add_option("--out", gp.out, "Profile path")->required();

    SimulateArgs val;
    auto* validate_cmd = app.add_subcommand("validate", "Check profile coverage, capacity and routing");
    validate_cmd->add_option("--cluster", val.cluster);
    validate_cmd->add_option("--workload", val.workload);
    validate_cmd->add_option("--profiles", val.profiles);
    validate_cmd->add_option("--scenario", val.scenarios);
    validate_cmd->add_flag("--strict", val.strict, "Treat warnings as errors");

    std::string requests;
    bool as_json = false;
    auto* report = app.add_subcommand("report", "Re-summarize an existing requests.csv");
    report->add_option("requests", requests, "requests.csv")->required();
    report->add_flag("--json", as_json);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kInvalid;
    }

    if (*simulate) return cmd_simulate(sim);
    if (*genw) return cmd_gen_workload(gw);
    if (*genp) return cmd_gen_profile(gp);
    if (*validate_cmd) {
        if (val.scenarios.empty() && (val.cluster.empty() || val.workload.empty())) {
            std::cerr << "error: validate needs --cluster and --workload (or --scenario)\n" << validate_cmd->help();
            return kInvalid;
        }
        return cmd_validate(val);
    }
    if (*report) return cmd_report(requests, as_json);
    return kInvalid;
}
