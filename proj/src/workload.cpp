#include "servesim/workload.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace servesim {

namespace {

std::string request_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "r%06zu", i);
    return buf;
}

// Draws lengths (and optionally a shared prefix) for one request.
RequestSpec draw_request(std::size_t index, double arrival, const TraceParams& p, Rng& rng) {
    RequestSpec r;
    r.id = request_id(index);
    r.model = p.model;
    r.arrival = arrival;
    r.input_len = p.input.sample(rng.uniform());
    r.output_len = p.output.sample(rng.uniform());
    if (p.prefix_pool) {
        const auto& pool = *p.prefix_pool;
        if (rng.uniform() < pool.share_prob) {
            auto group = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(pool.groups)));
            r.prefix_tokens.reserve(static_cast<std::size_t>(pool.prefix_len));
            for (int i = 0; i < pool.prefix_len; ++i) r.prefix_tokens.push_back(group * 1'000'000 + i);
            r.input_len += pool.prefix_len;
            r.session = "g" + std::to_string(group);
        }
    }
    return r;
}

std::string describe(const char* kind, const std::vector<std::pair<const char*, double>>& kv) {
    std::ostringstream os;
    os << kind;
    for (const auto& [k, v] : kv) os << ' ' << k << '=' << v;
    return os.str();
}

}  // namespace

void Trace::check() const {
    std::set<std::string> ids;
    double prev = 0;
    for (const auto& r : requests) {
        if (!ids.insert(r.id).second) throw std::logic_error("trace: duplicate request id '" + r.id + "'");
        if (r.arrival < prev) throw std::logic_error("trace: arrivals not sorted at '" + r.id + "'");
        if (r.arrival < 0 || r.input_len < 1 || r.output_len < 1) {
            throw std::logic_error("trace: request '" + r.id + "' violates arrival >= 0, lengths >= 1");
        }
        if (static_cast<int>(r.prefix_tokens.size()) > r.input_len) {
            throw std::logic_error("trace: request '" + r.id + "' prefix longer than input");
        }
        prev = r.arrival;
    }
}

Trace gen_poisson(double rate, int n, const TraceParams& params, std::uint64_t seed) {
    Trace t;
    t.seed = seed;
    t.provenance = describe("poisson", {{"rate", rate}, {"n", n}});
    if (n <= 0) return t;
    if (!(rate > 0)) throw std::invalid_argument("gen_poisson: rate must be > 0");
    Rng rng(seed);
    double clock = 0;
    for (int i = 0; i < n; ++i) {
        clock += rng.exponential(rate);
        t.requests.push_back(draw_request(static_cast<std::size_t>(i), clock, params, rng));
    }
    return t;
}

Trace gen_pulses(int k, int pulses, double interval, const TraceParams& params, std::uint64_t seed) {
    if (k < 1 || pulses < 1) throw std::invalid_argument("gen_pulses: k and pulses must be >= 1");
    Trace t;
    t.seed = seed;
    t.provenance = describe("pulses", {{"k", k}, {"pulses", pulses}, {"interval", interval}});
    Rng rng(seed);
    std::size_t index = 0;
    for (int p = 0; p < pulses; ++p) {
        for (int i = 0; i < k; ++i) t.requests.push_back(draw_request(index++, p * interval, params, rng));
    }
    return t;
}

Trace gen_burst_idle(double burst_rate, double idle_rate, double period, double duty, int n,
                     const TraceParams& params, std::uint64_t seed) {
    if (!(duty > 0 && duty < 1)) throw std::invalid_argument("gen_burst_idle: duty must be in (0, 1)");
    if (!(period > 0)) throw std::invalid_argument("gen_burst_idle: period must be > 0");
    Trace t;
    t.seed = seed;
    t.provenance = describe("burst_idle", {{"burst_rate", burst_rate},
                                           {"idle_rate", idle_rate},
                                           {"period", period},
                                           {"duty", duty},
                                           {"n", n}});
    if (n <= 0) return t;
    if (!(burst_rate > 0) && !(idle_rate > 0)) throw std::invalid_argument("gen_burst_idle: both rates are zero");
    Rng rng(seed);
    double clock = 0;
    std::size_t index = 0;
    while (static_cast<int>(index) < n) {
        double cycle = std::floor(clock / period);
        double phase = clock - cycle * period;
        bool burst = phase < duty * period;
        double seg_end = cycle * period + (burst ? duty * period : period);
        double rate = burst ? burst_rate : idle_rate;
        if (!(rate > 0)) {
            clock = seg_end;
            continue;
        }
        double next = clock + rng.exponential(rate);
        if (next >= seg_end) {
            // Memoryless: restart the draw at the segment boundary.
            clock = seg_end;
            continue;
        }
        clock = next;
        t.requests.push_back(draw_request(index++, clock, params, rng));
    }
    return t;
}

Trace gen_fixed(int n, int input_len, int output_len, const std::string& model) {
    if (n < 1) throw std::invalid_argument("gen_fixed: n must be >= 1");
    Trace t;
    t.provenance = describe("fixed", {{"n", n}, {"input_len", input_len}, {"output_len", output_len}});
    for (int i = 0; i < n; ++i) {
        RequestSpec r;
        r.id = request_id(static_cast<std::size_t>(i));
        r.model = model;
        r.input_len = input_len;
        r.output_len = output_len;
        t.requests.push_back(std::move(r));
    }
    return t;
}

Trace make_trace(const WorkloadSpec& w, std::optional<std::uint64_t> seed_override) {
    std::uint64_t seed = seed_override.value_or(w.seed);
    if (w.trace_path) {
        Trace t = read_trace_jsonl(*w.trace_path);
        t.seed = seed;
        return t;
    }
    const GeneratorSpec& g = *w.generator;
    TraceParams p{g.model, g.input, g.output, g.prefix_pool};
    Trace t;
    switch (g.kind) {
        case GeneratorKind::poisson: t = gen_poisson(g.rate, g.n, p, seed); break;
        case GeneratorKind::pulses: t = gen_pulses(g.k, g.pulses, g.interval, p, seed); break;
        case GeneratorKind::burst_idle:
            t = gen_burst_idle(g.burst_rate, g.idle_rate, g.period, g.duty, g.n, p, seed);
            break;
        case GeneratorKind::fixed:
            t = gen_fixed(g.n, g.input.cdf.front().first, g.output.cdf.front().first, g.model);
            t.seed = seed;
            break;
    }
    return t;
}

json to_json(const RequestSpec& r) {
    json j;
    j["id"] = r.id;
    j["model"] = r.model;
    j["arrival"] = r.arrival;
    j["input_len"] = r.input_len;
    j["output_len"] = r.output_len;
    if (!r.prefix_tokens.empty()) j["prefix_tokens"] = r.prefix_tokens;
    if (r.session) j["session"] = *r.session;
    return j;
}

RequestSpec parse_request(const json& j, const std::string& ctx) {
    if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k != "id" && k != "model" && k != "arrival" && k != "input_len" && k != "output_len" &&
            k != "prefix_tokens" && k != "session") {
            throw ConfigError(ctx + "." + k + ": unknown field");
        }
    }
    RequestSpec r;
    try {
        r.id = j.at("id").get<std::string>();
        r.model = j.at("model").get<std::string>();
        r.arrival = j.at("arrival").get<double>();
        r.input_len = j.at("input_len").get<int>();
        r.output_len = j.at("output_len").get<int>();
        if (j.contains("prefix_tokens")) r.prefix_tokens = j["prefix_tokens"].get<std::vector<std::int32_t>>();
        if (j.contains("session")) r.session = j["session"].get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(ctx + ": " + e.what());
    }
    if (r.input_len < 1 || r.output_len < 1 || r.arrival < 0) {
        throw ConfigError(ctx + ": invariant violated: input_len >= 1, output_len >= 1, arrival >= 0");
    }
    return r;
}

std::string trace_to_jsonl(const Trace& t) {
    std::string out;
    for (const auto& r : t.requests) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

void write_trace_jsonl(const Trace& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << trace_to_jsonl(t);
    if (!out) throw std::runtime_error(path + ": write failed");
}

Trace read_trace_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open file");
    Trace t;
    t.provenance = path;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string ctx = path + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ConfigError(ctx + ": parse error: " + e.what());
        }
        t.requests.push_back(parse_request(j, ctx));
    }
    try {
        t.check();
    } catch (const std::logic_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return t;
}

}  // namespace servesim
