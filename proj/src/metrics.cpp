#include "servesim/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace servesim {

std::optional<double> RequestMetrics::queueing_delay() const {
    if (!sched_time) return std::nullopt;
    return *sched_time - arrival;
}

std::optional<double> RequestMetrics::ttft() const {
    if (!first_token_time) return std::nullopt;
    return *first_token_time - arrival;
}

std::optional<double> RequestMetrics::e2e() const {
    if (!done_time) return std::nullopt;
    return *done_time - arrival;
}

std::optional<double> RequestMetrics::tpot() const {
    if (!done_time || !first_token_time || output_len <= 1) return std::nullopt;
    return (*done_time - *first_token_time) / (output_len - 1);
}

std::string format_number(double v) {
    if (v == 0) return "0";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double nearest_rank(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) return 0;
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(sorted.size())));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

Stat describe(std::vector<double> xs) {
    Stat s;
    s.n = xs.size();
    if (xs.empty()) return s;
    std::sort(xs.begin(), xs.end());
    double sum = 0;
    for (double x : xs) sum += x;
    s.mean = sum / static_cast<double>(xs.size());
    s.p50 = nearest_rank(xs, 50);
    s.p90 = nearest_rank(xs, 90);
    s.p99 = nearest_rank(xs, 99);
    s.max = xs.back();
    return s;
}

Summary summarize(const std::vector<RequestMetrics>& requests, std::optional<double> energy_j,
                  std::optional<double> duration) {
    Summary s;
    s.requests = requests.size();
    std::vector<double> q, ttft, tpot, e2e;
    double first_arrival = 0, last_done = 0;
    bool any = false;
    std::uint64_t hits = 0;
    for (const auto& r : requests) {
        s.input_tokens += static_cast<std::uint64_t>(r.input_len);
        hits += static_cast<std::uint64_t>(r.prefix_hit_tokens);
        if (!any || r.arrival < first_arrival) first_arrival = r.arrival;
        any = true;
        if (auto v = r.queueing_delay()) q.push_back(*v);
        if (auto v = r.ttft()) ttft.push_back(*v);
        if (!r.complete()) continue;
        ++s.completed;
        s.generated_tokens += static_cast<std::uint64_t>(r.output_len);
        last_done = std::max(last_done, *r.done_time);
        e2e.push_back(*r.e2e());
        if (auto v = r.tpot()) tpot.push_back(*v);
    }
    if (s.completed > 0) s.makespan = last_done - first_arrival;
    if (s.makespan > 0) s.throughput_tps = static_cast<double>(s.generated_tokens) / s.makespan;
    s.queueing = describe(std::move(q));
    s.ttft = describe(std::move(ttft));
    s.tpot = describe(std::move(tpot));
    s.e2e = describe(std::move(e2e));
    if (s.input_tokens > 0) s.prefix_hit_rate = static_cast<double>(hits) / static_cast<double>(s.input_tokens);
    if (energy_j) {
        s.energy_j = *energy_j;
        if (duration && *duration > 0) s.mean_power_w = *energy_j / *duration;
        if (s.generated_tokens > 0) s.joules_per_token = *energy_j / static_cast<double>(s.generated_tokens);
    }
    return s;
}

Summary summarize(const SimulationReport& report) {
    return summarize(report.requests, report.energy.total(), report.energy.duration());
}

namespace {

json stat_json(const Stat& s) {
    json j;
    j["n"] = s.n;
    j["mean"] = s.mean;
    j["p50"] = s.p50;
    j["p90"] = s.p90;
    j["p99"] = s.p99;
    j["max"] = s.max;
    return j;
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json to_json(const Summary& s) {
    json j;
    j["requests"] = s.requests;
    j["completed"] = s.completed;
    j["input_tokens"] = s.input_tokens;
    j["generated_tokens"] = s.generated_tokens;
    j["makespan_s"] = s.makespan;
    j["throughput_tps"] = s.throughput_tps;
    j["queueing_delay_s"] = stat_json(s.queueing);
    j["ttft_s"] = stat_json(s.ttft);
    j["tpot_s"] = stat_json(s.tpot);
    j["e2e_s"] = stat_json(s.e2e);
    j["prefix_hit_rate"] = s.prefix_hit_rate;
    j["energy_j"] = opt(s.energy_j);
    j["mean_power_w"] = opt(s.mean_power_w);
    j["joules_per_token"] = opt(s.joules_per_token);
    return j;
}

std::string format_summary(const Summary& s) {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "requests      %zu (%zu complete)\n", s.requests, s.completed);
    out << line;
    std::snprintf(line, sizeof line, "tokens        %llu generated, %llu prompt\n",
                  static_cast<unsigned long long>(s.generated_tokens), static_cast<unsigned long long>(s.input_tokens));
    out << line;
    std::snprintf(line, sizeof line, "makespan      %.6f s\nthroughput    %.3f tok/s\n", s.makespan, s.throughput_tps);
    out << line;
    auto row = [&](const char* name, const Stat& st) {
        std::snprintf(line, sizeof line, "%-13s mean %.6f  p50 %.6f  p99 %.6f s\n", name, st.mean, st.p50, st.p99);
        out << line;
    };
    row("queueing", s.queueing);
    row("ttft", s.ttft);
    row("tpot", s.tpot);
    row("e2e", s.e2e);
    std::snprintf(line, sizeof line, "prefix hits   %.4f of prompt tokens\n", s.prefix_hit_rate);
    out << line;
    if (s.energy_j) {
        std::snprintf(line, sizeof line, "energy        %.3f J", *s.energy_j);
        out << line;
        if (s.mean_power_w) {
            std::snprintf(line, sizeof line, ", mean %.3f W", *s.mean_power_w);
            out << line;
        }
        if (s.joules_per_token) {
            std::snprintf(line, sizeof line, ", %.6f J/token", *s.joules_per_token);
            out << line;
        }
        out << '\n';
    }
    return out.str();
}

// ---- time series ----

std::vector<TimeSeriesRow> time_series(const SimulationReport& report, double bucket) {
    if (!(bucket > 0)) throw std::invalid_argument("time_series: bucket must be > 0");
    std::vector<TimeSeriesRow> rows;
    const double end = report.end_time;
    if (!(end > 0)) return rows;
    const auto K = static_cast<std::size_t>(std::ceil(end / bucket));
    const std::size_t M = report.msg_ids.size();
    const std::size_t T = report.tier_names.size();
    auto bucket_of = [&](double t) {
        return std::min(K - 1, static_cast<std::size_t>(std::max(0.0, std::floor(t / bucket))));
    };

    std::vector<std::vector<double>> tokens(K, std::vector<double>(M, 0));
    for (const auto& e : report.tokens) tokens[bucket_of(e.time)][static_cast<std::size_t>(e.msg)] += static_cast<double>(e.tokens);

    auto power = report.energy.power_series(bucket);

    std::vector<double> used(T, 0);
    std::size_t ui = 0;
    std::vector<double> hit(M, 0), eligible(M, 0);
    std::size_t pi = 0;

    for (std::size_t k = 0; k < K; ++k) {
        const double t0 = static_cast<double>(k) * bucket;
        const double t1 = k + 1 == K ? end : t0 + bucket;
        const bool last = k + 1 == K;
        for (std::size_t m = 0; m < M; ++m) rows.push_back({t0, "tokens", report.msg_ids[m], tokens[k][m]});
        while (ui < report.usage.size() && (report.usage[ui].time < t1 || (last && report.usage[ui].time <= t1))) {
            used[static_cast<std::size_t>(report.usage[ui].tier)] = static_cast<double>(report.usage[ui].used);
            ++ui;
        }
        for (std::size_t t = 0; t < T; ++t) rows.push_back({t0, "tier_used_bytes", report.tier_names[t], used[t]});
        while (pi < report.prefix.size() && (report.prefix[pi].time < t1 || (last && report.prefix[pi].time <= t1))) {
            hit[static_cast<std::size_t>(report.prefix[pi].msg)] += report.prefix[pi].hit_tokens;
            eligible[static_cast<std::size_t>(report.prefix[pi].msg)] += report.prefix[pi].eligible_tokens;
            ++pi;
        }
        for (std::size_t m = 0; m < M; ++m) {
            rows.push_back({t0, "prefix_hit_rate", report.msg_ids[m], eligible[m] > 0 ? hit[m] / eligible[m] : 0});
        }
        if (k < power.size()) {
            for (std::size_t c = 0; c < kComponents.size(); ++c) {
                rows.push_back({t0, "power_w", std::string(to_string(kComponents[c])), power[k][c]});
            }
        }
    }
    return rows;
}

// ---- CSV ----

namespace {

const char* const kRequestHeader =
    "id,model,msg,arrival,input_len,output_len,prefix_hit_tokens,sched_time,first_token_time,done_time,"
    "queueing_delay,ttft,tpot,e2e,kv_peak_bytes";

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string opt_num(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

}  // namespace

std::string requests_csv(const std::vector<RequestMetrics>& requests) {
    std::string out = kRequestHeader;
    out += '\n';
    for (const auto& r : requests) {
        out += csv_field(r.id) + ',' + csv_field(r.model) + ',' + csv_field(r.msg) + ',' + format_number(r.arrival) +
               ',' + std::to_string(r.input_len) + ',' + std::to_string(r.output_len) + ',' +
               std::to_string(r.prefix_hit_tokens) + ',' + opt_num(r.sched_time) + ',' + opt_num(r.first_token_time) +
               ',' + opt_num(r.done_time) + ',' + opt_num(r.queueing_delay()) + ',' + opt_num(r.ttft()) + ',' +
               opt_num(r.tpot()) + ',' + opt_num(r.e2e()) + ',' + std::to_string(r.kv_peak_bytes) + '\n';
    }
    return out;
}

std::vector<RequestMetrics> parse_requests_csv(const std::string& text, const std::string& ctx) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kRequestHeader) {
        throw ConfigError(ctx + ":1: unexpected header (want " + kRequestHeader + ")");
    }
    std::vector<RequestMetrics> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_csv(line);
        const std::string where = ctx + ":" + std::to_string(lineno);
        if (f.size() != 15) throw ConfigError(where + ": expected 15 fields, got " + std::to_string(f.size()));
        auto num = [&](const std::string& s, const char* name) {
            try {
                std::size_t pos = 0;
                double v = std::stod(s, &pos);
                if (pos != s.size()) throw std::invalid_argument(name);
                return v;
            } catch (const std::exception&) {
                throw ConfigError(where + ": bad " + name + " '" + s + "'");
            }
        };
        auto opt_field = [&](const std::string& s, const char* name) -> std::optional<double> {
            if (s.empty()) return std::nullopt;
            return num(s, name);
        };
        RequestMetrics r;
        r.id = f[0];
        r.model = f[1];
        r.msg = f[2];
        r.arrival = num(f[3], "arrival");
        r.input_len = static_cast<int>(num(f[4], "input_len"));
        r.output_len = static_cast<int>(num(f[5], "output_len"));
        r.prefix_hit_tokens = static_cast<int>(num(f[6], "prefix_hit_tokens"));
        r.sched_time = opt_field(f[7], "sched_time");
        r.first_token_time = opt_field(f[8], "first_token_time");
        r.done_time = opt_field(f[9], "done_time");
        r.kv_peak_bytes = static_cast<std::uint64_t>(num(f[14], "kv_peak_bytes"));
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<RequestMetrics> read_requests_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path + ": cannot open");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_requests_csv(ss.str(), path);
}

std::string timeseries_csv(const std::vector<TimeSeriesRow>& rows) {
    std::string out = "time,metric,entity,value\n";
    for (const auto& r : rows) {
        out += format_number(r.time) + ',' + r.metric + ',' + csv_field(r.entity) + ',' + format_number(r.value) + '\n';
    }
    return out;
}

json energy_json(const EnergyLedger& ledger) {
    json j;
    j["duration_s"] = ledger.duration();
    j["total_j"] = ledger.total();
    json comp = json::object();
    auto by = ledger.energy_by_component();
    for (std::size_t c = 0; c < kComponents.size(); ++c) comp[std::string(to_string(kComponents[c]))] = by[c];
    j["components"] = std::move(comp);
    return j;
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error(p.string() + ": cannot open for writing");
    out << data;
    if (!out) throw std::runtime_error(p.string() + ": write failed");
}

}  // namespace

void write_outputs(const SimulationReport& report, const std::string& dir, double bucket) {
    std::filesystem::path root(dir);
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw std::runtime_error(dir + ": " + ec.message());
    write_file(root / "requests.csv", requests_csv(report.requests));
    write_file(root / "timeseries.csv", timeseries_csv(time_series(report, bucket)));
    write_file(root / "energy.json", energy_json(report.energy).dump(2) + "\n");
    write_file(root / "summary.json", to_json(summarize(report)).dump(2) + "\n");
}

}  // namespace servesim
