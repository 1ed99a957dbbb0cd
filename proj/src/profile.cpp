#include "servesim/profile.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace servesim {

namespace {

constexpr std::array<std::string_view, kNumOpClasses> kOpNames{
    "qkv_proj", "attention_prefill", "attention_decode", "out_proj", "ffn_up", "ffn_down",
    "expert_ffn", "router_gate", "embed", "lm_head", "norm", "pim_attention"};

// Position of x along a sorted axis: (lower index, upper index, fraction).
struct AxisPos {
    std::size_t lo = 0;
    std::size_t hi = 0;
    double t = 0;
};

AxisPos locate(const std::vector<std::int64_t>& axis, std::int64_t x) {
    const std::size_t n = axis.size();
    if (n == 1 || x <= axis.front()) return {0, 0, 0.0};
    if (x >= axis.back()) {
        double span = static_cast<double>(axis[n - 1] - axis[n - 2]);
        return {n - 2, n - 1, static_cast<double>(x - axis[n - 2]) / span};
    }
    auto it = std::upper_bound(axis.begin(), axis.end(), x);
    std::size_t hi = static_cast<std::size_t>(it - axis.begin());
    std::size_t lo = hi - 1;
    double span = static_cast<double>(axis[hi] - axis[lo]);
    return {lo, hi, static_cast<double>(x - axis[lo]) / span};
}

double lerp(double a, double b, double t) { return t == 0.0 ? a : (t == 1.0 ? b : (1.0 - t) * a + t * b); }

}  // namespace

std::string_view to_string(OpClass op) { return kOpNames[static_cast<int>(op)]; }

std::optional<OpClass> op_class_from_string(std::string_view s) {
    for (int i = 0; i < kNumOpClasses; ++i) {
        if (kOpNames[i] == s) return static_cast<OpClass>(i);
    }
    return std::nullopt;
}

ProfileTable::ProfileTable(std::string device_kind, std::string model, const std::vector<Sample>& samples)
    : device_kind_(std::move(device_kind)), model_(std::move(model)) {
    std::array<std::vector<const Sample*>, kNumOpClasses> by_op;
    for (const auto& s : samples) {
        const std::string ctx = "profile " + model_ + "/" + device_kind_ + " " + std::string(to_string(s.op));
        if (!(s.record.latency > 0)) throw ConfigError(ctx + ": invariant violated: latency > 0");
        if (s.record.energy && *s.record.energy < 0) throw ConfigError(ctx + ": invariant violated: energy >= 0");
        if (s.batch < 1 || s.seq < 1) throw ConfigError(ctx + ": invariant violated: batch >= 1 and seq >= 1");
        by_op[static_cast<int>(s.op)].push_back(&s);
    }
    for (int op = 0; op < kNumOpClasses; ++op) {
        if (by_op[op].empty()) continue;
        const std::string ctx = "profile " + model_ + "/" + device_kind_ + " " + std::string(kOpNames[op]);
        std::set<std::int64_t> bs, ss;
        for (const Sample* s : by_op[op]) {
            bs.insert(s->batch);
            ss.insert(s->seq);
        }
        Grid g;
        g.batches.assign(bs.begin(), bs.end());
        g.seqs.assign(ss.begin(), ss.end());
        std::vector<bool> filled(g.batches.size() * g.seqs.size(), false);
        g.cells.resize(filled.size());
        for (const Sample* s : by_op[op]) {
            auto b = static_cast<std::size_t>(std::lower_bound(g.batches.begin(), g.batches.end(), s->batch) - g.batches.begin());
            auto q = static_cast<std::size_t>(std::lower_bound(g.seqs.begin(), g.seqs.end(), s->seq) - g.seqs.begin());
            std::size_t k = b * g.seqs.size() + q;
            if (filled[k]) {
                throw ConfigError(ctx + ": duplicate grid point (batch " + std::to_string(s->batch) + ", seq " +
                                  std::to_string(s->seq) + ")");
            }
            filled[k] = true;
            g.cells[k] = s->record;
            if (!s->record.energy) g.has_energy = false;
        }
        for (std::size_t k = 0; k < filled.size(); ++k) {
            if (!filled[k]) {
                throw ConfigError(ctx + ": incomplete grid, missing (batch " +
                                  std::to_string(g.batches[k / g.seqs.size()]) + ", seq " +
                                  std::to_string(g.seqs[k % g.seqs.size()]) + ")");
            }
        }
        grids_[op] = std::move(g);
    }
}

OperatorRecord ProfileTable::lookup(const OperatorKey& key) const {
    const auto& grid = grids_[static_cast<int>(key.op)];
    if (!grid) {
        throw MissingProfileError("missing profile: op '" + std::string(to_string(key.op)) + "' on device '" +
                                  device_kind_ + "' for model '" + model_ + "'");
    }
    const Grid& g = *grid;
    AxisPos pb = locate(g.batches, key.batch);
    AxisPos ps = locate(g.seqs, key.seq);

    auto blend = [&](auto field) {
        double low = lerp(field(g.at(pb.lo, ps.lo)), field(g.at(pb.lo, ps.hi)), ps.t);
        double high = lerp(field(g.at(pb.hi, ps.lo)), field(g.at(pb.hi, ps.hi)), ps.t);
        double v = lerp(low, high, pb.t);
        // Downward linear extrapolation can cross zero; floor at the cell minimum.
        double floor_v = std::min({field(g.at(pb.lo, ps.lo)), field(g.at(pb.lo, ps.hi)), field(g.at(pb.hi, ps.lo)),
                                   field(g.at(pb.hi, ps.hi))});
        return v > 0 ? v : floor_v;
    };

    OperatorRecord out;
    out.latency = blend([](const OperatorRecord& r) { return r.latency; });
    if (g.has_energy) out.energy = blend([](const OperatorRecord& r) { return *r.energy; });
    return out;
}

std::vector<ProfileTable::Sample> ProfileTable::samples() const {
    std::vector<Sample> out;
    for (int op = 0; op < kNumOpClasses; ++op) {
        if (!grids_[op]) continue;
        const Grid& g = *grids_[op];
        for (std::size_t b = 0; b < g.batches.size(); ++b) {
            for (std::size_t s = 0; s < g.seqs.size(); ++s) {
                out.push_back({static_cast<OpClass>(op), g.batches[b], g.seqs[s], g.at(b, s)});
            }
        }
    }
    return out;
}

std::size_t ProfileTable::size() const {
    std::size_t n = 0;
    for (const auto& g : grids_) {
        if (g) n += g->cells.size();
    }
    return n;
}

void ProfileSet::add(ProfileTable table) {
    auto key = std::make_pair(table.model(), table.device_kind());
    tables_.insert_or_assign(std::move(key), std::move(table));
}

const ProfileTable* ProfileSet::find(std::string_view model, std::string_view device_kind) const {
    auto it = tables_.find(std::make_pair(std::string(model), std::string(device_kind)));
    return it == tables_.end() ? nullptr : &it->second;
}

OperatorRecord ProfileSet::lookup(std::string_view model, std::string_view device_kind, const OperatorKey& key) const {
    const ProfileTable* t = find(model, device_kind);
    if (!t) {
        throw MissingProfileError("missing profile: op '" + std::string(to_string(key.op)) + "' on device '" +
                                  std::string(device_kind) + "' for model '" + std::string(model) + "'");
    }
    return t->lookup(key);
}

ProfileTable parse_profile(const json& j, const std::string& ctx) {
    if (!j.is_object()) throw ConfigError(ctx + ": expected an object with device_kind, model, records");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() != "device_kind" && it.key() != "model" && it.key() != "records") {
            throw ConfigError(ctx + "." + it.key() + ": unknown field");
        }
    }
    if (!j.contains("device_kind") || !j["device_kind"].is_string()) {
        throw ConfigError(ctx + ".device_kind: missing required field");
    }
    if (!j.contains("model") || !j["model"].is_string()) throw ConfigError(ctx + ".model: missing required field");
    if (!j.contains("records") || !j["records"].is_array()) throw ConfigError(ctx + ".records: expected an array");
    std::vector<ProfileTable::Sample> samples;
    const json& recs = j["records"];
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const json& r = recs[i];
        const std::string rc = ctx + ".records[" + std::to_string(i) + "]";
        if (!r.is_object()) throw ConfigError(rc + ": expected an object");
        for (auto it = r.begin(); it != r.end(); ++it) {
            const auto& k = it.key();
            if (k != "op_class" && k != "batch" && k != "seq" && k != "latency_us" && k != "energy_mj") {
                throw ConfigError(rc + "." + k + ": unknown field");
            }
        }
        if (!r.contains("op_class") || !r["op_class"].is_string()) throw ConfigError(rc + ".op_class: missing");
        auto op = op_class_from_string(r["op_class"].get<std::string>());
        if (!op) throw ConfigError(rc + ".op_class: unknown op class '" + r["op_class"].get<std::string>() + "'");
        if (!r.contains("batch") || !r["batch"].is_number_integer()) throw ConfigError(rc + ".batch: expected an integer");
        if (!r.contains("seq") || !r["seq"].is_number_integer()) throw ConfigError(rc + ".seq: expected an integer");
        if (!r.contains("latency_us") || !r["latency_us"].is_number()) throw ConfigError(rc + ".latency_us: expected a number");
        ProfileTable::Sample s{*op, r["batch"].get<std::int64_t>(), r["seq"].get<std::int64_t>(), {}};
        s.record.latency = r["latency_us"].get<double>() * 1e-6;
        if (r.contains("energy_mj")) {
            if (!r["energy_mj"].is_number()) throw ConfigError(rc + ".energy_mj: expected a number");
            s.record.energy = r["energy_mj"].get<double>() * 1e-3;
        }
        samples.push_back(s);
    }
    return ProfileTable(j["device_kind"].get<std::string>(), j["model"].get<std::string>(), samples);
}

ProfileTable load_profile(const std::string& path) {
    json j = read_json_file(path);
    try {
        return parse_profile(j, "profile");
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

json to_json(const ProfileTable& table) {
    json j;
    j["device_kind"] = table.device_kind();
    j["model"] = table.model();
    json recs = json::array();
    for (const auto& s : table.samples()) {
        json r{{"op_class", to_string(s.op)}, {"batch", s.batch}, {"seq", s.seq}, {"latency_us", s.record.latency * 1e6}};
        if (s.record.energy) r["energy_mj"] = *s.record.energy * 1e3;
        recs.push_back(r);
    }
    j["records"] = recs;
    return j;
}

void save_profile(const ProfileTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << to_json(table).dump(1) << '\n';
    if (!out) throw std::runtime_error(path + ": write failed");
}

OpCost op_cost(OpClass op, const ModelSpec& m, std::int64_t batch, std::int64_t seq) {
    const double h = m.hidden_dim;
    const double kv = static_cast<double>(m.kv_dim());
    const double i = m.intermediate_dim;
    const double dt = m.dtype_bytes;
    const double b = static_cast<double>(batch);
    const double s = static_cast<double>(seq);
    const double t = b * s;
    const double ie = m.moe ? m.moe->expert_intermediate_dim : 0.0;
    const double e = m.moe ? m.moe->num_experts : 0.0;
    switch (op) {
        case OpClass::qkv_proj:
            return {2 * t * h * (h + 2 * kv), (h * (h + 2 * kv) + t * h + t * (h + 2 * kv)) * dt};
        case OpClass::out_proj:
            return {2 * t * h * h, (h * h + 2 * t * h) * dt};
        case OpClass::ffn_up:
            return {4 * t * h * i, (2 * h * i + t * h + 2 * t * i) * dt};
        case OpClass::ffn_down:
            return {2 * t * h * i, (h * i + t * i + t * h) * dt};
        case OpClass::expert_ffn:
            return {4 * t * h * ie, (2 * h * ie + 2 * t * h) * dt};
        case OpClass::router_gate:
            return {2 * t * h * e, (h * e + t * h + t * e) * dt};
        case OpClass::attention_prefill:
            return {4 * b * s * s * h, (t * (2 * h + 2 * kv)) * dt};
        case OpClass::attention_decode:
            return {4 * b * s * h, (b * s * 2 * kv + 2 * b * h) * dt};
        case OpClass::pim_attention:
            return {4 * b * s * h, b * s * 2 * kv * dt};
        case OpClass::embed:
            return {t * h, 2 * t * h * dt};
        case OpClass::lm_head:
            return {2 * t * h * m.vocab_size, (h * m.vocab_size + t * h + t * m.vocab_size) * dt};
        case OpClass::norm:
            return {5 * t * h, 2 * t * h * dt};
    }
    return {};
}

ProfileTable synth_profile(const DeviceSpec& device, const ModelSpec& model, double peak_flops,
                           const SynthOptions& opts) {
    if (!(peak_flops > 0)) throw ConfigError("synth_profile: peak_flops must be > 0");
    std::vector<std::int64_t> batches, seqs;
    for (std::int64_t b = 1; b < opts.max_batch; b *= 2) batches.push_back(b);
    batches.push_back(opts.max_batch);
    for (std::int64_t s = opts.min_seq; s < opts.max_seq; s *= 2) seqs.push_back(s);
    seqs.push_back(opts.max_seq);

    std::vector<OpClass> ops;
    double bandwidth = device.mem_bandwidth;
    if (device.kind == DeviceKind::pim_stack) {
        bandwidth = device.mem_bandwidth * device.pim_channels.value_or(1);
        ops = {OpClass::pim_attention};
    } else {
        ops = {OpClass::qkv_proj, OpClass::attention_prefill, OpClass::attention_decode, OpClass::out_proj,
               OpClass::embed, OpClass::lm_head, OpClass::norm};
        if (model.moe) {
            ops.push_back(OpClass::expert_ffn);
            ops.push_back(OpClass::router_gate);
        } else {
            ops.push_back(OpClass::ffn_up);
            ops.push_back(OpClass::ffn_down);
        }
    }

    std::vector<ProfileTable::Sample> samples;
    for (OpClass op : ops) {
        for (auto b : batches) {
            for (auto s : seqs) {
                OpCost c = op_cost(op, model, b, s);
                double latency = op == OpClass::pim_attention
                                     ? c.bytes / bandwidth
                                     : std::max(c.flops / peak_flops, c.bytes / bandwidth);
                samples.push_back({op, b, s, OperatorRecord{latency, std::nullopt}});
            }
        }
    }
    std::string kind = device.profile_ref.empty() ? std::string(to_string(device.kind)) : device.profile_ref;
    return ProfileTable(kind, model.name, samples);
}

}  // namespace servesim
