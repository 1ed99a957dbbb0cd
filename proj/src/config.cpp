#include "servesim/config.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>

namespace servesim {

namespace {

template <typename E, std::size_t N>
E enum_from(std::string_view s, const std::array<E, N>& values, const std::string& ctx) {
    for (E v : values) {
        if (to_string(v) == s) return v;
    }
    std::string allowed;
    for (E v : values) {
        if (!allowed.empty()) allowed += ", ";
        allowed += to_string(v);
    }
    throw ConfigError(ctx + ": unknown value '" + std::string(s) + "' (expected one of: " + allowed + ")");
}

constexpr std::array kRouterPolicies{RouterPolicy::round_robin, RouterPolicy::least_loaded,
                                     RouterPolicy::session_affinity};
constexpr std::array kExpertRoutings{ExpertRouting::random, ExpertRouting::round_robin,
                                     ExpertRouting::proportional_load, ExpertRouting::user_table};
constexpr std::array kDeviceKinds{DeviceKind::gpu, DeviceKind::npu, DeviceKind::tpu, DeviceKind::pim_stack,
                                  DeviceKind::cxl_device};
constexpr std::array kTierKinds{TierKind::device, TierKind::host, TierKind::cxl_pool, TierKind::storage};
constexpr std::array kTierScopes{TierScope::per_device, TierScope::per_node, TierScope::global};
constexpr std::array kMsgRoles{MsgRole::unified, MsgRole::prefill, MsgRole::decode};
constexpr std::array kOffloadClasses{OffloadClass::attention, OffloadClass::expert_ffn, OffloadClass::kv_cache,
                                     OffloadClass::weights};
constexpr std::array kGeneratorKinds{GeneratorKind::poisson, GeneratorKind::pulses, GeneratorKind::burst_idle,
                                     GeneratorKind::fixed};

// Reads fields from one JSON object and rejects any key that was never asked for.
class Fields {
public:
    Fields(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
        if (!j_.is_object()) throw ConfigError(ctx_ + ": expected an object");
    }

    const std::string& ctx() const { return ctx_; }
    std::string at(std::string_view key) const { return ctx_ + "." + std::string(key); }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }

    const json& raw(const std::string& key) {
        if (!has(key)) throw ConfigError(at(key) + ": missing required field");
        return j_.at(key);
    }

    std::string str(const std::string& key) {
        const json& v = raw(key);
        if (!v.is_string()) throw ConfigError(at(key) + ": expected a string");
        return v.get<std::string>();
    }
    std::string str(const std::string& key, std::string def) { return has(key) ? str(key) : def; }

    double num(const std::string& key) {
        const json& v = raw(key);
        if (!v.is_number()) throw ConfigError(at(key) + ": expected a number");
        return v.get<double>();
    }
    double num(const std::string& key, double def) { return has(key) ? num(key) : def; }

    std::int64_t integer(const std::string& key) {
        const json& v = raw(key);
        if (v.is_number_integer()) return v.get<std::int64_t>();
        if (v.is_number_float()) {
            double d = v.get<double>();
            if (std::floor(d) == d && std::abs(d) < 9.2e18) return static_cast<std::int64_t>(d);
        }
        throw ConfigError(at(key) + ": expected an integer");
    }
    std::int64_t integer(const std::string& key, std::int64_t def) { return has(key) ? integer(key) : def; }

    std::uint64_t bytes(const std::string& key) {
        std::int64_t v = integer(key);
        if (v < 0) throw ConfigError(at(key) + ": must be non-negative");
        return static_cast<std::uint64_t>(v);
    }

    bool boolean(const std::string& key, bool def) {
        if (!has(key)) return def;
        const json& v = j_.at(key);
        if (!v.is_boolean()) throw ConfigError(at(key) + ": expected a boolean");
        return v.get<bool>();
    }

    const json& array(const std::string& key) {
        const json& v = raw(key);
        if (!v.is_array()) throw ConfigError(at(key) + ": expected an array");
        return v;
    }

    std::vector<std::string> strings(const std::string& key) {
        std::vector<std::string> out;
        if (!has(key)) return out;
        const json& v = array(key);
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_string()) throw ConfigError(at(key) + "[" + std::to_string(i) + "]: expected a string");
            out.push_back(v[i].get<std::string>());
        }
        return out;
    }

    template <typename E, std::size_t N>
    E enumeration(const std::string& key, const std::array<E, N>& values) {
        return enum_from(str(key), values, at(key));
    }
    template <typename E, std::size_t N>
    E enumeration(const std::string& key, const std::array<E, N>& values, E def) {
        return has(key) ? enumeration(key, values) : def;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(at(it.key()) + ": unknown field");
        }
    }

private:
    const json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

std::string idx(const std::string& ctx, std::size_t i) { return ctx + "[" + std::to_string(i) + "]"; }

void require(bool cond, const std::string& ctx, const std::string& invariant) {
    if (!cond) throw ConfigError(ctx + ": invariant violated: " + invariant);
}

int positive_int(Fields& f, const std::string& key) {
    std::int64_t v = f.integer(key);
    require(v >= 1 && v <= (1LL << 31) - 1, f.at(key), key + " >= 1");
    return static_cast<int>(v);
}

MoESpec parse_moe(const json& j, const std::string& ctx) {
    Fields f(j, ctx);
    MoESpec m;
    m.num_experts = positive_int(f, "num_experts");
    m.top_k = positive_int(f, "top_k");
    m.expert_intermediate_dim = positive_int(f, "expert_intermediate_dim");
    m.router_policy = f.enumeration("router_policy", kExpertRoutings, ExpertRouting::random);
    if (f.has("user_table")) {
        const json& rows = f.array("user_table");
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (!rows[r].is_array()) throw ConfigError(idx(f.at("user_table"), r) + ": expected an array");
            std::vector<double> row;
            for (const auto& p : rows[r]) {
                if (!p.is_number()) throw ConfigError(idx(f.at("user_table"), r) + ": expected numbers");
                row.push_back(p.get<double>());
            }
            m.user_table.push_back(std::move(row));
        }
    }
    f.finish();
    require(m.top_k <= m.num_experts, ctx, "1 <= top_k <= num_experts");
    if (m.router_policy == ExpertRouting::user_table) {
        require(!m.user_table.empty(), ctx, "user_table routing requires a nonempty user_table");
        for (std::size_t r = 0; r < m.user_table.size(); ++r) {
            const auto& row = m.user_table[r];
            require(row.size() == static_cast<std::size_t>(m.num_experts), idx(ctx + ".user_table", r),
                    "row length == num_experts");
            double sum = 0;
            for (double p : row) {
                require(p >= 0, idx(ctx + ".user_table", r), "probabilities >= 0");
                sum += p;
            }
            require(std::abs(sum - 1.0) <= 1e-9, idx(ctx + ".user_table", r), "row sums to 1 (+-1e-9)");
        }
    }
    return m;
}

DeviceSpec parse_device(const json& j, const std::string& ctx) {
    Fields f(j, ctx);
    DeviceSpec d;
    d.id = f.str("id");
    d.kind = f.enumeration("kind", kDeviceKinds);
    d.mem_capacity = f.bytes("mem_capacity");
    d.mem_bandwidth = f.num("mem_bandwidth");
    d.idle_w = f.num("idle_w");
    d.standby_w = f.num("standby_w");
    d.active_w = f.num("active_w");
    d.profile_ref = f.str("profile_ref", "");
    if (f.has("pim_channels")) d.pim_channels = static_cast<int>(f.integer("pim_channels"));
    f.finish();
    const std::string c = ctx + " (" + d.id + ")";
    require(d.mem_capacity > 0, c, "mem_capacity > 0");
    require(d.mem_bandwidth > 0, c, "mem_bandwidth > 0");
    require(d.idle_w >= 0 && d.idle_w <= d.standby_w && d.standby_w <= d.active_w, c,
            "idle_w <= standby_w <= active_w");
    if (d.kind == DeviceKind::pim_stack) {
        require(d.pim_channels && *d.pim_channels >= 1, c, "pim_stack requires pim_channels >= 1");
    }
    return d;
}

LinkSpec parse_link(const json& j, const std::string& ctx) {
    Fields f(j, ctx);
    LinkSpec l;
    l.id = f.str("id");
    auto eps = f.strings("endpoints");
    if (eps.size() != 2) throw ConfigError(f.at("endpoints") + ": expected exactly two endpoints");
    l.endpoints = {eps[0], eps[1]};
    l.bandwidth = f.num("bandwidth");
    l.latency = f.num("latency", 0.0);
    l.energy_per_byte = f.num("energy_per_byte", 0.0);
    f.finish();
    const std::string c = ctx + " (" + l.id + ")";
    require(l.bandwidth > 0, c, "bandwidth > 0");
    require(l.latency >= 0, c, "latency >= 0");
    require(l.endpoints[0] != l.endpoints[1], c, "endpoints distinct");
    require(l.energy_per_byte >= 0, c, "energy_per_byte >= 0");
    return l;
}

MemoryTierSpec parse_tier(const json& j, const std::string& ctx) {
    Fields f(j, ctx);
    MemoryTierSpec t;
    t.tier = f.enumeration("tier", kTierKinds);
    t.capacity = f.has("capacity") ? f.bytes("capacity") : 0;
    t.bandwidth = f.num("bandwidth", 0.0);
    TierScope def_scope = t.tier == TierKind::device     ? TierScope::per_device
                          : t.tier == TierKind::cxl_pool ? TierScope::global
                                                         : TierScope::per_node;
    t.scope = f.enumeration("scope", kTierScopes, def_scope);
    t.block_size_tokens = static_cast<int>(
        f.integer("block_size_tokens", t.tier == TierKind::device ? 16 : 256));
    t.energy_per_byte = f.num("energy_per_byte", 0.0);
    t.endpoint = f.str("endpoint", "");
    f.finish();
    const std::string c = ctx + " (" + std::string(to_string(t.tier)) + ")";
    require(t.block_size_tokens >= 1, c, "block_size_tokens >= 1");
    if (t.tier != TierKind::device) {
        require(t.capacity > 0, c, "capacity > 0");
        require(t.bandwidth > 0, c, "bandwidth > 0");
    }
    require(t.tier != TierKind::device || t.scope == TierScope::per_device, c, "device tier has scope per_device");
    require(t.tier != TierKind::cxl_pool || t.scope == TierScope::global, c, "cxl_pool has scope global");
    require(t.tier == TierKind::device || t.scope != TierScope::per_device, c,
            "only the device tier may use scope per_device");
    require(t.scope != TierScope::global || !t.endpoint.empty(), c, "global tiers name a topology endpoint");
    return t;
}

OffloadRule parse_rule(const json& j, const std::string& ctx) {
    Fields f(j, ctx);
    OffloadRule r;
    r.op_class = f.enumeration("op_class", kOffloadClasses);
    r.target = f.str("target");
    if (f.has("condition")) {
        Fields c(f.raw("condition"), f.at("condition"));
        if (c.has("min_batch")) r.min_batch = static_cast<int>(c.integer("min_batch"));
        if (c.has("max_batch")) r.max_batch = static_cast<int>(c.integer("max_batch"));
        c.finish();
    }
    if (f.has("experts")) {
        for (const auto& e : f.array("experts")) {
            if (!e.is_number_integer()) throw ConfigError(f.at("experts") + ": expected integers");
            r.experts.push_back(e.get<int>());
        }
    }
    f.finish();
    return r;
}

MsgSpec parse_msg(const json& j, const std::string& ctx) {
    Fields f(j, ctx);
    MsgSpec m;
    m.id = f.str("id");
    m.model = f.str("model");
    m.role = f.enumeration("role", kMsgRoles, MsgRole::unified);
    m.device_pool = f.strings("device_pool");
    m.tp_degree = static_cast<int>(f.integer("tp_degree", 1));
    m.pp_degree = static_cast<int>(f.integer("pp_degree", 1));
    m.dp_rank = static_cast<int>(f.integer("dp_rank", 0));
    m.ep_degree = static_cast<int>(f.integer("ep_degree", 1));
    if (f.has("offload_rules")) {
        const json& rules = f.array("offload_rules");
        for (std::size_t i = 0; i < rules.size(); ++i) m.offload_rules.push_back(parse_rule(rules[i], idx(f.at("offload_rules"), i)));
    }
    m.pd_peers = f.strings("pd_peers");
    m.max_batch = static_cast<int>(f.integer("max_batch", 256));
    m.sbi_enabled = f.boolean("sbi_enabled", false);
    m.sbi_threshold = static_cast<int>(f.integer("sbi_threshold", 256));
    if (f.has("prefix_cache_tiers")) {
        const json& arr = f.array("prefix_cache_tiers");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            if (!arr[i].is_string()) throw ConfigError(idx(f.at("prefix_cache_tiers"), i) + ": expected a string");
            m.prefix_cache_tiers.push_back(enum_from(arr[i].get<std::string>(), kTierKinds, idx(f.at("prefix_cache_tiers"), i)));
        }
    }
    m.promote_on_hit = f.boolean("promote_on_hit", true);
    m.kv_load_layer_group = static_cast<int>(f.integer("kv_load_layer_group", 0));
    f.finish();
    const std::string c = ctx + " (" + m.id + ")";
    require(m.tp_degree >= 1 && m.pp_degree >= 1 && m.ep_degree >= 1, c, "parallel degrees >= 1");
    require(m.dp_rank >= 0, c, "dp_rank >= 0");
    require(m.max_batch >= 1, c, "max_batch >= 1");
    require(m.sbi_threshold >= 2, c, "sbi_threshold >= 2");
    require(m.kv_load_layer_group >= 0, c, "kv_load_layer_group >= 0");
    require(m.role != MsgRole::prefill || !m.pd_peers.empty(), c, "prefill role requires nonempty pd_peers");
    return m;
}

// Every device pair that must communicate has to be connected in the link graph.
void check_connectivity(const ClusterSpec& c) {
    std::map<std::string, std::vector<std::string>> adj;
    for (const auto& l : c.links) {
        adj[l.endpoints[0]].push_back(l.endpoints[1]);
        adj[l.endpoints[1]].push_back(l.endpoints[0]);
    }
    auto reachable = [&](const std::string& from) {
        std::set<std::string> seen{from};
        std::queue<std::string> q;
        q.push(from);
        while (!q.empty()) {
            auto v = q.front();
            q.pop();
            for (const auto& w : adj[v]) {
                if (seen.insert(w).second) q.push(w);
            }
        }
        return seen;
    };
    for (const auto& m : c.msgs) {
        std::vector<std::string> group = m.device_pool;
        for (const auto& peer : m.pd_peers) {
            for (const auto& pm : c.msgs) {
                if (pm.id == peer && !pm.device_pool.empty()) group.push_back(pm.device_pool.front());
            }
        }
        for (const auto& rule : m.offload_rules) {
            if (c.find_device(rule.target)) group.push_back(rule.target);
        }
        if (group.size() < 2) continue;
        auto seen = reachable(group.front());
        for (const auto& d : group) {
            if (!seen.count(d)) {
                throw ConfigError("msgs (" + m.id + "): invariant violated: link graph connects co-scheduled devices ('" +
                                  group.front() + "' cannot reach '" + d + "')");
            }
        }
    }
}

void check_cluster(ClusterSpec& c) {
    std::set<std::string> ids;
    std::size_t n_devices = 0;
    for (const auto& n : c.nodes) {
        if (!ids.insert(n.id).second) throw ConfigError("nodes: duplicate id '" + n.id + "'");
        for (const auto& d : n.devices) {
            if (!ids.insert(d.id).second) throw ConfigError("devices: duplicate id '" + d.id + "'");
            ++n_devices;
        }
    }
    if (n_devices == 0) throw ConfigError("cluster: no devices");
    std::set<std::string> link_ids;
    for (const auto& l : c.links) {
        if (!link_ids.insert(l.id).second) throw ConfigError("links: duplicate id '" + l.id + "'");
        for (const auto& e : l.endpoints) {
            if (!ids.count(e)) throw ConfigError("links (" + l.id + "): dangling reference to endpoint '" + e + "'");
        }
    }
    std::set<TierKind> tier_kinds;
    for (auto& t : c.tiers) {
        if (!tier_kinds.insert(t.tier).second) {
            throw ConfigError("tiers: duplicate tier '" + std::string(to_string(t.tier)) + "'");
        }
        if (!t.endpoint.empty() && !ids.count(t.endpoint)) {
            throw ConfigError("tiers (" + std::string(to_string(t.tier)) + "): dangling reference to endpoint '" +
                              t.endpoint + "'");
        }
    }
    std::set<std::string> msg_ids;
    std::set<std::string> used_compute;
    for (const auto& m : c.msgs) {
        const std::string ctx = "msgs (" + m.id + ")";
        if (!msg_ids.insert(m.id).second) throw ConfigError("msgs: duplicate id '" + m.id + "'");
        if (m.device_pool.empty()) throw ConfigError(ctx + ": invariant violated: device_pool nonempty");
        int compute = 0;
        for (const auto& d : m.device_pool) {
            const DeviceSpec* dev = c.find_device(d);
            if (!dev) throw ConfigError(ctx + ": dangling reference to device '" + d + "'");
            if (is_compute_kind(dev->kind)) {
                ++compute;
                if (!used_compute.insert(d).second) {
                    throw ConfigError(ctx + ": compute device '" + d + "' already belongs to another serving group");
                }
            }
        }
        require(compute >= 1, ctx, "device_pool holds at least one compute device");
        require(compute % (m.tp_degree * m.pp_degree) == 0, ctx, "tp_degree x pp_degree divides device_pool size");
        require(m.ep_degree <= compute, ctx, "ep_degree <= compute devices in pool");
        for (const auto& rule : m.offload_rules) {
            bool ok = c.find_device(rule.target) != nullptr;
            for (auto k : kTierKinds) {
                if (rule.target == to_string(k) && c.find_tier(k)) ok = true;
            }
            if (!ok) throw ConfigError(ctx + ": offload rule target '" + rule.target + "' does not exist in cluster");
        }
        for (auto k : m.prefix_cache_tiers) {
            if (k != TierKind::device && !c.find_tier(k)) {
                throw ConfigError(ctx + ": prefix cache tier '" + std::string(to_string(k)) + "' is not configured");
            }
        }
    }
    for (const auto& m : c.msgs) {
        for (const auto& peer : m.pd_peers) {
            auto it = std::find_if(c.msgs.begin(), c.msgs.end(), [&](const MsgSpec& o) { return o.id == peer; });
            if (it == c.msgs.end()) throw ConfigError("msgs (" + m.id + "): dangling reference to pd peer '" + peer + "'");
            require(it->role == MsgRole::decode, "msgs (" + m.id + ")", "pd_peers reference decode-role groups");
            require(it->model == m.model, "msgs (" + m.id + ")", "pd_peers serve the same model");
        }
    }
    check_connectivity(c);
}

}  // namespace

std::string_view to_string(RouterPolicy v) {
    switch (v) {
        case RouterPolicy::round_robin: return "round_robin";
        case RouterPolicy::least_loaded: return "least_loaded";
        case RouterPolicy::session_affinity: return "session_affinity";
    }
    return "?";
}
std::string_view to_string(ExpertRouting v) {
    switch (v) {
        case ExpertRouting::random: return "random";
        case ExpertRouting::round_robin: return "round_robin";
        case ExpertRouting::proportional_load: return "proportional_load";
        case ExpertRouting::user_table: return "user_table";
    }
    return "?";
}
std::string_view to_string(DeviceKind v) {
    switch (v) {
        case DeviceKind::gpu: return "gpu";
        case DeviceKind::npu: return "npu";
        case DeviceKind::tpu: return "tpu";
        case DeviceKind::pim_stack: return "pim_stack";
        case DeviceKind::cxl_device: return "cxl_device";
    }
    return "?";
}
std::string_view to_string(TierKind v) {
    switch (v) {
        case TierKind::device: return "device";
        case TierKind::host: return "host";
        case TierKind::cxl_pool: return "cxl_pool";
        case TierKind::storage: return "storage";
    }
    return "?";
}
std::string_view to_string(TierScope v) {
    switch (v) {
        case TierScope::per_device: return "per_device";
        case TierScope::per_node: return "per_node";
        case TierScope::global: return "global";
    }
    return "?";
}
std::string_view to_string(MsgRole v) {
    switch (v) {
        case MsgRole::unified: return "unified";
        case MsgRole::prefill: return "prefill";
        case MsgRole::decode: return "decode";
    }
    return "?";
}
std::string_view to_string(OffloadClass v) {
    switch (v) {
        case OffloadClass::attention: return "attention";
        case OffloadClass::expert_ffn: return "expert_ffn";
        case OffloadClass::kv_cache: return "kv_cache";
        case OffloadClass::weights: return "weights";
    }
    return "?";
}
std::string_view to_string(GeneratorKind v) {
    switch (v) {
        case GeneratorKind::poisson: return "poisson";
        case GeneratorKind::pulses: return "pulses";
        case GeneratorKind::burst_idle: return "burst_idle";
        case GeneratorKind::fixed: return "fixed";
    }
    return "?";
}

std::uint64_t expert_weight_bytes(const ModelSpec& m) {
    if (!m.moe) return 0;
    return 2ULL * m.hidden_dim * m.moe->expert_intermediate_dim * m.dtype_bytes;
}

std::uint64_t layer_weight_bytes(const ModelSpec& m) {
    const std::uint64_t h = m.hidden_dim;
    std::uint64_t attn = h * (h + 2 * static_cast<std::uint64_t>(m.kv_dim())) + h * h;
    std::uint64_t mlp = 0;
    if (m.moe) {
        mlp = static_cast<std::uint64_t>(m.moe->num_experts) * 2 * h * m.moe->expert_intermediate_dim +
              h * m.moe->num_experts;
    } else {
        mlp = 3 * h * static_cast<std::uint64_t>(m.intermediate_dim);
    }
    return (attn + mlp) * m.dtype_bytes;
}

std::uint64_t dense_weight_bytes(const ModelSpec& m) {
    return static_cast<std::uint64_t>(m.num_layers) * layer_weight_bytes(m) +
           2ULL * m.vocab_size * m.hidden_dim * m.dtype_bytes;
}

const DeviceSpec* ClusterSpec::find_device(std::string_view id) const {
    for (const auto& n : nodes) {
        for (const auto& d : n.devices) {
            if (d.id == id) return &d;
        }
    }
    return nullptr;
}

const NodeSpec* ClusterSpec::node_of(std::string_view device_id) const {
    for (const auto& n : nodes) {
        for (const auto& d : n.devices) {
            if (d.id == device_id) return &n;
        }
    }
    return nullptr;
}

const MemoryTierSpec* ClusterSpec::find_tier(TierKind kind) const {
    for (const auto& t : tiers) {
        if (t.tier == kind) return &t;
    }
    return nullptr;
}

const ModelSpec* WorkloadSpec::find_model(std::string_view name) const {
    for (const auto& m : models) {
        if (m.name == name) return &m;
    }
    return nullptr;
}

int LengthDist::sample(double u) const {
    for (const auto& [len, p] : cdf) {
        if (u < p) return len;
    }
    return cdf.back().first;
}

double LengthDist::mean() const {
    double prev = 0, sum = 0;
    for (const auto& [len, p] : cdf) {
        sum += len * (p - prev);
        prev = p;
    }
    return sum;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open file");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": parse error: " + e.what());
    }
}

ModelSpec parse_model(const json& j, const std::string& ctx) {
    Fields f(j, ctx);
    ModelSpec m;
    m.name = f.str("name");
    const std::string c = ctx + " (" + m.name + ")";
    m.num_layers = positive_int(f, "num_layers");
    m.hidden_dim = positive_int(f, "hidden_dim");
    m.num_heads = positive_int(f, "num_heads");
    m.num_kv_heads = positive_int(f, "num_kv_heads");
    m.head_dim = positive_int(f, "head_dim");
    m.intermediate_dim = positive_int(f, "intermediate_dim");
    m.dtype_bytes = static_cast<int>(f.integer("dtype_bytes", 2));
    m.vocab_size = static_cast<int>(f.integer("vocab_size", 32000));
    if (f.has("moe")) m.moe = parse_moe(f.raw("moe"), f.at("moe"));
    bool has_weights = f.has("weight_bytes");
    if (has_weights) m.weight_bytes = f.bytes("weight_bytes");
    f.finish();
    require(m.num_kv_heads <= m.num_heads, c, "num_kv_heads <= num_heads");
    require(std::int64_t{m.head_dim} * m.num_heads == m.hidden_dim, c, "head_dim x num_heads == hidden_dim");
    require(m.dtype_bytes == 1 || m.dtype_bytes == 2 || m.dtype_bytes == 4, c, "dtype_bytes in {1,2,4}");
    require(m.vocab_size >= 1, c, "vocab_size >= 1");
    if (!has_weights) m.weight_bytes = dense_weight_bytes(m);
    return m;
}

json to_json(const ModelSpec& m) {
    json j;
    j["name"] = m.name;
    j["num_layers"] = m.num_layers;
    j["hidden_dim"] = m.hidden_dim;
    j["num_heads"] = m.num_heads;
    j["num_kv_heads"] = m.num_kv_heads;
    j["head_dim"] = m.head_dim;
    j["intermediate_dim"] = m.intermediate_dim;
    j["dtype_bytes"] = m.dtype_bytes;
    j["vocab_size"] = m.vocab_size;
    if (m.moe) {
        json e;
        e["num_experts"] = m.moe->num_experts;
        e["top_k"] = m.moe->top_k;
        e["expert_intermediate_dim"] = m.moe->expert_intermediate_dim;
        e["router_policy"] = to_string(m.moe->router_policy);
        if (!m.moe->user_table.empty()) e["user_table"] = m.moe->user_table;
        j["moe"] = e;
    }
    j["weight_bytes"] = m.weight_bytes;
    return j;
}

ClusterSpec parse_cluster_config(const json& j) {
    Fields f(j, "cluster");
    ClusterSpec c;
    if (f.has("nodes")) {
        const json& nodes = f.array("nodes");
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            Fields nf(nodes[i], idx("nodes", i));
            NodeSpec n;
            n.id = nf.str("id");
            if (nf.has("devices")) {
                const json& devs = nf.array("devices");
                for (std::size_t k = 0; k < devs.size(); ++k) n.devices.push_back(parse_device(devs[k], idx(nf.at("devices"), k)));
            }
            n.cpu_w = nf.num("cpu_w", 0.0);
            n.nic_w = nf.num("nic_w", 0.0);
            n.storage_w = nf.num("storage_w", 0.0);
            n.other_w = nf.num("other_w", 0.0);
            nf.finish();
            require(n.cpu_w >= 0 && n.nic_w >= 0 && n.storage_w >= 0 && n.other_w >= 0, idx("nodes", i),
                    "constant component watts >= 0");
            c.nodes.push_back(std::move(n));
        }
    }
    if (f.has("links")) {
        const json& links = f.array("links");
        for (std::size_t i = 0; i < links.size(); ++i) c.links.push_back(parse_link(links[i], idx("links", i)));
    }
    if (f.has("tiers")) {
        const json& tiers = f.array("tiers");
        for (std::size_t i = 0; i < tiers.size(); ++i) c.tiers.push_back(parse_tier(tiers[i], idx("tiers", i)));
    }
    if (f.has("msgs")) {
        const json& msgs = f.array("msgs");
        for (std::size_t i = 0; i < msgs.size(); ++i) c.msgs.push_back(parse_msg(msgs[i], idx("msgs", i)));
    }
    c.router_policy = f.enumeration("router_policy", kRouterPolicies, RouterPolicy::round_robin);
    c.standby_timeout = f.num("standby_timeout", 10.0);
    f.finish();
    require(c.standby_timeout >= 0, "cluster", "standby_timeout >= 0");
    check_cluster(c);
    return c;
}

ClusterSpec load_cluster_config(const std::string& path) {
    json j = read_json_file(path);
    try {
        return parse_cluster_config(j);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

json to_json(const ClusterSpec& c) {
    json j;
    json nodes = json::array();
    for (const auto& n : c.nodes) {
        json nj;
        nj["id"] = n.id;
        json devs = json::array();
        for (const auto& d : n.devices) {
            json dj;
            dj["id"] = d.id;
            dj["kind"] = to_string(d.kind);
            dj["mem_capacity"] = d.mem_capacity;
            dj["mem_bandwidth"] = d.mem_bandwidth;
            dj["idle_w"] = d.idle_w;
            dj["standby_w"] = d.standby_w;
            dj["active_w"] = d.active_w;
            dj["profile_ref"] = d.profile_ref;
            if (d.pim_channels) dj["pim_channels"] = *d.pim_channels;
            devs.push_back(dj);
        }
        nj["devices"] = devs;
        nj["cpu_w"] = n.cpu_w;
        nj["nic_w"] = n.nic_w;
        nj["storage_w"] = n.storage_w;
        nj["other_w"] = n.other_w;
        nodes.push_back(nj);
    }
    j["nodes"] = nodes;
    json links = json::array();
    for (const auto& l : c.links) {
        links.push_back({{"id", l.id},
                         {"endpoints", {l.endpoints[0], l.endpoints[1]}},
                         {"bandwidth", l.bandwidth},
                         {"latency", l.latency},
                         {"energy_per_byte", l.energy_per_byte}});
    }
    j["links"] = links;
    json tiers = json::array();
    for (const auto& t : c.tiers) {
        json tj{{"tier", to_string(t.tier)},
                {"capacity", t.capacity},
                {"bandwidth", t.bandwidth},
                {"scope", to_string(t.scope)},
                {"block_size_tokens", t.block_size_tokens},
                {"energy_per_byte", t.energy_per_byte}};
        if (!t.endpoint.empty()) tj["endpoint"] = t.endpoint;
        tiers.push_back(tj);
    }
    j["tiers"] = tiers;
    json msgs = json::array();
    for (const auto& m : c.msgs) {
        json mj;
        mj["id"] = m.id;
        mj["model"] = m.model;
        mj["role"] = to_string(m.role);
        mj["device_pool"] = m.device_pool;
        mj["tp_degree"] = m.tp_degree;
        mj["pp_degree"] = m.pp_degree;
        mj["dp_rank"] = m.dp_rank;
        mj["ep_degree"] = m.ep_degree;
        json rules = json::array();
        for (const auto& r : m.offload_rules) {
            json rj{{"op_class", to_string(r.op_class)}, {"target", r.target}};
            if (r.min_batch || r.max_batch) {
                json cj = json::object();
                if (r.min_batch) cj["min_batch"] = *r.min_batch;
                if (r.max_batch) cj["max_batch"] = *r.max_batch;
                rj["condition"] = cj;
            }
            if (!r.experts.empty()) rj["experts"] = r.experts;
            rules.push_back(rj);
        }
        mj["offload_rules"] = rules;
        mj["pd_peers"] = m.pd_peers;
        mj["max_batch"] = m.max_batch;
        mj["sbi_enabled"] = m.sbi_enabled;
        mj["sbi_threshold"] = m.sbi_threshold;
        json pct = json::array();
        for (auto k : m.prefix_cache_tiers) pct.push_back(to_string(k));
        mj["prefix_cache_tiers"] = pct;
        mj["promote_on_hit"] = m.promote_on_hit;
        mj["kv_load_layer_group"] = m.kv_load_layer_group;
        msgs.push_back(mj);
    }
    j["msgs"] = msgs;
    j["router_policy"] = to_string(c.router_policy);
    j["standby_timeout"] = c.standby_timeout;
    return j;
}

LengthDist parse_length_dist(const json& j, const std::string& ctx) {
    LengthDist d;
    if (j.is_number_integer()) {
        int v = j.get<int>();
        require(v >= 1, ctx, "length >= 1");
        return LengthDist::constant(v);
    }
    if (!j.is_array() || j.empty()) throw ConfigError(ctx + ": expected a length or a nonempty [[len, cdf], ...] array");
    double prev_p = 0;
    int prev_len = 0;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& e = j[i];
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number()) {
            throw ConfigError(idx(ctx, i) + ": expected [length, cumulative_probability]");
        }
        int len = e[0].get<int>();
        double p = e[1].get<double>();
        require(len >= 1 && len > prev_len, idx(ctx, i), "lengths >= 1 and strictly increasing");
        require(p > prev_p && p <= 1.0 + 1e-12, idx(ctx, i), "cumulative probabilities strictly increasing in (0,1]");
        d.cdf.emplace_back(len, p);
        prev_len = len;
        prev_p = p;
    }
    require(std::abs(prev_p - 1.0) <= 1e-9, ctx, "cdf ends at 1");
    d.cdf.back().second = 1.0;
    return d;
}

namespace {

LengthDist length_field(Fields& f, const std::string& key, const std::string& base_dir, LengthDist def) {
    if (f.has(key)) return parse_length_dist(f.raw(key), f.at(key));
    const std::string file_key = key + "_cdf_path";
    if (f.has(file_key)) {
        std::filesystem::path p = f.str(file_key);
        if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
        json cdf = read_json_file(p.string());
        return parse_length_dist(cdf, p.string());
    }
    return def;
}

GeneratorSpec parse_generator(const json& j, const std::string& ctx, const std::string& base_dir) {
    Fields f(j, ctx);
    GeneratorSpec g;
    g.kind = f.enumeration("kind", kGeneratorKinds);
    g.model = f.str("model", "");
    g.n = static_cast<int>(f.integer("n", 0));
    g.rate = f.num("rate", 0.0);
    g.k = static_cast<int>(f.integer("k", 1));
    g.pulses = static_cast<int>(f.integer("pulses", 1));
    g.interval = f.num("interval", 0.0);
    g.burst_rate = f.num("burst_rate", 0.0);
    g.idle_rate = f.num("idle_rate", 0.0);
    g.period = f.num("period", 1.0);
    g.duty = f.num("duty", 0.5);
    g.input = length_field(f, "input", base_dir, g.input);
    g.output = length_field(f, "output", base_dir, g.output);
    if (f.has("prefix_pool")) {
        Fields pf(f.raw("prefix_pool"), f.at("prefix_pool"));
        PrefixPoolSpec p;
        p.groups = static_cast<int>(pf.integer("groups", 1));
        p.prefix_len = static_cast<int>(pf.integer("prefix_len"));
        p.share_prob = pf.num("share_prob", 1.0);
        pf.finish();
        require(p.groups >= 1, pf.ctx(), "groups >= 1");
        require(p.prefix_len >= 1, pf.ctx(), "prefix_len >= 1");
        require(p.share_prob >= 0 && p.share_prob <= 1, pf.ctx(), "0 <= share_prob <= 1");
        g.prefix_pool = p;
    }
    f.finish();
    require(g.n >= 0, ctx, "n >= 0");
    if (g.rate < 0) throw ConfigError(ctx + ".rate: negative rate");
    if (g.burst_rate < 0 || g.idle_rate < 0) throw ConfigError(ctx + ": negative rate");
    switch (g.kind) {
        case GeneratorKind::poisson:
            require(g.rate > 0 || g.n == 0, ctx, "rate > 0 when n > 0");
            break;
        case GeneratorKind::pulses:
            require(g.k >= 1 && g.pulses >= 1, ctx, "k >= 1 and pulses >= 1");
            require(g.interval >= 0, ctx, "interval >= 0");
            break;
        case GeneratorKind::burst_idle:
            require(g.duty > 0 && g.duty < 1, ctx, "0 < duty < 1");
            require(g.period > 0, ctx, "period > 0");
            require(g.burst_rate > 0 || g.idle_rate > 0 || g.n == 0, ctx, "some rate > 0 when n > 0");
            break;
        case GeneratorKind::fixed:
            require(g.n >= 1, ctx, "n >= 1");
            break;
    }
    return g;
}

}  // namespace

WorkloadSpec parse_workload_config(const json& j, const std::string& base_dir) {
    Fields f(j, "workload");
    WorkloadSpec w;
    const json& models = f.array("models");
    for (std::size_t i = 0; i < models.size(); ++i) w.models.push_back(parse_model(models[i], idx("models", i)));
    if (w.models.empty()) throw ConfigError("workload.models: missing model parameters (empty list)");
    std::set<std::string> names;
    for (const auto& m : w.models) {
        if (!names.insert(m.name).second) throw ConfigError("workload.models: duplicate model '" + m.name + "'");
    }
    w.seed = static_cast<std::uint64_t>(f.integer("seed", 0));
    if (f.has("trace")) {
        std::filesystem::path p = f.str("trace");
        if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
        w.trace_path = p.string();
    }
    if (f.has("generator")) w.generator = parse_generator(f.raw("generator"), "workload.generator", base_dir);
    f.finish();
    if (w.trace_path.has_value() == w.generator.has_value()) {
        throw ConfigError("workload: exactly one of 'trace' or 'generator' is required");
    }
    if (w.generator) {
        if (w.generator->model.empty()) w.generator->model = w.models.front().name;
        if (!w.find_model(w.generator->model)) {
            throw ConfigError("workload.generator.model: dangling reference to model '" + w.generator->model + "'");
        }
    }
    return w;
}

WorkloadSpec load_workload_config(const std::string& path) {
    json j = read_json_file(path);
    std::string base = std::filesystem::path(path).parent_path().string();
    if (base.empty()) base = ".";
    try {
        return parse_workload_config(j, base);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

}  // namespace servesim
