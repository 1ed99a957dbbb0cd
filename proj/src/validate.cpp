#include "servesim/validate.hpp"

#include <algorithm>
#include <set>

#include "servesim/sysnet.hpp"

namespace servesim {

std::string ValidationReport::text() const {
    std::string out;
    for (const auto& e : errors) out += "error: " + e + "\n";
    for (const auto& w : warnings) out += "warning: " + w + "\n";
    out += errors.empty() ? "ok\n" : "FAILED (" + std::to_string(errors.size()) + " error(s))\n";
    return out;
}

namespace {

std::string profile_id(const DeviceSpec& d) {
    return d.profile_ref.empty() ? std::string(to_string(d.kind)) : d.profile_ref;
}

bool unconditional(const OffloadRule& r) { return !r.min_batch && !r.max_batch; }

}  // namespace

ValidationReport validate(const ClusterSpec& cluster, const std::vector<ModelSpec>& models,
                          const ProfileSet& profiles) {
    ValidationReport rep;
    if (cluster.msgs.empty()) {
        rep.errors.push_back("no serving groups");
        return rep;
    }
    std::optional<Topology> topo;
    try {
        topo.emplace(cluster);
    } catch (const std::exception& e) {
        rep.errors.push_back(std::string("topology: ") + e.what());
    }

    std::set<std::string> used;
    // (model, device id, op) triples already reported.
    std::set<std::tuple<std::string, std::string, OpClass>> reported;
    std::set<std::pair<std::string, std::string>> missing_tables;

    auto need = [&](const ModelSpec& model, const DeviceSpec& dev, OpClass op, const std::string& who) {
        const std::string pid = profile_id(dev);
        const ProfileTable* t = profiles.find(model.name, pid);
        if (!t) {
            if (missing_tables.insert({model.name, pid}).second) {
                rep.errors.push_back("missing profile: " + who + ": no table for model '" + model.name +
                                     "' on device profile '" + pid + "' (device " + dev.id + ")");
            }
            return;
        }
        if (!t->has(op) && reported.insert({model.name, dev.id, op}).second) {
            rep.errors.push_back("missing profile: " + who + ": op '" + std::string(to_string(op)) + "' on device '" +
                                 dev.id + "' (profile '" + pid + "', model '" + model.name + "')");
        }
    };
    auto routable = [&](std::string_view a, std::string_view b, const std::string& what) {
        if (!topo) return;
        try {
            topo->route(topo->vertex(a), topo->vertex(b));
        } catch (const RoutingError& e) {
            rep.errors.push_back("route: " + what + ": " + e.what());
        }
    };

    for (const auto& m : cluster.msgs) {
        const std::string who = "msg " + m.id;
        auto it = std::find_if(models.begin(), models.end(), [&](const ModelSpec& x) { return x.name == m.model; });
        if (it == models.end()) {
            rep.errors.push_back(who + ": model '" + m.model + "' is not defined in the workload");
            continue;
        }
        const ModelSpec& model = *it;
        std::vector<const DeviceSpec*> devs;
        for (const auto& id : m.device_pool) {
            if (const DeviceSpec* d = cluster.find_device(id)) {
                devs.push_back(d);
                used.insert(id);
            }
        }
        if (devs.empty()) continue;

        const OffloadRule* attention = nullptr;
        const OffloadRule* experts = nullptr;
        const OffloadRule* weights = nullptr;
        for (const auto& r : m.offload_rules) {
            if (const DeviceSpec* d = cluster.find_device(r.target)) used.insert(d->id);
            if (r.op_class == OffloadClass::attention) attention = &r;
            if (r.op_class == OffloadClass::expert_ffn) experts = &r;
            if (r.op_class == OffloadClass::weights) weights = &r;
        }

        std::vector<OpClass> ops{OpClass::embed, OpClass::lm_head, OpClass::norm, OpClass::qkv_proj, OpClass::out_proj};
        if (m.role != MsgRole::decode) ops.push_back(OpClass::attention_prefill);
        if (m.role != MsgRole::prefill && !(attention && unconditional(*attention))) {
            ops.push_back(OpClass::attention_decode);
        }
        if (model.moe) {
            ops.push_back(OpClass::router_gate);
            const bool all_remote = experts && experts->experts.empty() && cluster.find_device(experts->target);
            if (!all_remote) ops.push_back(OpClass::expert_ffn);
        } else {
            ops.push_back(OpClass::ffn_up);
            ops.push_back(OpClass::ffn_down);
        }
        for (const DeviceSpec* d : devs) {
            for (OpClass op : ops) need(model, *d, op, who);
        }
        if (attention && m.role != MsgRole::prefill) {
            if (const DeviceSpec* d = cluster.find_device(attention->target)) need(model, *d, OpClass::pim_attention, who);
        }
        if (experts) {
            if (const DeviceSpec* d = cluster.find_device(experts->target)) need(model, *d, OpClass::expert_ffn, who);
        }

        // Capacity: resident weights split over tp x pp devices.
        const auto L = static_cast<std::uint64_t>(model.num_layers);
        std::uint64_t resident = model.weight_bytes;
        if (weights) resident -= std::min(resident, L * layer_weight_bytes(model));
        if (experts && model.moe) {
            const auto n = experts->experts.empty() ? static_cast<std::uint64_t>(model.moe->num_experts)
                                                    : experts->experts.size();
            resident -= std::min(resident, n * L * expert_weight_bytes(model));
        }
        const auto ways = static_cast<std::uint64_t>(std::max(1, m.tp_degree * m.pp_degree));
        const std::uint64_t per_device = (resident + ways - 1) / ways;
        std::uint64_t total = 0;
        for (const DeviceSpec* d : devs) {
            total += d->mem_capacity;
            if (per_device >= d->mem_capacity) {
                rep.errors.push_back("capacity: " + who + ": " + std::to_string(resident) + " weight bytes over " +
                                     std::to_string(ways) + " devices need " + std::to_string(per_device) +
                                     " bytes on " + d->id + ", which holds " + std::to_string(d->mem_capacity));
            }
        }
        if (per_device < devs.front()->mem_capacity && resident * 20 > total * 19) {
            rep.warnings.push_back("capacity: " + who + ": weights leave under 5% of pool memory for KV cache");
        }

        // Reachability of everything the mapping moves bytes between.
        for (std::size_t i = 0; i + 1 < m.device_pool.size(); ++i) {
            routable(m.device_pool[i], m.device_pool[i + 1], who + " pool");
        }
        for (const auto& r : m.offload_rules) {
            if (cluster.find_device(r.target)) routable(r.target, m.device_pool.front(), who + " offload target");
        }
        const NodeSpec* node = cluster.node_of(m.device_pool.front());
        auto tier_vertex = [&](TierKind k) -> std::string {
            const MemoryTierSpec* t = cluster.find_tier(k);
            if (!t || k == TierKind::device) return {};
            if (t->scope == TierScope::global) return t->endpoint;
            return node ? node->id : std::string();
        };
        std::vector<TierKind> tiers(m.prefix_cache_tiers.begin(), m.prefix_cache_tiers.end());
        for (const auto& r : m.offload_rules) {
            for (TierKind k : {TierKind::host, TierKind::cxl_pool, TierKind::storage}) {
                if (r.target == to_string(k)) tiers.push_back(k);
            }
        }
        for (TierKind k : tiers) {
            std::string v = tier_vertex(k);
            if (!v.empty()) routable(v, m.device_pool.front(), who + " tier " + std::string(to_string(k)));
        }
        for (const auto& peer : m.pd_peers) {
            auto p = std::find_if(cluster.msgs.begin(), cluster.msgs.end(), [&](const MsgSpec& x) { return x.id == peer; });
            if (p != cluster.msgs.end() && !p->device_pool.empty()) {
                routable(m.device_pool.front(), p->device_pool.front(), who + " pd peer " + peer);
            }
        }
        if (m.sbi_enabled && !attention) rep.warnings.push_back(who + ": sbi_enabled without an attention offload rule");
    }

    for (const auto& m : cluster.msgs) {
        if (m.role != MsgRole::decode) continue;
        bool referenced = std::any_of(cluster.msgs.begin(), cluster.msgs.end(), [&](const MsgSpec& x) {
            return std::find(x.pd_peers.begin(), x.pd_peers.end(), m.id) != x.pd_peers.end();
        });
        if (!referenced) rep.warnings.push_back("msg " + m.id + ": decode group is no prefill group's peer");
    }
    for (const auto& n : cluster.nodes) {
        for (const auto& d : n.devices) {
            if (!used.count(d.id)) rep.warnings.push_back("device " + d.id + " is not used by any serving group");
        }
    }
    return rep;
}

}  // namespace servesim
