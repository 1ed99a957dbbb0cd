#pragma once

#include <string>
#include <vector>

#include "servesim/config.hpp"
#include "servesim/profile.hpp"

namespace servesim::testing {

inline ModelSpec dense_model(std::string name, int layers, int hidden = 512, int kv_heads = 4, int head_dim = 64) {
    ModelSpec m;
    m.name = std::move(name);
    m.num_layers = layers;
    m.hidden_dim = hidden;
    m.num_heads = hidden / head_dim;
    m.num_kv_heads = kv_heads;
    m.head_dim = head_dim;
    m.intermediate_dim = hidden * 4;
    m.dtype_bytes = 2;
    m.vocab_size = 1000;
    m.weight_bytes = dense_weight_bytes(m);
    return m;
}

inline ModelSpec moe_model(std::string name, int layers, int experts, int top_k, ExpertRouting policy) {
    ModelSpec m = dense_model(std::move(name), layers);
    m.moe = MoESpec{experts, top_k, 1024, policy, {}};
    m.weight_bytes = dense_weight_bytes(m);
    return m;
}

inline DeviceSpec gpu(std::string id, std::uint64_t capacity = 16'000'000'000ULL) {
    DeviceSpec d;
    d.id = std::move(id);
    d.kind = DeviceKind::gpu;
    d.mem_capacity = capacity;
    d.mem_bandwidth = 1e12;
    d.idle_w = 20;
    d.standby_w = 50;
    d.active_w = 200;
    d.profile_ref = "const";
    return d;
}

/// Every op class at a fixed latency over a 2x2 grid.
inline ProfileTable constant_profile(const std::string& model, const std::string& device, double latency) {
    std::vector<ProfileTable::Sample> samples;
    for (int c = 0; c < kNumOpClasses; ++c) {
        for (std::int64_t b : {1, 4096}) {
            for (std::int64_t s : {1, 65536}) {
                samples.push_back({static_cast<OpClass>(c), b, s, OperatorRecord{latency, std::nullopt}});
            }
        }
    }
    return ProfileTable(device, model, samples);
}

inline LinkSpec link(std::string id, std::string a, std::string b, double bw = 100e9, double latency = 0) {
    LinkSpec l;
    l.id = std::move(id);
    l.endpoints = {std::move(a), std::move(b)};
    l.bandwidth = bw;
    l.latency = latency;
    return l;
}

/// One node with `n` const-profile GPUs chained by links and attached to the node.
inline ClusterSpec single_node(int n) {
    ClusterSpec c;
    NodeSpec node;
    node.id = "node0";
    for (int i = 0; i < n; ++i) node.devices.push_back(gpu("gpu" + std::to_string(i)));
    c.nodes.push_back(node);
    for (int i = 0; i < n; ++i) {
        c.links.push_back(link("pcie" + std::to_string(i), "gpu" + std::to_string(i), "node0"));
        if (i + 1 < n) c.links.push_back(link("nv" + std::to_string(i), "gpu" + std::to_string(i), "gpu" + std::to_string(i + 1)));
    }
    return c;
}

inline MsgSpec msg(std::string id, std::string model, std::vector<std::string> pool, int tp = 1) {
    MsgSpec m;
    m.id = std::move(id);
    m.model = std::move(model);
    m.device_pool = std::move(pool);
    m.tp_degree = tp;
    return m;
}

}  // namespace servesim::testing
