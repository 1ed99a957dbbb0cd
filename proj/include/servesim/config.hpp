#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace servesim {

using json = nlohmann::ordered_json;

/// Raised for malformed input files, dangling references, and violated
/// type invariants. The message always names the offending field or id.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class RouterPolicy { round_robin, least_loaded, session_affinity };
enum class ExpertRouting { random, round_robin, proportional_load, user_table };
enum class DeviceKind { gpu, npu, tpu, pim_stack, cxl_device };
enum class TierKind { device, host, cxl_pool, storage };
enum class TierScope { per_device, per_node, global };
enum class MsgRole { unified, prefill, decode };
enum class OffloadClass { attention, expert_ffn, kv_cache, weights };

std::string_view to_string(RouterPolicy v);
std::string_view to_string(ExpertRouting v);
std::string_view to_string(DeviceKind v);
std::string_view to_string(TierKind v);
std::string_view to_string(TierScope v);
std::string_view to_string(MsgRole v);
std::string_view to_string(OffloadClass v);

/// Devices that execute dense operators (as opposed to memory-side devices).
inline bool is_compute_kind(DeviceKind k) {
    return k == DeviceKind::gpu || k == DeviceKind::npu || k == DeviceKind::tpu;
}

struct MoESpec {
    int num_experts = 0;
    int top_k = 0;
    int expert_intermediate_dim = 0;
    ExpertRouting router_policy = ExpertRouting::random;
    // One probability row per layer (cycled when fewer rows than layers).
    std::vector<std::vector<double>> user_table;

    bool operator==(const MoESpec&) const = default;
};

struct ModelSpec {
    std::string name;
    int num_layers = 0;
    int hidden_dim = 0;
    int num_heads = 0;
    int num_kv_heads = 0;
    int head_dim = 0;
    int intermediate_dim = 0;
    int dtype_bytes = 2;
    int vocab_size = 32000;
    std::optional<MoESpec> moe;
    std::uint64_t weight_bytes = 0;

    std::int64_t kv_dim() const { return std::int64_t{num_kv_heads} * head_dim; }
    bool operator==(const ModelSpec&) const = default;
};

/// Dense-transformer parameter footprint: attention projections, gated MLP
/// (or routed experts plus gate), and untied embedding + lm_head.
std::uint64_t dense_weight_bytes(const ModelSpec& m);

/// Bytes of one expert's weights (up + down projection).
std::uint64_t expert_weight_bytes(const ModelSpec& m);

/// Bytes of one transformer layer's weights.
std::uint64_t layer_weight_bytes(const ModelSpec& m);

struct DeviceSpec {
    std::string id;
    DeviceKind kind = DeviceKind::gpu;
    std::uint64_t mem_capacity = 0;
    double mem_bandwidth = 0;  // bytes/s; per channel for pim_stack
    double idle_w = 0;
    double standby_w = 0;
    double active_w = 0;
    std::string profile_ref;
    std::optional<int> pim_channels;

    bool operator==(const DeviceSpec&) const = default;
};

struct LinkSpec {
    std::string id;
    std::array<std::string, 2> endpoints;
    double bandwidth = 0;
    double latency = 0;
    double energy_per_byte = 0;

    bool operator==(const LinkSpec&) const = default;
};

struct MemoryTierSpec {
    TierKind tier = TierKind::host;
    std::uint64_t capacity = 0;  // ignored for the device tier (device mem_capacity is used)
    double bandwidth = 0;
    TierScope scope = TierScope::per_node;
    int block_size_tokens = 16;
    double energy_per_byte = 0;
    // Topology vertex the tier hangs off. Defaults to the owning node for
    // per_node tiers; required for global tiers.
    std::string endpoint;

    bool operator==(const MemoryTierSpec&) const = default;
};

struct NodeSpec {
    std::string id;
    std::vector<DeviceSpec> devices;
    double cpu_w = 0;
    double nic_w = 0;
    double storage_w = 0;
    double other_w = 0;

    bool operator==(const NodeSpec&) const = default;
};

struct OffloadRule {
    OffloadClass op_class = OffloadClass::attention;
    std::string target;  // device id or tier name (host, cxl_pool, storage)
    // Rule applies only when the batch request count lies in [min_batch, max_batch].
    std::optional<int> min_batch;
    std::optional<int> max_batch;
    // expert_ffn only: experts placed on the target; empty means all.
    std::vector<int> experts;

    bool applies(int batch_size) const {
        return (!min_batch || batch_size >= *min_batch) && (!max_batch || batch_size <= *max_batch);
    }
    bool operator==(const OffloadRule&) const = default;
};

struct MsgSpec {
    std::string id;
    std::string model;
    MsgRole role = MsgRole::unified;
    std::vector<std::string> device_pool;
    int tp_degree = 1;
    int pp_degree = 1;
    int dp_rank = 0;
    int ep_degree = 1;
    std::vector<OffloadRule> offload_rules;
    std::vector<std::string> pd_peers;
    int max_batch = 256;
    bool sbi_enabled = false;
    int sbi_threshold = 256;
    // Tiers holding radix prefix caches, searched in this order.
    std::vector<TierKind> prefix_cache_tiers;
    bool promote_on_hit = true;
    // Layers per prefix-load op; 0 loads each block once for all layers.
    int kv_load_layer_group = 0;

    bool operator==(const MsgSpec&) const = default;
};

struct ClusterSpec {
    std::vector<NodeSpec> nodes;
    std::vector<LinkSpec> links;
    std::vector<MemoryTierSpec> tiers;
    std::vector<MsgSpec> msgs;
    RouterPolicy router_policy = RouterPolicy::round_robin;
    double standby_timeout = 10.0;

    const DeviceSpec* find_device(std::string_view id) const;
    const NodeSpec* node_of(std::string_view device_id) const;
    const MemoryTierSpec* find_tier(TierKind kind) const;
    bool operator==(const ClusterSpec&) const = default;
};

/// Empirical CDF over token lengths: (length, cumulative probability) pairs,
/// strictly increasing in both, ending at probability 1.
struct LengthDist {
    std::vector<std::pair<int, double>> cdf;

    static LengthDist constant(int len) { return LengthDist{{{len, 1.0}}}; }
    /// Inverse-CDF step sample for u in [0, 1).
    int sample(double u) const;
    double mean() const;
    bool operator==(const LengthDist&) const = default;
};

struct PrefixPoolSpec {
    int groups = 1;
    int prefix_len = 0;
    double share_prob = 1.0;

    bool operator==(const PrefixPoolSpec&) const = default;
};

enum class GeneratorKind { poisson, pulses, burst_idle, fixed };
std::string_view to_string(GeneratorKind v);

struct GeneratorSpec {
    GeneratorKind kind = GeneratorKind::poisson;
    std::string model;
    int n = 0;
    double rate = 0;
    // pulses
    int k = 1;
    int pulses = 1;
    double interval = 0;
    // burst_idle
    double burst_rate = 0;
    double idle_rate = 0;
    double period = 1;
    double duty = 0.5;
    LengthDist input = LengthDist::constant(128);
    LengthDist output = LengthDist::constant(128);
    std::optional<PrefixPoolSpec> prefix_pool;

    bool operator==(const GeneratorSpec&) const = default;
};

struct WorkloadSpec {
    std::vector<ModelSpec> models;
    std::uint64_t seed = 0;
    std::optional<std::string> trace_path;  // resolved relative to the workload file
    std::optional<GeneratorSpec> generator;

    const ModelSpec* find_model(std::string_view name) const;
};

ClusterSpec parse_cluster_config(const json& j);
ClusterSpec load_cluster_config(const std::string& path);
json to_json(const ClusterSpec& c);

ModelSpec parse_model(const json& j, const std::string& ctx);
json to_json(const ModelSpec& m);

WorkloadSpec parse_workload_config(const json& j, const std::string& base_dir = ".");
WorkloadSpec load_workload_config(const std::string& path);

LengthDist parse_length_dist(const json& j, const std::string& ctx);

/// Reads and parses a JSON file, converting parse errors into ConfigError
/// with line/column context.
json read_json_file(const std::string& path);

}  // namespace servesim
