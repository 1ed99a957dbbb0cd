#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "servesim/config.hpp"
#include "servesim/graph.hpp"
#include "servesim/memory.hpp"
#include "servesim/profile.hpp"
#include "servesim/sysnet.hpp"
#include "servesim/workload.hpp"

namespace servesim {

enum class RequestState { queued, prefill, kv_transfer, decode, complete };
std::string_view to_string(RequestState s);

struct Request {
    RequestSpec spec;
    int index = -1;
    RequestState state = RequestState::queued;
    int tokens_done = 0;
    std::optional<double> sched_time;
    std::optional<double> first_token_time;
    std::optional<double> done_time;
    int prefix_hit_tokens = 0;
    int msg = -1;         // MSG currently holding the request
    int decode_msg = -1;  // paired decode MSG under PD
    RequestKv kv;
    std::uint64_t kv_peak_bytes = 0;

    int context() const { return spec.input_len + tokens_done; }
    /// Moves along queued -> prefill -> [kv_transfer] -> decode -> complete;
    /// throws std::logic_error on any other transition.
    void advance(RequestState next);
};

struct Batch {
    std::vector<int> prefill;
    std::vector<int> decode;
    int total_tokens = 0;
    bool sbi = false;
    // Sub-batch request lists; without SBI only [0] is used and holds everything.
    std::array<std::vector<int>, 2> sub;
    std::vector<MemTransfer> transfers;
    std::vector<int> admitted_decode;  // decode-role admissions of transferred requests
};

/// Per-layer expert token counts. random: i.i.d. uniform draws of top_k
/// distinct experts per token; round_robin: token t to experts t..t+k-1 mod E;
/// proportional_load: each token to the k currently least-loaded experts;
/// user_table: largest-remainder apportionment of tokens x k over `table`.
std::vector<int> route_experts(ExpertRouting policy, int tokens, int num_experts, int top_k, std::uint64_t seed,
                               const std::vector<double>* table = nullptr);

/// One model serving group: static mapping plus queue and in-flight state.
struct MsgRuntime {
    int index = -1;
    MsgSpec spec;
    ModelSpec model;
    std::uint64_t kv_bytes_per_token = 0;
    std::uint64_t seed = 0;

    const Topology* topology = nullptr;
    const ProfileSet* profiles = nullptr;
    std::vector<int> compute_devices;  // topology indices, pool order
    std::vector<int> all_devices;      // every pool device plus offload targets

    // Offload wiring resolved from the rules.
    std::optional<OffloadRule> attention_rule;
    int pim_device = -1;
    int kv_device = -1;  // KV pool lives on this device (kv_cache / attention offload)
    int kv_tier = -1;    // KV pool lives in this memory tier (kv_cache offload to a tier)
    std::optional<OffloadRule> weights_rule;
    int weights_device = -1;
    int weights_tier = -1;
    std::optional<OffloadRule> expert_rule;
    int expert_device = -1;
    int expert_tier = -1;

    // Memory.
    int pool_tier = -1;
    int device_cache = -1;
    std::vector<int> shared_caches;

    // PD.
    std::vector<int> decode_peers;
    std::map<int, std::vector<int>> peer_devices;  // decode MSG -> its compute devices
    std::map<int, int> peer_pp;                    // decode MSG -> its pp degree
    std::map<int, int> peer_tp;

    // Dynamic state.
    std::deque<int> queue;     // new requests (unified / prefill)
    std::deque<int> incoming;  // requests whose KV arrived (decode)
    std::vector<int> running;  // decode-state requests
    bool busy = false;
    int graph_handle = -1;
    std::uint64_t graph_seq = 0;
    Batch batch;
    std::uint64_t idle_version = 0;

    int tp() const { return spec.tp_degree; }
    int pp() const { return spec.pp_degree; }
    int stage_of(int layer) const;
    int device_at(int stage, int rank) const {
        return compute_devices.at(static_cast<std::size_t>(stage * spec.tp_degree + rank));
    }
    bool expert_offloaded(int e) const;
    bool has_work() const { return busy || !queue.empty() || !incoming.empty() || !running.empty(); }
    /// Profile lookup for an op on a topology device.
    OperatorRecord cost(int device, const OperatorKey& key) const;
    std::string profile_id(int device) const;
};

/// Continuous batching: all decode-state requests join; queued requests are
/// admitted FCFS while the batch has room and memory approves. SBI splits a
/// pure-decode set into halves when it reaches the threshold.
std::optional<Batch> schedule_batch(MsgRuntime& msg, std::vector<Request>& reqs, MemorySystem& mem, double now);

/// Compute, collective and offload ops with intra-layer dependencies.
std::vector<MappedOp> map_ops(const MsgRuntime& msg, const Batch& batch, const std::vector<Request>& reqs);

/// Adds memory transfers, expert loads and PD KV transfers, then checks the DAG.
ExecutionGraph build_graph(const MsgRuntime& msg, const Batch& batch, std::vector<MappedOp> mapped,
                           const std::vector<Request>& reqs);

struct GraphOutcome {
    std::uint64_t tokens = 0;
    std::vector<int> completed;
    std::vector<int> handed_off;  // prefill-role requests now in KV transfer
};

GraphOutcome on_graph_complete(MsgRuntime& msg, std::vector<Request>& reqs, MemorySystem& mem, double finish);

}  // namespace servesim
