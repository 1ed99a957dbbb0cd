#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "servesim/config.hpp"
#include "servesim/profile.hpp"

namespace servesim {

enum class OpKind { compute, pim_compute, all_reduce, all_to_all, p2p, mem_load, mem_store };
std::string_view to_string(OpKind k);

/// True for kinds that hold their devices for their whole duration.
inline bool occupies_devices(OpKind k) {
    return k == OpKind::compute || k == OpKind::pim_compute || k == OpKind::all_reduce || k == OpKind::all_to_all;
}

struct MappedOp {
    int id = 0;
    OpKind kind = OpKind::compute;
    OperatorKey key;
    // Topology device indices. compute/pim: {device}; collectives: ranks;
    // p2p: {src, dst}; memory ops: {device}.
    std::vector<int> devices;
    int tier = -1;  // memory ops: memory tier index
    std::uint64_t bytes = 0;
    double latency = 0;            // compute kinds, seconds
    std::optional<double> energy;  // compute kinds, joules from the profile
    int layer = -1;
    int sub_batch = 0;
    std::vector<int> deps;
    std::string tag;
};

struct ExecutionGraph {
    int msg = -1;
    std::uint64_t seq = 0;
    std::vector<MappedOp> ops;

    int add(MappedOp op);
    /// Kahn order; throws std::logic_error on a cycle or a bad dependency id.
    std::vector<int> topo_order() const;
    /// Longest path over op latencies (non-compute ops count as 0).
    double critical_path() const;
    std::size_t count(OpKind k) const;
};

json to_json(const ExecutionGraph& g);

}  // namespace servesim
