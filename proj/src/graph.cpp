#include "servesim/graph.hpp"

#include <algorithm>
#include <stdexcept>

namespace servesim {

std::string_view to_string(OpKind k) {
    switch (k) {
        case OpKind::compute: return "compute";
        case OpKind::pim_compute: return "pim_compute";
        case OpKind::all_reduce: return "all_reduce";
        case OpKind::all_to_all: return "all_to_all";
        case OpKind::p2p: return "p2p";
        case OpKind::mem_load: return "mem_load";
        case OpKind::mem_store: return "mem_store";
    }
    return "?";
}

int ExecutionGraph::add(MappedOp op) {
    op.id = static_cast<int>(ops.size());
    ops.push_back(std::move(op));
    return ops.back().id;
}

std::vector<int> ExecutionGraph::topo_order() const {
    const auto n = ops.size();
    std::vector<int> indeg(n, 0);
    std::vector<std::vector<int>> out(n);
    for (const auto& op : ops) {
        for (int d : op.deps) {
            if (d < 0 || static_cast<std::size_t>(d) >= n || d == op.id) {
                throw std::logic_error("graph: op " + std::to_string(op.id) + " has bad dependency " +
                                       std::to_string(d));
            }
            out[static_cast<std::size_t>(d)].push_back(op.id);
            ++indeg[static_cast<std::size_t>(op.id)];
        }
    }
    std::vector<int> order;
    order.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (indeg[i] == 0) order.push_back(static_cast<int>(i));
    }
    for (std::size_t head = 0; head < order.size(); ++head) {
        for (int v : out[static_cast<std::size_t>(order[head])]) {
            if (--indeg[static_cast<std::size_t>(v)] == 0) order.push_back(v);
        }
    }
    if (order.size() != n) throw std::logic_error("graph: cycle detected");
    return order;
}

double ExecutionGraph::critical_path() const {
    std::vector<double> finish(ops.size(), 0);
    double best = 0;
    for (int id : topo_order()) {
        const auto& op = ops[static_cast<std::size_t>(id)];
        double start = 0;
        for (int d : op.deps) start = std::max(start, finish[static_cast<std::size_t>(d)]);
        bool timed = op.kind == OpKind::compute || op.kind == OpKind::pim_compute;
        finish[static_cast<std::size_t>(id)] = start + (timed ? op.latency : 0);
        best = std::max(best, finish[static_cast<std::size_t>(id)]);
    }
    return best;
}

std::size_t ExecutionGraph::count(OpKind k) const {
    return static_cast<std::size_t>(std::count_if(ops.begin(), ops.end(), [k](const MappedOp& o) { return o.kind == k; }));
}

json to_json(const ExecutionGraph& g) {
    json j;
    j["msg"] = g.msg;
    j["seq"] = g.seq;
    json ops = json::array();
    for (const auto& op : g.ops) {
        json o;
        o["id"] = op.id;
        o["kind"] = to_string(op.kind);
        if (op.kind == OpKind::compute || op.kind == OpKind::pim_compute) {
            o["op_class"] = to_string(op.key.op);
            o["batch"] = op.key.batch;
            o["seq"] = op.key.seq;
            o["latency"] = op.latency;
        }
        o["devices"] = op.devices;
        if (op.tier >= 0) o["tier"] = op.tier;
        if (op.bytes) o["bytes"] = op.bytes;
        o["layer"] = op.layer;
        if (op.sub_batch) o["sub_batch"] = op.sub_batch;
        o["deps"] = op.deps;
        if (!op.tag.empty()) o["tag"] = op.tag;
        ops.push_back(std::move(o));
    }
    j["ops"] = std::move(ops);
    return j;
}

}  // namespace servesim
