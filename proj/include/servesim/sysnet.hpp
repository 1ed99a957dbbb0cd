#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "servesim/config.hpp"
#include "servesim/graph.hpp"

namespace servesim {

// ---- events ----

enum class EventType { op_done, flow_activate, flow_done, arrival, schedule, timeout };

struct Event {
    double time = 0;
    int priority = 0;  // lower runs first among equal times
    int owner = 0;     // MSG index (or -1 for system-wide events)
    std::uint64_t seq = 0;
    EventType type = EventType::op_done;
    std::int64_t a = 0;
    std::int64_t b = 0;
    std::uint64_t version = 0;
};

/// Pops in (time, priority, owner, seq) order; seq is assigned on push, so
/// the total order is reproducible.
class EventQueue {
public:
    void push(double time, int priority, int owner, EventType type, std::int64_t a = 0, std::int64_t b = 0,
              std::uint64_t version = 0);
    Event pop();
    bool empty() const { return heap_.empty(); }
    std::size_t size() const { return heap_.size(); }
    double next_time() const { return heap_.top().time; }
    std::uint64_t popped() const { return popped_; }

private:
    struct Later {
        bool operator()(const Event& x, const Event& y) const {
            return std::tie(x.time, x.priority, x.owner, x.seq) > std::tie(y.time, y.priority, y.owner, y.seq);
        }
    };
    std::priority_queue<Event, std::vector<Event>, Later> heap_;
    std::uint64_t next_seq_ = 0;
    std::uint64_t popped_ = 0;
    double last_ = 0;
};

// ---- topology ----

class RoutingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A bandwidth resource shared by flows: a physical link or a memory tier port.
struct Resource {
    std::string name;
    double bandwidth = 0;
    double latency = 0;
    double energy_per_byte = 0;
    bool is_tier = false;
};

/// Vertices are devices (cluster order) followed by nodes. Routes are BFS
/// shortest paths taking lower link indices first.
class Topology {
public:
    explicit Topology(const ClusterSpec& cluster);

    std::size_t device_count() const { return devices_.size(); }
    const DeviceSpec& device(int d) const { return devices_.at(static_cast<std::size_t>(d)); }
    int device_index(std::string_view id) const;
    int node_of(int device) const { return device_node_.at(static_cast<std::size_t>(device)); }
    int node_vertex(int node) const { return static_cast<int>(devices_.size()) + node; }
    /// Device or node id to vertex.
    int vertex(std::string_view id) const;

    /// Registers memory tier `tier` as a port resource attached at `vertex`.
    void add_tier(int tier, std::string name, double bandwidth, double energy_per_byte, int vertex);

    const Resource& resource(int r) const { return resources_.at(static_cast<std::size_t>(r)); }
    std::size_t resource_count() const { return resources_.size(); }

    /// Link resources from vertex u to v; throws RoutingError when disconnected.
    const std::vector<int>& route(int u, int v) const;
    /// Tier port followed by the route from the tier's vertex to `device`.
    std::vector<int> tier_path(int tier, int device) const;
    double path_latency(const std::vector<int>& path) const;
    double path_bandwidth(const std::vector<int>& path) const;

private:
    std::vector<DeviceSpec> devices_;
    std::vector<int> device_node_;
    std::map<std::string, int, std::less<>> vertex_of_;
    std::vector<std::vector<std::pair<int, int>>> adj_;  // vertex -> (link, neighbor)
    std::vector<Resource> resources_;
    std::map<int, std::pair<int, int>> tiers_;  // tier -> (resource, vertex)
    mutable std::map<std::pair<int, int>, std::vector<int>> routes_;
};

// ---- collectives ----

enum class CollectiveKind { all_reduce, all_to_all };

/// Ring all-reduce: 2(p-1)/p B/W + 2(p-1) alpha. All-to-all: (p-1)/p B/W +
/// (p-1) alpha. B is bytes per rank; p < 2 costs nothing.
double collective_time(CollectiveKind kind, double bytes_per_rank, int ranks, double bandwidth, double alpha);

// ---- fluid flows ----

/// Max-min fair rates by progressive filling. Each flow lists the resources
/// it crosses; flows with no resources get infinite rate.
std::vector<double> max_min_rates(const std::vector<std::vector<int>>& paths, const std::vector<double>& capacity);

/// Flows in their bandwidth phase; rates are recomputed on every change.
class FlowNetwork {
public:
    explicit FlowNetwork(std::vector<double> capacity) : capacity_(std::move(capacity)) {}

    /// Drains remaining bytes at current rates up to `now`.
    void advance(double now);
    int add(std::vector<int> resources, double bytes, double now);
    /// Removes and returns flows whose remaining bytes are exhausted at `now`.
    std::vector<int> take_finished(double now);
    /// Earliest completion time among active flows (infinity when none).
    double next_completion() const;
    double rate(int flow) const { return flows_.at(flow).rate; }
    std::size_t active() const { return flows_.size(); }

private:
    struct Flow {
        std::vector<int> resources;
        double bytes = 0;
        double remaining = 0;
        double rate = 0;
    };
    void recompute();

    std::vector<double> capacity_;
    std::map<int, Flow> flows_;
    int next_id_ = 0;
    double now_ = 0;
};

/// Standalone fluid replay: each flow starts at its time and finishes when
/// its bytes drain under max-min sharing. Returns finish times.
struct FlowSpec {
    std::vector<int> resources;
    double bytes = 0;
    double start = 0;
};
std::vector<double> simulate_flows(const std::vector<double>& capacity, const std::vector<FlowSpec>& flows);

// ---- system simulator ----

struct OpRecord {
    int graph = -1;
    int op = -1;
    OpKind kind = OpKind::compute;
    std::vector<int> devices;
    double ready = 0;
    double start = 0;
    double end = 0;
};

class SimObserver {
public:
    virtual ~SimObserver() = default;
    virtual void op_started(const ExecutionGraph&, const MappedOp&, double) {}
    virtual void op_finished(const ExecutionGraph&, const MappedOp&, double) {}
    /// A p2p or memory op drained `bytes` over `resources` during [t0, t1].
    virtual void flow_finished(const ExecutionGraph&, const MappedOp&, const std::vector<int>&, double, double) {}
    virtual void graph_finished(int, double) {}
};

/// Executes graphs over the topology: one op per device at a time, flows
/// for point-to-point and memory traffic, timed ops for collectives.
class SystemSimulator {
public:
    SystemSimulator(const Topology& topology, EventQueue& queue);

    void set_observer(SimObserver* o) { observer_ = o; }
    void set_logging(bool on) { logging_ = on; }

    /// Roots become ready at t. Returns the graph handle.
    int submit(ExecutionGraph graph, double t);
    const ExecutionGraph& graph(int handle) const { return graphs_.at(handle).graph; }
    void release(int handle) { graphs_.erase(handle); }
    bool owns(EventType t) const {
        return t == EventType::op_done || t == EventType::flow_activate || t == EventType::flow_done;
    }
    void handle(const Event& e);
    std::size_t in_flight() const { return in_flight_; }
    const std::vector<OpRecord>& log() const { return log_; }
    /// Seconds a collective over these ranks takes.
    double collective_duration(const MappedOp& op) const;
    bool device_busy(int d) const { return busy_.at(static_cast<std::size_t>(d)); }

private:
    struct GraphState {
        ExecutionGraph graph;
        std::vector<int> pending;  // unmet dependency counts
        std::vector<std::vector<int>> dependents;
        std::vector<double> ready_at;
        std::vector<double> started_at;
        std::size_t done = 0;
    };
    struct ActiveFlow {
        int handle = -1;
        int op = -1;
        std::vector<int> resources;
        double start = 0;
    };

    void make_ready(int handle, int op, double t);
    void try_start(double now);
    void start_flow(int handle, int op, double now);
    void activate_flow(int pending_id, double now);
    void complete(int handle, int op, double now);
    void reschedule_flows();

    const Topology& topo_;
    EventQueue& queue_;
    SimObserver* observer_ = nullptr;
    bool logging_ = false;
    std::map<int, GraphState> graphs_;
    int next_handle_ = 0;
    std::size_t in_flight_ = 0;
    std::vector<bool> busy_;
    // (ready time, graph seq, op id, handle)
    std::set<std::tuple<double, std::uint64_t, int, int>> ready_;
    FlowNetwork network_;
    std::map<int, ActiveFlow> pending_flows_;  // latency phase, keyed by pending id
    std::map<int, ActiveFlow> flows_;          // bandwidth phase, keyed by network flow id
    int next_pending_ = 0;
    std::uint64_t flow_version_ = 0;
    std::vector<OpRecord> log_;
};

}  // namespace servesim
