#include "servesim/sysnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace servesim {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

// ---- EventQueue ----

void EventQueue::push(double time, int priority, int owner, EventType type, std::int64_t a, std::int64_t b,
                      std::uint64_t version) {
    if (time < last_) throw std::logic_error("event queue: event scheduled in the past");
    heap_.push(Event{time, priority, owner, next_seq_++, type, a, b, version});
}

Event EventQueue::pop() {
    Event e = heap_.top();
    heap_.pop();
    if (e.time < last_) throw std::logic_error("event queue: clock went backwards");
    last_ = e.time;
    ++popped_;
    return e;
}

// ---- Topology ----

Topology::Topology(const ClusterSpec& cluster) {
    for (std::size_t n = 0; n < cluster.nodes.size(); ++n) {
        for (const auto& d : cluster.nodes[n].devices) {
            vertex_of_.emplace(d.id, static_cast<int>(devices_.size()));
            devices_.push_back(d);
            device_node_.push_back(static_cast<int>(n));
        }
    }
    for (std::size_t n = 0; n < cluster.nodes.size(); ++n) {
        vertex_of_.emplace(cluster.nodes[n].id, static_cast<int>(devices_.size() + n));
    }
    adj_.resize(devices_.size() + cluster.nodes.size());
    for (std::size_t l = 0; l < cluster.links.size(); ++l) {
        const auto& link = cluster.links[l];
        int u = vertex(link.endpoints[0]);
        int v = vertex(link.endpoints[1]);
        adj_[static_cast<std::size_t>(u)].emplace_back(static_cast<int>(l), v);
        adj_[static_cast<std::size_t>(v)].emplace_back(static_cast<int>(l), u);
        resources_.push_back({link.id, link.bandwidth, link.latency, link.energy_per_byte, false});
    }
}

int Topology::device_index(std::string_view id) const {
    auto it = vertex_of_.find(id);
    if (it == vertex_of_.end() || it->second >= static_cast<int>(devices_.size())) {
        throw RoutingError("unknown device '" + std::string(id) + "'");
    }
    return it->second;
}

int Topology::vertex(std::string_view id) const {
    auto it = vertex_of_.find(id);
    if (it == vertex_of_.end()) throw RoutingError("unknown vertex '" + std::string(id) + "'");
    return it->second;
}

void Topology::add_tier(int tier, std::string name, double bandwidth, double energy_per_byte, int v) {
    tiers_[tier] = {static_cast<int>(resources_.size()), v};
    resources_.push_back({std::move(name), bandwidth, 0, energy_per_byte, true});
}

const std::vector<int>& Topology::route(int u, int v) const {
    auto key = std::make_pair(u, v);
    auto it = routes_.find(key);
    if (it != routes_.end()) return it->second;
    std::vector<int> path;
    if (u != v) {
        std::vector<std::pair<int, int>> parent(adj_.size(), {-1, -1});  // (link, prev vertex)
        std::vector<bool> seen(adj_.size(), false);
        std::vector<int> frontier{u};
        seen[static_cast<std::size_t>(u)] = true;
        for (std::size_t head = 0; head < frontier.size() && !seen[static_cast<std::size_t>(v)]; ++head) {
            int x = frontier[head];
            for (auto [link, y] : adj_[static_cast<std::size_t>(x)]) {
                if (seen[static_cast<std::size_t>(y)]) continue;
                seen[static_cast<std::size_t>(y)] = true;
                parent[static_cast<std::size_t>(y)] = {link, x};
                frontier.push_back(y);
            }
        }
        if (!seen[static_cast<std::size_t>(v)]) {
            auto name = [&](int x) {
                for (const auto& [k, val] : vertex_of_) {
                    if (val == x) return k;
                }
                return std::string("?");
            };
            throw RoutingError("no route between '" + name(u) + "' and '" + name(v) + "'");
        }
        for (int x = v; x != u; x = parent[static_cast<std::size_t>(x)].second) {
            path.push_back(parent[static_cast<std::size_t>(x)].first);
        }
        std::reverse(path.begin(), path.end());
    }
    return routes_.emplace(key, std::move(path)).first->second;
}

std::vector<int> Topology::tier_path(int tier, int device) const {
    auto it = tiers_.find(tier);
    if (it == tiers_.end()) throw RoutingError("memory tier " + std::to_string(tier) + " has no port");
    std::vector<int> path{it->second.first};
    const auto& rest = route(it->second.second, device);
    path.insert(path.end(), rest.begin(), rest.end());
    return path;
}

double Topology::path_latency(const std::vector<int>& path) const {
    double sum = 0;
    for (int r : path) sum += resource(r).latency;
    return sum;
}

double Topology::path_bandwidth(const std::vector<int>& path) const {
    double bw = kInf;
    for (int r : path) bw = std::min(bw, resource(r).bandwidth);
    return bw;
}

// ---- collectives ----

double collective_time(CollectiveKind kind, double bytes_per_rank, int ranks, double bandwidth, double alpha) {
    if (ranks < 2) return 0;
    const double p = ranks;
    if (kind == CollectiveKind::all_reduce) return 2 * (p - 1) / p * bytes_per_rank / bandwidth + 2 * (p - 1) * alpha;
    return (p - 1) / p * bytes_per_rank / bandwidth + (p - 1) * alpha;
}

// ---- fluid flows ----

std::vector<double> max_min_rates(const std::vector<std::vector<int>>& paths, const std::vector<double>& capacity) {
    const std::size_t n = paths.size();
    std::vector<double> rate(n, kInf);
    std::vector<double> left = capacity;
    std::vector<int> count(capacity.size(), 0);
    std::vector<std::vector<int>> uses(n);
    std::vector<bool> frozen(n, false);
    std::size_t unfrozen = 0;
    for (std::size_t f = 0; f < n; ++f) {
        uses[f] = paths[f];
        std::sort(uses[f].begin(), uses[f].end());
        uses[f].erase(std::unique(uses[f].begin(), uses[f].end()), uses[f].end());
        if (uses[f].empty()) {
            frozen[f] = true;
            continue;
        }
        for (int r : uses[f]) ++count[static_cast<std::size_t>(r)];
        ++unfrozen;
    }
    while (unfrozen > 0) {
        int bottleneck = -1;
        double share = kInf;
        for (std::size_t r = 0; r < left.size(); ++r) {
            if (count[r] == 0) continue;
            double s = std::max(0.0, left[r]) / count[r];
            if (s < share) {
                share = s;
                bottleneck = static_cast<int>(r);
            }
        }
        for (std::size_t f = 0; f < n; ++f) {
            if (frozen[f] || !std::binary_search(uses[f].begin(), uses[f].end(), bottleneck)) continue;
            rate[f] = share;
            frozen[f] = true;
            --unfrozen;
            for (int r : uses[f]) {
                left[static_cast<std::size_t>(r)] -= share;
                --count[static_cast<std::size_t>(r)];
            }
        }
    }
    return rate;
}

void FlowNetwork::advance(double now) {
    const double dt = now - now_;
    if (dt > 0) {
        for (auto& [id, f] : flows_) f.remaining = std::max(0.0, f.remaining - f.rate * dt);
    }
    now_ = std::max(now_, now);
}

void FlowNetwork::recompute() {
    std::vector<std::vector<int>> paths;
    paths.reserve(flows_.size());
    for (const auto& [id, f] : flows_) paths.push_back(f.resources);
    auto rates = max_min_rates(paths, capacity_);
    std::size_t i = 0;
    for (auto& [id, f] : flows_) f.rate = rates[i++];
}

int FlowNetwork::add(std::vector<int> resources, double bytes, double now) {
    for (int r : resources) {
        if (r < 0 || static_cast<std::size_t>(r) >= capacity_.size()) {
            throw std::logic_error("flow network: unknown resource " + std::to_string(r));
        }
    }
    advance(now);
    int id = next_id_++;
    flows_.emplace(id, Flow{std::move(resources), bytes, bytes, 0});
    recompute();
    return id;
}

std::vector<int> FlowNetwork::take_finished(double now) {
    advance(now);
    std::vector<int> done;
    for (auto it = flows_.begin(); it != flows_.end();) {
        const Flow& f = it->second;
        if (f.remaining <= 1e-9 * f.bytes || std::isinf(f.rate) || now_ + f.remaining / f.rate <= now_) {
            done.push_back(it->first);
            it = flows_.erase(it);
        } else {
            ++it;
        }
    }
    if (!done.empty()) recompute();
    return done;
}

double FlowNetwork::next_completion() const {
    double best = kInf;
    for (const auto& [id, f] : flows_) {
        double eta = std::isinf(f.rate) ? now_ : now_ + f.remaining / f.rate;
        best = std::min(best, eta);
    }
    return best;
}

std::vector<double> simulate_flows(const std::vector<double>& capacity, const std::vector<FlowSpec>& flows) {
    std::vector<std::size_t> order(flows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return flows[x].start < flows[y].start; });
    FlowNetwork net(capacity);
    std::map<int, std::size_t> owner;
    std::vector<double> finish(flows.size(), kInf);
    std::size_t next = 0;
    while (next < order.size() || net.active() > 0) {
        double t_start = next < order.size() ? flows[order[next]].start : kInf;
        double t_done = net.next_completion();
        if (t_start <= t_done) {
            const auto& f = flows[order[next]];
            owner[net.add(f.resources, f.bytes, f.start)] = order[next];
            ++next;
            continue;
        }
        for (int id : net.take_finished(t_done)) finish[owner.at(id)] = t_done;
    }
    return finish;
}

// ---- SystemSimulator ----

SystemSimulator::SystemSimulator(const Topology& topology, EventQueue& queue)
    : topo_(topology),
      queue_(queue),
      busy_(topology.device_count(), false),
      network_([&] {
          std::vector<double> caps;
          for (std::size_t r = 0; r < topology.resource_count(); ++r) caps.push_back(topology.resource(static_cast<int>(r)).bandwidth);
          return caps;
      }()) {}

int SystemSimulator::submit(ExecutionGraph graph, double t) {
    if (graph.ops.empty()) throw std::logic_error("submit: empty graph");
    graph.topo_order();  // cycle guard
    int handle = next_handle_++;
    GraphState& gs = graphs_[handle];
    const auto n = graph.ops.size();
    gs.pending.assign(n, 0);
    gs.dependents.assign(n, {});
    gs.ready_at.assign(n, 0);
    gs.started_at.assign(n, 0);
    for (const auto& op : graph.ops) {
        for (int d : op.deps) gs.dependents[static_cast<std::size_t>(d)].push_back(op.id);
        gs.pending[static_cast<std::size_t>(op.id)] = static_cast<int>(op.deps.size());
        for (int dev : op.devices) {
            if (dev < 0 || static_cast<std::size_t>(dev) >= busy_.size()) {
                throw std::logic_error("submit: op " + std::to_string(op.id) + " names unknown device");
            }
        }
    }
    gs.graph = std::move(graph);
    ++in_flight_;
    for (std::size_t i = 0; i < n; ++i) {
        if (gs.pending[i] == 0) make_ready(handle, static_cast<int>(i), t);
    }
    try_start(t);
    return handle;
}

void SystemSimulator::make_ready(int handle, int op, double t) {
    GraphState& gs = graphs_.at(handle);
    gs.ready_at[static_cast<std::size_t>(op)] = t;
    ready_.emplace(t, gs.graph.seq, op, handle);
}

double SystemSimulator::collective_duration(const MappedOp& op) const {
    const int p = static_cast<int>(op.devices.size());
    if (p < 2) return 0;
    double bw = kInf;
    double alpha = 0;
    for (int i = 0; i < p; ++i) {
        const auto& path = topo_.route(op.devices[static_cast<std::size_t>(i)],
                                       op.devices[static_cast<std::size_t>((i + 1) % p)]);
        bw = std::min(bw, topo_.path_bandwidth(path));
        alpha = std::max(alpha, topo_.path_latency(path));
    }
    auto kind = op.kind == OpKind::all_reduce ? CollectiveKind::all_reduce : CollectiveKind::all_to_all;
    return collective_time(kind, static_cast<double>(op.bytes), p, bw, alpha);
}

void SystemSimulator::try_start(double now) {
    for (auto it = ready_.begin(); it != ready_.end();) {
        auto [t, seq, op_id, handle] = *it;
        GraphState& gs = graphs_.at(handle);
        const MappedOp& op = gs.graph.ops[static_cast<std::size_t>(op_id)];
        if (!occupies_devices(op.kind)) {
            it = ready_.erase(it);
            start_flow(handle, op_id, now);
            continue;
        }
        bool free = std::all_of(op.devices.begin(), op.devices.end(),
                                [&](int d) { return !busy_[static_cast<std::size_t>(d)]; });
        if (!free) {
            ++it;
            continue;
        }
        it = ready_.erase(it);
        for (int d : op.devices) busy_[static_cast<std::size_t>(d)] = true;
        gs.started_at[static_cast<std::size_t>(op_id)] = now;
        double dur = (op.kind == OpKind::compute || op.kind == OpKind::pim_compute) ? op.latency
                                                                                    : collective_duration(op);
        if (observer_) observer_->op_started(gs.graph, op, now);
        queue_.push(now + dur, 0, gs.graph.msg, EventType::op_done, handle, op_id);
    }
}

void SystemSimulator::start_flow(int handle, int op_id, double now) {
    GraphState& gs = graphs_.at(handle);
    const MappedOp& op = gs.graph.ops[static_cast<std::size_t>(op_id)];
    gs.started_at[static_cast<std::size_t>(op_id)] = now;
    ActiveFlow f;
    f.handle = handle;
    f.op = op_id;
    f.start = now;
    if (op.kind == OpKind::p2p) {
        f.resources = topo_.route(op.devices.at(0), op.devices.at(1));
    } else {
        f.resources = topo_.tier_path(op.tier, op.devices.at(0));
    }
    double latency = topo_.path_latency(f.resources);
    if (observer_) observer_->op_started(gs.graph, op, now);
    int id = next_pending_++;
    pending_flows_.emplace(id, std::move(f));
    queue_.push(now + latency, 0, gs.graph.msg, EventType::flow_activate, id);
}

void SystemSimulator::activate_flow(int pending_id, double now) {
    auto node = pending_flows_.extract(pending_id);
    ActiveFlow f = std::move(node.mapped());
    const MappedOp& op = graphs_.at(f.handle).graph.ops[static_cast<std::size_t>(f.op)];
    std::vector<int> bw_resources;
    for (int r : f.resources) {
        if (!std::isinf(topo_.resource(r).bandwidth)) bw_resources.push_back(r);
    }
    if (op.bytes == 0 || bw_resources.empty()) {
        if (observer_) observer_->flow_finished(graphs_.at(f.handle).graph, op, f.resources, f.start, now);
        complete(f.handle, f.op, now);
        return;
    }
    int id = network_.add(std::move(bw_resources), static_cast<double>(op.bytes), now);
    flows_.emplace(id, std::move(f));
    reschedule_flows();
}

void SystemSimulator::reschedule_flows() {
    ++flow_version_;
    double next = network_.next_completion();
    if (!std::isinf(next)) queue_.push(next, 0, -1, EventType::flow_done, 0, 0, flow_version_);
}

void SystemSimulator::complete(int handle, int op_id, double now) {
    GraphState& gs = graphs_.at(handle);
    const MappedOp& op = gs.graph.ops[static_cast<std::size_t>(op_id)];
    if (occupies_devices(op.kind)) {
        for (int d : op.devices) busy_[static_cast<std::size_t>(d)] = false;
        if (observer_) observer_->op_finished(gs.graph, op, now);
    }
    if (logging_) {
        log_.push_back({handle, op_id, op.kind, op.devices, gs.ready_at[static_cast<std::size_t>(op_id)],
                        gs.started_at[static_cast<std::size_t>(op_id)], now});
    }
    for (int v : gs.dependents[static_cast<std::size_t>(op_id)]) {
        if (--gs.pending[static_cast<std::size_t>(v)] == 0) make_ready(handle, v, now);
    }
    if (++gs.done == gs.graph.ops.size()) {
        --in_flight_;
        if (observer_) observer_->graph_finished(handle, now);
    }
}

void SystemSimulator::handle(const Event& e) {
    switch (e.type) {
        case EventType::op_done:
            complete(static_cast<int>(e.a), static_cast<int>(e.b), e.time);
            break;
        case EventType::flow_activate:
            activate_flow(static_cast<int>(e.a), e.time);
            break;
        case EventType::flow_done: {
            if (e.version != flow_version_) return;
            auto done = network_.take_finished(e.time);
            for (int id : done) {
                auto node = flows_.extract(id);
                const ActiveFlow& f = node.mapped();
                if (observer_) {
                    const auto& g = graphs_.at(f.handle).graph;
                    observer_->flow_finished(g, g.ops[static_cast<std::size_t>(f.op)], f.resources, f.start, e.time);
                }
                complete(f.handle, f.op, e.time);
            }
            reschedule_flows();
            break;
        }
        default:
            throw std::logic_error("system simulator: foreign event");
    }
    try_start(e.time);
}

}  // namespace servesim
