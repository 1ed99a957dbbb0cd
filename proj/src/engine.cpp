#include "servesim/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace servesim {

namespace {

std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t request_tokens(const RequestSpec& r) {
    return static_cast<std::uint64_t>(r.input_len) + static_cast<std::uint64_t>(r.output_len);
}

int argmin_load(const std::vector<int>& candidates, const RouterState& router) {
    int best = -1;
    for (int c : candidates) {
        if (best < 0 || router.load[static_cast<std::size_t>(c)] < router.load[static_cast<std::size_t>(best)]) {
            best = c;
        }
    }
    return best;
}

constexpr int kPrioArrival = 1;
constexpr int kPrioSchedule = 2;
constexpr int kPrioTimeout = 3;

}  // namespace

RouteDecision route(RouterState& router, const RequestSpec& req, const std::vector<MsgRuntime>& msgs) {
    if (router.load.size() < msgs.size()) router.load.resize(msgs.size(), 0);
    std::vector<int> candidates;
    for (const auto& m : msgs) {
        if (m.spec.model == req.model && m.spec.role != MsgRole::decode) candidates.push_back(m.index);
    }
    if (candidates.empty()) {
        throw SimulationError("request " + req.id + ": no serving group serves model '" + req.model + "'");
    }
    RouteDecision d;
    auto round_robin = [&] {
        auto& cursor = router.next[req.model];
        int pick = candidates[cursor % candidates.size()];
        ++cursor;
        return pick;
    };
    switch (router.policy) {
        case RouterPolicy::round_robin: d.msg = round_robin(); break;
        case RouterPolicy::least_loaded: d.msg = argmin_load(candidates, router); break;
        case RouterPolicy::session_affinity:
            if (req.session) {
                auto it = router.sessions.find(*req.session);
                if (it != router.sessions.end()) {
                    d.msg = it->second;
                } else {
                    d.msg = round_robin();
                    router.sessions.emplace(*req.session, d.msg);
                }
            } else {
                d.msg = round_robin();
            }
            break;
    }
    const MsgRuntime& chosen = msgs[static_cast<std::size_t>(d.msg)];
    if (chosen.spec.role == MsgRole::prefill) d.decode = argmin_load(chosen.decode_peers, router);
    return d;
}

// ---- planning ----

ServingEngine::ServingEngine(const ClusterSpec& cluster, const std::vector<ModelSpec>& models,
                             const ProfileSet& profiles, Trace trace, EngineOptions options)
    : cluster_(cluster),
      models_(models),
      profiles_(profiles),
      trace_(std::move(trace)),
      options_(std::move(options)) {
    trace_.check();
    plan();
}

int ServingEngine::tier_instance(TierKind kind, int node) const {
    for (std::size_t i = 0; i < cluster_.tiers.size(); ++i) {
        if (cluster_.tiers[i].tier != kind) continue;
        const int key = cluster_.tiers[i].scope == TierScope::global ? -1 : node;
        auto it = tier_of_.find({static_cast<int>(i), key});
        if (it != tier_of_.end()) return it->second;
    }
    return -1;
}

int ServingEngine::resolve_tier_target(const std::string& target, int node, const std::string& ctx) const {
    for (std::size_t i = 0; i < cluster_.tiers.size(); ++i) {
        const auto& t = cluster_.tiers[i];
        if (t.tier != TierKind::device && to_string(t.tier) == target) return tier_instance(t.tier, node);
    }
    throw ConfigError(ctx + ": offload target '" + target + "' is neither a device nor a shared tier");
}

void ServingEngine::plan() {
    if (cluster_.msgs.empty()) throw ConfigError("no serving groups");
    std::stable_sort(cluster_.msgs.begin(), cluster_.msgs.end(),
                     [](const MsgSpec& a, const MsgSpec& b) { return a.id < b.id; });

    topology_ = std::make_unique<Topology>(cluster_);
    memory_ = std::make_unique<MemorySystem>();
    memory_->set_event_logging(options_.log_cache_events);

    // Shared tier instances.
    for (std::size_t i = 0; i < cluster_.tiers.size(); ++i) {
        const auto& t = cluster_.tiers[i];
        if (t.tier == TierKind::device) continue;
        auto add = [&](std::string name, int vertex, int key) {
            int idx = memory_->add_tier(name, t.tier, t.capacity, t.bandwidth, t.block_size_tokens, t.energy_per_byte);
            topology_->add_tier(idx, name, t.bandwidth, t.energy_per_byte, vertex);
            tier_of_[{static_cast<int>(i), key}] = idx;
            tier_by_name_[name] = idx;
        };
        if (t.scope == TierScope::global) {
            add(std::string(to_string(t.tier)), topology_->vertex(t.endpoint), -1);
        } else {
            for (std::size_t n = 0; n < cluster_.nodes.size(); ++n) {
                add(std::string(to_string(t.tier)) + "@" + cluster_.nodes[n].id,
                    topology_->node_vertex(static_cast<int>(n)), static_cast<int>(n));
            }
        }
    }

    // The flow network sizes itself from the topology, so tier ports come first.
    system_ = std::make_unique<SystemSimulator>(*topology_, queue_);
    system_->set_observer(this);
    system_->set_logging(options_.log_ops);

    const MemoryTierSpec* device_tier = cluster_.find_tier(TierKind::device);
    const int device_block = device_tier ? device_tier->block_size_tokens : 16;
    const double device_epb = device_tier ? device_tier->energy_per_byte : 0;

    std::map<std::pair<int, std::string>, int> shared_cache;  // (memory tier, model) -> cache
    device_owners_.assign(topology_->device_count(), {});

    for (std::size_t mi = 0; mi < cluster_.msgs.size(); ++mi) {
        const MsgSpec& spec = cluster_.msgs[mi];
        const std::string ctx = "msgs (" + spec.id + ")";
        auto model_it = std::find_if(models_.begin(), models_.end(), [&](const ModelSpec& m) { return m.name == spec.model; });
        if (model_it == models_.end()) throw ConfigError(ctx + ": model '" + spec.model + "' is not defined");

        MsgRuntime m;
        m.index = static_cast<int>(mi);
        m.spec = spec;
        m.model = *model_it;
        m.kv_bytes_per_token = kv_bytes_per_token(m.model);
        m.seed = mix(trace_.seed ^ mix(mi + 1));
        m.topology = topology_.get();
        m.profiles = &profiles_;
        if (spec.device_pool.size() != static_cast<std::size_t>(spec.tp_degree * spec.pp_degree)) {
            throw ConfigError(ctx + ": device_pool size must equal tp_degree x pp_degree");
        }
        for (const auto& id : spec.device_pool) m.compute_devices.push_back(topology_->device_index(id));
        m.all_devices = m.compute_devices;
        const int node = topology_->node_of(m.compute_devices.front());

        std::optional<OffloadRule> kv_rule;
        for (const auto& rule : spec.offload_rules) {
            const bool on_device = cluster_.find_device(rule.target) != nullptr;
            const int dev = on_device ? topology_->device_index(rule.target) : -1;
            const int tier = on_device ? -1 : resolve_tier_target(rule.target, node, ctx);
            if (dev >= 0 && std::find(m.all_devices.begin(), m.all_devices.end(), dev) == m.all_devices.end()) {
                m.all_devices.push_back(dev);
            }
            switch (rule.op_class) {
                case OffloadClass::attention:
                    if (dev < 0) throw ConfigError(ctx + ": attention offload needs a device target");
                    m.attention_rule = rule;
                    m.pim_device = dev;
                    break;
                case OffloadClass::expert_ffn:
                    if (!m.model.moe) throw ConfigError(ctx + ": expert_ffn offload on a dense model");
                    m.expert_rule = rule;
                    m.expert_device = dev;
                    m.expert_tier = tier;
                    break;
                case OffloadClass::kv_cache:
                    kv_rule = rule;
                    m.kv_device = dev;
                    m.kv_tier = tier;
                    break;
                case OffloadClass::weights:
                    m.weights_rule = rule;
                    m.weights_device = dev;
                    m.weights_tier = tier;
                    break;
            }
        }

        // KV pool placement.
        if (m.kv_tier >= 0) {
            m.pool_tier = m.kv_tier;
        } else {
            int pool_device = m.kv_device;
            if (pool_device < 0 && m.pim_device >= 0) pool_device = m.kv_device = m.pim_device;
            std::uint64_t capacity = 0;
            double bandwidth = 0;
            if (pool_device >= 0) {
                const DeviceSpec& d = topology_->device(pool_device);
                capacity = d.mem_capacity;
                bandwidth = d.mem_bandwidth * d.pim_channels.value_or(1);
            } else {
                std::uint64_t total = 0;
                for (int d : m.compute_devices) {
                    total += topology_->device(d).mem_capacity;
                    bandwidth += topology_->device(d).mem_bandwidth;
                }
                std::uint64_t resident = m.model.weight_bytes;
                const auto L = static_cast<std::uint64_t>(m.model.num_layers);
                if (m.weights_rule) resident -= std::min(resident, L * layer_weight_bytes(m.model));
                if (m.expert_rule) {
                    const auto n = m.expert_rule->experts.empty() ? static_cast<std::uint64_t>(m.model.moe->num_experts)
                                                                   : m.expert_rule->experts.size();
                    resident -= std::min(resident, n * L * expert_weight_bytes(m.model));
                }
                if (resident >= total) {
                    throw ConfigError(ctx + ": weights (" + std::to_string(resident) +
                                      " bytes) leave no room for KV in the device pool (" + std::to_string(total) +
                                      " bytes)");
                }
                capacity = total - resident;
            }
            m.pool_tier = memory_->add_tier(spec.id + "/device", TierKind::device, capacity, bandwidth, device_block,
                                            device_epb);
        }

        // Prefix caches in lookup order.
        for (TierKind kind : spec.prefix_cache_tiers) {
            if (kind == TierKind::device) {
                if (m.device_cache < 0) {
                    m.device_cache = memory_->add_cache(spec.id + "/device", m.pool_tier, TierScope::per_device,
                                                        m.kv_bytes_per_token);
                }
                continue;
            }
            int tier = tier_instance(kind, node);
            if (tier < 0) throw ConfigError(ctx + ": prefix cache tier '" + std::string(to_string(kind)) + "' is not configured");
            auto key = std::make_pair(tier, m.model.name);
            auto it = shared_cache.find(key);
            if (it == shared_cache.end()) {
                TierScope scope = TierScope::per_node;
                for (const auto& t : cluster_.tiers) {
                    if (t.tier == kind) scope = t.scope;
                }
                int c = memory_->add_cache(memory_->tier(tier).name() + "/" + m.model.name, tier, scope,
                                           m.kv_bytes_per_token);
                it = shared_cache.emplace(key, c).first;
            }
            if (std::find(m.shared_caches.begin(), m.shared_caches.end(), it->second) == m.shared_caches.end()) {
                m.shared_caches.push_back(it->second);
            }
        }
        std::vector<int> chain;
        if (m.device_cache >= 0) chain.push_back(m.device_cache);
        chain.insert(chain.end(), m.shared_caches.begin(), m.shared_caches.end());
        for (std::size_t i = 0; i + 1 < chain.size(); ++i) {
            auto& c = memory_->cache(chain[i]);
            if (c.demote_to < 0) c.demote_to = chain[i + 1];
        }

        for (int d : m.all_devices) device_owners_[static_cast<std::size_t>(d)].push_back(m.index);
        msgs_.push_back(std::move(m));
    }

    // PD wiring.
    for (auto& m : msgs_) {
        for (const auto& peer : m.spec.pd_peers) {
            auto it = std::find_if(msgs_.begin(), msgs_.end(), [&](const MsgRuntime& x) { return x.spec.id == peer; });
            if (it == msgs_.end()) throw ConfigError("msgs (" + m.spec.id + "): unknown pd peer '" + peer + "'");
            m.decode_peers.push_back(it->index);
            m.peer_devices[it->index] = it->compute_devices;
            m.peer_pp[it->index] = it->pp();
            m.peer_tp[it->index] = it->tp();
        }
        std::sort(m.decode_peers.begin(), m.decode_peers.end());
    }

    // Power.
    for (std::size_t d = 0; d < topology_->device_count(); ++d) {
        const DeviceSpec& spec = topology_->device(static_cast<int>(d));
        PowerDevice p;
        p.id = spec.id;
        p.component = is_compute_kind(spec.kind) ? Component::accelerator : Component::dram;
        p.idle_w = spec.idle_w;
        p.standby_w = spec.standby_w;
        p.active_w = spec.active_w;
        tracker_.add_device(std::move(p));
    }
    for (const auto& n : cluster_.nodes) {
        if (n.cpu_w > 0) ledger_.add_constant(Component::cpu, n.id + "/cpu", n.cpu_w);
        if (n.nic_w > 0) ledger_.add_constant(Component::nic, n.id + "/nic", n.nic_w);
        if (n.storage_w > 0) ledger_.add_constant(Component::storage, n.id + "/storage", n.storage_w);
        if (n.other_w > 0) ledger_.add_constant(Component::other, n.id + "/other", n.other_w);
    }

    router_.policy = cluster_.router_policy;
    router_.load.assign(msgs_.size(), 0);
    idle_since_.assign(msgs_.size(), -std::numeric_limits<double>::infinity());
    schedule_pending_.assign(msgs_.size(), false);

    requests_.reserve(trace_.requests.size());
    for (std::size_t i = 0; i < trace_.requests.size(); ++i) {
        Request r;
        r.spec = trace_.requests[i];
        r.index = static_cast<int>(i);
        requests_.push_back(std::move(r));
    }
}

// ---- runtime ----

void ServingEngine::request_schedule(int m) {
    if (schedule_pending_[static_cast<std::size_t>(m)]) return;
    schedule_pending_[static_cast<std::size_t>(m)] = true;
    queue_.push(clock_, kPrioSchedule, m, EventType::schedule, m);
}

void ServingEngine::on_arrival(int i) {
    Request& r = requests_[static_cast<std::size_t>(i)];
    RouteDecision d = route(router_, r.spec, msgs_);
    r.msg = d.msg;
    r.decode_msg = d.decode;
    router_.load[static_cast<std::size_t>(d.msg)] += request_tokens(r.spec);
    if (d.decode >= 0) router_.load[static_cast<std::size_t>(d.decode)] += request_tokens(r.spec);
    msgs_[static_cast<std::size_t>(d.msg)].queue.push_back(i);
    work_changed(d.msg);
    request_schedule(d.msg);
}

void ServingEngine::try_schedule(int mi) {
    schedule_pending_[static_cast<std::size_t>(mi)] = false;
    MsgRuntime& m = msgs_[static_cast<std::size_t>(mi)];
    if (m.busy) return;
    auto batch = schedule_batch(m, requests_, *memory_, clock_);
    if (!batch) return;
    for (int i : batch->prefill) {
        const Request& r = requests_[static_cast<std::size_t>(i)];
        if (r.spec.prefix_tokens.empty()) continue;
        const int eligible = std::min(static_cast<int>(r.spec.prefix_tokens.size()), r.spec.input_len - 1);
        prefix_events_.push_back({clock_, mi, r.prefix_hit_tokens, eligible});
    }
    m.batch = std::move(*batch);
    ++m.graph_seq;
    ExecutionGraph g = build_graph(m, m.batch, map_ops(m, m.batch, requests_), requests_);
    if (options_.on_graph) options_.on_graph(g);
    m.busy = true;
    ++graphs_;
    const int h = system_->submit(std::move(g), clock_);
    m.graph_handle = h;
    graph_owner_[h] = mi;
}

void ServingEngine::work_changed(int mi) {
    MsgRuntime& m = msgs_[static_cast<std::size_t>(mi)];
    auto& since = idle_since_[static_cast<std::size_t>(mi)];
    if (m.has_work()) {
        if (!since) return;
        since.reset();
        for (int d : m.all_devices) {
            if (tracker_.state(d) == DeviceState::idle) tracker_.set_state(d, DeviceState::standby, clock_);
        }
    } else if (!since) {
        since = clock_;
        ++m.idle_version;
        queue_.push(clock_ + cluster_.standby_timeout, kPrioTimeout, mi, EventType::timeout, mi, 0, m.idle_version);
    }
}

DeviceState ServingEngine::rest_state(int device, double t) const {
    for (int o : device_owners_[static_cast<std::size_t>(device)]) {
        if (msgs_[static_cast<std::size_t>(o)].has_work()) return DeviceState::standby;
        const auto& since = idle_since_[static_cast<std::size_t>(o)];
        if (since && *since + cluster_.standby_timeout > t) return DeviceState::standby;
    }
    return DeviceState::idle;
}

void ServingEngine::on_timeout(int mi, std::uint64_t version) {
    const MsgRuntime& m = msgs_[static_cast<std::size_t>(mi)];
    if (version != m.idle_version || m.has_work()) return;
    for (int d : m.all_devices) {
        if (tracker_.state(d) != DeviceState::active && rest_state(d, clock_) == DeviceState::idle) {
            tracker_.set_state(d, DeviceState::idle, clock_);
        }
    }
}

void ServingEngine::op_started(const ExecutionGraph&, const MappedOp& op, double t) {
    if (!occupies_devices(op.kind)) return;
    std::optional<double> watts;
    if (op.energy && op.latency > 0) watts = *op.energy / op.latency;
    for (int d : op.devices) tracker_.set_state(d, DeviceState::active, t, watts);
}

void ServingEngine::op_finished(const ExecutionGraph&, const MappedOp& op, double t) {
    if (!occupies_devices(op.kind)) return;
    for (int d : op.devices) tracker_.set_state(d, rest_state(d, t), t);
    if (op.kind != OpKind::all_reduce && op.kind != OpKind::all_to_all) return;
    // Ring traffic: each rank forwards factor x B bytes to its successor.
    const auto p = op.devices.size();
    if (p < 2) return;
    const double factor = (op.kind == OpKind::all_reduce ? 2.0 : 1.0) * static_cast<double>(p - 1) / static_cast<double>(p);
    const auto bytes = static_cast<std::uint64_t>(factor * static_cast<double>(op.bytes));
    const double t0 = t - system_->collective_duration(op);
    for (std::size_t i = 0; i < p; ++i) {
        for (int r : topology_->route(op.devices[i], op.devices[(i + 1) % p])) {
            const Resource& res = topology_->resource(r);
            if (res.energy_per_byte > 0) ledger_.record_transfer(Component::link, res.name, bytes, res.energy_per_byte, t0, t);
        }
    }
}

void ServingEngine::flow_finished(const ExecutionGraph&, const MappedOp& op, const std::vector<int>& resources,
                                  double t0, double t1) {
    for (int r : resources) {
        const Resource& res = topology_->resource(r);
        if (!(res.energy_per_byte > 0)) continue;
        Component carrier = Component::link;
        if (res.is_tier) {
            carrier = Component::dram;
            auto it = tier_by_name_.find(res.name);
            if (it != tier_by_name_.end() && memory_->tier(it->second).kind() == TierKind::storage) {
                carrier = Component::storage;
            }
        }
        ledger_.record_transfer(carrier, res.name, op.bytes, res.energy_per_byte, t0, t1);
    }
}

void ServingEngine::graph_finished(int handle, double t) {
    const int mi = graph_owner_.at(handle);
    graph_owner_.erase(handle);
    system_->release(handle);
    MsgRuntime& m = msgs_[static_cast<std::size_t>(mi)];
    GraphOutcome out = on_graph_complete(m, requests_, *memory_, t);
    token_events_.push_back({t, mi, out.tokens});
    for (int i : out.completed) {
        const Request& r = requests_[static_cast<std::size_t>(i)];
        auto& load = router_.load[static_cast<std::size_t>(mi)];
        load -= std::min(load, request_tokens(r.spec));
        ++completed_;
        last_completion_ = t;
    }
    for (int i : out.handed_off) {
        const Request& r = requests_[static_cast<std::size_t>(i)];
        auto& load = router_.load[static_cast<std::size_t>(mi)];
        load -= std::min(load, request_tokens(r.spec));
        msgs_[static_cast<std::size_t>(r.decode_msg)].incoming.push_back(i);
        work_changed(r.decode_msg);
        request_schedule(r.decode_msg);
    }
    work_changed(mi);
    request_schedule(mi);
}

void ServingEngine::deadlock() const {
    std::string msg = "deadlock at t=" + format_number(clock_) + ": ";
    std::vector<const Request*> stuck;
    for (const auto& r : requests_) {
        if (r.state != RequestState::complete) stuck.push_back(&r);
    }
    msg += std::to_string(stuck.size()) + " request(s) cannot progress:";
    for (std::size_t k = 0; k < stuck.size() && k < 8; ++k) {
        const Request& r = *stuck[k];
        msg += " " + r.spec.id + " (" + std::string(to_string(r.state));
        if (r.msg >= 0) {
            const MsgRuntime& m = msgs_[static_cast<std::size_t>(r.msg)];
            msg += " on " + m.spec.id;
            int host = r.state == RequestState::kv_transfer && r.decode_msg >= 0 ? r.decode_msg : r.msg;
            const MsgRuntime& h = msgs_[static_cast<std::size_t>(host)];
            const std::uint64_t need = request_tokens(r.spec) * h.kv_bytes_per_token;
            const std::uint64_t cap = memory_->tier(h.pool_tier).capacity();
            if (need > cap) {
                msg += ", needs " + std::to_string(need) + " KV bytes but pool " + memory_->tier(h.pool_tier).name() +
                       " holds " + std::to_string(cap) + ": can never fit";
            }
        }
        msg += ")";
    }
    if (stuck.size() > 8) msg += " ...";
    throw SimulationError(msg);
}

SimulationReport ServingEngine::run() {
    for (std::size_t i = 0; i < requests_.size(); ++i) {
        queue_.push(requests_[i].spec.arrival, kPrioArrival, -1, EventType::arrival, static_cast<std::int64_t>(i));
    }
    bool truncated = false;
    while (completed_ < requests_.size() && !queue_.empty()) {
        if (options_.until && queue_.next_time() > *options_.until) {
            truncated = true;
            break;
        }
        Event e = queue_.pop();
        if (queue_.popped() > options_.max_events) {
            throw SimulationError("watchdog: more than " + std::to_string(options_.max_events) +
                                  " events processed at t=" + format_number(e.time));
        }
        clock_ = e.time;
        memory_->set_clock(clock_);
        if (options_.on_event) options_.on_event(e);
        if (system_->owns(e.type)) {
            system_->handle(e);
        } else {
            switch (e.type) {
                case EventType::arrival: on_arrival(static_cast<int>(e.a)); break;
                case EventType::schedule: try_schedule(static_cast<int>(e.a)); break;
                case EventType::timeout: on_timeout(static_cast<int>(e.a), e.version); break;
                default: throw std::logic_error("engine: unexpected event type");
            }
        }
        if (options_.check_invariants) memory_->check_invariants();
    }
    if (completed_ < requests_.size() && !truncated) deadlock();
    double end = requests_.empty() ? 0 : last_completion_;
    if (truncated || completed_ < requests_.size()) end = std::max(clock_, options_.until.value_or(clock_));
    tracker_.finish(end);

    SimulationReport rep;
    for (const auto& r : requests_) {
        RequestMetrics x;
        x.id = r.spec.id;
        x.model = r.spec.model;
        if (r.msg >= 0) x.msg = msgs_[static_cast<std::size_t>(r.msg)].spec.id;
        x.arrival = r.spec.arrival;
        x.input_len = r.spec.input_len;
        x.output_len = r.spec.output_len;
        x.prefix_hit_tokens = r.prefix_hit_tokens;
        x.sched_time = r.sched_time;
        x.first_token_time = r.first_token_time;
        x.done_time = r.done_time;
        x.kv_peak_bytes = r.kv_peak_bytes;
        rep.requests.push_back(std::move(x));
    }
    for (const auto& m : msgs_) rep.msg_ids.push_back(m.spec.id);
    for (std::size_t t = 0; t < memory_->tier_count(); ++t) rep.tier_names.push_back(memory_->tier(static_cast<int>(t)).name());
    rep.tokens = token_events_;
    rep.prefix = prefix_events_;
    rep.usage = memory_->usage_log();
    rep.energy = ledger_;
    rep.end_time = end;
    rep.truncated = completed_ < requests_.size();
    rep.events = queue_.popped();
    rep.graphs = graphs_;
    return rep;
}

}  // namespace servesim
