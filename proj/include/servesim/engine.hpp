#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "servesim/config.hpp"
#include "servesim/memory.hpp"
#include "servesim/metrics.hpp"
#include "servesim/msg.hpp"
#include "servesim/power.hpp"
#include "servesim/profile.hpp"
#include "servesim/sysnet.hpp"
#include "servesim/workload.hpp"

namespace servesim {

/// Runtime failures: deadlock, watchdog, routing of unknown models.
class SimulationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RouterState {
    RouterPolicy policy = RouterPolicy::round_robin;
    std::map<std::string, std::size_t> next;       // round-robin cursor per model
    std::map<std::string, int> sessions;           // session id -> MSG
    std::vector<std::uint64_t> load;               // outstanding in+out tokens per MSG
};

struct RouteDecision {
    int msg = -1;
    int decode = -1;  // PD only
};

/// Picks the serving MSG (and decode peer under PD) for one request.
/// round_robin cycles candidates in id order; least_loaded takes the minimum
/// outstanding tokens, ties to the lowest index; session_affinity pins a
/// session to its first MSG.
RouteDecision route(RouterState& router, const RequestSpec& req, const std::vector<MsgRuntime>& msgs);

struct EngineOptions {
    std::optional<double> until;
    std::uint64_t max_events = 500'000'000;
    bool log_cache_events = false;
    bool log_ops = false;
    bool check_invariants = false;  // memory invariants after every event
    std::function<void(const ExecutionGraph&)> on_graph;
    std::function<void(const Event&)> on_event;
};

class ServingEngine : private SimObserver {
public:
    ServingEngine(const ClusterSpec& cluster, const std::vector<ModelSpec>& models, const ProfileSet& profiles,
                  Trace trace, EngineOptions options = {});
    ServingEngine(const ServingEngine&) = delete;
    ServingEngine& operator=(const ServingEngine&) = delete;

    /// Processes events until every request completes or the clock passes
    /// `until`; throws SimulationError on deadlock or watchdog expiry.
    SimulationReport run();

    const std::vector<MsgRuntime>& msgs() const { return msgs_; }
    const std::vector<Request>& requests() const { return requests_; }
    const MemorySystem& memory() const { return *memory_; }
    const Topology& topology() const { return *topology_; }
    const SystemSimulator& system() const { return *system_; }
    const EnergyLedger& ledger() const { return ledger_; }
    double clock() const { return clock_; }
    /// Memory tier index of each shared (non-device) tier instance, by name.
    const std::map<std::string, int>& tier_instances() const { return tier_by_name_; }

private:
    void plan();
    int tier_instance(TierKind kind, int node) const;
    int resolve_tier_target(const std::string& target, int node, const std::string& ctx) const;

    void on_arrival(int request);
    void request_schedule(int msg);
    void try_schedule(int msg);
    void work_changed(int msg);
    void on_timeout(int msg, std::uint64_t version);
    DeviceState rest_state(int device, double t) const;
    [[noreturn]] void deadlock() const;

    void op_started(const ExecutionGraph& g, const MappedOp& op, double t) override;
    void op_finished(const ExecutionGraph& g, const MappedOp& op, double t) override;
    void flow_finished(const ExecutionGraph& g, const MappedOp& op, const std::vector<int>& resources, double t0,
                       double t1) override;
    void graph_finished(int handle, double t) override;

    ClusterSpec cluster_;
    std::vector<ModelSpec> models_;
    ProfileSet profiles_;
    Trace trace_;
    EngineOptions options_;

    std::unique_ptr<Topology> topology_;
    EventQueue queue_;
    std::unique_ptr<SystemSimulator> system_;
    std::unique_ptr<MemorySystem> memory_;
    EnergyLedger ledger_;
    PowerTracker tracker_{ledger_};

    std::vector<MsgRuntime> msgs_;
    std::vector<Request> requests_;
    RouterState router_;
    std::map<std::pair<int, int>, int> tier_of_;  // (tier spec index, node or -1) -> memory tier
    std::map<std::string, int> tier_by_name_;
    std::vector<std::vector<int>> device_owners_;  // topology device -> MSG indices
    std::vector<std::optional<double>> idle_since_;
    std::vector<bool> schedule_pending_;
    std::map<int, int> graph_owner_;  // system handle -> MSG

    double clock_ = 0;
    std::size_t completed_ = 0;
    double last_completion_ = 0;
    std::uint64_t graphs_ = 0;
    std::vector<TokenEvent> token_events_;
    std::vector<PrefixEvent> prefix_events_;
};

}  // namespace servesim
