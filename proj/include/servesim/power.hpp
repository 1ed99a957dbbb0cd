#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace servesim {

enum class Component { accelerator, cpu, dram, link, nic, storage, other };
inline constexpr int kNumComponents = 7;
inline constexpr std::array<Component, kNumComponents> kComponents{
    Component::accelerator, Component::cpu,     Component::dram, Component::link,
    Component::nic,         Component::storage, Component::other};
std::string_view to_string(Component c);

enum class DeviceState { idle, active, standby };
std::string_view to_string(DeviceState s);

using ComponentWatts = std::array<double, kNumComponents>;

struct PowerDevice {
    std::string id;
    Component component = Component::accelerator;
    double idle_w = 0;
    double standby_w = 0;
    double active_w = 0;

    double watts(DeviceState s) const {
        return s == DeviceState::idle ? idle_w : s == DeviceState::standby ? standby_w : active_w;
    }
};

struct StateInterval {
    int device = -1;
    DeviceState state = DeviceState::idle;
    double start = 0;
    double end = 0;
    double watts = 0;
};

struct TransferRecord {
    Component carrier = Component::link;
    std::string entity;
    std::uint64_t bytes = 0;
    double energy_per_byte = 0;
    double start = 0;
    double end = 0;
};

struct ConstantDraw {
    Component component = Component::other;
    std::string entity;
    double watts = 0;
};

/// Time-integrated energy across the seven component classes.
///
/// total = sum(interval watts x duration) + sum(bytes x energy_per_byte)
///       + sum(constant watts) x duration
class EnergyLedger {
public:
    int add_device(PowerDevice d);
    void add_constant(Component c, std::string entity, double watts);

    /// Adds state watts x (t_end - t_start). `watts` overrides the state's
    /// rating (used when a profile supplies op energy). Intervals of one
    /// device must not overlap; contiguous equal-power intervals merge.
    void record_state(int device, DeviceState s, double t_start, double t_end, std::optional<double> watts = {});
    void record_transfer(Component carrier, std::string entity, std::uint64_t bytes, double energy_per_byte,
                         double t_start = 0, double t_end = 0);
    /// Span over which constant draws are integrated.
    void set_duration(double seconds) { duration_ = seconds; }
    double duration() const { return duration_; }

    double energy(Component c) const;
    double total() const;
    ComponentWatts energy_by_component() const;

    /// Average watts per component over [t - window, t].
    ComponentWatts sample_power(double t, double window) const;
    /// Average watts per component in consecutive buckets [k w, (k+1) w)
    /// covering [0, duration).
    std::vector<ComponentWatts> power_series(double bucket) const;

    const std::vector<PowerDevice>& devices() const { return devices_; }
    const std::vector<StateInterval>& intervals() const { return intervals_; }
    const std::vector<TransferRecord>& transfers() const { return transfers_; }
    const std::vector<ConstantDraw>& constants() const { return constants_; }

private:
    std::vector<PowerDevice> devices_;
    std::vector<double> device_last_end_;
    std::vector<std::size_t> device_last_interval_;
    std::vector<StateInterval> intervals_;
    std::vector<TransferRecord> transfers_;
    std::vector<ConstantDraw> constants_;
    ComponentWatts state_energy_{};
    ComponentWatts transfer_energy_{};
    double duration_ = 0;
};

/// Three-state policy driver: each device holds one open state from its last
/// transition; set_state closes it into the ledger.
class PowerTracker {
public:
    explicit PowerTracker(EnergyLedger& ledger) : ledger_(ledger) {}

    /// Registers the device in the ledger, starting Idle at t = 0.
    int add_device(PowerDevice d);
    void set_state(int device, DeviceState s, double t, std::optional<double> watts = {});
    DeviceState state(int device) const { return open_.at(static_cast<std::size_t>(device)).state; }
    /// Closes every open interval at t and sets the ledger duration.
    void finish(double t);

private:
    struct Open {
        DeviceState state = DeviceState::idle;
        double since = 0;
        std::optional<double> watts;
    };
    EnergyLedger& ledger_;
    std::vector<Open> open_;
};

struct PowerEfficiency {
    double mean_watts = 0;
    double joules_per_token = 0;
};

/// Throws std::domain_error when total_tokens is zero.
PowerEfficiency watts_per_token(double total_energy, std::uint64_t total_tokens, double duration);

}  // namespace servesim
