#include "servesim/power.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace servesim {

std::string_view to_string(Component c) {
    switch (c) {
        case Component::accelerator: return "accelerator";
        case Component::cpu: return "cpu";
        case Component::dram: return "dram";
        case Component::link: return "link";
        case Component::nic: return "nic";
        case Component::storage: return "storage";
        case Component::other: return "other";
    }
    return "?";
}

std::string_view to_string(DeviceState s) {
    switch (s) {
        case DeviceState::idle: return "idle";
        case DeviceState::active: return "active";
        case DeviceState::standby: return "standby";
    }
    return "?";
}

namespace {

std::size_t idx(Component c) { return static_cast<std::size_t>(c); }

double overlap(double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); }

}  // namespace

int EnergyLedger::add_device(PowerDevice d) {
    devices_.push_back(std::move(d));
    device_last_end_.push_back(0);
    device_last_interval_.push_back(static_cast<std::size_t>(-1));
    return static_cast<int>(devices_.size()) - 1;
}

void EnergyLedger::add_constant(Component c, std::string entity, double watts) {
    if (watts < 0) throw std::invalid_argument("constant draw for " + entity + " is negative");
    constants_.push_back({c, std::move(entity), watts});
}

void EnergyLedger::record_state(int device, DeviceState s, double t_start, double t_end, std::optional<double> watts) {
    if (t_end < t_start) throw std::logic_error("record_state: t_end < t_start");
    const auto d = static_cast<std::size_t>(device);
    const PowerDevice& dev = devices_.at(d);
    if (t_start < device_last_end_[d]) {
        throw std::logic_error("record_state: overlapping interval on device " + dev.id);
    }
    const double w = watts.value_or(dev.watts(s));
    if (w < 0) throw std::logic_error("record_state: negative watts on device " + dev.id);
    if (t_end == t_start) return;
    state_energy_[idx(dev.component)] += w * (t_end - t_start);
    std::size_t last = device_last_interval_[d];
    if (last != static_cast<std::size_t>(-1)) {
        StateInterval& prev = intervals_[last];
        if (prev.end == t_start && prev.state == s && prev.watts == w) {
            prev.end = t_end;
            device_last_end_[d] = t_end;
            return;
        }
    }
    intervals_.push_back({device, s, t_start, t_end, w});
    device_last_interval_[d] = intervals_.size() - 1;
    device_last_end_[d] = t_end;
}

void EnergyLedger::record_transfer(Component carrier, std::string entity, std::uint64_t bytes, double energy_per_byte,
                                   double t_start, double t_end) {
    if (energy_per_byte < 0) throw std::invalid_argument("record_transfer: negative energy per byte");
    transfer_energy_[idx(carrier)] += static_cast<double>(bytes) * energy_per_byte;
    transfers_.push_back({carrier, std::move(entity), bytes, energy_per_byte, t_start, std::max(t_start, t_end)});
}

ComponentWatts EnergyLedger::energy_by_component() const {
    ComponentWatts out{};
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = state_energy_[i] + transfer_energy_[i];
    for (const auto& c : constants_) out[idx(c.component)] += c.watts * duration_;
    return out;
}

double EnergyLedger::energy(Component c) const { return energy_by_component()[idx(c)]; }

double EnergyLedger::total() const {
    double sum = 0;
    for (double e : energy_by_component()) sum += e;
    return sum;
}

ComponentWatts EnergyLedger::sample_power(double t, double window) const {
    if (!(window > 0)) throw std::invalid_argument("sample_power: window must be > 0");
    const double lo = t - window;
    ComponentWatts out{};
    for (const auto& iv : intervals_) {
        out[idx(devices_[static_cast<std::size_t>(iv.device)].component)] +=
            iv.watts * overlap(iv.start, iv.end, lo, t) / window;
    }
    for (const auto& tr : transfers_) {
        const double e = static_cast<double>(tr.bytes) * tr.energy_per_byte;
        if (tr.end > tr.start) {
            out[idx(tr.carrier)] += e * overlap(tr.start, tr.end, lo, t) / (tr.end - tr.start) / window;
        } else if (tr.start > lo && tr.start <= t) {
            out[idx(tr.carrier)] += e / window;
        }
    }
    for (const auto& c : constants_) out[idx(c.component)] += c.watts;
    return out;
}

std::vector<ComponentWatts> EnergyLedger::power_series(double bucket) const {
    if (!(bucket > 0)) throw std::invalid_argument("power_series: bucket must be > 0");
    const auto n = static_cast<std::size_t>(std::ceil(duration_ / bucket));
    std::vector<ComponentWatts> energy(n, ComponentWatts{});
    // Spreads `e` joules uniformly over [a, b) into the buckets it touches.
    auto spread = [&](std::size_t comp, double a, double b, double e) {
        if (n == 0) return;
        if (b <= a) {
            auto k = std::min(n - 1, static_cast<std::size_t>(std::max(0.0, a / bucket)));
            energy[k][comp] += e;
            return;
        }
        auto k0 = static_cast<std::size_t>(std::max(0.0, a / bucket));
        for (std::size_t k = std::min(k0, n - 1); k < n; ++k) {
            double lo = static_cast<double>(k) * bucket;
            if (lo >= b) break;
            double hi = lo + bucket;
            if (k == n - 1) hi = std::max(hi, b);
            energy[k][comp] += e * overlap(a, b, lo, hi) / (b - a);
        }
    };
    for (const auto& iv : intervals_) {
        spread(idx(devices_[static_cast<std::size_t>(iv.device)].component), iv.start, iv.end,
               iv.watts * (iv.end - iv.start));
    }
    for (const auto& tr : transfers_) {
        spread(idx(tr.carrier), tr.start, tr.end, static_cast<double>(tr.bytes) * tr.energy_per_byte);
    }
    std::vector<ComponentWatts> out(n, ComponentWatts{});
    for (std::size_t k = 0; k < n; ++k) {
        double lo = static_cast<double>(k) * bucket;
        double width = std::min(bucket, duration_ - lo);
        for (std::size_t c = 0; c < out[k].size(); ++c) out[k][c] = width > 0 ? energy[k][c] / width : 0;
        for (const auto& cd : constants_) out[k][idx(cd.component)] += cd.watts;
    }
    return out;
}

int PowerTracker::add_device(PowerDevice d) {
    int id = ledger_.add_device(std::move(d));
    open_.push_back(Open{});
    return id;
}

void PowerTracker::set_state(int device, DeviceState s, double t, std::optional<double> watts) {
    Open& o = open_.at(static_cast<std::size_t>(device));
    if (t < o.since) throw std::logic_error("power: state change goes back in time");
    if (o.state == s && o.watts == watts) return;
    ledger_.record_state(device, o.state, o.since, t, o.watts);
    o = Open{s, t, watts};
}

void PowerTracker::finish(double t) {
    for (std::size_t d = 0; d < open_.size(); ++d) {
        Open& o = open_[d];
        ledger_.record_state(static_cast<int>(d), o.state, o.since, std::max(t, o.since), o.watts);
        o.since = std::max(t, o.since);
    }
    ledger_.set_duration(t);
}

PowerEfficiency watts_per_token(double total_energy, std::uint64_t total_tokens, double duration) {
    if (total_tokens == 0) throw std::domain_error("watts_per_token: no tokens generated");
    PowerEfficiency e;
    e.mean_watts = duration > 0 ? total_energy / duration : 0;
    e.joules_per_token = total_energy / static_cast<double>(total_tokens);
    return e;
}

}  // namespace servesim
