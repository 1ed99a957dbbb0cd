#pragma once

#include <optional>
#include <string>
#include <vector>

#include "servesim/config.hpp"
#include "servesim/engine.hpp"
#include "servesim/profile.hpp"
#include "servesim/validate.hpp"
#include "servesim/workload.hpp"

namespace servesim {

/// One simulation's input files. Relative paths in a scenario file resolve
/// against the scenario's directory.
struct Scenario {
    std::string name;
    std::string cluster;
    std::string workload;
    std::vector<std::string> profiles;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<double> until;
};

Scenario load_scenario(const std::string& path);

struct Inputs {
    ClusterSpec cluster;
    WorkloadSpec workload;
    ProfileSet profiles;
    Trace trace;
};

/// Loads and parses everything; ConfigError on any bad or missing file.
Inputs load_inputs(const std::string& cluster, const std::string& workload, const std::vector<std::string>& profiles,
                   std::optional<std::uint64_t> seed = std::nullopt);
Inputs load_inputs(const Scenario& s);

SimulationReport simulate(const Inputs& in, EngineOptions options = {});

}  // namespace servesim
