#include "servesim/runner.hpp"

#include <algorithm>
#include <filesystem>

namespace servesim {

namespace fs = std::filesystem;

Scenario load_scenario(const std::string& path) {
    const json j = read_json_file(path);
    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).lexically_normal().string(); };
    static const char* const known[] = {"name", "cluster", "workload", "profiles", "out", "seed", "until"};
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        if (std::find(std::begin(known), std::end(known), k) == std::end(known)) {
            throw ConfigError(path + ": unknown field '" + k + "'");
        }
    }
    Scenario s;
    try {
        s.name = j.value("name", fs::path(path).stem().string());
        s.cluster = resolve(j.at("cluster").get<std::string>());
        s.workload = resolve(j.at("workload").get<std::string>());
        for (const auto& p : j.at("profiles")) s.profiles.push_back(resolve(p.get<std::string>()));
        s.out = j.contains("out") ? resolve(j["out"].get<std::string>()) : (fs::path("out") / s.name).string();
        if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("until")) s.until = j["until"].get<double>();
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return s;
}

Inputs load_inputs(const std::string& cluster, const std::string& workload, const std::vector<std::string>& profiles,
                   std::optional<std::uint64_t> seed) {
    Inputs in;
    in.cluster = load_cluster_config(cluster);
    in.workload = load_workload_config(workload);
    for (const auto& p : profiles) in.profiles.add(load_profile(p));
    in.trace = make_trace(in.workload, seed);
    return in;
}

Inputs load_inputs(const Scenario& s) { return load_inputs(s.cluster, s.workload, s.profiles, s.seed); }

SimulationReport simulate(const Inputs& in, EngineOptions options) {
    ServingEngine engine(in.cluster, in.workload.models, in.profiles, in.trace, std::move(options));
    return engine.run();
}

}  // namespace servesim
