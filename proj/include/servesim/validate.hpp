#pragma once

#include <string>
#include <vector>

#include "servesim/config.hpp"
#include "servesim/profile.hpp"

namespace servesim {

struct ValidationReport {
    std::vector<std::string> errors;
    std::vector<std::string> warnings;

    bool ok(bool strict = false) const { return errors.empty() && (!strict || warnings.empty()); }
    std::string text() const;
};

/// Per-MSG coverage and capacity checks: every (model, device profile, op
/// class) the mapping can emit must have a table entry, resident weights
/// must fit each device given tp x pp, and tiers and peers must be routable.
ValidationReport validate(const ClusterSpec& cluster, const std::vector<ModelSpec>& models,
                          const ProfileSet& profiles);

}  // namespace servesim
