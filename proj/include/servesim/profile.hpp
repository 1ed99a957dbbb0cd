#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "servesim/config.hpp"

namespace servesim {

enum class OpClass {
    qkv_proj,
    attention_prefill,
    attention_decode,
    out_proj,
    ffn_up,
    ffn_down,
    expert_ffn,
    router_gate,
    embed,
    lm_head,
    norm,
    pim_attention,
};
inline constexpr int kNumOpClasses = 12;

std::string_view to_string(OpClass op);
std::optional<OpClass> op_class_from_string(std::string_view s);

/// Query key. For attention ops `seq` is the prefill length or decode context;
/// for token-wise ops batch x seq is the number of tokens processed.
struct OperatorKey {
    OpClass op = OpClass::qkv_proj;
    std::int64_t batch = 1;
    std::int64_t seq = 1;

    bool operator==(const OperatorKey&) const = default;
};

struct OperatorRecord {
    double latency = 0;             // seconds
    std::optional<double> energy;   // joules; absent means active_w x latency

    bool operator==(const OperatorRecord&) const = default;
};

class MissingProfileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operator latency/energy samples for one (model, device-kind) pair.
///
/// Each op class holds a full rectangular grid over (batch, seq). Lookups
/// between grid points interpolate bilinearly; below the grid they clamp to
/// the first row/column, above it they extrapolate linearly from the last
/// segment of that axis.
class ProfileTable {
public:
    struct Sample {
        OpClass op;
        std::int64_t batch;
        std::int64_t seq;
        OperatorRecord record;
    };

    ProfileTable() = default;
    /// Throws ConfigError when an op class grid is not a complete rectangle
    /// or a sample violates latency > 0 / energy >= 0.
    ProfileTable(std::string device_kind, std::string model, const std::vector<Sample>& samples);

    const std::string& device_kind() const { return device_kind_; }
    const std::string& model() const { return model_; }
    bool has(OpClass op) const { return grids_[static_cast<int>(op)].has_value(); }

    OperatorRecord lookup(const OperatorKey& key) const;

    std::vector<Sample> samples() const;
    std::size_t size() const;

private:
    struct Grid {
        std::vector<std::int64_t> batches;
        std::vector<std::int64_t> seqs;
        std::vector<OperatorRecord> cells;  // row-major over batches x seqs
        bool has_energy = true;

        const OperatorRecord& at(std::size_t b, std::size_t s) const { return cells[b * seqs.size() + s]; }
    };

    std::string device_kind_;
    std::string model_;
    std::array<std::optional<Grid>, kNumOpClasses> grids_;
};

/// All loaded tables, keyed by (model, device profile id).
class ProfileSet {
public:
    void add(ProfileTable table);
    const ProfileTable* find(std::string_view model, std::string_view device_kind) const;
    /// Throws MissingProfileError naming the op and device when absent.
    OperatorRecord lookup(std::string_view model, std::string_view device_kind, const OperatorKey& key) const;
    std::size_t size() const { return tables_.size(); }

private:
    std::map<std::pair<std::string, std::string>, ProfileTable, std::less<>> tables_;
};

ProfileTable parse_profile(const json& j, const std::string& ctx = "profile");
ProfileTable load_profile(const std::string& path);
json to_json(const ProfileTable& table);
void save_profile(const ProfileTable& table, const std::string& path);

/// Analytical work of one operator invocation.
struct OpCost {
    double flops = 0;
    double bytes = 0;
};

/// Closed-form flop and byte counts per op class (whole op, unsharded):
///   T = batch * seq tokens for token-wise ops, kv = kv_heads * head_dim
///   qkv_proj        2 T h (h + 2kv)           weights h (h + 2kv)
///   out_proj        2 T h^2                   weights h^2
///   ffn_up          4 T h i (gate + up)       weights 2 h i
///   ffn_down        2 T h i                   weights h i
///   expert_ffn      4 T h ie (up + down)      weights 2 h ie
///   router_gate     2 T h E                   weights h E
///   attention_prefill  4 b s^2 h              q,k,v,o activations
///   attention_decode   4 b c h                KV read b c 2 kv + q/o
///   pim_attention   4 b c h                KV read b c 2 kv only
///   embed           T h                       T h gathered rows
///   lm_head         2 T h V                   weights h V
///   norm            5 T h                     2 T h
/// Bytes add activations in and out; everything scales by dtype_bytes.
OpCost op_cost(OpClass op, const ModelSpec& model, std::int64_t batch, std::int64_t seq);

struct SynthOptions {
    int max_batch = 256;
    std::int64_t min_seq = 1;
    std::int64_t max_seq = 8192;
};

/// Roofline table: latency = max(flops / peak_flops, bytes / bandwidth).
/// pim_stack devices use channels x per-channel bandwidth and only emit
/// pim_attention (bandwidth-bound: KV bytes read).
ProfileTable synth_profile(const DeviceSpec& device, const ModelSpec& model, double peak_flops,
                           const SynthOptions& opts = {});

}  // namespace servesim
