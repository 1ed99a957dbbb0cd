#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "servesim/config.hpp"

namespace servesim {

/// 2 (K and V) x layers x kv_heads x head_dim x dtype bytes.
std::uint64_t kv_bytes_per_token(const ModelSpec& model);

using BlockId = std::uint64_t;
using TokenSpan = std::span<const std::int32_t>;

struct KVBlock {
    BlockId id = 0;
    int owner_request = -1;  // set for request-owned blocks
    int owner_cache = -1;    // set for prefix-cache blocks
    int owner_node = -1;
    int tier = -1;
    int tokens = 0;
    std::uint64_t bytes_per_token = 0;
    std::uint64_t bytes = 0;  // tokens x bytes_per_token
};

/// Capacity-bounded pool of resident blocks.
class TierState {
public:
    TierState(int index, std::string name, TierKind kind, std::uint64_t capacity, double bandwidth, int block_size,
              double energy_per_byte);

    int index() const { return index_; }
    const std::string& name() const { return name_; }
    TierKind kind() const { return kind_; }
    std::uint64_t capacity() const { return capacity_; }
    std::uint64_t used() const { return used_; }
    std::uint64_t free() const { return capacity_ - used_; }
    double bandwidth() const { return bandwidth_; }
    int block_size() const { return block_size_; }
    double energy_per_byte() const { return energy_per_byte_; }
    const std::map<BlockId, KVBlock>& blocks() const { return blocks_; }

    /// Throws std::logic_error when the block would exceed capacity.
    void insert(const KVBlock& block);
    KVBlock remove(BlockId id);
    void set_owner_node(BlockId id, int node) { blocks_.at(id).owner_node = node; }

    /// used <= capacity and used == sum of resident block bytes.
    void check() const;

private:
    int index_;
    std::string name_;
    TierKind kind_;
    std::uint64_t capacity_;
    double bandwidth_;
    int block_size_;
    double energy_per_byte_;
    std::uint64_t used_ = 0;
    std::map<BlockId, KVBlock> blocks_;
};

/// Block-granular radix tree over token ids. Node 0 is the root; every other
/// node owns exactly one block in the cache's tier.
class RadixPrefixCache {
public:
    struct Node {
        int id = 0;
        int parent = -1;
        int depth = 0;  // blocks from root
        std::vector<std::int32_t> key;
        std::map<std::vector<std::int32_t>, int> children;
        BlockId block = 0;
        std::uint64_t stamp = 0;  // LRU order: smaller is older
        double last_use = 0;
        int pins = 0;
        bool live = true;
    };

    RadixPrefixCache(int id, std::string name, int tier, int block_size, TierScope scope,
                     std::uint64_t kv_bytes_per_token);

    int id() const { return id_; }
    const std::string& name() const { return name_; }
    int tier() const { return tier_; }
    int block_size() const { return block_size_; }
    TierScope scope() const { return scope_; }
    std::uint64_t kv_bytes_per_token() const { return kv_bytes_per_token_; }

    /// Nodes along the longest cached block-aligned prefix of `tokens`.
    std::vector<int> match(TokenSpan tokens) const;
    int add_child(int parent, std::vector<std::int32_t> key, BlockId block);
    void remove_leaf(int node);
    void touch(const std::vector<int>& path, double now, std::uint64_t stamp);

    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
    bool is_leaf(int id) const { return id != 0 && nodes_[static_cast<std::size_t>(id)].live && nodes_[static_cast<std::size_t>(id)].children.empty(); }
    /// Live nodes excluding the root.
    std::size_t node_count() const { return live_; }
    std::vector<int> live_nodes() const;
    /// Token ids spelled by the path from the root to `id`.
    std::vector<std::int32_t> path_tokens(int id) const;

    int demote_to = -1;  // cache receiving evicted blocks, if any

private:
    int id_;
    std::string name_;
    int tier_;
    int block_size_;
    TierScope scope_;
    std::uint64_t kv_bytes_per_token_;
    std::vector<Node> nodes_;
    std::size_t live_ = 0;
};

struct MemTransfer {
    enum class Kind { load, store };
    Kind kind = Kind::load;
    int tier = -1;  // the non-device side
    std::uint64_t bytes = 0;
    std::string reason;
};

struct Eviction {
    int cache = -1;
    int node = -1;
    std::uint64_t bytes = 0;
    int demote_cache = -1;  // -1: dropped
};

struct AdmitDecision {
    bool approved = false;
    std::vector<Eviction> evictions;
    std::vector<MemTransfer> transfers;  // demotion stores
};

struct CacheMatch {
    int cache = -1;
    int tokens = 0;
    std::vector<int> nodes;
};

struct PrefixLookup {
    int hit_tokens = 0;
    int device_tokens = 0;     // served by the first cache in the chain when it is a device cache
    int source = -1;           // index into `matches` supplying tokens past device_tokens
    std::vector<CacheMatch> matches;
};

/// Record of a cache operation, replayed by independent oracles.
struct CacheEvent {
    enum class Kind { lookup, insert, evict };
    Kind kind = Kind::lookup;
    int cache = -1;
    std::vector<std::int32_t> tokens;
    int matched = 0;  // lookup only
    double time = 0;
    int request = -1;  // request being admitted, if any
};

struct UsageSample {
    double time = 0;
    int tier = -1;
    std::uint64_t used = 0;
};

/// KV state a request holds while resident on one MSG.
struct RequestKv {
    int tier = -1;
    std::vector<BlockId> blocks;
    std::vector<std::pair<int, int>> pins;            // (cache, node) held until release
    std::vector<std::pair<int, int>> transient_pins;  // released once the prefill graph completes
    std::uint64_t bytes = 0;
    bool resident = false;
};

struct AdmissionRequest {
    int request = -1;
    int pool_tier = -1;
    int device_cache = -1;            // -1 when device prefix caching is off
    std::vector<int> shared_caches;   // searched after the device cache, in order
    bool promote_on_hit = true;
    TokenSpan prefix;
    int lookup_limit = 0;             // at most this many prefix tokens may hit
    int kv_tokens = 0;                // tokens whose KV lives in the pool
    std::uint64_t kv_bytes_per_token = 0;  // 0: the system default
};

struct Admission {
    bool approved = false;
    int hit_tokens = 0;
    int device_hit = 0;
    std::vector<Eviction> evictions;
    std::vector<MemTransfer> transfers;
    RequestKv kv;
};

/// All memory tiers and prefix caches of one simulation.
class MemorySystem {
public:
    explicit MemorySystem(std::uint64_t kv_bytes_per_token = 0);

    int add_tier(std::string name, TierKind kind, std::uint64_t capacity, double bandwidth, int block_size,
                 double energy_per_byte);
    /// kv_bytes_per_token 0 uses the system default.
    int add_cache(std::string name, int tier, TierScope scope, std::uint64_t kv_bytes_per_token = 0);

    TierState& tier(int i) { return tiers_.at(static_cast<std::size_t>(i)); }
    const TierState& tier(int i) const { return tiers_.at(static_cast<std::size_t>(i)); }
    RadixPrefixCache& cache(int i) { return caches_.at(static_cast<std::size_t>(i)); }
    const RadixPrefixCache& cache(int i) const { return caches_.at(static_cast<std::size_t>(i)); }
    std::size_t tier_count() const { return tiers_.size(); }
    std::size_t cache_count() const { return caches_.size(); }

    void set_kv_bytes_per_token(std::uint64_t v) { kv_bytes_per_token_ = v; }
    std::uint64_t kv_bytes_per_token() const { return kv_bytes_per_token_; }
    void set_clock(double now) { now_ = now; }
    double clock() const { return now_; }

    /// Longest cached prefix across `chain` (device cache first, then shared
    /// caches in order). Touches matched nodes.
    PrefixLookup prefix_lookup(const std::vector<int>& chain, TokenSpan tokens, bool device_first = true);

    /// Adds the full blocks of `tokens` missing from `cache`. When the tier is
    /// full, unpinned LRU leaves are dropped if `allow_evict`; insertion stops
    /// at the first block that cannot be placed. Returns bytes newly stored.
    std::uint64_t prefix_insert(int cache, TokenSpan tokens, bool allow_evict = true);

    /// Frees `bytes` in `tier` by evicting unpinned LRU prefix leaves (demoting
    /// when the cache has a same-block-size demotion target with room).
    /// Rejected decisions leave all state untouched.
    AdmitDecision admit(int tier, std::uint64_t bytes);

    /// Allocates `tokens` of request-owned KV as blocks of the tier's block size.
    void allocate_request(RequestKv& kv, int request, int tier, int tokens, std::uint64_t kv_bytes_per_token = 0);

    /// Full admission of one request: lookup, eviction, promotion, write-through.
    Admission admit_request(const AdmissionRequest& req);
    void release_request(RequestKv& kv);
    void release_transient(RequestKv& kv);

    void pin(int cache, int node);
    void unpin(int cache, int node);

    const std::vector<CacheEvent>& events() const { return events_; }
    void set_event_logging(bool on) { log_events_ = on; }
    const std::vector<UsageSample>& usage_log() const { return usage_; }

    std::uint64_t request_owned_bytes() const;
    /// Capacity, residency and tree-consistency checks; throws std::logic_error.
    void check_invariants() const;

private:
    BlockId new_block(int tier, int tokens, std::uint64_t per_token, int owner_request, int owner_cache);
    void drop_block(BlockId id, int tier);
    void record_usage(int tier);
    void log_event(CacheEvent e);
    void evict_node(const Eviction& e);
    std::vector<Eviction> plan_evictions(int tier, std::uint64_t bytes, bool* ok) const;

    std::uint64_t kv_bytes_per_token_;
    double now_ = 0;
    std::uint64_t stamp_ = 0;
    BlockId next_block_ = 1;
    std::vector<TierState> tiers_;
    std::vector<RadixPrefixCache> caches_;
    std::vector<CacheEvent> events_;
    std::vector<UsageSample> usage_;
    bool log_events_ = false;
    int event_request_ = -1;
};

/// MemLoads for hit tokens in [from_token, to_token) that are not device
/// resident: one op per source block (clipped to the range), bytes = tokens x
/// the source cache's kv bytes per token.
std::vector<MemTransfer> transfer_plan(const MemorySystem& mem, const PrefixLookup& hit, int from_token,
                                       int to_token);

}  // namespace servesim
