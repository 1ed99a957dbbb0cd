#include "servesim/memory.hpp"

#include <algorithm>
#include <queue>
#include <stdexcept>
#include <tuple>

namespace servesim {

std::uint64_t kv_bytes_per_token(const ModelSpec& m) {
    return 2ULL * static_cast<std::uint64_t>(m.num_layers) * static_cast<std::uint64_t>(m.num_kv_heads) *
           static_cast<std::uint64_t>(m.head_dim) * static_cast<std::uint64_t>(m.dtype_bytes);
}

// ---- TierState ----

TierState::TierState(int index, std::string name, TierKind kind, std::uint64_t capacity, double bandwidth,
                     int block_size, double energy_per_byte)
    : index_(index),
      name_(std::move(name)),
      kind_(kind),
      capacity_(capacity),
      bandwidth_(bandwidth),
      block_size_(block_size),
      energy_per_byte_(energy_per_byte) {}

void TierState::insert(const KVBlock& block) {
    if (block.bytes > free()) {
        throw std::logic_error("tier " + name_ + ": block " + std::to_string(block.id) + " exceeds capacity");
    }
    if (!blocks_.emplace(block.id, block).second) {
        throw std::logic_error("tier " + name_ + ": duplicate block " + std::to_string(block.id));
    }
    used_ += block.bytes;
}

KVBlock TierState::remove(BlockId id) {
    auto it = blocks_.find(id);
    if (it == blocks_.end()) throw std::logic_error("tier " + name_ + ": no block " + std::to_string(id));
    KVBlock b = it->second;
    blocks_.erase(it);
    used_ -= b.bytes;
    return b;
}

void TierState::check() const {
    std::uint64_t sum = 0;
    for (const auto& [id, b] : blocks_) {
        if (b.tier != index_) throw std::logic_error("tier " + name_ + ": block " + std::to_string(id) + " mislabeled");
        sum += b.bytes;
    }
    if (sum != used_) throw std::logic_error("tier " + name_ + ": used != sum of resident bytes");
    if (used_ > capacity_) throw std::logic_error("tier " + name_ + ": used exceeds capacity");
}

// ---- RadixPrefixCache ----

RadixPrefixCache::RadixPrefixCache(int id, std::string name, int tier, int block_size, TierScope scope,
                                   std::uint64_t kv_bytes_per_token)
    : id_(id),
      name_(std::move(name)),
      tier_(tier),
      block_size_(block_size),
      scope_(scope),
      kv_bytes_per_token_(kv_bytes_per_token) {
    nodes_.push_back(Node{});
}

std::vector<int> RadixPrefixCache::match(TokenSpan tokens) const {
    std::vector<int> path;
    int cur = 0;
    const auto bs = static_cast<std::size_t>(block_size_);
    std::vector<std::int32_t> key(bs);
    for (std::size_t off = 0; off + bs <= tokens.size(); off += bs) {
        std::copy(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                  tokens.begin() + static_cast<std::ptrdiff_t>(off + bs), key.begin());
        const auto& children = nodes_[static_cast<std::size_t>(cur)].children;
        auto it = children.find(key);
        if (it == children.end()) break;
        cur = it->second;
        path.push_back(cur);
    }
    return path;
}

int RadixPrefixCache::add_child(int parent, std::vector<std::int32_t> key, BlockId block) {
    Node& p = node(parent);
    if (!p.live) throw std::logic_error("cache " + name_ + ": add under dead node");
    if (p.children.count(key)) throw std::logic_error("cache " + name_ + ": duplicate child key");
    Node n;
    n.id = static_cast<int>(nodes_.size());
    n.parent = parent;
    n.depth = p.depth + 1;
    n.key = key;
    n.block = block;
    nodes_[static_cast<std::size_t>(parent)].children.emplace(std::move(key), n.id);
    nodes_.push_back(std::move(n));
    ++live_;
    return nodes_.back().id;
}

void RadixPrefixCache::remove_leaf(int id) {
    if (!is_leaf(id)) throw std::logic_error("cache " + name_ + ": remove of non-leaf node");
    Node& n = node(id);
    if (n.pins > 0) throw std::logic_error("cache " + name_ + ": remove of pinned node");
    node(n.parent).children.erase(n.key);
    n.live = false;
    n.key.clear();
    --live_;
}

void RadixPrefixCache::touch(const std::vector<int>& path, double now, std::uint64_t stamp) {
    for (int id : path) {
        Node& n = node(id);
        n.stamp = stamp;
        n.last_use = now;
    }
}

std::vector<int> RadixPrefixCache::live_nodes() const {
    std::vector<int> out;
    for (std::size_t i = 1; i < nodes_.size(); ++i) {
        if (nodes_[i].live) out.push_back(static_cast<int>(i));
    }
    return out;
}

std::vector<std::int32_t> RadixPrefixCache::path_tokens(int id) const {
    std::vector<const Node*> chain;
    for (int cur = id; cur > 0; cur = node(cur).parent) chain.push_back(&node(cur));
    std::vector<std::int32_t> out;
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) out.insert(out.end(), (*it)->key.begin(), (*it)->key.end());
    return out;
}

// ---- MemorySystem ----

MemorySystem::MemorySystem(std::uint64_t kv_bytes_per_token) : kv_bytes_per_token_(kv_bytes_per_token) {}

int MemorySystem::add_tier(std::string name, TierKind kind, std::uint64_t capacity, double bandwidth, int block_size,
                           double energy_per_byte) {
    int index = static_cast<int>(tiers_.size());
    tiers_.emplace_back(index, std::move(name), kind, capacity, bandwidth, block_size, energy_per_byte);
    return index;
}

int MemorySystem::add_cache(std::string name, int tier_index, TierScope scope, std::uint64_t kv_bytes_per_token) {
    int index = static_cast<int>(caches_.size());
    caches_.emplace_back(index, std::move(name), tier_index, tier(tier_index).block_size(), scope,
                         kv_bytes_per_token ? kv_bytes_per_token : kv_bytes_per_token_);
    return index;
}

void MemorySystem::record_usage(int t) {
    std::uint64_t used = tier(t).used();
    if (!usage_.empty() && usage_.back().tier == t && usage_.back().time == now_) {
        usage_.back().used = used;
        return;
    }
    usage_.push_back({now_, t, used});
}

BlockId MemorySystem::new_block(int t, int tokens, std::uint64_t per_token, int owner_request, int owner_cache) {
    KVBlock b;
    b.id = next_block_++;
    b.owner_request = owner_request;
    b.owner_cache = owner_cache;
    b.tier = t;
    b.tokens = tokens;
    b.bytes_per_token = per_token;
    b.bytes = static_cast<std::uint64_t>(tokens) * per_token;
    tier(t).insert(b);
    record_usage(t);
    return b.id;
}

void MemorySystem::drop_block(BlockId id, int t) {
    tier(t).remove(id);
    record_usage(t);
}

void MemorySystem::pin(int c, int n) { ++cache(c).node(n).pins; }

void MemorySystem::unpin(int c, int n) {
    auto& node = cache(c).node(n);
    if (node.pins <= 0) throw std::logic_error("cache " + cache(c).name() + ": unbalanced unpin");
    --node.pins;
}

std::vector<Eviction> MemorySystem::plan_evictions(int t, std::uint64_t bytes, bool* ok) const {
    std::vector<Eviction> plan;
    const TierState& ts = tier(t);
    if (ts.free() >= bytes) {
        *ok = true;
        return plan;
    }
    // (stamp, cache, node): oldest first, ties to lowest ids.
    using Key = std::tuple<std::uint64_t, int, int>;
    std::priority_queue<Key, std::vector<Key>, std::greater<>> heap;
    std::map<std::pair<int, int>, std::size_t> remaining_children;
    for (const auto& c : caches_) {
        if (c.tier() != t) continue;
        for (int id : c.live_nodes()) {
            const auto& n = c.node(id);
            if (n.children.empty() && n.pins == 0) heap.emplace(n.stamp, c.id(), id);
        }
    }
    std::map<int, std::uint64_t> demote_used;  // extra bytes planned into each target tier
    std::uint64_t freed = 0;
    while (ts.free() + freed < bytes && !heap.empty()) {
        auto [stamp, cid, nid] = heap.top();
        heap.pop();
        const RadixPrefixCache& c = cache(cid);
        const auto& n = c.node(nid);
        Eviction e;
        e.cache = cid;
        e.node = nid;
        e.bytes = tier(t).blocks().at(n.block).bytes;
        if (c.demote_to >= 0) {
            const RadixPrefixCache& target = cache(c.demote_to);
            const TierState& tt = tier(target.tier());
            if (target.block_size() == c.block_size() && tt.free() >= demote_used[target.tier()] + e.bytes) {
                auto tokens = c.path_tokens(nid);
                auto have = target.match(tokens).size();
                if (have + 1 == static_cast<std::size_t>(n.depth)) {
                    e.demote_cache = c.demote_to;
                    demote_used[target.tier()] += e.bytes;
                }
            }
        }
        plan.push_back(e);
        freed += e.bytes;
        int parent = n.parent;
        if (parent > 0) {
            auto key = std::make_pair(cid, parent);
            auto it = remaining_children.find(key);
            if (it == remaining_children.end()) {
                it = remaining_children.emplace(key, c.node(parent).children.size()).first;
            }
            if (--it->second == 0 && c.node(parent).pins == 0) heap.emplace(c.node(parent).stamp, cid, parent);
        }
    }
    *ok = ts.free() + freed >= bytes;
    return plan;
}

void MemorySystem::evict_node(const Eviction& e) {
    RadixPrefixCache& c = cache(e.cache);
    auto tokens = c.path_tokens(e.node);
    BlockId block = c.node(e.node).block;
    int src_tier = c.tier();
    if (e.demote_cache >= 0) {
        RadixPrefixCache& target = cache(e.demote_cache);
        auto path = target.match(tokens);
        int parent = path.empty() ? 0 : path.back();
        int bs = target.block_size();
        auto bid = new_block(target.tier(), bs, target.kv_bytes_per_token(), -1, target.id());
        std::vector<std::int32_t> key(tokens.end() - bs, tokens.end());
        int nid = target.add_child(parent, std::move(key), bid);
        tier(target.tier()).set_owner_node(bid, nid);
        path.push_back(nid);
        target.touch(path, now_, ++stamp_);
        if (log_events_) log_event({CacheEvent::Kind::insert, target.id(), tokens, 0, now_});
    }
    c.remove_leaf(e.node);
    drop_block(block, src_tier);
    if (log_events_) log_event({CacheEvent::Kind::evict, c.id(), std::move(tokens), 0, now_});
}

AdmitDecision MemorySystem::admit(int t, std::uint64_t bytes) {
    AdmitDecision d;
    bool ok = false;
    auto plan = plan_evictions(t, bytes, &ok);
    if (!ok) return d;
    d.approved = true;
    for (const auto& e : plan) {
        if (e.demote_cache >= 0) {
            d.transfers.push_back({MemTransfer::Kind::store, cache(e.demote_cache).tier(), e.bytes, "demote"});
        }
        evict_node(e);
    }
    d.evictions = std::move(plan);
    return d;
}

PrefixLookup MemorySystem::prefix_lookup(const std::vector<int>& chain, TokenSpan tokens, bool device_first) {
    PrefixLookup out;
    std::uint64_t stamp = ++stamp_;
    for (int cid : chain) {
        RadixPrefixCache& c = cache(cid);
        CacheMatch m;
        m.cache = cid;
        m.nodes = c.match(tokens);
        m.tokens = static_cast<int>(m.nodes.size()) * c.block_size();
        c.touch(m.nodes, now_, stamp);
        if (log_events_) {
            log_event({CacheEvent::Kind::lookup, cid, std::vector<std::int32_t>(tokens.begin(), tokens.end()),
                               m.tokens, now_});
        }
        out.matches.push_back(std::move(m));
    }
    if (device_first && !out.matches.empty()) out.device_tokens = out.matches.front().tokens;
    out.hit_tokens = out.device_tokens;
    for (std::size_t i = device_first ? 1 : 0; i < out.matches.size(); ++i) {
        if (out.matches[i].tokens > out.hit_tokens) {
            out.hit_tokens = out.matches[i].tokens;
            out.source = static_cast<int>(i);
        }
    }
    return out;
}

std::uint64_t MemorySystem::prefix_insert(int cid, TokenSpan tokens, bool allow_evict) {
    RadixPrefixCache& c = cache(cid);
    const int bs = c.block_size();
    const std::size_t full = tokens.size() / static_cast<std::size_t>(bs);
    auto path = c.match(tokens);
    if (path.size() >= full) {
        c.touch(path, now_, ++stamp_);
        return 0;
    }
    const std::uint64_t block_bytes = static_cast<std::uint64_t>(bs) * c.kv_bytes_per_token();
    for (int id : path) pin(cid, id);
    std::vector<int> added;
    std::uint64_t stored = 0;
    for (std::size_t k = path.size(); k < full; ++k) {
        if (tier(c.tier()).free() < block_bytes) {
            if (!allow_evict) break;
            bool ok = false;
            auto plan = plan_evictions(c.tier(), block_bytes, &ok);
            if (!ok) break;
            for (const auto& e : plan) evict_node(e);
        }
        int parent = path.empty() ? 0 : path.back();
        auto bid = new_block(c.tier(), bs, c.kv_bytes_per_token(), -1, cid);
        std::vector<std::int32_t> key(tokens.begin() + static_cast<std::ptrdiff_t>(k * bs),
                                      tokens.begin() + static_cast<std::ptrdiff_t>((k + 1) * bs));
        int nid = c.add_child(parent, std::move(key), bid);
        tier(c.tier()).set_owner_node(bid, nid);
        path.push_back(nid);
        pin(cid, nid);
        added.push_back(nid);
        stored += block_bytes;
    }
    for (int id : path) unpin(cid, id);
    c.touch(path, now_, ++stamp_);
    if (log_events_ && !added.empty()) {
        log_event({CacheEvent::Kind::insert, cid,
                           std::vector<std::int32_t>(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(
                                                                                       path.size() * bs)),
                           0, now_});
    }
    return stored;
}

void MemorySystem::allocate_request(RequestKv& kv, int request, int t, int tokens, std::uint64_t per_token) {
    if (per_token == 0) per_token = kv_bytes_per_token_;
    kv.tier = t;
    const int bs = tier(t).block_size();
    for (int left = tokens; left > 0; left -= bs) {
        int n = std::min(left, bs);
        kv.blocks.push_back(new_block(t, n, per_token, request, -1));
        kv.bytes += static_cast<std::uint64_t>(n) * per_token;
    }
    kv.resident = true;
}

void MemorySystem::log_event(CacheEvent e) {
    e.request = event_request_;
    events_.push_back(std::move(e));
}

Admission MemorySystem::admit_request(const AdmissionRequest& req) {
    struct Scope {
        int& slot;
        ~Scope() { slot = -1; }
    } scope{event_request_};
    event_request_ = req.request;
    Admission out;
    std::vector<int> chain;
    if (req.device_cache >= 0) chain.push_back(req.device_cache);
    chain.insert(chain.end(), req.shared_caches.begin(), req.shared_caches.end());
    const int limit = std::min(static_cast<int>(req.prefix.size()), req.lookup_limit);
    PrefixLookup look;
    if (!chain.empty() && limit > 0) {
        look = prefix_lookup(chain, req.prefix.first(static_cast<std::size_t>(limit)), req.device_cache >= 0);
    }
    const int d = look.device_tokens;
    const int h = look.hit_tokens;

    std::vector<std::pair<int, int>> device_pins;
    std::vector<std::pair<int, int>> source_pins;
    if (req.device_cache >= 0 && !look.matches.empty()) {
        for (int n : look.matches.front().nodes) device_pins.emplace_back(req.device_cache, n);
    }
    if (look.source >= 0) {
        const auto& m = look.matches[static_cast<std::size_t>(look.source)];
        for (int n : m.nodes) source_pins.emplace_back(m.cache, n);
    }
    for (auto [c, n] : device_pins) pin(c, n);
    for (auto [c, n] : source_pins) pin(c, n);

    int covered = 0;
    if (req.device_cache >= 0) {
        const int bs = cache(req.device_cache).block_size();
        const int insert_end = static_cast<int>(req.prefix.size()) / bs * bs;
        covered = (!req.promote_on_hit && h > d) ? d : std::max(d, insert_end);
    }
    const std::uint64_t per_token = req.kv_bytes_per_token ? req.kv_bytes_per_token : kv_bytes_per_token_;
    const std::uint64_t need = static_cast<std::uint64_t>(req.kv_tokens - d) * per_token;
    AdmitDecision decision = admit(req.pool_tier, need);
    if (!decision.approved) {
        for (auto [c, n] : device_pins) unpin(c, n);
        for (auto [c, n] : source_pins) unpin(c, n);
        return out;
    }
    out.approved = true;
    out.hit_tokens = h;
    out.device_hit = d;
    out.evictions = std::move(decision.evictions);
    out.transfers = std::move(decision.transfers);

    if (req.device_cache >= 0) {
        auto covered_tokens = req.prefix.first(static_cast<std::size_t>(covered));
        if (covered > d) prefix_insert(req.device_cache, covered_tokens, false);
        for (auto [c, n] : device_pins) unpin(c, n);
        device_pins.clear();
        for (int n : cache(req.device_cache).match(covered_tokens)) device_pins.emplace_back(req.device_cache, n);
        for (auto [c, n] : device_pins) pin(c, n);
    }
    allocate_request(out.kv, req.request, req.pool_tier, req.kv_tokens - covered, per_token);
    out.kv.pins = std::move(device_pins);
    out.kv.transient_pins = std::move(source_pins);

    auto loads = transfer_plan(*this, look, d, h);
    out.transfers.insert(out.transfers.end(), loads.begin(), loads.end());
    for (int c : req.shared_caches) {
        std::uint64_t stored = prefix_insert(c, req.prefix, true);
        if (stored > 0) out.transfers.push_back({MemTransfer::Kind::store, cache(c).tier(), stored, "write_through"});
    }
    return out;
}

void MemorySystem::release_transient(RequestKv& kv) {
    for (auto [c, n] : kv.transient_pins) unpin(c, n);
    kv.transient_pins.clear();
}

void MemorySystem::release_request(RequestKv& kv) {
    release_transient(kv);
    for (auto [c, n] : kv.pins) unpin(c, n);
    kv.pins.clear();
    for (BlockId id : kv.blocks) drop_block(id, kv.tier);
    kv.blocks.clear();
    kv.bytes = 0;
    kv.resident = false;
}

std::uint64_t MemorySystem::request_owned_bytes() const {
    std::uint64_t sum = 0;
    for (const auto& t : tiers_) {
        for (const auto& [id, b] : t.blocks()) {
            if (b.owner_request >= 0) sum += b.bytes;
        }
    }
    return sum;
}

void MemorySystem::check_invariants() const {
    for (const auto& t : tiers_) {
        t.check();
        for (const auto& [id, b] : t.blocks()) {
            if (b.bytes != static_cast<std::uint64_t>(b.tokens) * b.bytes_per_token) {
                throw std::logic_error("block " + std::to_string(id) + ": bytes != tokens x kv bytes per token");
            }
            if ((b.owner_request >= 0) == (b.owner_cache >= 0)) {
                throw std::logic_error("block " + std::to_string(id) + ": must have exactly one owner");
            }
            if (b.owner_cache >= 0) {
                const auto& c = cache(b.owner_cache);
                if (c.tier() != t.index()) throw std::logic_error("block " + std::to_string(id) + ": wrong tier");
                const auto& n = c.node(b.owner_node);
                if (!n.live || n.block != id) {
                    throw std::logic_error("block " + std::to_string(id) + ": not referenced by its cache node");
                }
            }
        }
    }
    for (const auto& c : caches_) {
        std::size_t live = 0;
        for (int id : c.live_nodes()) {
            ++live;
            const auto& n = c.node(id);
            if (n.pins < 0) throw std::logic_error("cache " + c.name() + ": negative pin count");
            const auto& blocks = tier(c.tier()).blocks();
            auto it = blocks.find(n.block);
            if (it == blocks.end() || it->second.owner_node != id || it->second.owner_cache != c.id()) {
                throw std::logic_error("cache " + c.name() + ": node " + std::to_string(id) + " block not resident");
            }
            const auto& parent = c.node(n.parent);
            auto ct = parent.children.find(n.key);
            if (!parent.live || ct == parent.children.end() || ct->second != id) {
                throw std::logic_error("cache " + c.name() + ": node " + std::to_string(id) + " detached");
            }
            if (static_cast<int>(n.key.size()) != c.block_size()) {
                throw std::logic_error("cache " + c.name() + ": partial block node");
            }
        }
        if (live != c.node_count()) throw std::logic_error("cache " + c.name() + ": live count mismatch");
    }
}

std::vector<MemTransfer> transfer_plan(const MemorySystem& mem, const PrefixLookup& hit, int from_token,
                                       int to_token) {
    std::vector<MemTransfer> out;
    if (hit.source < 0 || to_token <= from_token) return out;
    const auto& m = hit.matches.at(static_cast<std::size_t>(hit.source));
    const auto& c = mem.cache(m.cache);
    const int bs = c.block_size();
    for (std::size_t k = 0; k < m.nodes.size(); ++k) {
        int lo = std::max(static_cast<int>(k) * bs, from_token);
        int hi = std::min(static_cast<int>(k + 1) * bs, to_token);
        if (hi <= lo) continue;
        out.push_back({MemTransfer::Kind::load, c.tier(),
                       static_cast<std::uint64_t>(hi - lo) * c.kv_bytes_per_token(), "prefix"});
    }
    return out;
}

}  // namespace servesim
