#include "servesim/msg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace servesim {

std::string_view to_string(RequestState s) {
    switch (s) {
        case RequestState::queued: return "queued";
        case RequestState::prefill: return "prefill";
        case RequestState::kv_transfer: return "kv_transfer";
        case RequestState::decode: return "decode";
        case RequestState::complete: return "complete";
    }
    return "?";
}

void Request::advance(RequestState next) {
    using S = RequestState;
    bool ok = (state == S::queued && next == S::prefill) ||
              (state == S::prefill && (next == S::kv_transfer || next == S::decode || next == S::complete)) ||
              (state == S::kv_transfer && next == S::decode) || (state == S::decode && next == S::complete);
    if (!ok) {
        throw std::logic_error("request " + spec.id + ": illegal transition " + std::string(to_string(state)) +
                               " -> " + std::string(to_string(next)));
    }
    state = next;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return b <= 0 ? 0 : (a + b - 1) / b; }

}  // namespace

std::vector<int> route_experts(ExpertRouting policy, int tokens, int num_experts, int top_k, std::uint64_t seed,
                               const std::vector<double>* table) {
    if (num_experts < 1 || top_k < 1 || top_k > num_experts) {
        throw std::invalid_argument("route_experts: need 1 <= top_k <= num_experts");
    }
    const auto E = static_cast<std::size_t>(num_experts);
    std::vector<int> load(E, 0);
    if (tokens <= 0) return load;
    switch (policy) {
        case ExpertRouting::random: {
            Rng rng(seed);
            std::vector<int> chosen;
            for (int t = 0; t < tokens; ++t) {
                chosen.clear();
                while (static_cast<int>(chosen.size()) < top_k) {
                    int e = static_cast<int>(rng.below(E));
                    if (std::find(chosen.begin(), chosen.end(), e) == chosen.end()) chosen.push_back(e);
                }
                for (int e : chosen) ++load[static_cast<std::size_t>(e)];
            }
            break;
        }
        case ExpertRouting::round_robin:
            for (int t = 0; t < tokens; ++t) {
                for (int j = 0; j < top_k; ++j) ++load[static_cast<std::size_t>((t + j) % num_experts)];
            }
            break;
        case ExpertRouting::proportional_load: {
            std::vector<int> order(E);
            for (int t = 0; t < tokens; ++t) {
                std::iota(order.begin(), order.end(), 0);
                std::partial_sort(order.begin(), order.begin() + top_k, order.end(), [&](int a, int b) {
                    return load[static_cast<std::size_t>(a)] != load[static_cast<std::size_t>(b)]
                               ? load[static_cast<std::size_t>(a)] < load[static_cast<std::size_t>(b)]
                               : a < b;
                });
                for (int j = 0; j < top_k; ++j) ++load[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])];
            }
            break;
        }
        case ExpertRouting::user_table: {
            if (!table || table->size() != E) throw ConfigError("user_table: row must list one probability per expert");
            double sum = 0;
            for (double p : *table) sum += p;
            if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("user_table: probabilities must sum to 1 (+-1e-9)");
            const double total = static_cast<double>(tokens) * top_k;
            std::vector<double> frac(E);
            int assigned = 0;
            for (std::size_t e = 0; e < E; ++e) {
                double q = total * (*table)[e];
                load[e] = static_cast<int>(std::floor(q));
                frac[e] = q - load[e];
                assigned += load[e];
            }
            std::vector<int> order(E);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int b) { return frac[static_cast<std::size_t>(a)] > frac[static_cast<std::size_t>(b)]; });
            for (std::size_t i = 0; assigned < static_cast<int>(total) && i < E; ++i, ++assigned) {
                ++load[static_cast<std::size_t>(order[i])];
            }
            break;
        }
    }
    return load;
}

int MsgRuntime::stage_of(int layer) const {
    const int lps = static_cast<int>(ceil_div(model.num_layers, spec.pp_degree));
    return std::min(layer / lps, spec.pp_degree - 1);
}

bool MsgRuntime::expert_offloaded(int e) const {
    if (!expert_rule) return false;
    const auto& xs = expert_rule->experts;
    return xs.empty() || std::find(xs.begin(), xs.end(), e) != xs.end();
}

std::string MsgRuntime::profile_id(int device) const {
    const DeviceSpec& d = topology->device(device);
    return d.profile_ref.empty() ? std::string(to_string(d.kind)) : d.profile_ref;
}

OperatorRecord MsgRuntime::cost(int device, const OperatorKey& key) const {
    return profiles->lookup(model.name, profile_id(device), key);
}

// ---- scheduling ----

std::optional<Batch> schedule_batch(MsgRuntime& msg, std::vector<Request>& reqs, MemorySystem& mem, double now) {
    if (msg.busy) return std::nullopt;
    Batch b;
    b.decode = msg.running;
    const auto max_batch = static_cast<std::size_t>(msg.spec.max_batch);
    if (msg.spec.role == MsgRole::decode) {
        while (!msg.incoming.empty() && b.decode.size() < max_batch) {
            Request& r = reqs[static_cast<std::size_t>(msg.incoming.front())];
            AdmissionRequest ar;
            ar.request = r.index;
            ar.pool_tier = msg.pool_tier;
            ar.kv_tokens = r.spec.input_len + r.spec.output_len;
            ar.kv_bytes_per_token = msg.kv_bytes_per_token;
            Admission adm = mem.admit_request(ar);
            if (!adm.approved) break;
            r.kv = std::move(adm.kv);
            r.kv_peak_bytes = std::max(r.kv_peak_bytes, static_cast<std::uint64_t>(ar.kv_tokens) * msg.kv_bytes_per_token);
            r.msg = msg.index;
            r.advance(RequestState::decode);
            msg.incoming.pop_front();
            msg.running.push_back(r.index);
            b.decode.push_back(r.index);
            b.admitted_decode.push_back(r.index);
            b.transfers.insert(b.transfers.end(), adm.transfers.begin(), adm.transfers.end());
        }
    } else {
        while (!msg.queue.empty() && b.prefill.size() + b.decode.size() < max_batch) {
            Request& r = reqs[static_cast<std::size_t>(msg.queue.front())];
            AdmissionRequest ar;
            ar.request = r.index;
            ar.pool_tier = msg.pool_tier;
            ar.device_cache = msg.device_cache;
            ar.shared_caches = msg.shared_caches;
            ar.promote_on_hit = msg.spec.promote_on_hit;
            ar.prefix = r.spec.prefix_tokens;
            ar.lookup_limit = r.spec.input_len - 1;
            ar.kv_tokens = msg.spec.role == MsgRole::prefill ? r.spec.input_len : r.spec.input_len + r.spec.output_len;
            ar.kv_bytes_per_token = msg.kv_bytes_per_token;
            Admission adm = mem.admit_request(ar);
            if (!adm.approved) break;
            r.kv = std::move(adm.kv);
            r.kv_peak_bytes = std::max(r.kv_peak_bytes, static_cast<std::uint64_t>(ar.kv_tokens) * msg.kv_bytes_per_token);
            r.prefix_hit_tokens = adm.hit_tokens;
            r.sched_time = now;
            r.msg = msg.index;
            r.advance(RequestState::prefill);
            msg.queue.pop_front();
            b.prefill.push_back(r.index);
            b.transfers.insert(b.transfers.end(), adm.transfers.begin(), adm.transfers.end());
        }
    }
    if (b.prefill.empty() && b.decode.empty()) return std::nullopt;
    for (int i : b.prefill) {
        const Request& r = reqs[static_cast<std::size_t>(i)];
        b.total_tokens += r.spec.input_len - r.prefix_hit_tokens;
    }
    b.total_tokens += static_cast<int>(b.decode.size());
    if (msg.spec.sbi_enabled && b.prefill.empty() && b.decode.size() >= 2 &&
        b.decode.size() >= static_cast<std::size_t>(msg.spec.sbi_threshold)) {
        b.sbi = true;
        const auto half = (b.decode.size() + 1) / 2;
        b.sub[0].assign(b.decode.begin(), b.decode.begin() + static_cast<std::ptrdiff_t>(half));
        b.sub[1].assign(b.decode.begin() + static_cast<std::ptrdiff_t>(half), b.decode.end());
    } else {
        b.sub[0] = b.prefill;
        b.sub[0].insert(b.sub[0].end(), b.decode.begin(), b.decode.end());
    }
    return b;
}

// ---- op mapping ----

namespace {

class Mapper {
public:
    Mapper(const MsgRuntime& m, const std::vector<Request>& reqs) : m_(m), reqs_(reqs) {}

    std::vector<MappedOp> ops;

    void sub_batch(int sb, const std::vector<int>& members) {
        std::vector<int> P, D;
        for (int i : members) {
            (reqs_[static_cast<std::size_t>(i)].state == RequestState::prefill ? P : D).push_back(i);
        }
        if (P.empty() && D.empty()) return;
        const ModelSpec& model = m_.model;
        const int tp = m_.tp();
        const std::int64_t h = model.hidden_dim;
        const std::int64_t dt = model.dtype_bytes;
        const std::int64_t per_layer_kv = static_cast<std::int64_t>(m_.kv_bytes_per_token) / model.num_layers;

        std::int64_t new_tokens = 0;
        for (int i : P) {
            const Request& r = reqs_[static_cast<std::size_t>(i)];
            new_tokens += r.spec.input_len - r.prefix_hit_tokens;
        }
        std::int64_t ctx_sum = 0;
        for (int i : D) ctx_sum += reqs_[static_cast<std::size_t>(i)].context();
        const std::int64_t n = static_cast<std::int64_t>(P.size() + D.size());
        const std::int64_t T = new_tokens + static_cast<std::int64_t>(D.size());
        const std::int64_t tok_seq = ceil_div(T, n);
        const std::int64_t act = T * h * dt;
        const int bsize = static_cast<int>(batch_size);

        last_.assign(static_cast<std::size_t>(tp), -1);
        sb_ = sb;

        // Vocab-parallel embedding: each rank gathers its rows, then all-reduce.
        for (int r = 0; r < tp; ++r) lane(r, compute(OpClass::embed, m_.device_at(0, r), n, tok_seq, tp, -1));
        if (tp > 1) join(collective(OpKind::all_reduce, stage_devices(0, tp), static_cast<std::uint64_t>(act)), {});
        for (int l = 0; l < model.num_layers; ++l) {
            layer_ = l;
            const int s = m_.stage_of(l);
            if (l > 0 && s != m_.stage_of(l - 1)) {
                for (int r = 0; r < tp; ++r) {
                    lane(r, transfer(OpKind::p2p, {m_.device_at(s - 1, r), m_.device_at(s, r)},
                                     static_cast<std::uint64_t>(act / tp), -1, "stage_activation"));
                }
            }
            if (m_.weights_rule && m_.weights_rule->applies(bsize)) {
                const auto bytes = layer_weight_bytes(model) / static_cast<std::uint64_t>(tp);
                for (int r = 0; r < tp; ++r) {
                    if (m_.weights_tier >= 0) {
                        lane(r, transfer(OpKind::mem_load, {m_.device_at(s, r)}, bytes, m_.weights_tier, "weights"));
                    } else {
                        lane(r, transfer(OpKind::p2p, {m_.weights_device, m_.device_at(s, r)}, bytes, -1, "weights"));
                    }
                }
            }
            for (int r = 0; r < tp; ++r) {
                lane(r, compute(OpClass::norm, m_.device_at(s, r), n, tok_seq, 1, l));
                lane(r, compute(OpClass::qkv_proj, m_.device_at(s, r), n, tok_seq, tp, l));
            }
            if (!P.empty()) {
                const auto mean_new = ceil_div(new_tokens, static_cast<std::int64_t>(P.size()));
                for (int r = 0; r < tp; ++r) {
                    lane(r, compute(OpClass::attention_prefill, m_.device_at(s, r), static_cast<std::int64_t>(P.size()),
                                    mean_new, tp, l));
                }
            }
            if (!D.empty()) {
                const auto nd = static_cast<std::int64_t>(D.size());
                const auto mean_ctx = ceil_div(ctx_sum, nd);
                const bool on_pim = m_.attention_rule && m_.pim_device >= 0 && m_.attention_rule->applies(bsize);
                if (on_pim) {
                    const auto bytes = static_cast<std::uint64_t>(nd * h * dt / tp);
                    std::vector<int> ins;
                    for (int r = 0; r < tp; ++r) {
                        ins.push_back(lane(r, transfer(OpKind::p2p, {m_.device_at(s, r), m_.pim_device}, bytes, -1,
                                                       "pim_activation")));
                    }
                    int pim = add(compute(OpClass::pim_attention, m_.pim_device, nd, mean_ctx, 1, l), ins);
                    for (int r = 0; r < tp; ++r) {
                        last_[static_cast<std::size_t>(r)] = pim;
                        lane(r, transfer(OpKind::p2p, {m_.pim_device, m_.device_at(s, r)}, bytes, -1, "pim_activation"));
                    }
                } else {
                    const auto kv_bytes = static_cast<std::uint64_t>(ctx_sum * per_layer_kv / tp);
                    for (int r = 0; r < tp; ++r) {
                        if (m_.kv_device >= 0) {
                            lane(r, transfer(OpKind::p2p, {m_.kv_device, m_.device_at(s, r)}, kv_bytes, -1, "kv_read"));
                        } else if (m_.kv_tier >= 0) {
                            lane(r, transfer(OpKind::mem_load, {m_.device_at(s, r)}, kv_bytes, m_.kv_tier, "kv_read"));
                        }
                        lane(r, compute(OpClass::attention_decode, m_.device_at(s, r), nd, mean_ctx, tp, l));
                    }
                }
            }
            for (int r = 0; r < tp; ++r) lane(r, compute(OpClass::out_proj, m_.device_at(s, r), n, tok_seq, tp, l));
            if (tp > 1) join(collective(OpKind::all_reduce, stage_devices(s, tp), static_cast<std::uint64_t>(act)), {});
            for (int r = 0; r < tp; ++r) lane(r, compute(OpClass::norm, m_.device_at(s, r), n, tok_seq, 1, l));
            if (!model.moe) {
                for (int r = 0; r < tp; ++r) {
                    lane(r, compute(OpClass::ffn_up, m_.device_at(s, r), n, tok_seq, tp, l));
                    lane(r, compute(OpClass::ffn_down, m_.device_at(s, r), n, tok_seq, tp, l));
                }
                if (tp > 1) {
                    join(collective(OpKind::all_reduce, stage_devices(s, tp), static_cast<std::uint64_t>(act)), {});
                }
            } else {
                moe_layer(s, n, tok_seq, T);
            }
        }
        layer_ = -1;
        const int last_stage = m_.pp() - 1;
        // Vocab-parallel lm_head; a ring all-gather of the logits costs the
        // same as an all-to-all over the full buffer.
        for (int r = 0; r < tp; ++r) lane(r, compute(OpClass::lm_head, m_.device_at(last_stage, r), n, 1, tp, -1));
        if (tp > 1) {
            const auto logits = static_cast<std::uint64_t>(n * model.vocab_size * dt);
            join(collective(OpKind::all_to_all, stage_devices(last_stage, tp), logits), {});
        }
    }

private:
    std::vector<int> stage_devices(int s, int count) const {
        std::vector<int> out;
        const auto total = static_cast<int>(m_.compute_devices.size());
        for (int i = 0; i < count; ++i) {
            out.push_back(m_.compute_devices[static_cast<std::size_t>((s * m_.tp() + i) % total)]);
        }
        return out;
    }

    void moe_layer(int s, std::int64_t n, std::int64_t tok_seq, std::int64_t T) {
        const ModelSpec& model = m_.model;
        const MoESpec& moe = *model.moe;
        const int tp = m_.tp();
        const std::int64_t h = model.hidden_dim;
        const std::int64_t dt = model.dtype_bytes;
        for (int r = 0; r < tp; ++r) lane(r, compute(OpClass::router_gate, m_.device_at(s, r), n, tok_seq, 1, layer_));
        const std::vector<double>* row = nullptr;
        if (!moe.user_table.empty()) row = &moe.user_table[static_cast<std::size_t>(layer_) % moe.user_table.size()];
        std::uint64_t seed = splitmix(m_.seed ^ splitmix(m_.graph_seq * 1315423911ULL + static_cast<std::uint64_t>(layer_) * 2654435761ULL +
                                                         static_cast<std::uint64_t>(sb_)));
        auto counts = route_experts(moe.router_policy, static_cast<int>(T), moe.num_experts, moe.top_k, seed, row);
        const int ep = m_.spec.ep_degree;
        if (ep > 1) {
            auto devs = stage_devices(s, ep);
            const auto bytes = static_cast<std::uint64_t>(T * moe.top_k * h * dt / ep);
            int a2a = join(collective(OpKind::all_to_all, devs, bytes), {});
            std::vector<int> done;
            for (int e = 0; e < moe.num_experts; ++e) {
                if (counts[static_cast<std::size_t>(e)] == 0) continue;
                int home = devs[static_cast<std::size_t>(e * ep / moe.num_experts)];
                done.push_back(expert(e, counts[static_cast<std::size_t>(e)], home, 1, {a2a}));
            }
            join(collective(OpKind::all_to_all, devs, bytes), done);
        } else {
            for (int r = 0; r < tp; ++r) {
                for (int e = 0; e < moe.num_experts; ++e) {
                    if (counts[static_cast<std::size_t>(e)] == 0) continue;
                    auto& last = last_[static_cast<std::size_t>(r)];
                    std::vector<int> deps;
                    if (last >= 0) deps.push_back(last);
                    last = expert(e, counts[static_cast<std::size_t>(e)], m_.device_at(s, r), tp, deps);
                }
            }
            if (tp > 1) {
                join(collective(OpKind::all_reduce, stage_devices(s, tp), static_cast<std::uint64_t>(T * h * dt)), {});
            }
        }
    }

    // One routed expert; returns the id of the op that ends its chain.
    int expert(int e, int tokens, int home, int shard, std::vector<int> deps) {
        int dev = home;
        const bool remote = m_.expert_device >= 0 && m_.expert_offloaded(e);
        const auto act = static_cast<std::uint64_t>(tokens) * static_cast<std::uint64_t>(m_.model.hidden_dim) *
                         static_cast<std::uint64_t>(m_.model.dtype_bytes);
        if (remote) {
            dev = m_.expert_device;
            int in = add(transfer(OpKind::p2p, {home, dev}, act, -1, "expert_activation"), deps);
            deps = {in};
        }
        MappedOp op = compute(OpClass::expert_ffn, dev, tokens, 1, remote ? 1 : shard, layer_);
        op.tag = "expert:" + std::to_string(e);
        int id = add(std::move(op), deps);
        if (remote) id = add(transfer(OpKind::p2p, {dev, home}, act, -1, "expert_activation"), {id});
        return id;
    }

    MappedOp compute(OpClass c, int device, std::int64_t batch, std::int64_t seq, int shard, int layer) const {
        MappedOp op;
        op.kind = c == OpClass::pim_attention ? OpKind::pim_compute : OpKind::compute;
        op.key = OperatorKey{c, std::max<std::int64_t>(1, batch), std::max<std::int64_t>(1, seq)};
        op.devices = {device};
        OperatorRecord rec = m_.cost(device, op.key);
        op.latency = rec.latency / shard;
        if (rec.energy) op.energy = *rec.energy / shard;
        op.layer = layer;
        return op;
    }

    MappedOp transfer(OpKind kind, std::vector<int> devices, std::uint64_t bytes, int tier, std::string tag) const {
        MappedOp op;
        op.kind = kind;
        op.devices = std::move(devices);
        op.bytes = bytes;
        op.tier = tier;
        op.layer = layer_;
        op.tag = std::move(tag);
        return op;
    }

    MappedOp collective(OpKind kind, std::vector<int> devices, std::uint64_t bytes) const {
        MappedOp op;
        op.kind = kind;
        op.devices = std::move(devices);
        op.bytes = bytes;
        op.layer = layer_;
        return op;
    }

    int add(MappedOp op, std::vector<int> deps) {
        op.id = static_cast<int>(ops.size());
        op.sub_batch = sb_;
        std::sort(deps.begin(), deps.end());
        deps.erase(std::unique(deps.begin(), deps.end()), deps.end());
        op.deps = std::move(deps);
        ops.push_back(std::move(op));
        return ops.back().id;
    }

    int lane(int r, MappedOp op) {
        auto& last = last_[static_cast<std::size_t>(r)];
        std::vector<int> deps;
        if (last >= 0) deps.push_back(last);
        last = add(std::move(op), std::move(deps));
        return last;
    }

    // Depends on every lane (plus `extra`); every lane continues from it.
    int join(MappedOp op, std::vector<int> extra) {
        for (int x : last_) {
            if (x >= 0) extra.push_back(x);
        }
        int id = add(std::move(op), std::move(extra));
        std::fill(last_.begin(), last_.end(), id);
        return id;
    }

    const MsgRuntime& m_;
    const std::vector<Request>& reqs_;
    std::vector<int> last_;
    int sb_ = 0;
    int layer_ = -1;

public:
    std::size_t batch_size = 0;
};

}  // namespace

std::vector<MappedOp> map_ops(const MsgRuntime& msg, const Batch& batch, const std::vector<Request>& reqs) {
    Mapper mapper(msg, reqs);
    mapper.batch_size = batch.prefill.size() + batch.decode.size();
    mapper.sub_batch(0, batch.sub[0]);
    if (batch.sbi) mapper.sub_batch(1, batch.sub[1]);
    return std::move(mapper.ops);
}

ExecutionGraph build_graph(const MsgRuntime& msg, const Batch& batch, std::vector<MappedOp> mapped,
                           const std::vector<Request>& reqs) {
    if (mapped.empty()) throw std::logic_error("build_graph: no mapped ops");
    ExecutionGraph g;
    g.msg = msg.index;
    g.seq = msg.graph_seq;
    g.ops = std::move(mapped);
    const int L = msg.model.num_layers;
    const std::uint64_t per_layer_kv = msg.kv_bytes_per_token / static_cast<std::uint64_t>(L);

    std::vector<std::vector<int>> prefill_attn(static_cast<std::size_t>(L));
    for (const auto& op : g.ops) {
        if (op.kind == OpKind::compute && op.key.op == OpClass::attention_prefill) {
            prefill_attn[static_cast<std::size_t>(op.layer)].push_back(op.id);
        }
    }
    auto add = [&](MappedOp op, std::vector<int> deps) {
        op.deps = std::move(deps);
        return g.add(std::move(op));
    };
    auto memop = [&](OpKind kind, int tier, int device, std::uint64_t bytes, int layer, std::string tag) {
        MappedOp op;
        op.kind = kind;
        op.tier = tier;
        op.devices = {device};
        op.bytes = bytes;
        op.layer = layer;
        op.tag = std::move(tag);
        return op;
    };

    for (const auto& t : batch.transfers) {
        if (t.kind == MemTransfer::Kind::load) {
            const int group = msg.spec.kv_load_layer_group > 0 ? msg.spec.kv_load_layer_group : L;
            for (int a = 0; a < L; a += group) {
                const int b = std::min(L, a + group);
                const auto bytes = t.bytes / static_cast<std::uint64_t>(L) * static_cast<std::uint64_t>(b - a);
                int id = add(memop(OpKind::mem_load, t.tier, msg.device_at(msg.stage_of(a), 0), bytes, a, t.reason), {});
                for (int consumer : prefill_attn[static_cast<std::size_t>(a)]) {
                    g.ops[static_cast<std::size_t>(consumer)].deps.push_back(id);
                }
            }
        } else {
            std::vector<int> deps;
            if (t.reason == "write_through") deps = prefill_attn[static_cast<std::size_t>(L - 1)];
            add(memop(OpKind::mem_store, t.tier, msg.device_at(0, 0), t.bytes, -1, t.reason), deps);
        }
    }

    if (msg.expert_tier >= 0) {
        // One load per (layer, expert) shared by every shard and sub-batch using it.
        std::map<std::pair<int, int>, int> loads;
        const std::size_t n0 = g.ops.size();
        for (std::size_t i = 0; i < n0; ++i) {
            const MappedOp& op = g.ops[i];
            if (op.kind != OpKind::compute || op.key.op != OpClass::expert_ffn) continue;
            int e = std::stoi(op.tag.substr(op.tag.find(':') + 1));
            if (!msg.expert_offloaded(e)) continue;
            auto it = loads.find({op.layer, e});
            if (it == loads.end()) {
                int id = add(memop(OpKind::mem_load, msg.expert_tier, op.devices.at(0), expert_weight_bytes(msg.model),
                                   op.layer, "expert_load:" + std::to_string(e)),
                             {});
                it = loads.emplace(std::make_pair(op.layer, e), id).first;
            }
            g.ops[i].deps.push_back(it->second);
        }
    }

    if (msg.spec.role == MsgRole::prefill && !batch.prefill.empty()) {
        std::map<int, std::uint64_t> bytes_to;
        for (int i : batch.prefill) {
            const Request& r = reqs[static_cast<std::size_t>(i)];
            if (r.spec.output_len > 1) bytes_to[r.decode_msg] += static_cast<std::uint64_t>(r.spec.input_len) * per_layer_kv;
        }
        for (int l = 0; l < L; ++l) {
            for (const auto& [peer, bytes] : bytes_to) {
                const int peer_pp = msg.peer_pp.at(peer);
                const int peer_tp = msg.peer_tp.at(peer);
                const int lps = (L + peer_pp - 1) / peer_pp;
                const int peer_stage = std::min(l / lps, peer_pp - 1);
                const int dst = msg.peer_devices.at(peer).at(static_cast<std::size_t>(peer_stage * peer_tp));
                MappedOp op;
                op.kind = OpKind::p2p;
                op.devices = {msg.device_at(msg.stage_of(l), 0), dst};
                op.bytes = bytes;
                op.layer = l;
                op.tag = "kv_transfer";
                add(std::move(op), prefill_attn[static_cast<std::size_t>(l)]);
            }
        }
    }

    if (msg.spec.role != MsgRole::prefill && msg.kv_device >= 0 && !batch.prefill.empty()) {
        std::uint64_t new_tokens = 0;
        for (int i : batch.prefill) {
            const Request& r = reqs[static_cast<std::size_t>(i)];
            new_tokens += static_cast<std::uint64_t>(r.spec.input_len - r.prefix_hit_tokens);
        }
        for (int l = 0; l < L; ++l) {
            MappedOp op;
            op.kind = OpKind::p2p;
            op.devices = {msg.device_at(msg.stage_of(l), 0), msg.kv_device};
            op.bytes = new_tokens * per_layer_kv;
            op.layer = l;
            op.tag = "kv_writeback";
            add(std::move(op), prefill_attn[static_cast<std::size_t>(l)]);
        }
    }

    for (auto& op : g.ops) {
        std::sort(op.deps.begin(), op.deps.end());
        op.deps.erase(std::unique(op.deps.begin(), op.deps.end()), op.deps.end());
    }
    g.topo_order();
    return g;
}

GraphOutcome on_graph_complete(MsgRuntime& msg, std::vector<Request>& reqs, MemorySystem& mem, double finish) {
    GraphOutcome out;
    const Batch& b = msg.batch;
    auto finish_request = [&](Request& r) {
        r.done_time = finish;
        mem.release_request(r.kv);
        r.advance(RequestState::complete);
        out.completed.push_back(r.index);
    };
    for (int i : b.prefill) {
        Request& r = reqs[static_cast<std::size_t>(i)];
        r.first_token_time = finish;
        r.tokens_done = 1;
        ++out.tokens;
        mem.release_transient(r.kv);
        if (r.spec.output_len == 1) {
            finish_request(r);
        } else if (msg.spec.role == MsgRole::prefill) {
            mem.release_request(r.kv);
            r.advance(RequestState::kv_transfer);
            out.handed_off.push_back(r.index);
        } else {
            r.advance(RequestState::decode);
            msg.running.push_back(r.index);
        }
    }
    for (int i : b.decode) {
        Request& r = reqs[static_cast<std::size_t>(i)];
        ++r.tokens_done;
        ++out.tokens;
        if (r.tokens_done >= r.spec.output_len) {
            finish_request(r);
            msg.running.erase(std::find(msg.running.begin(), msg.running.end(), r.index));
        }
    }
    msg.busy = false;
    msg.graph_handle = -1;
    msg.batch = Batch{};
    return out;
}

}  // namespace servesim
