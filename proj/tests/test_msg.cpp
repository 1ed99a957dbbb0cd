#include <catch_amalgamated.hpp>

#include <numeric>

#include "servesim/msg.hpp"
#include "support.hpp"

using namespace servesim;
using namespace servesim::testing;

TEST_CASE("request lifecycle transitions") {
    Request r;
    r.advance(RequestState::prefill);
    r.advance(RequestState::decode);
    r.advance(RequestState::complete);
    Request bad;
    CHECK_THROWS_AS(bad.advance(RequestState::decode), std::logic_error);
    Request pd;
    pd.advance(RequestState::prefill);
    pd.advance(RequestState::kv_transfer);
    CHECK_THROWS_AS(pd.advance(RequestState::prefill), std::logic_error);
}

TEST_CASE("expert routing conserves token assignments") {
    for (auto policy : {ExpertRouting::random, ExpertRouting::round_robin, ExpertRouting::proportional_load}) {
        auto counts = route_experts(policy, 37, 8, 2, 1);
        CHECK(std::accumulate(counts.begin(), counts.end(), 0) == 74);
        for (int c : counts) CHECK(c <= 37);
    }
    std::vector<double> table{0.5, 0.25, 0.25, 0.0};
    auto counts = route_experts(ExpertRouting::user_table, 10, 4, 2, 1, &table);
    CHECK(std::accumulate(counts.begin(), counts.end(), 0) == 20);
    CHECK(counts[3] == 0);
    CHECK(counts[0] == 10);
}

TEST_CASE("round robin expert routing is exact") {
    auto counts = route_experts(ExpertRouting::round_robin, 8, 4, 1, 0);
    CHECK(counts == std::vector<int>{2, 2, 2, 2});
}

namespace {

struct Rig {
    ClusterSpec cluster = single_node(2);
    ModelSpec model = dense_model("m", 2);
    ProfileSet profiles;
    Topology topo{cluster};
    MemorySystem mem{kv_bytes_per_token(model)};
    MsgRuntime msg;
    std::vector<Request> reqs;

    explicit Rig(int tp, std::uint64_t pool_bytes = 1ULL << 30) {
        profiles.add(constant_profile("m", "const", 1e-3));
        msg.index = 0;
        msg.spec = testing::msg("m0", "m", tp == 2 ? std::vector<std::string>{"gpu0", "gpu1"} : std::vector<std::string>{"gpu0"}, tp);
        msg.spec.max_batch = 4;
        msg.model = model;
        msg.kv_bytes_per_token = kv_bytes_per_token(model);
        msg.topology = &topo;
        msg.profiles = &profiles;
        for (int i = 0; i < tp; ++i) msg.compute_devices.push_back(i);
        msg.all_devices = msg.compute_devices;
        msg.pool_tier = mem.add_tier("m0/device", TierKind::device, pool_bytes, 1e12, 16, 0);
    }

    void add(int input, int output) {
        Request r;
        r.spec = RequestSpec{"r" + std::to_string(reqs.size()), "m", 0.0, input, output, {}, {}};
        r.index = static_cast<int>(reqs.size());
        r.msg = 0;
        msg.queue.push_back(r.index);
        reqs.push_back(r);
    }
};

}  // namespace

TEST_CASE("continuous batching admits FCFS up to max_batch") {
    Rig rig(1);
    for (int i = 0; i < 6; ++i) rig.add(10, 3);
    auto b = schedule_batch(rig.msg, rig.reqs, rig.mem, 0.0);
    REQUIRE(b);
    CHECK(b->prefill == std::vector<int>{0, 1, 2, 3});
    CHECK(rig.msg.queue.size() == 2);
    CHECK(b->total_tokens == 40);
}

TEST_CASE("batching stops when memory refuses") {
    const std::uint64_t per = kv_bytes_per_token(dense_model("m", 2));
    Rig rig(1, per * 2 * 16);  // room for two requests of 13 tokens (one block each)
    for (int i = 0; i < 3; ++i) rig.add(10, 3);
    auto b = schedule_batch(rig.msg, rig.reqs, rig.mem, 0.0);
    REQUIRE(b);
    CHECK(b->prefill.size() == 2);
    CHECK(rig.msg.queue.front() == 2);
}

TEST_CASE("prefill mapping chains the layer ops") {
    Rig rig(1);
    rig.add(8, 2);
    rig.msg.batch = *schedule_batch(rig.msg, rig.reqs, rig.mem, 0.0);
    auto ops = map_ops(rig.msg, rig.msg.batch, rig.reqs);
    // embed + 2 x (norm, qkv, attention, out, norm, up, down) + lm_head
    CHECK(ops.size() == 16);
    ExecutionGraph g = build_graph(rig.msg, rig.msg.batch, ops, rig.reqs);
    CHECK(g.critical_path() == Catch::Approx(16e-3));
}

TEST_CASE("tensor parallel mapping adds all-reduces") {
    Rig rig(2);
    rig.add(8, 2);
    rig.msg.batch = *schedule_batch(rig.msg, rig.reqs, rig.mem, 0.0);
    ExecutionGraph g = build_graph(rig.msg, rig.msg.batch, map_ops(rig.msg, rig.msg.batch, rig.reqs), rig.reqs);
    // Embedding, then attention and mlp per layer.
    CHECK(g.count(OpKind::all_reduce) == 1 + 2 * 2);
    CHECK(g.count(OpKind::all_to_all) == 1);
    for (const auto& op : g.ops) {
        if (op.kind == OpKind::compute) CHECK(op.latency == Catch::Approx(op.key.op == OpClass::norm ? 1e-3 : 0.5e-3));
    }
}

TEST_CASE("graph completion advances requests") {
    Rig rig(1);
    rig.add(8, 2);
    rig.add(8, 1);
    rig.msg.batch = *schedule_batch(rig.msg, rig.reqs, rig.mem, 0.0);
    GraphOutcome out = on_graph_complete(rig.msg, rig.reqs, rig.mem, 0.5);
    CHECK(out.tokens == 2);
    CHECK(out.completed == std::vector<int>{1});
    CHECK(rig.reqs[0].state == RequestState::decode);
    CHECK(rig.reqs[0].first_token_time == 0.5);
    rig.msg.batch = *schedule_batch(rig.msg, rig.reqs, rig.mem, 0.5);
    CHECK(rig.msg.batch.decode == std::vector<int>{0});
    out = on_graph_complete(rig.msg, rig.reqs, rig.mem, 0.6);
    CHECK(out.completed == std::vector<int>{0});
    CHECK(rig.mem.tier(rig.msg.pool_tier).used() == 0);
}
