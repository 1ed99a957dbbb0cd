#include <catch_amalgamated.hpp>

#include "servesim/sysnet.hpp"
#include "support.hpp"

using namespace servesim;

TEST_CASE("event queue orders by time, priority, owner, then insertion") {
    EventQueue q;
    q.push(1.0, 1, 0, EventType::arrival, 1);
    q.push(1.0, 0, 5, EventType::arrival, 2);
    q.push(0.5, 3, 0, EventType::arrival, 3);
    q.push(1.0, 1, 0, EventType::arrival, 4);
    q.push(1.0, 1, -1, EventType::arrival, 5);
    std::vector<std::int64_t> order;
    while (!q.empty()) order.push_back(q.pop().a);
    CHECK(order == std::vector<std::int64_t>{3, 2, 5, 1, 4});
}

TEST_CASE("event queue refuses to go back in time") {
    EventQueue q;
    q.push(2.0, 0, 0, EventType::arrival);
    q.pop();
    CHECK_THROWS(q.push(1.0, 0, 0, EventType::arrival));
}

TEST_CASE("topology routes over the fewest links") {
    ClusterSpec c = testing::single_node(3);
    Topology t(c);
    CHECK(t.device_count() == 3);
    const auto& r = t.route(t.vertex("gpu0"), t.vertex("gpu2"));
    CHECK(r.size() == 2);
    CHECK(t.route(t.vertex("gpu1"), t.vertex("gpu1")).empty());
    c.links.clear();
    c.links.push_back(testing::link("l", "gpu0", "node0"));
    Topology cut(c);
    CHECK_THROWS_AS(cut.route(cut.vertex("gpu0"), cut.vertex("gpu1")), RoutingError);
}

TEST_CASE("collective time formulas") {
    CHECK(collective_time(CollectiveKind::all_reduce, 1e9, 1, 1e9, 1e-6) == 0);
    CHECK(collective_time(CollectiveKind::all_reduce, 8e9, 8, 1e9, 1e-6) == Catch::Approx(2 * 7.0 / 8 * 8 + 14e-6));
    CHECK(collective_time(CollectiveKind::all_to_all, 4e9, 4, 2e9, 1e-3) == Catch::Approx(0.75 * 2 + 3e-3));
}

TEST_CASE("max-min rates") {
    // Flow 0 crosses both links; flows 1 and 2 one each.
    auto r = max_min_rates({{0, 1}, {0}, {1}}, {10, 4});
    CHECK(r[0] == Catch::Approx(2));
    CHECK(r[1] == Catch::Approx(8));
    CHECK(r[2] == Catch::Approx(2));
    auto free = max_min_rates({{}}, {1});
    CHECK(std::isinf(free[0]));
}

TEST_CASE("staggered flows share then speed up") {
    // A alone for 1 s (10 bytes), then shares with B at 5 B/s each.
    auto f = simulate_flows({10}, {{{0}, 30, 0}, {{0}, 10, 1}});
    CHECK(f[1] == Catch::Approx(3));
    CHECK(f[0] == Catch::Approx(4));
}

TEST_CASE("system simulator serializes ops on a device and overlaps others") {
    ClusterSpec c = testing::single_node(2);
    Topology topo(c);
    EventQueue q;
    SystemSimulator sys(topo, q);
    sys.set_logging(true);
    ExecutionGraph g;
    auto compute = [](int dev, double lat) {
        MappedOp op;
        op.kind = OpKind::compute;
        op.devices = {dev};
        op.latency = lat;
        return op;
    };
    g.add(compute(0, 1.0));
    g.add(compute(0, 1.0));
    g.add(compute(1, 0.5));
    MappedOp xfer;
    xfer.kind = OpKind::p2p;
    xfer.devices = {0, 1};
    xfer.bytes = 100'000'000'000ULL;  // 1 s on a 100 GB/s link
    xfer.deps = {0, 2};
    g.add(xfer);
    sys.submit(g, 0.0);
    while (!q.empty()) sys.handle(q.pop());
    const auto& log = sys.log();
    REQUIRE(log.size() == 4);
    double end = 0;
    for (const auto& r : log) end = std::max(end, r.end);
    CHECK(end == Catch::Approx(2.0));
    for (const auto& r : log) {
        if (r.kind == OpKind::p2p) CHECK(r.start == Catch::Approx(1.0));
    }
}

TEST_CASE("graphs detect cycles") {
    ExecutionGraph g;
    MappedOp a;
    a.deps = {1};
    MappedOp b;
    b.deps = {0};
    g.add(a);
    g.add(b);
    CHECK_THROWS_AS(g.topo_order(), std::logic_error);
}

TEST_CASE("graph critical path sums the longest chain") {
    ExecutionGraph g;
    MappedOp a;
    a.latency = 1;
    MappedOp b;
    b.latency = 2;
    b.deps = {0};
    MappedOp c;
    c.latency = 5;
    g.add(a);
    g.add(b);
    g.add(c);
    CHECK(g.critical_path() == 5);
    g.ops[1].latency = 4.5;
    CHECK(g.critical_path() == 5.5);
}
