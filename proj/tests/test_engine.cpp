#include <catch_amalgamated.hpp>

#include "servesim/engine.hpp"
#include "servesim/validate.hpp"
#include "support.hpp"

using namespace servesim;
using namespace servesim::testing;

namespace {

ProfileSet const_profiles(const std::string& model, double latency = 1e-3) {
    ProfileSet p;
    p.add(constant_profile(model, "const", latency));
    return p;
}

Trace fixed(int n, int in, int out, const std::string& model = "m") { return gen_fixed(n, in, out, model); }

}  // namespace

TEST_CASE("router policies") {
    std::vector<MsgRuntime> msgs(3);
    for (int i = 0; i < 3; ++i) {
        msgs[i].index = i;
        msgs[i].spec.model = i < 2 ? "a" : "b";
    }
    RouterState rr;
    RequestSpec a{"x", "a", 0, 1, 1, {}, {}};
    CHECK(route(rr, a, msgs).msg == 0);
    CHECK(route(rr, a, msgs).msg == 1);
    CHECK(route(rr, a, msgs).msg == 0);

    RouterState ll;
    ll.policy = RouterPolicy::least_loaded;
    ll.load = {5, 3, 0};
    CHECK(route(ll, a, msgs).msg == 1);
    ll.load = {3, 3, 0};
    CHECK(route(ll, a, msgs).msg == 0);

    RouterState sa;
    sa.policy = RouterPolicy::session_affinity;
    RequestSpec s1{"y", "a", 0, 1, 1, {}, "s"};
    const int first = route(sa, s1, msgs).msg;
    route(sa, a, msgs);
    CHECK(route(sa, s1, msgs).msg == first);

    RequestSpec unknown{"z", "c", 0, 1, 1, {}, {}};
    CHECK_THROWS_AS(route(rr, unknown, msgs), SimulationError);
}

TEST_CASE("single request timing is the critical path") {
    ClusterSpec c = single_node(1);
    c.msgs.push_back(msg("m0", "m", {"gpu0"}));
    ServingEngine e(c, {dense_model("m", 2)}, const_profiles("m"), fixed(1, 4, 3));
    SimulationReport rep = e.run();
    const auto& r = rep.requests.at(0);
    CHECK(*r.ttft() == Catch::Approx(16e-3).margin(1e-12));
    CHECK(*r.tpot() == Catch::Approx(16e-3).margin(1e-12));
    CHECK(rep.end_time == Catch::Approx(48e-3));
}

TEST_CASE("all requests complete and tokens are conserved") {
    ClusterSpec c = single_node(2);
    c.msgs.push_back(msg("m0", "m", {"gpu0"}));
    c.msgs.push_back(msg("m1", "m", {"gpu1"}));
    TraceParams p;
    p.model = "m";
    p.input = LengthDist{{{8, 0.5}, {64, 1.0}}};
    p.output = LengthDist{{{1, 0.3}, {20, 1.0}}};
    Trace t = gen_poisson(50.0, 80, p, 4);
    EngineOptions opt;
    opt.check_invariants = true;
    ServingEngine e(c, {dense_model("m", 2)}, const_profiles("m"), t, opt);
    SimulationReport rep = e.run();
    std::uint64_t want = 0, got = 0;
    for (const auto& r : t.requests) want += static_cast<std::uint64_t>(r.output_len);
    for (const auto& ev : rep.tokens) got += ev.tokens;
    CHECK(got == want);
    for (const auto& r : rep.requests) {
        REQUIRE(r.complete());
        CHECK(*r.sched_time >= r.arrival);
        CHECK(*r.first_token_time > *r.sched_time);
        CHECK(*r.done_time >= *r.first_token_time);
    }
    // Round robin alternates groups.
    CHECK(rep.requests[0].msg == "m0");
    CHECK(rep.requests[1].msg == "m1");
}

TEST_CASE("until truncates the run") {
    ClusterSpec c = single_node(1);
    c.msgs.push_back(msg("m0", "m", {"gpu0"}));
    EngineOptions opt;
    opt.until = 0.01;
    ServingEngine e(c, {dense_model("m", 2)}, const_profiles("m"), fixed(2, 4, 50), opt);
    SimulationReport rep = e.run();
    CHECK(rep.truncated);
    CHECK_FALSE(rep.requests[0].complete());
}

TEST_CASE("requests that can never fit deadlock with a diagnosis") {
    ClusterSpec c = single_node(1);
    ModelSpec m = dense_model("m", 2);
    c.nodes[0].devices[0].mem_capacity = m.weight_bytes + 10 * kv_bytes_per_token(m);
    c.msgs.push_back(msg("m0", "m", {"gpu0"}));
    ServingEngine e(c, {m}, const_profiles("m"), fixed(1, 40, 4));
    CHECK_THROWS_WITH(e.run(), Catch::Matchers::ContainsSubstring("can never fit"));
}

TEST_CASE("planning errors are configuration errors") {
    ClusterSpec c = single_node(2);
    CHECK_THROWS_AS(ServingEngine(c, {dense_model("m", 2)}, const_profiles("m"), fixed(1, 4, 4)), ConfigError);
    c.msgs.push_back(msg("m0", "m", {"gpu0"}, 2));
    CHECK_THROWS_AS(ServingEngine(c, {dense_model("m", 2)}, const_profiles("m"), fixed(1, 4, 4)), ConfigError);
    c.msgs[0].tp_degree = 1;
    c.msgs[0].model = "other";
    CHECK_THROWS_AS(ServingEngine(c, {dense_model("m", 2)}, const_profiles("m"), fixed(1, 4, 4)), ConfigError);
}

TEST_CASE("idle devices fall from standby to idle after the timeout") {
    ClusterSpec c = single_node(1);
    c.standby_timeout = 1.0;
    c.msgs.push_back(msg("m0", "m", {"gpu0"}));
    Trace t = fixed(1, 4, 2);
    t.requests.push_back(RequestSpec{"late", "m", 5.0, 4, 2, {}, {}});
    ServingEngine e(c, {dense_model("m", 2)}, const_profiles("m"), t);
    e.run();
    bool idle_gap = false;
    for (const auto& iv : e.ledger().intervals()) {
        if (iv.state == DeviceState::idle && iv.start > 0.5 && iv.end <= 5.0 + 1e-12) idle_gap = true;
        if (iv.state == DeviceState::standby) CHECK(iv.end - iv.start <= 1.0 + 1e-12);
    }
    CHECK(idle_gap);
}

TEST_CASE("validation reports missing profiles and capacity") {
    ClusterSpec c = single_node(1);
    c.msgs.push_back(msg("m0", "m", {"gpu0"}));
    ModelSpec m = dense_model("m", 2);
    ProfileSet none;
    ValidationReport rep = validate(c, {m}, none);
    REQUIRE_FALSE(rep.errors.empty());
    CHECK_THAT(rep.text(), Catch::Matchers::ContainsSubstring("missing profile"));

    ProfileSet partial;
    partial.add(ProfileTable("const", "m", {{OpClass::norm, 1, 1, {1e-3, {}}}}));
    rep = validate(c, {m}, partial);
    CHECK_THAT(rep.text(), Catch::Matchers::ContainsSubstring("op 'qkv_proj' on device 'gpu0'"));

    CHECK(validate(c, {m}, const_profiles("m")).errors.empty());
    c.nodes[0].devices[0].mem_capacity = m.weight_bytes;
    rep = validate(c, {m}, const_profiles("m"));
    CHECK_THAT(rep.text(), Catch::Matchers::ContainsSubstring("capacity"));
}
