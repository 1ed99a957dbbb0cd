#include <catch_amalgamated.hpp>

#include "servesim/metrics.hpp"

using namespace servesim;

namespace {

RequestMetrics req(double arrival, double sched, double first, double done, int in, int out, int hit = 0) {
    RequestMetrics r;
    r.id = "r";
    r.model = "m";
    r.msg = "m0";
    r.arrival = arrival;
    r.input_len = in;
    r.output_len = out;
    r.prefix_hit_tokens = hit;
    r.sched_time = sched;
    r.first_token_time = first;
    r.done_time = done;
    return r;
}

}  // namespace

TEST_CASE("per-request latencies") {
    RequestMetrics r = req(1, 2, 4, 10, 8, 4);
    CHECK(*r.queueing_delay() == 1);
    CHECK(*r.ttft() == 3);
    CHECK(*r.e2e() == 9);
    CHECK(*r.tpot() == 2);
    CHECK_FALSE(req(0, 0, 1, 1, 8, 1).tpot());
    RequestMetrics open;
    CHECK_FALSE(open.ttft());
}

TEST_CASE("nearest-rank percentiles") {
    std::vector<double> xs{15, 20, 35, 40, 50};
    CHECK(nearest_rank(xs, 5) == 15);
    CHECK(nearest_rank(xs, 30) == 20);
    CHECK(nearest_rank(xs, 40) == 20);
    CHECK(nearest_rank(xs, 50) == 35);
    CHECK(nearest_rank(xs, 100) == 50);
    Stat s = describe({3, 1, 2});
    CHECK(s.n == 3);
    CHECK(s.mean == 2);
    CHECK(s.p50 == 2);
    CHECK(s.max == 3);
}

TEST_CASE("summary aggregates") {
    std::vector<RequestMetrics> rs{req(0, 0, 1, 3, 10, 3, 4), req(1, 1, 2, 5, 30, 5, 0)};
    Summary s = summarize(rs, 80.0, 5.0);
    CHECK(s.completed == 2);
    CHECK(s.generated_tokens == 8);
    CHECK(s.makespan == 5);
    CHECK(s.throughput_tps == Catch::Approx(8.0 / 5));
    CHECK(s.prefix_hit_rate == Catch::Approx(4.0 / 40));
    CHECK(*s.mean_power_w == Catch::Approx(16));
    CHECK(*s.joules_per_token == Catch::Approx(10));
    CHECK(to_json(s)["ttft_s"]["p50"] == 1.0);
    CHECK_THAT(format_summary(s), Catch::Matchers::ContainsSubstring("ttft"));
}

TEST_CASE("requests csv round-trips") {
    RequestMetrics a = req(0.1, 0.2, 0.30000000000000004, 1.5, 10, 3, 4);
    a.id = "a,\"quoted\"";
    a.kv_peak_bytes = 1234;
    RequestMetrics b;
    b.id = "b";
    b.model = "m";
    b.msg = "m0";
    b.input_len = 5;
    b.output_len = 2;
    std::string text = requests_csv({a, b});
    CHECK(text.rfind("id,model,msg,arrival,input_len,output_len,prefix_hit_tokens,sched_time,first_token_time,"
                     "done_time,queueing_delay,ttft,tpot,e2e,kv_peak_bytes\n",
                     0) == 0);
    auto back = parse_requests_csv(text);
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == a.id);
    CHECK(*back[0].first_token_time == *a.first_token_time);
    CHECK(back[0].kv_peak_bytes == 1234);
    CHECK_FALSE(back[1].done_time);
    CHECK_THROWS_AS(parse_requests_csv("id,model\nx,y\n"), ConfigError);
}

TEST_CASE("number formatting is shortest round-trip") {
    CHECK(format_number(0.1) == "0.1");
    CHECK(format_number(0.0) == "0");
    CHECK(format_number(1e-3) == "0.001");
    CHECK(format_number(0.30000000000000004) == "0.30000000000000004");
    CHECK(format_number(42) == "42");
}

TEST_CASE("time series buckets") {
    SimulationReport rep;
    rep.msg_ids = {"m0"};
    rep.tier_names = {"t"};
    rep.tokens = {{0.5, 0, 3}, {0.9, 0, 2}, {1.2, 0, 4}};
    rep.prefix = {{0.5, 0, 4, 8}, {1.5, 0, 0, 8}};
    rep.usage = {{0.2, 0, 100}, {0.8, 0, 50}, {1.1, 0, 70}};
    rep.end_time = 2.0;
    rep.energy.set_duration(2.0);
    auto rows = time_series(rep, 1.0);
    auto value = [&](double t, const std::string& metric, const std::string& entity) {
        for (const auto& r : rows) {
            if (r.time == t && r.metric == metric && r.entity == entity) return r.value;
        }
        FAIL("missing row " << metric << " " << entity << " at " << t);
        return 0.0;
    };
    CHECK(value(0, "tokens", "m0") == 5);
    CHECK(value(1, "tokens", "m0") == 4);
    CHECK(value(0, "tier_used_bytes", "t") == 50);
    CHECK(value(1, "tier_used_bytes", "t") == 70);
    CHECK(value(0, "prefix_hit_rate", "m0") == 0.5);
    CHECK(value(1, "prefix_hit_rate", "m0") == 0.25);
    CHECK(timeseries_csv(rows).rfind("time,metric,entity,value\n", 0) == 0);
}

TEST_CASE("energy json lists every component") {
    EnergyLedger led;
    led.add_constant(Component::nic, "nic", 2);
    led.set_duration(3);
    json j = energy_json(led);
    CHECK(j["total_j"] == 6.0);
    CHECK(j["components"].size() == 7);
    CHECK(j["components"]["nic"] == 6.0);
}
