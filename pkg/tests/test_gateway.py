"""End-to-end over real TCP: coordinator, counters, aggregator, HTTP gateway."""

import json
import time

import httpx
import numpy as np
import pytest

from stratacast.aggregator import AggregatorConfig, AggregatorNode, HttpGateway
from stratacast.coordinator import CoordinatorConfig, CoordinatorNode
from stratacast.counter import CounterConfig, CounterNode
from stratacast.datamodel import Schema, generate_synthetic
from stratacast.query import Query, estimate_count
from stratacast.runtime import TcpRuntime
from stratacast.strata import draw_fallback_stratified


def wait_for(predicate, timeout=10.0, interval=0.05):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


@pytest.fixture(scope="module")
def live_cluster():
    schema = Schema((("age", 4), ("geo", 5), ("device", 3)))
    theta = np.random.default_rng(1).normal(size=(4, 5))
    dataset = generate_synthetic(schema, [(0, 1, theta)], 6000, seed=4)
    sample = draw_fallback_stratified(dataset, 900, [0, 1], seed=5)

    from stratacast.strata import split_subsamples

    subs = split_subsamples(sample, 2, seed=6)
    store = {f"mem:{s.node_index}": s for s in subs}

    runtimes = []
    coord_rt = TcpRuntime("coordinator")
    coordinator = CoordinatorNode(coord_rt, CoordinatorConfig())
    coord_rt.attach(coordinator)
    runtimes.append(coord_rt)

    counters = []
    for i in range(2):
        rt = TcpRuntime(f"counter-{i}")
        node = CounterNode(
            rt,
            f"counter-{i}",
            CounterConfig(
                coordinator_address=coord_rt.address,
                push_interval_ms=50.0,
                sample_loader=store.__getitem__,
            ),
        )
        rt.attach(node)
        counters.append(node)
        runtimes.append(rt)

    agg_rt = TcpRuntime("agg-0")
    aggregator = AggregatorNode(
        agg_rt,
        "agg-0",
        AggregatorConfig(coordinator_address=coord_rt.address, default_sub_cluster=2),
    )
    agg_rt.attach(aggregator)
    runtimes.append(agg_rt)

    gateway = HttpGateway(aggregator, agg_rt)
    gateway.start()

    manifest = {
        f"sample-1:{i}": {"path": f"mem:{i}", "row_count": store[f"mem:{i}"].num_rows}
        for i in range(2)
    }
    coord_rt.call_locked(
        lambda: coordinator.publish_sample("sample-1", 1, manifest, schema.to_json())
    )

    assert wait_for(lambda: all(c.state == "serving" for c in counters))
    assert wait_for(lambda: len(aggregator.live_counters()) == 2)

    yield {
        "gateway": gateway,
        "sample": sample,
        "schema": schema,
        "counters": counters,
        "aggregator": aggregator,
    }

    gateway.close()
    for rt in runtimes:
        rt.close()


class TestHttpGateway:
    def test_schema_endpoint_serves_the_published_schema(self, live_cluster):
        resp = httpx.get(live_cluster["gateway"].url + "/schema")
        assert resp.status_code == 200
        names = [f["name"] for f in resp.json()["features"]]
        assert names == ["age", "geo", "device"]

    def test_create_then_poll_happy_path(self, live_cluster):
        url = live_cluster["gateway"].url
        body = {"query": {"age": [1, 2], "device": [1]}, "threshold": 0.0}
        created = httpx.post(url + "/reports", json=body)
        assert created.status_code == 200
        report_id = created.json()["reportId"]

        def done():
            r = httpx.get(f"{url}/reports/{report_id}").json()
            return r["status"] == "done"

        assert wait_for(done, timeout=15.0)
        final = httpx.get(f"{url}/reports/{report_id}").json()
        expected = estimate_count(
            live_cluster["sample"], Query.of({0: [1, 2], 2: [1]})
        ).value
        assert final["estimate"] == pytest.approx(expected)
        assert final["fractionScanned"] == 1.0
        assert final["margin"] == 0.0

    def test_malformed_query_json_is_400(self, live_cluster):
        url = live_cluster["gateway"].url
        resp = httpx.post(url + "/reports", content=b"{not json", headers={"Content-Type": "application/json"})
        assert resp.status_code == 400
        assert "error" in resp.json()
        resp = httpx.post(url + "/reports", json={"query": {"nope": [1]}})
        assert resp.status_code == 400

    def test_unknown_report_is_404(self, live_cluster):
        resp = httpx.get(live_cluster["gateway"].url + "/reports/ghost")
        assert resp.status_code == 404

    def test_evicted_report_is_404(self, live_cluster):
        url = live_cluster["gateway"].url
        agg = live_cluster["aggregator"]
        created = httpx.post(url + "/reports", json={"query": {"geo": [1]}})
        report_id = created.json()["reportId"]
        assert wait_for(
            lambda: httpx.get(f"{url}/reports/{report_id}").json().get("status") == "done",
            timeout=15.0,
        )
        agg.cache.pop(report_id, None)  # simulate retention expiry
        assert httpx.get(f"{url}/reports/{report_id}").status_code == 404

    def test_cluster_endpoint_lists_counters(self, live_cluster):
        resp = httpx.get(live_cluster["gateway"].url + "/cluster")
        assert resp.status_code == 200
        body = resp.json()
        assert len(body["counters"]) == 2
        assert all(c["rowCount"] > 0 for c in body["counters"])
