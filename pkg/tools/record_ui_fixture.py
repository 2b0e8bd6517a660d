"""Record progressive report timelines for the web console's test fixtures.

Runs the in-process cluster simulation, polls three reports at a fixed
interval, and writes their envelope histories in gateway JSON shape to
frontend/tests/fixtures/timelines.json.
"""

import json
import pathlib

import numpy as np

from stratacast.datamodel import Schema, generate_synthetic
from stratacast.harness import SimCluster, SimConfig
from stratacast.query import Query, format_query
from stratacast.strata import draw_fallback_stratified

OUT = pathlib.Path(__file__).resolve().parent.parent / "frontend" / "tests" / "fixtures"


def snapshots_for(cluster, outcome):
    out = []
    for at_ms, envelope in outcome.history:
        out.append(
            {
                "atMs": at_ms,
                "estimate": envelope.value,
                "margin": envelope.margin,
                "fractionScanned": envelope.fraction_scanned,
                "rowsMatched": envelope.rows_matched,
                "status": envelope.status,
            }
        )
    return out


def main():
    schema = Schema((("age", 4), ("geo", 5), ("device", 3)))
    theta = np.random.default_rng(1).normal(size=(4, 5))
    dataset = generate_synthetic(schema, [(0, 1, theta)], 6000, seed=4)
    sample = draw_fallback_stratified(dataset, 900, [0, 1], seed=5)

    def run(query):
        cfg = SimConfig(
            sample=sample,
            counters=3,
            sub_cluster=3,
            seed=11,
            per_row_scan_cost_ms=1.5,
            push_interval_ms=40.0,
            fetch_interval_ms=60.0,
        )
        cluster = SimCluster(cfg)
        cluster.start()
        rid = cluster.submit(query)
        outcome = cluster.await_report(rid)
        return {
            "reportId": outcome.report_id,
            "query": format_query(query, schema),
            "snapshots": snapshots_for(cluster, outcome),
        }

    wide = Query.of({0: [1, 2], 2: [1]})
    narrow = Query.of({0: [1], 1: [2], 2: [1]})
    fixture = {
        "schema": {
            "features": [{"name": n, "cardinality": m} for n, m in schema.features]
        },
        "reports": {
            "alpha": run(wide),
            "beta": run(wide),  # identical draft: estimates must coincide
            "gamma": run(narrow),
        },
    }
    OUT.mkdir(parents=True, exist_ok=True)
    path = OUT / "timelines.json"
    path.write_text(json.dumps(fixture, indent=1))
    for name, rec in fixture["reports"].items():
        snaps = rec["snapshots"]
        print(
            f"{name}: {len(snaps)} snapshots, final {snaps[-1]['estimate']:.1f} "
            f"± {snaps[-1]['margin']:.1f} [{snaps[-1]['status']}]"
        )
    print("wrote", path)


if __name__ == "__main__":
    main()
