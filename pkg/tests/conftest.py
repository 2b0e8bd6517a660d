import numpy as np
import pytest

from stratacast.datamodel import Dataset, Schema, dataset_from_rows


@pytest.fixture
def toy_schema():
    return Schema((("color", 2), ("device", 2)))


@pytest.fixture
def toy_dataset(toy_schema):
    """100 rows over two binary features with cell populations 20/10/30/40."""
    rows = (
        [(1, 1)] * 20 + [(1, 2)] * 10 + [(2, 1)] * 30 + [(2, 2)] * 40
    )
    return dataset_from_rows(toy_schema, rows)


def shuffled_toy_dataset(seed=7):
    schema = Schema((("color", 2), ("device", 2)))
    rows = [(1, 1)] * 20 + [(1, 2)] * 10 + [(2, 1)] * 30 + [(2, 2)] * 40
    rng = np.random.default_rng(seed)
    rng.shuffle(rows)
    return dataset_from_rows(schema, rows)


def empirical_mutual_information(dataset: Dataset, j: int, k: int) -> float:
    """Plain-count MI oracle in nats, independent of the learner's code path."""
    col_j = dataset.column(j).astype(int)
    col_k = dataset.column(k).astype(int)
    mask = (col_j != 0) & (col_k != 0)
    a, b = col_j[mask], col_k[mask]
    n = len(a)
    mi = 0.0
    for t in sorted(set(a.tolist())):
        for q in sorted(set(b.tolist())):
            joint = float(((a == t) & (b == q)).sum()) / n
            if joint == 0:
                continue
            pj = float((a == t).sum()) / n
            pk = float((b == q).sum()) / n
            mi += joint * np.log(joint / (pj * pk))
    return mi
