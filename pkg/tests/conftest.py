import pytest

from affinet import data
from affinet.optim import TrainConfig


@pytest.fixture(scope="session")
def tiny_train_set():
    return data.synthetic_digits(4, seed=100, size=32)


@pytest.fixture(scope="session")
def tiny_test_set():
    return data.synthetic_digits(3, seed=101, size=32)


def tiny_config(**overrides):
    """A configuration small enough for sub-second training runs."""
    base = dict(
        iterations=6, batch_size=8, channels=(2, 2, 2, 2, 2), fc_dim=8,
        lr_drops=((4, 0.1),), eval_every=3, log_every=2, lambda2=150.0, seed=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


def split_metrics_csv(text):
    comments, header, rows = [], None, []
    for line in text.strip().splitlines():
        if line.startswith("#"):
            comments.append(line)
        elif header is None:
            header = line
        else:
            rows.append(line.split(","))
    return comments, header, rows


def assert_csv_identical_modulo_timing(text_a, text_b):
    """Bitwise equality of two metrics CSVs except the wall-clock column."""
    ca, ha, ra = split_metrics_csv(text_a)
    cb, hb, rb = split_metrics_csv(text_b)
    assert ca == cb
    assert ha == hb == "iter,lr,ce,r1,r2,train_acc,ms_per_iter"
    assert len(ra) == len(rb)
    for row_a, row_b in zip(ra, rb):
        assert row_a[:6] == row_b[:6]
