"""Training and evaluation loops with streamed CSV metrics.

A run is a pure function of (config, data): batch order, augmentation and
initialization all derive from config.seed, so two runs with identical inputs
produce identical metrics apart from the wall-clock ms_per_iter column.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn, rings
from .checkpoint import Checkpoint
from .data import rotate_batch
from .model import build_network, collect_filter_bank
from .optim import OptState, lr_at, sgd_step, total_loss_and_grads

CSV_HEADER = "iter,lr,ce,r1,r2,train_acc,ms_per_iter"


@dataclass
class LogRow:
    iteration: int
    lr: float
    ce: float
    r1: float
    r2: float
    train_acc: float
    ms_per_iter: float

    def csv(self):
        return (
            f"{self.iteration},{self.lr!r},{self.ce!r},{self.r1!r},"
            f"{self.r2!r},{self.train_acc!r},{self.ms_per_iter:.3f}"
        )


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)  # (iteration, accuracy)
    final_test_accuracy: float = None
    parameter_count: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def final_r2(self):
        return self.rows[-1].r2 if self.rows else None


class _BatchSampler:
    """Seeded batch index stream.

    Sets larger than the batch are consumed in shuffled epochs (remainders
    carry into the next epoch). Sets that fit in one batch are taken whole and,
    if smaller, topped up by sampling with replacement, so the configured batch
    size is preserved for batch-statistics purposes.
    """

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._queue = np.empty(0, dtype=np.int64)

    def next(self):
        if self.n <= self.batch_size:
            base = np.arange(self.n)
            extra = self.batch_size - self.n
            if extra:
                return np.concatenate([base, self.rng.integers(0, self.n, size=extra)])
            return base
        while len(self._queue) < self.batch_size:
            self._queue = np.concatenate([self._queue, self.rng.permutation(self.n)])
        batch, self._queue = self._queue[: self.batch_size], self._queue[self.batch_size :]
        return batch


def _provenance(config, train_set, eval_set):
    prov = {f"config.{k}": str(v) for k, v in config.asdict().items()}
    prov.update({f"train_data.{k}": str(v) for k, v in train_set.provenance.items()})
    if eval_set is not None:
        prov.update({f"eval_data.{k}": str(v) for k, v in eval_set.provenance.items()})
    return prov


def train(config, train_set, eval_set=None, csv_path=None, checkpoint_path=None, log=None):
    """Run the full objective for config.iterations steps.

    Returns (RunMetrics, Checkpoint). Streams one CSV row every
    config.log_every iterations (provenance as leading '#' comments) and
    evaluates on eval_set every config.eval_every iterations plus once at the
    end. Aborts with the failing iteration if the loss or a gradient goes
    non-finite.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    n, in_ch, h, w = train_set.images.shape
    if h != w:
        raise ValueError(f"expected square images, got {h}x{w}")
    net = build_network(
        config.channels, train_set.class_count, input_channels=in_ch,
        max_depth=config.max_depth, input_size=h, fc_dim=config.fc_dim,
        seed=config.seed,
    )
    params = net.parameters()
    opt_state = OptState.for_params(params)
    bank = collect_filter_bank(net)
    pattern = rings.build_hash_pattern(config.pattern)
    batch_rng = np.random.default_rng([config.seed, 1])
    augment_rng = np.random.default_rng([config.seed, 2])
    sampler = _BatchSampler(n, config.batch_size, batch_rng)

    metrics = RunMetrics(
        parameter_count=net.parameter_count(),
        provenance=_provenance(config, train_set, eval_set),
    )
    csv_file = open(csv_path, "w") if csv_path else None
    try:
        if csv_file:
            for key in sorted(metrics.provenance):
                csv_file.write(f"# {key}={metrics.provenance[key]}\n")
            csv_file.write(CSV_HEADER + "\n")

        correct = total = 0
        window_start = time.perf_counter()
        window_iters = 0
        for it in range(config.iterations):
            lr = lr_at(config, it)
            idx = sampler.next()
            images = train_set.images[idx]
            labels = train_set.labels[idx]
            if config.augment == "rotate":
                images = rotate_batch(images, augment_rng)
            components, logits = total_loss_and_grads(
                net, images, labels, config, bank, pattern
            )
            if not np.isfinite(components["ce"]):
                raise nn.NonFiniteError(f"loss became non-finite at iteration {it}")
            sgd_step(params, opt_state, lr, config)
            window_iters += 1
            correct += int((logits.argmax(axis=1) == labels).sum())
            total += len(labels)

            if it % config.log_every == 0:
                elapsed = time.perf_counter() - window_start
                row = LogRow(
                    iteration=it, lr=lr,
                    ce=components["ce"], r1=components["r1"], r2=components["r2"],
                    train_acc=correct / total,
                    ms_per_iter=1000.0 * elapsed / window_iters,
                )
                metrics.rows.append(row)
                if csv_file:
                    csv_file.write(row.csv() + "\n")
                    csv_file.flush()
                if log:
                    log(
                        f"iter {it:>6}  lr {lr:.2e}  ce {row.ce:.4f}  "
                        f"r2 {row.r2:.3e}  acc {row.train_acc:.3f}  "
                        f"{row.ms_per_iter:.0f} ms/iter"
                    )
                correct = total = 0
                window_start = time.perf_counter()
                window_iters = 0

            if (
                eval_set is not None
                and config.eval_every
                and (it + 1) % config.eval_every == 0
            ):
                acc = evaluate_network(net, eval_set, config.batch_size)
                metrics.eval_history.append((it + 1, acc))
                if log:
                    log(f"iter {it + 1:>6}  eval accuracy {acc:.4f}")
    finally:
        if csv_file:
            csv_file.close()

    if eval_set is not None:
        metrics.final_test_accuracy = evaluate_network(net, eval_set, config.batch_size)

    ckpt = Checkpoint.snapshot(
        net, opt_state, config.asdict(), config.iterations,
        rng_state={
            "batch": batch_rng.bit_generator.state,
            "augment": augment_rng.bit_generator.state,
        },
        provenance=metrics.provenance,
    )
    if checkpoint_path:
        ckpt.save(checkpoint_path)
    return metrics, ckpt


def evaluate_network(net, dataset, batch_size=100):
    """Deterministic top-1 accuracy in infer mode."""
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    if dataset.class_count != net.n_classes:
        raise ValueError(
            f"network has {net.n_classes} classes, dataset has {dataset.class_count}"
        )
    correct = 0
    for i in range(0, len(dataset), batch_size):
        logits = net.forward(dataset.images[i : i + batch_size], mode="infer")
        correct += int((logits.argmax(axis=1) == dataset.labels[i : i + batch_size]).sum())
    return correct / len(dataset)


def evaluate(ckpt, dataset, batch_size=100):
    """Accuracy of a checkpointed network on a dataset."""
    return evaluate_network(ckpt.restore_network(), dataset, batch_size)


def parse_metrics_csv(path):
    """Rows and provenance comments back out of a metrics CSV."""
    rows, prov = [], {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                prov[key] = value
            elif line and not line.startswith("iter,"):
                it, lr, ce, r1, r2, acc, ms = line.split(",")
                rows.append(LogRow(int(it), float(lr), float(ce), float(r1),
                                   float(r2), float(acc), float(ms)))
    return rows, prov
