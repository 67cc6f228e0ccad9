"""Feature unlearning with known annotations.

A remover ``E`` learns a multiplicative mask that hides the target features
from a frozen adversary ``C`` while keeping the original model ``M`` accurate
on the masked instances; ``M`` is then fine-tuned on those masked instances.
The two sub-processes alternate one epoch at a time: even iterations train
the remover, odd iterations fine-tune ``M``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from fud import tensor as T
from fud.data import Dataset
from fud.models import Classifier, ClassifierSpec, Remover, apply_remover, build
from fud.tensor import ContractError
from fud.training import (
    DivergenceError,
    check_finite,
    epoch_rng,
    minibatches,
    predict_labels,
    train_classifier,
)

TRACE_FIELDS = ("iteration", "phase", "adv_acc", "task_acc", "l1_term", "l_m", "l_c")


@dataclass
class AdvUnlearnConfig:
    beta: float = 5.0
    lam: float = 5.0
    iterations: int = 10
    lr_remover: float = 0.05
    lr_finetune: float = 0.01
    lr_adversary: float = 0.05
    batch_size: int = 64
    targets: Sequence[int] = (1,)
    adversary_epochs: int = 3
    adversary_samples: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.targets = tuple(int(t) for t in self.targets)
        if len(self.targets) < 1:
            raise ContractError("at least one target feature is required")
        for name in ("beta", "lam", "lr_remover", "lr_finetune", "lr_adversary"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ContractError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class UnlearnTrace:
    records: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.records.append(row)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def to_csv(self, fields: Sequence[str] = TRACE_FIELDS) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.records:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "UnlearnTrace":
        trace = cls()
        for row in csv.DictReader(io.StringIO(text)):
            parsed = {}
            for k, v in row.items():
                if k == "phase":
                    parsed[k] = v
                elif k == "iteration" or k == "epoch":
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v) if v not in ("", None) else float("nan")
            trace.records.append(parsed)
        return trace


# ---------------------------------------------------------------------------
# adversary


def adversary_spec(base: ClassifierSpec, m: int) -> ClassifierSpec:
    """Copy of ``base`` with ``m`` independent sigmoid heads."""
    return ClassifierSpec(
        conv=list(base.conv), pool=base.pool, hidden=base.hidden, outputs=m, head="sigmoid", input_shape=base.input_shape
    )


def train_adversary(
    C: Classifier,
    dataset: Dataset,
    targets: Sequence[int],
    epochs: int,
    lr: float = 0.05,
    batch_size: int = 64,
    seed: int = 0,
    max_instances: int | None = None,
) -> Classifier:
    """Fit ``C`` to predict the target annotation bits from raw instances.

    ``max_instances`` fits on a seeded random subset.  On large sets a fully
    trained adversary becomes so confident that the remover's adversarial
    term gets almost no gradient through it; capping its training keeps it
    informative.
    """
    targets = list(targets)
    if max_instances is not None and max_instances < len(dataset):
        keep = np.random.default_rng([seed, 0xADF]).permutation(len(dataset))[:max_instances]
        dataset = dataset.subset(np.sort(keep))
    if max(targets) >= dataset.f.shape[1] or min(targets) < 0:
        raise ContractError(f"targets {targets} exceed annotation width {dataset.f.shape[1]}")
    if C.spec.head != "sigmoid" or C.spec.outputs != len(targets):
        raise ContractError(f"adversary needs {len(targets)} sigmoid heads")
    train_classifier(C, dataset.x, dataset.f[:, targets], epochs, lr, batch_size, seed)
    return C


def adversary_accuracy(C: Classifier, x: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Per-head accuracy at threshold 0.5."""
    pred = predict_labels(C, x)
    return (pred == np.asarray(bits).reshape(pred.shape)).mean(axis=0)


def masked_instances(E: Remover, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([apply_remover(E, x[i : i + batch_size]).data for i in range(0, len(x), batch_size)])


# ---------------------------------------------------------------------------
# losses and steps


def remover_loss(E: Remover, M: Classifier, C: Classifier, x, y, bits, beta: float, lam: float):
    """``beta*|x - x_hat|_1 + L(M(x_hat), y) - lam*L(C(x_hat), f)`` and its three components.

    The L1 term is the mean absolute difference per pixel.
    """
    x = T.as_tensor(x)
    x_hat = apply_remover(E, x)
    l1_term = T.l1(x_hat, x)
    l_m = T.cross_entropy(M(x_hat), y)
    c_out = C(x_hat)
    l_c = T.bce(c_out, np.asarray(bits, dtype=np.float64).reshape(c_out.shape))
    total = beta * l1_term + l_m - lam * l_c
    return total, {"l1_term": l1_term.item(), "l_m": l_m.item(), "l_c": l_c.item()}


def finetune_step(M: Classifier, E: Remover, x, y, lr: float) -> float:
    """One SGD step of ``M`` on masked instances; ``E`` is treated as frozen."""
    x_hat = apply_remover(E, x).data
    M.zero_grad()
    with T.Tape() as tape:
        loss = T.cross_entropy(M(x_hat), y)
    value = loss.item()
    check_finite(value, phase="finetune")
    T.backward(tape, loss)
    T.sgd_step(M.parameters(), lr)
    return value


def remover_epoch(E, M, C, train: Dataset, cfg: AdvUnlearnConfig, iteration: int) -> dict:
    M.set_trainable(False)
    C.set_trainable(False)
    E.set_trainable(True)
    params = E.parameters()
    sums = {"l1_term": 0.0, "l_m": 0.0, "l_c": 0.0}
    batches = 0
    bits = train.f[:, list(cfg.targets)]
    for idx in minibatches(len(train), cfg.batch_size, epoch_rng(cfg.seed, 0xE, iteration)):
        E.zero_grad()
        with T.Tape() as tape:
            loss, comps = remover_loss(E, M, C, train.x[idx], train.y[idx], bits[idx], cfg.beta, cfg.lam)
        check_finite(loss.item(), iteration=iteration, phase="remover", **comps)
        T.backward(tape, loss)
        T.sgd_step(params, cfg.lr_remover)
        for k in sums:
            sums[k] += comps[k]
        batches += 1
    return {k: v / max(batches, 1) for k, v in sums.items()}


def finetune_epoch(M, E, C, train: Dataset, cfg: AdvUnlearnConfig, iteration: int) -> dict:
    E.set_trainable(False)
    C.set_trainable(False)
    M.set_trainable(True)
    total, batches = 0.0, 0
    for idx in minibatches(len(train), cfg.batch_size, epoch_rng(cfg.seed, 0xF, iteration)):
        try:
            total += finetune_step(M, E, train.x[idx], train.y[idx], cfg.lr_finetune)
        except DivergenceError as err:
            raise DivergenceError(f"fine-tuning diverged at iteration {iteration}", dict(err.diagnostic, iteration=iteration))
        batches += 1
    return {"l1_term": float("nan"), "l_m": total / max(batches, 1), "l_c": float("nan")}


def unlearn_annotated(
    M: Classifier,
    E: Remover,
    C: Classifier,
    dataset: Dataset,
    config: AdvUnlearnConfig,
    holdout: Dataset | None = None,
    trace: UnlearnTrace | None = None,
    start_iteration: int = 0,
    on_iteration: Callable[[int, UnlearnTrace], None] | None = None,
) -> tuple[Classifier, UnlearnTrace]:
    """Alternate remover epochs (even iterations) and fine-tune epochs (odd iterations).

    ``C`` must already be trained; it stays frozen.  ``M`` is updated in place
    and returned.  ``holdout`` (default: ``dataset``) supplies the per-iteration
    metrics: adversary accuracy (worst head) and task accuracy on masked
    instances, plus task accuracy on raw instances.
    Passing ``trace`` and ``start_iteration`` resumes an interrupted run.
    """
    holdout = dataset if holdout is None else holdout
    trace = UnlearnTrace() if trace is None else trace
    hold_bits = holdout.f[:, list(config.targets)]
    for it in range(start_iteration, config.iterations):
        if it % 2 == 0:
            phase = "remover"
            comps = remover_epoch(E, M, C, dataset, config, it)
        else:
            phase = "finetune"
            comps = finetune_epoch(M, E, C, dataset, config, it)
        M.set_trainable(False)
        E.set_trainable(False)
        x_hat = masked_instances(E, holdout.x)
        adv = adversary_accuracy(C, x_hat, hold_bits)
        row = {
            "iteration": it,
            "phase": phase,
            "adv_acc": float(adv.max()),
            "task_acc": float((predict_labels(M, x_hat) == holdout.y).mean()),
            "task_acc_raw": float((predict_labels(M, holdout.x) == holdout.y).mean()),
            **comps,
        }
        for j, a in enumerate(adv):
            row[f"adv_acc_{j}"] = float(a)
        trace.append(**row)
        if on_iteration is not None:
            on_iteration(it, trace)
    M.set_trainable(True)
    return M, trace


# ---------------------------------------------------------------------------
# instance-level baselines


@dataclass
class BaselineResult:
    model: Classifier
    steps: int
    empty: bool
    remaining: int


def baseline_instance_finetune(
    M: Classifier,
    dataset: Dataset,
    predicate: Callable[[np.ndarray], bool],
    epochs: int,
    lr: float = 0.01,
    batch_size: int = 64,
    seed: int = 0,
) -> BaselineResult:
    """Drop instances matching ``predicate`` and fine-tune ``M`` (in place) on the rest."""
    keep = np.array([not predicate(row) for row in dataset.f], dtype=bool)
    remaining = dataset.subset(np.flatnonzero(keep))
    if len(remaining) == 0:
        return BaselineResult(M, 0, True, 0)
    train_classifier(M, remaining.x, remaining.y, epochs, lr, batch_size, seed)
    steps = epochs * -(-len(remaining) // batch_size)
    return BaselineResult(M, steps, False, len(remaining))


def baseline_instance_retrain(
    spec: ClassifierSpec,
    dataset: Dataset,
    predicate: Callable[[np.ndarray], bool],
    epochs: int,
    lr: float = 0.05,
    batch_size: int = 64,
    seed: int = 0,
) -> BaselineResult:
    """Train a fresh model on the instances not matching ``predicate``.

    With nothing left to train on, the returned model has a zeroed output
    layer: it carries no evidence for any class and predicts class 0.
    """
    model = build(spec, seed)
    keep = np.array([not predicate(row) for row in dataset.f], dtype=bool)
    remaining = dataset.subset(np.flatnonzero(keep))
    if len(remaining) == 0:
        model.head.weight.data[...] = 0.0
        model.head.bias.data[...] = 0.0
        return BaselineResult(model, 0, True, 0)
    train_classifier(model, remaining.x, remaining.y, epochs, lr, batch_size, seed)
    steps = epochs * -(-len(remaining) // batch_size)
    return BaselineResult(model, steps, False, len(remaining))


def config_dict(cfg: AdvUnlearnConfig) -> dict:
    d = asdict(cfg)
    d["targets"] = list(cfg.targets)
    return d
