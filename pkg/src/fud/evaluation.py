"""Evaluation battery: accuracy, saliency, membership inference, inversion, fairness."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from fud import tensor as T
from fud.data import Dataset
from fud.models import Classifier, Linear, Model, build
from fud.tensor import ContractError
from fud.training import epoch_rng, minibatches, predict_labels, predict_proba, train_classifier


class StratumError(ContractError):
    """A group/label combination needed by a fairness metric has no instances."""


# ---------------------------------------------------------------------------
# accuracy


def accuracy(model: Classifier, x: np.ndarray, y: np.ndarray | None = None) -> float:
    """Fraction of correct predictions; accepts a :class:`Dataset` or ``(x, y)``."""
    if isinstance(x, Dataset):
        x, y = x.x, x.y
    if len(x) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    pred = predict_labels(model, x)
    return float((pred.reshape(np.shape(y)) == y).mean())


def accuracy_variation(acc_before: float, acc_after: float) -> float:
    return acc_after - acc_before


# ---------------------------------------------------------------------------
# saliency


def guided_saliency(model: Classifier, x: np.ndarray, class_id: int, guided: bool = True) -> np.ndarray:
    """``|d output[class_id] / d x|`` summed over channels, ``[N, H, W]`` (``[H, W]`` for one image).

    Instances do not interact inside the model, so one backward pass of the
    summed class outputs yields every per-instance gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    inp = T.Tensor(x[None] if single else x, requires_grad=True)
    frozen = [p.requires_grad for p in model.parameters()]
    model.set_trainable(False)
    try:
        with T.Tape(mode="guided" if guided else "standard") as tape:
            out = model(inp)
            score = T.tsum(out[:, class_id])
        T.backward(tape, score)
    finally:
        for p, flag in zip(model.parameters(), frozen):
            p.requires_grad = flag
    sal = np.abs(inp.grad).sum(axis=1)
    return sal[0] if single else sal


def region_energy(saliency: np.ndarray, region: np.ndarray) -> float:
    """Share of total saliency mass inside ``region`` (0 when the map is all zero)."""
    saliency = np.asarray(saliency, dtype=np.float64)
    region = np.broadcast_to(np.asarray(region, dtype=bool), saliency.shape)
    total = saliency.sum()
    if total <= 0:
        return 0.0
    return float(saliency[region].sum() / total)


# ---------------------------------------------------------------------------
# representation probe


def hidden_features(model: Classifier, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Post-relu hidden-layer activations (the input of the output layer)."""
    feats = []
    for i in range(0, len(x), batch_size):
        h = T.as_tensor(x[i : i + batch_size])
        for conv in model.convs:
            h = T.max_pool2d(T.relu(conv(h)), model.spec.pool)
        h = T.reshape(h, (h.shape[0], -1))
        feats.append(T.relu(model.hidden(h)).data)
    return np.concatenate(feats)


def fit_logistic(features: np.ndarray, bits: np.ndarray, steps: int = 500, lr: float = 0.5, l2: float = 1e-3):
    """Full-batch gradient descent logistic regression on standardized features."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    z = (features - mu) / sd
    w = np.zeros(z.shape[1])
    b = 0.0
    t = np.asarray(bits, dtype=np.float64)
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-np.clip(z @ w + b, -30, 30)))
        g = p - t
        w -= lr * (z.T @ g / len(z) + l2 * w)
        b -= lr * g.mean()
    return lambda f: (((f - mu) / sd) @ w + b > 0).astype(np.int64)


def feature_probe(model: Classifier, train: Dataset, test: Dataset, feature: int) -> float:
    """Accuracy of a freshly fit linear probe reading ``feature`` from the model's hidden layer."""
    predict = fit_logistic(hidden_features(model, train.x), train.f[:, feature])
    return float((predict(hidden_features(model, test.x)) == test.f[:, feature]).mean())


# ---------------------------------------------------------------------------
# membership inference


@dataclass
class MIAConfig:
    shadows: int = 10
    shadow_epochs: int = 10
    batch_size: int = 64
    shadow_lr: float = 0.05
    attack_hidden: tuple[int, int] = (256, 128)
    attack_epochs: int = 30
    attack_lr: float = 0.05
    features: str = "sorted"
    seed: int = 0

    def __post_init__(self):
        if self.shadows < 1 or self.shadow_epochs < 0 or self.batch_size < 1:
            raise ContractError("invalid membership-inference settings")
        if self.features not in ("sorted", "label"):
            raise ContractError("attack features must be 'sorted' or 'label'")


class AttackMLP(Model):
    """Two relu hidden layers and a sigmoid membership score."""

    kind = "attack"

    def __init__(self, fan_in: int, hidden=(256, 128), seed: int = 0):
        rng = np.random.default_rng([seed, 0xA77])
        self.layers = []
        width = fan_in
        for h in hidden:
            self.layers.append(Linear(width, h, rng))
            width = h
        self.out = Linear(width, 1, rng)

    def parameters(self):
        out = []
        for layer in self.layers + [self.out]:
            out += layer.parameters()
        return out

    def __call__(self, x):
        h = T.as_tensor(x)
        for layer in self.layers:
            h = T.relu(layer(h))
        return T.sigmoid(self.out(h))


def attack_features(model: Classifier, x: np.ndarray, y: np.ndarray, kind: str = "sorted") -> np.ndarray:
    """Output probabilities sorted descending; ``kind='label'`` prepends the true-label probability."""
    p = predict_proba(model, x)
    if model.spec.head == "sigmoid" and p.shape[1] == 1:
        p = np.concatenate([1 - p, p], axis=1)
    ordered = -np.sort(-p, axis=1)
    if kind == "label":
        return np.concatenate([p[np.arange(len(p)), y][:, None], ordered], axis=1)
    return ordered


class MembershipAttack:
    """Shadow-model membership inference, trained once and reusable on many targets.

    Each shadow model (architecture ``spec``) trains on a random half of
    ``shadow_pool``; its outputs on that half are labelled "in" and on the
    other half "out".  The attack network learns to tell them apart.
    """

    def __init__(self, spec, shadow_pool: Dataset, config: MIAConfig | None = None):
        config = config or MIAConfig()
        if len(shadow_pool) < 4:
            raise ContractError("shadow pool too small to split into in/out halves")
        self.config = config
        feats, labels = [], []
        for s in range(config.shadows):
            rng = np.random.default_rng([config.seed, 0x5AD0, s])
            order = rng.permutation(len(shadow_pool))
            half = len(order) // 2
            inside, outside = shadow_pool.subset(order[:half]), shadow_pool.subset(order[half : 2 * half])
            shadow = build(spec, seed=int(rng.integers(2**31)))
            train_classifier(shadow, inside.x, inside.y, config.shadow_epochs, config.shadow_lr, config.batch_size, int(rng.integers(2**31)))
            feats += [attack_features(shadow, inside.x, inside.y, config.features), attack_features(shadow, outside.x, outside.y, config.features)]
            labels += [np.ones(len(inside)), np.zeros(len(outside))]
        X = np.concatenate(feats)
        Y = np.concatenate(labels)
        self.attack = AttackMLP(X.shape[1], config.attack_hidden, config.seed)
        params = self.attack.parameters()
        for epoch in range(config.attack_epochs):
            for idx in minibatches(len(X), config.batch_size, epoch_rng(config.seed, 0xA7, epoch)):
                self.attack.zero_grad()
                with T.Tape() as tape:
                    loss = T.bce(self.attack(X[idx]), Y[idx][:, None])
                T.backward(tape, loss)
                T.sgd_step(params, config.attack_lr)
        self.attack.set_trainable(False)

    def success(self, target, members: Dataset, nonmembers: Dataset, query_class: int | None = None) -> float:
        """Attack accuracy on a balanced member/non-member query set.

        ``query_class`` restricts the query set to one class.
        """
        mem, non = members, nonmembers
        if query_class is not None:
            mem = members.subset(np.flatnonzero(members.y == query_class))
            non = nonmembers.subset(np.flatnonzero(nonmembers.y == query_class))
        k = min(len(mem), len(non))
        if k == 0:
            raise ContractError("no member/non-member pairs to query")
        pick = np.random.default_rng([self.config.seed, 0x9E]).permutation
        mem = mem.subset(pick(len(mem))[:k])
        non = non.subset(pick(len(non))[:k])
        kind = self.config.features
        q = np.concatenate([attack_features(target, mem.x, mem.y, kind), attack_features(target, non.x, non.y, kind)])
        truth = np.concatenate([np.ones(k), np.zeros(k)])
        guess = (self.attack(q).data[:, 0] > 0.5).astype(float)
        return float((guess == truth).mean())


def mia_attack(
    target: Classifier,
    members: Dataset,
    nonmembers: Dataset,
    shadow_pool: Dataset,
    config: MIAConfig | None = None,
    query_class: int | None = None,
) -> float:
    """One-shot membership inference against ``target``; see :class:`MembershipAttack`."""
    return MembershipAttack(target.spec, shadow_pool, config).success(target, members, nonmembers, query_class)


# ---------------------------------------------------------------------------
# model inversion


def model_inversion(model: Classifier, class_id: int, steps: int = 100, lr: float = 0.1, objective: str = "logit") -> np.ndarray:
    """Gradient ascent from a zero image, clamped to [0, 1] after each step.

    ``objective`` is ``"logit"`` (the raw class output) or ``"confidence"``
    (the log of the softmax class probability, which also pushes competing
    classes down).
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    if objective not in ("logit", "confidence"):
        raise ContractError(f"unknown inversion objective {objective!r}")
    x = np.zeros((1,) + tuple(model.spec.input_shape))
    frozen = [p.requires_grad for p in model.parameters()]
    model.set_trainable(False)
    try:
        for _ in range(steps):
            inp = T.Tensor(x, requires_grad=True)
            with T.Tape() as tape:
                out = model(inp)
                score = out[0, class_id] if objective == "logit" else -T.cross_entropy(out, np.array([class_id]))
            T.backward(tape, score)
            x = np.clip(x + lr * inp.grad, 0.0, 1.0)
    finally:
        for p, flag in zip(model.parameters(), frozen):
            p.requires_grad = flag
    return x[0]


def region_contrast(image: np.ndarray, region: np.ndarray) -> float:
    """Mean intensity inside ``region`` minus mean intensity outside it."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=0) if img.ndim == 3 else img
    region = np.asarray(region, dtype=bool)
    return float(gray[region].mean() - gray[~region].mean())


# ---------------------------------------------------------------------------
# fairness


@dataclass
class FairnessReport:
    eod: float
    dpd: float
    aps: float

    def to_dict(self) -> dict:
        return asdict(self)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall step curve: ``sum_k (R_k - R_{k-1}) P_k`` over distinct thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    positives = labels.sum()
    if positives == 0:
        raise StratumError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(l)[ends]
    precision = tp / (ends + 1)
    recall = tp / positives
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fairness_metrics(preds, labels, groups, scores=None) -> FairnessReport:
    """Equalized-odds difference, demographic-parity difference and average precision.

    ``scores`` (default: the hard predictions) rank instances for the
    average precision.
    """
    preds = np.asarray(preds).astype(int)
    labels = np.asarray(labels).astype(int)
    groups = np.asarray(groups).astype(int)
    rates = {}
    for g in (0, 1):
        sel = groups == g
        if not sel.any():
            raise StratumError(f"no instances with group={g}")
        rates[g] = preds[sel].mean()
    dpd = abs(rates[0] - rates[1])
    eod = 0.0
    for y in (0, 1):
        cond = {}
        for g in (0, 1):
            sel = (groups == g) & (labels == y)
            if not sel.any():
                raise StratumError(f"no instances with group={g}, label={y}")
            cond[g] = preds[sel].mean()
        eod = max(eod, abs(cond[0] - cond[1]))
    aps = average_precision(preds if scores is None else scores, labels)
    return FairnessReport(float(eod), float(dpd), aps)


# ---------------------------------------------------------------------------
# output files


def _atomic_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary P6 encoding of a ``[C, H, W]`` or ``[H, W]`` image in [0, 1] (auto-scaled if not)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    elif img.shape[0] != 3:
        raise ContractError(f"cannot write a {img.shape[0]}-channel image as PPM")
    lo, hi = img.min(), img.max()
    if lo < 0 or hi > 1:
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    pixels = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    _atomic_bytes(path, ppm_bytes(image))


def _plain(obj):
    """JSON-ready copy: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj) -> None:
    """Strict JSON (NaN and infinities written as null), sorted keys, written atomically."""
    _atomic_bytes(path, (json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n").encode())


class MaskedModel:
    """``model`` behind a remover: ``model(x * mask(x))``; looks like a classifier to the evaluators."""

    def __init__(self, model: Classifier, remover):
        from fud.models import apply_remover

        self.model = model
        self.remover = remover
        self.spec = model.spec
        self._apply = apply_remover

    def parameters(self):
        return self.model.parameters() + self.remover.parameters()

    def set_trainable(self, flag: bool) -> None:
        self.model.set_trainable(flag)
        self.remover.set_trainable(flag)

    def __call__(self, x):
        return self.model(self._apply(self.remover, x))
