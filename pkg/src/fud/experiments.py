"""End-to-end experiments on planted-glyph data.

Each function builds its data and models from a seed, runs one pipeline and
returns a plain dict of measurements.  The settings below are the frozen,
calibrated defaults; the CLI presets and the acceptance suite both use them.

All experiments use 16x16 images with 4-pixel glyphs: each grid cell then
maps onto exactly one cell of the classifier's last pooled feature map.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from fud.adversarial import (
    AdvUnlearnConfig,
    adversary_accuracy,
    adversary_spec,
    baseline_instance_finetune,
    baseline_instance_retrain,
    masked_instances,
    train_adversary,
    unlearn_annotated,
)
from fud.blind import EncodeConfig, aligned_group, group_alignment, unlearn_blind
from fud.data import (
    BIASED_COUNTS,
    Dataset,
    DatasetConfig,
    FeatureSpec,
    Glyph,
    generate_dataset,
    generate_one_of,
    region_mask,
    shape_region,
    split,
    standard_features,
)
from fud.evaluation import (
    MaskedModel,
    MembershipAttack,
    MIAConfig,
    accuracy,
    fairness_metrics,
    feature_probe,
    guided_saliency,
    model_inversion,
    region_contrast,
    region_energy,
)
from fud.identify import train_identifier
from fud.models import Classifier, ClassifierSpec, Identifier, RemoverSpec, build
from fud.training import predict_proba, train_classifier

IMAGE_HW = (16, 16)
GLYPH_SIZE = 4

# frozen settings shared by the annotated experiments
BASE_EPOCHS = 3
BASE_LR = 0.05
ADVERSARY_EPOCHS = 3
LR_REMOVER = 0.01
LR_FINETUNE = 0.01


@dataclass
class GlyphSetup:
    """Train/test split of a planted-glyph set plus a matching classifier spec."""

    train: Dataset
    test: Dataset
    spec: ClassifierSpec
    features: list[FeatureSpec]
    config: DatasetConfig


def glyph_setup(seed: int, n: int = 1000, colored: bool = False, train_fraction: float = 0.8) -> GlyphSetup:
    """Task glyph (square) plus two independent glyphs: ``target`` (cross) and ``other`` (triangle)."""
    channels = 3 if colored else 1
    shape = (channels,) + IMAGE_HW
    feats = standard_features(colored=colored, glyph_size=GLYPH_SIZE)
    cfg = DatasetConfig(n=n, features=feats, task="task", image_size=shape, seed=seed)
    train, test = split(generate_dataset(cfg), train_fraction, seed)
    return GlyphSetup(train, test, ClassifierSpec(input_shape=shape), feats, cfg)


def train_base(spec: ClassifierSpec, data: Dataset, seed: int, epochs: int = BASE_EPOCHS, lr: float = BASE_LR, batch_size: int = 64) -> Classifier:
    model = build(spec, seed)
    train_classifier(model, data.x, data.y, epochs, lr, batch_size, seed)
    return model


def saliency_shares(model, x: np.ndarray, region: np.ndarray, class_id: int = 1) -> float:
    """Mean share of guided-backprop saliency that falls inside ``region``."""
    maps = guided_saliency(model, x, class_id)
    return float(np.mean([region_energy(s, region) for s in maps]))


def first_at_or_below(values, threshold: float) -> int | None:
    for i, v in enumerate(values):
        if v <= threshold:
            return i
    return None


# ---------------------------------------------------------------------------
# annotated unlearning


def annotated_experiment(
    seed: int,
    targets=(1,),
    beta: float = 5.0,
    lam: float = 5.0,
    iterations: int = 20,
    n: int = 1000,
    saliency: bool = True,
    lr_remover: float = LR_REMOVER,
    lr_finetune: float = LR_FINETUNE,
) -> dict:
    """Unlearn the annotated ``targets`` glyphs from a task-glyph classifier.

    Task accuracy afterwards is measured on the unlearned system, i.e. the
    fine-tuned model behind its remover.  With ``saliency`` the guided
    backprop share of the first target's cell is measured before and after
    on target-carrying test instances (class 1 saliency), together with the
    share of everything outside that cell.
    """
    s = glyph_setup(seed, n)
    targets = tuple(targets)
    M = train_base(s.spec, s.train, seed)
    pre_acc = accuracy(M, s.test)
    C = build(adversary_spec(s.spec, len(targets)), seed + 1)
    train_adversary(C, s.train, targets, ADVERSARY_EPOCHS, BASE_LR, 64, seed)
    E = build(RemoverSpec(input_shape=s.spec.input_shape), seed)
    raw_adv = adversary_accuracy(C, s.test.x, s.test.f[:, list(targets)])

    out: dict = {"seed": seed, "targets": list(targets), "beta": beta, "lam": lam, "pre_task_acc": pre_acc, "pre_adv_acc": raw_adv.tolist()}
    region = region_mask(s.features[targets[0]].glyph, s.config.image_size)
    carriers = s.test.x[s.test.f[:, targets[0]] == 1]
    if saliency:
        out["target_share_before"] = saliency_shares(M, carriers, region)

    cfg = AdvUnlearnConfig(
        beta=beta, lam=lam, iterations=iterations, lr_remover=lr_remover, lr_finetune=lr_finetune, targets=targets, seed=seed
    )
    start = time.perf_counter()
    M, trace = unlearn_annotated(M, E, C, s.train, cfg, holdout=s.test)
    out["seconds"] = time.perf_counter() - start
    system = MaskedModel(M, E)
    final_adv = adversary_accuracy(C, masked_instances(E, s.test.x), s.test.f[:, list(targets)])
    out.update(
        final_adv_acc=final_adv.tolist(),
        final_task_acc=accuracy(system, s.test),
        final_model_acc_raw=accuracy(M, s.test),
        adv_trace=trace.column("adv_acc"),
        task_trace=trace.column("task_acc"),
        first_iteration_adv_le_060=first_at_or_below(trace.column("adv_acc"), 0.60),
        trace=trace,
    )
    if saliency:
        after = saliency_shares(system, carriers, region)
        out["target_share_after"] = after
        out["offtarget_share_before"] = 1.0 - out["target_share_before"]
        out["offtarget_share_after"] = 1.0 - after
    return out


# ---------------------------------------------------------------------------
# instance-level baselines


def baseline_experiment(seed: int, n: int = 1000, finetune_epochs: int = 3) -> dict:
    """Instance-level unlearning of the target feature, both ways.

    Fine-tuning drops target-carrying instances and fine-tunes on the rest; a
    fresh linear probe on the model's hidden layer then tries to read the
    target bit.  Retraining removes every instance related to the target
    attribute: every instance has a value for it (present or absent), so
    nothing remains to train on.
    """
    s = glyph_setup(seed, n)
    target = s.train.feature_index("target")
    M = train_base(s.spec, s.train, seed)
    probe_before = feature_probe(M, s.train, s.test, target)
    ft = baseline_instance_finetune(M.copy(), s.train, lambda row: row[target] == 1, finetune_epochs, LR_FINETUNE, 64, seed)
    probe_after = feature_probe(ft.model, s.train, s.test, target)
    rt = baseline_instance_retrain(s.spec, s.train, lambda row: True, BASE_EPOCHS, BASE_LR, 64, seed)
    majority = float(max(np.mean(s.test.y == 0), np.mean(s.test.y == 1)))
    return {
        "seed": seed,
        "probe_before": probe_before,
        "probe_after_finetune": probe_after,
        "finetune_steps": ft.steps,
        "finetune_remaining": ft.remaining,
        "retrain_empty": rt.empty,
        "retrain_steps": rt.steps,
        "retrain_acc": accuracy(rt.model, s.test),
        "majority_rate": majority,
    }


# ---------------------------------------------------------------------------
# unlearning without annotations


def blind_experiment(
    seed: int,
    n: int = 1000,
    t1: int = 3,
    t2: int = 8,
    tau: float = 0.2,
    fill: float = 0.1,
    epochs: int = 3,
    lr: float = 0.05,
    probe: int = 128,
) -> dict:
    """Identify filter groups, then unlearn the group aligned with each glyph.

    Glyphs are colored (one channel each) so filters can tell them apart.
    Accuracy variation compares the original model on raw test instances
    with the unlearned model on encoded test instances.  Erased pixels are
    set to the background level.
    """
    s = glyph_setup(seed, n, colored=True)
    M = train_base(s.spec, s.train, seed)
    before = accuracy(M, s.test)
    ident = Identifier(s.spec, seed=seed + 7)
    res = train_identifier(ident, s.train.x, s.train.y, s.test.x[:probe], gamma=1.0, t1=t1, t2=t2, seed=seed)
    regions = np.array([region_mask(f.glyph, s.config.image_size) for f in s.features])
    align = group_alignment(ident, s.test.x, regions, tau)
    out = {"seed": seed, "k": res.k, "candidates": res.candidates, "acc_before": before, "glyphs": {}}
    for j, feat in enumerate(s.features):
        g = aligned_group(align, j)
        model = M.copy()
        cfg = EncodeConfig(group_id=g, tau=tau, fill=fill, lr=lr, epochs=epochs, seed=seed)
        _, trace, _ = unlearn_blind(model, ident, s.train, cfg, holdout=s.test)
        last = trace[-1]
        out["glyphs"][feat.name] = {
            "group": g,
            "precision": float(align["precision"][g - 1, j]),
            "coverage": float(align["coverage"][g - 1, j]),
            "iou": float(align["iou"][g - 1, j]),
            "acc_after_encoded": last["encoded_acc"],
            "acc_after_raw": last["task_acc"],
            "delta": last["encoded_acc"] - before,
        }
    return out


# ---------------------------------------------------------------------------
# fine-tuning versus retraining for class removal

CLASS_CELLS = ((1, 1), (1, 2), (2, 1), (2, 2))


def class_unlearning_experiment(
    seed: int,
    n: int = 1200,
    unlearn_class: int = 2,
    epochs: int = 20,
    lr: float = 0.02,
    batch_size: int = 32,
    finetune_lr: float = 0.1,
    finetune_epochs: int = 3,
    noise: float = 0.25,
    shadows: int = 10,
    inversion_steps: int = 100,
    inversion_lr: float = 1.0,
) -> dict:
    """Remove one class by fine-tuning on the other classes, and by retraining.

    The class is the glyph's shape (square, cross, triangle), drawn in a
    random central cell, so all classes share filters.  Reports membership
    inference on the removed class, model-inversion contrast on the removed
    shape's pixels, and wall-clock time: fine-tuning until the removed class
    is at or below chance with the other classes kept within 0.05, against
    retraining until the other classes reach that accuracy again.
    """
    feats = standard_features(names=("c0", "c1", "c2"), glyph_size=GLYPH_SIZE)
    shape = (1,) + IMAGE_HW
    make = lambda s: DatasetConfig(n=n, features=feats, task="c0", image_size=shape, noise=noise, seed=s)  # noqa: E731
    train, test = split(generate_one_of(make(seed), CLASS_CELLS), 0.5, seed)
    pool = generate_one_of(make(seed + 1000), CLASS_CELLS)
    k = len(feats)
    spec = ClassifierSpec(outputs=k, input_shape=shape)
    region = shape_region(feats[unlearn_class].glyph, CLASS_CELLS, shape)

    M = build(spec, seed)
    train_classifier(M, train.x, train.y, epochs, lr, batch_size, seed)
    keep = train.subset(np.flatnonzero(train.y != unlearn_class))
    rest = test.subset(np.flatnonzero(test.y != unlearn_class))
    gone = test.subset(np.flatnonzero(test.y == unlearn_class))
    attack = MembershipAttack(spec, pool, MIAConfig(shadows=shadows, shadow_epochs=epochs, shadow_lr=lr, batch_size=batch_size, seed=seed))
    invert = lambda m: region_contrast(model_inversion(m, unlearn_class, inversion_steps, inversion_lr), region)  # noqa: E731
    pre_rest = accuracy(M, rest)
    out = {
        "seed": seed,
        "pre_acc": accuracy(M, test),
        "pre_rest_acc": pre_rest,
        "pre_mia": attack.success(M, train, test, unlearn_class),
        "pre_inversion": invert(M),
    }

    F = M.copy()
    elapsed, endpoint, mia_curve, gone_curve = 0.0, None, [], []
    for e in range(finetune_epochs):
        t = time.perf_counter()
        train_classifier(F, keep.x, keep.y, 1, finetune_lr, batch_size, seed + 100 + e)
        elapsed += time.perf_counter() - t
        gone_acc, rest_acc = accuracy(F, gone), accuracy(F, rest)
        gone_curve.append(gone_acc)
        mia_curve.append(attack.success(F, train, test, unlearn_class))
        if endpoint is None and gone_acc <= 1.0 / k and rest_acc >= pre_rest - 0.05:
            endpoint = elapsed
    out.update(
        finetune_mia=mia_curve,
        finetune_removed_acc=gone_curve,
        finetune_rest_acc=accuracy(F, rest),
        finetune_inversion=invert(F),
        finetune_seconds=endpoint,
        finetune_total_seconds=elapsed,
    )

    R = build(spec, seed + 5)
    elapsed, usable = 0.0, None
    for e in range(epochs):
        t = time.perf_counter()
        train_classifier(R, keep.x, keep.y, 1, lr, batch_size, seed + 200 + e)
        elapsed += time.perf_counter() - t
        if accuracy(R, rest) >= pre_rest - 0.05:
            usable = elapsed
            break
    out.update(
        retrain_seconds=usable,
        retrain_total_seconds=elapsed,
        retrain_mia=attack.success(R, train, test, unlearn_class),
        retrain_inversion=invert(R),
    )
    return out


# ---------------------------------------------------------------------------
# debiasing


def debias_setup(seed: int, counts: dict | None = None, test_n: int = 2000, visibility: float = 0.5, noise: float = 0.05):
    """Biased training set with the given (task, bias) cell counts and a balanced test set.

    The task glyph is drawn on only ``visibility`` of its carriers, so the
    bias glyph carries real extra evidence and a trained model leans on it.
    """
    counts = dict(BIASED_COUNTS["heavy"] if counts is None else counts)
    base = standard_features(names=("task", "bias"), glyph_size=GLYPH_SIZE)
    feats = [FeatureSpec("task", glyph=base[0].glyph, visibility=visibility), base[1]]
    shape = (1,) + IMAGE_HW
    n = sum(counts.values())
    cfg = DatasetConfig(n=n, features=feats, task="task", image_size=shape, cell_counts={"bias": counts}, noise=noise, seed=seed)
    train = generate_dataset(cfg)
    test = generate_dataset(DatasetConfig(n=test_n, features=feats, task="task", image_size=shape, noise=noise, seed=seed + 500))
    return train, test, ClassifierSpec(input_shape=shape)


def fairness_of(model, test: Dataset, group: int = 1) -> dict:
    p = predict_proba(model, test.x)[:, 1]
    report = fairness_metrics((p > 0.5).astype(int), test.y, test.f[:, group], scores=p)
    return report.to_dict() | {"acc": float(np.mean((p > 0.5) == test.y))}


def debias_experiment(
    seed: int,
    counts: dict | None = None,
    iterations: int = 4,
    beta: float = 1.0,
    lam: float = 10.0,
    lr_remover: float = LR_REMOVER,
    lr_finetune: float = LR_FINETUNE,
    adversary_samples: int | None = 3600,
) -> dict:
    """Unlearn the bias glyph and compare with naive fine-tuning on the same data.

    The adversary is fit on at most ``adversary_samples`` instances so it
    stays unsaturated on the large biased set.

    The naive control fine-tunes the original model for as many epochs as
    the unlearning run spends fine-tuning, at the same learning rate.
    """
    train, test, spec = debias_setup(seed, counts)
    M = train_base(spec, train, seed)
    pre = fairness_of(M, test)
    naive = M.copy()
    train_classifier(naive, train.x, train.y, iterations // 2, lr_finetune, 64, seed + 7)
    C = build(adversary_spec(spec, 1), seed + 1)
    train_adversary(C, train, [1], ADVERSARY_EPOCHS, BASE_LR, 64, seed, max_instances=adversary_samples)
    E = build(RemoverSpec(input_shape=spec.input_shape), seed)
    cfg = AdvUnlearnConfig(beta=beta, lam=lam, iterations=iterations, lr_remover=lr_remover, lr_finetune=lr_finetune, targets=(1,), seed=seed)
    M, trace = unlearn_annotated(M, E, C, train, cfg, holdout=test)
    return {
        "seed": seed,
        "before": pre,
        "unlearned": fairness_of(MaskedModel(M, E), test),
        "naive": fairness_of(naive, test),
        "adv_trace": trace.column("adv_acc"),
    }


def relative_drop(before: float, after: float) -> float:
    """``(before - after) / before``; 0 when ``before`` is 0."""
    return (before - after) / before if before > 0 else 0.0
