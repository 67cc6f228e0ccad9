"""Feature unlearning without annotations.

A trained identifier's filter group highlights where its pattern sits in an
instance.  Pixels under the (normalized, upsampled) group map are erased and
the original model is fine-tuned on the erased instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fud import tensor as T
from fud.data import Dataset
from fud.models import Classifier, Identifier
from fud.adversarial import UnlearnTrace
from fud.tensor import ContractError
from fud.training import DivergenceError, epoch_rng, predict_labels, train_epoch, task_loss


@dataclass
class EncodeConfig:
    group_id: int = 1
    tau: float = 0.2
    fill: float = 0.0
    lr: float = 0.05
    epochs: int = 3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.tau < 0:
            raise ContractError("tau must be >= 0")
        if self.group_id < 1:
            raise ContractError("group ids are 1-based")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("epochs >= 0, batch_size >= 1 and lr > 0 are required")


def group_map(identifier: Identifier, x: np.ndarray, group_id: int) -> np.ndarray:
    """Mean activation map of the group's filters, ``[N, h, w]`` (``[h, w]`` for one instance)."""
    partition = identifier.partition
    if partition is None:
        raise ContractError("identifier has no partition")
    if not 1 <= group_id <= partition.k:
        raise ContractError(f"group {group_id} not in 1..{partition.k}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    _, act = identifier.forward(x[None] if single else x, hook=identifier.target_layer)
    members = partition.groups()[group_id - 1]
    maps = act.data[:, members].mean(axis=1)
    return maps[0] if single else maps


def removal_mask(maps: np.ndarray, image_hw: tuple[int, int], tau: float, reference: float | None = None) -> np.ndarray:
    """Boolean ``[N, H, W]`` (or ``[H, W]``): normalized, nearest-resized map above ``tau``.

    Maps are divided by ``reference``, by default the largest value across all
    given maps, so an instance lacking the pattern is not rescaled until its
    background response looks like a hit.
    """
    maps = np.asarray(maps, dtype=np.float64)
    single = maps.ndim == 2
    if single:
        maps = maps[None]
    n, h, w = maps.shape
    H, W = image_hw
    peak = float(maps.max()) if reference is None else float(reference)
    if peak <= 0:
        mask = np.zeros((n, H, W), dtype=bool)
        return mask[0] if single else mask
    rows = np.arange(H) * h // H
    cols = np.arange(W) * w // W
    resized = (maps / peak)[:, rows][:, :, cols]
    mask = resized > tau
    return mask[0] if single else mask


def group_maps(identifier: Identifier, x: np.ndarray, group_id: int, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([group_map(identifier, x[i : i + batch_size], group_id) for i in range(0, len(x), batch_size)])


def encode_batch(identifier: Identifier, x: np.ndarray, config: EncodeConfig, reference: float | None = None) -> np.ndarray:
    """Erase the pixels flagged by the group map in every channel.

    ``reference`` defaults to the peak group response over all of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    maps = group_maps(identifier, x, config.group_id)
    ref = float(maps.max()) if reference is None else reference
    mask = removal_mask(maps, x.shape[2:], config.tau, ref)
    out = x.copy()
    out[np.broadcast_to(mask[:, None], x.shape)] = config.fill
    return out


def encode_instance(identifier: Identifier, x: np.ndarray, config: EncodeConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    expected = tuple(identifier.spec.input_shape)
    if x.shape != expected:
        raise ContractError(f"instance shape {x.shape} does not match identifier input {expected}")
    return encode_batch(identifier, x[None], config)[0]


def unlearn_blind(
    M: Classifier,
    identifier: Identifier,
    dataset: Dataset,
    config: EncodeConfig,
    holdout: Dataset | None = None,
) -> tuple[Classifier, UnlearnTrace, np.ndarray]:
    """Fine-tune ``M`` (in place) on identifier-encoded instances.

    Encoding happens once up front; the identifier is frozen throughout.
    Returns the model, a per-epoch trace (task accuracy on raw and encoded
    holdout instances) and the encoded training instances.
    """
    holdout = dataset if holdout is None else holdout
    identifier.set_trainable(False)
    reference = float(group_maps(identifier, dataset.x, config.group_id).max())
    encoded = encode_batch(identifier, dataset.x, config, reference)
    hold_encoded = encode_batch(identifier, holdout.x, config, reference)
    trace = UnlearnTrace()
    M.set_trainable(True)
    for epoch in range(config.epochs):
        rng = epoch_rng(config.seed, 0xB1D, epoch)
        try:
            loss = train_epoch(M, encoded, lambda idx: task_loss(M, encoded[idx], dataset.y[idx]), config.lr, config.batch_size, rng)
        except DivergenceError as err:
            raise DivergenceError(f"blind fine-tuning diverged at epoch {epoch}", dict(err.diagnostic, epoch=epoch))
        trace.append(
            iteration=epoch,
            phase="finetune",
            task_acc=float((predict_labels(M, holdout.x) == holdout.y).mean()),
            encoded_acc=float((predict_labels(M, hold_encoded) == holdout.y).mean()),
            l_m=loss,
        )
    return M, trace, encoded


def group_alignment(identifier: Identifier, x: np.ndarray, regions: np.ndarray, tau: float = 0.2) -> dict[str, np.ndarray]:
    """Overlap of each group's removal mask with each region, pooled over ``x``.

    ``regions`` is ``[R, H, W]`` boolean.  Returns ``[K, R]`` matrices:
    ``precision`` (share of removed pixels inside the region), ``coverage``
    (share of region pixels removed) and ``iou``.  A group is aligned with the
    region of highest IoU.
    """
    regions = np.asarray(regions, dtype=bool)
    k = identifier.partition.k
    out = {name: np.zeros((k, len(regions))) for name in ("precision", "coverage", "iou")}
    n = len(x)
    for g in range(1, k + 1):
        mask = removal_mask(group_maps(identifier, x, g), x.shape[2:], tau)
        removed = mask.sum()
        for r, region in enumerate(regions):
            inter = (mask & region[None]).sum()
            union = removed + n * region.sum() - inter
            out["precision"][g - 1, r] = inter / removed if removed else 0.0
            out["coverage"][g - 1, r] = inter / (n * region.sum())
            out["iou"][g - 1, r] = inter / union if union else 0.0
    return out


def aligned_group(alignment: dict[str, np.ndarray], region: int) -> int:
    """1-based id of the group whose removals best match ``region`` (by IoU)."""
    return int(np.argmax(alignment["iou"][:, region])) + 1
