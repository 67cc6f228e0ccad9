"""Command-line driver: ``fud <command> --config <path> [--out <dir>] [--seed <u64>]``.

Every command reads one JSON config, validates it (unknown keys are
rejected), does its work and writes its outputs plus ``manifest.json``
under the output directory.  Relative paths inside a config are resolved
against the config file's directory.

Exit codes: 0 success, 1 other failure, 2 invalid config, 3 divergence.
Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from fud import __version__
from fud.adversarial import AdvUnlearnConfig, UnlearnTrace, adversary_spec, config_dict, train_adversary, unlearn_annotated
from fud.blind import EncodeConfig, group_map, removal_mask, unlearn_blind
from fud.data import (
    Dataset,
    DatasetConfig,
    generate_dataset,
    generate_one_of,
    glyph_mask,
    load_dataset,
    region_mask,
    save_dataset,
    split,
)
from fud.evaluation import (
    MaskedModel,
    MIAConfig,
    accuracy,
    fairness_metrics,
    feature_probe,
    guided_saliency,
    mia_attack,
    model_inversion,
    region_contrast,
    region_energy,
    write_json,
    write_ppm,
)
from fud.identify import similarity_csv, train_identifier
from fud.models import ClassifierSpec, Identifier, RemoverSpec, build, load_checkpoint, save_checkpoint
from fud.tensor import ContractError
from fud.training import DivergenceError, predict_labels, predict_proba, train_classifier

EXIT_OK, EXIT_FAIL, EXIT_SCHEMA, EXIT_DIVERGED = 0, 1, 2, 3
MAX_SEED = 2**64 - 1


class ConfigError(ValueError):
    """Config failed validation."""


# ---------------------------------------------------------------------------
# schemas

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_count = {"type": "integer", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}
_path = {"type": "string", "minLength": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": MAX_SEED}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_shape = {"type": "array", "items": _posint, "minItems": 3, "maxItems": 3}
_glyph = _obj(
    {
        "shape": {"enum": ["square", "cross", "triangle"]},
        "row": _count,
        "col": _count,
        "size": _posint,
        "channels": {"type": "array", "items": _count},
    },
    ["shape", "row", "col"],
)
_feature = _obj(
    {
        "name": {"type": "string"},
        "kind": {"enum": ["pattern", "attribute"]},
        "glyph": {"oneOf": [_glyph, {"type": "null"}]},
        "tint": {"type": "array", "items": _num},
        "prevalence": _num,
        "visibility": _num,
    },
    ["name"],
)
_cells = _obj({k: _count for k in ("FF", "FT", "TF", "TT")})
DATASET_SCHEMA = _obj(
    {
        "n": _posint,
        "features": {"type": "array", "items": _feature, "minItems": 1},
        "task": {"type": "string"},
        "image_size": _shape,
        "correlations": {"type": "object", "additionalProperties": _num},
        "cell_counts": {"type": "object", "additionalProperties": _cells},
        "noise": _num,
        "label_noise": _num,
        "seed": _seed,
    },
    ["n", "features", "task"],
)
CLASSIFIER_SCHEMA = _obj(
    {
        "conv": {"type": "array", "items": {"type": "array", "items": _posint, "minItems": 3, "maxItems": 3}},
        "pool": _posint,
        "hidden": _posint,
        "outputs": _posint,
        "head": {"enum": ["softmax", "sigmoid"]},
        "input_shape": _shape,
    }
)
REMOVER_SCHEMA = _obj(
    {
        "encoder": {"type": "array", "items": _posint},
        "decoder": {"type": "array", "items": _posint},
        "kernel": _posint,
        "head_bias": _num,
        "input_shape": _shape,
        "skips": {"type": "boolean"},
        "coords": {"type": "boolean"},
    }
)
_train_opts = {"epochs": _count, "lr": _pos, "batch_size": _posint}

SCHEMAS = {
    "gen-data": _obj(
        {
            "seed": _seed,
            "dataset": DATASET_SCHEMA,
            "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "one_of_cells": {"type": ["array", "null"], "items": {"type": "array", "items": _count, "minItems": 2, "maxItems": 2}},
        },
        ["dataset"],
    ),
    "train": _obj(
        {
            "seed": _seed,
            "data": _path,
            "model": CLASSIFIER_SCHEMA,
            "targets": {"type": ["array", "null"], "items": _count},
            **_train_opts,
        },
        ["data"],
    ),
    "unlearn-annotated": _obj(
        {
            "seed": _seed,
            "data": _path,
            "holdout": _path,
            "model": _path,
            "adversary": _path,
            "adversary_epochs": _count,
            "adversary_samples": {"type": ["integer", "null"], "minimum": 1},
            "remover": REMOVER_SCHEMA,
            "beta": _pos,
            "lam": _pos,
            "iterations": _count,
            "lr_remover": _pos,
            "lr_finetune": _pos,
            "lr_adversary": _pos,
            "batch_size": _posint,
            "targets": {"type": "array", "items": _count, "minItems": 1},
            "stop_after": {"type": ["integer", "null"], "minimum": 0},
        },
        ["data", "model", "targets"],
    ),
    "unlearn-blind": _obj(
        {
            "seed": _seed,
            "data": _path,
            "holdout": _path,
            "model": _path,
            "identifier": _path,
            "group_id": _posint,
            "tau": {"type": "number", "minimum": 0},
            "fill": _num,
            **_train_opts,
        },
        ["data", "model", "identifier"],
    ),
    "identify": _obj(
        {
            "seed": _seed,
            "data": _path,
            "model": CLASSIFIER_SCHEMA,
            "target_layer": {"type": ["integer", "null"], "minimum": 0},
            "probe_size": {"type": "integer", "minimum": 2},
            "gamma": {"type": "number", "minimum": 0},
            "t1": _count,
            "t2": _count,
            "k": {"type": ["integer", "null"], "minimum": 2},
            "lr": _pos,
            "batch_size": _posint,
        },
        ["data"],
    ),
    "evaluate": _obj(
        {
            "seed": _seed,
            "data": _path,
            "train_data": _path,
            "model": _path,
            "remover": _path,
            "metrics": {
                "type": "array",
                "items": {"enum": ["accuracy", "saliency", "fairness", "mia", "inversion", "probe"]},
                "minItems": 1,
            },
            "class_id": _count,
            "region_feature": {"type": "string"},
            "group_feature": {"type": "string"},
            "probe_feature": {"type": "string"},
            "mia_shadows": _posint,
            "mia_shadow_epochs": _count,
            "inversion_steps": _count,
            "inversion_lr": _pos,
        },
        ["data", "model", "metrics"],
    ),
    "visualize": _obj(
        {
            "seed": _seed,
            "data": _path,
            "model": _path,
            "remover": _path,
            "identifier": _path,
            "group_id": _posint,
            "tau": {"type": "number", "minimum": 0},
            "instances": {"type": "array", "items": _count, "minItems": 1},
            "class_id": _count,
            "scale": _posint,
        },
        ["data", "instances"],
    ),
}

# Named presets: the calibrated experiment settings.  A config may name one
# with "preset"; its own keys override the preset's.
PRESETS = {
    "unlearn-annotated": {
        "single-target": {"beta": 5.0, "lam": 5.0, "iterations": 20, "lr_remover": 0.01, "lr_finetune": 0.01, "targets": [1]},
        "two-targets": {"beta": 1.0, "lam": 10.0, "iterations": 50, "lr_remover": 0.01, "lr_finetune": 0.01, "targets": [1, 2]},
        "debias": {"beta": 1.0, "lam": 10.0, "iterations": 4, "adversary_samples": 3600, "lr_remover": 0.01, "lr_finetune": 0.01, "targets": [1]},
    },
    "unlearn-blind": {"glyph-group": {"tau": 0.2, "fill": 0.1, "epochs": 3, "lr": 0.05}},
    "identify": {"grouping": {"gamma": 1.0, "t1": 3, "t2": 8, "probe_size": 128, "lr": 0.05}},
    "train": {"base": {"epochs": 3, "lr": 0.05, "batch_size": 64}},
    "evaluate": {"mia": {"metrics": ["mia"], "mia_shadows": 10, "mia_shadow_epochs": 10}},
}


def resolve_config(command: str, raw: dict, seed: int | None = None) -> dict:
    """Apply a preset and a seed override, then validate."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(raw)
    name = cfg.pop("preset", None)
    if name is not None:
        table = PRESETS.get(command, {})
        if name not in table:
            raise ConfigError(f"unknown preset {name!r} for {command}; known: {sorted(table)}")
        cfg = {**copy.deepcopy(table[name]), **cfg}
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}") from None
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _path_of(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


INPUT_KEYS = ("data", "holdout", "train_data", "model", "adversary", "identifier", "remover")


def _tree_hash(path: Path) -> str:
    """Hash of a file, or of a directory's files (names and contents) in sorted order."""
    if path.is_file():
        return _sha256(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(path)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, base: Path) -> None:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"))
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "config_dir": str(base.resolve()),
        "inputs": {k: _tree_hash(_path_of(base, cfg[k])) for k in INPUT_KEYS if isinstance(cfg.get(k), str)},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    _atomic_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _classifier_spec(doc: dict | None, data: Dataset, outputs: int, head: str) -> ClassifierSpec:
    doc = dict(doc or {})
    doc.setdefault("input_shape", list(data.x.shape[1:]))
    doc.setdefault("outputs", outputs)
    doc.setdefault("head", head)
    if "conv" in doc:
        doc["conv"] = [tuple(c) for c in doc["conv"]]
    doc["input_shape"] = tuple(doc["input_shape"])
    return ClassifierSpec(**doc)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, out: Path, base: Path) -> None:
    ds_cfg = DatasetConfig.from_dict(dict(cfg["dataset"], seed=cfg["dataset"].get("seed", cfg["seed"])))
    cells = cfg.get("one_of_cells")
    ds = generate_one_of(ds_cfg, [tuple(c) for c in cells]) if cells else generate_dataset(ds_cfg)
    frac = cfg.get("train_fraction")
    if frac is None:
        save_dataset(ds, out / "data")
    else:
        train, test = split(ds, frac, cfg["seed"])
        save_dataset(train, out / "train")
        save_dataset(test, out / "test")


def cmd_train(cfg: dict, out: Path, base: Path) -> None:
    data = load_dataset(_path_of(base, cfg["data"]))
    targets = cfg.get("targets")
    epochs, lr, bs = cfg.get("epochs", 3), cfg.get("lr", 0.05), cfg.get("batch_size", 64)
    if targets:
        spec = _classifier_spec(cfg.get("model"), data, len(targets), "sigmoid")
        model = build(spec, cfg["seed"])
        train_adversary(model, data, targets, epochs, lr, bs, cfg["seed"])
        report = {"adversary_accuracy": [float(a) for a in (predict_labels(model, data.x) == data.f[:, targets]).mean(axis=0)]}
    else:
        n_classes = int(max(2, data.y.max() + 1))
        spec = _classifier_spec(cfg.get("model"), data, n_classes, "softmax")
        model = build(spec, cfg["seed"])
        train_classifier(model, data.x, data.y, epochs, lr, bs, cfg["seed"])
        report = {"train_accuracy": accuracy(model, data)}
    save_checkpoint(model, out / "model.ckpt")
    write_json(out / "report.json", report)


def cmd_unlearn_annotated(cfg: dict, out: Path, base: Path) -> None:
    """Runs (or resumes) annotated unlearning, checkpointing after every iteration.

    The ``state/`` directory holds the latest model, remover and trace; if it
    exists the run continues from there.  ``stop_after`` ends the process
    early after that many iterations (for staged runs).
    """
    data = load_dataset(_path_of(base, cfg["data"]))
    holdout = load_dataset(_path_of(base, cfg["holdout"])) if cfg.get("holdout") else data
    ucfg = AdvUnlearnConfig(
        beta=cfg.get("beta", 5.0),
        lam=cfg.get("lam", 5.0),
        iterations=cfg.get("iterations", 10),
        lr_remover=cfg.get("lr_remover", 0.01),
        lr_finetune=cfg.get("lr_finetune", 0.01),
        lr_adversary=cfg.get("lr_adversary", 0.05),
        batch_size=cfg.get("batch_size", 64),
        targets=cfg["targets"],
        adversary_epochs=cfg.get("adversary_epochs", 3),
        adversary_samples=cfg.get("adversary_samples"),
        seed=cfg["seed"],
    )
    state = out / "state"
    if (state / "trace.csv").exists():
        M = load_checkpoint(state / "model.ckpt")
        E = load_checkpoint(state / "remover.ckpt")
        C = load_checkpoint(state / "adversary.ckpt")
        trace = UnlearnTrace.from_csv((state / "trace.csv").read_text())
        start = len(trace)
    else:
        state.mkdir(parents=True, exist_ok=True)
        M = load_checkpoint(_path_of(base, cfg["model"]))
        if cfg.get("adversary"):
            C = load_checkpoint(_path_of(base, cfg["adversary"]))
        else:
            C = build(adversary_spec(M.spec, len(ucfg.targets)), cfg["seed"] + 1)
            train_adversary(
                C, data, ucfg.targets, ucfg.adversary_epochs, ucfg.lr_adversary, ucfg.batch_size, cfg["seed"], ucfg.adversary_samples
            )
        rdoc = dict(cfg.get("remover") or {})
        rdoc["input_shape"] = tuple(rdoc.get("input_shape", data.x.shape[1:]))
        E = build(RemoverSpec(**rdoc), cfg["seed"])
        save_checkpoint(C, state / "adversary.ckpt")
        trace, start = UnlearnTrace(), 0
    fields = _trace_fields(ucfg)
    stop_after = cfg.get("stop_after")

    class _Stop(Exception):
        pass

    def persist(it: int, tr: UnlearnTrace) -> None:
        save_checkpoint(M, state / "model.ckpt")
        save_checkpoint(E, state / "remover.ckpt")
        _atomic_text(state / "trace.csv", tr.to_csv(fields))
        if stop_after is not None and it + 1 - start >= stop_after and it + 1 < ucfg.iterations:
            raise _Stop

    try:
        unlearn_annotated(M, E, C, data, ucfg, holdout, trace, start, persist)
    except _Stop:
        return
    save_checkpoint(M, out / "model.ckpt")
    save_checkpoint(E, out / "remover.ckpt")
    _atomic_text(out / "trace.csv", trace.to_csv(fields))
    last = trace[-1] if len(trace) else {}
    write_json(out / "report.json", {"config": config_dict(ucfg), "final": {k: last[k] for k in fields if k in last}})


def _trace_fields(ucfg: AdvUnlearnConfig) -> list[str]:
    heads = [f"adv_acc_{j}" for j in range(len(ucfg.targets))]
    return ["iteration", "phase", "adv_acc", *heads, "task_acc", "task_acc_raw", "l1_term", "l_m", "l_c"]


def cmd_unlearn_blind(cfg: dict, out: Path, base: Path) -> None:
    data = load_dataset(_path_of(base, cfg["data"]))
    holdout = load_dataset(_path_of(base, cfg["holdout"])) if cfg.get("holdout") else data
    M = load_checkpoint(_path_of(base, cfg["model"]))
    ident = load_checkpoint(_path_of(base, cfg["identifier"]))
    if not isinstance(ident, Identifier) or ident.partition is None:
        raise ContractError("identifier checkpoint has no filter partition")
    ecfg = EncodeConfig(
        group_id=cfg.get("group_id", 1),
        tau=cfg.get("tau", 0.2),
        fill=cfg.get("fill", 0.0),
        lr=cfg.get("lr", 0.05),
        epochs=cfg.get("epochs", 3),
        batch_size=cfg.get("batch_size", 64),
        seed=cfg["seed"],
    )
    before = accuracy(M, holdout)
    M, trace, encoded = unlearn_blind(M, ident, data, ecfg, holdout)
    save_checkpoint(M, out / "model.ckpt")
    _atomic_text(out / "trace.csv", trace.to_csv(["iteration", "phase", "task_acc", "encoded_acc", "l_m"]))
    for i in range(min(4, len(encoded))):
        write_ppm(out / f"encoded_{i}.ppm", encoded[i])
    last = trace[-1] if len(trace) else {"task_acc": before, "encoded_acc": before}
    write_json(
        out / "report.json",
        {"acc_before": before, "acc_after_raw": last["task_acc"], "acc_after_encoded": last["encoded_acc"], "delta": last["encoded_acc"] - before},
    )


def cmd_identify(cfg: dict, out: Path, base: Path) -> None:
    data = load_dataset(_path_of(base, cfg["data"]))
    spec = _classifier_spec(cfg.get("model"), data, int(max(2, data.y.max() + 1)), "softmax")
    ident = Identifier(spec, cfg.get("target_layer"), seed=cfg["seed"])
    probe = data.x[: cfg.get("probe_size", 128)]
    res = train_identifier(
        ident,
        data.x,
        data.y,
        probe,
        gamma=cfg.get("gamma", 1.0),
        t1=cfg.get("t1", 3),
        t2=cfg.get("t2", 3),
        lr=cfg.get("lr", 0.05),
        batch_size=cfg.get("batch_size", 64),
        seed=cfg["seed"],
        k=cfg.get("k"),
    )
    save_checkpoint(ident, out / "identifier.ckpt")
    _atomic_text(out / "similarity.csv", similarity_csv(res.similarity))
    _atomic_text(out / "eigenvalues.csv", "".join(f"{v!r}\n" for v in res.eigenvalues.tolist()))
    write_json(
        out / "partition.json",
        {"K": res.k, "candidates": res.candidates, "assignment": res.partition.assignment, "history": res.history},
    )


def _glyph_of(data: Dataset, name: str):
    if data.config is None or name not in data.feature_names:
        raise ContractError(f"dataset has no feature {name!r}")
    glyph = data.config.features[data.feature_index(name)].glyph
    if glyph is None:
        raise ContractError(f"feature {name!r} has no glyph region")
    return glyph


def cmd_evaluate(cfg: dict, out: Path, base: Path) -> None:
    data = load_dataset(_path_of(base, cfg["data"]))
    model = load_checkpoint(_path_of(base, cfg["model"]))
    system = MaskedModel(model, load_checkpoint(_path_of(base, cfg["remover"]))) if cfg.get("remover") else model
    class_id = cfg.get("class_id", 1)
    report: dict = {}
    for metric in cfg["metrics"]:
        if metric == "accuracy":
            report["accuracy"] = accuracy(system, data)
        elif metric == "saliency":
            name = cfg.get("region_feature", data.feature_names[0])
            glyph = _glyph_of(data, name)
            region = region_mask(glyph, data.config.image_size)
            maps = guided_saliency(system, data.x, class_id)
            report["saliency"] = {"region_feature": name, "class_id": class_id, "region_share": float(np.mean([region_energy(m, region) for m in maps]))}
        elif metric == "fairness":
            name = cfg.get("group_feature", data.feature_names[-1])
            p = predict_proba(system, data.x)[:, 1]
            report["fairness"] = fairness_metrics((p > 0.5).astype(int), data.y, data.feature(name), scores=p).to_dict() | {"group_feature": name}
        elif metric == "mia":
            train = load_dataset(_path_of(base, cfg["train_data"])) if cfg.get("train_data") else None
            if train is None:
                raise ContractError("the mia metric needs train_data (the target model's members)")
            half = len(data) // 2
            pool, non = data.subset(np.arange(half)), data.subset(np.arange(half, len(data)))
            mcfg = MIAConfig(shadows=cfg.get("mia_shadows", 10), shadow_epochs=cfg.get("mia_shadow_epochs", 10), seed=cfg["seed"])
            report["mia"] = {"class_id": class_id, "success": mia_attack(model, train, non, pool, mcfg, query_class=class_id)}
        elif metric == "inversion":
            image = model_inversion(system, class_id, cfg.get("inversion_steps", 100), cfg.get("inversion_lr", 0.1))
            write_ppm(out / f"inversion_class{class_id}.ppm", image)
            entry = {"class_id": class_id}
            if cfg.get("region_feature"):
                glyph = _glyph_of(data, cfg["region_feature"])
                entry["glyph_contrast"] = region_contrast(image, glyph_mask(glyph, data.config.image_size))
            report["inversion"] = entry
        elif metric == "probe":
            train = load_dataset(_path_of(base, cfg["train_data"])) if cfg.get("train_data") else None
            if train is None:
                raise ContractError("the probe metric needs train_data to fit the probe")
            name = cfg.get("probe_feature", data.feature_names[-1])
            report["probe"] = {"feature": name, "accuracy": feature_probe(model, train, data, data.feature_index(name))}
    write_json(out / "report.json", report)


def _heat(values: np.ndarray) -> np.ndarray:
    peak = float(values.max())
    return values / peak if peak > 0 else np.zeros_like(values)


def _upscale(image: np.ndarray, k: int) -> np.ndarray:
    return image.repeat(k, axis=-2).repeat(k, axis=-1)


def cmd_visualize(cfg: dict, out: Path, base: Path) -> None:
    data = load_dataset(_path_of(base, cfg["data"]))
    k = cfg.get("scale", 8)
    model = load_checkpoint(_path_of(base, cfg["model"])) if cfg.get("model") else None
    remover = load_checkpoint(_path_of(base, cfg["remover"])) if cfg.get("remover") else None
    ident = load_checkpoint(_path_of(base, cfg["identifier"])) if cfg.get("identifier") else None
    class_id = cfg.get("class_id", 1)
    for i in cfg["instances"]:
        if i >= len(data):
            raise ContractError(f"instance {i} out of range for {len(data)} instances")
        x = data.x[i]
        write_ppm(out / f"input_{i}.ppm", _upscale(x, k))
        if remover is not None:
            write_ppm(out / f"masked_{i}.ppm", _upscale(remover(x[None]).data[0], k))
        if model is not None:
            system = MaskedModel(model, remover) if remover is not None else model
            write_ppm(out / f"saliency_{i}.ppm", _upscale(_heat(guided_saliency(system, x, class_id)), k))
        if ident is not None:
            g = cfg.get("group_id", 1)
            gmap = group_map(ident, x, g)
            write_ppm(out / f"group{g}_map_{i}.ppm", _upscale(_upscale(_heat(gmap), x.shape[-1] // gmap.shape[-1]), k))
            mask = removal_mask(gmap, x.shape[1:], cfg.get("tau", 0.2)).astype(float)
            write_ppm(out / f"group{g}_mask_{i}.ppm", _upscale(mask, k))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "unlearn-annotated": cmd_unlearn_annotated,
    "unlearn-blind": cmd_unlearn_blind,
    "identify": cmd_identify,
    "evaluate": cmd_evaluate,
    "visualize": cmd_visualize,
}


# ---------------------------------------------------------------------------
# entry point


def _json_safe(value):
    """Non-finite floats become strings so the error line stays strict JSON."""
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return str(float(value))
    if isinstance(value, np.generic):
        return value.item()
    return value


def _fail(code: int, kind: str, message: str, **extra) -> int:
    line = json.dumps(_json_safe({"error": kind, "message": message, **extra}), sort_keys=True, default=str, allow_nan=False)
    print(line, file=sys.stderr)
    return code


def _thread_limit():
    raw = os.environ.get("FUD_THREADS")
    if not raw:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def run(command: str, config_path, out_dir=None, seed: int | None = None) -> int:
    config_path = Path(config_path)
    base = config_path.parent
    try:
        raw = json.loads(config_path.read_text())
    except FileNotFoundError:
        return _fail(EXIT_SCHEMA, "config", f"config file not found: {config_path}")
    except json.JSONDecodeError as err:
        return _fail(EXIT_SCHEMA, "config", f"invalid JSON: {err}")
    try:
        cfg = resolve_config(command, raw, seed)
    except ConfigError as err:
        return _fail(EXIT_SCHEMA, "config", str(err))
    out = Path(out_dir) if out_dir else base / f"{command}-out"
    out.mkdir(parents=True, exist_ok=True)
    limiter = _thread_limit()
    try:
        # overflow is reported through DivergenceError, not numpy warnings
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            COMMANDS[command](cfg, out, base)
    except DivergenceError as err:
        return _fail(EXIT_DIVERGED, "divergence", str(err), diagnostic=err.diagnostic)
    except (ContractError, ValueError, KeyError, OSError) as err:
        return _fail(EXIT_FAIL, type(err).__name__, str(err))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    write_manifest(out, command, cfg, base)
    return EXIT_OK


def _seed_arg(text: str) -> int:
    value = int(text)
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fud", description="Feature unlearning experiments on synthetic glyph data.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", help="output directory (default: <config dir>/<command>-out)")
    parser.add_argument("--seed", type=_seed_arg, help="override the config's seed")
    args = parser.parse_args(argv)
    return run(args.command, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
