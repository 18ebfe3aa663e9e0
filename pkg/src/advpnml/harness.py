"""Config-driven experiment runner: data generation, training, evaluation, sweeps.

A run is described by one JSON document (see ``CONFIG_SCHEMA``).  All random
streams derive from the single ``seed`` field through
:func:`advpnml.rng.derive_seed`:

=========================  ==========================================
stream                     derivation
=========================  ==========================================
toy training set           ``derive_seed(seed, "data", "train")``
toy evaluation set         ``derive_seed(seed, "data", "test")``
training                   ``derive_seed(seed, "train")``
attack ``name``            ``derive_seed(seed, "attack", name)``
=========================  ==========================================

Result rows are written to ``results.csv`` (deterministic); wall-clock
timings for the same rows go to ``timings.csv``.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .attacks import AttackConfig
from .datasets import SyntheticSpec, gen_synthetic, open_mnist, write_synthetic_csv
from .errors import ConfigError
from .models import ModelSpec, load_checkpoint, save_checkpoint
from .pnml import RefineConfig
from .rng import derive_seed
from .training import AttackSpec, TrainConfig, evaluate, train

RESULT_SCHEMA_VERSION = 1
RESULT_COLUMNS = [
    "schema_version",
    "experiment_id",
    "attack",
    "epsilon",
    "lambda",
    "hypotheses",
    "natural_acc",
    "adv_acc",
    "best_attack_acc",
    "regret_mean",
]
TIMING_COLUMNS = ["experiment_id", "attack", "epsilon", "lambda", "hypotheses", "wall_time"]

DEFAULT_LAMBDA = {"synthetic": 0.6, "mnist": 0.1}

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_attack_cfg = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "epsilon"],
    "properties": {
        "kind": {"enum": ["fgsm", "pgd", "adaptive", "hsja"]},
        "epsilon": {"type": "number", "minimum": 0},
        "step_size": {"type": "number", "exclusiveMinimum": 0},
        "iterations": _pos_int,
        "restarts": _pos_int,
        "query_budget": _pos_int,
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment_id", "seed", "dataset", "model"],
    "properties": {
        "experiment_id": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "eval_size": {"type": ["integer", "null"], "minimum": 1},
        "dataset": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "synthetic"},
                        "n_per_class": _pos_int,
                        "test_per_class": _pos_int,
                        "variance": {"type": "number", "exclusiveMinimum": 0},
                        "radius": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "train_images", "train_labels", "test_images", "test_labels"],
                    "properties": {
                        "kind": {"const": "mnist"},
                        "train_images": {"type": "string"},
                        "train_labels": {"type": "string"},
                        "test_images": {"type": "string"},
                        "test_labels": {"type": "string"},
                        "train_size": {"type": ["integer", "null"], "minimum": 1},
                    },
                },
            ]
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["mlp", "mnist_convnet"]},
                "widths": {"type": "array", "items": _pos_int, "minItems": 2},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _pos_int,
                "learning_rate": {
                    "oneOf": [
                        {"type": "number", "exclusiveMinimum": 0},
                        {
                            "type": "array",
                            "minItems": 1,
                            "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                        },
                    ]
                },
                "momentum": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "adversary": {
                    "oneOf": [
                        {"type": "null"},
                        {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["epsilon", "step_size", "iterations"],
                            "properties": {
                                "epsilon": {"type": "number", "minimum": 0},
                                "step_size": {"type": "number", "exclusiveMinimum": 0},
                                "iterations": _pos_int,
                                "restarts": _pos_int,
                            },
                        },
                    ]
                },
                "adaptive_switch_epoch": {"type": ["integer", "null"], "minimum": 0},
                "epsilon_warmup": {"type": "integer", "minimum": 0},
            },
        },
        "attacks": {"type": "object", "additionalProperties": _attack_cfg},
        "defense": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "strength": {"type": "number", "minimum": 0},
                        "iterations": _pos_int,
                        "step": {"type": ["number", "null"], "minimum": 0},
                        "hypotheses": {"type": ["integer", "null"], "minimum": 1},
                    },
                },
            ]
        },
        "chunk": _pos_int,
    },
}


def validate_config(doc) -> dict:
    """Schema-check ``doc`` and fill defaults; raises :class:`ConfigError`."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    cfg = copy.deepcopy(doc)
    kind = cfg["dataset"]["kind"]
    if kind == "synthetic" and cfg["model"]["kind"] != "mlp":
        raise ConfigError("the synthetic dataset requires an mlp model")
    if kind == "mnist" and cfg["model"]["kind"] != "mnist_convnet":
        raise ConfigError("the mnist dataset requires the mnist_convnet model")
    for name, a in cfg.get("attacks", {}).items():
        if a["kind"] in ("pgd", "adaptive") and "step_size" not in a:
            raise ConfigError(f"attacks/{name}: {a['kind']} needs step_size")
        if a["kind"] == "hsja" and "query_budget" not in a:
            raise ConfigError(f"attacks/{name}: hsja needs query_budget")
    if cfg.get("defense") is not None:
        cfg["defense"].setdefault("strength", DEFAULT_LAMBDA[kind])
    cfg.setdefault("output_dir", f"runs/{cfg['experiment_id']}")
    return cfg


def load_config(path) -> dict:
    """Read and validate a config file.

    Relative MNIST file paths are resolved against the config's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = validate_config(doc)
    d = cfg["dataset"]
    if d["kind"] == "mnist":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            d[key] = str((path.parent / d[key]).resolve())
    return cfg


# ------------------------------------------------------------------ builders


def _clamp(cfg):
    return None if cfg["dataset"]["kind"] == "synthetic" else (0.0, 1.0)


def model_spec(cfg) -> ModelSpec:
    m = cfg["model"]
    if m["kind"] == "mlp":
        return ModelSpec.mlp(m.get("widths", (2, 64, 64, 64, 2)))
    return ModelSpec.mnist_convnet()


def train_config(cfg) -> TrainConfig:
    t = cfg.get("train", {})
    adv = t.get("adversary")
    adversary = None
    if adv is not None:
        adversary = AttackConfig(
            epsilon=adv["epsilon"],
            step_size=adv["step_size"],
            iterations=adv["iterations"],
            restarts=adv.get("restarts", 1),
            clamp=_clamp(cfg),
        )
    switch = t.get("adaptive_switch_epoch")
    refine = refine_config(cfg) if switch is not None else None
    if switch is not None and refine is None:
        refine = RefineConfig(DEFAULT_LAMBDA[cfg["dataset"]["kind"]], clamp=_clamp(cfg))
    lr = t.get("learning_rate", 0.01)
    return TrainConfig(
        epochs=t.get("epochs", 10),
        batch_size=t.get("batch_size", 50),
        learning_rate=lr if isinstance(lr, (int, float)) else tuple(tuple(x) for x in lr),
        momentum=t.get("momentum", 0.9),
        weight_decay=t.get("weight_decay", 1e-4),
        adversary=adversary,
        adaptive_refine=refine,
        adaptive_switch_epoch=switch,
        epsilon_warmup=t.get("epsilon_warmup", 0),
        seed=derive_seed(cfg["seed"], "train"),
    )


def refine_config(cfg, strength=None, hypotheses="config") -> RefineConfig | None:
    d = cfg.get("defense")
    if d is None and strength is None:
        return None
    d = d or {}
    lam = d.get("strength", DEFAULT_LAMBDA[cfg["dataset"]["kind"]]) if strength is None else strength
    iterations = d.get("iterations", 1)
    step = d.get("step")
    if step is None:
        step = lam / iterations
    top_k = d.get("hypotheses") if hypotheses == "config" else hypotheses
    return RefineConfig(lam, iterations=iterations, step=step, clamp=_clamp(cfg), top_k=top_k)


def attack_specs(cfg) -> dict:
    out = {}
    for name, a in cfg.get("attacks", {}).items():
        seed = derive_seed(cfg["seed"], "attack", name)
        config = None
        if a["kind"] in ("pgd", "adaptive"):
            config = AttackConfig(
                epsilon=a["epsilon"],
                step_size=a["step_size"],
                iterations=a.get("iterations", 1),
                restarts=a.get("restarts", 1),
                clamp=_clamp(cfg),
                seed=seed,
            )
        out[name] = AttackSpec(a["kind"], a["epsilon"], config, a.get("query_budget", 0), seed)
    return out


def load_datasets(cfg, cache_dir=None):
    """``(train, test)`` sets; the test set is cut to ``eval_size``."""
    d = cfg["dataset"]
    if d["kind"] == "synthetic":
        common = dict(variance=d.get("variance", 0.01), radius=d.get("radius", 2.0))
        tr = gen_synthetic(SyntheticSpec(d.get("n_per_class", 2500), seed=derive_seed(cfg["seed"], "data", "train"), **common))
        te = gen_synthetic(SyntheticSpec(d.get("test_per_class", 500), seed=derive_seed(cfg["seed"], "data", "test"), **common))
    else:
        tr = open_mnist(d["train_images"], d["train_labels"], cache_dir)
        te = open_mnist(d["test_images"], d["test_labels"], cache_dir)
        if d.get("train_size"):
            tr = tr.head(d["train_size"])
    if cfg.get("eval_size"):
        te = te.head(cfg["eval_size"])
    return tr, te


# ------------------------------------------------------------------ commands


def _out_dir(cfg, out):
    path = Path(out if out is not None else cfg["output_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_data(cfg, out=None):
    """Write the synthetic train/test CSVs plus a metadata JSON."""
    if cfg["dataset"]["kind"] != "synthetic":
        raise ConfigError("gen-data only produces the synthetic dataset")
    path = _out_dir(cfg, out)
    tr, te = load_datasets(cfg)
    write_synthetic_csv(tr, path / "train.csv")
    write_synthetic_csv(te, path / "test.csv")
    meta = {"experiment_id": cfg["experiment_id"], "seed": cfg["seed"], "dataset": cfg["dataset"],
            "train_rows": len(tr), "test_rows": len(te)}
    (path / "data.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def cmd_train(cfg, out=None, echo=print):
    """Train, then write ``model.ckpt`` and ``train_log.csv``."""
    path = _out_dir(cfg, out)
    tr, _ = load_datasets(cfg, path / "cache")
    tcfg = train_config(cfg)

    def report(r):
        adv = "" if r.adversarial_acc is None else f" adv_acc={r.adversarial_acc:.4f}"
        echo(f"epoch {r.epoch}: loss={r.train_loss:.4f} nat_acc={r.natural_acc:.4f}{adv} ({r.wall_time:.1f}s)")

    params, log = train(model_spec(cfg), tr, tcfg, on_epoch=report)
    save_checkpoint(params, path / "model.ckpt", {"experiment_id": cfg["experiment_id"]})
    log.to_csv(path / "train_log.csv")
    return path / "model.ckpt", log


@dataclass(frozen=True)
class Cell:
    """One (attack set, defense) evaluation inside a table."""

    epsilon_override: float | None
    strength: float | None  # None: undefended
    hypotheses: object = "config"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _evaluate_cell(cfg, params, test, cell, cache):
    specs = attack_specs(cfg)
    if cell.epsilon_override is not None:
        specs = {k: s.with_epsilon(cell.epsilon_override) for k, s in specs.items()}
    defense = None if cell.strength is None else refine_config(cfg, cell.strength, cell.hypotheses)
    if defense is None:
        specs = {k: s for k, s in specs.items() if s.kind != "adaptive"}
    rows, timings = [], []
    started = time.perf_counter()
    rec = evaluate(params, test, specs, defense, chunk=cfg.get("chunk", 50), cache=cache)
    elapsed = time.perf_counter() - started
    lam = "" if defense is None else defense.strength
    hyp = "" if defense is None else (defense.top_k or params.spec.n_classes)
    for name, acc in list(rec.attack_acc.items()) + [("natural", rec.natural_acc)]:
        eps = 0.0 if name == "natural" else specs[name].epsilon
        regret = rec.regret_mean.get(name)
        rows.append({
            "schema_version": RESULT_SCHEMA_VERSION,
            "experiment_id": cfg["experiment_id"],
            "attack": name,
            "epsilon": eps,
            "lambda": lam,
            "hypotheses": hyp,
            "natural_acc": rec.natural_acc,
            "adv_acc": acc,
            "best_attack_acc": rec.best_attack_acc,
            "regret_mean": regret,
        })
        timings.append({"experiment_id": cfg["experiment_id"], "attack": name, "epsilon": eps,
                        "lambda": lam, "hypotheses": hyp, "wall_time": f"{elapsed:.3f}"})
    return rows, timings


def write_table(path, rows, columns):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in columns])


def read_table(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _load_params(cfg, path, checkpoint):
    ckpt = Path(checkpoint) if checkpoint else path / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}")
    return load_checkpoint(ckpt, model_spec(cfg))


def _run_cells(cfg, cells, path, checkpoint, jobs, cache=None):
    params = _load_params(cfg, path, checkpoint)
    _, test = load_datasets(cfg, path / "cache")
    results = []
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_evaluate_cell, cfg, params, test, c, None) for c in cells]
            results = [f.result() for f in futures]
    else:
        cache = {} if cache is None else cache
        results = [_evaluate_cell(cfg, params, test, c, cache) for c in cells]
    rows = [r for rs, _ in results for r in rs]
    timings = [t for _, ts in results for t in ts]
    return rows, timings


def cmd_eval(cfg, out=None, checkpoint=None, jobs=1, cache=None):
    """Evaluate every attack with no defense and with the configured defense.

    ``cache`` (a dict) receives the defense-free adversarial inputs of a
    serial run and is reused when already filled.
    """
    path = _out_dir(cfg, out)
    cells = [Cell(None, None)]
    if cfg.get("defense") is not None:
        cells.append(Cell(None, refine_config(cfg).strength))
    rows, timings = _run_cells(cfg, cells, path, checkpoint, jobs, cache)
    write_table(path / "results.csv", rows, RESULT_COLUMNS)
    write_table(path / "timings.csv", timings, TIMING_COLUMNS)
    return rows


def cmd_sweep(cfg, axis, values, out=None, checkpoint=None, jobs=1, cache=None):
    """One evaluation per value along ``axis`` (epsilon, lambda or hypotheses)."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    if list(values) != sorted(values):
        raise ConfigError("sweep values must be sorted")
    path = _out_dir(cfg, out)
    base_strength = refine_config(cfg).strength if cfg.get("defense") is not None else DEFAULT_LAMBDA[cfg["dataset"]["kind"]]
    if axis == "epsilon":
        cells = []
        for v in values:
            cells += [Cell(float(v), None), Cell(float(v), base_strength)]
    elif axis == "lambda":
        cells = [Cell(None, None)] + [Cell(None, float(v)) for v in values]
    elif axis == "hypotheses":
        cells = [Cell(None, base_strength, int(v)) for v in values]
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    rows, timings = _run_cells(cfg, cells, path, checkpoint, jobs, cache)
    write_table(path / f"sweep_{axis}.csv", rows, RESULT_COLUMNS)
    write_table(path / f"sweep_{axis}_timings.csv", timings, TIMING_COLUMNS)
    return rows
