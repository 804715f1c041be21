"""Experiment orchestration: configs, run directories, grids and aggregate tables.

Each grid cell is one training run written to its own directory. A cell is
complete once its ``record.json`` exists, which is what ``resume`` checks.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bilevel import (
    EXACT_MAX_PARAMS,
    Fixed,
    RunRecord,
    TrainConfig,
    compute_hypergrad,
    hypergrad_exact,
    parse_scheme,
    train_loop,
)
from .losses import GAMMA_GRID, primary_loss
from .meltr_net import VARIANTS, MeltrConfig, MeltrNet
from .tasks import SUITES, make_suite

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2

TOP_KEYS = {"suite", "scheme", "alpha", "beta", "gamma", "K", "epochs", "seed", "meltr", "flags"}
MELTR_KEYS = {"d", "heads", "variant"}
FLAG_KEYS = {"direct_reg_grad", "shared_outer_batch"}

METRICS_HEADER = ("epoch", "train_pri", "val_pri", "reg", "wall_ms")
PARTIALS_HEADER = ("epoch", "task_id", "mean_partial")
RANGES_HEADER = ("task_id", "min", "q1", "median", "q3", "max")
SWEEP_HEADER = ("task_id", "loss_value", "meltr_output", "partial")
SURFACE_HEADER = ("loss_a", "loss_b", "meltr_output")
COMPARE_HEADER = ("scheme", "seed", "val_pri", "ms_per_epoch", "cos_to_exact")
GAMMA_HEADER = ("gamma", "val_pri", "reg_gap")
ARCH_HEADER = ("variant", "val_pri", "status", "max_meta_grad")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSpec:
    """One grid cell: a suite name plus a full training configuration."""

    suite: str
    train: TrainConfig

    @property
    def name(self) -> str:
        c = self.train
        scheme = str(c.scheme).replace(":", "-").replace("/", "_")
        return f"{self.suite}__{scheme}__g{c.gamma:g}__{c.variant}__s{c.seed}"


# ---------------------------------------------------------------------------
# config parsing


def _number(value, key, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    return int(value) if integer else float(value)


def _check_keys(section: dict, allowed: set[str], where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def parse_config(doc: dict, env: dict | None = None) -> RunSpec:
    """Validate a config document. Unknown keys are errors; ``MELTR_SEED`` overrides ``seed``."""
    env = os.environ if env is None else env
    _check_keys(doc, TOP_KEYS, "config")
    if "suite" not in doc:
        raise ConfigError("config is missing 'suite'")
    suite = doc["suite"]
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {sorted(SUITES)}")
    kw: dict = {}
    if "scheme" in doc:
        try:
            kw["scheme"] = parse_scheme(str(doc["scheme"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    for key in ("alpha", "beta", "gamma"):
        if key in doc:
            kw[key] = _number(doc[key], key)
    for key in ("K", "epochs", "seed"):
        if key in doc:
            kw[key] = _number(doc[key], key, integer=True)
    meltr = doc.get("meltr", {})
    _check_keys(meltr, MELTR_KEYS, "meltr")
    for key in ("d", "heads"):
        if key in meltr:
            kw[key] = _number(meltr[key], f"meltr.{key}", integer=True)
    if "variant" in meltr:
        if meltr["variant"] not in VARIANTS:
            raise ConfigError(f"meltr.variant must be one of {VARIANTS}")
        kw["variant"] = meltr["variant"]
    flags = doc.get("flags", {})
    _check_keys(flags, FLAG_KEYS, "flags")
    for key, target in (("direct_reg_grad", "include_direct_reg_grad"), ("shared_outer_batch", "shared_outer_batch")):
        if key in flags:
            if not isinstance(flags[key], bool):
                raise ConfigError(f"flags.{key} must be true or false")
            kw[target] = flags[key]
    if env.get("MELTR_SEED"):
        try:
            kw["seed"] = int(env["MELTR_SEED"])
        except ValueError:
            raise ConfigError(f"MELTR_SEED must be an integer, got {env['MELTR_SEED']!r}") from None
    try:
        cfg = TrainConfig(**kw)
        MeltrConfig(n_tasks=2, d=cfg.d, heads=cfg.heads, variant=cfg.variant)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunSpec(suite, cfg)


def load_config(path: str | Path) -> RunSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc)


def default_spec(suite: str = "regression", **overrides) -> RunSpec:
    return RunSpec(suite, TrainConfig(**overrides))


# ---------------------------------------------------------------------------
# persistence


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def save_run(record: RunRecord, spec: RunSpec, run_dir: Path) -> None:
    """Write CSVs and the network snapshot first; ``record.json`` last marks completion."""
    run_dir.mkdir(parents=True, exist_ok=True)
    n_ep = len(record.val_pri)
    _write_csv(run_dir / "metrics.csv", METRICS_HEADER,
               ((e, record.train_pri[e], record.val_pri[e], record.reg[e], record.wall_ms[e]) for e in range(n_ep)))
    _write_csv(run_dir / "partials.csv", PARTIALS_HEADER,
               ((e, t, p) for e, row in enumerate(record.partials) for t, p in enumerate(row)))
    if record.loss_ranges:
        _write_csv(run_dir / "loss_ranges.csv", RANGES_HEADER,
                   ((t, *stats) for t, stats in enumerate(record.loss_ranges[-1])))
    if record.meltr_state is not None:
        np.savez(run_dir / "meltr.npz", **record.meltr_state)
    doc = {"suite_name": spec.suite, **_to_jsonable(record.metrics()),
           "wall_ms": record.wall_ms, "outer_step_ms": record.outer_step_ms}
    tmp = run_dir / "record.json.tmp"
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(run_dir / "record.json")


def load_record(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "record.json"
    if not path.exists():
        raise FileNotFoundError(f"no record.json in {run_dir}")
    return json.loads(path.read_text())


def load_snapshot(run_dir: str | Path) -> tuple[MeltrNet, dict]:
    run_dir = Path(run_dir)
    rec = load_record(run_dir)
    snap = run_dir / "meltr.npz"
    if not snap.exists():
        raise FileNotFoundError(f"no MELTR snapshot in {run_dir} (fixed-weight runs have none)")
    cfg = rec["config"]
    mc = MeltrConfig(n_tasks=len(rec["suite"]["tasks"]), d=cfg["d"], heads=cfg["heads"], layers=cfg["layers"],
                     variant=cfg["variant"])
    with np.load(snap) as data:
        params = {k: data[k] for k in data.files}
    return MeltrNet(mc, params), rec


# ---------------------------------------------------------------------------
# execution


@dataclass
class CellResult:
    spec: RunSpec
    run_dir: Path
    record: dict
    cos_to_exact: float | None = None
    skipped: bool = False


def execute(spec: RunSpec, run_dir: Path, with_cosine: bool = False) -> CellResult:
    task = make_suite(spec.suite, spec.train.seed)
    record = train_loop(spec.train, task)
    save_run(record, spec, run_dir)
    cos = cosine_to_exact(spec, task, record) if with_cosine else None
    if cos is not None:
        (run_dir / "cos_to_exact.json").write_text(json.dumps(cos))
    return CellResult(spec, run_dir, load_record(run_dir), cos)


def _execute_star(args):
    return execute(*args)


@dataclass
class ExperimentPlan:
    """Cross product of schemes, gammas, seeds and variants over one suite."""

    base: RunSpec
    output_dir: Path
    schemes: Sequence[str] = ()
    gammas: Sequence[float] = ()
    seeds: Sequence[int] = ()
    variants: Sequence[str] = ()
    jobs: int = 1
    with_cosine: bool = False
    cells: list[RunSpec] = field(init=False)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        b = self.base.train
        cells = []
        for scheme in self.schemes or [str(b.scheme)]:
            for gamma in self.gammas or [b.gamma]:
                for variant in self.variants or [b.variant]:
                    for seed in self.seeds or [b.seed]:
                        cfg = replace(b, scheme=parse_scheme(scheme), gamma=float(gamma), variant=variant, seed=int(seed))
                        cells.append(RunSpec(self.base.suite, cfg))
        names = [c.name for c in cells]
        if len(set(names)) != len(names):
            raise ConfigError("plan contains duplicate cells")
        self.cells = cells

    def run_dir(self, spec: RunSpec) -> Path:
        return self.output_dir / "runs" / spec.name

    def run(self, resume: bool = False) -> list[CellResult]:
        """Run every cell; with ``resume`` completed cells are loaded instead of retrained."""
        results: dict[str, CellResult] = {}
        todo = []
        for spec in self.cells:
            d = self.run_dir(spec)
            if resume and (d / "record.json").exists():
                cos_file = d / "cos_to_exact.json"
                cos = json.loads(cos_file.read_text()) if cos_file.exists() else None
                results[spec.name] = CellResult(spec, d, load_record(d), cos, skipped=True)
            else:
                todo.append((spec, d, self.with_cosine))
        log.info("%d cells, %d to run", len(self.cells), len(todo))
        if self.jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                for res in pool.map(_execute_star, todo):
                    results[res.spec.name] = res
        else:
            for args in todo:
                res = execute(*args)
                results[res.spec.name] = res
        return [results[s.name] for s in self.cells]


def default_jobs() -> int:
    try:
        import psutil

        return psutil.cpu_count(logical=False) or 1
    except ImportError:
        return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# analyses


def cosine_to_exact(spec: RunSpec, task, record: RunRecord) -> float | None:
    """Cosine between the scheme's hypergradient and the exact one at the final state.

    Only defined for learned combiners on learners small enough for the exact scheme.
    """
    if isinstance(spec.train.scheme, Fixed) or record.meltr_state is None or record.diverged:
        return None
    if task.num_learner_params() > EXACT_MAX_PARAMS:
        return None
    cfg = spec.train
    net = MeltrNet(MeltrConfig(task.n_tasks, cfg.d, cfg.heads, cfg.layers, cfg.variant), record.meltr_state)
    from . import autodiff as ad

    w = [ad.parameter(a) for a in record.learner_state]
    phi = net.parameters()
    aux_batch = next(task.train_batches(cfg.seed + 10_000))
    val_batch = next(task.val_batches(cfg.seed + 10_000))

    def aux_builder(ws):
        return net(task.losses(ws, aux_batch))

    def pri_builder(ws):
        return primary_loss(task.losses(ws, val_batch), net, cfg.gamma)

    try:
        exact = ad.flatten(hypergrad_exact(w, phi, pri_builder, aux_builder))
    except np.linalg.LinAlgError:
        return None
    approx = ad.flatten(compute_hypergrad(cfg.scheme, w, phi, pri_builder, aux_builder, None, cfg.alpha, "truncate"))
    denom = np.linalg.norm(exact) * np.linalg.norm(approx)
    return float(exact @ approx / denom) if denom > 0 else None


def final_val(rec: dict) -> float:
    if rec["status"] != "ok" or not rec["val_pri"]:
        return float("inf")
    return float(rec["val_pri"][-1])


def compare_rows(results: Sequence[CellResult]) -> list[tuple]:
    rows = []
    for r in results:
        rec = r.record
        c = r.spec.train
        val = "diverged" if rec["status"] != "ok" else rec["val_pri"][-1]
        ms = float(np.mean(rec["wall_ms"])) if rec["wall_ms"] else float("nan")
        rows.append((str(c.scheme), c.seed, val, ms, "" if r.cos_to_exact is None else r.cos_to_exact))
    return rows


def gamma_rows(results: Sequence[CellResult]) -> list[tuple]:
    by_gamma: dict[float, list[dict]] = {}
    for r in results:
        by_gamma.setdefault(r.spec.train.gamma, []).append(r.record)
    rows = []
    for g, recs in by_gamma.items():
        vals = [final_val(x) for x in recs]
        gaps = [x["reg"][-1] if x["status"] == "ok" and x["reg"] else float("inf") for x in recs]
        rows.append((g, float(np.median(vals)), float(np.median(gaps))))
    return rows


def arch_rows(results: Sequence[CellResult]) -> list[tuple]:
    by_var: dict[str, list[dict]] = {}
    for r in results:
        by_var.setdefault(r.spec.train.variant, []).append(r.record)
    rows = []
    for v, recs in by_var.items():
        max_grad = max((max(x["hypergrad_norms"], default=0.0) for x in recs), default=0.0)
        untrainable = max_grad == 0.0 or any("meta-gradient identically zero" in x["warnings"] for x in recs)
        status = "untrainable" if untrainable else ("diverged" if any(x["status"] != "ok" for x in recs) else "ok")
        rows.append((v, float(np.median([final_val(x) for x in recs])), status, max_grad))
    return rows


def write_table(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(path, header, rows)
    return path


# ---------------------------------------------------------------------------
# trace


def most_harmful_task(rec: dict) -> int:
    """The auxiliary task designed as harmful, else the one with the lowest final partial."""
    roles = rec["suite"].get("roles", [])
    if "harmful" in roles:
        return roles.index("harmful")
    last = np.asarray(rec["partials"][-1]) if rec["partials"] else np.ones(len(rec["baseline"]))
    return int(np.argmin(last[1:]) + 1)


def trace(run_dir: str | Path, out_dir: str | Path | None = None, plots: bool = True) -> dict[str, Path]:
    """Loss-surface sweeps, the 2-D surface for (primary, most harmful) and the weight traces."""
    from .meltr_net import surface_2d, sweep_surface

    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "trace"
    out.mkdir(parents=True, exist_ok=True)
    net, rec = load_snapshot(run_dir)
    names = rec["suite"]["tasks"]
    baseline = np.asarray(rec["baseline"]) if rec["baseline"] else np.ones(net.n_tasks)
    rows = [row for t in range(net.n_tasks) for row in sweep_surface(net, t, (0.0, 3.0), 31, baseline)]
    other = most_harmful_task(rec)
    va, vb, grid = surface_2d(net, 0, other, (0.0, 3.0), 31, baseline)
    files = {
        "sweep": out / "sweep.csv",
        "surface_2d": out / "surface_2d.csv",
        "partials": out / "partials.csv",
        "loss_ranges": out / "loss_ranges.csv",
    }
    _write_csv(files["sweep"], SWEEP_HEADER, rows)
    _write_csv(files["surface_2d"], SURFACE_HEADER,
               ((a, b, grid[i, j]) for i, a in enumerate(va) for j, b in enumerate(vb)))
    _write_csv(files["partials"], PARTIALS_HEADER,
               ((e, t, p) for e, row in enumerate(rec["partials"]) for t, p in enumerate(row)))
    ranges = rec["loss_ranges"][-1] if rec["loss_ranges"] else []
    _write_csv(files["loss_ranges"], RANGES_HEADER, ((t, *s) for t, s in enumerate(ranges)))
    if plots:
        from . import plots as P

        files["sweep_png"] = P.plot_sweeps(rows, names, out / "sweep.png")
        files["surface_png"] = P.plot_surface(va, vb, grid, (names[0], names[other]), out / "surface_2d.png")
        if rec["partials"]:
            files["partials_png"] = P.plot_partials(rec["partials"], names, out / "partials.png")
        if ranges:
            files["loss_ranges_png"] = P.plot_loss_ranges(ranges, names, out / "loss_ranges.png")
    return files
