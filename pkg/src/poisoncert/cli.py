"""Command-line driver: configuration, pipelines and report files.

Subcommands::

    poisoncert certify  --config CFG [--out DIR] [--time-limit S] [--threads K] [--deterministic]
                        [--obbt/--no-obbt] [--aux/--no-aux] [--dump-bounds]
    poisoncert attack   --config CFG [--out DIR]
    poisoncert bounds   --config CFG [--out DIR] [--obbt/--no-obbt] [--aux/--no-aux] [--dump-bounds]
    poisoncert export   --config CFG [--out DIR] [--aux/--no-aux] [--linearize]
    poisoncert gen-data --config CFG [--out DIR]

``CFG`` is a TOML or JSON file, or one of the built-in names ``halfmoons``,
``iris`` and ``diabetes``. Exit codes: 0 on success (whatever the
certificate status), 2 for configuration errors and 3 for internal errors.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lpformat
from .data import (
    CLASSIFICATION, DataError, Dataset, FeatureMap, expand, load_csv, load_diabetes_scaled, load_iris_binary,
    make_halfmoons, minmax_scale, save_csv,
)
from .encode import EncodeError, build
from .interval import AUXILIARY, DIRECT, big_m_tables, obbt_test_hull, propagate
from .objectives import DOS, ObjectiveSpec
from .solve import SolverOptions, branch_and_bound, evaluate_objective, local_search
from .threat import SUBSTITUTION, ThreatModel, validate
from .train import HINGE, Params, TrainConfig, init_params, replay

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTERNAL = 3


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


DEFAULTS = {
    "data": {"builtin": None, "train_csv": None, "test_csv": None, "header": False, "task": CLASSIFICATION,
             "seed": 0, "n_train": None, "n_test": None, "noise": 0.1, "batch_size": 20, "epochs": 1,
             "scale": None},
    "features": {"kind": "identity", "degree": 1, "include_bias": True},
    "train": {"lr": 0.1, "loss": HINGE, "hidden": [], "init": "zeros", "init_scale": 1.0, "seed": 0},
    "threat": {"kind": "bounded", "n": 0},
    "objective": {"kind": "test_error", "targets": None},
    "solver": {"time_limit": None, "node_limit": None, "threads": 1, "deterministic": True, "enum_limit": 200_000,
               "heuristic_budget": 20_000, "obbt": True, "aux": True, "groups": None, "seed": 0},
    "out": "poisoncert-run",
}

BUILTIN = {
    "halfmoons": {
        "data": {"builtin": "halfmoons", "n_train": 100, "n_test": 40, "noise": 0.1, "batch_size": 20, "epochs": 4,
                 "scale": [-1.0, 1.0]},
        "features": {"kind": "polynomial", "degree": 3, "include_bias": False},
        "train": {"lr": 0.5, "loss": "hinge", "init": "zeros"},
        "threat": {"kind": "bounded", "n": 3, "label_flip": True},
        "objective": {"kind": "test_error"},
        "solver": {"time_limit": 600},
        "out": "runs/halfmoons",
    },
    "iris": {
        "data": {"builtin": "iris", "batch_size": 20, "epochs": 4},
        "train": {"lr": 0.03, "loss": "hinge", "init": "zeros"},
        "threat": {"kind": "substitution", "n": 8, "domain_lo": 0.0, "domain_hi": 1.0, "grid": "vertices"},
        "objective": {"kind": "test_error"},
        "solver": {"time_limit": 600},
        "out": "runs/iris",
    },
    "diabetes": {
        "data": {"builtin": "diabetes", "batch_size": 32, "epochs": 4},
        "train": {"lr": 0.3, "loss": "squared_error", "init": "lstsq"},
        "threat": {"kind": "bounded", "n": 50, "epsilon": 0.0, "nu": 0.5},
        "objective": {"kind": "dos"},
        "solver": {"time_limit": 600, "heuristic_budget": 400_000},
        "out": "runs/diabetes",
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """Fully resolved run configuration; every default is explicit in :meth:`to_dict`."""

    data: dict
    features: dict
    train: dict
    threat: dict
    objective: dict
    solver: dict
    out: str
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> RunConfig:
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        merged = _merge(DEFAULTS, raw)
        for sec in ("data", "features", "train", "objective", "solver"):
            extra = set(merged[sec]) - set(DEFAULTS[sec])
            if extra:
                raise ConfigError(f"unknown keys in [{sec}]: {sorted(extra)}")
        rc = cls(**{k: merged[k] for k in DEFAULTS}, base_dir=Path(base_dir or Path.cwd()))
        rc.validate()
        return rc

    def validate(self) -> None:
        d = self.data
        if d["builtin"] is None and d["train_csv"] is None:
            raise ConfigError("[data] needs either builtin or train_csv")
        if d["builtin"] is not None and d["builtin"] not in BUILTIN:
            raise ConfigError(f"unknown builtin dataset {d['builtin']!r}")
        for key in ("train_csv", "test_csv"):
            if d[key] is not None and not self.path(d[key]).is_file():
                raise ConfigError(f"[data] {key} does not exist: {d[key]}")
        init = self.train["init"]
        if init not in ("zeros", "uniform", "lstsq") and not self.path(init).is_file():
            raise ConfigError(f"[train] init must be zeros, uniform, lstsq or a params JSON file, got {init!r}")
        if self.solver["time_limit"] is not None and self.solver["time_limit"] <= 0:
            raise ConfigError("[solver] time_limit must be positive")

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in DEFAULTS}


def load_config(spec: str) -> RunConfig:
    """Load a built-in name, a TOML file or a JSON file."""
    if spec in BUILTIN:
        return RunConfig.from_dict(_merge(DEFAULTS, BUILTIN[spec]))
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"config {spec!r} is neither a built-in name nor an existing file")
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(path.read_text(encoding="utf-8"))
        else:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in BUILTIN:
            raise ConfigError(f"unknown preset {preset!r}")
        raw = _merge(BUILTIN[preset], raw)
    return RunConfig.from_dict(raw, base_dir=path.parent)


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    raw: Dataset
    dataset: Dataset
    feature_map: FeatureMap
    config: TrainConfig
    threat: ThreatModel
    objective: ObjectiveSpec


def _load_data(rc: RunConfig) -> Dataset:
    d = rc.data
    kw = {"batch_size": d["batch_size"], "epochs": d["epochs"]}
    if d["builtin"] == "halfmoons":
        ds = make_halfmoons(d["n_train"] or 100, d["n_test"] or 40, d["noise"], d["seed"], **kw)
    elif d["builtin"] == "iris":
        ds = load_iris_binary(d["seed"], n_train=d["n_train"] or 80, **kw)
    elif d["builtin"] == "diabetes":
        ds = load_diabetes_scaled(d["seed"], n_train=d["n_train"] or 320, n_test=d["n_test"] or 89, **kw)
    else:
        test = rc.path(d["test_csv"]) if d["test_csv"] else None
        ds = load_csv(rc.path(d["train_csv"]), d["task"], header=d["header"], test_path=test,
                      n_train=d["n_train"], **kw)
    if d["builtin"] is None or d["builtin"] == "halfmoons":
        if d["scale"] is not None:
            ds = minmax_scale(ds, feature_range=tuple(d["scale"]))
    return ds


def _lstsq_init(ds: Dataset) -> Params:
    A = np.hstack([ds.X_train, np.ones((ds.n_train, 1))])
    coef = np.linalg.lstsq(A, ds.y_train, rcond=None)[0]
    return Params([coef[:-1][None]], [coef[-1:]])


def build_problem(rc: RunConfig) -> Problem:
    try:
        raw = _load_data(rc)
        f = rc.features
        fmap = FeatureMap(f["kind"], f["degree"], f["include_bias"])
        ds = expand(fmap, raw)
        tr = rc.train
        sizes = [ds.d, *tr["hidden"], 1]
        init = tr["init"]
        if init == "zeros":
            params = init_params(sizes, tr["seed"], 0.0)
        elif init == "uniform":
            params = init_params(sizes, tr["seed"], tr["init_scale"])
        elif init == "lstsq":
            if tr["hidden"]:
                raise ConfigError("lstsq initialization needs a linear model")
            params = _lstsq_init(ds)
        else:
            params = Params.from_json(rc.path(init).read_text(encoding="utf-8"))
        lr = tuple(tr["lr"]) if isinstance(tr["lr"], list) else tr["lr"]
        cfg = TrainConfig(lr, tr["loss"], params, tr["seed"])
        cfg.check_task(ds)
        tm = ThreatModel.from_dict(rc.threat)
        tm.check(ds)
        obj = ObjectiveSpec(rc.objective["kind"], rc.objective["targets"])
        if obj.kind != DOS:
            if ds.n_test == 0:
                raise ConfigError("test-set objectives need a test split")
            if ds.task != CLASSIFICATION:
                raise ConfigError("test-error and targeted objectives need classification data")
            if obj.targets is not None:
                obj.target_array(ds.n_test)
    except ConfigError:
        raise
    except (DataError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return Problem(raw, ds, fmap, cfg, tm, obj)


def solver_options(rc: RunConfig) -> SolverOptions:
    s = rc.solver
    return SolverOptions(mode=AUXILIARY if s["aux"] else DIRECT, obbt=s["obbt"], obbt_groups=s["groups"],
                         time_limit=s["time_limit"], node_limit=s["node_limit"], enum_limit=s["enum_limit"],
                         heuristic_budget=s["heuristic_budget"], threads=s["threads"],
                         deterministic=s["deterministic"], seed=s["seed"])


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def compute_bounds(pb: Problem, rc: RunConfig, partial=None):
    """Interval pipeline; returns the bound state and the (possibly tightened) test-logit bounds."""
    mode = AUXILIARY if rc.solver["aux"] else DIRECT
    bs = propagate(pb.config, pb.dataset, pb.threat, partial, mode)
    tl = bs.test_logits
    if rc.solver["obbt"] and tl is not None and pb.dataset.n_test:
        tl = obbt_test_hull(bs, pb.config, pb.dataset, rc.solver["groups"] or pb.dataset.n_test, rc.solver["seed"])
    return bs, tl


def bounds_report(pb: Problem, rc: RunConfig, dump: bool = False) -> dict:
    bs, tl = compute_bounds(pb, rc)
    out = {"mode": bs.mode, "obbt": bool(rc.solver["obbt"]), "aux": bool(rc.solver["aux"]),
           "max_param_width": float(bs.params[-1].max_width())}
    if tl is not None:
        gaps = (tl.hi - tl.lo).tolist()
        out["test"] = [{"index": i, "lo": float(tl.lo[i]), "hi": float(tl.hi[i]), "gap": float(g)}
                       for i, g in enumerate(gaps)]
        out["mean_test_gap"] = float(np.mean(gaps)) if gaps else 0.0
    if dump:
        out["big_m"] = big_m_tables(bs, tl).to_dict()
    return out


def _loss_curves(pb: Problem, assignment) -> list[list]:
    clean = replay(pb.config, pb.dataset)
    pois = replay(pb.config, pb.dataset, assignment)
    ce, pe = clean.epoch_losses(pb.dataset), pois.epoch_losses(pb.dataset)
    rows, cc, cp = [], 0.0, 0.0
    for e in range(pb.dataset.epochs):
        cc += ce[e]
        cp += pe[e]
        rows.append([e + 1, ce[e], pe[e], cc, cp])
    return rows


def _boundary_grid(pb: Problem, assignment, steps: int = 60) -> list[list]:
    raw = pb.raw
    X = np.vstack([raw.X_train, raw.X_test]) if raw.n_test else raw.X_train
    lo, hi = X.min(axis=0), X.max(axis=0)
    pad = 0.05 * (hi - lo)
    g0 = np.linspace(lo[0] - pad[0], hi[0] + pad[0], steps)
    g1 = np.linspace(lo[1] - pad[1], hi[1] + pad[1], steps)
    pts = np.array([(a, b) for b in g1 for a in g0])
    feats = pb.feature_map.transformer(2).transform(pts)
    from .estimators import SGDNetwork  # local import keeps the CLI import light

    rows = []
    clean = replay(pb.config, pb.dataset).final
    pois = replay(pb.config, pb.dataset, assignment).final
    vals = []
    for params in (clean, pois):
        net = SGDNetwork()
        net.params_ = params
        vals.append(net.decision_function(feats))
    for k, (a, b) in enumerate(pts):
        rows.append([a, b, vals[0][k], vals[1][k]])
    return rows


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _attack_json(pb: Problem, assignment) -> dict:
    idx = [int(i) for i in assignment.poisoned_indices]
    return {"n_poisoned": len(idx), "indices": idx,
            "values": [{"index": i, "x": assignment.x[i].tolist(), "y": float(assignment.y[i]),
                        "clean_x": pb.dataset.X_train[i].tolist(), "clean_y": float(pb.dataset.y_train[i])}
                       for i in idx],
            "hash": assignment.digest()}


def _write_plotdata(pb: Problem, assignment, out: Path) -> None:
    _write_csv(out / "plotdata" / "loss_curves.csv",
               ["epoch", "clean_loss", "poisoned_loss", "clean_cumulative", "poisoned_cumulative"],
               _loss_curves(pb, assignment))
    if pb.raw.d == 2 and pb.dataset.task == CLASSIFICATION:
        _write_csv(out / "plotdata" / "decision_boundary.csv", ["x1", "x2", "clean_logit", "poisoned_logit"],
                   _boundary_grid(pb, assignment))
        _write_csv(out / "plotdata" / "training_points.csv", ["index", "x1", "x2", "label", "poisoned"],
                   [[i, float(x[0]), float(x[1]), float(assignment.y[i]), int(assignment.status[i] == 1)]
                    for i, x in enumerate(pb.raw.X_train)])


def _summary(pb: Problem, cert_primal: float, cert_bound: float) -> dict:
    clean = evaluate_objective(replay(pb.config, pb.dataset), pb.objective, pb.dataset)
    out = {"clean_objective": clean}
    if pb.objective.kind == "test_error":
        n = pb.dataset.n_test
        out["clean_accuracy"] = 1.0 - clean / n
        out["attacked_accuracy"] = 1.0 - cert_primal / n
        out["certified_accuracy"] = 1.0 - cert_bound / n
    return out


def run_certify(rc: RunConfig, dump_bounds: bool = False, quiet: bool = False):
    pb = build_problem(rc)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    prog_path = out / "progress.jsonl"
    with open(prog_path, "w", encoding="utf-8") as fh:
        def on_progress(ev):
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
            fh.flush()
            return False

        cert = branch_and_bound(pb.config, pb.dataset, pb.threat, pb.objective, solver_options(rc), on_progress)
    solve_time = time.perf_counter() - t0
    if validate(pb.threat, cert.incumbent, pb.dataset):
        raise RuntimeError("solver returned an invalid incumbent")
    report = {"certificate": cert.to_dict(), "config": rc.to_dict(),
              "seeds": {"data": rc.data["seed"], "train": rc.train["seed"], "solver": rc.solver["seed"],
                        "threat_grid": pb.threat.grid_seed},
              "summary": _summary(pb, cert.primal, cert.bound),
              "timing": {"solve_seconds": solve_time}}
    _write_json(out / "report.json", report)
    _write_json(out / "attack.json", _attack_json(pb, cert.incumbent))
    _write_json(out / "bounds.json", bounds_report(pb, rc, dump_bounds))
    _write_plotdata(pb, cert.incumbent, out)
    if not quiet:
        print(f"status={cert.status} primal={cert.primal:g} bound={cert.bound:g} nodes={cert.nodes} "
              f"time={solve_time:.1f}s -> {out}")
    return cert


def run_attack(rc: RunConfig, quiet: bool = False):
    pb = build_problem(rc)
    out = Path(rc.out)
    t0 = time.perf_counter()
    res = local_search(pb.config, pb.dataset, pb.threat, pb.objective, budget=rc.solver["heuristic_budget"])
    attack = _attack_json(pb, res.assignment)
    attack.update({"objective": res.value, "exhausted": res.exhausted, "optimal": res.optimal,
                   "evaluations": res.evaluations, "summary": _summary(pb, res.value, res.value),
                   "config": rc.to_dict()})
    _write_json(out / "attack.json", attack)
    _write_plotdata(pb, res.assignment, out)
    if not quiet:
        print(f"attack objective={res.value:g} poisoned={attack['n_poisoned']} optimal={res.optimal} "
              f"time={time.perf_counter() - t0:.1f}s -> {out}")
    return res


def run_bounds(rc: RunConfig, dump_bounds: bool = False, quiet: bool = False) -> dict:
    pb = build_problem(rc)
    rep = bounds_report(pb, rc, dump_bounds)
    _write_json(Path(rc.out) / "bounds.json", rep)
    if not quiet:
        print(f"mode={rep['mode']} obbt={rep['obbt']} mean test gap={rep.get('mean_test_gap', float('nan')):.6g}")
    return rep


def run_export(rc: RunConfig, linearize: bool = False, quiet: bool = False):
    pb = build_problem(rc)
    aux = bool(rc.solver["aux"]) and pb.threat.kind == SUBSTITUTION
    rc_b = copy.copy(rc)
    rc_b.solver = dict(rc.solver, aux=aux)
    bs, tl = compute_bounds(pb, rc_b)
    try:
        model = build(pb.config, pb.dataset, pb.threat, pb.objective, big_m_tables(bs, tl), aux_mode=aux,
                      linearize=linearize)
    except EncodeError as exc:
        raise ConfigError(str(exc)) from exc
    path = Path(rc.out) / "model.lp"
    path.parent.mkdir(parents=True, exist_ok=True)
    lpformat.emit(model, path)
    census = model.census()
    if not quiet:
        print(" ".join(f"{k}={v}" for k, v in census.items()) + f" -> {path}")
    return model, path


def run_gen_data(rc: RunConfig, quiet: bool = False) -> list[Path]:
    try:
        ds = _load_data(rc)
    except (DataError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "train.csv", out / "test.csv"]
    save_csv(ds, paths[0], split="train")
    save_csv(ds, paths[1], split="test")
    if not quiet:
        print(f"wrote {ds.n_train} training and {ds.n_test} test rows to {out}")
    return paths


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poisoncert", description="Certified worst-case data poisoning for SGD training.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("certify", "branch-and-bound certificate with report files"),
                        ("attack", "heuristic attack only"),
                        ("export", "write the MIQCP model file"),
                        ("bounds", "interval bounds only"),
                        ("gen-data", "write a built-in dataset as CSV")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="TOML/JSON file or built-in name")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the data seed")
        if name in ("certify", "attack"):
            sp.add_argument("--time-limit", type=float)
            sp.add_argument("--threads", type=int)
            sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
            sp.add_argument("--n", type=int, help="override the poisoning budget")
        if name in ("certify", "bounds", "export"):
            sp.add_argument("--obbt", action=argparse.BooleanOptionalAction, default=None)
            sp.add_argument("--aux", action=argparse.BooleanOptionalAction, default=None)
        if name in ("certify", "bounds"):
            sp.add_argument("--dump-bounds", action="store_true")
        if name == "export":
            sp.add_argument("--linearize", action="store_true")
    return p


def _apply_overrides(rc: RunConfig, args) -> None:
    if args.out:
        rc.out = args.out
    if args.seed is not None:
        rc.data["seed"] = args.seed
    for flag, key in (("time_limit", "time_limit"), ("threads", "threads"), ("deterministic", "deterministic"),
                      ("obbt", "obbt"), ("aux", "aux")):
        v = getattr(args, flag, None)
        if v is not None:
            rc.solver[key] = v
    if getattr(args, "n", None) is not None:
        rc.threat["n"] = args.n
    rc.validate()


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        rc = load_config(args.config)
        _apply_overrides(rc, args)
        if args.command != "gen-data":
            build_problem(rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "certify":
            run_certify(rc, args.dump_bounds)
        elif args.command == "attack":
            run_attack(rc)
        elif args.command == "bounds":
            run_bounds(rc, args.dump_bounds)
        elif args.command == "export":
            run_export(rc, args.linearize)
        else:
            run_gen_data(rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as an exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
