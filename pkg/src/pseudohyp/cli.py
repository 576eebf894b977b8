"""``pseudohyp`` command line: one subcommand per procedure, plus run manifests."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .continuity import (DEFAULT_PAIR_BUDGET, ContinuityCloud, Verdict, build_cloud, classify_cloud,
                         render_cloud, save_image, write_cloud_csv)
from .integrate import DEFAULT_ATOL, DEFAULT_RTOL, IntegrationError, integrate_trajectory, iterate_map
from .lyapunov import check_necessary_conditions, lyapunov_spectrum
from .systems import REFERENCE_PARAMS, SYSTEM_NAMES, ModelError, SystemModel, builtin_system

log = logging.getLogger("pseudohyp")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

FLOW_TRAJ = {"transient": 100.0, "span": 2000.0, "dt": 0.01}
MAP_TRAJ = {"transient": 10_000, "count": 200_000}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return json.dumps(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return f"{v:.17g}" if math.isfinite(v) else "null"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(x)}" for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if hasattr(v, "value"):
        return _fmt(v.value)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def dumps17(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    return _fmt(obj) + "\n"


def _digest(obj) -> str:
    return hashlib.sha256(dumps17(obj).encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    """Everything that shaped one run. ``digest`` covers the merged config only,
    so identical reruns embed identical digests in their outputs."""

    command: list
    config: dict
    outputs: list = field(default_factory=list)
    started: float = field(default_factory=time.time)

    @property
    def digest(self) -> str:
        return _digest(self.config)

    def as_dict(self) -> dict:
        import numba
        import scipy
        return {"command": self.command, "config_digest": self.digest, "config": self.config,
                "versions": {"pseudohyp": __version__, "numpy": np.__version__, "numba": numba.__version__,
                             "scipy": scipy.__version__, "python": sys.version.split()[0]},
                "outputs": self.outputs, "wall_clock_s": time.time() - self.started}

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(dumps17(self.as_dict()))
        return path


class Run:
    """Output directory bound to a manifest."""

    def __init__(self, out: Path, manifest: RunManifest):
        self.out = out
        self.manifest = manifest
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.manifest.outputs.append(name)
        return self.out / name

    def json(self, name: str, obj: dict) -> dict:
        obj = {**obj, "manifest_digest": self.manifest.digest}
        self.path(name).write_text(dumps17(obj))
        return obj

    def image(self, name: str, img: np.ndarray) -> None:
        p = save_image(img, self.out / name)
        self.manifest.outputs.append(p.name)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def _trajectory(model: SystemModel, x0, cfg: dict):
    if model.is_flow:
        return integrate_trajectory(model, x0, cfg["transient"], cfg["span"], cfg["dt"], rtol=cfg["rtol"],
                                    atol=cfg["atol"])
    return iterate_map(model, x0, int(cfg["transient"]), int(cfg["count"]))


def default_x0(model: SystemModel) -> list:
    return {"lorenz3d": [0.1, 0.1, 20.0], "lorenz4d": [0.1, 0.1, 20.0, 0.1],
            "anosov_linear": [0.1234, 0.5678], "anosov_perturbed": [0.1234, 0.5678]}.get(
        model.name, [0.1] * model.dimension)


@dataclass(frozen=True)
class CompositeVerdict:
    verdict: str
    stage: Optional[str]
    details: dict

    @property
    def pseudohyperbolic(self) -> bool:
        return self.verdict == "Pseudohyperbolic"

    def as_dict(self) -> dict:
        return {"verdict": self.verdict, "stage": self.stage, **self.details}


def verify_pseudohyperbolicity(model: SystemModel, x0=None, budgets: Optional[dict] = None) -> CompositeVerdict:
    """Spectrum, necessary conditions, then both continuity clouds.

    Returns ``Pseudohyperbolic`` only when every stage passes; otherwise the
    first failing stage is named. Numerical failures are reported as stage
    failures, never as a pass.
    """
    b = {"rtol": DEFAULT_RTOL, "atol": DEFAULT_ATOL, "pairs": DEFAULT_PAIR_BUDGET, "seed": 0,
         "lyap_transient": None, "lyap_span": None, **(FLOW_TRAJ if model.is_flow else MAP_TRAJ),
         **(budgets or {})}
    x0 = default_x0(model) if x0 is None else list(x0)
    details: dict = {"system": model.name, "params": dict(model.params)}
    k = model.dimension - 1
    try:
        spec = lyapunov_spectrum(model, x0, b["lyap_transient"], b["lyap_span"], rtol=b["rtol"], atol=b["atol"])
    except IntegrationError as exc:
        return CompositeVerdict("NotPseudohyperbolic", "spectrum", {**details, "error": str(exc)})
    details["spectrum"] = spec.as_dict()
    rep = check_necessary_conditions(spec, k, model.is_flow)
    details["necessary_conditions"] = rep.as_dict()
    if not rep.passed:
        return CompositeVerdict("NotPseudohyperbolic", "necessary_conditions", details)
    try:
        traj = _trajectory(model, x0, b)
        from .tangent_fields import build_fields
        fields = build_fields(model, traj, seed=b["seed"], rtol=b["rtol"], atol=b["atol"])
    except (IntegrationError, ValueError) as exc:
        return CompositeVerdict("NotPseudohyperbolic", "tangent_fields", {**details, "error": str(exc)})
    verdicts = {}
    for tag in ("ess", "ncu"):
        cloud = build_cloud(fields, tag, b["pairs"], seed=b["seed"])
        verdicts[tag] = classify_cloud(cloud).label
    details["continuity"] = verdicts
    if all(v == Verdict.CONTINUOUS.value for v in verdicts.values()):
        return CompositeVerdict("Pseudohyperbolic", None, details)
    return CompositeVerdict("NotPseudohyperbolic", "continuity", details)


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

def _kv(text: str) -> tuple[str, float]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k.strip(), float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"parameter {k!r} needs a number, got {v!r}") from None


def _kv_list(text: str) -> list:
    return [_kv(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pseudohyp", description="Numerical checks of pseudohyperbolicity for flows and maps.")
    p.add_argument("--version", action="version", version=f"pseudohyp {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, system=True):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--out", help="output directory (default: current directory)")
        sp.add_argument("--threads", type=int, help="worker cap (mirrors PSEUDOHYP_THREADS)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rtol", type=float)
        sp.add_argument("--atol", type=float)
        sp.add_argument("-v", "--verbose", action="store_true")
        if system:
            sp.add_argument("--system", help=f"one of: {', '.join(SYSTEM_NAMES)}")
            sp.add_argument("--param", type=_kv, action="append", metavar="K=V",
                            help="parameter value; unspecified parameters take their reference values")
            sp.add_argument("--x0", type=_floats, help="initial state, comma-separated")

    def traj(sp):
        sp.add_argument("--transient", type=float, help="flows: time; maps: iterations")
        sp.add_argument("--span", type=float, help="flows: sampled time span")
        sp.add_argument("--dt", type=float, help="flows: sampling interval")
        sp.add_argument("--count", type=int, help="maps: number of samples")

    sp = sub.add_parser("lyapunov", help="Lyapunov spectrum and necessary conditions")
    common(sp)
    sp.add_argument("--transient", type=float)
    sp.add_argument("--span", type=float)
    sp.add_argument("--interval", type=float, help="renormalisation interval")
    sp.add_argument("--k", type=int, help="dimension of the expanding subspace (default n-1)")

    sp = sub.add_parser("fields", help="tangent fields along an orbit (CSV)")
    common(sp)
    traj(sp)
    sp.add_argument("--cache", help="trajectory cache file (read if present, written otherwise)")

    sp = sub.add_parser("continuity", help="continuity clouds and verdicts for both fields")
    common(sp)
    traj(sp)
    sp.add_argument("--pairs", type=int, help="random pair budget")

    sp = sub.add_parser("verify", help="full pseudohyperbolicity check")
    common(sp)
    traj(sp)
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--lyap-span", type=float)

    sp = sub.add_parser("section", help="Poincare section checks")
    common(sp)
    sp.add_argument("--section", help="lorenz4d_sigma (default) or lorenz_plane")
    sp.add_argument("--check-containment", action="store_true")
    sp.add_argument("--n", type=int, help="return number for the containment check")
    sp.add_argument("--grid", type=int, help="grid points per axis")
    sp.add_argument("--crossings", type=int, help="record this many window crossings to crossings.csv")
    sp.add_argument("--discard", type=int, help="leading crossings to drop from the trace")
    sp.add_argument("--boundary", type=int, help="grid points per axis for the stable-manifold boundary")

    sp = sub.add_parser("kneading", help="kneading sequence or two-parameter kneading diagram")
    common(sp)
    sp.add_argument("--q", type=int)
    sp.add_argument("--axes", help="name=lo:hi:count,name=lo:hi:count")
    sp.add_argument("--fixed", type=_kv_list, help="k=v,k=v fixed parameters for diagrams")
    sp.add_argument("--mode", choices=("maxima", "section"))

    sp = sub.add_parser("sweep", help="parameter-plane sweep (resumable)")
    common(sp)
    sp.add_argument("--job", help="JSON job file")
    sp.add_argument("--axes")
    sp.add_argument("--fixed", type=_kv_list)
    sp.add_argument("--task", choices=("spectrum", "kneading", "continuity"))
    sp.add_argument("--span", type=float)
    sp.add_argument("--transient", type=float)
    sp.add_argument("--no-resume", action="store_true")

    sp = sub.add_parser("render", help="re-render an image from a CSV output")
    common(sp, system=False)
    sp.add_argument("input", help="cloud CSV (rho,phi) or kneading CSV (p1,p2,D,bits)")
    sp.add_argument("--q", type=int, help="kneading segment length (default: from the bits column)")
    sp.add_argument("--width", type=int)
    sp.add_argument("--height", type=int)
    return p


_DEFAULTS = {
    "seed": 0, "rtol": DEFAULT_RTOL, "atol": DEFAULT_ATOL, "out": ".", "threads": None, "pairs": DEFAULT_PAIR_BUDGET,
    "n": 10, "grid": 20, "discard": 0, "q": 16, "mode": "maxima", "section": "lorenz4d_sigma", "task": "spectrum",
    "width": 800, "height": 600,
}


def _merge(args: argparse.Namespace) -> dict:
    """Flags over config file over defaults."""
    cfg = dict(_DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for k, v in vars(args).items():
        if k in ("config", "command") or v is None or v is False:
            continue
        cfg[k] = v
    return cfg


def _model(cfg: dict) -> SystemModel:
    name = cfg.get("system")
    if not name:
        raise UsageError("--system is required")
    if name not in SYSTEM_NAMES:
        raise UsageError(f"unknown system {name!r}; choose from {', '.join(SYSTEM_NAMES)}")
    params = dict(REFERENCE_PARAMS.get(name, {}))
    given = cfg.get("param") or []
    params.update(dict(given) if isinstance(given, list) else given)
    cfg["param"] = params
    try:
        return builtin_system(name, params)
    except ModelError as exc:
        raise UsageError(str(exc)) from None


def _traj_cfg(model: SystemModel, cfg: dict) -> dict:
    base = dict(FLOW_TRAJ if model.is_flow else MAP_TRAJ)
    for k in base:
        if cfg.get(k) is not None:
            base[k] = cfg[k]
    base.update(rtol=cfg["rtol"], atol=cfg["atol"])
    cfg.update(base)
    return base


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_lyapunov(cfg: dict, run: Run) -> int:
    model = _model(cfg)
    x0 = cfg.get("x0") or default_x0(model)
    cfg["x0"] = x0
    spec = lyapunov_spectrum(model, x0, cfg.get("transient"), cfg.get("span"), cfg.get("interval"),
                             rtol=cfg["rtol"], atol=cfg["atol"])
    k = cfg.get("k") or model.dimension - 1
    rep = check_necessary_conditions(spec, k, model.is_flow)
    obj = run.json("lyapunov.json", {"exponents": spec.exponents, "sum": spec.sum, "report": rep.as_dict()})
    sys.stdout.write(dumps17(obj))
    return EXIT_OK


def _fields(cfg: dict, model: SystemModel):
    from .storage import load_trajectory, save_trajectory
    from .tangent_fields import build_fields
    x0 = cfg.get("x0") or default_x0(model)
    cfg["x0"] = x0
    tc = _traj_cfg(model, cfg)
    cache = cfg.get("cache")
    if cache and Path(cache).exists():
        traj = load_trajectory(cache)
    else:
        traj = _trajectory(model, x0, tc)
        if cache:
            save_trajectory(traj, cache)
    return build_fields(model, traj, seed=cfg["seed"], rtol=cfg["rtol"], atol=cfg["atol"])


def cmd_fields(cfg: dict, run: Run) -> int:
    from .storage import write_fields_csv
    model = _model(cfg)
    f = _fields(cfg, model)
    write_fields_csv(f, run.path("fields.csv"))
    run.json("fields.json", {"samples": len(f), "first_index": int(f.index[0]), "last_index": int(f.index[-1])})
    return EXIT_OK


def cmd_continuity(cfg: dict, run: Run) -> int:
    model = _model(cfg)
    f = _fields(cfg, model)
    summary = {}
    for tag in ("ess", "ncu"):
        cloud = build_cloud(f, tag, int(cfg["pairs"]), seed=cfg["seed"])
        ver = classify_cloud(cloud)
        write_cloud_csv(cloud, run.path(f"cloud_{tag}.csv"))
        run.json(f"verdict_{tag}.json", ver.as_dict())
        run.image(f"cloud_{tag}.png", render_cloud(cloud, ver, cfg["width"], cfg["height"]))
        summary[tag] = ver.label
    sys.stdout.write(dumps17(run.json("continuity.json", summary)))
    return EXIT_OK


def cmd_verify(cfg: dict, run: Run) -> int:
    model = _model(cfg)
    budgets = {"seed": cfg["seed"], "rtol": cfg["rtol"], "atol": cfg["atol"], "pairs": int(cfg["pairs"]),
               "lyap_span": cfg.get("lyap_span")}
    budgets.update(_traj_cfg(model, cfg))
    res = verify_pseudohyperbolicity(model, cfg.get("x0"), budgets)
    sys.stdout.write(dumps17(run.json("verify.json", res.as_dict())))
    return EXIT_OK


def cmd_section(cfg: dict, run: Run) -> int:
    from . import sections as S
    model = _model(cfg)
    if not model.is_flow:
        raise UsageError("sections need a flow")
    name = cfg["section"]
    try:
        sec = S.builtin_section(name, r=model.params.get("r"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if sec.dimension != model.dimension:
        raise UsageError(f"section {name} does not fit {model.name}")
    kw = {"rtol": cfg["rtol"], "atol": cfg["atol"], "workers": cfg.get("threads")}
    result = {"section": sec.name}
    did = False
    if cfg.get("check_containment"):
        g = int(cfg["grid"])
        rep = S.nth_return_containment(model, sec, (g, g, g), int(cfg["n"]), **kw)
        result["containment"] = {"grid": g, "n": int(cfg["n"]), **rep.as_dict()}
        did = True
    if cfg.get("crossings"):
        x0 = cfg.get("x0") or S.separatrix_start(model).tolist()
        res = S.find_crossings(model, x0, sec, int(cfg["crossings"]), window_only=True, rtol=cfg["rtol"],
                               atol=cfg["atol"])
        events = res.crossings[int(cfg["discard"]):]
        win = [S.PLUS if e.window == "plus" else S.MINUS for e in events]
        colors = [S.COLORS[(win[k + 1], win[k - 1])] if 0 < k < len(win) - 1 else "" for k in range(len(win))]
        S.write_crossings_csv(events, run.path("crossings.csv"), colors)
        result["crossings"] = len(events)
        did = True
    if cfg.get("boundary"):
        g = int(cfg["boundary"])
        b = S.stable_manifold_boundary(model, sec, (g, g, g), **kw)
        path = run.path("boundary.csv")
        names = ["x", "y", "z", "w"][:model.dimension]
        np.savetxt(path, b.boundary, fmt="%.17g", delimiter=",", header=",".join(names), comments="")
        result["boundary_points"] = int(b.boundary.shape[0])
        did = True
    if not did:
        raise UsageError("nothing to do: pass --check-containment, --crossings or --boundary")
    sys.stdout.write(dumps17(run.json("section.json", result)))
    return EXIT_OK if result.get("containment", {}).get("all_inside", True) else EXIT_FAILURE


def cmd_kneading(cfg: dict, run: Run) -> int:
    from . import kneading as K
    q = int(cfg["q"])
    if cfg.get("axes"):
        try:
            axes = [K.Axis.parse(a) for a in cfg["axes"].split(",")]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        name = cfg.get("system")
        if name not in SYSTEM_NAMES:
            raise UsageError(f"unknown system {name!r}")
        fixed = dict(cfg.get("fixed") or [])
        given = dict(cfg.get("param") or [])
        base = {k: v for k, v in REFERENCE_PARAMS[name].items() if k not in {a.name for a in axes}}
        fixed = {**base, **given, **fixed}
        cfg["fixed"] = fixed
        try:
            d = K.kneading_diagram(name, axes, q, fixed, rtol=cfg["rtol"], atol=cfg["atol"],
                                   workers=cfg.get("threads"))
        except ModelError as exc:
            raise UsageError(str(exc)) from None
        d.write_csv(run.path("kneading.csv"))
        run.image("kneading.png", d.image())
        sys.stdout.write(dumps17(run.json("kneading.json", d.metadata())))
        return EXIT_OK
    model = _model(cfg)
    bits = K.kneading_sequence(model, None, q, mode=cfg["mode"], rtol=cfg["rtol"], atol=cfg["atol"])
    obj = {"bits": K.bits_string(bits), "q": q, "D": K.kneading_value(bits),
           "rgb": list(K.kneading_color(K.kneading_value(bits), q))}
    sys.stdout.write(dumps17(run.json("kneading.json", obj)))
    return EXIT_OK


def cmd_sweep(cfg: dict, run: Run) -> int:
    from .kneading import Axis
    from .sweep import SweepJob, run_sweep
    if cfg.get("job"):
        try:
            with open(cfg["job"]) as fh:
                jd = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read job {cfg['job']}: {exc}") from None
    else:
        if not cfg.get("axes") or not cfg.get("system"):
            raise UsageError("sweep needs --job or --system and --axes")
        try:
            axes = [Axis.parse(a) for a in cfg["axes"].split(",")]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        fixed = dict(REFERENCE_PARAMS.get(cfg["system"], {}))
        fixed.update(dict(cfg.get("param") or []))
        fixed.update(dict(cfg.get("fixed") or []))
        for a in axes:
            fixed.pop(a.name, None)
        jd = {"system": cfg["system"], "axes": [[a.name, a.lo, a.hi, a.count] for a in axes], "fixed": fixed,
              "task": cfg["task"], "seed": cfg["seed"]}
        for k in ("span", "transient", "x0", "q"):
            if cfg.get(k) is not None:
                jd[k] = cfg[k]
    jd["out_dir"] = str(run.out)
    try:
        job = SweepJob.from_dict(jd)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid job: {exc}") from None
    cfg["job_config"] = job.config()
    res = run_sweep(job, workers=cfg.get("threads"), resume=not cfg.get("no_resume"))
    run.manifest.outputs += ["grid.csv", "diagram.png", "job.json", "journal.csv", "cells.jsonl"]
    labels = res.labels().ravel().tolist()
    counts = {lab: labels.count(lab) for lab in sorted(set(labels))}
    sys.stdout.write(dumps17(run.json("sweep.json", {"cells": len(labels), "labels": counts,
                                                     "checksum": job.checksum()})))
    return EXIT_OK


def cmd_render(cfg: dict, run: Run) -> int:
    from .kneading import KN_OK, Axis, KneadingDiagram
    src = Path(cfg["input"])
    try:
        with open(src) as fh:
            header = fh.readline().strip()
    except OSError as exc:
        raise UsageError(f"cannot read {src}: {exc}") from None
    if header == "rho,phi":
        data = np.loadtxt(src, delimiter=",", skiprows=1, ndmin=2)
        cloud = ContinuityCloud(rho=data[:, 0], phi=data[:, 1], field_tag=src.stem, pair_budget=len(data), seed=0)
        run.image(src.stem + ".png", render_cloud(cloud, classify_cloud(cloud), cfg["width"], cfg["height"]))
    elif header == "p1,p2,D,bits":
        rows = [ln.strip().split(",") for ln in open(src).read().splitlines()[1:] if ln.strip()]
        p1 = sorted({float(r[0]) for r in rows})
        p2 = sorted({float(r[1]) for r in rows})
        qs = [len(r[3]) for r in rows if set(r[3]) <= {"0", "1"} and r[3]]
        q = int(cfg.get("q") or (qs[0] if qs else 16))
        D = np.full((len(p1), len(p2)), -1, dtype=np.int64)
        i1 = {v: i for i, v in enumerate(p1)}
        i2 = {v: j for j, v in enumerate(p2)}
        for r in rows:
            D[i1[float(r[0])], i2[float(r[1])]] = int(r[2])
        d = KneadingDiagram("", (Axis("p1", p1[0], p1[-1], len(p1)), Axis("p2", p2[0], p2[-1], len(p2))), {}, q,
                            D, np.zeros(D.shape + (q,), np.uint8), np.where(D >= 0, KN_OK, 3))
        run.image(src.stem + ".png", d.image())
    else:
        raise UsageError(f"unrecognised CSV header {header!r}")
    return EXIT_OK


COMMANDS = {"lyapunov": cmd_lyapunov, "fields": cmd_fields, "continuity": cmd_continuity, "verify": cmd_verify,
            "section": cmd_section, "kneading": cmd_kneading, "sweep": cmd_sweep, "render": cmd_render}


def _apply_threads(n: Optional[int]) -> None:
    if n is None:
        env = os.environ.get("PSEUDOHYP_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    os.environ["PSEUDOHYP_THREADS"] = str(n)
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help and --version
            return int(exc.code or 0)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        cfg = _merge(args)
        logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _apply_threads(cfg.get("threads"))
        cmd = COMMANDS[args.command]
        out = Path(cfg.pop("out"))
        manifest = RunManifest(command=["pseudohyp", *argv], config=cfg)
        cfg["command"] = args.command
        run = Run(out, manifest)
        code = cmd(cfg, run)
        manifest.write(out)
        return code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (IntegrationError, RuntimeError, ArithmeticError, ValueError) as exc:
        print(f"pseudohyp: computation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(dispatch())
