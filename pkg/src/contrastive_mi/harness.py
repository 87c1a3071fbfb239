"""Benchmark data, training loop, suites and report serialisation.

The Gaussian benchmark draws ``dim`` independent coordinate pairs with a
shared correlation chosen so that ``I(X; Y)`` equals the requested number of
bits exactly. The cubic variant maps ``y`` to ``y**3``, which leaves MI
unchanged. The discrete benchmark sends a uniform symbol through a symmetric
channel and one-hot encodes both ends.
"""

from __future__ import annotations

import csv
import io
import json
import math
import subprocess
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from scipy.optimize import brentq

from . import __version__
from . import diffcore as dc
from .critics import Critic, CriticSpec
from .errors import ConfigError, NumericDivergence, NumericError
from .objectives import EVAL_MODES, ObjectiveSpec

DATA_KINDS = ("gaussian", "gaussian_cubic", "discrete")
LN2 = math.log(2.0)
CSV_COLUMNS = ["objective", "K", "nu", "target_bits", "seed", "final_bits", "err_bits", "wall_s"]
SUMMARY_COLUMNS = ["objective", "K", "nu", "target_bits", "n_runs", "n_failed", "mean_bits", "std_bits", "mae_bits"]


# -- data -----------------------------------------------------------------------------


def gaussian_rho(dim: int, target_mi_bits: float) -> float:
    """Per-coordinate correlation giving ``-(dim/2) log2(1 - rho^2) = target_mi_bits``."""
    if dim < 1:
        raise ConfigError("dim must be >= 1")
    if not target_mi_bits > 0:
        raise ConfigError("target_mi_bits must be positive for Gaussian data")
    return math.sqrt(-math.expm1(-2.0 * target_mi_bits * LN2 / dim))


def gaussian_mi_bits(dim: int, rho: float) -> float:
    return -0.5 * dim * math.log2((1.0 - rho) * (1.0 + rho))


def gen_gaussian_pair(dim: int, target_mi_bits: float, cubic: bool = False, seed=0, n: int = 64):
    """``n`` draws of ``(x, y)`` with ``y = rho x + sqrt(1 - rho^2) eps`` per coordinate.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rho = gaussian_rho(dim, target_mi_bits)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, dim))
    if cubic:
        y = y**3
    return x, y


def symmetric_channel_mi_bits(n: int, flip: float) -> float:
    """MI of a uniform symbol kept with prob ``1 - flip`` and otherwise replaced uniformly."""
    stay = 1.0 - flip + flip / n
    move = flip / n
    h = -stay * math.log2(stay) - ((n - 1) * move * math.log2(move) if move > 0 else 0.0)
    return math.log2(n) - h


def symmetric_channel_flip(n: int, target_mi_bits: float) -> float:
    if not 0 < target_mi_bits < math.log2(n):
        raise ConfigError(f"discrete target must lie in (0, log2 {n}) bits")
    return brentq(lambda f: symmetric_channel_mi_bits(n, f) - target_mi_bits, 1e-15, 1.0 - 1e-15, xtol=1e-15)


def gen_discrete_pair(n_symbols: int, target_mi_bits: float, seed=0, n: int = 64):
    flip = symmetric_channel_flip(n_symbols, target_mi_bits)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = rng.integers(n_symbols, size=n)
    y = np.where(rng.random(n) < flip, rng.integers(n_symbols, size=n), x)
    eye = np.eye(n_symbols)
    return eye[x], eye[y]


# -- configuration -------------------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    """One training run. ``eval_mode=None`` picks the objective's own estimator type."""

    data: str = "gaussian"
    dim: int = 10
    target_mi_bits: float = 2.0
    batch_size: int = 64
    steps: int = 20_000
    seed: int = 0
    learning_rate: float = 1e-4
    critic: CriticSpec = field(default_factory=CriticSpec)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    eval_mode: str | None = None
    eval_batches: int = 1
    eval_on_train: bool = False
    report_every: int = 100
    eval_window: int = 10

    def __post_init__(self):
        if isinstance(self.critic, dict):
            self.critic = CriticSpec(**self.critic)
        if isinstance(self.objective, dict):
            self.objective = ObjectiveSpec(**self.objective)
        if self.data not in DATA_KINDS:
            raise ConfigError(f"data must be one of {DATA_KINDS}, got {self.data!r}")
        if int(self.dim) < 1:
            raise ConfigError("dim must be >= 1")
        if self.data != "discrete" and not self.target_mi_bits > 0:
            raise ConfigError("target_mi_bits must be positive")
        if self.data == "discrete" and not 0 < self.target_mi_bits < math.log2(self.dim):
            raise ConfigError("discrete target_mi_bits must lie in (0, log2 dim)")
        if int(self.batch_size) < 2:
            raise ConfigError("batch_size must be >= 2")
        for name in ("steps", "eval_batches", "report_every", "eval_window"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.eval_mode is not None and self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    @property
    def resolved_eval_mode(self) -> str:
        return self.eval_mode or self.objective.default_eval_mode()

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["objective"]["beta"]):
            d["objective"]["beta"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        crit = d.get("critic", {}) or {}
        obj = dict(d.get("objective", {}) or {})
        if isinstance(crit, dict):
            _check_keys(crit, CriticSpec, "critic")
            d["critic"] = CriticSpec(**crit)
        if isinstance(obj, dict):
            _check_keys(obj, ObjectiveSpec, "objective")
            if isinstance(obj.get("beta"), str):
                obj["beta"] = float(obj["beta"])
            d["objective"] = ObjectiveSpec(**obj)
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _check_keys(d: dict, klass, section: str):
    known = {f.name for f in fields(klass)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {text!r}") from e


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``section.key=value`` style overrides (values parsed as YAML scalars)."""
    out = json.loads(json.dumps(d))
    for item in overrides or ():
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, text = item.split("=", 1)
            value = _parse_value(text)
        else:
            key, value = item
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-section value")
        node[parts[-1]] = value
    return out


def load_config_dict(path) -> dict:
    path = Path(path)
    try:
        d = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a mapping")
    return d


def load_config(path=None, overrides=None) -> BenchmarkConfig:
    d = load_config_dict(path) if path is not None else {}
    d.pop("suite", None)
    return BenchmarkConfig.from_dict(apply_overrides(d, overrides))


# -- reports -------------------------------------------------------------------------------


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class EstimateReport:
    trajectory: list
    final_mi_bits: float
    ground_truth_bits: float
    estimator_type: int
    eval_mode: str
    wall_time_s: float
    config: dict
    version: str = ""
    status: str = "ok"
    message: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trajectory"] = [list(t) for t in self.trajectory]
        return d

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        d = dict(d)
        d["trajectory"] = [tuple(t) for t in d["trajectory"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        return cls.from_dict(json.loads(text))


# -- training ------------------------------------------------------------------------------


def ground_truth_bits(config: BenchmarkConfig) -> float:
    if config.data == "discrete":
        n = config.dim
        return symmetric_channel_mi_bits(n, symmetric_channel_flip(n, config.target_mi_bits))
    return gaussian_mi_bits(config.dim, gaussian_rho(config.dim, config.target_mi_bits))


def make_sampler(config: BenchmarkConfig):
    if config.data == "discrete":
        flip = symmetric_channel_flip(config.dim, config.target_mi_bits)
        eye = np.eye(config.dim)

        def sample(rng, n):
            x = rng.integers(config.dim, size=n)
            y = np.where(rng.random(n) < flip, rng.integers(config.dim, size=n), x)
            return eye[x], eye[y]

        return sample
    cubic = config.data == "gaussian_cubic"
    return lambda rng, n: gen_gaussian_pair(config.dim, config.target_mi_bits, cubic, rng, n)


def evaluate_critic(critic: Critic, config: BenchmarkConfig, sample, rng, mode: str, batch=None) -> float:
    """MI estimate in bits.

    Averages over ``config.eval_batches`` fresh batches, or scores ``batch``
    alone when one is given.
    """
    vals = []
    batches = [batch] if batch is not None else (sample(rng, config.batch_size) for _ in range(config.eval_batches))
    for xs, ys in batches:
        sm = critic.score_matrix(xs, ys, requires_grad=False)
        vals.append(config.objective.evaluate(sm.log_values.data, mode))
    return float(np.mean(vals)) / LN2


def run_benchmark(config: BenchmarkConfig, progress=None) -> EstimateReport:
    """Train a critic on fresh batches and evaluate every ``report_every`` steps.

    Raises :class:`NumericDivergence` (carrying the partial report) if the
    loss or parameters stop being finite.
    """
    t0 = time.perf_counter()
    mode = config.resolved_eval_mode
    sample = make_sampler(config)
    train_rng = np.random.default_rng([config.seed, 0])
    eval_rng = np.random.default_rng([config.seed, 1])
    critic = Critic(config.critic, config.dim, config.dim, seed=config.seed)
    adam = dc.AdamState(learning_rate=config.learning_rate)
    state = config.objective.make_state()
    trajectory = []

    def report(status="ok", message=""):
        ests = [t[2] for t in trajectory][-config.eval_window:]
        final = float(np.mean(ests)) if ests else float("nan")
        return EstimateReport(
            trajectory=list(trajectory),
            final_mi_bits=final,
            ground_truth_bits=ground_truth_bits(config),
            estimator_type=config.objective.estimator_type,
            eval_mode=mode,
            wall_time_s=time.perf_counter() - t0,
            config=config.to_dict(),
            version=version_string(),
            status=status,
            message=message,
        )

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # plug-in bias warning is raised once by the caller
        for step in range(1, config.steps + 1):
            xs, ys = sample(train_rng, config.batch_size)
            try:
                sm = critic.score_matrix(xs, ys)
                lv = config.objective.loss(sm, state)
                grads = dc.backward(sm.tape, lv.total)
                dc.optimizer_step(adam, critic.params, grads)
            except NumericError as e:
                rep = report("diverged", f"step {step}: {e}")
                raise NumericDivergence(f"training diverged at step {step}: {e}", rep) from e
            if step % config.report_every == 0 or step == config.steps:
                batch = (xs, ys) if config.eval_on_train else None
                est = evaluate_critic(critic, config, sample, eval_rng, mode, batch)
                trajectory.append((step, lv.value, est))
                if progress is not None:
                    progress(step, lv.value, est)
    return report()


# -- suites --------------------------------------------------------------------------------


def objective_label(obj: ObjectiveSpec) -> str:
    if obj.family in ("scored_anchor", "asym_dre"):
        return f"{obj.family}[{obj.generating_function().name}]"
    if obj.family == "generalized_dv":
        return f"generalized_dv[beta={obj.beta:g}]"
    return obj.family


def _run_cell(config: BenchmarkConfig) -> dict:
    obj = config.objective
    k = obj.K if obj.K is not None else (config.batch_size // 2 if obj.family == "joint_marginal_anchor" else config.batch_size - 1)
    row = {
        "objective": objective_label(obj),
        "K": k,
        "nu": obj.nu,
        "target_bits": config.target_mi_bits,
        "seed": config.seed,
    }
    t0 = time.perf_counter()
    try:
        rep = run_benchmark(config)
        row["final_bits"] = rep.final_mi_bits
        row["err_bits"] = rep.final_mi_bits - rep.ground_truth_bits
        row["status"] = "ok"
    except Exception as e:  # recorded per row; the suite carries on
        row["final_bits"] = float("nan")
        row["err_bits"] = float("nan")
        row["status"] = f"{type(e).__name__}: {e}"
    row["wall_s"] = time.perf_counter() - t0
    return row


@dataclass
class SuiteResult:
    runs: list
    summary: list

    def runs_csv(self) -> str:
        return _to_csv(self.runs, CSV_COLUMNS)

    def summary_csv(self) -> str:
        return _to_csv(self.summary, SUMMARY_COLUMNS)


def _to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_runs_csv(text: str) -> list:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(
            {
                "objective": r["objective"],
                "K": int(r["K"]),
                "nu": float(r["nu"]),
                "target_bits": float(r["target_bits"]),
                "seed": int(r["seed"]),
                "final_bits": float(r["final_bits"]),
                "err_bits": float(r["err_bits"]),
                "wall_s": float(r["wall_s"]),
            }
        )
    return rows


def summarise(runs: list) -> list:
    groups: dict = {}
    for r in runs:
        groups.setdefault((r["objective"], r["K"], r["nu"], r["target_bits"]), []).append(r)
    out = []
    for (name, k, nu, target), rows in groups.items():
        ok = np.array([r["final_bits"] for r in rows if np.isfinite(r["final_bits"])])
        err = np.array([r["err_bits"] for r in rows if np.isfinite(r["err_bits"])])
        out.append(
            {
                "objective": name,
                "K": k,
                "nu": nu,
                "target_bits": target,
                "n_runs": len(rows),
                "n_failed": len(rows) - ok.size,
                "mean_bits": float(ok.mean()) if ok.size else float("nan"),
                "std_bits": float(ok.std(ddof=1)) if ok.size > 1 else (0.0 if ok.size else float("nan")),
                "mae_bits": float(np.abs(err).mean()) if err.size else float("nan"),
            }
        )
    return out


def expand_seeds(configs, seeds) -> list:
    cells = []
    for cfg in configs:
        for s in seeds if seeds is not None else [cfg.seed]:
            d = cfg.to_dict()
            d["seed"] = int(s)
            cells.append(BenchmarkConfig.from_dict(d))
    return cells


def run_suite(configs, seeds=None, workers: int = 1) -> SuiteResult:
    """Run every config for every seed; one CSV row per run plus per-group aggregates."""
    cells = expand_seeds(list(configs), seeds)
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_cell, cells))
    else:
        runs = [_run_cell(c) for c in cells]
    return SuiteResult(runs, summarise(runs))


def suite_from_dict(d: dict, overrides=None) -> tuple[list, list]:
    """Expand a config mapping with an optional ``suite`` section into configs and seeds.

    ``suite`` may hold ``objectives`` (list of objective mappings), ``targets``
    (list of bits) and ``seeds`` (list of ints); every combination is run.
    """
    d = apply_overrides(d, overrides)
    suite = d.pop("suite", None) or {}
    base = BenchmarkConfig.from_dict(d)
    objectives = suite.get("objectives") or [base.objective.to_dict()]
    targets = suite.get("targets") or [base.target_mi_bits]
    seeds = suite.get("seeds") or [base.seed]
    configs = []
    for obj in objectives:
        for t in targets:
            cd = base.to_dict()
            merged = dict(cd["objective"])
            merged.update(obj)
            cd["objective"] = merged
            cd["target_mi_bits"] = float(t)
            configs.append(BenchmarkConfig.from_dict(cd))
    return configs, [int(s) for s in seeds]


def figure1_configs(steps: int = 20_000, hidden=(512, 512), targets=(2.0, 4.0, 6.0, 8.0), report_every: int = 100,
                    data: str = "gaussian") -> list:
    """InfoNCE (own bound) and InfoNCE-anchor (nu=1, plug-in) on the 10-d Gaussian at B=64."""
    out = []
    for obj, mode in ((ObjectiveSpec("infonce"), "type1_bound"), (ObjectiveSpec("infonce_anchor", nu=1.0), "type3_plugin")):
        for t in targets:
            out.append(
                BenchmarkConfig(
                    data=data,
                    dim=10,
                    target_mi_bits=t,
                    batch_size=64,
                    steps=steps,
                    critic=CriticSpec(kind="joint", hidden=list(hidden)),
                    objective=obj,
                    eval_mode=mode,
                    report_every=report_every,
                )
            )
    return out


# -- gradient sweep ------------------------------------------------------------------------


def sweep_objectives() -> list:
    """One spec per objective variant covered by the gradient sweep."""
    specs = [
        ObjectiveSpec("dv"),
        ObjectiveSpec("nwj"),
        ObjectiveSpec("mine", ema_rate=0.5),
        ObjectiveSpec("js"),
        ObjectiveSpec("smile", clip=1.0),
        ObjectiveSpec("infonce"),
        ObjectiveSpec("infonce_anchor", nu=1.0),
        ObjectiveSpec("infonce_anchor", nu=0.5, K=2),
        ObjectiveSpec("infonce_anchor", nu=0.0),
        ObjectiveSpec("generalized_dv", beta=0.0),
        ObjectiveSpec("generalized_dv", beta=2.0),
        ObjectiveSpec("generalized_dv", beta=float("inf")),
        ObjectiveSpec("chi2"),
        ObjectiveSpec("joint_marginal_anchor", nu=1.0),
        ObjectiveSpec("joint_marginal_anchor", nu=0.0),
    ]
    for rule, alpha in (("sym_log", None), ("sym_power", 2.0), ("sym_power", 3.0), ("sym_inverse_log", None),
                        ("sym_pseudospherical", 2.0), ("sym_pseudospherical", 3.0)):
        specs.append(ObjectiveSpec("scored_anchor", nu=1.0, rule=rule, alpha=alpha))
    specs.append(ObjectiveSpec("scored_anchor", nu=0.0, rule="sym_pseudospherical", alpha=2.0))
    for rule, alpha in (("asym_log", None), ("asym_power", 2.0), ("asym_power", -1.0), ("asym_inverse_log", None)):
        specs.append(ObjectiveSpec("asym_dre", rule=rule, alpha=alpha))
    return specs


def gradient_sweep(seeds=(0, 1, 2), eps: float = 1e-5, batch: int = 5, dim: int = 3, objectives=None,
                   zero_tol: float | None = 1e-9) -> list:
    """Finite-difference check of every objective on small joint and separable critics.

    Returns one row per (objective, critic, seed) with the max relative error.
    ``zero_tol`` (see :func:`diffcore.finite_diff_check`) absorbs the roundoff
    on exactly-zero gradients; ``1e-9`` is about 50 times that roundoff at
    ``eps=1e-5`` and unit-size losses.
    """
    critics = [
        CriticSpec(kind="joint", hidden=[8, 8]),
        CriticSpec(kind="separable", hidden=[8], embed_dim=4, temperature=0.5),
        CriticSpec(kind="joint", form="pd_direct", hidden=[8]),
    ]
    rows = []
    for obj in objectives or sweep_objectives():
        for cs in critics:
            for seed in seeds:
                rng = np.random.default_rng([seed, 7])
                xs, ys = gen_gaussian_pair(dim, 1.0, False, rng, batch)
                params = Critic(cs, dim, dim, seed=seed).params
                mine = None
                if obj.family == "mine":
                    # freeze the running average at a value away from the batch mean
                    mine = obj.make_state()
                    mine.ema = 0.7

                def loss_fn(p, obj=obj, cs=cs, xs=xs, ys=ys, mine=mine):
                    sm = Critic(cs, dim, dim, params=p).score_matrix(xs, ys)
                    if mine is not None:
                        from .objectives import loss_mine

                        return loss_mine(sm, mine, update=False).total
                    return obj.loss(sm).total

                err = dc.finite_diff_check(loss_fn, params, eps=eps, seed=seed, zero_tol=zero_tol)
                rows.append(
                    {
                        "objective": objective_label(obj) + (f"[nu={obj.nu:g}]" if "anchor" in obj.family else ""),
                        "critic": f"{cs.kind}/{cs.form}",
                        "seed": seed,
                        "max_rel_err": err,
                    }
                )
    return rows
