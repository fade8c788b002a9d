"""Experiment orchestration: configs, per-seed runs, aggregation, comparison,
the Gaussian-tail importance-sampling demo and the tabular MDP text format.

Run CSVs have the fixed header ``RUN_COLUMNS``; metrics an agent does not
produce are left empty. Aggregate CSVs have the header ``AGG_COLUMNS``.
Floats are written with ``repr`` so a rerun with the same seed reproduces
the file byte for byte.
"""
from __future__ import annotations

import csv
import json
import math
import re
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .agents import AGENTS, PhaseConfig, train
from .mdp import TabularMdp, make_point_mass, make_short_corridor, validate_mdp

RUN_COLUMNS = (
    "phase", "env_steps", "episodes", "eval_mean", "eval_se",
    "lr", "mean_return_estimate",
    "loss", "clip_loss", "value_loss", "entropy", "clip_frac",
    "ratio_mean", "ratio_max", "ratio_trunc_frac",
    "q_loss", "qhat_loss", "mu_loss", "qhat_mean", "qhat_max",
)
AGG_COLUMNS = ("phase", "env_steps", "n_runs", "eval_mean", "eval_se")
PLOT_COLUMNS = ("phase", "env_steps", "mean", "lower", "upper")

SIGNIFICANCE_Z = 1.96
SIGNIFICANCE_RULE = "non-overlap of mean +/- 1.96 SE intervals (harness convention)"

ENVIRONMENTS = ("shortcorridor", "pointmass")
# config keys that shape the environment rather than the agent
ENV_KEYS = ("horizon", "noise_scale", "start_spread")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AlignmentError(ValueError):
    def __init__(self, files: Sequence[str]):
        super().__init__("misaligned phase grids in: " + ", ".join(files))
        self.files = list(files)


class MdpFormatError(ValueError):
    pass


# ---------------------------------------------------------------- configs

@dataclass
class ExperimentConfig:
    env: str
    phase: PhaseConfig
    seeds: list
    env_kwargs: dict = field(default_factory=dict)
    total_steps: Optional[int] = None
    eval_every: int = 1
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise ConfigError("env", f"unknown environment {self.env!r}; expected one of {ENVIRONMENTS}")
        if not self.seeds:
            raise ConfigError("seeds", "seed list is empty")
        if self.total_steps is not None:
            if self.total_steps <= 0:
                raise ConfigError("total_steps", f"budget must be positive, got {self.total_steps}")
            if self.phase.is_reinforce:
                raise ConfigError("total_steps", "REINFORCE budgets are set in episodes via n_phases")
            per_phase = self.phase.num_steps * self.phase.num_envs
            self.phase.n_phases = max(1, math.ceil(self.total_steps / per_phase))
        if self.eval_every < 1:
            raise ConfigError("eval_every", f"must be >= 1, got {self.eval_every}")

    @property
    def agent(self) -> str:
        return self.phase.agent

    def env_factory(self):
        kw = dict(self.env_kwargs)
        if self.env == "shortcorridor":
            # the discount lives on the MDP; keep it equal to the agent's gamma
            return lambda: make_short_corridor(self.phase.gamma, **kw)[0]
        return lambda: make_point_mass(**kw)

    def to_dict(self) -> dict:
        out = {"env": self.env, "seeds": list(self.seeds), "eval_every": self.eval_every}
        if self.total_steps is not None:
            out["total_steps"] = self.total_steps
        if self.out_dir is not None:
            out["out_dir"] = self.out_dir
        out.update(self.env_kwargs)
        for k, v in self.phase.to_dict().items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


def parse_seeds(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from flat key/value pairs.

    Keys are the ``PhaseConfig`` field names plus ``env``, ``seeds``,
    ``total_steps``, ``eval_every``, ``out_dir`` and the environment keys.
    """
    raw = dict(raw)
    phase_names = {f.name for f in fields(PhaseConfig)}
    known = phase_names | {"env", "seeds", "total_steps", "eval_every", "out_dir"} | set(ENV_KEYS)
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown key")
    if "env" not in raw:
        raise ConfigError("env", "missing")
    agent = raw.get("agent", "ppo")
    if agent not in AGENTS:
        raise ConfigError("agent", f"unknown agent {agent!r}; expected one of {AGENTS}")
    defaults = PhaseConfig()
    for key in phase_names & set(raw):
        _check_type(key, raw[key], getattr(defaults, key))
    try:
        phase = PhaseConfig(**{k: v for k, v in raw.items() if k in phase_names})
    except ValueError as exc:
        named = [n for n in phase_names if re.search(rf"\b{n}\b", str(exc))]
        raise ConfigError(max(named, key=len) if named else "<config>", str(exc)) from exc
    env_kwargs = {k: raw[k] for k in ENV_KEYS if k in raw}
    if raw["env"] == "shortcorridor" and set(env_kwargs) - {"horizon"}:
        bad = sorted(set(env_kwargs) - {"horizon"})[0]
        raise ConfigError(bad, "not a ShortCorridor option")
    return ExperimentConfig(env=raw["env"], phase=phase, seeds=parse_seeds(raw.get("seeds", [0])),
                            env_kwargs=env_kwargs, total_steps=raw.get("total_steps"),
                            eval_every=int(raw.get("eval_every", 1)), out_dir=raw.get("out_dir"))


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<file>", f"{path}: expected a JSON object of key/value pairs")
    return config_from_dict(raw)


# ---------------------------------------------------------------- runs

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class RunWriter:
    """Streams rows to a run CSV so a crash leaves the completed phases."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(RUN_COLUMNS)
        self._last_steps = -1

    def write(self, row: dict) -> None:
        if row["env_steps"] <= self._last_steps:
            raise ValueError(f"env_steps not increasing: {row['env_steps']} after {self._last_steps}")
        self._last_steps = row["env_steps"]
        self._writer.writerow([_fmt(row.get(c)) for c in RUN_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_path(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"run_seed{seed}.csv"


def run_seed(config: ExperimentConfig, seed: int, out_dir) -> Optional[dict]:
    """Train one seed, writing its CSV. Returns an error record on failure."""
    writer = RunWriter(run_path(out_dir, seed))
    try:
        train(config.phase, config.env_factory(), seed, eval_every=config.eval_every,
              callback=writer.write)
    except Exception as exc:  # recorded, not swallowed: the caller reports it
        record = {"seed": seed, "error": type(exc).__name__, "message": str(exc),
                  "rows_written": writer._last_steps >= 0, "traceback": traceback.format_exc()}
        (Path(out_dir) / f"run_seed{seed}.error.json").write_text(json.dumps(record, indent=2))
        return record
    finally:
        writer.close()
    return None


@dataclass
class ExperimentResult:
    out_dir: Path
    run_files: list
    errors: list
    aggregate_file: Optional[Path]


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> ExperimentResult:
    """One CSV per seed plus ``aggregate.csv`` and ``plot_data.csv``."""
    out_dir = Path(out_dir or config.out_dir or "runs")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            errors = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds,
                                   [out_dir] * len(config.seeds)))
    else:
        errors = [run_seed(config, s, out_dir) for s in config.seeds]
    errors = [e for e in errors if e is not None]
    failed = {e["seed"] for e in errors}
    files = [run_path(out_dir, s) for s in config.seeds if s not in failed]
    agg_file = None
    if files:
        table = aggregate(files)
        agg_file = out_dir / "aggregate.csv"
        write_aggregate(table, agg_file, out_dir / "plot_data.csv")
    return ExperimentResult(out_dir, files, errors, agg_file)


# ---------------------------------------------------------------- aggregation

def read_run(path) -> dict:
    """Columns of a run CSV as float arrays (empty cells become NaN)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RUN_COLUMNS:
            raise ValueError(f"{path}: header does not match the run CSV schema")
        rows = list(reader)
    cols = {}
    for j, name in enumerate(RUN_COLUMNS):
        cols[name] = np.array([float(r[j]) if r[j] != "" else np.nan for r in rows])
    return cols


def mean_se(values) -> tuple:
    """Mean and standard error, summed exactly so input order does not matter."""
    values = [float(v) for v in values]
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def aggregate(paths: Sequence) -> dict:
    """Per-phase mean and SE of ``eval_mean`` across runs.

    Runs are aligned on the phase column; env steps are averaged because
    episode-based agents consume a random number of steps per phase.
    """
    if not paths:
        raise ValueError("no run files to aggregate")
    runs = {str(p): read_run(p) for p in paths}
    names = sorted(runs)
    ref = runs[names[0]]["phase"]
    bad = [n for n in names if not np.array_equal(runs[n]["phase"], ref)]
    if bad:
        raise AlignmentError(bad if len(bad) < len(names) else names)
    out = {c: [] for c in AGG_COLUMNS}
    for i, phase in enumerate(ref):
        m, se = mean_se(runs[n]["eval_mean"][i] for n in names)
        out["phase"].append(int(phase))
        out["env_steps"].append(math.fsum(runs[n]["env_steps"][i] for n in names) / len(names))
        out["n_runs"].append(len(names))
        out["eval_mean"].append(m)
        out["eval_se"].append(se)
    return out


def write_aggregate(table: dict, path, plot_path=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_COLUMNS)
        for i in range(len(table["phase"])):
            w.writerow([_fmt(table[c][i]) for c in AGG_COLUMNS])
    if plot_path is None:
        return
    with open(plot_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_COLUMNS)
        for i in range(len(table["phase"])):
            m, se = table["eval_mean"][i], table["eval_se"][i]
            w.writerow([_fmt(table["phase"][i]), _fmt(table["env_steps"][i]), _fmt(m),
                        _fmt(m - SIGNIFICANCE_Z * se), _fmt(m + SIGNIFICANCE_Z * se)])


def run_files(directory) -> list:
    files = sorted(Path(directory).glob("run_seed*.csv"))
    if not files:
        raise FileNotFoundError(f"no run_seed*.csv files in {directory}")
    return files


def final_returns(directory) -> dict:
    """Final eval mean of every run in ``directory``, keyed by file stem."""
    return {p.stem: float(read_run(p)["eval_mean"][-1]) for p in run_files(directory)}


@dataclass
class Comparison:
    a_mean: float
    a_se: float
    n_a: int
    b_mean: float
    b_se: float
    n_b: int
    significant: bool
    better: Optional[str]
    no_worse: bool
    rule: str = SIGNIFICANCE_RULE

    def to_dict(self) -> dict:
        return asdict(self)


def compare_finals(a: Sequence[float], b: Sequence[float]) -> Comparison:
    """Final-performance comparison of two groups of runs.

    ``no_worse`` is ``mean_b >= mean_a - se_a``.
    """
    am, ase = mean_se(a)
    bm, bse = mean_se(b)
    lo_a, hi_a = am - SIGNIFICANCE_Z * ase, am + SIGNIFICANCE_Z * ase
    lo_b, hi_b = bm - SIGNIFICANCE_Z * bse, bm + SIGNIFICANCE_Z * bse
    significant = hi_a < lo_b or hi_b < lo_a
    better = ("b" if bm > am else "a") if significant else None
    return Comparison(am, ase, len(a), bm, bse, len(b), significant, better, bm >= am - ase)


def compare_dirs(dir_a, dir_b) -> Comparison:
    return compare_finals(list(final_returns(dir_a).values()), list(final_returns(dir_b).values()))


# ---------------------------------------------------------------- Gaussian tail

TAIL_THRESHOLD = 4.0


def gaussian_tail_truth(threshold: float = TAIL_THRESHOLD) -> float:
    """P(X > threshold) for X ~ N(0, 1)."""
    return 0.5 * math.erfc(threshold / math.sqrt(2.0))


@dataclass
class TailDemoResult:
    naive: np.ndarray
    importance: np.ndarray
    truth: float
    n_samples: int
    proposal_std: float

    @property
    def naive_var(self) -> float:
        return float(np.var(self.naive, ddof=1)) if len(self.naive) > 1 else 0.0

    @property
    def is_var(self) -> float:
        return float(np.var(self.importance, ddof=1)) if len(self.importance) > 1 else 0.0

    def grand_mean(self, which: str = "importance") -> tuple:
        x = getattr(self, which)
        se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
        return float(np.mean(x)), se

    def summary(self) -> dict:
        nm, nse = self.grand_mean("naive")
        im, ise = self.grand_mean("importance")
        return {"truth": self.truth, "n_samples": self.n_samples, "n_trials": len(self.naive),
                "proposal_std": self.proposal_std, "naive_mean": nm, "naive_se": nse,
                "naive_var": self.naive_var, "is_mean": im, "is_se": ise, "is_var": self.is_var}


def gaussian_tail_demo(n_samples: int, proposal_std: float, seed: int = 0, n_trials: int = 1000,
                       threshold: float = TAIL_THRESHOLD, chunk: int = 10**6) -> TailDemoResult:
    """Repeated naive and importance-sampled estimates of P(X > threshold).

    Each trial averages ``n_samples`` indicators: under N(0, 1) for the
    naive estimate and under N(0, proposal_std**2) with weights p/q for the
    IS estimate. The IS draws are the naive draws scaled by ``proposal_std``,
    so with ``proposal_std == 1`` both estimates coincide exactly.
    """
    if n_samples < 1 or n_trials < 1:
        raise ValueError("n_samples and n_trials must be >= 1")
    if not proposal_std > 0:
        raise ValueError(f"proposal_std must be positive, got {proposal_std}")
    rng = np.random.default_rng(seed)
    naive = np.empty(n_trials)
    imp = np.empty(n_trials)
    step = max(1, chunk // n_samples)
    log_s = math.log(proposal_std)
    for start in range(0, n_trials, step):
        stop = min(n_trials, start + step)
        z = rng.standard_normal((stop - start, n_samples))
        naive[start:stop] = np.mean(z > threshold, axis=1)
        x = proposal_std * z
        # log p(x) - log q(x) for p = N(0, 1), q = N(0, s^2)
        log_w = -0.5 * x * x + 0.5 * z * z + log_s
        w = np.where(x > threshold, np.exp(log_w), 0.0)
        imp[start:stop] = np.mean(w, axis=1)
    return TailDemoResult(naive, imp, gaussian_tail_truth(threshold), n_samples, float(proposal_std))


# ---------------------------------------------------------------- MDP text format

MDP_FORMAT = """\
Tabular MDP text format. Blank lines and text after '#' are ignored.

    states <S>
    actions <A>
    discount <gamma>
    terminal <s> [<s> ...]          optional; terminal states self-loop
    initial
    <p(s=0)> ... <p(s=S-1)>
    transitions
    <s> <a> : <p(0|s,a)> ... <p(S-1|s,a)>   one line per (s, a)
    rewards
    <s> : <r(s,0)> ... <r(s,A-1)>           one line per s

Terminal states need no transition lines; missing lines for them default
to a self-loop with reward 0.
"""


def _numbers(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise MdpFormatError(f"line {lineno}: {exc}") from None


def parse_mdp_text(text: str) -> TabularMdp:
    lines = []
    for i, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((i, body))
    header = {}
    section = None
    initial, trans, rewards = None, {}, {}
    for lineno, body in lines:
        tokens = body.split()
        key = tokens[0].lower()
        if key in ("states", "actions", "discount", "terminal"):
            if len(tokens) < 2 and key != "terminal":
                raise MdpFormatError(f"line {lineno}: {key} needs a value")
            header[key] = tokens[1:]
            section = None
            continue
        if key in ("initial", "transitions", "rewards") and len(tokens) == 1:
            section = key
            continue
        if section == "initial":
            if initial is not None:
                raise MdpFormatError(f"line {lineno}: initial distribution given twice")
            initial = _numbers(tokens, lineno)
        elif section == "transitions":
            if ":" not in body:
                raise MdpFormatError(f"line {lineno}: expected '<s> <a> : probabilities'")
            lhs, rhs = body.split(":", 1)
            idx = [int(x) for x in lhs.split()]
            if len(idx) != 2:
                raise MdpFormatError(f"line {lineno}: expected '<s> <a>' before ':'")
            trans[tuple(idx)] = (lineno, _numbers(rhs.split(), lineno))
        elif section == "rewards":
            if ":" not in body:
                raise MdpFormatError(f"line {lineno}: expected '<s> : rewards'")
            lhs, rhs = body.split(":", 1)
            rewards[int(lhs)] = (lineno, _numbers(rhs.split(), lineno))
        else:
            raise MdpFormatError(f"line {lineno}: unexpected {tokens[0]!r}")
    for key in ("states", "actions", "discount"):
        if key not in header:
            raise MdpFormatError(f"missing '{key}' line")
    S, A = int(header["states"][0]), int(header["actions"][0])
    gamma = float(header["discount"][0])
    terminal = np.zeros(S, bool)
    for t in header.get("terminal", []):
        terminal[int(t)] = True
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            if (s, a) in trans:
                lineno, row = trans[(s, a)]
                if len(row) != S:
                    raise MdpFormatError(f"line {lineno}: expected {S} probabilities, got {len(row)}")
                P[s, a] = row
            elif terminal[s]:
                P[s, a, s] = 1.0
            else:
                raise MdpFormatError(f"missing transition line for state {s}, action {a}")
        if s in rewards:
            lineno, row = rewards[s]
            if len(row) != A:
                raise MdpFormatError(f"line {lineno}: expected {A} rewards, got {len(row)}")
            R[s] = row
        elif not terminal[s]:
            raise MdpFormatError(f"missing reward line for state {s}")
    for (s, a) in trans:
        if not (0 <= s < S and 0 <= a < A):
            raise MdpFormatError(f"line {trans[(s, a)][0]}: index ({s}, {a}) out of range")
    if initial is None:
        raise MdpFormatError("missing 'initial' section")
    if len(initial) != S:
        raise MdpFormatError(f"initial distribution has {len(initial)} entries, expected {S}")
    mdp = TabularMdp(P, R, np.array(initial), terminal, gamma)
    problems = validate_mdp(mdp)
    if problems:
        raise MdpFormatError("; ".join(problems))
    return mdp


def format_mdp_text(mdp: TabularMdp) -> str:
    out = [f"states {mdp.n_states}", f"actions {mdp.n_actions}", f"discount {mdp.discount!r}"]
    if mdp.terminal.any():
        out.append("terminal " + " ".join(str(s) for s in np.flatnonzero(mdp.terminal)))
    out += ["initial", " ".join(repr(float(p)) for p in mdp.initial_dist), "transitions"]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            out.append(f"{s} {a} : " + " ".join(repr(float(p)) for p in mdp.transition[s, a]))
    out.append("rewards")
    for s in range(mdp.n_states):
        out.append(f"{s} : " + " ".join(repr(float(r)) for r in mdp.reward[s]))
    return "\n".join(out) + "\n"


def load_mdp(path) -> TabularMdp:
    return parse_mdp_text(Path(path).read_text())


def load_policy(path, mdp: Optional[TabularMdp] = None) -> np.ndarray:
    """Policy file: one whitespace-separated row of action probabilities per state."""
    try:
        pi = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise MdpFormatError(f"{path}: {exc}") from None
    if mdp is not None and pi.shape != (mdp.n_states, mdp.n_actions):
        raise MdpFormatError(f"{path}: policy has shape {pi.shape}, expected "
                             f"{(mdp.n_states, mdp.n_actions)}")
    return pi
