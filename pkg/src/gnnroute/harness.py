"""Experiment orchestration: training, paired evaluation, zoo sweep, link failures.

Every command resolves its configuration (defaults < config file < CLI
flags), echoes it into the output directory together with the tool version,
and writes plot-ready CSV.  Timestamps go to ``metadata.json`` only, so the
CSV outputs of a re-run with the same resolved config are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__, gnn_q, nn_core
from .baselines import POLICIES, run_policy_episode
from .dqn_agent import LOG_COLUMNS, AgentConfig, train
from .gnn_q import QNetworkParams
from .graph_core import (
    LinkRemovalError,
    Topology,
    TopologyError,
    degree_stats,
    filter_topologies,
    from_edges,
    load_topology,
    remove_random_links,
    resolve_topology,
)
from .otn_env import DEFAULT_CAPACITY, TrafficDemand, initial_state, tentative_allocate
from .path_engine import PathTable, build_path_table
from .seeding import derive_seed

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
CDF_POINTS = 21

COMMANDS = ("train", "eval", "zoo-sweep", "link-failures", "filter", "gradcheck")

_COMMON = {"seed": 0, "k": 4, "capacity": DEFAULT_CAPACITY}
DEFAULTS = {
    "train": {"topology": "nsfnet"},
    "eval": {"topology": "nsfnet", "checkpoint": "", "episodes": 100, "policies": "gnn,lb,fluid"},
    "zoo-sweep": {"topology": "", "checkpoint": "", "episodes": 100},
    "link-failures": {
        "topology": "geant2",
        "checkpoint": "",
        "episodes": 100,
        "max_failures": 10,
        "failure_step": 1,
    },
    "filter": {"topology": ""},
    "gradcheck": {"tolerance": 1e-4},
}
_AGENT_KEYS = {f.name: f for f in fields(AgentConfig)}


class UsageError(ValueError):
    """Bad command line or configuration (exit code 1)."""


class DataError(RuntimeError):
    """Input data could not be used (exit code 2)."""


# ------------------------------------------------------------------ config


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _coerce(template, value):
    if isinstance(template, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return str(value)


def resolve_config(command: str, file_values: dict | None = None, cli_values: dict | None = None) -> dict:
    """Merge defaults, config-file values and CLI values for ``command``."""
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}")
    base = dict(_COMMON)
    base.update(DEFAULTS[command])
    if command == "train":
        base.update({k: getattr(AgentConfig(), k) for k in _AGENT_KEYS})
        base.pop("training_episodes")
        base["episodes"] = AgentConfig().training_episodes
    merged = dict(base)
    for source in (file_values or {}, cli_values or {}):
        for key, val in source.items():
            if val is None:
                continue
            if key not in base:
                raise UsageError(f"unknown setting {key!r} for {command}")
            try:
                merged[key] = _coerce(base[key], val)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {val!r}") from exc
    return merged


def agent_config(cfg: dict) -> AgentConfig:
    values = {k: cfg[k] for k in _AGENT_KEYS if k in cfg}
    values["training_episodes"] = cfg["episodes"]
    values["k"] = cfg["k"]
    values["capacity"] = cfg["capacity"]
    try:
        return AgentConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def write_run_files(out_dir: Path, command: str, cfg: dict, started: float) -> None:
    """Echo the resolved config and version; timestamps go to a separate file."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {command}", f"tool_version = {__version__}", f"csv_schema = {CSV_SCHEMA_VERSION}"]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")
    meta = {
        "command": command,
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "elapsed_s": round(time.time() - started, 3),
    }
    (out_dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")


# -------------------------------------------------------------------- csv


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c) for c in columns]
            w.writerow([_fmt(v) for v in row])


# -------------------------------------------------------------- evaluation


def episode_seed(master: int, experiment: str, index: int) -> int:
    return derive_seed(master, experiment, index)


def _relative(scores: np.ndarray, fluid: np.ndarray) -> np.ndarray:
    out = np.full(len(scores), np.nan)
    ok = fluid > 0
    out[ok] = scores[ok] / fluid[ok]
    return out


def five_numbers(x: np.ndarray) -> dict:
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    if not len(x):
        return {"min": None, "q1": None, "median": None, "q3": None, "max": None}
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


@dataclass
class EvalSummary:
    """Paired per-episode scores of several policies on one topology."""

    topology: str
    seeds: list[int]
    scores: dict[str, np.ndarray]
    fluid_reference: np.ndarray
    relative: dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        self.relative = {p: _relative(s, self.fluid_reference) for p, s in self.scores.items()}

    @property
    def policies(self) -> list[str]:
        return list(self.scores)

    def mean(self, policy: str) -> float:
        return float(np.mean(self.scores[policy]))

    def win_rate(self, policy: str, other: str) -> float:
        return float(np.mean(self.scores[policy] > self.scores[other]))

    def cdf(self, policy: str, points: int = CDF_POINTS) -> list[tuple[float, float]]:
        rel = self.relative[policy]
        rel = np.sort(rel[~np.isnan(rel)])
        if not len(rel):
            return []
        probs = np.linspace(0.0, 1.0, points)
        return [(float(p), float(np.quantile(rel, p))) for p in probs]

    def raw_rows(self):
        for i, s in enumerate(self.seeds):
            for p in self.policies:
                yield [i, s, p, self.scores[p][i], self.relative[p][i]]

    def summary_rows(self):
        for p in self.policies:
            st = five_numbers(self.scores[p])
            rel = self.relative[p]
            yield [p, len(self.seeds), self.mean(p), st["min"], st["q1"], st["median"], st["q3"], st["max"],
                   float(np.nanmean(rel)) if np.any(~np.isnan(rel)) else None]


RAW_COLUMNS = ("episode", "demand_seed", "policy", "score", "relative_score")
SUMMARY_COLUMNS = ("policy", "episodes", "mean", "min", "q1", "median", "q3", "max", "relative_mean")
CDF_COLUMNS = ("policy", "probability", "relative_score")


def evaluate_policies(
    topo: Topology,
    table: PathTable,
    params: QNetworkParams | None,
    episodes: int,
    seed: int,
    policies: Sequence[str] = POLICIES,
    capacity: float = DEFAULT_CAPACITY,
    experiment: str = "episode",
) -> EvalSummary:
    """Run ``episodes`` paired episodes; episode ``i`` uses the same demand seed for every policy."""
    for p in policies:
        if p not in POLICIES:
            raise UsageError(f"unknown policy {p!r}")
    seeds = [episode_seed(seed, experiment, i) for i in range(episodes)]
    scores = {p: np.zeros(episodes) for p in policies}
    fluid = np.zeros(episodes)
    for i, s in enumerate(seeds):
        for p in policies:
            scores[p][i] = run_policy_episode(
                p, topo, table, s, params=params, policy_seed=episode_seed(seed, "lb", i), capacity=capacity
            )
        fluid[i] = scores["fluid"][i] if "fluid" in scores else run_policy_episode("fluid", topo, table, s, capacity=capacity)
    return EvalSummary(topo.name, seeds, scores, fluid)


def write_eval(out_dir: Path, summary: EvalSummary, prefix: str = "eval") -> None:
    write_csv(out_dir / f"{prefix}_raw.csv", RAW_COLUMNS, summary.raw_rows())
    write_csv(out_dir / f"{prefix}_summary.csv", SUMMARY_COLUMNS, summary.summary_rows())
    write_csv(
        out_dir / f"{prefix}_cdf.csv",
        CDF_COLUMNS,
        ([p, prob, v] for p in summary.policies for prob, v in summary.cdf(p)),
    )


def load_checkpoint(path) -> QNetworkParams:
    if not path:
        raise UsageError("the gnn policy needs --checkpoint")
    try:
        return QNetworkParams.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except nn_core.CheckpointError as exc:
        raise DataError(str(exc)) from exc


def load_topology_arg(spec: str) -> Topology:
    if not spec:
        raise UsageError("--topology is required")
    try:
        return resolve_topology(spec)
    except (TopologyError, FileNotFoundError, KeyError) as exc:
        raise DataError(f"cannot load topology {spec!r}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_train(cfg: dict, out_dir: Path) -> dict:
    topo = load_topology_arg(cfg["topology"])
    agent = agent_config(cfg)
    table = build_path_table(topo, agent.k)
    result = train(topo, table, agent, seed=cfg["seed"])
    result.best_params.save(out_dir / "best.ckpt", cfg)
    result.final_params.save(out_dir / "final.ckpt", cfg)
    write_csv(out_dir / "train_log.csv", LOG_COLUMNS, result.log)
    return {"best_eval": result.best_eval, "episodes": len(result.log)}


def parse_policies(text: str) -> list[str]:
    out = [p.strip() for p in text.split(",") if p.strip()]
    if not out:
        raise UsageError("empty policy list")
    for p in out:
        if p not in POLICIES:
            raise UsageError(f"unknown policy {p!r}; choose from {', '.join(POLICIES)}")
    return out


def cmd_eval(cfg: dict, out_dir: Path) -> EvalSummary:
    policies = parse_policies(cfg["policies"])
    params = load_checkpoint(cfg["checkpoint"]) if "gnn" in policies else None
    topo = load_topology_arg(cfg["topology"])
    table = build_path_table(topo, cfg["k"])
    summary = evaluate_policies(topo, table, params, cfg["episodes"], cfg["seed"], policies, cfg["capacity"])
    write_eval(out_dir, summary)
    return summary


def _zoo_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".graphml", ".txt", ".edges", ".edgelist"))


def cmd_filter(cfg: dict, out_dir: Path):
    topos, skipped = _load_many(cfg["topology"])
    report = filter_topologies(topos)
    _write_filter_report(out_dir, topos, report, skipped)
    return report


def _load_many(spec: str) -> tuple[list[Topology], dict[str, str]]:
    if not spec:
        raise UsageError("--topology must name a directory or file")
    path = Path(spec)
    if not path.exists():
        return [load_topology_arg(spec)], {}
    files = _zoo_files(path) if path.is_dir() else [path]
    topos, skipped = [], {}
    for f in files:
        try:
            topos.append(load_topology(f))
        except (TopologyError, OSError) as exc:
            log.warning("skipping %s: %s", f.name, exc)
            skipped[f.name] = str(exc)
    return topos, skipped


def _write_filter_report(out_dir, topos, report, skipped) -> None:
    kept = {t.name for t in report.kept}
    rows = []
    for t in topos:
        st = degree_stats(t)
        reasons = "; ".join(report.rejected.get(t.name, []))
        rows.append([t.name, t.num_nodes, t.num_links, st.mean_degree, st.degree_variance, int(t.name in kept), reasons])
    for name, why in sorted(skipped.items()):
        rows.append([name, None, None, None, None, 0, f"unparseable: {why}"])
    write_csv(out_dir / "filter_report.csv", ("name", "nodes", "links", "mean_degree", "degree_variance", "kept", "reasons"), rows)


ZOO_COLUMNS = (
    "topology_id", "name", "nodes", "links", "gnn_mean", "lb_mean", "fluid_mean",
    "gnn_relative_pct", "lb_relative_pct", "gnn_minus_lb",
)


def cmd_zoo_sweep(cfg: dict, out_dir: Path) -> list[list]:
    params = load_checkpoint(cfg["checkpoint"])
    directory = Path(cfg["topology"])
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    topos, skipped = _load_many(str(directory))
    report = filter_topologies(topos)
    _write_filter_report(out_dir, topos, report, skipped)
    if not report.kept:
        log.warning("no topology in %s passed the filter", directory)
    rows = []
    for topo in sorted(report.kept, key=lambda t: t.name):
        table = build_path_table(topo, cfg["k"])
        s = evaluate_policies(topo, table, params, cfg["episodes"], cfg["seed"], POLICIES, cfg["capacity"],
                              experiment=f"zoo/{topo.name}")
        rel = {p: float(np.nanmean(s.relative[p])) * 100 for p in ("gnn", "lb")}
        rows.append([topo.name, topo.num_nodes, topo.num_links, s.mean("gnn"), s.mean("lb"), s.mean("fluid"),
                     rel["gnn"], rel["lb"], s.mean("gnn") - s.mean("lb")])
    rows.sort(key=lambda r: (r[-1], r[0]))
    rows = [[i] + r for i, r in enumerate(rows)]
    write_csv(out_dir / "zoo_sweep.csv", ZOO_COLUMNS, rows)
    write_csv(out_dir / "topology_ids.csv", ("topology_id", "name"), ([r[0], r[1]] for r in rows))
    return rows


FAILURE_RAW_COLUMNS = ("failures", "experiment", "demand_seed", "removal_retries", "removed", "gnn_score", "fluid_score", "relative_score")
FAILURE_SUMMARY_COLUMNS = (
    "failures", "experiments", "gnn_mean", "gnn_sem", "fluid_mean", "relative_mean",
    "relative_min", "relative_q1", "relative_median", "relative_q3", "relative_max",
)


def failure_levels(max_failures: int, step: int = 1) -> list[int]:
    return list(range(0, max_failures + 1, step))


def run_link_failures(
    topo: Topology,
    params: QNetworkParams,
    levels: Sequence[int],
    experiments: int,
    seed: int,
    k: int = 4,
    capacity: float = DEFAULT_CAPACITY,
) -> list[list]:
    """One row per (level, experiment): gnn and fluid scores on a fresh connected removal.

    Demand seeds match :func:`evaluate_policies`, so level 0 reproduces a
    plain evaluation of the intact topology.
    """
    if max(levels) >= topo.num_links - (topo.num_nodes - 1):
        raise UsageError(f"{topo.name}: cannot remove {max(levels)} links and stay connected")
    rows = []
    for n in levels:
        for i in range(experiments):
            retries = 0
            while True:
                rng = np.random.default_rng(derive_seed(seed, f"failures/{n}/{retries}", i))
                try:
                    damaged = remove_random_links(topo, n, rng)
                    break
                except LinkRemovalError as exc:
                    log.warning("level %d experiment %d: %s; resampling", n, i, exc)
                    retries += 1
            removed = sorted(set(topo.links) - set(damaged.links))
            table = build_path_table(damaged, k)
            s = episode_seed(seed, "episode", i)
            g = run_policy_episode("gnn", damaged, table, s, params=params, capacity=capacity)
            f = run_policy_episode("fluid", damaged, table, s, capacity=capacity)
            rows.append([n, i, s, retries, " ".join(f"{a}-{b}" for a, b in removed), g, f, g / f if f > 0 else float("nan")])
    return rows


def summarize_failures(rows: list[list]) -> list[list]:
    out = []
    for n in sorted({r[0] for r in rows}):
        sel = [r for r in rows if r[0] == n]
        g = np.array([r[5] for r in sel])
        f = np.array([r[6] for r in sel])
        rel = np.array([r[7] for r in sel])
        st = five_numbers(rel)
        sem = float(g.std(ddof=1) / np.sqrt(len(g))) if len(g) > 1 else 0.0
        out.append([n, len(sel), float(g.mean()), sem, float(f.mean()), float(np.nanmean(rel)),
                    st["min"], st["q1"], st["median"], st["q3"], st["max"]])
    return out


def cmd_link_failures(cfg: dict, out_dir: Path) -> list[list]:
    params = load_checkpoint(cfg["checkpoint"])
    topo = load_topology_arg(cfg["topology"])
    if cfg["failure_step"] < 1 or cfg["max_failures"] < 0:
        raise UsageError("need max_failures >= 0 and failure_step >= 1")
    levels = failure_levels(cfg["max_failures"], cfg["failure_step"])
    rows = run_link_failures(topo, params, levels, cfg["episodes"], cfg["seed"], cfg["k"], cfg["capacity"])
    summary = summarize_failures(rows)
    write_csv(out_dir / "link_failures_raw.csv", FAILURE_RAW_COLUMNS, rows)
    write_csv(out_dir / "link_failures_summary.csv", FAILURE_SUMMARY_COLUMNS, summary)
    return summary


# --------------------------------------------------------------- gradcheck


def run_gradcheck(seed: int = 0, hidden: int = 4, steps: int = 2, tolerance: float = 1e-4) -> dict[str, nn_core.GradCheckReport]:
    """Finite-difference checks of the dense layer, recurrent cell and full q-network."""
    rng = np.random.default_rng(seed)
    reports = {}

    dense = nn_core.DenseLayerParams.init(rng, 3, 2, "selu")
    x = rng.normal(size=(5, 3))
    w_out = rng.normal(size=(5, 2))

    def dense_loss(a):
        p = nn_core.DenseLayerParams(a["weights"], a["bias"], "selu")
        out, cache = nn_core.dense_forward(p, a["x"])
        dx, dw, db = nn_core.dense_backward(p, cache, w_out)
        return float((out * w_out).sum()), {"weights": dw, "bias": db, "x": dx}

    reports["dense"] = nn_core.finite_diff_check(
        dense_loss, {"weights": dense.weights, "bias": rng.normal(size=2), "x": x}, tolerance
    )

    cell = nn_core.RecurrentCellParams.init(rng, hidden)
    h = rng.uniform(-1, 1, size=(3, hidden))
    inp = rng.normal(size=(3, hidden))
    c_out = rng.normal(size=(3, hidden))

    def cell_loss(a):
        c = nn_core.RecurrentCellParams(a["w"], a["u"], a["b"])
        out, cache = nn_core.recurrent_forward(c, a["h"], a["x"])
        dh, dx, dw, du, db = nn_core.recurrent_backward(c, cache, c_out)
        return float((out * c_out).sum()), {"w": dw, "u": du, "b": db, "h": dh, "x": dx}

    reports["recurrent"] = nn_core.finite_diff_check(
        cell_loss, {"w": cell.w, "u": cell.u, "b": rng.normal(size=3 * hidden), "h": h, "x": inp}, tolerance
    )

    topo = from_edges("triangle", [(0, 1), (1, 2), (0, 2)])
    params = QNetworkParams.init(rng, hidden, steps)
    if hidden >= gnn_q.NUM_FEATURES:
        table = build_path_table(topo)
        state = initial_state(topo, table)
        path = table[(0, 2)][1]
        d = TrafficDemand(0, 2, 32)
        h0 = gnn_q.init_hidden_states(tentative_allocate(state, path, 32), path, d, hidden)[None]
    else:
        # the feature vector does not fit: check the network on random link states instead
        h0 = rng.uniform(-1, 1, size=(1, topo.num_links, hidden))
    target = np.array([1.5])

    def q_loss(a):
        p = params.replace(a)
        q, cache = gnn_q.forward(h0, topo, p)
        err = q - target
        return 0.5 * float(err @ err), gnn_q.backward(err, cache, p)

    # step 1e-6 keeps central differences from straddling the SELU kink
    reports["q_network"] = nn_core.finite_diff_check(q_loss, params.arrays, tolerance, step=1e-6)
    return reports


def cmd_gradcheck(cfg: dict, out_dir: Path) -> dict[str, nn_core.GradCheckReport]:
    reports = run_gradcheck(cfg["seed"], tolerance=cfg["tolerance"])
    rows = []
    for name, rep in reports.items():
        for block, err in rep.errors.items():
            rows.append([name, block, err, int(err < rep.tolerance)])
    write_csv(out_dir / "gradcheck.csv", ("check", "block", "relative_error", "passed"), rows)
    return reports


# ------------------------------------------------------------------- trend


def mann_kendall(values: Sequence[float]) -> tuple[float, float]:
    """Mann-Kendall statistic ``S`` and its normal-approximation z score (no tie correction)."""
    x = np.asarray(values, dtype=float)
    n = len(x)
    s = float(sum(np.sign(x[j] - x[i]) for i in range(n) for j in range(i + 1, n)))
    var = n * (n - 1) * (2 * n + 5) / 18.0
    if var == 0:
        return s, 0.0
    z = (s - np.sign(s)) / math.sqrt(var)
    return s, float(z)


RUNNERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "zoo-sweep": cmd_zoo_sweep,
    "link-failures": cmd_link_failures,
    "filter": cmd_filter,
    "gradcheck": cmd_gradcheck,
}


def run_command(command: str, cfg: dict, out_dir: str | Path):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    result = RUNNERS[command](cfg, out_dir)
    write_run_files(out_dir, command, cfg, started)
    return result

