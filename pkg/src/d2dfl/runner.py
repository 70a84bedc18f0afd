"""Experiment orchestration: build the network, run rounds of a protocol
against a simulated clock, and record loss / traffic traces.
"""
from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import comms, datasets, protocols
from .comms import ChannelModel
from .datasets import FeatureSet
from .nn import init_model, per_sample_loss
from .protocols import Agent

log = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
TRACE_FIELDS = ("round", "time_s", "avg_val_loss", "cum_kb_per_agent", "cum_frame_drops")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """All knobs of one run. Defaults reproduce the 15-robot ring setup.

    ``data_source`` is either ``"synthetic"`` or a dataset directory.
    ``fraction`` defaults to 0.08 (IID) or 0.03 (non-IID). The run stops at
    ``rounds`` if given, otherwise once ``time_budget_s`` of simulated time
    has elapsed.
    """

    protocol: str = protocols.GOSSIP
    data_source: str = SYNTHETIC
    synthetic_per_class: int = 150
    data_seed: int = 0
    partition_mode: str = datasets.IID
    fraction: float | None = None
    n_agents: int = 15
    topology_seed: int = 0
    learning_seed: int = 0
    tti_ms: float = 3.0
    payload_bytes: int = 1000
    bler: float = 1e-9
    k_model: int = 5750
    k_grad: int = 8000
    mu: float = 0.025
    batch_size: int = 16
    rounds: int | None = None
    time_budget_s: float | None = 39.0
    timing_mode: str = comms.NOMINAL
    compute_ms: float = comms.DEFAULT_COMPUTE_MS
    eval_stride: int = 1
    output_path: str | None = None

    def __post_init__(self):
        if self.protocol not in protocols.PROTOCOLS:
            raise ConfigError(f"protocol must be one of {protocols.PROTOCOLS}, got {self.protocol!r}")
        try:
            self.partition_mode = datasets.normalize_mode(self.partition_mode)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.timing_mode not in (comms.NOMINAL, comms.DERIVED):
            raise ConfigError(f"timing_mode must be 'nominal' or 'derived', got {self.timing_mode!r}")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ConfigError("fraction must be within (0, 1]")
        if self.n_agents < 3:
            raise ConfigError("n_agents must be >= 3 for a ring")
        if self.synthetic_per_class < 1:
            raise ConfigError("synthetic_per_class must be >= 1")
        if not 0.0 <= self.bler <= 1.0:
            raise ConfigError("bler must be within [0, 1]")
        if self.tti_ms <= 0 or self.payload_bytes <= 0 or self.compute_ms < 0:
            raise ConfigError("tti_ms and payload_bytes must be positive, compute_ms non-negative")
        if not 1 <= self.k_model <= 24324 or not 1 <= self.k_grad <= 24324:
            raise ConfigError("k_model and k_grad must be within 1..24324")
        if self.mu <= 0:
            raise ConfigError("mu must be positive")
        if self.batch_size < 1 or self.eval_stride < 1:
            raise ConfigError("batch_size and eval_stride must be >= 1")
        if self.rounds is None and self.time_budget_s is None:
            raise ConfigError("set rounds or time_budget_s")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.time_budget_s is not None and self.time_budget_s <= 0:
            raise ConfigError("time_budget_s must be positive")

    @property
    def channel(self) -> ChannelModel:
        return ChannelModel(self.tti_ms, self.payload_bytes, self.bler)

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def load_config(path: str | os.PathLike, **overrides) -> ExperimentConfig:
    """Read a JSON config file; ``overrides`` (when not None) take precedence."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - set(ExperimentConfig.keys()))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


# -- traces --------------------------------------------------------------------

def _sig9(x: float) -> float:
    return float(f"{x:.9g}")


@dataclass
class Trace:
    """Per-evaluated-round records of one run (or a seed average).

    Float columns are stored rounded to 9 significant digits, so a trace
    survives a CSV round trip unchanged.
    """

    round: list[int] = field(default_factory=list)
    time_s: list[float] = field(default_factory=list)
    avg_val_loss: list[float] = field(default_factory=list)
    cum_kb_per_agent: list[float] = field(default_factory=list)
    cum_frame_drops: list[float] = field(default_factory=list)
    protocol: str = ""
    rounds_run: int = 0

    def append(self, rnd, time_s, loss, kb, drops):
        self.round.append(int(rnd))
        self.time_s.append(_sig9(time_s))
        self.avg_val_loss.append(_sig9(loss))
        self.cum_kb_per_agent.append(_sig9(kb))
        self.cum_frame_drops.append(drops if isinstance(drops, int) else _sig9(drops))

    def __len__(self) -> int:
        return len(self.round)

    def columns(self) -> dict[str, np.ndarray]:
        return {name: np.asarray(getattr(self, name), dtype=float) for name in TRACE_FIELDS}

    @property
    def final_loss(self) -> float:
        return self.avg_val_loss[-1]

    @property
    def kb_per_round(self) -> float:
        return self.cum_kb_per_agent[-1] / self.round[-1] if self.round else 0.0

    def loss_at(self, t: float) -> float:
        """Loss linearly interpolated at simulated time ``t`` (seconds)."""
        return float(np.interp(t, self.time_s, self.avg_val_loss))


def write_trace(t: Trace, path: str | os.PathLike) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in zip(*(getattr(t, f) for f in TRACE_FIELDS)):
            w.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])
    return path


def read_trace(path: str | os.PathLike) -> Trace:
    t = Trace()
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != TRACE_FIELDS:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in r:
            drops = float(row[4])
            t.append(int(row[0]), float(row[1]), float(row[2]), float(row[3]),
                     int(drops) if drops.is_integer() else drops)
    t.rounds_run = t.round[-1] if t.round else 0
    return t


# -- data ----------------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _features(data_source: str, per_class: int, data_seed: int) -> tuple[FeatureSet, FeatureSet]:
    if data_source == SYNTHETIC:
        d = datasets.gen_synthetic(per_class, data_seed)
    else:
        d = datasets.load_radar(data_source)
    return datasets.preprocess(d)


def load_features(config: ExperimentConfig) -> tuple[FeatureSet, FeatureSet]:
    return _features(config.data_source, config.synthetic_per_class, config.data_seed)


def build_agents(config: ExperimentConfig, train: FeatureSet) -> tuple[list[Agent], np.random.SeedSequence]:
    """Agents with a common initial model, their shards and private streams.

    Returns the agents and the seed sequence left for round-level streams.
    """
    seq = np.random.SeedSequence(config.learning_seed)
    part_seq, init_seq, agents_seq, rounds_seq = seq.spawn(4)
    part = datasets.partition(
        train.labels, config.n_agents, config.fraction, config.partition_mode,
        seed=int(part_seq.generate_state(1)[0]),
    )
    graph = comms.ring_topology(config.n_agents, seed=config.topology_seed)
    model0 = init_model(int(init_seq.generate_state(1)[0]))
    agents = []
    for i, (idx, s) in enumerate(zip(part.indices, agents_seq.spawn(config.n_agents))):
        agents.append(Agent(
            id=i,
            model=model0.copy(),
            features=train.features[idx],
            labels=train.labels[idx],
            neighbors=graph.neighbors(i),
            rng=np.random.default_rng(s),
            indices=idx,
        ))
    return agents, rounds_seq


def average_loss(agents: Sequence[Agent], test: FeatureSet) -> float:
    return float(np.mean([per_sample_loss(a.model, test.features, test.labels).mean() for a in agents]))


def run(config: ExperimentConfig) -> Trace:
    """Simulate one experiment and return its trace."""
    train, test = load_features(config)
    agents, rounds_seq = build_agents(config, train)
    sched_rng, chan_rng = (np.random.default_rng(s) for s in rounds_seq.spawn(2))
    channel = config.channel
    budget_ms = None if config.time_budget_s is None else config.time_budget_s * 1000.0

    trace = Trace(protocol=config.protocol)
    elapsed_ms, kb, drops, rnd = 0.0, 0.0, 0, 0
    while True:
        if config.rounds is not None and rnd >= config.rounds:
            break
        if budget_ms is not None and elapsed_ms >= budget_ms:
            break
        result = protocols.network_round(
            config.protocol, agents, channel, sched_rng, chan_rng,
            config.mu, config.k_model, config.k_grad, config.batch_size,
        )
        rnd += 1
        if result.negotiations:
            costs = [
                comms.round_accounting(n.sent, config.timing_mode, channel, config.compute_ms)
                for n in result.negotiations
            ]
            # pairs run in parallel; the slowest one closes the round
            elapsed_ms += max(c[0] for c in costs)
            kb += sum(c[1] for c in costs) / len(costs)
        else:
            elapsed_ms += comms.round_accounting(
                [], config.timing_mode, channel, config.compute_ms, cooperative=False
            )[0]
        drops += result.dropped_frames
        last = (config.rounds is not None and rnd >= config.rounds) or (
            budget_ms is not None and elapsed_ms >= budget_ms
        )
        if rnd % config.eval_stride == 0 or last:
            trace.append(rnd, elapsed_ms / 1000.0, average_loss(agents, test), kb, drops)
    trace.rounds_run = rnd
    log.info("%s: %d rounds, final loss %.4f", config.protocol, rnd, trace.final_loss)
    if config.output_path:
        write_trace(trace, config.output_path)
    return trace


def run_seeds(config: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2)) -> list[Trace]:
    return [run(config.replace(learning_seed=int(s), output_path=None)) for s in seeds]


def mean_trace(traces: Sequence[Trace]) -> Trace:
    """Average loss, traffic and drops over runs, on the first run's time grid."""
    ref = traces[0]
    out = Trace(protocol=ref.protocol, rounds_run=ref.rounds_run)
    cols = [t.columns() for t in traces]
    grid = cols[0]["time_s"]

    def avg(name):
        return np.mean([np.interp(grid, c["time_s"], c[name]) for c in cols], axis=0)

    loss, kb, drops = avg("avg_val_loss"), avg("cum_kb_per_agent"), avg("cum_frame_drops")
    for i in range(len(grid)):
        out.append(ref.round[i], grid[i], loss[i], kb[i], float(drops[i]))
    return out


# -- comparison ----------------------------------------------------------------

def _common_grid(a: Trace, b: Trace) -> np.ndarray:
    ta, tb = np.asarray(a.time_s), np.asarray(b.time_s)
    lo, hi = max(ta[0], tb[0]), min(ta[-1], tb[-1])
    if lo > hi:
        raise ValueError("traces cover disjoint time ranges")
    grid = np.union1d(ta, tb)
    return grid[(grid >= lo) & (grid <= hi)]


def crossover_time(a: Trace, b: Trace) -> float | None:
    """Earliest common time from which ``a``'s loss stays strictly below ``b``'s."""
    grid = _common_grid(a, b)
    below = np.interp(grid, a.time_s, a.avg_val_loss) < np.interp(grid, b.time_s, b.avg_val_loss)
    if not below[-1]:
        return None
    above = np.flatnonzero(~below)
    return float(grid[0] if above.size == 0 else grid[above[-1] + 1])


@dataclass
class PairSummary:
    a: str
    b: str
    a_below_b_from_s: float | None
    b_below_a_from_s: float | None
    final_delta: float  # loss(a) - loss(b) at the last common time


def compare(traces: Sequence[Trace], names: Sequence[str] | None = None) -> list[PairSummary]:
    if len(traces) < 2:
        raise ValueError("need at least two traces")
    names = list(names) if names is not None else [t.protocol or str(i) for i, t in enumerate(traces)]
    out = []
    for i in range(len(traces)):
        for j in range(i + 1, len(traces)):
            a, b = traces[i], traces[j]
            end = _common_grid(a, b)[-1]
            out.append(PairSummary(
                names[i], names[j],
                crossover_time(a, b), crossover_time(b, a),
                a.loss_at(end) - b.loss_at(end),
            ))
    return out
