"""Deterministic event-driven simulation of multi-task training on a worker pool.

Each worker is pinned to one task. A worker snapshots the parameters when it
starts a step, computes that task's gradients on its own batch, and delivers a
:class:`GradientPacket` when the step finishes. The aggregator then decides,
per mode, when gradients are applied:

* ``async``: every packet is applied on arrival.
* ``hybrid``: packets accumulate per task and the task is updated once its
  quota is met, independently of the other tasks.
* ``sync``: every task must meet its quota before any task is updated; packets
  beyond a quota (backup workers) and stale packets are dropped.

Each task has its own RMSProp state. Simulated time only orders events; the
cost of a run is the number of computed packets times the task's step cost.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .autodiff import param_grads
from .checkpoint import Checkpoint
from .config import ExperimentConfig, Mode, OptimizerConfig, TaskEntry
from .data import stream
from .tasks import TaskSpec, build_task_graph, init_head, sample_batch, task_param_names
from .trunk import alpha_param_name, init_trunk


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """RMSProp second-moment estimates for one task."""
    rho: float = 0.9
    lr: float = 1e-3
    eps: float = 1e-8
    s: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimizerConfig) -> "OptimizerState":
        return cls(cfg.rho, cfg.lr, cfg.eps)


def rmsprop_apply(opt: OptimizerState, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Update ``opt.s`` in place (fresh arrays) and return the parameter deltas.

    Entries where both ``g`` and ``s`` are zero get a zero delta.
    """
    deltas = {}
    for name in sorted(grads):
        g = grads[name]
        s = opt.s.get(name)
        s = (1.0 - opt.rho) * (g * g) if s is None else opt.rho * s + (1.0 - opt.rho) * (g * g)
        opt.s[name] = s
        denom = np.sqrt(s) + opt.eps
        step = np.zeros_like(g)
        np.divide(g, denom, out=step, where=denom > 0)
        deltas[name] = -opt.lr * step
    return deltas


# ---------------------------------------------------------------------------
# packets and aggregation
# ---------------------------------------------------------------------------

@dataclass
class GradientPacket:
    task_id: str
    worker_id: int
    version: int         # the task's parameter version at snapshot time
    step_id: int         # the worker's own step counter
    grads: dict[str, np.ndarray]
    loss: float
    global_version: int = 0  # total applies across all tasks at snapshot time


@dataclass
class ApplyEvent:
    task_id: str
    version: int                  # version after the apply
    packets: list[tuple[int, int]]  # (worker id, step id) of the averaged packets
    staleness: list[int]          # task version at apply minus packet version
    global_staleness: list[int]   # same, counted over every task's applies
    deltas: dict[str, np.ndarray] | None = None


@dataclass
class TaskBuffer:
    quota: int
    version: int = 0
    count: int = 0
    grads: dict[str, np.ndarray] | None = None
    members: list[GradientPacket] = field(default_factory=list)
    produced: int = 0
    applied: int = 0
    discarded: int = 0

    def clear(self):
        self.count, self.grads, self.members = 0, None, []


@dataclass
class AggregatorState:
    params: dict[str, np.ndarray]
    buffers: dict[str, TaskBuffer]
    optimizers: dict[str, OptimizerState]
    global_version: int = 0
    keep_deltas: bool = False

    def check_invariants(self) -> None:
        for tid, b in self.buffers.items():
            if b.produced != b.applied + b.count + b.discarded:
                raise AssertionError(f"packet conservation broken for {tid}: {b}")
            # sync may hold a full buffer while other tasks catch up
            if not 0 <= b.count <= b.quota:
                raise AssertionError(f"buffer count {b.count} outside [0, {b.quota}] for {tid}")
            if (b.count == 0) != (b.grads is None):
                raise AssertionError(f"buffer for {tid} not cleared consistently")


def _accumulate(buf: TaskBuffer, packet: GradientPacket) -> None:
    if buf.grads is None:
        buf.grads = dict(packet.grads)
    else:
        buf.grads = {k: buf.grads[k] + packet.grads[k] for k in buf.grads}
    buf.count += 1
    buf.members.append(packet)


def _apply(state: AggregatorState, task_id: str) -> ApplyEvent:
    buf = state.buffers[task_id]
    if buf.count == 0:
        raise AssertionError(f"apply of empty buffer for {task_id}")
    mean = buf.grads if buf.count == 1 else {k: v / buf.count for k, v in buf.grads.items()}
    deltas = rmsprop_apply(state.optimizers[task_id], mean)
    for name, d in deltas.items():
        state.params[name] = state.params[name] + d
    event = ApplyEvent(
        task_id, buf.version + 1,
        [(p.worker_id, p.step_id) for p in buf.members],
        [buf.version - p.version for p in buf.members],
        [state.global_version - p.global_version for p in buf.members],
        deltas if state.keep_deltas else None,
    )
    buf.applied += buf.count
    buf.version += 1
    state.global_version += 1
    buf.clear()
    return event


# packet outcomes
BUFFERED, APPLIED, STALE, OVER_QUOTA = "buffered", "applied", "stale", "over-quota"


def aggregate(state: AggregatorState, packet: GradientPacket, mode: Mode | str) -> tuple[str, list[ApplyEvent]]:
    """Route one packet; returns its outcome and the applies it triggered (possibly none)."""
    mode = Mode(mode)
    if packet.task_id not in state.buffers:
        raise KeyError(f"packet for unknown task {packet.task_id!r}")
    buf = state.buffers[packet.task_id]
    buf.produced += 1
    if mode is Mode.ASYNC:
        _accumulate(buf, packet)
        return APPLIED, [_apply(state, packet.task_id)]
    if packet.version != buf.version:
        buf.discarded += 1
        return STALE, []
    if buf.count >= buf.quota:
        buf.discarded += 1
        return OVER_QUOTA, []
    _accumulate(buf, packet)
    if mode is Mode.HYBRID:
        if buf.count == buf.quota:
            return APPLIED, [_apply(state, packet.task_id)]
        return BUFFERED, []
    if all(b.count == b.quota for b in state.buffers.values()):
        return APPLIED, [_apply(state, tid) for tid in state.buffers]
    return BUFFERED, []


# ---------------------------------------------------------------------------
# workers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkerTrace:
    """When one worker runs: first start ``offset``, then step k takes
    ``latencies[k % len]`` and is followed by ``gap`` idle time."""
    worker_id: int
    task_id: str
    slot: int
    latencies: tuple[float, ...]
    offset: float = 0.0
    gap: float = 0.0

    def __post_init__(self):
        if not self.latencies or min(self.latencies) <= 0:
            raise ValueError(f"worker {self.worker_id}: latencies must be positive")
        if self.offset < 0 or self.gap < 0:
            raise ValueError(f"worker {self.worker_id}: offset and gap must be >= 0")

    def latency(self, step: int) -> float:
        return self.latencies[step % len(self.latencies)]


def build_traces(cfg: ExperimentConfig, length: int = 64) -> list[WorkerTrace]:
    """Seeded latency traces from each task's worker settings.

    The last ``slow_workers`` slots of a task run ``slow_factor`` times slower.
    """
    traces, wid = [], 0
    for entry in cfg.tasks:
        tid = entry.spec.task_id
        for slot in range(entry.workers):
            base = entry.latency * (entry.slow_factor if slot >= entry.workers - entry.slow_workers else 1.0)
            rng = stream(cfg.seed, "latency", tid, slot)
            lat = base * (1.0 + entry.latency_jitter * rng.uniform(-1.0, 1.0, length))
            traces.append(WorkerTrace(wid, tid, slot, tuple(float(x) for x in lat)))
            wid += 1
    return traces


def round_robin_traces(task_ids: list[str], tau: float = 1.0) -> list[WorkerTrace]:
    """One worker per task taking turns, so exactly one step is in flight at a time."""
    n = len(task_ids)
    return [WorkerTrace(i, t, 0, (tau,), offset=i * tau, gap=(n - 1) * tau) for i, t in enumerate(task_ids)]


def slow_fast_traces(task_id: str, fast: float = 1.0, slow: float = 3.5) -> list[WorkerTrace]:
    """Two workers on one task, one of them markedly slower."""
    return [WorkerTrace(0, task_id, 0, (fast,)), WorkerTrace(1, task_id, 1, (slow,))]


def initial_params(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    """Seeded initial trunk, heads and (for lasso tasks) beta rows."""
    params = init_trunk(cfg.trunk, stream(cfg.seed, "init", "trunk"))
    for entry in cfg.tasks:
        spec = entry.spec
        params.update(init_head(spec, cfg.trunk, stream(cfg.seed, "init", "head", spec.task_id)))
        if spec.lasso:
            rng = stream(cfg.seed, "init", "alpha", spec.task_id)
            params[alpha_param_name("pretrain", spec.task_id)] = rng.uniform(-1.0, 1.0, cfg.trunk.units)
    return params


def batch_rng(seed: int, task_id: str, slot: int, step: int) -> np.random.Generator:
    return stream(seed, "batch", task_id, slot, step)


def worker_compute(cfg: ExperimentConfig, spec: TaskSpec, worker_id: int, step_id: int, batch,
                   snapshot: dict[str, np.ndarray], version: int, global_version: int = 0) -> GradientPacket:
    """Gradients of one task's loss at a parameter snapshot."""
    lam = cfg.lasso_lambda if spec.lasso else 0.0
    dtype = np.float32 if cfg.precision == 32 else np.float64
    g, loss = build_task_graph(spec, batch, snapshot, cfg.trunk, lam=lam, dtype=dtype)
    grads = {k: np.asarray(v, dtype=np.float64) for k, v in param_grads(g, loss).items()}
    return GradientPacket(spec.task_id, worker_id, version, step_id, grads, g.value(loss).item(), global_version)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    mode: str
    checkpoints: list[Checkpoint]
    applies: list[ApplyEvent]
    trajectory: list[tuple[str, int, str]]  # (task, version, params digest) after each apply
    final: Checkpoint
    buffers: dict[str, TaskBuffer]
    losses: list[tuple[str, float]]
    steps: int = 0
    cost: float = 0.0


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


class _Recorder:
    """Shared bookkeeping of cost, checkpoint ticks, stop rule and trajectory."""

    def __init__(self, cfg: ExperimentConfig, state: AggregatorState, mode: str, record_params: bool):
        self.cfg, self.state, self.mode = cfg, state, mode
        self.cost, self.steps, self.tick = 0.0, 0, 1
        self.checkpoints: list[Checkpoint] = []
        self.applies: list[ApplyEvent] = []
        self.trajectory: list[tuple[str, int, str]] = []
        self.losses: list[tuple[str, float]] = []
        self.record_params = record_params
        self.param_history: list[dict[str, np.ndarray]] = []

    def snapshot(self, rng_state: dict, time: float) -> Checkpoint:
        s = self.state
        return Checkpoint(
            params=dict(s.params),
            optimizer={t: dict(o.s) for t, o in s.optimizers.items()},
            rng_state=rng_state,
            cost=self.cost,
            meta={
                "experiment-id": self.cfg.experiment_id,
                "seed": self.cfg.seed,
                "mode": self.mode,
                "index": len(self.checkpoints),
                "steps": self.steps,
                "time": time,
                "versions": {t: b.version for t, b in s.buffers.items()},
                "packets": {t: [b.produced, b.applied, b.count, b.discarded] for t, b in s.buffers.items()},
            },
        )

    def on_packet(self, packet: GradientPacket, step_cost: float):
        self.cost += step_cost
        self.losses.append((packet.task_id, packet.loss))

    def on_applies(self, events: list[ApplyEvent]):
        for ev in events:
            self.applies.append(ev)
            self.steps += 1
            self.trajectory.append((ev.task_id, ev.version, params_digest(self.state.params)))
            if self.record_params:
                self.param_history.append(dict(self.state.params))

    def maybe_checkpoint(self, rng_state: Callable[[], dict], time: float):
        interval = self.cfg.checkpoint_interval
        emitted = False
        while self.cost >= self.tick * interval:
            self.tick += 1
            emitted = True
        if emitted:
            self.checkpoints.append(self.snapshot(rng_state(), time))

    def done(self) -> bool:
        cfg = self.cfg
        if cfg.max_steps > 0 and self.steps >= cfg.max_steps:
            return True
        if cfg.max_cost > 0 and self.cost >= cfg.max_cost:
            return True
        return cfg.max_steps <= 0 and cfg.max_cost <= 0

    def result(self, final: Checkpoint) -> RunResult:
        return RunResult(self.mode, self.checkpoints, self.applies, self.trajectory, final,
                         self.state.buffers, self.losses, self.steps, self.cost)


def _new_state(cfg: ExperimentConfig, quotas: dict[str, int], keep_deltas: bool) -> AggregatorState:
    return AggregatorState(
        params=initial_params(cfg),
        buffers={t.spec.task_id: TaskBuffer(quotas[t.spec.task_id]) for t in cfg.tasks},
        optimizers={t.spec.task_id: OptimizerState.from_config(cfg.optimizer) for t in cfg.tasks},
        keep_deltas=keep_deltas,
    )


_FINISH, _START = 0, 1  # finishes sort before starts at equal times


@dataclass
class _Worker:
    trace: WorkerTrace
    entry: TaskEntry
    step: int = 0
    snapshot: dict | None = None
    version: int = 0
    global_version: int = 0
    waiting: bool = False


def run_training(cfg: ExperimentConfig, traces: list[WorkerTrace] | None = None, mode: Mode | str | None = None,
                 keep_deltas: bool = False, record_params: bool = False,
                 on_event: Callable[[AggregatorState], None] | None = None) -> RunResult:
    """Simulate a run; checkpoints land at every multiple of the checkpoint interval."""
    mode = Mode(mode or cfg.mode)
    traces = traces if traces is not None else build_traces(cfg)
    entries = {t.spec.task_id: t for t in cfg.tasks}
    for tr in traces:
        if tr.task_id not in entries:
            raise ValueError(f"worker {tr.worker_id} assigned to unknown task {tr.task_id!r}")
    per_task = Counter(tr.task_id for tr in traces)
    missing = [t for t in entries if per_task[t] == 0]
    if missing:
        raise ValueError(f"tasks without workers: {missing}")
    quotas = {}
    for tid, e in entries.items():
        # quota defaults to every non-backup worker actually assigned to the task
        quotas[tid] = e.quota or per_task[tid] - e.backups
        if not 1 <= quotas[tid] <= per_task[tid]:
            raise ValueError(f"task {tid}: quota {quotas[tid]} outside 1..{per_task[tid]}")
    state = _new_state(cfg, quotas, keep_deltas)
    rec = _Recorder(cfg, state, mode.value, record_params)
    workers = {tr.worker_id: _Worker(tr, entries[tr.task_id]) for tr in traces}

    def rng_state():
        return {"seed": cfg.seed, "worker-steps": {str(w): wk.step for w, wk in sorted(workers.items())}}

    rec.checkpoints.append(rec.snapshot(rng_state(), 0.0))
    heap: list[tuple[float, int, int, int]] = []
    seq = 0

    def push(time, kind, wid):
        nonlocal seq
        heapq.heappush(heap, (time, kind, wid, seq))
        seq += 1

    for wid, wk in workers.items():
        push(wk.trace.offset, _START, wid)
    now = 0.0
    while heap and not rec.done():
        now, kind, wid, _ = heapq.heappop(heap)
        wk = workers[wid]
        if kind == _START:
            wk.snapshot = dict(state.params)
            wk.version = state.buffers[wk.trace.task_id].version
            wk.global_version = state.global_version
            push(now + wk.trace.latency(wk.step), _FINISH, wid)
            continue
        spec = wk.entry.spec
        batch = sample_batch(spec, batch_rng(cfg.seed, spec.task_id, wk.trace.slot, wk.step))
        packet = worker_compute(cfg, spec, wid, wk.step, batch, wk.snapshot, wk.version, wk.global_version)
        wk.step += 1
        wk.snapshot = None
        rec.on_packet(packet, spec.step_cost)
        outcome, events = aggregate(state, packet, mode)
        rec.on_applies(events)
        if outcome in (BUFFERED, OVER_QUOTA) and mode is not Mode.ASYNC:
            wk.waiting = True
        else:
            push(now + wk.trace.gap, _START, wid)
        # workers parked on an applied task re-snapshot right away
        applied = {ev.task_id for ev in events}
        for other_id, other in workers.items():
            if other.waiting and other.trace.task_id in applied:
                other.waiting = False
                push(now + other.trace.gap, _START, other_id)
        if on_event is not None:
            on_event(state)
        rec.maybe_checkpoint(rng_state, now)
    final = rec.snapshot(rng_state(), now)
    return rec.result(final)


def serial_reference(cfg: ExperimentConfig, keep_deltas: bool = False, record_params: bool = False) -> RunResult:
    """Single-threaded loop: tasks in config order, one batch each, applied at once."""
    state = _new_state(cfg, {t: 1 for t in cfg.task_ids}, keep_deltas)
    rec = _Recorder(cfg, state, "serial", record_params)
    steps = {t: 0 for t in cfg.task_ids}

    def rng_state():
        return {"seed": cfg.seed, "task-steps": dict(steps)}

    rec.checkpoints.append(rec.snapshot(rng_state(), 0.0))
    while not rec.done():
        for wid, entry in enumerate(cfg.tasks):
            spec = entry.spec
            k = steps[spec.task_id]
            batch = sample_batch(spec, batch_rng(cfg.seed, spec.task_id, 0, k))
            packet = worker_compute(cfg, spec, wid, k, batch, dict(state.params),
                                    state.buffers[spec.task_id].version, state.global_version)
            steps[spec.task_id] += 1
            rec.on_packet(packet, spec.step_cost)
            _, events = aggregate(state, packet, Mode.HYBRID)
            rec.on_applies(events)
            rec.maybe_checkpoint(rng_state, float(rec.steps))
            if rec.done():
                break
    return rec.result(rec.snapshot(rng_state(), float(rec.steps)))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class TaskStaleness:
    distribution: dict[int, int]
    global_distribution: dict[int, int]
    produced: int
    applied: int
    discarded: int

    @property
    def max(self) -> int:
        return max(self.distribution, default=0)

    @property
    def mean(self) -> float:
        n = sum(self.distribution.values())
        return sum(k * v for k, v in self.distribution.items()) / n if n else 0.0


@dataclass
class StalenessReport:
    mode: str
    tasks: dict[str, TaskStaleness]

    @property
    def max_staleness(self) -> int:
        return max((t.max for t in self.tasks.values()), default=0)

    @property
    def discarded(self) -> int:
        return sum(t.discarded for t in self.tasks.values())

    def records(self) -> list[dict]:
        return [
            {"task-id": tid, "mode": self.mode, "max-staleness": t.max, "mean-staleness": t.mean,
             "staleness": {str(k): v for k, v in sorted(t.distribution.items())},
             "cross-task-staleness": {str(k): v for k, v in sorted(t.global_distribution.items())},
             "produced": t.produced, "applied": t.applied, "discarded": t.discarded}
            for tid, t in self.tasks.items()
        ]


def staleness_report(run: RunResult) -> StalenessReport:
    """Per task: how many versions behind each applied packet was, plus discards."""
    tasks = {}
    for tid, buf in run.buffers.items():
        within, cross = Counter(), Counter()
        for ev in run.applies:
            if ev.task_id == tid:
                within.update(ev.staleness)
                cross.update(ev.global_staleness)
        tasks[tid] = TaskStaleness(dict(sorted(within.items())), dict(sorted(cross.items())),
                                   buf.produced, buf.applied, buf.discarded)
    return StalenessReport(run.mode, tasks)


def iter_checkpoints(run: RunResult) -> Iterator[Checkpoint]:
    yield from run.checkpoints
