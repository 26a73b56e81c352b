"""Episodic meta-training of the joint CVAE + conditional GAN.

Each outer step samples a batch of tasks, adapts a copy of the parameters on
the pooled support losses with plain gradient steps (descent for the
encoder/decoder, ascent for the critic), scores the adapted copy on the query
sets, and moves the original parameters with the outer optimizer using the
query gradients taken at the adapted point (first-order meta-gradient).

Random streams, all derived from the run seed with :func:`make_rng`:
``(seed, 0)`` parameter init, ``(seed, 1)`` task sampling, ``(seed, 2)``
loss noise. Inside a step, noise is consumed task by task in index order,
the encoder/decoder objective before the critic objective.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import genmodel as gm
from . import losses
from .episodes import DISJOINT, STANDARD, ClassPool, ConfigError, EpisodeConfig, Task, sample_task_batch
from .neural import OptimizerState, make_rng, optimizer_step, sgd_step

EG_KEYS = ("theta_e", "theta_g")


class TrainingDivergence(FloatingPointError):
    def __init__(self, message: str, step: int, trace: list):
        super().__init__(message)
        self.step = step
        self.trace = trace


@dataclass(frozen=True)
class MetaConfig:
    eta1: float = 1e-4
    eta2: float = 1e-4
    inner_steps: int = 3
    task_batch_size: int = 4
    outer_steps: int = 2000
    outer_optimizer: str = "adam"
    outer_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_adv: float = 1.0
    literal_eq4: bool = False
    dropout: bool = True
    meta_enabled: bool = True
    meta_on_generator: bool = True
    meta_on_discriminator: bool = True
    disjoint_tasks: bool = True
    cvae_only: bool = False
    first_order: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("eta1", "eta2"):
            v = getattr(self, name)
            # zero switches adaptation off; otherwise stay in the searched range
            if not (v == 0.0 or 1e-8 <= v <= 1e-1):
                raise ConfigError(f"{name}={v} is outside [1e-8, 1e-1]")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be at least 1")
        if self.task_batch_size < 1:
            raise ConfigError("task_batch_size must be at least 1")
        if self.outer_steps < 0:
            raise ConfigError("outer_steps must be non-negative")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"outer_optimizer must be 'adam' or 'sgd', got {self.outer_optimizer!r}")
        if not self.first_order:
            raise ConfigError("only the first-order meta-gradient is implemented (first_order=True)")

    @property
    def adversarial(self) -> bool:
        return not self.cvae_only

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.cvae_only else self.lambda_adv

    @property
    def split_mode(self) -> str:
        return DISJOINT if self.disjoint_tasks else STANDARD

    def to_dict(self) -> dict:
        return asdict(self)


LossFn = Callable[[gm.ModelConfig, gm.ModelParams, np.ndarray, np.ndarray, np.random.Generator], losses.LossValue]


@dataclass
class Objectives:
    """The two per-task objectives; swappable so the loop can be tested on surrogates."""
    vg: LossFn
    d: LossFn


def default_objectives(meta: MetaConfig) -> Objectives:
    lam = meta.effective_lambda

    def vg(cfg, params, x, a, rng):
        return losses.joint_vg_loss(cfg, params, x, a, rng, lambda_adv=lam, dropout=meta.dropout,
                                    literal_eq4=meta.literal_eq4)

    def d(cfg, params, x, a, rng):
        return losses.disc_loss(cfg, params, x, a, rng, dropout=meta.dropout)

    return Objectives(vg, d)


@dataclass
class TrainState:
    params: gm.ModelParams
    optimizers: dict[str, OptimizerState]
    step: int = 0
    trace: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    task_rng: Optional[np.random.Generator] = None
    noise_rng: Optional[np.random.Generator] = None


def make_optimizers(meta: MetaConfig, params: gm.ModelParams) -> dict[str, OptimizerState]:
    out = {}
    for name, arr in params.as_dict().items():
        if meta.outer_optimizer == "adam":
            out[name] = OptimizerState.adam(arr.size, meta.outer_lr, meta.beta1, meta.beta2, meta.adam_eps)
        else:
            out[name] = OptimizerState.sgd(meta.outer_lr)
    return out


def _batch_mean(fn: LossFn, cfg, params, sets: Sequence[tuple[np.ndarray, np.ndarray]], rng, keys):
    """Mean loss and gradients over tasks, reduced in task order."""
    total = 0.0
    grads = None
    for x, a in sets:
        lv = fn(cfg, params, x, a, rng)
        total += lv.value
        if grads is None:
            grads = {k: lv.grads[k].copy() for k in keys}
        else:
            for k in keys:
                grads[k] += lv.grads[k]
    n = len(sets)
    return total / n, {k: g / n for k, g in grads.items()}


def _check_finite(value: float, grads: dict, what: str, step: int, trace: list) -> None:
    if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDivergence(f"non-finite {what} at step {step}", step, list(trace))


def _inner_adapt(cfg, meta, params, supports, rng, objectives, step=0, trace=()):
    adapted = params.copy()
    first_vg = first_d = math.nan
    adapt_eg = meta.meta_on_generator
    adapt_d = meta.meta_on_discriminator and meta.adversarial
    for s in range(meta.inner_steps):
        if adapt_eg:
            vg, g_eg = _batch_mean(objectives.vg, cfg, adapted, supports, rng, EG_KEYS)
            _check_finite(vg, g_eg, "inner VG loss", step, trace)
        if adapt_d:
            dv, g_d = _batch_mean(objectives.d, cfg, adapted, supports, rng, ("theta_d",))
            _check_finite(dv, g_d, "inner D loss", step, trace)
        if s == 0:
            first_vg = vg if adapt_eg else math.nan
            first_d = dv if adapt_d else math.nan
        if adapt_eg:
            adapted.theta_e = sgd_step(adapted.theta_e, g_eg["theta_e"], meta.eta1, "descend")
            adapted.theta_g = sgd_step(adapted.theta_g, g_eg["theta_g"], meta.eta1, "descend")
        if adapt_d:
            adapted.theta_d = gm.clip_weights(sgd_step(adapted.theta_d, g_d["theta_d"], meta.eta2, "ascend"),
                                              cfg.clip_value)
    return adapted, first_vg, first_d


def inner_adapt(cfg: gm.ModelConfig, meta: MetaConfig, params: gm.ModelParams,
                supports: Sequence[tuple[np.ndarray, np.ndarray]], rng: np.random.Generator,
                objectives: Optional[Objectives] = None) -> gm.ModelParams:
    """Adapted copy of ``params`` after ``meta.inner_steps`` pooled support steps."""
    if not supports:
        raise ValueError("inner_adapt needs at least one task")
    return _inner_adapt(cfg, meta, params, supports, rng, objectives or default_objectives(meta))[0]


def outer_update(cfg: gm.ModelConfig, meta: MetaConfig, state: TrainState, tasks: Sequence[Task],
                 objectives: Optional[Objectives] = None) -> TrainState:
    """One global step; returns a new state and leaves ``state`` untouched."""
    if not tasks:
        raise ValueError("outer_update needs at least one task")
    objectives = objectives or default_objectives(meta)
    rng = state.noise_rng
    step = state.step + 1
    params = state.params
    if meta.meta_enabled:
        adapted, in_vg, in_d = _inner_adapt(cfg, meta, params, [t.support for t in tasks], rng, objectives,
                                            step, state.trace)
    else:
        adapted, in_vg, in_d = params, math.nan, math.nan

    queries = [t.query for t in tasks]
    out_vg, g_eg = _batch_mean(objectives.vg, cfg, adapted, queries, rng, EG_KEYS)
    _check_finite(out_vg, g_eg, "outer VG loss", step, state.trace)
    out_d = math.nan
    if meta.adversarial:
        out_d, g_d = _batch_mean(objectives.d, cfg, adapted, queries, rng, ("theta_d",))
        _check_finite(out_d, g_d, "outer D loss", step, state.trace)

    new_params = params.copy()
    opts = dict(state.optimizers)
    for k in EG_KEYS:
        new_val, opts[k] = optimizer_step(opts[k], getattr(params, k), g_eg[k], "descend")
        setattr(new_params, k, new_val)
    if meta.adversarial:
        new_d, opts["theta_d"] = optimizer_step(opts["theta_d"], params.theta_d, g_d["theta_d"], "ascend")
        new_params.theta_d = gm.clip_weights(new_d, cfg.clip_value)
    trace = state.trace + [(step, in_vg, in_d, out_vg, out_d)]
    if not new_params.all_finite():
        raise TrainingDivergence(f"non-finite parameters after step {step}", step, trace)
    return TrainState(new_params, opts, step, trace, state.task_rng, state.noise_rng)


def init_state(cfg: gm.ModelConfig, meta: MetaConfig, seed: int,
               params: Optional[gm.ModelParams] = None) -> TrainState:
    if params is None:
        params = gm.init_model(cfg, make_rng(seed, 0))
    return TrainState(params, make_optimizers(meta, params), 0, [], make_rng(seed, 1), make_rng(seed, 2))


def train(cfg: gm.ModelConfig, meta: MetaConfig, pool: ClassPool, seed: int,
          episode: EpisodeConfig = EpisodeConfig(), objectives: Optional[Objectives] = None,
          params: Optional[gm.ModelParams] = None,
          on_checkpoint: Optional[Callable[[TrainState], None]] = None,
          on_step: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Run ``meta.outer_steps`` outer updates from a seeded initialization."""
    state = init_state(cfg, meta, seed, params)
    objectives = objectives or default_objectives(meta)
    for _ in range(meta.outer_steps):
        tasks = sample_task_batch(pool, episode, state.task_rng, meta.task_batch_size, meta.split_mode)
        state = outer_update(cfg, meta, state, tasks, objectives)
        if on_step is not None:
            on_step(state)
        if on_checkpoint is not None and meta.checkpoint_every and state.step % meta.checkpoint_every == 0:
            on_checkpoint(state)
    return state


TRACE_HEADER = "step\tinner_vg\tinner_d\touter_vg\touter_d"


def format_trace_line(row: tuple) -> str:
    step, *vals = row
    return f"{step}\t" + "\t".join(repr(float(v)) for v in vals)


def write_trace(path, trace: Sequence[tuple]) -> None:
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in trace:
            fh.write(format_trace_line(row) + "\n")


def read_trace(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        step, *vals = line.split("\t")
        rows.append((int(step), *map(float, vals)))
    return rows
