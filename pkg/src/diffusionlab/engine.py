"""Noise schedule, forward noising, deterministic DDIM stepping, classifier-free
guidance, guidance-dropping policies and sampling trajectories.

Sampled steps are addressed by rank r in 1..S, where rank S is the first
(noisiest) step of generation and maps to timestep ``ddim_steps[r - 1]``.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (AccountingError, ConfigurationError, OrderingError, ParameterError,
                     ShapeError)
from .prompts import TokenSequence, null_condition

FULL, DROP_LATE, DROP_EARLY, SWITCH = "full", "drop_late", "drop_early", "switch"
MODES = (FULL, DROP_LATE, DROP_EARLY, SWITCH)
DEFAULT_W = 7.5


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T_train: int
    alpha_bar: np.ndarray
    ddim_steps: tuple
    beta_min: float = 1e-4
    beta_max: float = 0.02

    @property
    def S(self):
        return len(self.ddim_steps)

    def t_of_rank(self, rank):
        return self.ddim_steps[rank - 1]

    def prev_of_rank(self, rank):
        return self.ddim_steps[rank - 2] if rank > 1 else 0

    def params(self):
        return dict(T_train=self.T_train, beta_min=self.beta_min, beta_max=self.beta_max,
                    S=self.S)


def build_schedule(T_train=1000, beta_min=1e-4, beta_max=0.02, S=50) -> NoiseSchedule:
    """Linear-beta schedule and the uniform DDIM subsequence {T/S, 2T/S, ..., T}."""
    if not 0 < beta_min < beta_max < 1:
        raise ParameterError("need 0 < beta_min < beta_max < 1")
    if not 1 <= S <= T_train or T_train % S:
        raise ParameterError(f"S={S} must lie in [1, T_train] and divide T_train={T_train}")
    betas = np.linspace(beta_min, beta_max, T_train, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    stride = T_train // S
    steps = tuple(range(stride, T_train + 1, stride))
    return NoiseSchedule(T_train, alpha_bar, steps, float(beta_min), float(beta_max))


def forward_noise(x0, t, eps, sched):
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    if not 0 <= t <= sched.T_train:
        raise ParameterError(f"t={t} outside [0, {sched.T_train}]")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(x_t, t, t_prev, eps_hat, sched):
    """Deterministic DDIM update from t to t_prev (t_prev == t is the identity)."""
    if t_prev > t:
        raise OrderingError(f"t_prev={t_prev} must not exceed t={t}")
    if t_prev == t:
        return x_t
    x_t, eps_hat = np.asarray(x_t), np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"x_t {x_t.shape} and eps_hat {eps_hat.shape} differ")
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    x0_hat = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    return out.astype(x_t.dtype, copy=False)


# ---------------------------------------------------------------------------
# guidance

@dataclass
class EvalCounter:
    cond: int = 0
    uncond: int = 0

    @property
    def total(self):
        return self.cond + self.uncond


@dataclass
class GuidedOutput:
    eps: np.ndarray
    eps_uncond: np.ndarray
    eps_cond: np.ndarray | None
    attn_uncond: np.ndarray
    attn_cond: np.ndarray | None
    cond_evals: int
    uncond_evals: int


def _batched_null(null, x):
    return null if np.ndim(x) == 3 else [null] * np.shape(x)[0]


def guided_predict(model, t, x, cond, w, null=None) -> GuidedOutput:
    """Classifier-free guidance keeping both branches; w == 0 skips the
    conditional forward pass entirely."""
    null = null or null_condition()
    eps_u, attn_u = model.predict_noise(t, x, _batched_null(null, x))
    if w == 0:
        return GuidedOutput(eps_u, eps_u, None, attn_u, None, 0, 1)
    eps_c, attn_c = model.predict_noise(t, x, cond)
    eps = eps_u + w * (eps_c - eps_u)
    return GuidedOutput(eps, eps_u, eps_c, attn_u, attn_c, 1, 1)


def cfg_predict(model, t, x, cond, w=DEFAULT_W, null=None, counter=None):
    out = guided_predict(model, t, x, cond, w, null)
    if counter is not None:
        counter.cond += out.cond_evals
        counter.uncond += out.uncond_evals
    return out.eps


@dataclass(frozen=True)
class GuidancePolicy:
    w: float = DEFAULT_W
    a: int = 0
    mode: str = FULL

    def validate(self, S):
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}")
        if not 0 <= self.a <= S:
            raise ParameterError(f"drop boundary a={self.a} outside [0, {S}]")
        if self.w < 0:
            raise ParameterError("guidance scale must be >= 0")
        return self

    def branch(self, rank):
        """(guidance scale, use_second_condition) at sampled-step rank."""
        if self.mode == FULL:
            return self.w, False
        # the last ``a`` sampled steps are ranks 1..a
        if self.mode == DROP_LATE:
            return (self.w if rank > self.a else 0.0), False
        if self.mode == DROP_EARLY:
            return (self.w if rank <= self.a else 0.0), False
        return self.w, rank <= self.a


def staged_guided(model, rank, x, cond, policy, sched, cond2=None, null=None):
    policy.validate(sched.S)
    if not 1 <= rank <= sched.S:
        raise ParameterError(f"rank {rank} outside [1, {sched.S}]")
    w, second = policy.branch(rank)
    if second:
        if cond2 is None:
            raise ConfigurationError("switch mode needs a second condition")
        cond = cond2
    return guided_predict(model, sched.t_of_rank(rank), x, cond, w, null)


def staged_predict(model, rank, x, cond, policy, sched, cond2=None, null=None, counter=None):
    """Noise prediction under a guidance-dropping policy at sampled-step rank."""
    out = staged_guided(model, rank, x, cond, policy, sched, cond2, null)
    if counter is not None:
        counter.cond += out.cond_evals
        counter.uncond += out.uncond_evals
    return out.eps


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class StepRecord:
    """One recorded latent. ``x_t`` sits at timestep ``t``; for step records it
    was produced by the prediction made at ``t_eval`` (sampled-step ``rank``).
    The initial-noise record has rank 0 and no predictions."""
    rank: int
    t: int
    x_t: np.ndarray | None
    t_eval: int | None = None
    eps_hat: np.ndarray | None = None
    eps_cond: np.ndarray | None = None
    eps_uncond: np.ndarray | None = None
    attn_cond: np.ndarray | None = None
    attn_uncond: np.ndarray | None = None
    cond_evals: int = 0
    uncond_evals: int = 0

    @property
    def attention(self):
        """Attention of the conditional pass when it ran, else the unconditional one."""
        return self.attn_cond if self.attn_cond is not None else self.attn_uncond


@dataclass
class Trajectory:
    records: list
    x0: np.ndarray
    sched: NoiseSchedule
    policy: GuidancePolicy
    seed: int
    w: float = DEFAULT_W
    tags: tuple | None = None
    meta: dict = field(default_factory=dict)

    @property
    def steps(self):
        return self.records[1:]

    @property
    def cond_evals(self):
        return sum(r.cond_evals for r in self.records)

    @property
    def uncond_evals(self):
        return sum(r.uncond_evals for r in self.records)

    @property
    def total_evals(self):
        return self.cond_evals + self.uncond_evals


def stream_seed(master_seed, run_index):
    """Per-run RNG seed: SeedSequence entropy [master_seed, run_index]."""
    return np.random.SeedSequence([int(master_seed), int(run_index)])


def initial_noise(shape, seed, batch=None, dtype=np.float32):
    """Standard Gaussian start. For a batch, item i uses stream_seed(seed, i)."""
    if batch is None:
        return np.random.default_rng(stream_seed(seed, 0)).standard_normal(shape).astype(dtype)
    return np.stack([np.random.default_rng(stream_seed(seed, i)).standard_normal(shape)
                     for i in range(batch)]).astype(dtype)


def sample_trajectory(model, sched, policy, cond, cond2=None, seed=0, null=None, x_init=None,
                      shape=None, keep_latents=True):
    """Run S guided DDIM steps from seeded Gaussian noise.

    ``cond`` is a TokenSequence (single run) or a list of them (batch of runs,
    item i seeded by ``stream_seed(seed, i)``). Every step's latent,
    predictions, attention and forward-pass counts are recorded.
    """
    policy.validate(sched.S)
    if (policy.mode == SWITCH) != (cond2 is not None):
        raise ConfigurationError("cond2 must be given exactly when mode is 'switch'")
    batch = None if isinstance(cond, TokenSequence) else len(cond)
    if shape is None:
        hy = model.hyper
        shape = (hy["channels"], hy["M"], hy["N"])
    x = initial_noise(shape, seed, batch) if x_init is None else np.array(x_init, np.float32)
    records = [StepRecord(0, sched.T_train, x.copy())]
    for rank in range(sched.S, 0, -1):
        t, t_prev = sched.t_of_rank(rank), sched.prev_of_rank(rank)
        out = staged_guided(model, rank, x, cond, policy, sched, cond2, null)
        x = ddim_step(x, t, t_prev, out.eps, sched)
        records.append(StepRecord(rank, t_prev, x.copy() if keep_latents else None, t,
                                  out.eps, out.eps_cond, out.eps_uncond, out.attn_cond,
                                  out.attn_uncond, out.cond_evals, out.uncond_evals))
    tags = cond.tags if isinstance(cond, TokenSequence) else cond[0].tags
    return Trajectory(records, x, sched, policy, seed, policy.w, tags)


def eval_savings(traj, baseline):
    """Fraction of denoiser forward passes saved relative to ``baseline``."""
    if baseline.total_evals == 0:
        raise AccountingError("baseline executed no forward passes")
    return (baseline.total_evals - traj.total_evals) / baseline.total_evals


def export_trajectory(traj, directory):
    """Write meta.json, manifest.csv and one little-endian float32 ``x_{t}.f32``
    per recorded latent, from ``x_{T}.f32`` down to the terminal ``x_0.f32``."""
    os.makedirs(directory, exist_ok=True)
    meta = dict(schedule=traj.sched.params(), policy=asdict(traj.policy), seed=traj.seed,
                cond_evals=traj.cond_evals, uncond_evals=traj.uncond_evals,
                shape=list(np.shape(traj.x0)), dtype="<f4", **traj.meta)
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step_rank", "t", "cond_evals", "uncond_evals"])
        for rec in traj.records:
            writer.writerow([rec.rank, rec.t, rec.cond_evals, rec.uncond_evals])
            if rec.x_t is not None:
                np.asarray(rec.x_t, dtype="<f4").tofile(os.path.join(directory, f"x_{rec.t}.f32"))
