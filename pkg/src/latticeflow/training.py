"""Unrolled surrogate training and rollout evaluation against solver truth.

Training samples are windows of unroll_steps + 1 consecutive dataset
frames from a single run. The start frame is encoded, the latent state is
stepped unroll_steps times, every decoded step is scored against its true
frame with squared error plus a weighted gradient difference term, and
the per-step losses are averaged. Gradients flow through the whole chain
including the encoders; all parameters train jointly with Adam.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import lbm
from .autodiff import Tensor, add, gdl, mse, no_grad, scale
from .errors import (
    InvalidInputError,
    NumericError,
    NumericFailure,
    TrainingDivergedError,
)
from .nn import adam_step, zero_grad
from .scenes import DatasetRecord
from .surrogate import Surrogate


@dataclass
class TrainConfig:
    unroll_steps: int = 5
    lambda_gdl: float = 0.2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    max_steps: int = 500
    seed: int = 0
    eval_interval: int = 100

    def __post_init__(self):
        if self.unroll_steps < 1:
            raise InvalidInputError(f"unroll_steps must be >= 1, got {self.unroll_steps}")
        if self.lambda_gdl < 0:
            raise InvalidInputError(f"lambda_gdl must be >= 0, got {self.lambda_gdl}")


@dataclass
class TrainSample:
    """A batched window: masks (n,nx,ny,1) and frames (unroll+1,n,nx,ny,9)."""

    masks: np.ndarray
    frames: np.ndarray


@dataclass
class TrainStepRecord:
    step: int
    total: float
    mse: float
    gdl: float
    wall_seconds: float


def sample_windows(records: list[DatasetRecord], unroll_steps: int) -> list[tuple[int, int]]:
    """All valid (run, start-frame) pairs; windows never span two runs."""
    pairs = []
    for r, record in enumerate(records):
        for start in range(len(record.frames) - unroll_steps):
            pairs.append((r, start))
    return pairs


def gather_sample(
    records: list[DatasetRecord], picks: list[tuple[int, int]], unroll_steps: int
) -> TrainSample:
    masks = np.stack([records[r].mask.solid for r, _ in picks]).astype(np.float32)
    frames = np.stack(
        [
            np.stack([records[r].frames[s + t] for r, s in picks])
            for t in range(unroll_steps + 1)
        ]
    ).astype(np.float32)
    return TrainSample(masks=masks, frames=frames)


def unrolled_loss(
    sample: TrainSample, model: Surrogate, cfg: TrainConfig
) -> tuple[Tensor, dict]:
    """Mean over the unroll of (mse + lambda * gdl) against true frames.

    Returns the scalar loss tensor and a components dict whose "mse" and
    "gdl" entries recombine to the loss exactly: loss = mse + lambda*gdl
    evaluated in tensor dtype. With lambda = 0 the loss IS the mse term
    (gdl is still reported, computed outside the graph).
    """
    g = model.encode_flow(Tensor(sample.frames[0]))
    gates = model.encode_boundary(Tensor(sample.masks))
    mse_terms: list[Tensor] = []
    gdl_terms: list[Tensor] = []
    for t in range(1, cfg.unroll_steps + 1):
        try:
            g = model.compress_step(g, gates)
            f_hat = model.decode(g)
        except NumericError as exc:
            raise NumericError(f"unrolled forward diverged at step {t}: {exc}") from exc
        target = Tensor(sample.frames[t])
        mse_terms.append(mse(f_hat, target))
        if cfg.lambda_gdl == 0.0:
            with no_grad():
                gdl_terms.append(gdl(f_hat, target))
        else:
            gdl_terms.append(gdl(f_hat, target))
    mse_mean = mse_terms[0]
    gdl_mean = gdl_terms[0]
    for t in range(1, cfg.unroll_steps):
        mse_mean = add(mse_mean, mse_terms[t])
        gdl_mean = add(gdl_mean, gdl_terms[t])
    mse_mean = scale(mse_mean, 1.0 / cfg.unroll_steps)
    gdl_mean = scale(gdl_mean, 1.0 / cfg.unroll_steps)
    if cfg.lambda_gdl == 0.0:
        loss = mse_mean
    else:
        loss = add(mse_mean, scale(gdl_mean, cfg.lambda_gdl))
    components = {
        "mse": mse_mean.item(),
        "gdl": gdl_mean.item(),
        "mse_steps": [t.item() for t in mse_terms],
        "gdl_steps": [t.item() for t in gdl_terms],
    }
    return loss, components


def train(
    records: list[DatasetRecord],
    cfg: TrainConfig,
    model: Surrogate,
    start_step: int = 0,
    checkpoint_cb=None,
) -> list[TrainStepRecord]:
    """Run Adam for cfg.max_steps optimizer steps; deterministic given seed.

    Windows are reshuffled every epoch with the config seed. A divergence
    guard aborts once the loss exceeds 100x its 10-step moving average.
    checkpoint_cb(step) fires every eval_interval steps.
    """
    if not records:
        raise InvalidInputError("training requires a nonempty dataset")
    windows = sample_windows(records, cfg.unroll_steps)
    if not windows:
        raise InvalidInputError(
            f"no training windows: runs have {len(records[0].frames)} frames, "
            f"need at least {cfg.unroll_steps + 1}"
        )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = model.parameters()
    history: list[TrainStepRecord] = []
    recent: deque[float] = deque(maxlen=10)
    step = start_step
    epoch_order: list[tuple[int, int]] = []
    while step < start_step + cfg.max_steps:
        if len(epoch_order) < cfg.batch_size:
            order = rng.permutation(len(windows))
            epoch_order = [windows[i] for i in order]
        picks, epoch_order = epoch_order[: cfg.batch_size], epoch_order[cfg.batch_size :]
        sample = gather_sample(records, picks, cfg.unroll_steps)
        t0 = time.perf_counter()
        zero_grad(params)
        loss, parts = unrolled_loss(sample, model, cfg)
        loss.backward()
        adam_step(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        step += 1
        total = loss.item()
        history.append(
            TrainStepRecord(
                step=step,
                total=total,
                mse=parts["mse"],
                gdl=parts["gdl"],
                wall_seconds=time.perf_counter() - t0,
            )
        )
        if len(recent) == recent.maxlen:
            guard = 100.0 * (sum(recent) / len(recent))
            if total > guard:
                raise TrainingDivergedError(
                    f"step {step}: loss {total:.6g} exceeds 100x the "
                    f"10-step moving average {guard / 100.0:.6g}"
                )
        recent.append(total)
        if checkpoint_cb is not None and step % cfg.eval_interval == 0:
            checkpoint_cb(step)
    return history


# --- evaluation ----------------------------------------------------------------


@dataclass
class RolloutReport:
    """Per-run, per-step comparison series; step t is the t-th latent step."""

    horizon: int
    mse: np.ndarray  # (runs, horizon)
    div_generated: np.ndarray  # (runs, horizon)
    div_true: np.ndarray  # (runs, horizon)
    drag_generated: np.ndarray  # (runs, horizon, 2)
    drag_true: np.ndarray
    flux_generated: np.ndarray
    flux_true: np.ndarray
    failure_steps: list[int | None]

    SERIES = (
        "mse",
        "div_generated",
        "div_true",
        "drag_generated",
        "drag_true",
        "flux_generated",
        "flux_true",
    )

    def aggregate(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Cross-run mean and standard deviation of one series."""
        series = getattr(self, name)
        return series.mean(axis=0), series.std(axis=0)


def _state_metrics(f: np.ndarray, mask, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    state = lbm.LatticeState(np.asarray(f, dtype=np.float64))
    fields = lbm.macroscopics(state)
    div = lbm.mean_abs_divergence(fields.u, mask)
    if mask.solid_bool.any():
        # stored frames are post-step; the momentum-exchange sum wants the
        # pre-stream populations (collision leaves div/flux moments alone)
        drag = lbm.drag(lbm.collide(state, tau), mask)
    else:
        drag = np.zeros(2)
    flux = lbm.flux_average(state, mask)
    return div, drag, flux


def evaluate(
    model: Surrogate | None, records: list[DatasetRecord], horizon: int
) -> RolloutReport:
    """Roll the surrogate from frame 0 of every run and score it per step.

    With model=None the true frames stand in for the predictions (a
    self-check: error series are identically zero). A run whose rollout
    goes non-finite records its failure step and NaN series.
    """
    if not records:
        raise InvalidInputError("evaluation requires a nonempty dataset")
    available = min(len(r.frames) for r in records) - 1
    if horizon > available:
        raise InvalidInputError(
            f"horizon {horizon} exceeds available frames ({available} steps after frame 0)"
        )
    runs = len(records)
    report = RolloutReport(
        horizon=horizon,
        mse=np.full((runs, horizon), np.nan),
        div_generated=np.full((runs, horizon), np.nan),
        div_true=np.full((runs, horizon), np.nan),
        drag_generated=np.full((runs, horizon, 2), np.nan),
        drag_true=np.full((runs, horizon, 2), np.nan),
        flux_generated=np.full((runs, horizon, 2), np.nan),
        flux_true=np.full((runs, horizon, 2), np.nan),
        failure_steps=[None] * runs,
    )
    for r, record in enumerate(records):
        if model is not None:
            try:
                result = model.rollout(record.frames[0], record.mask.solid, horizon)
                predicted = result.frames[1:]
            except NumericFailure as exc:
                report.failure_steps[r] = getattr(exc, "step", None)
                continue
        else:
            predicted = [record.frames[t] for t in range(1, horizon + 1)]
        try:
            for t in range(1, horizon + 1):
                truth = record.frames[t].astype(np.float64)
                f_hat = np.asarray(predicted[t - 1], dtype=np.float64)
                report.mse[r, t - 1] = float(np.mean((f_hat - truth) ** 2))
                div_g, drag_g, flux_g = _state_metrics(f_hat, record.mask, record.tau)
                div_t, drag_t, flux_t = _state_metrics(truth, record.mask, record.tau)
                report.div_generated[r, t - 1] = div_g
                report.div_true[r, t - 1] = div_t
                report.drag_generated[r, t - 1] = drag_g
                report.drag_true[r, t - 1] = drag_t
                report.flux_generated[r, t - 1] = flux_g
                report.flux_true[r, t - 1] = flux_t
        except NumericFailure as exc:
            # metric computation on a degenerate prediction (for example an
            # unstable collide) marks the run failed from that step on
            report.failure_steps[r] = getattr(exc, "step", t)
    return report
