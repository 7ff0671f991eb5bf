"""Empirical loss estimation, ratio-space search, and from-scratch training.

``mc_loss`` estimates the expected squared error of any predictor over
freshly sampled prompts with a numerically stable streaming accumulator.
``grid_search`` sweeps the coherent ratio plane under common random
numbers.  ``train`` fits dense or structured attention parameters by
stochastic gradient descent (or Adam) on fresh prompts each batch, and
``evaluate`` scores the result with the same estimator.

Randomness is counter-based: an integer master seed (or a sequence of
integers) keys one independent stream per prompt chunk via
``SeedSequence([*entropy, chunk_index])``, so results do not depend on the
worker count.  Passing a live ``numpy.random.Generator`` instead runs the
chunks sequentially off that single stream.  Set the ``COTLAB_WORKERS``
environment variable to spread chunk evaluation across threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .attention import (
    AttentionKind,
    CoherentParams,
    FullAttentionParams,
    Objective,
    StepwisePair,
    StepwiseParams,
    grad,
    predict_coherent_batch,
    predict_dense_coherent,
    predict_dense_single,
    predict_dense_stepwise,
    predict_stepwise_batch,
)
from .synthdata import (
    MatrixKind,
    PerturbSpec,
    PromptBatch,
    TaskConfig,
    perturb_batch,
    sample_batch,
)

__all__ = [
    "MCEstimate",
    "GridResult",
    "TrainConfig",
    "TrainResult",
    "ModelFamily",
    "Parameterization",
    "OptimizerKind",
    "Schedule",
    "RejectionOverflow",
    "DivergenceError",
    "mc_loss",
    "grid_search",
    "train",
    "evaluate",
]

Predictor = Callable[[PromptBatch], np.ndarray]

REJECT_FRACTION = 1e-3
DIVERGENCE_FACTOR = 1e3
CURVE_EVERY = 100
INIT_STD = 0.02

_Z90 = 1.645  # two-sided 90% normal quantile


class RejectionOverflow(RuntimeError):
    """More than 0.1% of samples produced non-finite predictions."""


class DivergenceError(RuntimeError):
    """A training batch loss exceeded 1000x its initial value."""


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean of the squared error with its standard error.

    ``lo90``/``hi90`` bound the 90% interval ``mean +- 1.645 * stderr``;
    ``n`` counts the samples that actually entered the mean.
    """

    mean: float
    stderr: float
    n: int
    lo90: float
    hi90: float

    @classmethod
    def from_moments(cls, mean: float, m2: float, n: int) -> "MCEstimate":
        """Build from a running (mean, sum of squared deviations, count)."""
        if n < 2:
            raise ValueError(f"need at least 2 accepted samples, got {n}")
        stderr = math.sqrt(m2 / (n - 1) / n)
        half = _Z90 * stderr
        return cls(mean=mean, stderr=stderr, n=n, lo90=mean - half, hi90=mean + half)


# (count, mean, sum of squared deviations) triples merge associatively.


def _moments_of(x: np.ndarray) -> tuple[int, float, float]:
    if x.size == 0:
        return 0, 0.0, 0.0
    m = float(x.mean())
    return x.size, m, float(np.square(x - m).sum())


def _merge_moments(
    a: tuple[int, float, float], b: tuple[int, float, float]
) -> tuple[int, float, float]:
    na, ma, sa = a
    nb, mb, sb = b
    if na == 0:
        return b
    if nb == 0:
        return a
    n = na + nb
    delta = mb - ma
    return n, ma + delta * nb / n, sa + sb + delta * delta * na * nb / n


def _worker_count() -> int:
    raw = os.environ.get("COTLAB_WORKERS")
    if raw is None:
        return 1
    k = int(raw)
    if k < 1:
        raise ValueError(f"COTLAB_WORKERS must be a positive integer, got {raw!r}")
    return k


def _chunk_sizes(n: int, chunk: int) -> list[int]:
    if chunk < 1:
        raise ValueError(f"chunk size must be positive, got {chunk}")
    sizes = [chunk] * (n // chunk)
    if n % chunk:
        sizes.append(n % chunk)
    return sizes


def _entropy_key(rng: int | Sequence[int]) -> list[int]:
    if isinstance(rng, (int, np.integer)):
        return [int(rng)]
    return [int(v) for v in rng]


def _chunk_map(
    rng: int | Sequence[int] | np.random.Generator,
    sizes: Sequence[int],
    work: Callable[[int, np.random.Generator], object],
) -> list[object]:
    """Run ``work(size, stream)`` per chunk, results in chunk order."""
    if isinstance(rng, np.random.Generator):
        return [work(size, rng) for size in sizes]
    key = _entropy_key(rng)
    gens = [
        np.random.default_rng(np.random.SeedSequence(key + [k]))
        for k in range(len(sizes))
    ]
    workers = _worker_count()
    if workers == 1:
        return [work(size, g) for size, g in zip(sizes, gens)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, sizes, gens))


def mc_loss(
    predictor: Predictor,
    cfg: TaskConfig,
    perturb: PerturbSpec | None = None,
    n: int = 100_000,
    rng: int | Sequence[int] | np.random.Generator = 0,
    chunk: int = 20_000,
) -> MCEstimate:
    """Mean squared error of ``predictor`` over ``n`` freshly sampled prompts.

    The predictor receives a (possibly perturbed) ``PromptBatch`` and must
    return one prediction per prompt; the error is taken against the clean
    query response, which perturbation never touches.  Perturbation noise
    is drawn from the same stream after the batch, so a zero-variance or
    absent spec reproduces the unperturbed run sample for sample.

    Non-finite predictions are rejected and counted; if more than 0.1% of
    the requested samples are rejected the run aborts with
    ``RejectionOverflow``.
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    spec = PerturbSpec() if perturb is None else perturb

    def work(size: int, g: np.random.Generator) -> tuple[tuple[int, float, float], int]:
        batch = sample_batch(cfg, g, size)
        seen = perturb_batch(batch, spec, g)
        y_hat = np.asarray(predictor(seen), dtype=float)
        if y_hat.shape != (size,):
            raise ValueError(
                f"predictor must return shape ({size},), got {y_hat.shape}"
            )
        ok = np.isfinite(y_hat)
        losses = np.square(y_hat[ok] - seen.y_q[ok])
        return _moments_of(losses), int(size - ok.sum())

    total: tuple[int, float, float] = (0, 0.0, 0.0)
    rejects = 0
    for moments, bad in _chunk_map(rng, _chunk_sizes(n, chunk), work):
        total = _merge_moments(total, moments)
        rejects += bad
    if rejects > REJECT_FRACTION * n:
        raise RejectionOverflow(
            f"{rejects} of {n} predictions were non-finite "
            f"(limit {REJECT_FRACTION:.1%})"
        )
    return MCEstimate.from_moments(total[1], total[2], total[0])


@dataclass(frozen=True)
class GridResult:
    """Loss surface over the coherent ratio plane and its tie-broken argmin.

    ``surface[i, j]`` estimates the loss at ratios
    ``(a_values[i], b_values[j])`` = (v_x/v_y, v_z/v_y).  ``n`` is the
    sample count per grid point; zero marks a closed-form surface.
    """

    a_values: np.ndarray
    b_values: np.ndarray
    surface: np.ndarray
    stderr: np.ndarray
    best: tuple[float, float]
    best_loss: float
    n: int


def _argmin_with_ties(
    a_values: np.ndarray, b_values: np.ndarray, surface: np.ndarray
) -> tuple[float, float]:
    best_val = surface.min()
    candidates = np.argwhere(surface == best_val)
    ranked = sorted(
        (a_values[i] ** 2 + b_values[j] ** 2, a_values[i], b_values[j])
        for i, j in candidates
    )
    _, a, b = ranked[0]
    return float(a), float(b)


def grid_search(
    cfg: TaskConfig,
    a_values: Sequence[float],
    b_values: Sequence[float],
    perturb: PerturbSpec | None = None,
    n: int = 100_000,
    rng: int | Sequence[int] | np.random.Generator = 0,
    chunk: int = 20_000,
    surface_fn: Callable[[float, float], float] | None = None,
) -> GridResult:
    """Empirical coherent loss at every ratio pair, under common random numbers.

    The coherent prediction is linear in the ratios given two per-prompt
    statistics, so one shared prompt stream scores the whole grid exactly:
    every point sees identical prompts and comparison noise cancels.  Ties
    at the minimum break toward the smallest ratio norm, then
    lexicographically.

    ``surface_fn(a, b)`` replaces sampling with a closed-form surface
    (test hook); the result then carries ``n=0`` and zero stderr.
    """
    a_arr = np.asarray(a_values, dtype=float)
    b_arr = np.asarray(b_values, dtype=float)
    if a_arr.ndim != 1 or b_arr.ndim != 1 or a_arr.size == 0 or b_arr.size == 0:
        raise ValueError("grid axes must be nonempty 1-d sequences")

    if surface_fn is not None:
        surface = np.array(
            [[float(surface_fn(a, b)) for b in b_arr] for a in a_arr]
        )
        best = _argmin_with_ties(a_arr, b_arr, surface)
        return GridResult(
            a_values=a_arr,
            b_values=b_arr,
            surface=surface,
            stderr=np.zeros_like(surface),
            best=best,
            best_loss=float(surface.min()),
            n=0,
        )

    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    spec = PerturbSpec() if perturb is None else perturb

    def work(size: int, g: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        batch = sample_batch(cfg, g, size)
        seen = perturb_batch(batch, spec, g)
        D = seen.zs.shape[1]
        s = np.einsum("nij,nj->ni", seen.xs, seen.x_q)
        z_hat = np.einsum("ni,ni->n", seen.zs, s) / D
        p1 = np.einsum("ni,ni->n", seen.ys, s) / D
        p2 = np.einsum("ni,ni->n", seen.ys, seen.zs) / D * z_hat
        return p1, p2, seen.y_q

    parts = _chunk_map(rng, _chunk_sizes(n, chunk), work)
    p1 = np.concatenate([p[0] for p in parts])
    p2 = np.concatenate([p[1] for p in parts])
    y_q = np.concatenate([p[2] for p in parts])

    surface = np.empty((a_arr.size, b_arr.size))
    stderr = np.empty_like(surface)
    for i, a in enumerate(a_arr):
        for j, b in enumerate(b_arr):
            losses = np.square(a * p1 + b * p2 - y_q)
            m = float(losses.mean())
            surface[i, j] = m
            stderr[i, j] = math.sqrt(float(np.square(losses - m).sum()) / (n - 1) / n)
    best = _argmin_with_ties(a_arr, b_arr, surface)
    return GridResult(
        a_values=a_arr,
        b_values=b_arr,
        surface=surface,
        stderr=stderr,
        best=best,
        best_loss=float(surface.min()),
        n=n,
    )


class ModelFamily(Enum):
    """What train() produces: a two-model stepwise pair or one coherent model."""

    STEPWISE_PAIR = "stepwise_pair"
    COHERENT = "coherent"


class Parameterization(Enum):
    DENSE = "dense"
    STRUCTURED = "structured"


class OptimizerKind(Enum):
    SGD = "SGD"
    ADAM = "ADAM"


class Schedule(Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for from-scratch training.

    The defaults mirror the replication protocol: learning rate 1e-4,
    batch size 256, 2e5 steps of plain SGD on a softmax attention layer
    with a constant schedule.  Desk presets trade steps for learning rate
    so the same optima are reached in minutes on one core; model
    dimensions always follow the task (d+2 coherent, d+1 and 2 stepwise).
    """

    learning_rate: float = 1e-4
    batch_size: int = 256
    steps: int = 200_000
    optimizer: OptimizerKind = OptimizerKind.SGD
    seed: int = 0
    kind: AttentionKind = AttentionKind.SOFTMAX
    parameterization: Parameterization = Parameterization.DENSE
    schedule: Schedule = Schedule.CONSTANT

    def __post_init__(self) -> None:
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    @classmethod
    def paper(cls, seed: int = 0) -> "TrainConfig":
        """The full replication protocol (hours of compute; not CI fare)."""
        return cls(seed=seed)

    @classmethod
    def desk(cls, objective: "ModelFamily", seed: int = 0) -> "TrainConfig":
        """Minutes-scale dense training that reaches the same optima.

        Linear attention, batch 64, 2e4 SGD steps under a cosine schedule;
        the coherent model tolerates a hotter learning rate than the
        stepwise stages.
        """
        lr = 0.1 if objective is ModelFamily.COHERENT else 0.03
        return cls(
            learning_rate=lr,
            batch_size=64,
            steps=20_000,
            optimizer=OptimizerKind.SGD,
            seed=seed,
            kind=AttentionKind.LINEAR,
            schedule=Schedule.COSINE,
        )

    @classmethod
    def desk_structured(cls, seed: int = 0) -> "TrainConfig":
        """Structured coherent scalars: Adam handles the flat ratio valley."""
        return cls(
            learning_rate=0.01,
            batch_size=64,
            steps=10_000,
            optimizer=OptimizerKind.ADAM,
            seed=seed,
            kind=AttentionKind.LINEAR,
            parameterization=Parameterization.STRUCTURED,
            schedule=Schedule.COSINE,
        )


@dataclass(frozen=True)
class TrainResult:
    """Trained parameters plus per-stage loss curves.

    ``curves`` maps a stage label ("coherent", or "f1"/"f2") to an array
    of (step, batch loss) rows recorded every 100 steps and at the final
    step.
    """

    params: FullAttentionParams | StepwisePair | CoherentParams
    curves: dict[str, np.ndarray]


def _lr_at(cfg: TrainConfig, t: int) -> float:
    if cfg.schedule is Schedule.CONSTANT:
        return cfg.learning_rate
    frac = 0.5 * (1.0 + math.cos(math.pi * t / cfg.steps))
    return cfg.learning_rate * max(frac, 0.01)


class _Optimizer:
    """SGD or Adam over a list of parameter arrays, updated in place."""

    def __init__(self, cfg: TrainConfig, arrays: list[np.ndarray]) -> None:
        self.kind = cfg.optimizer
        if self.kind is OptimizerKind.ADAM:
            self.t = 0
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if self.kind is OptimizerKind.SGD:
            for a, g in zip(arrays, grads):
                a -= lr * g
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            a -= lr * m_hat / (np.sqrt(v_hat) + eps)


class _Curve:
    def __init__(self) -> None:
        self.rows: list[tuple[int, float]] = []

    def record(self, t: int, loss: float, last: bool) -> None:
        if t % CURVE_EVERY == 0 or last:
            self.rows.append((t, loss))

    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float)


def _check_divergence(loss: float, initial: float, t: int, label: str) -> None:
    if math.isfinite(loss) and loss <= DIVERGENCE_FACTOR * initial:
        return
    raise DivergenceError(
        f"{label} diverged at step {t}: batch loss {loss:.6g} "
        f"vs initial {initial:.6g}"
    )


def _train_dense_stage(
    cfg: TrainConfig,
    task: TaskConfig,
    objective: Objective,
    m: int,
    rng: np.random.Generator,
    label: str,
    init: FullAttentionParams | None,
    through_zhat: bool = True,
    z_feed_fn: Callable[[PromptBatch], np.ndarray] | None = None,
) -> tuple[FullAttentionParams, np.ndarray]:
    if init is None:
        p = FullAttentionParams(
            score=rng.normal(0.0, INIT_STD, (m, m)),
            readout=rng.normal(0.0, INIT_STD, (m, m)),
            kind=cfg.kind,
        )
    else:
        if init.m != m:
            raise ValueError(f"{label} init must be {m}x{m}, got m={init.m}")
        p = init.copy()
    opt = _Optimizer(cfg, [p.score, p.readout])
    curve = _Curve()
    initial = math.inf
    for t in range(cfg.steps):
        batch = sample_batch(task, rng, cfg.batch_size)
        z_feed = None if z_feed_fn is None else z_feed_fn(batch)
        g, loss = grad(batch, p, objective, z_feed=z_feed, through_zhat=through_zhat)
        if t == 0:
            initial = max(loss, np.finfo(float).tiny)
        _check_divergence(loss, initial, t, label)
        curve.record(t, loss, last=t == cfg.steps - 1)
        opt.step([p.score, p.readout], [g.score, g.readout], _lr_at(cfg, t))
    return p, curve.array()


def _train_structured_coherent(
    cfg: TrainConfig,
    task: TaskConfig,
    rng: np.random.Generator,
    init: CoherentParams | None,
) -> tuple[CoherentParams, np.ndarray]:
    start = CoherentParams(1.0, 1.0, 1.0) if init is None else init
    vec = np.array([start.v_x, start.v_z, start.v_y], dtype=float)
    opt = _Optimizer(cfg, [vec])
    curve = _Curve()
    initial = math.inf
    for t in range(cfg.steps):
        batch = sample_batch(task, rng, cfg.batch_size)
        g, loss = grad(batch, CoherentParams(*vec), Objective.Y_FINAL)
        if t == 0:
            initial = max(loss, np.finfo(float).tiny)
        _check_divergence(loss, initial, t, "structured coherent")
        curve.record(t, loss, last=t == cfg.steps - 1)
        opt.step([vec], [g], _lr_at(cfg, t))
    return CoherentParams(*vec), curve.array()


def train(
    train_cfg: TrainConfig,
    task_cfg: TaskConfig,
    objective: ModelFamily,
    through_zhat: bool = True,
    f2_feed: str = "true",
    init: FullAttentionParams | StepwisePair | CoherentParams | None = None,
) -> TrainResult:
    """Fit attention parameters on fresh prompts each batch.

    COHERENT trains one (d+2)-dimensional model on the final squared error,
    by default with the gradient flowing through the intermediate
    prediction (``through_zhat=False`` ablates that path).  STEPWISE_PAIR
    trains f1 on the intermediate error and f2 on the final error
    separately; f2's query carries the true intermediate during training
    (``f2_feed="predicted"`` feeds f1's prediction instead), while
    evaluation always runs the pipeline end to end.

    ``init`` warm-starts from explicit parameters instead of the Gaussian
    init.  Structured training fits the three coherent scalars; structured
    stepwise scalars cancel out of the prediction, so that combination is
    rejected.
    """
    if f2_feed not in ("true", "predicted"):
        raise ValueError(f'f2_feed must be "true" or "predicted", got {f2_feed!r}')
    d = task_cfg.d

    if train_cfg.parameterization is Parameterization.STRUCTURED:
        if objective is ModelFamily.STEPWISE_PAIR:
            raise ValueError(
                "structured stepwise scalars cancel out of the prediction; "
                "there is nothing to train"
            )
        if init is not None and not isinstance(init, CoherentParams):
            raise TypeError("structured coherent init must be CoherentParams")
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0]))
        params, curve = _train_structured_coherent(train_cfg, task_cfg, rng, init)
        return TrainResult(params=params, curves={"coherent": curve})

    if objective is ModelFamily.COHERENT:
        if init is not None and not isinstance(init, FullAttentionParams):
            raise TypeError("dense coherent init must be FullAttentionParams")
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0]))
        params, curve = _train_dense_stage(
            train_cfg,
            task_cfg,
            Objective.Y_FINAL,
            d + 2,
            rng,
            "coherent",
            init,
            through_zhat=through_zhat,
        )
        return TrainResult(params=params, curves={"coherent": curve})

    if init is not None and not isinstance(init, StepwisePair):
        raise TypeError("stepwise init must be StepwisePair")
    rng1 = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0]))
    rng2 = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    f1, curve1 = _train_dense_stage(
        train_cfg,
        task_cfg,
        Objective.Z_STEP,
        d + 1,
        rng1,
        "f1",
        None if init is None else init.f1,
    )
    feed_fn = None
    if f2_feed == "predicted":

        def feed_fn(batch: PromptBatch) -> np.ndarray:
            return predict_dense_single(batch, f1, MatrixKind.ICL1)

    f2, curve2 = _train_dense_stage(
        train_cfg,
        task_cfg,
        Objective.Y_FINAL,
        2,
        rng2,
        "f2",
        None if init is None else init.f2,
        z_feed_fn=feed_fn,
    )
    return TrainResult(
        params=StepwisePair(f1=f1, f2=f2), curves={"f1": curve1, "f2": curve2}
    )


def _predictor_for(
    model: FullAttentionParams | StepwisePair | CoherentParams | StepwiseParams,
    cfg: TaskConfig,
) -> Predictor:
    if isinstance(model, StepwisePair):
        return lambda b: predict_dense_stepwise(b, model)[1]
    if isinstance(model, FullAttentionParams):
        if model.m != cfg.d + 2:
            raise ValueError(
                f"a lone dense model must be coherent ({cfg.d + 2}-dimensional) "
                f"to produce final answers, got m={model.m}"
            )
        return lambda b: predict_dense_coherent(b, model)[1]
    if isinstance(model, CoherentParams):
        return lambda b: predict_coherent_batch(b, model)[1]
    if isinstance(model, StepwiseParams):
        return lambda b: predict_stepwise_batch(b, model)[1]
    raise TypeError(f"no evaluation rule for {type(model).__name__}")


def evaluate(
    model: FullAttentionParams | StepwisePair | CoherentParams | StepwiseParams,
    cfg: TaskConfig,
    perturb: PerturbSpec | None = None,
    n: int = 128_000,
    rng: int | Sequence[int] | np.random.Generator = 0,
    chunk: int = 20_000,
) -> MCEstimate:
    """Final-answer MSE of a trained or structured model; see ``mc_loss``."""
    return mc_loss(_predictor_for(model, cfg), cfg, perturb, n, rng, chunk)
