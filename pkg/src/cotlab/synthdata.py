"""Sampling and prompt assembly for the two-layer noisy regression task.

Each task draws a direction ``beta`` uniformly from the unit sphere. A
demonstration example is a triple ``(x, z, y)`` with ``x ~ N(0, I_d)``,
intermediate response ``z = beta . x``, and final response ``y = z + eps``
where ``eps ~ N(0, sigma2)``. A prompt stacks ``D`` demonstrations next to
a query column whose unpredicted slots are zero. Four matrix layouts are
supported: the two stepwise stages (``ICL1`` over ``(x, z)`` pairs and
``ICL2`` over ``(z, y)`` pairs) and the two coherent passes (``COT1`` with
query ``(x_q, 0, 0)`` and ``COT2`` with the predicted intermediate filled
in). Demonstration-side Gaussian perturbations of the x, z, or y entries
model inference-time corruption; the query column is never perturbed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "TaskConfig",
    "PromptInstance",
    "PromptBatch",
    "PromptMatrix",
    "MatrixKind",
    "PerturbTarget",
    "PerturbSpec",
    "sample_task",
    "sample_prompt",
    "sample_batch",
    "assemble",
    "perturb",
    "perturb_batch",
    "dump_prompts",
    "load_prompts",
]


class MatrixKind(Enum):
    """Prompt-matrix layouts; row counts are d+1, 2, d+2, d+2."""

    ICL1 = "ICL1"
    ICL2 = "ICL2"
    COT1 = "COT1"
    COT2 = "COT2"


class PerturbTarget(Enum):
    NONE = "NONE"
    X = "X"
    Z = "Z"
    Y = "Y"


@dataclass(frozen=True)
class TaskConfig:
    """Task dimensions: input dimension d, demonstration count D, label-noise variance sigma2."""

    d: int
    D: int
    sigma2: float

    def __post_init__(self) -> None:
        if not (isinstance(self.d, (int, np.integer)) and self.d >= 1):
            raise ValueError(f"d must be a positive integer, got {self.d!r}")
        if not (isinstance(self.D, (int, np.integer)) and self.D >= 1):
            raise ValueError(f"D must be a positive integer, got {self.D!r}")
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be nonnegative, got {self.sigma2!r}")


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PromptInstance:
    """One sampled prompt: task direction, D demonstration triples, and the query triple.

    Arrays are read-only after construction; treat instances as values.
    """

    beta: np.ndarray
    xs: np.ndarray
    zs: np.ndarray
    ys: np.ndarray
    x_q: np.ndarray
    z_q: float
    y_q: float

    def __post_init__(self) -> None:
        for name in ("beta", "xs", "zs", "ys", "x_q"):
            _freeze(getattr(self, name))

    @property
    def d(self) -> int:
        return self.beta.shape[0]

    @property
    def D(self) -> int:
        return self.zs.shape[0]


@dataclass(frozen=True)
class PromptBatch:
    """Struct-of-arrays twin of PromptInstance for vectorized evaluation.

    Shapes: xs (n, D, d), zs and ys (n, D), x_q (n, d), z_q and y_q (n,).
    """

    beta: np.ndarray
    xs: np.ndarray
    zs: np.ndarray
    ys: np.ndarray
    x_q: np.ndarray
    z_q: np.ndarray
    y_q: np.ndarray

    def __post_init__(self) -> None:
        for name in ("beta", "xs", "zs", "ys", "x_q", "z_q", "y_q"):
            _freeze(getattr(self, name))

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    def instance(self, i: int) -> PromptInstance:
        return PromptInstance(
            beta=self.beta[i].copy(),
            xs=self.xs[i].copy(),
            zs=self.zs[i].copy(),
            ys=self.ys[i].copy(),
            x_q=self.x_q[i].copy(),
            z_q=float(self.z_q[i]),
            y_q=float(self.y_q[i]),
        )


@dataclass(frozen=True)
class PromptMatrix:
    """Column-stacked prompt layout; the query column is the last one."""

    entries: np.ndarray
    kind: MatrixKind

    def __post_init__(self) -> None:
        _freeze(self.entries)


@dataclass(frozen=True)
class PerturbSpec:
    """Additive Gaussian noise on one demonstration row family, variance sigma_eps2 per coordinate."""

    target: PerturbTarget = PerturbTarget.NONE
    sigma_eps2: float = 0.0

    def __post_init__(self) -> None:
        if not self.sigma_eps2 >= 0:
            raise ValueError(f"sigma_eps2 must be nonnegative, got {self.sigma_eps2!r}")


def sample_task(cfg: TaskConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw a direction uniformly from the unit sphere in R^d."""
    beta = rng.standard_normal(cfg.d)
    norm = np.linalg.norm(beta)
    while norm == 0.0:  # probability zero; guard anyway
        beta = rng.standard_normal(cfg.d)
        norm = np.linalg.norm(beta)
    return beta / norm


def sample_prompt(
    cfg: TaskConfig, rng: np.random.Generator, beta: np.ndarray | None = None
) -> PromptInstance:
    """Sample one prompt: fresh beta, D demonstration triples, and a query triple.

    ``beta`` may be forced for tests; by default a fresh direction is drawn
    per prompt. Draw order matches sample_batch so that a batch of size one
    consumes the stream identically.
    """
    if beta is None:
        beta = sample_task(cfg, rng)
    else:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (cfg.d,):
            raise ValueError(f"beta must have shape ({cfg.d},), got {beta.shape}")
    xs = rng.standard_normal((cfg.D, cfg.d))
    x_q = rng.standard_normal(cfg.d)
    zs = xs @ beta
    z_q = float(x_q @ beta)
    sigma = np.sqrt(cfg.sigma2)
    ys = zs + sigma * rng.standard_normal(cfg.D)
    y_q = z_q + sigma * float(rng.standard_normal())
    return PromptInstance(beta=beta, xs=xs, zs=zs, ys=ys, x_q=x_q, z_q=z_q, y_q=y_q)


def sample_batch(cfg: TaskConfig, rng: np.random.Generator, n: int) -> PromptBatch:
    """Sample ``n`` independent prompts as a PromptBatch, fresh beta per prompt."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    beta = rng.standard_normal((n, cfg.d))
    norms = np.linalg.norm(beta, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        beta[bad] = rng.standard_normal((int(bad.sum()), cfg.d))
        norms = np.linalg.norm(beta, axis=1)
    beta /= norms[:, None]
    xs = rng.standard_normal((n, cfg.D, cfg.d))
    x_q = rng.standard_normal((n, cfg.d))
    zs = np.einsum("nij,nj->ni", xs, beta)
    z_q = np.einsum("nj,nj->n", x_q, beta)
    sigma = np.sqrt(cfg.sigma2)
    ys = zs + sigma * rng.standard_normal((n, cfg.D))
    y_q = z_q + sigma * rng.standard_normal(n)
    return PromptBatch(beta=beta, xs=xs, zs=zs, ys=ys, x_q=x_q, z_q=z_q, y_q=y_q)


def assemble(
    prompt: PromptInstance, kind: MatrixKind, z_hat_q: float | None = None
) -> PromptMatrix:
    """Lay the prompt out as the requested matrix; columns 0..D-1 are demonstrations.

    ``z_hat_q`` fills the predicted-intermediate slot of the query column and
    is required exactly for ICL2 and COT2.
    """
    needs_zhat = kind in (MatrixKind.ICL2, MatrixKind.COT2)
    if needs_zhat and z_hat_q is None:
        raise ValueError(f"{kind.value} requires z_hat_q")
    if not needs_zhat and z_hat_q is not None:
        raise ValueError(f"{kind.value} takes no z_hat_q")
    d, D = prompt.d, prompt.D
    if kind is MatrixKind.ICL1:
        E = np.zeros((d + 1, D + 1))
        E[:d, :D] = prompt.xs.T
        E[d, :D] = prompt.zs
        E[:d, D] = prompt.x_q
    elif kind is MatrixKind.ICL2:
        E = np.zeros((2, D + 1))
        E[0, :D] = prompt.zs
        E[1, :D] = prompt.ys
        E[0, D] = z_hat_q
    else:
        E = np.zeros((d + 2, D + 1))
        E[:d, :D] = prompt.xs.T
        E[d, :D] = prompt.zs
        E[d + 1, :D] = prompt.ys
        E[:d, D] = prompt.x_q
        if kind is MatrixKind.COT2:
            E[d, D] = z_hat_q
    return PromptMatrix(entries=E, kind=kind)


def perturb(
    prompt: PromptInstance, spec: PerturbSpec, rng: np.random.Generator
) -> PromptInstance:
    """Add Gaussian noise to one demonstration row family; the query triple stays clean.

    Target X perturbs every coordinate of every demonstration input with
    independent N(0, sigma_eps2) noise, so each input moves by a vector of
    expected squared norm d * sigma_eps2. NONE or zero variance returns the
    input unchanged.
    """
    if spec.target is PerturbTarget.NONE or spec.sigma_eps2 == 0.0:
        return prompt
    sig = np.sqrt(spec.sigma_eps2)
    xs, zs, ys = prompt.xs, prompt.zs, prompt.ys
    if spec.target is PerturbTarget.X:
        xs = xs + sig * rng.standard_normal(xs.shape)
    elif spec.target is PerturbTarget.Z:
        zs = zs + sig * rng.standard_normal(zs.shape)
    else:
        ys = ys + sig * rng.standard_normal(ys.shape)
    return PromptInstance(
        beta=prompt.beta.copy(),
        xs=xs.copy() if xs is prompt.xs else xs,
        zs=zs.copy() if zs is prompt.zs else zs,
        ys=ys.copy() if ys is prompt.ys else ys,
        x_q=prompt.x_q.copy(),
        z_q=prompt.z_q,
        y_q=prompt.y_q,
    )


def perturb_batch(
    batch: PromptBatch, spec: PerturbSpec, rng: np.random.Generator
) -> PromptBatch:
    """Vectorized twin of perturb."""
    if spec.target is PerturbTarget.NONE or spec.sigma_eps2 == 0.0:
        return batch
    sig = np.sqrt(spec.sigma_eps2)
    xs, zs, ys = batch.xs, batch.zs, batch.ys
    if spec.target is PerturbTarget.X:
        xs = xs + sig * rng.standard_normal(xs.shape)
    elif spec.target is PerturbTarget.Z:
        zs = zs + sig * rng.standard_normal(zs.shape)
    else:
        ys = ys + sig * rng.standard_normal(ys.shape)
    return PromptBatch(
        beta=batch.beta.copy(),
        xs=xs.copy() if xs is batch.xs else xs,
        zs=zs.copy() if zs is batch.zs else zs,
        ys=ys.copy() if ys is batch.ys else ys,
        x_q=batch.x_q.copy(),
        z_q=batch.z_q.copy(),
        y_q=batch.y_q.copy(),
    )


def _prompt_to_dict(p: PromptInstance) -> dict:
    return {
        "beta": p.beta.tolist(),
        "xs": p.xs.tolist(),
        "zs": p.zs.tolist(),
        "ys": p.ys.tolist(),
        "x_q": p.x_q.tolist(),
        "z_q": p.z_q,
        "y_q": p.y_q,
    }


def dump_prompts(prompts: Iterable[PromptInstance], fp: IO[str]) -> int:
    """Write prompts as JSON lines for inspection; returns the count written."""
    n = 0
    for p in prompts:
        fp.write(json.dumps(_prompt_to_dict(p)) + "\n")
        n += 1
    return n


def load_prompts(fp: IO[str]) -> list[PromptInstance]:
    """Read a JSON-lines prompt dump back into PromptInstance values."""
    out = []
    for line in fp:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        out.append(
            PromptInstance(
                beta=np.asarray(rec["beta"], dtype=float),
                xs=np.asarray(rec["xs"], dtype=float),
                zs=np.asarray(rec["zs"], dtype=float),
                ys=np.asarray(rec["ys"], dtype=float),
                x_q=np.asarray(rec["x_q"], dtype=float),
                z_q=float(rec["z_q"]),
                y_q=float(rec["y_q"]),
            )
        )
    return out
