"""Single-head attention predictors: structured scalars, dense matrices, gradients.

The model scores prompt columns against the query column and aggregates the
value-projected columns. In the linear variant the prediction read off row
``r`` at the query column ``q`` of matrix ``E`` is

    (Wout WV  E  (1/D) E^T (WK)^T WQ  E)[r, q]

normalized by the demonstration count D. The softmax variant passes the
score column through a softmax instead and drops the 1/D factor. Only the
products (WK)^T WQ and Wout WV matter for either output, so dense models
carry those two square matrices directly.

Structured parameterizations collapse the products to a handful of scalars:
the stepwise pair uses (u_x, u_z) across two separate models, the coherent
model uses (v_x, v_z, v_y) in one model applied twice, feeding its own
intermediate prediction back into the prompt.

Analytic gradients for the mean squared prediction error are provided for
every trainable form; the coherent gradient flows through both passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, NamedTuple, Sequence

import numpy as np

from .synthdata import MatrixKind, PromptBatch, PromptInstance, PromptMatrix

__all__ = [
    "AttentionKind",
    "Objective",
    "StepwiseParams",
    "CoherentParams",
    "FullAttentionParams",
    "StepwisePair",
    "DenseGrad",
    "forward",
    "predict_stepwise",
    "predict_stepwise_batch",
    "predict_coherent",
    "predict_coherent_batch",
    "predict_dense_single",
    "predict_dense_coherent",
    "predict_dense_stepwise",
    "structured_to_full",
    "grad",
    "as_batch",
    "save_params",
    "load_params",
]


class AttentionKind(Enum):
    LINEAR = "LINEAR"
    SOFTMAX = "SOFTMAX"


class Objective(Enum):
    """Training target: the intermediate prediction or the final one."""

    Z_STEP = "Z_STEP"
    Y_FINAL = "Y_FINAL"


@dataclass(frozen=True)
class StepwiseParams:
    """Scalars of the two stepwise models; both cancel out of the predictions."""

    u_x: float = 1.0
    u_z: float = 1.0

    def __post_init__(self) -> None:
        if self.u_x == 0 or self.u_z == 0:
            raise ValueError("u_x and u_z must be nonzero")


@dataclass(frozen=True)
class CoherentParams:
    """Scalars (v_x, v_z, v_y) of the coherent model; only ratios to v_y matter."""

    v_x: float
    v_z: float
    v_y: float

    def __post_init__(self) -> None:
        if self.v_y == 0:
            raise ValueError("v_y must be nonzero (it divides the readout)")

    @property
    def ratios(self) -> tuple[float, float]:
        """(v_x/v_y, v_z/v_y); the prediction depends on the parameters only through these."""
        return self.v_x / self.v_y, self.v_z / self.v_y


@dataclass
class FullAttentionParams:
    """Dense trainable attention: the two m-by-m products that determine the output.

    ``score`` is (WK)^T WQ and ``readout`` is Wout WV. Training acts on these
    directly; factored weights can be folded in via from_factors.
    """

    score: np.ndarray
    readout: np.ndarray
    kind: AttentionKind = AttentionKind.LINEAR

    def __post_init__(self) -> None:
        self.score = np.asarray(self.score, dtype=float)
        self.readout = np.asarray(self.readout, dtype=float)
        m = self.score.shape[0]
        if self.score.shape != (m, m) or self.readout.shape != (m, m):
            raise ValueError(
                f"score and readout must be equal square matrices, got "
                f"{self.score.shape} and {self.readout.shape}"
            )

    @property
    def m(self) -> int:
        return self.score.shape[0]

    @classmethod
    def from_factors(
        cls,
        WK: np.ndarray,
        WQ: np.ndarray,
        WV: np.ndarray,
        Wout: np.ndarray,
        kind: AttentionKind = AttentionKind.LINEAR,
    ) -> "FullAttentionParams":
        return cls(score=np.asarray(WK).T @ np.asarray(WQ),
                   readout=np.asarray(Wout) @ np.asarray(WV),
                   kind=kind)

    def copy(self) -> "FullAttentionParams":
        return FullAttentionParams(self.score.copy(), self.readout.copy(), self.kind)


@dataclass
class StepwisePair:
    """The two separately trained stepwise models: f1 maps (x, z) prompts to z, f2 maps (z, y) prompts to y."""

    f1: FullAttentionParams
    f2: FullAttentionParams

    def __post_init__(self) -> None:
        if self.f2.m != 2:
            raise ValueError(f"f2 acts on (z, y) prompts and must be 2x2, got m={self.f2.m}")


class DenseGrad(NamedTuple):
    """Gradient with the same shape as FullAttentionParams' trainables."""

    score: np.ndarray
    readout: np.ndarray


def save_params(p: FullAttentionParams, fp: IO[str]) -> None:
    """Snapshot dense parameters as a JSON document (shape, kind, row-major entries)."""
    json.dump(
        {
            "m": p.m,
            "kind": p.kind.value,
            "score": p.score.ravel().tolist(),
            "readout": p.readout.ravel().tolist(),
        },
        fp,
    )


def load_params(fp: IO[str]) -> FullAttentionParams:
    rec = json.load(fp)
    m = int(rec["m"])
    return FullAttentionParams(
        score=np.asarray(rec["score"], dtype=float).reshape(m, m),
        readout=np.asarray(rec["readout"], dtype=float).reshape(m, m),
        kind=AttentionKind(rec["kind"]),
    )


def _softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def forward(
    E: PromptMatrix | np.ndarray,
    p: FullAttentionParams,
    readout_row: int,
    query_col: int,
) -> float:
    """One scalar prediction: row ``readout_row`` of the attention output at ``query_col``.

    The linear kind normalizes scores by the demonstration count (one less
    than the column count); the softmax kind normalizes via the softmax
    itself. The score sum runs over every column, the query included; at the
    readout rows used by the predictors here its contribution vanishes
    because the corresponding query slots are zero.
    """
    entries = E.entries if isinstance(E, PromptMatrix) else np.asarray(E, dtype=float)
    m, ncols = entries.shape
    if p.m != m:
        raise ValueError(f"parameter dimension {p.m} does not match matrix rows {m}")
    if query_col < 0:
        query_col += ncols
    if not 0 <= query_col < ncols:
        raise ValueError(f"query_col out of range for {ncols} columns")
    if not 0 <= readout_row < m:
        raise ValueError(f"readout_row out of range for {m} rows")
    scores = entries.T @ (p.score @ entries[:, query_col])
    if p.kind is AttentionKind.LINEAR:
        weights = scores / (ncols - 1)
    else:
        weights = _softmax(scores)
    return float((p.readout[readout_row] @ entries) @ weights)


def predict_stepwise(
    prompt: PromptInstance, p: StepwiseParams = StepwiseParams()
) -> tuple[float, float]:
    """Two-stage structured prediction; (u_x, u_z) cancel and do not enter numerically.

    Stage one regresses the intermediate from the (x, z) demonstrations,
    stage two regresses the final response from the (z, y) demonstrations
    evaluated at the stage-one output.
    """
    D = prompt.D
    s = prompt.xs @ prompt.x_q
    z_hat = float(prompt.zs @ s) / D
    y_hat = float(prompt.ys @ prompt.zs) / D * z_hat
    return z_hat, y_hat


def predict_stepwise_batch(
    batch: PromptBatch, p: StepwiseParams = StepwiseParams()
) -> tuple[np.ndarray, np.ndarray]:
    D = batch.zs.shape[1]
    s = np.einsum("nij,nj->ni", batch.xs, batch.x_q)
    z_hat = np.einsum("ni,ni->n", batch.zs, s) / D
    y_hat = np.einsum("ni,ni->n", batch.ys, batch.zs) / D * z_hat
    return z_hat, y_hat


def predict_coherent(prompt: PromptInstance, p: CoherentParams) -> tuple[float, float]:
    """Two-pass coherent prediction with the intermediate fed back into the prompt.

    Pass one reads z_hat off the full prompt; pass two scores demonstrations
    with both the input match and the intermediate match, weighted by the
    parameter ratios.
    """
    a, b = p.ratios
    D = prompt.D
    s = prompt.xs @ prompt.x_q
    z_hat = float(prompt.zs @ s) / D
    y_hat = float(prompt.ys @ (a * s + b * prompt.zs * z_hat)) / D
    return z_hat, y_hat


def predict_coherent_batch(
    batch: PromptBatch, p: CoherentParams
) -> tuple[np.ndarray, np.ndarray]:
    a, b = p.ratios
    D = batch.zs.shape[1]
    s = np.einsum("nij,nj->ni", batch.xs, batch.x_q)
    z_hat = np.einsum("ni,ni->n", batch.zs, s) / D
    y_hat = np.einsum("ni,ni->n", batch.ys, a * s + b * batch.zs * z_hat[:, None]) / D
    return z_hat, y_hat


def structured_to_full(
    p: StepwiseParams | CoherentParams, d: int, step: int | None = None
) -> FullAttentionParams:
    """Embed structured scalars into dense matrices.

    Coherent parameters produce the single (d+2)-dimensional model used for
    both passes: score diag(v_x I_d, v_z, v_y), readout rows d and d+1
    holding 1/v_x and 1/v_y at the matching diagonal slots. Stepwise
    parameters need ``step`` (1 or 2) to pick which of the two models to
    emit: step 1 is (d+1)-dimensional with score diag(u_x I_d, 0) and
    readout 1/u_x at the intermediate row, step 2 is 2-dimensional with
    score [[u_z, 0], [0, 0]] and readout 1/u_z at the final row.
    """
    if isinstance(p, CoherentParams):
        if step is not None:
            raise ValueError("coherent parameters define one model; step does not apply")
        if p.v_x == 0:
            raise ValueError("v_x must be nonzero: the pass-one readout divides by it")
        m = d + 2
        score = np.diag(np.concatenate([np.full(d, p.v_x), [p.v_z, p.v_y]]))
        readout = np.zeros((m, m))
        readout[d, d] = 1.0 / p.v_x
        readout[d + 1, d + 1] = 1.0 / p.v_y
        return FullAttentionParams(score, readout)
    if step == 1:
        m = d + 1
        score = np.diag(np.concatenate([np.full(d, p.u_x), [0.0]]))
        readout = np.zeros((m, m))
        readout[d, d] = 1.0 / p.u_x
        return FullAttentionParams(score, readout)
    if step == 2:
        score = np.array([[p.u_z, 0.0], [0.0, 0.0]])
        readout = np.zeros((2, 2))
        readout[1, 1] = 1.0 / p.u_z
        return FullAttentionParams(score, readout)
    raise ValueError("stepwise parameters require step=1 or step=2")


def as_batch(prompts: Sequence[PromptInstance] | PromptBatch) -> PromptBatch:
    """Stack prompt instances into a batch; a batch passes through unchanged."""
    if isinstance(prompts, PromptBatch):
        return prompts
    if len(prompts) == 0:
        raise ValueError("empty prompt batch")
    return PromptBatch(
        beta=np.stack([p.beta for p in prompts]),
        xs=np.stack([p.xs for p in prompts]),
        zs=np.stack([p.zs for p in prompts]),
        ys=np.stack([p.ys for p in prompts]),
        x_q=np.stack([p.x_q for p in prompts]),
        z_q=np.asarray([p.z_q for p in prompts], dtype=float),
        y_q=np.asarray([p.y_q for p in prompts], dtype=float),
    )


# Dense batched forwards. Columns of the prompt matrix enter only through
# the per-prompt Gram pieces, which keeps everything at m x m per prompt.


def _cot_columns(batch: PromptBatch) -> np.ndarray:
    # (n, D, m) with rows c_j = (x_j, z_j, y_j)
    return np.concatenate([batch.xs, batch.zs[..., None], batch.ys[..., None]], axis=2)


def _icl1_columns(batch: PromptBatch) -> np.ndarray:
    return np.concatenate([batch.xs, batch.zs[..., None]], axis=2)


def _icl2_columns(batch: PromptBatch) -> np.ndarray:
    return np.concatenate([batch.zs[..., None], batch.ys[..., None]], axis=2)


def _linear_pred(S: np.ndarray, M: np.ndarray, e: np.ndarray, g: np.ndarray, D: int) -> np.ndarray:
    # g^T S M e / D with S including the query column's rank-one part
    return np.einsum("nmk,nk,m->n", S, e @ M.T, g) / D


def _softmax_pred(
    C: np.ndarray, M: np.ndarray, e: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (pred, weights, phi) over the D+1 columns, query last."""
    Me = e @ M.T
    a_demo = np.einsum("njm,nm->nj", C, Me)
    a_query = np.einsum("nm,nm->n", e, Me)
    a = np.concatenate([a_demo, a_query[:, None]], axis=1)
    w = _softmax(a, axis=1)
    phi_demo = C @ g
    phi_query = e @ g
    phi = np.concatenate([phi_demo, phi_query[:, None]], axis=1)
    pred = np.einsum("nj,nj->n", w, phi)
    return pred, w, phi


def predict_dense_single(
    batch: PromptBatch,
    p: FullAttentionParams,
    layout: MatrixKind,
    z_feed: np.ndarray | None = None,
) -> np.ndarray:
    """Batched forward of a one-pass dense model on the given prompt layout.

    ICL1 reads the intermediate row (row d); ICL2 reads the final row and
    needs ``z_feed`` for the query slot (defaults to the true intermediate).
    COT1 reads the intermediate row of the full layout.
    """
    n, D = batch.zs.shape
    d = batch.xs.shape[2]
    if layout is MatrixKind.ICL1:
        if p.m != d + 1:
            raise ValueError(f"ICL1 model must be {d + 1}x{d + 1}, got m={p.m}")
        C = _icl1_columns(batch)
        e = np.concatenate([batch.x_q, np.zeros((n, 1))], axis=1)
        row = d
    elif layout is MatrixKind.ICL2:
        if p.m != 2:
            raise ValueError(f"ICL2 model must be 2x2, got m={p.m}")
        feed = batch.z_q if z_feed is None else z_feed
        C = _icl2_columns(batch)
        e = np.stack([feed, np.zeros(n)], axis=1)
        row = 1
    elif layout is MatrixKind.COT1:
        if p.m != d + 2:
            raise ValueError(f"COT1 model must be {d + 2}x{d + 2}, got m={p.m}")
        C = _cot_columns(batch)
        e = np.concatenate([batch.x_q, np.zeros((n, 2))], axis=1)
        row = d
    else:
        raise ValueError("COT2 has no one-pass readout; use predict_dense_coherent")
    g = p.readout[row]
    if p.kind is AttentionKind.LINEAR:
        S = np.matmul(C.transpose(0, 2, 1), C) + e[:, :, None] * e[:, None, :]
        return _linear_pred(S, p.score, e, g, D)
    pred, _, _ = _softmax_pred(C, p.score, e, g)
    return pred


def predict_dense_coherent(
    batch: PromptBatch, p: FullAttentionParams
) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass dense prediction: read z_hat, splice it into the query, read y_hat."""
    n, D = batch.zs.shape
    d = batch.xs.shape[2]
    if p.m != d + 2:
        raise ValueError(f"coherent model must be {d + 2}x{d + 2}, got m={p.m}")
    C = _cot_columns(batch)
    e1 = np.concatenate([batch.x_q, np.zeros((n, 2))], axis=1)
    gz, gy = p.readout[d], p.readout[d + 1]
    if p.kind is AttentionKind.LINEAR:
        S0 = np.matmul(C.transpose(0, 2, 1), C)
        S1 = S0 + e1[:, :, None] * e1[:, None, :]
        z_hat = _linear_pred(S1, p.score, e1, gz, D)
        e2 = e1.copy()
        e2[:, d] = z_hat
        S2 = S0 + e2[:, :, None] * e2[:, None, :]
        y_hat = _linear_pred(S2, p.score, e2, gy, D)
        return z_hat, y_hat
    z_hat, _, _ = _softmax_pred(C, p.score, e1, gz)
    e2 = e1.copy()
    e2[:, d] = z_hat
    y_hat, _, _ = _softmax_pred(C, p.score, e2, gy)
    return z_hat, y_hat


def predict_dense_stepwise(
    batch: PromptBatch, pair: StepwisePair
) -> tuple[np.ndarray, np.ndarray]:
    """End-to-end stepwise pipeline: f1's intermediate prediction feeds f2's query."""
    z_hat = predict_dense_single(batch, pair.f1, MatrixKind.ICL1)
    y_hat = predict_dense_single(batch, pair.f2, MatrixKind.ICL2, z_feed=z_hat)
    return z_hat, y_hat


# Analytic gradients of the batch-mean squared error.


def _grad_linear_single(
    C: np.ndarray, e: np.ndarray, row: int, p: FullAttentionParams, target: np.ndarray
) -> tuple[DenseGrad, float]:
    n = C.shape[0]
    D = C.shape[1]
    M = p.score
    g = p.readout[row]
    S = np.matmul(C.transpose(0, 2, 1), C) + e[:, :, None] * e[:, None, :]
    pred = _linear_pred(S, M, e, g, D)
    resid = pred - target
    rho = 2.0 * resid / n
    Sg = np.einsum("nmk,k->nm", S, g)
    SMe = np.einsum("nmk,nk->nm", S, e @ M.T)
    d_score = np.einsum("n,nm,nk->mk", rho, Sg, e) / D
    d_readout = np.zeros_like(p.readout)
    d_readout[row] = np.einsum("n,nm->m", rho, SMe) / D
    return DenseGrad(d_score, d_readout), float(np.mean(resid**2))


def _grad_linear_coherent(
    batch: PromptBatch, p: FullAttentionParams, through_zhat: bool
) -> tuple[DenseGrad, float]:
    n, D = batch.zs.shape
    d = batch.xs.shape[2]
    M = p.score
    gz, gy = p.readout[d], p.readout[d + 1]
    C = _cot_columns(batch)
    e1 = np.concatenate([batch.x_q, np.zeros((n, 2))], axis=1)
    S0 = np.matmul(C.transpose(0, 2, 1), C)
    S1 = S0 + e1[:, :, None] * e1[:, None, :]
    z_hat = _linear_pred(S1, M, e1, gz, D)
    e2 = e1.copy()
    e2[:, d] = z_hat
    S2 = S0 + e2[:, :, None] * e2[:, None, :]
    y_hat = _linear_pred(S2, M, e2, gy, D)
    resid = y_hat - batch.y_q
    rho = 2.0 * resid / n
    S2g = np.einsum("nmk,k->nm", S2, gy)
    S2Me2 = np.einsum("nmk,nk->nm", S2, e2 @ M.T)
    d_score = np.einsum("n,nm,nk->mk", rho, S2g, e2) / D
    d_readout = np.zeros_like(p.readout)
    d_readout[d + 1] = np.einsum("n,nm->m", rho, S2Me2) / D
    if through_zhat:
        e2Me2 = np.einsum("nm,nm->n", e2, e2 @ M.T)
        # dy_hat/dz_hat: the query column enters the score, the key side, and the value side
        w = (gy[d] * e2Me2 + (e2 @ gy) * (e2 @ M[d]) + S2g @ M[:, d]) / D
        rho_w = rho * w
        S1g = np.einsum("nmk,k->nm", S1, gz)
        S1Me1 = np.einsum("nmk,nk->nm", S1, e1 @ M.T)
        d_score += np.einsum("n,nm,nk->mk", rho_w, S1g, e1) / D
        d_readout[d] = np.einsum("n,nm->m", rho_w, S1Me1) / D
    return DenseGrad(d_score, d_readout), float(np.mean(resid**2))


def _grad_softmax_single(
    C: np.ndarray, e: np.ndarray, row: int, p: FullAttentionParams, target: np.ndarray
) -> tuple[DenseGrad, float]:
    n = C.shape[0]
    g = p.readout[row]
    pred, w, phi = _softmax_pred(C, p.score, e, g)
    resid = pred - target
    rho = 2.0 * resid / n
    Cfull = np.concatenate([C, e[:, None, :]], axis=1)
    q = w * (phi - pred[:, None])
    d_score = np.einsum("n,nj,njm,nk->mk", rho, q, Cfull, e)
    d_readout = np.zeros_like(p.readout)
    d_readout[row] = np.einsum("n,nj,njm->m", rho, w, Cfull)
    return DenseGrad(d_score, d_readout), float(np.mean(resid**2))


def _grad_softmax_coherent(
    batch: PromptBatch, p: FullAttentionParams, through_zhat: bool
) -> tuple[DenseGrad, float]:
    n, D = batch.zs.shape
    d = batch.xs.shape[2]
    M = p.score
    gz, gy = p.readout[d], p.readout[d + 1]
    C = _cot_columns(batch)
    e1 = np.concatenate([batch.x_q, np.zeros((n, 2))], axis=1)
    z_hat, w1, phi1 = _softmax_pred(C, M, e1, gz)
    e2 = e1.copy()
    e2[:, d] = z_hat
    y_hat, w2, phi2 = _softmax_pred(C, M, e2, gy)
    resid = y_hat - batch.y_q
    rho = 2.0 * resid / n
    C2full = np.concatenate([C, e2[:, None, :]], axis=1)
    q2 = w2 * (phi2 - y_hat[:, None])
    d_score = np.einsum("n,nj,njm,nk->mk", rho, q2, C2full, e2)
    d_readout = np.zeros_like(p.readout)
    d_readout[d + 1] = np.einsum("n,nj,njm->m", rho, w2, C2full)
    if through_zhat:
        # chain rule through the spliced query entry
        Me2 = e2 @ M.T
        MTe2 = e2 @ M
        # demo columns: da2_j/dz = c_j . M[:, d]; query column: (M e2)[d] + (M^T e2)[d]
        da = C @ M[:, d]
        da_query = Me2[:, d] + MTe2[:, d]
        dafull = np.concatenate([da, da_query[:, None]], axis=1)
        dy_dz = np.einsum("nj,nj->n", q2, dafull) + w2[:, -1] * gy[d]
        rho_w = rho * dy_dz
        C1full = np.concatenate([C, e1[:, None, :]], axis=1)
        q1 = w1 * (phi1 - z_hat[:, None])
        d_score += np.einsum("n,nj,njm,nk->mk", rho_w, q1, C1full, e1)
        d_readout[d] = np.einsum("n,nj,njm->m", rho_w, w1, C1full)
    return DenseGrad(d_score, d_readout), float(np.mean(resid**2))


def _grad_structured_coherent(
    batch: PromptBatch, p: CoherentParams
) -> tuple[np.ndarray, float]:
    n, D = batch.zs.shape
    s = np.einsum("nij,nj->ni", batch.xs, batch.x_q)
    z_hat = np.einsum("ni,ni->n", batch.zs, s) / D
    P1 = np.einsum("ni,ni->n", batch.ys, s) / D
    P2 = np.einsum("ni,ni->n", batch.ys, batch.zs) / D * z_hat
    y_hat = (p.v_x * P1 + p.v_z * P2) / p.v_y
    resid = y_hat - batch.y_q
    g = np.array(
        [
            2.0 * np.mean(resid * P1) / p.v_y,
            2.0 * np.mean(resid * P2) / p.v_y,
            -2.0 * np.mean(resid * y_hat) / p.v_y,
        ]
    )
    return g, float(np.mean(resid**2))


def grad(
    prompts: Sequence[PromptInstance] | PromptBatch,
    p: FullAttentionParams | CoherentParams,
    objective: Objective,
    z_feed: np.ndarray | None = None,
    through_zhat: bool = True,
) -> tuple[DenseGrad | np.ndarray, float]:
    """Exact gradient of the batch-mean squared error, plus the loss itself.

    Dense models dispatch on their dimension: with m = d+1 the Z_STEP
    objective trains the first stepwise stage, with m = 2 the Y_FINAL
    objective trains the second stage (``z_feed`` overrides the query
    intermediate, defaulting to the true one), and with m = d+2 the Y_FINAL
    objective trains the coherent model with the gradient flowing through
    the intermediate prediction unless ``through_zhat`` is off. Structured
    coherent parameters yield the 3-vector (dv_x, dv_z, dv_y); their
    intermediate prediction does not depend on the parameters, so Z_STEP
    returns zeros.
    """
    batch = as_batch(prompts)
    n, D = batch.zs.shape
    d = batch.xs.shape[2]
    if isinstance(p, CoherentParams):
        if objective is Objective.Z_STEP:
            return np.zeros(3), float(np.mean((
                np.einsum("ni,ni->n", batch.zs, np.einsum("nij,nj->ni", batch.xs, batch.x_q)) / D
                - batch.z_q) ** 2))
        return _grad_structured_coherent(batch, p)
    if objective is Objective.Z_STEP:
        if p.m == d + 1:
            C = _icl1_columns(batch)
            e = np.concatenate([batch.x_q, np.zeros((n, 1))], axis=1)
            row = d
        elif p.m == d + 2:
            C = _cot_columns(batch)
            e = np.concatenate([batch.x_q, np.zeros((n, 2))], axis=1)
            row = d
        else:
            raise ValueError(f"Z_STEP undefined for m={p.m} with d={d}")
        if p.kind is AttentionKind.LINEAR:
            return _grad_linear_single(C, e, row, p, batch.z_q)
        return _grad_softmax_single(C, e, row, p, batch.z_q)
    if p.m == 2:
        feed = batch.z_q if z_feed is None else np.asarray(z_feed, dtype=float)
        C = _icl2_columns(batch)
        e = np.stack([feed, np.zeros(n)], axis=1)
        if p.kind is AttentionKind.LINEAR:
            return _grad_linear_single(C, e, 1, p, batch.y_q)
        return _grad_softmax_single(C, e, 1, p, batch.y_q)
    if p.m == d + 2:
        if p.kind is AttentionKind.LINEAR:
            return _grad_linear_coherent(batch, p, through_zhat)
        return _grad_softmax_coherent(batch, p, through_zhat)
    raise ValueError(f"Y_FINAL undefined for m={p.m} with d={d}")
