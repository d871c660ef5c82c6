"""Training objectives with analytic gradients.

Each loss returns the mean cross-entropy over the batch together with
gradients w.r.t. the backbone embeddings and the touched head columns
(and the projection weights when the instance/proxy branch has one).
Instance-head column reads are counted so the within-coarse speedup can
be verified exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .cluster import Membership
from .model import (EncodeCache, ModelParams, branch_backward, branch_forward,
                    encode, head_logits)
from .numerics import log_softmax_rows, softmax_rows


class AccessCounter:
    """Counts instance-head column reads (one per column per example)."""

    def __init__(self) -> None:
        self.reads = 0

    def add(self, k: int) -> None:
        self.reads += k

    def reset(self) -> None:
        self.reads = 0


# global counter for W_I column accesses; reset it around a measurement
WI_READS = AccessCounter()


@dataclass
class LossValue:
    value: float
    grad_embeddings: np.ndarray                       # w.r.t. backbone f(x)
    grad_heads: dict[str, dict[int, np.ndarray]]      # head -> column -> d-vector
    grad_mlp_head: Optional[tuple[np.ndarray, np.ndarray]] = None
    encoder_cache: Optional[EncodeCache] = None
    components: dict[str, float] = field(default_factory=dict)

    @property
    def grad_head_columns(self) -> dict[int, np.ndarray]:
        """Column gradients when exactly one head is touched."""
        if len(self.grad_heads) != 1:
            raise ValueError("loss touches multiple heads; use grad_heads")
        return next(iter(self.grad_heads.values()))

    def check_finite(self) -> "LossValue":
        if not np.isfinite(self.value) or not np.all(np.isfinite(self.grad_embeddings)):
            raise FloatingPointError("non-finite loss or gradient")
        return self


def _ce_block(params: ModelParams, G: np.ndarray, head: str,
              cols: Optional[np.ndarray], label_pos: np.ndarray,
              denom: int) -> tuple[float, np.ndarray, dict[int, np.ndarray]]:
    """Cross-entropy of G against head columns, summed and divided by denom.

    Returns (value, grad wrt G, per-column head gradients)."""
    logits = head_logits(params, G, head, cols)
    logp = log_softmax_rows(logits)
    rows = np.arange(G.shape[0])
    value = float(-np.sum(logp[rows, label_pos])) / denom
    dlogits = softmax_rows(logits)
    dlogits[rows, label_pos] -= 1.0
    dlogits /= denom
    if params.cosine:
        dlogits = dlogits / params.temperature
    W = params.head_matrix(head)
    Wsel = W if cols is None else W[:, cols]
    dG = dlogits @ Wsel.T
    dW = G.T @ dlogits                               # d x n_cols
    col_ids = np.arange(W.shape[1]) if cols is None else cols
    col_grads = {int(c): dW[:, j] for j, c in enumerate(col_ids)}
    return value, dG, col_grads


def _merge_cols(into: dict[int, np.ndarray], new: Mapping[int, np.ndarray],
                weight: float = 1.0) -> None:
    for c, g in new.items():
        if c in into:
            into[c] = into[c] + weight * g
        else:
            into[c] = weight * g


def coarse_loss(params: ModelParams, batch: np.ndarray,
                coarse_labels: np.ndarray) -> LossValue:
    """Mean coarse-class cross-entropy on the coarse head."""
    y = np.asarray(coarse_labels, dtype=np.int64)
    C = params.W_C.shape[1]
    if y.min(initial=0) < 0 or y.max(initial=0) >= C:
        raise ValueError("coarse label out of range")
    f, ecache = encode(params, batch)
    value, dG, col_grads = _ce_block(params, f, "coarse", None, y, f.shape[0])
    return LossValue(value=value, grad_embeddings=dG,
                     grad_heads={"coarse": col_grads},
                     encoder_cache=ecache).check_finite()


def instance_loss_full(params: ModelParams, batch: np.ndarray,
                       instance_ids: np.ndarray) -> LossValue:
    """Mean cross-entropy over all n instance-head columns."""
    ids = np.asarray(instance_ids, dtype=np.int64)
    n = params.W_I.shape[1]
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= n:
        raise ValueError("instance id out of range")
    f, ecache = encode(params, batch)
    G, bcache = branch_forward(params, f, "instance")
    WI_READS.add(G.shape[0] * n)
    value, dG, col_grads = _ce_block(params, G, "instance", None, ids, G.shape[0])
    dF, dmlp = branch_backward(params, bcache, dG)
    return LossValue(value=value, grad_embeddings=dF,
                     grad_heads={"instance": col_grads}, grad_mlp_head=dmlp,
                     encoder_cache=ecache).check_finite()


def _within_coarse_term(params: ModelParams, G: np.ndarray, ids: np.ndarray,
                        coarse_labels: np.ndarray,
                        coarse_index: Mapping[int, Sequence[int]],
                        denom: int) -> tuple[float, np.ndarray, dict[int, np.ndarray]]:
    value = 0.0
    dG = np.zeros_like(G)
    col_grads: dict[int, np.ndarray] = {}
    for k in sorted(set(coarse_labels.tolist())):
        members = np.asarray(coarse_index[k], dtype=np.int64)
        rows = np.nonzero(coarse_labels == k)[0]
        pos_of = {int(j): p for p, j in enumerate(members)}
        try:
            label_pos = np.asarray([pos_of[int(i)] for i in ids[rows]])
        except KeyError as exc:
            raise ValueError(
                f"example {exc} not listed in coarse class {k} membership") from exc
        WI_READS.add(len(rows) * len(members))
        v, dGk, cg = _ce_block(params, G[rows], "instance", members, label_pos, denom)
        value += v
        dG[rows] += dGk
        _merge_cols(col_grads, cg)
    return value, dG, col_grads


def instance_loss_within_coarse(params: ModelParams, batch: np.ndarray,
                                instance_ids: np.ndarray,
                                coarse_labels: np.ndarray,
                                coarse_index: Mapping[int, Sequence[int]]) -> LossValue:
    """Instance cross-entropy restricted to same-coarse-class columns.

    Only the member columns of each example's coarse class are ever read;
    the per-example head cost is O(d n_k) instead of O(d n).
    """
    ids = np.asarray(instance_ids, dtype=np.int64)
    y = np.asarray(coarse_labels, dtype=np.int64)
    f, ecache = encode(params, batch)
    G, bcache = branch_forward(params, f, "instance")
    value, dG, col_grads = _within_coarse_term(params, G, ids, y, coarse_index,
                                               G.shape[0])
    dF, dmlp = branch_backward(params, bcache, dG)
    return LossValue(value=value, grad_embeddings=dF,
                     grad_heads={"instance": col_grads}, grad_mlp_head=dmlp,
                     encoder_cache=ecache).check_finite()


def instance_proxy_loss(params: ModelParams, batch: np.ndarray,
                        instance_ids: np.ndarray,
                        membership: Membership) -> LossValue:
    """Cross-entropy against the assigned cluster over all P proxy columns."""
    if params.W_P is None:
        raise RuntimeError("instance-proxy loss requested before the proxy "
                           "head was initialized")
    ids = np.asarray(instance_ids, dtype=np.int64)
    y_p = membership.assignment[ids]
    f, ecache = encode(params, batch)
    G, bcache = branch_forward(params, f, "proxy")
    value, dG, col_grads = _ce_block(params, G, "proxy", None, y_p, G.shape[0])
    dF, dmlp = branch_backward(params, bcache, dG)
    return LossValue(value=value, grad_embeddings=dF,
                     grad_heads={"proxy": col_grads}, grad_mlp_head=dmlp,
                     encoder_cache=ecache).check_finite()


def combined_objective(params: ModelParams, batch: np.ndarray,
                       instance_ids: np.ndarray, coarse_labels: np.ndarray,
                       coarse_index: Mapping[int, Sequence[int]],
                       lambda_I: float, lambda_P: float,
                       membership: Optional[Membership] = None,
                       within_coarse: bool = True) -> LossValue:
    """coarse + lambda_I * instance + lambda_P * instance-proxy.

    `within_coarse` selects the decomposed instance term; with it off the
    full n-way instance loss is used instead.
    """
    if lambda_I < 0 or lambda_P < 0:
        raise ValueError("loss weights must be non-negative")
    if lambda_P > 0 and (membership is None or params.W_P is None):
        raise RuntimeError("proxy term requires a membership and W_P")
    ids = np.asarray(instance_ids, dtype=np.int64)
    y = np.asarray(coarse_labels, dtype=np.int64)
    f, ecache = encode(params, batch)
    batch_size = f.shape[0]

    value, dF, col_grads_c = _ce_block(params, f, "coarse", None, y, batch_size)
    grad_heads: dict[str, dict[int, np.ndarray]] = {"coarse": col_grads_c}
    components = {"coarse": value}
    mlp_grad: Optional[tuple[np.ndarray, np.ndarray]] = None

    def add_mlp(dmlp, weight):
        nonlocal mlp_grad
        if dmlp is None:
            return
        if mlp_grad is None:
            mlp_grad = (weight * dmlp[0], weight * dmlp[1])
        else:
            mlp_grad = (mlp_grad[0] + weight * dmlp[0],
                        mlp_grad[1] + weight * dmlp[1])

    if lambda_I > 0:
        G, bcache = branch_forward(params, f, "instance")
        if within_coarse:
            v_i, dG, cg = _within_coarse_term(params, G, ids, y, coarse_index,
                                              batch_size)
        else:
            n = params.W_I.shape[1]
            WI_READS.add(batch_size * n)
            v_i, dG, cg = _ce_block(params, G, "instance", None, ids, batch_size)
        dFi, dmlp = branch_backward(params, bcache, dG)
        value += lambda_I * v_i
        dF = dF + lambda_I * dFi
        _merge_cols(grad_heads.setdefault("instance", {}), cg, lambda_I)
        add_mlp(dmlp, lambda_I)
        components["instance"] = v_i

    if lambda_P > 0:
        G, bcache = branch_forward(params, f, "proxy")
        v_p, dG, cg = _ce_block(params, G, "proxy", None,
                                membership.assignment[ids], batch_size)
        dFp, dmlp = branch_backward(params, bcache, dG)
        value += lambda_P * v_p
        dF = dF + lambda_P * dFp
        _merge_cols(grad_heads.setdefault("proxy", {}), cg, lambda_P)
        add_mlp(dmlp, lambda_P)
        components["proxy"] = v_p

    return LossValue(value=value, grad_embeddings=dF, grad_heads=grad_heads,
                     grad_mlp_head=mlp_grad, encoder_cache=ecache,
                     components=components).check_finite()


def margin_diagnostic(params: ModelParams, batch: np.ndarray,
                      instance_ids: np.ndarray,
                      membership: Membership) -> float:
    """Achieved margin surrogate: sum_i (||g_i - w_own||^2 -
    mean_{p != own} ||g_i - w_p||^2). Report-only, never optimized."""
    if params.W_P is None:
        raise RuntimeError("margin diagnostic requires the proxy head")
    ids = np.asarray(instance_ids, dtype=np.int64)
    f, _ = encode(params, batch)
    G, _ = branch_forward(params, f, "proxy")
    W = params.W_P
    P = W.shape[1]
    # squared distances to every proxy, batch x P
    d2 = (np.sum(G * G, axis=1, keepdims=True)
          - 2.0 * G @ W + np.sum(W * W, axis=0, keepdims=True))
    own = membership.assignment[ids]
    rows = np.arange(G.shape[0])
    own_d2 = d2[rows, own]
    if P > 1:
        others = (np.sum(d2, axis=1) - own_d2) / (P - 1)
    else:
        others = np.zeros_like(own_d2)
    return float(np.sum(own_d2 - others))


def build_coarse_index(coarse_labels: np.ndarray) -> dict[int, np.ndarray]:
    """Map coarse class -> ascending global ids of its members."""
    y = np.asarray(coarse_labels, dtype=np.int64)
    return {int(k): np.nonzero(y == k)[0] for k in np.unique(y)}
