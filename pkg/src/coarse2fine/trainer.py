"""SGD with momentum / weight decay / step-decay schedule, and the
two-phase training loop that adds the instance-proxy loss at epoch M and
refreshes the proxies by k-means after every later epoch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cluster import Membership, kmeans, update_proxies
from .data import Dataset, augment
from .losses import (LossValue, build_coarse_index, coarse_loss,
                     combined_objective, instance_loss_full)
from .model import (ModelParams, branch_forward, encode, encode_backward,
                    init_params, renormalize_heads)

OBJECTIVES = ("ins", "cos", "coins", "coins-imp", "coinsP", "opt")


@dataclass
class TrainConfig:
    objective: str = "coins-imp"
    epochs: int = 200
    ip_start_epoch: Optional[int] = None     # M; defaults to epochs // 2
    lambda_I: float = 1.0
    lambda_P: float = 1.0
    P: Optional[int] = None                  # defaults to max(C, n // 5)
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: list[int] = field(default_factory=lambda: [60, 120, 160])
    lr_decay_factor: float = 5.0
    batch_size: int = 256
    seed: int = 0
    cosine: bool = False
    mlp_head: bool = False
    temperature: float = 0.05
    hidden: list[int] = field(default_factory=lambda: [256])
    embed_dim: int = 128
    pad: int = 4                             # crop padding for image data
    cluster_within_coarse: bool = True
    kmeans_restarts: int = 4

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        m = self.m_epoch(self.epochs)
        if not 0 <= m:
            raise ValueError("ip_start_epoch must be >= 0")
        if any(b >= a for a, b in zip(self.lr_decay_epochs[1:],
                                      self.lr_decay_epochs[:-1])):
            raise ValueError("lr decay epochs must be strictly increasing")

    def m_epoch(self, T: int) -> int:
        return T // 2 if self.ip_start_epoch is None else self.ip_start_epoch


def sgd_step(param: np.ndarray, grad: np.ndarray, state: np.ndarray,
             lr: float, momentum: float, weight_decay: float
             ) -> tuple[np.ndarray, np.ndarray]:
    """g' = grad + wd*param; v <- momentum*v + g'; param <- param - lr*v."""
    if param.shape != grad.shape or param.shape != state.shape:
        raise ValueError("shape mismatch in sgd_step")
    g = grad + weight_decay * param
    state *= momentum
    state += g
    param -= lr * state
    return param, state


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < max(config.epochs, 1):
        raise ValueError(f"epoch {epoch} out of range")
    n_decays = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.lr / (config.lr_decay_factor ** n_decays)


def _dense_head_grad(params: ModelParams, head: str,
                     cols: dict[int, np.ndarray]) -> np.ndarray:
    W = params.head_matrix(head)
    g = np.zeros_like(W)
    for c, vec in cols.items():
        g[:, c] = vec
    return g


class _Velocities:
    def __init__(self, params: ModelParams):
        self.enc = [(np.zeros_like(W), np.zeros_like(b))
                    for W, b in params.encoder]
        self.heads = {"coarse": np.zeros_like(params.W_C),
                      "instance": np.zeros_like(params.W_I)}
        self.mlp = None if params.mlp_head is None else \
            (np.zeros_like(params.mlp_head[0]), np.zeros_like(params.mlp_head[1]))


def apply_gradients(params: ModelParams, lv: LossValue, vel: _Velocities,
                    lr: float, momentum: float, weight_decay: float) -> None:
    """One SGD step on everything the loss touched (proxy-head gradients are
    discarded: W_P is rebuilt from W_I by clustering, never trained)."""
    enc_grads = encode_backward(params, lv.encoder_cache, lv.grad_embeddings)
    for (W, b), (gW, gb), (vW, vb) in zip(params.encoder, enc_grads, vel.enc):
        sgd_step(W, gW, vW, lr, momentum, weight_decay)
        sgd_step(b, gb, vb, lr, momentum, 0.0)       # no decay on biases
    for head, cols in lv.grad_heads.items():
        if head == "proxy":
            continue
        W = params.head_matrix(head)
        sgd_step(W, _dense_head_grad(params, head, cols), vel.heads[head],
                 lr, momentum, weight_decay)
    if lv.grad_mlp_head is not None:
        for p, g, v in zip(params.mlp_head, lv.grad_mlp_head, vel.mlp):
            sgd_step(p, g, v, lr, momentum, weight_decay)
    if params.cosine:
        renormalize_heads(params)


def _batch_loss(params: ModelParams, config: TrainConfig, X: np.ndarray,
                ids: np.ndarray, coarse: np.ndarray, coarse_index,
                class_labels: np.ndarray,
                membership: Optional[Membership], proxy_phase: bool) -> LossValue:
    obj = config.objective
    if obj == "ins":
        return instance_loss_full(params, X, ids)
    if obj in ("cos", "opt"):
        return coarse_loss(params, X, class_labels[ids])
    within = obj != "coins"
    lam_p = config.lambda_P if (obj == "coinsP" and proxy_phase) else 0.0
    return combined_objective(params, X, ids, coarse[ids], coarse_index,
                              config.lambda_I, lam_p,
                              membership=membership, within_coarse=within)


def _epoch_metrics(params: ModelParams, config: TrainConfig, dataset: Dataset,
                   coarse_index, class_labels: np.ndarray,
                   membership: Optional[Membership], proxy_phase: bool,
                   epoch: int, lr: float) -> dict:
    """Full-batch loss terms on clean data at the current parameters."""
    ids = np.arange(dataset.n)
    X = dataset.examples
    obj = config.objective
    loss_c = loss_i = loss_p = 0.0
    if obj == "ins":
        loss_i = instance_loss_full(params, X, ids).value
        total = loss_i
    elif obj in ("cos", "opt"):
        loss_c = coarse_loss(params, X, class_labels).value
        total = loss_c
    else:
        lam_p = config.lambda_P if (obj == "coinsP" and proxy_phase) else 0.0
        lv = combined_objective(params, X, ids, dataset.coarse_labels,
                                coarse_index, config.lambda_I, lam_p,
                                membership=membership,
                                within_coarse=obj != "coins")
        loss_c = lv.components.get("coarse", 0.0)
        loss_i = lv.components.get("instance", 0.0)
        loss_p = lv.components.get("proxy", 0.0)
        total = lv.value
    f, _ = encode(params, X)
    g, _ = branch_forward(params, f, "instance")
    w_gap = float(np.mean(np.sum((g - params.W_I.T) ** 2, axis=1)))
    return {"epoch": epoch, "lr": lr, "loss_coarse": loss_c,
            "loss_instance": loss_i, "loss_proxy": loss_p,
            "loss_total": total, "w_gap": w_gap}


def train(config: TrainConfig, dataset: Dataset
          ) -> tuple[ModelParams, list[dict], Optional[Membership]]:
    """Run the two-phase training loop; returns final parameters, one
    metrics record per epoch, and the final cluster membership (if any)."""
    config.validate()
    dataset.validate()
    if config.objective == "opt" and dataset.fine_labels is None:
        raise ValueError("objective 'opt' needs fine labels")
    n = dataset.n
    T = config.epochs
    M = config.m_epoch(T)
    if config.objective == "coinsP" and M >= T:
        import warnings
        warnings.warn("ip_start_epoch >= epochs: the instance-proxy phase "
                      "never runs", stacklevel=2)

    head_C = dataset.F if config.objective == "opt" else dataset.C
    class_labels = dataset.fine_labels if config.objective == "opt" \
        else dataset.coarse_labels
    params = init_params(dataset.dim, config.hidden, config.embed_dim,
                         head_C, n, seed=config.seed, cosine=config.cosine,
                         mlp_head=config.mlp_head,
                         temperature=config.temperature)
    vel = _Velocities(params)
    coarse_index = build_coarse_index(dataset.coarse_labels)
    P = config.P if config.P is not None else max(dataset.C, n // 5)
    membership: Optional[Membership] = None
    metrics: list[dict] = []

    def recluster(t: int) -> Membership:
        m, _ = kmeans(params.W_I, P, seed=config.seed * 1000003 + t,
                      restarts=config.kmeans_restarts,
                      coarse_labels=dataset.coarse_labels
                      if config.cluster_within_coarse else None)
        params.W_P = update_proxies(params.W_I, m, cosine=config.cosine)
        return m

    if config.objective == "coinsP" and M == 0 and T > 0:
        membership = recluster(0)

    for t in range(1, T + 1):
        lr = lr_at(config, t - 1)
        rng = np.random.default_rng([config.seed, t])
        perm = rng.permutation(n)
        proxy_phase = config.objective == "coinsP" and t > M
        for start in range(0, n, config.batch_size):
            batch_ids = perm[start:start + config.batch_size]
            X = dataset.examples[batch_ids]
            if dataset.image_shape is not None:
                h, w = dataset.image_shape
                X = np.stack([augment(x, h, w, config.pad, rng) for x in X])
            lv = _batch_loss(params, config, X, batch_ids,
                             dataset.coarse_labels, coarse_index,
                             class_labels, membership, proxy_phase)
            apply_gradients(params, lv, vel, lr, config.momentum,
                            config.weight_decay)

        if config.objective == "coinsP" and t >= M:
            membership = recluster(t)
        metrics.append(_epoch_metrics(params, config, dataset, coarse_index,
                                      class_labels, membership, proxy_phase,
                                      t, lr))
    return params, metrics, membership


# --- flat parameter vector helpers (used by the gradient checks) --------

def param_vector(params: ModelParams) -> np.ndarray:
    parts = []
    for W, b in params.encoder:
        parts += [W.ravel(), b.ravel()]
    parts += [params.W_C.ravel(), params.W_I.ravel()]
    if params.W_P is not None:
        parts.append(params.W_P.ravel())
    if params.mlp_head is not None:
        parts += [params.mlp_head[0].ravel(), params.mlp_head[1].ravel()]
    return np.concatenate(parts)


def set_param_vector(params: ModelParams, vec: np.ndarray) -> ModelParams:
    """New ModelParams with the same shapes, values taken from vec."""
    off = 0

    def take(shape):
        nonlocal off
        size = int(np.prod(shape))
        out = vec[off:off + size].reshape(shape).copy()
        off += size
        return out

    encoder = [(take(W.shape), take(b.shape)) for W, b in params.encoder]
    W_C = take(params.W_C.shape)
    W_I = take(params.W_I.shape)
    W_P = take(params.W_P.shape) if params.W_P is not None else None
    mlp = None
    if params.mlp_head is not None:
        mlp = (take(params.mlp_head[0].shape), take(params.mlp_head[1].shape))
    if off != vec.size:
        raise ValueError("vector length does not match parameter count")
    return ModelParams(encoder=encoder, W_C=W_C, W_I=W_I, W_P=W_P,
                       mlp_head=mlp, cosine=params.cosine,
                       temperature=params.temperature)


def gradient_vector(params: ModelParams, lv: LossValue) -> np.ndarray:
    """Flat end-to-end gradient matching param_vector's layout."""
    enc_grads = encode_backward(params, lv.encoder_cache, lv.grad_embeddings)
    parts = []
    for gW, gb in enc_grads:
        parts += [gW.ravel(), gb.ravel()]
    for head in ("coarse", "instance"):
        g = _dense_head_grad(params, head, lv.grad_heads.get(head, {}))
        parts.append(g.ravel())
    if params.W_P is not None:
        parts.append(_dense_head_grad(params, "proxy",
                                      lv.grad_heads.get("proxy", {})).ravel())
    if params.mlp_head is not None:
        if lv.grad_mlp_head is None:
            parts += [np.zeros_like(params.mlp_head[0]).ravel(),
                      np.zeros_like(params.mlp_head[1]).ravel()]
        else:
            parts += [lv.grad_mlp_head[0].ravel(), lv.grad_mlp_head[1].ravel()]
    return np.concatenate(parts)
