"""Coarse localisation: cross-attention from query tokens onto the base grid.

Forward pass, per sample::

    B   = unit_rows(base - mean_n(base))         (N, D), fixed standardisation
    Xq = query + query_pos                       (T, D)
    Xb = B + base_pos                            (N, D)
    A_h = softmax(Xq Wq_h (Xb Wk_h)^T / sqrt(d)) (T, N), one per head
    O   = concat_h(A_h Xb Wv_h) Wo               (T, D)
    z   = mean_t(O) W_head + b_head              (N,)

Everything is numpy with hand-derived gradients; batches are stacked on a
leading axis.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ShapeError, TrainingDivergedError
from .geom import GridIndex, MapSpec, cell_center

log = logging.getLogger(__name__)

PARAM_ORDER = ("query_pos", "base_pos", "w_q", "w_k", "w_v", "w_o", "w_head", "b_head")


@dataclass
class RetrievalParams:
    query_pos: np.ndarray  # (T, D)
    base_pos: np.ndarray   # (N, D)
    w_q: np.ndarray        # (D, D), columns grouped by head
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_head: np.ndarray     # (D, N)
    b_head: np.ndarray     # (N,)
    heads: int = 8

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads:
            raise ShapeError(f"{self.heads} heads do not divide dim {d}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.query_pos.shape[0]

    @property
    def n_cells(self) -> int:
        return self.base_pos.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_ORDER}

    def copy(self) -> "RetrievalParams":
        return RetrievalParams(**{k: v.copy() for k, v in self.tensors().items()}, heads=self.heads)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors().values())

    @classmethod
    def init(cls, n_tokens: int = 100, n_cells: int = 100, dim: int = 64, heads: int = 8,
             seed: int = 0) -> "RetrievalParams":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x424D4D50]))

        def glorot(a, b):
            return rng.normal(0.0, math.sqrt(2.0 / (a + b)), (a, b))

        return cls(
            query_pos=rng.normal(0.0, 0.02, (n_tokens, dim)),
            base_pos=rng.normal(0.0, 0.02, (n_cells, dim)),
            w_q=glorot(dim, dim), w_k=glorot(dim, dim), w_v=glorot(dim, dim),
            w_o=glorot(dim, dim), w_head=glorot(dim, n_cells),
            b_head=np.zeros(n_cells), heads=heads)


class RetrievalScores(NamedTuple):
    logits: np.ndarray  # (N,) flat row-major over the grid


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def standardize_base(base: np.ndarray) -> np.ndarray:
    """Remove the grid-wide mean descriptor and rescale each cell to unit length.

    Pooled cells share a dominant background direction; centring exposes what
    distinguishes them. All-equal grids map to zeros.
    """
    c = base - base.mean(axis=-2, keepdims=True)
    n = np.linalg.norm(c, axis=-1, keepdims=True)
    return np.where(n > 1e-12, c / np.where(n > 1e-12, n, 1.0), 0.0)


def forward(query: np.ndarray, base: np.ndarray, p: RetrievalParams):
    """Batched logits and the cache needed for :func:`backward`.

    ``query`` is (B, T, D) and ``base`` is (B, N, D).
    """
    if query.ndim == 2:
        query = query[None]
    if base.ndim == 2:
        base = np.broadcast_to(base, (query.shape[0],) + base.shape)
    b, t, d = query.shape
    if (t, d) != p.query_pos.shape or base.shape[1:] != p.base_pos.shape:
        raise ShapeError(f"query {query.shape} / base {base.shape} do not match params "
                         f"{p.query_pos.shape} / {p.base_pos.shape}")
    xq = query + p.query_pos
    xb = standardize_base(base) + p.base_pos
    dh = d // p.heads
    q = _split(xq @ p.w_q, p.heads)
    k = _split(xb @ p.w_k, p.heads)
    v = _split(xb @ p.w_v, p.heads)
    attn = _softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
    o = _merge(attn @ v)
    pooled = (o @ p.w_o).mean(axis=1)
    logits = pooled @ p.w_head + p.b_head
    cache = dict(xq=xq, xb=xb, q=q, k=k, v=v, attn=attn, o=o, pooled=pooled)
    return logits, cache


def backward(dlogits: np.ndarray, cache: dict, p: RetrievalParams) -> RetrievalParams:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dlogits (B, N)."""
    xq, xb, q, k, v, attn, o, pooled = (cache[n] for n in
                                        ("xq", "xb", "q", "k", "v", "attn", "o", "pooled"))
    b, t, d = xq.shape
    scale = 1.0 / math.sqrt(d // p.heads)
    g_head = pooled.T @ dlogits
    g_bias = dlogits.sum(axis=0)
    dpooled = dlogits @ p.w_head.T                      # (B, D)
    # mean over tokens commutes with the output projection
    g_o = o.mean(axis=1).T @ dpooled
    do = np.broadcast_to((dpooled @ p.w_o.T)[:, None, :] / t, o.shape)
    do = _split(np.ascontiguousarray(do), p.heads)      # (B, H, T, dh)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = _merge(ds @ k) * scale
    dk = _merge(ds.transpose(0, 1, 3, 2) @ q) * scale
    dv = _merge(dv)
    g_q = np.einsum("btd,bte->de", xq, dq)
    g_k = np.einsum("bnd,bne->de", xb, dk)
    g_v = np.einsum("bnd,bne->de", xb, dv)
    dxq = dq @ p.w_q.T
    dxb = dk @ p.w_k.T + dv @ p.w_v.T
    return RetrievalParams(query_pos=dxq.sum(axis=0), base_pos=dxb.sum(axis=0),
                           w_q=g_q, w_k=g_k, w_v=g_v, w_o=g_o, w_head=g_head,
                           b_head=g_bias, heads=p.heads)


def score_cells(query, base, params: RetrievalParams) -> RetrievalScores:
    """Logits for one query TokenGrid against one BaseGrid."""
    qd = query.flat() if hasattr(query, "flat") else np.asarray(query).reshape(-1, params.dim)
    bd = base.flat() if hasattr(base, "flat") else np.asarray(base).reshape(-1, params.dim)
    logits, _ = forward(qd[None].astype(np.float64), bd[None].astype(np.float64), params)
    return RetrievalScores(logits[0])


def soft_target(target: GridIndex, spec: MapSpec = MapSpec(), sigma_d: float = 50.0) -> np.ndarray:
    """Normalised Gaussian over cell centres around the target cell centre."""
    if sigma_d <= 0:
        raise ValueError("sigma_d must be positive")
    g = spec.grid_dim
    cx, cy = cell_center(target, spec)
    rows, cols = np.divmod(np.arange(g * g), g)
    px = (cols + 0.5) * spec.cell_m
    py = spec.extent_m - (rows + 0.5) * spec.cell_m
    logw = -((px - cx) ** 2 + (py - cy) ** 2) / (2.0 * sigma_d ** 2)
    w = np.exp(logw - logw.max())
    return w / w.sum()


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    sigma_d: float = 50.0

    def __post_init__(self):
        if self.lam < 0 or self.sigma_d <= 0:
            raise ValueError("need lam >= 0 and sigma_d > 0")


class LossValue(NamedTuple):
    total: float
    bce: float
    dist: float
    grad: np.ndarray  # dL/dlogits, same shape as the logits


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def batch_loss(logits: np.ndarray, onehot: np.ndarray, soft: np.ndarray,
               lam: float) -> LossValue:
    """BCE-with-logits (mean over B*N) plus lam * soft-target cross-entropy (mean over B)."""
    z = np.atleast_2d(logits)
    y = np.atleast_2d(onehot)
    yt = np.atleast_2d(soft)
    b, n = z.shape
    bce = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    l_bce = float(bce.sum() / (b * n))
    lsm = _log_softmax(z)
    l_dist = float(-(yt * lsm).sum() / b)
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    grad = (sig - y) / (b * n) + lam * (np.exp(lsm) * yt.sum(axis=1, keepdims=True) - yt) / b
    return LossValue(l_bce + lam * l_dist, l_bce, l_dist, grad.reshape(np.shape(logits)))


def loss(scores: RetrievalScores | np.ndarray, target: GridIndex, cfg: LossConfig = LossConfig(),
         spec: MapSpec = MapSpec()) -> LossValue:
    z = np.asarray(scores.logits if isinstance(scores, RetrievalScores) else scores, np.float64)
    y = np.zeros_like(z)
    y[target.flat(spec.grid_dim)] = 1.0
    return batch_loss(z, y, soft_target(target, spec, cfg.sigma_d), cfg.lam)


def top_cells(scores: RetrievalScores | np.ndarray, k: int = 1, grid_dim: int = 10) -> list[GridIndex]:
    """The ``k`` highest-scoring cells, ties broken toward the lower flat index."""
    z = np.asarray(scores.logits if isinstance(scores, RetrievalScores) else scores)
    if not 1 <= k <= z.size:
        raise ValueError(f"k must lie in [1, {z.size}]")
    order = np.argsort(-z, kind="stable")[:k]
    return [GridIndex.from_flat(int(i), grid_dim) for i in order]


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9   # first-moment decay
    beta2: float = 0.999    # second-moment decay
    epochs: int = 60
    batch: int = 32
    lam: float = 1.0
    sigma_d: float = 50.0
    seed: int = 0
    dim: int = 64
    heads: int = 8
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")
        if not (0.0 <= self.momentum < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("moment decays must lie in [0, 1)")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("need epochs >= 0 and batch >= 1")
        if self.lam < 0 or self.sigma_d <= 0:
            raise ValueError("need lam >= 0 and sigma_d > 0")
        if self.dim % self.heads:
            raise ValueError(f"{self.heads} heads do not divide dim {self.dim}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainSet:
    """Pre-tokenised training material.

    ``views[i]`` holds one or more query token arrays (V, T, D) for sample ``i``
    (rotation-augmented renders); ``bases[map_id]`` is the (N, D) base grid.
    """

    views: list[np.ndarray]
    map_ids: list[str]
    cells: list[GridIndex]
    bases: dict[str, np.ndarray]


@dataclass
class TrainResult:
    params: RetrievalParams
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _cosine_lr(base, step, total):
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def evaluate_top(params: RetrievalParams, views: Sequence[np.ndarray], bases: Sequence[np.ndarray],
                 cells: Sequence[GridIndex], grid_dim: int, chunk: int = 256) -> tuple[float, float]:
    """(top1x1, top3x3) where each sample's views are scored jointly by per-cell max."""
    if not cells:
        return 0.0, 0.0
    hit1 = hit3 = 0
    for s in range(0, len(cells), chunk):
        vs = views[s:s + chunk]
        counts = [v.shape[0] for v in vs]
        q = np.concatenate(vs, axis=0)
        bb = np.concatenate([np.broadcast_to(b, (c,) + b.shape)
                             for b, c in zip(bases[s:s + chunk], counts)], axis=0)
        z, _ = forward(q, bb, params)
        start = 0
        for c, cell in zip(counts, cells[s:s + chunk]):
            best = GridIndex.from_flat(int(np.argmax(z[start:start + c].max(axis=0))), grid_dim)
            start += c
            hit1 += best == cell
            hit3 += best.chebyshev(cell) <= 1
    return hit1 / len(cells), hit3 / len(cells)


def train(train_set: TrainSet, cfg: TrainConfig = TrainConfig(), spec: MapSpec = MapSpec(),
          val: tuple[list[np.ndarray], list[str], list[GridIndex]] | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam-style momentum descent with cosine decay on BCE + lam * distance loss.

    Each epoch draws one augmented view per sample. Returns the parameters with
    the best held-out Top-3x3 accuracy (the initialisation when ``epochs == 0``).
    """
    n = len(train_set.cells)
    if n == 0:
        raise ValueError("training set is empty")
    t, d = train_set.views[0].shape[1:]
    g = spec.grid_dim
    params = RetrievalParams.init(t, g * g, d, cfg.heads, cfg.seed)
    best = TrainResult(params.copy(), [], 0)
    if cfg.epochs == 0:
        return best
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5452]))
    m1 = {k: np.zeros_like(v) for k, v in params.tensors().items()}
    m2 = {k: np.zeros_like(v) for k, v in params.tensors().items()}
    onehots = np.zeros((n, g * g))
    softs = np.zeros((n, g * g))
    for i, c in enumerate(train_set.cells):
        onehots[i, c.flat(g)] = 1.0
        softs[i] = soft_target(c, spec, cfg.sigma_d)
    bases = train_set.bases
    steps_per_epoch = math.ceil(n / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    best_key = (-1.0, -1.0)
    trace: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        pick = [int(rng.integers(train_set.views[i].shape[0])) for i in range(n)]
        ep_loss = 0.0
        for bi in range(steps_per_epoch):
            idx = order[bi * cfg.batch:(bi + 1) * cfg.batch]
            q = np.stack([train_set.views[i][pick[i]] for i in idx])
            b = np.stack([bases[train_set.map_ids[i]] for i in idx])
            z, cache = forward(q, b, params)
            lv = batch_loss(z, onehots[idx], softs[idx], cfg.lam)
            trace = (trace + [lv.total])[-10:]
            if not math.isfinite(lv.total):
                raise TrainingDivergedError("non-finite training loss", epoch, bi, trace)
            grads = backward(lv.grad, cache, params)
            gnorm = math.sqrt(sum(float((v ** 2).sum()) for v in grads.tensors().values()))
            clip = min(1.0, cfg.grad_clip / gnorm) if gnorm > 0 else 1.0
            lr = _cosine_lr(cfg.lr, step, total_steps)
            step += 1
            c1 = 1.0 - cfg.momentum ** step
            c2 = 1.0 - cfg.beta2 ** step
            for k, gk in grads.tensors().items():
                gk = gk * clip
                m1[k] = cfg.momentum * m1[k] + (1.0 - cfg.momentum) * gk
                m2[k] = cfg.beta2 * m2[k] + (1.0 - cfg.beta2) * gk * gk
                upd = lr * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + 1e-8)
                setattr(params, k, getattr(params, k) - upd)
            ep_loss += lv.total * len(idx)
        row = {"epoch": epoch, "train_loss": ep_loss / n}
        if val is not None:
            vviews, vmaps, vcells = val
            top1, top3 = evaluate_top(params, vviews, [bases[m] for m in vmaps], vcells, g)
        else:
            top1, top3 = evaluate_top(params, [v[:1] for v in train_set.views],
                                      [bases[m] for m in train_set.map_ids],
                                      train_set.cells, g)
        row.update(val_top1=top1, val_top3=top3)
        best.curve.append(row)
        log.info("epoch %d loss %.4f top1 %.3f top3 %.3f", epoch, row["train_loss"], top1, top3)
        if progress:
            progress(row)
        if (top3, top1) > best_key:
            best_key = (top3, top1)
            best.params = params.copy()
            best.best_epoch = epoch
    return best


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_top1", "val_top3"])
        for r in curve:
            w.writerow([r["epoch"], f"{r['train_loss']:.6f}", f"{r['val_top1']:.6f}",
                        f"{r['val_top3']:.6f}"])
