"""Dual-head point encoder and the view-invariant disentanglement objective.

A shared trunk (per-point dense layers + max-pool) feeds two structurally
identical heads: ``inv`` (view-invariant embedding) and ``dep``
(view-dependent embedding). For a batch of paired observations
``(ref_k, rand_k)``::

    L_inv  = InfoNCE(inv(ref_k), inv(rand_k), {inv(rand_i)}_{i != k})
    L_dep  = InfoNCE(dep(ref_k), dep(ref_t), {dep(rand_i)}_i),  t != k, same episode
    L_orth = (|inv(ref_k) . dep(ref_k)| + |inv(rand_k) . dep(rand_k)|) / 2
    L      = L_inv + beta(step) * (L_dep + lambda * L_orth)

each averaged over anchors ``k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .nn import (MLP, OptimizerState, adam_step, load_checkpoint, maxpool_batch,
                 maxpool_batch_backward, save_checkpoint)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DisentangleConfig:
    embed_dim: int = 64
    temperature: float = 0.1
    orth_weight: float = 0.1
    ramp_fraction: float = 0.5
    batch_size: int = 32
    learning_rate: float = 3e-3
    steps: int = 3000
    seed: int = 0
    trunk_widths: tuple = (64, 128)
    head_widths: tuple = (128,)
    n_points: int = 512
    episodes_per_batch: int = 2
    normalize_embeddings: bool = True
    # "ramp" follows beta_schedule; "off" fixes beta = 0 (no dep/orth terms)
    beta_mode: str = "ramp"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.orth_weight < 0:
            raise ValueError("orth_weight must be >= 0")
        if not 0 < self.ramp_fraction <= 1:
            raise ValueError("ramp_fraction must be in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.beta_mode not in ("ramp", "off"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.batch_size % self.episodes_per_batch:
            raise ValueError("batch_size must be a multiple of episodes_per_batch")


@dataclass(eq=False)
class EncoderParams:
    weights: dict
    n_points: int
    normalize: bool = True

    def save(self, path):
        meta = np.array([self.n_points, float(self.normalize)])
        save_checkpoint(path, {**self.weights, "meta.encoder": meta})

    @classmethod
    def load(cls, path):
        w = load_checkpoint(path)
        meta = w.pop("meta.encoder")
        return cls(w, int(meta[0]), bool(meta[1]))


def _count(weights, prefix):
    return sum(1 for k in weights if k.startswith(prefix) and k.endswith(".W"))


def _nets(weights):
    def dims(prefix):
        n = _count(weights, prefix)
        return [weights[f"{prefix}0.W"].shape[1]] + [weights[f"{prefix}{i}.W"].shape[0]
                                                     for i in range(n)]
    trunk_dims = dims("trunk")
    head_dims = dims("inv")
    acts = ["relu"] * (len(head_dims) - 2) + ["none"]
    return (MLP("trunk", trunk_dims, ["relu"] * (len(trunk_dims) - 1)),
            MLP("inv", head_dims, acts), MLP("dep", head_dims, acts))


def init_encoder(config: DisentangleConfig) -> EncoderParams:
    rng = np.random.default_rng(config.seed)
    trunk_dims = (3, *config.trunk_widths)
    head_dims = (config.trunk_widths[-1], *config.head_widths, config.embed_dim)
    acts = ["relu"] * len(config.head_widths) + ["none"]
    w = MLP("trunk", trunk_dims, ["relu"] * len(config.trunk_widths)).init(rng)
    w.update(MLP("inv", head_dims, acts).init(rng))
    w.update(MLP("dep", head_dims, acts).init(rng))
    return EncoderParams(w, config.n_points, config.normalize_embeddings)


def _l2_normalize(h):
    n = np.linalg.norm(h, axis=1, keepdims=True)
    return h / n, n


def _l2_normalize_backward(g, z, n):
    return (g - z * (g * z).sum(1, keepdims=True)) / n


def _encode(params: EncoderParams, x):
    trunk, inv, dep = _nets(params.weights)
    b, n, _ = x.shape
    if n != params.n_points:
        raise ShapeError(f"encoder expects {params.n_points} points, got {n}")
    feat, t_cache = trunk.forward(params.weights, x.reshape(b * n, 3))
    pooled, arg = maxpool_batch(feat.reshape(b, n, -1))
    h_inv, i_cache = inv.forward(params.weights, pooled)
    h_dep, d_cache = dep.forward(params.weights, pooled)
    if params.normalize:
        z_inv, n_inv = _l2_normalize(h_inv)
        z_dep, n_dep = _l2_normalize(h_dep)
    else:
        z_inv, n_inv, z_dep, n_dep = h_inv, None, h_dep, None
    cache = (trunk, inv, dep, t_cache, i_cache, d_cache, arg, n, z_inv, n_inv, z_dep, n_dep)
    return z_inv, z_dep, cache


def _encode_backward(params: EncoderParams, cache, g_inv, g_dep):
    trunk, inv, dep, t_cache, i_cache, d_cache, arg, n, z_inv, n_inv, z_dep, n_dep = cache
    if params.normalize:
        g_inv = _l2_normalize_backward(g_inv, z_inv, n_inv)
        g_dep = _l2_normalize_backward(g_dep, z_dep, n_dep)
    grads = {}
    g_pooled = inv.backward(i_cache, g_inv, grads) + dep.backward(d_cache, g_dep, grads)
    g_feat = maxpool_batch_backward(g_pooled, arg, n)
    trunk.backward(t_cache, g_feat.reshape(-1, g_feat.shape[-1]), grads)
    return grads


def encoder_forward(params: EncoderParams, cloud):
    """``(z_inv, z_dep)`` for one cloud (PointCloud or ``(N, 3)`` array)."""
    pts = getattr(cloud, "points", cloud)
    z_inv, z_dep, _ = _encode(params, np.asarray(pts, dtype=np.float64)[None])
    return z_inv[0], z_dep[0]


def encode_batch(params: EncoderParams, clouds, chunk=256):
    """Embeddings for a ``(B, N, 3)`` stack, evaluated in chunks."""
    clouds = np.asarray(clouds, dtype=np.float64)
    zi, zd = [], []
    for s in range(0, len(clouds), chunk):
        a, b, _ = _encode(params, clouds[s:s + chunk])
        zi.append(a)
        zd.append(b)
    return np.concatenate(zi), np.concatenate(zd)


# -- contrastive losses ----------------------------------------------------------

def _logsumexp(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def info_nce(q, pos, negs, tau: float) -> float:
    """``-log( e^{q.pos/tau} / (e^{q.pos/tau} + sum_i e^{q.neg_i/tau}) )``."""
    negs = np.atleast_2d(np.asarray(negs, dtype=np.float64))
    if negs.size == 0:
        raise ValueError("InfoNCE needs at least one negative")
    logits = np.concatenate([[np.dot(q, pos)], negs @ q]) / tau
    return float(_logsumexp(logits) - logits[0])


def loss_inv(z_ref, z_rand, tau, anchor=None):
    """Invariance loss; per anchor if given, else the mean over anchors.

    Returns ``(loss, (g_ref, g_rand))`` for the batch mean.
    """
    b = len(z_ref)
    if b < 2:
        raise ValueError("L_inv needs a batch of at least 2")
    s = z_ref @ z_rand.T / tau
    per = _logsumexp(s) - np.diag(s)
    if anchor is not None:
        return float(per[anchor])
    g = _softmax(s)
    g[np.arange(b), np.arange(b)] -= 1.0
    g /= b * tau
    return float(per.mean()), (g @ z_rand, g.T @ z_ref)


def sample_positives(episode_ids, timesteps, rng):
    """For each anchor, the batch index of a random item from the same
    episode at a different timestep (-1 if none exists)."""
    episode_ids = np.asarray(episode_ids)
    timesteps = np.asarray(timesteps)
    rng = np.random.default_rng(rng)
    out = np.full(len(episode_ids), -1, dtype=np.int64)
    for k in range(len(episode_ids)):
        cand = np.flatnonzero((episode_ids == episode_ids[k]) & (timesteps != timesteps[k]))
        if len(cand):
            out[k] = cand[rng.integers(len(cand))]
    return out


def loss_dep(z_ref, z_rand, positives, tau, anchor=None):
    """View-dependence loss over anchors with a valid positive.

    Negatives are ``z_rand[i]`` for every ``i`` in the batch. Returns
    ``(loss, (g_ref, g_rand), n_valid)``; with ``anchor`` returns that
    anchor's loss only (None if it has no positive).
    """
    positives = np.asarray(positives)
    valid = np.flatnonzero(positives >= 0)
    if anchor is not None:
        if positives[anchor] < 0:
            return None
        return info_nce(z_ref[anchor], z_ref[positives[anchor]], z_rand, tau)
    g_ref = np.zeros_like(z_ref)
    g_rand = np.zeros_like(z_rand)
    if len(valid) == 0:
        return 0.0, (g_ref, g_rand), 0
    q = z_ref[valid]
    p = z_ref[positives[valid]]
    logits = np.concatenate([(q * p).sum(1, keepdims=True), q @ z_rand.T], axis=1) / tau
    per = _logsumexp(logits) - logits[:, 0]
    g = _softmax(logits)
    g[:, 0] -= 1.0
    g /= len(valid) * tau
    np.add.at(g_ref, valid, g[:, :1] * p + g[:, 1:] @ z_rand)
    np.add.at(g_ref, positives[valid], g[:, :1] * q)
    g_rand += g[:, 1:].T @ q
    return float(per.mean()), (g_ref, g_rand), len(valid)


def loss_orth(inv_ref, dep_ref, inv_rand, dep_rand):
    """Mean over anchors of (|inv_ref.dep_ref| + |inv_rand.dep_rand|) / 2.

    Returns ``(loss, (g_inv_ref, g_dep_ref, g_inv_rand, g_dep_rand))``.
    """
    inv_ref, dep_ref = np.atleast_2d(inv_ref), np.atleast_2d(dep_ref)
    inv_rand, dep_rand = np.atleast_2d(inv_rand), np.atleast_2d(dep_rand)
    b = len(inv_ref)
    a = (inv_ref * dep_ref).sum(1)
    c = (inv_rand * dep_rand).sum(1)
    loss = float((np.abs(a) + np.abs(c)).mean() / 2)
    sa = (np.sign(a) / (2 * b))[:, None]
    sc = (np.sign(c) / (2 * b))[:, None]
    return loss, (sa * dep_ref, sa * inv_ref, sc * dep_rand, sc * inv_rand)


def beta_schedule(step, total_steps, ramp_fraction=0.5) -> float:
    """Linear ramp from 0 to 1 over the first ``ramp_fraction`` of training."""
    if total_steps <= 0:
        return 1.0
    return float(min(1.0, step / (ramp_fraction * total_steps)))


@dataclass(eq=False)
class BatchPairs:
    ref: np.ndarray        # (B, N, 3)
    rand: np.ndarray       # (B, N, 3)
    episode_ids: np.ndarray
    timesteps: np.ndarray


@dataclass
class LossParts:
    total: float
    l_inv: float
    l_dep: float
    l_orth: float
    beta: float
    skipped_anchors: int


def loss_total(batch: BatchPairs, params: EncoderParams, step: int, config: DisentangleConfig,
               total_steps=None, positives=None, rng=None, with_grad=True):
    """Full objective and gradients for every encoder weight.

    Returns ``(loss, grads, LossParts)``.
    """
    b = len(batch.ref)
    total_steps = config.steps - 1 if total_steps is None else total_steps
    if config.beta_mode == "off":
        beta = 0.0
    else:
        beta = beta_schedule(step, total_steps, config.ramp_fraction)
    if positives is None:
        positives = sample_positives(batch.episode_ids, batch.timesteps, rng)
    z_inv, z_dep, cache = _encode(params, np.concatenate([batch.ref, batch.rand]))
    inv_ref, inv_rand = z_inv[:b], z_inv[b:]
    dep_ref, dep_rand = z_dep[:b], z_dep[b:]

    l_inv, (gi_ref, gi_rand) = loss_inv(inv_ref, inv_rand, config.temperature)
    l_dep, (gd_ref, gd_rand), n_valid = loss_dep(dep_ref, dep_rand, positives, config.temperature)
    l_orth, (go_ir, go_dr, go_irn, go_drn) = loss_orth(inv_ref, dep_ref, inv_rand, dep_rand)
    lam = config.orth_weight
    total = l_inv + beta * (l_dep + lam * l_orth)
    parts = LossParts(total, l_inv, l_dep, l_orth, beta, b - n_valid)
    if not with_grad:
        return total, None, parts

    g_inv = np.concatenate([gi_ref + beta * lam * go_ir, gi_rand + beta * lam * go_irn])
    g_dep = np.concatenate([beta * (gd_ref + lam * go_dr), beta * (gd_rand + lam * go_drn)])
    grads = _encode_backward(params, cache, g_inv, g_dep)
    return total, grads, parts


# -- training ---------------------------------------------------------------------

@dataclass(eq=False)
class ObservationSet:
    """Preprocessed encoder inputs: ``ref``/``rand`` are ``(E, T, N, 3)``;
    ``yaw`` is ``(E, T)`` random-camera yaw in degrees."""

    ref: np.ndarray
    rand: np.ndarray
    yaw: np.ndarray

    @property
    def n_episodes(self):
        return self.ref.shape[0]

    @property
    def length(self):
        return self.ref.shape[1]


def sample_batch(obs: ObservationSet, config: DisentangleConfig, rng) -> BatchPairs:
    """``episodes_per_batch`` distinct episodes, equal numbers of distinct
    timesteps from each."""
    per = config.batch_size // config.episodes_per_batch
    eps = rng.choice(obs.n_episodes, config.episodes_per_batch, replace=False)
    e_idx, t_idx = [], []
    for e in eps:
        e_idx.extend([e] * per)
        t_idx.extend(rng.choice(obs.length, per, replace=False))
    e_idx, t_idx = np.array(e_idx), np.array(t_idx)
    return BatchPairs(obs.ref[e_idx, t_idx], obs.rand[e_idx, t_idx], e_idx, t_idx)


@dataclass
class MetricsHistory:
    rows: list = field(default_factory=list)  # (step, l_inv, l_dep, l_orth, beta, total)

    def column(self, name):
        i = ("step", "l_inv", "l_dep", "l_orth", "beta", "total").index(name)
        return np.array([r[i] for r in self.rows])


def train_disentangle(obs: ObservationSet, config: DisentangleConfig, checkpoint=None,
                      on_step=None):
    """Seeded minibatch Adam loop. Returns ``(params, MetricsHistory)``.

    ``on_step(step, parts)`` is called after every update and may raise.
    """
    if obs.n_episodes < config.episodes_per_batch:
        raise DataError(f"need {config.episodes_per_batch} episodes, have {obs.n_episodes}")
    if obs.length < config.batch_size // config.episodes_per_batch or obs.length < 2:
        raise DataError(f"episodes of length {obs.length} are too short for the batch layout")
    params = init_encoder(config)
    state = OptimizerState(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)
    history = MetricsHistory()
    for step in range(config.steps):
        batch = sample_batch(obs, config, rng)
        _, grads, parts = loss_total(batch, params, step, config, rng=rng)
        params.weights, state = adam_step(params.weights, grads, state)
        history.rows.append((step, parts.l_inv, parts.l_dep, parts.l_orth, parts.beta,
                             parts.total))
        if on_step is not None:
            on_step(step, parts)
    if checkpoint is not None:
        params.save(checkpoint)
    return params, history


# -- evaluation -------------------------------------------------------------------

def retrieval_accuracy(queries, gallery) -> float:
    """Top-1 accuracy of matching row ``t`` of ``queries`` to row ``t`` of
    ``gallery`` by dot product; both ``(E, T, d)`` or ``(T, d)``."""
    q = np.asarray(queries)
    g = np.asarray(gallery)
    if q.ndim == 2:
        q, g = q[None], g[None]
    sims = np.einsum("etd,esd->ets", q, g)
    hits = sims.argmax(axis=2) == np.arange(q.shape[1])[None]
    return float(hits.mean())


def eval_retrieval(params: EncoderParams, obs: ObservationSet) -> float:
    """Cross-view timestep retrieval with ``z_inv`` within each episode."""
    e, t = obs.ref.shape[:2]
    n = obs.ref.shape[2]
    zq, _ = encode_batch(params, obs.ref.reshape(e * t, n, 3))
    zg, _ = encode_batch(params, obs.rand.reshape(e * t, n, 3))
    return retrieval_accuracy(zq.reshape(e, t, -1), zg.reshape(e, t, -1))


def yaw_bins(yaw, n_bins=8, yaw_range=70.0):
    edges = np.linspace(-yaw_range, yaw_range, n_bins + 1)
    return np.clip(np.digitize(yaw, edges[1:-1]), 0, n_bins - 1)


def linear_probe_accuracy(features, labels, seed=0, train_fraction=0.5, ridge=1e-2) -> float:
    """Held-out accuracy of a closed-form ridge one-vs-rest classifier."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("probe needs at least two classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_tr = int(round(train_fraction * len(y)))
    tr, te = order[:n_tr], order[n_tr:]
    xa = np.hstack([x, np.ones((len(x), 1))])
    targets = (y[tr, None] == classes[None, :]).astype(np.float64) * 2 - 1
    a = xa[tr].T @ xa[tr] + ridge * np.eye(xa.shape[1])
    w = np.linalg.solve(a, xa[tr].T @ targets)
    pred = classes[(xa[te] @ w).argmax(axis=1)]
    return float((pred == y[te]).mean())


def eval_view_probe(params: EncoderParams, clouds, yaw, n_bins=8, yaw_range=70.0, seed=0):
    """Linear yaw-bin probes on frozen ``z_dep`` and ``z_inv``.

    Returns ``(acc_dep, acc_inv)``.
    """
    labels = yaw_bins(np.asarray(yaw), n_bins, yaw_range)
    z_inv, z_dep = encode_batch(params, clouds)
    return (linear_probe_accuracy(z_dep, labels, seed),
            linear_probe_accuracy(z_inv, labels, seed))
