"""ViewNet: regress a similarity transform that warps a camera-frame cloud
into the shared world frame.

Architecture: shared per-point MLP -> max-pool -> dense head emitting a
10-vector ``(6D rotation, translation, log-scale)``. The network sees the
cloud relative to its centroid ``c`` and the warp rotates and scales about
that centroid, ``s R (p - c) + c + t``, so ``t`` is the displacement of the
centroid and a zero head output is the identity warp. The final head layer
starts at zero weights, so an untrained network applies one fixed
transform to every cloud. Training starts that transform at the mean
rotation and mean centroid displacement of the training triplets; starting
from the identity lets the optimizer settle in a flipped, shrunken
solution.

Training loss per triplet, on the warped cloud ``A = T(p_org)``::

    L = ( mean_i ||A_i - p_world_i||^2  +  chamfer(A, p_ref) ) / 2
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataError, ShapeError
from .geometry import (FrameTag, PointCloud, Sim3Transform, farthest_point_sampling,
                       rotation_6d_backward, rotation_from_6d_batch, sim3_apply)
from .nn import (MLP, OptimizerState, adam_step, load_checkpoint, maxpool_batch,
                 maxpool_batch_backward, save_checkpoint)
from .synthscene import Triplet

log = logging.getLogger(__name__)

@dataclass(frozen=True)
class ViewNetConfig:
    encoder_widths: tuple = (64, 128, 256)
    head_widths: tuple = (128,)
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    n_points: int = 256

    def __post_init__(self):
        if min(self.encoder_widths + self.head_widths) <= 0 or self.batch_size <= 0 \
                or self.epochs <= 0 or self.n_points <= 0 or self.learning_rate <= 0:
            raise ValueError("ViewNetConfig sizes must be positive")


@dataclass(eq=False)
class ViewNetParams:
    weights: dict
    n_points: int

    def save(self, path):
        save_checkpoint(path, {**self.weights, "meta.n_points": np.array([self.n_points])})

    @classmethod
    def load(cls, path):
        w = load_checkpoint(path)
        n = int(w.pop("meta.n_points")[0])
        return cls(w, n)


def _nets(weights):
    n_enc = sum(1 for k in weights if k.startswith("enc") and k.endswith(".W"))
    n_head = sum(1 for k in weights if k.startswith("head") and k.endswith(".W"))
    enc_dims = [weights["enc0.W"].shape[1]] + [weights[f"enc{i}.W"].shape[0] for i in range(n_enc)]
    head_dims = [weights["head0.W"].shape[1]] + [weights[f"head{i}.W"].shape[0]
                                                 for i in range(n_head)]
    enc = MLP("enc", enc_dims, ["relu"] * n_enc)
    head = MLP("head", head_dims, ["relu"] * (n_head - 1) + ["none"])
    return enc, head


def head_bias(rotation=None, translation=(0.0, 0.0, 0.0), scale=1.0) -> np.ndarray:
    """Head output encoding a fixed ``(R, t, s)``."""
    r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    return np.concatenate([r[:, 0], r[:, 1], translation, [np.log(scale)]])


def initial_transform(triplets):
    """Mean rotation of the triplet extrinsics and mean centroid
    displacement from ``p_org`` to ``p_world``, the starting point for
    training."""
    quats = np.stack([t.extrinsics.rotation for t in triplets])
    mean_r = Rotation.from_quat(quats, scalar_first=True).mean().as_matrix()
    shift = np.mean([t.p_world.points.mean(axis=0) - t.p_org.points.mean(axis=0)
                     for t in triplets], axis=0)
    return mean_r, shift


def init_viewnet(config: ViewNetConfig, bias=None) -> ViewNetParams:
    """Random trunk, zero final head layer; ``bias`` (default: identity
    rotation, zero translation, unit scale) sets the initial output."""
    rng = np.random.default_rng(config.seed)
    enc_dims = (3, *config.encoder_widths)
    head_dims = (config.encoder_widths[-1], *config.head_widths, 10)
    enc = MLP("enc", enc_dims, ["relu"] * len(config.encoder_widths))
    head = MLP("head", head_dims, ["relu"] * len(config.head_widths) + ["none"])
    w = {**enc.init(rng), **head.init(rng)}
    last = len(config.head_widths)
    w[f"head{last}.W"] = np.zeros_like(w[f"head{last}.W"])
    w[f"head{last}.b"] = head_bias() if bias is None else np.asarray(bias, dtype=np.float64)
    return ViewNetParams(w, config.n_points)


def _forward_batch(weights, x):
    """``x`` is ``(B, N, 3)``. Returns ``(R, t, s, cache)`` for the warp of
    ``s R (p - c) + c + t``."""
    enc, head = _nets(weights)
    b, n, _ = x.shape
    x = x - x.mean(axis=1, keepdims=True)
    feat, enc_cache = enc.forward(weights, x.reshape(b * n, 3))
    pooled, arg = maxpool_batch(feat.reshape(b, n, -1))
    out, head_cache = head.forward(weights, pooled)
    R, rot_cache = rotation_from_6d_batch(out[:, :6])
    s = np.exp(out[:, 9])
    return R, out[:, 6:9], s, (enc, head, enc_cache, head_cache, arg, rot_cache, n)


def _backward_batch(weights, cache, g_R, g_t, g_logs):
    enc, head, enc_cache, head_cache, arg, rot_cache, n = cache
    g_out = np.concatenate([rotation_6d_backward(g_R, rot_cache), g_t, g_logs[:, None]], axis=1)
    grads = {}
    g_pooled = head.backward(head_cache, g_out, grads)
    g_feat = maxpool_batch_backward(g_pooled, arg, n)
    enc.backward(enc_cache, g_feat.reshape(-1, g_feat.shape[-1]), grads)
    return grads


def _check_points(params: ViewNetParams, n):
    if n != params.n_points:
        raise ShapeError(f"ViewNet expects {params.n_points} points, got {n}")


def viewnet_forward(params: ViewNetParams, cloud: PointCloud) -> Sim3Transform:
    _check_points(params, len(cloud))
    R, t, s, _ = _forward_batch(params.weights, cloud.points[None])
    return _as_sim3(R[0], t[0], s[0], cloud.points.mean(axis=0))


def align(params: ViewNetParams, cloud: PointCloud) -> PointCloud:
    """Warp ``cloud`` with the predicted transform into the world frame."""
    out = sim3_apply(viewnet_forward(params, cloud), cloud)
    return out.with_points(out.points, FrameTag.WORLD)


def _warp(R, t, s, p):
    c = p.mean(axis=1, keepdims=True)
    return s[:, None, None] * np.einsum("bij,bnj->bni", R, p - c) + c + t[:, None, :]


def _as_sim3(R, t, s, centroid) -> Sim3Transform:
    # s R (p - c) + c + t  ==  s R p + (t + c - s R c)
    return Sim3Transform.from_matrix(R, t + centroid - s * (R @ centroid), s)


def batch_loss(weights, p_org, p_world, p_ref, with_grad=True):
    """Mean composite loss over a batch of index-aligned arrays.

    Returns ``(loss, grads, parts)`` with ``parts = (mse, chamfer)`` per item.
    Nearest-neighbor assignments are held fixed when differentiating the
    Chamfer term.
    """
    b, n, _ = p_org.shape
    m = p_ref.shape[1]
    R, t, s, cache = _forward_batch(weights, p_org)
    a = _warp(R, t, s, p_org)

    diff = a - p_world
    mse = (diff ** 2).sum(-1).mean(-1)

    d2 = ((a[:, :, None, :] - p_ref[:, None, :, :]) ** 2).sum(-1)
    nn_ab = d2.argmin(axis=2)
    nn_ba = d2.argmin(axis=1)
    rows = np.arange(b)[:, None]
    to_b = a - p_ref[rows, nn_ab]
    from_b = p_ref - a[rows, nn_ba]
    cd = (to_b ** 2).sum(-1).mean(-1) + (from_b ** 2).sum(-1).mean(-1)

    per_item = 0.5 * (mse + cd)
    loss = float(per_item.mean())
    if not with_grad:
        return loss, None, (mse, cd)

    g_a = 2.0 * diff / n + 2.0 * to_b / n
    for i in range(b):
        np.add.at(g_a[i], nn_ba[i], -2.0 * from_b[i] / m)
    g_a *= 0.5 / b

    pc = p_org - p_org.mean(axis=1, keepdims=True)
    rp = np.einsum("bij,bnj->bni", R, pc)
    g_t = g_a.sum(axis=1)
    g_R = s[:, None, None] * np.einsum("bni,bnj->bij", g_a, pc)
    g_logs = s * (g_a * rp).sum(axis=(1, 2))
    grads = _backward_batch(weights, cache, g_R, g_t, g_logs)
    return loss, grads, (mse, cd)


def viewnet_loss(params: ViewNetParams, triplet: Triplet):
    """Composite alignment loss and its gradients for one triplet."""
    if len(triplet.p_org) != len(triplet.p_world):
        raise ShapeError("p_org and p_world differ in size")
    _check_points(params, len(triplet.p_org))
    loss, grads, _ = batch_loss(params.weights, triplet.p_org.points[None],
                                triplet.p_world.points[None], triplet.p_ref.points[None])
    return loss, grads


def prepare_triplet(triplet: Triplet, n_points: int, seed: int = 0) -> Triplet:
    """FPS ``p_org`` to ``n_points`` (``p_world`` follows the same indices)
    and FPS ``p_ref`` independently."""
    org, idx = farthest_point_sampling(triplet.p_org, n_points, seed)
    ref, _ = farthest_point_sampling(triplet.p_ref, n_points, seed + 1)
    return Triplet(org, triplet.p_world.subset(idx), ref, triplet.extrinsics)


def stack_triplets(triplets):
    return (np.stack([t.p_org.points for t in triplets]),
            np.stack([t.p_world.points for t in triplets]),
            np.stack([t.p_ref.points for t in triplets]))


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)


def train_viewnet(dataset, config: ViewNetConfig, checkpoint=None, on_epoch=None):
    """Seeded minibatch Adam training. Returns ``(params, history)``.

    ``dataset`` is a sequence of prepared triplets (``config.n_points``
    points each). ``on_epoch(epoch, loss)`` may raise to abort.
    """
    dataset = list(dataset)
    if not dataset:
        raise DataError("ViewNet training needs at least one triplet")
    bs = min(config.batch_size, len(dataset))
    p_org, p_world, p_ref = stack_triplets(dataset)
    if p_org.shape[1] != config.n_points:
        raise ShapeError(f"triplets have {p_org.shape[1]} points, config expects {config.n_points}")
    params = init_viewnet(config, head_bias(*initial_transform(dataset)))
    weights = params.weights
    state = OptimizerState(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)
    history = TrainHistory()
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order) - bs + 1, bs):
            sel = order[start:start + bs]
            loss, grads, _ = batch_loss(weights, p_org[sel], p_world[sel], p_ref[sel])
            weights, state = adam_step(weights, grads, state)
            total += loss * len(sel)
            count += len(sel)
        mean = total / count
        history.epoch_loss.append(mean)
        log.info("viewnet epoch %d loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    params = ViewNetParams(weights, config.n_points)
    if checkpoint is not None:
        params.save(checkpoint)
    return params, history


def align_batch(params: ViewNetParams, clouds) -> np.ndarray:
    """Warp a ``(B, N, 3)`` stack of clouds; returns the warped stack."""
    R, t, s, _ = _forward_batch(params.weights, np.asarray(clouds, dtype=np.float64))
    return _warp(R, t, s, clouds)


def predict_batch(params: ViewNetParams, clouds) -> list:
    """Predicted transforms for a ``(B, N, 3)`` stack."""
    clouds = np.asarray(clouds, dtype=np.float64)
    R, t, s, _ = _forward_batch(params.weights, clouds)
    c = clouds.mean(axis=1)
    return [_as_sim3(R[i], t[i], s[i], c[i]) for i in range(len(clouds))]
