import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidpoint.disentangle import (BatchPairs, DisentangleConfig, EncoderParams, ObservationSet,
                                  beta_schedule, encode_batch, encoder_forward, eval_retrieval,
                                  eval_view_probe, info_nce, init_encoder,
                                  linear_probe_accuracy, loss_dep, loss_inv, loss_orth,
                                  loss_total, retrieval_accuracy, sample_batch,
                                  sample_positives, train_disentangle, yaw_bins)
from vidpoint.errors import DataError, ShapeError
from vidpoint.nn import finite_diff_check

seeds = st.integers(0, 2**32 - 1)
SMALL = dict(embed_dim=8, trunk_widths=(8, 16), head_widths=(16,), n_points=12)


def unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def small_config(**kw):
    return DisentangleConfig(**{**SMALL, **kw})


def toy_obs(rng, episodes=4, length=6, n=12):
    base = rng.uniform(0, 1, (episodes, length, n, 3))
    rand = np.clip(base + rng.normal(0, 0.02, base.shape), 0, 1)
    return ObservationSet(base, rand, rng.uniform(-70, 70, (episodes, length)))


# -- config -------------------------------------------------------------------

def test_config_validation():
    for bad in (dict(temperature=0.0), dict(orth_weight=-1.0), dict(ramp_fraction=0.0),
                dict(ramp_fraction=1.5), dict(batch_size=1), dict(beta_mode="x"),
                dict(batch_size=6, episodes_per_batch=4)):
        with pytest.raises(ValueError):
            DisentangleConfig(**bad)


# -- encoder ------------------------------------------------------------------

def test_heads_are_structurally_identical():
    params = init_encoder(small_config())
    inv = {k[3:]: v.shape for k, v in params.weights.items() if k.startswith("inv")}
    dep = {k[3:]: v.shape for k, v in params.weights.items() if k.startswith("dep")}
    assert inv == dep
    assert params.weights["trunk0.W"].shape == (8, 3)


def test_embeddings_unit_norm_and_permutation_invariant():
    rng = np.random.default_rng(0)
    params = init_encoder(small_config())
    x = rng.normal(size=(12, 3))
    zi, zd = encoder_forward(params, x)
    assert abs(np.linalg.norm(zi) - 1) < 1e-9 and abs(np.linalg.norm(zd) - 1) < 1e-9
    zi2, zd2 = encoder_forward(params, x[rng.permutation(12)])
    np.testing.assert_allclose(zi2, zi, atol=1e-12)
    np.testing.assert_allclose(zd2, zd, atol=1e-12)
    with pytest.raises(ShapeError):
        encoder_forward(params, x[:10])


def test_distinct_clouds_give_distinct_embeddings():
    params = init_encoder(small_config())
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.normal(size=(2, 12, 3))
        za, zb = encoder_forward(params, a), encoder_forward(params, b)
        assert np.abs(za[0] - zb[0]).max() > 1e-6
        assert np.abs(za[1] - zb[1]).max() > 1e-6


def test_encode_batch_matches_single():
    params = init_encoder(small_config())
    x = np.random.default_rng(2).normal(size=(5, 12, 3))
    zi, zd = encode_batch(params, x, chunk=2)
    for i in range(5):
        a, b = encoder_forward(params, x[i])
        np.testing.assert_allclose(zi[i], a, atol=1e-12)
        np.testing.assert_allclose(zd[i], b, atol=1e-12)


def test_encoder_checkpoint_round_trip(tmp_path):
    params = init_encoder(small_config(normalize_embeddings=False))
    params.save(tmp_path / "enc.ckpt")
    back = EncoderParams.load(tmp_path / "enc.ckpt")
    assert back.n_points == 12 and back.normalize is False
    assert sorted(back.weights) == sorted(params.weights)


# -- InfoNCE ------------------------------------------------------------------

def test_info_nce_examples():
    rng = np.random.default_rng(3)
    q, p = unit(rng, 2, 5)
    for tau in (0.05, 1.0, 3.0):
        assert abs(info_nce(q, p, [p], tau) - np.log(2)) < 1e-12
    e = np.eye(3)
    assert abs(info_nce(e[0], e[0], [e[1]], 1.0) - 0.31326168751822286) < 1e-12
    with pytest.raises(ValueError):
        info_nce(q, p, np.zeros((0, 5)), 1.0)


def test_info_nce_monotone_in_positive_similarity():
    rng = np.random.default_rng(4)
    q = unit(rng, 6)
    negs = unit(rng, 5, 6)
    other = unit(rng, 6)
    losses = []
    for w in np.linspace(0, 1, 11):
        pos = (1 - w) * other + w * q
        losses.append(info_nce(q, pos / np.linalg.norm(pos), negs, 0.5))
    assert all(a > b for a, b in zip(losses, losses[1:]))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_info_nce_bounds(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    tau = rng.uniform(0.05, 2.0)
    q, p = unit(rng, 2, 8)
    val = info_nce(q, p, unit(rng, n, 8), tau)
    assert 0 < val < np.log(1 + n) + 2 / tau


def test_info_nce_stable_at_small_temperature():
    e = np.eye(2)
    assert np.isfinite(info_nce(e[0], e[1], [e[0]], 1e-4))


# -- L_inv / L_dep / L_orth -----------------------------------------------------

def test_loss_inv_examples():
    z = np.tile(unit(np.random.default_rng(5), 4), (2, 1))
    loss, _ = loss_inv(z, z, 0.3)
    assert abs(loss - np.log(2)) < 1e-12
    # positive at +1, negatives at -1
    v = np.eye(3)[0]
    ref = np.stack([v, -v])
    val, _ = loss_inv(ref, ref, 0.1)
    assert val < 1e-6
    with pytest.raises(ValueError):
        loss_inv(ref[:1], ref[:1], 0.1)


def test_loss_inv_is_mean_of_per_anchor_info_nce():
    rng = np.random.default_rng(6)
    ref, rand = unit(rng, 5, 4), unit(rng, 5, 4)
    per = [info_nce(ref[k], rand[k], np.delete(rand, k, 0), 0.2) for k in range(5)]
    total, _ = loss_inv(ref, rand, 0.2)
    assert abs(total - np.mean(per)) < 1e-12
    assert abs(loss_inv(ref, rand, 0.2, anchor=3) - per[3]) < 1e-12


def test_loss_dep_examples():
    b = 4
    z = np.tile(np.eye(3)[0], (b, 1))
    pos = np.array([1, 0, 3, 2])
    val, _, n_valid = loss_dep(z, z, pos, 0.7)
    assert n_valid == b
    assert abs(val - np.log(1 + b)) < 1e-12
    # positives identical to the query, every negative orthogonal
    ref = np.tile(np.eye(3)[0], (b, 1))
    rand = np.tile(np.eye(3)[1], (b, 1))
    val, _, _ = loss_dep(ref, rand, pos, 1.0)
    assert abs(val - np.log(1 + b * np.exp(-1))) < 1e-12


def test_loss_dep_skips_anchors_without_positive():
    rng = np.random.default_rng(7)
    ref, rand = unit(rng, 4, 5), unit(rng, 4, 5)
    pos = sample_positives([0, 0, 1, 2], [0, 1, 0, 0], rng)
    assert pos[2] == -1 and pos[3] == -1
    assert set(pos[:2]) == {0, 1}
    val, _, n_valid = loss_dep(ref, rand, pos, 0.5)
    assert n_valid == 2
    per = [loss_dep(ref, rand, pos, 0.5, anchor=k) for k in range(4)]
    assert per[2] is None
    assert abs(val - np.mean(per[:2])) < 1e-12
    assert abs(per[0] - info_nce(ref[0], ref[1], rand, 0.5)) < 1e-12


def test_sample_positives_same_episode_other_timestep():
    rng = np.random.default_rng(8)
    eps = np.repeat(np.arange(4), 8)
    ts = np.tile(np.arange(8), 4)
    pos = sample_positives(eps, ts, rng)
    assert (eps[pos] == eps).all() and (ts[pos] != ts).all()


def test_loss_orth_examples():
    e = np.eye(4)
    val, _ = loss_orth(e[:1], e[1:2], e[2:3], e[3:4])
    assert val == 0.0
    z = e[:1]
    val, _ = loss_orth(z, z, z, z)
    assert val == 1.0
    val, _ = loss_orth(z, -z, z, z)
    assert val == 1.0  # absolute value


def test_contrastive_gradients_finite_differences():
    rng = np.random.default_rng(9)
    b, d = 6, 5
    params = {"ref": unit(rng, b, d), "rand": unit(rng, b, d)}
    pos = sample_positives([0, 0, 0, 1, 1, 1], [0, 1, 2, 0, 1, 2], rng)
    _, (gr, gn) = loss_inv(params["ref"], params["rand"], 0.3)
    rep = finite_diff_check(lambda p: loss_inv(p["ref"], p["rand"], 0.3)[0], params,
                            {"ref": gr, "rand": gn}, n_coords=60)
    assert rep.passed, rep
    _, (gr, gn), _ = loss_dep(params["ref"], params["rand"], pos, 0.3)
    rep = finite_diff_check(lambda p: loss_dep(p["ref"], p["rand"], pos, 0.3)[0], params,
                            {"ref": gr, "rand": gn}, n_coords=60)
    assert rep.passed, rep
    four = {k: unit(rng, b, d) for k in ("a", "b", "c", "d")}
    _, g = loss_orth(four["a"], four["b"], four["c"], four["d"])
    rep = finite_diff_check(lambda p: loss_orth(p["a"], p["b"], p["c"], p["d"])[0], four,
                            dict(zip("abcd", g)), n_coords=120)
    assert rep.passed, rep


# -- schedule and composite loss ----------------------------------------------------

def test_beta_schedule():
    assert beta_schedule(0, 100, 0.5) == 0.0
    assert beta_schedule(25, 100, 0.5) == 0.5
    assert beta_schedule(50, 100, 0.5) == 1.0
    assert beta_schedule(99, 100, 0.5) == 1.0


def make_batch(rng, n=12):
    ref = rng.uniform(0, 1, (4, n, 3))
    rand = np.clip(ref + rng.normal(0, 0.05, ref.shape), 0, 1)
    return BatchPairs(ref, rand, np.array([0, 0, 1, 1]), np.array([0, 3, 1, 2]))


def test_loss_total_step_zero_is_l_inv():
    rng = np.random.default_rng(10)
    cfg = small_config(batch_size=4, episodes_per_batch=2, steps=100)
    params = init_encoder(cfg)
    batch = make_batch(rng)
    total, _, parts = loss_total(batch, params, 0, cfg, rng=0)
    assert parts.beta == 0.0
    assert total == parts.l_inv


def test_loss_total_full_beta_no_orth():
    rng = np.random.default_rng(11)
    cfg = small_config(batch_size=4, episodes_per_batch=2, steps=100, orth_weight=0.0)
    params = init_encoder(cfg)
    total, _, parts = loss_total(make_batch(rng), params, 99, cfg, rng=0)
    assert parts.beta == 1.0
    assert abs(total - (parts.l_inv + parts.l_dep)) < 1e-12


@pytest.mark.parametrize("step", [0, 30, 99])
def test_loss_total_gradients(step):
    rng = np.random.default_rng(12)
    cfg = small_config(batch_size=4, episodes_per_batch=2, steps=100)
    params = init_encoder(cfg)
    batch = make_batch(rng)
    pos = sample_positives(batch.episode_ids, batch.timesteps, 0)
    _, grads, _ = loss_total(batch, params, step, cfg, positives=pos)

    def f(w):
        return loss_total(batch, EncoderParams(w, 12), step, cfg, positives=pos,
                          with_grad=False)[0]

    rep = finite_diff_check(f, params.weights, grads, n_coords=200)
    assert rep.passed, rep


def test_normalization_makes_loss_scale_invariant():
    rng = np.random.default_rng(13)
    cfg = small_config(batch_size=4, episodes_per_batch=2, steps=10)
    params = init_encoder(cfg)
    batch = make_batch(rng)
    pos = sample_positives(batch.episode_ids, batch.timesteps, 0)
    base = loss_total(batch, params, 9, cfg, positives=pos, with_grad=False)[0]
    w = dict(params.weights)
    # relu trunk output scales linearly with the last trunk layer
    w["trunk1.W"] = w["trunk1.W"] * 3.7
    w["trunk1.b"] = w["trunk1.b"] * 3.7
    w["inv0.b"] = w["inv0.b"] * 3.7
    w["dep0.b"] = w["dep0.b"] * 3.7
    w["inv1.b"] = w["inv1.b"] * 3.7
    w["dep1.b"] = w["dep1.b"] * 3.7
    scaled = loss_total(batch, EncoderParams(w, 12), 9, cfg, positives=pos, with_grad=False)[0]
    assert abs(scaled - base) < 1e-9


def test_beta_off_mode():
    rng = np.random.default_rng(14)
    cfg = small_config(batch_size=4, episodes_per_batch=2, steps=10, beta_mode="off")
    _, _, parts = loss_total(make_batch(rng), init_encoder(cfg), 9, cfg, rng=0)
    assert parts.beta == 0.0 and parts.total == parts.l_inv


# -- training -------------------------------------------------------------------

def test_sample_batch_layout():
    rng = np.random.default_rng(15)
    obs = toy_obs(rng, episodes=5, length=8)
    cfg = small_config(batch_size=8, episodes_per_batch=2)
    batch = sample_batch(obs, cfg, np.random.default_rng(0))
    assert batch.ref.shape == (8, 12, 3)
    assert len(set(batch.episode_ids)) == 2
    for e in set(batch.episode_ids):
        ts = batch.timesteps[batch.episode_ids == e]
        assert len(set(ts)) == len(ts) == 4


def test_training_smoke_reduces_l_inv():
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        obs = toy_obs(rng)
        cfg = small_config(batch_size=4, episodes_per_batch=2, steps=200, seed=seed,
                           learning_rate=3e-3)
        _, hist = train_disentangle(obs, cfg)
        l_inv = hist.column("l_inv")
        wins += l_inv[-10:].mean() < l_inv[:10].mean()
    assert wins >= 4


def test_training_is_deterministic_and_logs_beta(tmp_path):
    obs = toy_obs(np.random.default_rng(16))
    cfg = small_config(batch_size=4, episodes_per_batch=2, steps=20, seed=3)
    _, hist = train_disentangle(obs, cfg, checkpoint=tmp_path / "a.ckpt")
    train_disentangle(obs, cfg, checkpoint=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    beta = hist.column("beta")
    assert beta[0] == 0.0 and beta[-1] == 1.0
    assert len(hist.rows) == 20


def test_training_rejects_small_datasets():
    obs = toy_obs(np.random.default_rng(17), episodes=1, length=6)
    with pytest.raises(DataError):
        train_disentangle(obs, small_config(batch_size=4, episodes_per_batch=2))
    obs = toy_obs(np.random.default_rng(17), episodes=4, length=1)
    with pytest.raises(DataError):
        train_disentangle(obs, small_config(batch_size=4, episodes_per_batch=2))


# -- evaluation -------------------------------------------------------------------

def test_retrieval_oracle_and_gallery_order():
    t = 20
    onehot = np.eye(t)[None].repeat(3, axis=0)
    assert retrieval_accuracy(onehot, onehot) == 1.0
    rng = np.random.default_rng(18)
    q, g = unit(rng, 20, 6), unit(rng, 20, 6)
    perm = rng.permutation(20)
    # permute the gallery and relabel the queries the same way
    assert retrieval_accuracy(q[perm], g[perm]) == retrieval_accuracy(q, g)


def test_untrained_retrieval_near_chance():
    for seed in range(5):
        rng = np.random.default_rng(200 + seed)
        obs = ObservationSet(rng.uniform(0, 1, (3, 20, 12, 3)), rng.uniform(0, 1, (3, 20, 12, 3)),
                             np.zeros((3, 20)))
        acc = eval_retrieval(init_encoder(small_config(seed=seed)), obs)
        assert 0.0 <= acc <= 0.25


def test_yaw_bins():
    np.testing.assert_array_equal(yaw_bins([-70, -52.6, -52.4, 0.0, 69.9, 70.0]),
                                  [0, 0, 1, 4, 7, 7])


def test_probe_oracle_and_shuffled_labels():
    rng = np.random.default_rng(19)
    labels = rng.integers(0, 8, 800)
    assert linear_probe_accuracy(np.eye(8)[labels], labels) == 1.0
    feats = rng.normal(size=(800, 16))
    acc = linear_probe_accuracy(feats, rng.permutation(labels))
    assert abs(acc - 1 / 8) < 0.07
    with pytest.raises(ValueError):
        linear_probe_accuracy(feats, np.zeros(800))


def test_eval_view_probe_runs():
    rng = np.random.default_rng(20)
    params = init_encoder(small_config())
    clouds = rng.uniform(0, 1, (64, 12, 3))
    acc_dep, acc_inv = eval_view_probe(params, clouds, rng.uniform(-70, 70, 64))
    assert 0 <= acc_dep <= 1 and 0 <= acc_inv <= 1
