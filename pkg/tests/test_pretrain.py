import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ricl import tensor as T
from ricl.detector import DetectorConfig, assign_phi, clone_params, init_params
from ricl.optim import cosine_lr
from ricl.pretrain import (
    ContrastiveBatch,
    PretrainConfig,
    PretrainState,
    contrastive_loss,
    ema_update,
    flip_pair,
    pretrain_loss,
    pretrain_run,
    pretrain_step,
)
from ricl.optim import AdamW
from ricl.proposals import FramePair, Proposal
from ricl.tensor import Tensor

TINY = DetectorConfig(input_shape=(32, 32), stem_channels=4, stage_channels=(4, 8, 8), fpn_width=8,
                      head_convs=1, embed_dim=4, proj_hidden=8, crop_size=3)


def unit(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def scalar_infonce(q, q_lab, k, k_lab, k_tgt, tau):
    """Direct double loop over every (query, positive) pair."""
    total = 0.0
    for i in range(len(q)):
        negs = [math.exp(sum(a * b for a, b in zip(q[i], k[j])) / tau) for j in range(len(k)) if k_lab[j] != q_lab[i]]
        for j in range(len(k)):
            if k_lab[j] == q_lab[i] and k_tgt[j]:
                pos = math.exp(sum(a * b for a, b in zip(q[i], k[j])) / tau)
                total -= math.log(pos / (pos + sum(negs)))
    return total


def batch_from(q, ql, k, kl, kt):
    return ContrastiveBatch(Tensor(q), np.asarray(ql), Tensor(k), np.asarray(kl), np.asarray(kt, bool))


# ---------------------------------------------------------------------------
# contrastive loss


def test_no_negatives_gives_zero():
    q = np.array([[1.0, 0.0]])
    loss = contrastive_loss(batch_from(q, [1], q, [1], [True]), 0.5)
    assert abs(float(loss.data)) <= 1e-12


def test_symmetric_one_vs_one_is_ln2():
    q = np.array([[1.0, 0.0]])
    keys = np.array([[0.6, 0.8], [0.6, -0.8]])
    loss = contrastive_loss(batch_from(q, [1], keys, [1, 2], [True, True]), 0.5)
    assert abs(float(loss.data) - math.log(2)) <= 1e-12


def test_empty_queries_give_zero():
    loss = contrastive_loss(batch_from(np.zeros((0, 3)), [], unit(np.random.default_rng(0), 2, 3), [1, 2], [1, 1]), 0.5)
    assert float(loss.data) == 0.0


def test_matches_scalar_reimplementation_100_batches():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n_inst, d = int(rng.integers(1, 6)), int(rng.integers(2, 9))
        ql = rng.integers(1, n_inst + 1, size=int(rng.integers(1, 9)))
        kl_t = rng.integers(1, n_inst + 1, size=int(rng.integers(1, 9)))
        q, kt = unit(rng, len(ql), d), unit(rng, len(kl_t), d)
        keys = np.concatenate([q, kt])
        klab = np.concatenate([ql, kl_t])
        ktgt = np.concatenate([np.zeros(len(ql), bool), np.ones(len(kl_t), bool)])
        tau = float(rng.uniform(0.05, 1.0))
        got = float(contrastive_loss(batch_from(q, ql, keys, klab, ktgt), tau).data)
        ref = scalar_infonce(q.tolist(), ql.tolist(), keys.tolist(), klab.tolist(), ktgt.tolist(), tau)
        assert abs(got - ref) <= 1e-10 * max(1.0, abs(ref))


def test_mean_reduction_divides_by_positive_pairs():
    rng = np.random.default_rng(1)
    q, k = unit(rng, 3, 4), unit(rng, 4, 4)
    b = batch_from(q, [1, 2, 1], k, [1, 2, 2, 3], [True] * 4)
    s = float(contrastive_loss(b, 0.5).data)
    m = float(contrastive_loss(b, 0.5, reduction="mean").data)
    assert m == pytest.approx(s / 4)


def test_background_query_rejected():
    with pytest.raises(ValueError):
        batch_from(np.ones((1, 2)), [-1], np.ones((1, 2)), [1], [True])


def test_positive_and_negative_sets():
    b = batch_from(np.ones((2, 2)), [1, 2], np.ones((4, 2)), [1, 2, 1, 3], [False, False, True, True])
    pos, neg = b.masks()
    assert pos.tolist() == [[False, False, True, False], [False, False, False, False]]
    assert neg.tolist() == [[False, True, False, True], [True, False, True, True]]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 2.0))
def test_loss_non_negative(seed, tau):
    rng = np.random.default_rng(seed)
    q, k = unit(rng, 3, 5), unit(rng, 6, 5)
    loss = contrastive_loss(batch_from(q, [1, 2, 3], k, [1, 2, 3, 1, 2, 3], [True] * 6), tau)
    assert float(loss.data) >= 0


def test_monotone_in_similarities():
    # one query, one positive, one negative on the unit circle
    def loss(pos_angle, neg_angle):
        q = np.array([[1.0, 0.0]])
        keys = np.array([[math.cos(pos_angle), math.sin(pos_angle)], [math.cos(neg_angle), math.sin(neg_angle)]])
        return float(contrastive_loss(batch_from(q, [1], keys, [1, 2], [True, True]), 0.5).data)

    assert loss(0.5, 1.0) < loss(0.5, 0.8)  # negative more similar -> larger loss
    assert loss(0.3, 1.0) < loss(0.5, 1.0)  # positive more similar -> smaller loss


# ---------------------------------------------------------------------------
# EMA


def test_ema_examples():
    t = {"w": Tensor(np.array([1.0]))}
    o = {"w": Tensor(np.array([0.0]))}
    ema_update(t, o, 1.0)
    assert t["w"].data[0] == 1.0
    ema_update(t, o, 0.99)
    assert t["w"].data[0] == pytest.approx(0.99)
    ema_update(t, o, 0.0)
    assert t["w"].data[0] == 0.0


def test_ema_rejects_mismatch():
    with pytest.raises(ValueError):
        ema_update({"a": Tensor(np.ones(2))}, {"b": Tensor(np.ones(2))}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"a": Tensor(np.ones(2))}, {"a": Tensor(np.ones(3))}, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 0.995), st.floats(1e-3, 10.0))
def test_ema_convergence_bound(m, delta):
    target = {"w": Tensor(np.array([delta, -delta / 2]))}
    online = {"w": Tensor(np.zeros(2))}
    bound = math.ceil(math.log(1e-6 / delta) / math.log(m))
    for _ in range(max(bound, 0)):
        ema_update(target, online, m)
    assert np.abs(target["w"].data).max() < 1e-6 * (1 + 1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(temperature=0)
    with pytest.raises(ValueError):
        PretrainConfig(ema_momentum=1.5)
    with pytest.raises(ValueError):
        PretrainConfig(lambda_reg=-1)


def test_config_defaults():
    c = PretrainConfig()
    assert (c.temperature, c.ema_momentum, c.lambda_con, c.lambda_reg) == (0.5, 0.99, 1.0, 1.0)
    assert (c.lr, c.weight_decay, c.epochs, c.flip_prob, c.iou_thresh) == (1e-4, 1e-3, 12, 0.5, 0.5)
    assert not c.include_background


def test_cosine_schedule():
    assert cosine_lr(1e-4, 0, 100) == 1e-4
    assert cosine_lr(1e-4, 50, 100) == pytest.approx(5e-5)
    assert cosine_lr(1e-4, 100, 100) == pytest.approx(0.0, abs=1e-20)


# ---------------------------------------------------------------------------
# full step on a toy pair


def toy_setup(seed=0):
    """Tiny detector whose initial boxes line up with two proposals."""
    params = init_params(TINY, seed=seed)
    params["head.reg.pred.w"].data[:] = 0.0
    params["head.reg.pred.b"].data[:] = np.log([3.2, 3.35, 2.9, 3.05])
    rng = np.random.default_rng(seed)
    m_t, m_t1 = rng.rayleigh(size=(1, 32, 32)), rng.rayleigh(size=(1, 32, 32))
    props = [Proposal((3.0, 3.0, 9.0, 9.0), 1, 0), Proposal((19.0, 19.0, 25.0, 25.0), 2, 1)]
    return params, FramePair(m_t, m_t1, props, list(props))


def test_pretrain_loss_parts_on_toy_pair():
    params, pair = toy_setup()
    parts = pretrain_loss(params, clone_params(params), pair.frame_t[None], pair.frame_t1[None],
                          [pair.proposals_t], [pair.proposals_t1], TINY, PretrainConfig())
    assert parts.n_queries == 2 and parts.n_keys == 2
    assert parts.con > 0 and parts.reg > 0
    assert float(parts.total.data) == pytest.approx(parts.con + parts.reg)


def test_identical_frames_degenerate_pair():
    params, pair = toy_setup(1)
    same = FramePair(pair.frame_t, pair.frame_t, pair.proposals_t, pair.proposals_t)
    pcfg = PretrainConfig(ema_momentum=1.0)
    parts = pretrain_loss(params, clone_params(params), same.frame_t[None], same.frame_t1[None],
                          [same.proposals_t], [same.proposals_t1], TINY, pcfg)
    assert np.isfinite(parts.con) and parts.con >= 0


def test_target_receives_no_gradient_and_follows_ema():
    params, pair = toy_setup()
    target = clone_params(params)
    before_online = {k: v.data.copy() for k, v in params.items()}
    before_target = {k: v.data.copy() for k, v in target.items()}
    state = PretrainState(params, target, AdamW(params, lr=1e-3))
    pcfg = PretrainConfig()
    parts = pretrain_step([pair], state, TINY, pcfg, lr=1e-3)
    assert parts is not None
    assert all(not v.grad.any() for v in target.values())
    assert any(params[k].grad.any() for k in params)
    for k in target:
        expected = 0.99 * before_target[k] + 0.01 * params[k].data
        np.testing.assert_allclose(target[k].data, expected, rtol=0, atol=1e-15)
    assert any(not np.array_equal(before_online[k], params[k].data) for k in params)


def test_step_skips_pairs_without_proposals():
    params, pair = toy_setup()
    state = PretrainState(params, clone_params(params), AdamW(params))
    empty = FramePair(pair.frame_t, pair.frame_t1, [], [])
    assert pretrain_step([empty], state, TINY, PretrainConfig(), 1e-4) is None
    assert state.step == 0


def test_flip_keeps_instance_structure():
    params, pair = toy_setup(2)
    flipped = flip_pair(pair, 32)
    np.testing.assert_array_equal(flipped.frame_t, pair.frame_t[..., ::-1])
    assert [p.instance_id for p in flipped.proposals_t] == [p.instance_id for p in pair.proposals_t]
    assert flipped.proposals_t[0].box == (22.0, 3.0, 28.0, 9.0)
    assert flip_pair(flipped, 32).proposals_t == pair.proposals_t


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_assignment_commutes_with_flip(seed):
    from ricl.proposals import flip_box

    rng = np.random.default_rng(seed)
    preds = []
    for _ in range(20):
        x0, y0 = rng.uniform(0, 50, 2)
        preds.append((x0, y0, x0 + rng.uniform(1, 12), y0 + rng.uniform(1, 12)))
    props = [Proposal(preds[i], i + 1, i) for i in rng.choice(20, 3, replace=False)]
    a, _ = assign_phi(preds, props, 0.5)
    fp = [flip_box(b, 64) for b in preds]
    fprops = [Proposal(flip_box(p.box, 64), p.instance_id, p.source_cluster) for p in props]
    b, _ = assign_phi(fp, fprops, 0.5)
    np.testing.assert_array_equal(a, b)


def _toy_dataset(n, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        x0, y0 = rng.integers(2, 10, 2).astype(float)
        x1, y1 = rng.integers(16, 24, 2).astype(float)
        props = [Proposal((x0, y0, x0 + 6, y0 + 6), 1, 0), Proposal((x1, y1, x1 + 6, y1 + 6), 2, 1)]
        frames = []
        for _ in range(2):
            m = rng.rayleigh(size=(1, 32, 32))
            for p in props:
                a, b, c, d = (int(v) for v in p.box)
                m[0, b:d, a:c] += 8.0
            frames.append(m)
        pairs.append(FramePair(frames[0], frames[1], props, list(props)))
    return pairs


def test_loss_decreases_over_200_steps():
    pairs = _toy_dataset(8, 0)
    params, _ = toy_setup(0)
    state = PretrainState(params, clone_params(params), AdamW(params, lr=1e-3, weight_decay=1e-3))
    pcfg = PretrainConfig(lr=1e-3)
    losses = []
    for step in range(200):
        batch = [pairs[(2 * step) % 8], pairs[(2 * step + 1) % 8]]
        parts = pretrain_step(batch, state, TINY, pcfg, lr=1e-3)
        losses.append(float(parts.total.data))
    assert np.mean(losses[-10:]) <= 0.7 * np.mean(losses[:10])


def test_pretrain_run_smoke_and_determinism(tmp_path):
    pairs = _toy_dataset(8, 1)
    pcfg = PretrainConfig(epochs=2, batch_size=4, seed=3)
    params, _ = toy_setup(3)
    s1, log1 = pretrain_run(pairs, TINY, pcfg, init=clone_params(params))
    s2, log2 = pretrain_run(pairs, TINY, pcfg, init=clone_params(params))
    assert [e.epoch for e in log1] == [1, 2]
    assert log1 == log2
    assert all(s1.online[k].data.tobytes() == s2.online[k].data.tobytes() for k in s1.online)
    assert set(vars(log1[0])) == {"epoch", "mean_loss", "mean_con", "mean_reg", "lr", "skipped_pairs"}
    T.save_params(tmp_path / "p.bin", s1.online)
    back, _ = T.load_params(tmp_path / "p.bin")
    assert set(back) == set(s1.online)


def test_pretrain_run_needs_pairs():
    with pytest.raises(ValueError):
        pretrain_run([], TINY, PretrainConfig())
