import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hexplain import autodiff as ad
from hexplain import trainer as tr
from hexplain.engine import load_builtin
from hexplain.kgstate import EMPTY_GRAPH, Triple, update_graph
from hexplain.policy import BLOCKS, Policy, PolicyConfig
from hexplain.trainer import (
    DivergenceError, EpisodeRunner, RolloutBuffer, StepBatch, TrainConfig, compute_returns,
    im_reward, load_policy, loss, save_policy, train,
)

SMALL = PolicyConfig(d_text=8, d_emb=6, d_sub=4, heads=2, max_tokens=12)


@pytest.fixture(scope="module")
def eggtree():
    return load_builtin("eggtree")


def tiny(**kw):
    base = dict(total_steps=20, num_envs=4, buffer_size=5, seed=3, policy=SMALL)
    base.update(kw)
    return TrainConfig(**base)


def brute_returns(rewards, gamma, bootstrap=0.0):
    n = len(rewards)
    out = []
    for t in range(n):
        total = sum(gamma ** (j - t) * rewards[j] for j in range(t, n))
        out.append(total + gamma ** (n - t) * bootstrap)
    return np.array(out)


# -- config ---------------------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert (c.gamma, c.entropy_coef, c.value_coef, c.template_coef, c.object_coef) == (0.9, 0.03, 9.0, 3.0, 9.0)
    assert (c.buffer_size, c.batch_size, c.learning_rate) == (40, 16, 0.003)


@pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(gamma=1.5), dict(entropy_coef=-1.0),
                                dict(im_mode="both"), dict(buffer_size=0)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_round_trip():
    c = tiny(im_coef=0.25)
    assert TrainConfig.from_dict(c.to_dict()) == c


# -- intrinsic reward -------------------------------------------------------------

def graph_of(*triples):
    return update_graph(EMPTY_GRAPH, set(triples), 0)


def test_im_from_empty():
    g = graph_of(Triple("egg", "is", "interactable"), Triple("egg", "in", "canopy"), Triple("player", "has", "lamp"))
    r, seen = im_reward(frozenset(), g)
    assert r == 3 and seen == g.triples


def test_im_subset_is_zero():
    g = graph_of(Triple("egg", "is", "interactable"))
    r, seen = im_reward(g.triples | {Triple("tree", "in", "forest")}, g)
    assert r == 0 and len(seen) == 2


def test_im_telescopes_on_walkthrough():
    spec = load_builtin("lanternquest")
    runner = EpisodeRunner(spec, 1, Policy(spec, SMALL), 100, seed=0)
    start = len(runner.kg_global[0])
    rewards, sizes = [], [start]
    for action in spec.walkthrough:
        _, r_im, _, _ = runner.advance(0, action)
        rewards.append(r_im)
        sizes.append(len(runner.kg_global[0]))
    assert all(r >= 0 for r in rewards)
    assert sizes == sorted(sizes)
    # the reset observation counts as the first increment from an empty global graph
    assert start + sum(rewards) == len(runner.kg_global[0])


# -- returns ----------------------------------------------------------------------

def test_returns_closed_form():
    returns, adv = compute_returns([0, 0, 10], [0, 0, 0], 0.9)
    np.testing.assert_allclose(returns, [8.1, 9.0, 10.0])
    np.testing.assert_allclose(adv, returns)


def test_returns_gamma_zero_is_identity():
    r = [1.0, -2.0, 3.5]
    np.testing.assert_array_equal(compute_returns(r, [0, 0, 0], 0.0)[0], r)


def test_returns_length_mismatch():
    with pytest.raises(ValueError):
        compute_returns([1, 2], [0], 0.9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0.01, 1.0), st.floats(-5, 5))
def test_returns_match_brute_force(rewards, gamma, boot):
    values = np.linspace(-1, 1, len(rewards))
    returns, adv = compute_returns(rewards, values, gamma, bootstrap=boot)
    np.testing.assert_allclose(returns, brute_returns(rewards, gamma, boot), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(adv, returns - values, atol=1e-12)


def synthetic_buffer(rng, T=6, B=3, values=None, done_at=None):
    buf = RolloutBuffer(T)
    for t in range(T):
        done = np.zeros(B, dtype=bool)
        if done_at is not None:
            done[:] = t == done_at
        buf.add(StepBatch(
            template_logp=ad.Tensor(-rng.random(B), requires_grad=True),
            object_logp=ad.Tensor(-rng.random(B), requires_grad=True),
            entropy=ad.Tensor(rng.random(B), requires_grad=True),
            value=ad.Tensor(rng.normal(size=B) if values is None else values[t], requires_grad=True),
            reward=rng.integers(0, 3, size=B).astype(float),
            done=done,
            bootstrap=np.zeros(B),
        ))
    return buf


def test_buffer_returns_match_per_env_recursion():
    rng = np.random.default_rng(0)
    buf = synthetic_buffer(rng, done_at=2)
    nv = rng.normal(size=3)
    returns, adv = buf.returns(0.9, nv)
    for b in range(3):
        rew = [s.reward[b] for s in buf.steps]
        val = [s.value.data[b] for s in buf.steps]
        first, _ = compute_returns(rew[:3], val[:3], 0.9, bootstrap=0.0)
        rest, _ = compute_returns(rew[3:], val[3:], 0.9, bootstrap=nv[b])
        np.testing.assert_allclose(returns[:, b], np.concatenate([first, rest]))
    np.testing.assert_allclose(adv, returns - np.stack([s.value.data for s in buf.steps]))


def test_buffer_overflow():
    buf = synthetic_buffer(np.random.default_rng(0), T=2)
    assert buf.full
    with pytest.raises(RuntimeError):
        buf.add(buf.steps[0])


# -- loss -------------------------------------------------------------------------

def straight_line_loss(buf, config, nv):
    """Scalar loops over (t, b) with returns from the double-sum oracle."""
    T, B = len(buf.steps), len(nv)
    rets = np.zeros((T, B))
    for b in range(B):
        rets[:, b] = brute_returns([s.reward[b] for s in buf.steps], config.gamma, nv[b])
    tl = ol = vl = hl = 0.0
    for t, s in enumerate(buf.steps):
        for b in range(B):
            a = rets[t, b] - s.value.data[b]
            tl += -a * s.template_logp.data[b]
            ol += -a * s.object_logp.data[b]
            vl += (s.value.data[b] - rets[t, b]) ** 2
            hl += s.entropy.data[b]
    n = T * B
    parts = (tl / n, ol / n, vl / n, hl / n)
    total = (config.template_coef * parts[0] + config.object_coef * parts[1]
             + config.value_coef * parts[2] - config.entropy_coef * parts[3])
    return parts, total


def test_loss_matches_straight_line():
    rng = np.random.default_rng(5)
    buf = synthetic_buffer(rng)
    cfg = TrainConfig()
    nv = rng.normal(size=3)
    parts = loss(buf, cfg, nv)
    (tl, ol, vl, hl), total = straight_line_loss(buf, cfg, nv)
    np.testing.assert_allclose([parts.template, parts.object, parts.value, parts.entropy],
                               [tl, ol, vl, hl], rtol=1e-10)
    assert parts.total.item() == pytest.approx(total, rel=1e-10)


def perfect_buffer():
    rng = np.random.default_rng(1)
    rewards = rng.integers(0, 3, size=(4, 2)).astype(float)
    nv = np.array([0.5, -0.5])
    rets = np.stack([brute_returns(rewards[:, b], 0.9, nv[b]) for b in range(2)], axis=1)
    buf = synthetic_buffer(rng, T=4, B=2, values=rets)
    for s, r in zip(buf.steps, rewards):
        s.reward[:] = r
    return buf, nv


def test_zero_advantage_zero_policy_loss():
    buf, nv = perfect_buffer()
    parts = loss(buf, TrainConfig(), nv)
    assert abs(parts.template) < 1e-12 and abs(parts.object) < 1e-12


def test_perfect_values_zero_value_loss():
    buf, nv = perfect_buffer()
    assert loss(buf, TrainConfig(), nv).value < 1e-24


def test_loss_gradient_signs():
    # positive advantage raises the sampled log-probability
    rng = np.random.default_rng(2)
    buf = synthetic_buffer(rng, T=1, B=1, values=[np.array([0.0])])
    buf.steps[0].reward[:] = 1.0
    with ad.Tape() as tape:
        parts = loss(buf, TrainConfig(), np.zeros(1))
    tape.backward(parts.total)
    assert buf.steps[0].template_logp.grad[0] < 0
    assert buf.steps[0].entropy.grad[0] < 0


# -- training loop ------------------------------------------------------------------

def test_zero_learning_rate_keeps_params(eggtree):
    cfg = tiny(learning_rate=0.0)
    before = Policy(eggtree, cfg.policy, seed=cfg.seed).params.arrays()
    after = train(eggtree, cfg).policy.params.arrays()
    assert before.keys() == after.keys()
    for k in before:
        assert np.array_equal(before[k], after[k]), k


def test_seed_determinism(eggtree):
    a, b = train(eggtree, tiny(total_steps=40)), train(eggtree, tiny(total_steps=40))
    assert a.curve == b.curve and a.episode_scores == b.episode_scores
    assert a.checkpoint_bytes() == b.checkpoint_bytes()
    c = train(eggtree, tiny(total_steps=40, seed=4))
    assert c.checkpoint_bytes() != a.checkpoint_bytes()


def test_gradient_reaches_every_block(eggtree):
    cfg = tiny(learning_rate=0.01)
    before = Policy(eggtree, cfg.policy, seed=cfg.seed).params
    after = train(eggtree, cfg).policy.params
    changed = {name for name, t in after if not np.array_equal(t.data, before[name].data)}
    for block, names in after.blocks().items():
        assert changed & set(names), f"no parameter in {block} moved"
    assert set(after.blocks()) == set(BLOCKS)


def test_buffer_flushes_when_full_or_at_episode_end(eggtree, monkeypatch):
    seen = []
    real = tr.loss

    def spy(buffer, config, nv):
        seen.append((len(buffer), bool(buffer.steps[-1].done.any())))
        return real(buffer, config, nv)

    monkeypatch.setattr(tr, "loss", spy)
    cfg = tiny(total_steps=400, max_episode_steps=7)
    result = train(eggtree, cfg)
    assert len(seen) == result.updates
    for size, ended in seen[:-1]:
        assert size == cfg.buffer_size or ended
    assert any(ended and size < cfg.buffer_size for size, ended in seen)


def test_buffer_flushes_only_when_full_without_episode_flush(eggtree, monkeypatch):
    seen = []
    real = tr.loss
    monkeypatch.setattr(tr, "loss", lambda b, c, nv: (seen.append(len(b)), real(b, c, nv))[1])
    train(eggtree, tiny(total_steps=100, max_episode_steps=7, flush_on_episode_end=False))
    assert seen == [5] * 5


def test_reward_composition(eggtree, monkeypatch):
    calls, logged = [], []
    real_advance = EpisodeRunner.advance
    real_add = RolloutBuffer.add

    def advance(self, i, action):
        out = real_advance(self, i, action)
        calls.append(out[:2])
        return out

    def add(self, item):
        logged.extend(item.reward.tolist())
        return real_add(self, item)

    monkeypatch.setattr(EpisodeRunner, "advance", advance)
    monkeypatch.setattr(RolloutBuffer, "add", add)
    for mode, lam in (("game_and_IM", 0.5), ("game_only", 0.5)):
        calls.clear()
        logged.clear()
        train(eggtree, tiny(im_mode=mode, im_coef=lam, total_steps=40))
        assert all(r_im >= 0 for _, r_im in calls)
        expected = [g + (lam * m if mode == "game_and_IM" else 0.0) for g, m in calls]
        assert logged == expected


def test_divergence_error(eggtree, monkeypatch, tmp_path):
    real = tr.loss

    def poisoned(buffer, config, nv):
        parts = real(buffer, config, nv)
        parts.total = ad.scale(parts.total, float("nan"))
        return parts

    monkeypatch.setattr(tr, "loss", poisoned)
    with pytest.raises(DivergenceError) as err:
        train(eggtree, tiny(), out_dir=tmp_path)
    assert "rewards" in err.value.batch
    assert (tmp_path / "divergence.json").exists()


def test_outputs_written(eggtree, tmp_path):
    result = train(eggtree, tiny(total_steps=40, checkpoint_every=20), out_dir=tmp_path)
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "step,episode_score_mean100,max_score_seen"
    assert len(lines) == len(result.curve) + 1
    assert list(tmp_path.glob("checkpoint_*.ckpt"))
    loaded = load_policy(tmp_path / "final.ckpt", eggtree)
    for name, t in result.policy.params:
        assert np.array_equal(loaded.params[name].data, t.data)


def test_checkpoint_for_other_game_rejected(eggtree, tmp_path):
    path = tmp_path / "p.ckpt"
    save_policy(path, Policy(eggtree, SMALL))
    with pytest.raises(ValueError):
        load_policy(path, load_builtin("lanternquest"))


def test_stop_at_score(eggtree):
    result = train(eggtree, tiny(total_steps=5000, stop_at_score=5, learning_rate=0.0))
    assert result.max_score_seen >= 5
    assert result.reached_step is not None and result.steps == result.reached_step
