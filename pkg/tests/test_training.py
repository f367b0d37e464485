import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdm.model import DiscriminatorConfig, ExtractorConfig, UNetConfig, init_extractor
from sdm.numerics import Tensor
from sdm.training import (
    Adam,
    Metrics,
    TrainConfig,
    Trainer,
    adversarial_d_loss,
    adversarial_g_loss,
    combine_metrics,
    ema_update,
    evaluate,
    hole_metrics,
    mean_fill,
    mean_fill_baseline,
    perceptual_loss,
    r1_penalty,
)

GEN = UNetConfig(base_width=8, num_scales=2, width_mults=(1, 2, 2), attn_key_width=8, bias_hidden=4)
DISC = DiscriminatorConfig(base_width=8, num_scales=2)
EXTRACTOR = ExtractorConfig(widths=(4, 8, 8, 8))


def batch(seed=0, n=4, size=8):
    r = np.random.default_rng(seed)
    x = np.tanh(r.standard_normal((n, 1, size, size)))
    m = (r.random((n, 1, size, size)) < 0.6).astype(float)
    m[:, :, 0, 0] = 0.0
    return x, m


def trainer(seed=0, **kw):
    return Trainer(TrainConfig(**kw), GEN, DISC, seed=seed, extractor_config=EXTRACTOR)


def test_g_loss_examples():
    assert adversarial_g_loss(Tensor([0.0])).item() == pytest.approx(math.log(2))
    assert adversarial_g_loss(Tensor([60.0])).item() < 1e-20
    assert adversarial_g_loss(Tensor([-2.0])).item() == pytest.approx(2.1269280110429727, abs=1e-12)


def test_d_loss_examples():
    assert adversarial_d_loss(Tensor([0.0]), Tensor([0.0])).item() == pytest.approx(2 * math.log(2))
    assert adversarial_d_loss(Tensor([60.0]), Tensor([-60.0])).item() < 1e-20
    assert adversarial_d_loss(Tensor([1.0]), Tensor([-1.0])).item() == pytest.approx(2 * math.log1p(math.exp(-1)), abs=1e-12)
    assert 2 * math.log1p(math.exp(-1)) == pytest.approx(0.6265, abs=1e-4)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.lists(st.floats(-50, 50), min_size=1, max_size=6))
def test_losses_finite_for_wide_logits(real, fake):
    g = adversarial_g_loss(Tensor(fake)).item()
    d = adversarial_d_loss(Tensor(real), Tensor(fake)).item()
    assert math.isfinite(g) and math.isfinite(d) and g >= 0 and d >= 0


def test_perceptual_properties(rng):
    ext = init_extractor(EXTRACTOR, np.random.default_rng(0))
    a = rng.uniform(-1, 1, (2, 1, 8, 8))
    c = rng.uniform(-1, 1, (2, 1, 8, 8))
    assert perceptual_loss(ext, a, a).item() == 0.0
    ac = perceptual_loss(ext, a, c).item()
    assert ac > 0
    assert ac == pytest.approx(perceptual_loss(ext, c, a).item(), rel=1e-14)


def test_ema_examples():
    e = {"w": Tensor(np.zeros(3))}
    p = {"w": Tensor(np.ones(3))}
    ema_update(e, p, 0.5)
    ema_update(e, p, 0.5)
    assert np.allclose(e["w"].data, 0.75)
    ema_update(e, p, 1.0)
    assert np.allclose(e["w"].data, 0.75)
    ema_update(e, p, 0.0)
    assert np.array_equal(e["w"].data, p["w"].data)
    with pytest.raises(ValueError):
        ema_update({"w": Tensor(np.zeros(2))}, p, 0.5)


def test_adam_first_step_is_signed_lr():
    w = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1, betas=(0.0, 0.99), eps=1e-12)
    ((w * w).sum()).backward()
    opt.step()
    np.testing.assert_allclose(w.data, [0.9, -1.9, 0.4], atol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda2=-1)
    with pytest.raises(ValueError):
        TrainConfig(T_train=0)
    with pytest.raises(ValueError):
        TrainConfig(alpha=-0.1)
    cfg = TrainConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.alpha) == (1.0, 2.0, 1e-4, 0.01)
    assert (cfg.T_train, cfg.T_test, cfg.lr, cfg.beta1, cfg.beta2, cfg.ema_decay) == (2, 4, 1e-3, 0.0, 0.99, 0.999)


def test_breakdown_weighted_sum():
    tr = trainer()
    losses, fake = tr.generator_step(*batch())
    assert len(losses.l_ag) == 2
    assert all(math.isfinite(v) for v in losses.l_ag + losses.l_pcp + losses.l_nll)
    assert abs(losses.total - losses.weighted_sum(tr.config)) <= 1e-9
    assert fake.shape == (4, 1, 8, 8)


def test_adversarial_only_total():
    tr = trainer(lambda2=0.0, lambda3=0.0)
    losses, _ = tr.generator_step(*batch())
    assert losses.total == pytest.approx(sum(losses.l_ag), abs=1e-12)


def test_single_iteration_one_triple():
    losses, _ = trainer(T_train=1).generator_step(*batch())
    assert len(losses.l_ag) == len(losses.l_pcp) == len(losses.l_nll) == 1


def test_generator_step_bit_reproducible():
    a, fa = trainer(seed=3).generator_step(*batch(1))
    b, fb = trainer(seed=3).generator_step(*batch(1))
    assert a == b and np.array_equal(fa, fb)


def test_nll_gradient_reaches_only_variance_path():
    tr = trainer(lambda1=0.0, lambda2=0.0, lambda3=1.0)
    total, *_ = tr.generator_objective(*batch(2))
    total.backward()
    c = GEN.image_channels
    head_w, head_b = tr.gen["head.w"].grad, tr.gen["head.b"].grad
    assert not np.any(head_w[:c]) and not np.any(head_b[:c])
    assert np.any(head_w[c:]) and np.any(head_b[c:])


def test_undetached_unroll_runs_and_differs():
    a = trainer(detach=True)
    b = trainer(detach=False)
    x, m = batch(4)
    ta, *_ = a.generator_objective(x, m)
    tb, *_ = b.generator_objective(x, m)
    assert ta.item() == tb.item()
    ta.backward()
    tb.backward()
    diffs = [not np.array_equal(a.gen[k].grad, b.gen[k].grad) for k in a.gen if a.gen[k].grad is not None]
    assert any(diffs)


def test_discriminator_chance_level_and_r1():
    tr = trainer(r1_interval=1)
    tr.disc["out.w"].data[...] = 0.0
    x, _ = batch(5)
    l_d, r1 = tr.discriminator_step(x, x.copy())
    assert l_d == pytest.approx(2 * math.log(2), abs=1e-12)
    assert r1 is not None and r1 >= 0


def test_gamma_zero_is_plain_loss():
    x, _ = batch(6)
    fake = np.zeros_like(x)
    a, b = trainer(r1_gamma=0.0), trainer(r1_gamma=0.0)
    la, ra = a.discriminator_step(x, fake)
    assert ra is None
    b.disc_opt.zero_grad()
    from sdm.model import discriminator_forward

    loss = adversarial_d_loss(discriminator_forward(b.disc, DISC, Tensor(x)), discriminator_forward(b.disc, DISC, Tensor(fake)))
    loss.backward()
    b.disc_opt.step()
    assert la == loss.item()
    assert all(np.array_equal(a.disc[k].data, b.disc[k].data) for k in a.disc)


def test_r1_gradient_matches_finite_differences():
    tr = trainer()
    x, _ = batch(7, n=2)
    value, grads = r1_penalty(tr.disc, DISC, x, gamma=1.0)
    assert value >= 0
    rng = np.random.default_rng(0)
    names = sorted(tr.disc)
    checked = 0
    for name in rng.choice(names, size=6, replace=False):
        p = tr.disc[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        orig = p.data[idx]
        h = 1e-5
        p.data[idx] = orig + h
        vp, _ = r1_penalty(tr.disc, DISC, x, 1.0)
        p.data[idx] = orig - h
        vm, _ = r1_penalty(tr.disc, DISC, x, 1.0)
        p.data[idx] = orig
        numeric = (vp - vm) / (2 * h)
        assert abs(grads[name][idx] - numeric) <= 1e-5 * max(1.0, abs(numeric)), name
        checked += 1
    assert checked == 6


def test_metrics_examples():
    x, m = batch(8)
    perfect = hole_metrics(x, x, m)
    assert perfect.mse == 0.0 and perfect.psnr == 99.0
    target = np.where(np.random.default_rng(1).random(x.shape) < 0.5, -1.0, 1.0)
    assert hole_metrics(np.zeros_like(target), target, m).mse == 1.0
    with pytest.raises(ValueError):
        hole_metrics(np.zeros((0, 1, 2, 2)), np.zeros((0, 1, 2, 2)), np.zeros((0, 1, 2, 2)))


@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(1, 5))
def test_metric_union_is_weighted_mean(seed, n1, n2):
    r = np.random.default_rng(seed)
    pred, tgt = r.uniform(-1, 1, (2, n1 + n2, 1, 4, 4))
    m = (r.random((n1 + n2, 1, 4, 4)) < 0.5).astype(float)
    whole = hole_metrics(pred, tgt, m)
    parts = combine_metrics([hole_metrics(pred[:n1], tgt[:n1], m[:n1]), hole_metrics(pred[n1:], tgt[n1:], m[n1:])])
    assert whole.n_pixels == parts.n_pixels
    assert whole.mse == pytest.approx(parts.mse, rel=1e-12, abs=1e-15)
    assert whole.l1 == pytest.approx(parts.l1, rel=1e-12, abs=1e-15)


def test_mean_fill_uses_known_pixels():
    x = np.array([[[[1.0, 0.5], [-0.3, 0.0]]]])
    m = np.array([[[[1.0, 1.0], [0.0, 0.0]]]])
    np.testing.assert_allclose(mean_fill(x, m), [[[[1.0, 0.5], [0.75, 0.75]]]])
    assert mean_fill_baseline(x, m).n_pixels == 2
    np.testing.assert_array_equal(mean_fill(x, np.zeros_like(m)), np.zeros_like(x))


def test_evaluate_deterministic_and_empty():
    tr = trainer()
    x, m = batch(9, n=3)
    a = evaluate(tr.ema, GEN, x, m, T=2, seed=4)
    b = evaluate(tr.ema, GEN, x, m, T=2, seed=4)
    assert isinstance(a, Metrics) and a == b
    with pytest.raises(ValueError):
        evaluate(tr.ema, GEN, x[:0], m[:0])


def test_fit_writes_log(tmp_path):
    tr = trainer(batch_size=2, eval_every=2, r1_interval=2)
    x, m = batch(10, n=5)
    rows = tr.fit(x, m, 3, log_path=tmp_path / "log.csv", val=(x[:2], m[:2]))
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,L_ag,L_pcp,L_nll,L_d,masked_mse_eval,masked_mse_train"
    assert len(lines) == 4 and len(rows) == 3
    assert rows[1]["masked_mse_eval"] and rows[2]["masked_mse_eval"] and not rows[0]["masked_mse_eval"]
    tr.save(tmp_path / "ck")
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["disc.ckpt", "gen.ckpt", "gen_ema.ckpt"]


def test_fresh_masks_mode():
    tr = trainer(batch_size=2, fresh_masks=True)
    x, m = batch(11, n=4, size=16)
    xb, mb = tr.next_batch(x, m)
    assert xb.shape == (2, 1, 16, 16) and mb.shape == (2, 1, 16, 16)
    assert set(np.unique(mb)) <= {0.0, 1.0}
