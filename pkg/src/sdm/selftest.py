"""Built-in checks run by ``sdm selftest``.

Each suite returns ``(passed, detail)``; output is one CSV line per suite and
contains no timings, so two runs with the same seed print identical text.
"""

from __future__ import annotations

import csv
import math
import sys

import numpy as np
from scipy.integrate import simpson
from scipy.stats import norm

from .attention import attend, init_attention, scaled_attention
from .diffusion import compose, init_state, pick, run
from .model import UNetConfig, generator_forward, init_generator, make_predictor
from .numerics import Tensor, conv2d, finite_diff_check, make_rng, no_grad
from .prob_head import BIN_HALF_WIDTH, LOG_FLOOR, GaussianPrediction, discretized_nll
from .schedule import ALL_KINDS, MaskSchedule


def simpson_bin_nll(mu: float, sigma: float, y: float, points: int = 2001) -> float:
    """-log of the Gaussian mass over the pixel bin of ``y`` by Simpson's rule."""
    lo = -math.inf if y <= -1.0 else y - BIN_HALF_WIDTH
    hi = math.inf if y >= 1.0 else y + BIN_HALF_WIDTH
    a = max(lo, mu - 12.0 * sigma)
    b = min(hi, mu + 12.0 * sigma)
    mass = 0.0
    if b > a:
        xs = np.linspace(a, b, points)
        mass = float(simpson(norm.pdf(xs, mu, sigma), x=xs))
    return -math.log(max(mass, LOG_FLOOR))


def suite_nll_oracle(rng, count: int = 300):
    mu = rng.uniform(-1, 1, count)
    sigma = np.exp(rng.uniform(math.log(1e-3), math.log(2.0), count))
    y = rng.integers(0, 256, count) / 127.5 - 1.0
    pred = GaussianPrediction(Tensor(mu.reshape(1, 1, 1, -1)), Tensor(np.log(sigma**2).reshape(1, 1, 1, -1)))
    worst = 0.0
    for i in range(count):
        single = GaussianPrediction(pred.mu[:, :, :, i : i + 1], pred.log_var[:, :, :, i : i + 1])
        got = discretized_nll(single, y[i].reshape(1, 1, 1, 1)).item()
        worst = max(worst, abs(got - simpson_bin_nll(mu[i], sigma[i], y[i])))
    return worst <= 1e-6, f"max_abs_err={worst:.3e}"


def suite_stop_gradient(rng):
    shape = (2, 1, 4, 4)
    mu = Tensor(rng.uniform(-0.9, 0.9, shape), requires_grad=True)
    log_var = Tensor(rng.uniform(-8, 0, shape), requires_grad=True)
    y = rng.integers(0, 256, shape) / 127.5 - 1.0
    loss = discretized_nll(GaussianPrediction(mu, log_var), y)
    loss.backward()
    mu_zero = mu.grad is None or not np.any(mu.grad)
    report = finite_diff_check(lambda: discretized_nll(GaussianPrediction(mu, log_var), y), [log_var],
                               eps=1e-6, tol=1e-4)
    return mu_zero and report.passed, f"mu_grad_zero={mu_zero} max_rel_err={report.max_rel_err:.3e}"


def suite_gradcheck(rng):
    x = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    conv = finite_diff_check(lambda: (conv2d(x, w, b, stride=2, padding=1) ** 2).sum(), [x, w, b], eps=1e-6)
    cfg = UNetConfig(base_width=4, num_scales=1, width_mults=(1, 2), attn_key_width=4, bias_hidden=2)
    params = init_generator(cfg, rng)
    xin = rng.uniform(-1, 1, (1, 1, 4, 4))
    m0 = (rng.random((1, 1, 4, 4)) < 0.5).astype(float)

    def loss():
        pred = generator_forward(params, cfg, xin * m0, m0, m0, 1 - m0, 0, 1)
        return (pred.mu * pred.mu).sum() + (pred.log_var * 0.1).sum()

    model = finite_diff_check(loss, list(params.values()), eps=1e-6, tol=1e-4, max_coords=60, rng=rng)
    ok = conv.passed and model.passed
    return ok, f"conv_rel_err={conv.max_rel_err:.3e} model_rel_err={model.max_rel_err:.3e}"


def suite_attention(rng):
    d, dk = 6, 4
    params = {}
    init_attention(params, "a", d, dk, rng)
    feats = Tensor(rng.standard_normal((2, d, 4, 4)))
    with no_grad():
        out, weights = attend(params, "a", feats, None, bias=np.zeros((1, 1, 16)), return_weights=True)
        x = feats.data.reshape(2, d, 16).transpose(0, 2, 1)
        get = lambda n: params[n].data
        q = x @ get("a.q.w") + get("a.q.b")
        k = x @ get("a.k.w") + get("a.k.b")
        v = x @ get("a.v.w") + get("a.v.b")
        logits = q @ k.transpose(0, 2, 1) / math.sqrt(dk)
        ref_w = np.exp(logits - logits.max(-1, keepdims=True))
        ref_w /= ref_w.sum(-1, keepdims=True)
        ref = (ref_w @ v) @ get("a.o.w") + get("a.o.b")
        ref = feats.data + ref.transpose(0, 2, 1).reshape(feats.shape)
        err = float(np.abs(out.data - ref).max())
        rows = float(np.abs(weights.data.sum(-1) - 1).max())
        shift = rng.standard_normal((2, 16, 1))
        a, _ = scaled_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(shift))
        b, _ = scaled_attention(Tensor(q), Tensor(k), Tensor(v))
        shift_err = float(np.abs(a.data - b.data).max())
    ok = err <= 1e-9 and rows <= 1e-6 and shift_err <= 1e-9
    return ok, f"ref_err={err:.3e} row_err={rows:.3e} shift_err={shift_err:.3e}"


def suite_diffusion(rng, trials: int):
    failures = 0
    for _ in range(trials):
        kind = ALL_KINDS[int(rng.integers(len(ALL_KINDS)))]
        T = int(rng.integers(1, 9))
        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        m0 = (rng.random((1, 1, h, w)) < rng.uniform(0, 1)).astype(float)
        x0 = rng.uniform(-1, 1, (1, 1, h, w))
        sched = MaskSchedule(kind, T)
        state = init_state(x0, m0)
        prev = state.m
        ok = True
        for t in range(1, T + 1):
            u_pre = rng.random((1, 1, h, w))
            if rng.random() < 0.3:
                u_pre = np.round(u_pre * 3) / 3
            m_t, u_t = pick(state, u_pre, sched, t)
            m_alt, _ = pick(state, np.exp(3 * u_pre) - 7, sched, t)
            ok &= bool(np.array_equal(m_t, m_alt)) and bool(np.all(m_t >= prev))
            pred = GaussianPrediction.from_raw(Tensor(np.tanh(rng.standard_normal(x0.shape))), Tensor(np.zeros(x0.shape)))
            x_t = compose(state, pred, m_t, 0.01, t == T, rng).data
            ok &= bool(np.all(x_t[m0 == 1] == x0[m0 == 1]))
            state = type(state)(state.x0, state.m0, x_t, m_t, u_t, t)
            prev = m_t
        ok &= bool(np.all(state.m == 1))
        failures += not ok
    return failures == 0, f"trials={trials} failures={failures}"


def suite_compose(rng):
    x0 = rng.uniform(-1, 1, (1, 1, 4, 4))
    m0 = (rng.random((1, 1, 4, 4)) < 0.5).astype(float)
    state = init_state(x0, m0)
    mu = np.tanh(rng.standard_normal(x0.shape))
    pred = GaussianPrediction.from_raw(Tensor(mu), Tensor(rng.uniform(-3, 0, x0.shape)))
    ones = np.ones_like(m0)
    a0 = compose(state, pred, ones, 0.0, False, make_rng(1)).data
    mean_ok = np.allclose(a0, x0 * m0 + mu * (1 - m0), atol=0, rtol=0)
    same = np.array_equal(compose(state, pred, m0, 0.5, False, make_rng(1)).data, x0 * m0)
    f1 = compose(state, pred, ones, 0.5, True, make_rng(1)).data
    f2 = compose(state, pred, ones, 0.5, True, make_rng(2)).data
    final_ok = np.array_equal(f1, f2)
    return bool(mean_ok and same and final_ok), f"alpha0={mean_ok} identity={same} final={final_ok}"


def suite_schedule(rng):
    ok = True
    for kind in ALL_KINDS:
        for T in range(1, 9):
            s = MaskSchedule(kind, T)
            fr = [s.known_fraction(t) for t in range(T + 1)]
            ok &= fr[0] == 0.0 and fr[-1] == 1.0 and all(b >= a for a, b in zip(fr, fr[1:]))
            n = int(rng.integers(0, 500))
            ok &= sum(s.reveal_counts(n)) == n
    return ok, f"default={MaskSchedule().kind.value}"


def suite_end_to_end(rng):
    cfg = UNetConfig(base_width=4, num_scales=1, width_mults=(1, 2), attn_key_width=4, bias_hidden=2)
    params = init_generator(cfg, rng)
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    m0 = (rng.random((2, 1, 8, 8)) < 0.6).astype(float)
    outs = [run(make_predictor(params, cfg), init_state(x0, m0), MaskSchedule(), 0.01, make_rng(s))[0] for s in (3, 3)]
    same = np.array_equal(outs[0], outs[1])
    kept = np.array_equal(outs[0][m0.astype(bool)], x0[m0.astype(bool)])
    return bool(same and kept), f"deterministic={same} known_kept={kept}"


def run_selftest(seed: int = 0, trials: int = 500, out=None) -> bool:
    out = out or sys.stdout
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["suite", "status", "detail"])
    suites = [
        ("nll_oracle", lambda r: suite_nll_oracle(r)),
        ("stop_gradient", suite_stop_gradient),
        ("gradcheck", suite_gradcheck),
        ("attention", suite_attention),
        ("diffusion_invariants", lambda r: suite_diffusion(r, trials)),
        ("compose_identities", suite_compose),
        ("schedule", suite_schedule),
        ("end_to_end", suite_end_to_end),
    ]
    all_ok = True
    for name, fn in suites:
        try:
            ok, detail = fn(make_rng(seed, f"selftest.{name}"))
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        writer.writerow([name, "pass" if ok else "FAIL", detail])
    writer.writerow(["all", "pass" if all_ok else "FAIL", ""])
    return all_ok


__all__ = ["run_selftest", "simpson_bin_nll"]
