"""Adversarial training across unrolled diffusion iterations.

The generator loss at iteration j is
``lambda1 * L_ag + lambda2 * L_pcp + lambda3 * L_nll`` and the terms are summed
over j = 1..T_train before a single Adam update.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MaskSpec, gen_mask
from .diffusion import DiffusionState, init_state, pick, run
from .model import (
    DiscriminatorConfig,
    ExtractorConfig,
    Params,
    UNetConfig,
    clone_params,
    discriminator_forward,
    extractor_features,
    generator_forward,
    init_discriminator,
    init_extractor,
    init_generator,
    make_predictor,
    save_checkpoint,
)
from .numerics import NumericError, Tensor, as_tensor, make_rng, mean, no_grad, softplus
from .prob_head import discretized_nll, sample_pixels, uncertainty_from_variance
from .schedule import MaskSchedule, ScheduleKind

LOSS_IMAGES = ("full", "revealed")
PSNR_CAP = 99.0


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 2.0
    lambda3: float = 1e-4
    alpha: float = 0.01
    T_train: int = 2
    T_test: int = 4
    batch_size: int = 8
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    ema_warmup: bool = True
    r1_gamma: float = 1.0
    r1_interval: int = 16
    schedule: str = "linear"
    detach: bool = True
    loss_image: str = "full"
    fresh_masks: bool = False
    eval_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "alpha", "r1_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.T_train < 1 or self.T_test < 1:
            raise ValueError("T_train and T_test must be >= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.loss_image not in LOSS_IMAGES:
            raise ValueError(f"loss_image must be one of {LOSS_IMAGES}")
        ScheduleKind.parse(self.schedule)


# --------------------------------------------------------------------------
# losses


def adversarial_g_loss(d_logits_fake) -> Tensor:
    """Non-saturating generator loss ``mean(-log sigmoid(logit))``."""
    return mean(softplus(-as_tensor(d_logits_fake)))


def adversarial_d_loss(d_logits_real, d_logits_fake) -> Tensor:
    return mean(softplus(-as_tensor(d_logits_real))) + mean(softplus(as_tensor(d_logits_fake)))


def perceptual_loss(extractor: Params, x, x_hat, x_features: list[Tensor] | None = None) -> Tensor:
    """Sum over extractor taps of the mean squared feature difference."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise NumericError(f"perceptual_loss: shapes {x.shape} vs {x_hat.shape}")
    fa = x_features if x_features is not None else extractor_features(extractor, x)
    fb = extractor_features(extractor, x_hat)
    total = None
    for a, b in zip(fa, fb):
        d = a - b
        term = mean(d * d)
        total = term if total is None else total + term
    return total


def masked_mse(pred: np.ndarray, target: np.ndarray, m0: np.ndarray) -> float:
    hole = np.broadcast_to(np.asarray(m0) == 0, pred.shape)
    if not hole.any():
        return 0.0
    return float(np.mean((pred[hole] - target[hole]) ** 2))


# --------------------------------------------------------------------------
# optimizer and EMA


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, betas: tuple[float, float] = (0.0, 0.99), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ema_update(ema_params, params, decay: float):
    """``ema <- decay * ema + (1 - decay) * params`` for dicts of tensors or arrays."""
    for k, e in ema_params.items():
        src = params[k].data if isinstance(params[k], Tensor) else np.asarray(params[k])
        if isinstance(e, Tensor):
            if e.shape != src.shape:
                raise ValueError(f"ema shape mismatch for {k}: {e.shape} vs {src.shape}")
            e.data = decay * e.data + (1.0 - decay) * src
        else:
            ema_params[k] = decay * np.asarray(e) + (1.0 - decay) * src
    return ema_params


class _Frozen:
    """Temporarily stop gradient accumulation into a parameter dict."""

    def __init__(self, params: Params):
        self.params = params

    def __enter__(self):
        self.saved = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        return self.params

    def __exit__(self, *exc):
        for k, p in self.params.items():
            p.requires_grad = self.saved[k]
        return False


# --------------------------------------------------------------------------
# R1


def _param_grads_at(params: Params, config: DiscriminatorConfig, image: np.ndarray) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    discriminator_forward(params, config, Tensor(image)).sum().backward()
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def r1_penalty(params: Params, config: DiscriminatorConfig, real: np.ndarray, gamma: float,
               eps: float = 1e-3) -> tuple[float, dict[str, np.ndarray]]:
    """R1 value ``gamma/2 * mean_n ||grad_x D(x_n)||^2`` and its parameter gradient.

    The gradient needs a mixed second derivative, obtained as a central
    difference of parameter gradients along the input gradient direction.
    Parameter ``.grad`` fields are left cleared.
    """
    real = np.asarray(real, dtype=np.float64)
    n = real.shape[0]
    saved = {k: p.requires_grad for k, p in params.items()}
    with _Frozen(params):
        x = Tensor(real, requires_grad=True)
        discriminator_forward(params, config, x).sum().backward()
    g = x.grad
    value = 0.5 * gamma * float(np.sum(g * g)) / n
    peak = float(np.abs(g).max())
    if gamma == 0.0 or peak == 0.0:
        return value, {k: np.zeros_like(p.data) for k, p in params.items()}
    h = eps / peak
    try:
        for p in params.values():
            p.requires_grad = True
        plus = _param_grads_at(params, config, real + h * g)
        minus = _param_grads_at(params, config, real - h * g)
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
            p.grad = None
    scale = gamma / (n * 2.0 * h)
    return value, {k: scale * (plus[k] - minus[k]) for k in params}


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Metrics:
    mse: float
    psnr: float
    l1: float
    n_pixels: int

    def as_row(self) -> dict[str, str]:
        return {"masked_mse": f"{self.mse:.10g}", "masked_psnr": f"{self.psnr:.6f}",
                "masked_l1": f"{self.l1:.10g}", "n_pixels": str(self.n_pixels)}


def psnr_from_mse(mse: float) -> float:
    """Peak-to-peak range is 2 for [-1, 1] images; capped for exact fits."""
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(4.0 / mse))


def hole_metrics(pred: np.ndarray, target: np.ndarray, masks: np.ndarray) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape[0] == 0:
        raise ValueError("empty dataset")
    hole = np.broadcast_to(np.asarray(masks) == 0, pred.shape)
    count = int(hole.sum())
    if count == 0:
        return Metrics(0.0, PSNR_CAP, 0.0, 0)
    diff = pred[hole] - target[hole]
    mse = float(np.mean(diff * diff))
    return Metrics(mse, psnr_from_mse(mse), float(np.mean(np.abs(diff))), count)


def combine_metrics(parts: list[Metrics]) -> Metrics:
    count = sum(p.n_pixels for p in parts)
    if count == 0:
        return Metrics(0.0, PSNR_CAP, 0.0, 0)
    mse = sum(p.mse * p.n_pixels for p in parts) / count
    l1 = sum(p.l1 * p.n_pixels for p in parts) / count
    return Metrics(mse, psnr_from_mse(mse), l1, count)


def mean_fill(images: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Fill holes with the per-image, per-channel mean of known pixels (0 if none)."""
    images = np.asarray(images, dtype=np.float64)
    m = np.broadcast_to(np.asarray(masks, dtype=np.float64), images.shape)
    known = m.sum(axis=(2, 3), keepdims=True)
    avg = np.where(known > 0, (images * m).sum(axis=(2, 3), keepdims=True) / np.maximum(known, 1), 0.0)
    return images * m + avg * (1.0 - m)


def mean_fill_baseline(images: np.ndarray, masks: np.ndarray) -> Metrics:
    return hole_metrics(mean_fill(images, masks), images, masks)


def inpaint(gen: Params, gen_config: UNetConfig, images: np.ndarray, masks: np.ndarray, T: int,
            alpha: float, rng: np.random.Generator, schedule: str = "linear", batch_size: int = 50,
            freeze_revealed: bool = False) -> np.ndarray:
    """Run the diffusion loop over a dataset in batches; returns completed images."""
    sched = MaskSchedule(ScheduleKind.parse(schedule), T)
    predict = make_predictor(gen, gen_config)
    outs = []
    for start in range(0, images.shape[0], batch_size):
        state = init_state(images[start : start + batch_size], masks[start : start + batch_size])
        x, _ = run(predict, state, sched, alpha, rng, freeze_revealed=freeze_revealed)
        outs.append(x)
    return np.concatenate(outs) if outs else np.zeros_like(images)


def evaluate(gen: Params, gen_config: UNetConfig, images: np.ndarray, masks: np.ndarray, T: int = 4,
             alpha: float = 0.01, seed: int = 0, schedule: str = "linear", batch_size: int = 50) -> Metrics:
    """Hole-only MSE / PSNR / L1 of the model's completions; deterministic given ``seed``."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    out = inpaint(gen, gen_config, images, masks, T, alpha, make_rng(seed, "eval"), schedule, batch_size)
    return hole_metrics(out, images, masks)


# --------------------------------------------------------------------------
# trainer


@dataclass
class LossBreakdown:
    """Per-iteration generator loss terms and their weighted total."""

    l_ag: list[float] = field(default_factory=list)
    l_pcp: list[float] = field(default_factory=list)
    l_nll: list[float] = field(default_factory=list)
    total: float = 0.0
    masked_mse_train: float = 0.0

    def weighted_sum(self, config: TrainConfig) -> float:
        return sum(config.lambda1 * a + config.lambda2 * p + config.lambda3 * n
                   for a, p, n in zip(self.l_ag, self.l_pcp, self.l_nll))


LOG_FIELDS = ("step", "L_ag", "L_pcp", "L_nll", "L_d", "masked_mse_eval", "masked_mse_train")


class Trainer:
    """Owns generator, EMA copy, discriminator, frozen extractor and optimizer state."""

    def __init__(self, config: TrainConfig, gen_config: UNetConfig | None = None,
                 disc_config: DiscriminatorConfig | None = None, seed: int = 0,
                 extractor_config: ExtractorConfig | None = None, mask_spec: MaskSpec | None = None):
        config.validate()
        self.config = config
        self.gen_config = gen_config or UNetConfig()
        self.disc_config = disc_config or DiscriminatorConfig(image_channels=self.gen_config.image_channels)
        self.extractor_config = extractor_config or ExtractorConfig(image_channels=self.gen_config.image_channels)
        self.seed = seed
        self.gen = init_generator(self.gen_config, make_rng(seed, "model.gen"))
        self.disc = init_discriminator(self.disc_config, make_rng(seed, "model.disc"))
        self.extractor = init_extractor(self.extractor_config, make_rng(seed, "model.extractor"))
        self.ema = clone_params(self.gen, requires_grad=False)
        betas = (config.beta1, config.beta2)
        self.gen_opt = Adam(self.gen, config.lr, betas, config.adam_eps)
        self.disc_opt = Adam(self.disc, config.lr, betas, config.adam_eps)
        self.sample_rng = make_rng(seed, "sampling")
        self.data_rng = make_rng(seed, "data.batches")
        self.mask_rng = make_rng(seed, "data.masks")
        self.mask_spec = mask_spec or MaskSpec()
        self.step = 0
        self._perm = np.zeros(0, dtype=np.int64)
        self._cursor = 0

    @property
    def schedule(self) -> MaskSchedule:
        return MaskSchedule(ScheduleKind.parse(self.config.schedule), self.config.T_train)

    def ema_decay_now(self) -> float:
        d = self.config.ema_decay
        if self.config.ema_warmup:
            d = min(d, (1.0 + self.step) / (10.0 + self.step))
        return d

    def generator_objective(self, x_real: np.ndarray, m0: np.ndarray, rng: np.random.Generator | None = None):
        """Weighted loss summed over the unrolled iterations, not yet back-propagated.

        Returns ``(total, breakdown, final_loss_image, final_state)``. With
        ``detach`` each iteration reads the previous iterate as a constant.
        """
        cfg = self.config
        rng = rng if rng is not None else self.sample_rng
        x_real = np.asarray(x_real, dtype=np.float64)
        state = init_state(x_real, m0)
        n = x_real.shape[0]
        sched = self.schedule
        T = cfg.T_train
        hole = 1.0 - state.m0
        with no_grad():
            real_feats = extractor_features(self.extractor, Tensor(x_real)) if cfg.lambda2 > 0 else None
        losses = LossBreakdown()
        x_in = state.x
        total = None
        final_img = None
        with _Frozen(self.disc):
            for j in range(1, T + 1):
                pred = generator_forward(self.gen, self.gen_config, x_in, state.m0, state.m, state.u, j - 1, T)
                u_pre = uncertainty_from_variance(pred)
                m_j, u_j = pick(state, u_pre, sched, j)
                fill = sample_pixels(pred, cfg.alpha, rng, j == T)
                x0 = Tensor(state.x0)
                x_j = x0 + fill * (m_j - state.m0)
                loss_img = x_j if cfg.loss_image == "revealed" else x0 + fill * hole
                l_ag = adversarial_g_loss(discriminator_forward(self.disc, self.disc_config, loss_img))
                l_pcp = perceptual_loss(self.extractor, x_real, loss_img, real_feats) if cfg.lambda2 > 0 else Tensor(0.0)
                l_nll = discretized_nll(pred, x_real, 1.0 - state.m) * (1.0 / n)
                total_j = cfg.lambda1 * l_ag + cfg.lambda2 * l_pcp + cfg.lambda3 * l_nll
                vals = (l_ag.item(), l_pcp.item(), l_nll.item(), total_j.item())
                if not all(math.isfinite(v) for v in vals):
                    raise NumericError(f"non-finite generator loss at step {self.step} iteration {j}: {vals}")
                losses.l_ag.append(vals[0])
                losses.l_pcp.append(vals[1])
                losses.l_nll.append(vals[2])
                total = total_j if total is None else total + total_j
                x_in = x_j.data if cfg.detach else x_j
                state = DiffusionState(state.x0, state.m0, x_j.data, m_j, u_j, j)
                final_img = loss_img.data
        losses.total = total.item()
        losses.masked_mse_train = masked_mse(state.x, x_real, state.m0)
        return total, losses, final_img, state

    def generator_step(self, x_real: np.ndarray, m0: np.ndarray) -> tuple[LossBreakdown, np.ndarray]:
        """One Adam update of the generator plus EMA; returns losses and the detached output."""
        self.gen_opt.zero_grad()
        total, losses, final_img, _ = self.generator_objective(x_real, m0)
        if total.requires_grad:
            total.backward()
        self.gen_opt.step()
        self.gen_opt.zero_grad()
        ema_update(self.ema, self.gen, self.ema_decay_now())
        return losses, final_img

    def discriminator_step(self, real: np.ndarray, fake: np.ndarray) -> tuple[float, float | None]:
        """One discriminator update; returns (logistic loss, R1 value or None)."""
        cfg = self.config
        self.disc_opt.zero_grad()
        d_real = discriminator_forward(self.disc, self.disc_config, Tensor(real))
        d_fake = discriminator_forward(self.disc, self.disc_config, Tensor(np.asarray(fake)))
        l_d = adversarial_d_loss(d_real, d_fake)
        if not math.isfinite(l_d.item()):
            raise NumericError(f"non-finite discriminator loss at step {self.step}")
        l_d.backward()
        r1_value = None
        if cfg.r1_gamma > 0 and cfg.r1_interval > 0 and self.step % cfg.r1_interval == 0:
            grads = {k: p.grad for k, p in self.disc.items()}
            r1_value, r1_grads = r1_penalty(self.disc, self.disc_config, real, cfg.r1_gamma)
            for k, p in self.disc.items():
                base = grads[k] if grads[k] is not None else 0.0
                p.grad = base + cfg.r1_interval * r1_grads[k]
        self.disc_opt.step()
        self.disc_opt.zero_grad()
        return l_d.item(), r1_value

    def next_batch(self, images: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = images.shape[0]
        if n == 0:
            raise ValueError("empty training set")
        idx = []
        while len(idx) < self.config.batch_size:
            if self._cursor >= self._perm.size:
                self._perm = self.data_rng.permutation(n)
                self._cursor = 0
            take = min(self.config.batch_size - len(idx), self._perm.size - self._cursor)
            idx.extend(self._perm[self._cursor : self._cursor + take].tolist())
            self._cursor += take
        x = images[idx]
        if self.config.fresh_masks:
            h, w = images.shape[2:]
            m = np.stack([gen_mask(self.mask_spec, h, w, self.mask_rng)[None] for _ in idx])
        else:
            m = masks[idx]
        return x, m

    def train_step(self, images: np.ndarray, masks: np.ndarray) -> dict:
        x, m = self.next_batch(images, masks)
        losses, fake = self.generator_step(x, m)
        l_d, r1 = self.discriminator_step(x, fake)
        self.step += 1
        return {"losses": losses, "L_d": l_d, "r1": r1}

    def fit(self, images: np.ndarray, masks: np.ndarray, steps: int | None = None,
            log_path=None, val: tuple[np.ndarray, np.ndarray] | None = None, progress=None) -> list[dict]:
        """Run ``steps`` updates, appending one CSV row per step to ``log_path``."""
        steps = self.config.steps if steps is None else steps
        rows = []
        fh = writer = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            writer.writeheader()
        try:
            for _ in range(steps):
                out = self.train_step(images, masks)
                lb = out["losses"]
                row = {
                    "step": str(self.step),
                    "L_ag": f"{sum(lb.l_ag):.10g}",
                    "L_pcp": f"{sum(lb.l_pcp):.10g}",
                    "L_nll": f"{sum(lb.l_nll):.10g}",
                    "L_d": f"{out['L_d']:.10g}",
                    "masked_mse_eval": "",
                    "masked_mse_train": f"{lb.masked_mse_train:.10g}",
                }
                every = self.config.eval_every
                if val is not None and every > 0 and (self.step % every == 0 or self.step == steps):
                    met = evaluate(self.ema, self.gen_config, val[0], val[1], self.config.T_test,
                                   self.config.alpha, self.seed, self.config.schedule)
                    row["masked_mse_eval"] = f"{met.mse:.10g}"
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                if progress is not None:
                    progress(row)
        finally:
            if fh is not None:
                fh.close()
        return rows

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"step": str(self.step), "seed": str(self.seed)}
        save_checkpoint(self.gen, self.gen_config, out / "gen.ckpt", meta)
        save_checkpoint(self.ema, self.gen_config, out / "gen_ema.ckpt", meta)
        save_checkpoint(self.disc, self.disc_config, out / "disc.ckpt", meta)
