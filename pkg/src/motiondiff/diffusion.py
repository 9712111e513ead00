"""Forward noising, the epsilon-parameterized reverse step, conditioned sampling and training.

Everything here works on image tensors of shape ``(3, J, f)`` or batches of
them, ``(B, 3, J, f)``.  The reverse mean uses the coefficient
``beta_t / sqrt(1 - abar_t)`` on the predicted noise, which is the standard
DDPM posterior mean under the epsilon parameterization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .motion_data import LabeledDataset, MotionSequence, NormStats, denormalize_array, from_image
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class EpsilonModel(Protocol):
    """Anything that predicts the injected noise from ``(x_t, t, c)``.

    ``x`` may be a single ``(3, J, f)`` tensor or a batch; ``t`` and ``c`` are
    scalars or per-item integer arrays.
    """

    def predict(self, x: np.ndarray, t, c) -> np.ndarray: ...


class TrainableModel(EpsilonModel, Protocol):
    def forward(self, x: np.ndarray, t, c, cache: bool = False) -> np.ndarray: ...

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]: ...

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None: ...


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Latent:
    t: int
    value: np.ndarray


# -- forward process ---------------------------------------------------------


def q_step(x_prev, t: int, schedule: NoiseSchedule, rng=None, noise=None) -> Latent:
    """One forward step ``x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z``."""
    t = schedule.check_step(t)
    x_prev = x_prev.value if isinstance(x_prev, Latent) else np.asarray(x_prev, dtype=np.float64)
    if noise is None:
        noise = np.random.default_rng(rng).standard_normal(x_prev.shape)
    beta = schedule.betas[t]
    return Latent(t, np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * noise)


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one step per batch item (leading axis).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError(f"diffusion step out of range [0, {schedule.T}]")
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# -- reverse process ---------------------------------------------------------


def predict_mu(x_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    """Reverse mean ``(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)``."""
    x_t = x_t.value if isinstance(x_t, Latent) else np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    t = schedule.check_step(t)
    one_minus_ab = 1.0 - schedule.alpha_bars[t]
    if one_minus_ab <= 0.0:
        raise ZeroDivisionError(f"alpha_bar[{t}] == 1: reverse mean undefined")
    coef = schedule.betas[t] / np.sqrt(one_minus_ab)
    return (x_t - coef * eps_hat) / np.sqrt(schedule.alphas[t])


def guided_eps(model: EpsilonModel, x, t, c, guidance_scale: float = 0.0, null_label: int | None = None):
    """Conditional noise prediction, optionally blended with the null-label prediction.

    ``eps = (1 + w) eps(c) - w eps(null)``; ``w = 0`` is the plain conditional model.
    """
    eps = model.predict(x, t, c)
    if guidance_scale:
        if null_label is None:
            raise ValueError("guidance needs a null label")
        eps_null = model.predict(x, t, np.full_like(np.asarray(c), null_label))
        eps = (1.0 + guidance_scale) * eps - guidance_scale * eps_null
    return eps


def clamp_eps(x_t, t: int, eps_hat, schedule: NoiseSchedule, bound: float) -> np.ndarray:
    """Re-derive ``eps_hat`` after clamping the implied clean sample to ``[-bound, bound]``.

    The implied sample is ``x0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)``.
    Entries already inside the bound are returned unchanged.
    """
    ab = schedule.alpha_bars[t]
    x0 = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    outside = np.abs(x0) > bound
    if not outside.any():
        return eps_hat
    x0 = np.clip(x0, -bound, bound)
    return np.where(outside, (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab), eps_hat)


def p_sample_step(
    x_t,
    t: int,
    c,
    model: EpsilonModel,
    schedule: NoiseSchedule,
    rng=None,
    add_noise: bool = True,
    guidance_scale: float = 0.0,
    null_label: int | None = None,
    noise=None,
    clip_x0: float | None = None,
) -> Latent:
    """One reverse step ``x_{t-1} = mu(x_t, t, c) + sigma_t z``.

    ``clip_x0`` bounds the clean sample implied by the noise prediction
    (see :func:`clamp_eps`).  It guards the last steps of short cosine
    schedules, where ``1 / sqrt(alpha_t)`` magnifies prediction error.
    """
    x_t = x_t.value if isinstance(x_t, Latent) else np.asarray(x_t, dtype=np.float64)
    t = schedule.check_step(t)
    eps_hat = guided_eps(model, x_t, t, c, guidance_scale, null_label)
    if not np.all(np.isfinite(eps_hat)):
        raise NonFiniteError(f"model produced non-finite output at t={t}")
    if clip_x0 is not None:
        eps_hat = clamp_eps(x_t, t, eps_hat, schedule, clip_x0)
    mu = predict_mu(x_t, t, eps_hat, schedule)
    if add_noise and schedule.sigmas[t] > 0:
        if noise is None:
            noise = np.random.default_rng(rng).standard_normal(x_t.shape)
        mu = mu + schedule.sigmas[t] * noise
    return Latent(t - 1, mu)


def sample_images(
    model: EpsilonModel,
    c,
    n: int,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    rng=None,
    final_noise: bool = False,
    guidance_scale: float = 0.0,
    null_label: int | None = None,
    clip_x0: float | None = None,
) -> np.ndarray:
    """Run the reverse chain for ``n`` independent samples; returns ``(n, *shape)``.

    Each chain draws from its own generator spawned from ``rng``, so a chain's
    output does not depend on how many other chains run beside it.  ``c`` is
    one label for all chains or one per chain.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(rng)
    chains = rng.spawn(n)
    labels = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
    x = np.stack([g.standard_normal(shape) for g in chains])
    for t in range(schedule.T, 0, -1):
        noisy = final_noise or t > 1
        noise = np.stack([g.standard_normal(shape) for g in chains]) if noisy else None
        step = p_sample_step(
            x, t, labels, model, schedule,
            add_noise=noisy, guidance_scale=guidance_scale, null_label=null_label, noise=noise,
            clip_x0=clip_x0,
        )
        x = step.value
    return x


def sample(
    model: EpsilonModel,
    c: int,
    n: int,
    schedule: NoiseSchedule,
    geometry: tuple[int, int],
    rng=None,
    norm_stats: NormStats | None = None,
    **kwargs,
) -> list[MotionSequence]:
    """Draw ``n`` motion sequences of class ``c``.

    ``geometry`` is ``(J, f)``.  When ``norm_stats`` is given the samples are
    mapped back to the original coordinate units.
    """
    J, f = geometry
    imgs = sample_images(model, c, n, schedule, (3, J, f), rng, **kwargs)
    out = []
    for img in imgs:
        seq = from_image(img)
        if norm_stats is not None:
            seq = MotionSequence(denormalize_array(seq.coords, norm_stats))
        out.append(seq)
    return out


# -- training ----------------------------------------------------------------


def loss_and_grad(eps: np.ndarray, eps_hat: np.ndarray, loss_kind: str = "l1") -> tuple[float, np.ndarray]:
    """Mean elementwise loss and its gradient w.r.t. ``eps_hat``.  ``sign(0) = 0``."""
    diff = eps_hat - eps
    D = diff.size
    kind = loss_kind.lower()
    if kind == "l1":
        return float(np.abs(diff).mean()), np.sign(diff) / D
    if kind == "l2":
        return float((diff * diff).mean()), 2.0 * diff / D
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected 'l1' or 'l2'")


def training_loss(
    model,
    x0: np.ndarray,
    c,
    schedule: NoiseSchedule,
    rng=None,
    loss_kind: str = "l1",
    t=None,
    eps=None,
    cache: bool = True,
) -> tuple[float, np.ndarray]:
    """Noise-prediction loss on a batch ``x0`` of shape ``(B, 3, J, f)``.

    Draws ``t ~ U{1..T}`` per item and ``eps ~ N(0, I)`` unless they are
    passed in.  Returns the scalar loss and ``dLoss/d eps_hat``; when the model
    has a ``forward`` with activation caching, the cache is left ready for
    ``model.backward``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(rng)
    B = x0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    t = np.broadcast_to(np.asarray(t), (B,))
    x_t = q_sample(x0, t, eps, schedule)
    if cache and hasattr(model, "forward"):
        eps_hat = model.forward(x_t, t, c, cache=True)
    else:
        eps_hat = model.predict(x_t, t, c)
    if not np.all(np.isfinite(eps_hat)):
        raise NonFiniteError("model produced non-finite output")
    return loss_and_grad(eps, eps_hat, loss_kind)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    loss_kind: str = "l1"
    seed: int = 0
    label_dropout: float = 0.0


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} in epoch {epoch}")
        self.epoch = epoch


def train(
    model: TrainableModel,
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng=None,
    null_label: int | None = None,
    progress=None,
) -> tuple[TrainableModel, list[float]]:
    """Shuffled mini-batch training; returns the (mutated) model and per-epoch mean losses.

    ``rng`` defaults to a generator seeded with ``config.seed``.  With
    ``label_dropout > 0`` each item's label is replaced by ``null_label`` with
    that probability.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.batch_size < 1:
        raise ValueError("batch_size must be positive")
    if config.label_dropout and null_label is None:
        raise ValueError("label dropout needs a null label")
    rng = np.random.default_rng(config.seed if rng is None else rng)
    images = dataset.images()
    labels = dataset.labels
    n = len(dataset)
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            c = labels[idx].copy()
            if config.label_dropout:
                c[rng.random(idx.size) < config.label_dropout] = null_label
            loss, g = training_loss(model, images[idx], c, schedule, rng, config.loss_kind)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            grads = model.backward(g)
            model.step(grads, config.learning_rate)
            total += loss * idx.size
            count += idx.size
        mean = total / count
        if not np.isfinite(mean):
            raise TrainingDiverged(epoch, mean)
        trace.append(mean)
        log.info("epoch %d mean loss %.5f", epoch, mean)
        if progress is not None:
            progress(epoch, mean)
    return model, trace


def loss_trace_csv(trace: list[float]) -> str:
    lines = ["epoch,mean_loss"]
    lines += [f"{i},{float(v)!r}" for i, v in enumerate(trace)]
    return "\n".join(lines) + "\n"
