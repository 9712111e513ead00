import numpy as np
import pytest

from motiondiff.denoiser import Denoiser, DenoiserConfig
from motiondiff.motion_data import normalize, synth_dataset


class DiracOracle:
    """Optimal noise predictor when every training sample equals ``point``."""

    def __init__(self, schedule, point):
        self.schedule = schedule
        self.point = np.asarray(point, dtype=np.float64)

    def predict(self, x, t, c):
        ab = _abar(self.schedule, t, x)
        return (x - np.sqrt(ab) * self.point) / np.sqrt(1.0 - ab)


class GaussianOracle:
    """Optimal noise predictor for data ``N(mean, std**2 I)``."""

    def __init__(self, schedule, mean, std):
        self.schedule = schedule
        self.mean = mean
        self.var = std**2

    def predict(self, x, t, c):
        ab = _abar(self.schedule, t, x)
        return np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * self.mean) / (ab * self.var + 1.0 - ab)


class LabelShiftModel:
    """Predicts a constant depending only on the label (or nothing, if ``scale`` is 0)."""

    def __init__(self, scale=0.1):
        self.scale = scale

    def predict(self, x, t, c):
        c = np.broadcast_to(np.asarray(c), x.shape[:1] if x.ndim == 4 else ())
        shift = self.scale * (np.asarray(c, dtype=np.float64) + 1.0)
        return np.zeros_like(x) + shift.reshape(shift.shape + (1,) * (x.ndim - shift.ndim))


def _abar(schedule, t, x):
    ab = np.asarray(schedule.alpha_bars[np.asarray(t)])
    if ab.ndim and x.ndim == 4:
        ab = ab.reshape(-1, 1, 1, 1)
    return ab


@pytest.fixture
def tiny_config():
    return DenoiserConfig(joints=4, frames=4, num_classes=3, T=10, base_width=4)


@pytest.fixture
def tiny_model(tiny_config):
    """Tiny denoiser with every parameter non-zero, for gradient checks."""
    rng = np.random.default_rng(11)
    model = Denoiser(tiny_config, rng=1)
    for k, p in model.params.items():
        if k.endswith(".b") or k == "out.w":
            model.params[k] = rng.normal(0.0, 0.3, p.shape)
    return model


@pytest.fixture(scope="session")
def small_dataset():
    ds, _ = normalize(synth_dataset(per_class=10, num_classes=4, rng=5))
    return ds


def finite_differences(model, loss_kind, per_param=None, h=1e-5, richardson=False, seed=0, pick=None):
    """Analytic and central-difference gradients for the tiny gradient-check batch.

    Returns ``{name: (analytic, numeric)}`` over the probed entries.
    ``per_param`` limits how many entries of each array are probed (all if None);
    ``pick(name, grad)`` may instead choose the flat indices.
    The loss difference is accumulated element by element, as
    ``mean(l(out+) - l(out-))``, which is the same central difference without
    the cancellation of subtracting two averaged losses.  With ``richardson``
    the estimate is ``(4 D(h/2) - D(h)) / 3``, cancelling the ``h**2`` term.
    """
    from motiondiff.diffusion import q_sample, training_loss
    from motiondiff.schedule import build_schedule

    cfg = model.config
    sched = build_schedule("cosine", cfg.T)
    rng = np.random.default_rng(seed)
    shape = (2, 3, cfg.joints, cfg.frames)
    x0, eps = rng.standard_normal(shape), rng.standard_normal(shape)
    t, c = np.array([3, cfg.T - 1]), np.array([0, cfg.num_classes - 1])
    x_t = q_sample(x0, t, eps, sched)

    def central(flat, i, step):
        keep = flat[i]
        flat[i] = keep + step
        a = model.predict(x_t, t, c) - eps
        flat[i] = keep - step
        b = model.predict(x_t, t, c) - eps
        flat[i] = keep
        delta = np.abs(a) - np.abs(b) if loss_kind == "l1" else (a - b) * (a + b)
        return np.mean(delta) / (2 * step)

    _, g = training_loss(model, x0, c, sched, loss_kind=loss_kind, t=t, eps=eps, cache=True)
    grads = model.backward(g)
    out = {}
    for name, p in model.params.items():
        flat = p.reshape(-1)
        if pick is not None:
            idx = pick(name, grads[name].reshape(-1))
        elif per_param is not None and flat.size > per_param:
            idx = rng.choice(flat.size, per_param, replace=False)
        else:
            idx = np.arange(flat.size)
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            d = central(flat, i, h)
            num[n] = (4 * central(flat, i, h / 2) - d) / 3 if richardson else d
        out[name] = (grads[name].reshape(-1)[idx].copy(), num)
    return out


def elementwise_error(pairs):
    """Worst ``|a - n| / max(|a|, |n|, 1e-8)`` per parameter."""
    return {k: float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8), initial=0.0))
            for k, (a, n) in pairs.items()}


def tensor_error(pairs):
    """``||a - n|| / max(||a||, ||n||)`` per parameter array (0 when both vanish)."""
    out = {}
    for k, (a, n) in pairs.items():
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        out[k] = float(np.linalg.norm(a - n) / scale) if scale > 0 else 0.0
    return out
