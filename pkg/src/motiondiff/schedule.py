"""Diffusion noise schedules.

A :class:`NoiseSchedule` holds every per-step quantity the forward and
reverse processes need, indexed by the diffusion step ``t = 0..T``.  Index 0
is a padding slot for the per-step arrays (``betas[0] = 0``) so that
``schedule.betas[t]`` reads naturally for ``t >= 1``, while
``alpha_bars[0] = 1`` is meaningful.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("cosine", "linear")

BETA_CLIP = (1e-8, 0.999)
LINEAR_ENDPOINTS = (1e-4, 0.02)
COSINE_OFFSET = 0.008


def cosine_alpha_bar(t: int, T: int, s: float = COSINE_OFFSET) -> float:
    """Unclipped cumulative signal level ``f(t) / f(0)`` of the cosine schedule.

    ``f(t) = cos((t/T + s) / (1 + s) * pi/2) ** 2``.  The endpoints are
    returned exactly (1.0 at ``t = 0`` and 0.0 at ``t = T``).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise ValueError(f"t={t} out of range [0, {T}]")
    if s <= 0:
        raise ValueError(f"offset s must be positive, got {s}")
    if t == 0:
        return 1.0
    if t == T:
        # cos(pi/2) evaluates to 6e-17 in floating point
        return 0.0

    def f(u: float) -> float:
        return math.cos((u / T + s) / (1.0 + s) * math.pi / 2.0) ** 2

    return f(t) / f(0)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed schedule arrays, all of length ``T + 1``."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    kind: str
    s: float | None = None
    posterior_variance: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            arr = getattr(self, name)
            if arr.shape != (self.T + 1,):
                raise ValueError(f"{name} must have shape ({self.T + 1},), got {arr.shape}")
            arr.setflags(write=False)

    @classmethod
    def from_betas(
        cls,
        betas,
        kind: str = "custom",
        s: float | None = None,
        posterior_variance: bool = False,
        validate: bool = True,
    ) -> "NoiseSchedule":
        """Build a schedule from ``beta_1..beta_T``.

        ``alpha_bars`` is the running product of ``1 - beta`` so the
        telescoping identity holds by construction.  ``validate=False`` skips
        the clip-range check, which lets tests use degenerate steps such as
        ``beta = 0`` or ``beta = 1``.
        """
        betas = np.asarray(betas, dtype=np.float64).ravel()
        T = betas.size
        if T < 1:
            raise ValueError("need at least one beta")
        if validate:
            lo, hi = BETA_CLIP
            if np.any(betas < lo) or np.any(betas > hi):
                raise ValueError(f"betas must lie in [{lo}, {hi}]")
        full_betas = np.concatenate([[0.0], betas])
        alphas = 1.0 - full_betas
        alpha_bars = np.cumprod(alphas)
        if posterior_variance:
            # beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t)
            var = np.zeros(T + 1)
            denom = 1.0 - alpha_bars[1:]
            with np.errstate(divide="ignore", invalid="ignore"):
                var[1:] = np.where(denom > 0, full_betas[1:] * (1.0 - alpha_bars[:-1]) / denom, 0.0)
            sigmas = np.sqrt(var)
        else:
            sigmas = np.sqrt(full_betas)
        return cls(
            T=T,
            betas=full_betas,
            alphas=alphas,
            alpha_bars=alpha_bars,
            sigmas=sigmas,
            kind=kind,
            s=s,
            posterior_variance=posterior_variance,
        )

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"diffusion step t={t} out of range [{lo}, {self.T}]")
        return int(t)

    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio ``abar / (1 - abar)`` for ``t = 1..T``."""
        ab = self.alpha_bars[1:]
        return ab / (1.0 - ab)

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "s": self.s,
            "posterior_variance": self.posterior_variance,
            **self.extra,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,beta,alpha,alpha_bar,sigma\n")
        for t in range(self.T + 1):
            buf.write(
                f"{t},{float(self.betas[t])!r},{float(self.alphas[t])!r},"
                f"{float(self.alpha_bars[t])!r},{float(self.sigmas[t])!r}\n"
            )
        return buf.getvalue()


def build_schedule(
    kind: str = "cosine",
    T: int = 1000,
    s: float = COSINE_OFFSET,
    beta_clip: tuple[float, float] = BETA_CLIP,
    linear_endpoints: tuple[float, float] = LINEAR_ENDPOINTS,
    posterior_variance: bool = False,
) -> NoiseSchedule:
    """Build a cosine or linear schedule.

    For the cosine kind, ``beta_t = 1 - abar_t / abar_{t-1}`` is clipped to
    ``beta_clip`` and ``abar`` is then recomputed from the clipped betas.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    lo, hi = beta_clip
    if not (0.0 < lo < 1.0 and 0.0 < hi < 1.0 and lo <= hi):
        raise ValueError(f"beta_clip bounds must lie in (0, 1) with min <= max, got {beta_clip}")

    if kind == "cosine":
        abar = np.array([cosine_alpha_bar(t, T, s) for t in range(T + 1)])
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = 1.0 - abar[1:] / abar[:-1]
        raw = np.nan_to_num(raw, nan=1.0)
        betas = np.clip(raw, lo, hi)
        sched = NoiseSchedule.from_betas(
            betas, kind="cosine", s=s, posterior_variance=posterior_variance
        )
        sched.extra["beta_clip"] = [lo, hi]
        return sched

    b0, b1 = linear_endpoints
    betas = np.linspace(b0, b1, T) if T > 1 else np.array([b0])
    betas = np.clip(betas, lo, hi)
    sched = NoiseSchedule.from_betas(betas, kind="linear", posterior_variance=posterior_variance)
    sched.extra.update({"beta_start": b0, "beta_end": b1, "beta_clip": [lo, hi]})
    return sched


def schedule_from_descriptor(d: dict) -> NoiseSchedule:
    """Rebuild a schedule from :meth:`NoiseSchedule.descriptor` output."""
    kwargs = {
        "kind": d["kind"],
        "T": int(d["T"]),
        "posterior_variance": bool(d.get("posterior_variance", False)),
    }
    if d.get("s") is not None:
        kwargs["s"] = d["s"]
    if "beta_clip" in d:
        kwargs["beta_clip"] = tuple(d["beta_clip"])
    if "beta_start" in d:
        kwargs["linear_endpoints"] = (d["beta_start"], d["beta_end"])
    return build_schedule(**kwargs)
