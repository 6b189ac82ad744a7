"""Hard-concrete stochastic gates over feature fields.

Each field gets one gate. Sampling stretches a binary-concrete draw to
[gamma, zeta] and rectifies it into [0, 1], which puts point masses at
exactly 0 and 1 while keeping a differentiable interior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA = 0.83
ZETA = 1.1
GAMMA = -0.1
MU = 0.5
SIGMA_SQ = 0.0625


class GateError(Exception):
    pass


@dataclass
class GateParams:
    log_alpha: np.ndarray  # (m,) float64, the learnable parameterization
    beta: float = BETA
    zeta: float = ZETA
    gamma: float = GAMMA

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma < 0 < 1 < self.zeta):
            raise GateError("stretch interval must strictly contain [0, 1]")
        if not np.all(np.isfinite(self.log_alpha)):
            raise GateError("log_alpha must be finite")

    @property
    def m(self) -> int:
        return self.log_alpha.shape[0]


@dataclass
class MaskSample:
    z: np.ndarray      # (m,) in [0, 1]
    u: np.ndarray      # the noise draw used
    s: np.ndarray      # pre-stretch sigmoid values, cached for backward
    s_bar: np.ndarray  # stretched values in [gamma, zeta]


def init_gate(m: int, seed: int) -> GateParams:
    """alpha drawn from Normal(mu, sigma^2), clipped away from zero so its
    log is defined, then stored as log_alpha."""
    if m < 1:
        raise GateError("need at least one field")
    rng = np.random.default_rng([seed, 0x9a7e])
    alpha = np.clip(rng.normal(MU, np.sqrt(SIGMA_SQ), size=m), 0.01, None)
    return GateParams(log_alpha=np.log(alpha))


def sample_mask(gate: GateParams, u: np.ndarray) -> MaskSample:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (gate.m,):
        raise GateError(f"noise shape {u.shape} != ({gate.m},)")
    if np.any(u <= 0) or np.any(u >= 1):
        raise GateError("noise must lie strictly inside (0, 1)")
    s = _sigmoid((np.log(u / (1.0 - u)) + gate.log_alpha) / gate.beta)
    s_bar = s * (gate.zeta - gate.gamma) + gate.gamma
    z = np.clip(s_bar, 0.0, 1.0)
    return MaskSample(z=z, u=u, s=s, s_bar=s_bar)


def deterministic_mask(gate: GateParams) -> np.ndarray:
    """Noise-free evaluation mask: the sample formula with the noise logit
    fixed at zero (u = 0.5)."""
    s = _sigmoid(gate.log_alpha / gate.beta)
    return np.clip(s * (gate.zeta - gate.gamma) + gate.gamma, 0.0, 1.0)


def mask_grad(sample: MaskSample, dz: np.ndarray, gate: GateParams) -> np.ndarray:
    """Chain rule through the rectified stretch: zero wherever the clamp is
    active, (zeta - gamma) * s(1-s) / beta elsewhere."""
    interior = (sample.s_bar > 0.0) & (sample.s_bar < 1.0)
    jac = (gate.zeta - gate.gamma) * sample.s * (1.0 - sample.s) / gate.beta
    return np.where(interior, dz * jac, 0.0)


def expected_active_fraction(z: np.ndarray) -> float:
    if z.size == 0:
        raise GateError("empty mask")
    return float(np.mean(z))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
