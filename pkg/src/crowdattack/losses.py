"""Attack objective: paradigm-specific suppression plus perturbation constraints.

Per-image losses take unbatched tensors: a density map ``(h, w)``, a
``PointOutput`` with 1-D logits/scores, a perturbation ``(C, H, W)`` (a
leading batch dimension is also accepted by the perturbation terms).
Perturbation terms are computed per channel and then averaged.

Peak-set membership is discrete: it is recomputed from detached values
and gradients flow only through the selected density values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .config import LossWeights
from .errors import UsageError
from .surrogate import DENSITY, ModelOutput, PointOutput

DESCENT = "descent"
VERBATIM = "verbatim"


def adaptive_threshold(t: float, t_max: float, w: LossWeights = LossWeights()) -> float:
    """Confidence threshold decayed linearly from tau_max, floored at tau_min."""
    if t_max <= 0:
        raise UsageError("t_max must be positive")
    return max(w.tau_min, w.tau_max - w.nu * t / t_max)


def alpha_for_count(c_gt: float, w: LossWeights = LossWeights()) -> float:
    return float(min(max(c_gt / 100.0, 1.0), w.alpha_max))


# -- point regression -------------------------------------------------------

def high_confidence_set(points: PointOutput, tau: float) -> torch.Tensor:
    """Indices whose score is strictly above ``tau``."""
    return torch.nonzero(points.scores.detach().reshape(-1) > tau).flatten()


def dense_logit_loss(logits: torch.Tensor, scores: torch.Tensor, w: LossWeights = LossWeights(),
                     sign_convention: str = DESCENT) -> torch.Tensor:
    sign = _sign(sign_convention)
    return sign * (logits - torch.log(1.0 - scores + w.epsilon_num)).mean()


def sparse_logit_loss(logits: torch.Tensor, scores: torch.Tensor, tau: float) -> torch.Tensor:
    return ((scores - tau).abs() * logits).mean()


def _sign(sign_convention: str) -> float:
    if sign_convention == DESCENT:
        return 1.0
    if sign_convention == VERBATIM:
        return -1.0
    raise UsageError(f"sign_convention must be {DESCENT!r} or {VERBATIM!r}")


def logit_suppression(points: PointOutput, c_gt: float, tau: float, w: LossWeights = LossWeights(),
                      sign_convention: str = DESCENT) -> torch.Tensor:
    """Suppress confident detections; dense and sparse scenes use different forms.

    Returns 0 when nothing is above ``tau`` (the scene is already suppressed).
    """
    idx = high_confidence_set(points, tau)
    logits = points.logits.reshape(-1)
    if idx.numel() == 0:
        return logits.sum() * 0.0
    l_hi = logits[idx]
    s_hi = points.scores.reshape(-1)[idx]
    if c_gt > w.c_sparse:
        return dense_logit_loss(l_hi, s_hi, w, sign_convention)
    return sparse_logit_loss(l_hi, s_hi, tau)


# -- density maps -----------------------------------------------------------

@dataclass
class PeakSets:
    """Boolean masks over the density map plus the threshold used."""

    significant: torch.Tensor
    near_threshold: torch.Tensor
    local_maxima: torch.Tensor
    threshold: float
    fallback_used: bool

    @staticmethod
    def _coords(mask: torch.Tensor) -> set[tuple[int, int]]:
        ij = torch.nonzero(mask)
        return {(int(j), int(i)) for i, j in ij.tolist()}

    def significant_points(self) -> set[tuple[int, int]]:
        """Q' as a set of ``(x, y)``."""
        return self._coords(self.significant)

    def near_threshold_points(self) -> set[tuple[int, int]]:
        return self._coords(self.near_threshold)

    def local_maxima_points(self) -> set[tuple[int, int]]:
        return self._coords(self.local_maxima)


def _as_map(d: torch.Tensor) -> torch.Tensor:
    if d.dim() == 3 and d.shape[0] == 1:
        d = d[0]
    if d.dim() != 2:
        raise UsageError(f"density map must be 2-D, got shape {tuple(d.shape)}")
    if d.numel() == 0:
        raise UsageError("density map is empty")
    return d


def local_max_mask(d: torch.Tensor) -> torch.Tensor:
    """Pixels equal to the max of their 3x3 window (window truncated at borders)."""
    d = _as_map(d).detach()
    pooled = F.max_pool2d(d[None, None], 3, stride=1, padding=1)[0, 0]
    return d == pooled


def neighbor_max(d: torch.Tensor) -> torch.Tensor:
    """3x3 neighbourhood maximum excluding the centre pixel (differentiable)."""
    d = _as_map(d)
    h, w = d.shape
    padded = F.pad(d[None, None], (1, 1, 1, 1), value=-math.inf)
    patches = F.unfold(padded, 3)[0]  # (9, h*w)
    patches = torch.cat([patches[:4], patches[5:]], dim=0)
    mu = patches.max(dim=0).values.view(h, w)
    return torch.where(torch.isinf(mu), d, mu)


def detect_peaks(d: torch.Tensor, w: LossWeights = LossWeights()) -> PeakSets:
    d = _as_map(d).detach()
    chi = local_max_mask(d)
    peak = float(d.max())
    phi = w.phi_prime * peak
    sig = chi & (d >= phi)
    near = (d >= w.near_threshold_fraction * phi) & (d < phi)
    fallback = peak <= w.degenerate_floor or not bool(sig.any())
    if fallback:
        k = max(1, math.floor(w.phi_zero * d.numel()))
        order = torch.argsort(d.flatten(), descending=True, stable=True)[:k]
        sig = torch.zeros(d.numel(), dtype=torch.bool)
        sig[order] = True
        sig = sig.view_as(d)
        near = near & ~sig
    return PeakSets(sig, near, chi, phi, fallback)


def isolation_ratio(peaks: PeakSets) -> float:
    """Fraction of significant peaks with no other significant peak in their 5x5 window."""
    m = peaks.significant
    n = int(m.sum())
    if n == 0:
        return 1.0
    counts = F.conv2d(m.float()[None, None], torch.ones(1, 1, 5, 5), padding=2)[0, 0]
    isolated = (counts[m] == 1).sum()
    return float(isolated) / n


def heatmap_suppression(d: torch.Tensor, peaks: PeakSets, w: LossWeights = LossWeights()) -> torch.Tensor:
    d = _as_map(d)
    if not bool(peaks.significant.any()):
        return d.sum() * 0.0
    loss = d[peaks.significant].mean()
    if bool(peaks.near_threshold.any()):
        loss = loss + w.eta_h * d[peaks.near_threshold].mean()
    return loss


def peak_suppression(d: torch.Tensor, peaks: PeakSets, w: LossWeights = LossWeights()) -> torch.Tensor:
    d = _as_map(d)
    if not bool(peaks.significant.any()):
        return d.sum() * 0.0
    m = peaks.significant
    prominence = (d - neighbor_max(d))[m]
    return d[m].mean() + w.eta_p * prominence.mean()


@dataclass
class DensityLoss:
    value: torch.Tensor
    branch: str
    isolation: float
    peaks: PeakSets


def density_suppression(d: torch.Tensor, w: LossWeights = LossWeights()) -> DensityLoss:
    """Peak suppression for isolated crowds (ratio above threshold), else heatmap suppression."""
    d = _as_map(d)
    peaks = detect_peaks(d, w)
    ratio = isolation_ratio(peaks)
    if ratio > w.isolation_threshold:
        return DensityLoss(peak_suppression(d, peaks, w), "peak", ratio, peaks)
    return DensityLoss(heatmap_suppression(d, peaks, w), "hmap", ratio, peaks)


# -- perturbation constraints -----------------------------------------------

def _channels(delta: torch.Tensor) -> torch.Tensor:
    if delta.dim() == 2:
        return delta[None]
    if delta.dim() < 2:
        raise UsageError(f"perturbation must be at least 2-D, got {tuple(delta.shape)}")
    return delta


def freq_loss(delta: torch.Tensor) -> torch.Tensor:
    """Mean DFT magnitude over all non-DC frequencies, averaged over channels."""
    delta = _channels(delta)
    h, w = delta.shape[-2:]
    if h * w == 1:
        return delta.sum() * 0.0
    mag = torch.fft.fft2(delta).abs()
    per_channel = (mag.sum(dim=(-2, -1)) - mag[..., 0, 0]) / (h * w - 1)
    return per_channel.mean()


def cam_loss(delta: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """Mean perturbation magnitude outside the attention map: ``mean(|delta| * (1 - rho))``."""
    delta = _channels(delta)
    if tuple(rho.shape[-2:]) != tuple(delta.shape[-2:]):
        raise UsageError(f"attention map {tuple(rho.shape)} does not match perturbation {tuple(delta.shape)}")
    if rho.dim() == delta.dim() - 1:
        rho = rho.unsqueeze(-3)
    return (delta.abs() * (1.0 - rho)).mean()


def hinge_loss(delta: torch.Tensor) -> torch.Tensor:
    return _channels(delta).pow(2).mean()


def tv_loss(delta: torch.Tensor) -> torch.Tensor:
    delta = _channels(delta)
    h, w = delta.shape[-2:]
    dx = (delta[..., :, 1:] - delta[..., :, :-1]).abs().sum(dim=(-2, -1))
    dy = (delta[..., 1:, :] - delta[..., :-1, :]).abs().sum(dim=(-2, -1))
    return ((dx + dy) / (h * w)).mean()


def perturbation_loss(delta: torch.Tensor, rho: torch.Tensor,
                      w: LossWeights = LossWeights()) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of hinge, TV, frequency and attention terms plus the raw components."""
    parts = {
        "hinge": hinge_loss(delta),
        "tv": tv_loss(delta),
        "freq": freq_loss(delta),
        "cam": cam_loss(delta, rho),
    }
    total = w.beta * parts["hinge"] + w.gamma * parts["tv"] + w.zeta * parts["freq"] + w.kappa * parts["cam"]
    return total, {k: float(v.detach()) for k, v in parts.items()}


@dataclass
class AttackLoss:
    value: torch.Tensor
    model: float
    pert: float
    components: dict[str, float] = field(default_factory=dict)
    branches: list[str] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)

    def record(self) -> dict:
        return {"attack": float(self.value.detach()), "model": self.model, "pert": self.pert,
                **self.components, "branches": self.branches, "alphas": self.alphas}


def model_loss(output: ModelOutput, c_gt: float, tau: float, w: LossWeights = LossWeights(),
               sign_convention: str = DESCENT) -> tuple[torch.Tensor, str]:
    """Paradigm-specific loss for a single image and the branch that fired."""
    if output.paradigm == DENSITY:
        res = density_suppression(output.density, w)
        branch = res.branch + ("+fallback" if res.peaks.fallback_used else "")
        return res.value, branch
    pts = output.points
    if high_confidence_set(pts, tau).numel() == 0:
        return pts.logits.sum() * 0.0, "suppressed"
    branch = "dense" if c_gt > w.c_sparse else "sparse"
    return logit_suppression(pts, c_gt, tau, w, sign_convention), branch


def attack_loss(output: ModelOutput, delta: torch.Tensor, rho: torch.Tensor, c_gt: Sequence[float] | float,
                tau: float, w: LossWeights = LossWeights(), sign_convention: str = DESCENT) -> AttackLoss:
    """Batch mean of ``alpha * L_model`` plus the perturbation loss.

    ``output`` and ``delta`` may be batched (``delta`` 4-D) or single-image.
    ``alpha`` is taken per scene from its ground-truth count.
    """
    if delta.dim() == 3:
        delta = delta.unsqueeze(0)
        rho = rho.unsqueeze(0) if rho.dim() == 2 else rho
        output = _batched(output)
    counts = [float(c_gt)] if isinstance(c_gt, (int, float)) else [float(c) for c in c_gt]
    b = delta.shape[0]
    if len(counts) != b:
        raise UsageError(f"got {len(counts)} ground-truth counts for a batch of {b}")
    terms, branches, alphas = [], [], []
    for i in range(b):
        value, branch = model_loss(output.item(i), counts[i], tau, w, sign_convention)
        a = alpha_for_count(counts[i], w)
        terms.append(a * value)
        branches.append(branch)
        alphas.append(a)
    l_model = torch.stack(terms).mean()
    l_pert, parts = perturbation_loss(delta, rho, w)
    total = l_model + l_pert
    return AttackLoss(total, float(l_model.detach()), float(l_pert.detach()), parts, branches, alphas)


def _batched(output: ModelOutput) -> ModelOutput:
    if output.density is not None:
        d = output.density
        return ModelOutput(output.paradigm, density=d if d.dim() == 3 else d.unsqueeze(0))
    p = output.points
    if p.logits.dim() == 2:
        return output
    return ModelOutput(output.paradigm, points=PointOutput(p.locations, p.logits[None], p.scores[None]))
