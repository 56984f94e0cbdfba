"""Three-level U-Net perturbation generator and bounded perturbation application."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .artifacts import load_torch, param_checksum, save_torch, write_json
from .config import GeneratorConfig
from .errors import NumericError, UsageError


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(min(4, ch), ch)
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    return nn.Identity()


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, norm: str):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), _norm(norm, cout), nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1), _norm(norm, cout), nn.LeakyReLU(0.2),
        )


class PerturbationGenerator(nn.Module):
    """Maps an image to a perturbation bounded by ``epsilon`` in L-inf.

    The output layer is zero-initialised, so a fresh generator produces
    ``delta == 0``. Bounding uses ``epsilon * tanh(.)`` so gradients survive
    at the budget, followed by a hard clamp as a safety net.
    """

    def __init__(self, epsilon: float = 8 / 255, widths=(16, 32, 64), norm: str = "group"):
        super().__init__()
        c1, c2, c3 = (int(w) for w in widths)
        self.epsilon = float(epsilon)
        self.widths = (c1, c2, c3)
        self.norm = norm
        self.enc1 = DoubleConv(3, c1, norm)
        self.enc2 = DoubleConv(c1, c2, norm)
        self.enc3 = DoubleConv(c2, c3, norm)
        self.up2 = nn.ConvTranspose2d(c3, c2, 2, stride=2)
        self.dec2 = DoubleConv(2 * c2, c2, norm)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.dec1 = DoubleConv(2 * c1, c1, norm)
        self.out = nn.Conv2d(c1, 3, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @classmethod
    def from_config(cls, cfg: GeneratorConfig) -> "PerturbationGenerator":
        torch.manual_seed(cfg.seed)
        return cls(cfg.epsilon, cfg.widths, cfg.norm)

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise UsageError(f"image size {h}x{w} must be divisible by 4")
        z = x * 2.0 - 1.0
        e1 = _checked("enc1", self.enc1(z))
        e2 = _checked("enc2", self.enc2(F.max_pool2d(e1, 2)))
        e3 = _checked("enc3", self.enc3(F.max_pool2d(e2, 2)))
        d2 = _checked("dec2", self.dec2(torch.cat([self.up2(e3), e2], dim=1)))
        d1 = _checked("dec1", self.dec1(torch.cat([self.up1(d2), e1], dim=1)))
        return _checked("out", self.out(d1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = self.epsilon * torch.tanh(self.raw(x))
        return delta.clamp(-self.epsilon, self.epsilon)


def _checked(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations in generator layer {name!r}")
    return t


def generate(gen: PerturbationGenerator, image: torch.Tensor) -> torch.Tensor:
    """One forward pass; ``image`` is ``(B, 3, H, W)`` or ``(3, H, W)`` in [0, 1]."""
    if image.dim() == 3:
        return gen(image.unsqueeze(0))[0]
    return gen(image)


def apply(image: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """``clip(image + delta, 0, 1)``."""
    if image.shape != delta.shape:
        raise UsageError(f"shape mismatch: image {tuple(image.shape)} vs delta {tuple(delta.shape)}")
    return (image + delta).clamp(0.0, 1.0)


def budget_levels(epsilon: float) -> int:
    """Budget in 8-bit levels, ``ceil(epsilon * 255)`` (tolerant to float noise)."""
    return int(math.ceil(epsilon * 255 - 1e-9))


def quantize_adversarial(clean_u8: np.ndarray, adv: np.ndarray, epsilon: float) -> np.ndarray:
    """Round adversarial images to 8-bit levels within the quantised budget of ``clean_u8``."""
    q = budget_levels(epsilon)
    levels = np.rint(np.clip(np.asarray(adv, dtype=np.float64), 0.0, 1.0) * 255.0)
    base = clean_u8.astype(np.int16)
    return np.clip(levels, base - q, base + q).clip(0, 255).astype(np.uint8)


def save_generator(gen: PerturbationGenerator, path, meta: dict | None = None) -> dict:
    record = {
        "epsilon": gen.epsilon,
        "widths": list(gen.widths),
        "norm": gen.norm,
        "param_checksum": param_checksum(gen),
        **(meta or {}),
    }
    save_torch(path, {"state_dict": gen.state_dict(), "meta": record})
    write_json(str(path) + ".json", record)
    return record


def load_generator(path) -> PerturbationGenerator:
    blob = load_torch(path)
    if "generator" in blob:  # full training checkpoint
        blob = blob["generator"]
    meta = blob["meta"]
    gen = PerturbationGenerator(meta["epsilon"], meta["widths"], meta["norm"])
    gen.load_state_dict(blob["state_dict"])
    gen.meta = meta
    gen.eval()
    return gen
