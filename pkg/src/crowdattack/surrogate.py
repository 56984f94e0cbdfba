"""Toy crowd counters for both output paradigms, plus Grad-CAM.

Both models share one backbone layout (four 3x3 conv blocks, stride 4).
The density model adds a 1x1 head with a ReLU so the map is nonnegative;
the point model downsamples once more and emits one human-class logit per
stride-8 anchor cell, located at the cell centre.

Tensors follow the torch convention: images are ``(B, 3, H, W)`` in [0, 1].
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .artifacts import load_torch, param_checksum, save_torch, write_json
from .data import Dataset, downsample_density, render_density
from .errors import ConfigError, UsageError

log = logging.getLogger(__name__)

DENSITY = "density_map"
POINT = "point_regression"
PARADIGMS = (DENSITY, POINT)


@dataclass
class PointOutput:
    """Anchor locations ``(K, 2)`` as (x, y) pixels; logits/scores ``(B, K)``."""

    locations: torch.Tensor
    logits: torch.Tensor
    scores: torch.Tensor

    def __len__(self):
        return self.logits.shape[-1]


@dataclass
class ModelOutput:
    paradigm: str
    density: torch.Tensor | None = None
    points: PointOutput | None = None

    def __post_init__(self):
        if (self.density is None) == (self.points is None):
            raise UsageError("ModelOutput carries exactly one of density or points")
        if (self.paradigm == DENSITY) != (self.density is not None):
            raise UsageError(f"ModelOutput field does not match paradigm {self.paradigm!r}")

    def item(self, b: int) -> "ModelOutput":
        """Output of batch element ``b``, batch dimension removed."""
        if self.density is not None:
            return ModelOutput(self.paradigm, density=self.density[b])
        p = self.points
        return ModelOutput(self.paradigm, points=PointOutput(p.locations, p.logits[b], p.scores[b]))


def _block(cin: int, cout: int, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=dilation, dilation=dilation), nn.ReLU(inplace=False))


class SurrogateModel(nn.Module):
    cam_layer = "backbone.block3"

    def __init__(self, paradigm: str = DENSITY, widths=(16, 32, 32, 64)):
        super().__init__()
        if paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {paradigm!r}")
        w0, w1, w2, w3 = (int(w) for w in widths)
        self.paradigm = paradigm
        self.widths = (w0, w1, w2, w3)
        self.backbone = nn.Sequential(OrderedDict([
            ("block0", _block(3, w0)),
            ("pool0", nn.MaxPool2d(2)),
            ("block1", _block(w0, w1)),
            ("pool1", nn.MaxPool2d(2)),
            ("block2", _block(w1, w2)),
            ("block3", _block(w2, w3, dilation=2)),
        ]))
        if paradigm == DENSITY:
            self.stride = 4
            self.head = nn.Sequential(nn.Conv2d(w3, 1, 1), nn.ReLU())
            nn.init.constant_(self.head[0].bias, 0.01)
        else:
            self.stride = 8
            self.head = nn.Sequential(
                nn.Conv2d(w3, w3, 3, stride=2, padding=1), nn.ReLU(), nn.Conv2d(w3, 1, 1))
        self.register_buffer("mean", torch.tensor([0.5, 0.5, 0.5]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.25, 0.25, 0.25]).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Density ``(B, H/4, W/4)`` or anchor logits ``(B, K)`` row-major."""
        feats = self.backbone((x - self.mean) / self.std)
        out = self.head(feats)[:, 0]
        if self.paradigm == POINT:
            out = out.flatten(1)
        return out

    def anchor_grid(self, height: int, width: int) -> tuple[int, int]:
        return height // self.stride, width // self.stride

    def anchor_locations(self, height: int, width: int) -> torch.Tensor:
        gh, gw = self.anchor_grid(height, width)
        ii, jj = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
        s = self.stride
        return torch.stack([jj.flatten() * s + s / 2, ii.flatten() * s + s / 2], dim=1).float()


def as_batch(image) -> torch.Tensor:
    """Accept ``(B,3,H,W)``/``(3,H,W)`` tensors or ``H x W x 3`` arrays."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise UsageError(f"expected image of shape (B, 3, H, W), got {tuple(image.shape)}")
    return image


def density_forward(model: SurrogateModel, image) -> ModelOutput:
    if model.paradigm != DENSITY:
        raise UsageError(f"density_forward needs a density_map model, got {model.paradigm}")
    return ModelOutput(DENSITY, density=model(as_batch(image)))


def point_forward(model: SurrogateModel, image) -> ModelOutput:
    if model.paradigm != POINT:
        raise UsageError(f"point_forward needs a point_regression model, got {model.paradigm}")
    x = as_batch(image)
    logits = model(x)
    locs = model.anchor_locations(x.shape[2], x.shape[3])
    return ModelOutput(POINT, points=PointOutput(locs, logits, torch.sigmoid(logits)))


def forward(model: SurrogateModel, image) -> ModelOutput:
    return density_forward(model, image) if model.paradigm == DENSITY else point_forward(model, image)


def cam_from_activations(acts: torch.Tensor, grads: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Channel-weighted, rectified, upsampled and min-max normalised CAM.

    ``acts``/``grads`` are ``(B, C, h, w)``; returns ``(B, H, W)`` in [0, 1].
    An identically zero CAM stays zero; a constant positive CAM becomes ones.
    """
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=size, mode="bilinear", align_corners=False)[:, 0]
    flat = cam.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1)
    span = hi - lo
    out = torch.where(span > 1e-12, (cam - lo) / span.clamp_min(1e-12),
                      torch.where(hi > 0, torch.ones_like(cam), torch.zeros_like(cam)))
    return out.clamp(0, 1)


def gradcam(model: SurrogateModel, image, tau: float = 0.5) -> torch.Tensor:
    """Grad-CAM attention over the designated backbone layer.

    The backward scalar is the predicted count for density models and the
    sum of scores above ``tau`` for point models (all scores when none pass).
    Returns ``(B, H, W)`` detached.
    """
    modules = dict(model.named_modules())
    layer_name = getattr(model, "cam_layer", None)
    if not layer_name or layer_name not in modules:
        raise ConfigError(f"designated Grad-CAM layer {layer_name!r} not found in model")
    # frozen parameters: the input must carry grad for the layer to join the graph
    x = as_batch(image).detach().requires_grad_(True)
    captured = {}

    def hook(_module, _inp, out):
        captured["acts"] = out

    handle = modules[layer_name].register_forward_hook(hook)
    try:
        with torch.enable_grad():
            out = model(x)
            if model.paradigm == DENSITY:
                score = out.sum()
            else:
                s = torch.sigmoid(out)
                mask = (s > tau).to(s.dtype)
                keep = mask.sum(dim=1, keepdim=True) > 0
                mask = torch.where(keep, mask, torch.ones_like(mask))
                score = (s * mask).sum()
            acts = captured["acts"]
            (grads,) = torch.autograd.grad(score, acts)
    finally:
        handle.remove()
    return cam_from_activations(acts.detach(), grads.detach(), (x.shape[2], x.shape[3]))


def count_from_output(output: ModelOutput, score_threshold: float = 0.5) -> torch.Tensor:
    """Per-image counts: density sum, or number of scores above threshold."""
    if output.density is not None:
        d = output.density
        return d.sum(dim=(-2, -1)) if d.dim() >= 2 else d.sum()
    if not 0 < score_threshold < 1:
        raise UsageError("score_threshold must lie in (0, 1)")
    return (output.points.scores > score_threshold).sum(dim=-1).to(torch.float32)


def density_targets(dataset: Dataset, stride: int, kernel_sigma: float) -> torch.Tensor:
    maps = [downsample_density(render_density(s.annotation, s.height, s.width, kernel_sigma), stride)
            for s in dataset]
    return torch.from_numpy(np.stack(maps).astype(np.float32))


def anchor_targets(dataset: Dataset, stride: int) -> torch.Tensor:
    out = []
    for s in dataset:
        gh, gw = s.height // stride, s.width // stride
        t = np.zeros((gh, gw), dtype=np.float32)
        if s.count:
            ij = np.floor(s.annotation.points[:, ::-1] / stride).astype(int)
            ij = ij[(ij[:, 0] < gh) & (ij[:, 1] < gw)]
            t[ij[:, 0], ij[:, 1]] = 1.0
        out.append(t.reshape(-1))
    return torch.from_numpy(np.stack(out))


def images_tensor(dataset: Dataset) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in dataset])).permute(0, 3, 1, 2).contiguous()


def train_surrogate(dataset: Dataset, paradigm: str = DENSITY, epochs: int = 30, seed: int = 0,
                    widths=(16, 32, 32, 64), batch_size: int = 8, lr: float = 1e-3,
                    kernel_sigma: float = 3.0, history: list | None = None) -> SurrogateModel:
    """Fit a toy surrogate; returns the model in eval mode with frozen parameters.

    Density models regress the sum-pooled ground-truth density with a
    pixelwise squared error; point models classify each anchor cell as
    containing a person or not.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train a surrogate on an empty dataset")
    if paradigm not in PARADIGMS:
        raise ConfigError(f"unknown paradigm {paradigm!r}")
    torch.manual_seed(seed)
    model = SurrogateModel(paradigm, widths)
    x_all = images_tensor(dataset)
    if paradigm == DENSITY:
        y_all = density_targets(dataset, model.stride, kernel_sigma)
    else:
        y_all = anchor_targets(dataset, model.stride)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(dataset)
    model.train()
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            pred = model(x_all[idx])
            target = y_all[idx]
            if paradigm == DENSITY:
                # x100 keeps the per-pixel targets (~1e-2) at a workable scale
                loss = F.mse_loss(pred * 100.0, target * 100.0)
            else:
                loss = F.binary_cross_entropy_with_logits(pred, target)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if history is not None:
            history.append(total / n)
        log.info("surrogate[%s] epoch %d/%d loss %.5f", paradigm, epoch + 1, epochs, total / n)
    return freeze(model)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
        p.grad = None
    return model


def save_surrogate(model: SurrogateModel, path, meta: dict | None = None) -> dict:
    record = {
        "paradigm": model.paradigm,
        "widths": list(model.widths),
        "stride": model.stride,
        "cam_layer": model.cam_layer,
        "layers": [n for n, _ in model.named_modules() if n],
        "param_checksum": param_checksum(model),
        **(meta or {}),
    }
    save_torch(path, {"state_dict": model.state_dict(), "meta": record})
    write_json(str(path) + ".json", record)
    return record


def load_surrogate(path) -> SurrogateModel:
    blob = load_torch(path)
    meta = blob["meta"]
    model = SurrogateModel(meta["paradigm"], meta["widths"])
    model.load_state_dict(blob["state_dict"])
    model.meta = meta
    return freeze(model)
