"""Counting error, miss rate, transfer ratio, SSIM/PSNR and the transfer matrix."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .data import Dataset, from_uint8, to_uint8
from .errors import DataError, UsageError
from .generator import PerturbationGenerator, apply, quantize_adversarial
from .surrogate import SurrogateModel, count_from_output, forward, images_tensor

REGIMES = ("sparse", "moderate", "dense")


@dataclass(frozen=True)
class CountPair:
    scene_id: str
    c_clean: float
    c_adv: float
    c_gt: int

    def __post_init__(self):
        for v in (self.c_clean, self.c_adv, self.c_gt):
            if not (math.isfinite(v) and v >= 0):
                raise DataError(f"scene {self.scene_id!r}: counts must be finite and nonnegative")


def mae(pairs: Sequence[CountPair], reference: str = "clean") -> float:
    """Mean |C_ref - C_adv|; ``reference`` is ``"clean"`` or ``"ground_truth"``."""
    if len(pairs) == 0:
        raise UsageError("MAE of an empty evaluation is undefined")
    ref = _reference(reference)
    return float(np.mean([abs(ref(p) - p.c_adv) for p in pairs]))


def clean_mae(pairs: Sequence[CountPair]) -> float:
    """Clean-image counting error against ground truth."""
    if len(pairs) == 0:
        raise UsageError("MAE of an empty evaluation is undefined")
    return float(np.mean([abs(p.c_gt - p.c_clean) for p in pairs]))


def _reference(reference: str):
    if reference == "clean":
        return lambda p: p.c_clean
    if reference == "ground_truth":
        return lambda p: float(p.c_gt)
    raise UsageError(f"unknown MAE reference {reference!r}")


def miss_rate(pairs: Sequence[CountPair]) -> float:
    """Mean relative count loss in percent; scenes with zero clean count are skipped.

    Over-counting yields negative values.
    """
    usable = [p for p in pairs if p.c_clean > 0]
    if not usable:
        raise UsageError("miss rate needs at least one scene with a positive clean count")
    return 100.0 * float(np.mean([(p.c_clean - p.c_adv) / p.c_clean for p in usable]))


def transfer_ratio(mae_target: float, mae_surrogate: float) -> float:
    if not mae_surrogate > 0:
        raise UsageError("surrogate MAE must be positive for a transfer ratio")
    return mae_target / mae_surrogate


def regime(c_gt: float) -> str:
    if c_gt < 100:
        return "sparse"
    if c_gt <= 1000:
        return "moderate"
    return "dense"


def _to_hwc255(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
        if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
            img = img.transpose(1, 2, 0)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr * 255.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-0.5 * ((np.arange(size) - (size - 1) / 2) / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM on the 8-bit scale, valid windows only, averaged over channels."""
    x, y = _to_hwc255(a), _to_hwc255(b)
    if x.shape != y.shape:
        raise UsageError(f"SSIM needs equal shapes, got {x.shape} and {y.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise UsageError(f"image {x.shape[:2]} smaller than the {window}x{window} SSIM window")
    c1, c2 = (k1 * 255) ** 2, (k2 * 255) ** 2
    win = gaussian_window(window, sigma)[::-1, ::-1]

    def filt(z):
        return convolve2d(z, win, mode="valid")

    vals = []
    for ch in range(x.shape[2]):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mx, my = filt(xc), filt(yc)
        sxx = filt(xc * xc) - mx * mx
        syy = filt(yc * yc) - my * my
        sxy = filt(xc * yc) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def psnr(a, b, cap: float = 100.0, quantize: bool = True) -> tuple[float, bool]:
    """PSNR in dB with peak 255; returns ``(value, identical)``.

    With ``quantize`` both images are rounded to 8-bit levels first.
    Identical images report ``cap``.
    """
    x, y = _to_hwc255(a), _to_hwc255(b)
    if x.shape != y.shape:
        raise UsageError(f"PSNR needs equal shapes, got {x.shape} and {y.shape}")
    if quantize:
        x, y = np.rint(x), np.rint(y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return cap, True
    return min(cap, 10.0 * math.log10(255.0 ** 2 / mse)), False


@dataclass
class SceneRow:
    scene_id: str
    c_gt: int
    c_clean: float
    c_adv: float
    ssim: float
    psnr: float
    identical: bool
    regime: str


@dataclass
class MetricsReport:
    mae: float
    mr: float
    psnr_mean: float
    ssim_mean: float
    clean_mae: float
    adv_mae_gt: float
    mae_reference: str
    rows: list[SceneRow] = field(default_factory=list)
    regimes: dict = field(default_factory=dict)
    mr_excluded: list[str] = field(default_factory=list)

    def pairs(self) -> list[CountPair]:
        return [CountPair(r.scene_id, r.c_clean, r.c_adv, r.c_gt) for r in self.rows]

    def to_dict(self) -> dict:
        return asdict(self)

    def rows_csv(self) -> str:
        buf = io.StringIO()
        names = list(SceneRow.__dataclass_fields__)
        wr = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        wr.writeheader()
        for r in self.rows:
            wr.writerow(asdict(r))
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"scenes        {len(self.rows)}",
            f"MAE ({self.mae_reference:>12})  {self.mae:.3f}",
            f"MAE vs GT     clean {self.clean_mae:.3f}  adversarial {self.adv_mae_gt:.3f}",
            f"MR            {self.mr:.2f} %" + (f"  ({len(self.mr_excluded)} excluded)" if self.mr_excluded else ""),
            f"PSNR          {self.psnr_mean:.2f} dB",
            f"SSIM          {self.ssim_mean:.4f}",
        ]
        for name in REGIMES:
            g = self.regimes.get(name)
            if g and g["n"]:
                lines.append(f"  {name:<9} n={g['n']:<4} MAE {g['mae']:.3f}  MR {g['mr']:.2f} %  "
                             f"PSNR {g['psnr']:.2f}  SSIM {g['ssim']:.4f}")
        return "\n".join(lines) + "\n"


def _aggregate(rows: list[SceneRow], reference: str) -> dict:
    pairs = [CountPair(r.scene_id, r.c_clean, r.c_adv, r.c_gt) for r in rows]
    usable = [p for p in pairs if p.c_clean > 0]
    return {
        "n": len(rows),
        "mae": mae(pairs, reference),
        "mr": miss_rate(usable) if usable else float("nan"),
        "psnr": float(np.mean([r.psnr for r in rows])),
        "ssim": float(np.mean([r.ssim for r in rows])),
    }


def build_report(rows: list[SceneRow], mae_reference: str = "clean") -> MetricsReport:
    if not rows:
        raise UsageError("cannot build a metrics report from zero scenes")
    overall = _aggregate(rows, mae_reference)
    pairs = [CountPair(r.scene_id, r.c_clean, r.c_adv, r.c_gt) for r in rows]
    regimes = {}
    for name in REGIMES:
        sub = [r for r in rows if r.regime == name]
        regimes[name] = _aggregate(sub, mae_reference) if sub else {"n": 0}
    return MetricsReport(
        mae=overall["mae"], mr=overall["mr"], psnr_mean=overall["psnr"], ssim_mean=overall["ssim"],
        clean_mae=clean_mae(pairs), adv_mae_gt=mae(pairs, "ground_truth"), mae_reference=mae_reference,
        rows=rows, regimes=regimes, mr_excluded=[p.scene_id for p in pairs if p.c_clean <= 0])


@dataclass
class Evaluation:
    report: MetricsReport
    adversarial: np.ndarray  # (N, H, W, 3) uint8, as saved to disk
    outputs_clean: list
    outputs_adv: list


def adversarial_images(generator: PerturbationGenerator | None, dataset: Dataset,
                       batch_size: int = 16) -> np.ndarray:
    """Attack every scene in one forward pass each; returns saved 8-bit levels."""
    clean_u8 = np.stack([to_uint8(s.image) for s in dataset])
    if generator is None:
        return clean_u8
    generator.eval()
    x_all = images_tensor(dataset)
    out = []
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            x = x_all[i:i + batch_size]
            adv = apply(x, generator(x)).permute(0, 2, 3, 1).numpy()
            out.append(quantize_adversarial(clean_u8[i:i + batch_size], adv, generator.epsilon))
    return np.concatenate(out)


def evaluate(generator: PerturbationGenerator | None, target: SurrogateModel, dataset: Dataset,
             score_threshold: float = 0.5, psnr_cap: float = 100.0, mae_reference: str = "clean",
             adversarial: np.ndarray | None = None, keep_outputs: bool = False) -> Evaluation:
    """Attack ``dataset`` with ``generator`` (identity if None) and score ``target``.

    Counts and image-quality metrics use the 8-bit adversarial images that
    would be written to disk.
    """
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    adv_u8 = adversarial if adversarial is not None else adversarial_images(generator, dataset)
    x_clean = images_tensor(dataset)
    x_adv = torch.from_numpy(from_uint8(adv_u8)).permute(0, 3, 1, 2).contiguous()
    rows, outs_c, outs_a = [], [], []
    with torch.no_grad():
        for i in range(0, len(dataset), 32):
            oc = forward(target, x_clean[i:i + 32])
            oa = forward(target, x_adv[i:i + 32])
            cc = count_from_output(oc, score_threshold)
            ca = count_from_output(oa, score_threshold)
            for j in range(len(cc)):
                scene = dataset[i + j]
                q, ident = psnr(scene.image, from_uint8(adv_u8[i + j]), cap=psnr_cap)
                rows.append(SceneRow(scene.id, scene.count, float(cc[j]), float(ca[j]),
                                     ssim(scene.image, from_uint8(adv_u8[i + j])), q, ident,
                                     regime(scene.count)))
                if keep_outputs:
                    outs_c.append(oc.item(j))
                    outs_a.append(oa.item(j))
    return Evaluation(build_report(rows, mae_reference), adv_u8, outs_c, outs_a)


@dataclass
class TransferMatrix:
    sources: list[str]
    targets: list[str]
    mae: dict  # (source, target) -> float
    tr: dict  # (source, target) -> float | None
    clean: dict  # target -> clean MAE vs ground truth
    reference: str = "clean"

    def to_rows(self) -> list[list[str]]:
        rows = [["Source Model", *self.targets]]
        for s in self.sources:
            cells = []
            for t in self.targets:
                tr = self.tr[(s, t)]
                cells.append(f"{self.mae[(s, t)]:.2f}/" + (f"{tr:.2f}" if tr is not None else "-"))
            rows.append([s, *cells])
        rows.append(["Clean", *[f"{self.clean[t]:.2f}" for t in self.targets]])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.to_rows())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"sources": self.sources, "targets": self.targets, "reference": self.reference,
                "cells": [{"source": s, "target": t, "mae": self.mae[(s, t)], "tr": self.tr[(s, t)]}
                          for s in self.sources for t in self.targets],
                "clean": self.clean}


def transfer_matrix(generators: Mapping[str, PerturbationGenerator], targets: Mapping[str, SurrogateModel],
                    dataset: Dataset, score_threshold: float = 0.5,
                    mae_reference: str = "clean") -> TransferMatrix:
    """Rows are generator sources, columns targets; TR relative to the row's own-target cell."""
    if not generators or not targets:
        raise UsageError("transfer matrix needs at least one generator and one target")
    cells, trs = {}, {}
    for s, gen in generators.items():
        adv = adversarial_images(gen, dataset)
        for t, model in targets.items():
            ev = evaluate(None, model, dataset, score_threshold, mae_reference=mae_reference, adversarial=adv)
            cells[(s, t)] = ev.report.mae
    for s in generators:
        diag = cells.get((s, s))
        for t in targets:
            trs[(s, t)] = transfer_ratio(cells[(s, t)], diag) if diag else None
    clean = {t: evaluate(None, m, dataset, score_threshold).report.clean_mae for t, m in targets.items()}
    return TransferMatrix(list(generators), list(targets), cells, trs, clean, mae_reference)


def recount(rows: Iterable[SceneRow]) -> dict:
    """Histogram of rows per regime."""
    out = {name: 0 for name in REGIMES}
    for r in rows:
        out[r.regime] += 1
    return out
