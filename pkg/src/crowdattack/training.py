"""Generator training against a frozen surrogate.

Each epoch sets a cosine-annealed learning rate and the decayed confidence
threshold, then for every batch: generate a bounded perturbation, apply it,
run the surrogate, compute the attack loss and step the generator only.
Grad-CAM maps of the clean images are computed once and cached.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .artifacts import atomic_write_text, load_torch, param_checksum, save_torch, write_json
from .config import TrainConfig
from .data import Dataset
from .errors import ConfigError, NumericError
from .generator import PerturbationGenerator, apply
from .losses import adaptive_threshold, attack_loss
from .surrogate import SurrogateModel, count_from_output, forward, freeze, gradcam, images_tensor

log = logging.getLogger(__name__)

LAST = "last.pt"
BEST = "best.pt"
LOG_FILE = "train_log.jsonl"


def cosine_lr(e: float, epochs: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` at ``e = 0`` towards 0 at ``e = epochs``."""
    return lr0 * (1.0 + math.cos(math.pi * e / epochs)) / 2.0


@dataclass
class TrainState:
    epoch: int = 0  # number of completed epochs
    step: int = 0
    tau: float = 0.5
    lr: float = 0.0
    best_degradation: float = -1.0
    best_epoch: int = -1
    log_records: int = 0
    running: dict = field(default_factory=dict)
    rng_state: bytes = b""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**d)


@dataclass
class TrainResult:
    generator: PerturbationGenerator
    log: list[dict]
    state: TrainState


def attention_cache(surrogate: SurrogateModel, images: torch.Tensor, tau: float,
                    batch_size: int = 16) -> torch.Tensor:
    maps = [gradcam(surrogate, images[i:i + batch_size], tau=tau) for i in range(0, len(images), batch_size)]
    return torch.cat(maps)


def _counts(surrogate: SurrogateModel, images: torch.Tensor, threshold: float = 0.5,
            batch_size: int = 32) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([count_from_output(forward(surrogate, images[i:i + batch_size]), threshold)
                          for i in range(0, len(images), batch_size)])


def _checkpoint(path: Path, gen: PerturbationGenerator, opt, state: TrainState, cfg: TrainConfig,
                meta: dict) -> None:
    save_torch(path, {
        "generator": {"state_dict": gen.state_dict(),
                      "meta": {"epsilon": gen.epsilon, "widths": list(gen.widths), "norm": gen.norm,
                               "param_checksum": param_checksum(gen), **meta}},
        "optimizer": opt.state_dict(),
        "state": state.to_dict(),
        "config": cfg.to_dict(),
    })


def _budget_ok(gen: PerturbationGenerator, images: torch.Tensor, batch_size: int = 16) -> float:
    worst = 0.0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            worst = max(worst, float((apply(x, gen(x)) - x).abs().max()))
    return worst


def train_generator(gen: PerturbationGenerator, surrogate: SurrogateModel, dataset: Dataset,
                    cfg: TrainConfig, out_dir: str | Path | None = None,
                    resume_from: str | Path | None = None, stop_after: int | None = None) -> TrainResult:
    """Train ``gen`` in place against ``surrogate``; see module docstring.

    With ``out_dir`` set, writes ``last.pt`` every epoch, ``epoch_XXXX.pt``
    every ``cfg.checkpoint_every`` epochs, ``best.pt`` for the largest
    count degradation, and a JSON-lines step log. A non-finite loss aborts
    with :class:`NumericError`, leaving the last good checkpoint in place.
    ``stop_after`` ends this invocation after that many epochs; the run can
    be continued later with ``resume_from``.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("cannot train a generator on an empty dataset")
    w = cfg.weights
    freeze(surrogate)
    frozen_sum = param_checksum(surrogate)
    torch.manual_seed(cfg.seed)

    images = images_tensor(dataset)
    counts_gt = [float(c) for c in dataset.counts()]
    rho_all = attention_cache(surrogate, images, w.tau_max)
    clean_counts = _counts(surrogate, images)
    n = len(dataset)

    opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr)
    state = TrainState(tau=w.tau_max, lr=cfg.lr)
    records: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"surrogate_checksum": frozen_sum, "surrogate_paradigm": surrogate.paradigm,
            "dataset_fingerprint": dataset.fingerprint(), "seed": cfg.seed}

    if resume_from is not None:
        blob = load_torch(resume_from)
        gen.load_state_dict(blob["generator"]["state_dict"])
        opt.load_state_dict(blob["optimizer"])
        state = TrainState.from_dict(blob["state"])
        if state.rng_state:
            torch.set_rng_state(torch.frombuffer(bytearray(state.rng_state), dtype=torch.uint8))
        if out is not None and (out / LOG_FILE).exists():
            lines = (out / LOG_FILE).read_text().splitlines()[:state.log_records]
            records = [json.loads(x) for x in lines]
    log_fh = None
    if out is not None:
        atomic_write_text(out / LOG_FILE, "".join(json.dumps(r) + "\n" for r in records))
        log_fh = open(out / LOG_FILE, "a")

    try:
        gen.train()
        last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, state.epoch + stop_after)
        for epoch in range(state.epoch, last_epoch):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
            for group in opt.param_groups:
                group["lr"] = lr
            tau = adaptive_threshold(epoch, cfg.epochs, w)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            sums: dict[str, float] = {}
            adv_err = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                tidx = torch.from_numpy(idx)
                x = images[tidx]
                delta = gen(x)
                x_adv = apply(x, delta)
                output = forward(surrogate, x_adv)
                loss = attack_loss(output, delta, rho_all[tidx], [counts_gt[i] for i in idx], tau, w,
                                   cfg.sign_convention)
                if not torch.isfinite(loss.value):
                    raise NumericError(f"non-finite attack loss at epoch {epoch}, step {state.step}")
                opt.zero_grad(set_to_none=True)
                loss.value.backward()
                opt.step()
                state.step += 1
                adv = count_from_output(output).detach()
                batch_mae = float((clean_counts[tidx] - adv).abs().mean())
                adv_err += batch_mae * len(idx)
                rec = {"epoch": epoch, "step": state.step, "lr": lr, "tau": tau,
                       **loss.record(), "batch_mae": batch_mae}
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                for k in ("attack", "model", "pert", "hinge", "tv", "freq", "cam"):
                    sums[k] = sums.get(k, 0.0) + rec[k] * len(idx)
            degradation = adv_err / n
            state.epoch = epoch + 1
            state.tau, state.lr = tau, lr
            state.running = {k: v / n for k, v in sums.items()} | {"degradation": degradation}
            state.log_records = len(records)
            state.rng_state = torch.get_rng_state().numpy().tobytes()
            log.info("generator epoch %d/%d lr %.2e tau %.3f loss %.4f count drop %.2f",
                     epoch + 1, cfg.epochs, lr, tau, state.running["attack"], degradation)
            if out is not None:
                log_fh.flush()
                is_best = degradation > state.best_degradation
                if is_best:
                    state.best_degradation, state.best_epoch = degradation, epoch
                _checkpoint(out / LAST, gen, opt, state, cfg, meta)
                if state.epoch % cfg.checkpoint_every == 0:
                    _checkpoint(out / f"epoch_{state.epoch:04d}.pt", gen, opt, state, cfg, meta)
                if is_best:
                    _checkpoint(out / BEST, gen, opt, state, cfg, meta)
    finally:
        if log_fh is not None:
            log_fh.close()

    gen.eval()
    if state.epoch < cfg.epochs:
        return TrainResult(gen, records, state)
    if param_checksum(surrogate) != frozen_sum:
        raise RuntimeError("surrogate parameters changed during generator training")
    worst = _budget_ok(gen, images)
    if worst > gen.epsilon + 1e-6:
        raise NumericError(f"perturbation budget violated on training data: {worst:.6f} > {gen.epsilon:.6f}")
    if out is not None:
        write_json(out / "train_state.json", {k: v for k, v in state.to_dict().items() if k != "rng_state"})
    return TrainResult(gen, records, state)
