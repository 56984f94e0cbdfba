"""Command-line entry point: ``crowdattack <command> [--config FILE] [--set k=v ...]``.

Commands: gen-data, train-surrogate, train-generator, attack, evaluate,
transfer-matrix. Every command writes only under its output directory
(``--out``, else the config's ``output``, else ``$CROWDATTACK_OUTPUT_ROOT/<command>``)
and leaves a ``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import metrics, plotting
from .artifacts import atomic_write_text, sha256_file, write_json, write_manifest
from .config import RunConfig, load_config
from .data import Dataset, generate_dataset, load_dataset, resize_scene, save_dataset
from .errors import ConfigError, CrowdAttackError, DataError
from .generator import PerturbationGenerator, budget_levels, load_generator, save_generator
from .surrogate import load_surrogate, save_surrogate, train_surrogate
from .training import LAST, train_generator

log = logging.getLogger("crowdattack")

OUTPUT_ENV = "CROWDATTACK_OUTPUT_ROOT"
CATEGORY = {2: "config", 3: "data", 4: "numeric", 5: "usage"}


def output_dir(cfg: RunConfig, command: str, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / command


def _split(cfg: RunConfig, split: str) -> Dataset:
    root = Path(cfg.data.root)
    if not (root / split).is_dir():
        raise DataError(f"dataset split not found: {root / split}")
    ds = load_dataset(root, split)
    if len(ds) == 0:
        raise DataError(f"dataset split {root / split} is empty")
    h, w = cfg.data.height, cfg.data.width
    if any((s.height, s.width) != (h, w) for s in ds):
        ds = Dataset(tuple(resize_scene(s, h, w) for s in ds), split)
    return ds


def _require_path(value: str, what: str) -> Path:
    if not value:
        raise ConfigError(f"{what} is not set")
    p = Path(value)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    d = cfg.data
    arts, stats = [], {}
    for split, n in (("train", d.num_train), ("test", d.num_test)):
        ds = generate_dataset(n, split, d.height, d.width, d.min_count, d.max_count, d.blob_sigma, d.seed)
        save_dataset(ds, out)
        counts = ds.counts()
        edges = np.array([0, 50, 100, 150, 200, 500, 1000, np.inf])
        hist, _ = np.histogram(counts, bins=edges)
        stats[split] = {"scenes": n, "total": int(counts.sum()),
                        "mean": float(counts.mean()) if n else 0.0,
                        "min": int(counts.min()) if n else 0, "max": int(counts.max()) if n else 0,
                        "histogram": {f"[{int(a)},{b if np.isinf(b) else int(b)})": int(c)
                                      for a, b, c in zip(edges[:-1], edges[1:], hist)},
                        "fingerprint": ds.fingerprint()}
        arts.append(out / split / "annotations.json")
        print(f"{split}: {n} scenes, counts mean {stats[split]['mean']:.1f} "
              f"min {stats[split]['min']} max {stats[split]['max']}")
    write_json(out / "stats.json", stats)
    arts.append(out / "stats.json")
    write_manifest(out, "gen-data", cfg.to_dict(), cfg.digest(), {}, arts)
    return 0


def cmd_train_surrogate(cfg: RunConfig, out: Path, args) -> int:
    s = cfg.surrogate
    train = _split(cfg, "train")
    history: list[float] = []
    model = train_surrogate(train, s.paradigm, s.epochs, s.seed, s.widths, s.batch_size, s.lr,
                            s.kernel_sigma, history=history)
    ckpt = out / "surrogate.pt"
    out.mkdir(parents=True, exist_ok=True)
    save_surrogate(model, ckpt, {"seed": s.seed, "dataset_fingerprint": train.fingerprint(),
                                 "final_loss": history[-1]})
    test = _split(cfg, "test")
    report = metrics.evaluate(None, model, test, cfg.eval.score_threshold).report
    write_json(out / "clean_report.json", {"paradigm": s.paradigm, "clean_mae": report.clean_mae,
                                           "history": history, "rows": [r.__dict__ for r in report.rows]})
    print(f"{s.paradigm} surrogate: final loss {history[-1]:.5f}, clean test MAE {report.clean_mae:.3f}")
    write_manifest(out, "train-surrogate", cfg.to_dict(), cfg.digest(),
                   {"train": train.fingerprint(), "test": test.fingerprint()},
                   [ckpt, out / "clean_report.json"])
    return 0


def cmd_train_generator(cfg: RunConfig, out: Path, args) -> int:
    sur_path = _require_path(args.surrogate or cfg.train.surrogate, "train.surrogate checkpoint")
    surrogate = load_surrogate(sur_path)
    train = _split(cfg, "train")
    gen = PerturbationGenerator.from_config(cfg.generator)
    resume = args.resume
    if resume:
        resume = _require_path(resume, "resume checkpoint")
    result = train_generator(gen, surrogate, train, cfg.train, out_dir=out, resume_from=resume,
                             stop_after=args.stop_after)
    arts = [out / LAST, out / "train_log.jsonl"]
    if result.state.epoch >= cfg.train.epochs:
        save_generator(result.generator, out / "generator.pt",
                       {"surrogate_checksum": surrogate.meta["param_checksum"],
                        "surrogate_paradigm": surrogate.paradigm, "seed": cfg.train.seed,
                        "dataset_fingerprint": train.fingerprint()})
        arts.append(out / "generator.pt")
        if cfg.eval.plots and result.log:
            arts.append(plotting.training_curves(result.log, out / "figures" / "training.png"))
    print(f"generator: {result.state.epoch}/{cfg.train.epochs} epochs, {result.state.step} steps, "
          f"train count drop {result.state.running.get('degradation', float('nan')):.2f}")
    write_manifest(out, "train-generator", cfg.to_dict(), cfg.digest(),
                   {"surrogate": sha256_file(sur_path), "train": train.fingerprint()}, arts)
    return 0


def cmd_attack(cfg: RunConfig, out: Path, args) -> int:
    gen_path = _require_path(args.generator or cfg.attack.generator, "attack.generator checkpoint")
    gen = load_generator(gen_path)
    ds = _split(cfg, cfg.attack.split)
    adv = metrics.adversarial_images(gen, ds)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    q = budget_levels(gen.epsilon)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["scene_id", "max_level_diff", "mean_abs_level_diff", "rms_level_diff"])
    arts = []
    for scene, a in zip(ds, adv):
        clean = np.rint(scene.image.astype(np.float64) * 255).astype(np.int16)
        diff = a.astype(np.int16) - clean
        worst = int(np.abs(diff).max())
        if worst > q:
            raise DataError(f"scene {scene.id}: saved image exceeds the {q}-level budget ({worst})")
        path = img_dir / f"{scene.id}.png"
        Image.fromarray(a, mode="RGB").save(path)
        arts.append(path)
        wr.writerow([scene.id, worst, f"{np.abs(diff).mean():.6f}", f"{np.sqrt((diff ** 2).mean()):.6f}"])
    atomic_write_text(out / "delta_stats.csv", buf.getvalue())
    arts.append(out / "delta_stats.csv")
    print(f"attacked {len(ds)} images from split {cfg.attack.split} (budget {q} levels)")
    write_manifest(out, "attack", cfg.to_dict(), cfg.digest(),
                   {"generator": sha256_file(gen_path), "data": ds.fingerprint()}, arts)
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    gen_path = _require_path(args.generator or cfg.attack.generator, "attack.generator checkpoint")
    tgt_path = _require_path(args.target or cfg.attack.target, "attack.target checkpoint")
    gen, target = load_generator(gen_path), load_surrogate(tgt_path)
    ds = _split(cfg, cfg.attack.split)
    e = cfg.eval
    ev = metrics.evaluate(gen, target, ds, e.score_threshold, e.psnr_cap, e.mae_reference,
                          keep_outputs=e.plots and e.visualize > 0)
    rep = ev.report
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", rep.to_dict())
    atomic_write_text(out / "rows.csv", rep.rows_csv())
    atomic_write_text(out / "summary.txt", rep.summary())
    arts = [out / "report.json", out / "rows.csv", out / "summary.txt"]
    if e.plots:
        arts.append(plotting.regime_bars(rep, out / "figures" / "regimes.png"))
        for i in range(min(e.visualize, len(ds))):
            r = rep.rows[i]
            arts.append(plotting.overlay_figure(
                ds[i].image, ev.adversarial[i], ev.outputs_clean[i], ev.outputs_adv[i],
                r.c_clean, r.c_adv, r.c_gt, out / "figures" / f"overlay_{r.scene_id}.png", e.score_threshold))
    sys.stdout.write(rep.summary())
    write_manifest(out, "evaluate", cfg.to_dict(), cfg.digest(),
                   {"generator": sha256_file(gen_path), "target": sha256_file(tgt_path),
                    "data": ds.fingerprint()}, arts)
    return 0


def cmd_transfer_matrix(cfg: RunConfig, out: Path, args) -> int:
    t = cfg.transfer
    if not t.models or not t.generators:
        raise ConfigError("transfer.models and transfer.generators must both be non-empty")
    models = {name: load_surrogate(_require_path(p, f"transfer.models.{name}")) for name, p in t.models.items()}
    gens = {name: load_generator(_require_path(p, f"transfer.generators.{name}"))
            for name, p in t.generators.items()}
    ds = _split(cfg, t.split)
    mat = metrics.transfer_matrix(gens, models, ds, cfg.eval.score_threshold, cfg.eval.mae_reference)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "matrix.csv", mat.to_csv())
    write_json(out / "matrix.json", mat.to_dict())
    arts = [out / "matrix.csv", out / "matrix.json"]
    if cfg.eval.plots:
        arts.append(plotting.transfer_heatmap(mat, out / "figures" / "transfer_tr.png"))
    sys.stdout.write(mat.to_csv())
    inputs = {f"model:{k}": sha256_file(v) for k, v in t.models.items()}
    inputs |= {f"generator:{k}": sha256_file(v) for k, v in t.generators.items()}
    write_manifest(out, "transfer-matrix", cfg.to_dict(), cfg.digest(), inputs, arts)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-surrogate": cmd_train_surrogate,
    "train-generator": cmd_train_generator,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "transfer-matrix": cmd_transfer_matrix,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdattack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML file with one section per stage")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="shortcut for the stage seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train-surrogate":
            p.add_argument("--paradigm", choices=["density_map", "point_regression"])
        if name == "train-generator":
            p.add_argument("--surrogate", help="surrogate checkpoint (overrides train.surrogate)")
            p.add_argument("--resume", help="continue from a training checkpoint such as last.pt")
            p.add_argument("--stop-after", type=int, help="stop after this many epochs in this invocation")
        if name in ("attack", "evaluate"):
            p.add_argument("--generator", help="generator checkpoint")
            p.add_argument("--split", choices=["train", "test"])
        if name == "evaluate":
            p.add_argument("--target", help="target surrogate checkpoint")
    return parser


SEED_KEY = {"gen-data": "data.seed", "train-surrogate": "surrogate.seed", "train-generator": "train.seed"}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None and args.command in SEED_KEY:
        overrides.append(f"{SEED_KEY[args.command]}={args.seed}")
    if getattr(args, "paradigm", None):
        overrides.append(f"surrogate.paradigm={args.paradigm}")
    if getattr(args, "split", None):
        overrides.append(f"attack.split={args.split}")
    torch.use_deterministic_algorithms(True)
    try:
        cfg = load_config(args.config, overrides)
        out = output_dir(cfg, args.command, args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except CrowdAttackError as exc:
        print(f"error [{CATEGORY.get(exc.exit_code, 'runtime')}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
