"""Command-line pipeline: synth, train, score, eval, report.

One JSON run configuration drives all commands; flags override config
keys. All outputs land under the run's output directory:

    <out>/scenes/       generated scene pairs, labels, provenance
    <out>/checkpoints/  preprocessing archive, model checkpoint, loss log
    <out>/scores/       per-method score maps (+ optional PGM renders)
    <out>/reports/      evaluation report (JSON, CSV, text table)

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure
during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .changedet import METHODS, ScoreMap, score_scene, threshold_at_95
from .errors import DivergenceError, DomainError, TileChangeError
from .evalstats import EvalReport, MethodStats, compare_methods, format_table, labeled_from_map
from .preprocess import (
    DEFAULT_EPSILON,
    SpectralAlignParams,
    apply_spectral_alignment,
    fit_normalization,
    load_params,
    lognorm_values,
    save_params,
)
from .raster import export_pgm, load_scene, save_scene, tile_scene
from .synthgen import SceneLabels, SynthConfig, gen_scene_pair
from .vae import EncoderConfig, TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DomainError(f"cannot read config {path}: {exc}") from exc


class RunConfig:
    """Merged view of the config file and command-line overrides."""

    def __init__(self, doc: dict, args: argparse.Namespace):
        self.doc = doc
        self.seed = args.seed if args.seed is not None else doc.get("seed")
        self.threads = args.threads if args.threads is not None else int(doc.get("threads", 1))
        self.deterministic = bool(args.deterministic or doc.get("deterministic", False))
        out = args.out if args.out is not None else doc.get("out")
        if out is None:
            raise DomainError("no output directory: set --out or config key 'out'")
        self.out = Path(out)
        if self.deterministic and self.seed is None:
            raise DomainError("deterministic mode requires a seed")
        if self.seed is None:
            self.seed = 0
        self.seed = int(self.seed)

    def block(self, name: str) -> dict:
        block = self.doc.get(name, {})
        if not isinstance(block, dict):
            raise DomainError(f"config block {name!r} must be an object")
        return dict(block)

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p


def cmd_synth(cfg: RunConfig) -> int:
    block = cfg.block("synth")
    n_train = int(block.pop("n_train_scenes", 4))
    synth_cfg = SynthConfig(**{**block, "seed": cfg.seed})
    scenes_dir = cfg.out / "scenes"

    pre, post, labels = gen_scene_pair(synth_cfg, stream=0)
    save_scene(pre, scenes_dir / "pre")
    save_scene(post, scenes_dir / "post")
    labels.save(scenes_dir / "labels.json")

    nominal_cfg = dataclasses.replace(synth_cfg, n_burns=0)
    npre, npost, _ = gen_scene_pair(nominal_cfg, stream=1)
    save_scene(npre, scenes_dir / "nominal_pre")
    save_scene(npost, scenes_dir / "nominal_post")

    for k in range(n_train):
        tpre, _, _ = gen_scene_pair(nominal_cfg, stream=2 + k)
        save_scene(tpre, scenes_dir / f"train_{k}")

    with open(scenes_dir / "synth_config.json", "w", encoding="utf-8") as f:
        json.dump(
            {"synth": synth_cfg.to_dict(), "n_train_scenes": n_train, "root_seed": cfg.seed},
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    print(f"synth: wrote pre/post pair ({labels.n_positive} positive tiles), "
          f"nominal pair, {n_train} training scenes -> {scenes_dir}")
    return EXIT_OK


def _fit_alignment(block: dict, cfg: RunConfig, bands: int) -> SpectralAlignParams:
    samples = block.get("alignment_samples")
    if not samples:
        return SpectralAlignParams.identity(bands)
    doc = _load_json(cfg.path(samples))
    return SpectralAlignParams.fit(np.array(doc["x"]), np.array(doc["y"]))


def cmd_train(cfg: RunConfig) -> int:
    pre_block = cfg.block("preprocess")
    train_block = cfg.block("train")
    enc_cfg = EncoderConfig(**train_block.pop("encoder", {}))
    max_tiles = train_block.pop("train_tiles", None)
    scene_paths = train_block.pop("scenes", None)
    train_cfg = TrainConfig(
        **{**train_block, "seed": cfg.seed, "deterministic": cfg.deterministic}
    )

    if scene_paths is None:
        scene_files = sorted((cfg.out / "scenes").glob("train_*.json"))
        if not scene_files:
            raise DomainError(f"no training scenes under {cfg.out / 'scenes'}; run synth first")
    else:
        scene_files = [cfg.path(p) for p in scene_paths]
    scenes = [load_scene(p) for p in scene_files]

    align = _fit_alignment(pre_block, cfg, scenes[0].header.bands)
    scenes = [apply_spectral_alignment(s, align) for s in scenes]
    norm = fit_normalization(scenes, epsilon=float(pre_block.get("epsilon", DEFAULT_EPSILON)))
    ckpt_dir = cfg.out / "checkpoints"
    save_params(ckpt_dir / "preprocess_params.json", align, norm)

    tiles = []
    for s in scenes:
        grid = tile_scene(s, enc_cfg.tile_size)
        tiles.extend(
            lognorm_values(t.values, norm) for t in grid.tiles if not t.contains_nodata
        )
    if max_tiles is not None:
        tiles = tiles[: int(max_tiles)]

    def write_history(history):
        with open(ckpt_dir / "loss_history.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(
                f,
                fieldnames=["epoch", "train_total", "train_mse", "train_kl", "val_total", "val_mse", "val_kl"],
            )
            writer.writeheader()
            writer.writerows(history)

    try:
        ckpt = train(tiles, train_cfg, enc_cfg)
    except DivergenceError as exc:
        write_history(exc.history)
        print(f"train: diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, ckpt_dir / "model.ckpt")
    write_history(ckpt.history)
    last = ckpt.history[-1] if ckpt.history else {}
    print(
        f"train: {len(tiles)} tiles, {train_cfg.epochs} epochs, best epoch {ckpt.best_epoch}, "
        f"final val loss {last.get('val_total', float('nan')):.4f} -> {ckpt_dir / 'model.ckpt'}"
    )
    return EXIT_OK


def _load_aligned_scene(cfg: RunConfig, path, align: SpectralAlignParams):
    return apply_spectral_alignment(load_scene(cfg.path(path)), align)


def cmd_score(cfg: RunConfig) -> int:
    block = cfg.block("score")
    methods = [m.upper() for m in block.get("methods", list(METHODS))]
    for m in methods:
        if m not in METHODS:
            raise DomainError(f"unknown method {m!r}; choose from {list(METHODS)}")
    config_tag = block.get("config_tag", "4-band")
    align, norm = load_params(cfg.path(block.get("params", "checkpoints/preprocess_params.json")))

    pre = _load_aligned_scene(cfg, block.get("pre", "scenes/pre"), align)
    post = _load_aligned_scene(cfg, block.get("post", "scenes/post"), align)
    history = [_load_aligned_scene(cfg, p, align) for p in block.get("history", [])]

    ckpt = None
    if "LRC" in methods:
        ckpt = load_checkpoint(
            cfg.path(block.get("checkpoint", "checkpoints/model.ckpt")),
            expect_bands=pre.header.bands,
        )

    nominal = None
    if block.get("nominal_pre") and block.get("nominal_post"):
        nominal = (
            _load_aligned_scene(cfg, block["nominal_pre"], align),
            _load_aligned_scene(cfg, block["nominal_post"], align),
        )

    scores_dir = cfg.out / "scores"
    thresholds = {}
    tile_size = int(block.get("tile_size", 32))
    for method in methods:
        smap = score_scene(
            pre,
            post,
            method,
            norm,
            ckpt=ckpt,
            history=history or None,
            config_tag=config_tag,
            tile_size=tile_size,
            threads=cfg.threads,
            irmad_seed=cfg.seed,
        )
        if nominal is not None:
            nominal_map = score_scene(
                nominal[0],
                nominal[1],
                method,
                norm,
                ckpt=ckpt,
                config_tag=config_tag,
                tile_size=tile_size,
                threads=cfg.threads,
                irmad_seed=cfg.seed,
            )
            nominal_scores = nominal_map.flat()
            _, tau = threshold_at_95(nominal_scores[np.isfinite(nominal_scores)], smap)
            smap.threshold = tau
            thresholds[method] = tau
        smap.save(scores_dir / f"{method.lower()}.json")
        if block.get("export_pgm", False):
            export_pgm(smap.scores, scores_dir / f"{method.lower()}.pgm")
    if thresholds:
        with open(scores_dir / "thresholds.json", "w", encoding="utf-8") as f:
            json.dump(thresholds, f, indent=2, sort_keys=True)
            f.write("\n")
    print(f"score: wrote {len(methods)} score maps ({', '.join(methods)}) -> {scores_dir}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    block = cfg.block("eval")
    methods = [m.upper() for m in block.get("methods", list(METHODS))]
    labels = SceneLabels.load(cfg.path(block.get("labels", "scenes/labels.json")))

    maps = {}
    for m in methods:
        maps[m] = ScoreMap.load(cfg.path(block.get(f"map_{m.lower()}", f"scores/{m.lower()}.json")))

    # matched tile sets: a tile excluded anywhere is excluded everywhere
    finite = np.ones(labels.rows * labels.cols, dtype=bool)
    for smap in maps.values():
        if (smap.rows, smap.cols) != (labels.rows, labels.cols):
            raise DomainError(
                f"score map grid {smap.rows}x{smap.cols} != labels grid {labels.rows}x{labels.cols}"
            )
        finite &= np.isfinite(smap.flat())
    per_method = {}
    for m, smap in maps.items():
        scores = smap.flat()[finite]
        per_method[m] = labeled_from_map(
            ScoreMap(rows=1, cols=int(finite.sum()), scores=scores[None, :], method=m,
                     config_tag=smap.config_tag),
            labels.labels.ravel()[finite],
            scene_id=block.get("site", "synthetic"),
        )

    thresholds = None
    tpath = cfg.path(block.get("thresholds", "scores/thresholds.json"))
    if Path(tpath).exists():
        thresholds = {k.upper(): float(v) for k, v in _load_json(tpath).items()}

    report = compare_methods(
        per_method,
        reference=block.get("reference", "IRMAD").upper(),
        n_boot=int(block.get("n_boot", 1000)),
        seed=cfg.seed,
        thresholds=thresholds,
        site=block.get("site", "synthetic"),
        config_tag=next(iter(maps.values())).config_tag,
    )
    reports_dir = cfg.out / "reports"
    report.save_json(reports_dir / "report.json")
    report.save_csv(reports_dir / "report.csv")
    table = format_table(report)
    (reports_dir / "comparison_table.txt").parent.mkdir(parents=True, exist_ok=True)
    (reports_dir / "comparison_table.txt").write_text(table, encoding="utf-8")
    print(table)
    return EXIT_OK


def _report_from_dict(doc: dict) -> EvalReport:
    per_method = {}
    ordered = [m for m in METHODS if m in doc["methods"]]
    ordered += [m for m in doc["methods"] if m not in ordered]
    for m in ordered:
        s = doc["methods"][m]
        per_method[m] = MethodStats(
            metrics={k: tuple(v) for k, v in s["metrics"].items()},
            p_vs_reference=s["p_vs_reference"],
            p_flag=s["p_flag"],
            cohens_d=s["cohens_d"],
            rel_improvement=s["rel_improvement"],
            n_redraws=s["n_redraws"],
            nan_precision_resamples=s["nan_precision_resamples"],
        )
    return EvalReport(
        site=doc["site"],
        config_tag=doc["config_tag"],
        reference=doc["reference"],
        n_boot=doc["n_boot"],
        seed=doc["seed"],
        per_method=per_method,
    )


def cmd_report(cfg: RunConfig) -> int:
    block = cfg.block("report")
    path = cfg.path(block.get("report", "reports/report.json"))
    print(format_table(_report_from_dict(_load_json(path))))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilechange",
        description="Unsupervised latent-representation change detection pipeline",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=str, default=None, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads for tile scoring")
    parser.add_argument("--deterministic", action="store_true", help="require seeded, reproducible run")
    parser.add_argument("--out", type=str, default=None, help="output directory (overrides config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = _load_json(args.config) if args.config else {}
        cfg = RunConfig(doc, args)
        return COMMANDS[args.command](cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TileChangeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
