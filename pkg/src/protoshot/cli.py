"""Command-line interface: prepare, train, eval, explain.

Every command reads an optional JSON config (``--config``), applies flag
overrides, echoes the effective configuration into the output directory, and
is deterministic given (config, seed). Exit codes: 0 success, 1 usage or
config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from . import synth
from .config import (
    RunConfig,
    build_run_config,
    load_config_file,
    merge_overrides,
    write_effective_config,
)
from .encoders import EncoderConfig
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .explain import gradcam, overlay, save_saliency_grid, select_high_confidence
from .head import compute_prototypes, classify_batch
from .metrics import QueryOutcome, evaluate, format_report, write_report_records
from .model import FewShotModel
from .plots import plot_saliency_panel, plot_shot_sweep, plot_training_history
from .train import fit

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise ConfigError(message)


def _add_shared_flags(sub: argparse.ArgumentParser, shots_help: str) -> None:
    sub.add_argument("--config", help="JSON run configuration file")
    sub.add_argument("--seed", type=int, help="run seed")
    sub.add_argument("--ways", type=int, help="number of classes in the task")
    sub.add_argument("--shots", help=shots_help)
    sub.add_argument("--query", type=int, help="query samples per class per episode")
    sub.add_argument("--encoder", choices=("conv-net", "frozen-embed"), help="encoder archetype")
    sub.add_argument("--out", help="output directory")


def _build_parser() -> _Parser:
    parser = _Parser(prog="protoshot", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)
    p_prepare = commands.add_parser("prepare", help="filter, remap, and split a manifest")
    p_train = commands.add_parser("train", help="episodic training run")
    p_eval = commands.add_parser("eval", help="episodic evaluation of a checkpoint")
    p_explain = commands.add_parser("explain", help="saliency maps for selected test queries")
    for sub in (p_prepare, p_train, p_explain):
        _add_shared_flags(sub, "support shots per class (integer)")
    _add_shared_flags(p_eval, "shots to evaluate, comma-separated (e.g. 5,10,20)")
    for sub in (p_eval, p_explain):
        sub.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.ckpt)")
    return parser


def _load_config(args) -> tuple[RunConfig, dict]:
    raw = load_config_file(args.config) if args.config else {}
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["train.seed"] = args.seed
    if args.ways is not None:
        overrides["train.ways"] = args.ways
    if args.query is not None:
        overrides["train.query"] = args.query
    if args.encoder is not None:
        overrides["encoder.archetype"] = args.encoder
    if args.out is not None:
        overrides["out"] = args.out
    if args.shots is not None:
        shots = [s for s in str(args.shots).split(",") if s]
        try:
            values = [int(s) for s in shots]
        except ValueError:
            raise ConfigError(f"--shots expects integers, got {args.shots!r}")
        if args.command == "eval":
            overrides["eval.shots"] = values
        else:
            if len(values) != 1:
                raise ConfigError(f"--shots expects a single integer for {args.command}")
            overrides["train.shots"] = values[0]
    merged = merge_overrides(raw, overrides)
    config = build_run_config(merged)
    if "seed" not in merged.get("train", {}):
        config.train.seed = config.seed
    return config, raw


def _seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    root = np.random.SeedSequence(seed)
    names = ("data_train", "data_test", "init", "train_sampler", "eval_sampler", "explain_sampler")
    return dict(zip(names, root.spawn(len(names))))


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def resolve_encoder(config: RunConfig) -> EncoderConfig:
    """Derive the input-facing encoder fields from the data configuration."""
    d = config.data
    if d.source == "manifest":
        size, channels = d.target_size, d.channels
    elif d.source == "blobs":
        size, channels = config.encoder.input_size, 1
    else:
        size, channels = d.image_size, 1
    base = config.encoder
    if base.archetype == "frozen-embed":
        frozen = d.blob_dim if d.source == "blobs" else channels * size * size
        return dataclasses.replace(
            base, frozen_dim=frozen, input_channels=channels, input_size=size
        )
    return dataclasses.replace(base, input_channels=channels, input_size=size)


def build_pools(config: RunConfig, streams) -> tuple[dict, dict, int]:
    """Materialize per-class train/test sample pools for the configured source."""
    d = config.data
    if d.source == "blobs":
        way = config.train.ways
        train_pools, _ = synth.blob_pools(
            way=way, dim=d.blob_dim, per_class=d.train_per_class,
            separation=d.blob_separation, seed=np.random.default_rng(streams["data_train"]),
        )
        test_pools, _ = synth.blob_pools(
            way=way, dim=d.blob_dim, per_class=d.test_per_class,
            separation=d.blob_separation, seed=np.random.default_rng(streams["data_test"]),
        )
        return train_pools, test_pools, way
    if d.source == "textures":
        train_pools = synth.texture_pools(
            per_class=d.train_per_class, size=d.image_size, noise=d.noise,
            seed=np.random.default_rng(streams["data_train"]),
        )
        test_pools = synth.texture_pools(
            per_class=d.test_per_class, size=d.image_size, noise=d.noise,
            seed=np.random.default_rng(streams["data_test"]),
        )
        return train_pools, test_pools, 3
    if d.source == "planted":
        train_pools, _ = synth.planted_signal_pools(
            per_class=d.train_per_class, size=d.image_size, noise=d.noise,
            seed=np.random.default_rng(streams["data_train"]),
        )
        test_pools, _ = synth.planted_signal_pools(
            per_class=d.test_per_class, size=d.image_size, noise=d.noise,
            seed=np.random.default_rng(streams["data_test"]),
        )
        return train_pools, test_pools, 2
    train_path = d.train_manifest or str(Path(config.out) / "train_manifest.csv")
    test_path = d.test_manifest or str(Path(config.out) / "test_manifest.csv")
    train_manifest = D.load_manifest(train_path)
    test_manifest = D.load_manifest(test_path)
    if train_manifest.class_names != test_manifest.class_names:
        raise DataError(
            f"train/test manifests disagree on classes: "
            f"{train_manifest.class_names} vs {test_manifest.class_names}"
        )
    train_pools = D.pools_from_records(
        train_manifest.records, d.target_size, d.crop_top_fraction, d.channels,
        augment=d.augment_train, root=d.root,
    )
    test_pools = D.pools_from_records(
        test_manifest.records, d.target_size, d.crop_top_fraction, d.channels,
        augment=False, root=d.root,
    )
    return train_pools, test_pools, train_manifest.way


def _check_ways(config: RunConfig, way: int) -> None:
    if config.train.ways != way:
        raise ConfigError(
            f"config ways={config.train.ways} but the dataset provides {way} classes; "
            f"set train.ways={way}"
        )


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(config: RunConfig) -> None:
    d = config.data
    if not d.manifest:
        raise ConfigError("prepare needs data.manifest")
    manifest = D.load_manifest(d.manifest)
    records = D.filter_convex(manifest.records)
    if d.luss_filter:
        name_to_id = {n: i for i, n in enumerate(manifest.class_names)}
        if d.normal_class not in name_to_id or d.positive_class not in name_to_id:
            raise DataError(
                f"luss filter needs classes {d.normal_class!r} and {d.positive_class!r} "
                f"in {manifest.class_names}"
            )
        records, luss_report = D.filter_luss(
            records, set(d.luss_normal_scores), set(d.luss_covid_scores),
            name_to_id[d.normal_class], name_to_id[d.positive_class],
        )
        print(f"luss filter: kept {luss_report.kept}, removed {luss_report.removed} "
              f"({luss_report.missing_luss} without a score)")
    manifest = D.Manifest(records=records, class_names=manifest.class_names)
    manifest = D.remap_scenario(
        manifest, config.train.ways, d.positive_class, d.excluded_class, d.negative_name
    )
    if len(manifest.class_names) != config.train.ways:
        raise DataError(
            f"scenario needs {config.train.ways} populated classes, got "
            f"{manifest.class_names} after filtering"
        )
    split = D.split_by_video(manifest.records, d.train_fraction, config.seed)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_manifest(out / "train_manifest.csv", split.train)
    D.write_manifest(out / "test_manifest.csv", split.test)
    write_effective_config(config, out)
    for side, rows in (("train", split.train), ("test", split.test)):
        per_class = {}
        for r in rows:
            per_class.setdefault(r.class_name, set()).add(r.video_id)
        counts = ", ".join(
            f"{name}: {sum(1 for r in rows if r.class_name == name)} frames / "
            f"{len(videos)} videos"
            for name, videos in sorted(per_class.items())
        )
        print(f"{side}: {len(rows)} frames | {counts}")


def cmd_train(config: RunConfig) -> None:
    streams = _seed_streams(config.seed)
    train_pools, _, way = build_pools(config, streams)
    _check_ways(config, way)
    encoder_cfg = resolve_encoder(config)
    model = FewShotModel.create(
        encoder_cfg, seed=_seed_int(streams["init"]), distance=config.distance,
        name=config.label(),
    )
    sampler = D.EpisodeSampler(
        train_pools, way, config.train.shots, config.train.query, streams["train_sampler"]
    )
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"training {config.label()} on {config.data.source}: "
          f"{way}-way {config.train.shots}-shot, epochs={config.train.epochs}, "
          f"episodes/epoch={config.train.episodes_per_epoch}, lr0={config.train.lr0}")
    model, history = fit(model, sampler, config.train, checkpoint_path=out / "model.ckpt")
    (out / "history.tsv").write_text(history.to_tsv(), encoding="utf-8")
    plot_training_history(history, out / "history.png")
    write_effective_config(config, out)
    for e in history.epochs:
        print(f"epoch {e.epoch}: loss={e.mean_loss:.4f} lr={e.lr:.2g} ({e.seconds:.1f}s)")
    print(f"stop: {history.stop_reason}; best epoch {history.best_epoch} "
          f"loss {history.best_loss:.4f}; checkpoint {out / 'model.ckpt'}")


def _load_model(config: RunConfig, args, raw: dict) -> FewShotModel:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(config.out) / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = FewShotModel.load(ckpt, distance=config.distance, name=config.label())
    resolved = resolve_encoder(config)
    checked = ["archetype", "input_channels", "input_size"]
    if model.config.archetype == "frozen-embed":
        checked.append("frozen_dim")
    checked += [k for k in raw.get("encoder", {}) if k not in checked]
    for fd in checked:
        want = getattr(resolved, fd)
        got = getattr(model.config, fd)
        if want != got:
            raise ConfigError(f"checkpoint/config mismatch on encoder.{fd}: "
                              f"checkpoint has {got!r}, config resolves to {want!r}")
    return model


def cmd_eval(config: RunConfig, args, raw: dict) -> None:
    streams = _seed_streams(config.seed)
    model = _load_model(config, args, raw)
    _, test_pools, way = build_pools(config, streams)
    _check_ways(config, way)
    shots = list(config.eval.shots) or [config.train.shots]
    seeds = streams["eval_sampler"].spawn(len(shots))
    reports = []
    for shot, seq in zip(shots, seeds):
        sampler = D.EpisodeSampler(test_pools, way, shot, shot, seq)
        reports.append(evaluate(model, sampler, config.eval.episodes))
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    text = format_report(reports)
    (out / "report.txt").write_text(text, encoding="utf-8")
    write_report_records(out / "report.tsv", reports)
    if len(reports) > 1:
        plot_shot_sweep(reports, out / "shots_accuracy.png")
    write_effective_config(config, out)
    print(text, end="")


def cmd_explain(config: RunConfig, args, raw: dict) -> None:
    streams = _seed_streams(config.seed)
    model = _load_model(config, args, raw)
    if model.config.archetype != "conv-net":
        raise ConfigError(
            "explain needs a conv-net checkpoint; frozen-embed encoders have no "
            "convolutional activation maps (re-train with encoder.archetype=conv-net)"
        )
    _, test_pools, way = build_pools(config, streams)
    _check_ways(config, way)
    sampler = D.EpisodeSampler(
        test_pools, way, config.train.shots, config.train.query, streams["explain_sampler"]
    )
    episode_protos = []
    outcomes: list[QueryOutcome] = []
    for e in range(config.explain.episodes):
        episode = sampler.sample()
        support = model.embed(episode.support_x)
        protos = compute_prototypes(support, episode.support_y, episode.way)
        scores = classify_batch(model.embed(episode.query_x), protos, model.distance)
        episode_protos.append(protos)
        for i, true in enumerate(episode.query_y):
            outcomes.append(QueryOutcome(
                episode=e, true=int(true), predicted=int(scores.predicted[i]),
                prob_true=float(scores.probabilities[i, true]),
                probabilities=scores.probabilities[i].copy(),
                sample=episode.query_x[i],
            ))
    selected = select_high_confidence(outcomes, config.explain.threshold)
    selected = selected[: config.explain.max_images]
    out = Path(config.out)
    saliency_dir = out / "saliency"
    saliency_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, out)
    if not selected:
        print(f"no queries selected at threshold {config.explain.threshold}; nothing to explain")
        return
    panel = []
    rows = ["index\ttag\ttrue\tpredicted\tprob_true"]
    for i, s in enumerate(selected):
        o = s.outcome
        target = o.true if s.tag == "high-confidence" else o.predicted
        saliency = gradcam(model, o.sample, target, episode_protos[o.episode])
        rgb = overlay(o.sample, saliency, config.explain.alpha)
        stem = f"saliency_{i:03d}_{s.tag}"
        save_saliency_grid(saliency_dir / f"{stem}.tsv", saliency)
        Image.fromarray(rgb).save(saliency_dir / f"{stem}.png")
        panel.append((f"{s.tag} true={o.true} pred={o.predicted} p={o.prob_true:.3f}", rgb))
        rows.append(f"{i}\t{s.tag}\t{o.true}\t{o.predicted}\t{o.prob_true:.6f}")
    (saliency_dir / "selection.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    plot_saliency_panel(panel, saliency_dir / "panel.png")
    print(f"wrote {len(selected)} saliency maps to {saliency_dir}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config, raw = _load_config(args)
        if args.command == "prepare":
            cmd_prepare(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "eval":
            cmd_eval(config, args, raw)
        else:
            cmd_explain(config, args, raw)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ShapeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
