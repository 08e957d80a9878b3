"""Command-line entry point: one executable, one subcommand per stage.

Subcommands: featurize, pseudolabel, train, infer, decode, tune, fuse,
score, pipeline, synth. Every stage is deterministic given its inputs and
the seed; reruns produce byte-identical artifacts. Structured log lines
record the effective config hash and artifact checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from sedpipe import corpus, ensemble, evaluation, features, model, pseudolabel, synth
from sedpipe.config import PipelineConfig, parse_model_config, render_model_config
from sedpipe.decode import ClassThresholds, decode_events
from sedpipe.tune import tune_thresholds

log = logging.getLogger("sedpipe")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _log_artifact(stage: str, path: Path) -> None:
    log.info("stage=%s artifact=%s sha256=%s", stage, path, _sha256(path))


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(getattr(args, "config", None), args.overrides)
    log.info("config_hash=%s seed=%d", cfg.hash(), cfg.seed)
    return cfg


# ---------------------------------------------------------------------------
# featurize

def _featurize_one(task: tuple[str, str, features.FeatureConfig]) -> str:
    wav_path, out_path, fcfg = task
    tensor = features.featurize_clip(wav_path, fcfg)
    with open(out_path, "wb") as fh:
        features.write_feature(tensor, fh)
    return out_path


def cmd_featurize(args) -> int:
    cfg = _load_config(args)
    audio_dir = Path(args.audio)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    wavs = sorted(audio_dir.glob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files under {audio_dir}")
    tasks = [
        (str(wav), str(out_dir / (wav.stem + ".sedf")), cfg.features) for wav in wavs
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_featurize_one, tasks))
    else:
        done = [_featurize_one(t) for t in tasks]
    for out_path in done:
        _log_artifact("featurize", Path(out_path))
    log.info("stage=featurize clips=%d out=%s", len(done), out_dir)
    return 0


def _load_features(features_dir: Path) -> list[features.FeatureTensor]:
    paths = sorted(Path(features_dir).glob("*.sedf"))
    if not paths:
        raise FileNotFoundError(f"no .sedf files under {features_dir}")
    tensors = []
    for path in paths:
        with open(path, "rb") as fh:
            tensors.append(features.read_feature(fh))
    return tensors


# ---------------------------------------------------------------------------
# pseudolabel

def cmd_pseudolabel(args) -> int:
    cfg = _load_config(args)
    vocab = cfg.vocab
    weak = corpus.parse_weak_labels(Path(args.weak).read_text(encoding="utf-8"), vocab)
    scores = corpus.parse_tag_scores(
        Path(args.scores).read_text(encoding="utf-8"), vocab
    )
    tiers = pseudolabel.TierThresholds(args.t1, args.t2, args.t3)
    combined, dist = pseudolabel.build_extended_dataset(weak, scores, tiers, vocab)
    out = Path(args.out)
    out.write_text(corpus.format_weak_labels(combined, vocab), encoding="utf-8")
    _log_artifact("pseudolabel", out)
    report = Path(args.report)
    name = f"wt-{args.t1:g}-{args.t2:g}-{args.t3:g}"
    report.write_text(
        pseudolabel.LabelDistribution.header() + "\n" + dist.as_row(name) + "\n",
        encoding="utf-8",
    )
    _log_artifact("pseudolabel", report)
    log.info(
        "stage=pseudolabel accepted=%d dropped=%d total=%d",
        dist.total - len(weak),
        len(scores) - (dist.total - len(weak)),
        dist.total,
    )
    return 0


# ---------------------------------------------------------------------------
# train

def _targets_for(
    tensors: list[features.FeatureTensor],
    weak: list[corpus.WeakLabel],
    n_classes: int,
) -> list[np.ndarray]:
    by_id = {lab.clip_id: lab for lab in weak}
    targets = []
    for tensor in tensors:
        lab = by_id.get(tensor.clip_id)
        if lab is None:
            raise KeyError(f"no weak label for clip {tensor.clip_id!r}")
        vec = np.zeros(n_classes)
        vec[sorted(lab.classes)] = 1.0
        targets.append(vec)
    return targets


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tensors = _load_features(Path(args.features))
    weak = corpus.parse_weak_labels(
        Path(args.weak).read_text(encoding="utf-8"), cfg.vocab
    )
    targets = _targets_for(tensors, weak, len(cfg.vocab))
    dataset = list(zip(tensors, targets))

    model_cfg = cfg.model
    if model_cfg.n_mels != tensors[0].n_bands:
        raise ValueError(
            f"feature files have {tensors[0].n_bands} bands but the model "
            f"config expects {model_cfg.n_mels}"
        )
    params, history = model.train(dataset, cfg.train, model_cfg)
    for row in history:
        log.info(
            "stage=train epoch=%d train_loss=%.6f val_loss=%s",
            row["epoch"],
            row["train_loss"],
            "none" if row["val_loss"] is None else f"{row['val_loss']:.6f}",
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(params)
    if model_cfg.input_norm is None:
        stats = model.input_norm_stats(tensors)
    else:
        stats = model_cfg.input_norm
    arrays["norm_mean"], arrays["norm_std"] = stats
    with open(out, "wb") as fh:
        model.save_checkpoint(arrays, fh)
    _log_artifact("train", out)
    cfg_path = out.with_suffix(out.suffix + ".cfg")
    cfg_path.write_text(render_model_config(model_cfg), encoding="utf-8")
    _log_artifact("train", cfg_path)
    return 0


def _load_model(checkpoint: Path) -> tuple[model.ModelParams, model.ModelConfig]:
    with open(checkpoint, "rb") as fh:
        arrays = model.load_checkpoint(fh)
    norm = (arrays.pop("norm_mean"), arrays.pop("norm_std"))
    cfg_path = checkpoint.with_suffix(checkpoint.suffix + ".cfg")
    mcfg = parse_model_config(cfg_path.read_text(encoding="utf-8"))
    mcfg.input_norm = norm
    return arrays, mcfg


# ---------------------------------------------------------------------------
# infer

def cmd_infer(args) -> int:
    _load_config(args)
    params, mcfg = _load_model(Path(args.checkpoint))
    tensors = _load_features(Path(args.features))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for tensor in tensors:
        grid = model.infer(params, mcfg, tensor)
        out_path = out_dir / (Path(tensor.clip_id).stem + ".sedp")
        with open(out_path, "wb") as fh:
            corpus.write_posterior(grid, fh)
        _log_artifact("infer", out_path)
    log.info("stage=infer clips=%d out=%s", len(tensors), out_dir)
    return 0


def _load_posteriors(post_dir: Path) -> list[corpus.PosteriorGrid]:
    paths = sorted(Path(post_dir).glob("*.sedp"))
    if not paths:
        raise FileNotFoundError(f"no .sedp files under {post_dir}")
    grids = []
    for path in paths:
        with open(path, "rb") as fh:
            grids.append(corpus.read_posterior(fh))
    return grids


# ---------------------------------------------------------------------------
# decode / tune

def _read_thresholds(path: Path, vocab: corpus.Vocabulary) -> ClassThresholds:
    theta = [0.5] * len(vocab)
    seen = set()
    for lineno, line in enumerate(
        path.read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise corpus.CorpusFormatError(
                f"line {lineno}: expected class<TAB>theta"
            )
        name, value = parts[0].strip(), parts[1].strip()
        if lineno == 1 and name.lower() == "class":
            continue
        if name not in vocab:
            raise corpus.CorpusFormatError(f"line {lineno}: unknown class {name!r}")
        theta[vocab.index(name)] = float(value)
        seen.add(name)
    missing = [c for c in vocab.classes if c not in seen]
    if missing:
        log.warning("thresholds missing for %s; defaulting to 0.5", missing)
    return ClassThresholds(tuple(theta))


def _write_thresholds(
    theta: ClassThresholds, vocab: corpus.Vocabulary, path: Path
) -> None:
    lines = ["class\ttheta"]
    lines.extend(
        f"{name}\t{value:g}" for name, value in zip(vocab.classes, theta.theta)
    )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_decode(args) -> int:
    cfg = _load_config(args)
    grids = _load_posteriors(Path(args.posteriors))
    theta = _read_thresholds(Path(args.thresholds), cfg.vocab)
    events = []
    for grid in grids:
        events.extend(decode_events(grid, theta, cfg.decode))
    events.sort(key=lambda ev: (ev.clip_id, ev.onset, ev.klass))
    out = Path(args.out)
    out.write_text(corpus.format_strong_labels(events, cfg.vocab), encoding="utf-8")
    _log_artifact("decode", out)
    log.info("stage=decode clips=%d events=%d", len(grids), len(events))
    return 0


def cmd_tune(args) -> int:
    cfg = _load_config(args)
    grids = _load_posteriors(Path(args.posteriors))
    refs = corpus.parse_strong_labels(
        Path(args.refs).read_text(encoding="utf-8"), cfg.vocab
    )
    theta = tune_thresholds(
        grids,
        refs,
        cfg.tune_grid,
        cfg.decode,
        cfg.collar,
        n_classes=len(cfg.vocab),
    )
    out = Path(args.out)
    _write_thresholds(theta, cfg.vocab, out)
    _log_artifact("tune", out)
    return 0


# ---------------------------------------------------------------------------
# fuse / score

def cmd_fuse(args) -> int:
    _load_config(args)
    dirs = [Path(d) for d in args.inputs.split(",") if d]
    if len(dirs) < 1:
        raise ValueError("at least one input directory required")
    if args.weights:
        weights = np.array([float(w) for w in args.weights.split(",")])
        if len(weights) != len(dirs):
            raise ValueError("one weight per input directory required")
    else:
        weights = np.ones(len(dirs))
    stacks = [_load_posteriors(d) for d in dirs]
    by_id = [{g.clip_id: g for g in stack} for stack in stacks]
    clip_ids = sorted(by_id[0])
    for d, mapping in zip(dirs[1:], by_id[1:]):
        if sorted(mapping) != clip_ids:
            raise ValueError(f"clip set under {d} differs from {dirs[0]}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for clip_id in clip_ids:
        fused = ensemble.fuse([mapping[clip_id] for mapping in by_id], weights)
        out_path = out_dir / (Path(clip_id).stem + ".sedp")
        with open(out_path, "wb") as fh:
            corpus.write_posterior(fused, fh)
        _log_artifact("fuse", out_path)
    log.info("stage=fuse systems=%d clips=%d", len(dirs), len(clip_ids))
    return 0


def cmd_score(args) -> int:
    cfg = _load_config(args)
    collar = evaluation.CollarSpec(
        onset_collar=args.onset_collar,
        offset_collar_abs=args.offset_collar,
        offset_collar_rel=args.offset_rel,
    )
    refs = corpus.parse_strong_labels(
        Path(args.refs).read_text(encoding="utf-8"), cfg.vocab
    )
    ests = corpus.parse_strong_labels(
        Path(args.ests).read_text(encoding="utf-8"), cfg.vocab
    )
    report = evaluation.evaluate_events(refs, ests, cfg.vocab, collar)
    text = report.render()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _log_artifact("score", Path(args.out))
    log.info("stage=score macro_f1=%.4f", report.macro_f1)
    return 0


# ---------------------------------------------------------------------------
# synth / pipeline

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    scfg = synth.SynthConfig(
        sr=args.sr,
        clip_duration=args.duration,
        n_clips=args.clips,
        seed=cfg.seed if args.seed is None else args.seed,
    )
    rng = np.random.default_rng(scfg.seed)
    clips = synth.generate_corpus(scfg, cfg.vocab, rng)
    scores = synth.synth_tag_scores(clips, cfg.vocab, rng) if args.scores else None
    paths = synth.write_corpus(clips, Path(args.out), cfg.vocab, scores)
    for path in sorted(paths.values()):
        if path.is_file():
            _log_artifact("synth", path)
    log.info("stage=synth clips=%d out=%s", len(clips), args.out)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    paths = cfg.paths
    for key in ("audio_dir", "weak_labels", "workdir"):
        if key not in paths:
            raise KeyError(f"pipeline config missing paths.{key}")
    workdir = Path(paths["workdir"])
    workdir.mkdir(parents=True, exist_ok=True)

    ns = argparse.Namespace(
        config=getattr(args, "config", None), overrides=args.overrides
    )

    feat_dir = workdir / "features"
    cmd_featurize(
        argparse.Namespace(
            audio=paths["audio_dir"], out=feat_dir, jobs=args.jobs, **vars(ns)
        )
    )

    weak_file = Path(paths["weak_labels"])
    if paths.get("tag_scores"):
        extended = workdir / "weak_extended.tsv"
        cmd_pseudolabel(
            argparse.Namespace(
                scores=paths["tag_scores"],
                weak=str(weak_file),
                t1=cfg.tiers.t1,
                t2=cfg.tiers.t2,
                t3=cfg.tiers.t3,
                out=extended,
                report=workdir / "label_distribution.tsv",
                **vars(ns),
            )
        )
        weak_file = extended

    ckpt = workdir / "model.ckpt"
    cmd_train(
        argparse.Namespace(
            features=feat_dir, weak=str(weak_file), out=ckpt, **vars(ns)
        )
    )

    post_dir = workdir / "posteriors"
    cmd_infer(
        argparse.Namespace(features=feat_dir, checkpoint=ckpt, out=post_dir, **vars(ns))
    )

    thresholds = workdir / "thresholds.tsv"
    if paths.get("strong_refs"):
        cmd_tune(
            argparse.Namespace(
                posteriors=post_dir,
                refs=paths["strong_refs"],
                out=thresholds,
                **vars(ns),
            )
        )
    else:
        _write_thresholds(
            ClassThresholds.uniform(0.5, len(cfg.vocab)), cfg.vocab, thresholds
        )

    events_file = workdir / "events.tsv"
    cmd_decode(
        argparse.Namespace(
            posteriors=post_dir,
            thresholds=thresholds,
            out=events_file,
            **vars(ns),
        )
    )

    if paths.get("strong_refs"):
        cmd_score(
            argparse.Namespace(
                refs=paths["strong_refs"],
                ests=str(events_file),
                onset_collar=cfg.collar.onset_collar,
                offset_collar=cfg.collar.offset_collar_abs,
                offset_rel=cfg.collar.offset_collar_rel,
                out=workdir / "report.tsv",
                **vars(ns),
            )
        )
    log.info("stage=pipeline workdir=%s done", workdir)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sedpipe",
        description="weakly supervised sound event detection pipeline",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("featurize", help="extract 3-channel log-mel features")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_config_args(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("pseudolabel", help="tiered weak labels from tagging scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--weak", required=True)
    p.add_argument("--t1", type=float, default=0.99)
    p.add_argument("--t2", type=float, default=0.47)
    p.add_argument("--t3", type=float, default=0.28)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("train", help="train the gated-attention CRNN")
    p.add_argument("--features", required=True)
    p.add_argument("--weak", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write posterior grids for feature files")
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decode", help="decode posteriors into timed events")
    p.add_argument("--posteriors", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("tune", help="per-class threshold search")
    p.add_argument("--posteriors", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("fuse", help="weighted-average posterior fusion")
    p.add_argument("--in", dest="inputs", required=True, help="DIR1,DIR2,...")
    p.add_argument("--weights", default="", help="w1,w2,... (default uniform)")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("score", help="collar-based event F1 report")
    p.add_argument("--refs", required=True)
    p.add_argument("--ests", required=True)
    p.add_argument("--onset-collar", type=float, default=0.200)
    p.add_argument("--offset-collar", type=float, default=0.200)
    p.add_argument("--offset-rel", type=float, default=0.20)
    p.add_argument("--out", default="")
    _add_config_args(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pipeline", help="run all stages per the config file")
    p.add_argument("--jobs", type=int, default=1)
    _add_config_args(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--sr", type=int, default=22050)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scores", action="store_true", help="also write mock tag scores")
    _add_config_args(p)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as exc:  # one-line cause, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        if getattr(args, "verbose", False):
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
