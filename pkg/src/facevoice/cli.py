"""Command-line surface for the face-voice verification pipeline.

Subcommands cover the pipeline piecewise (gen-synthetic, augment, train,
embed, score, eer, polarize) and whole (run, sweep, report). Exit codes:
0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as fdata
from . import model as fmodel
from . import pipeline as fpipe
from . import scoring as fscoring
from .pipeline import ConfigError, RunConfig

log = logging.getLogger("facevoice")


def _load_config(args, required: bool = True) -> RunConfig | None:
    if args.config is None:
        if required:
            raise ConfigError("--config is required for this command")
        config = RunConfig()
    else:
        config = RunConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
        if config.synthetic is not None:
            config.synthetic.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    return config


def _cmd_gen_synthetic(args) -> int:
    config = _load_config(args, required=False)
    if config.synthetic is None:
        raise ConfigError("config has no synthetic section")
    if args.out is None and args.config is None:
        raise ConfigError("--out is required")
    out = Path(args.out or config.out_dir)
    result = fdata.gen_synthetic(config.synthetic, out)
    print(f"features:   {result.features_path}")
    print(f"attributes: {result.attributes_path}")
    print(f"truth:      {result.truth_path}")
    s = result.summary
    print(f"identities: {len(result.train_identities)} train / {len(result.test_identities)} test")
    print(f"samples:    {s.n_face} face + {s.n_voice} voice, dims {s.face_dim}/{s.voice_dim}")
    return 0


def _cmd_augment(args) -> int:
    records, _ = fdata.load_features(args.features)
    pairs = fdata.augment_pairs(records, args.multiplier, args.seed if args.seed is not None else 0)
    trials = [fdata.Trial(f"p{i:06d}", p.face_id, p.voice_id, 1) for i, p in enumerate(pairs)]
    out = Path(args.out or "pairs.csv")
    fdata.write_trials(trials, out)
    n_aug = sum(1 for p in pairs if p.origin == "augmented")
    print(f"{out}: {len(pairs)} pairs ({len(pairs) - n_aug} original, {n_aug} augmented)")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = fpipe.prepare_data(config, out)
    result = fpipe.train_model(config, bundle, out)
    print(f"stage1 checkpoint: {result.stage1_checkpoint}")
    if result.stage2_checkpoint:
        print(f"stage2 checkpoint: {result.stage2_checkpoint}")
    for stage_name, curve in result.curves.items():
        print(f"{stage_name}: {len(curve)} epochs, final loss {curve[-1]:.4f}")
    return 0


def _cmd_embed(args) -> int:
    model = fmodel.load_checkpoint(args.checkpoint)
    records, _ = fdata.load_features(args.features)
    index = fdata.records_by_id(records)
    trials = fdata.load_trials(args.trials)
    embeddings = fpipe.embed_trial_file(model, trials, index)
    out = Path(args.out or "embeddings.jsonl")
    fpipe.write_embeddings(embeddings, out)
    print(f"{out}: {len(embeddings)} trial embeddings")
    return 0


def _cmd_score(args) -> int:
    trials = fdata.load_trials(args.trials)
    embeddings = fpipe.load_embeddings(args.embeddings)
    scored, missing = fscoring.trial_scores(trials, embeddings)
    out = Path(args.out or "scores.csv")
    fscoring.write_scores(scored, out)
    print(f"{out}: {len(scored)} trials scored")
    if missing:
        print(f"rejected (no embeddings): {len(missing)}", file=sys.stderr)
        for trial_id in missing[:10]:
            print(f"  {trial_id}", file=sys.stderr)
    return 0


def _cmd_eer(args) -> int:
    trials = fdata.load_trials(args.trials)
    rows = fscoring.load_scores(args.scores)
    missing = [t.trial_id for t in trials if t.trial_id not in rows]
    if missing:
        raise ValueError(f"score file lacks trials: {missing[:5]}")
    labeled = [t for t in trials if t.label in (0, 1)]
    key = "adjusted_score" if args.adjusted else "score"
    scores = [rows[t.trial_id].get(key) for t in labeled]
    if any(s is None for s in scores):
        raise ValueError(f"score file has no {key} column for every labeled trial")
    result = fscoring.compute_eer(scores, [t.label for t in labeled])
    print(f"EER: {result.eer:.6f} at threshold {result.threshold:.6f} ({len(labeled)} trials)")
    if args.det:
        fscoring.write_det(result.points, args.det)
        print(f"DET: {args.det}")
    return 0


def _cmd_polarize(args) -> int:
    config = _load_config(args, required=False)
    summary = fscoring.polarize_file(args.scores, args.trials, args.attributes,
                                     config.confidence, args.out or "scores_adjusted.csv",
                                     args.audit or "audit.jsonl")
    print(f"{summary['out_path']}: {summary['n_trials']} trials adjusted, "
          f"{summary['n_flagged']} flagged (missing attributes)")
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args)
    manifest = fpipe.run_experiment(config)
    raw = manifest["metrics"]["eer_raw"]
    print(f"run complete: {config.out_dir}")
    print(f"EER raw: {raw['overall']:.6f}")
    adjusted = manifest["metrics"]["eer_adjusted"]
    if adjusted:
        print(f"EER adjusted: {adjusted['overall']:.6f}")
    for lang, eer in sorted(raw["by_language"].items()):
        print(f"  raw {lang}: {eer:.6f}")
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    result = fpipe.ablation_sweep(args.preset, config, args.out or config.out_dir)
    print(f"sweep table: {result['table']}")
    print(f"sweep figure: {result['figure']}")
    for row in result["rows"]:
        cells = "  ".join(f"{k.removeprefix('eer_')}={v:.4f}" for k, v in row.items()
                          if k.startswith("eer_"))
        print(f"{row['config']:>10} train={row['train_language']}: {cells}  avg={row['avg']:.4f}")
    return 0


def _cmd_report(args) -> int:
    text = fpipe.report(args.paths, out_dir=args.out)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory or file")

    parser = argparse.ArgumentParser(
        prog="facevoice",
        description="Face-voice cross-modal verification on precomputed embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-synthetic", parents=[common],
                   help="generate a synthetic feature corpus").set_defaults(fn=_cmd_gen_synthetic)

    p = sub.add_parser("augment", parents=[common], help="build original + augmented training pairs")
    p.add_argument("--features", required=True)
    p.add_argument("--multiplier", type=int, default=4)
    p.set_defaults(fn=_cmd_augment)

    sub.add_parser("train", parents=[common],
                   help="two-stage training, checkpoints only").set_defaults(fn=_cmd_train)

    p = sub.add_parser("embed", parents=[common], help="embed the trials of a trial file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--trials", required=True)
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("score", parents=[common], help="Euclidean scores from trial embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("eer", parents=[common], help="equal error rate of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--adjusted", action="store_true", help="use the adjusted_score column")
    p.add_argument("--det", help="write the DET curve CSV here")
    p.set_defaults(fn=_cmd_eer)

    p = sub.add_parser("polarize", parents=[common], help="confidence-adjust a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--audit", help="audit log path (JSON lines)")
    p.set_defaults(fn=_cmd_polarize)

    sub.add_parser("run", parents=[common],
                   help="full pipeline: data, train, score, polarize, evaluate").set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="ablation grid over both language cohorts")
    p.add_argument("--preset", required=True, choices=sorted(fpipe.SWEEP_PRESETS))
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="summarize run manifests")
    p.add_argument("paths", nargs="+", help="manifest files or run directories")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except fpipe.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
