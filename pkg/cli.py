"""
Command-line entry point for behavior localization.

Commands:
    synth   Generate a seeded synthetic corpus (optionally split train/test by subject)
    train   Train one model per behavior class and write checkpoint + log
    infer   Decode and suppress segments for every video of a corpus
    eval    Frame-level metrics and AP table against ground truth

Every command echoes its resolved configuration into its output directory and
returns a result dict; main() exits 0 on success and 1 otherwise.

Usage:
    python cli.py synth --out runs/corpus --videos 50 --train-ratio 0.8 --seed 7
    python cli.py train --data runs/corpus/train --class smile --config configs/desk.json --out runs/smile
    python cli.py infer --ckpt runs/smile --data runs/corpus/test --out runs/smile/predictions.jsonl
    python cli.py eval --pred runs/smile/predictions.jsonl --gt runs/corpus/test --out runs/smile
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from checkpoint import load_checkpoint, save_checkpoint
from config import RunConfig, load_run_config, parse_override, write_resolved
from dataset import BEHAVIOR_CLASSES, corpus_summary, load_corpus, synth_generate, train_test_split, write_corpus
from evaluation import EvaluationConfig, evaluate_videos, write_report
from model import forward, init_params
from postprocess import PredictionRecord, decode, decode_runs, nms, read_predictions, write_predictions
from training import NonFiniteLossError, train

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.atal"
TRAIN_LOG_FILE = "train_log.jsonl"


def _run_root() -> Path:
    return Path(os.environ.get("TAL_RUN_ROOT", "runs"))


def _result(command: str) -> dict[str, Any]:
    return {"command": command, "status": "unknown", "message": "", "outputs": []}


def _fail(result: dict[str, Any], message: str) -> dict[str, Any]:
    result["status"] = "error"
    result["message"] = message
    logger.error(message)
    return result


def _check_behaviors(behavior: str) -> list[str]:
    if behavior == "all":
        return list(BEHAVIOR_CLASSES)
    if behavior not in BEHAVIOR_CLASSES:
        raise ValueError(f"Unknown class {behavior!r}; valid classes: {', '.join(BEHAVIOR_CLASSES)}, all")
    return [behavior]


# ==========================================
# Commands
# ==========================================

def cmd_synth(
    out: str | Path,
    config_path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    train_ratio: float | None = None,
) -> dict[str, Any]:
    """Generate a corpus; with train_ratio, write train/ and test/ sub-corpora split by subject."""
    result = _result("synth")
    out = Path(out)
    try:
        run = load_run_config(config_path, overrides)
        synth = replace(run.synth, seed=run.component_seed("synth"))
        videos = synth_generate(synth)

        if train_ratio is None:
            write_corpus(out, videos)
            result["outputs"].append(str(out))
        else:
            train_side, test_side = train_test_split(videos, train_ratio, run.component_seed("split"))
            write_corpus(out / "train", train_side)
            write_corpus(out / "test", test_side)
            result["outputs"] += [str(out / "train"), str(out / "test")]
        result["outputs"].append(str(write_resolved(out, "synth_config.json", run)))

        summary = corpus_summary(videos)
        result["summary"] = summary
        print(f"videos: {summary['videos']}  subjects: {summary['subjects']}")
        for behavior in sorted(summary["segments"]):
            print(
                f"  {behavior:<12} segments {summary['segments'][behavior]:>4}  "
                f"positive rate {summary['positive_rate'][behavior]:.3f}"
            )
    except OSError as e:
        return _fail(result, f"Cannot write corpus to {out}: {e}")
    except ValueError as e:
        return _fail(result, str(e))

    result["status"] = "success"
    result["message"] = f"Wrote {len(videos)} videos to {out}"
    logger.info(result["message"])
    return result


def cmd_train(
    data: str | Path,
    behavior: str,
    out: str | Path,
    config_path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    baseline: bool = False,
) -> dict[str, Any]:
    """Train on a corpus; behavior 'all' trains each class into out/<class>/."""
    result = _result("train")
    out = Path(out)
    try:
        behaviors = _check_behaviors(behavior)
        run = load_run_config(config_path, overrides)
        if baseline:
            run = run.model_copy(update={"model": replace(run.model, use_regression_head=False)})
        videos = load_corpus(data)
        if not videos:
            raise ValueError(f"Corpus {data} holds no videos")
        dims = {v.features.feature_dim for v in videos}
        if dims != {run.model.feature_dim}:
            raise ValueError(
                f"Corpus feature_dim {sorted(dims)} does not match model feature_dim {run.model.feature_dim}"
            )

        model_config = replace(run.model, seed=run.component_seed("model"))
        train_config = replace(run.train, seed=run.component_seed("train"))
        result["final_loss"] = {}
        for name in behaviors:
            target = out / name if behavior == "all" else out
            params = init_params(model_config)
            trained = train(videos, name, model_config, train_config, params, run.component_seed("dropout"))

            log_path = target / TRAIN_LOG_FILE
            target.mkdir(parents=True, exist_ok=True)
            tmp_log = log_path.with_name(log_path.name + ".tmp")
            tmp_log.write_text("".join(entry.model_dump_json() + "\n" for entry in trained.history), encoding="utf-8")
            os.replace(tmp_log, log_path)

            meta = {"behavior": name, "epochs": train_config.epochs, "videos": len(videos)}
            save_checkpoint(target / CHECKPOINT_FILE, trained.params, model_config, meta)
            config_file = write_resolved(target, "train_config.json", run)
            result["outputs"] += [str(target / CHECKPOINT_FILE), str(log_path), str(config_file)]
            result["final_loss"][name] = trained.history[-1].total_loss
    except NonFiniteLossError as e:
        return _fail(result, f"Training diverged: {e} (videos: {', '.join(e.video_ids)})")
    except (OSError, ValueError) as e:
        return _fail(result, str(e))

    result["status"] = "success"
    result["message"] = f"Trained {', '.join(behaviors)} on {len(videos)} videos"
    logger.info(result["message"])
    return result


def _find_checkpoints(ckpt: Path) -> list[Path]:
    if ckpt.is_file():
        return [ckpt]
    if (ckpt / CHECKPOINT_FILE).is_file():
        return [ckpt / CHECKPOINT_FILE]
    found = sorted(ckpt.glob(f"*/{CHECKPOINT_FILE}"))
    if not found:
        raise ValueError(f"No {CHECKPOINT_FILE} found at {ckpt}")
    return found


def cmd_infer(
    ckpt: str | Path,
    data: str | Path,
    out: str | Path,
    config_path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """
    Predict segments for every corpus video with each checkpoint found at ckpt.

    The behavior class of each model comes from its checkpoint metadata.
    """
    result = _result("infer")
    out = Path(out)
    try:
        run = load_run_config(config_path, overrides)
        post = run.postprocess
        videos = load_corpus(data)

        records: list[PredictionRecord] = []
        classes = []
        for path in _find_checkpoints(Path(ckpt)):
            params, model_config, meta = load_checkpoint(path)
            behavior = meta.get("behavior")
            if behavior not in BEHAVIOR_CLASSES:
                raise ValueError(f"{path}: checkpoint metadata names no known behavior class ({behavior!r})")
            classes.append(behavior)
            for video in videos:
                if video.features.feature_dim != model_config.feature_dim:
                    raise ValueError(
                        f"Video {video.video_id} has feature_dim {video.features.feature_dim}, "
                        f"checkpoint {path} expects feature_dim {model_config.feature_dim}"
                    )
                predictions = forward(video.features, params, model_config, mode="infer")
                grid = video.features.time_grid
                if model_config.use_regression_head:
                    candidates = decode(predictions, grid, post.threshold, video.features.duration_s, behavior)
                else:
                    candidates = decode_runs(predictions, grid, post.threshold, video.features.step_seconds, behavior)
                kept = nms(candidates, post.overlap_threshold, post.nms_mode, post.score_floor, post.sigma)
                records.extend(
                    PredictionRecord(
                        video_id=video.video_id,
                        behavior=behavior,
                        start_s=segment.start_s,
                        end_s=segment.end_s,
                        score=segment.score,
                    )
                    for segment in kept
                )
                logger.debug(f"{behavior} {video.video_id}: {len(candidates)} candidates, {len(kept)} kept")

        write_predictions(out, classes, records)
        config_file = write_resolved(out.parent, "infer_config.json", run)
        result["outputs"] += [str(out), str(config_file)]
        result["segments"] = len(records)
    except (OSError, ValueError) as e:
        return _fail(result, str(e))

    result["status"] = "success"
    result["message"] = f"Wrote {len(records)} segments for {len(videos)} videos to {out}"
    logger.info(result["message"])
    return result


def cmd_eval(
    pred: str | Path,
    gt: str | Path,
    out: str | Path,
    tiou: list[float] | None = None,
    config_path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Score a predictions file against a corpus; writes report.json and report.txt under out."""
    result = _result("eval")
    out = Path(out)
    try:
        run = load_run_config(config_path, overrides)
        evaluation = EvaluationConfig(tiou) if tiou else run.evaluation
        run = run.model_copy(update={"evaluation": evaluation})
        header, records = read_predictions(pred)
        videos = load_corpus(gt)

        report = evaluate_videos(records, videos, header.classes, evaluation)
        json_path, text_path = write_report(out, report)
        config_file = write_resolved(out, "eval_config.json", run)
        result["outputs"] += [str(json_path), str(text_path), str(config_file)]
        result["report"] = report.model_dump()
        print(report.render_text())
    except (OSError, ValueError) as e:
        return _fail(result, str(e))

    result["status"] = "success"
    result["message"] = f"Evaluated {len(records)} segments over {len(videos)} videos"
    logger.info(result["message"])
    return result


# ==========================================
# Argument parsing
# ==========================================

TRAINING_RECIPE = "training recipe"
INFERENCE_RECIPE = "inference recipe"
EVALUATION_PROTOCOL = "evaluation protocol"
GENERATOR = "generator"
BASELINE_VARIANT = "baseline variant"
RUN_PLUMBING = "run plumbing"
PROVENANCE = (TRAINING_RECIPE, INFERENCE_RECIPE, EVALUATION_PROTOCOL, GENERATOR, BASELINE_VARIANT, RUN_PLUMBING)


def _help(text: str, source: str, default: Any = None) -> str:
    """Help string ending in "(default X; source)", or "(source)" for flags without a default."""
    if default is None:
        return f"{text} ({source})"
    return f"{text} (default {default}; {source})"


def _thresholds(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=str, default=None, help=_help("JSON config file, overrides built-in defaults", RUN_PLUMBING))
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
        help=_help("override any config field, applied after --config", RUN_PLUMBING),
    )
    parser.add_argument("--seed", type=int, default=None, help=_help("run seed; component seeds derive from it", RUN_PLUMBING, 0))


def build_parser() -> argparse.ArgumentParser:
    """Parser for all commands; every flag's help names its default and where that default comes from."""
    defaults = RunConfig()
    parser = argparse.ArgumentParser(
        description="Anchor-free temporal localization of behaviors in untrimmed feature sequences",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic corpus")
    synth.add_argument("--out", type=str, default=str(_run_root() / "corpus"), help=_help("corpus directory", RUN_PLUMBING, "%(default)s"))
    synth.add_argument("--videos", type=int, default=None, help=_help("number of videos", GENERATOR, defaults.synth.num_videos))
    synth.add_argument("--steps", type=int, default=None, help=_help("timesteps per video", GENERATOR, defaults.synth.steps_per_video))
    synth.add_argument("--dim", type=int, default=None, help=_help("feature dimension", GENERATOR, defaults.synth.feature_dim))
    synth.add_argument("--snr", type=float, default=None, help=_help("signature amplitude", GENERATOR, defaults.synth.snr))
    synth.add_argument("--train-ratio", type=float, default=None, help=_help("write train/ and test/ split by subject; unset writes one corpus", RUN_PLUMBING))
    _add_config_flags(synth)

    trainer = commands.add_parser("train", help="train one model per behavior")
    trainer.add_argument("--data", type=str, required=True, help=_help("corpus directory, required", RUN_PLUMBING))
    trainer.add_argument("--class", dest="behavior", type=str, required=True, help=_help(f"one of {', '.join(BEHAVIOR_CLASSES)}, all; required", RUN_PLUMBING))
    trainer.add_argument("--out", type=str, default=str(_run_root() / "train"), help=_help("run directory", RUN_PLUMBING, "%(default)s"))
    trainer.add_argument("--epochs", type=int, default=None, help=_help("epochs", TRAINING_RECIPE, defaults.train.epochs))
    trainer.add_argument("--batch-size", type=int, default=None, help=_help("videos per batch", TRAINING_RECIPE, defaults.train.batch_size))
    trainer.add_argument("--lr", type=float, default=None, help=_help("SGD learning rate", TRAINING_RECIPE, defaults.train.learning_rate))
    trainer.add_argument("--baseline", action="store_true", help=_help("classification-only model without the regression head", BASELINE_VARIANT, "off"))
    _add_config_flags(trainer)

    infer = commands.add_parser("infer", help="predict segments")
    infer.add_argument("--ckpt", type=str, required=True, help=_help("checkpoint file or run directory, required", RUN_PLUMBING))
    infer.add_argument("--data", type=str, required=True, help=_help("corpus directory, required", RUN_PLUMBING))
    infer.add_argument("--out", type=str, default=str(_run_root() / "predictions.jsonl"), help=_help("predictions file", RUN_PLUMBING, "%(default)s"))
    infer.add_argument("--threshold", type=float, default=None, help=_help("decision threshold on p_event", INFERENCE_RECIPE, defaults.postprocess.threshold))
    infer.add_argument(
        "--nms", type=str, default=None, choices=["hard", "soft-linear", "soft-gaussian"],
        help=_help("suppression mode", INFERENCE_RECIPE, defaults.postprocess.nms_mode),
    )
    infer.add_argument("--overlap", type=float, default=None, help=_help("NMS t-IoU threshold", INFERENCE_RECIPE, defaults.postprocess.overlap_threshold))
    _add_config_flags(infer)

    evaluate = commands.add_parser("eval", help="score predictions")
    evaluate.add_argument("--pred", type=str, required=True, help=_help("predictions file, required", RUN_PLUMBING))
    evaluate.add_argument("--gt", type=str, required=True, help=_help("ground-truth corpus directory, required", RUN_PLUMBING))
    evaluate.add_argument("--out", type=str, default=str(_run_root() / "eval"), help=_help("report directory", RUN_PLUMBING, "%(default)s"))
    evaluate.add_argument(
        "--tiou", type=_thresholds, default=None,
        help=_help("t-IoU thresholds", EVALUATION_PROTOCOL, ",".join(f"{t:g}" for t in defaults.evaluation.tiou_thresholds)),
    )
    _add_config_flags(evaluate)
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Map dedicated flags onto config fields; --set strings are applied last."""
    mapping = {
        "seed": "seed",
        "videos": "synth.num_videos",
        "steps": "synth.steps_per_video",
        "dim": "synth.feature_dim",
        "snr": "synth.snr",
        "epochs": "train.epochs",
        "batch_size": "train.batch_size",
        "lr": "train.learning_rate",
        "threshold": "postprocess.threshold",
        "nms": "postprocess.nms_mode",
        "overlap": "postprocess.overlap_threshold",
    }
    overrides = {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag, None) is not None}
    for item in args.overrides:
        key, value = parse_override(item)
        overrides[key] = value
    return overrides


def run_command(argv: list[str] | None = None) -> dict[str, Any]:
    args = build_parser().parse_args(argv)
    try:
        overrides = _flag_overrides(args)
    except ValueError as e:
        return _fail(_result(args.command), str(e))

    if args.command == "synth":
        return cmd_synth(args.out, args.config, overrides, args.train_ratio)
    if args.command == "train":
        return cmd_train(args.data, args.behavior, args.out, args.config, overrides, args.baseline)
    if args.command == "infer":
        return cmd_infer(args.ckpt, args.data, args.out, args.config, overrides)
    return cmd_eval(args.pred, args.gt, args.out, args.tiou, args.config, overrides)


def main(argv: list[str] | None = None):
    """Main entry point: configure logging, run one command, exit 0 on success."""
    load_dotenv()
    logging.basicConfig(
        level=os.environ.get("TAL_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s - %(levelname)s - %(message)s",
        stream=sys.stdout,
    )
    try:
        result = run_command(argv)
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        sys.exit(1)

    if result["status"] == "success":
        sys.exit(0)
    print(f"error: {result['message']}", file=sys.stderr)
    sys.exit(1)


if __name__ == "__main__":
    main()
