"""Command line: synth, train, predict, evaluate, export-images.

Every failure prints one line ``w4cnet: error: <Kind>: <message>`` on stderr
and exits nonzero (2 for usage errors, 1 otherwise).
"""

import argparse
import json
import logging
import os
import sys
from importlib import resources

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_weights
from .data import (
    STEP_SECONDS, VARIABLES, FrameArchive, build_inputs, extract_windows, load_archive, save_archive,
)
from .metrics import MetricSpec, evaluate_predictions
from .model import ModelConfig, build
from .synth import SynthConfig, generate
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("w4cnet")

PREFIX = "w4cnet: error:"


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"{PREFIX} UsageError: {message}", file=sys.stderr)
        sys.exit(2)


# ---------------------------------------------------------------------------
# config


def load_run_config(path=None):
    """(ModelConfig, TrainConfig) from a JSON file; defaults to the shipped ConvGRU config."""
    if path is None:
        text = resources.files("w4cnet.configs").joinpath("convgru.json").read_text()
    else:
        if not os.path.exists(path):
            raise CLIError(f"config file not found: {path}")
        with open(path) as f:
            text = f.read()
    raw = json.loads(text)
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise CLIError(f"unknown config sections: {sorted(unknown)}")
    return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))


def _require_file(path, what):
    if not os.path.isfile(path):
        raise CLIError(f"{what} not found: {path}")


def _model_from_checkpoint(ckpt):
    echo = json.loads(ckpt.config)
    cfg = ModelConfig.from_dict(echo["model"])
    model = build(cfg, seed=0)
    load_weights(model, ckpt.weights)
    return model, echo.get("train", {})


# ---------------------------------------------------------------------------
# commands


def cmd_synth(out_path, num_sequences=8, size=32, seed=0, **extra):
    cfg = SynthConfig(num_sequences=num_sequences, size=size, **extra)
    if cfg.size % 2:
        raise CLIError(f"synthetic frame size {cfg.size} must be even")
    archive = generate(cfg, seed=seed)
    save_archive(archive, out_path)
    return archive


def cmd_train(model_cfg, train_cfg, train_paths, val_paths, out_dir, resume=None):
    for p in list(train_paths) + list(val_paths):
        _require_file(p, "archive")
    if train_cfg.target not in VARIABLES:
        raise CLIError(f"unknown target variable {train_cfg.target!r}; expected one of {VARIABLES}")

    def windows(paths):
        out = []
        for p in paths:
            arc = load_archive(p, region=os.path.basename(p))
            cin = arc.frames.shape[1] + arc.static.shape[0]
            if cin != model_cfg.input_channels:
                raise CLIError(
                    f"{p}: archive provides {cin} input channels, model expects {model_cfg.input_channels}"
                )
            model_cfg.check_geometry(*arc.frames.shape[2:])
            out.extend(extract_windows(
                arc, model_cfg.input_frames + model_cfg.output_frames, train_cfg.target,
                model_cfg.input_frames,
            ))
        return out

    train_w, val_w = windows(train_paths), windows(val_paths)
    if not train_w or not val_w:
        raise CLIError(f"no gapless windows found (train {len(train_w)}, validation {len(val_w)})")
    model = build(model_cfg, seed=train_cfg.seed)
    log.info("model %s with %d weights; %d train / %d val windows",
             model_cfg.variant, model.parameter_count(), len(train_w), len(val_w))
    return train(model, train_w, val_w, train_cfg, out_dir=out_dir, resume=resume)


def cmd_predict(checkpoint_path, archive_path, window_start, out_dir):
    _require_file(checkpoint_path, "checkpoint")
    _require_file(archive_path, "archive")
    model, train_echo = _model_from_checkpoint(load_checkpoint(checkpoint_path))
    variable = train_echo.get("target", "temperature")
    cfg = model.config
    arc = load_archive(archive_path)
    n_in = cfg.input_frames
    if window_start < 0 or window_start + n_in > len(arc.timestamps):
        raise CLIError(f"window start {window_start} leaves fewer than {n_in} input frames")
    ts = arc.timestamps[window_start : window_start + n_in]
    if np.any(np.diff(ts) != STEP_SECONDS):
        raise CLIError(f"input frames at {window_start} are not contiguous at {STEP_SECONDS} s")
    inputs = build_inputs(arc, window_start, n_in)[None]
    with T.no_grad():
        pred = model(inputs).data[0]
    out_ts = ts[-1] + STEP_SECONDS * np.arange(1, cfg.output_frames + 1, dtype=np.int64)
    os.makedirs(out_dir, exist_ok=True)
    result = FrameArchive(
        frames=pred, valid_mask=np.ones(pred.shape, dtype=np.uint8), timestamps=out_ts,
        channel_names=[variable],
    )
    paths = [os.path.join(out_dir, "prediction.w4cf")]
    save_archive(result, paths[0])
    if variable == "cma":
        binary = FrameArchive(
            frames=(pred >= 0.5).astype(np.float32), valid_mask=result.valid_mask,
            timestamps=out_ts, channel_names=[variable],
        )
        paths.append(os.path.join(out_dir, "prediction_binary.w4cf"))
        save_archive(binary, paths[1])
    return paths


def cmd_evaluate(prediction_path, truth_path, variable, out_dir=None, epsilon=1e-3):
    _require_file(prediction_path, "prediction file")
    _require_file(truth_path, "truth archive")
    if variable not in VARIABLES:
        raise CLIError(f"unknown variable {variable!r}; expected one of {VARIABLES}")
    pred = load_archive(prediction_path)
    truth = load_archive(truth_path)
    if pred.frames.shape[2:] != truth.frames.shape[2:]:
        raise CLIError(
            f"geometry mismatch: prediction {pred.frames.shape[2:]} vs truth {truth.frames.shape[2:]}"
        )
    if pred.frames.shape[1] != 1:
        raise CLIError(f"prediction must have one channel, found {pred.frames.shape[1]}")
    idx = np.searchsorted(truth.timestamps, pred.timestamps)
    ok = (idx < len(truth.timestamps)) & (truth.timestamps[np.minimum(idx, len(truth.timestamps) - 1)] == pred.timestamps)
    if not ok.all():
        missing = pred.timestamps[~ok][0]
        raise CLIError(f"truth archive has no frame at prediction timestamp {missing}")
    ci = truth.channel_index(variable)
    spec = MetricSpec.for_variable(variable, epsilon)
    value = evaluate_predictions(
        spec, [pred.frames], [truth.frames[idx, ci : ci + 1]], [truth.valid_mask[idx, ci : ci + 1]]
    )
    row = f"{variable}\t{spec.kind}\t{value!r}\t{spec.epsilon!r}\t1"
    print(row)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.tsv"), "w") as f:
            f.write("variable\tmetric\tvalue\tepsilon\twindows\n" + row + "\n")
    return value


def to_gray(frame):
    """[0, 1] floats to 8-bit levels, rounding half up (0.5 -> 128)."""
    return np.clip(np.floor(np.asarray(frame, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, gray):
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(gray).tobytes())


def cmd_export_images(archive_path, out_dir):
    _require_file(archive_path, "archive")
    arc = load_archive(archive_path)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for c, name in enumerate(arc.channel_names):
        for t in range(arc.frames.shape[0]):
            frame = arc.frames[t, c]
            path = os.path.join(out_dir, f"{name}_{t:03d}.pgm")
            write_pgm(path, to_gray(frame))
            written.append(path)
            if name == "cma":
                path = os.path.join(out_dir, f"{name}_threshold_{t:03d}.pgm")
                write_pgm(path, np.where(frame >= 0.5, 255, 0).astype(np.uint8))
                written.append(path)
    return written


# ---------------------------------------------------------------------------
# entry point


def _parser():
    p = _Parser(prog="w4cnet", description="Encoder-forecaster nowcasting network.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic blob archive")
    s.add_argument("--out", required=True, help="output archive path")
    s.add_argument("--sequences", type=int, default=8)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--frames", type=int, default=36, help="frames per gapless sequence")
    s.add_argument("--blobs", type=int, default=2)
    s.add_argument("--velocity", type=float, nargs=2, default=(0.5, 0.75), metavar=("VY", "VX"))
    s.add_argument("--missing-fraction", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one model for one target variable")
    t.add_argument("--config")
    t.add_argument("--train", nargs="+", required=True, metavar="ARCHIVE")
    t.add_argument("--val", nargs="+", required=True, metavar="ARCHIVE")
    t.add_argument("--out", required=True)
    t.add_argument("--variable")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--budget-epochs", type=int)
    t.add_argument("--budget-hours", type=float)
    t.add_argument("--resume", metavar="CHECKPOINT")

    r = sub.add_parser("predict", help="predict the frames following one 4-frame input window")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--archive", required=True)
    r.add_argument("--window-start", type=int, required=True)
    r.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="score a prediction file against a truth archive")
    e.add_argument("--prediction", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--variable", required=True)
    e.add_argument("--epsilon", type=float, default=1e-3)
    e.add_argument("--out")

    x = sub.add_parser("export-images", help="write one grayscale PGM per frame")
    x.add_argument("archive")
    x.add_argument("--out", required=True)
    return p


def run(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    if args.command == "synth":
        cmd_synth(
            args.out, args.sequences, args.size, args.seed, frames_per_sequence=args.frames,
            blobs=args.blobs, velocity=tuple(args.velocity), missing_fraction=args.missing_fraction,
        )
    elif args.command == "train":
        model_cfg, train_cfg = load_run_config(args.config)
        overrides = {
            "target": args.variable, "seed": args.seed, "threads": args.threads,
            "budget_epochs": args.budget_epochs, "budget_hours": args.budget_hours,
        }
        for key, value in overrides.items():
            if value is not None:
                setattr(train_cfg, key, value)
        if args.resume:
            _require_file(args.resume, "checkpoint")
        result = cmd_train(model_cfg, train_cfg, args.train, args.val, args.out, resume=args.resume)
        best = result.best
        print(f"best\t{best.epoch}\t{best.metric!r}\t{result.stop_reason}")
    elif args.command == "predict":
        for path in cmd_predict(args.checkpoint, args.archive, args.window_start, args.out):
            print(path)
    elif args.command == "evaluate":
        cmd_evaluate(args.prediction, args.truth, args.variable, args.out, args.epsilon)
    elif args.command == "export-images":
        print(len(cmd_export_images(args.archive, args.out)))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except SystemExit:
        raise
    except TrainingDiverged as e:
        print(f"{PREFIX} TrainingDiverged: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # every failure becomes one parseable line
        message = str(e).replace("\n", " ")
        print(f"{PREFIX} {type(e).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
