"""Single entry-point CLI: synth | train | eval | gradcheck | flops.

Configuration comes from a flat key=value file (``#`` comments allowed);
the few global flags override file values. Every run echoes its effective
configuration, and every artifact written under a fixed seed is
byte-identical across repeat runs. Exit codes: 0 ok, 2 configuration,
3 I/O or format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DTYPE_U8,
    ManifestRow,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    write_clip,
    write_manifest,
)
from .errors import ConfigError, DataFormatError, NumericalError, ShapeError, VigilError
from .flops import flops_estimate
from .models import (
    PIPELINE_DISTRACTED,
    PIPELINE_DROWSY,
    ModelConfig,
    forward,
    init_params,
    named_parameters,
    parameter_count,
)
from .tensor import grad_check
from .training import (
    TrainConfig,
    accuracy,
    cross_entropy,
    evaluate,
    overfit_report,
    train,
    train_test_split,
    write_metrics_csv,
)
from .util import pmap

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

GRADCHECK_THRESHOLD = 1e-3

_AUTO = -1  # sentinel: resolved per pipeline


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_pipeline(text):
    if text not in (PIPELINE_DROWSY, PIPELINE_DISTRACTED):
        raise ValueError(f"pipeline must be drowsy or distracted, got {text!r}")
    return text


def _parse_optimizer(text):
    if text not in ("sgd", "adam"):
        raise ValueError(f"optimizer must be sgd or adam, got {text!r}")
    return text


# key -> (parser, default, help). Defaults of -1 resolve per pipeline.
CONFIG_KEYS = {
    "pipeline": (_parse_pipeline, PIPELINE_DROWSY, "drowsy | distracted"),
    "num_classes": (int, _AUTO, "class count (auto: 2 drowsy / 9 distracted)"),
    "seq_len": (int, 30, "frames per clip"),
    "height": (int, 64, "frame height in pixels"),
    "width": (int, 64, "frame width in pixels"),
    "d_model": (int, _AUTO, "embedding width (auto: 128 drowsy / 96 distracted)"),
    "heads": (int, 4, "attention heads"),
    "depth": (int, 2, "encoder blocks (drowsy) or blocks per stage (distracted)"),
    "stages": (int, _AUTO, "stage count for distracted (auto: 2; drowsy always 1)"),
    "window_t": (int, 3, "attention window temporal extent"),
    "window_h": (int, 4, "attention window height"),
    "window_w": (int, 4, "attention window width"),
    "mlp_ratio": (float, 2.0, "feed-forward hidden width / d_model"),
    "dropout_p": (float, 0.5, "classification-head dropout probability"),
    "rel_pos_bias": (_parse_bool, False, "learned relative position bias (experimental)"),
    "seed": (int, 0, "master seed for init / shuffles / synthesis"),
    "epochs": (int, _AUTO, "training epochs (auto: 10 drowsy / 50 distracted)"),
    "batch_size": (int, 8, "minibatch size"),
    "learning_rate": (float, 1e-3, "optimizer step size"),
    "optimizer": (_parse_optimizer, "adam", "sgd | adam"),
    "split_fraction": (float, 0.8, "train fraction for the seeded split"),
    "clips_per_class": (int, 8, "synthetic clips generated per class"),
    "noise_sigma": (float, 0.05, "synthetic pixel noise std-dev"),
    "gradcheck_samples": (int, 50, "coordinates sampled by gradcheck"),
    "threads": (int, 1, "worker cap for evaluation fan-out"),
    "data_dir": (str, "", "directory holding manifest.csv + clips"),
    "out_dir": (str, ".", "directory for artifacts"),
    "checkpoint": (str, "", "checkpoint path for eval"),
}


def parse_config_file(path):
    """Read key=value lines; unknown keys or bad values are config errors."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, text = line.partition("=")
        key, text = key.strip(), text.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        parser, _, _ = CONFIG_KEYS[key]
        try:
            values[key] = parser(text)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {e}") from None
    return values


class Settings:
    """Effective configuration: file values + flag overrides + auto defaults."""

    def __init__(self, values):
        merged = {key: default for key, (_, default, _) in CONFIG_KEYS.items()}
        merged.update(values)
        pipeline = merged["pipeline"]
        if merged["num_classes"] == _AUTO:
            merged["num_classes"] = 2 if pipeline == PIPELINE_DROWSY else 9
        if merged["d_model"] == _AUTO:
            merged["d_model"] = 128 if pipeline == PIPELINE_DROWSY else 96
        if merged["stages"] == _AUTO:
            merged["stages"] = 1 if pipeline == PIPELINE_DROWSY else 2
        if merged["epochs"] == _AUTO:
            merged["epochs"] = 10 if pipeline == PIPELINE_DROWSY else 50
        self.values = merged

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self):
        v = self.values
        return ModelConfig(
            pipeline=v["pipeline"],
            num_classes=v["num_classes"],
            seq_len=v["seq_len"],
            height=v["height"],
            width=v["width"],
            d_model=v["d_model"],
            heads=v["heads"],
            depth=v["depth"],
            stages=v["stages"],
            window=(v["window_t"], v["window_h"], v["window_w"]),
            mlp_ratio=v["mlp_ratio"],
            dropout_p=v["dropout_p"],
            rel_pos_bias=v["rel_pos_bias"],
            seed=v["seed"],
        )

    def train_config(self):
        v = self.values
        try:
            return TrainConfig(
                epochs=v["epochs"],
                batch_size=v["batch_size"],
                learning_rate=v["learning_rate"],
                optimizer=v["optimizer"],
                split_fraction=v["split_fraction"],
                seed=v["seed"],
                threads=v["threads"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def synthetic_spec(self):
        v = self.values
        try:
            return SyntheticSpec(
                num_classes=v["num_classes"],
                clips_per_class=v["clips_per_class"],
                seq_len=v["seq_len"],
                height=v["height"],
                width=v["width"],
                noise_sigma=v["noise_sigma"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def echo(self, out):
        for key in CONFIG_KEYS:
            out(f"config: {key}={self.values[key]}")


def _load_settings(args):
    values = parse_config_file(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.threads is not None:
        values["threads"] = args.threads
    if args.out is not None:
        values["out_dir"] = args.out
    return Settings(values)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, out):
    settings = _load_settings(args)
    settings.echo(out)
    spec = settings.synthetic_spec()
    out_dir = settings["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    clips = generate_synthetic(spec, seed=settings["seed"])
    rows = []
    for clip in clips:
        name = f"{clip.source_id}.svc"
        write_clip(os.path.join(out_dir, name), clip, dtype=DTYPE_U8)
        rows.append(ManifestRow(name, clip.label))
    write_manifest(os.path.join(out_dir, "manifest.csv"), rows)
    out(f"wrote {len(clips)} clips + manifest.csv to {out_dir}")
    return EXIT_OK


def cmd_train(args, out):
    settings = _load_settings(args)
    settings.echo(out)
    if not settings["data_dir"]:
        raise ConfigError("train requires data_dir in the config file")
    clips = load_dataset(settings["data_dir"])
    if not clips:
        raise ConfigError("manifest lists no clips")
    config = settings.model_config()
    tcfg = settings.train_config()
    for clip in clips:
        if clip.label >= config.num_classes:
            raise ConfigError(
                f"clip {clip.source_id} has label {clip.label} >= num_classes {config.num_classes}"
            )
    train_set, val_set = train_test_split(clips, fraction=tcfg.split_fraction, seed=tcfg.seed)
    if not val_set:
        raise ConfigError("split produced an empty validation set; add clips or lower split_fraction")
    out(f"training {config.pipeline} on {len(train_set)} clips, validating on {len(val_set)}")

    params = init_params(config)
    out(f"parameters: {parameter_count(config)}")
    metrics = train(params, config, train_set, val_set, tcfg, log_fn=out)

    out_dir = settings["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.swsh")
    save_checkpoint(ckpt_path, config, params)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    # wall times vary run to run; the CSV artifact stays byte-stable
    write_metrics_csv(metrics_path, metrics.without_wall_times())
    if len(metrics.epochs) >= 3:
        verdict = overfit_report(metrics)
        out(f"overfit: {'yes' if verdict.overfitting else 'no'} ({verdict.reason})")
    else:
        out("overfit: n/a (needs at least 3 epochs)")
    out(f"wrote {ckpt_path} and {metrics_path}")
    return EXIT_OK


def cmd_eval(args, out):
    settings = _load_settings(args)
    settings.echo(out)
    if not settings["checkpoint"]:
        raise ConfigError("eval requires checkpoint in the config file")
    if not settings["data_dir"]:
        raise ConfigError("eval requires data_dir in the config file")
    config, params = load_checkpoint(settings["checkpoint"])
    clips = load_dataset(settings["data_dir"])
    if not clips:
        raise ConfigError("manifest lists no clips")
    for clip in clips:
        if clip.label >= config.num_classes:
            raise ConfigError(
                f"clip {clip.source_id} has label {clip.label} >= num_classes {config.num_classes}"
            )

    def one(clip):
        probs = forward(params, config, clip, train=False)
        return int(np.argmax(probs.data))

    preds = pmap(one, clips, threads=settings["threads"])
    labels = [c.label for c in clips]
    acc = accuracy(preds, labels)
    confusion = np.zeros((config.num_classes, config.num_classes), dtype=np.int64)
    for p, l in zip(preds, labels):
        confusion[l, p] += 1

    out_dir = settings["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    conf_path = os.path.join(out_dir, "confusion.csv")
    with open(conf_path, "w", encoding="utf-8", newline="\n") as fh:
        header = ",".join(["true\\pred"] + [f"pred_{j}" for j in range(config.num_classes)])
        fh.write(header + "\n")
        for i in range(config.num_classes):
            fh.write(",".join([f"true_{i}"] + [str(int(c)) for c in confusion[i]]) + "\n")
    out(f"accuracy: {acc:.6f} over {len(clips)} clips")
    out(f"wrote {conf_path}")
    return EXIT_OK


def cmd_gradcheck(args, out):
    settings = _load_settings(args)
    settings.echo(out)
    config = settings.model_config()
    spec = settings.synthetic_spec()
    clip = generate_synthetic(
        SyntheticSpec(
            num_classes=spec.num_classes,
            clips_per_class=1,
            seq_len=spec.seq_len,
            height=spec.height,
            width=spec.width,
            noise_sigma=spec.noise_sigma,
        ),
        seed=settings["seed"],
    )[0]
    params = init_params(config)
    tensors = named_parameters(params)
    out(f"gradcheck: {config.pipeline}, {settings['gradcheck_samples']} coordinates over "
        f"{len(tensors)} tensors ({parameter_count(config)} parameters)")

    def loss_fn():
        return cross_entropy(forward(params, config, clip, train=False), clip.label)

    err = grad_check(
        loss_fn,
        list(tensors.values()),
        eps=1e-4,
        samples=settings["gradcheck_samples"],
        rng=np.random.default_rng(settings["seed"]),
        sabotage=args.sabotage,
    )
    out(f"max relative error: {err:.3e} (threshold {GRADCHECK_THRESHOLD:.0e})")
    if err > GRADCHECK_THRESHOLD:
        out("gradcheck FAILED")
        return EXIT_NUMERICAL
    out("gradcheck passed")
    return EXIT_OK


def cmd_flops(args, out):
    if args.compare:
        path_a, path_b = args.compare
        settings_a = Settings(parse_config_file(path_a))
        settings_b = Settings(parse_config_file(path_b))
        report_a = flops_estimate(settings_a.model_config())
        report_b = flops_estimate(settings_b.model_config())
        out(f"{path_a}: {report_a.total_gflops:.6f} GFLOPs")
        out(f"{path_b}: {report_b.total_gflops:.6f} GFLOPs")
        out(f"difference: {report_a.total_gflops - report_b.total_gflops:+.6f} GFLOPs")
        return EXIT_OK
    settings = _load_settings(args)
    settings.echo(out)
    report = flops_estimate(settings.model_config())
    out(report.table())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vigil",
        description="Desk-scale spatiotemporal attention engine for driver-state video classification.",
    )
    parser.add_argument("--config", metavar="PATH", help="key=value config file")
    parser.add_argument("--seed", type=int, metavar="U64", help="override the seed key")
    parser.add_argument("--threads", type=int, metavar="N", help="override the threads key")
    parser.add_argument("--out", metavar="DIR", help="override the out_dir key")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic labeled dataset")
    sub.add_parser("train", help="train a pipeline and write checkpoint + metrics")
    sub.add_parser("eval", help="evaluate a checkpoint; write a confusion matrix")
    grad = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    grad.add_argument("--sabotage", action="store_true",
                      help="corrupt one analytic gradient (negative control)")
    flops = sub.add_parser("flops", help="analytic per-layer FLOPs for a config")
    flops.add_argument("--compare", nargs=2, metavar=("A.cfg", "B.cfg"),
                       help="print the total difference between two configs")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "flops": cmd_flops,
}


def main(argv=None, out=print):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args, out)
    except (ConfigError, ShapeError, ValueError, IndexError) as e:
        out(f"config error: {e}")
        return EXIT_CONFIG
    except NumericalError as e:
        out(f"numerical failure: {e}")
        return EXIT_NUMERICAL
    except (DataFormatError, OSError) as e:
        out(f"i/o error: {e}")
        return EXIT_IO
    except VigilError as e:
        out(f"error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
