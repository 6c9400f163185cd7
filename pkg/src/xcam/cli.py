"""Command-line entry point: ``xcam {synth,train,crossval,cam}``.

Exit codes: 0 success, 2 validation or configuration error, 3 numerical
failure during training.  Configuration resolves as built-in defaults, then a
flat ``key = value`` config file (``--config``), then command-line flags.  The
seed may also come from the ``XCAM_SEED`` environment variable when neither
the flag nor the file sets it.  Progress goes to stderr; artifacts go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import blocks, cam, data, evaluation, training
from .errors import NumericalError, XcamError, ValidationError

log = logging.getLogger("xcam")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

# key -> (type, default); defaults are the reference training recipe
RUN_KEYS: dict[str, tuple[type, object]] = {
    "family": (str, "se_resnext"),
    "width_multiplier": (float, 1.0),
    "depth_multiplier": (float, 1.0),
    "cardinality": (int, 4),
    "se_reduction": (int, 16),
    "logits": (int, 1),
    "input_size": (int, 64),
    "crop_size": (int, 512),
    "dtype": (str, "float64"),
    "lr0": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "epochs": (int, 120),
    "step_epochs": (int, 30),
    "decay_factor": (float, 0.1),
    "batch_size": (int, 32),
    "seed": (int, None),
    "manifest": (str, None),
    "out": (str, None),
    "k": (int, 10),
    "jobs": (int, 1),
    "weights": (str, None),
    "image": (str, None),
    "class_index": (int, 1),
    "alpha": (float, 0.5),
}

SYNTH_KEYS: dict[str, tuple[type, object]] = {
    "n": (int, 100),
    "size": (int, 64),
    "radius_min": (float, 12.0),
    "radius_max": (float, 20.0),
    "thickness": (float, 5.0),
    "dilation": (float, 1.8),
    "noise": (float, 0.15),
    "seed": (int, None),
    "out": (str, None),
}

# which keys each subcommand exposes
COMMAND_KEYS = {
    "synth": list(SYNTH_KEYS),
    "train": [k for k in RUN_KEYS if k not in ("k", "jobs", "weights", "image", "class_index", "alpha")],
    "crossval": [k for k in RUN_KEYS if k not in ("weights", "image", "class_index", "alpha")],
    "cam": [
        "family", "width_multiplier", "depth_multiplier", "cardinality", "se_reduction", "logits",
        "input_size", "crop_size", "weights", "image", "class_index", "alpha", "out", "seed",
    ],
}


def read_config_file(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{p}: line {lineno} is not of the form key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, typ: type, raw):
    if raw is None or isinstance(raw, typ):
        return raw
    try:
        return typ(raw)
    except ValueError:
        raise ValidationError(f"{key}: cannot interpret {raw!r} as {typ.__name__}") from None


def resolve_config(command: str, flags: dict, config_path=None, environ=None) -> tuple[dict, dict]:
    """Merge defaults < config file < flags; returns ``(values, sources)``."""
    table = SYNTH_KEYS if command == "synth" else RUN_KEYS
    keys = COMMAND_KEYS[command]
    environ = os.environ if environ is None else environ
    values = {k: table[k][1] for k in keys}
    sources = {k: "default" for k in keys}
    if config_path is not None:
        for k, v in read_config_file(config_path).items():
            if k not in values:
                raise ValidationError(f"{config_path}: unknown key {k!r} for {command}")
            values[k], sources[k] = _coerce(k, table[k][0], v), "file"
    if sources["seed"] == "default" and flags.get("seed") is None and "XCAM_SEED" in environ:
        values["seed"], sources["seed"] = _coerce("XCAM_SEED", int, environ["XCAM_SEED"]), "env"
    for k in keys:
        if flags.get(k) is not None:
            values[k], sources[k] = _coerce(k, table[k][0], flags[k]), "flag"
    return values, sources


# --------------------------------------------------------------------------
# validation helpers (no side effects)
# --------------------------------------------------------------------------

def _require(values: dict, *keys: str) -> None:
    for k in keys:
        if values.get(k) is None:
            hint = " (or set XCAM_SEED)" if k == "seed" else ""
            raise ValidationError(f"missing required setting --{k.replace('_', '-')}{hint}")


def _check_writable_dir(path) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ValidationError(f"output path exists and is not a directory: {p}")
    probe = p
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK | os.X_OK):
        raise ValidationError(f"output path is not writable: {p}")
    return p


def _dtype(name: str):
    if name not in ("float64", "float32"):
        raise ValidationError(f"dtype must be float64 or float32, got {name!r}")
    return np.dtype(name)


def train_config(v: dict) -> training.TrainConfig:
    return training.TrainConfig(
        training.AdamConfig(beta1=v["beta1"], beta2=v["beta2"], eps=v["eps"], lr0=v["lr0"]),
        training.ScheduleConfig(
            step_epochs=v["step_epochs"], decay_factor=v["decay_factor"],
            total_epochs=v["epochs"], batch_size=v["batch_size"],
        ),
    )


def network_spec(v: dict) -> tuple[blocks.NetworkScale, blocks.NetworkSpec]:
    scale = blocks.NetworkScale(
        depth_multiplier=v["depth_multiplier"], width_multiplier=v["width_multiplier"],
        cardinality=v["cardinality"], se_reduction=v["se_reduction"],
    )
    return scale, blocks.network_spec(v["family"], scale, v["input_size"], v["logits"])


def _progress(prefix: str):
    def report(rec: dict) -> None:
        print(f"{prefix}epoch {rec['epoch'] + 1}: lr={rec['lr']:g} loss={rec['mean_loss']:.5f}", file=sys.stderr)

    return report


def _resolved_dump(values: dict, sources: dict) -> str:
    return json.dumps({"config": values, "sources": sources}, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(values: dict, sources: dict) -> int:
    _require(values, "seed", "out")
    cfg = data.SynthConfig(
        n_per_class=values["n"], size=values["size"],
        radius_range=(values["radius_min"], values["radius_max"]),
        base_thickness=values["thickness"], dilation=values["dilation"],
        noise=values["noise"], seed=values["seed"],
    )
    out = _check_writable_dir(values["out"])
    synth = data.generate_synthetic(cfg)
    data.write_synthetic(synth, out)
    counts = synth.manifest.counts
    print(f"wrote {len(synth.images)} images ({counts[1]} KD, {counts[0]} non-KD) to {out}", file=sys.stderr)
    return EXIT_OK


def _load_inputs(values: dict):
    _require(values, "seed", "manifest", "out")
    dtype = _dtype(values["dtype"])
    cfg = train_config(values)
    scale, spec = network_spec(values)
    out = _check_writable_dir(values["out"])
    ds = data.load_dataset(values["manifest"])
    x = data.to_batch(ds.images, values["input_size"], values["crop_size"], dtype)
    return dtype, cfg, scale, spec, out, ds, x


def cmd_train(values: dict, sources: dict) -> int:
    dtype, cfg, scale, spec, out, ds, x = _load_inputs(values)
    model = blocks.init_model(spec, values["seed"], dtype)
    trained, manifest = training.train(model, x, ds.labels, cfg, seed=values["seed"], progress=_progress(""))
    logits, _ = blocks.forward(trained, x, training=False)
    scores = training.kd_score(logits)
    metrics = evaluation.metrics_from_confusion(evaluation.confusion(scores, ds.labels))
    manifest.final_metrics = {"split": "train", **metrics.to_dict()}
    out.mkdir(parents=True, exist_ok=True)
    blocks.save_weights(trained, out / "weights.xcw")
    run = json.loads(manifest.to_json())
    run["resolved"] = {"config": values, "sources": sources}
    run["spec"] = spec.to_dict()
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    print(f"trained {spec.family}: train accuracy {metrics.accuracy:.2f}%, weights in {out / 'weights.xcw'}", file=sys.stderr)
    return EXIT_OK


def cmd_crossval(values: dict, sources: dict) -> int:
    dtype, cfg, scale, spec, out, ds, x = _load_inputs(values)
    if values["jobs"] < 1:
        raise ValidationError(f"jobs must be >= 1, got {values['jobs']}")
    evaluation.stratified_kfold(ds.labels, values["k"], values["seed"])  # validate fold feasibility up front
    result = evaluation.cross_validate(
        x, ds.labels, values["family"], cfg, seed=values["seed"], k=values["k"], scale=scale,
        logits=values["logits"], jobs=values["jobs"], dtype=dtype,
    )
    out.mkdir(parents=True, exist_ok=True)
    folds = []
    for f in result.folds:
        tally = result.plan.tallies[f.fold]
        folds.append({
            "network": values["family"], "fold": f.fold, "n_test": int(len(f.test_indices)),
            "n_pos": tally.get(1, 0), "n_neg": tally.get(0, 0), **f.metrics.to_dict(),
        })
    (out / "folds.json").write_text(json.dumps(folds, indent=2, sort_keys=True) + "\n")
    summary = {
        "network": values["family"],
        "pooled": result.pooled.to_dict(),
        "mean": result.averaged.to_dict(),
        "resolved": {"config": values, "sources": sources},
    }
    (out / "pooled.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "pr_curve.csv").write_text(result.curve.to_csv())
    report = evaluation.render_report({values["family"]: result.pooled})
    (out / "report.txt").write_text(report)
    sizes = sorted({len(f.test_indices) for f in result.folds})
    print(f"{values['k']}-fold CV, test fold sizes {sizes}: pooled accuracy {result.pooled.accuracy:.2f}%", file=sys.stderr)
    return EXIT_OK


def cmd_cam(values: dict, sources: dict) -> int:
    _require(values, "weights", "image", "out")
    scale, spec = network_spec(values)
    if not 0 <= values["alpha"] <= 1:
        raise ValidationError(f"alpha must lie in [0, 1], got {values['alpha']}")
    if values["class_index"] not in (0, 1):
        raise ValidationError(f"class index must be 0 or 1, got {values['class_index']}")
    if not Path(values["weights"]).is_file():
        raise ValidationError(f"weight file not found: {values['weights']}")
    model = blocks.load_weights(values["weights"], spec)
    image = data.prepare_image(data.read_gray(values["image"]), values["input_size"], values["crop_size"])
    out = _check_writable_dir(values["out"])
    rendering = cam.cam_for_model(model, image, values["class_index"], values["alpha"])
    out.mkdir(parents=True, exist_ok=True)
    data.write_pgm(out / "cam.pgm", cam.to_uint8(rendering.upsampled))
    data.write_ppm(out / "overlay.ppm", cam.to_uint8(rendering.overlay))
    print(f"wrote {out / 'cam.pgm'} and {out / 'overlay.ppm'}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "crossval": cmd_crossval, "cam": cmd_cam}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xcam", description="Explainable CNN classification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        table = SYNTH_KEYS if name == "synth" else RUN_KEYS
        for key in COMMAND_KEYS[name]:
            typ, default = table[key]
            names = [_flag(key)]
            if key == "class_index":
                names.append("--class")
            if key == "lr0":
                names.append("--lr")
            p.add_argument(*names, dest=key, type=typ, default=None, help=f"default: {default}")
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    flags = {k: v for k, v in vars(args).items() if k in COMMAND_KEYS[args.command]}
    try:
        values, sources = resolve_config(args.command, flags, args.config)
        if args.print_config:
            print(_resolved_dump(values, sources))
            return EXIT_OK
        return COMMANDS[args.command](values, sources)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except XcamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
