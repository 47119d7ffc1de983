"""Command-line interface.

Exit codes: 0 ok, 1 check failed, 2 config error, 3 data error, 4 numeric abort.
Errors print one line ``bpnet: error[<kind>]: <reason>`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from bpnet import analysis
from bpnet.config import load_config
from bpnet.data import (
    BLOB_SPREAD,
    Dataset,
    from_spec,
    save_idx_dir,
    synth_blobs,
    synth_copy_sequences,
    train_val_split,
)
from bpnet.errors import (
    BuildError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    ParameterError,
    ShapeError,
)
from bpnet.layers import Embedding
from bpnet.network import Model, build, load, save, train, write_metrics
from bpnet.tensor import make_rng

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _model_from_config(path, seed=None) -> tuple[Model, dict]:
    try:
        cfg = load_config(path)
        if seed is not None:
            cfg["seed"] = seed
        return build(cfg), cfg
    except (ConfigError, BuildError, ParameterError) as e:
        raise CliError(EXIT_CONFIG, "config", str(e)) from None


def _dataset(spec: str) -> Dataset:
    try:
        return from_spec(spec)
    except (DataError, FormatError, OSError) as e:
        raise CliError(EXIT_DATA, "data", str(e)) from None


def _check_compatible(model: Model, ds: Dataset) -> None:
    shape = tuple(ds.x.shape[1:])
    if shape != model.input_shape:
        raise CliError(
            EXIT_DATA,
            "data",
            f"data sample shape {shape} does not match model input shape {model.input_shape}",
        )
    if ds.y.ndim == 1 and model.output_shape and len(ds.y):
        classes = model.output_shape[-1]
        if ds.y.max() >= classes:
            raise CliError(
                EXIT_DATA,
                "data",
                f"label {int(ds.y.max())} out of range for model output of {classes} classes",
            )


def cmd_train(args) -> int:
    model, cfg = _model_from_config(args.config, args.seed)
    ds = _dataset(args.data)
    _check_compatible(model, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        # divergence is reported through NumericError, not numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            history = train(model, ds, cfg)
    except NumericError as e:
        raise CliError(EXIT_NUMERIC, "numeric", str(e)) from None
    write_metrics(out / "metrics.csv", history)
    save(model, out / "model.bpnn")
    (out / "cost_report.csv").write_text(analysis.cost_report(model).to_csv())
    if history:
        last = history[-1]
        print(f"epochs={len(history)} val_loss={last.val_loss!r} val_acc={last.val_acc!r}")
    else:
        print("epochs=0")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = load(args.model)
    except (FormatError, OSError, ShapeError) as e:
        raise CliError(EXIT_DATA, "model", str(e)) from None
    ds = _dataset(args.data)
    _check_compatible(model, ds)
    if args.split != "all":
        cfg = model.description
        tr, va = train_val_split(ds, cfg["validation_split"], make_rng(cfg["shuffle_seed"]))
        ds = tr if args.split == "train" else va
        if ds is None:
            raise CliError(EXIT_DATA, "data", "model was trained without a validation split")
    loss, acc = model.evaluate(ds.x, ds.y)
    print(f"loss={loss!r} acc={acc!r}")
    return EXIT_OK


def _probe_batch(model: Model, n: int, rng):
    first = model.layers[0] if model.layers else None
    if isinstance(first, Embedding):
        x = rng.integers(0, first.vocab, size=(n, *model.input_shape))
    else:
        x = rng.normal(size=(n, *model.input_shape))
    out_shape = model.output_shape
    if model.loss == "cross_entropy":
        y = rng.integers(0, out_shape[-1], size=n)
    else:
        y = rng.normal(size=(n, *out_shape))
    return x, y


def cmd_gradcheck(args) -> int:
    model, cfg = _model_from_config(args.config)
    if not analysis.is_parametrized(model):
        print("no trainable parameters: vacuous pass")
        return EXIT_OK
    x, y = _probe_batch(model, args.batch, make_rng(cfg["seed"] + 7))
    try:
        report = analysis.grad_check(
            model, x, y, tolerance=args.tolerance, max_probes=args.probes, seed=cfg["seed"]
        )
    except NumericError as e:
        raise CliError(EXIT_NUMERIC, "numeric", str(e)) from None
    print("layer,worst_rel_error,tolerance,status")
    for name, (worst, tol) in report.by_layer().items():
        label = name if name == "input" else f"{name}:{model.layers[int(name)].type_name}"
        print(f"{label},{worst:.3e},{tol:g},{'ok' if worst <= tol else 'FAIL'}")
    if report.excluded:
        print(f"note: {report.excluded} probe(s) straddled a relu/max-pool kink and were skipped")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_equivcheck(args) -> int:
    model, cfg = _model_from_config(args.config)
    results = analysis.model_equivalence(model, args.trials, args.tolerance, seed=cfg["seed"])
    if not results:
        print("no bilinear layers: vacuous pass")
        return EXIT_OK
    print("layer,max_deviation,status")
    for name, res in results.items():
        print(f"{name},{res.max_deviation:.3e},{'ok' if res.passed else 'FAIL'}")
    ok = all(r.passed for r in results.values())
    print(f"{'PASS' if ok else 'FAIL'} tolerance={args.tolerance:g} trials={args.trials}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_params(args) -> int:
    model, _ = _model_from_config(args.config)
    sys.stdout.write(analysis.count_params(model).to_csv(exclude_last=args.exclude_last))
    return EXIT_OK


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(v) for v in text.replace("x", ",").split(",") if v)
    except ValueError:
        raise CliError(EXIT_CONFIG, "config", f"bad shape {text!r}; expected e.g. 32,32,3") from None
    if not shape or min(shape) < 1:
        raise CliError(EXIT_CONFIG, "config", f"bad shape {text!r}")
    return shape


def cmd_flops(args) -> int:
    model, _ = _model_from_config(args.config)
    shape = _parse_shape(args.input) if args.input else None
    try:
        report = analysis.estimate_flops(model, shape)
    except (BuildError, ConfigError) as e:
        raise CliError(EXIT_CONFIG, "config", str(e)) from None
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_memory(args) -> int:
    model, _ = _model_from_config(args.config)
    sys.stdout.write(analysis.estimate_activation_memory(model, args.batch, args.width).to_csv())
    return EXIT_OK


def cmd_synth(args) -> int:
    rng = make_rng(args.seed)
    try:
        if args.kind == "blobs":
            ds = synth_blobs(rng, args.classes, args.dim, args.n, args.spread)
        else:
            ds = synth_copy_sequences(rng, args.vocab, args.length, args.n)
            ds.x = ds.x.astype(np.int32)
        save_idx_dir(args.out, ds)
    except (ParameterError, FormatError, OSError) as e:
        raise CliError(EXIT_DATA, "data", str(e)) from None
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="synth:blobs:..., synth:seq:..., idx:DIR or cifar10:DIR")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the config's initialization seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["all", "train", "val"], default="all")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    s.add_argument("--config", required=True)
    s.add_argument(
        "--tolerance", type=float, help="applies to every layer (default 1e-5, lstm 1e-4)"
    )
    s.add_argument("--probes", type=int, default=50, help="coordinates probed per tensor")
    s.add_argument("--batch", type=int, default=4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("equivcheck", help="bilinear vs expanded-full equivalence")
    s.add_argument("--config", required=True)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--tolerance", type=float, default=1e-10)
    s.set_defaults(func=cmd_equivcheck)

    s = sub.add_parser("params", help="trainable parameter report (CSV)")
    s.add_argument("--config", required=True)
    s.add_argument("--exclude-last", action="store_true", help="omit the final classifier layer")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("flops", help="forward FLOP report (CSV)")
    s.add_argument("--config", required=True)
    s.add_argument("--input", help="input shape without batch axis, e.g. 32,32,3")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("memory", help="activation memory report (CSV)")
    s.add_argument("--config", required=True)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--width", type=int, default=4, help="bytes per element")
    s.set_defaults(func=cmd_memory)

    s = sub.add_parser("synth", help="write a synthetic dataset as IDX files")
    s.add_argument("--kind", choices=["blobs", "seq"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=250, help="samples per class (blobs) or total (seq)")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--spread", type=float, default=BLOB_SPREAD)
    s.add_argument("--vocab", type=int, default=8)
    s.add_argument("--length", type=int, default=5)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except CliError as e:
        print(f"bpnet: error[{e.kind}]: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
