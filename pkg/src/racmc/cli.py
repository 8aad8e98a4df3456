"""Command-line entry point: ``racmc {synth,train,eval,gradcheck}``.

Exit codes: 0 success, 1 gradient check over tolerance, 2 configuration
error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from racmc import __version__
from racmc.encoders import (RecordArrays, SynthConfig, load_embeddings, stratified_split,
                            synth_generate, write_embeddings)
from racmc.errors import ConfigError, DataError
from racmc.gradcheck import run_gradcheck
from racmc.model import ABLATIONS, Ablation, ModelConfig, RaCMC
from racmc.nn import Mode
from racmc.trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_TOLERANCE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("racmc")


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config_file(parser: argparse.ArgumentParser, path) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in read_config_file(path).items():
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"{path}: unknown key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            defaults[key] = action.type(value) if action.type else value
    parser.set_defaults(**defaults)


def _load(path) -> RecordArrays:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    records = load_embeddings(path)
    if not records:
        raise DataError(f"{path}: no records")
    return RecordArrays.from_records(records)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_snapshot(path: Path, model: RaCMC, cfg: TrainConfig) -> None:
    arrays = dict(model.state_dict())
    arrays["__config__"] = np.array(json.dumps(cfg.to_dict(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_snapshot(path) -> tuple[RaCMC, TrainConfig]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        cfg = TrainConfig.from_dict(json.loads(str(arrays.pop("__config__"))))
        model = RaCMC(cfg.model, np.random.default_rng(0), cfg.ablation)
        model.load_state_dict(arrays)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: unreadable parameter snapshot ({exc})") from exc
    return model, cfg


def collect_features(model: RaCMC, data: RecordArrays, batch_size: int, lam: float):
    rows = {"T": [], "I": [], "M": []}
    for start in range(0, len(data), batch_size):
        out = model(data.subset(np.arange(start, min(start + batch_size, len(data)))), Mode.eval(), lam)
        rows["T"].append(out.fused.T_prime.data)
        rows["I"].append(out.fused.I_prime.data)
        rows["M"].append(out.fused.M_prime.data)
    return {k: np.concatenate(v) for k, v in rows.items()}


def write_feature_dump(path: Path, model: RaCMC, data: RecordArrays, cfg: TrainConfig) -> None:
    feats = collect_features(model, data, cfg.batch_size, cfg.lam)
    dim = feats["T"].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"{k}_{j}" for k in ("T", "I", "M") for j in range(dim)])
        for i in range(len(data)):
            w.writerow([data.ids[i], int(data.labels[i])]
                       + [repr(float(v)) for k in ("T", "I", "M") for v in feats[k][i]])


def write_diagnostics(outdir: Path, model: RaCMC, data: RecordArrays, cfg: TrainConfig) -> None:
    """Hard masks and second-stage iAFF gates of the first eval batch, as CSV."""
    trace: dict = {}
    model(data.subset(np.arange(min(cfg.batch_size, len(data)))), Mode.eval(), cfg.lam, trace=trace)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "omega.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "head", "i", "j", "value"])
        for key, arr in trace.items():
            if key.startswith("omega/"):
                for (hd, i, j), v in np.ndenumerate(arr):
                    w.writerow([key[6:], hd, i, j, int(v)])
    with open(outdir / "gates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fusion", "row", "col", "value"])
        for key, arr in trace.items():
            if key.startswith("gate/"):
                for (i, j), v in np.ndenumerate(arr):
                    w.writerow([key[5:], i, j, repr(float(v))])


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_real=args.real, n_fake=args.fake, n1=args.n1, n2=args.n2, n_raw=args.n_raw,
                      delta=args.delta, rho=args.rho, noise=args.noise, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.test_out and (args.test_real < 0 or args.test_fake < 0):
        raise ConfigError("held-out counts must be non-negative")
    cfg.n_real += args.test_real if args.test_out else 0
    cfg.n_fake += args.test_fake if args.test_out else 0
    records = synth_generate(cfg)
    outputs = [(Path(args.out), records)]
    if args.test_out:
        train_recs, test_recs = stratified_split(records, args.test_real, args.test_fake)
        outputs = [(Path(args.out), train_recs), (Path(args.test_out), test_recs)]
    print(f"{'file':<24}{'real':>8}{'fake':>8}{'total':>8}   dims (n1, n2, n_raw)")
    for path, recs in outputs:
        if not path.parent.exists():
            raise ConfigError(f"{path.parent}: directory does not exist")
        write_embeddings(path, recs, (cfg.n1, cfg.n2, cfg.n_raw))
        n_real = sum(r.label == 1 for r in recs)
        print(f"{path.name:<24}{n_real:>8}{len(recs) - n_real:>8}{len(recs):>8}   "
              f"({cfg.n1}, {cfg.n2}, {cfg.n_raw})")
    return EXIT_OK


def _train_config(args, dims) -> TrainConfig:
    names = list(args.ablate or [])
    if args.image_only:
        names.append("image_only")
    if args.text_only:
        names.append("text_only")
    ablation = Ablation.from_names(names)
    n1, n2, n_raw = dims
    model = ModelConfig(n1=n1, n2=n2, n_raw=n_raw, dim=args.dim, heads=args.heads, tau=args.tau,
                        proj_dropout=args.proj_dropout, attn_dropout=args.attn_dropout)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, lam=args.lam,
                      seed=args.seed, model=model, ablation=ablation, stop_at_accuracy=args.stop_at)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    if args.image_only and args.text_only:
        raise ConfigError("--image-only and --text-only are mutually exclusive")
    train_set, test_set = _load(args.train), _load(args.test)
    if train_set.dims != test_set.dims:
        raise DataError(f"train dims {train_set.dims} != test dims {test_set.dims}")
    cfg = _train_config(args, train_set.dims)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {"train": str(args.train), "test": str(args.test)},
        # relative to the run directory, so reruns elsewhere share one manifest
        "outputs": {"log": "train_log.jsonl", "metrics": "metrics.json", "params": "best_params.npz",
                    "features": "features.csv"},
    }
    _write_json(out / "manifest.json", manifest)
    with open(out / "train_log.jsonl", "w") as logf:
        def on_step(rec):
            logf.write(json.dumps({"event": "step", **rec}) + "\n")

        def on_epoch(rec):
            logf.write(json.dumps({"event": "epoch", **rec}) + "\n")

        result = train(train_set, test_set, cfg, on_step, on_epoch)
    metrics = evaluate(result.model, test_set, cfg)
    _write_json(out / "metrics.json", {"best_epoch": result.best_epoch, **metrics.to_dict()})
    save_snapshot(out / "best_params.npz", result.model, cfg)
    write_feature_dump(out / "features.csv", result.model, test_set, cfg)
    print(json.dumps({"best_epoch": result.best_epoch, "accuracy": metrics.accuracy}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = load_snapshot(args.params)
    data = _load(args.data)
    want = (cfg.model.n1, cfg.model.n2, cfg.model.n_raw)
    if data.dims != want:
        raise ConfigError(f"data dims {data.dims} do not match snapshot dims {want}")
    metrics = evaluate(model, data, cfg)
    text = json.dumps(metrics.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.diagnostics:
        write_diagnostics(Path(args.diagnostics), model, data, cfg)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    entries = run_gradcheck(seed=args.seed, h=args.step)
    for e in entries:
        status = "ok" if e.error < args.tolerance else "FAIL"
        print(f"{e.name:<28} {e.error:.3e}  {status}")
    worst = max(entries, key=lambda e: e.error)
    print(f"max error {worst.error:.3e} ({worst.name}), tolerance {args.tolerance:.1e}")
    if worst.error >= args.tolerance:
        print(f"gradient check failed: worst offender {worst.name}", file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser(config_file=None) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="racmc", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic embedding file")
    s.add_argument("--out", required=True)
    s.add_argument("--real", type=int, default=200)
    s.add_argument("--fake", type=int, default=200)
    s.add_argument("--n1", type=int, default=24)
    s.add_argument("--n2", type=int, default=32)
    s.add_argument("--n-raw", type=int, default=16)
    s.add_argument("--delta", type=float, default=1.0)
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-out", help="also write a held-out file drawn from the same generator")
    s.add_argument("--test-real", type=int, default=50)
    s.add_argument("--test-fake", type=int, default=50)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train and keep the best-test-accuracy epoch")
    t.add_argument("--config", help="key=value file; explicit flags override it")
    t.add_argument("--train", required=True)
    t.add_argument("--test", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=80)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lambda", dest="lam", type=float, default=0.1)
    t.add_argument("--heads", type=int, default=8)
    t.add_argument("--dim", type=int, default=16)
    t.add_argument("--tau", type=float, default=0.1)
    t.add_argument("--proj-dropout", type=float, default=0.4)
    t.add_argument("--attn-dropout", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--stop-at", type=float, default=None,
                   help="stop once best test accuracy reaches this value")
    t.add_argument("--ablate", action="append", choices=ABLATIONS, default=None)
    t.add_argument("--image-only", action="store_true")
    t.add_argument("--text-only", action="store_true")
    t.set_defaults(func=cmd_train)
    if config_file:
        _apply_config_file(t, config_file)

    e = sub.add_parser("eval", help="evaluate a parameter snapshot")
    e.add_argument("--params", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--diagnostics", help="directory for omega.csv and gates.csv")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="central-difference check of every loss term")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    try:
        known, _ = pre.parse_known_args(argv)
        args = build_parser(known.config).parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
