"""Command line entry point: ``wispike <subcommand> ...``.

Exit status is 0 on success, 1 for usage and configuration errors, and 2 for
data or numerics errors. Every error is one line on stderr starting ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .csi_data import (compose_multi_action, generate_benchmark, normalize_mean_subtract, read_csi_file,
                       read_manifest, write_csi_file)
from .errors import ConfigError, InvalidConfig, InvalidSpec, WiSpikeError
from .telemetry import DenseBaseline, compare_energy, count_dynamic, format_table
from .training import (RATES_NAME, default_config, evaluate, load_checkpoint, load_config,
                       read_history, train)

SEED_ENV = "WISPIKE_SEED"
USAGE_ERRORS = (ConfigError, InvalidConfig, InvalidSpec)


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or "(default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env_seed(default=0) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(a):
    seed = a.seed if a.seed is not None else _env_seed()
    man = generate_benchmark(a.out, a.atoms, a.per_class, a.actions, seed, test_fraction=a.test_fraction,
                             n_antennas=a.antennas, n_subcarriers=a.subcarriers, width=a.width,
                             noise_sigma=a.noise)
    print(f"wrote {len(man.entries)} samples in {man.n_classes} classes to {Path(a.out) / 'manifest.csv'}")


def cmd_compose(a):
    samples = [read_csi_file(p) for p in a.inputs]
    out = compose_multi_action(samples, target_width=a.width, n_atoms=a.atoms)
    write_csi_file(out, a.out)
    c, h, w = out.shape
    print(f"wrote {a.out}: shape {c}x{h}x{w}, atoms {list(out.label.atoms)}, class {out.label.class_index}")


def _train_config(a):
    cfg = load_config(a.config) if a.config else default_config()
    seed_in_file = False
    if a.config:
        seed_in_file = "seed" in json.loads(Path(a.config).read_text(encoding="utf-8"))
    if a.seed is not None:
        cfg.seed = a.seed
    elif not seed_in_file:
        cfg.seed = _env_seed(cfg.seed)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate")):
        v = getattr(a, flag)
        if v is not None:
            setattr(cfg, key, v)
    if a.manifest is not None:
        cfg.manifest = str(Path(a.manifest).resolve())
    loss = cfg.loss.to_dict()
    for flag in ("tau", "gamma1", "gamma2"):
        if getattr(a, flag) is not None:
            loss[flag] = getattr(a, flag)
    model = cfg.model.to_dict()
    if a.time_steps is not None:
        model["time_steps"] = a.time_steps
    d = cfg.to_dict()
    d.update(loss=loss, model=model)
    cfg = type(cfg).from_dict(d)
    if not cfg.manifest:
        raise UsageError("no manifest: pass --manifest or set \"manifest\" in the config file")
    return cfg


def cmd_train(a):
    cfg = _train_config(a)
    result = train(cfg, a.out, resume=a.resume, progress=False)
    last = [r for r in result.history if r.epoch == cfg.epochs]
    for r in last:
        print(f"epoch {r.epoch} {r.split}: loss {r.loss:.4f} accuracy {r.accuracy:.4f}")
    print(f"checkpoint {result.checkpoint}")


def _load_for_eval(a):
    ckpt = load_checkpoint(a.ckpt)
    manifest = read_manifest(a.manifest)
    return ckpt.trained, manifest


def cmd_eval(a):
    tm, manifest = _load_for_eval(a)
    m = evaluate(tm, manifest)
    for k, v in m.as_dict().items():
        print(f"{k}: {v:.4f}")
    path = Path(a.confusion) if a.confusion else Path(a.ckpt).with_name("confusion.csv")
    cn = manifest.class_names
    names = [cn.get(i, str(i)) for i in range(tm.model.n_class)]
    buf = io.StringIO(newline="")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["true\\pred"] + list(names))
    for name, row in zip(names, m.confusion):
        wr.writerow([name] + [int(c) for c in row])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    print(f"confusion matrix written to {path}")


def cmd_rates(a):
    path = Path(a.rundir) / RATES_NAME
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    rows = read_history(path)
    if a.final and rows:
        last = max(int(r["epoch"]) for r in rows)
        rows = [r for r in rows if int(r["epoch"]) == last]
    buf = io.StringIO(newline="")
    wr = csv.writer(buf, lineterminator="\n")
    cols = ["epoch", "split", "layer", "name", "mean", "std", "in_band"]
    wr.writerow(cols)
    for r in rows:
        wr.writerow([r[c] for c in cols])
    _emit(buf.getvalue(), a.out)


def cmd_energy(a):
    tm, manifest = _load_for_eval(a)
    part = manifest.split("test") if any(e.split == "test" for e in manifest.entries) else manifest
    x, y = part.load()
    snn = count_dynamic(tm.model, x, paper_convention=a.paper_convention)
    acc = evaluate(tm, (x, y)).accuracy
    csv_text = snn.to_csv()
    if a.out:
        _emit(csv_text, a.out)
    else:
        sys.stdout.write(csv_text + "\n")
    if a.baseline:
        base = DenseBaseline(tm.model.config, tm.model.layers[0].in_shape, tm.model.n_class,
                             seed=tm.config.seed).energy()
        ratio, rows = compare_energy(snn, base, acc, None)
        print(format_table(rows))
        print(f"energy ratio (SNN / baseline): {ratio:.4f}")
    else:
        _, rows = compare_energy(snn, snn, acc)
        print(format_table(rows[:1]))


def cmd_export_features(a):
    tm = load_checkpoint(a.ckpt).trained
    model = tm.model
    n_layers = len(model.layers)
    if not -n_layers <= a.layer < n_layers:
        raise UsageError(f"--layer must index one of the model's {n_layers} layers, got {a.layer}")
    layer = a.layer % n_layers
    sample = normalize_mean_subtract(read_csi_file(a.sample))
    scores = model.forward(sample.values[None])
    # the vote has no time axis; its scores are written as a single step
    outputs = model.inputs[1:] + [scores[None]]
    feats = np.asarray(outputs[layer])[:, 0]
    buf = io.StringIO(newline="")
    wr = csv.writer(buf, lineterminator="\n")
    if feats.ndim == 4:
        wr.writerow(["t", "channel", "row", "col", "value"])
        for idx in np.ndindex(feats.shape):
            wr.writerow(list(idx) + [repr(float(feats[idx]))])
    else:
        feats = feats.reshape(feats.shape[0], -1)
        wr.writerow(["t", "feature", "value"])
        for idx in np.ndindex(feats.shape):
            wr.writerow(list(idx) + [repr(float(feats[idx]))])
    _emit(buf.getvalue(), a.out)


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    d = default_config()
    fmt = _HelpFormatter
    p = _Parser(prog="wispike", description="Spiking-network CSI action recognition toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic CSI benchmark", formatter_class=fmt)
    s.add_argument("--atoms", type=int, required=True, help="number of atomic actions")
    s.add_argument("--per-class", type=int, required=True, help="samples per composite class")
    s.add_argument("--actions", type=int, default=1, help="actions per sample (M)")
    s.add_argument("--seed", type=int, default=None, help=f"generator seed (falls back to ${SEED_ENV}, then 0)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--width", type=int, default=48, help="packets per sample")
    s.add_argument("--subcarriers", type=int, default=8, help="subcarriers per sample")
    s.add_argument("--antennas", type=int, default=3, help="antenna pairs per sample")
    s.add_argument("--noise", type=float, default=0.2, help="additive Gaussian noise sigma")
    s.add_argument("--test-fraction", type=float, default=0.2, help="share of each class held out for test")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("compose", help="concatenate .csit samples into one multi-action sample",
                       formatter_class=fmt)
    s.add_argument("--inputs", nargs="+", required=True, help="input .csit files, in temporal order")
    s.add_argument("--width", type=int, default=None, help="resample to this many packets (default: sum of inputs)")
    s.add_argument("--atoms", type=int, default=None,
                   help="atom vocabulary size for the class index (default: largest atom id + 1)")
    s.add_argument("--out", required=True, help="output .csit file")
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("train", help="train a model; flags override the config file",
                       formatter_class=fmt, description="Precedence: flag > config file > built-in default.")
    s.add_argument("--config", default=None, help="JSON run config (default: built-in desk config)")
    s.add_argument("--out", required=True, help="run directory for history, rates and checkpoint")
    s.add_argument("--manifest", default=None, help="dataset manifest.csv (default: from config)")
    s.add_argument("--epochs", type=int, default=None, help=f"training epochs (default: {d.epochs})")
    s.add_argument("--batch-size", type=int, default=None, help=f"mini-batch size (default: {d.batch_size})")
    s.add_argument("--lr", type=float, default=None, help=f"Adam learning rate (default: {d.learning_rate})")
    s.add_argument("--tau", type=float, default=None, help=f"contrastive temperature (default: {d.loss.tau})")
    s.add_argument("--gamma1", type=float, default=None, help=f"MSE weight (default: {d.loss.gamma1})")
    s.add_argument("--gamma2", type=float, default=None, help=f"contrastive weight (default: {d.loss.gamma2})")
    s.add_argument("--time-steps", type=int, default=None, help=f"time steps T (default: {d.model.time_steps})")
    s.add_argument("--seed", type=int, default=None,
                   help=f"run seed (default: config value, else ${SEED_ENV}, else {d.seed})")
    s.add_argument("--resume", default=None, help="checkpoint to continue from (default: none)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest's test split", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--manifest", required=True, help="dataset manifest.csv")
    s.add_argument("--confusion", default=None, help="confusion CSV path (default: confusion.csv beside --ckpt)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rates", help="per-layer firing rates of a training run", formatter_class=fmt)
    s.add_argument("--rundir", required=True, help="run directory written by train")
    s.add_argument("--final", action="store_true", help="only the last epoch (train vs test per layer)")
    s.add_argument("--out", default=None, help="output CSV (default: stdout)")
    s.set_defaults(func=cmd_rates)

    s = sub.add_parser("energy", help="operation counts and energy of a checkpoint", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--manifest", required=True, help="dataset manifest.csv")
    s.add_argument("--baseline", action="store_true", help="compare against the matched dense CNN")
    s.add_argument("--paper-convention", action="store_true", help="count ACs only in the SNN energy")
    s.add_argument("--out", default=None, help="energy CSV path (default: stdout)")
    s.set_defaults(func=cmd_energy)

    s = sub.add_parser("export-features", help="dump one layer's per-step feature map as CSV",
                       formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--sample", required=True, help="input .csit file")
    s.add_argument("--layer", type=int, required=True, help="layer index (negative counts from the end)")
    s.add_argument("--out", default=None, help="output CSV (default: stdout)")
    s.set_defaults(func=cmd_export_features)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except BrokenPipeError:
        # downstream reader (e.g. head) closed early; not an error of ours
        sys.stdout = open(os.devnull, "w")
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (WiSpikeError, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
