"""Command-line entry point: ``invexplain <command> [flags]``.

Every command takes ``--out DIR`` and an optional ``--config FILE`` of
``key=value`` lines (keys are the long flag names with dashes or
underscores).  Flags given on the command line win over the file.  The
effective configuration is written to ``DIR/config.txt`` before any work
starts; wall-clock timestamps only ever go to ``DIR/log.txt``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasets as ds
from .autodiff import NonFiniteError, ShapeError
from .explain import (
    DegenerateBoundaryError,
    boundary_between,
    boundary_trace_2d,
    explain_decision,
    feature_importance,
    interpolate_path,
    side_consistency,
    trace_range,
)
from .network import CheckpointError, NetworkSpec, build_network, load_checkpoint, save_checkpoint
from .reports import CLASS_COLORS, emit_csv, emit_pgm, emit_svg_bars, emit_svg_scatter, read_kv, write_kv
from .training import DivergenceError, TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericFailure(Exception):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).replace(" ", "").split(",") if x]


def _opt_int(v):
    return None if v in (None, "", "none", "None") else int(v)


def _opt_str(v):
    return None if v in (None, "", "none", "None") else str(v)


# name -> (type, default, help); shared by every command
OPTIONS = {
    "dataset": (str, "two-moons", "two-moons | informative | idx | csv"),
    "n": (int, 2000, "generated sample count"),
    "noise": (float, 0.1, "two-moons noise std"),
    "dims": (int, 10, "informative: total dimensions"),
    "informative": (_int_list, [1, 3, 9], "informative: comma-separated dimension indices"),
    "shift": (float, 1.5, "informative: class mean offset per informative dimension"),
    "images": (_opt_str, None, "idx: image file"),
    "labels": (_opt_str, None, "idx: label file"),
    "test_images": (_opt_str, None, "idx: held-out image file"),
    "test_labels": (_opt_str, None, "idx: held-out label file"),
    "csv": (_opt_str, None, "csv: dataset file"),
    "classes": (_opt_int, None, "class count (default: inferred)"),
    "fraction": (float, 1.0, "stratified training fraction"),
    "seed": (int, 0, "seed for data, initialization and shuffling"),
    "stages": (_int_list, [8], "coupling blocks per stage, comma-separated"),
    "hidden": (_opt_int, None, "inner width of each residual function"),
    "initial_bn": (_bool, True, "batchnorm on the raw input"),
    "initial_pool": (_bool, False, "Haar pooling before the first stage (images)"),
    "dtype": (str, "float32", "float32 | float64"),
    "epochs": (int, 200, "training epochs"),
    "batch_size": (int, 64, "minibatch size"),
    "learning_rate": (float, 0.05, "SGD learning rate"),
    "momentum": (float, 0.9, "SGD momentum"),
    "lr_schedule": (str, "constant", "constant | step"),
    "lr_decay": (float, 0.1, "step schedule factor"),
    "lr_every": (int, 50, "step schedule period in epochs"),
    "checkpoint": (_opt_str, None, "checkpoint to load"),
    "split": (str, "eval", "dataset part to use: train | eval"),
    "class_pair": (_opt_str, None, "i,j (default: top two / 0,1)"),
    "index": (_opt_int, None, "sample index in the chosen split"),
    "label": (_opt_int, None, "pick the first sample with this label"),
    "steps": (int, 8, "interpolation frames"),
    "points": (int, 200, "boundary trace points"),
    "limit": (_opt_int, None, "use at most this many samples"),
    "tolerance": (float, 1e-4, "roundtrip: mean l2 error limit"),
}

COMMANDS = {
    "train": "fit a network and write model.ckpt",
    "roundtrip": "check T^-1(T(x)) reconstruction error",
    "boundary": "trace the decision boundary of a 2D network",
    "explain": "interpolate a sample toward its decision boundary",
    "importance": "per-dimension feature importance over a dataset",
    "export": "write the dataset as CSV",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="invexplain", description="Invertible-network classifiers and their explanations.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, helptext in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, argument_default=argparse.SUPPRESS)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key=value config file")
        for key, (_, default, h) in OPTIONS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=str, help=f"{h} (default: {default})")
    return parser


def resolve_config(argv):
    """Merge defaults, the config file and explicit flags; returns ``(command, out, cfg)``."""
    ns = vars(build_parser().parse_args(argv))
    command, out = ns.pop("command"), ns.pop("out")
    raw = {}
    if "config" in ns:
        path = ns.pop("config")
        try:
            raw.update({k.replace("-", "_"): v for k, v in read_kv(path).items()})
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
    raw.update(ns)
    unknown = sorted(set(raw) - set(OPTIONS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (conv, default, _) in OPTIONS.items():
        try:
            cfg[key] = conv(raw[key]) if key in raw else default
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return command, Path(out), cfg


def _train_config(cfg):
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                       momentum=cfg["momentum"], seed=cfg["seed"], lr_schedule=cfg["lr_schedule"],
                       lr_decay=cfg["lr_decay"], lr_every=cfg["lr_every"])


def load_datasets(cfg, dtype=np.float32):
    """``(train, eval)`` parts for ``cfg``.

    Generated datasets draw the evaluation set independently with ``seed + 1``;
    file-backed datasets use the held-out files when given, else the split
    remainder (or the training part itself when ``fraction`` is 1).
    """
    kind, seed, frac = cfg["dataset"], cfg["seed"], cfg["fraction"]
    if kind == "two-moons":
        full = ds.two_moons(cfg["n"], cfg["noise"], seed, dtype)
        held = ds.two_moons(cfg["n"], cfg["noise"], seed + 1, dtype)
        return ds.split(full, frac, seed)[0], held
    if kind == "informative":
        args = (cfg["n"], cfg["dims"], tuple(cfg["informative"]))
        full = ds.synthetic_informative(*args, seed=seed, shift=cfg["shift"], dtype=dtype)
        held = ds.synthetic_informative(*args, seed=seed + 1, shift=cfg["shift"], dtype=dtype)
        return ds.split(full, frac, seed)[0], held
    if kind == "idx":
        if not (cfg["images"] and cfg["labels"]):
            raise UsageError("--dataset idx needs --images and --labels")
        full = ds.load_idx(cfg["images"], cfg["labels"], cfg["classes"] or 10)
        full.features = full.features.astype(dtype)
        if cfg["test_images"] and cfg["test_labels"]:
            held = ds.load_idx(cfg["test_images"], cfg["test_labels"], cfg["classes"] or 10)
            held.features = held.features.astype(dtype)
            return ds.split(full, frac, seed)[0], held
    elif kind == "csv":
        if not cfg["csv"]:
            raise UsageError("--dataset csv needs --csv")
        full = ds.read_csv(cfg["csv"], cfg["classes"], dtype=dtype)
    else:
        raise UsageError(f"unknown dataset {kind!r}")
    if frac >= 1.0:
        return full, full
    return ds.split(full, frac, seed)


def _pick(cfg, train_part, eval_part):
    part = {"train": train_part, "eval": eval_part}.get(cfg["split"])
    if part is None:
        raise UsageError("--split must be train or eval")
    if cfg["limit"] is not None:
        part = part.subset(np.arange(min(cfg["limit"], len(part))))
    return part


def _class_pair(cfg):
    if cfg["class_pair"] is None:
        return None
    pair = _int_list(cfg["class_pair"])
    if len(pair) != 2:
        raise UsageError("--class-pair needs two comma-separated classes")
    return tuple(pair)


def _load_net(cfg):
    if not cfg["checkpoint"]:
        raise UsageError("this command needs --checkpoint")
    return load_checkpoint(cfg["checkpoint"])


def _data_for(cfg, net):
    train_part, eval_part = load_datasets(cfg, dtype=net.dtype)
    if train_part.features.shape[1:] != tuple(net.spec.input_shape):
        raise DataError(f"dataset inputs {train_part.features.shape[1:]} do not match the "
                        f"checkpoint's {tuple(net.spec.input_shape)}")
    return train_part, eval_part


def cmd_train(cfg, out, log):
    tcfg = _train_config(cfg)
    train_part, eval_part = load_datasets(cfg, dtype=np.dtype(cfg["dtype"]).type)
    spec = NetworkSpec(train_part.features.shape[1:], cfg["stages"], train_part.class_count,
                       initial_bn=cfg["initial_bn"], initial_pool=cfg["initial_pool"],
                       dtype=cfg["dtype"], hidden=cfg["hidden"])
    net = build_network(spec, seed=cfg["seed"])
    log.info("training on %d samples, evaluating on %d", len(train_part), len(eval_part))
    report = train(net, train_part, tcfg, eval_dataset=eval_part,
                   progress=lambda r: log.info("epoch %d loss %.5f", r["epoch"], r["train_loss"]))
    save_checkpoint(net, out / "model.ckpt")
    (out / "train.txt").write_text("\n".join(report.to_lines()) + "\n")
    return f"eval_accuracy={report.final_eval_accuracy!r}"


def roundtrip_errors(net, X, chunk=512):
    errs = []
    for s in range(0, len(X), chunk):
        x = np.asarray(X[s:s + chunk], dtype=net.dtype)
        back = net.inverse_features(net.forward_features(x)).data
        diff = (back.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1)
        errs.append(np.linalg.norm(diff, axis=1))
    return np.concatenate(errs)


def cmd_roundtrip(cfg, out, log):
    net = _load_net(cfg)
    data = _pick(cfg, *_data_for(cfg, net))
    errs = roundtrip_errors(net, data.features)
    ok = float(errs.mean()) <= cfg["tolerance"]
    write_kv([("samples", len(errs)), ("max_l2", float(errs.max())), ("mean_l2", float(errs.mean())),
              ("median_l2", float(np.median(errs))), ("tolerance", cfg["tolerance"]),
              ("status", "pass" if ok else "fail")], out / "roundtrip.txt")
    if not ok:
        raise NumericFailure(f"mean reconstruction error {errs.mean():.3e} exceeds {cfg['tolerance']:g}")
    return f"mean_l2={errs.mean():.3e}"


def cmd_boundary(cfg, out, log):
    net = _load_net(cfg)
    if net.spec.input_shape != (2,) or net.feature_dim != 2:
        raise DataError("boundary tracing needs 2-dimensional input and feature spaces")
    data = _pick(cfg, *_data_for(cfg, net))
    pair = _class_pair(cfg) or (0, 1)
    spec = boundary_between(net, *pair)
    feats = net.forward_features(data.features).data.astype(np.float64)
    s_range = trace_range(spec, feats)
    trace = boundary_trace_2d(net, spec, s_range, cfg["points"])

    def sets(points):
        return [(points[data.labels == c], CLASS_COLORS[c % len(CLASS_COLORS)]) for c in range(data.class_count)]

    X = data.features.astype(np.float64)
    emit_svg_scatter(sets(X), trace.input_points, out / "input_domain.svg", "input domain")
    emit_svg_scatter(sets(feats), trace.feature_points, out / "feature_domain.svg", "feature domain")
    s = np.linspace(s_range[0], s_range[1], cfg["points"])
    rows = [(s[k], *trace.feature_points[k], *trace.input_points[k]) for k in range(len(s))]
    emit_csv(rows, out / "boundary.csv", header=["s", "t0", "t1", "x0", "x1"])
    margins = spec.margin(net.forward_features(trace.input_points.astype(net.dtype)).data)
    consistency = side_consistency(net, spec, trace, data.features)
    accuracy = evaluate(net, data)[0]
    # feature-space margin of separation: smallest |distance| of a sample to the plane
    distances = np.abs(spec.margin(feats)) / np.linalg.norm(spec.normal)
    write_kv([("class_i", pair[0]), ("class_j", pair[1]), ("points", cfg["points"]),
              ("max_abs_pushforward_margin", float(np.max(np.abs(margins)))),
              ("side_consistency", consistency), ("accuracy", accuracy),
              ("min_feature_distance", float(distances.min())),
              ("median_feature_distance", float(np.median(distances)))], out / "boundary.txt")
    return f"side_consistency={consistency!r}"


def _select(cfg, data):
    if cfg["index"] is not None and cfg["label"] is not None:
        raise UsageError("give either --index or --label, not both")
    if cfg["label"] is not None:
        hits = np.flatnonzero(data.labels == cfg["label"])
        if not len(hits):
            raise DataError(f"no sample with label {cfg['label']}")
        return int(hits[0])
    k = 0 if cfg["index"] is None else cfg["index"]
    if not 0 <= k < len(data):
        raise DataError(f"sample index {k} outside [0, {len(data)})")
    return k


def cmd_explain(cfg, out, log):
    net = _load_net(cfg)
    data = _pick(cfg, *_data_for(cfg, net))
    k = _select(cfg, data)
    x = data.features[k]
    pair = _class_pair(cfg)
    rep = explain_decision(net, x, pair)
    frames = interpolate_path(net, x, cfg["steps"], rep.class_pair)
    spec = boundary_between(net, *rep.class_pair)
    stack = np.stack(frames)
    frame_margins = spec.margin(net.forward_features(stack).data)
    probs = net.predict_proba(stack)
    if net.spec.input_kind == "image" and net.spec.input_shape[0] == 1:
        for i, f in enumerate(frames):
            emit_pgm(f[0], out / f"frame_{i:03d}.pgm")
        emit_pgm(np.concatenate([f[0] for f in frames], axis=1), out / "strip.pgm")
    emit_csv(rep.to_rows(), out / "explanation.csv")
    flat = stack.reshape(len(frames), -1).astype(np.float64)
    frame_rows = [{"frame": i, "alpha": i / (len(frames) - 1), "margin": float(frame_margins[i]),
                   "p_i": float(probs[i, rep.class_pair[0]]), "p_j": float(probs[i, rep.class_pair[1]])}
                  for i in range(len(frames))]
    emit_csv(frame_rows, out / "frames.csv")
    first_err = float(np.max(np.abs(flat[0] - x.reshape(-1).astype(np.float64))))
    write_kv([("sample", k), ("label", int(data.labels[k])), ("class_i", rep.class_pair[0]),
              ("class_j", rep.class_pair[1]), ("tie_broken", rep.tie_broken), ("margin", rep.margin),
              ("steps", len(frames)), ("first_frame_max_abs_error", first_err),
              ("last_frame_abs_margin", float(abs(frame_margins[-1])))], out / "report.txt")
    return f"classes={rep.class_pair} margin={rep.margin!r}"


def cmd_importance(cfg, out, log):
    net = _load_net(cfg)
    if net.spec.input_kind != "vector":
        raise DataError("importance charts need a vector-input checkpoint")
    data = _pick(cfg, *_data_for(cfg, net))
    pair = _class_pair(cfg)
    d = net.spec.input_shape[0]
    raw, rows = np.zeros((len(data), d)), []
    for n in range(len(data)):
        imp = feature_importance(net, data.features[n], pair)
        raw[n] = imp.values
        rows.append([n, int(data.labels[n]), imp.class_pair[0], imp.class_pair[1], imp.margin, *imp.values])
    emit_csv(rows, out / "importance_raw.csv",
             header=["sample", "label", "class_i", "class_j", "margin"] + [f"d{k}" for k in range(d)])
    mean = raw.mean(axis=0)
    total = mean.sum()
    norm = mean / total if total > 0 else np.zeros_like(mean)
    emit_csv([[k, mean[k], norm[k]] for k in range(d)], out / "importance_mean.csv",
             header=["dim", "mean", "normalized"])
    emit_svg_bars(norm, out / "importance.svg", title="normalized mean importance")
    ranking = np.argsort(-norm, kind="stable")
    return "top=" + ",".join(str(int(r)) for r in ranking[:3])


def cmd_export(cfg, out, log):
    train_part, eval_part = load_datasets(cfg)
    for name, part in (("train", train_part), ("eval", eval_part)):
        if part.features.ndim != 2:
            part = part.subset(np.arange(len(part)))
            part.features = part.features.reshape(len(part), -1)
        ds.to_csv(part, out / f"{name}.csv")
    return f"train={len(train_part)} eval={len(eval_part)}"


HANDLERS = {"train": cmd_train, "roundtrip": cmd_roundtrip, "boundary": cmd_boundary,
            "explain": cmd_explain, "importance": cmd_importance, "export": cmd_export}


def _echo(v):
    """Config values in a form the config-file reader accepts back."""
    if v is None:
        return "none"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return v


def _logger(out):
    log = logging.getLogger(f"invexplain.run.{out.resolve()}")
    log.handlers.clear()
    log.propagate = False
    log.setLevel(logging.INFO)
    fh = logging.FileHandler(out / "log.txt", mode="w")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    return log


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, out, cfg = resolve_config(argv)
    except UsageError as exc:
        print(f"invexplain: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"invexplain: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_DATA
    write_kv([("command", command)] + [(k, _echo(v)) for k, v in sorted(cfg.items())], out / "config.txt")
    log = _logger(out)
    log.info("command %s", command)
    try:
        summary = HANDLERS[command](cfg, out, log)
    except UsageError as exc:
        code, msg = EXIT_USAGE, f"usage error: {exc}"
    except (DivergenceError, NonFiniteError, NumericFailure) as exc:
        code, msg = EXIT_NUMERIC, f"numeric failure: {exc}"
    except (DataError, CheckpointError, ds.IDXFormatError, DegenerateBoundaryError, ShapeError,
            OSError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except ValueError as exc:
        code, msg = EXIT_USAGE, f"invalid configuration: {exc}"
    else:
        log.info("done: %s", summary)
        print(f"{command}: {summary}")
        return EXIT_OK
    finally:
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)
    print(f"invexplain: {msg}", file=sys.stderr)
    with open(out / "log.txt", "a") as fh:
        fh.write(msg + "\n")
    return code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
