"""Command-line entry point: ``cvit <subcommand> [options]``.

Exit codes: 0 success, 1 a check did not pass, 2 usage or config error,
3 data or file-format error, 4 numerical failure (NaN/Inf).
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources

import numpy as np

from . import tensor as T
from .analytics import apf, compare_to_backbone, cost_report, count_flops, emit_report
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .errors import (CheckpointError, ConfigError, ContractError, CvitError, DimensionError, DomainError,
                     ImageError, NonFiniteError)
from .imageio import load_image
from .model import (KD_TEACHER, PRESET_NAMES, ModelConfig, backbone_of, build, preset,
                    tiny_preset)
from .rng import RngState
from .train import (GRADCHECK_MODULES, KDParams, OptimConfig, gradcheck, make_toy_dataset,
                    train_loop)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
FORMATS = ("table", "csv", "json")

GRADCHECK_TOLERANCE = {"linear": 1e-6, "conv": 1e-6}
DEFAULT_GRID = ["chunks=1,2,4", "ratio=2,2.5,4", "cascade=on,off", "projection=on,off", "share=on,off"]


class UsageError(CvitError):
    pass


class DataFormatError(CvitError):
    pass


# -- shared helpers --------------------------------------------------------------

def _out(text):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _note(text):
    sys.stderr.write(text + "\n")


def _print_resolved(args, config=None, **extra):
    """Every run states what it is about to do on stderr, keeping stdout parseable."""
    settings = {"command": args.command, "seed": args.seed, "format": args.format}
    settings.update(extra)
    if config is not None:
        settings["model"] = config.to_dict()
    _note("resolved config: " + json.dumps(settings, sort_keys=True))


def _load_config_file(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return ModelConfig.from_json(text)


def _resolve_config(args, default_preset, tiny=False):
    if args.config:
        cfg = _load_config_file(args.config)
    else:
        name = getattr(args, "preset", None) or default_preset
        cfg = tiny_preset(name, num_classes=getattr(args, "classes", 2)) if tiny else preset(name)
    return cfg.validate()


def _rows_out(rows, columns, fmt, title=None):
    """Emit a list of dicts in the chosen format."""
    if fmt == "json":
        _out(json.dumps(rows if title is None else {title: rows}, indent=2))
        return
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
        _out(buf.getvalue())
        return
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    _out("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip())
    _out("  ".join("-" * w for w in widths))
    for row in cells:
        _out("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# -- describe / flops ------------------------------------------------------------

def cmd_describe(args):
    cfg = _resolve_config(args, "S")
    size = args.input or cfg.image_size
    _print_resolved(args, cfg, input=size, convention=args.convention)
    report = cost_report(build(cfg, RngState(args.seed).child("model")), size, args.convention)
    reduction = None
    if args.backbone and cfg.ffn == "ccffn":
        r = compare_to_backbone(cfg, backbone_of(cfg), size)
        reduction = {"param_reduction": r.param_reduction, "flop_reduction": r.flop_reduction}
    if args.format == "json":
        doc = {"config": cfg.to_dict(), "report": report.to_dict(),
               "mparams": report.mparams, "mflops": report.mflops, "apf": None}
        if reduction:
            doc["reduction"] = reduction
        _out(json.dumps(doc, indent=2))
        return EXIT_OK
    _out(emit_report(report, args.format))
    if args.format == "table":
        _out(f"params: {report.mparams:.3f} M   FLOPs: {report.mflops:.2f} M")
        _out("APF: n/a (needs measured top-1; run `cvit apf --top1 ACC --mflops "
             f"{report.mflops:.1f}`)")
        if reduction:
            _out(f"reduction vs plain-FFN backbone: params {reduction['param_reduction']:.2f}%  "
                 f"FLOPs {reduction['flop_reduction']:.2f}%")
    return EXIT_OK


def cmd_flops(args):
    cfg = _resolve_config(args, "S")
    size = args.input or cfg.image_size
    _print_resolved(args, cfg, input=size, convention=args.convention)
    report = count_flops(build(cfg, RngState(args.seed).child("model")), size, args.convention)
    if args.format == "json":
        _out(json.dumps({"config": cfg.to_dict(), "report": report.to_dict(), "mflops": report.mflops},
                        indent=2))
    else:
        _out(emit_report(report, args.format))
    return EXIT_OK


# -- apf -------------------------------------------------------------------------

def reference_rows():
    """Rows of the bundled accuracy/FLOPs/APF reference table."""
    text = resources.files("cvit").joinpath("data/apf_reference.csv").read_text(encoding="utf-8")
    return [{"model": r["model"], "top1": float(r["top1"]), "mflops": float(r["mflops"]),
             "printed": float(r["apf"])} for r in csv.DictReader(io.StringIO(text))]


def _mflops_from_describe(path):
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path} is not JSON: {e}") from None
    if isinstance(doc, dict) and "mflops" in doc:
        return float(doc["mflops"])
    try:
        return float(doc["report"]["totals"]["mflops"])
    except (KeyError, TypeError):
        raise DataFormatError(f"{path} has no mflops field; expected `cvit describe --format json` output") \
            from None


def cmd_apf(args):
    if args.describe_json:
        if args.top1 is None:
            raise UsageError("--describe-json needs --top1")
        mflops = _mflops_from_describe(args.describe_json)
    else:
        mflops = args.mflops
    _print_resolved(args, top1=args.top1, mflops=mflops, table=args.top1 is None)
    if args.top1 is None and mflops is None:
        rows = []
        for r in reference_rows():
            rec = apf(r["top1"], r["mflops"])
            rows.append({**r, "apf": round(rec.apf, 4), "match": abs(rec.apf - r["printed"]) <= 0.05})
        _rows_out(rows, ["model", "top1", "mflops", "apf", "printed", "match"], args.format, "rows")
        return EXIT_OK if all(r["match"] for r in rows) else EXIT_FAIL
    if args.top1 is None or mflops is None:
        raise UsageError("give both --top1 and --mflops (or --describe-json), or neither for the reference table")
    rec = apf(args.top1, mflops)
    _rows_out([{"top1": rec.top1, "mflops": rec.mflops, "apf": round(rec.apf, 1)}],
              ["top1", "mflops", "apf"], args.format)
    return EXIT_OK


# -- infer -----------------------------------------------------------------------

def _softmax(z):
    z = z.astype(np.float64) - z.max()
    e = np.exp(z)
    return e / e.sum()


def run_inference(model, images, threads=1):
    """Logits for each (3, H, W) image. Each image is its own forward pass, so
    results are bit-identical for any thread count."""
    model.eval()

    def one(img):
        with T.no_grad():
            return model(T.tensor(img[None])).data[0]

    if threads <= 1:
        return [one(x) for x in images]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, images))


def cmd_infer(args):
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        cfg = model.config
    else:
        cfg = _resolve_config(args, "S")
        model = build(cfg, RngState(args.seed).child("model"))
    _print_resolved(args, cfg, checkpoint=args.checkpoint, images=args.image, random=args.random,
                    topk=args.topk, threads=args.threads)
    size = cfg.image_size
    names, images = [], []
    for path in args.image or []:
        names.append(path)
        images.append(load_image(path, size))
    rng = RngState(args.seed).child("images")
    for i in range(args.random):
        names.append(f"random:{i}")
        images.append(rng.child(i).normal((cfg.in_channels, size, size)))
    if not images:
        raise UsageError("nothing to classify: pass --image FILE or --random N")
    logits = run_inference(model, images, args.threads)
    k = min(args.topk, cfg.num_classes)
    rows = []
    for name, z in zip(names, logits):
        p = _softmax(z)
        order = np.argsort(-z, kind="stable")[:k]
        for rank, c in enumerate(order, 1):
            rows.append({"image": name, "rank": rank, "class": int(c), "logit": float(z[c]),
                         "score": float(p[c])})
    _rows_out(rows, ["image", "rank", "class", "logit", "score"], args.format, "predictions")
    return EXIT_OK


# -- training --------------------------------------------------------------------

def _optim(args):
    return OptimConfig(max_lr=args.lr, min_lr=args.min_lr, weight_decay=args.weight_decay,
                       epochs=args.epochs, batch_size=args.batch_size)


def _dataset(args):
    return make_toy_dataset(num_classes=args.classes, image_size=args.image_size, noise=args.noise,
                            seed=args.seed)


def _trace_rows(trace, **extra):
    return [{**extra, "epoch": r.epoch, "lr": r.lr, "train_loss": r.train_loss, "val_acc": r.val_acc}
            for r in trace]


def cmd_train_toy(args):
    cfg = _resolve_config(args, "S", tiny=True).replace(image_size=args.image_size)
    optim = _optim(args)
    _print_resolved(args, cfg, optim=optim.__dict__, noise=args.noise)
    model = build(cfg, RngState(args.seed).child("model"))
    trace = train_loop(model, _dataset(args), optim, rng=RngState(args.seed).child("train"))
    _rows_out(_trace_rows(trace), ["epoch", "lr", "train_loss", "val_acc"], args.format, "trace")
    if args.save:
        save_checkpoint(model, args.save)
        _note(f"saved checkpoint to {args.save}")
    return EXIT_OK


def cmd_distill(args):
    student_cfg = _resolve_config(args, "S", tiny=True).replace(image_size=args.image_size)
    optim = _optim(args)
    kd = KDParams(args.alpha, args.temperature)
    if args.teacher_checkpoint:
        teacher = load_checkpoint(args.teacher_checkpoint)
        teacher_cfg = teacher.config
    else:
        base = (args.preset or "S") if not args.config else "S"
        name = args.teacher or KD_TEACHER.get(base, "L")
        teacher_cfg = tiny_preset(name, num_classes=args.classes, image_size=args.image_size)
        teacher = None
    _print_resolved(args, student_cfg, teacher=teacher_cfg.to_dict(), optim=optim.__dict__,
                    alpha=kd.alpha, temperature=kd.temperature)
    if teacher_cfg.num_classes != student_cfg.num_classes:
        raise ConfigError("teacher and student must have the same number of classes")
    data = _dataset(args)
    rows = []
    if teacher is None:
        teacher = build(teacher_cfg, RngState(args.seed).child("teacher"))
        t_trace = train_loop(teacher, data, optim, rng=RngState(args.seed).child("teacher-train"))
        rows.append({"run": "teacher", "model": teacher_cfg.name, "val_acc": t_trace.final_val_acc,
                     "train_loss": t_trace.losses[-1]})
    runs = [("student", (teacher, kd))]
    if not args.no_baseline:
        runs.insert(0, ("baseline", None))
    for label, pair in runs:
        model = build(student_cfg, RngState(args.seed).child("model"))
        tr = train_loop(model, data, optim, kd=pair, rng=RngState(args.seed).child("train"))
        rows.append({"run": label, "model": student_cfg.name, "val_acc": tr.final_val_acc,
                     "train_loss": tr.losses[-1]})
    _rows_out(rows, ["run", "model", "val_acc", "train_loss"], args.format, "runs")
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args):
    modules = args.module or list(GRADCHECK_MODULES)
    _print_resolved(args, modules=modules, dims=args.dims, eps=args.eps)
    rows = []
    for name in modules:
        err = gradcheck(name, dims=args.dims, seed=args.seed, eps=args.eps)
        tol = GRADCHECK_TOLERANCE.get(name, 1e-4)
        rows.append({"module": name, "max_rel_error": err, "tolerance": tol, "pass": err < tol})
    _rows_out(rows, ["module", "max_rel_error", "tolerance", "pass"], args.format, "checks")
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_FAIL


# -- ablate ----------------------------------------------------------------------

_GRID_KEYS = {"chunks": int, "ratio": float, "cascade": "bool", "projection": "bool", "share": "bool"}


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise UsageError(f"expected on/off, got {text!r}")


def parse_grid(items):
    axes = {"chunks": [2], "ratio": [2.5], "cascade": [True], "projection": [False], "share": [False]}
    for item in items:
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or key not in _GRID_KEYS or not values.strip():
            raise UsageError(f"bad grid axis {item!r}; use key=v1,v2 with key in {sorted(_GRID_KEYS)}")
        conv = _GRID_KEYS[key]
        try:
            axes[key] = [_parse_bool(v) if conv == "bool" else conv(v) for v in values.split(",")]
        except ValueError:
            raise UsageError(f"bad value in grid axis {item!r}") from None
    return axes


def ablation_rows(base, axes, input_size, seed=0, train=None):
    """One row per grid combination; invalid combinations carry an ``error`` instead of counts."""
    rows = []
    keys = list(axes)
    for combo in itertools.product(*(axes[k] for k in keys)):
        point = dict(zip(keys, combo))
        row = {**point, "params": None, "unique_params": None, "mflops": None, "val_acc": None, "error": ""}
        cfg = base.replace(chunks=point["chunks"], expansion=point["ratio"], cascade=point["cascade"],
                           projection=point["projection"], weight_sharing=point["share"])
        try:
            cfg.validate()
            model = build(cfg, RngState(seed).child("model"))
            rep = cost_report(model, input_size)
            row.update(params=rep.total_params, unique_params=rep.total_unique_params, mflops=rep.mflops)
            if train is not None:
                data, optim, tiny_base = train
                tcfg = tiny_base.replace(chunks=cfg.chunks, expansion=cfg.expansion, cascade=cfg.cascade,
                                         projection=cfg.projection, weight_sharing=cfg.weight_sharing)
                tcfg.validate()
                tm = build(tcfg, RngState(seed).child("model"))
                row["val_acc"] = train_loop(tm, data, optim, rng=RngState(seed).child("train")).final_val_acc
        except (ConfigError, DimensionError) as e:
            row["error"] = str(e)
        rows.append(row)
    return rows


def cmd_ablate(args):
    base = _resolve_config(args, "M")
    axes = parse_grid(args.grid or DEFAULT_GRID)
    size = args.input or base.image_size
    _print_resolved(args, base, grid=axes, input=size, train=args.train)
    train = None
    if args.train:
        tiny = tiny_preset(args.preset or "M", num_classes=args.classes, image_size=args.image_size)
        train = (_dataset(args), _optim(args), tiny)
    rows = ablation_rows(base, axes, size, args.seed, train)
    cols = ["chunks", "ratio", "cascade", "projection", "share", "params", "unique_params", "mflops"]
    cols += ["val_acc"] if args.train else []
    _rows_out(rows, cols + ["error"], args.format, "rows")
    return EXIT_OK


# -- checkpoint ------------------------------------------------------------------

def cmd_checkpoint(args):
    if args.action == "save":
        cfg = _resolve_config(args, "S")
        _print_resolved(args, cfg, action="save", path=args.path)
        save_checkpoint(build(cfg, RngState(args.seed).child("model")), args.path)
        _out(f"wrote {args.path}")
        return EXIT_OK
    if args.action == "inspect":
        cfg, entries = read_checkpoint(args.path)
        _print_resolved(args, cfg, action="inspect", path=args.path)
        rows = []
        for name, v in entries.items():
            if isinstance(v, tuple):
                rows.append({"name": name, "shape": "", "dtype": "", "ref": v[1]})
            else:
                rows.append({"name": name, "shape": "x".join(map(str, v.shape)), "dtype": str(v.dtype), "ref": ""})
        _rows_out(rows, ["name", "shape", "dtype", "ref"], args.format, "tensors")
        return EXIT_OK
    model = load_checkpoint(args.path)
    _print_resolved(args, model.config, action="verify", path=args.path)
    x = RngState(args.seed).child("probe").normal((1, model.config.in_channels, model.config.image_size,
                                                    model.config.image_size))
    z = run_inference(model, [x[0]])[0]
    _rows_out([{"path": args.path, "tensors": len(list(model.named_parameters())), "finite": bool(np.isfinite(z).all()),
                "logit_sum": float(z.sum())}], ["path", "tensors", "finite", "logit_sum"], args.format)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _global_options(parser, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="seed for every random choice (default 0)")
    parser.add_argument("--config", default=d(None), help="model config JSON file (overrides --preset)")
    parser.add_argument("--format", choices=FORMATS, default=d("table"), help="output format")


def _model_options(p, presets=PRESET_NAMES):
    p.add_argument("--preset", choices=presets, help="named model configuration")


def _train_options(p, epochs=20):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--min-lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=1.25e-2)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=64)


def build_parser():
    parser = argparse.ArgumentParser(prog="cvit", description="Cascaded-chunk ViT toolkit")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)

    def add(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=fn)
        return p

    p = add("describe", cmd_describe, "per-layer parameter and FLOP report")
    _model_options(p)
    p.add_argument("--input", type=int, help="input resolution (default: config image_size)")
    p.add_argument("--convention", choices=("mac", "2mac"), default="mac")
    p.add_argument("--backbone", action="store_true", help="also report savings over the plain-FFN backbone")

    p = add("flops", cmd_flops, "FLOP-only report")
    _model_options(p)
    p.add_argument("--input", type=int)
    p.add_argument("--convention", choices=("mac", "2mac"), default="mac")

    p = add("apf", cmd_apf, "accuracy per log10 MFLOP; no arguments reproduces the reference table")
    p.add_argument("--top1", type=float)
    p.add_argument("--mflops", type=float)
    p.add_argument("--describe-json", help="take MFLOPs from `describe --format json` output")

    p = add("infer", cmd_infer, "classify PPM images or random inputs")
    _model_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", action="append", help="binary PPM (P6) file; repeatable")
    p.add_argument("--random", type=int, default=0, metavar="N", help="classify N seeded random inputs")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)

    p = add("train-toy", cmd_train_toy, "train a tiny model on the synthetic set")
    _model_options(p, ("S", "M", "L", "XL"))
    _train_options(p)
    p.add_argument("--save", help="write the trained model to this checkpoint path")

    p = add("distill", cmd_distill, "knowledge distillation at toy scale")
    _model_options(p, ("S", "M", "L", "XL"))
    _train_options(p)
    p.add_argument("--teacher", choices=("S", "M", "L", "XL"), help="teacher preset (default by student)")
    p.add_argument("--teacher-checkpoint")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--no-baseline", action="store_true", help="skip the no-distillation run")

    p = add("gradcheck", cmd_gradcheck, "autodiff vs finite differences in float64")
    p.add_argument("--module", action="append", choices=GRADCHECK_MODULES)
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--eps", type=float, default=1e-4)

    p = add("ablate", cmd_ablate, "cost matrix over FFN ablation settings")
    _model_options(p)
    p.add_argument("--grid", nargs="+", action="extend", metavar="KEY=V1,V2", help=f"axes (default: {' '.join(DEFAULT_GRID)})")
    p.add_argument("--input", type=int)
    p.add_argument("--train", action="store_true", help="add toy-train validation accuracy per row")
    _train_options(p, epochs=10)

    p = add("checkpoint", cmd_checkpoint, "save, inspect or verify checkpoint files")
    p.add_argument("action", choices=("save", "inspect", "verify"))
    p.add_argument("path")
    _model_options(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteError as e:
        _note(f"error[nonfinite]: {e}")
        return EXIT_NUMERIC
    except CheckpointError as e:
        _note(f"error[{e.code}]: {e}")
        return EXIT_DATA
    except DataFormatError as e:
        _note(f"error[data]: {e}")
        return EXIT_DATA
    except (UsageError, ConfigError, ContractError, DomainError, DimensionError, ImageError) as e:
        _note(f"error[usage]: {e}")
        return EXIT_USAGE
    except OSError as e:
        _note(f"error[io]: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
