"""grumo command line: gen-data, train, estimate, evaluate, compare.

Exit codes: 0 success, 1 usage error, 2 data or contract violation.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io, metrics, plots, synth
from . import model as M
from .methods import default_methods, resolve

log = logging.getLogger("grumo")

TABLE_COLUMNS = ["method", "absrel_ause", "absrel_aurg", "rmse_ause", "rmse_aurg",
                 "delta_ause", "delta_aurg", "nuce"]
SCENE_FILES = ("depth.gt01", "uncert.gt01", "mask.gt01")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(x) -> str:
    return f"{x:.6g}"


def _threads() -> int:
    cpu = os.cpu_count() or 1
    try:
        want = int(os.environ.get("GRUMO_THREADS", cpu))
    except ValueError:
        raise UsageError("GRUMO_THREADS must be an integer") from None
    return max(1, min(want, cpu))


def _pmap(fn, items):
    n = _threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    io.atomic_write(path, buf.getvalue().encode("utf-8"))


def _parse_size(s: str):
    m = re.fullmatch(r"(\d+)(?:x(\d+))?", s.strip())
    if not m:
        raise UsageError(f"--size must be N or HxW, got {s!r}")
    h = int(m.group(1))
    return h, int(m.group(2) or h)


def _safe_name(spec: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", spec)


# --------------------------------------------------------------------------

def cmd_gen_data(a):
    if a.count < 0:
        raise UsageError("--count must be >= 0")
    out = Path(a.out)
    if out.exists() and any(out.iterdir()) and not a.force:
        raise ValueError(f"{out} exists and is not empty (use --force)")
    h, w = _parse_size(a.size)
    ss = synth.make_sceneset(a.seed, a.count, h, w, a.dmin, a.dmax, split=a.split)
    synth.write_sceneset(ss, out)
    log.info("wrote %d scenes to %s", len(ss), out)


def cmd_train(a):
    data = synth.read_sceneset(a.data)
    test = synth.read_sceneset(a.test) if a.test else None
    if test is not None and set(test.seeds) & set(data.seeds):
        raise ValueError("train and test sets share seeds")
    cfg = M.ModelConfig(predictive=a.predictive, d_min=data.d_min, d_max=data.d_max)
    model = M.train_fixture(cfg, data, a.epochs, a.seed, lr=a.lr, batch_size=a.batch_size, test=test)
    M.save_model(model, a.out)
    log.info("fixture abs rel %.4f", model.fixture_abs_rel)


def _method_from_args(a, spec):
    return resolve(spec, aug=a.aug, layer=a.layer, layers=a.layers, fusion=a.fusion,
                   lam=a.lam, loss=a.loss)


def run_estimate(model, data, method, out: Path, resume: bool = False):
    out.mkdir(parents=True, exist_ok=True)
    if method.grad is not None:
        method.grad.check(model.config.decoder_layers)

    def one(sc):
        d = out / str(sc.seed)
        if resume and all((d / f).exists() for f in SCENE_FILES + ("uncert.pgm",)):
            return
        depth, u = method.run(model, sc.image)
        io.write_gt01(d / "depth.gt01", depth.data)
        u32 = u.values.astype(np.float32)   # PGM quantizes the stored values
        io.write_gt01(d / "uncert.gt01", u32[None, None])
        io.write_pgm16(d / "uncert.pgm", u32)
        io.write_gt01(d / "mask.gt01", u.mask[None, None].astype(np.float32))

    _pmap(one, list(data))
    run = {"method": method.spec, "config": method.describe(), "seeds": data.seeds}
    io.atomic_write(out / "run.json", (json.dumps(run, indent=2) + "\n").encode("utf-8"))


def cmd_estimate(a):
    model = M.load_model(a.model)
    data = synth.read_sceneset(a.data)
    method = _method_from_args(a, a.method)
    run_estimate(model, data, method, Path(a.out), a.resume)


def _load_predictions(pred_dir: Path, data):
    missing = [sc.seed for sc in data if not all((pred_dir / str(sc.seed) / f).exists() for f in SCENE_FILES)]
    if missing:
        raise ValueError(f"{pred_dir}: missing predictions for scenes {missing}")
    items = []
    for sc in data:
        d = pred_dir / str(sc.seed)
        mask = io.read_gt01(d / "mask.gt01") > 0.5
        items.append((sc.seed, sc.depth_gt.data, io.read_gt01(d / "depth.gt01"),
                      io.read_gt01(d / "uncert.gt01"), mask))
    return items


def _method_name(pred_dir: Path) -> str:
    try:
        return json.loads((pred_dir / "run.json").read_text(encoding="utf-8"))["method"]
    except (FileNotFoundError, KeyError, json.JSONDecodeError):
        return pred_dir.name


def write_reports(reports, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    rows, spars = [], []
    for r in reports:
        for kind, c in r.curves.items():
            rows.append([r.method, kind, _fmt(c.ause), _fmt(c.aurg), _fmt(r.depth[kind])])
            for img_id, res in zip(r.image_ids, r.per_image[kind]):
                for f, o, ac, rd in zip(res.fractions, res.oracle, res.actual, res.random):
                    spars.append([_fmt(f), _fmt(o), _fmt(ac), _fmt(rd), kind, r.method, img_id])
            for f, o, ac, rd in zip(c.fractions, c.oracle, c.actual, c.random):
                spars.append([_fmt(f), _fmt(o), _fmt(ac), _fmt(rd), kind, r.method, "mean"])
        rows.append([r.method, "nUCE", "", "", _fmt(r.nuce)])
    _write_csv(out / "report.csv", ["method", "metric", "ause", "aurg", "value"], rows)
    _write_csv(out / "sparsification.csv",
               ["fraction", "oracle", "actual", "random", "metric", "method", "image_id"], spars)


def evaluate_dirs(pred_dirs, data, steps, bins):
    reports = []
    for p in pred_dirs:
        p = Path(p)
        items = _load_predictions(p, data)
        reports.append(metrics.evaluate_method(_method_name(p), items, steps, bins))
    return reports


def cmd_evaluate(a):
    data = synth.read_sceneset(a.data)
    reports = evaluate_dirs(a.pred_dir, data, a.steps, a.bins)
    out = Path(a.out)
    write_reports(reports, out)
    for r in reports:
        plots.sparsification_figure(r, out / f"sparsification_{_safe_name(r.method)}.png")


def table_rows(reports):
    rows = []
    for r in sorted(reports, key=lambda r: r.method):
        c = r.curves
        rows.append([r.method] + [_fmt(getattr(c[k], s)) for k in metrics.METRICS for s in ("ause", "aurg")]
                    + [_fmt(r.nuce)])
    return rows


def cmd_compare(a):
    model = M.load_model(a.model)
    data = synth.read_sceneset(a.data)
    specs = a.methods or default_methods(model.config.predictive)
    if len(set(specs)) != len(specs):
        raise UsageError("duplicate method specs")
    out = Path(a.out)
    reports = []
    for spec in sorted(specs):
        try:
            method = _method_from_args(a, spec)
            pred = out / "preds" / _safe_name(spec)
            run_estimate(model, data, method, pred)
            rep = evaluate_dirs([pred], data, a.steps, a.bins)[0]
        except (ValueError, KeyError, OSError) as e:
            raise ValueError(f"method {spec!r} failed: {e}") from e
        reports.append(rep)
    write_reports(reports, out)
    _write_csv(out / "table.csv", TABLE_COLUMNS, table_rows(reports))
    plots.comparison_figure(reports, out / "sparsification_error.png")


# --------------------------------------------------------------------------

def _grad_flags(p):
    p.add_argument("--aug", help="augmentation spec for gradient methods (default hflip / feat-hflip)")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the variance term (default 2.0)")
    p.add_argument("--layer", type=int, help="single decoder layer, 1-based (default 6)")
    p.add_argument("--layers", type=lambda s: [int(x) for x in s.split(",")],
                   help="comma-separated layers for multi-layer fusion (default 5,6,7,8)")
    p.add_argument("--fusion", choices=["max", "mean", "var"])
    p.add_argument("--loss", choices=["auto", "aux", "predictive"])


def build_parser():
    ap = _Parser(prog="grumo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic scene set")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", default="64")
    p.add_argument("--dmin", type=float, default=1.0)
    p.add_argument("--dmax", type=float, default=10.0)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the fixture depth model")
    p.add_argument("--data", required=True)
    p.add_argument("--test", help="held-out scene set for the recorded Abs Rel")
    p.add_argument("--out", required=True)
    p.add_argument("--predictive", action="store_true")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("estimate", parents=[common], help="write depth and uncertainty per scene")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="ours")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="skip scenes already written")
    _grad_flags(p)
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("evaluate", parents=[common], help="sparsification and nUCE for prediction directories")
    p.add_argument("--pred-dir", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    p.add_argument("--steps", type=int, default=metrics.DEFAULT_STEPS)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="estimate + evaluate several methods into one table")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--methods", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    p.add_argument("--steps", type=int, default=metrics.DEFAULT_STEPS)
    _grad_flags(p)
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:   # --help, or a usage error from the parser
        return e.code if isinstance(e.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except UsageError as e:
        print(f"grumo: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError, OSError) as e:
        print(f"grumo: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
