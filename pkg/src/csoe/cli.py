"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data or parse
error (including I/O), 3 numeric failure.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import evalx
from .config import load_config
from .errors import ConfigError, CsoeError, NumericError, ParseError, UsageError
from .radon import PointSet, Sinogram, decode_sinogram, load_map, radon_forward, save_map, save_sinogram
from .recovery import ista_solve
from .sensing import encode, load_code, make_sensing_matrix, save_code, save_sensing_matrix
from .serialize import atomic_write_text, dumps_json

MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# dataset files

def format_annotations(points):
    """One ``x,y`` line per head, ``x`` being the column."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return "".join(f"{float(c)!r},{float(r)!r}\n" for r, c in pts)


def parse_annotations(text, frame, source="<annotations>"):
    pts = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"{source}:{lineno}: expected 'x,y', got {raw!r}")
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"{source}:{lineno}: non-numeric coordinate in {raw!r}") from None
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ParseError(f"{source}:{lineno}: non-finite coordinate in {raw!r}")
        if not (0 <= y < frame[0] and 0 <= x < frame[1]):
            raise ParseError(f"{source}:{lineno}: point ({x}, {y}) lies outside the "
                             f"{frame[1]}x{frame[0]} frame")
        pts.append((y, x))
    return PointSet(np.array(pts, dtype=np.float64).reshape(-1, 2), tuple(frame))


def read_text(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None


def read_annotations(path, frame):
    return parse_annotations(read_text(path), frame, str(path))


def load_png(path):
    """8-bit grayscale PNG mapped to ``[0, 1]``; needs the optional Pillow package."""
    try:
        from PIL import Image
    except ImportError:
        raise UsageError("reading PNG images needs Pillow (pip install 'artifact[png]')") from None
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ParseError(f"{path}: expected an 8-bit grayscale PNG, got mode {im.mode}")
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None


def load_image(path):
    return load_png(path) if str(path).lower().endswith(".png") else load_map(path)


def _sha256_file(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise UsageError(f"no dataset manifest at {path}")
    try:
        manifest = json.loads(read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})") from None
    if "entries" not in manifest or "frame" not in manifest:
        raise ParseError(f"{path}: manifest needs 'frame' and 'entries'")
    return manifest


def load_dataset(data_dir, verify=True):
    """Return ``(manifest, [(image (1,H,W), PointSet), ...])``."""
    manifest = load_manifest(data_dir)
    frame = tuple(manifest["frame"])
    items = []
    for i, entry in enumerate(manifest["entries"]):
        img_path = os.path.join(data_dir, entry["image"])
        if verify and "image_sha256" in entry and _sha256_file(img_path) != entry["image_sha256"]:
            raise ParseError(f"{img_path}: checksum does not match manifest entry {i}")
        image = load_map(img_path)
        if image.shape != frame:
            raise ParseError(f"{img_path}: image shape {image.shape} differs from frame {frame}")
        pts = read_annotations(os.path.join(data_dir, entry["annotations"]), frame)
        if "count" in entry and entry["count"] != len(pts):
            raise ParseError(f"{entry['annotations']}: {len(pts)} points but manifest says {entry['count']}")
        items.append((image[None], pts))
    return manifest, items


def scenes_from_dataset(items, angles):
    from .training import Scene
    return [Scene(img, pts, radon_forward(pts, angles)) for img, pts in items]


def _meta(cfg, **extra):
    return {"config_hash": cfg.digest(), "seeds": {"data": cfg.data_seed, "model": cfg.model_seed,
                                                   "D": cfg.d_seed}, **extra}


def _comment(cfg):
    return f"# config_hash={cfg.digest()} data_seed={cfg.data_seed} model_seed={cfg.model_seed} " \
           f"d_seed={cfg.d_seed}\n"


# ---------------------------------------------------------------------------
# commands

def cmd_print_config(args, cfg):
    sys.stdout.write(cfg.dump())
    return 0


def cmd_gen_data(args, cfg):
    from .training import make_scenes
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    seed = cfg.data_seed if args.seed is None else args.seed
    scenes = make_scenes(seed, args.count, cfg.frame, (cfg.k_min, cfg.k_max),
                         (cfg.sigma_min, cfg.sigma_max), cfg.min_sep, cfg.hyper().angles)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        img_name, ann_name = f"scene_{i:05d}.map", f"scene_{i:05d}.txt"
        save_map(os.path.join(args.out, img_name), scene.image[0])
        atomic_write_text(os.path.join(args.out, ann_name), format_annotations(scene.truth.points))
        entries.append({"image": img_name, "annotations": ann_name, "count": len(scene.truth),
                        "image_sha256": _sha256_file(os.path.join(args.out, img_name))})
    manifest = {"format_version": 1, "frame": list(cfg.frame), "count": len(entries), "seed": seed,
                "entries": entries, **_meta(cfg)}
    atomic_write_text(os.path.join(args.out, MANIFEST), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    load_dataset(args.out)  # self-check
    print(f"wrote {len(entries)} scenes to {args.out}")
    return 0


def cmd_encode(args, cfg):
    hp = cfg.hyper()
    pts = read_annotations(args.annotations, cfg.frame)
    D = make_sensing_matrix(hp.code_rows, hp.n, cfg.d_seed)
    sino = radon_forward(pts, hp.angles)
    code = encode(D, sino)
    os.makedirs(args.out, exist_ok=True)
    save_sinogram(os.path.join(args.out, "sinogram.bin"), sino, **_meta(cfg))
    save_code(os.path.join(args.out, "code.bin"), code)
    save_sensing_matrix(os.path.join(args.out, "sensing.bin"), D)
    print(f"encoded {len(pts)} points: sinogram {sino.n}x{sino.r}, code {code.m}x{sino.r}")
    return 0


def decode_code(code, frame, lam_rel=1e-3, iters=2000, rel_threshold=0.4, min_distance=4.0):
    """Oracle decoding of a code matrix: ISTA per column, then FBP and peaks."""
    D = make_sensing_matrix(code.m, code.n, code.seed).values
    scale = np.max(np.abs(D.T @ code.values), axis=0)
    # all-zero columns stay zero for any positive lambda
    a = ista_solve(D, code.values, lam_rel * np.where(scale > 0, scale, 1.0), iters)
    sino = Sinogram(a, code.angles, frame)
    return decode_sinogram(sino, rel_threshold, min_distance)


def _write_points(path, pts, cfg, **extra):
    doc = {"points": [[float(r), float(c)] for r, c in pts.points], "count": len(pts),
           "frame": list(pts.frame), **_meta(cfg), **extra}
    atomic_write_text(path, dumps_json(doc) + "\n")


def cmd_decode(args, cfg):
    if args.code:
        pts = decode_code(load_code(args.code), cfg.frame)
        source = "code"
    else:
        if not (args.model and args.image):
            raise UsageError("decode needs --code, or both --model and --image")
        from .training import decode, load_model
        model = _load_model(args.model)
        image = load_image(args.image)
        if image.shape != model.hyper.frame:
            raise ParseError(f"{args.image}: image shape {image.shape} differs from model frame "
                             f"{model.hyper.frame}")
        pts, _ = decode(model, image[None])
        source = "model"
    if args.out:
        _write_points(args.out, pts, cfg, source=source)
    if args.annotations_out:
        atomic_write_text(args.annotations_out, format_annotations(pts.points))
    print(f"count {len(pts)}")
    return 0


def _load_model(path):
    from .training import load_model
    if not os.path.exists(path):
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def cmd_train(args, cfg):
    from .training import build_model, format_log, save_model, train_loop
    _, items = load_dataset(args.data)
    hp = cfg.hyper()
    scenes = scenes_from_dataset(items, hp.angles)
    model = build_model(hp, cfg.model_seed, cfg.d_seed)

    def progress(rec):
        if args.verbose and rec["step"] % 100 == 0:
            print(f"step {rec['step']} total {rec['total']:.5g} l2 {rec['l2']:.5g} l1 {rec['l1']:.5g}")
    model, log = train_loop(model, scenes, cfg.train_config(), checkpoint_path=args.checkpoint,
                            resume=args.resume, progress=progress)
    save_model(args.out, model, {"meta": _meta(cfg), "config": cfg.to_dict()})
    if args.log:
        atomic_write_text(args.log, _comment(cfg) + format_log(log))
    if log:
        print(f"trained {len(log)} steps, final loss {log[-1]['total']:.6g}")
    return 0


def cmd_eval(args, cfg):
    manifest, items = load_dataset(args.data)
    frame = tuple(manifest["frame"])
    gts = [pts for _, pts in items]
    if args.predictions:
        preds = [read_annotations(os.path.join(args.predictions, e["annotations"]), frame)
                 for e in manifest["entries"]]
    elif args.model:
        from .training import decode_batch
        model = _load_model(args.model)
        preds = decode_batch(model, np.stack([img for img, _ in items])) if items else []
    else:
        raise UsageError("eval needs --model or --predictions")
    rows, summary = evalx.evaluate(preds, gts, cfg.eval_threshold, cfg.matching)
    meta = _meta(cfg, data=manifest.get("config_hash"))
    evalx.write_report(args.out, rows, summary, meta)
    if len(items) >= cfg.group_count:
        groups = evalx.density_group_analysis(list(zip(gts, preds)), cfg.group_count, cfg.eval_threshold)
        atomic_write_text(f"{args.out}_density.csv", _comment(cfg) + evalx.rows_to_csv(groups))
    if "mae" in summary:
        print(f"F1 {summary['f1']:.4f}  precision {summary['precision']:.4f}  recall {summary['recall']:.4f}"
              f"  MAE {summary['mae']:.4f}  RMSE {summary['rmse']:.4f}  (threshold {cfg.eval_threshold} px)")
    else:
        print("no images")
    return 0


def cmd_gradcheck(args, cfg):
    from . import gradcheck as gc
    recon = gc.recon_suite(args.instances, args.seed)
    cos = gc.approx_cosine_suite(args.cosine_instances, args.seed)
    obs = gc.obsnet_suite(args.seed)
    checks = [
        ("exact dx vs finite differences", recon["max_rel_dx"], 1e-4),
        ("exact dD vs finite differences", recon["max_rel_dD"], 1e-4),
        ("exact dD(:,q) == 0", 0.0 if recon["q_zero"] else 1.0, 0.5),
        ("approx dx cosine (1 - min)", 1.0 - float(cos.min()), 0.1),
        ("MDCB backward", obs["mdcb"], 1e-4),
        ("ARFW backward", obs["arfw"], 1e-4),
        ("center-pool backward", obs["center_pool"], 1e-4),
        ("observation network end to end", obs["end_to_end"], 1e-3),
    ]
    ok = True
    for name, value, tol in checks:
        good = value < tol
        ok &= good
        print(f"{'ok  ' if good else 'FAIL'} {name}: {value:.3e} (limit {tol:g})")
    if not ok:
        raise NumericError("gradient check failed")
    return 0


def _parse_toggle_sets(text):
    if text == "all":
        return evalx.valid_configs()
    out = []
    for label in text.split(";"):
        label = label.strip()
        toggles = frozenset() if label in ("", "none") else frozenset(t.strip().upper() for t in label.split("+"))
        try:
            out.append(evalx.validate_toggles(toggles))
        except ConfigError as exc:
            raise UsageError(f"invalid ablation configuration {label!r}: {exc}") from None
    return out


def cmd_ablate(args, cfg):
    configs = _parse_toggle_sets(args.configs)
    _, train_items = load_dataset(args.data)
    _, test_items = load_dataset(args.test)
    hp = cfg.hyper()
    table = evalx.ablation_run(configs, scenes_from_dataset(train_items, hp.angles),
                               scenes_from_dataset(test_items, hp.angles), hp, cfg.train_config(),
                               cfg.eval_threshold, cfg.model_seed, cfg.d_seed)
    evalx.write_report(args.out, table, {"configs": len(table), "threshold": cfg.eval_threshold},
                       _meta(cfg))
    for row in table:
        print(f"{row['config']:<20} F1 {row['f1']:.4f}  MAE {row['mae']:.3f}")
    return 0


def cmd_report(args, cfg):
    merged = {}
    for path in args.inputs:
        text = "".join(line for line in read_text(path).splitlines(True) if not line.startswith("#"))
        rows = evalx.csv_to_rows(text)
        numeric = {}
        for key in (rows[0] if rows else {}):
            vals = [r[key] for r in rows if isinstance(r[key], (int, float))]
            if len(vals) == len(rows):
                numeric[key] = {"mean": float(np.mean(vals)), "min": float(np.min(vals)),
                                "max": float(np.max(vals))}
        merged[os.path.basename(path)] = {"rows": len(rows), "columns": numeric}
    atomic_write_text(args.out, dumps_json({"reports": merged, **_meta(cfg)}) + "\n")
    print(f"merged {len(merged)} reports into {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="csoe", description="Compressed-sensing output encoding for point localization.")
    p.add_argument("--config", help="flat key = value configuration file")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("print-config", help="print every configuration key with its value")

    s = sub.add_parser("gen-data", help="write a synthetic dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override data_seed")

    s = sub.add_parser("encode", help="annotations -> sinogram and code files")
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("decode", help="code (oracle solver) or model + image -> points")
    s.add_argument("--code")
    s.add_argument("--model")
    s.add_argument("--image", help="binary map or 8-bit grayscale PNG")
    s.add_argument("--out")
    s.add_argument("--annotations-out")

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--checkpoint")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--verbose", action="store_true")

    s = sub.add_parser("eval", help="evaluate a model or prediction files on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--model")
    s.add_argument("--predictions", help="directory of annotation files named as in the manifest")
    s.add_argument("--out", required=True, help="report prefix (.csv and .json are added)")

    s = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=50)
    s.add_argument("--cosine-instances", type=int, default=100)

    s = sub.add_parser("ablate", help="train and evaluate component configurations")
    s.add_argument("--data", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--configs", default="all",
                   help="'all' or ';'-separated sets such as 'CSOE+MDCB+CP;none'")
    s.add_argument("--out", required=True)

    s = sub.add_parser("report", help="merge CSV reports into one JSON summary")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    return p


COMMANDS = {"print-config": cmd_print_config, "gen-data": cmd_gen_data, "encode": cmd_encode,
            "decode": cmd_decode, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("missing command; see --help")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except CsoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(f"diagnostics: {json.dumps(diag, default=str, sort_keys=True)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
