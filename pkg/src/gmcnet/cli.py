"""Command-line entry point: gen | analyze | train | register | eval."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import build_pairs, crop_pairs, load_pairs, random_shapes, save_pairs
from .formats import read_cloud, read_keyvalue, read_transform, write_keyvalue, write_transform
from .match import DegenerateCorrespondenceError, RegisterConfig, register
from .metrics import MetricReport, icp_baseline
from .net import HGMConfig, expected_shapes, init_hgm_params
from .train import NonFiniteLossError, TrainConfig, TrainRecord, evaluate_pairs, train_epoch

log = logging.getLogger("gmcnet")

EXIT_OK, EXIT_INTERNAL, EXIT_MISSING, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


# -- argument parsing ---------------------------------------------------------

def _common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads for generation and evaluation")


def _model_flags(p):
    p.add_argument("--levels", default="768,384,192", help="points per hierarchy level")
    p.add_argument("--k", type=int, default=16, help="graph neighbours")
    p.add_argument("--ri-kind", default="PPF", choices=["RRI", "PPF", "FPFH", "rri", "ppf", "fpfh"])
    p.add_argument("--channels", type=int, default=64, help="unary and smoothness channel width")
    p.add_argument("--sinkhorn-iters", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gmcnet", description="Partial-to-partial point cloud registration.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a registration dataset")
    _common(g)
    g.add_argument("--protocol", choices=["scan", "crop"], default="scan",
                   help="virtual depth scans (scan) or nearest-region crops of surface samples (crop)")
    g.add_argument("--shapes", type=int, default=20)
    g.add_argument("--test-shapes", type=int, default=0, help="extra unseen shapes written under test/")
    g.add_argument("--views", type=int, default=4, help="scans per shape (scan protocol)")
    g.add_argument("--min-overlap", type=float, default=0.4)
    g.add_argument("--points", type=int, default=768)
    g.add_argument("--resolution", type=int, default=160)
    g.add_argument("--noise", type=float, default=0.0, help="Gaussian sigma, clipped to 0.05")
    g.add_argument("--rot-max", type=float, default=180.0, help="max rotation angle in degrees (crop protocol)")

    a = sub.add_parser("analyze", help="feature robustness sweeps")
    _common(a)
    a.add_argument("--corpus", help="directory of .pcb/.xyz clouds; synthetic corpus when omitted")
    a.add_argument("--corpus-size", type=int, default=200)
    a.add_argument("--points", type=int, default=2048)
    a.add_argument("--features", default="rri,ppf,fpfh,xyz,dxyz")
    a.add_argument("--mode", choices=["rotation", "se3", "noise"], default="rotation")
    a.add_argument("--magnitudes", default="0,15,30,45,60,75,90,105,120,135,150,165,180")
    a.add_argument("--sigmas", default="0,0.01,0.02,0.04,0.06,0.08,0.1")

    t = sub.add_parser("train", help="train the descriptor network")
    _common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--val", help="validation dataset directory")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--omega", type=float, default=0.01)
    t.add_argument("--augment", choices=["auto", "on", "off"], default="auto",
                   help="fresh crops and poses every epoch (crop datasets only)")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--val-every", type=int, default=10)
    t.add_argument("--float32", action="store_true", help="train in single precision")
    _model_flags(t)

    r = sub.add_parser("register", help="register a source cloud onto a target cloud")
    _common(r)
    r.add_argument("--model", required=True, help="directory holding model.gmc and model.config")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--emit-matches", action="store_true")
    r.add_argument("--ri-kind", help="must agree with the checkpoint when given")
    r.add_argument("--sinkhorn-iters", type=int, default=5)

    e = sub.add_parser("eval", help="registration metrics on a dataset")
    _common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--predictions", help="directory of <pair_id>.txt transforms")
    e.add_argument("--model", help="model directory; registers every pair")
    e.add_argument("--baseline", choices=["icp"], help="also run a baseline on every pair")
    e.add_argument("--sinkhorn-iters", type=int, default=5)
    return ap


def resolve_config(parser, sub_name, argv) -> argparse.Namespace:
    """Parse flags, merging an optional key=value file under explicit flags."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file {path} not found", EXIT_MISSING)
    values = read_keyvalue(path)
    # a run.config echo names its subcommand; it must match the one being run
    command = values.pop("command", sub_name)
    if command != sub_name:
        raise CliError(f"config file is for '{command}', not '{sub_name}'", EXIT_CONFIG)
    known = {k for k in vars(args) if k not in ("command", "config")}
    unknown = sorted(k for k in (v.replace("-", "_") for v in values) if k not in known)
    if unknown:
        raise CliError(f"unknown config keys for {sub_name}: {', '.join(unknown)}", EXIT_CONFIG)
    sub_parser = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[sub_name]
    choices_by_dest = {a.dest: a.choices for a in sub_parser._actions if a.choices}
    given = {a.split("=", 1)[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in given:
            try:
                value = _coerce(raw, getattr(args, key))
            except ValueError:
                raise CliError(f"config key {key}: cannot parse {raw!r}", EXIT_CONFIG) from None
            choices = choices_by_dest.get(key)
            if choices and value not in choices:
                raise CliError(f"config key {key}: {value!r} not one of {list(choices)}", EXIT_CONFIG)
            setattr(args, key, value)
    return args


def _coerce(raw, current):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _write_run_config(out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_keyvalue(out / "run.config", {k: v for k, v in sorted(vars(args).items())
                                        if k not in ("config",) and v is not None})


# -- commands -----------------------------------------------------------------

def _model_config(args) -> RegisterConfig:
    c = args.channels
    hgm = HGMConfig(levels=tuple(_ints(args.levels)), k=args.k, ri_kind=args.ri_kind, cu=c, cs=(c, c, c))
    return RegisterConfig(hgm, sinkhorn_iters=args.sinkhorn_iters)


def cmd_gen(args) -> int:
    if args.views < 2 and args.protocol == "scan":
        raise CliError("gen: pairs need --views >= 2", EXIT_MISSING)
    out = Path(args.out)
    _write_run_config(out, args)
    shapes = random_shapes(args.shapes + args.test_shapes, args.seed)
    splits = [(out, shapes[:args.shapes], args.seed)]
    if args.test_shapes:
        splits.append((out / "test", shapes[args.shapes:], args.seed + 1))
    for root, meshes, seed in splits:
        if args.protocol == "scan":
            pairs = build_pairs(meshes, args.views, args.min_overlap, seed, args.points,
                                (args.resolution, args.resolution), args.noise)
        else:
            pairs = crop_pairs(meshes, seed, keep=args.points, rot_range=(0.0, args.rot_max),
                               noise_sigma=args.noise)
        save_pairs(pairs, root, seed)
        write_keyvalue(root / "dataset.config", {
            "protocol": args.protocol, "shape_seed": args.seed, "shapes": args.shapes + args.test_shapes,
            "first_shape": 0 if root == out else args.shapes, "count": len(meshes), "points": args.points,
            "noise": args.noise, "rot_max": args.rot_max})
        mean_ov = float(np.mean([p.overlap_ratio for p in pairs])) if pairs else float("nan")
        print(f"{root}: {len(pairs)} pairs, mean overlap {mean_ov:.3f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .formats import read_cloud as _read
    from .plotting import plot_curve
    from .robustness import FEATURE_KINDS, build_corpus, noise_curve, rotation_curve

    kinds = [k.strip().lower() for k in args.features.split(",") if k.strip()]
    bad = [k for k in kinds if k not in FEATURE_KINDS]
    if bad:
        raise CliError(f"unknown feature {bad[0]!r}; valid names: {', '.join(FEATURE_KINDS)}", EXIT_MISSING)
    if args.corpus:
        root = Path(args.corpus)
        if not root.is_dir():
            raise CliError(f"corpus directory {root} not found", EXIT_MISSING)
        files = sorted(p for p in root.iterdir() if p.suffix in (".pcb", ".xyz"))
        if not files:
            raise CliError(f"no .pcb/.xyz clouds under {root}", EXIT_MISSING)
        corpus = [_read(f).centered() for f in files]
    else:
        corpus = build_corpus(args.corpus_size, args.points, args.seed)
    needs_normals = args.mode == "rotation" and any(k in ("ppf", "fpfh") for k in kinds)
    if needs_normals and any(c.normals is None for c in corpus):
        raise CliError("rotation sweep of ppf/fpfh needs clouds with normals", EXIT_MISSING)
    out = Path(args.out)
    _write_run_config(out, args)
    if args.mode == "noise":
        curve = noise_curve(corpus, kinds, _floats(args.sigmas), seed=args.seed)
    else:
        mode = "rotation_only" if args.mode == "rotation" else "se3"
        curve = rotation_curve(corpus, kinds, _floats(args.magnitudes), mode, args.seed)
    curve.to_csv(out / f"{args.mode}.csv")
    plot_curve(curve, out / f"{args.mode}.png")
    print(f"wrote {out / (args.mode + '.csv')} ({len(curve.magnitudes)} rows)")
    return EXIT_OK


def _load_dataset(path) -> list:
    root = Path(path)
    if not (root / "manifest.csv").exists():
        raise CliError(f"dataset {root} not found (no manifest.csv)", EXIT_MISSING)
    return load_pairs(root)


def _train_source(root: Path, pairs, augment: str):
    cfg_path = root / "dataset.config"
    meta = read_keyvalue(cfg_path) if cfg_path.exists() else {}
    crop = meta.get("protocol") == "crop"
    if augment == "on" and not crop:
        raise CliError("--augment on needs a crop-protocol dataset", EXIT_CONFIG)
    if augment == "off" or not crop:
        return pairs
    first, count = int(meta["first_shape"]), int(meta["count"])
    meshes = random_shapes(int(meta["shapes"]), int(meta["shape_seed"]))[first:first + count]
    keep, rot_max, noise = int(meta["points"]), float(meta["rot_max"]), float(meta["noise"])
    return lambda epoch: crop_pairs(meshes, 1000 + epoch, keep=keep, rot_range=(0.0, rot_max),
                                    noise_sigma=noise)


def cmd_train(args) -> int:
    from .plotting import plot_training

    root = Path(args.dataset)
    pairs = _load_dataset(root)
    val = _load_dataset(args.val) if args.val else None
    if args.float32:
        dc.set_dtype(np.float32)
    reg = _model_config(args)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, omega=args.omega,
                       seed=args.seed)
    source = _train_source(root, pairs, args.augment)
    out = Path(args.out)
    _write_run_config(out, args)
    params = init_hgm_params(reg.hgm, args.seed)
    reg.hgm.save(out / "model.config")
    if args.lr == 0:
        print("warning: --lr 0 leaves the parameters unchanged", file=sys.stderr)
    record = TrainRecord()
    rng = np.random.default_rng(args.seed)
    for epoch in range(1, args.epochs + 1):
        epoch_pairs = source(epoch) if callable(source) else [source[i] for i in rng.permutation(len(source))]
        try:
            row = train_epoch(epoch_pairs, params, tcfg, reg, epoch)
        except NonFiniteLossError as err:
            dc.save_params(out / "model.gmc", params)
            raise CliError(f"train: {err}", EXIT_NUMERIC) from err
        row.update(val_LR=float("nan"), val_Lt=float("nan"), val_RMSE=float("nan"))
        if val and (epoch % max(args.val_every, 1) == 0 or epoch == args.epochs):
            errs, _ = evaluate_pairs(val, params, reg)
            row.update(val_LR=float(np.degrees(errs[:, 0].mean())), val_Lt=float(errs[:, 1].mean()),
                       val_RMSE=float(errs[:, 2].mean()))
        record.append(row)
        record.to_csv(out / "train.csv")
        print(f"epoch {epoch} loss {row['loss']:.6f} val_LR {row['val_LR']:.3f}", flush=True)
        if args.checkpoint_every and epoch % args.checkpoint_every == 0:
            dc.save_params(out / f"model_e{epoch:04d}.gmc", params)
    dc.save_params(out / "model.gmc", params)
    plot_training(record, out / "train.png")
    return EXIT_OK


def load_model(model_dir, ri_kind: str | None = None, sinkhorn_iters: int = 5):
    """(params, RegisterConfig) from a model directory; config mismatches raise CliError(4)."""
    root = Path(model_dir)
    ckpt, cfg_path = root / "model.gmc", root / "model.config"
    if not ckpt.exists() or not cfg_path.exists():
        raise CliError(f"model directory {root} lacks model.gmc or model.config", EXIT_MISSING)
    try:
        hgm = HGMConfig.load(cfg_path)
    except ValueError as err:
        raise CliError(f"model config: {err}", EXIT_CONFIG) from err
    if ri_kind is not None and ri_kind.upper() != hgm.ri_kind:
        raise CliError(f"checkpoint was trained with ri_kind={hgm.ri_kind}, not {ri_kind.upper()}", EXIT_CONFIG)
    values = dc.load_params(ckpt)
    want = expected_shapes(hgm)
    got = {k: tuple(v.shape) for k, v in values.items()}
    if got != want:
        missing = sorted(set(want) ^ set(got)) or sorted(k for k in want if want[k] != got[k])
        raise CliError(f"checkpoint does not match model.config (first differing parameter: {missing[0]})",
                       EXIT_CONFIG)
    params = init_hgm_params(hgm)
    params.load_values(values)
    return params, RegisterConfig(hgm, sinkhorn_iters=sinkhorn_iters)


def cmd_register(args) -> int:
    params, reg = load_model(args.model, args.ri_kind, args.sinkhorn_iters)
    clouds = []
    for name in (args.source, args.target):
        if not Path(name).exists():
            raise CliError(f"cloud file {name} not found", EXIT_MISSING)
        clouds.append(read_cloud(name))
    out = Path(args.out)
    _write_run_config(out, args)
    pred, match = register(clouds[0], clouds[1], params, reg)
    write_transform(out / "transform.txt", pred)
    if args.emit_matches:
        match.to_csv(out / "matches.csv")
    print(pred.to_text())
    return EXIT_OK


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def cmd_eval(args) -> int:
    from .plotting import plot_metrics

    pairs = _load_dataset(args.dataset)
    if not args.predictions and not args.model and not args.baseline:
        raise CliError("eval needs --predictions, --model or --baseline", EXIT_MISSING)
    reports = {}
    if args.predictions:
        root = Path(args.predictions)
        preds = []
        for p in pairs:
            f = root / f"{p.pair_id}.txt"
            if not f.exists():
                raise CliError(f"missing prediction {f}", EXIT_MISSING)
            preds.append(read_transform(f))
        reports["predictions"] = preds
    if args.model:
        params, reg = load_model(args.model, sinkhorn_iters=args.sinkhorn_iters)
        reports["model"] = _pmap(lambda p: register(p.source, p.target, params, reg)[0], pairs, args.threads)
    if args.baseline == "icp":
        reports["icp"] = _pmap(lambda p: icp_baseline(p.source, p.target), pairs, args.threads)
    out = Path(args.out)
    _write_run_config(out, args)
    built = {}
    for name, preds in reports.items():
        rep = MetricReport()
        for p, t in zip(pairs, preds):
            rep.add(p.pair_id, p.source, p.gt, t)
        rep.to_csv(out / f"metrics_{name}.csv")
        rep.to_json(out / f"metrics_{name}.json")
        built[name] = rep
        s = rep.summary()
        print(f"{name}: pairs {s['pairs']} LR_deg mean {s['LR_deg_mean']:.4f} median {s['LR_deg_median']:.4f} "
              f"LRMSE median {s['LRMSE_median']:.6f}")
    plot_metrics(built, out / "metrics.png")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "analyze": cmd_analyze, "train": cmd_train, "register": cmd_register,
            "eval": cmd_eval}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        if not argv or argv[0] not in COMMANDS:
            parser.parse_args(argv)
            return EXIT_MISSING
        args = resolve_config(parser, argv[0], argv)
        return COMMANDS[args.command](args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except SystemExit as err:
        return int(err.code or 0)
    except (FloatingPointError, DegenerateCorrespondenceError) as err:
        print(f"error: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as err:  # noqa: BLE001
        print(f"error: internal: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    finally:
        dc.set_dtype(np.float64)


if __name__ == "__main__":
    sys.exit(main())
