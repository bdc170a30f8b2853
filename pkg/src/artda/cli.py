"""``artda`` command line: train-da, train-dg, eval, augment-preview, gradcheck, sweep.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as C
from . import gradcheck
from . import tensor as T
from .augment import AugmentPolicy, augment_images, resolve_op_set
from .data import CORRUPTIONS, DataError, DatasetSpec, corrupt_images, load_domains, prepare_task
from .model import CheckpointError, classifier_from_checkpoint, init_module, load_checkpoint, save_checkpoint, split_params
from .seeding import derive_rng
from .stn import LocalizationNet, spatial_transform
from .trainer import LOSS_KEYS, evaluate, log_grid, parse_strategy, sweep, train, write_sweep_csv

log = logging.getLogger("artda")

METRIC_COLUMNS = ("seed", "epoch", "lr") + LOSS_KEYS + ("source_acc", "target_acc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_epilog() -> str:
    lines = ["config keys (key = value per line; defaults shown):"]
    for key, value in C.CliConfig().items():
        lines.append(f"  {key} = {C.format_value(value)}    {C.HELP.get(key, '')}")
    return "\n".join(lines)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--strategy", help="none|rnd-all|rnd-color|rnd-geo|adv-stn|adv-stn-color (default rnd-all)")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--out", help="output directory (default runs/latest)")
    p.add_argument("--lambda-c", type=float, help="consistency weight (default 1.0)")
    p.add_argument("--lambda-e", type=float, help="entropy weight, DA only (default 0.1)")
    p.add_argument("--lambda-t", type=float, help="adversarial STN weight (default 0.1)")
    p.add_argument("--epochs", type=int, help="epochs (default 60)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 0.001)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="artda", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.RawDescriptionHelpFormatter

    for name, mode in (("train-da", "DA"), ("train-dg", "DG")):
        p = sub.add_parser(name, help=f"train in {mode} mode", epilog=_config_epilog(), formatter_class=fmt)
        _add_train_flags(p)
        p.set_defaults(func=cmd_train, mode=mode)

    p = sub.add_parser("eval", help="accuracy per domain and corruption", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train-da/train-dg")
    p.add_argument("--data", default="synthetic",
                   help="'synthetic' (regenerate the checkpoint's dataset), a config file, "
                        "or a root/<domain>/<class>/<image> directory (default synthetic)")
    p.add_argument("--domains", default=None,
                   help="comma-separated domains, or 'all' (default: the checkpoint's target)")
    p.add_argument("--corrupt", action="append", default=[], metavar="KIND:SEVERITY",
                   help=f"corruption to evaluate; repeatable; KIND one of {', '.join(CORRUPTIONS)} "
                        "or 'all'")
    p.add_argument("--seed", type=int, default=0, help="corruption noise seed (default 0)")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-preview", help="write (original, transformed) PNG pairs", formatter_class=fmt)
    p.add_argument("--strategy", default="rnd-all", help="augmentation strategy (default rnd-all)")
    p.add_argument("--n", type=int, default=8, help="number of images (default 8)")
    p.add_argument("--seed", type=int, default=0, help="selection and augmentation seed (default 0)")
    p.add_argument("--out", default="preview", help="output directory (default preview)")
    p.add_argument("--checkpoint", default=None, help="checkpoint with STN weights; required for adv-stn")
    p.add_argument("--config", default=None, help="config file describing the dataset")
    p.add_argument("--n-aug", type=int, default=2, help="ops per image (default 2)")
    p.add_argument("--m-aug", type=float, default=9.0, help="normalized magnitude (default 9)")
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt)
    p.add_argument("--ops", default=None,
                   help="comma-separated ops or groups (tensor, stn, bilinear, losses); default all")
    p.add_argument("--trials", type=int, default=None, help="trials per op (default 100, chains 20)")
    p.add_argument("--seed", type=int, default=0, help="suite seed (default 0)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid over (lambda_c, lambda_t)", epilog=_config_epilog(), formatter_class=fmt)
    _add_train_flags(p)
    p.add_argument("--mode", default=None, help="DA or DG (default DA)")
    p.add_argument("--grid-c", default=None, help="comma-separated lambda_c values (default 10 log-spaced in [0.01, 10])")
    p.add_argument("--grid-t", default=None, help="comma-separated lambda_t values (default 10 log-spaced in [0.01, 10])")
    p.set_defaults(func=cmd_sweep, mode=None)
    return parser


# helpers -----------------------------------------------------------------

def _train_overrides(args) -> dict:
    values: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, text = (s.strip() for s in item.split("=", 1))
        if key not in C.keys():
            raise C.ConfigError(f"unknown key {key!r} in --set")
        values[key] = C.parse_value(key, text)
    flags = {"strategy": args.strategy, "lambda_c": args.lambda_c, "lambda_e": args.lambda_e,
             "lambda_t": args.lambda_t, "epochs": args.epochs, "lr": args.lr, "out": args.out}
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.seeds is not None:
        values["seeds"] = C.parse_value("seeds", args.seeds)
    if getattr(args, "mode", None):
        values["mode"] = args.mode
    return values


def _resolve_config(args) -> C.CliConfig:
    overrides = _train_overrides(args)
    cfg = C.load(args.config, overrides) if args.config else C.build(overrides)
    cfg.validate()
    return cfg


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise C.ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _checkpoint_meta(cfg: C.CliConfig, task, seed: int) -> dict:
    return {
        "num_classes": task.num_classes,
        "input_shape": list(task.input_shape),
        "mode": cfg.train.mode,
        "strategy": cfg.train.strategy,
        "seed": seed,
        "data": {k[len(C.DATA_PREFIX):]: C.format_value(v) for k, v in cfg.items()
                 if k.startswith(C.DATA_PREFIX)},
    }


# commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    task = prepare_task(cfg.data)
    out = _prepare_out(cfg.out)
    C.write_resolved(cfg, out)
    rows = []

    def on_epoch(seed, row):
        rows.append({"seed": seed, **row})
        log.info("seed %d epoch %d  L_m %.4f  total %.4f  source %.2f  target %.2f", seed,
                 row["epoch"], row["l_m"], row["total"], row["source_acc"], row["target_acc"])

    report = train(cfg.train, task, on_epoch)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
    for result, (clf, locnet) in zip(report.seeds, report.models):
        modules = {"classifier": clf}
        if locnet is not None:
            modules["stn"] = locnet
        save_checkpoint(out / f"checkpoint_seed{result.seed}.json", modules,
                        _checkpoint_meta(cfg, task, result.seed))
    _write_json(out / "report.json", report.to_dict())
    print(f"{cfg.train.mode} {cfg.train.strategy}: target {report.mean_target_acc:.2f}% "
          f"(seeds {', '.join(f'{s.target_acc:.2f}' for s in report.seeds)}), "
          f"source {report.mean_source_acc:.2f}%  -> {out}")
    return 0


def _parse_corruptions(items) -> list[tuple[str, int]]:
    out: list[tuple[str, int]] = []
    for item in items:
        kind, _, sev = item.partition(":")
        if not sev:
            raise C.ConfigError(f"--corrupt expects KIND:SEVERITY, got {item!r}")
        try:
            severity = int(sev)
        except ValueError:
            raise C.ConfigError(f"severity must be an integer 1..5, got {sev!r}") from None
        if not 1 <= severity <= 5:
            raise C.ConfigError(f"severity must be in 1..5, got {severity}")
        kinds = CORRUPTIONS if kind == "all" else (kind,)
        for k in kinds:
            if k not in CORRUPTIONS:
                raise C.ConfigError(f"unknown corruption {k!r}; valid kinds: {', '.join(CORRUPTIONS)}")
            if (k, severity) not in out:
                out.append((k, severity))
    return out


def _eval_spec(args, meta: dict) -> DatasetSpec:
    if args.data == "synthetic":
        stored = meta.get("data")
        if not stored:
            return DatasetSpec()
        values = {C.DATA_PREFIX + k: C.parse_value(C.DATA_PREFIX + k, v) for k, v in stored.items()}
        return C.build(values).data
    path = Path(args.data)
    if path.is_file():
        return C.load(path).data
    if path.is_dir():
        c, h, _ = meta.get("input_shape", (3, 32, 32))
        domains = sorted(p.name for p in path.iterdir() if p.is_dir())
        if len(domains) < 2:
            raise C.ConfigError(f"{path}: need at least two domain directories")
        return DatasetSpec(kind="directory", root=str(path), image_size=int(h), channels=int(c),
                           domains=tuple(domains), sources=tuple(domains[:-1]), target=domains[-1])
    raise C.ConfigError(f"--data: {args.data!r} is neither 'synthetic', a config file nor a directory")


def cmd_eval(args) -> int:
    corruptions = _parse_corruptions(args.corrupt)
    try:
        ckpt = load_checkpoint(args.checkpoint)
        clf = classifier_from_checkpoint(ckpt)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    meta = ckpt["meta"]
    spec = _eval_spec(args, meta)
    domains = load_domains(spec)
    if args.domains in (None, ""):
        names = [spec.target]
    elif args.domains == "all":
        names = list(spec.domains)
    else:
        names = [d.strip() for d in args.domains.split(",") if d.strip()]
    for n in names:
        if n not in domains:
            raise C.ConfigError(f"unknown domain {n!r}; available: {', '.join(domains)}")
    expected = tuple(meta.get("input_shape", ()))
    rows = []
    for d_idx, name in enumerate(names):
        dom = domains[name]
        if dom.images.shape[1:] != expected:
            raise C.ConfigError(f"domain {name} has images {dom.images.shape[1:]}, checkpoint expects {expected}")
        batch = dom.as_batch(0)
        acc = evaluate(clf, batch)
        rows.append((name, "none", 0, acc))
        for c_idx, (kind, severity) in enumerate(corruptions):
            rng = derive_rng(args.seed, "corrupt", d_idx, CORRUPTIONS.index(kind), severity)
            acc = evaluate(clf, batch.with_images(corrupt_images(dom.images, kind, severity, rng)))
            rows.append((name, kind, severity, acc))
    lines = ["domain,corruption,severity,accuracy,error"]
    lines += [f"{d},{k},{s},{a!r},{100.0 - a!r}" for d, k, s, a in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _to_png(img: np.ndarray) -> Image.Image:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")


def _stn_from_checkpoint(path, input_shape) -> LocalizationNet:
    ckpt = load_checkpoint(path)
    params = split_params(ckpt["params"], "stn")
    if not params:
        raise C.ConfigError(f"{path} holds no spatial-transformer weights; train with adv-stn first")
    shape = tuple(ckpt["meta"].get("input_shape", input_shape))
    if shape != tuple(input_shape):
        raise C.ConfigError(f"checkpoint input shape {shape} does not match data {tuple(input_shape)}")
    net = LocalizationNet(shape)
    with T.default_dtype(ckpt["dtype"]):
        init_module(net, net.shapes(), np.random.default_rng(0))
    net.load_state_dict(params)
    return net


def cmd_preview(args) -> int:
    try:
        strategy = parse_strategy(args.strategy)
        policy = AugmentPolicy(args.n_aug, args.m_aug)
    except ValueError as exc:
        raise C.ConfigError(str(exc)) from None
    if args.n < 1:
        raise C.ConfigError("--n must be >= 1")
    if strategy.adversarial and not args.checkpoint:
        raise C.ConfigError(f"strategy {args.strategy} needs --checkpoint with trained STN weights")
    spec = C.load(args.config).data if args.config else DatasetSpec()
    spec.validate()
    domains = load_domains(spec)
    pool = np.concatenate([domains[d].images for d in spec.domains])
    locnet = _stn_from_checkpoint(args.checkpoint, pool.shape[1:]) if strategy.adversarial else None
    rng = derive_rng(args.seed, "preview")
    pick = np.sort(rng.choice(len(pool), size=min(args.n, len(pool)), replace=False))
    originals = pool[pick]
    shown = originals
    if strategy.random:
        shown = augment_images(shown, policy, resolve_op_set(strategy.ops), derive_rng(args.seed, "augment"))
    if locnet is not None:
        with T.default_dtype(locnet.parameters()[0].dtype):
            shown = spatial_transform(T.Tensor(shown.astype(T.get_default_dtype())), locnet).data
        shown = np.clip(shown, 0.0, 1.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    c, h, w = originals.shape[1:]
    grid = np.zeros((c, len(pick) * h, 2 * w))
    for i, (a, b) in enumerate(zip(originals, shown)):
        _to_png(a).save(out / f"original_{i:02d}.png")
        _to_png(b).save(out / f"transformed_{i:02d}.png")
        grid[:, i * h:(i + 1) * h, :w] = a
        grid[:, i * h:(i + 1) * h, w:] = b
    _to_png(grid).save(out / "grid.png")
    print(f"wrote {len(pick)} pairs to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    ops = [s.strip() for s in args.ops.split(",") if s.strip()] if args.ops else None
    try:
        names = gradcheck.resolve_ops(ops)
    except ValueError as exc:
        raise C.ConfigError(str(exc)) from None
    results = [gradcheck.check_op(n, args.trials, args.seed) for n in names]
    print(gradcheck.format_results(results))
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def _grid_values(text, name) -> list[float]:
    if text is None:
        return log_grid()
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise C.ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise C.ConfigError(f"{name}: grid is empty")
    return values


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    grid_c = _grid_values(args.grid_c, "--grid-c")
    grid_t = _grid_values(args.grid_t, "--grid-t")
    task = prepare_task(cfg.data)
    out = _prepare_out(cfg.out)
    C.write_resolved(cfg, out)
    result = sweep(cfg.train, task, grid_c, grid_t)
    write_sweep_csv(result, out / "sweep.csv")
    print(f"wrote {len(grid_c)}x{len(grid_t)} grid to {out / 'sweep.csv'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"artda: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
