"""Command-line entry point: ``gen-data``, ``train``, ``gradcheck``, ``encode``, ``eval``, ``sweep``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .centers import generate_centers
from .config import RunConfig, load_config
from .dataset import (
    PROTOCOL_NAMES,
    Dataset,
    build_eval_protocols,
    generate_synthetic,
    load_features,
    split_seen_unseen,
    write_features,
)
from .errors import ConfigError, NumericError, UniHashError
from .network import GATE_MODES, ModelConfig, init_params
from .objectives import DetachSide, LossWeights
from .retrieval import BRANCH_NAMES, evaluate_protocols, export_codes
from .training import Checkpoint, evaluate, finite_diff_errors, train, write_log

log = logging.getLogger("unihash")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.uhck"
LOG_NAME = "train_log.csv"
RUN_CONFIG_NAME = "run_config.json"
GRADCHECK_THRESHOLD = 1e-4


# ---------------------------------------------------------------- flag plumbing

_DEFAULTS = RunConfig()


class _Override(argparse.Action):
    """Store a flag value under ``section.key`` so it can be layered onto the config."""

    def __init__(self, option_strings, dest, target=None, **kw):
        self.target = target
        super().__init__(option_strings, dest, **kw)

    def __call__(self, parser, ns, values, option_string=None):
        if self.nargs == 0:
            values = self.const
        ns.overrides = {**ns.overrides, self.target: values}


def _opt(p, flag, target, type=None, help="", nargs=None, const=None):
    section, key = target.split(".")
    default = getattr(getattr(_DEFAULTS, section), key)
    if nargs == 0:
        p.add_argument(flag, action=_Override, target=target, nargs=0, const=const,
                       default=argparse.SUPPRESS, help=f"{help} (default: {default})")
    else:
        p.add_argument(flag, action=_Override, target=target, type=type, nargs=nargs,
                       default=argparse.SUPPRESS, help=f"{help} (default: {default})")


def _common(p):
    p.add_argument("--config", help="JSON run config; flags override its values (default: built-in)")
    p.add_argument("--seed", type=int, help="seed override for this command (default: from config)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")
    p.set_defaults(overrides={})


def _data_flags(p):
    _opt(p, "--data", "data.path", str, "feature file; omitted generates synthetic data")
    _opt(p, "--classes", "data.classes", int, "synthetic class count")
    _opt(p, "--dim", "data.dim", int, "synthetic feature dimension")
    _opt(p, "--per-class", "data.per_class", int, "synthetic samples per class")
    _opt(p, "--spread", "data.spread", float, "synthetic noise std")
    _opt(p, "--data-seed", "data.seed", int, "synthetic data seed")
    _opt(p, "--seen-ratio", "data.seen_ratio", float, "fraction of classes marked seen")
    _opt(p, "--split-seed", "data.split_seed", int, "seen/unseen split seed")


def _model_flags(p):
    _opt(p, "--code-len", "model.code_len", int, "hash bits q")
    _opt(p, "--feature-dim", "model.feature_dim", int, "backbone width d")
    _opt(p, "--num-experts", "model.num_experts", int, "experts m")
    _opt(p, "--top-k", "model.top_k", int, "experts routed per sample k")
    _opt(p, "--gate-mode", "model.gate_mode", str, f"one of {', '.join(GATE_MODES)}")
    _opt(p, "--unshared-experts", "model.shared_experts", nargs=0, const=False,
         help="give each branch its own expert bank; shared_experts")


def _train_flags(p):
    _opt(p, "--epochs", "train.epochs", int, "epochs T")
    _opt(p, "--batch-size", "train.batch_size", int, "mini-batch size N")
    _opt(p, "--lambda1", "train.lambda1", float, "center loss weight")
    _opt(p, "--lambda2", "train.lambda2", float, "pairwise loss weight")
    _opt(p, "--lambda3", "train.lambda3", float, "mutual loss weight")
    _opt(p, "--detach-schedule", "train.detach_schedule", str, "per_epoch or per_iteration")
    _opt(p, "--lr", "train.lr", float, "RMSProp learning rate")


def _eval_flags(p):
    _opt(p, "--K", "eval.K", int, "mAP cutoff")


def resolve_config(args, seed_target: str | None = "train.seed") -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for target, value in args.overrides.items():
        section, key = target.split(".")
        setattr(getattr(cfg, section), key, value)
    if args.seed is not None and seed_target:
        section, key = seed_target.split(".")
        setattr(getattr(cfg, section), key, args.seed)
    return cfg


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.path:
        return load_features(d.path)
    return generate_synthetic(d.classes, d.dim, d.per_class, d.spread, d.seed)


def make_split(cfg: RunConfig, ds: Dataset):
    d = cfg.data
    return split_seen_unseen(ds, d.seen_ratio, d.split_seed, d.query_frac, d.val_frac, d.train_frac)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args, "data.seed")
    d = cfg.data
    ds = generate_synthetic(d.classes, d.dim, d.per_class, d.spread, d.seed)
    path = Path(args.output) if args.output else _out_dir(args) / "data.uhf"
    write_features(ds, path, binary=not args.text)
    print(f"n={len(ds)} D_in={ds.feature_dim} C={ds.num_classes} -> {path}")
    return EXIT_OK


def run_training(cfg: RunConfig):
    ds = load_dataset(cfg)
    split = make_split(cfg, ds)
    tcfg = cfg.train_config(ds.feature_dim)
    ckpt, records = train(tcfg, split)
    return ds, split, ckpt, records


def run_evaluation(cfg: RunConfig, ckpt: Checkpoint, ds: Dataset, split, only=None):
    protocols = build_eval_protocols(split)
    report = evaluate_protocols(ckpt, ds, protocols, K=cfg.eval.K, pr=cfg.eval.pr_curve, only=only)
    report.config = cfg.to_dict()
    return report


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    _, _, ckpt, records = run_training(cfg)
    ckpt.save(out / CHECKPOINT_NAME)
    write_log(records, out / LOG_NAME)
    _write(out / RUN_CONFIG_NAME, cfg.to_json())
    first, last = records[0], records[-1]
    print(f"trained {len(records)} epochs in {time.perf_counter() - t0:.1f}s: "
          f"loss {first.loss:.6f} -> {last.loss:.6f}, tau2 {last.tau2:.6f}")
    print(f"wrote {out / CHECKPOINT_NAME} and {out / LOG_NAME}")
    return EXIT_OK


def gradcheck_instance(seed: int, gate_mode: str):
    """The small random instance: D_in=8, d=8, q=8, m=4, k=2, N=4, C=4."""
    cfg = ModelConfig(input_dim=8, feature_dim=8, code_len=8, num_experts=4, top_k=2, gate_mode=gate_mode)
    params = init_params(cfg, seed=seed)
    rng = np.random.default_rng([seed, 99])
    X = rng.standard_normal((4, 8))
    Y = np.eye(4, dtype=np.int8)[rng.integers(0, 4, size=4)]
    centers = generate_centers(4, 8, "hadamard")
    return params, centers, X, Y


def run_gradcheck(seeds, eps: float, corrupt: bool = False, weights: LossWeights | None = None):
    """Per (gate_mode, detach) combination: max relative error per parameter group and skipped count."""
    weights = weights or LossWeights()
    results = {}
    for mode in GATE_MODES:
        for side in DetachSide:
            groups, skipped = {}, 0
            for seed in seeds:
                params, centers, X, Y = gradcheck_instance(seed, mode)
                grads = evaluate(params, centers, X, Y, weights, side).grads
                if corrupt:
                    grads = {k: v.copy() for k, v in grads.items()}
                    name = max(grads, key=lambda k: np.abs(grads[k]).max())
                    flat = grads[name].reshape(-1)
                    flat[np.argmax(np.abs(flat))] *= 2.0
                errs, sk = finite_diff_errors(params, centers, X, Y, weights, side, eps=eps, grads=grads)
                skipped += sk
                for name, e in errs.items():
                    g = name.split(".")[0]
                    groups[g] = max(groups.get(g, 0.0), e)
            results[(mode, side.value)] = (groups, skipped)
    return results


def cmd_gradcheck(args) -> int:
    threshold = args.threshold if args.threshold is not None else max(GRADCHECK_THRESHOLD, args.eps)
    base = args.seed or 0
    seeds = range(base, base + args.seeds)
    t0 = time.perf_counter()
    results = run_gradcheck(seeds, args.eps, corrupt=args.corrupt)
    worst = 0.0
    for (mode, side), (groups, skipped) in results.items():
        cells = "  ".join(f"{g}={e:.2e}" for g, e in sorted(groups.items()))
        print(f"{mode:>12} {side:<15} {cells}  skipped={skipped}")
        worst = max(worst, *groups.values())
    ok = worst < threshold
    print(f"max relative error {worst:.3e} over {len(seeds)} seeds, threshold {threshold:g}: "
          f"{'PASS' if ok else 'FAIL'} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK if ok else EXIT_VERIFY


def _load_run(args):
    """Checkpoint plus the run config saved beside it (unless ``--config`` is given)."""
    ckpt_path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / CHECKPOINT_NAME
    if args.config is None and (ckpt_path.parent / RUN_CONFIG_NAME).exists():
        args.config = str(ckpt_path.parent / RUN_CONFIG_NAME)
    cfg = resolve_config(args, seed_target="data.split_seed")
    ckpt = Checkpoint.load(ckpt_path)
    ds = load_dataset(cfg)
    mcfg = ckpt.params.config
    if mcfg.input_dim != ds.feature_dim or ckpt.centers.num_classes != ds.num_classes:
        raise ConfigError(
            f"checkpoint expects D_in={mcfg.input_dim}, C={ckpt.centers.num_classes}; "
            f"data has D_in={ds.feature_dim}, C={ds.num_classes}")
    return cfg, ckpt, ds


def cmd_encode(args) -> int:
    cfg, ckpt, ds = _load_run(args)
    branches = ("c", "p") if args.branch == "both" else (args.branch[0],)
    text = export_codes(ckpt, ds, ds.ids, branches)
    path = Path(args.output) if args.output else _out_dir(args) / "codes.txt"
    _write(path, text)
    print(f"encoded {len(ds)} samples ({', '.join(BRANCH_NAMES[b] for b in branches)}) -> {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, ckpt, ds = _load_run(args)
    split = make_split(cfg, ds)
    only = args.protocol or cfg.eval.protocols
    report = run_evaluation(cfg, ckpt, ds, split, only=only)
    out = _out_dir(args)
    _write(out / "metrics.json", report.to_json())
    _write(out / "metrics.csv", report.metrics_csv())
    _write(out / "pr_curve.csv", report.pr_csv())
    for name, m in report.protocols.items():
        if m is None:
            print(f"warning: protocol {name} absent (no classes in that group)", file=sys.stderr)
            continue
        print(f"{name:<14} center={m.map_center:.4f} pairwise={m.map_pairwise:.4f} "
              f"selected={m.map_selected:.4f}")
    print(f"selected branch: {BRANCH_NAMES[report.selected_branch]}, tau2={report.tau2:.6f}")
    return EXIT_OK


SWEEP_FIELDS = ["lambda1", "lambda2", "lambda3", "num_experts", "top_k", "selected_branch", "tau2"] + [
    f"map_{n}" for n in PROTOCOL_NAMES]


def sweep_point(cfg_dict: dict) -> dict:
    from .config import config_from_dict

    cfg = config_from_dict(cfg_dict)
    ds, split, ckpt, _ = run_training(cfg)
    report = run_evaluation(cfg, ckpt, ds, split)
    row = {"lambda1": cfg.train.lambda1, "lambda2": cfg.train.lambda2, "lambda3": cfg.train.lambda3,
           "num_experts": cfg.model.num_experts, "top_k": cfg.model.top_k,
           "selected_branch": BRANCH_NAMES[report.selected_branch], "tau2": report.tau2}
    for n in PROTOCOL_NAMES:
        m = report.protocols.get(n)
        row[f"map_{n}"] = "absent" if m is None else m.map_selected
    return row


def sweep_grid(cfg: RunConfig) -> list[RunConfig]:
    s = cfg.sweep
    for name in ("lambda1", "lambda2", "lambda3"):
        if not getattr(s, name):
            raise ConfigError(f"sweep grid for {name} is empty")
    experts = s.num_experts or [cfg.model.num_experts]
    topk = s.top_k or [cfg.model.top_k]
    points = []
    for l1, l2, l3, m, k in itertools.product(s.lambda1, s.lambda2, s.lambda3, experts, topk):
        pc = RunConfig(**{f.name: dataclasses.replace(getattr(cfg, f.name))
                          for f in dataclasses.fields(RunConfig)})
        pc.train.lambda1, pc.train.lambda2, pc.train.lambda3 = float(l1), float(l2), float(l3)
        pc.model.num_experts, pc.model.top_k = int(m), int(k)
        points.append(pc)
    return points


def worker_count() -> int:
    raw = os.environ.get("UNIHASH_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"UNIHASH_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("UNIHASH_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    for name in ("lambda1", "lambda2", "lambda3", "num_experts", "top_k"):
        value = getattr(args, f"grid_{name}")
        if value is not None:
            setattr(cfg.sweep, name, value)
    points = sweep_grid(cfg)
    docs = [p.to_dict() for p in points]
    workers = min(worker_count(), len(points))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(sweep_point, docs))
    else:
        rows = [sweep_point(d) for d in docs]
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    out = _out_dir(args)
    _write(out / "sweep.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unihash", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic feature file")
    _common(p)
    for flag, target, typ, h in [("--classes", "data.classes", int, "class count C"),
                                 ("--dim", "data.dim", int, "feature dimension D_in"),
                                 ("--per-class", "data.per_class", int, "samples per class"),
                                 ("--spread", "data.spread", float, "noise standard deviation")]:
        _opt(p, flag, target, typ, h)
    p.add_argument("-o", "--output", help="output file (default: <out>/data.uhf)")
    p.add_argument("--text", action="store_true", help="write the text format instead of binary (default: binary)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    _common(p)
    p.add_argument("--seeds", type=int, default=5, help="number of random instances per combination (default: 5)")
    p.add_argument("--eps", type=float, default=1e-4, help="finite-difference step (default: 1e-4)")
    p.add_argument("--threshold", type=float, default=None,
                   help="max allowed relative error (default: max(1e-4, eps))")
    p.add_argument("--corrupt", action="store_true", help="test hook: double one gradient entry (default: off)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("encode", help="export packed hash codes")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.uhck)")
    p.add_argument("--branch", choices=["center", "pairwise", "both"], default="both",
                   help="which branch codes to export (default: both)")
    p.add_argument("-o", "--output", help="output file (default: <out>/codes.txt)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="evaluate the four retrieval protocols")
    _common(p)
    _data_flags(p)
    _eval_flags(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.uhck)")
    p.add_argument("--protocol", action="append", choices=PROTOCOL_NAMES,
                   help="restrict to this protocol; repeatable (default: all)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate over a hyperparameter grid")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    _train_flags(p)
    _eval_flags(p)
    for name, typ, h in [("lambda1", float, "center weights"), ("lambda2", float, "pairwise weights"),
                         ("lambda3", float, "mutual weights"), ("num_experts", int, "expert counts m"),
                         ("top_k", int, "routing k values")]:
        p.add_argument(f"--grid-{name.replace('_', '-')}", dest=f"grid_{name}", type=typ, nargs="*",
                       help=f"grid of {h} (default: sweep.{name} from config)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UniHashError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
