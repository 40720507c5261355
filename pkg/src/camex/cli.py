"""Command-line entry point: train / merge / verify / sweep / info."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_io
from .checkpoint import CheckpointError, Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError
from .harness import SyntheticTask, build_model, count_params, gen_task, parse_grid, sweep, sweep_csv, train
from .merging import MergeSpec, merge_domain_specific, prepare_deltas, reparameterize
from .moe import ExpertBank

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("camex")


class UsageError(Exception):
    def __init__(self, message, parser=None):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}", self)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="camex", description="Curvature-aware merging of experts at toy scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", required=True, help="per-step CSV")
    t.add_argument("--summary", help="JSON run summary (default: <metrics>.json)")
    t.add_argument("--seed", type=int)

    m = sub.add_parser("merge", help="offline merge of a saved bank, stored in reparameterized form")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--protocol", required=True, choices=["domain_specific", "ties", "dare", "ca"])
    m.add_argument("--alpha", type=float, required=True)
    m.add_argument("--ca", action="store_true", help="fold the stored curvature into the experts")
    m.add_argument("--ties-trim", type=float, default=0.0)
    m.add_argument("--dare-p", type=float, default=0.0)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run the self-verification suites")
    v.add_argument("--suite", default="all", choices=["all", "gradcheck", "kronecker", "causal", "eq8", "reparam"])
    v.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="ablation sweep over alpha, Kronecker rank or expert count")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help="e.g. alpha=0.5,0.8,1.0 | rank=1,2,4 | experts=2,4,8")
    s.add_argument("--seeds", default="0", help="comma-separated seeds")
    s.add_argument("--seed", type=int, help="single seed (overrides --seeds)")
    s.add_argument("--out", required=True)

    i = sub.add_parser("info", help="describe a checkpoint")
    i.add_argument("--ckpt", required=True)
    return p


# ------------------------------------------------------------------ commands
def cmd_train(args) -> int:
    cfg = config_io.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    task = SyntheticTask.from_config(cfg, seed=0)
    model = build_model(cfg)
    metrics = train(model, gen_task(task, cfg.n_train, stream=1), cfg, gen_task(task, cfg.n_eval, stream=2))
    save_checkpoint(model, args.out, meta={"final_metric": metrics.final_metric})
    Path(args.metrics).write_text(metrics.to_csv())
    summary = Path(args.summary) if args.summary else Path(args.metrics).with_suffix(".json")
    summary.write_text(metrics.summary_json())
    print(f"{metrics.metric_name}: {metrics.initial_metric:.4f} -> {metrics.final_metric:.4f}")
    return EXIT_OK


def reparameterized_checkpoint(src, dst, spec: MergeSpec) -> Checkpoint:
    """Fold masks (and curvature, when enabled) into stored experts.

    The written model runs plain score-weighted merging with ``spec.alpha``
    and carries no curvature; each layer also stores the uniform-score merge
    under ``layer.<l>.merged.*``.
    """
    ckpt = load_checkpoint(src)
    model = ckpt.model
    cfg = model.cfg
    if cfg.variant != "merge":
        raise ValueError(f"offline merge supports the 'merge' variant, checkpoint holds {cfg.variant!r}")
    if spec.ca_enabled and not cfg.uses_curvature:
        raise ValueError("checkpoint carries no curvature factors")
    out_cfg = cfg.replace(protocol="domain_specific", ca_enabled=False, alpha=spec.alpha,
                          dare_drop_prob=0.0, ties_trim_fraction=0.0)
    out_model = build_model(out_cfg)
    out_model.embed.data[...] = model.embed.data
    if model.head is not None:
        out_model.head.data[...] = model.head.data
    merged = {}
    for l, (src_layer, dst_layer) in enumerate(zip(model.layers, out_model.layers)):
        bank = ExpertBank(src_layer.base, src_layer.domain)
        masked_spec = MergeSpec(protocol=spec.protocol, alpha=spec.alpha, ca_enabled=False,
                                dare_drop_prob=spec.dare_drop_prob, ties_trim_fraction=spec.ties_trim_fraction,
                                rng_seed=spec.rng_seed)
        taus = {n: bank.domain.params()[n] - t for n, t in bank.base.params().items()}
        masked, _ = prepare_deltas(taus, masked_spec, layer=l)
        curv = src_layer.curvature if spec.ca_enabled else None
        reparam = reparameterize(bank.base, masked, curv, alpha=spec.alpha, strict=False)
        dst_layer.router.W_g.data[...] = src_layer.router.W_g.data
        for n, t in bank.base.params().items():
            getattr(dst_layer.base, n).data[...] = t.data
            getattr(dst_layer.domain, n).data[...] = reparam.params()[n].data
        n_dom = cfg.n_experts - 1
        uniform = np.full(n_dom, 1.0 / n_dom)
        rebank = ExpertBank(dst_layer.base, dst_layer.domain)
        rtaus = {n: rebank.domain.params()[n] - t for n, t in rebank.base.params().items()}
        merged[l] = merge_domain_specific(rebank.base, rtaus, uniform, spec.alpha)
    meta = {"source_protocol": spec.protocol, "ca_folded": spec.ca_enabled, "alpha": spec.alpha,
            "exact_equivalence": spec.alpha == 1.0}
    save_checkpoint(out_model, dst, merged=merged, meta=meta)
    return Checkpoint(out_model, merged, meta)


def cmd_merge(args) -> int:
    protocol, ca = args.protocol, args.ca
    if protocol == "ca":
        protocol, ca = "domain_specific", True
    try:
        spec = MergeSpec(protocol=protocol, alpha=args.alpha, ca_enabled=ca, dare_drop_prob=args.dare_p,
                         ties_trim_fraction=args.ties_trim, rng_seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ckpt = reparameterized_checkpoint(args.ckpt, args.out, spec)
    print(f"wrote {args.out}: {len(ckpt.merged)} merged layer(s), protocol={args.protocol}, alpha={args.alpha}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    results = run_suites(args.suite, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = config_io.load(args.config)
    try:
        grid = parse_grid(args.grid)
        seeds = [args.seed] if args.seed is not None else [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = sweep(cfg, grid, seeds)
    Path(args.out).write_text(sweep_csv(rows))
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def info_table(ckpt: Checkpoint) -> dict:
    cfg = ckpt.model.cfg
    dims = {}
    if cfg.uses_curvature:
        dims = {n: list(f.dims.dims) for n, f in ckpt.model.layers[0].curvature.items()}
    return {
        "variant": cfg.variant,
        "dims": {"vocab": cfg.vocab, "d_model": cfg.d_model, "d_ff": cfg.d_ff, "n_experts": cfg.n_experts,
                 "layers": cfg.layers, "kronecker_rank": cfg.kronecker_rank},
        "protocol": {"name": cfg.merge.protocol, "alpha": cfg.merge.alpha, "ca_enabled": cfg.merge.ca_enabled},
        "dim_factorization": dims,
        "params": count_params(ckpt.model).as_dict(),
        "merged_layers": sorted(ckpt.merged),
        "meta": ckpt.meta,
    }


def cmd_info(args) -> int:
    info = info_table(load_checkpoint(args.ckpt))
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "merge": cmd_merge, "verify": cmd_verify, "sweep": cmd_sweep, "info": cmd_info}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        (exc.parser or parser).print_help(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"camex {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"camex {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
