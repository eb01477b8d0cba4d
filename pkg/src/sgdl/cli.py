"""Command line entry point: ``sgdl {ingest,train,evaluate,inspect-mem}``.

Every subcommand reads a flat ``key = value`` config (``--config``), then
``SGDL_<KEY>`` environment variables, then repeated ``--set key=value`` flags.
Exit codes: 0 success, 2 config error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evalkit, harness
from .config import load_config, parse_config_text
from .dataset import TEST, VAL, export_table
from .errors import ConfigError, SGDLError, StageError
from .recmodel import load_checkpoint

log = logging.getLogger("sgdl")


def _config(args):
    cfg = load_config(args.config)
    if args.set:
        cfg = parse_config_text("\n".join(args.set), cfg)
    return cfg


def cmd_ingest(args):
    cfg = _config(args)
    if cfg.format == "canonical":
        raise ConfigError("ingest reads raw ratings or synthesises data; format=canonical is already ingested")
    cfg.validate()
    table = harness._stage("ingest", harness.prepare_table, cfg)
    out = export_table(table, args.out)
    n_noisy = int(table.noise.sum()) if table.has_flags else 0
    print(f"wrote {len(table)} interactions ({n_noisy} flagged noisy) "
          f"for {table.num_users} users x {table.num_items} items to {out}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    if args.out:
        cfg = cfg.replace(output_dir=args.out)
    res = harness.run(cfg)
    k = max(cfg.k_list)
    print(f"t_m={res.t_m} sigma_hat={res.sigma_hat} best_epoch={res.best_epoch} "
          f"test recall@{k}={res.test.recall[k]:.4f} ndcg@{k}={res.test.ndcg[k]:.4f}")
    print(f"outputs in {res.output_dir}")
    return 0


def cmd_evaluate(args):
    cfg = _config(args).validate()
    table = harness._stage("ingest", harness.prepare_table, cfg)
    params = harness._stage("load", load_checkpoint, args.checkpoint)
    if params.num_users != table.num_users or params.num_items != table.num_items:
        raise ConfigError(f"checkpoint shape {params.num_users}x{params.num_items} does not match "
                          f"dataset {table.num_users}x{table.num_items}")
    split = {"test": TEST, "val": VAL}[args.split]
    rep = harness._stage("evaluate", evalkit.evaluate, params, table, split, cfg.k_list)
    row = {"epoch": "", "phase": args.split} | rep.row()
    if args.out:
        w = evalkit.MetricsWriter(args.out)
        w.write(row)
        print(f"wrote {args.out}")
    for k in cfg.k_list:
        print(f"recall@{k}={rep.recall[k]:.6f} ndcg@{k}={rep.ndcg[k]:.6f}")
    print(f"users evaluated={rep.n_users} skipped={rep.n_skipped}")
    return 0


def cmd_inspect_mem(args):
    cfg = _config(args).validate()
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = harness._stage("ingest", harness.prepare_table, cfg)
    rows = harness._stage("inspect", harness.inspect_memorization, cfg, args.epochs, table, out)
    if not args.no_figures and rows and rows[0].get("mem_rate_clean") is not None:
        from . import plotting
        plotting.plot_memory_rates(rows, None, out / "memory_rate.png")
        plotting.plot_mp_mr(rows, None, out / "mp_mr.png")
    for r in rows:
        print(f"epoch {r['epoch']}: |M|={r['mem_count']} sigma_hat={r['sigma_hat']:.4f} "
              f"MP={evalkit._fmt(r['MP'])} MR={evalkit._fmt(r['MR'])}")
    print(f"wrote {out / 'memorization.csv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sgdl", description="Self-guided denoising for implicit feedback.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("ingest", help="parse, label, split and inject noise; write a canonical dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="directory for the canonical dataset")
    sp.set_defaults(fn=cmd_ingest)

    sp = sub.add_parser("train", help="run the full pipeline")
    common(sp)
    sp.add_argument("--out", help="output directory (overrides output_dir)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="metrics of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("test", "val"), default="test")
    sp.add_argument("--out", help="metrics CSV to write")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("inspect-mem", help="plain training with memorization / MP-MR curves")
    common(sp)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--out", help="output directory (defaults to output_dir)")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(fn=cmd_inspect_mem)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        if isinstance(exc.cause, ConfigError):
            print(f"config error: {exc.cause}", file=sys.stderr)
            return 2
        print(f"stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        return 3
    except SGDLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
