"""``gcnlab`` command-line entry point.

Subcommands::

    gcnlab train  --config PATH --out DIR [--seed N]
    gcnlab exact  --config PATH --out DIR
    gcnlab curves --checkpoint PATH --out DIR [--temps LIST]
    gcnlab dump-mcts --checkpoint PATH --context K --out PATH

Exit codes: 0 success, 1 error, 2 training diverged (a recorded outcome).
Every output file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, dump_config, load_config, parse_config, replace
from .exact import iterate_exact
from .mcts import decode_trace, mcts_decode
from .metrics import BLEU_DESCRIPTION, BleuSpec, temperature_curve
from .models import PrefixDiscriminator, TabularGenerator
from .seqspace import SupportError
from .trainer import CSV_FIELDS, build_target, derived_seed, initial_distributions, record_row, train

log = logging.getLogger("gcnlab")

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2
ITERS_SCHEMA = "gcnlab.iters/1"
EXACT_SCHEMA = "gcnlab.exact_dynamics/1"
CURVES_SCHEMA = "gcnlab.curves/1"
CHECKPOINT_SCHEMA = "gcnlab.checkpoint/1"
EXACT_FIELDS = ["context", "t", "z_t", "kl", "delta_t", "eta", "bound", "zhat_spread"]
CURVE_FIELDS = ["temperature", "neg_bleu", "self_bleu"]


class CliError(Exception):
    pass


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: str, fields: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row[k]) for k in fields})
    return buf.getvalue()


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory {out} is not writable")
    return out


def _load_config(path: str) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        return load_config(p)
    except ConfigError as exc:
        raise CliError(f"invalid config {p}: {exc}") from exc


def _workers() -> int:
    raw = os.environ.get("GCNLAB_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"GCNLAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"GCNLAB_THREADS must be a positive integer, got {raw!r}")
    return n


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def save_checkpoint(path: Path, cfg: TrainConfig, gen: TabularGenerator, disc: PrefixDiscriminator) -> None:
    data = {
        "schema": CHECKPOINT_SCHEMA,
        "version": __version__,
        "config": dump_config(cfg),
        "generator": gen.to_json(),
        "discriminator": disc.to_json(),
    }
    atomic_write(path, _json(data))


def load_checkpoint(path: str) -> tuple[TrainConfig, TabularGenerator, PrefixDiscriminator]:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
        if data.get("schema") != CHECKPOINT_SCHEMA:
            raise CliError(f"{p} is not a gcnlab checkpoint")
        cfg = parse_config(data["config"])
        gen = TabularGenerator.from_json(cfg.space, data["generator"])
        disc = PrefixDiscriminator.from_json(cfg.space, data["discriminator"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read checkpoint {p}: {exc}") from exc
    return cfg, gen, disc


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out_dir(args.out)
    started, t0 = _now(), time.perf_counter()
    paths = {"iters": out / "iters.csv", "checkpoint": out / "checkpoint.json", "manifest": out / "manifest.json"}
    manifest = {"version": __version__, "config": dump_config(cfg), "seed": cfg.seed, "started": started}
    try:
        result = train(cfg, workers=_workers())
    except Exception as exc:
        manifest.update(finished=_now(), wall_s=time.perf_counter() - t0, status="error", notes=[str(exc)], outputs={})
        atomic_write(paths["manifest"], _json(manifest))
        raise
    header = f"{ITERS_SCHEMA} variant={cfg.variant} qhat={cfg.qhat} seed={cfg.seed} initial_kl={result.initial_kl!r}"
    atomic_write(paths["iters"], csv_text(header, CSV_FIELDS, [record_row(r) for r in result.records]))
    save_checkpoint(paths["checkpoint"], cfg, result.generator, result.discriminator)
    manifest.update({
        "finished": _now(),
        "wall_s": time.perf_counter() - t0,
        "status": result.status,
        "notes": result.notes,
        "initial_kl": result.initial_kl,
        "final_kl": result.final_kl,
        "iterations_run": len(result.records),
        "outputs": {k: str(v) for k, v in paths.items()},
    })
    atomic_write(paths["manifest"], _json(manifest))
    print(f"{result.status}: {len(result.records)} iterations, final KL {result.final_kl:.6g}")
    return EXIT_DIVERGED if result.status == "diverged" else EXIT_OK


def cmd_exact(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args.out)
    target = build_target(cfg)
    starts = initial_distributions(cfg, target)
    rows, violations = [], []
    for ctx, (p_d, p_0) in enumerate(zip(target, starts)):
        try:
            run = iterate_exact(p_d, p_0, cfg.exact_steps, cfg.exact_stop_kl)
        except SupportError as exc:
            raise CliError(f"context {ctx}: {exc}") from exc
        for t, (rep, zh) in enumerate(zip(run.reports, run.zhats[1:]), 1):
            rows.append({
                "context": ctx, "t": t, "z_t": rep.z_t, "kl": rep.kl_after,
                "delta_t": rep.delta_t, "eta": rep.eta, "bound": rep.bound,
                "zhat_spread": zh.spread,
            })
        violations += [f"context {ctx}: {v}" for v in run.violations]
    atomic_write(out / "exact_dynamics.csv", csv_text(EXACT_SCHEMA, EXACT_FIELDS, rows))
    summary = {"version": __version__, "config": dump_config(cfg), "violations": violations}
    atomic_write(out / "exact_summary.json", _json(summary))
    for v in violations:
        print(f"violation: {v}", file=sys.stderr)
    final = [r["kl"] for r in rows]
    print(f"{len(rows)} exact steps, final KL {final[-1] if final else float('nan'):.3g}, "
          f"{len(violations)} invariant violations")
    return EXIT_OK


def _parse_temps(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise CliError(f"--temps must be a comma-separated list of numbers, got {text!r}") from None


def cmd_curves(args) -> int:
    cfg, gen, _ = load_checkpoint(args.checkpoint)
    temps = _parse_temps(args.temps) if args.temps else cfg.curve_temps
    if any(t <= 0 for t in temps) or list(temps) != sorted(temps):
        raise CliError("temperatures must be positive and ascending")
    out = _out_dir(args.out)
    ctx = args.context
    cfg.space.check_context(ctx)
    p_d = build_target(cfg)[ctx]
    refs = p_d.sample(np.random.default_rng(derived_seed(cfg.seed, 3, ctx)), cfg.curve_refs)
    spec = BleuSpec(cfg.curve_max_n, cfg.space.vocab.eos)
    rng = np.random.default_rng(derived_seed(cfg.seed, 4, ctx))
    points = temperature_curve(gen, refs, temps, cfg.curve_samples, spec, rng, ctx)
    rows = [{"temperature": p.temperature, "neg_bleu": p.neg_bleu, "self_bleu": p.self_bleu} for p in points]
    header = f"{CURVES_SCHEMA} context={ctx} bleu=[{BLEU_DESCRIPTION}, max_n={cfg.curve_max_n}]"
    atomic_write(out / "curves.csv", csv_text(header, CURVE_FIELDS, rows))
    print(f"{len(rows)} curve points written")
    return EXIT_OK


def cmd_dump_mcts(args) -> int:
    cfg, gen, disc = load_checkpoint(args.checkpoint)
    try:
        cfg.space.check_context(args.context)
    except KeyError as exc:
        raise CliError(str(exc)) from exc
    seed = derived_seed(cfg.seed, 5, args.context)
    decode = mcts_decode(gen, disc, args.context, cfg.mcts, rng=np.random.default_rng(seed), seed=seed)
    out = Path(args.out)
    _out_dir(str(out.parent))
    atomic_write(out, _json(decode_trace(decode)))
    print(f"decoded {list(decode.sequence)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcnlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gcnlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override trainer.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("exact", help="iterate the exact cooperative update")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("curves", help="BLEU / self-BLEU temperature sweep of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temps", default=None, help="comma-separated ascending temperatures")
    p.add_argument("--context", type=int, default=0)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("dump-mcts", help="write the search trees of one MCTS decode as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_mcts)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, KeyError, ValueError, OSError) as exc:
        print(f"gcnlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
