"""Command-line entry point.

    hetroute rvi --config table1 --out runs/table1
    hetroute train --config two_server.json --seed 3 --horizon 1000000
    hetroute compare --config cfg.json --seed 0,1,2
    hetroute plot --input runs/x/train_record.csv --x step --y avg_cost_running

Exit status: 0 on success, 2 for an invalid spec or arguments, 1 when the run
itself fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import REFERENCE_CONFIGS, SpecError, run

NAMED_SPECS = {
    "table1": {"named": "table1"},
    "fig2": {"named": "fig2"},
}

COMMANDS = ("rvi", "train", "simulate", "compare", "verify2", "sweep")


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be an integer or a comma list, got {text!r}") from exc


def load_spec(source: str | None) -> dict:
    if source is None:
        return {}
    if source in NAMED_SPECS:
        return dict(NAMED_SPECS[source])
    path = Path(source)
    if not path.exists():
        raise SpecError(f"config {source!r} is neither a file nor a named spec ({', '.join(NAMED_SPECS)})")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"could not parse {source}: {exc}") from exc
    if not isinstance(spec, dict) or not spec:
        raise SpecError(f"{source} must hold a non-empty JSON object")
    return spec


def apply_overrides(command: str, spec: dict, args) -> tuple[str, dict]:
    spec = dict(spec)
    kind = command
    if command == "train" and (args.discounted or spec.get("gamma") is not None
                               or spec.get("hyperparams", {}).get("gamma") is not None):
        kind = "train-discounted"
    if args.seed is not None:
        spec["seeds"] = args.seed
        if command == "train":
            spec.setdefault("hyperparams", {})
            spec["hyperparams"] = {**spec["hyperparams"], "seed": args.seed[0]}
    if args.horizon is not None:
        if command == "train":
            spec["hyperparams"] = {**spec.get("hyperparams", {}), "horizon": args.horizon}
        else:
            spec["horizon"] = args.horizon
    if command in ("simulate", "compare", "train", "verify2") and "system" not in spec and "named" not in spec:
        raise SpecError(f"'{command}' needs --config with a 'system' object "
                        f"(reference systems: {', '.join(REFERENCE_CONFIGS)})")
    return kind, spec


def plot_csv(input_path: Path, x: str, ys: list[str], out: Path) -> None:
    import csv

    try:
        import matplotlib
    except ImportError as exc:
        raise SpecError("plotting needs matplotlib (pip install hetroute[plot])") from exc
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    with open(input_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SpecError(f"{input_path} has no data rows")
    missing = [c for c in [x, *ys] if c not in rows[0]]
    if missing:
        raise SpecError(f"columns {missing} not in {input_path}")
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [float(r[x]) for r in rows]
    for col in ys:
        ax.plot(xs, [float(r[col]) for r in rows], label=col)
    ax.set_xlabel(x)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, format="svg")
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetroute", description="Routing experiments for heterogeneous server queues.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON spec path or a named spec (table1, fig2)")
        sp.add_argument("--out", default=f"runs/{name}", help="output directory")
        sp.add_argument("--seed", type=parse_seeds, help="seed or comma-separated seeds")
        sp.add_argument("--horizon", type=int, help="epochs (training for 'train', evaluation otherwise)")
        if name == "train":
            sp.add_argument("--discounted", action="store_true", help="use the discounted TD target")
    pl = sub.add_parser("plot", help="render CSV columns as an SVG line chart")
    pl.add_argument("--input", required=True, type=Path)
    pl.add_argument("--x", required=True)
    pl.add_argument("--y", required=True, nargs="+")
    pl.add_argument("--out", required=True, type=Path)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "plot":
            plot_csv(args.input, args.x, args.y, args.out)
            return 0
        if args.horizon is not None and args.horizon < 1:
            raise SpecError("--horizon must be positive")
        spec = load_spec(args.config)
        if not spec:
            raise SpecError("empty spec: pass --config")
        kind, spec = apply_overrides(args.command, spec, args)
        manifest = run(kind, spec, args.out)
    except SpecError as exc:
        print(f"hetroute: invalid spec: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        logging.getLogger("hetroute").exception("run failed")
        print(f"hetroute: run failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {', '.join(manifest['artifacts'])} to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
