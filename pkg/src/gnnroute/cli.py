"""Command line entry point: ``gnnroute <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .graph_core import LinkRemovalError, TopologyError
from .harness import COMMANDS, DataError, UsageError, read_config_file, resolve_config, run_command
from .nn_core import CheckpointError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

HELP = {
    "train": "train the q-network on one topology",
    "eval": "paired evaluation of gnn / lb / fluid policies",
    "zoo-sweep": "filter a topology directory and evaluate every kept topology",
    "link-failures": "evaluate under 0..max_failures random link removals",
    "filter": "dry run of the dataset filter",
    "gradcheck": "finite-difference verification of the network gradients",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gnnroute", description="Link message-passing DQN routing for optical transport networks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--seed", type=int, help="master seed for all derived streams")
        p.add_argument("--out-dir", default=f"runs/{name}", help="output directory (default: %(default)s)")
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--topology", help="topology file, bundled name (nsfnet, geant2) or directory")
        p.add_argument("--checkpoint", help="q-network checkpoint")
        p.add_argument("--episodes", type=int, help="episodes (training episodes, or per evaluation / level)")
        p.add_argument("--policies", help="comma-separated subset of gnn,lb,fluid")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other setting")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cli = {
            "seed": args.seed,
            "topology": args.topology,
            "checkpoint": args.checkpoint,
            "episodes": args.episodes,
            "policies": args.policies,
        }
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, val = item.split("=", 1)
            cli[key.strip().replace("-", "_")] = val.strip()
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, cli)
        result = run_command(args.command, cfg, args.out_dir)
    except UsageError as exc:
        print(f"gnnroute: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TopologyError, CheckpointError, LinkRemovalError, OSError) as exc:
        print(f"gnnroute: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.command == "gradcheck":
        failed = False
        for name, rep in result.items():
            print(f"{name}: max relative error {rep.max_error:.3e} ({'ok' if rep.passed else 'FAILED'})")
            failed |= not rep.passed
        if failed:
            return EXIT_VERIFY
    elif args.command == "eval":
        for p in result.policies:
            print(f"{p}: mean score {result.mean(p):.2f}")
    print(f"outputs written to {args.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
