"""Command-line entry point: plots render --kind <k> --in <csv...> --out <p>."""

import argparse
import sys

from .io import SchemaError, load_table
from .render import render

EXIT_OK = 0
EXIT_INPUT = 2

KIND_SCHEMA = {
    "loss_param": "trace",
    "grad_compare": "trace",
    "solver_convergence": "bench",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plots",
        description="Render figures from simulation CSV artifacts")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure")
    p.add_argument("--kind", required=True, choices=sorted(KIND_SCHEMA))
    p.add_argument("--in", dest="inputs", required=True, nargs="+",
                   metavar="CSV", help="input CSV file(s)")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--linear-loss", action="store_true",
                   help="plot loss on a linear axis instead of log")
    p.set_defaults(func=cmd_render)
    return parser


def cmd_render(args):
    schema = KIND_SCHEMA[args.kind]
    try:
        tables = [load_table(path, schema) for path in args.inputs]
        render(args.kind, tables, args.out, log_loss=not args.linear_loss)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
