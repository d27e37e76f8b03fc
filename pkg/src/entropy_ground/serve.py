"""Serve an in-process backend over the wire protocol.

Lets the toy or stub backend act as a remote process, which is how the
transport-equivalence suite exercises the protocol and how non-Python
clients can drive the reference backends:

    python -m entropy_ground.serve --backend toy --seed 7
    python -m entropy_ground.serve --backend stub --tcp 127.0.0.1:9321
"""
from __future__ import annotations

import argparse
import sys

from .backends import StubBackend, ToyBackend, serve_stdio, serve_tcp
from .toy import ToyModelConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entropy_ground.serve", description=__doc__.splitlines()[0]
    )
    parser.add_argument("--backend", choices=["toy", "stub"], default="toy")
    parser.add_argument("--seed", type=int, default=0, help="toy weight seed")
    parser.add_argument("--vocab", type=int, default=64)
    parser.add_argument("--embed-dim", type=int, default=16)
    parser.add_argument("--grid", type=str, default="8x8", help="ROWSxCOLS token grid")
    parser.add_argument(
        "--attention-mask",
        type=str,
        default=None,
        help="comma-separated attendable token indices (toy only)",
    )
    parser.add_argument(
        "--tcp", type=str, default=None, help="serve on HOST:PORT instead of stdio"
    )
    return parser


def backend_from_args(args) -> object:
    if args.backend == "stub":
        rows, cols = (int(v) for v in args.grid.lower().split("x"))
        return StubBackend(rows=rows, cols=cols)
    rows, cols = (int(v) for v in args.grid.lower().split("x"))
    mask = None
    if args.attention_mask:
        mask = frozenset(int(tok) for tok in args.attention_mask.split(","))
    config = ToyModelConfig(
        embed_dim=args.embed_dim,
        vocab=args.vocab,
        grid_rows=rows,
        grid_cols=cols,
        seed=args.seed,
        attention_mask=mask,
    )
    return ToyBackend(config)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    backend = backend_from_args(args)
    if args.tcp:
        host, port = args.tcp.rsplit(":", 1)
        serve_tcp(backend, host, int(port))
    else:
        serve_stdio(backend)
    return 0


if __name__ == "__main__":
    sys.exit(main())
