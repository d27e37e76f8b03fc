"""Run the sidecar:

    python -m vlm_bridge --model tiny
    python -m vlm_bridge --model hf:/path/to/llava-checkpoint --tap-layer 2
"""
from __future__ import annotations

import argparse
import sys

from .config import BridgeConfig
from .server import BridgeServer


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vlm_bridge", description=__doc__)
    parser.add_argument("--model", default="tiny", help="tiny | tiny:SEED | hf:PATH_OR_ID")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--tap-layer", type=int, default=None)
    parser.add_argument(
        "--prompt-template", choices=["none", "open", "multiple_choice"], default="none"
    )
    parser.add_argument("--max-answer-tokens", type=int, default=8)
    parser.add_argument("--tcp", default=None, help="serve on HOST:PORT instead of stdio")
    args = parser.parse_args(argv)
    config = BridgeConfig(
        model=args.model,
        device=args.device,
        tap_layer=args.tap_layer,
        prompt_template=args.prompt_template,
        max_answer_tokens=args.max_answer_tokens,
    )
    server = BridgeServer(config)
    if args.tcp:
        host, port = args.tcp.rsplit(":", 1)
        server.serve_tcp(host, int(port))
    else:
        server.serve_stdio()
    return 0


if __name__ == "__main__":
    sys.exit(main())
