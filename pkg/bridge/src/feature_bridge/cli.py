"""Command-line interface: ``bridge extract`` and ``bridge realize``.

Exit codes: 0 success, 2 bad input or configuration, 1 runtime failure
(including any alpha failing to realize).
"""

import argparse
import logging
import sys

from feature_bridge.config import BridgeConfig
from feature_bridge.errors import BridgeError
from feature_bridge.extract import extract_batch
from feature_bridge.realize import realize_path


def _add_config_flags(parser):
    parser.add_argument("--source-backbone", default=BridgeConfig.source_backbone)
    parser.add_argument("--target-backbone", default=BridgeConfig.target_backbone)
    parser.add_argument("--image-size", type=int, default=BridgeConfig.image_size)
    parser.add_argument("--output-dir", default=".")


def _build_parser():
    parser = argparse.ArgumentParser(prog="bridge")
    sub = parser.add_subparsers(dest="command", required=True)

    p_extract = sub.add_parser("extract", help="encode images into VIBE1 token grids")
    p_extract.add_argument("--images", nargs="+", required=True)
    p_extract.add_argument("--space", choices=("source", "target"), required=True)
    p_extract.add_argument("--max-workers", type=int, default=4)
    _add_config_flags(p_extract)

    p_realize = sub.add_parser("realize", help="realize a decoded path via an endpoint")
    p_realize.add_argument("--blend-dir", required=True)
    p_realize.add_argument("--endpoint-url", required=True)
    p_realize.add_argument("--api-key-env", default=BridgeConfig.api_key_env)
    p_realize.add_argument("--timeout", type=float, default=30.0)
    p_realize.add_argument("--rate-limit", type=float, default=0.0)
    _add_config_flags(p_realize)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        config = BridgeConfig(
            source_backbone=args.source_backbone,
            target_backbone=args.target_backbone,
            image_size=args.image_size,
            endpoint_url=getattr(args, "endpoint_url", None),
            api_key_env=getattr(args, "api_key_env", BridgeConfig.api_key_env),
            output_dir=args.output_dir,
        )
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "extract":
            paths = extract_batch(
                args.images, args.space, config, max_workers=args.max_workers
            )
            for path in paths:
                print(path)
            return 0
        manifest = realize_path(
            args.blend_dir, config, timeout=args.timeout, rate_limit_s=args.rate_limit
        )
        for key, name in sorted(manifest["realized_files"].items()):
            print(f"alpha {key}: {name}")
        if manifest["failures"]:
            for key, message in sorted(manifest["failures"].items()):
                print(f"error: alpha {key} failed: {message}", file=sys.stderr)
            return 1
        return 0
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
