"""Command-line entry points: ``serve`` and ``self-test``."""

from __future__ import annotations

import argparse
import sys
import threading

from .models import IMAGENET_MEAN, IMAGENET_STD, BridgeConfig, TorchScorer, self_test
from .server import BridgeServer

__all__ = ["main"]


def _parse_listen(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"--listen must be host:port, got {text!r}")
    return host, int(port)


def _parse_triple(text: str, flag: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"{flag} needs three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def _config_from(args: argparse.Namespace) -> BridgeConfig:
    return BridgeConfig(
        model=args.model,
        device=args.device,
        precision=args.precision,
        batch_cap=args.batch_cap,
        mean=_parse_triple(args.mean, "--mean"),
        std=_parse_triple(args.std, "--std"),
        input_size=args.input_size,
        weights_path=args.weights,
        random_init=args.random_init,
        init_seed=args.seed,
    )


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="torchvision model name, e.g. resnet50")
    parser.add_argument("--device", default="cpu", help="inference device (default cpu)")
    parser.add_argument(
        "--precision", default="fp32", choices=("fp32", "fp16"), help="inference dtype"
    )
    parser.add_argument(
        "--batch-cap", type=int, default=64,
        help="images per forward pass; larger requests are split internally",
    )
    parser.add_argument(
        "--weights", default=None,
        help="local state-dict file (instead of downloading pretrained weights)",
    )
    parser.add_argument(
        "--random-init", action="store_true",
        help="seeded random weights (offline testing; real architecture, no training)",
    )
    parser.add_argument("--seed", type=int, default=0, help="seed for --random-init")
    parser.add_argument(
        "--mean", default=",".join(str(v) for v in IMAGENET_MEAN),
        help="per-channel normalization mean, comma-separated",
    )
    parser.add_argument(
        "--std", default=",".join(str(v) for v in IMAGENET_STD),
        help="per-channel normalization std, comma-separated",
    )
    parser.add_argument(
        "--input-size", type=int, default=224, help="model input edge length (default 224)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scorebridge",
        description="Serve a real image classifier over the v1 remote-scoring protocol",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve_p = sub.add_parser("serve", help="run the scoring server")
    _add_model_flags(serve_p)
    serve_p.add_argument(
        "--listen", default="127.0.0.1:0", help="host:port to bind (port 0 = ephemeral)"
    )

    test_p = sub.add_parser(
        "self-test", help="report fp16-vs-fp32 score divergence (diagnostic, no bound)"
    )
    _add_model_flags(test_p)
    test_p.add_argument("--probe", type=int, default=4, help="probe batch size")
    return parser


def cmd_serve(args: argparse.Namespace) -> int:
    host, port = _parse_listen(args.listen)
    config = _config_from(args)
    scorer = TorchScorer.from_config(config)
    server = BridgeServer(scorer, host=host, port=port).start()
    print(
        f"serving {config.model} ({config.precision}, classes={scorer.num_classes}) "
        f"on {server.address}",
        flush=True,
    )
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_self_test(args: argparse.Namespace) -> int:
    config = _config_from(args)
    report = self_test(config, probe_images=args.probe, seed=args.seed)
    print(
        f"self-test {report['model']}: fp16 vs fp32 over {report['probe_images']} "
        f"probe images ({report['classes']} classes)"
    )
    print(
        f"max-abs score divergence {report['max_abs_divergence']:.3e}, "
        f"mean-abs {report['mean_abs_divergence']:.3e}, "
        f"top-1 agreement {report['top1_agreement']:.0%}"
    )
    print("diagnostic only; no divergence bound is asserted")
    return 0


def main(argv: "list[str] | None" = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            return cmd_serve(args)
        return cmd_self_test(args)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
