"""cnn-backend command line: `train --job <file>` and `cam --request <file>`."""

from __future__ import annotations

import argparse
import sys

from .cam import generate_cam, load_request
from .manifest import JobError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cnn-backend")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="fine-tune per a job file")
    train.add_argument("--job", required=True)

    cam = sub.add_parser("cam", help="render class-activation overlays")
    cam.add_argument("--request", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            from .train import fine_tune  # torch import deferred to use

            out_dir = fine_tune(args.job)
            print(f"wrote interchange files to {out_dir}")
        else:
            written = generate_cam(load_request(args.request))
            print(f"wrote {len(written)} overlays under {written[0].parent}")
        return 0
    except JobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
