"""xdiag-extract command line.

Extraction: xdiag-extract --modality image|text --inputs F --encoder ID
--out P [--annotations F.csv] [--batch-size N] [--on-error skip|abort].
Verification: xdiag-extract verify <store>.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .encoders import EncoderError
from .extract import Annotations, ExtractionError, ExtractionJob, extract, read_manifest, verify


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xdiag-extract", description=__doc__)
    parser.add_argument("--modality", choices=["image", "text"])
    parser.add_argument("--inputs", help="manifest file: one path or text per line")
    parser.add_argument("--encoder", help="encoder id, e.g. clip:openai/clip-vit-base-patch32 or hash:512")
    parser.add_argument("--out", help="output store path")
    parser.add_argument("--annotations", help="CSV with header id,label,<family1>,...")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--on-error", choices=["abort", "skip"], default="abort")
    return parser


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if argv and argv[0] == "verify":
        if len(argv) != 2:
            print("usage: xdiag-extract verify <store>", file=sys.stderr)
            return 1
        return verify(argv[1])

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    missing = [name for name in ("modality", "inputs", "encoder", "out") if getattr(args, name) is None]
    if missing:
        parser.print_usage(sys.stderr)
        print(f"xdiag-extract: error: missing {', '.join('--' + m for m in missing)}", file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        job = ExtractionJob(
            inputs=read_manifest(args.inputs),
            modality=args.modality,
            encoder_id=args.encoder,
            out_path=args.out,
            batch_size=args.batch_size,
            annotations=Annotations.load(args.annotations) if args.annotations else None,
            on_error=args.on_error,
        )
        out = extract(job)
    except (ExtractionError, EncoderError, OSError) as exc:
        print(f"xdiag-extract: error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
