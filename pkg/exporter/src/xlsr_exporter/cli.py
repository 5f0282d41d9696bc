"""xlsr-export: write frozen wav2vec2/XLS-R hidden states as .mosf files.

Exit codes: 0 success, 1 usage, 2 export/data failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import DEFAULT_MODEL, ExportError, ExportSpec, run_export


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="xlsr-export", description=__doc__)
    parser.add_argument("--manifest", required=True, help="clip manifest CSV")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--model", default=DEFAULT_MODEL,
                        help="HuggingFace model id or local model directory")
    parser.add_argument("--layer", type=int, default=None,
                        help="hidden-layer index (default: final layer)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel file workers (inference stays serialized)")
    parser.add_argument("--chunk-frames", type=int, default=0,
                        help="process clips in chunks of this many output frames (0 = whole)")
    parser.add_argument("--no-normalize", action="store_true",
                        help="skip per-clip zero-mean/unit-variance input scaling")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    spec = ExportSpec(
        manifest=Path(args.manifest),
        out_dir=Path(args.out),
        model_id=args.model,
        layer=args.layer,
        jobs=args.jobs,
        chunk_frames=args.chunk_frames,
        normalize=not args.no_normalize,
    )
    try:
        manifest_path = run_export(spec)
    except ExportError as exc:
        print(f"xlsr-export: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"xlsr-export: {exc}", file=sys.stderr)
        return 2
    print(f"wrote feature manifest to {manifest_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
