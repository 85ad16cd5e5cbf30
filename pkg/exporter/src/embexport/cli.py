"""Command-line interface: export GAP text to PTEM, verify PTEM pairs.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

import argparse
import sys
from pathlib import Path

from . import ptem
from .export import ExportError, ExportJob, export


def build_parser():
    parser = argparse.ArgumentParser(prog="embexport")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="export GAP text to a PTEM file")
    p.add_argument("--input", required=True, help="GAP-format TSV")
    p.add_argument("--model", choices=("base", "large"), default="base")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layers", type=int, nargs="+", default=None,
                   help="encoder layers to concatenate (default per size)")
    p.add_argument("--weights", default="",
                   help="pretrained checkpoint dir; omitted -> seeded init")

    v = sub.add_parser("verify", help="check a PTEM + manifest pair")
    v.add_argument("--ptem", required=True)
    v.add_argument("--manifest", default=None,
                   help="default: <ptem>.manifest.json")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            out_dir = Path(args.out)
            out_dir.mkdir(parents=True, exist_ok=True)
            job = ExportJob(
                input_tsv=args.input,
                model_size=args.model,
                out_ptem=str(out_dir / "embeddings.ptem"),
                layers=args.layers or [],
                weights=args.weights,
            )
            ptem_path, manifest_path = export(job)
            print(f"wrote {ptem_path} (D={job.dim}) and {manifest_path}")
        else:
            manifest = args.manifest or str(
                ptem.manifest_path_for(args.ptem))
            ok, problems = ptem.verify(args.ptem, manifest)
            for problem in problems:
                print(f"problem: {problem}", file=sys.stderr)
            print("ok" if ok else f"failed with {len(problems)} problem(s)")
            return 0 if ok else 2
    except (ExportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
