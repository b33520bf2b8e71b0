"""Command line front end: ``kedexport images`` and ``kedexport prototypes``.

Usage errors exit 2 through argparse. Runtime failures print one
``error:<Class>: message`` line to stderr and exit 1; set KEDEXPORT_DEBUG
to re-raise with the traceback instead.
"""

from __future__ import annotations

import argparse
import os
import sys

from .encoders import IMAGE_MODELS
from .export import ExportJob, export_image_embeddings, export_text_prototypes, scan_dataset

__all__ = ["main"]


def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--dataset", required=True, help="dataset directory with manifest.json")
    sub.add_argument("--model", default="resnet18", choices=sorted(IMAGE_MODELS))
    sub.add_argument("--temperature", type=float, default=1.0)
    sub.add_argument("--batch-size", type=int, default=16)
    sub.add_argument("--template", default="a photo of [CLASS]")
    sub.add_argument("--out", required=True, help=".ked or .csv output path")


def _job(args: argparse.Namespace, **out_paths: str) -> ExportJob:
    return ExportJob(
        model_id=args.model,
        dataset_path=args.dataset,
        prompt_template=args.template,
        temperature=args.temperature,
        batch_size=args.batch_size,
        **out_paths,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kedexport", description="export image datasets into KED embedding files"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    images = sub.add_parser("images", help="encode every dataset image into KED rows")
    _common(images)
    protos = sub.add_parser("prototypes", help="embed one prompt per class into a prototype file")
    _common(protos)
    protos.add_argument(
        "--names",
        default=None,
        help="comma separated class names for the prompts, defaults to the dataset classes",
    )
    args = parser.parse_args(argv)
    try:
        if args.command == "images":
            doc = export_image_embeddings(_job(args, out_embeddings=args.out))
            print(f"wrote {doc['rows']} rows to {args.out}")
        else:
            if args.names is None:
                names = scan_dataset(args.dataset)
            else:
                names = [part.strip() for part in args.names.split(",")]
            doc = export_text_prototypes(_job(args, out_prototypes=args.out), names)
            print(f"wrote {doc['rows']} prototypes to {args.out}")
    except Exception as exc:
        if os.environ.get("KEDEXPORT_DEBUG"):
            raise
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
