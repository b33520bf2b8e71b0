"""Run provenance sidecars.

Every CLI output file gets a sibling <output>.manifest.json recording the
subcommand, its flags, the seed, sha256 digests of the inputs, and a
timestamp. The manifest is the only place a timestamp appears, so output
files themselves stay byte-identical across reruns.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

ARTIFACT_VERSION = "0.1.0"

__all__ = ["ARTIFACT_VERSION", "RunManifest", "manifest_for", "sha256_file", "write_manifest"]


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    flags: dict
    seed: int | None
    input_digests: dict = field(default_factory=dict)
    artifact_version: str = ARTIFACT_VERSION
    created_at: str = ""


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_for(subcommand: str, flags: dict, seed: int | None, inputs) -> RunManifest:
    """Build a manifest, digesting each input path that exists."""
    digests = {str(p): sha256_file(p) for p in inputs}
    return RunManifest(
        subcommand=subcommand,
        flags={k: v for k, v in sorted(flags.items())},
        seed=seed,
        input_digests=digests,
        created_at=datetime.now(timezone.utc).isoformat(),
    )


def write_manifest(man: RunManifest, output_path) -> str:
    """Write the sidecar for ``output_path``; returns the sidecar path."""
    sidecar = f"{output_path}.manifest.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(asdict(man), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar
