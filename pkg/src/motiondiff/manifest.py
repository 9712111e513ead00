"""Run manifests and seed stream splitting.

Every command derives all of its randomness from one integer seed.  Each
component draws from its own stream::

    rng_for(seed, "data" | "init" | "train" | "sample" | "metrics")
        == np.random.default_rng(SeedSequence(seed, spawn_key=(index,)))

so changing, say, the number of training epochs never shifts the random
numbers used for weight initialization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

STREAMS = {"data": 0, "init": 1, "train": 2, "sample": 3, "metrics": 4}


def rng_for(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[component],)))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".manifest.json")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    schedule: dict | None = None
    norm_stats: dict | None = None
    dataset_fingerprint: str | None = None
    lineage: list[dict] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_sidecar(self, artifact) -> Path:
        out = sidecar_path(artifact)
        out.write_text(self.to_json(), encoding="utf-8")
        return out


def read_sidecar(artifact) -> RunManifest:
    return RunManifest.from_dict(json.loads(sidecar_path(artifact).read_text(encoding="utf-8")))


def lineage_entry(role: str, path) -> dict:
    """File reference by base name and content hash, so manifests do not depend on where a run lives."""
    return {"role": role, "file": Path(path).name, "sha256": file_sha256(path)}
