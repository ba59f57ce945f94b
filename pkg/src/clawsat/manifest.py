"""Run manifests: every artifact directory carries a JSON record of the
command, configuration, corpus digest, checkpoint lineage, and seeds that
produced it. Serialization is canonical so reruns overwrite byte-identically."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


@dataclass
class RunManifest:
    command: str
    seeds: list[int]
    config: dict = field(default_factory=dict)
    corpus_digest: str | None = None
    lineage: dict = field(default_factory=dict)
    tool_version: str = __version__

    def write(self, path: str | Path) -> None:
        payload = json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
        Path(path).write_text(payload, encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)
