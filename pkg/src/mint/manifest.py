"""Run manifests and seed substreams for reproducible pipelines."""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__


def derive_seed(root_seed: int, name: str) -> int:
    """Named substream of the root seed; stable across runs and platforms."""
    digest = hashlib.blake2b(f"{root_seed}:{name}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % (2**63)


def config_hash(config_doc) -> str:
    canon = json.dumps(config_doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def tool_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


@dataclass
class RunManifest:
    """Provenance of one CLI run.

    The deterministic core (everything except wall time) hashes to a
    manifest id that artifact files embed; the manifest itself carries the
    wall time and is not part of the byte-reproducible artifact set.
    """

    command: str
    args: dict
    config_hash: str
    seed: int
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    version: str = field(default_factory=tool_version)
    wall_time_s: float = 0.0

    def core_dict(self) -> dict:
        return {
            "command": self.command,
            "args": self.args,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
        }

    def manifest_id(self) -> str:
        return hashlib.sha256(
            json.dumps(self.core_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        ).hexdigest()

    def write(self, out_dir: str | Path) -> Path:
        doc = self.core_dict()
        doc["manifest_id"] = self.manifest_id()
        doc["wall_time_s"] = self.wall_time_s
        path = Path(out_dir) / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


class Stopwatch:
    def __init__(self) -> None:
        self.start = time.monotonic()

    def elapsed(self) -> float:
        return time.monotonic() - self.start
