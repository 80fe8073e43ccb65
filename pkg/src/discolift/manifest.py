"""Run manifests recording how every artifact in an output directory was produced."""

import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, Optional

from . import __version__

MANIFEST_NAME = "manifest.json"


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class RunManifest:
    """Manages <output_dir>/manifest.json.

    The manifest carries no timestamps, so re-running a command with the same
    inputs rewrites it byte for byte.
    """

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.path = self.output_dir / MANIFEST_NAME

    def create(self, command: str, config_hash: str, seed: int) -> None:
        """Start a fresh manifest for a command run."""
        self.save(
            {
                "command": command,
                "version": __version__,
                "config_hash": config_hash,
                "seed": seed,
                "artifacts": {},
            }
        )

    def load(self) -> Optional[dict]:
        """Load the manifest. Returns None if it doesn't exist."""
        if not self.path.exists():
            return None

        with open(self.path) as f:
            return json.load(f)

    def save(self, manifest: dict) -> None:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")

    def update(self, updates: dict) -> None:
        """Update specific top-level fields."""
        manifest = self.load() or {}
        manifest.update(updates)
        self.save(manifest)

    def record_artifacts(self, paths: Iterable[Path]) -> Dict[str, str]:
        """Checksum files and add them under their path relative to the output directory."""
        manifest = self.load() or {"artifacts": {}}
        artifacts = dict(manifest.get("artifacts", {}))
        for path in paths:
            path = Path(path)
            try:
                key = path.relative_to(self.output_dir).as_posix()
            except ValueError:
                key = path.as_posix()
            artifacts[key] = file_sha256(path)
        manifest["artifacts"] = dict(sorted(artifacts.items()))
        self.save(manifest)
        return manifest["artifacts"]

    def verify(self) -> Dict[str, bool]:
        """Whether each recorded artifact still matches its checksum."""
        manifest = self.load() or {}
        results = {}
        for key, expected in manifest.get("artifacts", {}).items():
            path = self.output_dir / key
            results[key] = path.exists() and file_sha256(path) == expected
        return results
