"""Per-command run manifests: config snapshot, seeds, input/output hashes,
wall time, status. Written before outputs (status=running) and finalized
after; a crash leaves status=failed behind. The manifest itself carries
timings and is excluded from byte-for-byte output comparisons."""

from __future__ import annotations

import json
import time
from pathlib import Path

from . import __version__
from .util import hash_tree, sha256_file

MANIFEST_FILE = "run_manifest.json"


class RunContext:
    def __init__(self, command: str, argv, out_dir, config: dict | None = None, seed=None):
        self.command = command
        self.argv = list(argv)
        self.out_dir = Path(out_dir)
        self.config = config or {}
        self.seed = seed
        self.input_hashes: dict[str, str] = {}
        self._t0 = time.monotonic()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._write(status="running", outputs={})

    def add_input(self, path) -> None:
        path = Path(path)
        if path.is_dir():
            for rel, digest in hash_tree(path).items():
                self.input_hashes[f"{path.as_posix()}/{rel}"] = digest
        elif path.is_file():
            self.input_hashes[path.as_posix()] = sha256_file(path)

    def _write(self, status: str, outputs: dict) -> None:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "input_hashes": self.input_hashes,
            "output_hashes": outputs,
            "timings": {"wall_s": round(time.monotonic() - self._t0, 3)},
            "tool_version": __version__,
            "status": status,
        }
        with open(self.out_dir / MANIFEST_FILE, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finalize(self, status: str = "ok") -> None:
        outputs = {
            rel: digest
            for rel, digest in hash_tree(self.out_dir).items()
            if rel != MANIFEST_FILE
        }
        self._write(status=status, outputs=outputs)
