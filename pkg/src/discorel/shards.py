"""Line-delimited record shards with a hash manifest.

One JSON object per line, keys sorted, shards named ``part-NNNNN``; the
manifest lists per-shard sha256 so reruns can be compared byte for byte.
The corpus extractor and the synthetic generator share this format.
"""

import json
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DataError, ParseError
from .util import sha256_file, stable_json

MANIFEST_NAME = "shards.json"


def write_shards(
    records: Iterable[dict],
    out_dir,
    shard_size: int = 10000,
    extra_manifest: dict | None = None,
) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shards = []
    buf: list[str] = []

    def flush():
        name = f"part-{len(shards):05d}"
        path = out_dir / name
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(buf)
        shards.append(
            {"name": name, "n_records": len(buf), "sha256": sha256_file(path)}
        )
        buf.clear()

    for rec in records:
        buf.append(stable_json(rec) + "\n")
        if len(buf) >= shard_size:
            flush()
    if buf or not shards:
        flush()
    manifest = {
        "format": "discorel-shards-v1",
        "n_records": sum(s["n_records"] for s in shards),
        "shards": shards,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        fh.write(stable_json(manifest) + "\n")
    return manifest


def read_manifest(shard_dir) -> dict:
    path = Path(shard_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no shard manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_shards(shard_dir, limit: int | None = None) -> Iterator[dict]:
    shard_dir = Path(shard_dir)
    manifest = read_manifest(shard_dir)
    seen = 0
    for entry in manifest["shards"]:
        path = shard_dir / entry["name"]
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if limit is not None and seen >= limit:
                    return
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(str(exc), path=str(path), line=n) from exc
                seen += 1
