"""Content-addressed result cache: cache/<stage>/<key>.json.

Every entry is a JSON document written atomically (temp file + rename in
the same directory). A corrupt or unreadable entry is treated as a miss and
logged, never raised: losing a cache entry must not fail a run.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from pathlib import Path

log = logging.getLogger("redec.cache")

STAGE_DECOMPILED = "decompiled"
STAGE_ORACLE = "oracle"
STAGE_REFINED = "refined"


def cache_get(cache_dir: str | Path, stage: str, key: str) -> dict | None:
    path = Path(cache_dir) / stage / f"{key}.json"
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        log.warning("cache: discarding corrupt entry %s (%s)", path, exc)
        return None


def cache_put(cache_dir: str | Path, stage: str, key: str, doc: dict) -> None:
    target = Path(cache_dir) / stage / f"{key}.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, target)
    except OSError:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
