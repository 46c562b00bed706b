"""
Run artifact helpers: atomic file writes, canonical CSV/JSON encodings,
content hashes and stage manifests.

Outputs are written to a temporary file next to the target and renamed
into place so an interrupted stage never leaves a half-written file.
"""

import hashlib
import json
import logging
import math
import os
import platform
import tempfile
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'

TRACKED_PACKAGES = ('numpy', 'scipy', 'pandas', 'statsmodels', 'shapely')


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def write_csv(frame: pd.DataFrame, path, index: bool = False) -> Path:
    """Write a DataFrame with a fixed float format and unix line endings"""
    text = frame.to_csv(index=index, float_format=FLOAT_FORMAT, lineterminator='\n')
    return atomic_write_text(path, text)


def to_jsonable(value: Any) -> Any:
    """Convert numpy / pathlib values into plain JSON types; NaN becomes null"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return [to_jsonable(v) for v in items]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if not math.isfinite(value) else value
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + '\n'


def write_json(obj: Any, path) -> Path:
    return atomic_write_text(path, canonical_json(obj))


def read_json(path) -> Any:
    with open(path, 'r', encoding='utf-8') as handle:
        return json.load(handle)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {'python': platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = 'missing'
    return versions


def write_manifest(out_dir, command: str, config: Dict[str, Any], seed: Optional[int],
                   inputs: Iterable, outputs: Iterable) -> Path:
    """Record what a stage consumed and produced.

    No timestamps: rerunning a stage with the same inputs reproduces the
    manifest byte for byte.
    """
    out_dir = Path(out_dir)
    input_hashes = {}
    for item in inputs:
        if item is None:
            continue
        item = Path(item)
        input_hashes[str(item)] = sha256_file(item)
    output_hashes = {}
    for item in outputs:
        item = Path(item)
        output_hashes[item.name] = sha256_file(item)
    manifest = {
        'command': command,
        'config': config,
        'seed': seed,
        'inputs': input_hashes,
        'outputs': output_hashes,
        'versions': package_versions(),
    }
    path = write_json(manifest, out_dir / 'manifest.json')
    logger.info(f"Manifest written: {path} ({len(output_hashes)} outputs)")
    return path
