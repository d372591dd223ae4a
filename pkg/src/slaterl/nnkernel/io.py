"""Parameter persistence: versioned, exact round-trip containers.

Files are numpy ``.npz`` archives holding one array per named parameter plus
a JSON metadata entry with the format version and a fingerprint of the
owning module's architecture. Loading into a module whose fingerprint does
not match is an error.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class SpecMismatchError(ValueError):
    """Saved parameters do not match the target module's architecture."""


def _fingerprint(module) -> str:
    return json.dumps(module.spec_dict(), sort_keys=True, separators=(",", ":"))


def save_parameters(module, path) -> None:
    path = Path(path)
    params = module.named_parameters()
    meta = {
        "format_version": FORMAT_VERSION,
        "fingerprint": _fingerprint(module),
        "names": list(params.keys()),
        "dtype": str(next(iter(params.values())).dtype) if params else "float64",
    }
    arrays = {name: p.values for name, p in params.items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_parameters(module, path) -> None:
    path = Path(path)
    try:
        with np.load(path) as archive:
            if _META_KEY not in archive:
                raise SpecMismatchError(f"{path}: not a parameter container (no metadata)")
            meta = json.loads(bytes(archive[_META_KEY]).decode("utf-8"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise SpecMismatchError(
                    f"{path}: unsupported format version {meta.get('format_version')}"
                )
            if meta["fingerprint"] != _fingerprint(module):
                raise SpecMismatchError(
                    f"{path}: saved architecture does not match target module"
                )
            params = module.named_parameters()
            if set(meta["names"]) != set(params.keys()):
                raise SpecMismatchError(f"{path}: parameter name set mismatch")
            for name, p in params.items():
                stored = archive[name]
                if stored.shape != p.values.shape or stored.dtype != p.values.dtype:
                    raise SpecMismatchError(
                        f"{path}: parameter {name!r} has shape/dtype mismatch"
                    )
                p.values[...] = stored
    except (OSError, ValueError, KeyError) as exc:
        if isinstance(exc, SpecMismatchError):
            raise
        raise SpecMismatchError(f"{path}: corrupt or unreadable parameter file: {exc}") from exc
