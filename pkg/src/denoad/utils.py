"""Small shared helpers: seeding, hashing, atomic writes."""

import hashlib
import json
import os
import tempfile

import numpy as np


def derive_rng(*keys) -> np.random.Generator:
    """Build a Generator from a tuple of integer keys.

    Strings are folded to integers first so call sites can use readable
    labels ("train", "noise", ...) without colliding across purposes.
    """
    ints = []
    for k in keys:
        if isinstance(k, str):
            h = hashlib.sha256(k.encode("utf-8")).digest()[:8]
            ints.append(int.from_bytes(h, "little"))
        else:
            ints.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(ints))


def derive_seed(*keys) -> int:
    """Stable 64-bit seed from the same key scheme as derive_rng."""
    h = hashlib.sha256()
    for k in keys:
        if isinstance(k, str):
            h.update(b"s" + k.encode("utf-8") + b"\x00")
        else:
            h.update(b"i" + int(k).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest()[:8], "little")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def json_canonical(obj) -> str:
    """Deterministic JSON encoding: sorted keys, fixed separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def thread_count(default: int = 1) -> int:
    """Worker count for corpus decoding, from DENOAD_THREADS."""
    raw = os.environ.get("DENOAD_THREADS", "")
    if not raw.strip():
        return default
    try:
        n = int(raw)
    except ValueError:
        return default
    return max(1, n)
