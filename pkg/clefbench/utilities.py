import hashlib
import logging
import os

import numpy as np
import simplejson as json
from termcolor import colored

from clefbench.errors import ArtifactError

logger = logging.getLogger("UTIL")


SUFFIXES = "KMGTPEZY"


def naturalsize(value, fmt="%.1f"):
    """show us file sizes nicely formatted, gnu style (1.2K, 3.4M)
    """
    size = float(value)
    if size < 1024:
        return "%dB" % size
    for i, suffix in enumerate(SUFFIXES):
        unit = 1024 ** (i + 2)
        if size < unit:
            return (fmt + "%s") % (1024 * size / unit, suffix)
    return (fmt + "%s") % (1024 * size / unit, suffix)


def to_jsonable(obj):
    """Convert numpy containers and scalars into plain python for simplejson
    """
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def dumps(obj, indent=None):
    # sort_keys keeps artifact bytes stable between runs
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=indent)


def stable_hash(obj, length=16):
    """sha256 over the canonical json form of obj, truncated to `length` hex chars
    """
    canonical = json.dumps(
        to_jsonable(obj), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()[:length]


def file_hash(path, length=16):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()[:length]


def write_json(path, obj, indent=2):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = dumps(obj, indent=indent) + "\n"
    with open(path, "w") as f:
        f.write(text)
    logger.info(f"Wrote {path} ({naturalsize(len(text))})")
    return path


def read_json(path):
    if not os.path.exists(path):
        raise ArtifactError(f"{path} not found")
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ArtifactError(f"{path} is not valid JSON: {e}")


def format_table(header, rows, float_fmt="{:.4f}"):
    """Aligned plain-text table; floats formatted with float_fmt, None as '-'
    """

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return float_fmt.format(v)
        return str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [len(h) for h in header]
    for row in body:
        for i, v in enumerate(row):
            widths[i] = max(widths[i], len(v))
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def status(message, ok=True):
    """Colour a one line status for the console
    """
    return colored(message, "green" if ok else "yellow")
