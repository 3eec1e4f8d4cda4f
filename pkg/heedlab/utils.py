"""
Density-weighted residual alignment laboratory.

Small helpers shared by the CLI, the harness and the training loops.
"""
import hashlib
import json
import platform
from typing import Any, Dict

import numpy as np
from psutil import Process, cpu_count


def sizeof_fmt(num: int, suffix: str = "B") -> str:
    """
    Human readable version of file size.

    Examples:

        >>> sizeof_fmt(168963795964)
        "157.4 GiB"
        >>> sizeof_fmt(524288000)
        "500.0 MiB"

    Source: https://stackoverflow.com/a/1094933/1117028
    """
    val = float(num)
    for unit in ("", "Ki", "Mi", "Gi", "Ti", "Pi", "Ei", "Zi"):
        if abs(val) < 1024.0:
            return f"{val:3.1f} {unit}{suffix}"
        val /= 1024.0
    return f"{val:.1f} Yi{suffix}"


def metrics() -> Dict[str, Any]:
    """Resources of the current process, attached to stage logs."""
    proc = Process()
    return {"rss": proc.memory_info().rss, "cpu_time": sum(proc.cpu_times()[:2])}


def machine() -> Dict[str, Any]:
    """Where a run happened; part of the run metadata."""
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "cpus": cpu_count(logical=True),
    }


def to_builtin(obj: Any) -> Any:
    """Turn numpy scalars/arrays and tuples into JSON-friendly objects."""
    if isinstance(obj, dict):
        return {str(key): to_builtin(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(value) for value in obj]
    if isinstance(obj, np.ndarray):
        return to_builtin(obj.tolist())
    if isinstance(obj, np.generic):
        return to_builtin(obj.item())
    if isinstance(obj, float) and not np.isfinite(obj):
        # JSON has no infinity, reports use a marker string instead
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_builtin(obj), sort_keys=True, separators=(",", ":"))


def sha256(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
