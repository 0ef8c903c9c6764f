"""
performance_monitor.py
JSONL timing log for solver, tuning and simulation entry points, plus a
fit-metrics log and its summary.

Both logs are off unless SSVCQR_PERF_LOG / SSVCQR_FIT_LOG name a file (or a
path is set programmatically). Writes go through one lock so parallel folds and
replicates can share a log.
"""

import json
import threading
import time
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Optional

from settings import get_optional_path

_WRAPPED_ATTR = "__performance_monitor_wrapped__"
_LOG_LOCK = threading.Lock()
_PERF_LOG_PATH: Optional[Path] = get_optional_path("SSVCQR_PERF_LOG")
_FIT_LOG_PATH: Optional[Path] = get_optional_path("SSVCQR_FIT_LOG")

# Attributes copied from a returned FitResult (or similar) into the timing entry.
_RESULT_FIELDS = ("iterations", "converged", "objective")


def set_performance_log_path(path: str | Path | None) -> None:
    """Redirect timing entries to ``path``; ``None`` disables the log."""
    global _PERF_LOG_PATH
    _PERF_LOG_PATH = Path(path) if path is not None else None


def set_fit_log_path(path: str | Path | None) -> None:
    global _FIT_LOG_PATH
    _FIT_LOG_PATH = Path(path) if path is not None else None


def _append_jsonl(path: Optional[Path], entry: Dict[str, Any]) -> None:
    if path is None:
        return
    serialized = json.dumps(entry, ensure_ascii=False, default=float)
    with _LOG_LOCK:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as handle:
            handle.write(serialized)
            handle.write("\n")


def _result_fields(result: Any) -> Dict[str, Any]:
    fields = {}
    for name in _RESULT_FIELDS:
        value = getattr(result, name, None)
        if isinstance(value, (bool, int, float)):
            fields[name] = value
    return fields


def monitor_function(func: Callable[..., Any]) -> Callable[..., Any]:
    """Wrap ``func`` so each call appends its duration and outcome to the timing log."""
    if getattr(func, _WRAPPED_ATTR, False):
        return func

    def _entry(status: str, duration: float, extra: Dict[str, Any]) -> Dict[str, Any]:
        return {
            "timestamp": datetime.now(tz=timezone.utc).isoformat(),
            "module": func.__module__,
            "function": func.__qualname__,
            "status": status,
            "elapsed_ms": round(duration * 1000, 3),
            **extra,
        }

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        start = time.perf_counter()
        try:
            result = func(*args, **kwargs)
        except Exception as exc:
            _append_jsonl(_PERF_LOG_PATH, _entry("error", time.perf_counter() - start, {"error": repr(exc)}))
            raise
        _append_jsonl(_PERF_LOG_PATH, _entry("success", time.perf_counter() - start, _result_fields(result)))
        return result

    setattr(wrapper, _WRAPPED_ATTR, True)
    return wrapper


def log_fit_metrics(result: Any, label: str = "", elapsed_s: float | None = None) -> None:
    """Append one record describing a finished fit to the fit-metrics log."""
    selected = getattr(result, "selected_local", None)
    kkt = getattr(result, "kkt_residual", None)
    record = {
        "timestamp": datetime.now(tz=timezone.utc).isoformat(),
        "label": label,
        "solver": getattr(result, "solver", ""),
        **_result_fields(result),
        "kkt_residual": float(kkt) if kkt is not None else None,
        "n_local": int(sum(bool(flag) for flag in selected)) if selected is not None else 0,
    }
    if elapsed_s is not None:
        record["elapsed_s"] = round(elapsed_s, 6)
    _append_jsonl(_FIT_LOG_PATH, record)


def get_fit_stats(log_path: str | Path | None = None) -> Dict:
    """Summarize the fit-metrics log: count, convergence rate, mean iterations and time."""
    path = Path(log_path) if log_path is not None else _FIT_LOG_PATH
    if path is None or not path.exists():
        return {"total_fits": 0, "message": "No fit logs found"}

    iterations, elapsed, converged = [], [], 0
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            entry = json.loads(line)
            iterations.append(entry.get("iterations", 0))
            if "elapsed_s" in entry:
                elapsed.append(entry["elapsed_s"])
            if entry.get("converged"):
                converged += 1

    total = len(iterations)
    stats: Dict[str, Any] = {"total_fits": total}
    if total:
        stats["convergence_rate"] = converged / total
        stats["avg_iterations"] = sum(iterations) / total
    if elapsed:
        stats["avg_elapsed_s"] = sum(elapsed) / len(elapsed)
    return stats
