import json
import math
import os
import tempfile
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from balweights.helpers.logger import LOGGER


def to_jsonable(obj):
    if hasattr(obj, "to_dict") and not isinstance(obj, (pd.DataFrame, pd.Series)):
        return to_jsonable(obj.to_dict())
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(payload) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(
        mode="w", encoding="utf-8", dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False
    )
    try:
        with handle:
            handle.write(text)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(handle.name, path)
    except Exception as e:
        LOGGER.error(f"Failed to write {path}: {e}")
        try:
            os.remove(handle.name)
        except OSError:
            pass
        raise
    LOGGER.info(f"Wrote {path}")
    return path


def write_json(path, payload) -> Path:
    return atomic_write_text(path, dumps(payload))


def weights_frame(unit_ids, weights, treatment) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "unit_id": list(unit_ids),
            "treatment": np.asarray(treatment, dtype=int),
            "weight": np.asarray(weights, dtype=float),
        }
    )


def write_weights_csv(path, unit_ids, weights, treatment) -> Path:
    frame = weights_frame(unit_ids, weights, treatment)
    return atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))


def read_weights_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"unit_id": str}, encoding="utf-8")
    missing = {"unit_id", "weight"} - set(frame.columns)
    if missing:
        raise ValueError(f"weights file {path} lacks columns {sorted(missing)}")
    return frame


def format_number(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, str):
        return value
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6g}"


def format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[format_number(c) for c in row] for row in rows]
    widths = [max(len(row[j]) for row in cells) for j in range(len(headers))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(widths[j]) if j == 0 else c.rjust(widths[j]) for j, c in enumerate(row)))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
