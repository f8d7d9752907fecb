from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from balweights.core.dataset import BasisSpec, ColumnRoles, build_features, load_csv
from balweights.core.errors import InputError
from balweights.core.estimators import EstimandSpec


def load_inputs(run):
    """Read the data file named by the run and build its feature matrix."""
    if not run.data:
        raise InputError(f"{run.command} needs --data or a 'data' entry in the config")
    roles = ColumnRoles.from_dict(run.section("columns"))
    table = load_csv(run.data, roles)
    basis = BasisSpec.from_dict(run.section("basis"))
    if "standardize" in run.payload:
        basis = replace(basis, standardize=bool(run.payload["standardize"]))
    fm = build_features(table, basis)
    return table, fm


def unit_ids(table) -> list:
    return list(table.unit_ids) if table.unit_ids else [str(i) for i in range(table.n)]


def load_target_table(path, column_names):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"target file {path} does not exist")
    frame = pd.read_csv(path, encoding="utf-8")
    missing = [c for c in column_names if c not in frame.columns]
    if missing:
        raise InputError(f"target file {path} is missing covariates {missing}")
    values = frame[list(column_names)].apply(pd.to_numeric, errors="coerce")
    if values.isna().any().any():
        raise InputError(f"target file {path} has missing or non-numeric covariate cells")
    return values.to_numpy(dtype=float), tuple(column_names)


def load_estimand(run, table, default: str = "ate") -> EstimandSpec:
    payload = run.section("estimand", {"kind": default})
    if isinstance(payload, str):
        payload = {"kind": payload}
    payload = {"kind": default, **payload}
    if payload.get("kind") == "target-population-mean":
        if not payload.get("target"):
            raise InputError("target-population-mean needs a 'target' CSV path")
        points, columns = load_target_table(payload["target"], table.column_names)
        return EstimandSpec.from_dict(payload, target_covariates=points, target_columns=columns)
    return EstimandSpec.from_dict(payload)


def align_weights(frame: pd.DataFrame, table) -> np.ndarray:
    ids = unit_ids(table)
    frame = frame.assign(unit_id=frame["unit_id"].astype(str))
    if frame["unit_id"].duplicated().any():
        raise InputError("weights file repeats unit ids")
    lookup = frame.set_index("unit_id")["weight"]
    missing = [i for i in ids if i not in lookup.index]
    if missing:
        raise InputError(f"weights file lacks {len(missing)} units, first {missing[0]!r}")
    return lookup.loc[ids].to_numpy(dtype=float)
