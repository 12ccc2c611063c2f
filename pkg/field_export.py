import json
import os

import numpy as np
import pandas as pd

from domain import SpaceTimeField
from helpers import ensure_directory
from logging_config import logger

CSV_FLOAT_FORMAT = "%.17g"


def _to_builtin(value):
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_builtin(value.tolist())
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def field_slice_frame(field, k):
    """One row per interior node: grid index per axis, then the value."""
    mesh = field.mesh
    index = np.stack(np.unravel_index(np.arange(mesh.n_interior), mesh.interior_shape), axis=1) + 1
    columns = {f"i{axis}": index[:, axis] for axis in range(mesh.d)}
    columns["value"] = field.values[k]
    return pd.DataFrame(columns)


def write_field_csv(field, name, out_dir, slices=None):
    if slices is None:
        slices = [0, field.time.M]
    paths = []
    for k in slices:
        k = k % (field.time.M + 1)
        path = os.path.join(out_dir, f"field_{name}_k{k}.csv")
        field_slice_frame(field, k).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        paths.append(path)
    return paths


def field_meta(field):
    return {
        "shape": [field.time.M + 1, *field.mesh.interior_shape],
        "axes": ["t"] + [f"x{axis}" for axis in range(field.mesh.d)],
        "endianness": "little",
        "element": "f64",
        "order": "slice-major",
        "nodes_per_axis": list(field.mesh.nodes_per_axis),
        "box": [list(extent) for extent in field.mesh.box],
        "T": field.time.T,
        "M": field.time.M,
    }


def write_field_binary(field, name, out_dir):
    path = os.path.join(out_dir, f"field_{name}.bin")
    field.values.astype("<f8").tofile(path)
    with open(os.path.join(out_dir, f"field_{name}.meta.json"), "w") as meta_file:
        json.dump(field_meta(field), meta_file, indent=2, sort_keys=True)
    return path


def load_field_binary(path, mesh, time):
    """Read a field written by write_field_binary back onto the given axes."""
    meta_path = os.path.splitext(path)[0] + ".meta.json"
    with open(meta_path, "r") as meta_file:
        meta = json.load(meta_file)
    expected = [time.M + 1, *mesh.interior_shape]
    if meta.get("shape") != expected:
        raise ValueError(f"field file {path} has shape {meta.get('shape')}, expected {expected}")
    if meta.get("endianness") != "little" or meta.get("element") != "f64":
        raise ValueError(f"field file {path} is not little-endian f64")
    values = np.fromfile(path, dtype="<f8").reshape(time.M + 1, mesh.n_interior)
    return SpaceTimeField(mesh, time, values)


def write_fields(fields, out_dir, formats=("csv", "bin"), csv_slices=None):
    """Write every named field in every requested format."""
    ensure_directory(out_dir)
    written = []
    for name, field in fields.items():
        if "csv" in formats:
            written += write_field_csv(field, name, out_dir, csv_slices)
        if "bin" in formats:
            written.append(write_field_binary(field, name, out_dir))
    logger.info(f"Wrote {len(written)} field file(s) to {out_dir}")
    return written


def write_iterations_csv(report, out_dir, filename="iterations.csv"):
    frame = pd.DataFrame(
        {
            "iteration": np.arange(len(report.costs)),
            "cost": report.costs,
            "gradient_norm": report.gradient_norms,
        }
    )
    path = os.path.join(ensure_directory(out_dir), filename)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def write_table_csv(rows, path):
    ensure_directory(os.path.dirname(path) or ".")
    pd.DataFrame(rows).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def dump_summary(summary, out_dir, filename="summary.json"):
    """Sorted keys and no timestamps, so identical runs give identical bytes."""
    path = os.path.join(ensure_directory(out_dir), filename)
    with open(path, "w") as summary_file:
        json.dump(_to_builtin(summary), summary_file, indent=2, sort_keys=True)
        summary_file.write("\n")
    return path
