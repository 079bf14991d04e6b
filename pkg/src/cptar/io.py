"""
File formats: binary tensor series, JSON model files, versioned CSV tables and
flat TOML configuration.

Binary series layout (all little-endian)::

    8 bytes   magic b"TSERIES1"
    uint32    order n
    n*uint64  dims q_1..q_n
    uint64    length T
    T*Q*8     float64 payload, one column-major vectorized tensor per step
"""
import csv
import json
import math
import struct
import sys

import numpy as np

from .factor import CPLoadingSet, LowRankCoef, TensorSeries
from .lrs import SparseCoef

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MAGIC = b"TSERIES1"
MODEL_FORMAT = "cptar-model"
MODEL_VERSION = 1
_MAX_BYTES = 2 ** 62


class FormatError(ValueError):
    """Malformed input file; ``code`` names the failure."""

    def __init__(self, code, message, **context):
        super().__init__(message)
        self.code = code
        self.context = context


# ---------------------------------------------------------------------------
# Binary series.


def write_series(series, path):
    data = series.data if isinstance(series, TensorSeries) else np.asarray(series, dtype=float)
    if data.ndim < 2 or data.shape[0] == 0:
        raise FormatError("empty_series", "refusing to write a series with T = 0")
    T, dims = data.shape[0], data.shape[1:]
    header = MAGIC + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    header += struct.pack("<Q", T)
    payload = np.ascontiguousarray(data.reshape(T, -1, order="F"), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_series(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise FormatError("bad_magic", f"{path}: not a tensor series file", path=str(path))
    pos = 8
    if len(raw) < pos + 4:
        raise FormatError("truncated", f"{path}: header ends early", path=str(path))
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if n == 0 or n > 64:
        raise FormatError("dim_overflow", f"{path}: implausible tensor order {n}",
                          path=str(path), order=n)
    if len(raw) < pos + 8 * n + 8:
        raise FormatError("truncated", f"{path}: header ends early", path=str(path))
    dims = struct.unpack_from(f"<{n}Q", raw, pos)
    pos += 8 * n
    (T,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    nbytes = 8 * T
    for d in dims:
        nbytes *= d
    if any(d == 0 for d in dims) or T == 0 or nbytes > _MAX_BYTES:
        raise FormatError("dim_overflow", f"{path}: dims {dims} x T={T} out of range",
                          path=str(path), dims=list(dims), T=T)
    have = len(raw) - pos
    if have < nbytes:
        raise FormatError("truncated", f"{path}: payload has {have} of {nbytes} bytes",
                          path=str(path), expected=nbytes, found=have)
    if have > nbytes:
        raise FormatError("trailing_bytes", f"{path}: {have - nbytes} unexpected trailing bytes",
                          path=str(path))
    flat = np.frombuffer(raw, dtype="<f8", offset=pos).astype(float)
    data = flat.reshape(T, -1).reshape((T,) + tuple(dims), order="F")
    return TensorSeries(data)


def csv_to_series(csv_path, dims):
    """Series from a CSV with one row per time step holding ``vec(Y_t)``
    (column-major). A non-numeric first row is treated as a header."""
    dims = tuple(int(d) for d in dims)
    q = math.prod(dims)
    rows = []
    with open(csv_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if rows or lineno > 1:
                    raise FormatError("bad_csv", f"{csv_path}:{lineno}: non-numeric value",
                                      line=lineno)
                continue
            if len(vals) != q:
                raise FormatError("bad_csv",
                                  f"{csv_path}:{lineno}: {len(vals)} values, expected {q}",
                                  line=lineno)
            rows.append(vals)
    if not rows:
        raise FormatError("empty_series", f"{csv_path}: no data rows")
    data = np.asarray(rows).reshape((len(rows),) + dims, order="F")
    return TensorSeries(data)


# ---------------------------------------------------------------------------
# Model files.


def _matrix(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.tolist()}


def _unmatrix(obj):
    a = np.array(obj["data"], dtype=float).reshape(obj["shape"])
    return a


def model_to_dict(lowrank, sparse=None, metadata=None):
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "variant": lowrank.variant,
        "lag_order": lowrank.lag_order,
        "ranks": list(lowrank.ranks),
        "response_factors": [_matrix(f) for f in lowrank.response.factors],
        "covariate_factors": [_matrix(f) for f in lowrank.covariate.factors],
        "core": _matrix(lowrank.core),
        "sparse": None,
        "metadata": metadata or {},
    }
    if sparse is not None:
        doc["sparse"] = {
            "dims": list(sparse.dims),
            "lag_order": sparse.lag_order,
            "entries": [[list(idx), val] for idx, val in sorted(sparse.entries.items())],
        }
    return doc


def model_from_dict(doc):
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError("bad_model", "not a model document")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError("bad_model", f"unsupported model version {doc.get('version')}")
    try:
        lowrank = LowRankCoef(
            CPLoadingSet([_unmatrix(f) for f in doc["response_factors"]]),
            _unmatrix(doc["core"]),
            CPLoadingSet([_unmatrix(f) for f in doc["covariate_factors"]]),
            int(doc["lag_order"]), doc["variant"])
        sparse = None
        if doc.get("sparse") is not None:
            sp = doc["sparse"]
            sparse = SparseCoef(tuple(sp["dims"]), int(sp["lag_order"]),
                                {tuple(idx): float(v) for idx, v in sp["entries"]})
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError("bad_model", f"invalid model document: {exc}") from exc
    return lowrank, sparse, doc.get("metadata", {})


def write_model(path, lowrank, sparse=None, metadata=None):
    """JSON model file; floats are written with 17 significant digits."""
    with open(path, "w") as fh:
        json.dump(model_to_dict(lowrank, sparse, metadata), fh, indent=1, allow_nan=False)
        fh.write("\n")


def read_model(path):
    """Return ``(LowRankCoef, SparseCoef or None, metadata)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError("bad_model", f"{path}: {exc}") from exc
    return model_from_dict(doc)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, allow_nan=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------------------
# CSV tables.

SCHEMAS = {
    "scores": ("cptar.scores/1", ["P", "R_y", "R_x", "lambda", "d_ar", "msfe", "note"]),
    "rate_rows": ("cptar.rate_rows/1",
                  ["design", "value", "T", "rep", "error", "tpr", "fpr", "lambda",
                   "iterations", "failed"]),
    "rate_summary": ("cptar.rate_summary/1",
                     ["cell", "value", "mean_error", "abscissa", "d_ar", "d_c",
                      "failures", "mean_tpr", "mean_fpr"]),
}


def write_table(path, kind, rows):
    """Write ``rows`` (dicts) as CSV; row 1 is ``schema,<name>/<version>``."""
    schema, columns = SCHEMAS[kind]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema", schema])
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else _cell(row.get(c)) for c in columns])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_table(path):
    """Return ``(schema, rows)`` of a table written by :func:`write_table`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader)
        if len(first) != 2 or first[0] != "schema":
            raise FormatError("bad_csv", f"{path}: missing schema row")
        columns = next(reader)
        rows = [dict(zip(columns, r)) for r in reader]
    return first[1], rows


# ---------------------------------------------------------------------------
# Configuration.


def load_config(path):
    """Flat TOML key/value configuration."""
    with open(path, "rb") as fh:
        try:
            cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise FormatError("bad_config", f"{path}: {exc}") from exc
    nested = [k for k, v in cfg.items() if isinstance(v, dict)]
    if nested:
        raise FormatError("bad_config", f"{path}: tables are not supported ({nested})")
    return cfg
