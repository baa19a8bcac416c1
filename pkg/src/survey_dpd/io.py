"""Dataset CSV ingestion and deterministic JSON report serialisation.

Dataset layout
--------------
A CSV with header ``stratum,cluster,weight,m,count_1..count_K,x_1..x_J``
plus metadata declaring ``d`` (categories minus one), ``k`` and the
intercept mode. The metadata lives either in a sidecar ``<file>.json`` or in
a first-line pragma ``# {"d": 2, "k": 2, "intercept": "implied"}``.

``intercept`` is ``"implied"`` (the file holds ``x_1..x_k`` and a leading 1
is inserted) or ``"none"`` (the file holds the full covariate vector
``x_1..x_{k+1}`` and no column is forced to 1).
"""
import csv
import json
import math
import os
import tempfile

import numpy as np

from .model import InputError, SurveyDataset

SCHEMA_VERSION = 1
INTERCEPT_MODES = ("implied", "none")


class ParseError(InputError):
    def __init__(self, msg, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {msg}" if where else msg)
        self.line = line


def _read_meta(path, first_line):
    if first_line.startswith("#"):
        try:
            return json.loads(first_line[1:].strip()), True
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad metadata pragma: {exc}", 1, path) from None
    side = str(path) + ".json"
    if not os.path.exists(side):
        side = os.path.splitext(str(path))[0] + ".json"
    if not os.path.exists(side):
        raise ParseError("no metadata: add a '# {...}' first line or a .json sidecar", None, path)
    with open(side) as fh:
        try:
            return json.load(fh), False
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad sidecar {side}: {exc}", None, path) from None


def _meta_fields(meta, path):
    try:
        d = int(meta["d"])
        k = int(meta["k"])
    except (KeyError, TypeError, ValueError):
        raise ParseError('metadata must give integers "d" and "k"', None, path) from None
    mode = meta.get("intercept", "implied")
    if mode not in INTERCEPT_MODES:
        raise ParseError(f"intercept must be one of {INTERCEPT_MODES}", None, path)
    version = meta.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {version}", None, path)
    return d, k, mode


def expected_header(d, k, mode):
    nx = k if mode == "implied" else k + 1
    return (["stratum", "cluster", "weight", "m"]
            + [f"count_{j}" for j in range(1, d + 2)]
            + [f"x_{j}" for j in range(1, nx + 1)])


def read_dataset(path):
    """Parse a dataset file; errors carry the offending line number."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or not any(s.strip() for s in lines):
        raise ParseError("empty dataset file", None, path)
    meta, pragma = _read_meta(path, lines[0])
    d, k, mode = _meta_fields(meta, path)
    offset = 1 if pragma else 0
    body = lines[offset:]
    reader = csv.reader(body)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("missing header", offset + 1, path) from None
    want = expected_header(d, k, mode)
    if header != want:
        raise ParseError(f"header {header} does not match expected {want}", offset + 1, path)
    S, C, W, Yc, Xc = [], [], [], [], []
    for lineno, row in enumerate(reader, start=offset + 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(want):
            raise ParseError(f"expected {len(want)} fields, got {len(row)}", lineno, path)
        try:
            h, i = int(row[0]), int(row[1])
            w = float(row[2])
            m = int(row[3])
            y = [int(v) for v in row[4:4 + d + 1]]
            x = [float(v) for v in row[4 + d + 1:]]
        except ValueError as exc:
            raise ParseError(f"bad value: {exc}", lineno, path) from None
        if sum(y) != m:
            raise ParseError(f"counts sum to {sum(y)} but m = {m}", lineno, path)
        if mode == "implied":
            x = [1.0] + x
        S.append(h), C.append(i), W.append(w), Yc.append(y), Xc.append(x)
    if not S:
        raise ParseError("no data rows", None, path)
    try:
        return SurveyDataset(S, C, W, Yc, Xc, intercept=(mode == "implied"))
    except InputError as exc:
        raise ParseError(str(exc), None, path) from None


def dataset_to_csv(data, mode=None):
    """CSV text (with metadata pragma) for ``data``."""
    mode = mode or ("implied" if data.intercept else "none")
    d = data.num_categories - 1
    k = data.num_covariates - 1
    meta = {"d": d, "k": k, "intercept": mode, "schema_version": SCHEMA_VERSION}
    out = ["# " + json.dumps(meta, sort_keys=True), ",".join(expected_header(d, k, mode))]
    X = data.covariates[:, 1:] if mode == "implied" else data.covariates
    for h, i, w, m, y, x in zip(data.strata, data.clusters, data.weights, data.unit_counts,
                                data.counts, X):
        fields = [str(int(h)), str(int(i)), format_float(w), str(int(m))]
        fields += [str(int(v)) for v in y] + [format_float(v) for v in x]
        out.append(",".join(fields))
    return "\n".join(out) + "\n"


def format_float(v):
    v = float(v)
    if not math.isfinite(v):
        return "null"
    if v == int(v) and abs(v) < 1e16:
        return repr(float(int(v)))
    return f"{v:.17g}"


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or obj is True or obj is False:
        return json.dumps(obj)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent, level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if hasattr(obj, "to_dict"):
        return _encode(obj.to_dict(), indent, level)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps_report(obj, indent=2):
    """JSON text with floats at 17 significant digits and non-finite values as null.

    ``dumps_report(json.loads(dumps_report(x)))`` reproduces the same bytes.
    """
    return _encode(obj, indent, 0) + "\n"


def atomic_write_text(path, text):
    """Write via a temporary file in the target directory and rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
