"""Independent brute-force references for verification: exhaustive nearest
neighbors, central finite differences, sequential statistics replay, counting
metrics, an extended-precision graph interpreter, and a closed-form symmetric
3x3 eigenvalue solver. Deliberately slow and deliberately separate from the
production paths: these share domain types only."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    check: str
    cases: int
    max_abs_err: float
    max_rel_err: float
    tolerance: float
    passed: bool

    def to_json(self) -> dict:
        return {"check": self.check, "cases": self.cases,
                "max_abs_err": self.max_abs_err, "max_rel_err": self.max_rel_err,
                "tolerance": self.tolerance, "passed": bool(self.passed)}


def report(check: str, cases: int, abs_err: float, rel_err: float,
           tolerance: float) -> OracleReport:
    return OracleReport(check, cases, float(abs_err), float(rel_err),
                        float(tolerance), bool(max(abs_err, rel_err) <= tolerance))


# ---------------------------------------------------------------------------
# Exhaustive nearest neighbor (same tie rule as production: lowest index)


def brute_nn(codes: np.ndarray, queries: np.ndarray,
             classes: np.ndarray | None = None,
             code_classes: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per query: scan every candidate code (optionally restricted to the
    query's class) accumulating squared distances with compensated summation.
    Returns (index, distance)."""
    n = queries.shape[0]
    idx = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, np.inf)
    for q in range(n):
        best_i = -1
        best_d = math.inf
        for c in range(codes.shape[0]):
            if classes is not None and code_classes[c] != classes[q]:
                continue
            d = math.fsum((float(a) - float(b)) ** 2
                          for a, b in zip(queries[q], codes[c]))
            if d < best_d:
                best_d = d
                best_i = c
        idx[q] = best_i
        dist[q] = math.sqrt(best_d)
    return idx, dist


def brute_knn(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """O(N^2) exact k nearest neighbors, self excluded, (distance, index) order."""
    n = points.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            d = math.fsum((float(a) - float(b)) ** 2
                          for a, b in zip(points[i], points[j]))
            cand.append((d, j))
        cand.sort()
        idx[i] = [c[1] for c in cand[:k]]
        dist[i] = [math.sqrt(c[0]) for c in cand[:k]]
    return idx, dist


def brute_dilate(points: np.ndarray, mask: np.ndarray, radius: float) -> np.ndarray:
    """O(N^2) pairwise-scan dilation."""
    n = points.shape[0]
    out = np.array(mask, dtype=bool, copy=True)
    marked = np.flatnonzero(mask)
    for i in range(n):
        if out[i]:
            continue
        for m in marked:
            d = math.fsum((float(a) - float(b)) ** 2
                          for a, b in zip(points[i], points[m]))
            if d <= radius * radius:
                out[i] = True
                break
    return out


def brute_voxel_cells(points: np.ndarray, voxel_size: float) -> dict:
    """Floor-key grouping by dictionary insertion."""
    cells: dict[tuple, list[int]] = {}
    for i, p in enumerate(points):
        key = tuple(int(math.floor(float(v) / voxel_size)) for v in p)
        cells.setdefault(key, []).append(i)
    return cells


# ---------------------------------------------------------------------------
# Central finite differences


def fd_gradient(loss_fn, params: dict[str, np.ndarray], h: float = 1e-5,
                param_names=None) -> dict[str, np.ndarray]:
    """Central difference per scalar entry of each named parameter array.
    `loss_fn` is re-evaluated with the entry perturbed in place."""
    if h <= 0:
        raise ValueError("h must be positive")
    grads = {}
    for name in (param_names if param_names is not None else sorted(params)):
        arr = params[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.shape[0]):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn()
            flat[i] = keep - h
            down = loss_fn()
            flat[i] = keep
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(
                    f"non-finite loss while differencing parameter {name!r} entry {i}")
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def gradient_errors(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                    rel_tol: float = 1e-4, abs_floor: float = 1e-8):
    """Worst relative error over all entries, with an absolute floor below
    which disagreements don't count."""
    worst = 0.0
    worst_name = None
    for name in numeric:
        a = analytic.get(name)
        a = np.zeros_like(numeric[name]) if a is None else a
        diff = np.abs(a - numeric[name])
        scale = np.maximum(np.maximum(np.abs(a), np.abs(numeric[name])), abs_floor / rel_tol)
        rel = (diff / scale).max() if diff.size else 0.0
        if rel > worst:
            worst = float(rel)
            worst_name = name
    return worst, worst_name


# ---------------------------------------------------------------------------
# Sequential statistics replay (compensated accumulation)


def replay_stats(sequence, gamma: float, shape, init_var: float = 1.0,
                 floor: float = 1e-6) -> np.ndarray:
    """From-scratch replay of the per-code EMA variance updates.

    `sequence` is an iterable of (flat_assignments, z_e) batches; `shape` is
    (num_codes, latent_dim). Codes with fewer than two rows in a batch keep
    their variance. Population variance, computed with fsum means.
    """
    var = np.full(shape, float(init_var))
    for flats, z in sequence:
        for code in np.unique(flats):
            rows = z[flats == code]
            if rows.shape[0] < 2:
                continue
            for d in range(shape[1]):
                col = [float(v) for v in rows[:, d]]
                mean = math.fsum(col) / len(col)
                v = math.fsum((x - mean) ** 2 for x in col) / len(col)
                var[code, d] = gamma * var[code, d] + (1.0 - gamma) * v
        np.maximum(var, floor, out=var)
    return var


# ---------------------------------------------------------------------------
# Counting-based segmentation metrics


def counting_iou(preds, labels, class_count: int):
    """Dict-counting IoU and row-normalized confusion, ignoring label 255."""
    tp = {c: 0 for c in range(class_count)}
    fp = {c: 0 for c in range(class_count)}
    fn = {c: 0 for c in range(class_count)}
    conf = np.zeros((class_count, class_count))
    for p, y in zip(preds, labels):
        if y == 255:
            continue
        conf[y][p] += 1
        if p == y:
            tp[y] += 1
        else:
            fp[p] += 1
            fn[y] += 1
    per_class = {}
    for c in range(class_count):
        union = tp[c] + fp[c] + fn[c]
        if union:
            per_class[c] = tp[c] / union
    miou = sum(per_class.values()) / len(per_class) if per_class else 0.0
    rows = conf.sum(axis=1, keepdims=True)
    conf = np.divide(conf, rows, out=np.zeros_like(conf), where=rows > 0)
    return per_class, miou, conf


# ---------------------------------------------------------------------------
# Straight-line graph interpreter in extended precision (mpmath)


def interpret_program(program, inputs: dict[str, np.ndarray], dps: int = 50):
    """Re-evaluate a straight-line tensor program with mpmath arithmetic.

    `program` is a list of (out_name, op, arg_names, kwargs); supported ops
    mirror the production forward set. Returns {name: float64 ndarray}.
    """
    from mpmath import mp, mpf, exp as mexp, log as mlog, tanh as mtanh

    mp.dps = dps

    def lift(a):
        return [[mpf(float(v)) for v in row] for row in np.atleast_2d(a)]

    env = {name: lift(a) for name, a in inputs.items()}

    def matmul(a, b):
        return [[sum(a[i][t] * b[t][j] for t in range(len(b)))
                 for j in range(len(b[0]))] for i in range(len(a))]

    def binary(a, b, fn):
        return [[fn(x, y) for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]

    def unary(a, fn):
        return [[fn(x) for x in row] for row in a]

    for out, op, args, kwargs in program:
        vals = [env[a] for a in args]
        if op == "matmul":
            res = matmul(vals[0], vals[1])
        elif op == "add":
            b = vals[1]
            if len(b) == 1 and len(vals[0]) > 1:  # broadcast bias row
                b = [b[0]] * len(vals[0])
            res = binary(vals[0], b, lambda x, y: x + y)
        elif op == "mul":
            res = binary(vals[0], vals[1], lambda x, y: x * y)
        elif op == "scale":
            s = mpf(float(kwargs["s"]))
            res = unary(vals[0], lambda x: x * s)
        elif op == "leaky-relu":
            s = mpf(float(kwargs.get("slope", 0.01)))
            res = unary(vals[0], lambda x: x if x > 0 else s * x)
        elif op == "relu":
            res = unary(vals[0], lambda x: x if x > 0 else mpf(0))
        elif op == "tanh":
            res = unary(vals[0], mtanh)
        elif op == "exp":
            res = unary(vals[0], mexp)
        elif op == "log":
            res = unary(vals[0], mlog)
        elif op == "square":
            res = unary(vals[0], lambda x: x * x)
        elif op == "softmax":
            res = []
            for row in vals[0]:
                m = max(row)
                e = [mexp(x - m) for x in row]
                tot = sum(e)
                res.append([x / tot for x in e])
        elif op == "sum":
            res = [[sum(sum(row) for row in vals[0])]]
        elif op == "mean":
            count = sum(len(row) for row in vals[0])
            res = [[sum(sum(row) for row in vals[0]) / count]]
        else:
            raise ValueError(f"interpreter does not support op {op!r}")
        env[out] = res
    return {name: np.array([[float(v) for v in row] for row in mat])
            for name, mat in env.items()}


def ce_reference(logits: np.ndarray, labels: np.ndarray, mask=None, dps: int = 50) -> float:
    """Extended-precision log-sum-exp cross-entropy mean."""
    from mpmath import mp, mpf, exp as mexp, log as mlog

    mp.dps = dps
    terms = []
    for i, row in enumerate(logits):
        if labels[i] == 255 or (mask is not None and not mask[i]):
            continue
        vals = [mpf(float(v)) for v in row]
        m = max(vals)
        lse = mlog(sum(mexp(v - m) for v in vals)) + m
        terms.append(lse - vals[int(labels[i])])
    if not terms:
        return 0.0
    return float(sum(terms) / len(terms))


def eigvals_sym3_reference(m: np.ndarray, dps: int = 50) -> np.ndarray:
    """Eigenvalues of a symmetric 3x3 matrix by the trigonometric closed form
    in mpmath arithmetic, returned ascending."""
    from mpmath import mp, mpf, cos, acos, sqrt as msqrt, pi

    mp.dps = dps
    a = [[mpf(float(m[i][j])) for j in range(3)] for i in range(3)]
    p1 = a[0][1] ** 2 + a[0][2] ** 2 + a[1][2] ** 2
    q = (a[0][0] + a[1][1] + a[2][2]) / 3
    if p1 == 0:
        vals = sorted([a[0][0], a[1][1], a[2][2]])
        return np.array([float(v) for v in vals])
    p2 = (a[0][0] - q) ** 2 + (a[1][1] - q) ** 2 + (a[2][2] - q) ** 2 + 2 * p1
    p = msqrt(p2 / 6)
    b = [[(a[i][j] - (q if i == j else 0)) / p for j in range(3)] for i in range(3)]
    detb = (b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]))
    r = detb / 2
    r = max(min(r, mpf(1)), mpf(-1))
    phi = acos(r) / 3
    e1 = q + 2 * p * cos(phi)
    e3 = q + 2 * p * cos(phi + 2 * pi / 3)
    e2 = 3 * q - e1 - e3
    return np.array(sorted([float(e1), float(e2), float(e3)]))


def write_reports(reports: list[OracleReport], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_json() for r in reports], f, indent=1)
        f.write("\n")
