"""Loss Change Allocation along a recorded trajectory.

Each step theta_t -> theta_{t+1} is integrated along the straight segment
between the two iterates. With ``n = 2**depth`` panels the composite Simpson
effective gradient is

    g_eff = (g(0) + g(1) + 2 * sum(panel boundaries) + 4 * sum(panel midpoints)) / (6 n)

and the allocation is ``A[t, i] = g_eff[i] * (theta_{t+1} - theta_t)[i]``.
Panels are doubled until the residual between the true loss change and
``sum_i A[t, i]`` falls below ``tol`` or ``max_depth`` is reached. Each
refinement reuses every gradient already computed for the step.
"""
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._crc import CRC64, crc64_file
from ._signs import SignChangeCounter
from .exceptions import ContractError, IntegrityError, LcaGateError, NumericError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-3
DEFAULT_MAX_DEPTH = 6
MAX_CUMULATIVE_ERROR_PCT = 1.0


@dataclass
class LcaMatrix:
    A: np.ndarray              # (T, K) allocations, nats
    iter_error: np.ndarray     # (T,) true loss change minus row sum
    depth: np.ndarray          # (T,) refinement depth used
    loss: np.ndarray           # (T + 1,) full-set loss at each iterate
    row_sum: np.ndarray        # (T,) float64 sum of each A row before any downcast
    tol: float = DEFAULT_TOL
    max_depth: int = DEFAULT_MAX_DEPTH
    method: str = "adaptive"
    grad_sign_changes: np.ndarray = None   # (K,) sign flips of the endpoint gradients
    grad_ever_nonzero: np.ndarray = None   # (K,) bool, some endpoint gradient was nonzero
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.A.shape[0]

    T = n_steps

    @property
    def n_params(self):
        return self.A.shape[1]

    @property
    def loss_change(self):
        return np.diff(self.loss)

    @property
    def flagged(self):
        """Iterations whose residual is still above ``tol`` at the depth cap."""
        return (self.depth >= self.max_depth) & (np.abs(self.iter_error) >= self.tol)

    @property
    def total_change(self):
        return float(self.loss[-1] - self.loss[0])

    @property
    def total_allocated(self):
        return float(np.sum(self.row_sum))

    @property
    def cumulative_error_pct(self):
        """(sum of A - true change) / |true change| * 100; negative means LCA overstates the decrease."""
        diff = self.total_allocated - self.total_change
        if self.total_change == 0.0:
            return 0.0 if diff == 0.0 else float(np.copysign(np.inf, diff))
        return 100.0 * diff / abs(self.total_change)

    def worst_iterations(self, n=10):
        return [int(i) for i in np.argsort(-np.abs(self.iter_error), kind="stable")[:n]]

    def summary(self):
        depth_hist = np.bincount(self.depth.astype(np.int64), minlength=self.max_depth + 1)
        return {
            "method": self.method,
            "T": int(self.n_steps),
            "K": int(self.n_params),
            "tol": self.tol,
            "max_depth": self.max_depth,
            "loss_start": float(self.loss[0]),
            "loss_end": float(self.loss[-1]),
            "total_change": self.total_change,
            "total_allocated": self.total_allocated,
            "cumulative_error_pct": self.cumulative_error_pct,
            "mean_abs_iter_error": float(np.mean(np.abs(self.iter_error))) if self.n_steps else 0.0,
            "max_abs_iter_error": float(np.max(np.abs(self.iter_error))) if self.n_steps else 0.0,
            "n_flagged": int(self.flagged.sum()),
            "flagged_iterations": [int(i) for i in np.flatnonzero(self.flagged)],
            "depth_histogram": depth_hist.tolist(),
        }


@dataclass
class ClassLcaTensor:
    values: np.ndarray         # (C, T, G)
    aggregate: str             # "none", "layer" or "neuron"
    group_names: list

    @property
    def n_classes(self):
        return self.values.shape[0]


def lca_first_order(grad, dtheta):
    grad = np.asarray(grad, dtype=np.float64)
    dtheta = np.asarray(dtheta, dtype=np.float64)
    if grad.shape != dtheta.shape:
        raise ContractError(f"gradient shape {grad.shape} does not match step shape {dtheta.shape}")
    return grad * dtheta


def simpson_gradient(theta_a, theta_b, objective):
    """(g(a) + 4 g((a + b) / 2) + g(b)) / 6."""
    a = np.asarray(theta_a, dtype=np.float64)
    b = np.asarray(theta_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("endpoints differ in length")
    return (objective.gradient(a) + 4.0 * objective.gradient(0.5 * (a + b))
            + objective.gradient(b)) / 6.0


class _Segment:
    """Running composite-Simpson sums for one step."""

    def __init__(self, objective, a, d, g_a, g_b):
        self.objective = objective
        self.a, self.d = a, d
        self.ends = g_a + g_b
        self.bounds = np.zeros_like(g_a)
        self.mids = None
        self.depth = -1

    def refine(self):
        self.depth += 1
        n = 2 ** self.depth
        if self.mids is not None:
            self.bounds += self.mids
        mids = np.zeros_like(self.ends)
        for j in range(n):
            s = (2 * j + 1) / (2.0 * n)
            mids += self.objective.gradient(self.a + s * self.d)
        self.mids = mids

    def effective_gradient(self):
        n = 2 ** self.depth
        return (self.ends + 2.0 * self.bounds + 4.0 * self.mids) / (6.0 * n)


def _step_core(objective, a, b, end_a, end_b, tol, max_depth, method, min_depth=0):
    """Allocate one step. ``end_*`` are (loss, gradient) pairs at the endpoints."""
    d = b - a
    loss_a, g_a = end_a
    loss_b, g_b = end_b
    true_change = loss_b - loss_a
    if method == "first_order":
        row = lca_first_order(g_a, d)
        return row, true_change - float(np.sum(row)), 0
    if not np.any(d):
        row = np.zeros_like(d)
        return row, true_change, 0
    seg = _Segment(objective, a, d, g_a, g_b)
    while True:
        seg.refine()
        row = seg.effective_gradient() * d
        eps = true_change - float(np.sum(row))
        if seg.depth >= min_depth and (abs(eps) < tol or seg.depth >= max_depth):
            return row, eps, seg.depth


def adaptive_lca_step(traj, t, objective, tol=DEFAULT_TOL, max_depth=DEFAULT_MAX_DEPTH):
    """Allocate step ``t`` of ``traj``. Returns ``(A_t, residual, depth)``."""
    if not 0 <= t < traj.n_steps:
        raise IndexError(f"step {t} outside [0, {traj.n_steps})")
    a = traj.snapshot(t).astype(np.float64)
    b = traj.snapshot(t + 1).astype(np.float64)
    return _step_core(objective, a, b, objective.loss_and_gradient(a),
                      objective.loss_and_gradient(b), tol, max_depth, "adaptive")


def _run_block(traj, objective, t0, t1, tol, max_depth, method, min_depth, out, track_signs,
               progress_every):
    counter = SignChangeCounter(traj.n_params) if track_signs else None
    a = traj.snapshot(t0).astype(np.float64)
    try:
        end_a = objective.loss_and_gradient(a)
    except NumericError as exc:
        raise NumericError(str(exc), iteration=t0) from None
    if counter is not None:
        counter.update(end_a[1])
    losses = [end_a[0]]
    for t in range(t0, t1):
        b = traj.snapshot(t + 1).astype(np.float64)
        try:
            end_b = objective.loss_and_gradient(b)
            row, eps, depth = _step_core(objective, a, b, end_a, end_b, tol, max_depth,
                                         method, min_depth)
        except NumericError as exc:
            raise NumericError(str(exc), iteration=t) from None
        out["A"][t] = row
        out["row_sum"][t] = float(np.sum(row))
        out["iter_error"][t] = eps
        out["depth"][t] = depth
        if counter is not None:
            counter.update(end_b[1])
        losses.append(end_b[0])
        a, end_a = b, end_b
        if progress_every and (t + 1) % progress_every == 0:
            log.info("lca step %d/%d  depth %d  residual %.2e", t + 1, traj.n_steps, depth, eps)
    out["loss"][t0:t1 + 1] = losses
    return counter


def compute_lca(traj, objective, tol=DEFAULT_TOL, max_depth=DEFAULT_MAX_DEPTH,
                method="adaptive", gate=True, dtype=np.float64, track_signs=True,
                n_jobs=1, min_depth=0, progress_every=100):
    """LCA matrix for every step of ``traj``.

    Endpoint losses and gradients are computed once per iterate and shared by
    the two adjacent steps. ``n_jobs > 1`` splits the steps into contiguous
    blocks run on threads; results are assembled by step index and do not
    depend on the split. With ``gate=True`` a cumulative error of 1% or more
    raises :class:`LcaGateError` carrying the finished matrix.
    """
    if method not in ("adaptive", "first_order"):
        raise ValueError(f"unknown method {method!r}")
    n_steps, k = traj.n_steps, traj.n_params
    if objective.n_params != k:
        raise ValueError(f"objective has {objective.n_params} parameters, trajectory has {k}")
    out = {
        "A": np.zeros((n_steps, k), dtype=dtype),
        "row_sum": np.zeros(n_steps),
        "iter_error": np.zeros(n_steps),
        "depth": np.zeros(n_steps, dtype=np.uint8),
        "loss": np.zeros(n_steps + 1),
    }
    n_jobs = max(1, min(int(n_jobs), max(n_steps, 1)))
    if n_steps == 0:
        out["loss"][0] = objective.loss(traj.snapshot(0).astype(np.float64))
        counters = []
    elif n_jobs == 1:
        counters = [_run_block(traj, objective, 0, n_steps, tol, max_depth, method, min_depth,
                               out, track_signs, progress_every)]
    else:
        edges = np.linspace(0, n_steps, n_jobs + 1).round().astype(int)
        with ThreadPoolExecutor(n_jobs) as pool:
            futures = [pool.submit(_run_block, traj, objective, int(lo), int(hi), tol, max_depth,
                                   method, min_depth, out, track_signs, 0)
                       for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
            counters = [f.result() for f in futures]
    signs = nonzero = None
    if track_signs and counters:
        merged = counters[0]
        for c in counters[1:]:
            # the shared boundary iterate has one sign, so seeing it twice adds no flips
            merged = merged.merge(c)
        signs, nonzero = merged.count, merged.last != 0
    lca = LcaMatrix(out["A"], out["iter_error"], out["depth"], out["loss"], out["row_sum"],
                    tol=tol, max_depth=max_depth, method=method, grad_sign_changes=signs,
                    grad_ever_nonzero=nonzero)
    if gate and method != "first_order" and abs(lca.cumulative_error_pct) >= MAX_CUMULATIVE_ERROR_PCT:
        worst = lca.worst_iterations()
        raise LcaGateError(
            f"cumulative LCA error {lca.cumulative_error_pct:.3f}% exceeds "
            f"{MAX_CUMULATIVE_ERROR_PCT}%; worst iterations {worst}", lca=lca, worst_iterations=worst)
    return lca


def _aggregator(layout, aggregate):
    """Sparse (K, G) matrix summing parameters into groups, plus group names."""
    k = layout.size
    if aggregate == "none":
        return None, [str(i) for i in range(k)]
    if aggregate == "layer":
        idx = layout.group_index()
        names = list(layout.groups)
    elif aggregate == "neuron":
        idx = layout.neuron_index()
        names = [f"{g}:{r}" for g, n in layout.neuron_groups() for r in range(n)]
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    mat = sp.csr_matrix((np.ones(k), (np.arange(k), idx)), shape=(k, len(names)))
    return mat, names


def aggregate_rows(rows, layout, aggregate):
    """Sum the columns of a (..., K) array into layer or neuron groups."""
    mat, _ = _aggregator(layout, aggregate)
    if mat is None:
        return np.asarray(rows, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    flat = rows.reshape(-1, rows.shape[-1])
    return np.asarray(flat @ mat).reshape(rows.shape[:-1] + (mat.shape[1],))


def compute_lca_per_class(traj, objective, lca, layout, aggregate="layer"):
    """Per-class allocations on the same panels (depths) chosen by ``lca``.

    Class gradients at each evaluation point are combined with the same
    Simpson weights, so the class tensors sum to the total allocation.
    ``aggregate`` may also be a sequence of aggregation names; the result is
    then a dict of tensors computed in a single pass.
    """
    single = isinstance(aggregate, str)
    aggs = [aggregate] if single else list(aggregate)
    mats = {a: _aggregator(layout, a) for a in aggs}
    n_classes, n_steps = objective.n_classes, traj.n_steps
    values = {a: np.zeros((n_classes, n_steps, traj.n_params if m is None else m.shape[1]))
              for a, (m, _) in mats.items()}
    a = traj.snapshot(0).astype(np.float64) if n_steps else None
    ga = objective.class_gradients(a) if n_steps else None
    for t in range(n_steps):
        b = traj.snapshot(t + 1).astype(np.float64)
        gb = objective.class_gradients(b)
        d = b - a
        if lca.method == "first_order":
            eff = ga
        elif not np.any(d):
            eff = np.zeros_like(ga)
        else:
            n = 2 ** int(lca.depth[t])
            inner = np.zeros_like(ga)
            for j in range(1, 2 * n):
                w = 4.0 if j % 2 else 2.0
                inner += w * objective.class_gradients(a + (j / (2.0 * n)) * d)
            eff = (ga + gb + inner) / (6.0 * n)
        rows = eff * d
        for name, (m, _) in mats.items():
            values[name][:, t] = rows if m is None else np.asarray(rows @ m)
        a, ga = b, gb
    out = {name: ClassLcaTensor(values[name], name, mats[name][1]) for name in aggs}
    return out[aggregate] if single else out


def save_class_tensor(path, tensor):
    np.savez_compressed(path, values=tensor.values, aggregate=tensor.aggregate,
                        group_names=np.asarray(tensor.group_names))


def load_class_tensor(path):
    with np.load(path) as z:
        return ClassLcaTensor(z["values"], str(z["aggregate"]), [str(x) for x in z["group_names"]])


# --- LCAM file format -------------------------------------------------------
# magic b"LCAM", version u16, T u64, K u64, tol f64 (little-endian), then
# A (T*K float32, row-major), iter_error (T float64), depth (T uint8), crc64.

LCAM_MAGIC = b"LCAM"
LCAM_VERSION = 1
_LCAM_HEADER = struct.Struct("<4sHQQd")


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_lca(path, lca, layout=None, extra=None, chunk_rows=64):
    path = Path(path)
    crc = CRC64()
    with open(path, "wb") as f:
        def put(buf):
            f.write(buf)
            crc.update(buf)
        put(_LCAM_HEADER.pack(LCAM_MAGIC, LCAM_VERSION, lca.n_steps, lca.n_params, lca.tol))
        for lo in range(0, lca.n_steps, chunk_rows):
            put(np.ascontiguousarray(lca.A[lo:lo + chunk_rows], dtype="<f4").tobytes())
        put(np.asarray(lca.iter_error, dtype="<f8").tobytes())
        put(np.asarray(lca.depth, dtype=np.uint8).tobytes())
        f.write(struct.pack("<Q", crc.digest()))
    side = {
        "method": lca.method,
        "max_depth": lca.max_depth,
        "loss": [float(x) for x in lca.loss],
        "row_sum": [float(x) for x in lca.row_sum],
        "summary": lca.summary(),
        "meta": lca.meta,
        "layout": layout.to_dict() if layout is not None else None,
        "grad_sign_changes": (None if lca.grad_sign_changes is None
                              else np.asarray(lca.grad_sign_changes).tolist()),
        "grad_ever_nonzero": (None if lca.grad_ever_nonzero is None
                              else np.asarray(lca.grad_ever_nonzero).astype(int).tolist()),
    }
    side.update(extra or {})
    sidecar_path(path).write_text(json.dumps(side))
    return path


def read_lca(path, verify=True):
    """Load an LCAM file and its sidecar; A is memory-mapped float32."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        raw = f.read(_LCAM_HEADER.size)
    if len(raw) < _LCAM_HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, version, n_steps, k, tol = _LCAM_HEADER.unpack(raw)
    if magic != LCAM_MAGIC or version != LCAM_VERSION:
        raise IntegrityError(f"{path}: not an LCAM v{LCAM_VERSION} file")
    a_end = _LCAM_HEADER.size + n_steps * k * 4
    expected = a_end + n_steps * 8 + n_steps + 8
    if size != expected:
        raise IntegrityError(f"{path}: size {size} does not match header (expected {expected})")
    with open(path, "rb") as f:
        f.seek(size - 8)
        stored = struct.unpack("<Q", f.read(8))[0]
        f.seek(a_end)
        iter_error = np.frombuffer(f.read(n_steps * 8), dtype="<f8").copy()
        depth = np.frombuffer(f.read(n_steps), dtype=np.uint8).copy()
    if verify and crc64_file(path, end=size - 8) != stored:
        raise IntegrityError(f"{path}: checksum mismatch")
    A = np.memmap(path, dtype="<f4", mode="r", offset=_LCAM_HEADER.size, shape=(n_steps, k))
    side_file = sidecar_path(path)
    side = json.loads(side_file.read_text()) if side_file.exists() else {}
    signs = side.get("grad_sign_changes")
    nonzero = side.get("grad_ever_nonzero")
    lca = LcaMatrix(
        A, iter_error, depth,
        np.asarray(side.get("loss", [np.nan] * (n_steps + 1)), dtype=np.float64),
        np.asarray(side.get("row_sum", np.sum(A, axis=1, dtype=np.float64)), dtype=np.float64),
        tol=tol, max_depth=side.get("max_depth", DEFAULT_MAX_DEPTH),
        method=side.get("method", "adaptive"),
        grad_sign_changes=None if signs is None else np.asarray(signs, dtype=np.int64),
        grad_ever_nonzero=None if nonzero is None else np.asarray(nonzero, dtype=bool),
        meta=side.get("meta", {}))
    layout = None
    if side.get("layout"):
        from .nn import LayerLayout
        layout = LayerLayout.from_dict(side["layout"])
    return lca, layout, side
