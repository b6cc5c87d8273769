"""Statistics over LCA matrices: helping ratios, layer totals, oscillations,
heavy tails, synchronized peaks, neuron specialization and fan-in/fan-out
correlation."""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._signs import SignChangeCounter
from .lca import aggregate_rows


def _row_chunks(n_rows, size=32):
    for lo in range(0, n_rows, size):
        yield lo, min(lo + size, n_rows)


def _group_starts(layout):
    """Start offsets of each layer group (groups are contiguous in the flat vector)."""
    starts = []
    for g in layout.groups:
        starts.append(min(sl.start for sl in layout.group_slices(g)))
    return np.asarray(starts)


@dataclass
class HelpStats:
    per_iteration: np.ndarray        # (T, 3): pct helped, hurt, zero
    overall_pct_helped: float        # zeros excluded
    overall_pct_zero: float
    per_layer_pct_helped: dict
    per_weight_help_fraction: np.ndarray   # (K,), NaN where a weight never had nonzero LCA
    zero_tol: float = 0.0

    @property
    def n_never_nonzero(self):
        return int(np.isnan(self.per_weight_help_fraction).sum())


def helping_stats(lca, layout=None, zero_tol=0.0):
    """Helped: A < -zero_tol; hurt: A > zero_tol; anything else counts as zero.

    ``overall_pct_helped`` is the mean over iterations of helped / (helped + hurt).
    Per-layer values use the same iteration mean of parameter counts within the layer.
    """
    A = lca.A
    n_steps, k = A.shape
    per_iter = np.zeros((n_steps, 3))
    helped_w = np.zeros(k, dtype=np.int64)
    nonzero_w = np.zeros(k, dtype=np.int64)
    starts = _group_starts(layout) if layout is not None else None
    layer_frac = [] if layout is not None else None
    for lo, hi in _row_chunks(n_steps):
        block = np.asarray(A[lo:hi])
        helped = block < -zero_tol
        hurt = block > zero_tol
        nh, nu = helped.sum(1), hurt.sum(1)
        per_iter[lo:hi, 0] = 100.0 * nh / k
        per_iter[lo:hi, 1] = 100.0 * nu / k
        per_iter[lo:hi, 2] = 100.0 * (k - nh - nu) / k
        helped_w += helped.sum(0)
        nonzero_w += (helped | hurt).sum(0)
        if starts is not None:
            lh = np.add.reduceat(helped, starts, axis=1)
            lu = np.add.reduceat(hurt, starts, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                layer_frac.append(lh / (lh + lu))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = per_iter[:, 0] / (per_iter[:, 0] + per_iter[:, 1])
        frac = helped_w / nonzero_w
    frac[nonzero_w == 0] = np.nan
    overall = float(np.nanmean(ratio) * 100.0) if np.any(np.isfinite(ratio)) else float("nan")
    per_layer = {}
    if layer_frac is not None:
        lf = np.concatenate(layer_frac) if layer_frac else np.zeros((0, len(layout.groups)))
        for gi, g in enumerate(layout.groups):
            col = lf[:, gi]
            per_layer[g] = float(np.nanmean(col) * 100.0) if np.any(np.isfinite(col)) else float("nan")
    return HelpStats(per_iter, overall,
                     float(per_iter[:, 2].mean()) if n_steps else 100.0,
                     per_layer, frac, zero_tol)


def help_fraction_histogram(stats_or_lca, bins=20):
    """Histogram of each weight's fraction of helpful (nonzero) iterations on [0, 1]."""
    hs = stats_or_lca if isinstance(stats_or_lca, HelpStats) else helping_stats(stats_or_lca)
    frac = hs.per_weight_help_fraction
    valid = frac[np.isfinite(frac)]
    counts, edges = np.histogram(valid, bins=bins, range=(0.0, 1.0))
    centers = 0.5 * (edges[:-1] + edges[1:])
    mode = float(centers[np.argmax(counts)]) if valid.size else float("nan")
    return {"counts": counts, "edges": edges, "mode": mode,
            "n_weights": int(valid.size), "n_excluded": int(frac.size - valid.size)}


@dataclass
class LayerTotals:
    names: list
    totals: np.ndarray       # (L,) summed LCA per layer, biases folded into their kernels
    series: np.ndarray       # (T, L) instantaneous layer LCA
    grand_total: float

    @property
    def signs(self):
        return {n: ("help" if v < 0 else "hurt" if v > 0 else "zero")
                for n, v in zip(self.names, self.totals)}

    def as_dict(self):
        return {n: float(v) for n, v in zip(self.names, self.totals)}


def layer_series(lca, layout):
    """(T, L) float64 per-layer sums of each LCA row."""
    out = np.zeros((lca.n_steps, len(layout.groups)))
    for lo, hi in _row_chunks(lca.n_steps, 64):
        out[lo:hi] = aggregate_rows(np.asarray(lca.A[lo:hi]), layout, "layer")
    return out


def layer_totals(lca, layout):
    series = layer_series(lca, layout)
    grand = 0.0
    for lo, hi in _row_chunks(lca.n_steps, 64):
        grand += float(np.sum(np.asarray(lca.A[lo:hi]), dtype=np.float64))
    return LayerTotals(list(layout.groups), series.sum(axis=0), series, grand)


def layer_significance(samples, names=None):
    """Two-sided one-sample t-test of per-run layer totals against zero, with a sign test.

    ``samples`` is an (R, L) array or a list of :class:`LayerTotals`.
    """
    if len(samples) and isinstance(samples[0], LayerTotals):
        names = names or samples[0].names
        samples = np.array([s.totals for s in samples])
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n_runs = samples.shape[0]
    if n_runs < 3:
        raise ValueError(f"layer significance needs at least 3 runs, got {n_runs}")
    names = names or [f"layer_{i}" for i in range(samples.shape[1])]
    out = {}
    for name, col in zip(names, samples.T):
        if np.all(col == col[0]):
            t_stat, p = (0.0, 1.0) if col[0] == 0 else (math.copysign(math.inf, col[0]), 0.0)
        else:
            res = stats.ttest_1samp(col, 0.0)
            t_stat, p = float(res.statistic), float(res.pvalue)
        n_pos, n_neg = int((col > 0).sum()), int((col < 0).sum())
        sign_p = (float(stats.binomtest(n_pos, n_pos + n_neg, 0.5).pvalue)
                  if n_pos + n_neg else 1.0)
        out[name] = {"mean": float(col.mean()), "std": float(col.std(ddof=1)),
                     "t": t_stat, "p_value": p, "sign_test_p": sign_p,
                     "n_positive": n_pos, "n_negative": n_neg}
    return out


def _period(counts, n_transitions, mask):
    if not mask.any():
        return float("nan")
    mean = counts[mask].mean()
    return float(n_transitions / mean) if mean > 0 else math.inf


def oscillation_counts(traj, layout, grad_sign_changes=None, grad_ever_nonzero=None,
                       gradients=None):
    """Mean iterations per weight-direction change and per gradient sign crossing.

    Weight directions come from the trajectory deltas. Gradient signs come either
    from counts tracked by the LCA engine (``grad_sign_changes``) or from an
    iterable of T + 1 full-set gradients. Parameters whose series are all zero
    (dead inputs, frozen layers) are left out of the averages.
    """
    moves = SignChangeCounter(traj.n_params)
    for t in range(traj.n_steps):
        moves.update(traj.delta(t))
    w_mask = moves.last != 0
    n_w = max(traj.n_steps - 1, 0)
    if gradients is not None:
        gc = SignChangeCounter(traj.n_params)
        for g in gradients:
            gc.update(g)
        grad_sign_changes, g_mask, n_g = gc.count, gc.last != 0, max(gc.n_updates - 1, 0)
    elif grad_sign_changes is not None:
        grad_sign_changes = np.asarray(grad_sign_changes)
        g_mask = (np.asarray(grad_ever_nonzero, dtype=bool) if grad_ever_nonzero is not None
                  else np.ones(traj.n_params, dtype=bool))
        n_g = traj.n_steps
    else:
        g_mask, n_g = None, 0
    gi = layout.group_index()
    out = {}
    for li, g in enumerate(list(layout.groups) + ["overall"]):
        sel = gi == li if g != "overall" else np.ones(traj.n_params, dtype=bool)
        row = {"weight_period": _period(moves.count, n_w, sel & w_mask),
               "weight_changes_mean": float(moves.count[sel & w_mask].mean()) if (sel & w_mask).any() else float("nan")}
        if g_mask is not None:
            row["grad_period"] = _period(grad_sign_changes, n_g, sel & g_mask)
            row["grad_changes_mean"] = (float(grad_sign_changes[sel & g_mask].mean())
                                        if (sel & g_mask).any() else float("nan"))
        out[g] = row
    return out


def _abs_mass(mu, sigma, lo, hi):
    """Integral of |x| times the N(mu, sigma^2) density over (lo, hi)."""
    def first_moment(a, b):
        if b <= a:
            return 0.0
        za, zb = (a - mu) / sigma, (b - mu) / sigma
        return mu * (stats.norm.cdf(zb) - stats.norm.cdf(za)) + sigma * (stats.norm.pdf(za) - stats.norm.pdf(zb))
    return first_moment(max(lo, 0.0), max(hi, 0.0)) - first_moment(min(lo, 0.0), min(hi, 0.0))


def tail_stats(lca, windows=None, sigma_cut=2.0, drop_zeros=True):
    """Excess kurtosis and tail-mass ratio of pooled LCA values per iteration window.

    ``tail_mass_ratio`` is the summed |A| of entries further than ``sigma_cut``
    standard deviations from the window mean, divided by the same sum expected
    for a Gaussian with that mean and standard deviation.
    """
    windows = windows or [(0, lca.n_steps)]
    out = []
    for lo, hi in windows:
        if hi <= lo:
            raise ValueError(f"empty window ({lo}, {hi})")
        vals = np.asarray(lca.A[lo:hi], dtype=np.float64).ravel()
        if drop_zeros:
            vals = vals[vals != 0.0]
        row = {"window": (int(lo), int(hi)), "n": int(vals.size)}
        if vals.size < 8 or np.all(vals == vals[0]):
            row.update(defined=False, excess_kurtosis=None, kurtosis_test_p=None,
                       tail_mass_ratio=None)
            out.append(row)
            continue
        mu, sigma = float(vals.mean()), float(vals.std())
        tail = np.abs(vals - mu) > sigma_cut * sigma
        observed = float(np.abs(vals[tail]).sum())
        per_sample = (_abs_mass(mu, sigma, -math.inf, mu - sigma_cut * sigma)
                      + _abs_mass(mu, sigma, mu + sigma_cut * sigma, math.inf))
        expected = vals.size * per_sample
        kt = stats.kurtosistest(vals) if vals.size >= 20 else None
        row.update(defined=True,
                   excess_kurtosis=float(stats.kurtosis(vals, fisher=True)),
                   kurtosis_test_p=None if kt is None else float(kt.pvalue),
                   tail_mass_ratio=observed / expected if expected > 0 else float("nan"),
                   tail_fraction=float(tail.mean()), mean=mu, std=sigma)
        out.append(row)
    return out


def detect_peaks(series, k=20):
    """Top-``k`` strict local minima of ``series``, most negative first."""
    s = np.asarray(series, dtype=np.float64)
    if s.size < 3:
        raise ValueError("peak detection needs a series of length >= 3")
    inner = s[1:-1]
    cand = np.flatnonzero((inner < s[:-2]) & (inner < s[2:])) + 1
    order = np.argsort(s[cand], kind="stable")
    return cand[order][:k]


@dataclass
class SyncReport:
    observed: int                 # aligned iterations summed over groups
    observed_per_group: list
    aligned: list                 # per group, sorted aligned iterations
    baseline: np.ndarray          # (trials,) aligned totals under random shifts
    p_value: float                # ties with the baseline broken at random
    threshold: float
    shift_range: tuple
    peaks: list = field(repr=False, default=None)
    p_value_conservative: float = None   # ties counted against the observation

    @property
    def n_groups(self):
        return len(self.observed_per_group)

    @property
    def observed_mean(self):
        return self.observed / self.n_groups

    @property
    def baseline_mean(self):
        return float(self.baseline.mean()) / self.n_groups


def _required(threshold, n_layers):
    return max(1, int(math.ceil(threshold * n_layers - 1e-9)))


def _count_aligned(peak_sets, need):
    hits = {}
    for layer in peak_sets:
        for t in set(int(x) for x in layer):
            hits[t] = hits.get(t, 0) + 1
    return sorted(t for t, c in hits.items() if c >= need)


def alignment_test(peaks, shift_range=(-2, 2), trials=10000, threshold=1.0, seed=0,
                   chunk=500):
    """Count iterations where at least ``threshold`` of the layers peak together.

    ``peaks[g][l]`` holds the peak iterations of layer ``l`` in group ``g`` (a
    group is a class, or the single total-loss group). The baseline shifts each
    (group, layer) peak set independently by a uniform integer in
    ``shift_range`` and recounts.

    Counts are small integers, so ties with the baseline are common. ``p_value``
    breaks them uniformly at random, ``(#{b > obs} + U * (1 + #{b == obs})) / (1 + trials)``,
    which is uniform on [0, 1] when the observation is exchangeable with the
    shifted copies. ``p_value_conservative`` is ``(1 + #{b >= obs}) / (1 + trials)``.
    """
    if len(peaks) and len(peaks[0]) and np.ndim(peaks[0][0]) == 0:
        peaks = [peaks]  # a single group given as [layer][peaks]
    n_groups = len(peaks)
    n_layers = len(peaks[0])
    if n_layers < 2:
        raise ValueError("alignment needs at least two layers")
    need = _required(threshold, n_layers)
    aligned = [_count_aligned(g, need) for g in peaks]
    observed = sum(len(a) for a in aligned)

    lo_s, hi_s = shift_range
    sets = [[np.unique(np.asarray(list(l), dtype=np.int64)) for l in g] for g in peaks]
    all_t = np.concatenate([x for g in sets for x in g] + [np.zeros(0, dtype=np.int64)])
    rng = np.random.default_rng(seed)
    baseline = np.zeros(trials, dtype=np.int64)
    if all_t.size:
        t_min = int(all_t.min())
        width = int(all_t.max()) - t_min + hi_s - lo_s + 1
        kmax = max(x.size for g in sets for x in g)
        P = np.zeros((n_groups, n_layers, kmax), dtype=np.int64)
        valid = np.zeros(P.shape, dtype=bool)
        for gi, g in enumerate(sets):
            for li, x in enumerate(g):
                P[gi, li, :x.size] = x - t_min - lo_s
                valid[gi, li, :x.size] = True
        for lo in range(0, trials, chunk):
            n = min(chunk, trials - lo)
            shifts = rng.integers(lo_s, hi_s + 1, size=(n, n_groups, n_layers))
            pos = P[None] + shifts[..., None]
            cell = np.arange(n)[:, None, None, None] * n_groups + np.arange(n_groups)[None, :, None, None]
            key = (cell * width + pos)[np.broadcast_to(valid[None], pos.shape)]
            counts = np.bincount(key, minlength=n * n_groups * width).reshape(n, -1)
            baseline[lo:lo + n] = (counts >= need).sum(axis=1)
    above = float((baseline > observed).sum())
    ties = float((baseline == observed).sum())
    p = (above + rng.random() * (1.0 + ties)) / (1.0 + trials)
    p_cons = (1.0 + above + ties) / (1.0 + trials)
    return SyncReport(observed, [len(a) for a in aligned], aligned, baseline, p, threshold,
                      tuple(shift_range), peaks, p_cons)


def class_peaks(class_tensor, k=20):
    """Peak sets ``[class][layer]`` from a layer-aggregated per-class tensor."""
    vals = class_tensor.values
    return [[detect_peaks(vals[c, :, l], k) for l in range(vals.shape[2])]
            for c in range(vals.shape[0])]


def neuron_specialization(class_tensor, layout, top_k=(1, 2, 3), threshold=0.8):
    """Fraction of neurons per layer whose top-k classes account for > threshold of help.

    A neuron's help for class c is minus its cumulative per-class LCA, counted
    only for classes it helped overall (negative cumulative LCA).
    """
    if class_tensor.aggregate != "neuron":
        raise ValueError("neuron specialization needs a neuron-aggregated class tensor")
    cum = class_tensor.values.sum(axis=1)            # (C, neurons)
    helped = np.maximum(-cum, 0.0)
    total = helped.sum(axis=0)
    ranked = -np.sort(-helped, axis=0)
    out, base = {}, 0
    for group, n in layout.neuron_groups():
        sl = slice(base, base + n)
        base += n
        keep = total[sl] > 0
        row = {"n_neurons": int(n), "n_excluded": int((~keep).sum())}
        for k in top_k:
            ratio = ranked[:k, sl].sum(axis=0)[keep] / total[sl][keep]
            row[f"top{k}"] = float((ratio > threshold).mean()) if keep.any() else float("nan")
        out[group] = row
    return out


def _mean_pair_corr(Z, groups):
    """Mean over groups of the mean pairwise correlation of the unit-normalized columns."""
    vals = []
    for cols, n in groups:
        if n < 2:
            continue
        s = Z[:, cols].sum(axis=1)
        vals.append((float(s @ s) - n) / (n * (n - 1)))
    return float(np.mean(vals)) if vals else float("nan")


def fanio_correlation(lca, layout, seed=0, n_fake=None):
    """Correlation of cumulative-LCA curves among weights sharing an output row or input column.

    The baseline uses "fake nodes": random weight sets of the same size (capped
    at ``min(rows, cols)``) in which no two weights share a row or a column.
    Constant curves (e.g. weights on dead inputs) are skipped.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for ker in layout.kernels:
        rows, cols = ker.shape
        cum = np.cumsum(np.asarray(lca.A[:, ker.slice], dtype=np.float64), axis=0)
        cum -= cum.mean(axis=0)
        norm = np.linalg.norm(cum, axis=0)
        live = norm > 0
        Z = np.divide(cum, norm, out=np.zeros_like(cum), where=live)
        live2 = live.reshape(rows, cols)
        flat = np.arange(rows * cols).reshape(rows, cols)
        out_groups = [(flat[r][live2[r]], int(live2[r].sum())) for r in range(rows)]
        in_groups = [(flat[:, c][live2[:, c]], int(live2[:, c].sum())) for c in range(cols)]
        m = min(rows, cols)
        n_fake_l = n_fake or max(rows, cols)
        fake = []
        for _ in range(n_fake_l):
            rr = rng.permutation(rows)[:m]
            cc = rng.permutation(cols)[:m]
            idx = flat[rr, cc]
            idx = idx[live[idx]]
            fake.append((idx, idx.size))
        out[ker.group] = {"same_output": _mean_pair_corr(Z, out_groups),
                          "same_input": _mean_pair_corr(Z, in_groups),
                          "fake_baseline": _mean_pair_corr(Z, fake)}
        del cum, Z
    return out


def frame_table(lca, layout, layer, iterations):
    """Per-parameter LCA slices of one kernel or bias block, for frame-by-frame export."""
    entry = layout.entry(layer)
    rows = []
    for t in iterations:
        vals = np.asarray(lca.A[t, entry.slice], dtype=np.float64).reshape(entry.shape)
        rows.append((int(t), vals))
    return entry, rows
