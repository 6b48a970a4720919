"""Point-cloud evaluation: Chamfer, F-score, BEV-histogram MMD and JSD."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree


def _cloud(x, name):
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError(f"{name} point cloud is empty")
    return pts


def nearest_distances(src, dst):
    """Distance from each point of ``src`` to its nearest neighbour in ``dst``."""
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def nearest_distances_brute(src, dst, chunk=512):
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        diff = src[i : i + chunk, None, :] - dst[None, :, :]
        out[i : i + chunk] = np.sqrt((diff * diff).sum(-1)).min(axis=1)
    return out


def chamfer(X, Y, squared=False, brute=False):
    """Symmetric mean nearest-neighbour distance (metres)."""
    X, Y = _cloud(X, "first"), _cloud(Y, "second")
    nn = nearest_distances_brute if brute else nearest_distances
    dx, dy = nn(X, Y), nn(Y, X)
    if squared:
        dx, dy = dx * dx, dy * dy
    return 0.5 * (dx.mean() + dy.mean())


def fscore(X, Y, tau=0.2):
    """Harmonic mean of precision (X near Y) and recall (Y near X) at threshold tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    X, Y = _cloud(X, "first"), _cloud(Y, "second")
    p = float((nearest_distances(X, Y) <= tau).mean())
    r = float((nearest_distances(Y, X) <= tau).mean())
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class BevHistogram:
    grid: np.ndarray
    extent: float
    empty: bool


def bev_histogram(points, bins=100, extent=50.0, z_band=(-3.0, 3.0)) -> BevHistogram:
    """Normalised x/y occupancy over [-extent, extent)^2 after a z-band filter."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = (
        (pts[:, 2] >= z_band[0])
        & (pts[:, 2] <= z_band[1])
        & (np.abs(pts[:, 0]) < extent)
        & (np.abs(pts[:, 1]) < extent)
        & (pts[:, 0] >= -extent)
        & (pts[:, 1] >= -extent)
    )
    pts = pts[keep]
    cell = 2 * extent / bins
    ix = np.clip(np.floor((pts[:, 0] + extent) / cell).astype(int), 0, bins - 1)
    iy = np.clip(np.floor((pts[:, 1] + extent) / cell).astype(int), 0, bins - 1)
    grid = np.zeros((bins, bins))
    np.add.at(grid, (ix, iy), 1.0)
    total = grid.sum()
    if total == 0:
        return BevHistogram(grid, extent, True)
    return BevHistogram(grid / total, extent, False)


def _grid(h):
    return h.grid if isinstance(h, BevHistogram) else np.asarray(h, dtype=np.float64)


def jsd(P, Q):
    """Jensen-Shannon divergence (natural log) between normalised histograms."""
    p, q = _grid(P).ravel(), _grid(Q).ravel()
    if p.shape != q.shape:
        raise ValueError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    for name, h in (("P", p), ("Q", q)):
        if abs(h.sum() - 1.0) > 1e-9 or np.any(h < 0):
            raise ValueError(f"{name} is not a normalised histogram (sum {h.sum()})")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float((a[nz] * np.log(a[nz] / m[nz])).sum())

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), math.log(2))


def _sqdist(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(pooled):
    d = np.sqrt(_sqdist(pooled, pooled))
    iu = np.triu_indices(len(pooled), k=1)
    gamma = float(np.median(d[iu]))
    return gamma if gamma > 0 else 1.0


MMD_SCALE = 1e4


def mmd_raw(gen, ref, paired=False):
    """Unbiased squared MMD with a median-heuristic Gaussian kernel, unscaled and unclamped.

    ``paired`` treats gen[i] and ref[i] as a pair and also drops the i == j cross
    terms (requires equal set sizes).
    """
    X = np.stack([_grid(h).ravel() for h in gen])
    Y = np.stack([_grid(h).ravel() for h in ref])
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ValueError("mmd needs at least 2 histograms per set")
    if paired and m != n:
        raise ValueError("paired mmd needs equal set sizes")
    gamma = median_bandwidth(np.concatenate([X, Y]))
    k = lambda a, b: np.exp(-_sqdist(a, b) / (2 * gamma * gamma))  # noqa: E731
    kxx, kyy, kxy = k(X, X), k(Y, Y), k(X, Y)
    exx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    eyy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if paired:
        exy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        exy = kxy.mean()
    return exx + eyy - 2 * exy


def mmd(gen, ref, paired=False):
    """Squared MMD scaled by 1e4, negatives from the unbiased estimator clamped to 0."""
    return max(mmd_raw(gen, ref, paired), 0.0) * MMD_SCALE


def mmd_brute(gen, ref, paired=False):
    """Direct double-loop evaluation of mmd_raw, same bandwidth rule."""
    X = [_grid(h).ravel() for h in gen]
    Y = [_grid(h).ravel() for h in ref]
    pooled = X + Y
    dists = []
    for i in range(len(pooled)):
        for j in range(i + 1, len(pooled)):
            dists.append(math.sqrt(float(((pooled[i] - pooled[j]) ** 2).sum())))
    gamma = float(np.median(dists)) or 1.0

    def k(a, b):
        return math.exp(-float(((a - b) ** 2).sum()) / (2 * gamma * gamma))

    m, n = len(X), len(Y)
    sxx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    if paired:
        sxy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n) if i != j) / (m * (m - 1))
    else:
        sxy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


@dataclass
class MetricConfig:
    bins: int = 100
    extent: float = 50.0
    z_min: float = -3.0
    z_max: float = 3.0
    fscore_tau: float = 0.2
    chamfer_squared: bool = False


@dataclass
class MetricReport:
    chamfer: float
    fscore: float
    mmd_scaled: float
    jsd: float
    n_gen: int
    n_ref: int
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def evaluate(gen_clouds, ref_clouds, cfg: MetricConfig = None, paired=True) -> MetricReport:
    """Matched gen/ref cloud lists -> MetricReport (pairwise means, set-level MMD/JSD)."""
    cfg = cfg or MetricConfig()
    if len(gen_clouds) != len(ref_clouds) or not gen_clouds:
        raise ValueError("need equally many (>0) generated and reference clouds")
    ch = [chamfer(g, r, squared=cfg.chamfer_squared) for g, r in zip(gen_clouds, ref_clouds)]
    fs = [fscore(g, r, cfg.fscore_tau) for g, r in zip(gen_clouds, ref_clouds)]
    hist = lambda c: bev_histogram(c, cfg.bins, cfg.extent, (cfg.z_min, cfg.z_max))  # noqa: E731
    hg = [hist(c) for c in gen_clouds]
    hr = [hist(c) for c in ref_clouds]
    hg_ok = [h for h in hg if not h.empty]
    hr_ok = [h for h in hr if not h.empty]
    if not hg_ok or not hr_ok:
        raise ValueError("every generated or every reference cloud fell outside the BEV extent")
    mean_g = np.mean([h.grid for h in hg_ok], axis=0)
    mean_r = np.mean([h.grid for h in hr_ok], axis=0)
    js = jsd(mean_g / mean_g.sum(), mean_r / mean_r.sum())
    use_pairs = paired and len(hg_ok) == len(hg) and len(hr_ok) == len(hr)
    mm = mmd(hg_ok, hr_ok, paired=use_pairs) if min(len(hg_ok), len(hr_ok)) >= 2 else float("nan")
    report = MetricReport(
        chamfer=float(np.mean(ch)),
        fscore=float(np.mean(fs)),
        mmd_scaled=float(mm) if np.isfinite(mm) else 0.0,
        jsd=float(js),
        n_gen=len(gen_clouds),
        n_ref=len(ref_clouds),
        config={**asdict(cfg), "mmd_paired": use_pairs, "mmd_kernel": "gaussian-median-heuristic", "mmd_scale": MMD_SCALE},
    )
    if len(hg_ok) < 2 or len(hr_ok) < 2:
        report.config["mmd_skipped"] = "fewer than 2 histograms per set"
    return report
