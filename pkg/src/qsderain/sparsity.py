"""Sparsity statistics of derivative-filtered images.

The object under study is the log-histogram of ``|w * I|`` pooled over the
filter bank.  A distribution is *sparse* when its log-histogram, as a function
of magnitude, lies on or below the chord joining its first and last nonempty
bins (convex in ``|x|``).  A single Laplacian is exactly affine and sits on
the borderline; a Gaussian is concave and fails.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imaging import FilterBank, apply_filter_bank, default_bank, read_png
from .kernels import laplace_em_pass

log = logging.getLogger(__name__)

__all__ = [
    "EPS_CHORD",
    "DEFAULT_BINS",
    "CLIP_QUANTILES",
    "LogHistogram",
    "ChordResult",
    "MixtureFit",
    "SparsityReport",
    "CorpusSparsity",
    "DegenerateFitWarning",
    "log_histogram",
    "chord_sparsity_test",
    "fit_laplacian",
    "fit_two_laplacian_mixture",
    "analyze_values",
    "analyze_image",
    "corpus_sparsity_statistics",
    "write_reports_csv",
    "plot_log_histogram",
]

EPS_CHORD = 0.1
DEFAULT_BINS = 24
CLIP_QUANTILES = (0.001, 0.99)
MIN_SAMPLES = 1000
MIN_BINS = 16


class DegenerateFitWarning(UserWarning):
    pass


@dataclass
class LogHistogram:
    bin_centers: np.ndarray
    log_counts: np.ndarray
    n_samples: int

    def __len__(self):
        return len(self.bin_centers)


def log_histogram(values, n_bins: int = DEFAULT_BINS, clip_quantiles=CLIP_QUANTILES,
                  min_samples: int = MIN_SAMPLES) -> LogHistogram:
    """Natural-log histogram of ``|values|`` over a quantile-clipped domain.

    Samples outside ``[q_lo, q_hi]`` of ``|values|`` are dropped and empty bins
    are removed.  If the clipped domain has zero width every kept sample lands
    in a single bin.
    """
    a = np.abs(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("empty input")
    if a.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {a.size}")
    if n_bins < MIN_BINS:
        raise ValueError(f"n_bins must be >= {MIN_BINS}, got {n_bins}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite values")
    lo, hi = np.quantile(a, clip_quantiles)
    kept = a[(a >= lo) & (a <= hi)]
    if hi <= lo:
        return LogHistogram(np.array([lo]), np.array([np.log(kept.size)]), int(kept.size))
    counts, edges = np.histogram(kept, bins=n_bins, range=(lo, hi))
    centers = 0.5 * (edges[1:] + edges[:-1])
    nz = counts > 0
    return LogHistogram(centers[nz], np.log(counts[nz]), int(kept.size))


@dataclass
class ChordResult:
    verdict: str
    max_chord_excess: float

    @property
    def sparse(self) -> bool:
        return self.verdict == "sparse"


def chord_sparsity_test(h: LogHistogram, eps_chord: float = EPS_CHORD) -> ChordResult:
    """Compare interior log-counts against the chord through the end bins."""
    if len(h) < 3:
        raise ValueError(f"chord test needs >= 3 nonempty bins, got {len(h)}")
    x, y = h.bin_centers, h.log_counts
    chord = y[0] + (y[-1] - y[0]) * (x - x[0]) / (x[-1] - x[0])
    excess = float(np.max(y[1:-1] - chord[1:-1]))
    return ChordResult("sparse" if excess <= eps_chord else "nonsparse", excess)


def fit_laplacian(values) -> float:
    """Maximum-likelihood scale of a zero-mean Laplacian: ``mean(|x|)``."""
    a = np.abs(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("empty input")
    s = float(a.mean())
    if s == 0.0:
        warnings.warn("all-zero input: Laplacian scale is degenerate", DegenerateFitWarning, stacklevel=2)
    return s


@dataclass
class MixtureFit:
    pi1: float
    s1: float
    pi2: float
    s2: float
    loglik: list = field(default_factory=list, repr=False)
    converged: bool = True
    n_iter: int = 0

    @property
    def params(self):
        return (self.pi1, self.s1, self.pi2, self.s2)


def fit_two_laplacian_mixture(values, max_iter: int = 500, tol: float = 1e-8,
                              min_samples: int = 10_000, backend=None) -> MixtureFit:
    """EM fit of ``pi1/(2 s1) e^{-|x|/s1} + pi2/(2 s2) e^{-|x|/s2}``.

    Initialised deterministically at ``s = (0.5, 2) * mean|x|``,
    ``pi = (0.5, 0.5)``.  ``loglik[k]`` is the log-likelihood of the parameters
    after ``k`` updates, so EM guarantees it never decreases.  Stops when the
    relative improvement drops below ``tol``; otherwise returns the last
    (best) parameters with ``converged=False``.  Components are ordered
    ``s1 <= s2``.
    """
    a = np.abs(np.asarray(values, dtype=np.float64).ravel())
    if a.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {a.size}")
    m = a.mean()
    if m == 0.0:
        raise ValueError("all-zero input: mixture scales are degenerate")
    n = a.size
    floor = 1e-12 * m
    pi1, s1, pi2, s2 = 0.5, 0.5 * m, 0.5, 2.0 * m
    history = []
    converged = False
    it = 0
    for it in range(max_iter + 1):
        ll, r1, r1a, r2a = laplace_em_pass(a, pi1, s1, pi2, s2, backend=backend)
        history.append(ll)
        if it > 0 and (ll - history[-2]) <= tol * abs(history[-2]):
            converged = True
            break
        if it == max_iter:
            break
        r2 = n - r1
        # keep both components alive so the E-step stays well defined
        pi1 = min(max(r1 / n, 1e-12), 1 - 1e-12)
        pi2 = 1.0 - pi1
        s1 = max(r1a / r1, floor) if r1 > 0 else s1
        s2 = max(r2a / r2, floor) if r2 > 0 else s2
    if not converged:
        warnings.warn(f"mixture EM did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    if s1 > s2:
        pi1, s1, pi2, s2 = pi2, s2, pi1, s1
    return MixtureFit(pi1, s1, pi2, s2, history, converged, it)


@dataclass
class SparsityReport:
    path: str
    verdict: str
    max_chord_excess: float
    s: float
    pi1: float
    s1: float
    pi2: float
    s2: float
    degenerate: bool = False
    histogram: LogHistogram | None = field(default=None, repr=False, compare=False)

    @property
    def sparse(self) -> bool:
        return self.verdict == "sparse"

    def row(self) -> dict:
        d = asdict(self)
        d.pop("histogram")
        return d


def analyze_values(values, n_bins: int = DEFAULT_BINS, eps_chord: float = EPS_CHORD,
                   path: str = "", fit_mixture: bool = True, mixture_iter: int = 200) -> SparsityReport:
    """Chord test plus Laplacian and mixture fits for one pool of responses.

    Degenerate pools (all zero, or fewer than three nonempty bins) are
    reported as ``nonsparse`` with ``degenerate=True`` rather than raising.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    nan = float("nan")
    s = float(np.abs(v).mean()) if v.size else 0.0
    h = log_histogram(v, n_bins)
    if s == 0.0 or len(h) < 3:
        log.info("degenerate sparsity pool %s (%d nonempty bins)", path or "<array>", len(h))
        return SparsityReport(path, "nonsparse", nan, s, nan, nan, nan, nan, True, h)
    chord = chord_sparsity_test(h, eps_chord)
    mix = (nan,) * 4
    if fit_mixture and v.size >= 10_000:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mix = fit_two_laplacian_mixture(v, max_iter=mixture_iter, tol=1e-7).params
    return SparsityReport(path, chord.verdict, chord.max_chord_excess, s, *mix, False, h)


def analyze_image(img, bank: FilterBank | None = None, **kw) -> SparsityReport:
    """Pool all filter responses of ``img`` (every channel) and analyse them."""
    return analyze_values(apply_filter_bank(img, bank or default_bank()), **kw)


@dataclass
class CorpusSparsity:
    fraction_sparse: float
    reports: list
    skipped: list

    @property
    def n_sparse(self) -> int:
        return sum(r.sparse for r in self.reports)


def corpus_sparsity_statistics(paths, bank: FilterBank | None = None, n_bins: int = DEFAULT_BINS,
                               eps_chord: float = EPS_CHORD, fit_mixture: bool = True) -> CorpusSparsity:
    """Fraction of images whose pooled filter responses pass the chord test.

    Unreadable images are skipped and listed; they do not count toward the
    fraction.
    """
    paths = [str(p) for p in paths]
    if not paths:
        raise ValueError("need at least one image")
    bank = bank or default_bank()
    reports, skipped = [], []
    for p in paths:
        try:
            img = read_png(p)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            skipped.append(p)
            continue
        reports.append(analyze_image(img, bank, n_bins=n_bins, eps_chord=eps_chord, path=p,
                                     fit_mixture=fit_mixture))
    frac = sum(r.sparse for r in reports) / len(reports) if reports else float("nan")
    return CorpusSparsity(frac, reports, skipped)


CSV_FIELDS = ["path", "verdict", "max_chord_excess", "s", "pi1", "s1", "pi2", "s2", "degenerate"]


def write_reports_csv(reports, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            row = r.row()
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in CSV_FIELDS})


def plot_log_histogram(report: SparsityReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h = report.histogram
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(h.bin_centers, h.log_counts, "o-", ms=3, label="log count")
    if len(h) >= 2:
        ax.plot(h.bin_centers[[0, -1]], h.log_counts[[0, -1]], "--", label="chord")
    ax.set_xlabel("|filter response|")
    ax.set_ylabel("log count")
    ax.set_title(f"{Path(report.path).name or 'image'}: {report.verdict}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
