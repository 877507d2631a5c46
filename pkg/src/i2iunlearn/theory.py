"""Numerical checks of the information-theoretic claims behind the method.

KL values are in nats. ``INF`` is the sentinel for a divergence that is
infinite by construction (p > 0 where q = 0); it is ``float('inf')`` and so
compares greater than every finite value.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import GaussianMoments
from .models import encode, patchify
from .numerics import Rng, Tensor
from .transforms import apply_mask

INF = float("inf")
GRID_POINTS = 4096
GRID_SDS = 10.0
REFINE_TOL = 1e-4
BOUND_TOL = 1e-9
NORM_TOL = 1e-6


# -- discrete --------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteDist:
    probs: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("need a non-empty 1-D probability vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", tuple(float(v) for v in p))

    @property
    def array(self):
        return np.array(self.probs)

    def __len__(self):
        return len(self.probs)


def kl_discrete(p, q):
    p = p if isinstance(p, DiscreteDist) else DiscreteDist(p)
    q = q if isinstance(q, DiscreteDist) else DiscreteDist(q)
    if len(p) != len(q):
        raise ValueError(f"support sizes differ: {len(p)} vs {len(q)}")
    pa, qa = p.array, q.array
    on = pa > 0
    if np.any(qa[on] == 0):
        return INF
    return max(float(np.sum(pa[on] * np.log(pa[on] / qa[on]))), 0.0)


def construct_infinite_kl(p, j, k, kappa):
    """A distribution Q with Q(j) = 0, so that KL(P || Q) is infinite.

    Mass is removed from ``j`` and ``k`` receives ``kappa``; the remaining
    entries keep P's values and everything is renormalised by
    ``1 - P_j - P_k + kappa``.
    """
    p = p if isinstance(p, DiscreteDist) else DiscreteDist(p)
    n = len(p)
    if not (0 <= j < n and 0 <= k < n):
        raise IndexError(f"indices {j}, {k} out of range for support {n}")
    if j == k:
        raise ValueError("j and k must differ")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    pa = p.array
    if pa[j] <= 0:
        raise ValueError(f"P({j}) is zero; zeroing it cannot make KL infinite")
    z = 1.0 - pa[j] - pa[k] + kappa
    q = pa / z
    q[j] = 0.0
    q[k] = kappa / z
    q /= q.sum()   # absorb rounding so the sum check holds at 1e-12
    return DiscreteDist(q)


# -- continuous 1-D ----------------------------------------------------------

DENSITY_KINDS = ("gaussian", "laplace", "uniform", "logistic", "mixture")


@dataclass(frozen=True)
class Density1D:
    """``params`` by kind:

    gaussian (mu, sd); laplace (mu, b); uniform (lo, hi); logistic (mu, s);
    mixture (weights, mus, sds) of Gaussians.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in DENSITY_KINDS:
            raise ValueError(f"unknown density kind {self.kind!r}")
        if self.kind == "mixture":
            w, mu, sd = (np.asarray(v, dtype=np.float64) for v in self.params)
            if not (w.shape == mu.shape == sd.shape) or w.size == 0:
                raise ValueError("mixture weights, means and sds must align")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12 or np.any(sd <= 0):
                raise ValueError("invalid mixture parameters")
            object.__setattr__(self, "params", (tuple(w), tuple(mu), tuple(sd)))
        else:
            a, b = (float(v) for v in self.params)
            if self.kind == "uniform" and not b > a:
                raise ValueError("uniform needs lo < hi")
            if self.kind != "uniform" and not b > 0:
                raise ValueError(f"{self.kind} scale must be positive")
            object.__setattr__(self, "params", (a, b))

    @classmethod
    def matched(cls, kind, mean, sd):
        """The ``kind`` member of the family with the given mean and sd."""
        if kind == "gaussian":
            return cls(kind, (mean, sd))
        if kind == "laplace":
            return cls(kind, (mean, sd / math.sqrt(2.0)))
        if kind == "uniform":
            half = sd * math.sqrt(3.0)
            return cls(kind, (mean - half, mean + half))
        if kind == "logistic":
            return cls(kind, (mean, sd * math.sqrt(3.0) / math.pi))
        raise ValueError(f"cannot moment-match kind {kind!r}")

    @property
    def mean(self):
        if self.kind == "mixture":
            w, mu, _ = (np.array(v) for v in self.params)
            return float(w @ mu)
        if self.kind == "uniform":
            return 0.5 * (self.params[0] + self.params[1])
        return self.params[0]

    @property
    def sd(self):
        a, b = self.params[0], self.params[1]
        if self.kind == "gaussian":
            return b
        if self.kind == "laplace":
            return b * math.sqrt(2.0)
        if self.kind == "uniform":
            return (b - a) / math.sqrt(12.0)
        if self.kind == "logistic":
            return b * math.pi / math.sqrt(3.0)
        w, mu, sd = (np.array(v) for v in self.params)
        second = float(w @ (sd ** 2 + mu ** 2))
        return math.sqrt(second - self.mean ** 2)

    def logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "gaussian":
            mu, sd = self.params
            return -0.5 * ((x - mu) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)
        if self.kind == "laplace":
            mu, b = self.params
            return -np.abs(x - mu) / b - math.log(2 * b)
        if self.kind == "uniform":
            lo, hi = self.params
            inside = (x >= lo) & (x <= hi)
            return np.where(inside, -math.log(hi - lo), -np.inf)
        if self.kind == "logistic":
            mu, s = self.params
            z = -np.abs(x - mu) / s
            return z - 2.0 * np.log1p(np.exp(z)) - math.log(s)
        w, mu, sd = (np.array(v)[:, None] for v in self.params)
        comp = (np.log(w) - 0.5 * ((x[None] - mu) / sd) ** 2 - np.log(sd)
                - 0.5 * math.log(2 * math.pi))
        return np.logaddexp.reduce(comp, axis=0)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def grid(self, points=GRID_POINTS):
        """Default quadrature grid: mean +- 10 sd, widened to cover every
        mixture component's own +- 10 sd; exactly the support for uniform."""
        if self.kind == "uniform":
            return np.linspace(self.params[0], self.params[1], points)
        if self.kind == "laplace":
            # trapezoid error on exp(-|x|/b) is ~h^2/12b^2, so refine 8x and
            # put a node on the kink
            half = 4 * points
            x = np.linspace(0.0, GRID_SDS * self.sd, half + 1)
            return np.concatenate([self.mean - x[:0:-1], self.mean + x])
        lo, hi = self.mean - GRID_SDS * self.sd, self.mean + GRID_SDS * self.sd
        if self.kind == "mixture":
            mu, sd = np.array(self.params[1]), np.array(self.params[2])
            lo = min(lo, float(np.min(mu - GRID_SDS * sd)))
            hi = max(hi, float(np.max(mu + GRID_SDS * sd)))
        return np.linspace(lo, hi, points)

    def mass(self, points=GRID_POINTS):
        x = self.grid(points)
        return float(np.trapezoid(self.pdf(x), x))


def _kl_on_grid(p, q, x):
    lp, lq = p.logpdf(x), q.logpdf(x)
    pp = np.exp(lp)
    if np.any((pp > 0) & np.isneginf(lq)):
        return INF
    integrand = np.where(pp > 0, pp * (lp - np.where(np.isfinite(lq), lq, 0.0)), 0.0)
    return float(np.trapezoid(integrand, x))


def kl_quadrature(p, q, grid=None):
    """Trapezoidal KL(p || q) on ``grid`` (default: p's grid).

    The same integral on a grid of half the spacing must agree within 1e-4,
    otherwise ``ArithmeticError`` is raised. Returns ``INF`` when q vanishes
    somewhere p does not.
    """
    x = p.grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if x.ndim != 1 or x.size < 3 or np.any(np.diff(x) <= 0):
        raise ValueError("grid must be a strictly increasing 1-D array of >= 3 points")
    fine = np.empty(2 * x.size - 1)
    fine[0::2] = x
    fine[1::2] = 0.5 * (x[:-1] + x[1:])
    coarse_val = _kl_on_grid(p, q, x)
    fine_val = _kl_on_grid(p, q, fine)
    if coarse_val == INF or fine_val == INF:
        return INF
    if abs(coarse_val - fine_val) >= REFINE_TOL:
        raise ArithmeticError(f"grid too coarse: refinement moved KL by {abs(coarse_val - fine_val):.3g}")
    return fine_val


def kl_gaussian(a, b):
    """Closed-form KL(a || b) between multivariate Gaussians (GaussianMoments)."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    sign_b, logdet_b = np.linalg.slogdet(b.cov)
    sign_a, logdet_a = np.linalg.slogdet(a.cov)
    if sign_b <= 0 or np.linalg.cond(b.cov) > 1e12:
        raise np.linalg.LinAlgError("second covariance is singular")
    if sign_a <= 0:
        raise np.linalg.LinAlgError("first covariance is singular")
    inv_b = np.linalg.inv(b.cov)
    diff = b.mean - a.mean
    val = 0.5 * (np.trace(inv_b @ a.cov) + diff @ inv_b @ diff - a.dim + logdet_b - logdet_a)
    return max(float(val), 0.0)


def gaussian_1d(mu, sd):
    return GaussianMoments(np.array([mu]), np.array([[sd * sd]]), count=0)


# -- Lemma-1 family check ------------------------------------------------------

FAMILY = ("gaussian", "laplace", "uniform", "logistic")


@dataclass
class CandidateResult:
    kind: str
    kl: float
    margin: float      # KL to the Gaussian minus KL to this candidate
    excluded: bool
    note: str = ""


@dataclass
class FamilyReport:
    source: dict
    mean: float
    sd: float
    skipped: bool
    candidates: list = field(default_factory=list)

    @property
    def gaussian_is_max(self):
        """None when the check was skipped, else whether every finite
        candidate's KL is at most the Gaussian's (within 1e-6)."""
        if self.skipped:
            return None
        return all(c.excluded or c.margin >= -1e-6 for c in self.candidates)

    def to_dict(self):
        d = asdict(self)
        d["gaussian_is_max"] = self.gaussian_is_max
        return d


def lemma1_family_check(p):
    """Compare KL(p || q) across moment-matched candidates q of each kind.

    A Gaussian ``p`` (or single-component mixture) is the degenerate case
    where the matched Gaussian coincides with p; the comparison is skipped.
    Candidates with infinite KL (uniform cutting off p's support) are
    flagged and excluded.
    """
    mean, sd = p.mean, p.sd
    if not (np.isfinite(mean) and np.isfinite(sd) and sd > 0):
        raise ValueError("source density needs a finite mean and positive variance")
    report = FamilyReport({"kind": p.kind, "params": [list(v) if isinstance(v, tuple) else v
                                                      for v in p.params]},
                          mean, sd, skipped=False)
    degenerate = p.kind == "gaussian" or (p.kind == "mixture" and len(p.params[0]) == 1)
    if degenerate:
        report.skipped = True
        return report
    x = p.grid()
    kls = {kind: kl_quadrature(p, Density1D.matched(kind, mean, sd), x) for kind in FAMILY}
    ref = kls["gaussian"]
    for kind in FAMILY:
        val = kls[kind]
        if val == INF:
            report.candidates.append(CandidateResult(kind, val, -INF, True,
                                                     "infinite KL: support narrower than source"))
        else:
            report.candidates.append(CandidateResult(kind, val, ref - val, False))
    return report


def random_mixture(rng, components=2):
    g = rng.gen
    w = g.uniform(0.1, 0.9, size=components)
    w /= w.sum()
    if components == 2:
        w[1] = 1.0 - w[0]
    return Density1D("mixture", (tuple(w), tuple(g.uniform(-3.0, 3.0, components)),
                                 tuple(g.uniform(0.3, 2.0, components))))


# -- InfoNCE and the mutual-information bound ---------------------------------

def _check_unit_rows(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty [K, d] array")
    dev = np.max(np.abs(np.linalg.norm(x, axis=1) - 1.0))
    if dev > NORM_TOL:
        raise ValueError(f"{name} rows are not unit-norm (max deviation {dev:.3g})")
    return x


def _logsumexp_rows(s):
    m = s.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=1, keepdims=True)))[:, 0]


def infonce_estimate(a, b):
    """``log K - mean_i log(sum_j exp(a_i.b_j) / exp(a_i.b_i))`` with unit rows."""
    a = _check_unit_rows(a, "embA")
    b = _check_unit_rows(b, "embB")
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    s = a @ b.T
    k = a.shape[0]
    return float(math.log(k) - np.mean(_logsumexp_rows(s) - np.diag(s)))


def bound_rhs(dist, gram):
    """``log K - mean_i log(exp(d_i^2/2 - 1) sum_j exp(d_j + G_ij))``."""
    dist = np.asarray(dist, dtype=np.float64)
    k = dist.size
    inner = _logsumexp_rows(dist[None, :] + gram)
    return float(math.log(k) - np.mean(dist ** 2 / 2.0 - 1.0 + inner))


@dataclass
class BoundComponents:
    eps: np.ndarray       # per retain sample
    delta: np.ndarray     # per forget sample
    R: np.ndarray
    F: np.ndarray
    retain_ref: np.ndarray = None   # E0(T(x_r))
    retain_new: np.ndarray = None   # E(T(x_r))
    noise_ref: np.ndarray = None    # E0(T(n))
    forget_new: np.ndarray = None   # E(T(x_f))

    def __post_init__(self):
        if np.any(self.eps < 0) or np.any(self.delta < 0):
            raise ValueError("distances must be non-negative")
        for m in (self.R, self.F):
            if np.any(np.abs(m) > 1.0 + 1e-12):
                raise ValueError("inner products of unit vectors exceed 1 in magnitude")


def _embed(encoder, images, mask):
    return encode(encoder, Tensor(patchify(apply_mask(images, mask)))).data


def components_from_embeddings(retain_ref, retain_new, noise_ref, forget_new):
    for name, x in (("retain_ref", retain_ref), ("retain_new", retain_new),
                    ("noise_ref", noise_ref), ("forget_new", forget_new)):
        _check_unit_rows(x, name)
    if retain_ref.shape != retain_new.shape or noise_ref.shape != forget_new.shape:
        raise ValueError("paired embeddings differ in shape")
    eps = np.linalg.norm(retain_new - retain_ref, axis=1)
    delta = np.linalg.norm(forget_new - noise_ref, axis=1)
    r = np.clip(retain_ref @ retain_ref.T, -1.0, 1.0)
    f = np.clip(noise_ref @ noise_ref.T, -1.0, 1.0)
    return BoundComponents(eps, delta, r, f, retain_ref, retain_new, noise_ref, forget_new)


def bound_components(encoder, encoder0, retain, forget, noise, mask):
    """Theorem quantities from encoders ``E`` (target) and ``E0`` (original).

    eps_i = |E(T(x_ri)) - E0(T(x_ri))|, R_ij = E0(T(x_ri)).E0(T(x_rj));
    delta_i = |E(T(x_fi)) - E0(T(n_i))|, F_ij = E0(T(n_i)).E0(T(n_j)).
    """
    if set(encoder) != set(encoder0) or any(encoder[k].shape != encoder0[k].shape for k in encoder):
        raise ValueError("encoders do not share an architecture")
    if len(forget) != len(noise):
        raise ValueError(f"{len(forget)} forget samples but {len(noise)} noise samples")
    return components_from_embeddings(_embed(encoder0, retain, mask), _embed(encoder, retain, mask),
                                      _embed(encoder0, noise, mask), _embed(encoder, forget, mask))


@dataclass
class BoundCheck:
    side: str
    K: int
    scale: float
    lhs: float
    rhs: float
    margin: float
    passed: bool
    tight: bool = None    # only judged when the side's distances are all zero

    def to_dict(self):
        return asdict(self)


def check_bound(c, scale=0.0):
    """Both inequalities of the theorem from precomputed components."""
    out = []
    sides = (("retain", c.retain_ref, c.retain_new, c.eps, c.R),
             ("forget", c.noise_ref, c.forget_new, c.delta, c.F))
    for side, ref, new, dist, gram in sides:
        lhs = infonce_estimate(ref, new)
        rhs = bound_rhs(dist, gram)
        margin = lhs - rhs
        tight = bool(abs(margin) < BOUND_TOL) if np.all(dist == 0) else None
        out.append(BoundCheck(side, int(dist.size), float(scale), lhs, rhs, margin,
                              bool(margin >= -BOUND_TOL) and tight is not False, tight))
    return out


def verify_theorem1(encoder, encoder0, retain, forget, noise, mask, k=None, scale=0.0):
    """Evaluate the bound on the first ``k`` samples of each batch."""
    k = len(retain) if k is None else k
    if min(len(retain), len(forget), len(noise)) < k or k < 1:
        raise ValueError(f"need {k} samples in every batch")
    comps = bound_components(encoder, encoder0, retain[:k], forget[:k], noise[:k], mask)
    return check_bound(comps, scale)


def perturb_encoder(encoder, scale, rng):
    """Copy of ``encoder`` with N(0, scale^2) noise added to every weight."""
    return {k: Tensor(v.data + scale * rng.gen.standard_normal(v.shape), requires_grad=True)
            for k, v in encoder.items()}


@dataclass
class SweepReport:
    trials: list
    tightness: list

    @property
    def violations(self):
        return sum(not t.passed for t in self.trials)

    @property
    def tight(self):
        return all(t.tight for t in self.tightness)

    def to_json(self):
        return json.dumps({"trials": [t.to_dict() for t in self.trials],
                           "tightness": [t.to_dict() for t in self.tightness],
                           "violations": self.violations, "tight": self.tight},
                          sort_keys=True, indent=1)


def theorem1_sweep(encoder0, images, mask, trials=100, ks=(8, 16, 32),
                   scales=(0.01, 0.5), seed=0):
    """Randomised check of the bound over perturbed encoders.

    Trial ``t`` uses K = ks[t % len(ks)] and a scale spaced geometrically in
    ``scales``; retain/forget batches are drawn from ``images`` and the noise
    is full-resolution N(0, I) put through the same mask.
    """
    rng = Rng(seed)
    n = len(images)
    grid = np.geomspace(scales[0], scales[1], trials)
    results, tightness = [], []
    for t in range(trials):
        k = ks[t % len(ks)]
        if 2 * k > n:
            raise ValueError(f"K={k} needs {2 * k} images, have {n}")
        idx = rng.gen.permutation(n)[:2 * k]
        retain, forget = images[idx[:k]], images[idx[k:]]
        noise = rng.gen.standard_normal(retain.shape)
        target = perturb_encoder(encoder0, float(grid[t]), rng)
        comps = bound_components(target, encoder0, retain, forget, noise, mask)
        results.extend(check_bound(comps, float(grid[t])))
        if t < len(ks):
            same = bound_components(encoder0, encoder0, retain, forget, noise, mask)
            tightness.append(check_bound(same, 0.0)[0])
    return SweepReport(results, tightness)
