"""Probe-based analogs of FID, IS and CLIP distance, plus MSE/PSNR."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import probe_embed, probe_probs, reconstruct
from .numerics import sqrtm_psd
from .transforms import apply_mask

SHRINKAGE = 1e-6
SYM_TOL = 1e-10


@dataclass
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance {self.cov.shape} does not match mean dim {d}")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > SYM_TOL:
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def rank_deficient(self):
        return self.count < self.dim + 1


def fit_moments(embeddings):
    """Sample mean and unbiased (n-1) covariance of ``[n, d]`` embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples to fit moments")
    mu = x.mean(axis=0)
    c = x - mu
    cov = c.T @ c / (n - 1)
    return GaussianMoments(mu, 0.5 * (cov + cov.T), n)


def _min_eig(cov):
    from .numerics import sym_eig
    return sym_eig(cov)[0][0]


def frechet_distance(a, b, eps=SHRINKAGE):
    """``|mu1-mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``.

    The cross trace is taken as the sum of singular values of
    ``S1^1/2 S2^1/2``, whose squares are the eigenvalues of
    ``S1^1/2 S2 S1^1/2``. Forming that product squares the condition number,
    which costs ~1e-6 absolute accuracy on rank-deficient probe features.
    ``eps * I`` is added to both covariances only when either is
    near-singular (too few samples, or smallest eigenvalue below ``eps``).
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    s1, s2 = a.cov, b.cov
    if a.rank_deficient or b.rank_deficient or min(_min_eig(s1), _min_eig(s2)) < eps:
        s1 = s1 + eps * np.eye(a.dim)
        s2 = s2 + eps * np.eye(a.dim)
    cross = np.linalg.svd(sqrtm_psd(s1) @ sqrtm_psd(s2), compute_uv=False).sum()
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * cross)
    if d < -1e-8:
        raise ArithmeticError(f"frechet distance materially negative: {d}")
    return max(d, 0.0)


def inception_score(probs):
    """``exp(E_x KL(p(y|x) || p(y)))`` of a ``[n, C]`` table of posteriors."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError("need a non-empty [n, C] probability table")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    score = float(np.exp(terms.sum(axis=1).mean()))
    return min(max(score, 1.0), float(p.shape[1]))


def is_analog(probe, images):
    if not probe.trained:
        raise ValueError("probe has not been trained")
    if len(images) < 1:
        raise ValueError("need at least one image")
    return inception_score(probe_probs(probe, images))


def mean_cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired sets differ in shape: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.where((na > 0) & (nb > 0), na * nb, 1.0)
    cos = np.where((na > 0) & (nb > 0), np.sum(a * b, axis=1) / denom, 0.0)
    return float(np.clip(cos, -1.0, 1.0).mean())


def clip_analog(probe, generated, reference):
    if len(generated) != len(reference):
        raise ValueError(f"{len(generated)} generated vs {len(reference)} reference images")
    return mean_cosine(probe_embed(probe, generated), probe_embed(probe, reference))


def psnr(mse_value, max_value=1.0):
    if mse_value <= 0:
        return float("inf")
    return float(10.0 * np.log10(max_value ** 2 / mse_value))


@dataclass
class SplitMetrics:
    fid_analog: float
    is_analog: float
    clip_analog: float
    mse: float
    psnr: float
    count: int


@dataclass
class MetricReport:
    model_tag: str
    config_hash: str
    splits: dict = field(default_factory=dict)   # name -> SplitMetrics

    def to_dict(self):
        return {"model_tag": self.model_tag, "config_hash": self.config_hash,
                "splits": {k: asdict(v) for k, v in sorted(self.splits.items())}}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def __getitem__(self, split):
        return self.splits[split]


def split_metrics(probe, generated, real):
    gen_emb = probe_embed(probe, generated)
    real_emb = probe_embed(probe, real)
    fid = frechet_distance(fit_moments(gen_emb), fit_moments(real_emb))
    err = float(np.mean((generated - real) ** 2))
    return SplitMetrics(fid_analog=fid, is_analog=is_analog(probe, generated),
                        clip_analog=mean_cosine(gen_emb, real_emb), mse=err,
                        psnr=psnr(err), count=len(real))


def evaluate_model(model, probe, images_by_split, mask, model_tag="model", config_hash=""):
    """Run h on masked heldout images of each split and score against ground truth.

    ``model`` may also be any callable mapping masked images to outputs.
    """
    report = MetricReport(model_tag, config_hash)
    for name, real in images_by_split.items():
        if len(real) == 0:
            raise ValueError(f"heldout split {name!r} is empty")
        masked = apply_mask(real, mask)
        generated = model(masked) if callable(model) else reconstruct(model, masked)
        report.splits[name] = split_metrics(probe, generated, real)
    return report


def export_embeddings(probe, images, path, split_tags, labels):
    """CSV with one row per image: split tag, label, then the embedding."""
    emb = probe_embed(probe, images)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["split", "label"] + [f"e{i}" for i in range(emb.shape[1])])
        for tag, lab, row in zip(split_tags, labels, emb):
            w.writerow([tag, int(lab)] + [repr(float(v)) for v in row])
    return emb.shape[0]


def read_embeddings(path):
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    tags = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    emb = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), len(header) - 2)
    return tags, labels, emb
