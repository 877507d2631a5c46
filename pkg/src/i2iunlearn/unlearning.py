"""Encoder-space unlearning and the reconstruction-loss baselines."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .models import Adam, decode, encode, patchify
from .numerics import Rng, Tape, Tensor, derive_seed, sample_gaussian, sample_uniform
from .transforms import apply_mask

METHODS = ("ours", "max_loss", "noisy_label", "retain_label", "random_encoder")
ENCODER_ONLY = ("ours", "random_encoder")


@dataclass
class UnlearnConfig:
    alpha: float = 0.25
    epochs: int = 15
    lr: float = 3e-3
    batch: int = 32
    noise_kind: str = "gaussian"
    sigma: str = "identity"
    retain_source: str = "real"    # real | proxy | subsample:<n per class>
    seed: int = 0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if self.noise_kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.sigma != "identity":
            raise ValueError("only sigma='identity' is supported")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class UnlearnResult:
    model: object
    losses: list
    wall_time: float
    config: dict = field(default_factory=dict)
    method: str = "ours"


def sample_noise(rng, shape, kind):
    """Image-shaped noise: N(0, I) or U[-1, 1], never clipped."""
    if kind == "gaussian":
        return sample_gaussian(rng, shape).data
    return sample_uniform(rng, shape).data


def unlearn_loss_ours(encoder, encoder0, retain, forget, noise, mask, alpha):
    """Mean over the batch of
    ``|E(T(x_r)) - E0(T(x_r))| + alpha * |E(T(x_f)) - E0(T(n))|``.

    ``retain``/``forget``/``noise`` are full-resolution images; the same mask
    is applied to all three before encoding. Returns a scalar Tensor.
    """
    if not (len(retain) == len(forget) == len(noise)):
        raise ValueError(f"batch sizes differ: {len(retain)}, {len(forget)}, {len(noise)}")
    xr = Tensor(patchify(apply_mask(retain, mask)))
    xf = Tensor(patchify(apply_mask(forget, mask)))
    xn = Tensor(patchify(apply_mask(noise, mask)))
    ref_r = Tensor(encode(encoder0, xr).data)
    ref_n = Tensor(encode(encoder0, xn).data)
    retain_term = nx.mean(nx.l2_distance(encode(encoder, xr), ref_r))
    forget_term = nx.mean(nx.l2_distance(encode(encoder, xf), ref_n))
    return nx.add(retain_term, nx.scale(forget_term, alpha))


def _recon(model, x):
    return decode(model.decoder, encode(model.encoder, x))


def method_loss(method, model, original, retain, forget, mask, alpha, rng, noise_kind):
    """Scalar loss for one balanced batch under ``method``."""
    b = len(retain)
    if method == "ours":
        noise = sample_noise(rng, retain.shape, noise_kind)
        return unlearn_loss_ours(model.encoder, original.encoder, retain, forget, noise, mask, alpha)
    xr = Tensor(patchify(apply_mask(retain, mask)))
    xf = Tensor(patchify(apply_mask(forget, mask)))
    if method == "random_encoder":
        ref_r = Tensor(encode(original.encoder, xr).data)
        target = Tensor(sample_noise(rng, (b, ref_r.shape[1]), noise_kind))
        retain_term = nx.mean(nx.l2_distance(encode(model.encoder, xr), ref_r))
        forget_term = nx.mean(nx.l2_distance(encode(model.encoder, xf), target))
        return nx.add(retain_term, nx.scale(forget_term, alpha))
    retain_term = nx.mean(nx.l2_distance(_recon(model, xr), Tensor(patchify(retain))))
    if method == "max_loss":
        target, sign = patchify(forget), -alpha
    elif method == "noisy_label":
        target, sign = patchify(sample_noise(rng, forget.shape, noise_kind)), alpha
    elif method == "retain_label":
        pair = rng.gen.integers(0, b, size=b)
        target, sign = patchify(retain[pair]), alpha
    else:
        raise ValueError(f"unknown method {method!r}")
    forget_term = nx.mean(nx.l2_distance(_recon(model, xf), Tensor(target)))
    return nx.add(retain_term, nx.scale(forget_term, sign))


def oversample_retain(n, target_count, rng=None):
    """Indices into a subset of size ``n`` covering ``target_count`` draws.

    Every element appears floor(target/n) or ceil(target/n) times; which
    elements get the extra draw is random when ``rng`` is given.
    """
    if n <= 0:
        raise ValueError("retain subset is empty")
    reps, extra = divmod(target_count, n)
    out = np.tile(np.arange(n), reps)
    if extra:
        pick = np.arange(extra) if rng is None else np.sort(rng.gen.choice(n, extra, replace=False))
        out = np.concatenate([out, pick])
    return out


def epoch_pairs(rng, n_retain, n_forget):
    """Balanced (retain, forget) index streams for one epoch."""
    forget_idx = rng.gen.permutation(n_forget)
    if n_retain >= n_forget:
        retain_idx = rng.gen.permutation(n_retain)[:n_forget]
    else:
        retain_idx = oversample_retain(n_retain, n_forget, rng)
        retain_idx = retain_idx[rng.gen.permutation(retain_idx.size)]
    return retain_idx, forget_idx


def run_unlearn(method, original, retain_images, forget_images, mask, config):
    """Unlearn ``forget_images`` from ``original`` and return the target model.

    ``ours`` and ``random_encoder`` update only the encoder; the other
    methods update encoder and decoder. ``original`` is never modified.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    start = time.perf_counter()
    target = original.copy()
    target.meta = dict(original.meta, kind="unlearned", method=method,
                       alpha=config.alpha, seed=config.seed)
    frozen = original.copy()
    params = dict(target.encoder)
    if method not in ENCODER_ONLY:
        params.update(target.decoder)
    names = list(params)
    opt = Adam("adamw", config.lr, config.betas, weight_decay=config.weight_decay)
    rng = Rng(derive_seed(config.seed, f"unlearn:{method}"))
    losses = []
    for _ in range(config.epochs):
        r_idx, f_idx = epoch_pairs(rng, len(retain_images), len(forget_images))
        for i in range(0, len(f_idx), config.batch):
            xr = retain_images[r_idx[i:i + config.batch]]
            xf = forget_images[f_idx[i:i + config.batch]]
            with Tape() as tape:
                loss = method_loss(method, target, frozen, xr, xf, mask,
                                   config.alpha, rng, config.noise_kind)
            value = float(loss.data)
            if not np.isfinite(value):
                raise nx.NonFiniteError(f"{method}: loss became non-finite")
            grads = tape.backward(loss, [params[n] for n in names])
            opt.step(params, dict(zip(names, grads)))
            losses.append(value)
    return UnlearnResult(target, losses, time.perf_counter() - start,
                         config.to_dict(), method)


def retain_pool(dataset, splits, source, seed=0):
    """Images standing in for D_R under ``source`` (real, proxy, subsample:n)."""
    if source == "real":
        return dataset.images[splits.retain]
    if source == "proxy":
        return dataset.images[splits.proxy]
    if source.startswith("subsample:"):
        per_class = int(source.split(":", 1)[1])
        rng = Rng(derive_seed(seed, f"subsample:{per_class}"))
        labels = dataset.labels[splits.retain]
        picked = []
        for c in sorted(set(labels.tolist())):
            idx = splits.retain[labels == c]
            if per_class > idx.size:
                raise ValueError(f"{per_class} per class requested, only {idx.size} available")
            picked.append(np.sort(rng.gen.choice(idx, per_class, replace=False)))
        return dataset.images[np.concatenate(picked)]
    raise ValueError(f"unknown retain source {source!r}")
