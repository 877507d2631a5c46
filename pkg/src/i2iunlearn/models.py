"""Patch-MLP encoder/decoder, probe classifier, optimizers and training loops."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tape, Tensor, derive_seed
from .transforms import PATCH, MaskSpec, apply_mask, make_mask

IMAGE_SIZE = 32
PATCH_DIM = PATCH * PATCH
N_PATCHES = (IMAGE_SIZE // PATCH) ** 2
INPUT_DIM = PATCH_DIM * N_PATCHES
HIDDEN = 64
EMBED_DIM = 32


def patchify(images):
    """``[B, 1, 32, 32]`` -> ``[B, 1024]`` laid out patch by patch."""
    images = np.asarray(images, dtype=np.float64)
    b = images.shape[0]
    g = IMAGE_SIZE // PATCH
    x = images.reshape(b, g, PATCH, g, PATCH).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, INPUT_DIM)


def unpatchify(flat):
    flat = np.asarray(flat, dtype=np.float64)
    b = flat.shape[0]
    g = IMAGE_SIZE // PATCH
    x = flat.reshape(b, g, g, PATCH, PATCH).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, 1, IMAGE_SIZE, IMAGE_SIZE)


def _linear(rng, fan_in, fan_out, gain=2.0):
    w = rng.gen.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
    return Tensor(w, requires_grad=True), Tensor(np.zeros((1, fan_out)), requires_grad=True)


def _mlp_params(rng, prefix, dims, last_gain=2.0):
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        gain = last_gain if i == len(dims) - 2 else 2.0
        params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"] = _linear(rng, a, b, gain)
    return params


def _mlp(params, prefix, x, n_layers, final_relu=False):
    h = x
    for i in range(n_layers):
        h = nx.add(nx.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1 or final_relu:
            h = nx.relu(h)
    return h


@dataclass
class Model:
    """Encoder (theta) and decoder (phi) parameter sets."""

    encoder: dict
    decoder: dict
    meta: dict = field(default_factory=dict)

    def copy(self):
        def dup(d):
            return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in d.items()}
        return Model(dup(self.encoder), dup(self.decoder), dict(self.meta))

    def arrays(self):
        out = {k: v.data for k, v in self.encoder.items()}
        out.update({k: v.data for k, v in self.decoder.items()})
        return out


def init_model(seed):
    rng = Rng(derive_seed(seed, "init"))
    enc = _mlp_params(rng, "encoder", (INPUT_DIM, HIDDEN, HIDDEN, EMBED_DIM))
    dec = _mlp_params(rng, "decoder", (EMBED_DIM, HIDDEN, HIDDEN, INPUT_DIM), last_gain=1.0)
    return Model(enc, dec)


def encode(encoder, masked):
    """Unit-norm embeddings ``[B, 32]`` of zero-filled masked images."""
    x = masked if isinstance(masked, Tensor) else Tensor(patchify(masked))
    if x.shape[-1] != INPUT_DIM:
        raise nx.ShapeError(f"encoder expects {INPUT_DIM} inputs, got {x.shape}")
    return nx.l2_normalize(_mlp(encoder, "encoder", x, 3))


def decode(decoder, z):
    """Raw (unclamped) patch-ordered pixels ``[B, 1024]``."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape[-1] != EMBED_DIM:
        raise nx.ShapeError(f"decoder expects {EMBED_DIM}-d embeddings, got {z.shape}")
    return _mlp(decoder, "decoder", z, 3)


def reconstruct(model, masked, clamp=True):
    """h(T(x)) as images; clamped to [0, 1] for evaluation."""
    out = unpatchify(decode(model.decoder, encode(model.encoder, masked)).data)
    return np.clip(out, 0.0, 1.0) if clamp else out


# -- optimizers ---------------------------------------------------------------

class Adam:
    """Adam (L2 penalty folded into the gradient) or AdamW (decoupled decay)."""

    def __init__(self, kind="adamw", lr=1e-3, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        if kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {"t": 0, "m": {}, "v": {}}

    def step(self, params, grads):
        optimizer_step(self.kind, params, grads, self.state,
                       dict(lr=self.lr, betas=self.betas, eps=self.eps,
                            weight_decay=self.weight_decay))


def optimizer_step(kind, params, grads, state, hyper):
    """One in-place Adam/AdamW update of ``params`` (name -> Tensor)."""
    lr = hyper["lr"]
    b1, b2 = hyper.get("betas", (0.9, 0.95))
    eps = hyper.get("eps", 1e-8)
    wd = hyper.get("weight_decay", 0.0)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nx.NonFiniteError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise nx.ShapeError(f"gradient shape {g.shape} vs parameter {params[name].shape}")
    state["t"] += 1
    t = state["t"]
    for name, g in grads.items():
        p = params[name].data
        if kind == "adam" and wd:
            g = g + wd * p
        m = state["m"].get(name)
        if m is None:
            m = state["m"][name] = np.zeros_like(p)
            state["v"][name] = np.zeros_like(p)
        v = state["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if kind == "adamw" and wd:
            p -= lr * wd * p
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 80
    batch: int = 32
    seed: int = 0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.0
    schedule: str = "cosine"

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(o):
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, np.ndarray)):
        return list(o)
    raise TypeError(f"cannot serialize {type(o)}")


def lr_at(config, step, total):
    if config.schedule == "constant" or total <= 1:
        return config.lr
    if config.schedule != "cosine":
        raise ValueError(f"unknown schedule {config.schedule!r}")
    return 0.5 * config.lr * (1.0 + np.cos(np.pi * step / total))


def _batches(rng, n, batch):
    perm = rng.gen.permutation(n)
    return [perm[i:i + batch] for i in range(0, n, batch)]


@dataclass
class TrainResult:
    model: object
    epoch_losses: list              # mean of the epoch's batch losses
    eval_losses: list = field(default_factory=list)  # full pass at epoch end


def reconstruction_loss(model, images, masks, chunk=512):
    """Mean MSE of h(T(x)) against x, averaged over ``masks``."""
    targets = patchify(images)
    total = 0.0
    for mask in masks:
        for i in range(0, len(images), chunk):
            x = Tensor(patchify(apply_mask(images[i:i + chunk], mask)))
            out = decode(model.decoder, encode(model.encoder, x)).data
            total += float(np.sum((out - targets[i:i + chunk]) ** 2))
    return total / (len(masks) * targets.size)


def train_original(images, mask_specs, config):
    """MSE reconstruction pretraining of encoder and decoder.

    Batches cycle through ``mask_specs`` in order; random masks get a fresh
    seed per batch.
    """
    if isinstance(mask_specs, MaskSpec):
        mask_specs = [mask_specs]
    rng = Rng(derive_seed(config.seed, "pretrain"))
    model = init_model(config.seed)
    params = {**model.encoder, **model.decoder}
    names = list(params)
    opt = Adam("adamw", config.lr, config.betas, weight_decay=config.weight_decay)
    targets = patchify(images)
    fixed = {i: make_mask(s) for i, s in enumerate(mask_specs) if s.kind != "random"}
    eval_masks = [make_mask(s) for s in mask_specs]
    history, eval_history = [], []
    step = 0
    total = config.epochs * -(-len(images) // config.batch)
    for _ in range(config.epochs):
        losses = []
        for idx in _batches(rng, len(images), config.batch):
            k = step % len(mask_specs)
            spec = mask_specs[k]
            if k in fixed:
                mask = fixed[k]
            else:
                mask = make_mask(MaskSpec(spec.kind, spec.size, spec.grid,
                                          int(rng.gen.integers(0, 2 ** 63))))
            x_in = Tensor(patchify(apply_mask(images[idx], mask)))
            with Tape() as tape:
                recon = decode(model.decoder, encode(model.encoder, x_in))
                loss = nx.mse(recon, Tensor(targets[idx]))
            grads = tape.backward(loss, [params[n] for n in names])
            opt.lr = lr_at(config, step, total)
            opt.step(params, dict(zip(names, grads)))
            step += 1
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        eval_history.append(reconstruction_loss(model, images, eval_masks))
    model.meta = {"kind": "original", "seed": config.seed, "epochs": config.epochs,
                  "config_hash": config_hash(config.to_dict())}
    return TrainResult(model, history, eval_history)


def smoothed_nonincreasing(values, window=3, slack=0.0):
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return True
    sm = np.convolve(v, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(sm) <= slack))


# -- probe classifier -----------------------------------------------------------

@dataclass
class Probe:
    params: dict
    num_classes: int
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def arrays(self):
        return {k: v.data for k, v in self.params.items()}


def init_probe(num_classes, seed):
    rng = Rng(derive_seed(seed, "probe-init"))
    params = _mlp_params(rng, "probe", (INPUT_DIM, HIDDEN, EMBED_DIM, num_classes), last_gain=1.0)
    return Probe(params, num_classes)


def probe_forward(probe, images):
    """Penultimate embeddings ``[B, 32]`` and class logits ``[B, C]``."""
    x = images if isinstance(images, Tensor) else Tensor(patchify(images))
    p = probe.params
    h = nx.relu(nx.add(nx.matmul(x, p["probe.w0"]), p["probe.b0"]))
    emb = nx.add(nx.matmul(h, p["probe.w1"]), p["probe.b1"])
    logits = nx.add(nx.matmul(nx.relu(emb), p["probe.w2"]), p["probe.b2"])
    return emb, logits


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def probe_embed(probe, images, chunk=512):
    return np.concatenate([probe_forward(probe, images[i:i + chunk])[0].data
                           for i in range(0, len(images), chunk)])


def probe_probs(probe, images, chunk=512):
    return np.concatenate([softmax(probe_forward(probe, images[i:i + chunk])[1].data)
                           for i in range(0, len(images), chunk)])


def probe_accuracy(probe, images, labels):
    return float(np.mean(np.argmax(probe_probs(probe, images), axis=1) == labels))


def train_probe(images, labels, num_classes, config):
    rng = Rng(derive_seed(config.seed, "probe"))
    probe = init_probe(num_classes, config.seed)
    names = list(probe.params)
    opt = Adam("adamw", config.lr, config.betas, weight_decay=config.weight_decay)
    flat = patchify(images)
    history = []
    step = 0
    total = config.epochs * -(-len(images) // config.batch)
    for _ in range(config.epochs):
        losses = []
        for idx in _batches(rng, len(images), config.batch):
            with Tape() as tape:
                _, logits = probe_forward(probe, Tensor(flat[idx]))
                loss = nx.softmax_xent(logits, labels[idx])
            grads = tape.backward(loss, [probe.params[n] for n in names])
            opt.lr = lr_at(config, step, total)
            opt.step(probe.params, dict(zip(names, grads)))
            step += 1
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    probe.trained = True
    probe.meta = {"kind": "probe", "seed": config.seed, "epochs": config.epochs,
                  "num_classes": num_classes, "config_hash": config_hash(config.to_dict())}
    return probe, history
