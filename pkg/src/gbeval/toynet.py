"""A miniature U-Net style network trained with BCE + lambda * ||w||^2 and Adam.

Topology (fixed)::

    enc1: conv3x3(1->8) + ReLU
    pool: 2x2 max
    enc2: conv3x3(8->16) + ReLU
    up:   2x nearest-neighbour
    dec1: conv3x3(concat(enc1, up) 24->8) + ReLU
    head: conv1x1(8->1) + sigmoid

Everything is float64 numpy; gradients are derived by hand.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .confmetrics import BCE_EPS
from .imagecore import BinaryMask, ProbabilityMap

LAYER_SHAPES = {
    "enc1": (3, 3, 1, 8),
    "enc2": (3, 3, 8, 16),
    "dec1": (3, 3, 24, 8),
    "head": (1, 1, 8, 1),
}
ENCODER = ("enc1", "enc2")
FINETUNE_LEVELS = ("frozen", "enc2", "all", "random")


@dataclass
class ConvLayer:
    kernel: np.ndarray
    bias: np.ndarray
    trainable: bool = True


@dataclass
class ToyNet:
    layers: dict

    def copy(self) -> ToyNet:
        return ToyNet({k: ConvLayer(l.kernel.copy(), l.bias.copy(), l.trainable)
                       for k, l in self.layers.items()})

    def trainable_names(self):
        return [k for k, l in self.layers.items() if l.trainable]

    def weight_sq_sum(self) -> float:
        return float(sum(np.sum(l.kernel ** 2) for l in self.layers.values()))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    lam: float = 0.0
    steps: int = 100
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def he_uniform(shape, rng) -> np.ndarray:
    fan_in = shape[0] * shape[1] * shape[2]
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_toynet(seed: int = 0) -> ToyNet:
    rng = np.random.default_rng(seed)
    return ToyNet({name: ConvLayer(he_uniform(shape, rng), np.zeros(shape[3]))
                   for name, shape in LAYER_SHAPES.items()})


def zero_toynet() -> ToyNet:
    return ToyNet({name: ConvLayer(np.zeros(shape), np.zeros(shape[3]))
                   for name, shape in LAYER_SHAPES.items()})


def apply_finetune_level(net: ToyNet, level: str, seed: int = 0) -> ToyNet:
    """Freeze/unfreeze the encoder the way the fine-tuning grid does.

    ``frozen``: encoder fixed; ``enc2``: deepest encoder layer unfrozen;
    ``all``: everything trainable; ``random``: encoder re-initialised, all trainable.
    """
    if level not in FINETUNE_LEVELS:
        raise ValueError(f"unknown fine-tune level {level!r}; expected one of {FINETUNE_LEVELS}")
    net = net.copy()
    for name, layer in net.layers.items():
        layer.trainable = True
        if level == "frozen" and name in ENCODER:
            layer.trainable = False
        if level == "enc2" and name == "enc1":
            layer.trainable = False
    if level == "random":
        rng = np.random.default_rng(seed)
        for name in ENCODER:
            shape = LAYER_SHAPES[name]
            net.layers[name] = ConvLayer(he_uniform(shape, rng), np.zeros(shape[3]))
    return net


# --- primitives -----------------------------------------------------------

def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """(B,H,W,C) -> (B,H,W,k*k*C) 'same' zero-padded windows."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B,H,W,C,k,k)
    b, h, w, c = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, h, w, k * k * c)


def conv_forward(x, layer: ConvLayer):
    k = layer.kernel.shape[0]
    cols = _patches(x, k)
    out = cols @ layer.kernel.reshape(-1, layer.kernel.shape[3]) + layer.bias
    return out, cols


def conv_backward(dout, cols, layer: ConvLayer, in_shape):
    kh, kw, cin, cout = layer.kernel.shape
    dk = np.tensordot(cols, dout, axes=([0, 1, 2], [0, 1, 2])).reshape(kh, kw, cin, cout)
    db = dout.sum(axis=(0, 1, 2))
    dcols = (dout @ layer.kernel.reshape(-1, cout).T).reshape(*dout.shape[:3], kh, kw, cin)
    b, h, w, _ = in_shape
    p = kh // 2
    dxp = np.zeros((b, h + 2 * p, w + 2 * p, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
    return dx, dk, db


def maxpool_forward(x):
    b, h, w, c = x.shape
    blocks = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    idx = np.argmax(blocks, axis=-1)  # first maximum wins ties
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def maxpool_backward(dout, idx, in_shape):
    b, h, w, c = in_shape
    blocks = np.zeros(dout.shape + (4,))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(in_shape)


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dout):
    b, h, w, c = dout.shape
    return dout.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


# --- network ---------------------------------------------------------------

def _as_batch(images) -> np.ndarray:
    if isinstance(images, ProbabilityMap):
        images = images.values
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ValueError(f"input dimensions must be even, got {x.shape[1]}x{x.shape[2]}")
    return x


def _forward(net: ToyNet, x: np.ndarray):
    L = net.layers
    z1, c1 = conv_forward(x, L["enc1"])
    a1 = np.maximum(z1, 0)
    p1, pidx = maxpool_forward(a1)
    z2, c2 = conv_forward(p1, L["enc2"])
    a2 = np.maximum(z2, 0)
    u = upsample_forward(a2)
    cat = np.concatenate([a1, u], axis=-1)
    z3, c3 = conv_forward(cat, L["dec1"])
    a3 = np.maximum(z3, 0)
    z4, c4 = conv_forward(a3, L["head"])
    y = sigmoid(z4)
    cache = dict(x=x, z1=z1, c1=c1, a1=a1, p1=p1, pidx=pidx, z2=z2, c2=c2,
                 cat=cat, z3=z3, c3=c3, a3=a3, c4=c4)
    return y[..., 0], cache


def forward(net: ToyNet, image):
    """Predict a probability map (or a batch of them) for the given input(s)."""
    single = np.asarray(image.values if isinstance(image, ProbabilityMap) else image).ndim == 2
    y, _ = _forward(net, _as_batch(image))
    return ProbabilityMap(y[0]) if single else y


def _gt_batch(gt) -> np.ndarray:
    if isinstance(gt, BinaryMask):
        gt = gt.values
    g = np.asarray(gt, dtype=np.float64)
    return g[None] if g.ndim == 2 else g


def penalty(net: ToyNet, lam: float) -> float:
    # biases are excluded; frozen kernels still count
    return lam * net.weight_sq_sum()


def _bce(y, g) -> float:
    pc = np.clip(y, BCE_EPS, 1 - BCE_EPS)
    return float(-np.mean(g * np.log(pc) + (1 - g) * np.log1p(-pc)))


def loss(net: ToyNet, pred, gt, lam: float) -> float:
    y = pred.values if isinstance(pred, ProbabilityMap) else np.asarray(pred, dtype=np.float64)
    g = _gt_batch(gt)
    if y.ndim == 2:
        y = y[None]
    if y.shape != g.shape:
        raise ValueError(f"dimension mismatch: prediction {y.shape} vs annotation {g.shape}")
    return _bce(y, g) + penalty(net, lam)


def objective(net: ToyNet, image, gt, lam: float) -> float:
    y, _ = _forward(net, _as_batch(image))
    return loss(net, y, gt, lam)


def backward(net: ToyNet, image, gt, lam: float):
    """Gradients of BCE + lam * sum(kernel**2) for every trainable layer.

    Returns ``(grads, bce_value)`` where ``grads`` maps layer name to
    ``(d_kernel, d_bias)``; frozen layers are absent.
    """
    x = _as_batch(image)
    g = _gt_batch(gt)
    y, c = _forward(net, x)
    if y.shape != g.shape:
        raise ValueError(f"dimension mismatch: prediction {y.shape} vs annotation {g.shape}")
    L = net.layers
    n = y.size
    inside = (y > BCE_EPS) & (y < 1 - BCE_EPS)
    dz4 = np.where(inside, (y - g) / n, 0.0)[..., None]
    grads = {}

    def keep(name, dk, db):
        if L[name].trainable:
            grads[name] = (dk + 2.0 * lam * L[name].kernel, db)

    da3, dk, db = conv_backward(dz4, c["c4"], L["head"], c["a3"].shape)
    keep("head", dk, db)
    dz3 = da3 * (c["z3"] > 0)
    dcat, dk, db = conv_backward(dz3, c["c3"], L["dec1"], c["cat"].shape)
    keep("dec1", dk, db)
    da1_skip = dcat[..., :8]
    da2 = upsample_backward(dcat[..., 8:])
    need_encoder = L["enc1"].trainable or L["enc2"].trainable
    if need_encoder:
        dz2 = da2 * (c["z2"] > 0)
        dp1, dk, db = conv_backward(dz2, c["c2"], L["enc2"], c["p1"].shape)
        keep("enc2", dk, db)
        if L["enc1"].trainable:
            da1 = da1_skip + maxpool_backward(dp1, c["pidx"], c["a1"].shape)
            dz1 = da1 * (c["z1"] > 0)
            _, dk, db = conv_backward(dz1, c["c1"], L["enc1"], c["x"].shape)
            keep("enc1", dk, db)
    return grads, _bce(y, g)


def adam_step(net: ToyNet, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """In-place bias-corrected Adam update of every layer present in ``grads``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, (dk, db) in grads.items():
        layer = net.layers[name]
        if not layer.trainable:
            continue
        for key, param, grad in ((name + ".kernel", layer.kernel, dk), (name + ".bias", layer.bias, db)):
            if grad.shape != param.shape:
                raise ValueError(f"{key}: gradient shape {grad.shape} != parameter shape {param.shape}")
            m = state.m.setdefault(key, np.zeros_like(param))
            v = state.v.setdefault(key, np.zeros_like(param))
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            param -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


@dataclass
class TraceRow:
    step: int
    bce: float
    penalty: float
    total: float


def _batches(n: int, batch_size: int, rng):
    order = []
    while True:
        while len(order) < batch_size:
            order.extend(rng.permutation(n).tolist())
        yield order[:batch_size]
        order = order[batch_size:]


def train(net: ToyNet, dataset, cfg: TrainConfig, state: Optional[AdamState] = None):
    """Train a copy of ``net``; returns ``(trained_net, trace, adam_state)``."""
    if not dataset:
        raise ValueError("empty dataset")
    net = net.copy()
    state = state or AdamState()
    xs = np.stack([np.asarray(x.values if isinstance(x, ProbabilityMap) else x, dtype=np.float64)
                   for x, _ in dataset])
    gs = np.stack([_gt_batch(g)[0] for _, g in dataset])
    rng = np.random.default_rng(cfg.rng_seed)
    batches = _batches(len(dataset), cfg.batch_size, rng)
    trace = []
    for step in range(cfg.steps):
        idx = next(batches)
        grads, b = backward(net, xs[idx], gs[idx], cfg.lam)
        pen = penalty(net, cfg.lam)
        trace.append(TraceRow(step, b, pen, b + pen))
        adam_step(net, grads, state, cfg)
    return net, trace, state


def dataset_bce(net: ToyNet, dataset) -> float:
    xs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in dataset])
    gs = np.stack([_gt_batch(g)[0] for _, g in dataset])
    y, _ = _forward(net, _as_batch(xs))
    return _bce(y, gs)


def make_toy_dataset(count: int = 8, size: int = 16, seed: int = 0, noise: float = 0.1):
    """Boundary-detection pairs: noisy gray renderings of small Voronoi annotations."""
    from .synthlab import voronoi_from_seeds

    rng = np.random.default_rng(seed)
    data = []
    for _ in range(count):
        seeds = np.stack([rng.integers(0, size, 4), rng.integers(0, size, 4)], axis=1)
        seeds = np.unique(seeds, axis=0)
        truth = voronoi_from_seeds((size, size), seeds, thickness=1, draw_frame=False)
        mask = truth.annotation.values
        img = np.where(mask, 0.25, 0.75) + noise * rng.standard_normal(mask.shape)
        data.append((np.clip(img, 0, 1), mask))
    return data


# --- persistence -------------------------------------------------------------

def checkpoint_dict(net: ToyNet, state: Optional[AdamState] = None, step: int = 0) -> dict:
    state = state or AdamState()
    return {
        "spec": {name: list(shape) for name, shape in LAYER_SHAPES.items()},
        "layers": {name: {"kernel": l.kernel.tolist(), "bias": l.bias.tolist(), "trainable": l.trainable}
                   for name, l in net.layers.items()},
        "adam": {"t": state.t,
                 "m": {k: v.tolist() for k, v in sorted(state.m.items())},
                 "v": {k: v.tolist() for k, v in sorted(state.v.items())}},
        "step": step,
    }


def save_checkpoint(path, net: ToyNet, state: Optional[AdamState] = None, step: int = 0) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(net, state, step), fh)


def load_checkpoint(path):
    with open(path) as fh:
        d = json.load(fh)
    layers = {}
    for name, shape in LAYER_SHAPES.items():
        ld = d["layers"][name]
        kernel = np.array(ld["kernel"], dtype=np.float64)
        if kernel.shape != shape:
            raise ValueError(f"{name}: kernel shape {kernel.shape} != {shape}")
        layers[name] = ConvLayer(kernel, np.array(ld["bias"], dtype=np.float64), bool(ld["trainable"]))
    a = d.get("adam", {})
    state = AdamState({k: np.array(v) for k, v in a.get("m", {}).items()},
                      {k: np.array(v) for k, v in a.get("v", {}).items()}, int(a.get("t", 0)))
    return ToyNet(layers), state, int(d.get("step", 0))


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "bce", "penalty", "total"])
        for r in trace:
            w.writerow([r.step, repr(r.bce), repr(r.penalty), repr(r.total)])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
