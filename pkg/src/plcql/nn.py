"""Small numpy function-approximation stack.

Fully-connected tanh networks with hand-written reverse mode, an Adam/SGD
optimizer, Polyak averaging, a seeded RNG facade and the JSON checkpoint
format shared by every learned component.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when array dimensions do not match a network's declaration."""


class SeededRng:
    """Thin facade over a PCG64 generator.

    All stochastic code in the package draws through this class so that a
    single integer seed fixes the whole trajectory. ``spawn`` derives
    independent, reproducible substreams.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def dirichlet(self, alpha, size=None):
        return self._gen.dirichlet(alpha, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def categorical(self, probs: np.ndarray) -> np.ndarray | int:
        """Inverse-CDF draw from one distribution (1-D) or one per row (2-D)."""
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim == 1:
            u = self._gen.random()
            idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
            return min(idx, probs.shape[0] - 1)
        u = self._gen.random(probs.shape[0])
        cdf = np.cumsum(probs, axis=1)
        idx = (cdf <= u[:, None]).sum(axis=1)
        return np.minimum(idx, probs.shape[1] - 1)

    def spawn(self, key: int) -> "SeededRng":
        seq = np.random.SeedSequence([self.seed, int(key)])
        return SeededRng(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax; shift invariant. Rejects NaN/Inf."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax received non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class GradientBundle:
    """Per-layer gradients, shape-congruent with an :class:`Mlp`."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def check_congruent(self, net: "Mlp") -> None:
        if len(self.weights) != len(net.weights) or len(self.biases) != len(net.biases):
            raise ShapeError("gradient layer count does not match network")
        for g, w in zip(self.weights + self.biases, net.weights + net.biases):
            if g.shape != w.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {w.shape}")

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, c: float) -> "GradientBundle":
        return GradientBundle([c * w for w in self.weights], [c * b for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


class Mlp:
    """Fully-connected network, tanh hidden layers and a linear output.

    Weights are stored as ``(in, out)`` so a batch ``x`` of shape ``(B, in)``
    maps through ``x @ W + b``. Single vectors are accepted and returned as
    vectors.
    """

    activation = "tanh"

    def __init__(self, layer_sizes, rng: SeededRng | None = None, zero: bool = False):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        self.layer_sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if zero or rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def num_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input dimension {self.in_dim}, got shape {x.shape}")
        return x, single

    def _forward(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        xb, single = self._as_batch(x)
        out = self._forward(xb)[-1]
        return out[0] if single else out

    __call__ = forward

    def forward_cached(self, x) -> tuple[np.ndarray, list[np.ndarray]]:
        """Batch forward that also returns the activations for :meth:`backward`."""
        xb, _ = self._as_batch(x)
        acts = self._forward(xb)
        return acts[-1], acts

    def backward(self, x, upstream, cache: list[np.ndarray] | None = None) -> GradientBundle:
        """Gradient of ``sum(upstream * forward(x))`` w.r.t. the parameters.

        For a batch the per-sample gradients are summed. ``cache`` from
        :meth:`forward_cached` on the same ``x`` skips the recomputation.
        """
        xb, single = self._as_batch(x)
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :] if g.ndim == 1 else g
        if g.shape != (xb.shape[0], self.out_dim):
            raise ShapeError(f"upstream shape {g.shape} != {(xb.shape[0], self.out_dim)}")
        acts = cache if cache is not None else self._forward(xb)
        n_layers = len(self.weights)
        gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        delta = g
        for i in reversed(range(n_layers)):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return GradientBundle(gw, gb)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ShapeError(f"expected {self.num_params()} parameters, got {flat.size}")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos:pos + b.size].copy()
            pos += b.size

    def same_architecture(self, other: "Mlp") -> bool:
        return self.layer_sizes == other.layer_sizes


@dataclass
class Optimizer:
    """Adam (default) or plain SGD. Always descends; negate for ascent."""

    lr: float
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "mode": self.mode, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "step": self.step,
            "m": [a.ravel().tolist() for a in self.m],
            "v": [a.ravel().tolist() for a in self.v],
        }

    @classmethod
    def from_state_dict(cls, d: dict, net: "Mlp") -> "Optimizer":
        shapes = [p.shape for p in net.params()]
        opt = cls(d["lr"], d["mode"], d["beta1"], d["beta2"], d["eps"], d["step"])
        opt.m = [np.array(a, dtype=np.float64).reshape(s) for a, s in zip(d["m"], shapes)]
        opt.v = [np.array(a, dtype=np.float64).reshape(s) for a, s in zip(d["v"], shapes)]
        return opt


def apply_gradients(net: Mlp, opt: Optimizer, grads: GradientBundle) -> Mlp:
    """In-place parameter step; returns ``net`` for chaining."""
    grads.check_congruent(net)
    params = net.params()
    flat_grads = []
    for gw, gb in zip(grads.weights, grads.biases):
        flat_grads.extend([gw, gb])
    if opt.mode == "adam" and not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    elif opt.mode == "adam":
        for m, p in zip(opt.m, params):
            if m.shape != p.shape:
                raise ShapeError("optimizer moments are not congruent with the network")
    opt.step += 1
    if opt.mode == "sgd":
        for p, g in zip(params, flat_grads):
            p -= opt.lr * g
        return net
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for p, g, m, v in zip(params, flat_grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return net


def polyak(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """``target <- (1 - tau) * target + tau * online`` in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if not target.same_architecture(online):
        raise ShapeError("polyak requires identical architectures")
    for tp, op in zip(target.params(), online.params()):
        tp *= 1.0 - tau
        tp += tau * op
    return target


# ---------------------------------------------------------------- checkpoints

def net_to_dict(net: Mlp, name: str = "net", opt: Optimizer | None = None) -> dict:
    return {
        "name": name,
        "layer_sizes": net.layer_sizes,
        "activation": net.activation,
        "params": net.flat_params().tolist(),
        "optimizer": opt.state_dict() if opt is not None else None,
    }


def net_from_dict(d: dict) -> tuple[Mlp, Optimizer | None]:
    if d.get("activation", "tanh") != Mlp.activation:
        raise ValueError(f"unsupported activation {d.get('activation')!r}")
    net = Mlp(d["layer_sizes"], zero=True)
    net.set_flat_params(d["params"])
    opt = Optimizer.from_state_dict(d["optimizer"], net) if d.get("optimizer") else None
    return net, opt


def save_checkpoint(path, module: str, nets: list[dict], rng_seed: int, step: int,
                    metadata: dict | None = None) -> None:
    """Write a checkpoint document. ``nets`` holds :func:`net_to_dict` entries."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "module": module,
        "rng_seed": int(rng_seed),
        "step": int(step),
        "metadata": metadata or {},
        "nets": nets,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path, module: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    if module is not None and doc["module"] != module:
        raise ValueError(f"checkpoint holds module {doc['module']!r}, expected {module!r}")
    return doc
