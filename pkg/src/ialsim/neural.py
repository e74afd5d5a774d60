"""Minimal differentiable-network kit backing the predictors and policies.

Only three layer types exist in this package (dense, gated-recurrent cell,
multi-head softmax), so reverse-mode gradients are derived by hand per layer
instead of through a general autodiff tape. Everything is float64 numpy and
batch-first: inputs are ``(batch, features)`` arrays.

Conventions shared by all layers:

* ``params()`` / ``grads()`` expose name -> array views; optimizers and the
  finite-difference checker operate on those dicts.
* ``zero_grads()`` clears accumulators; ``backward`` accumulates into them.
* forward passes on a frozen (non-training) network are pure functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_EPS = 1e-12  # clamp inside log() so impossible targets yield finite loss


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values entering {name}")


def _init_matrix(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(in_dim, 1))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Dense:
    """Affine layer ``y = act(x W^T + b)`` with activation tanh/relu/identity."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, name: str = "dense"):
        if activation not in ("tanh", "relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.activation = activation
        self.W = _init_matrix(rng, out_dim, in_dim)
        self.b = np.zeros(out_dim)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._cache: tuple | None = None

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: input width {x.shape[-1]} != {self.in_dim}")
        a = x @ self.W.T + self.b
        if self.activation == "tanh":
            y = np.tanh(a)
        elif self.activation == "relu":
            y = np.maximum(a, 0.0)
        else:
            y = a
        if train:
            self._cache = (x, a, y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, a, y = self._cache
        if self.activation == "tanh":
            da = dy * (1.0 - y * y)
        elif self.activation == "relu":
            da = dy * (a > 0.0)
        else:
            da = dy
        self.dW += da.T @ x
        self.db += da.sum(axis=0)
        return da @ self.W

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.W": self.dW, f"{self.name}.b": self.db}

    def zero_grads(self) -> None:
        self.dW[:] = 0.0
        self.db[:] = 0.0


class Mlp:
    """Stack of dense layers; hidden layers share one activation."""

    def __init__(self, sizes: list[int], hidden_activation: str = "tanh",
                 output_activation: str = "identity",
                 rng: np.random.Generator | None = None, name: str = "mlp"):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.layers: list[Dense] = []
        for i in range(len(sizes) - 1):
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            self.layers.append(
                Dense(sizes[i], sizes[i + 1], act, rng, name=f"{name}.{i}"))

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        _check_finite(self.name, x)
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.grads())
        return out

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()


class GruCell:
    """Gated recurrent cell.

    Update gate z, reset gate r, candidate n, next hidden state

        z  = sigmoid(x Wz^T + h Uz^T + bz)
        r  = sigmoid(x Wr^T + h Ur^T + br)
        n  = tanh(x Wn^T + r * (h Un^T) + bn)
        h' = (1 - z) * n + z * h

    With all-zero parameters z = 0.5 and n = 0, so h' = 0.5 h. Values of z
    and r stay in (0, 1) and h' stays in (-1, 1) once h does.
    """

    def __init__(self, in_dim: int, hidden_dim: int,
                 rng: np.random.Generator | None = None, name: str = "gru"):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        for gate in ("z", "r", "n"):
            setattr(self, f"W{gate}", _init_matrix(rng, hidden_dim, in_dim))
            setattr(self, f"U{gate}", _init_matrix(rng, hidden_dim, hidden_dim))
            setattr(self, f"b{gate}", np.zeros(hidden_dim))
        self._zero_grad_arrays()

    def _zero_grad_arrays(self) -> None:
        for gate in ("z", "r", "n"):
            setattr(self, f"dW{gate}", np.zeros((self.hidden_dim, self.in_dim)))
            setattr(self, f"dU{gate}", np.zeros((self.hidden_dim, self.hidden_dim)))
            setattr(self, f"db{gate}", np.zeros(self.hidden_dim))

    def init_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.hidden_dim))

    def forward(self, h: np.ndarray, x: np.ndarray, train: bool = False):
        """One recurrent step; returns (h_next, cache)."""
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: input width {x.shape[-1]} != {self.in_dim}")
        if h.shape[-1] != self.hidden_dim:
            raise ValueError(f"{self.name}: hidden width {h.shape[-1]} != {self.hidden_dim}")
        z = sigmoid(x @ self.Wz.T + h @ self.Uz.T + self.bz)
        r = sigmoid(x @ self.Wr.T + h @ self.Ur.T + self.br)
        un = h @ self.Un.T
        n = np.tanh(x @ self.Wn.T + r * un + self.bn)
        h_next = (1.0 - z) * n + z * h
        cache = (x, h, z, r, un, n) if train else None
        return h_next, cache

    def backward(self, dh_next: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        """Backprop one step; returns (dh, dx) given upstream dh_next."""
        x, h, z, r, un, n = cache
        dz = dh_next * (h - n)
        dn = dh_next * (1.0 - z)
        dh = dh_next * z

        dan = dn * (1.0 - n * n)
        self.dWn += dan.T @ x
        self.dbn += dan.sum(axis=0)
        dr = dan * un
        dun = dan * r
        self.dUn += dun.T @ h
        dh = dh + dun @ self.Un
        dx = dan @ self.Wn

        daz = dz * z * (1.0 - z)
        self.dWz += daz.T @ x
        self.dUz += daz.T @ h
        self.dbz += daz.sum(axis=0)
        dx += daz @ self.Wz
        dh += daz @ self.Uz

        dar = dr * r * (1.0 - r)
        self.dWr += dar.T @ x
        self.dUr += dar.T @ h
        self.dbr += dar.sum(axis=0)
        dx += dar @ self.Wr
        dh += dar @ self.Ur
        return dh, dx

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for gate in ("z", "r", "n"):
            out[f"{self.name}.W{gate}"] = getattr(self, f"W{gate}")
            out[f"{self.name}.U{gate}"] = getattr(self, f"U{gate}")
            out[f"{self.name}.b{gate}"] = getattr(self, f"b{gate}")
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for gate in ("z", "r", "n"):
            out[f"{self.name}.W{gate}"] = getattr(self, f"dW{gate}")
            out[f"{self.name}.U{gate}"] = getattr(self, f"dU{gate}")
            out[f"{self.name}.b{gate}"] = getattr(self, f"db{gate}")
        return out

    def zero_grads(self) -> None:
        for gate in ("z", "r", "n"):
            getattr(self, f"dW{gate}")[:] = 0.0
            getattr(self, f"dU{gate}")[:] = 0.0
            getattr(self, f"db{gate}")[:] = 0.0


class MultiHeadSoftmax:
    """One linear projection + softmax per influence head.

    Head m maps a shared trunk representation to a categorical distribution
    over that head's ``class_counts[m]`` classes.
    """

    def __init__(self, in_dim: int, class_counts: tuple[int, ...],
                 rng: np.random.Generator | None = None, name: str = "heads"):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.class_counts = tuple(class_counts)
        self.projections = [
            Dense(in_dim, c, "identity", rng, name=f"{name}.{m}")
            for m, c in enumerate(self.class_counts)
        ]

    def forward_logits(self, x: np.ndarray, train: bool = False) -> list[np.ndarray]:
        return [proj.forward(x, train=train) for proj in self.projections]

    def forward_probs(self, x: np.ndarray, train: bool = False) -> list[np.ndarray]:
        return [softmax(l) for l in self.forward_logits(x, train=train)]

    def backward_from_dlogits(self, dlogits: list[np.ndarray]) -> np.ndarray:
        dx = None
        for proj, dl in zip(self.projections, dlogits):
            contrib = proj.backward(dl)
            dx = contrib if dx is None else dx + contrib
        return dx

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for proj in self.projections:
            out.update(proj.params())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for proj in self.projections:
            out.update(proj.grads())
        return out

    def zero_grads(self) -> None:
        for proj in self.projections:
            proj.zero_grads()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(pred_probs: list[np.ndarray], targets: np.ndarray) -> tuple[float, int]:
    """Multi-head cross-entropy from probability vectors.

    ``pred_probs[m]`` has shape (batch, C_m); ``targets`` has shape
    (batch, heads). Returns the per-sample loss summed over heads and
    averaged over the batch, plus the number of probabilities that had to be
    clamped at PROB_EPS (a flag for zero-probability targets).
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    batch = targets.shape[0]
    total = 0.0
    clamped = 0
    for m, probs in enumerate(pred_probs):
        probs = np.atleast_2d(probs)
        picked = probs[np.arange(batch), targets[:, m]]
        low = picked < PROB_EPS
        clamped += int(low.sum())
        total += -np.log(np.maximum(picked, PROB_EPS)).sum()
    return total / batch, clamped


def cross_entropy_from_logits(logits: list[np.ndarray], targets: np.ndarray,
                              sample_weight: np.ndarray | None = None):
    """Fused softmax + cross-entropy; returns (loss, dlogits list).

    Gradients are for the mean-over-batch, sum-over-heads loss. Optional
    per-sample weights (used to mask padded steps) rescale both the loss and
    the gradients; the normalizer is the weight total.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    batch = targets.shape[0]
    if sample_weight is None:
        weight = np.ones(batch)
    else:
        weight = np.asarray(sample_weight, dtype=np.float64)
    denom = max(weight.sum(), 1e-12)
    loss = 0.0
    dlogits = []
    for m, lg in enumerate(logits):
        logp = log_softmax(lg)
        picked = logp[np.arange(batch), targets[:, m]]
        loss += -(picked * weight).sum() / denom
        grad = softmax(lg)
        grad[np.arange(batch), targets[:, m]] -= 1.0
        dlogits.append(grad * (weight / denom)[:, None])
    return loss, dlogits


def clipped_surrogate_loss(logits: np.ndarray, values: np.ndarray,
                           actions: np.ndarray, old_logp: np.ndarray,
                           advantages: np.ndarray, returns: np.ndarray,
                           clip: float, vf_coef: float, ent_coef: float):
    """Combined actor-critic objective with a clipped probability ratio.

    Returns (loss, dlogits, dvalues, stats). The policy term is
    -mean(min(ratio * A, clip(ratio) * A)), the value term is a half squared
    error against the computed returns, and an entropy bonus is subtracted.
    Gradients are exact for the masked form of the clipped minimum.
    """
    batch = logits.shape[0]
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    idx = np.arange(batch)
    logp = logp_all[idx, actions]
    ratio = np.exp(logp - old_logp)

    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages
    policy_loss = -np.minimum(unclipped, clipped).mean()
    # ratio gradient only flows where the unclipped branch is active
    active = unclipped <= clipped
    dlogp = -np.where(active, ratio * advantages, 0.0) / batch

    entropy_per = -(probs * logp_all).sum(axis=1)
    entropy = entropy_per.mean()

    value_err = values - returns
    value_loss = 0.5 * float(value_err @ value_err) / batch

    loss = policy_loss + vf_coef * value_loss - ent_coef * entropy

    onehot = np.zeros_like(logits)
    onehot[idx, actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    # d(-ent_coef * H)/dlogits = ent_coef * p * (log p + H), per sample / batch
    dlogits += ent_coef * probs * (logp_all + entropy_per[:, None]) / batch
    dvalues = vf_coef * value_err / batch

    stats = {"policy_loss": float(policy_loss), "value_loss": float(value_loss),
             "entropy": float(entropy)}
    return float(loss), dlogits, dvalues, stats


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adaptive-moment optimizer over a name -> array parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self._params = params
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.config
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {key}; step aborted")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for key, param in self._params.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            param -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_grads_(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def gradient_check(params: dict[str, np.ndarray], loss_fn,
                   analytic: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error of analytic grads vs central finite differences.

    ``loss_fn()`` must recompute the scalar loss from the current parameter
    values; every entry of every parameter is perturbed.
    """
    worst = 0.0
    for key, param in params.items():
        flat = param.reshape(-1)
        ana = analytic[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            denom = max(abs(ana[i]) + abs(num), 1e-8)
            worst = max(worst, abs(ana[i] - num) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, kind: str, arch: dict,
                    params: dict[str, np.ndarray], meta: dict) -> None:
    """Write a versioned JSON checkpoint.

    Parameter arrays are serialized as nested lists of decimal floats using
    Python's shortest round-trip repr, so save -> load -> forward reproduces
    the original outputs bit for bit.
    """
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "arch": arch,
        "params": {k: v.tolist() for k, v in params.items()},
        "meta": meta,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt checkpoint {path}: line {exc.lineno} col {exc.colno}: "
                         f"{exc.msg}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ValueError(f"corrupt checkpoint {path}: missing format_version")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path} has unsupported version "
                         f"{doc['format_version']}")
    doc["params"] = {k: np.asarray(v, dtype=np.float64)
                     for k, v in doc["params"].items()}
    return doc


def assign_params(target: dict[str, np.ndarray], source: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live parameter views, checking shapes."""
    missing = set(target) - set(source)
    extra = set(source) - set(target)
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing={sorted(missing)} "
                         f"extra={sorted(extra)}")
    for key, arr in target.items():
        if source[key].shape != arr.shape:
            raise ValueError(f"shape mismatch for {key}: "
                             f"{source[key].shape} vs {arr.shape}")
        arr[:] = source[key]
