"""Influence predictors: dataset collection, training, variants, sampling.

The predictor estimates the conditional distribution of the influence
sources given a window of d-set rows. Training data comes from the global
simulator under an exploratory policy: at every step the current d-set
window and the influence values acting on that transition are recorded as
one sample.

Two trainable architectures exist. The feedforward variant consumes the
flattened (zero-padded) window. The recurrent variant processes rows one at
a time; training runs over whole recorded episodes with the hidden state
carried across truncation chunks and gradients confined to chunks of k
steps, which matches how the predictor is deployed inside a simulator.
Untrained and fixed-marginal variants provide the accuracy baselines, and
an exact-oracle variant defers to brute-force inference on the toy network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    GlobalSimulator,
    DsetWindow,
    bits_from_str,
    bits_to_str,
    derive_seed,
    make_rng,
)
from .exact import ToyDbnModel
from .neural import (
    Adam,
    AdamConfig,
    GruCell,
    Mlp,
    MultiHeadSoftmax,
    assign_params,
    cross_entropy_from_logits,
    load_checkpoint,
    save_checkpoint,
)

VARIANT_TAGS = ("trained-ff", "trained-gru", "untrained", "fixed-marginal",
                "exact-oracle")

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None


def _gru_advance_py(h, wx, uh, bias, logits, head_w, head_b, x):
    """One recurrent step on fused gate matrices; mutates ``h`` and fills
    ``logits`` in place. Reference for the compiled version below."""
    hd = h.shape[0]
    gx = wx @ x
    gx += bias
    gh = uh @ h
    for i in range(2 * hd):
        gx[i] = 1.0 / (1.0 + np.exp(-(gx[i] + gh[i])))
    for i in range(hd):
        n = np.tanh(gx[2 * hd + i] + gx[hd + i] * gh[2 * hd + i])
        h[i] = n + gx[i] * (h[i] - n)
    logits[:] = head_w @ h
    logits += head_b


def _head_sample_py(logits, draws, bounds, out):
    """Categorical draw per head segment of ``logits``; fills ``out``."""
    for m in range(out.shape[0]):
        lo, hi = bounds[m], bounds[m + 1]
        mx = logits[lo]
        for c in range(lo + 1, hi):
            if logits[c] > mx:
                mx = logits[c]
        total = 0.0
        for c in range(lo, hi):
            total += np.exp(logits[c] - mx)
        target = draws[m] * total
        acc = 0.0
        cls = hi - lo - 1
        for c in range(lo, hi):
            acc += np.exp(logits[c] - mx)
            if acc >= target:
                cls = c - lo
                break
        out[m] = cls


if _njit is not None:
    _gru_advance = _njit(cache=True)(_gru_advance_py)
    _head_sample = _njit(cache=True)(_head_sample_py)
else:  # pragma: no cover - numba is a declared dependency
    _gru_advance = _gru_advance_py
    _head_sample = _head_sample_py


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class InfluenceSample:
    window: np.ndarray          # (rows <= k, dset_width) uint8, oldest first
    target: tuple[int, ...]     # one class index per influence head
    episode: int
    t: int


@dataclass
class InfluenceDataset:
    samples: list[InfluenceSample]
    provenance: dict

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def k(self) -> int:
        return self.provenance["k"]

    @property
    def dset_width(self) -> int:
        return self.provenance["dset_width"]

    @property
    def influence_classes(self) -> tuple[int, ...]:
        return tuple(self.provenance["influence_classes"])

    def episodes(self) -> list[list[InfluenceSample]]:
        """Samples grouped by episode, each ordered by step."""
        groups: dict[int, list[InfluenceSample]] = {}
        for s in self.samples:
            groups.setdefault(s.episode, []).append(s)
        out = []
        for ep in sorted(groups):
            chunk = sorted(groups[ep], key=lambda s: s.t)
            assert [s.t for s in chunk] == list(range(len(chunk)))
            out.append(chunk)
        return out

    def split(self, val_frac: float, seed: int):
        """Train/validation split along whole episodes."""
        eps = self.episodes()
        order = make_rng(seed, "val-split").permutation(len(eps))
        n_val = max(1, int(round(len(eps) * val_frac))) if len(eps) > 1 else 0
        val_ids = set(order[:n_val].tolist())
        train = [s for i, ep in enumerate(eps) if i not in val_ids for s in ep]
        val = [s for i, ep in enumerate(eps) if i in val_ids for s in ep]
        return (InfluenceDataset(train, self.provenance),
                InfluenceDataset(val, self.provenance))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "influence-dataset", "format_version": 1,
                                 **self.provenance}) + "\n")
            for s in self.samples:
                fh.write(json.dumps({
                    "e": s.episode, "t": s.t,
                    "d": [bits_to_str(row) for row in s.window],
                    "u": list(s.target)}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "InfluenceDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("kind") != "influence-dataset":
                raise ValueError(f"{path} is not an influence dataset")
            header.pop("kind")
            header.pop("format_version")
            samples = []
            for line in fh:
                rec = json.loads(line)
                window = np.stack([bits_from_str(r) for r in rec["d"]])
                samples.append(InfluenceSample(window, tuple(rec["u"]),
                                               rec["e"], rec["t"]))
        return cls(samples, header)


def uniform_random_policy(action_count: int):
    def policy(obs, rng):
        return int(rng.integers(0, action_count))
    return policy


def collect_dataset(gs: GlobalSimulator, policy, n: int, seed: int,
                    k: int, policy_name: str = "uniform-random") -> InfluenceDataset:
    """Roll the exploratory policy on the global simulator and record
    (d-set window, influence) pairs, resetting at episode boundaries."""
    if n < 1:
        raise ValueError("need at least one sample")
    desc = gs.descriptor
    samples: list[InfluenceSample] = []
    rng = make_rng(seed, "collect-policy")
    episode = 0
    while len(samples) < n:
        obs = gs.reset(derive_seed(seed, "collect-episode", episode))
        window = DsetWindow(desc.dset_width, k)
        window.append(gs.current_dset_row())
        t = 0
        done = False
        while not done and len(samples) < n:
            samples.append(InfluenceSample(window.rows().copy(),
                                           tuple(gs.current_influence()),
                                           episode, t))
            obs, _, done = gs.step(policy(obs, rng))
            window.append(gs.current_dset_row())
            t += 1
        episode += 1
    provenance = {
        "env_id": desc.env_id,
        "fingerprint": desc.fingerprint(),
        "policy": policy_name,
        "seed": seed,
        "n": n,
        "k": k,
        "dset_width": desc.dset_width,
        "influence_classes": list(desc.influence_classes),
    }
    return InfluenceDataset(samples, provenance)


def empirical_head_marginals(dataset: InfluenceDataset) -> list[np.ndarray]:
    """Per-head class frequencies; exact fractions of the dataset."""
    classes = dataset.influence_classes
    counts = [np.zeros(c) for c in classes]
    for s in dataset.samples:
        for m, cls in enumerate(s.target):
            counts[m][cls] += 1
    return [c / len(dataset.samples) for c in counts]


# ---------------------------------------------------------------------------
# Predictor implementations
# ---------------------------------------------------------------------------


def _pad_flatten(window: np.ndarray, k: int, width: int) -> np.ndarray:
    """Zero-pad a (rows, width) window on the old side and flatten to k*width."""
    rows = window.shape[0]
    if rows > k:
        window = window[-k:]
        rows = k
    flat = np.zeros(k * width)
    flat[(k - rows) * width:] = window.reshape(-1)
    return flat


class FeedForwardPredictor:
    def __init__(self, k: int, width: int, classes: tuple[int, ...],
                 hidden: tuple[int, ...] = (64, 64), seed: int = 0):
        self.k = k
        self.width = width
        self.classes = tuple(classes)
        self.hidden = tuple(hidden)
        rng = make_rng(seed, "ff-init")
        self.trunk = Mlp([k * width, *hidden], hidden_activation="tanh",
                         output_activation="tanh", rng=rng, name="trunk")
        self.heads = MultiHeadSoftmax(hidden[-1], self.classes, rng=rng)

    def predict(self, window: np.ndarray) -> list[np.ndarray]:
        x = _pad_flatten(np.asarray(window, dtype=np.float64), self.k, self.width)
        h = self.trunk.forward(x[None, :])
        return [p[0] for p in self.heads.forward_probs(h)]

    def params(self):
        return {**self.trunk.params(), **self.heads.params()}

    def grads(self):
        return {**self.trunk.grads(), **self.heads.grads()}

    def zero_grads(self):
        self.trunk.zero_grads()
        self.heads.zero_grads()

    def arch(self) -> dict:
        return {"type": "ff", "k": self.k, "width": self.width,
                "classes": list(self.classes), "hidden": list(self.hidden)}


class GruPredictor:
    def __init__(self, k: int, width: int, classes: tuple[int, ...],
                 hidden: int = 48, seed: int = 0):
        self.k = k
        self.width = width
        self.classes = tuple(classes)
        self.hidden = hidden
        rng = make_rng(seed, "gru-init")
        self.cell = GruCell(width, hidden, rng=rng)
        self.heads = MultiHeadSoftmax(hidden, self.classes, rng=rng)

    def predict(self, window: np.ndarray) -> list[np.ndarray]:
        h = self.cell.init_hidden(1)
        for row in np.asarray(window, dtype=np.float64):
            h, _ = self.cell.forward(h, row[None, :])
        return [p[0] for p in self.heads.forward_probs(h)]

    def params(self):
        return {**self.cell.params(), **self.heads.params()}

    def grads(self):
        return {**self.cell.grads(), **self.heads.grads()}

    def zero_grads(self):
        self.cell.zero_grads()
        self.heads.zero_grads()

    def arch(self) -> dict:
        return {"type": "gru", "k": self.k, "width": self.width,
                "classes": list(self.classes), "hidden": self.hidden}


class FixedMarginalPredictor:
    def __init__(self, marginals: list[np.ndarray], k: int, width: int):
        for m in marginals:
            if abs(m.sum() - 1.0) > 1e-9 or np.any(m < 0):
                raise ValueError("marginals must be probability vectors")
        self.marginals = [np.asarray(m, dtype=np.float64) for m in marginals]
        self.k = k
        self.width = width
        self.classes = tuple(len(m) for m in self.marginals)

    def predict(self, window: np.ndarray) -> list[np.ndarray]:
        return [m.copy() for m in self.marginals]

    def arch(self) -> dict:
        return {"type": "fixed-marginal", "k": self.k, "width": self.width,
                "classes": list(self.classes)}


class ExactOraclePredictor:
    """Brute-force conditional influence on the toy network; usable only
    where the d-set projection is invertible to a full history."""

    def __init__(self, model: ToyDbnModel, k: int):
        self.model = model
        self.k = k
        self.width = model.config.dset_width
        self.classes = (2,)

    def predict(self, window: np.ndarray) -> list[np.ndarray]:
        history = self.model.history_from_dset(np.asarray(window))
        return [self.model.influence(history)]

    def arch(self) -> dict:
        return {"type": "exact-oracle", "k": self.k, "width": self.width,
                "classes": list(self.classes)}


# ---------------------------------------------------------------------------
# Variant wrapper and streams
# ---------------------------------------------------------------------------


class PredictorStream:
    """Stateful per-episode view of a predictor: feed one d-set row per step
    and read the head distributions for the current step.

    The recurrent path precomputes fused gate and head matrices from the
    frozen network, so one step costs two matrix-vector products plus the
    gate nonlinearities.
    """

    def __init__(self, variant: "PredictorVariant"):
        self.variant = variant
        impl = variant.impl
        self._gru = isinstance(impl, GruPredictor)
        if self._gru:
            cell = impl.cell
            self._hdim = cell.hidden_dim
            self._wx = np.ascontiguousarray(np.vstack([cell.Wz, cell.Wr, cell.Wn]))
            self._uh = np.ascontiguousarray(np.vstack([cell.Uz, cell.Ur, cell.Un]))
            self._bias = np.concatenate([cell.bz, cell.br, cell.bn])
            self._head_w = np.ascontiguousarray(
                np.vstack([p.W for p in impl.heads.projections]))
            self._head_b = np.concatenate([p.b for p in impl.heads.projections])
            counts = impl.classes
            self._bounds = np.cumsum([0, *counts])
            # heads with one shared class count sample on a single matrix
            self._h = np.zeros(self._hdim)
            self._logits = np.zeros(int(self._bounds[-1]))
            self._bounds_arr = np.asarray(self._bounds, dtype=np.int64)
            self._classes_out = np.zeros(len(counts), dtype=np.int64)
        else:
            self._window = DsetWindow(impl.width, variant.k)

    def _advance(self, row: np.ndarray) -> np.ndarray:
        x = np.asarray(row, dtype=np.float64)
        _gru_advance(self._h, self._wx, self._uh, self._bias, self._logits,
                     self._head_w, self._head_b, x)
        return self._logits

    def feed(self, row: np.ndarray) -> list[np.ndarray]:
        impl = self.variant.impl
        if self._gru:
            logits = self._advance(row)
            out = []
            for m in range(len(self._bounds) - 1):
                seg = logits[self._bounds[m]:self._bounds[m + 1]]
                e = np.exp(seg - seg.max())
                out.append(e / e.sum())
            return out
        self._window.append(np.asarray(row, dtype=np.uint8))
        return impl.predict(self._window.rows())

    def feed_sample(self, row: np.ndarray,
                    rng: np.random.Generator) -> tuple[int, ...]:
        """Feed one row and sample one class per head in a single call."""
        if self._gru:
            logits = self._advance(row)
            draws = rng.random(len(self._classes_out))
            _head_sample(logits, draws, self._bounds_arr, self._classes_out)
            return tuple(self._classes_out.tolist())
        probs = self.feed(row)
        draws = rng.random(len(probs))
        return tuple(int(np.searchsorted(np.cumsum(p), draws[m]))
                     for m, p in enumerate(probs))


@dataclass
class PredictorVariant:
    tag: str
    impl: object
    k: int
    env_id: str
    fingerprint: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in VARIANT_TAGS:
            raise ValueError(f"unknown variant tag {self.tag!r}")

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(self.impl.classes)

    def predict(self, window: np.ndarray) -> list[np.ndarray]:
        window = np.asarray(window)
        if window.ndim != 2 or window.shape[1] != self.impl.width:
            raise ValueError(f"window width {window.shape} does not match "
                             f"predictor width {self.impl.width}")
        return self.impl.predict(window)

    def sample(self, probs: list[np.ndarray], rng: np.random.Generator) -> tuple[int, ...]:
        """Independent draw per head from the given distributions."""
        out = []
        for p in probs:
            out.append(int(np.searchsorted(np.cumsum(p), rng.random())))
        return tuple(out)

    def sample_influence(self, window: np.ndarray,
                         rng: np.random.Generator) -> tuple[int, ...]:
        return self.sample(self.predict(window), rng)

    def begin_stream(self) -> PredictorStream:
        return PredictorStream(self)

    def save(self, path: str | Path) -> None:
        params = self.impl.params() if hasattr(self.impl, "params") else {}
        meta = {**self.meta, "variant": self.tag, "k": self.k,
                "env_id": self.env_id, "fingerprint": self.fingerprint}
        if isinstance(self.impl, FixedMarginalPredictor):
            meta["marginals"] = [m.tolist() for m in self.impl.marginals]
        save_checkpoint(path, "influence-predictor", self.impl.arch(), params, meta)

    @classmethod
    def load(cls, path: str | Path) -> "PredictorVariant":
        doc = load_checkpoint(path)
        if doc["kind"] != "influence-predictor":
            raise ValueError(f"{path} is not an influence predictor checkpoint")
        arch = doc["arch"]
        meta = doc["meta"]
        classes = tuple(arch["classes"])
        if arch["type"] == "ff":
            impl = FeedForwardPredictor(arch["k"], arch["width"], classes,
                                        tuple(arch["hidden"]))
            assign_params(impl.params(), doc["params"])
        elif arch["type"] == "gru":
            impl = GruPredictor(arch["k"], arch["width"], classes, arch["hidden"])
            assign_params(impl.params(), doc["params"])
        elif arch["type"] == "fixed-marginal":
            impl = FixedMarginalPredictor([np.asarray(m) for m in meta["marginals"]],
                                          arch["k"], arch["width"])
        else:
            raise ValueError(f"cannot load predictor type {arch['type']!r}")
        return cls(meta["variant"], impl, meta["k"], meta["env_id"],
                   meta["fingerprint"], meta)


def make_untrained(dataset_or_desc, arch: str, seed: int, k: int | None = None,
                   hidden=None) -> PredictorVariant:
    """Freshly initialized predictor; the accuracy baseline."""
    prov = dataset_or_desc.provenance if isinstance(dataset_or_desc, InfluenceDataset) \
        else dataset_or_desc
    k = k or prov["k"]
    width = prov["dset_width"]
    classes = tuple(prov["influence_classes"])
    if arch == "gru":
        impl = GruPredictor(k, width, classes, hidden or 48, seed=seed)
    else:
        impl = FeedForwardPredictor(k, width, classes, hidden or (64, 64), seed=seed)
    return PredictorVariant("untrained", impl, k, prov["env_id"],
                            prov["fingerprint"], {"seed": seed})


def fit_fixed_marginal(dataset: InfluenceDataset) -> PredictorVariant:
    marginals = empirical_head_marginals(dataset)
    impl = FixedMarginalPredictor(marginals, dataset.k, dataset.dset_width)
    return PredictorVariant("fixed-marginal", impl, dataset.k,
                            dataset.provenance["env_id"],
                            dataset.provenance["fingerprint"],
                            {"n": len(dataset)})


def make_exact_oracle(model: ToyDbnModel, k: int,
                      fingerprint: str) -> PredictorVariant:
    impl = ExactOraclePredictor(model, k)
    return PredictorVariant("exact-oracle", impl, k, "toy-dbn", fingerprint)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class AipTrainConfig:
    arch: str = "gru"               # "ff" or "gru"
    hidden: int = 48                # gru hidden width
    ff_hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    epochs: int = 40
    batch: int = 256                # ff minibatch (samples)
    batch_episodes: int = 16        # gru minibatch (episodes)
    patience: int = 5
    val_frac: float = 0.1
    seed: int = 0
    min_epochs: int = 1
    plateau_halve: int = 0          # halve lr after this many epochs without
                                    # validation improvement (0: off)


def train(dataset: InfluenceDataset, config: AipTrainConfig) -> tuple[PredictorVariant, dict]:
    """Minimize the multi-head cross-entropy on the dataset; returns the
    trained variant and per-epoch train/validation losses.

    Stops early when validation loss has not improved for ``patience``
    epochs (best parameters are restored) and aborts when the train loss
    grows by more than 10% in five consecutive epochs.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.arch == "gru":
        return _train_gru(dataset, config)
    if config.arch == "ff":
        return _train_ff(dataset, config)
    raise ValueError(f"unknown architecture {config.arch!r}")


def _track_epoch(history, train_ce, val_ce, best, impl, config):
    """Shared early-stopping / divergence bookkeeping; returns (stop, best)."""
    history["train_ce"].append(train_ce)
    history["val_ce"].append(val_ce)
    cur = history["train_ce"]
    if len(cur) >= 6:
        diverging = all(cur[i] > 1.1 * cur[i - 1] for i in
                        range(len(cur) - 5, len(cur)))
        if diverging:
            raise TrainingDiverged(
                f"train loss grew >10% for 5 consecutive epochs: {cur[-6:]}")
    monitored = val_ce if val_ce is not None else train_ce
    if best is None or monitored < best[0]:
        best = (monitored, {k: v.copy() for k, v in impl.params().items()},
                len(cur))
    stop = (len(cur) - best[2] >= config.patience
            and len(cur) >= config.min_epochs)
    return stop, best


def _eval_ff(impl: FeedForwardPredictor, x: np.ndarray, targets: np.ndarray) -> float:
    h = impl.trunk.forward(x)
    loss, _ = cross_entropy_from_logits(impl.heads.forward_logits(h), targets)
    return float(loss)


def _train_ff(dataset: InfluenceDataset, config: AipTrainConfig):
    train_set, val_set = dataset.split(config.val_frac, config.seed)
    if len(val_set) == 0:
        train_set, val_set = dataset, dataset
    k, width = dataset.k, dataset.dset_width
    impl = FeedForwardPredictor(k, width, dataset.influence_classes,
                                config.ff_hidden, seed=config.seed)

    def matrix(ds):
        x = np.stack([_pad_flatten(s.window.astype(np.float64), k, width)
                      for s in ds.samples])
        y = np.array([s.target for s in ds.samples], dtype=np.int64)
        return x, y

    x_tr, y_tr = matrix(train_set)
    x_va, y_va = matrix(val_set)
    opt = Adam(impl.params(), AdamConfig(lr=config.lr))
    rng = make_rng(config.seed, "ff-shuffle")
    history = {"train_ce": [], "val_ce": []}
    best = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_tr))
        total, weight = 0.0, 0
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            impl.zero_grads()
            h = impl.trunk.forward(x_tr[idx], train=True)
            loss, dlogits = cross_entropy_from_logits(
                impl.heads.forward_logits(h, train=True), y_tr[idx])
            impl.trunk.backward(impl.heads.backward_from_dlogits(dlogits))
            opt.step(impl.grads())
            total += loss * len(idx)
            weight += len(idx)
        val_ce = _eval_ff(impl, x_va, y_va)
        stop, best = _track_epoch(history, total / weight, val_ce, best,
                                  impl, config)
        if stop:
            break
    assign_params(impl.params(), best[1])
    variant = PredictorVariant(
        "trained-ff", impl, k, dataset.provenance["env_id"],
        dataset.provenance["fingerprint"],
        {"seed": config.seed, "epochs": len(history["train_ce"]),
         "final_loss": best[0]})
    return variant, history


def _episode_tensors(ds: InfluenceDataset):
    """Rebuild per-episode d-set row streams and aligned targets from the
    overlapping sample windows."""
    streams = []
    for ep in ds.episodes():
        rows = [ep[0].window[i] for i in range(ep[0].window.shape[0])]
        targets = [ep[0].target]
        for s in ep[1:]:
            rows.append(s.window[-1])
            targets.append(s.target)
        streams.append((np.asarray(rows, dtype=np.float64),
                        np.asarray(targets, dtype=np.int64)))
    return streams


def _gru_epoch_ce(impl: GruPredictor, streams) -> float:
    total, count = 0.0, 0
    for rows, targets in streams:
        h = impl.cell.init_hidden(1)
        for t in range(rows.shape[0]):
            h, _ = impl.cell.forward(h, rows[t][None, :])
            logits = impl.heads.forward_logits(h)
            loss, _ = cross_entropy_from_logits(logits, targets[t][None, :])
            total += float(loss)
            count += 1
    return total / max(count, 1)


def _train_gru(dataset: InfluenceDataset, config: AipTrainConfig):
    train_set, val_set = dataset.split(config.val_frac, config.seed)
    if len(val_set) == 0:
        train_set, val_set = dataset, dataset
    k, width = dataset.k, dataset.dset_width
    impl = GruPredictor(k, width, dataset.influence_classes,
                        config.hidden, seed=config.seed)
    streams_tr = _episode_tensors(train_set)
    streams_va = _episode_tensors(val_set)
    opt = Adam(impl.params(), AdamConfig(lr=config.lr))
    rng = make_rng(config.seed, "gru-shuffle")
    history = {"train_ce": [], "val_ce": []}
    best = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(streams_tr))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_episodes):
            batch = [streams_tr[i] for i in order[start:start + config.batch_episodes]]
            # rotating the chunk grid spreads full-length gradient credit
            # over all sequence positions across epochs
            offset = int(rng.integers(0, k))
            loss, steps = _gru_batch_step(impl, opt, batch, k, offset)
            total += loss
            count += steps
        val_ce = _gru_epoch_ce(impl, streams_va)
        stop, best = _track_epoch(history, total / max(count, 1), val_ce,
                                  best, impl, config)
        if stop:
            break
        if config.plateau_halve and \
                len(history["val_ce"]) - best[2] >= config.plateau_halve and \
                (len(history["val_ce"]) - best[2]) % config.plateau_halve == 0:
            opt.config.lr *= 0.5
    assign_params(impl.params(), best[1])
    variant = PredictorVariant(
        "trained-gru", impl, k, dataset.provenance["env_id"],
        dataset.provenance["fingerprint"],
        {"seed": config.seed, "epochs": len(history["train_ce"]),
         "final_loss": best[0]})
    return variant, history


def _gru_batch_step(impl: GruPredictor, opt: Adam, batch, k: int,
                    offset: int = 0):
    """One optimizer step on a batch of episode streams.

    Forward runs the full episodes with the hidden state carried across
    k-step chunks; gradients propagate only within each chunk (truncated
    backpropagation through time with truncation length k). ``offset``
    shifts the chunk grid so no position is always near a chunk start.
    Shorter episodes are padded and masked.
    """
    lengths = [rows.shape[0] for rows, _ in batch]
    max_t = max(lengths)
    n = len(batch)
    width = impl.width
    heads = len(impl.classes)
    xs = np.zeros((max_t, n, width))
    ys = np.zeros((max_t, n, heads), dtype=np.int64)
    mask = np.zeros((max_t, n))
    for b, (rows, targets) in enumerate(batch):
        xs[:lengths[b], b] = rows
        ys[:lengths[b], b] = targets
        mask[:lengths[b], b] = 1.0

    impl.zero_grads()
    total_loss = 0.0
    total_steps = float(mask.sum())
    h = impl.cell.init_hidden(n)
    boundaries = [0]
    first = offset % k if offset % k else k
    pos = min(first, max_t)
    while pos < max_t:
        boundaries.append(pos)
        pos += k
    boundaries.append(max_t)
    for chunk_start, chunk_end in zip(boundaries[:-1], boundaries[1:]):
        caches = []
        hs = []
        dh_head = []
        for t in range(chunk_start, chunk_end):
            h, cache = impl.cell.forward(h, xs[t], train=True)
            caches.append(cache)
            hs.append(h)
            logits = impl.heads.forward_logits(h)
            loss, dlogits = cross_entropy_from_logits(logits, ys[t], mask[t])
            scale = mask[t].sum() / max(total_steps, 1.0)
            total_loss += float(loss) * mask[t].sum()
            dh = None
            for proj, dl in zip(impl.heads.projections, dlogits):
                dl = dl * scale
                proj.dW += dl.T @ h
                proj.db += dl.sum(axis=0)
                contrib = dl @ proj.W
                dh = contrib if dh is None else dh + contrib
            dh_head.append(dh)
        # backward through the chunk only; the carried hidden state is
        # treated as a constant input to the next chunk
        dh_carry = np.zeros_like(h)
        for i in range(len(caches) - 1, -1, -1):
            dh_carry, _ = impl.cell.backward(dh_carry + dh_head[i], caches[i])
    opt.step(impl.grads())
    return total_loss, total_steps


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_ce(variant: PredictorVariant, dataset: InfluenceDataset) -> float:
    """Mean multi-head cross-entropy of a variant on a dataset.

    Recurrent variants are evaluated the way they run inside a simulator:
    streaming over episodes with carried hidden state. Window-based
    variants see each sample's window.
    """
    if dataset.provenance["fingerprint"] != variant.fingerprint:
        raise ValueError("dataset/predictor environment mismatch")
    total, count = 0.0, 0
    if isinstance(variant.impl, GruPredictor):
        for rows, targets in _episode_tensors(dataset):
            stream = variant.begin_stream()
            for t in range(rows.shape[0]):
                probs = stream.feed(rows[t])
                for m, p in enumerate(probs):
                    total += -np.log(max(p[targets[t, m]], 1e-12))
                count += 1
        return total / max(count, 1)
    for s in dataset.samples:
        probs = variant.predict(s.window)
        for m, p in enumerate(probs):
            total += -np.log(max(p[s.target[m]], 1e-12))
        count += 1
    return total / max(count, 1)
