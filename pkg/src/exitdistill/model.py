"""Exitable classifier: a residual block stack with exit heads at fixed depths."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Distribution, Tensor

MODEL_FORMAT_VERSION = 1
LN_EPS = 1e-5
PROTOTYPE_DECAY = 0.99


class ConfigError(ValueError):
    pass


class LifecycleError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dim: int = 16
    depth: int = 4
    exit_depths: tuple = (1, 2, 3, 4)
    num_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "exit_depths", tuple(int(d) for d in self.exit_depths))
        self.validate()

    def validate(self) -> None:
        for name in ("input_dim", "hidden_dim", "depth"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        d = self.exit_depths
        if not d:
            raise ConfigError("exit_depths must name at least one depth")
        if d[0] < 1 or any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError(f"exit_depths must be strictly increasing from >= 1, got {list(d)}")
        if d[-1] != self.depth:
            raise ConfigError(f"exit_depths must end at depth={self.depth}, got {list(d)}")

    @property
    def num_exits(self) -> int:
        return len(self.exit_depths)

    @property
    def capacity(self) -> int:
        return self.depth * self.hidden_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["exit_depths"] = list(self.exit_depths)
        return d


def high_importance_classes(num_classes: int) -> tuple:
    """Class indices that define the summary-class prototype (scores 4 and 5)."""
    return (3, 4) if num_classes == 5 else (num_classes - 1,)


def class_values(num_classes: int) -> np.ndarray:
    return np.arange(1, num_classes + 1, dtype=np.float64)


@dataclass
class ExitPrediction:
    head_index: int
    probs: Distribution
    confidence: float
    blocks_traversed: int


@dataclass
class ExitableModel:
    config: ModelConfig
    params: dict
    prototype: np.ndarray
    backbone_trained: bool = False
    heads_calibrated: bool = False
    prototype_final: bool = False

    # parameter groups ------------------------------------------------------

    def backbone_names(self) -> list:
        n = self.config.num_exits
        return [k for k in self.params if not k.startswith("head") or k.startswith(f"head{n}.")]

    def head_names(self, i: int) -> list:
        return [k for k in self.params if k.startswith(f"head{i}.")]

    def backbone_params(self) -> list:
        return [self.params[k] for k in self.backbone_names()]

    def checksum(self, names=None) -> str:
        names = list(self.params) if names is None else names
        return nx.parameters_checksum([self.params[k] for k in names])

    def is_finalized(self) -> bool:
        return self.prototype_final and (self.heads_calibrated or self.config.num_exits == 1)

    # differentiable path (training) ---------------------------------------

    def _block(self, h: Tensor, prefix: str) -> Tensor:
        p = self.params
        z = nx.layer_norm(h, p[prefix + "ln.g"], p[prefix + "ln.b"], LN_EPS)
        z = (nx.matmul(z, p[prefix + "W1"]) + p[prefix + "b1"]).tanh()
        return h + nx.matmul(z, p[prefix + "W2"]) + p[prefix + "b2"]

    def trunk(self, x, depth: int) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.config.input_dim:
            raise nx.DimensionError(f"input has {x.shape[-1]} features, model expects {self.config.input_dim}")
        h = nx.matmul(x, self.params["embed.W"]) + self.params["embed.b"]
        for j in range(1, depth + 1):
            h = self._block(h, f"block{j}.")
        return h

    def head_logits(self, h: Tensor, i: int) -> Tensor:
        p, pre = self.params, f"head{i}."
        z = self._block(h, pre)
        z = nx.layer_norm(z, p[pre + "out.ln.g"], p[pre + "out.ln.b"], LN_EPS)
        return nx.matmul(z, p[pre + "out.W"]) + p[pre + "out.b"]

    def forward_full(self, x, temperature: float = 1.0) -> Tensor:
        """Class probabilities from all blocks plus the final head."""
        n = self.config.num_exits
        return nx.softmax(self.head_logits(self.trunk(x, self.config.depth), n), temperature)

    # numpy inference path --------------------------------------------------

    def _arr(self, name: str) -> np.ndarray:
        return self.params[name].data

    def _np_block(self, h: np.ndarray, prefix: str) -> np.ndarray:
        a = self._arr
        mu = h.mean(axis=-1, keepdims=True)
        c = h - mu
        z = c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + LN_EPS) * a(prefix + "ln.g") + a(prefix + "ln.b")
        z = np.tanh(z @ a(prefix + "W1") + a(prefix + "b1"))
        return h + (z @ a(prefix + "W2") + a(prefix + "b2"))

    def np_embed(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.input_dim:
            raise nx.DimensionError(f"input has {x.shape[-1]} features, model expects {self.config.input_dim}")
        return x @ self._arr("embed.W") + self._arr("embed.b")

    def np_advance(self, h: np.ndarray, start: int, stop: int) -> np.ndarray:
        """Apply blocks start+1 .. stop to a hidden state that has passed ``start`` blocks."""
        for j in range(start + 1, stop + 1):
            h = self._np_block(h, f"block{j}.")
        return h

    def np_head_probs(self, h: np.ndarray, i: int) -> np.ndarray:
        a, pre = self._arr, f"head{i}."
        z = self._np_block(h, pre)
        mu = z.mean(axis=-1, keepdims=True)
        c = z - mu
        z = c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + LN_EPS) * a(pre + "out.ln.g") + a(pre + "out.ln.b")
        logits = z @ a(pre + "out.W") + a(pre + "out.b")
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)

    def predict_proba(self, X, i: int | None = None) -> np.ndarray:
        """Exit-``i`` probabilities (default: final exit) for one row or a batch."""
        i = self.config.num_exits if i is None else i
        depth = self.config.exit_depths[i - 1]
        return self.np_head_probs(self.np_advance(self.np_embed(X), 0, depth), i)

    def confidence(self, probs: np.ndarray) -> float:
        return nx.cosine_similarity(probs, self.prototype)

    def forward_at_exit(self, x, i: int) -> ExitPrediction:
        """Run the first d_i blocks and head i on a single feature vector."""
        n = self.config.num_exits
        if not 1 <= i <= n:
            raise IndexError(f"exit index must lie in [1, {n}], got {i}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise nx.DimensionError(f"forward_at_exit takes one feature vector, got shape {x.shape}")
        probs = self.predict_proba(x, i)
        return ExitPrediction(i, Distribution(probs), self.confidence(probs),
                              self.config.exit_depths[i - 1] + 1)


def init_model(config: ModelConfig) -> ExitableModel:
    """Seeded uniform(+-1/sqrt(fan_in)) weights; prototype starts at 1/K."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, k = config.hidden_dim, config.num_classes
    params: dict = {}

    def affine(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[name + "W"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True)
        params[name + "b"] = Tensor(rng.uniform(-bound, bound, fan_out), True)

    def block(prefix):
        params[prefix + "ln.g"] = Tensor(np.ones(h), True)
        params[prefix + "ln.b"] = Tensor(np.zeros(h), True)
        bound = 1.0 / np.sqrt(h)
        params[prefix + "W1"] = Tensor(rng.uniform(-bound, bound, (h, h)), True)
        params[prefix + "b1"] = Tensor(rng.uniform(-bound, bound, h), True)
        params[prefix + "W2"] = Tensor(rng.uniform(-bound, bound, (h, h)), True)
        params[prefix + "b2"] = Tensor(rng.uniform(-bound, bound, h), True)

    affine("embed.", config.input_dim, h)
    for j in range(1, config.depth + 1):
        block(f"block{j}.")
    for i in range(1, config.num_exits + 1):
        block(f"head{i}.")
        params[f"head{i}.out.ln.g"] = Tensor(np.ones(h), True)
        params[f"head{i}.out.ln.b"] = Tensor(np.zeros(h), True)
        affine(f"head{i}.out.", h, k)
    return ExitableModel(config, params, np.full(k, 1.0 / k))


def copy_model(model: ExitableModel) -> ExitableModel:
    params = {k: Tensor(v.data.copy(), True) for k, v in model.params.items()}
    return dataclasses.replace(model, params=params, prototype=model.prototype.copy())


# --- prototype -------------------------------------------------------------

def finalize_prototype(model: ExitableModel, X, y, stream: bool = False) -> ExitableModel:
    """Set the prototype to the normalized mean final-exit probability vector
    over high-importance samples.

    With ``stream=True`` the mean is an exponential moving average (decay 0.99)
    taken in sample order, starting from the current prototype.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise nx.DegenerateInputError("finalize_prototype needs at least one sample")
    keep = np.isin(y, high_importance_classes(model.config.num_classes))
    if not keep.any():
        raise nx.DegenerateInputError("no high-importance samples to build a prototype from")
    probs = model.predict_proba(np.asarray(X)[keep])
    if stream:
        q = model.prototype.copy()
        for p in probs:
            q = PROTOTYPE_DECAY * q + (1.0 - PROTOTYPE_DECAY) * p
    else:
        q = probs.mean(axis=0)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise nx.DegenerateInputError("prototype has zero norm")
    model.prototype = q / norm
    model.prototype_final = True
    return model


# --- exit-head calibration -------------------------------------------------

def calibrate_exit_heads(model: ExitableModel, X, y, epochs: int, learning_rate: float = 0.05,
                         batch_size: int = 32, seed: int = 0) -> ExitableModel:
    """Fit each intermediate head by cross-entropy on a frozen backbone.

    Hidden states at every exit depth are computed once without a graph, so no
    gradient can reach the backbone.
    """
    if not model.backbone_trained:
        raise LifecycleError("calibrate_exit_heads requires a trained backbone; train the model first")
    if epochs <= 0:
        return model
    X, y = np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)
    cfg = model.config
    rng = np.random.default_rng(seed)
    hidden = {}
    h = model.np_embed(X)
    done = 0
    for i, d in enumerate(cfg.exit_depths[:-1], start=1):
        h = model.np_advance(h, done, d)
        done = d
        hidden[i] = h
    orders = [rng.permutation(len(X)) for _ in range(epochs)]
    for i, feats in hidden.items():
        names = model.head_names(i)
        params = [model.params[k] for k in names]
        for order in orders:
            for lo in range(0, len(X), batch_size):
                idx = order[lo:lo + batch_size]
                loss = nx.cross_entropy(nx.softmax(model.head_logits(Tensor(feats[idx]), i)), y[idx])
                loss.backward()
                for p in params:
                    p.data -= learning_rate * p.grad
                    p.zero_grad()
    model.heads_calibrated = True
    return model


# --- artifact file ---------------------------------------------------------

def save_model(model: ExitableModel, path) -> None:
    """Write config, flags, every parameter and the prototype to one .npz file."""
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "backbone_trained": model.backbone_trained,
        "heads_calibrated": model.heads_calibrated,
        "prototype_final": model.prototype_final,
        "param_names": list(model.params),
    }
    arrays = {f"p{i}": t.data for i, t in enumerate(model.params.values())}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 prototype=model.prototype, **arrays)


def load_model(path) -> ExitableModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format_version") != MODEL_FORMAT_VERSION:
            raise ConfigError(f"unsupported model format_version {meta.get('format_version')!r}")
        params = {name: Tensor(z[f"p{i}"].copy(), True) for i, name in enumerate(meta["param_names"])}
        prototype = z["prototype"].copy()
    return ExitableModel(ModelConfig(**meta["config"]), params, prototype,
                         backbone_trained=meta["backbone_trained"],
                         heads_calibrated=meta["heads_calibrated"],
                         prototype_final=meta["prototype_final"])
