"""
Training: binary-aware iteration, Adam, warmup + cosine schedule, scheduler
reboots, MSE loss and NMSE evaluation.
"""

import json
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _fused
from .binarize import GateVariant, ste_weight_grad

NMSE_FLOOR_DB = -120.0


class NonFiniteLossError(FloatingPointError):
    """A training step produced a NaN or infinite loss."""


class TrainingDivergedError(RuntimeError):
    """Non-finite losses kept occurring after every allowed reboot."""


@dataclass
class TrainConfig:
    epochs: int = 200
    warmup: int = 30
    lr_start: float = 1e-2
    lr_end: float = 5e-5
    batch: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    gate: str = GateVariant.INDICATOR.value
    reboot_window: float = 0.1   # fraction of epochs
    reboot_min_gain: float = 0.01
    max_reboots: int = 2
    physical_nmse: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0 <= self.warmup < self.epochs:
            raise ValueError(f"warmup ({self.warmup}) must be smaller than epochs ({self.epochs})")
        if not 0 < self.lr_end < self.lr_start:
            raise ValueError("need 0 < lr_end < lr_start")
        if self.batch < 1:
            raise ValueError("batch must be positive")
        GateVariant(self.gate)

    @property
    def gate_variant(self):
        return GateVariant(self.gate)

    @property
    def window(self):
        return max(2, int(round(self.reboot_window * self.epochs)))

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale settings: 2500 epochs, batch 1000."""
        return cls(**{"epochs": 2500, "batch": 1000, **overrides})


def lr_at(i, cfg):
    """Learning rate for epoch index ``i``: linear warmup then cosine decay."""
    n, nw = cfg.epochs, cfg.warmup
    if not 0 <= i < n:
        raise IndexError(f"epoch index {i} outside [0, {n})")
    if i < nw:
        return cfg.lr_start * (i + 1) / nw
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1 + math.cos(math.pi * (i - nw) / (n - nw)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-7):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, lr):
        """``params``: iterable of (key, layer, name); updates layer.params in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for key, layer, name in params:
            p = layer.params[name]
            g = np.ascontiguousarray(layer.grads[name], dtype=p.dtype)
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            p = np.ascontiguousarray(p)
            _fused.adam_update(p, g, self.m[key], self.v[key], lr / c1, b1, b2, c2, self.eps)
            layer.params[name] = p

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load(self, t, m, v):
        self.t = int(t)
        self.m = {k: np.array(a) for k, a in m.items()}
        self.v = {k: np.array(a) for k, a in v.items()}


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------

def mse(y, target):
    d = np.asarray(y, dtype=np.float64) - target
    return float(np.mean(d * d))


def nmse(h, h_hat):
    """Mean over samples of ||h - h_hat||^2 / ||h||^2; samples with zero norm are skipped."""
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {h_hat.shape}")
    if h.ndim == 1:
        h, h_hat = h[None], h_hat[None]
    axes = tuple(range(1, h.ndim))
    power = (h * h).sum(axis=axes)
    err = ((h - h_hat) ** 2).sum(axis=axes)
    keep = power > 0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} zero-norm target(s) excluded from NMSE", RuntimeWarning)
    if not keep.any():
        raise ValueError("all targets have zero norm")
    return float(np.mean(err[keep] / power[keep]))


def to_db(value):
    if value <= 10 ** (NMSE_FLOOR_DB / 10):
        return NMSE_FLOOR_DB
    return 10 * math.log10(value)


def nmse_db(h, h_hat):
    return to_db(nmse(h, h_hat))


def predict(net, data, batch=256):
    outs = [net.reconstruct(data[i:i + batch]) for i in range(0, len(data), batch)]
    return np.concatenate(outs, axis=0)


def evaluate(net, dataset, physical=True, batch=256):
    """(normalized MSE, NMSE, NMSE dB) of ``net`` on a ChannelDataset."""
    out = predict(net, dataset.data, batch)
    loss = mse(out, dataset.data)
    if physical:
        value = nmse(dataset.physical(), dataset.physical(out))
    else:
        value = nmse(dataset.data, out)
    return loss, value, to_db(value)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0             # next epoch to run
    sched_index: int = 0       # scheduler position (reset by reboots)
    phase_start: int = 0       # first epoch of the current scheduler phase
    step: int = 0
    reboots: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    best_state: dict = None
    history: list = field(default_factory=list)
    adam: Adam = None


def train_step(net, batch, state, cfg, lr):
    """One iteration on a normalized batch; returns the batch loss.

    Order of operations for the binary encoder layer: keep the real-valued
    weights, swap in alpha * sign(W), run forward and backward, put the
    real-valued weights back, convert the gradient with the straight-through
    rule, then let Adam update every parameter.
    """
    if state.adam is None:
        state.adam = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    fc = net.binary_layer()
    alpha = None
    if fc is not None:
        _, alpha = fc.assign_binary()
    try:
        out = net.forward(batch, train=True)
        diff = out.astype(np.float64) - batch
        loss = float(np.mean(diff * diff))
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"loss became {loss} at step {state.step}")
        grad = (2.0 / diff.size) * diff
        net.backward(grad.astype(out.dtype))
    finally:
        if fc is not None and fc.binary_assigned:
            fc.restore_master()
    if fc is not None:
        fc.grads["W"] = ste_weight_grad(fc.grads["W"], fc.params["W"], alpha, cfg.gate_variant)
    state.adam.step(net.parameters(), lr)
    state.step += 1
    return loss


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

def stagnated(values, window, min_gain):
    """True when the best of the last ``window`` values improves on the best
    before them by less than ``min_gain`` (relative)."""
    if len(values) <= window:
        return False
    before = min(values[:-window])
    recent = min(values[-window:])
    return recent > before * (1 - min_gain)


def _epoch_order(cfg, epoch, n):
    return np.random.default_rng([cfg.seed, epoch]).permutation(n)


def fit(net, train, val, cfg, state=None, log=None, val_fn=None):
    """Train ``net`` in place and return (best network, state).

    ``train``/``val`` are ChannelDatasets. ``log`` receives one dict per epoch.
    ``val_fn(net) -> (val_mse, val_nmse_db)`` replaces the validation pass
    (used to inject synthetic loss curves).
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    state = state or TrainState()
    if state.best_state is None:
        state.best_state = net.state_dict()
    if val_fn is None:
        def val_fn(model):
            loss, _, db = evaluate(model, val, physical=cfg.physical_nmse)
            return loss, db

    data = train.data
    n = len(data)
    while state.epoch < cfg.epochs:
        epoch = state.epoch
        lr = lr_at(min(state.sched_index, cfg.epochs - 1), cfg)
        order = _epoch_order(cfg, epoch, n)
        losses = []
        try:
            for i in range(0, n, cfg.batch):
                losses.append(train_step(net, data[order[i:i + cfg.batch]], state, cfg, lr))
        except NonFiniteLossError:
            if state.reboots >= cfg.max_reboots:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} after {state.reboots} reboots"
                ) from None
            net.load_state_dict(state.best_state)
            state.adam = None
            state.reboots += 1
            state.sched_index = cfg.warmup
            state.phase_start = epoch + 1
            record = {"epoch": epoch, "lr": lr, "train_mse": None, "val_mse": None,
                      "val_nmse_db": None, "reboots": state.reboots}
            state.history.append(record)
            if log:
                log(record)
            state.epoch += 1
            continue

        val_mse, val_db = val_fn(net)
        if val_mse < state.best_val:
            state.best_val = val_mse
            state.best_epoch = epoch
            state.best_state = net.state_dict()
        record = {
            "epoch": epoch, "lr": lr, "train_mse": float(np.mean(losses)),
            "val_mse": float(val_mse), "val_nmse_db": float(val_db), "reboots": state.reboots,
        }
        state.history.append(record)

        phase_vals = [r["val_mse"] for r in state.history[state.phase_start:]
                      if r["val_mse"] is not None]
        in_cosine = state.sched_index >= cfg.warmup
        if (in_cosine and state.reboots < cfg.max_reboots
                and stagnated(phase_vals, cfg.window, cfg.reboot_min_gain)):
            state.reboots += 1
            state.sched_index = cfg.warmup
            state.phase_start = epoch + 1
            record["reboots"] = state.reboots
        else:
            state.sched_index += 1
        if log:
            log(record)
        state.epoch += 1

    best = net.copy()
    best.load_state_dict(state.best_state)
    return best, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"BCSICKPT"
CKPT_VERSION = 1


def save_checkpoint(path, net, state, cfg, norms=(0.0, 1.0)):
    """Write current and best weights, optimizer moments and loop state.

    ``norms`` are the (min, max) bounds of the training data, kept so a
    deployed model can be labelled with them.
    """
    from . import records

    meta = {
        "norms": [float(np.float32(norms[0])), float(np.float32(norms[1]))],
        "spec": net.spec.to_dict(),
        "config": asdict(cfg),
        "epoch": state.epoch, "sched_index": state.sched_index,
        "phase_start": state.phase_start, "step": state.step, "reboots": state.reboots,
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
        "best_epoch": state.best_epoch, "history": state.history,
        "adam_t": state.adam.t if state.adam else 0,
    }
    arrays = {}
    for k, v in net.state_dict().items():
        arrays[f"current/{k}"] = v
    for k, v in (state.best_state or net.state_dict()).items():
        arrays[f"best/{k}"] = v
    if state.adam:
        for k, v in state.adam.m.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in state.adam.v.items():
            arrays[f"adam_v/{k}"] = v
    records.write_archive(path, CKPT_MAGIC, CKPT_VERSION, meta, arrays)


@dataclass
class Checkpoint:
    net: object
    state: TrainState
    config: TrainConfig
    norms: tuple


def load_checkpoint(path, which="best"):
    """Read a checkpoint; ``which`` ("best" or "current") selects the weights loaded into the network."""
    if which not in ("best", "current"):
        raise ValueError(f"which must be 'best' or 'current', got {which!r}")
    from . import records
    from .models import ModelSpec, build

    meta, arrays = records.read_archive(path, CKPT_MAGIC, CKPT_VERSION)
    spec = ModelSpec(**meta["spec"])
    cfg = TrainConfig(**meta["config"])
    groups = {}
    for key, value in arrays.items():
        group, name = key.split("/", 1)
        groups.setdefault(group, {})[name] = value
    net = build(spec, seed=cfg.seed)
    net.load_state_dict(groups[which])
    state = TrainState(
        epoch=meta["epoch"], sched_index=meta["sched_index"], phase_start=meta["phase_start"],
        step=meta["step"], reboots=meta["reboots"],
        best_val=math.inf if meta["best_val"] is None else meta["best_val"],
        best_epoch=meta["best_epoch"], best_state=groups["best"], history=meta["history"],
    )
    if meta["adam_t"]:
        state.adam = Adam(cfg.beta1, cfg.beta2, cfg.eps)
        state.adam.load(meta["adam_t"], groups.get("adam_m", {}), groups.get("adam_v", {}))
    return Checkpoint(net, state, cfg, tuple(meta["norms"]))


def history_jsonl(history):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in history)
