"""Toy training harness: full precision vs vanilla FP4 vs mean-residual FP4.

The student is a stack of bias-free ``H x H`` linear layers with a
nonlinearity and optional residual connections, followed by a linear read-out.
It is trained with plain SGD on mean squared error against a fixed random
teacher. In the FP4 modes every GeMM of the step (forward, grad-input and
grad-weight) runs on quantized operands; gradients flow through the
quantizers straight-through.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import averis
from .decomposition import r_ratio
from .extreme_stats import NONLINEARITIES
from .linalg import ContractError
from .quantizer import QuantConfig
from .rng import make_rng

FINAL_WINDOW = 0.05

MODES = ("fullprec", "fp4_vanilla", "fp4_averis")
TASKS = ("teacher_regression_biased", "teacher_regression_centered")
TASK_ALIASES = {"biased": TASKS[0], "centered": TASKS[1]}

_DERIVS = {
    "relu": lambda y: (y > 0).astype(np.float64),
    "tanh": lambda y: 1.0 - np.tanh(y) ** 2,
    "identity": lambda y: np.ones_like(y),
}
_ACTS = {**NONLINEARITIES, "identity": lambda z: z}


@dataclass
class ToyModel:
    weights: list
    nonlinearity: str = "relu"
    residual: bool = True

    def __post_init__(self):
        if self.nonlinearity not in _DERIVS:
            raise ContractError(f"nonlinearity must be one of {sorted(_DERIVS)}")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ContractError(f"layer shapes do not chain: {a.shape} -> {b.shape}")
        if self.residual:
            for w in self.weights[:-1]:
                if w.shape[0] != w.shape[1]:
                    raise ContractError("residual layers must be square")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "ToyModel":
        return ToyModel([w.copy() for w in self.weights], self.nonlinearity, self.residual)


def init_model(hidden: int = 128, depth: int = 4, out_dim: int | None = None, nonlinearity: str = "relu",
               residual: bool = True, seed: int = 0) -> ToyModel:
    """He-initialized (variance 2 / fan_in) student."""
    rng = make_rng(seed, 0x30)
    out_dim = hidden if out_dim is None else out_dim
    shapes = [(hidden, hidden)] * (depth - 1) + [(hidden, out_dim)]
    weights = [rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b)) for a, b in shapes]
    return ToyModel(weights, nonlinearity, residual)


@dataclass
class TrainConfig:
    mode: str = "fp4_averis"
    task: str = "teacher_regression_biased"
    steps: int = 2000
    batch: int = 8
    seq: int = 64
    hidden: int = 128
    depth: int = 4
    lr: float = 0.05
    seed: int = 0
    mean_ratio: float = 8.0
    quant: QuantConfig = field(default_factory=QuantConfig)
    quantize_grads: bool = True
    log_every: int = 100
    nonlinearity: str = "relu"
    residual: bool = True

    def __post_init__(self):
        self.task = TASK_ALIASES.get(self.task, self.task)
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if not self.lr > 0:
            raise ContractError("lr must be > 0")

    @property
    def tokens(self) -> int:
        return self.batch * self.seq

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokens"] = self.tokens
        return d


@dataclass
class RunLog:
    config: dict
    losses: list
    layer_r: list  # (step, [R per layer input]) checkpoints
    final_loss: float  # mean over the last FINAL_WINDOW fraction of steps
    diverged: bool
    wall_time: float
    last_loss: float = float("nan")

    def summary(self) -> dict:
        return {
            "mode": self.config["mode"],
            "task": self.config["task"],
            "seed": self.config["seed"],
            "steps_run": len(self.losses),
            "final_loss": self.final_loss,
            "last_loss": self.last_loss,
            "diverged": self.diverged,
            "wall_time": self.wall_time,
            "layer_r": self.layer_r,
        }


# ---------------------------------------------------------------- task


class TeacherTask:
    """Token batches ``X = 1 mu^T + sigma Z`` and targets from a fixed teacher.

    ``mean_ratio`` is the per-coordinate RMS of ``mu`` over ``sigma``; inputs
    are scaled so the overall per-entry RMS is 1 for any ratio. The teacher is
    a one-hidden-layer ReLU net whose outputs are rescaled to unit RMS on a
    reference batch.
    """

    def __init__(self, dim: int, tokens: int, mean_ratio: float, seed: int = 0, out_dim: int | None = None):
        rng = make_rng(seed, 0x31)
        out_dim = dim if out_dim is None else out_dim
        self.dim, self.tokens, self.seed = dim, tokens, seed
        self.sigma = 1.0 / math.sqrt(1.0 + mean_ratio**2)
        direction = rng.standard_normal(dim)
        self.mu = mean_ratio * self.sigma * math.sqrt(dim) * direction / np.linalg.norm(direction)
        self.a = rng.normal(0.0, math.sqrt(2.0 / dim), size=(dim, dim))
        self.b = rng.normal(0.0, math.sqrt(1.0 / dim), size=(dim, out_dim))
        ref = self._raw(self._inputs(make_rng(seed, 0x32)))
        self.scale = 1.0 / math.sqrt(float(np.mean(ref * ref)))

    def _inputs(self, rng) -> np.ndarray:
        return self.mu + self.sigma * rng.standard_normal((self.tokens, self.dim))

    def _raw(self, x):
        return np.maximum(x @ self.a, 0.0) @ self.b

    def batch(self, step: int):
        x = self._inputs(make_rng(self.seed, 0x33, step))
        return x, self.scale * self._raw(x)


def make_task(cfg: TrainConfig, seed: int | None = None) -> TeacherTask:
    ratio = cfg.mean_ratio if cfg.task == "teacher_regression_biased" else 0.0
    return TeacherTask(cfg.hidden, cfg.tokens, ratio, cfg.seed if seed is None else seed)


# ---------------------------------------------------------------- model passes


def _gemm_forward(mode, x, w, cfg, stream):
    """Return the layer output and any quantized operands worth keeping for backward."""
    if mode == "fullprec":
        return x @ w, None
    if mode == "fp4_vanilla":
        return averis.forward_vanilla(x, w, cfg, stream, return_operands=True)
    return averis.forward(x, w, cfg, stream, return_operands=True)


def forward_pass(model: ToyModel, x, mode="fullprec", cfg: QuantConfig | None = None, stream=()):
    """Return the output and the per-layer (input, pre-activation, operands) cache."""
    cfg = cfg or QuantConfig()
    act = _ACTS[model.nonlinearity]
    h = x
    cache = []
    for k, w in enumerate(model.weights):
        y, ops = _gemm_forward(mode, h, w, cfg, (*stream, k))
        cache.append((h, y, ops))
        if k == model.depth - 1:
            h = y
        elif model.residual:
            h = h + act(y)
        else:
            h = act(y)
    return h, cache


def layer_inputs(model: ToyModel, x) -> list:
    _, cache = forward_pass(model, x)
    return [h for h, _, _ in cache]


def track_layer_means(model: ToyModel, batch) -> list:
    """R ratio of each layer's input activations (full precision)."""
    return [r_ratio(h) for h in layer_inputs(model, batch)]


def train(model: ToyModel, cfg: TrainConfig, task: TeacherTask | None = None) -> RunLog:
    """SGD on MSE. ``model`` is updated in place.

    A non-finite loss stops the run and marks the log as diverged.
    """
    task = task or make_task(cfg)
    qcfg = cfg.quant.with_(seed=cfg.seed)
    gcfg = qcfg if cfg.quantize_grads else qcfg.with_(format="identity")
    mode = cfg.mode
    deriv = _DERIVS[model.nonlinearity]
    last = model.depth - 1

    losses, layer_r = [], []
    diverged = False
    t0 = time.perf_counter()
    probe_x, _ = task.batch(-1)

    for step in range(cfg.steps):
        x, target = task.batch(step)
        with np.errstate(over="ignore", invalid="ignore"):
            out, cache = forward_pass(model, x, mode, qcfg, (step,))
            err = out - target
            loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            diverged = True
            break
        losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            layer_r.append((step, track_layer_means(model, probe_x)))

        g_h = 2.0 * err / err.size  # gradient w.r.t. the current layer's output
        grads = [None] * model.depth
        for k in range(last, -1, -1):
            h, y, ops = cache[k]
            dy = g_h if k == last else g_h * deriv(y)
            w = model.weights[k]
            if mode == "fullprec":
                g_in, grads[k] = dy @ w.T, h.T @ dy
            else:
                if mode == "fp4_vanilla":
                    g = averis.backward_vanilla(h, w, dy, qcfg, (step, k), grad_cfg=gcfg, operands=ops)
                else:
                    g = averis.backward(h, w, dy, qcfg, (step, k), grad_cfg=gcfg, operands=ops)
                g_in, grads[k] = g.grad_input, g.grad_weight
            if k < last and model.residual:
                g_h = g_h + g_in
            else:
                g_h = g_in

        with np.errstate(over="ignore", invalid="ignore"):
            for w, g in zip(model.weights, grads):
                w -= cfg.lr * g
        if not all(np.all(np.isfinite(w)) for w in model.weights):
            diverged = True
            break

    wall = time.perf_counter() - t0
    return RunLog(cfg.to_dict(), losses, layer_r, final_loss(losses, diverged), diverged, wall,
                  losses[-1] if losses else float("nan"))


def final_loss(losses, diverged: bool = False) -> float:
    """Mean loss over the closing window of a run.

    A single step's loss is one minibatch draw and, under stochastic rounding,
    one noise draw; averaging the last 5% of steps keeps run comparisons from
    hinging on that. Diverged or empty runs report ``inf``.
    """
    if diverged or not losses:
        return float("inf")
    n = max(1, int(round(FINAL_WINDOW * len(losses))))
    return float(np.mean(losses[-n:]))
