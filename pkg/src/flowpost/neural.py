"""Dense flow network ``v(x_t, t, y)`` with hand-written backprop, EMA and sampling.

Inputs are ``[x_t, y, t, sin(2 pi t), cos(2 pi t)]``; hidden layers use tanh
and the output layer is linear. The network either predicts the field
directly or predicts the endpoint ``D`` and reports ``(D - x_t) / (1 - t)``. Everything is float64 numpy so gradients can
be checked against finite differences.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import SigmaProfile
from .features import ComplexFeatureGrid
from .flowmath import T_SINGULAR_GUARD, PathSpec, sample_x0, standard_noise, training_pair
from .odesolve import SolverConfig, SolverRun, solve

__all__ = [
    "TIME_FEATURES",
    "Output",
    "FlowModel",
    "TrainConfig",
    "FlowDataset",
    "TrainingDivergedError",
    "init_model",
    "time_embedding",
    "forward",
    "loss_and_grad",
    "backward",
    "ema_update",
    "train",
    "enhance",
    "tile_starts",
    "grid_to_tiles",
    "tiles_to_grid",
    "grid_dataset",
    "enhance_grid",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

TIME_FEATURES = 3
CHECKPOINT_VERSION = 1
DEFAULT_TILE = 24


class Output(str, Enum):
    FIELD = "field"
    ENDPOINT = "endpoint"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite training loss {loss} at step {step}")


@dataclass
class FlowModel:
    """MLP weights, optional elementwise paths, and an EMA shadow copy.

    ``shortcut`` (shape ``(2, 4, d)`` or None) adds an elementwise linear
    path ``(phi(t) @ S[0]) * x_t + (phi(t) @ S[1]) * y`` with
    ``phi(t) = (1, t, sin 2 pi t, cos 2 pi t)``. It lets a narrow network
    remove per-entry prior noise when ``d`` exceeds the hidden width.

    ``gate`` (shape ``(H + 1, d)`` or None, last row a bias) adds
    ``(h @ G[:-1] + G[-1]) * y`` where ``h`` is the last hidden layer: a
    content-dependent per-entry gain on the observation.

    With ``output="endpoint"`` the same head predicts the clean endpoint and
    the field is ``(D - x_t) / (1 - t)``; the loss is then the field error
    weighted by ``(1 - t)^2``, i.e. the endpoint error.
    """

    layer_dims: list
    weights: list
    biases: list
    ema_weights: list
    ema_biases: list
    ema_decay: float = 0.999
    seed: int = 0
    shortcut: np.ndarray | None = None
    ema_shortcut: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    output: Output = Output.FIELD
    gate: np.ndarray | None = None
    ema_gate: np.ndarray | None = None

    def __post_init__(self):
        self.output = Output(self.output)
        d = self.data_dim
        if self.layer_dims[0] != 2 * d + TIME_FEATURES:
            raise ValueError(
                f"input width {self.layer_dims[0]} must equal 2*{d}+{TIME_FEATURES}"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} parameter shapes disagree with layer_dims")
        if self.shortcut is not None and self.shortcut.shape != (2, TIME_FEATURES + 1, d):
            raise ValueError(f"shortcut must have shape (2, {TIME_FEATURES + 1}, {d})")
        if (self.shortcut is None) != (self.ema_shortcut is None):
            raise ValueError("shortcut and its EMA shadow must both be present or absent")
        if self.gate is not None and self.gate.shape != (self.layer_dims[-2] + 1, d):
            raise ValueError(f"gate must have shape ({self.layer_dims[-2] + 1}, {d})")
        if (self.gate is None) != (self.ema_gate is None):
            raise ValueError("gate and its EMA shadow must both be present or absent")
        for a, b in zip(self.parameters(), self.ema_parameters()):
            if a.shape != b.shape:
                raise ValueError("EMA shadow shapes must mirror the weights")

    @property
    def data_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list:
        """Live parameters ``W0, b0, ..., [shortcut], [gate]`` (references, not copies)."""
        params = [p for wb in zip(self.weights, self.biases) for p in wb]
        return params + [p for p in (self.shortcut, self.gate) if p is not None]

    def ema_parameters(self) -> list:
        params = [p for wb in zip(self.ema_weights, self.ema_biases) for p in wb]
        return params + [p for p in (self.ema_shortcut, self.ema_gate) if p is not None]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "FlowModel":
        cp = lambda xs: [x.copy() for x in xs]  # noqa: E731
        opt = lambda a: None if a is None else a.copy()  # noqa: E731
        return FlowModel(list(self.layer_dims), cp(self.weights), cp(self.biases),
                         cp(self.ema_weights), cp(self.ema_biases), self.ema_decay,
                         self.seed, opt(self.shortcut), opt(self.ema_shortcut), dict(self.meta),
                         self.output, opt(self.gate), opt(self.ema_gate))


def init_model(data_dim: int, hidden: Sequence[int] = (128, 128, 128), seed: int = 0,
               ema_decay: float = 0.999, shortcut: bool = True,
               output: Output | str = Output.FIELD, gate: bool = False) -> FlowModel:
    """Gaussian init with variance 1/fan_in, zero biases and a zero output layer.

    The shortcut starts as ``y - x_t`` for a field head and ``y`` for an
    endpoint head (both exact when the observation is perfect); the gate
    starts at zero. The EMA shadow starts equal to the weights.
    """
    output = Output(output)
    rng = np.random.default_rng(seed)
    dims = [2 * data_dim + TIME_FEATURES, *hidden, data_dim]
    weights = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(dims[:-1], dims[1:])]
    weights[-1][:] = 0.0
    biases = [np.zeros(b) for b in dims[1:]]
    sc = None
    if shortcut:
        sc = np.zeros((2, TIME_FEATURES + 1, data_dim))
        if output is Output.FIELD:
            sc[0, 0] = -1.0
        sc[1, 0] = 1.0
    g = np.zeros((dims[-2] + 1, data_dim)) if gate else None
    opt = lambda a: None if a is None else a.copy()  # noqa: E731
    return FlowModel(dims, weights, biases, [w.copy() for w in weights],
                     [b.copy() for b in biases], ema_decay, seed, sc, opt(sc),
                     output=output, gate=g, ema_gate=opt(g))


def time_embedding(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    return np.stack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)], axis=1)


def _inputs(model: FlowModel, x_t, t, y):
    x_t = np.asarray(x_t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = x_t.ndim == 1
    x_t, y = np.atleast_2d(x_t), np.atleast_2d(y)
    if x_t.shape != y.shape or x_t.shape[1] != model.data_dim:
        raise ValueError(
            f"x_t {x_t.shape} and y {y.shape} must both be (batch, {model.data_dim})"
        )
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    temb = time_embedding(t_arr, x_t.shape[0])
    return np.concatenate([x_t, y, temb], axis=1), temb, x_t, y, single


def _run(weights, biases, h):
    acts = [h]
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        h = z if i == len(weights) - 1 else np.tanh(z)
        acts.append(h)
    return acts


def _gate_basis(temb):
    return np.concatenate([np.ones((temb.shape[0], 1)), temb], axis=1)


def _head(model: FlowModel, h, temb, xb, yb, use_ema: bool):
    if use_ema:
        ws, bs, sc, g = model.ema_weights, model.ema_biases, model.ema_shortcut, model.ema_gate
    else:
        ws, bs, sc, g = model.weights, model.biases, model.shortcut, model.gate
    acts = _run(ws, bs, h)
    out = acts[-1]
    if sc is not None:
        phi = _gate_basis(temb)
        out = out + (phi @ sc[0]) * xb + (phi @ sc[1]) * yb
    if g is not None:
        out = out + (acts[-2] @ g[:-1] + g[-1]) * yb
    return out, acts


def _gap(temb):
    # 1 - t per row, kept away from zero
    return np.maximum(1.0 - temb[:, :1], T_SINGULAR_GUARD)


def forward(model: FlowModel, x_t, t, y, use_ema: bool = False) -> np.ndarray:
    """Predicted field for a batch ``(B, d)`` (or a single ``(d,)`` vector)."""
    h, temb, xb, yb, single = _inputs(model, x_t, t, y)
    out, _ = _head(model, h, temb, xb, yb, use_ema)
    if model.output is Output.ENDPOINT:
        out = (out - xb) / _gap(temb)
    return out[0] if single else out


def loss_and_grad(model: FlowModel, x_t, t, y, target):
    """Training loss and its exact gradient w.r.t. the live parameters.

    The loss is the mean squared field error, weighted by ``(1 - t)^2`` for
    an endpoint head. Returns ``(loss, grads)`` with ``grads`` ordered like
    :meth:`FlowModel.parameters`.
    """
    h, temb, xb, yb, _ = _inputs(model, x_t, t, y)
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    out, acts = _head(model, h, temb, xb, yb, use_ema=False)
    if out.shape != target.shape:
        raise ValueError(f"target shape {target.shape} != output shape {out.shape}")
    if model.output is Output.ENDPOINT:
        target = xb + (1.0 - temb[:, :1]) * target
    diff = out - target
    loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size
    grads = [None] * (2 * model.n_layers)
    if model.shortcut is not None:
        phi = _gate_basis(temb)
        grads.append(np.stack([phi.T @ (delta * xb), phi.T @ (delta * yb)]))
    gated = None
    if model.gate is not None:
        gated = delta * yb
        grads.append(np.vstack([acts[-2].T @ gated, gated.sum(axis=0)]))
    for i in range(model.n_layers - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            back = delta @ model.weights[i].T
            if gated is not None and i == model.n_layers - 1:
                back = back + gated @ model.gate[:-1].T
            delta = back * (1.0 - acts[i] ** 2)
    return loss, grads


def backward(model: FlowModel, batch):
    """Gradient of the flow-matching loss on a :class:`FlowSample` batch."""
    return loss_and_grad(model, batch.x_t, batch.t, batch.y, batch.target_u)[1]


def ema_update(model: FlowModel) -> None:
    d = model.ema_decay
    # incremental form of d * shadow + (1 - d) * live; leaves equal arrays untouched
    for shadow, live in zip(model.ema_parameters(), model.parameters()):
        shadow += (1.0 - d) * (live - shadow)


@dataclass(frozen=True)
class TrainConfig:
    path: PathSpec
    learning_rate: float = 0.05
    iterations: int = 1000
    batch_size: int = 128
    seed: int = 0
    eval_every: int = 100
    eval_size: int = 512

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class FlowDataset:
    """Paired clean targets ``x1`` and observations ``y``, both ``(N, d)``.

    ``sigma_scale`` optionally overrides the path's noise scale per entry
    (used for per-frequency profiles on tiled spectra).
    """

    x1: np.ndarray
    y: np.ndarray
    sigma_scale: np.ndarray | None = None

    def __post_init__(self):
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=np.float64))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        if self.x1.shape != self.y.shape or self.x1.shape[0] == 0:
            raise ValueError("dataset needs matching, non-empty x1 and y arrays")
        if self.sigma_scale is not None:
            self.sigma_scale = np.broadcast_to(np.asarray(self.sigma_scale, dtype=np.float64),
                                               self.x1.shape)

    def __len__(self):
        return self.x1.shape[0]


def _draw(dataset: FlowDataset, path: PathSpec, rng, n: int):
    idx = rng.integers(len(dataset), size=n)
    t = rng.uniform(0.0, 1.0, size=n)
    eps = rng.standard_normal((n, dataset.x1.shape[1]))
    sigma = path.sigma if dataset.sigma_scale is None else dataset.sigma_scale[idx]
    return training_pair(path, dataset.x1[idx], dataset.y[idx], eps, t, sigma=sigma)


def train(model: FlowModel, dataset: FlowDataset, cfg: TrainConfig, history: list | None = None,
          weight_log: list | None = None) -> FlowModel:
    """Plain minibatch gradient descent on the flow-matching loss, in place.

    After every step the EMA shadow is updated. ``history`` (if given)
    receives ``(step, loss)`` pairs for a fixed held-out batch evaluated with
    the live weights; ``weight_log`` receives parameter snapshots after each
    step (for replay checks).

    Raises:
        TrainingDivergedError: the minibatch loss became non-finite.
    """
    if dataset.x1.shape[1] != model.data_dim:
        raise ValueError(f"dataset dim {dataset.x1.shape[1]} != model dim {model.data_dim}")
    rng = np.random.default_rng(cfg.seed)
    held = _draw(dataset, cfg.path, np.random.default_rng([cfg.seed, 1]), cfg.eval_size)

    def held_loss():
        return loss_and_grad(model, held.x_t, held.t, held.y, held.target_u)[0]

    if history is not None:
        history.append((0, held_loss()))
    params = model.parameters()
    for step in range(1, cfg.iterations + 1):
        batch = _draw(dataset, cfg.path, rng, cfg.batch_size)
        loss, grads = loss_and_grad(model, batch.x_t, batch.t, batch.y, batch.target_u)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        for p, g in zip(params, grads):
            p -= cfg.learning_rate * g
        ema_update(model)
        if weight_log is not None:
            weight_log.append([p.copy() for p in params])
        if history is not None and (step % cfg.eval_every == 0 or step == cfg.iterations):
            history.append((step, held_loss()))
    model.meta["trained_steps"] = model.meta.get("trained_steps", 0) + cfg.iterations
    return model


def enhance(model: FlowModel, y, sigma, solver: SolverConfig = SolverConfig(), seed: int = 0,
            use_ema: bool = True) -> tuple[np.ndarray, SolverRun]:
    """Sample ``x0 = y + sigma * eps`` (seeded) and integrate the learned field to t=1."""
    y = np.asarray(y, dtype=np.float64)
    eps = np.random.default_rng(seed).standard_normal(y.shape)
    x0 = sample_x0(y, sigma, eps)
    run = solve(lambda x, t: forward(model, x, t, y, use_ema=use_ema), x0, solver)
    return run.endpoint, run


def tile_starts(n: int, tile: int) -> list:
    """Non-overlapping starts plus one end-aligned start when ``n`` is not a multiple."""
    if n < tile:
        raise ValueError(f"axis of length {n} is shorter than the tile size {tile}")
    starts = list(range(0, n - tile + 1, tile))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def grid_to_tiles(grid: np.ndarray, tile: int = DEFAULT_TILE) -> np.ndarray:
    """Complex ``F x T`` grid to ``(n_tiles, 2 * tile**2)`` real rows (real parts, then imaginary)."""
    grid = np.asarray(grid)
    rows = []
    for f0 in tile_starts(grid.shape[0], tile):
        for t0 in tile_starts(grid.shape[1], tile):
            patch = grid[f0 : f0 + tile, t0 : t0 + tile]
            if np.iscomplexobj(grid):
                rows.append(np.concatenate([patch.real.ravel(), patch.imag.ravel()]))
            else:
                rows.append(np.concatenate([patch.ravel(), patch.ravel()]))
    return np.array(rows)


def tiles_to_grid(tiles: np.ndarray, shape, tile: int = DEFAULT_TILE) -> np.ndarray:
    """Inverse of :func:`grid_to_tiles`; overlapping cells keep the earlier tile's value."""
    out = np.zeros(shape, dtype=np.complex128)
    filled = np.zeros(shape, dtype=bool)
    n = tile * tile
    i = 0
    for f0 in tile_starts(shape[0], tile):
        for t0 in tile_starts(shape[1], tile):
            patch = (tiles[i, :n] + 1j * tiles[i, n:]).reshape(tile, tile)
            sl = (slice(f0, f0 + tile), slice(t0, t0 + tile))
            fresh = ~filled[sl]
            out[sl][fresh] = patch[fresh]
            filled[sl] = True
            i += 1
    return out


def _grid_values(g):
    return g.values if isinstance(g, ComplexFeatureGrid) else np.asarray(g)


def grid_dataset(pairs, sigma: SigmaProfile, tile: int = DEFAULT_TILE) -> FlowDataset:
    """Tile ``(clean, degraded)`` feature grids into a :class:`FlowDataset`."""
    x1, ys, scales = [], [], []
    for clean, degraded in pairs:
        c, d = _grid_values(clean), _grid_values(degraded)
        x1.append(grid_to_tiles(c, tile))
        ys.append(grid_to_tiles(d, tile))
        smap = np.broadcast_to(sigma.broadcast_to(c.shape), c.shape).astype(np.float64)
        scales.append(grid_to_tiles(smap, tile))
    return FlowDataset(np.concatenate(x1), np.concatenate(ys), np.concatenate(scales))


def enhance_grid(model: FlowModel, y_grid, sigma: SigmaProfile, solver: SolverConfig = SolverConfig(),
                 seed: int = 0, tile: int = DEFAULT_TILE, use_ema: bool = True):
    """Enhance a full complex feature grid tile by tile.

    The prior sample is drawn once on the whole grid; at every field
    evaluation the current state is cut into tiles, passed through the model
    and reassembled.
    """
    y = _grid_values(y_grid).astype(np.complex128)
    if model.data_dim != 2 * tile * tile:
        raise ValueError(f"model data dim {model.data_dim} does not match {tile}x{tile} tiles")
    eps = standard_noise(np.random.default_rng(seed), y)
    x0 = sample_x0(y, sigma, eps)
    y_tiles = grid_to_tiles(y, tile)

    def field(x, t):
        return tiles_to_grid(forward(model, grid_to_tiles(x, tile), t, y_tiles, use_ema=use_ema),
                             y.shape, tile)

    run = solve(field, x0, solver)
    if isinstance(y_grid, ComplexFeatureGrid):
        return y_grid.with_values(run.endpoint), run
    return run.endpoint, run


def save_checkpoint(path, model: FlowModel) -> None:
    """Versioned ``.npz``-style archive with fixed zip timestamps (byte-stable)."""
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "layer_dims": np.array(model.layer_dims, dtype=np.int64),
        "ema_decay": np.array(model.ema_decay),
        "seed": np.array(model.seed, dtype=np.int64),
        "output": np.array(model.output.value),
    }
    for i in range(model.n_layers):
        arrays[f"W{i}"] = model.weights[i]
        arrays[f"b{i}"] = model.biases[i]
        arrays[f"ema_W{i}"] = model.ema_weights[i]
        arrays[f"ema_b{i}"] = model.ema_biases[i]
    for name in ("shortcut", "gate"):
        if getattr(model, name) is not None:
            arrays[name] = getattr(model, name)
            arrays[f"ema_{name}"] = getattr(model, f"ema_{name}")
    for k, v in sorted(model.meta.items()):
        arrays[f"meta_{k}"] = np.array(v)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> FlowModel:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dims = [int(d) for d in data["layer_dims"]]
        n = len(dims) - 1
        get = lambda key: [data[f"{key}{i}"].copy() for i in range(n)]  # noqa: E731
        meta = {}
        for k in data.files:
            if k.startswith("meta_"):
                v = data[k]
                meta[k[5:]] = v.item() if v.ndim == 0 else v.tolist()
        opt = lambda key: data[key].copy() if key in data.files else None  # noqa: E731
        return FlowModel(dims, get("W"), get("b"), get("ema_W"), get("ema_b"),
                         float(data["ema_decay"]), int(data["seed"]),
                         opt("shortcut"), opt("ema_shortcut"), meta,
                         str(data["output"]) if "output" in data.files else Output.FIELD,
                         opt("gate"), opt("ema_gate"))
