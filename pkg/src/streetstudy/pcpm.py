"""Collision prediction head over detector query embeddings.

The module runs single-head scaled dot-product self-attention over the
non-noise decoder query embeddings (no residual, no normalization), mean-
pools the attended rows, optionally concatenates a projected global-average
pooled backbone feature and the normalized coordinates, and regresses a
scalar collision count through a small MLP with rectified-linear hidden
layers. Four ablation variants are supported:

- backbone_only:    MLP([visual; coords])
- linear:           per-row linear map instead of attention, MLP([pooled; coords])
- self_att:         attention, MLP([pooled; coords])
- self_att_visual:  attention, MLP([pooled; visual; coords])

All gradients are derived by hand (reverse mode) and verified against
central finite differences in the test suite. Forward and backward are
pure functions; training is plain mini-batch SGD with a one-step learning
rate decay, deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError

VARIANTS = ("backbone_only", "linear", "self_att", "self_att_visual")


@dataclass
class EmbeddingSet:
    """Per-image model inputs: queries, noise mask, backbone map, coords, label."""

    queries: np.ndarray       # (N, d)
    noise_mask: np.ndarray    # (N,) bool; True = denoising query, excluded
    backbone_map: np.ndarray  # (Hf, Wf, Cb)
    coords: np.ndarray        # (2,) in [0, 1]^2
    label: float

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=float)
        self.noise_mask = np.asarray(self.noise_mask, dtype=bool)
        self.backbone_map = np.asarray(self.backbone_map, dtype=float)
        self.coords = np.asarray(self.coords, dtype=float)
        if self.queries.ndim != 2 or self.queries.shape[0] < 1:
            raise ValidationError("queries must be a non-empty (N, d) matrix")
        if self.noise_mask.shape != (self.queries.shape[0],):
            raise ValidationError("noise_mask length must match query count")
        if not np.any(~self.noise_mask):
            raise ValidationError("at least one query must be non-noise")
        if self.backbone_map.ndim != 3:
            raise ValidationError("backbone_map must be (Hf, Wf, Cb)")
        if self.coords.shape != (2,):
            raise ValidationError("coords must be two values")
        for name, arr in (("queries", self.queries), ("backbone_map", self.backbone_map),
                          ("coords", self.coords)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite values in {name}")
        if not math.isfinite(self.label) or self.label < 0:
            raise ValidationError(f"label must be a finite non-negative number, got {self.label}")
        if np.any(self.coords < -1e-9) or np.any(self.coords > 1 + 1e-9):
            raise ValidationError(f"coords {self.coords} outside [0, 1]^2")


@dataclass
class PCPMConfig:
    variant: str = "self_att_visual"
    d_model: int = 16
    heads: int = 1
    mlp_hidden: tuple[int, ...] = (32, 16)
    include_coords: bool = True
    backbone_channels: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_model <= 0:
            raise ValidationError("d_model must be positive")
        if self.heads != 1:
            raise ValidationError("only single-head attention is supported")
        if not self.mlp_hidden:
            raise ValidationError("mlp_hidden must be non-empty")
        if self.backbone_channels <= 0:
            raise ValidationError("backbone_channels must be positive")

    @property
    def uses_attention(self) -> bool:
        return self.variant in ("self_att", "self_att_visual")

    @property
    def uses_queries(self) -> bool:
        return self.variant != "backbone_only"

    @property
    def uses_visual(self) -> bool:
        return self.variant in ("backbone_only", "self_att_visual")

    @property
    def mlp_input_dim(self) -> int:
        dim = 0
        if self.uses_queries:
            dim += self.d_model
        if self.uses_visual:
            dim += self.d_model
        if self.include_coords:
            dim += 2
        return dim


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 5
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_epoch: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValidationError("lr must be >= 0")


@dataclass
class PCPMParams:
    """Learnable tensors; unused slots for a variant stay None."""

    w_query: np.ndarray | None = None
    w_key: np.ndarray | None = None
    w_value: np.ndarray | None = None
    w_out: np.ndarray | None = None
    row_proj: np.ndarray | None = None
    visual_proj: np.ndarray | None = None
    mlp_weights: list[np.ndarray] = field(default_factory=list)
    mlp_biases: list[np.ndarray] = field(default_factory=list)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in ("w_query", "w_key", "w_value", "w_out", "row_proj", "visual_proj"):
            t = getattr(self, name)
            if t is not None:
                out.append((name, t))
        for i, w in enumerate(self.mlp_weights):
            out.append((f"mlp_weights[{i}]", w))
        for i, b in enumerate(self.mlp_biases):
            out.append((f"mlp_biases[{i}]", b))
        return out

    def copy(self) -> "PCPMParams":
        return PCPMParams(
            w_query=None if self.w_query is None else self.w_query.copy(),
            w_key=None if self.w_key is None else self.w_key.copy(),
            w_value=None if self.w_value is None else self.w_value.copy(),
            w_out=None if self.w_out is None else self.w_out.copy(),
            row_proj=None if self.row_proj is None else self.row_proj.copy(),
            visual_proj=None if self.visual_proj is None else self.visual_proj.copy(),
            mlp_weights=[w.copy() for w in self.mlp_weights],
            mlp_biases=[b.copy() for b in self.mlp_biases],
        )


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: PCPMConfig, seed: int = 0) -> PCPMParams:
    """Seeded uniform Xavier initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    params = PCPMParams()
    if config.uses_attention:
        params.w_query = _xavier(rng, d, d, (d, d))
        params.w_key = _xavier(rng, d, d, (d, d))
        params.w_value = _xavier(rng, d, d, (d, d))
        params.w_out = _xavier(rng, d, d, (d, d))
    elif config.variant == "linear":
        params.row_proj = _xavier(rng, d, d, (d, d))
    if config.uses_visual:
        cb = config.backbone_channels
        params.visual_proj = _xavier(rng, cb, d, (cb, d))
    dims = [config.mlp_input_dim, *config.mlp_hidden, 1]
    for fan_in, fan_out in zip(dims, dims[1:]):
        params.mlp_weights.append(_xavier(rng, fan_in, fan_out, (fan_in, fan_out)))
        params.mlp_biases.append(np.zeros(fan_out))
    return params


def param_count(config: PCPMConfig) -> int:
    """Exact number of scalar parameters for a variant."""
    d = config.d_model
    total = 0
    if config.uses_attention:
        total += 4 * d * d
    elif config.variant == "linear":
        total += d * d
    if config.uses_visual:
        total += config.backbone_channels * d
    dims = [config.mlp_input_dim, *config.mlp_hidden, 1]
    for fan_in, fan_out in zip(dims, dims[1:]):
        total += fan_in * fan_out + fan_out
    return total


def _check_shapes(params: PCPMParams, config: PCPMConfig, emb: EmbeddingSet) -> None:
    d = config.d_model
    if config.uses_queries and emb.queries.shape[1] != d:
        raise ValidationError(
            f"query dim {emb.queries.shape[1]} does not match d_model {d}"
        )
    if config.uses_visual:
        cb = emb.backbone_map.shape[2]
        if params.visual_proj is None or params.visual_proj.shape != (cb, d):
            raise ValidationError(
                f"visual projection shape must be ({cb}, {d})"
            )
    if params.mlp_weights[0].shape[0] != config.mlp_input_dim:
        raise ValidationError(
            f"MLP input width {params.mlp_weights[0].shape[0]} does not match variant "
            f"input {config.mlp_input_dim}"
        )


def _forward_cached(params: PCPMParams, config: PCPMConfig, emb: EmbeddingSet):
    """Forward pass returning (prediction, cache-for-backward)."""
    _check_shapes(params, config, emb)
    keep = ~emb.noise_mask
    if not np.any(keep):
        raise ValidationError("all queries are masked")
    cache: dict = {}
    d = config.d_model
    parts = []

    if config.uses_queries:
        x = emb.queries[keep]            # (M, d) noise rows dropped before any math
        m = x.shape[0]
        cache["x"] = x
        if config.uses_attention:
            q = x @ params.w_query
            k = x @ params.w_key
            v = x @ params.w_value
            scores = (q @ k.T) / math.sqrt(d)
            scores = scores - scores.max(axis=1, keepdims=True)
            expo = np.exp(scores)
            attn = expo / expo.sum(axis=1, keepdims=True)   # (M, M)
            ctx = attn @ v                                   # (M, d)
            h = ctx @ params.w_out                           # (M, d)
            cache.update(q=q, k=k, v=v, attn=attn, ctx=ctx)
        else:
            h = x @ params.row_proj
        pooled = h.mean(axis=0)
        cache["m"] = m
        parts.append(pooled)

    if config.uses_visual:
        gap = emb.backbone_map.mean(axis=(0, 1))             # (Cb,)
        visual = gap @ params.visual_proj                    # (d,)
        cache["gap"] = gap
        parts.append(visual)

    if config.include_coords:
        parts.append(emb.coords)

    z = np.concatenate(parts)
    cache["z"] = z

    a = z
    pre_acts = []
    acts = [a]
    n_layers = len(params.mlp_weights)
    for i in range(n_layers):
        s = a @ params.mlp_weights[i] + params.mlp_biases[i]
        pre_acts.append(s)
        a = np.maximum(s, 0.0) if i < n_layers - 1 else s
        acts.append(a)
    cache["pre_acts"] = pre_acts
    cache["acts"] = acts
    y_hat = float(a[0])
    if not math.isfinite(y_hat):
        raise NumericalError("non-finite prediction")
    return y_hat, cache


def forward(params: PCPMParams, config: PCPMConfig, emb: EmbeddingSet) -> float:
    """Predicted collision count (raw, may be negative)."""
    y_hat, _ = _forward_cached(params, config, emb)
    return y_hat


def loss(y_hat: np.ndarray | list[float], y: np.ndarray | list[float]) -> float:
    """Mean squared error over a batch."""
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if y_hat.shape != y.shape:
        raise ValidationError("prediction/label batches must have equal length")
    if y_hat.size == 0:
        raise ValidationError("loss requires a non-empty batch")
    return float(np.mean((y_hat - y) ** 2))


def _zeros_like_params(params: PCPMParams) -> PCPMParams:
    return PCPMParams(
        w_query=None if params.w_query is None else np.zeros_like(params.w_query),
        w_key=None if params.w_key is None else np.zeros_like(params.w_key),
        w_value=None if params.w_value is None else np.zeros_like(params.w_value),
        w_out=None if params.w_out is None else np.zeros_like(params.w_out),
        row_proj=None if params.row_proj is None else np.zeros_like(params.row_proj),
        visual_proj=None if params.visual_proj is None else np.zeros_like(params.visual_proj),
        mlp_weights=[np.zeros_like(w) for w in params.mlp_weights],
        mlp_biases=[np.zeros_like(b) for b in params.mlp_biases],
    )


def _backward_from_cache(params: PCPMParams, config: PCPMConfig,
                         cache: dict, d_yhat: float) -> PCPMParams:
    """Reverse-mode gradients given d(loss)/d(prediction)."""
    grads = _zeros_like_params(params)
    d = config.d_model

    # MLP backward.
    acts = cache["acts"]
    pre_acts = cache["pre_acts"]
    n_layers = len(params.mlp_weights)
    da = np.array([d_yhat])
    for i in range(n_layers - 1, -1, -1):
        ds = da if i == n_layers - 1 else da * (pre_acts[i] > 0.0)
        grads.mlp_weights[i] += np.outer(acts[i], ds)
        grads.mlp_biases[i] += ds
        da = params.mlp_weights[i] @ ds

    dz = da
    offset = 0
    if config.uses_queries:
        d_pooled = dz[offset:offset + d]
        offset += d
        m = cache["m"]
        x = cache["x"]
        dh = np.tile(d_pooled / m, (m, 1))               # mean-pool backward
        if config.uses_attention:
            attn, v, q, k, ctx = cache["attn"], cache["v"], cache["q"], cache["k"], cache["ctx"]
            grads.w_out += ctx.T @ dh
            d_ctx = dh @ params.w_out.T
            d_attn = d_ctx @ v.T
            d_v = attn.T @ d_ctx
            # Row-wise softmax backward: ds = a * (da - sum(da * a)).
            row_dot = np.sum(d_attn * attn, axis=1, keepdims=True)
            d_scores = attn * (d_attn - row_dot)
            scale = 1.0 / math.sqrt(d)
            d_q = d_scores @ k * scale
            d_k = d_scores.T @ q * scale
            grads.w_query += x.T @ d_q
            grads.w_key += x.T @ d_k
            grads.w_value += x.T @ d_v
        else:
            grads.row_proj += x.T @ dh

    if config.uses_visual:
        d_visual = dz[offset:offset + d]
        offset += d
        grads.visual_proj += np.outer(cache["gap"], d_visual)

    return grads


def backward(params: PCPMParams, config: PCPMConfig,
             emb: EmbeddingSet, y: float) -> PCPMParams:
    """Gradients of the squared error (forward(emb) - y)^2 w.r.t. params."""
    y_hat, cache = _forward_cached(params, config, emb)
    return _backward_from_cache(params, config, cache, 2.0 * (y_hat - y))


def augment_flip(emb: EmbeddingSet) -> EmbeddingSet:
    """Mirror the backbone map along its width axis.

    Query embeddings and coordinates carry no recoverable left/right pixel
    positions, so they pass through unchanged.
    """
    return EmbeddingSet(
        queries=emb.queries.copy(),
        noise_mask=emb.noise_mask.copy(),
        backbone_map=emb.backbone_map[:, ::-1, :].copy(),
        coords=emb.coords.copy(),
        label=emb.label,
    )


def train(
    dataset: list[EmbeddingSet],
    pcfg: PCPMConfig,
    tcfg: TrainConfig,
) -> tuple[PCPMParams, list[float]]:
    """Mini-batch SGD training; returns final params and per-epoch loss.

    The learning rate is multiplied by lr_decay from decay_epoch onward.
    Per-epoch loss is the sample-weighted mean over that epoch's batches,
    so with lr = 0 the history is exactly flat. Divergence (non-finite
    loss or gradients) aborts with a NumericalError naming the batch.
    """
    if not dataset:
        raise ValidationError("train requires a non-empty dataset")
    params = init_params(pcfg, seed=tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    n = len(dataset)
    history: list[float] = []

    for epoch in range(tcfg.epochs):
        lr = tcfg.lr * (tcfg.lr_decay if epoch >= tcfg.decay_epoch else 1.0)
        order = rng.permutation(n)
        # Summed in dataset index order so the epoch loss does not depend on
        # the shuffle (and is exactly flat when lr is zero).
        sq_err = np.zeros(n)
        for b_start in range(0, n, tcfg.batch_size):
            batch_idx = order[b_start:b_start + tcfg.batch_size]
            grads = _zeros_like_params(params)
            batch_sq = 0.0
            for idx in batch_idx:
                emb = dataset[idx]
                y_hat, cache = _forward_cached(params, pcfg, emb)
                err = y_hat - emb.label
                sq_err[idx] = err * err
                batch_sq += err * err
                g = _backward_from_cache(params, pcfg, cache, 2.0 * err / len(batch_idx))
                _accumulate(grads, g)
            if not math.isfinite(batch_sq):
                raise NumericalError(
                    f"training diverged at epoch {epoch}, batch {b_start // tcfg.batch_size}"
                )
            _apply_sgd(params, grads, lr, epoch, b_start // tcfg.batch_size)
        history.append(float(np.mean(sq_err)))
    return params, history


def _accumulate(total: PCPMParams, delta: PCPMParams) -> None:
    for name in ("w_query", "w_key", "w_value", "w_out", "row_proj", "visual_proj"):
        t, s = getattr(total, name), getattr(delta, name)
        if t is not None:
            t += s
    for tw, sw in zip(total.mlp_weights, delta.mlp_weights):
        tw += sw
    for tb, sb in zip(total.mlp_biases, delta.mlp_biases):
        tb += sb


def _apply_sgd(params: PCPMParams, grads: PCPMParams, lr: float,
               epoch: int, batch: int) -> None:
    for (name, p), (_, g) in zip(params.named_tensors(), grads.named_tensors()):
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite gradient in {name} at epoch {epoch}, batch {batch}"
            )
        p -= lr * g


def predict_batch(params: PCPMParams, config: PCPMConfig,
                  dataset: list[EmbeddingSet], clamp: bool = True) -> np.ndarray:
    """Predictions for a dataset; clamp=True floors them at zero."""
    preds = np.array([forward(params, config, emb) for emb in dataset])
    return np.maximum(preds, 0.0) if clamp else preds


def params_to_dict(params: PCPMParams, config: PCPMConfig) -> dict:
    """JSON-serializable checkpoint with a config echo."""
    def arr(t):
        return None if t is None else t.tolist()

    return {
        "config": {
            "variant": config.variant,
            "d_model": config.d_model,
            "heads": config.heads,
            "mlp_hidden": list(config.mlp_hidden),
            "include_coords": config.include_coords,
            "backbone_channels": config.backbone_channels,
        },
        "params": {
            "w_query": arr(params.w_query),
            "w_key": arr(params.w_key),
            "w_value": arr(params.w_value),
            "w_out": arr(params.w_out),
            "row_proj": arr(params.row_proj),
            "visual_proj": arr(params.visual_proj),
            "mlp_weights": [w.tolist() for w in params.mlp_weights],
            "mlp_biases": [b.tolist() for b in params.mlp_biases],
        },
    }


def params_from_dict(payload: dict) -> tuple[PCPMParams, PCPMConfig]:
    cfg = payload["config"]
    config = PCPMConfig(
        variant=cfg["variant"],
        d_model=int(cfg["d_model"]),
        heads=int(cfg.get("heads", 1)),
        mlp_hidden=tuple(cfg["mlp_hidden"]),
        include_coords=bool(cfg["include_coords"]),
        backbone_channels=int(cfg["backbone_channels"]),
    )
    p = payload["params"]

    def arr(v):
        return None if v is None else np.array(v, dtype=float)

    params = PCPMParams(
        w_query=arr(p["w_query"]),
        w_key=arr(p["w_key"]),
        w_value=arr(p["w_value"]),
        w_out=arr(p["w_out"]),
        row_proj=arr(p["row_proj"]),
        visual_proj=arr(p["visual_proj"]),
        mlp_weights=[np.array(w, dtype=float) for w in p["mlp_weights"]],
        mlp_biases=[np.array(b, dtype=float) for b in p["mlp_biases"]],
    )
    return params, config
