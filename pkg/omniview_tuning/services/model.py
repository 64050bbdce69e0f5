"""Dual-stream toy encoders with LoRA adapters and the VIFormer residual head.

Image path (batched, one row per sample):

    z = E_{W_v + BA}(x)                 frozen base weights + low-rank delta
    s = VIFormer(z)                     one pre-norm transformer block
    z~ = alpha * s + (1 - alpha) * z    residual fusion

The text path is a frozen linear map over a hashed bag of tokens.
"""
import hashlib
import logging
import math
import re
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from omniview_tuning import config
from omniview_tuning.services.exceptions import ConfigError, DatasetError, DimensionError
from omniview_tuning.services.linalg import Matrix, Vector, softmax_rows, softmax_rows_vjp
from omniview_tuning.storage import read_checkpoint, write_checkpoint


logger = logging.getLogger(__name__)

Architecture = Literal["linear", "attention"]
Array = NDArray[np.float64]

LORA_INIT_STD = 0.02
_TOKEN_RE = re.compile(r"[^\W_]+")
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    embed_dim: int
    architecture: Architecture = "linear"
    token_count: int = 0
    token_dim: int = 0

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.architecture not in ("linear", "attention"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "attention":
            if self.token_count < 1 or self.token_dim < 1:
                raise ConfigError("attention mode requires token_count and token_dim >= 1")
            if self.token_count * self.token_dim != self.input_dim:
                raise ConfigError(
                    f"token_count * token_dim = {self.token_count * self.token_dim} "
                    f"!= input_dim {self.input_dim}"
                )

    def weight_shapes(self) -> dict[str, tuple[int, int]]:
        if self.architecture == "linear":
            return {"proj": (self.embed_dim, self.input_dim)}
        h = self.token_dim
        return {
            "w_q": (h, h),
            "w_k": (h, h),
            "w_v": (h, h),
            "w_o": (h, h),
            "proj": (self.embed_dim, h),
        }

    def lora_targets(self) -> tuple[str, ...]:
        if self.architecture == "linear":
            return ("proj",)
        return ("w_q", "w_k", "w_v", "w_o")


@dataclass(frozen=True)
class LoraAdapter:
    target: str
    a: Matrix
    b: Matrix

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise DimensionError(
                f"LoRA factors for {self.target} do not chain: "
                f"B {self.b.shape} and A {self.a.shape}"
            )
        m, n = self.b.shape[0], self.a.shape[1]
        if not 1 <= self.rank < min(m, n):
            raise ConfigError(
                f"LoRA rank {self.rank} for {self.target} must satisfy "
                f"1 <= r < min({m}, {n})"
            )

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self) -> Matrix:
        return self.b @ self.a


@dataclass(frozen=True)
class VIFormerParams:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    w_1: Matrix
    w_2: Matrix
    ln1_gain: Vector
    ln1_bias: Vector
    ln2_gain: Vector
    ln2_bias: Vector

    def __post_init__(self):
        d = self.w_q.shape[0]
        expected = {
            "w_q": (d, d),
            "w_k": (d, d),
            "w_v": (d, d),
            "w_o": (d, d),
            "w_1": (d, 4 * d),
            "w_2": (4 * d, d),
            "ln1_gain": (d,),
            "ln1_bias": (d,),
            "ln2_gain": (d,),
            "ln2_bias": (d,),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise DimensionError(f"VIFormer {name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise ConfigError(f"VIFormer {name} is not finite")

    @property
    def embed_dim(self) -> int:
        return self.w_q.shape[0]

    def as_dict(self) -> dict[str, Array]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: Mapping[str, Array]) -> "VIFormerParams":
        return cls(**{f.name: np.asarray(values[f.name], dtype=np.float64) for f in fields(cls)})


@dataclass(frozen=True)
class ModelState:
    visual: EncoderConfig
    text: EncoderConfig
    visual_weights: Mapping[str, Matrix]
    text_weight: Matrix
    adapters: Mapping[str, LoraAdapter]
    viformer: VIFormerParams
    log_temperature: float
    alpha: float
    train_temperature: bool = False
    use_viformer: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"residual ratio alpha must lie in [0, 1], got {self.alpha}")
        if self.visual.embed_dim != self.text.embed_dim:
            raise DimensionError(
                f"visual embed_dim {self.visual.embed_dim} != text embed_dim {self.text.embed_dim}"
            )
        if self.viformer.embed_dim != self.visual.embed_dim:
            raise DimensionError("VIFormer width differs from the embedding dimension")

    @property
    def temperature(self) -> float:
        low, high = config.TEMPERATURE_BOUNDS
        return min(high, max(low, math.exp(self.log_temperature)))

    def trainable_parameters(self) -> dict[str, Array]:
        params: dict[str, Array] = {}
        for target, adapter in self.adapters.items():
            params[f"lora.{target}.a"] = adapter.a
            params[f"lora.{target}.b"] = adapter.b
        if self.use_viformer:
            for name, value in self.viformer.as_dict().items():
                params[f"viformer.{name}"] = value
        if self.train_temperature:
            params["log_temperature"] = np.array(self.log_temperature)
        return params

    def with_trainable(self, params: Mapping[str, Array]) -> "ModelState":
        adapters = {
            target: LoraAdapter(
                target=target,
                a=params.get(f"lora.{target}.a", adapter.a),
                b=params.get(f"lora.{target}.b", adapter.b),
            )
            for target, adapter in self.adapters.items()
        }
        viformer = self.viformer
        if self.use_viformer:
            viformer = VIFormerParams.from_dict(
                {
                    name: params.get(f"viformer.{name}", value)
                    for name, value in self.viformer.as_dict().items()
                }
            )
        log_temperature = self.log_temperature
        if self.train_temperature and "log_temperature" in params:
            log_temperature = float(params["log_temperature"])
        return replace(
            self, adapters=adapters, viformer=viformer, log_temperature=log_temperature
        )

    def with_base_weights(
        self, visual_weights: Mapping[str, Matrix], text_weight: Matrix
    ) -> "ModelState":
        return replace(self, visual_weights=dict(visual_weights), text_weight=text_weight)


@dataclass(frozen=True)
class ParameterCounts:
    total: int
    trainable: int

    @property
    def ratio(self) -> float:
        return self.trainable / self.total


def init_model_state(
    visual: EncoderConfig,
    *,
    lora_rank: int = 8,
    alpha: float = 0.1,
    temperature: float = 0.07,
    train_temperature: bool = False,
    use_viformer: bool = True,
    text_buckets: int = config.TEXT_BUCKETS,
    seed: int = 0,
) -> ModelState:
    """Random frozen encoders, B = 0 adapters and an identity VIFormer."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    rng = np.random.default_rng(seed)
    visual_weights = {
        name: rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)
        for name, shape in visual.weight_shapes().items()
    }
    text = EncoderConfig(input_dim=text_buckets, embed_dim=visual.embed_dim)
    text_weight = rng.normal(0.0, 1.0 / math.sqrt(text_buckets), size=(visual.embed_dim, text_buckets))
    adapters = {}
    for target in visual.lora_targets():
        m, n = visual_weights[target].shape
        adapters[target] = LoraAdapter(
            target=target,
            a=rng.normal(0.0, LORA_INIT_STD, size=(lora_rank, n)),
            b=np.zeros((m, lora_rank)),
        )
    return ModelState(
        visual=visual,
        text=text,
        visual_weights=visual_weights,
        text_weight=text_weight,
        adapters=adapters,
        viformer=init_viformer(visual.embed_dim, rng),
        log_temperature=math.log(temperature),
        alpha=alpha,
        train_temperature=train_temperature,
        use_viformer=use_viformer,
        seed=seed,
    )


def init_viformer(embed_dim: int, rng: np.random.Generator) -> VIFormerParams:
    d = embed_dim
    scale = 1.0 / math.sqrt(d)
    return VIFormerParams(
        w_q=rng.normal(0.0, scale, size=(d, d)),
        w_k=rng.normal(0.0, scale, size=(d, d)),
        w_v=rng.normal(0.0, scale, size=(d, d)),
        w_o=np.zeros((d, d)),
        w_1=rng.normal(0.0, scale, size=(d, 4 * d)),
        w_2=np.zeros((4 * d, d)),
        ln1_gain=np.ones(d),
        ln1_bias=np.zeros(d),
        ln2_gain=np.ones(d),
        ln2_bias=np.zeros(d),
    )


def lora_effective_weight(base: Matrix, adapter: LoraAdapter) -> Matrix:
    if base.shape != (adapter.b.shape[0], adapter.a.shape[1]):
        raise DimensionError(
            f"base weight {base.shape} does not match B {adapter.b.shape} x A {adapter.a.shape}"
        )
    return base + adapter.b @ adapter.a


def effective_visual_weights(state: ModelState) -> dict[str, Matrix]:
    weights = dict(state.visual_weights)
    for target, adapter in state.adapters.items():
        weights[target] = lora_effective_weight(weights[target], adapter)
    return weights


def fuse_residual(z: Array, s: Array, alpha: float) -> Array:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"residual ratio alpha must lie in [0, 1], got {alpha}")
    if np.shape(z) != np.shape(s):
        raise DimensionError(f"cannot fuse shapes {np.shape(z)} and {np.shape(s)}")
    return alpha * np.asarray(s) + (1.0 - alpha) * np.asarray(z)


# --- visual encoder -------------------------------------------------------


@dataclass
class EncoderCache:
    inputs: Matrix
    weights: dict[str, Matrix]
    tokens: Array | None = None
    q: Array | None = None
    k: Array | None = None
    v: Array | None = None
    attention: Array | None = None
    mixed: Array | None = None
    pooled: Matrix | None = None


def encode_base(weights: Mapping[str, Matrix], visual: EncoderConfig, inputs: Matrix) -> tuple[Matrix, EncoderCache]:
    if inputs.ndim != 2 or inputs.shape[1] != visual.input_dim:
        raise DimensionError(
            f"image inputs have shape {inputs.shape}, encoder expects (*, {visual.input_dim})"
        )
    cache = EncoderCache(inputs=inputs, weights=dict(weights))
    if visual.architecture == "linear":
        return inputs @ weights["proj"].T, cache

    h = visual.token_dim
    tokens = inputs.reshape(inputs.shape[0], visual.token_count, h)
    q = tokens @ weights["w_q"].T
    k = tokens @ weights["w_k"].T
    v = tokens @ weights["w_v"].T
    attention = softmax_rows(q @ k.transpose(0, 2, 1) / math.sqrt(h))
    mixed = attention @ v
    residual = tokens + mixed @ weights["w_o"].T
    pooled = residual.mean(axis=1)
    cache.tokens, cache.q, cache.k, cache.v = tokens, q, k, v
    cache.attention, cache.mixed, cache.pooled = attention, mixed, pooled
    return pooled @ weights["proj"].T, cache


def encode_base_vjp(visual: EncoderConfig, cache: EncoderCache, grad: Matrix) -> dict[str, Matrix]:
    if visual.architecture == "linear":
        return {"proj": grad.T @ cache.inputs}

    assert cache.tokens is not None and cache.attention is not None
    weights = cache.weights
    h = visual.token_dim
    grads = {"proj": grad.T @ cache.pooled}
    grad_pooled = grad @ weights["proj"]
    grad_residual = np.repeat(grad_pooled[:, None, :] / visual.token_count, visual.token_count, axis=1)
    grads["w_o"] = np.einsum("nti,ntj->ij", grad_residual, cache.mixed)
    grad_mixed = grad_residual @ weights["w_o"]
    grad_attention = grad_mixed @ cache.v.transpose(0, 2, 1)
    grad_v = cache.attention.transpose(0, 2, 1) @ grad_mixed
    grad_scores = softmax_rows_vjp(cache.attention, grad_attention) / math.sqrt(h)
    grad_q = grad_scores @ cache.k
    grad_k = grad_scores.transpose(0, 2, 1) @ cache.q
    grads["w_q"] = np.einsum("nti,ntj->ij", grad_q, cache.tokens)
    grads["w_k"] = np.einsum("nti,ntj->ij", grad_k, cache.tokens)
    grads["w_v"] = np.einsum("nti,ntj->ij", grad_v, cache.tokens)
    return grads


# --- VIFormer --------------------------------------------------------------


@dataclass
class _LayerNormCache:
    normalized: Matrix
    inv_std: Matrix
    gain: Vector


@dataclass
class VIFormerCache:
    ln1: _LayerNormCache
    u: Matrix
    q: Matrix
    k: Matrix
    v: Matrix
    weights: Matrix
    attended: Matrix
    ln2: _LayerNormCache
    w: Matrix
    pre: Matrix
    act: Matrix


def viformer_forward(z: Array, params: VIFormerParams) -> Array:
    """One pre-norm block on `z` (a vector or a batch of row vectors)."""
    batch = np.atleast_2d(np.asarray(z, dtype=np.float64))
    out, _ = viformer_forward_batch(batch, params)
    return out[0] if np.ndim(z) == 1 else out


def viformer_forward_batch(z: Matrix, params: VIFormerParams) -> tuple[Matrix, VIFormerCache]:
    if z.shape[-1] != params.embed_dim:
        raise DimensionError(f"VIFormer expects width {params.embed_dim}, got {z.shape[-1]}")
    u, ln1 = _layer_norm(z, params.ln1_gain, params.ln1_bias)
    q, k, v = u @ params.w_q, u @ params.w_k, u @ params.w_v
    # each embedding is a single token, so the softmax runs over one score
    scores = np.sum(q * k, axis=1, keepdims=True) / math.sqrt(params.embed_dim)
    weights = softmax_rows(scores)
    attended = weights * v
    hidden = z + attended @ params.w_o
    w, ln2 = _layer_norm(hidden, params.ln2_gain, params.ln2_bias)
    pre = w @ params.w_1
    act = _gelu(pre)
    out = hidden + act @ params.w_2
    cache = VIFormerCache(ln1, u, q, k, v, weights, attended, ln2, w, pre, act)
    return out, cache


def viformer_vjp(
    params: VIFormerParams, cache: VIFormerCache, grad: Matrix
) -> tuple[Matrix, dict[str, Array]]:
    """Returns (gradient w.r.t. the block input, parameter gradients)."""
    d = params.embed_dim
    grads: dict[str, Array] = {}
    grads["w_2"] = cache.act.T @ grad
    grad_pre = (grad @ params.w_2.T) * _gelu_derivative(cache.pre)
    grads["w_1"] = cache.w.T @ grad_pre
    grad_hidden_ln, grads["ln2_gain"], grads["ln2_bias"] = _layer_norm_vjp(
        cache.ln2, grad_pre @ params.w_1.T
    )
    grad_hidden = grad + grad_hidden_ln

    grads["w_o"] = cache.attended.T @ grad_hidden
    grad_attended = grad_hidden @ params.w_o.T
    grad_weights = np.sum(grad_attended * cache.v, axis=1, keepdims=True)
    grad_v = cache.weights * grad_attended
    grad_scores = softmax_rows_vjp(cache.weights, grad_weights) / math.sqrt(d)
    grad_q, grad_k = grad_scores * cache.k, grad_scores * cache.q
    grads["w_q"] = cache.u.T @ grad_q
    grads["w_k"] = cache.u.T @ grad_k
    grads["w_v"] = cache.u.T @ grad_v
    grad_u = grad_q @ params.w_q.T + grad_k @ params.w_k.T + grad_v @ params.w_v.T
    grad_z_ln, grads["ln1_gain"], grads["ln1_bias"] = _layer_norm_vjp(cache.ln1, grad_u)
    return grad_hidden + grad_z_ln, grads


def _layer_norm(x: Matrix, gain: Vector, bias: Vector) -> tuple[Matrix, _LayerNormCache]:
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + config.LAYER_NORM_EPS)
    normalized = centered * inv_std
    return normalized * gain + bias, _LayerNormCache(normalized, inv_std, gain)


def _layer_norm_vjp(cache: _LayerNormCache, grad: Matrix) -> tuple[Matrix, Vector, Vector]:
    grad_gain = np.sum(grad * cache.normalized, axis=0)
    grad_bias = np.sum(grad, axis=0)
    grad_norm = grad * cache.gain
    grad_x = cache.inv_std * (
        grad_norm
        - grad_norm.mean(axis=-1, keepdims=True)
        - cache.normalized * np.mean(grad_norm * cache.normalized, axis=-1, keepdims=True)
    )
    return grad_x, grad_gain, grad_bias


def _gelu(x: Array) -> Array:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_derivative(x: Array) -> Array:
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


# --- full image / text paths -------------------------------------------------


@dataclass
class ImageForward:
    base: Matrix
    fused: Matrix
    encoder: EncoderCache
    viformer: VIFormerCache | None = field(default=None)


def image_forward(state: ModelState, inputs: Matrix) -> ImageForward:
    base, encoder_cache = encode_base(effective_visual_weights(state), state.visual, inputs)
    if not state.use_viformer:
        return ImageForward(base=base, fused=base, encoder=encoder_cache)
    transformed, viformer_cache = viformer_forward_batch(base, state.viformer)
    fused = fuse_residual(base, transformed, state.alpha)
    return ImageForward(base=base, fused=fused, encoder=encoder_cache, viformer=viformer_cache)


def image_backward(state: ModelState, forward: ImageForward, grad: Matrix) -> dict[str, Array]:
    """Gradients of a scalar loss w.r.t. the trainable image parameters,
    given its gradient w.r.t. the fused embeddings."""
    grads: dict[str, Array] = {}
    grad_base = grad
    if state.use_viformer:
        assert forward.viformer is not None
        grad_through, viformer_grads = viformer_vjp(
            state.viformer, forward.viformer, state.alpha * grad
        )
        grad_base = (1.0 - state.alpha) * grad + grad_through
        grads.update({f"viformer.{name}": value for name, value in viformer_grads.items()})
    weight_grads = encode_base_vjp(state.visual, forward.encoder, grad_base)
    for target, adapter in state.adapters.items():
        grads[f"lora.{target}.a"] = adapter.b.T @ weight_grads[target]
        grads[f"lora.{target}.b"] = weight_grads[target] @ adapter.a.T
    return grads


def encode_image(raw: Array, state: ModelState) -> Vector:
    vector = np.asarray(raw, dtype=np.float64)
    if vector.ndim != 1:
        raise DimensionError(f"encode_image expects one raw vector, got shape {vector.shape}")
    return image_forward(state, vector[None, :]).fused[0]


def tokenize(caption: str) -> list[str]:
    return _TOKEN_RE.findall(caption.lower())


def featurize_caption(caption: str, buckets: int = config.TEXT_BUCKETS) -> Vector:
    """Hashed bag of lowercase word tokens; any Unicode letter or digit counts."""
    tokens = tokenize(caption)
    if not tokens:
        raise DatasetError(f"caption {caption!r} has no tokens")
    counts = np.zeros(buckets)
    for token in tokens:
        counts[_bucket(token, buckets)] += 1.0
    return counts


def featurize_captions(captions: list[str], buckets: int = config.TEXT_BUCKETS) -> Matrix:
    return np.stack([featurize_caption(caption, buckets) for caption in captions])


def encode_text(caption: str, state: ModelState) -> Vector:
    return state.text_weight @ featurize_caption(caption, state.text.input_dim)


def encode_texts(captions: list[str], state: ModelState) -> Matrix:
    return featurize_captions(captions, state.text.input_dim) @ state.text_weight.T


def _bucket(token: str, buckets: int) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=8, salt=config.TEXT_HASH_SALT).digest()
    return int.from_bytes(digest, "little") % buckets


# --- bookkeeping -------------------------------------------------------------


def parameter_counts(state: ModelState) -> ParameterCounts:
    frozen = sum(w.size for w in state.visual_weights.values()) + state.text_weight.size
    trainable = sum(np.size(p) for p in state.trainable_parameters().values())
    return ParameterCounts(total=frozen + trainable, trainable=trainable)


def frozen_checksum(state: ModelState) -> str:
    digest = hashlib.sha256()
    for name in sorted(state.visual_weights):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state.visual_weights[name], dtype="<f8").tobytes())
    digest.update(np.ascontiguousarray(state.text_weight, dtype="<f8").tobytes())
    return digest.hexdigest()


def save_checkpoint(state: ModelState, path: Path) -> None:
    arrays: dict[str, Array] = {f"visual.{n}": w for n, w in sorted(state.visual_weights.items())}
    arrays["text.weight"] = state.text_weight
    for target, adapter in sorted(state.adapters.items()):
        arrays[f"lora.{target}.a"] = adapter.a
        arrays[f"lora.{target}.b"] = adapter.b
    for name, value in state.viformer.as_dict().items():
        arrays[f"viformer.{name}"] = value
    header = {
        "visual": _encoder_to_dict(state.visual),
        "text": _encoder_to_dict(state.text),
        "log_temperature": state.log_temperature,
        "alpha": state.alpha,
        "train_temperature": state.train_temperature,
        "use_viformer": state.use_viformer,
        "seed": state.seed,
    }
    write_checkpoint(path, header, arrays)
    logger.info("checkpoint written to %s", path)


def load_checkpoint(path: Path) -> ModelState:
    header, arrays = read_checkpoint(path)
    visual = EncoderConfig(**header["visual"])
    adapters = {
        target: LoraAdapter(target=target, a=arrays[f"lora.{target}.a"], b=arrays[f"lora.{target}.b"])
        for target in visual.lora_targets()
    }
    return ModelState(
        visual=visual,
        text=EncoderConfig(**header["text"]),
        visual_weights={n: arrays[f"visual.{n}"] for n in visual.weight_shapes()},
        text_weight=arrays["text.weight"],
        adapters=adapters,
        viformer=VIFormerParams.from_dict(
            {f.name: arrays[f"viformer.{f.name}"] for f in fields(VIFormerParams)}
        ),
        log_temperature=header["log_temperature"],
        alpha=header["alpha"],
        train_temperature=header["train_temperature"],
        use_viformer=header["use_viformer"],
        seed=header["seed"],
    )


def _encoder_to_dict(encoder: EncoderConfig) -> dict:
    return {f.name: getattr(encoder, f.name) for f in fields(encoder)}
