"""The IRCAM policy network.

Audio and visual observations are patch-embedded into one token sequence, run
through a pre-norm self-attention encoder (the initial multimodal sequence),
then refined by an iterative cross-attention decoder driven by a learned query
sequence. After every decoder iteration the decoded queries are prepended to
the memory the next iteration attends over, so memory grows by ``n_query``
tokens per iteration. The last decoder output is mean-pooled into the state
read by the actor and critic heads.

Per-head projections are stored as column blocks of one matrix: head ``i`` of
``attn.wq`` is ``wq[:, i * d_k:(i + 1) * d_k]``.
"""

import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .config import IrcamConfig
from .errors import ConfigError, DimensionError
from .sim import ModalityObservation
from .tensor import Tensor

logger = logging.getLogger(__name__)

N_ACTIONS = 4
AUDIO = "audio"
VISUAL = "visual"

Params = Dict[str, Tensor]
ObservationInput = Union[ModalityObservation, Tuple[np.ndarray, np.ndarray]]


def decoded_tag(iteration: int) -> str:
    return f"decoded-{iteration}"


@dataclass
class MultimodalSequence:
    """Tokens ``[..., L, d_model]`` with one provenance tag per token."""

    tokens: Tensor
    provenance: List[str]

    def __post_init__(self):
        if len(self.provenance) != self.tokens.shape[-2]:
            raise DimensionError(
                f"{len(self.provenance)} provenance tags for "
                f"{self.tokens.shape[-2]} tokens"
            )

    @property
    def length(self) -> int:
        return len(self.provenance)


@dataclass(frozen=True)
class AttentionWeights:
    wq: Tensor  # [d_model, n_heads * d_k]
    wk: Tensor
    wv: Tensor
    wo: Tensor  # [n_heads * d_k, d_model]
    n_heads: int

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, n_heads: int):
        return cls(
            params[f"{prefix}.wq"],
            params[f"{prefix}.wk"],
            params[f"{prefix}.wv"],
            params[f"{prefix}.wo"],
            n_heads,
        )


@dataclass(frozen=True)
class PolicyOutput:
    action_logits: Tensor  # [..., 4]
    state_value: Tensor  # [...]


@dataclass
class AttentionCapture:
    """Softmax weights of one attention layer, ``[..., n_heads, Lq, Lk]``."""

    stage: str  # "encoder" or "decoder"
    index: int  # encoder layer (0-based) or decoder iteration (1-based)
    weights: np.ndarray
    key_provenance: List[str]


@dataclass
class ForwardResult:
    state: Tensor
    memory: MultimodalSequence
    memory_lengths: List[int]
    attention: List[AttentionCapture] = field(default_factory=list)
    encoded: Optional[Tensor] = None  # E_0, the encoder output


# parameters


def effective_config(cfg: IrcamConfig) -> IrcamConfig:
    """The config actually built once ablation switches are applied."""
    if cfg.ablate_en and cfg.n_enc_layers:
        return cfg.model_copy(update={"n_enc_layers": 0})
    return cfg


def decoder_prefix(cfg: IrcamConfig, iteration: int) -> str:
    if cfg.share_decoder_weights:
        return "decoder.shared"
    return f"decoder.{iteration - 1}"


def conv_token_count(cfg: IrcamConfig) -> int:
    n1 = (cfg.audio_bins - cfg.conv_kernel) // cfg.conv_stride + 1
    return (n1 - cfg.conv_kernel) // cfg.conv_stride + 1


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _linear(params: Params, rng, name: str, fan_in: int, fan_out: int, gain: float = 1.0):
    params[f"{name}.weight"] = T.parameter(_xavier(rng, fan_in, fan_out) * gain)
    params[f"{name}.bias"] = T.parameter(np.zeros(fan_out))


def _norm(params: Params, name: str, width: int):
    params[f"{name}.gamma"] = T.parameter(np.ones(width))
    params[f"{name}.beta"] = T.parameter(np.zeros(width))


def _attention(params: Params, rng, name: str, d_model: int):
    for proj in ("wq", "wk", "wv", "wo"):
        params[f"{name}.{proj}"] = T.parameter(_xavier(rng, d_model, d_model))


def _ffn(params: Params, rng, name: str, d_model: int, mult: int):
    _linear(params, rng, f"{name}.fc1", d_model, d_model * mult)
    _linear(params, rng, f"{name}.fc2", d_model * mult, d_model)


def init_parameters(cfg: IrcamConfig) -> Params:
    """Seeded initialization: Xavier-uniform projections, zero biases,
    N(0, 0.02) positional, ear and query embeddings."""
    cfg = effective_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    params: Params = {}

    if cfg.ablate_pe:
        _linear(params, rng, "audio.conv1", cfg.conv_kernel, cfg.conv_channels)
        _linear(params, rng, "audio.conv2", cfg.conv_kernel * cfg.conv_channels, d)
    else:
        _linear(params, rng, "audio.proj", cfg.audio_patch, d)
        params["audio.pos"] = T.parameter(
            rng.normal(0.0, 0.02, (cfg.audio_bins // cfg.audio_patch, d))
        )
    params["audio.ear"] = T.parameter(rng.normal(0.0, 0.02, (2, d)))

    height, width = cfg.visual_size
    p = cfg.visual_patch
    _linear(params, rng, "visual.proj", p * p * cfg.visual_channels, d)
    params["visual.pos"] = T.parameter(
        rng.normal(0.0, 0.02, ((height // p) * (width // p), d))
    )

    for i in range(cfg.n_enc_layers):
        prefix = f"encoder.{i}"
        _norm(params, f"{prefix}.norm1", d)
        _attention(params, rng, f"{prefix}.attn", d)
        _norm(params, f"{prefix}.norm2", d)
        _ffn(params, rng, f"{prefix}.ffn", d, cfg.ffn_mult)

    params["decoder.queries"] = T.parameter(rng.normal(0.0, 0.02, (cfg.n_query, d)))
    prefixes = sorted({decoder_prefix(cfg, j) for j in range(1, cfg.n_dec_iters + 1)})
    for prefix in prefixes:
        _norm(params, f"{prefix}.norm_q", d)
        _norm(params, f"{prefix}.norm_mem", d)
        _attention(params, rng, f"{prefix}.attn", d)
        _norm(params, f"{prefix}.norm2", d)
        _ffn(params, rng, f"{prefix}.ffn", d, cfg.ffn_mult)

    _linear(params, rng, "actor.fc1", d, cfg.head_hidden)
    _linear(params, rng, "actor.fc2", cfg.head_hidden, N_ACTIONS, gain=0.01)
    _linear(params, rng, "critic.fc1", d, cfg.head_hidden)
    _linear(params, rng, "critic.fc2", cfg.head_hidden, 1)
    return params


def parameter_group(name: str) -> str:
    if name.startswith(("audio.", "visual.")):
        return "embeddings"
    if name == "decoder.queries":
        return "queries"
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("decoder."):
        return "decoder"
    return "heads"


def parameter_count(params: Mapping[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


# building blocks


def linear(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return T.add_bias(T.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def _layer_norm(x: Tensor, params: Mapping[str, Tensor], name: str, eps: float) -> Tensor:
    return T.layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"], eps)


def feed_forward(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return linear(T.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    d_k = x.shape[-1] // n_heads
    return T.swap_axes(T.reshape(x, x.shape[:-1] + (n_heads, d_k)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    merged = T.swap_axes(x, -3, -2)
    return T.reshape(merged, merged.shape[:-2] + (merged.shape[-2] * merged.shape[-1],))


def multi_head_attention(
    q_in: Tensor, kv: Tensor, w: AttentionWeights
) -> Tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention per head, heads concatenated and
    projected by ``W^O``. Returns the output and the softmax weights
    ``[..., n_heads, Lq, Lk]``."""
    d_model = q_in.shape[-1]
    if kv.shape[-1] != d_model or w.wq.shape[0] != d_model:
        raise DimensionError(
            f"attention: query width {d_model}, memory width {kv.shape[-1]}, "
            f"projection {w.wq.shape}"
        )
    d_k = w.wq.shape[1] // w.n_heads
    q = _split_heads(T.matmul(q_in, w.wq), w.n_heads)
    k = _split_heads(T.matmul(kv, w.wk), w.n_heads)
    v = _split_heads(T.matmul(kv, w.wv), w.n_heads)
    scores = T.scale(T.matmul(q, T.swap_axes(k, -1, -2)), 1.0 / math.sqrt(d_k))
    weights = T.softmax_last_dim(scores)
    context = _merge_heads(T.matmul(weights, v))
    return T.matmul(context, w.wo), weights.data


def encoder_block(
    e: MultimodalSequence,
    params: Mapping[str, Tensor],
    prefix: str,
    cfg: IrcamConfig,
    captures: Optional[List[AttentionCapture]] = None,
    index: int = 0,
) -> MultimodalSequence:
    """Pre-norm self-attention and feed-forward, each with a residual add."""
    eps = cfg.layer_norm_eps
    x = e.tokens
    normed = _layer_norm(x, params, f"{prefix}.norm1", eps)
    attended, weights = multi_head_attention(
        normed, normed, AttentionWeights.from_params(params, f"{prefix}.attn", cfg.n_heads)
    )
    if captures is not None:
        captures.append(AttentionCapture("encoder", index, weights, list(e.provenance)))
    x = T.add(x, attended)
    x = T.add(x, feed_forward(_layer_norm(x, params, f"{prefix}.norm2", eps), params, f"{prefix}.ffn"))
    return MultimodalSequence(x, list(e.provenance))


def decoder_step(
    q_seq: Tensor,
    e: MultimodalSequence,
    params: Mapping[str, Tensor],
    prefix: str,
    cfg: IrcamConfig,
) -> Tuple[Tensor, np.ndarray]:
    """Queries cross-attend over every token of ``e``, then a feed-forward;
    both sub-layers are pre-norm with residual adds."""
    eps = cfg.layer_norm_eps
    attended, weights = multi_head_attention(
        _layer_norm(q_seq, params, f"{prefix}.norm_q", eps),
        _layer_norm(e.tokens, params, f"{prefix}.norm_mem", eps),
        AttentionWeights.from_params(params, f"{prefix}.attn", cfg.n_heads),
    )
    q = T.add(q_seq, attended)
    q = T.add(q, feed_forward(_layer_norm(q, params, f"{prefix}.norm2", eps), params, f"{prefix}.ffn"))
    return q, weights


# embeddings


def _as_array(x: Union[np.ndarray, Tensor]) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def patch_embed_visual(
    image: Union[np.ndarray, Tensor], params: Mapping[str, Tensor], cfg: IrcamConfig
) -> Tensor:
    """``[..., H, W, C]`` -> ``[..., (H/p)(W/p), d_model]``; patches in
    row-major order."""
    image = _as_array(image)
    height, width, channels = image.shape[-3:]
    p = cfg.visual_patch
    if height % p or width % p:
        raise ConfigError(
            f"image {height}x{width} is not divisible by visual_patch {p}"
        )
    lead = image.shape[:-3]
    n = len(lead)
    patches = image.reshape(lead + (height // p, p, width // p, p, channels))
    patches = np.moveaxis(patches, n + 2, n + 1)
    patches = patches.reshape(lead + ((height // p) * (width // p), p * p * channels))
    tokens = linear(T.constant(patches), params, "visual.proj")
    return T.add_bias(tokens, params["visual.pos"])


def _ear_table(ear: Tensor, per_ear: Sequence[Tensor]) -> Tensor:
    """Stack per-ear ``[n, d]`` tables after adding that ear's embedding."""
    d = ear.shape[-1]
    rows = T.split(ear, [1, 1], axis=0)
    return T.concat(
        [T.add_bias(table, T.reshape(row, (d,))) for row, table in zip(rows, per_ear)],
        axis=0,
    )


def patch_embed_audio(
    spectrum: Union[np.ndarray, Tensor], params: Mapping[str, Tensor], cfg: IrcamConfig
) -> Tensor:
    """``[..., 2, F]`` -> ``[..., 2F/a, d_model]``; left-ear tokens first."""
    spectrum = _as_array(spectrum)
    n_bins = spectrum.shape[-1]
    a = cfg.audio_patch
    if n_bins % a:
        raise ConfigError(f"{n_bins} audio bins are not divisible by audio_patch {a}")
    n = n_bins // a
    patches = spectrum.reshape(spectrum.shape[:-2] + (2 * n, a))
    tokens = linear(T.constant(patches), params, "audio.proj")
    pos = params["audio.pos"]
    return T.add_bias(tokens, _ear_table(params["audio.ear"], [pos, pos]))


def conv_embed_audio(
    spectrum: Union[np.ndarray, Tensor], params: Mapping[str, Tensor], cfg: IrcamConfig
) -> Tensor:
    """Two strided 1-D convolutions over each ear's spectrum, used instead
    of patch embedding when ``ablate_pe`` is set."""
    spectrum = _as_array(spectrum)
    lead = spectrum.shape[:-2]
    k, s = cfg.conv_kernel, cfg.conv_stride
    x = T.constant(spectrum.reshape(lead + (2, spectrum.shape[-1], 1)))
    hidden = T.gelu(linear(T.unfold_1d(x, k, s), params, "audio.conv1"))
    out = linear(T.unfold_1d(hidden, k, s), params, "audio.conv2")
    n = out.shape[-2]
    tokens = T.reshape(out, lead + (2 * n, cfg.d_model))
    d = cfg.d_model
    zeros = T.constant(np.zeros((n, d)))
    return T.add_bias(tokens, _ear_table(params["audio.ear"], [zeros, zeros]))


# forward


def stack_observations(
    observations: Sequence[ModalityObservation],
) -> Tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([o.visual for o in observations]),
        np.stack([o.audio for o in observations]),
    )


def _split_observation(obs: ObservationInput) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(obs, ModalityObservation):
        return obs.visual, obs.audio
    visual, audio = obs
    return np.asarray(visual), np.asarray(audio)


def ircam_forward(
    obs: ObservationInput,
    cfg: IrcamConfig,
    params: Mapping[str, Tensor],
    capture: bool = False,
) -> ForwardResult:
    """Observation(s) -> pooled state ``[..., d_model]``.

    Accepts one ``ModalityObservation`` or a ``(visual, audio)`` pair of
    arrays with a shared leading batch dimension.
    """
    cfg = effective_config(cfg)
    visual, audio = _split_observation(obs)
    expected = tuple(cfg.visual_size) + (cfg.visual_channels,)
    if visual.shape[-3:] != expected or audio.shape[-2:] != (2, cfg.audio_bins):
        raise ConfigError(
            f"observation shapes {visual.shape[-3:]}, {audio.shape[-2:]} do not "
            f"match config {expected}, {(2, cfg.audio_bins)}"
        )
    captures: Optional[List[AttentionCapture]] = [] if capture else None

    embed_audio = conv_embed_audio if cfg.ablate_pe else patch_embed_audio
    audio_tokens = embed_audio(audio, params, cfg)
    visual_tokens = patch_embed_visual(visual, params, cfg)
    memory = MultimodalSequence(
        T.concat([audio_tokens, visual_tokens], axis=-2),
        [AUDIO] * audio_tokens.shape[-2] + [VISUAL] * visual_tokens.shape[-2],
    )
    for i in range(cfg.n_enc_layers):
        memory = encoder_block(memory, params, f"encoder.{i}", cfg, captures, index=i)

    encoded = memory.tokens
    lengths = [memory.length]
    lead = memory.tokens.shape[:-2]
    queries = T.add_bias(
        T.constant(np.zeros(lead + (cfg.n_query, cfg.d_model))), params["decoder.queries"]
    )
    decoded = queries
    for j in range(1, cfg.n_dec_iters + 1):
        decoded, weights = decoder_step(queries, memory, params, decoder_prefix(cfg, j), cfg)
        if captures is not None:
            captures.append(AttentionCapture("decoder", j, weights, list(memory.provenance)))
        tags = [decoded_tag(j)] * cfg.n_query
        if cfg.ablate_rt:
            memory = MultimodalSequence(decoded, tags)
        else:
            memory = MultimodalSequence(
                T.concat([decoded, memory.tokens], axis=-2), tags + memory.provenance
            )
        queries = decoded
        lengths.append(memory.length)

    state = T.mean(decoded, axis=-2)
    return ForwardResult(state, memory, lengths, captures or [], encoded)


def actor_critic(state: Tensor, params: Mapping[str, Tensor]) -> PolicyOutput:
    """Separate two-layer heads: logits over (forward, turn-left,
    turn-right, stop) and a scalar value."""
    x = state if state.ndim > 1 else T.reshape(state, (1,) + state.shape)
    logits = linear(T.tanh(linear(x, params, "actor.fc1")), params, "actor.fc2")
    value = linear(T.tanh(linear(x, params, "critic.fc1")), params, "critic.fc2")
    lead = state.shape[:-1]
    return PolicyOutput(
        T.reshape(logits, lead + (N_ACTIONS,)), T.reshape(value, lead)
    )


# sampling


def action_probabilities(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sample_actions(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF categorical sampling, one uniform draw per row."""
    logits = np.atleast_2d(logits)
    cdf = np.cumsum(action_probabilities(logits.astype(np.float64)), axis=-1)
    draws = rng.random(logits.shape[0])[:, None]
    return np.minimum((cdf < draws).sum(axis=-1), logits.shape[-1] - 1)


def greedy_actions(logits: np.ndarray) -> np.ndarray:
    return np.argmax(np.atleast_2d(logits), axis=-1)


def log_probabilities(logits: np.ndarray, actions: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(logits).astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    return shifted[np.arange(len(actions)), actions] - log_z


# network object


@dataclass(frozen=True)
class ParameterSnapshot:
    """Immutable parameter values (no graph), safe to share between workers."""

    cfg: IrcamConfig
    values: Mapping[str, np.ndarray]

    def to_network(self) -> "IrcamNetwork":
        params = {name: T.parameter(value.copy()) for name, value in self.values.items()}
        return IrcamNetwork(self.cfg, params)


class IrcamNetwork:
    """Parameters plus the forward pass for one config."""

    def __init__(self, cfg: IrcamConfig, params: Optional[Params] = None):
        self.cfg = cfg
        self.params: Params = params if params is not None else init_parameters(cfg)

    @property
    def effective_cfg(self) -> IrcamConfig:
        return effective_config(self.cfg)

    def forward(self, obs: ObservationInput, capture: bool = False) -> ForwardResult:
        return ircam_forward(obs, self.cfg, self.params, capture=capture)

    def policy(
        self, obs: ObservationInput, capture: bool = False
    ) -> Tuple[PolicyOutput, ForwardResult]:
        result = self.forward(obs, capture=capture)
        return actor_critic(result.state, self.params), result

    def parameter_count(self) -> int:
        return parameter_count(self.params)

    def group_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for name, p in self.params.items():
            group = parameter_group(name)
            counts[group] = counts.get(group, 0) + p.size
        return counts

    def snapshot(self) -> ParameterSnapshot:
        values = {}
        for name, p in self.params.items():
            value = p.data.copy()
            value.setflags(write=False)
            values[name] = value
        return ParameterSnapshot(self.cfg, MappingProxyType(values))


def ablation_apply(cfg: IrcamConfig) -> IrcamNetwork:
    """Build the network variant selected by ``cfg``'s ablation switches."""
    variant = effective_config(cfg)
    logger.debug(
        "building variant rt=%s pe=%s en=%s (encoder layers %d)",
        not cfg.ablate_rt,
        not cfg.ablate_pe,
        not cfg.ablate_en,
        variant.n_enc_layers,
    )
    return IrcamNetwork(variant)
