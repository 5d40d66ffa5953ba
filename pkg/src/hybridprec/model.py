"""Transformer architectures, seeded parameters, and the policy-driven forward pass."""

from __future__ import annotations

import dataclasses
import enum
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import numerics as nx
from .numerics import Dtype
from .policy import OpClass, PrecisionPolicy, resolve_policy

INIT_STD = 0.02


class Archetype(str, enum.Enum):
    ENCODER_ONLY = "encoder_only"
    DECODER_ONLY = "decoder_only"


class InvalidConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    archetype: Archetype
    num_layers: int
    hidden: int
    heads: int
    ffn: int
    vocab: int
    max_positions: int
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "archetype", Archetype(self.archetype))
        problems = []
        if self.num_layers < 0:
            problems.append("num_layers >= 0")
        for name in ("hidden", "heads", "ffn", "vocab", "max_positions"):
            if getattr(self, name) < 1:
                problems.append(f"{name} >= 1")
        if self.heads >= 1 and self.hidden % self.heads:
            problems.append("hidden divisible by heads")
        if self.ffn < self.hidden:
            problems.append("ffn >= hidden")
        if problems:
            raise InvalidConfigError(f"invalid ModelConfig, violated: {', '.join(problems)}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["archetype"] = self.archetype.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelConfig:
        return cls(**dict(d))

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, ModelConfig] = {
    "bert-base": ModelConfig(Archetype.ENCODER_ONLY, 12, 768, 12, 3072, 30522, 512),
    "gpt2": ModelConfig(Archetype.DECODER_ONLY, 12, 768, 12, 3072, 50257, 1024),
    "toy-encoder": ModelConfig(Archetype.ENCODER_ONLY, 4, 128, 4, 512, 256, 256),
    "toy-decoder": ModelConfig(Archetype.DECODER_ONLY, 4, 128, 4, 512, 256, 256),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise InvalidConfigError(f"unknown preset {name!r}; valid: {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter, in storage order."""
    h, f = config.hidden, config.ffn
    shapes = [
        ("tok_emb", (config.vocab, h), "normal"),
        ("pos_emb", (config.max_positions, h), "normal"),
    ]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.gamma", (h,), "ones"),
            (p + "ln1.beta", (h,), "zeros"),
        ]
        for proj in ("q", "k", "v", "o"):
            shapes += [(p + f"attn.w{proj}", (h, h), "normal"), (p + f"attn.b{proj}", (h,), "zeros")]
        shapes += [
            (p + "ln2.gamma", (h,), "ones"),
            (p + "ln2.beta", (h,), "zeros"),
            (p + "ffn.w1", (h, f), "normal"),
            (p + "ffn.b1", (f,), "zeros"),
            (p + "ffn.w2", (f, h), "normal"),
            (p + "ffn.b2", (h,), "zeros"),
        ]
    shapes += [("ln_f.gamma", (h,), "ones"), ("ln_f.beta", (h,), "zeros")]
    if config.archetype is Archetype.ENCODER_ONLY:
        shapes += [
            ("pooler.weight", (h, h), "normal"),
            ("pooler.bias", (h,), "zeros"),
            ("classifier.weight", (h, 2), "normal"),
            ("classifier.bias", (2,), "zeros"),
        ]
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count; the output projection is tied to tok_emb."""
    h, f, L = config.hidden, config.ffn, config.num_layers
    embeddings = (config.vocab + config.max_positions) * h
    attention = 4 * (h * h + h)
    mlp = h * f + f + f * h + h
    norms = 2 * (2 * h)
    total = embeddings + L * (attention + mlp + norms) + 2 * h
    if config.archetype is Archetype.ENCODER_ONLY:
        total += (h * h + h) + (2 * h + 2)
    return total


class Model:
    """An immutable, seeded parameter set for one ModelConfig."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        expected = param_shapes(config)
        names = [n for n, _, _ in expected]
        if list(params) != names:
            missing = set(names) - set(params)
            extra = set(params) - set(names)
            raise InvalidConfigError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape, _ in expected:
            if params[name].shape != shape:
                raise InvalidConfigError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params: dict[str, np.ndarray] = {}
        for name in names:
            arr = np.array(params[name], dtype=np.float32, copy=True)
            arr.setflags(write=False)
            self.params[name] = arr
        self._cast_cache: dict[tuple[str, Dtype], np.ndarray] = {}

    def __repr__(self) -> str:
        return f"Model({self.config!r})"

    def num_parameters(self) -> int:
        return sum(int(a.size) for a in self.params.values())

    def weight(self, name: str, dtype: Dtype, transpose: bool = False) -> np.ndarray:
        key = (name + (".T" if transpose else ""), dtype)
        cached = self._cast_cache.get(key)
        if cached is None:
            src = self.params[name]
            if transpose:
                src = np.ascontiguousarray(src.T)
            cached = nx.cast(src, dtype)
            self._cast_cache[key] = cached
        return cached

    def cast(self, dtype: Dtype) -> Model:
        """Copy of this model with every parameter placed on ``dtype``'s lattice."""
        return Model(self.config, {n: nx.cast(a, dtype) for n, a in self.params.items()})

    def with_params(self, updates: Mapping[str, np.ndarray]) -> Model:
        """Copy with some parameters replaced (same names and shapes)."""
        params = dict(self.params)
        for key, value in updates.items():
            if key not in params:
                raise KeyError(key)
            params[key] = value
        return Model(self.config, params)


def build_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape, init in param_shapes(config):
        if init == "normal":
            params[name] = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        elif init == "ones":
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return Model(config, params)


@dataclass
class ForwardTrace:
    logits: np.ndarray
    hidden: np.ndarray
    scores: list[np.ndarray] | None = None
    op_time: dict[OpClass, float] = field(default_factory=dict)
    total_time: float = 0.0
    dtype_usage: Counter = field(default_factory=Counter)


class _Recorder:
    """Tags every kernel call with its op class, timing and dtype use."""

    def __init__(self, policy: PrecisionPolicy):
        self.policy = policy
        self.op_time = {c: 0.0 for c in OpClass}
        self.usage: Counter = Counter()

    def run(self, op: OpClass, fn, *args, **kwargs):
        cfg = self.policy[op]
        self.usage[(op, cfg.compute_dtype)] += 1
        t0 = time.perf_counter()
        out = fn(*args, cfg=cfg, **kwargs)
        self.op_time[op] += time.perf_counter() - t0
        return out


def _linear(x, w, b, cfg):
    dt = cfg.compute_dtype
    y = nx.matmul(nx.cast(x, dt), w, cfg)
    if b is not None:
        y = nx.add(y, b, cfg)
    return y


def _embed(tok_table, pos_table, tokens, cfg):
    seq = tokens.shape[1]
    return nx.add(tok_table[tokens], pos_table[None, :seq], cfg)


def _scores(q, kT, factor, cfg):
    dt = cfg.compute_dtype
    s = nx.matmul(nx.cast(q, dt), nx.cast(kT, dt), cfg)
    return nx.scale(s, factor, cfg)


def _context(probs, v, cfg):
    dt = cfg.compute_dtype
    return nx.matmul(nx.cast(probs, dt), nx.cast(v, dt), cfg)


def _softmax(x, cfg):
    return nx.softmax(nx.cast(x, cfg.compute_dtype), -1, cfg)


def _layernorm(x, gamma, beta, eps, cfg):
    return nx.layernorm(nx.cast(x, cfg.compute_dtype), gamma, beta, eps, cfg)


def _gelu(x, cfg):
    return nx.gelu(nx.cast(x, cfg.compute_dtype), cfg)


def _tanh(x, cfg):
    dt = cfg.compute_dtype
    return nx.cast(np.tanh(nx.cast(x, dt)), dt)


def check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
        raise InputError(f"tokens must be a non-empty [batch, seq] matrix, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise InputError("token ids must be integers")
    if t.shape[1] > config.max_positions:
        raise InputError(f"sequence length {t.shape[1]} exceeds max_positions {config.max_positions}")
    if t.min() < 0 or t.max() >= config.vocab:
        raise InputError(f"token id out of range [0, {config.vocab})")
    return t.astype(np.int64)


def _causal_mask(seq: int) -> np.ndarray:
    mask = np.zeros((seq, seq), dtype=np.float32)
    mask[np.triu_indices(seq, k=1)] = -np.inf
    return mask


def forward(
    model: Model,
    tokens,
    policy: PrecisionPolicy | str = "fp32",
    retain_scores: bool = False,
) -> ForwardTrace:
    """Pre-LN transformer forward pass under ``policy``.

    Returns logits [batch, seq, vocab] from the output projection tied to
    the token embedding. With ``retain_scores`` the pre-softmax, pre-mask
    attention scores of every layer are kept as float32 [batch, heads, seq, seq],
    computed from the same q/k operands before any narrowing.
    """
    t_start = time.perf_counter()
    policy = resolve_policy(policy)
    cfg = model.config
    tokens = check_tokens(tokens, cfg)
    rec = _Recorder(policy)
    dt = {c: policy[c].compute_dtype for c in OpClass}
    B, S = tokens.shape
    H, dh = cfg.heads, cfg.head_dim
    factor = 1.0 / math.sqrt(dh)
    eps = cfg.ln_eps
    w = model.weight

    h = rec.run(OpClass.EMBEDDING, _embed, w("tok_emb", dt[OpClass.EMBEDDING]),
                w("pos_emb", dt[OpClass.EMBEDDING]), tokens)
    mask = _causal_mask(S) if cfg.archetype is Archetype.DECODER_ONLY else None
    kept: list[np.ndarray] | None = [] if retain_scores else None
    lin, ln = dt[OpClass.LINEAR], dt[OpClass.LAYERNORM]

    def split(x):
        return np.ascontiguousarray(x.reshape(B, S, H, dh).transpose(0, 2, 1, 3))

    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        a = rec.run(OpClass.LAYERNORM, _layernorm, h, w(p + "ln1.gamma", ln), w(p + "ln1.beta", ln), eps)
        q, k, v = (
            split(rec.run(OpClass.LINEAR, _linear, a, w(p + f"attn.w{x}", lin), w(p + f"attn.b{x}", lin)))
            for x in "qkv"
        )
        kT = np.ascontiguousarray(k.transpose(0, 1, 3, 2))
        if kept is not None:
            kept.append((np.matmul(q, kT) * np.float32(factor)).astype(np.float32))
        scores = rec.run(OpClass.ATTENTION_SCORE_MATMUL, _scores, q, kT, factor)
        if mask is not None:
            scores = scores + mask
        probs = rec.run(OpClass.SOFTMAX, _softmax, scores)
        ctx = rec.run(OpClass.ATTENTION_SCORE_MATMUL, _context, probs, v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, S, cfg.hidden)
        o = rec.run(OpClass.LINEAR, _linear, ctx, w(p + "attn.wo", lin), w(p + "attn.bo", lin))
        h = rec.run(OpClass.RESIDUAL, nx.add, h, o)

        a = rec.run(OpClass.LAYERNORM, _layernorm, h, w(p + "ln2.gamma", ln), w(p + "ln2.beta", ln), eps)
        f = rec.run(OpClass.LINEAR, _linear, a, w(p + "ffn.w1", lin), w(p + "ffn.b1", lin))
        f = rec.run(OpClass.ACTIVATION, _gelu, f)
        f = rec.run(OpClass.LINEAR, _linear, f, w(p + "ffn.w2", lin), w(p + "ffn.b2", lin))
        h = rec.run(OpClass.RESIDUAL, nx.add, h, f)

    hf = rec.run(OpClass.LAYERNORM, _layernorm, h, w("ln_f.gamma", ln), w("ln_f.beta", ln), eps)
    logits = rec.run(OpClass.LINEAR, _linear, hf, w("tok_emb", lin, transpose=True), None)
    return ForwardTrace(
        logits=logits,
        hidden=hf,
        scores=kept,
        op_time=rec.op_time,
        total_time=time.perf_counter() - t_start,
        dtype_usage=rec.usage,
    )


def classify(model: Model, tokens, policy: PrecisionPolicy | str = "fp32") -> np.ndarray:
    """Probability of class 1 from the 2-class head over the mean-pooled state."""
    if model.config.archetype is not Archetype.ENCODER_ONLY:
        raise InputError("classification head exists only on encoder-only models")
    policy = resolve_policy(policy)
    trace = forward(model, tokens, policy)
    rec = _Recorder(policy)
    lin = policy[OpClass.LINEAR].compute_dtype
    pooled = trace.hidden.mean(axis=1, dtype=np.float32)
    pooled = rec.run(OpClass.LINEAR, _linear, pooled, model.weight("pooler.weight", lin),
                     model.weight("pooler.bias", lin))
    pooled = rec.run(OpClass.ACTIVATION, _tanh, pooled)
    logits = rec.run(OpClass.LINEAR, _linear, pooled, model.weight("classifier.weight", lin),
                     model.weight("classifier.bias", lin))
    probs = rec.run(OpClass.SOFTMAX, _softmax, logits)
    return np.asarray(probs[:, 1], dtype=np.float32)


@dataclass(frozen=True)
class FlopBreakdown:
    linear: int
    attention: int
    output_projection: int
    total: int
    formula: str


FLOP_FORMULA = (
    "per layer: 2*(4*hidden^2 + 2*hidden*ffn)*seq*batch [linear] + 4*seq^2*hidden*batch [attention]; "
    "output projection: 2*seq*hidden*vocab*batch; multiply and add counted separately"
)


def flop_breakdown(config: ModelConfig, batch: int, seq: int, include_output_projection: bool = True) -> FlopBreakdown:
    h, f, L = config.hidden, config.ffn, config.num_layers
    linear = L * 2 * (4 * h * h + 2 * h * f) * seq * batch
    attention = L * 4 * seq * seq * h * batch
    output = 2 * seq * h * config.vocab * batch if include_output_projection else 0
    return FlopBreakdown(linear, attention, output, linear + attention + output, FLOP_FORMULA)


def flop_count(config: ModelConfig, batch: int, seq: int, include_output_projection: bool = True) -> int:
    """Analytic forward-pass FLOPs (see FLOP_FORMULA)."""
    return flop_breakdown(config, batch, seq, include_output_projection).total


def load_token_lines(path: str | Path) -> list[np.ndarray]:
    """Read newline-delimited sequences of space-separated integer token ids."""
    lines = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            lines.append(np.array([int(t) for t in raw.split()], dtype=np.int64))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    if not lines:
        raise InputError(f"{path}: no token sequences")
    return lines


def load_token_matrix(path: str | Path) -> np.ndarray:
    lines = load_token_lines(path)
    lengths = {len(x) for x in lines}
    if len(lengths) != 1:
        raise InputError(f"{path}: sequences have different lengths {sorted(lengths)}")
    return np.stack(lines)


def random_tokens(config: ModelConfig, batch: int, seq: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x70C])
    return rng.integers(0, config.vocab, size=(batch, seq), dtype=np.int64)
