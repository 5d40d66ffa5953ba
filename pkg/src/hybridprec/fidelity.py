"""Numerical fidelity metrics, attention statistics, margins and perplexity."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .model import Archetype, Model, ModelConfig, build_model, forward, preset, random_tokens
from .policy import PrecisionPolicy, resolve_policy

# exp(x) exceeds 65504 for x > ln(65504) ~= 11.09 (before the final rounding).
F16_EXP_OVERFLOW = math.log(65504.0)


@dataclass
class FidelityReport:
    max_abs_error: float
    mean_abs_error: float
    cosine_similarity: float | None
    nan_rate: float
    runs: int
    nan_runs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def compare_logits(baseline, candidate) -> FidelityReport:
    """Single-run comparison of candidate logits against a baseline.

    Any non-finite candidate element flags the run; errors and cosine are
    then computed over the positions where both tensors are finite.
    """
    a = np.asarray(baseline, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    flagged = not np.isfinite(b).all()
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    if a.size:
        diff = np.abs(a - b)
        max_err, mean_err = float(diff.max()), float(diff.mean())
    else:
        max_err, mean_err = math.nan, math.nan
    saa, sbb = float(np.dot(a, a)), float(np.dot(b, b))
    cosine = None
    if saa > 0 and sbb > 0:
        # sqrt(saa * sbb) rather than |a| * |b| so that a == b gives exactly 1.0.
        cosine = max(-1.0, min(1.0, float(np.dot(a, b)) / math.sqrt(saa * sbb)))
    return FidelityReport(max_err, mean_err, cosine, float(flagged), 1, int(flagged))


def nan_rate(flags: Sequence[bool]) -> float:
    flags = list(flags)
    if not flags:
        raise ValueError("nan_rate needs at least one run")
    return sum(bool(f) for f in flags) / len(flags)


def aggregate(reports: Sequence[FidelityReport]) -> FidelityReport:
    """Combine runs: NaN-affected runs count toward nan_rate only.

    Over the remaining runs: max of max errors, mean of mean errors, and the
    minimum (worst) cosine.
    """
    if not reports:
        raise ValueError("nothing to aggregate")
    runs = sum(r.runs for r in reports)
    nan_runs = sum(r.nan_runs for r in reports)
    clean = [r for r in reports if r.nan_runs == 0]
    if clean:
        max_err = max(r.max_abs_error for r in clean)
        mean_err = float(np.mean([r.mean_abs_error for r in clean]))
        cosines = [r.cosine_similarity for r in clean if r.cosine_similarity is not None]
        cosine = min(cosines) if cosines else None
    else:
        max_err = mean_err = math.nan
        cosine = None
    return FidelityReport(max_err, mean_err, cosine, nan_runs / runs, runs, nan_runs)


class ConstantInputError(ValueError):
    pass


def kurtosis(samples) -> float:
    """Pearson (non-excess) kurtosis m4 / m2**2 with population moments."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 4:
        raise ValueError("kurtosis needs at least 4 samples")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0:
        raise ConstantInputError("kurtosis undefined for constant input")
    return float(np.mean(d**4) / (m2 * m2))


def interhead_correlation(scores, mask=None) -> float:
    """Mean Pearson r over all unordered head pairs of a [heads, seq, seq] tensor.

    ``mask`` (bool [seq, seq]) selects the entries to include; masked-out
    causal positions should be excluded for decoder scores.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] < 2:
        raise ValueError(f"need [heads>=2, seq, seq] scores, got shape {s.shape}")
    flat = s[:, mask] if mask is not None else s.reshape(s.shape[0], -1)
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    if (norms == 0).any():
        raise ConstantInputError("a head has constant scores; correlation undefined")
    unit = centered / norms[:, None]
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    iu = np.triu_indices(s.shape[0], k=1)
    return float(corr[iu].mean())


@dataclass
class LayerAttentionStats:
    layer: int
    kurtosis: float
    max_score: float
    interhead_r: float | None


@dataclass
class AttentionStats:
    layers: list[LayerAttentionStats]
    kurtosis_mean: float
    kurtosis_std: float
    max_score_mean: float

    def to_dict(self) -> dict:
        return asdict(self)

    def table_rows(self) -> list[dict]:
        """Rows in a per-layer kurtosis table layout with a trailing Mean row."""
        rows = [
            {"layer": s.layer + 1, "kurtosis": s.kurtosis, "max_pre_softmax": s.max_score,
             "interhead_r": s.interhead_r}
            for s in self.layers
        ]
        rs = [s.interhead_r for s in self.layers if s.interhead_r is not None]
        rows.append({"layer": "Mean", "kurtosis": self.kurtosis_mean,
                     "max_pre_softmax": self.max_score_mean,
                     "interhead_r": float(np.mean(rs)) if rs else None})
        return rows


def attention_profile_from_scores(scores_per_layer: Sequence[np.ndarray], causal: bool = False) -> AttentionStats:
    """Profile retained [batch, heads, seq, seq] score tensors, one per layer."""
    if not scores_per_layer:
        raise ValueError("no attention layers to profile")
    stats = []
    for i, s in enumerate(scores_per_layer):
        s = np.asarray(s, dtype=np.float64)
        seq = s.shape[-1]
        mask = np.tril(np.ones((seq, seq), dtype=bool)) if causal else np.ones((seq, seq), dtype=bool)
        vals = s[..., mask]
        r = None
        if s.shape[1] >= 2 and mask.sum() >= 2:
            r = float(np.mean([interhead_correlation(s[b], mask) for b in range(s.shape[0])]))
        stats.append(LayerAttentionStats(i, kurtosis(vals), float(vals.max()), r))
    ks = np.array([x.kurtosis for x in stats])
    return AttentionStats(stats, float(ks.mean()), float(ks.std()),
                          float(np.mean([x.max_score for x in stats])))


def attention_profile(model: Model, tokens, policy: PrecisionPolicy | str = "fp32") -> AttentionStats:
    trace = forward(model, tokens, policy, retain_scores=True)
    return attention_profile_from_scores(trace.scores, model.config.archetype is Archetype.DECODER_ONLY)


@dataclass
class MarginResult:
    min_margin_a: float
    min_margin_b: float
    flip_count: int
    flipped_indices: list[int] = field(default_factory=list)


def margin_analysis(probs_baseline, probs_candidate, threshold: float = 0.5) -> MarginResult:
    """Decision-boundary margins (p - threshold) and sign flips between runs.

    ``min_margin_*`` is the smallest distance to the threshold.
    """
    a = np.asarray(probs_baseline, dtype=np.float64).ravel()
    b = np.asarray(probs_candidate, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    for p in (a, b):
        if ((p < 0) | (p > 1) | ~np.isfinite(p)).any():
            raise ValueError("probabilities must lie in [0, 1]")
    ma, mb = a - threshold, b - threshold
    flips = (np.sign(ma) != np.sign(mb)) & (ma != 0)
    idx = [int(i) for i in np.flatnonzero(flips)]
    return MarginResult(float(np.abs(ma).min()), float(np.abs(mb).min()), len(idx), idx)


def token_nll(logits, targets) -> np.ndarray:
    """Per-token negative log-likelihood from [n, vocab] logits (float64 log-softmax)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    zmax = z.max(axis=-1, keepdims=True)
    logz = zmax[..., 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    picked = np.take_along_axis(z, t[..., None], axis=-1)[..., 0]
    return logz - picked


def perplexity_from_nll(nll: Iterable[float]) -> float:
    values = np.asarray(list(nll), dtype=np.float64)
    return float(math.exp(math.fsum(values) / values.size))


def stride_windows(stream, context_len: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Non-overlapping (inputs, targets) windows with stride ``context_len``.

    A trailing partial window is kept when it has at least 2 tokens.
    """
    stream = np.asarray(stream, dtype=np.int64).ravel()
    if context_len < 1:
        raise ValueError("context_len must be >= 1")
    if stream.size < context_len + 1:
        raise ValueError(f"stream of {stream.size} tokens is shorter than context_len + 1 = {context_len + 1}")
    windows = []
    for start in range(0, stream.size - 1, context_len):
        chunk = stream[start:start + context_len + 1]
        if chunk.size >= 2:
            windows.append((chunk[:-1], chunk[1:]))
    return windows


def perplexity(model: Model, token_stream, context_len: int, policy: PrecisionPolicy | str = "fp32") -> float:
    """Token-level perplexity of a decoder over non-overlapping windows."""
    if model.config.archetype is not Archetype.DECODER_ONLY:
        raise ValueError("perplexity requires a decoder-only model")
    if context_len > model.config.max_positions:
        raise ValueError(f"context_len {context_len} exceeds max_positions {model.config.max_positions}")
    policy = resolve_policy(policy)
    nll = []
    for inputs, targets in stride_windows(token_stream, context_len):
        logits = forward(model, inputs[None, :], policy).logits[0]
        nll.extend(token_nll(logits, targets))
    return perplexity_from_nll(nll)


# -- corpora ---------------------------------------------------------------

TOY_PRESETS = {Archetype.ENCODER_ONLY: "toy-encoder", Archetype.DECODER_ONLY: "toy-decoder"}


@dataclass(frozen=True)
class Cell:
    archetype: Archetype
    seed: int
    batch: int
    seq: int
    adversarial: bool = False


def regression_corpus(
    seeds: Iterable[int] = range(20),
    seqs: Iterable[int] = (32, 128),
    batches: Iterable[int] = (1, 4),
    archetypes: Iterable[Archetype] = tuple(Archetype),
) -> list[Cell]:
    return [Cell(a, s, b, q) for a, s, q, b in product(archetypes, seeds, seqs, batches)]


def amplify_queries(model: Model, tokens, target_score: float = 2.0 * F16_EXP_OVERFLOW) -> Model:
    """Scale every query projection by the gain that takes the probe pass's
    largest score to ``target_score``.

    Scores are linear in W_q (biases are zero), so layer-by-layer the gain is
    exact for the probe; deeper layers drift somewhat because their inputs
    change once earlier layers are amplified. The scaled model drives unstabilised binary16 softmax past its
    exp-overflow threshold while leaving the fp32 computation well defined.
    """
    trace = forward(model, tokens, "fp32", retain_scores=True)
    peak = max(float(np.abs(s).max()) for s in trace.scores)
    gain = np.float32(target_score / peak)
    updates = {}
    for i in range(model.config.num_layers):
        name = f"layers.{i}.attn.wq"
        updates[name] = model.params[name] * gain
    return model.with_params(updates)


def cell_inputs(cell: Cell, config: ModelConfig | None = None) -> tuple[Model, np.ndarray]:
    config = config or preset(TOY_PRESETS[cell.archetype])
    model = build_model(config.replace(seed=cell.seed))
    tokens = random_tokens(model.config, cell.batch, cell.seq, cell.seed)
    if cell.adversarial:
        model = amplify_queries(model, tokens)
    return model, tokens


def run_cell(cell: Cell, policies: Sequence[str] = ("hybrid", "full_fp16"),
             config: ModelConfig | None = None) -> dict[str, FidelityReport]:
    """Compare each policy's logits to fp32 on one corpus cell."""
    model, tokens = cell_inputs(cell, config)
    baseline = forward(model, tokens, "fp32").logits
    out = {"fp32": compare_logits(baseline, baseline)}
    for name in policies:
        out[name] = compare_logits(baseline, forward(model, tokens, name).logits)
    return out
