"""Cross-attention feature augmenter: forward pass, losses, exact gradients.

A visual feature is fused with its retrieved concepts in two routes: a
linear projection (coarse) and a small decoder (fine) whose single query
token cross-attends over a key/value matrix built from the feature and the
score-weighted concepts.  The augmented feature is the sum of both routes,
L2-normalized so downstream dot products against unit text embeddings stay
cosines; the pre-normalization vector is what the regularization loss pulls
toward the original feature.

The computation graph is fixed, so gradients for every parameter tensor are
accumulated by hand in reverse over batched einsum primitives.  Everything
runs in float64 with deterministic reduction order: same inputs, same seed,
bit-identical results.

The decoder layer is residual attention plus residual FFN and nothing else;
there are no normalization layers inside.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import (
    DivergenceDetected,
    FormatError,
    NonFiniteGradient,
    NonFiniteIntermediate,
    ShapeMismatch,
)
from .store import EmbeddingTable

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

CHECKPOINT_MAGIC = b"RALF-AUG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RafHyperParams:
    """Augmenter geometry, loss weights, and trainer settings."""

    k: int = 50
    layers: int = 6
    heads: int = 8
    ffn_dim: int = 2048
    beta_cls: float = 5.0
    beta_reg: float = 1.0
    learning_rate: float = 0.01
    iterations: int = 100
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("k", "layers", "heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass
class LayerParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


@dataclass
class AugmenterParams:
    """Every learnable tensor of the augmenter.

    Tensor declaration order (also the checkpoint order): projection weight
    and bias, then per layer the four attention matrices and the FFN pair,
    then the query seed, positional embeddings, and the two type embeddings.
    """

    dim: int
    ffn_dim: int
    heads: int
    k: int
    activation: str
    proj_w: np.ndarray
    proj_b: np.ndarray
    layers: list[LayerParams]
    query_seed: np.ndarray
    pos_embed: np.ndarray
    type0: np.ndarray
    type1: np.ndarray

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def tensors(self):
        """Yield (name, array) in declaration order."""
        yield "proj_w", self.proj_w
        yield "proj_b", self.proj_b
        for i, layer in enumerate(self.layers):
            for fname in ("w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
                yield f"layer{i}.{fname}", getattr(layer, fname)
        yield "query_seed", self.query_seed
        yield "pos_embed", self.pos_embed
        yield "type0", self.type0
        yield "type1", self.type1

    def copy(self) -> "AugmenterParams":
        return AugmenterParams(
            self.dim,
            self.ffn_dim,
            self.heads,
            self.k,
            self.activation,
            self.proj_w.copy(),
            self.proj_b.copy(),
            [
                LayerParams(*(getattr(l, f).copy() for f in (
                    "w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")))
                for l in self.layers
            ],
            self.query_seed.copy(),
            self.pos_embed.copy(),
            self.type0.copy(),
            self.type1.copy(),
        )

    def zeros_like(self) -> "AugmenterParams":
        out = self.copy()
        for _, t in out.tensors():
            t[...] = 0.0
        return out

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def validate(self) -> None:
        d, f, k = self.dim, self.ffn_dim, self.k
        if self.heads < 1 or d % self.heads:
            raise ShapeMismatch(f"heads={self.heads} must divide dim={d}")
        expected = {
            "proj_w": (d, d), "proj_b": (d,),
            "query_seed": (d,), "pos_embed": (k, d), "type0": (d,), "type1": (d,),
        }
        for i in range(len(self.layers)):
            expected.update({
                f"layer{i}.w_q": (d, d), f"layer{i}.w_k": (d, d),
                f"layer{i}.w_v": (d, d), f"layer{i}.w_o": (d, d),
                f"layer{i}.ffn_w1": (d, f), f"layer{i}.ffn_b1": (f,),
                f"layer{i}.ffn_w2": (f, d), f"layer{i}.ffn_b2": (d,),
            })
        for name, tensor in self.tensors():
            if tensor.shape != expected[name]:
                raise ShapeMismatch(
                    f"{name}: expected shape {expected[name]}, got {tensor.shape}"
                )
            if not np.all(np.isfinite(tensor)):
                raise ShapeMismatch(f"{name} contains non-finite values")


@dataclass(frozen=True)
class RafBatch:
    """One image's proposals: visual features plus per-row retrieved concepts."""

    visual_features: np.ndarray  # (N, dim)
    concept_embeddings: np.ndarray  # (N, k, dim)
    concept_scores: np.ndarray  # (N, k)

    @classmethod
    def from_retrieved(cls, visual_features, retrieved) -> "RafBatch":
        """Stack per-proposal retrieval results; all rows must share one k."""
        v = np.asarray(visual_features, dtype=np.float64)
        ks = {r.scores.shape[0] for r in retrieved}
        if len(ks) != 1:
            raise ShapeMismatch(f"non-uniform k across rows: {sorted(ks)}")
        H = np.stack([np.asarray(r.embeddings, dtype=np.float64) for r in retrieved])
        s = np.stack([np.asarray(r.scores, dtype=np.float64) for r in retrieved])
        if v.shape[0] != H.shape[0]:
            raise ShapeMismatch(f"{v.shape[0]} features for {H.shape[0]} retrievals")
        return cls(v, H, s)


@dataclass(frozen=True)
class RafLossResult:
    loss: float
    cls: float
    reg: float


def init_params(dim: int, hp: RafHyperParams, seed: int) -> AugmenterParams:
    """Seeded initialization: fan-in uniform for weight matrices, zero
    biases, small normal noise for the query seed and embeddings."""
    if dim % hp.heads:
        raise ShapeMismatch(f"heads={hp.heads} must divide dim={dim}")
    rng = np.random.default_rng(seed)

    def weight(rows: int, cols: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(rows)
        return rng.uniform(-bound, bound, size=(rows, cols))

    layers = [
        LayerParams(
            w_q=weight(dim, dim),
            w_k=weight(dim, dim),
            w_v=weight(dim, dim),
            w_o=weight(dim, dim),
            ffn_w1=weight(dim, hp.ffn_dim),
            ffn_b1=np.zeros(hp.ffn_dim),
            ffn_w2=weight(hp.ffn_dim, dim),
            ffn_b2=np.zeros(dim),
        )
        for _ in range(hp.layers)
    ]
    return AugmenterParams(
        dim=dim,
        ffn_dim=hp.ffn_dim,
        heads=hp.heads,
        k=hp.k,
        activation=hp.activation,
        proj_w=weight(dim, dim),
        proj_b=np.zeros(dim),
        layers=layers,
        query_seed=rng.normal(0.0, 0.02, size=dim),
        pos_embed=rng.normal(0.0, 0.02, size=(hp.k, dim)),
        type0=rng.normal(0.0, 0.02, size=dim),
        type1=rng.normal(0.0, 0.02, size=dim),
    )


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _act(u: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(u, 0.0)
    return 0.5 * u * (1.0 + erf(u / _SQRT2))


def _act_grad(u: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (u > 0.0).astype(np.float64)
    cdf = 0.5 * (1.0 + erf(u / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    return cdf + u * pdf


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _build_m_batch(v: np.ndarray, H: np.ndarray, s: np.ndarray, params: AugmenterParams):
    """Key/value matrix per row: the typed feature stacked on the
    score-weighted concepts with positional and type embeddings added."""
    n, k, d = H.shape
    if v.shape != (n, d) or s.shape != (n, k):
        raise ShapeMismatch(
            f"inconsistent shapes: v {v.shape}, H {H.shape}, s {s.shape}"
        )
    if params.pos_embed.shape != (k, d):
        raise ShapeMismatch(
            f"pos_embed {params.pos_embed.shape} does not match k={k}, dim={d}"
        )
    weights = _softmax(s, axis=1)  # (n, k)
    concept_rows = weights[:, :, None] * H + params.pos_embed[None] + params.type1[None, None]
    feature_row = (v + params.type0)[:, None, :]  # (n, 1, d)
    m = np.concatenate([feature_row, concept_rows], axis=1)  # (n, 1+k, d)
    return m, weights


def build_M(v_r, retrieved, params: AugmenterParams) -> np.ndarray:
    """Single-feature key/value matrix of shape (1+k, dim)."""
    v = np.asarray(v_r, dtype=np.float64).reshape(1, -1)
    H = np.asarray(retrieved.embeddings, dtype=np.float64)[None]
    s = np.asarray(retrieved.scores, dtype=np.float64)[None]
    m, _ = _build_m_batch(v, H, s, params)
    return m[0]


def _decoder_batch(m: np.ndarray, params: AugmenterParams):
    """Run the decoder stack; returns final queries and per-layer caches."""
    n = m.shape[0]
    d, h, dh = params.dim, params.heads, params.head_dim
    scale = 1.0 / np.sqrt(dh)
    q = np.broadcast_to(params.query_seed, (n, d)).copy()
    caches = []
    for layer in params.layers:
        q_in = q
        qh = (q_in @ layer.w_q).reshape(n, h, dh)
        kh = (m @ layer.w_k).reshape(n, -1, h, dh)
        vh = (m @ layer.w_v).reshape(n, -1, h, dh)
        logits = np.einsum("nhe,nkhe->nhk", qh, kh) * scale
        attn = _softmax(logits, axis=-1)
        ctx = np.einsum("nhk,nkhe->nhe", attn, vh).reshape(n, d)
        q_mid = q_in + ctx @ layer.w_o
        u = q_mid @ layer.ffn_w1 + layer.ffn_b1
        a = _act(u, params.activation)
        q = q_mid + a @ layer.ffn_w2 + layer.ffn_b2
        caches.append(
            {"q_in": q_in, "qh": qh, "kh": kh, "vh": vh, "attn": attn,
             "ctx": ctx, "q_mid": q_mid, "u": u, "a": a}
        )
    return q, caches


def decoder_forward(m, params: AugmenterParams) -> np.ndarray:
    """Decode one (1+k, dim) key/value matrix into the fine feature vector."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != params.dim:
        raise ShapeMismatch(f"expected (1+k, {params.dim}) matrix, got {m.shape}")
    q, _ = _decoder_batch(m[None], params)
    out = q[0]
    if not np.all(np.isfinite(out)):
        raise NonFiniteIntermediate("decoder output overflowed; are inputs normalized?")
    return out


def _forward_batch(batch: RafBatch, params: AugmenterParams):
    """Full augmentation forward with caches for the backward pass."""
    v = np.asarray(batch.visual_features, dtype=np.float64)
    m, weights = _build_m_batch(v, batch.concept_embeddings, batch.concept_scores, params)
    fine, caches = _decoder_batch(m, params)
    coarse = v @ params.proj_w + params.proj_b
    raw = coarse + fine
    norms = np.linalg.norm(raw, axis=1)
    if not (np.all(np.isfinite(raw)) and np.all(norms > 0.0)):
        raise NonFiniteIntermediate("augmented feature is non-finite or zero")
    unit = raw / norms[:, None]
    return {
        "v": v, "m": m, "weights": weights, "caches": caches,
        "raw": raw, "norms": norms, "unit": unit,
    }


def augment(v_r, retrieved, params: AugmenterParams) -> np.ndarray:
    """Augment one visual feature; returns a unit-norm vector."""
    batch = RafBatch.from_retrieved(
        np.asarray(v_r, dtype=np.float64).reshape(1, -1), [retrieved]
    )
    return _forward_batch(batch, params)["unit"][0]


def augment_batch(batch: RafBatch, params: AugmenterParams) -> np.ndarray:
    """Augment a batch of features; returns (N, dim) unit-norm rows."""
    return _forward_batch(batch, params)["unit"]


def aux_logits(v_aug, categories: EmbeddingTable) -> np.ndarray:
    """Dot products of an augmented feature against every category row."""
    v_aug = np.asarray(v_aug, dtype=np.float64)
    if v_aug.shape[-1] != categories.dim:
        raise ShapeMismatch(f"feature dim {v_aug.shape[-1]} != table dim {categories.dim}")
    return v_aug @ categories.vectors.T


def pseudo_label(v_r, train_categories: EmbeddingTable) -> int:
    """Index of the most similar training category; ties go to the lowest index."""
    scores = aux_logits(v_r, train_categories)
    return int(np.argmax(scores))


def pseudo_labels(v: np.ndarray, train_categories: EmbeddingTable) -> np.ndarray:
    return np.argmax(np.asarray(v, dtype=np.float64) @ train_categories.vectors.T, axis=1)


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------


def _loss_terms(state: dict, train_categories: EmbeddingTable):
    """Cross entropy against pseudo-labels plus squared drift from the input."""
    v, raw, unit = state["v"], state["raw"], state["unit"]
    t = train_categories.vectors
    labels = np.argmax(v @ t.T, axis=1)
    logits = unit @ t.T  # (n, C)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    log_probs = shifted - log_z[:, None]
    n = v.shape[0]
    cls = float(-np.mean(log_probs[np.arange(n), labels]))
    reg = float(np.mean(np.sum((raw - v) ** 2, axis=1)))
    probs = np.exp(log_probs)
    return cls, reg, labels, probs, logits


def raf_loss(
    batch: RafBatch,
    params: AugmenterParams,
    train_categories: EmbeddingTable,
    hp: RafHyperParams,
) -> RafLossResult:
    state = _forward_batch(batch, params)
    cls, reg, _, _, _ = _loss_terms(state, train_categories)
    return RafLossResult(hp.beta_cls * cls + hp.beta_reg * reg, cls, reg)


def raf_loss_and_grad(
    batch: RafBatch,
    params: AugmenterParams,
    train_categories: EmbeddingTable,
    hp: RafHyperParams,
) -> tuple[RafLossResult, AugmenterParams]:
    """Loss plus exact parameter gradients by reverse accumulation."""
    state = _forward_batch(batch, params)
    cls, reg, labels, probs, _ = _loss_terms(state, train_categories)
    result = RafLossResult(hp.beta_cls * cls + hp.beta_reg * reg, cls, reg)

    v, m, raw, norms, unit = (
        state["v"], state["m"], state["raw"], state["norms"], state["unit"]
    )
    n, d = v.shape
    grads = params.zeros_like()

    # classification head: d(cls)/d(logits) = softmax - onehot, then through
    # the category table and the L2 normalization of the augmented feature
    g_logits = probs.copy()
    g_logits[np.arange(n), labels] -= 1.0
    g_logits *= hp.beta_cls / n
    g_unit = g_logits @ train_categories.vectors
    g_raw = (g_unit - unit * np.sum(unit * g_unit, axis=1, keepdims=True)) / norms[:, None]
    # regularization: d/d(raw) of mean squared drift
    g_raw = g_raw + (2.0 * hp.beta_reg / n) * (raw - v)

    grads.proj_w += v.T @ g_raw
    grads.proj_b += g_raw.sum(axis=0)

    g_q = g_raw
    g_m = np.zeros_like(m)
    h, dh = params.heads, params.head_dim
    scale = 1.0 / np.sqrt(dh)
    for layer, cache, g_layer in zip(
        reversed(params.layers), reversed(state["caches"]), reversed(grads.layers)
    ):
        q_in, qh, kh, vh = cache["q_in"], cache["qh"], cache["kh"], cache["vh"]
        attn, ctx, q_mid, u, a = (
            cache["attn"], cache["ctx"], cache["q_mid"], cache["u"], cache["a"]
        )
        # FFN block: q_out = q_mid + act(q_mid W1 + b1) W2 + b2
        g_f = g_q
        g_layer.ffn_w2 += a.T @ g_f
        g_layer.ffn_b2 += g_f.sum(axis=0)
        g_u = (g_f @ layer.ffn_w2.T) * _act_grad(u, params.activation)
        g_layer.ffn_w1 += q_mid.T @ g_u
        g_layer.ffn_b1 += g_u.sum(axis=0)
        g_qmid = g_q + g_u @ layer.ffn_w1.T
        # attention block: q_mid = q_in + (attn over M) W_o
        g_ca = g_qmid
        g_layer.w_o += ctx.T @ g_ca
        g_ctx = (g_ca @ layer.w_o.T).reshape(n, h, dh)
        g_attn = np.einsum("nhe,nkhe->nhk", g_ctx, vh)
        g_vh = np.einsum("nhk,nhe->nkhe", attn, g_ctx)
        g_att_logits = attn * (g_attn - np.sum(attn * g_attn, axis=-1, keepdims=True))
        g_qh = np.einsum("nhk,nkhe->nhe", g_att_logits, kh) * scale
        g_kh = np.einsum("nhk,nhe->nkhe", g_att_logits, qh) * scale
        g_qf = g_qh.reshape(n, d)
        g_layer.w_q += q_in.T @ g_qf
        g_kf = g_kh.reshape(n, -1, d)
        g_layer.w_k += np.einsum("nkd,nke->de", m, g_kf)
        g_vf = g_vh.reshape(n, -1, d)
        g_layer.w_v += np.einsum("nkd,nke->de", m, g_vf)
        g_m += g_kf @ layer.w_k.T + g_vf @ layer.w_v.T
        g_q = g_qmid + g_qf @ layer.w_q.T

    grads.query_seed += g_q.sum(axis=0)
    grads.type0 += g_m[:, 0, :].sum(axis=0)
    grads.pos_embed += g_m[:, 1:, :].sum(axis=0)
    grads.type1 += g_m[:, 1:, :].sum(axis=(0, 1))

    for name, tensor in grads.tensors():
        if not np.all(np.isfinite(tensor)):
            raise NonFiniteGradient(f"gradient for {name} is non-finite")
    return result, grads


def raf_grad(
    batch: RafBatch,
    params: AugmenterParams,
    train_categories: EmbeddingTable,
    hp: RafHyperParams,
) -> AugmenterParams:
    return raf_loss_and_grad(batch, params, train_categories, hp)[1]


def train(
    batches: list[RafBatch],
    params: AugmenterParams,
    train_categories: EmbeddingTable,
    hp: RafHyperParams,
) -> tuple[AugmenterParams, list[tuple[int, float, float, float]]]:
    """Plain gradient descent over the batches, cycled round-robin.

    The trace records (iteration, loss, cls, reg) evaluated at the
    parameters before each update.  Raises DivergenceDetected on a
    non-finite loss.
    """
    params = params.copy()
    trace: list[tuple[int, float, float, float]] = []
    for it in range(hp.iterations):
        batch = batches[it % len(batches)]
        try:
            result, grads = raf_loss_and_grad(batch, params, train_categories, hp)
        except (NonFiniteIntermediate, NonFiniteGradient) as exc:
            raise DivergenceDetected(f"iteration {it}: {exc}") from exc
        if not np.isfinite(result.loss):
            raise DivergenceDetected(f"loss became non-finite at iteration {it}")
        trace.append((it, result.loss, result.cls, result.reg))
        for (_, tensor), (_, grad) in zip(params.tensors(), grads.tensors()):
            tensor -= hp.learning_rate * grad
    return params, trace


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<8sIIIIII")


def save_checkpoint(path: str | Path, params: AugmenterParams) -> None:
    """Write header, geometry block, then tensors in declaration order (f32 LE)."""
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                params.dim, params.ffn_dim, params.heads,
                len(params.layers), params.k,
            )
        )
        for _, tensor in params.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, activation: str = "gelu") -> AugmenterParams:
    """Read a checkpoint; the activation is configuration, not stored state."""
    with open(path, "rb") as fh:
        header = fh.read(_CKPT_HEADER.size)
        if len(header) != _CKPT_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, dim, ffn_dim, heads, n_layers, k = _CKPT_HEADER.unpack(header)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        hp = RafHyperParams(
            k=k, layers=n_layers, heads=heads, ffn_dim=ffn_dim, activation=activation
        )
        params = init_params(dim, hp, seed=0)

        def read_into(tensor: np.ndarray) -> None:
            raw = fh.read(tensor.size * 4)
            if len(raw) != tensor.size * 4:
                raise FormatError(f"{path}: truncated tensor payload")
            tensor[...] = np.frombuffer(raw, dtype="<f4").reshape(tensor.shape)

        for _, tensor in params.tensors():
            read_into(tensor)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensors")
    params.validate()
    return params


# ---------------------------------------------------------------------------
# finite differences (used by the gradcheck command and the test suite)
# ---------------------------------------------------------------------------


def finite_difference_grads(loss_fn, params: AugmenterParams, step: float = 1e-4) -> AugmenterParams:
    """Central finite differences of loss_fn over every parameter element."""
    grads = params.zeros_like()
    for (_, tensor), (_, grad) in zip(params.tensors(), grads.tensors()):
        flat_t = tensor.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_t.size):
            original = flat_t[i]
            flat_t[i] = original + step
            plus = loss_fn(params)
            flat_t[i] = original - step
            minus = loss_fn(params)
            flat_t[i] = original
            flat_g[i] = (plus - minus) / (2.0 * step)
    return grads


def max_relative_error(analytic: AugmenterParams, numeric: AugmenterParams) -> float:
    """Worst elementwise relative disagreement between two gradient sets.

    The denominator floor reflects the precision of central differences at
    step ~1e-4 in double precision: elements smaller than a microunit are
    compared absolutely at that noise scale instead of relatively.
    """
    worst = 0.0
    for (_, a), (_, b) in zip(analytic.tensors(), numeric.tensors()):
        denom = np.maximum(np.abs(a) + np.abs(b), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst
