"""The four bag-level MIL networks: MeanMIL, MaxMIL, ABMIL, TransMIL.

Every head maps an m x D feature bag to B=4 time-bin logits. Architectures
are pinned so trainable parameter counts are exact contracts at D=1024
with the default widths:

    MeanMIL / MaxMIL  526,852
    ABMIL             592,645
    TransMIL        2,673,172

MeanMIL/MaxMIL pool per-instance logits; ABMIL is the non-gated attention
variant; TransMIL stacks two Nystrom-attention layers around a pyramid of
depthwise positional convolutions on a square-reshaped token grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigurationError, ContractError
from .rng import Rng

HEAD_KINDS = ("mean", "max", "abmil", "transmil")
BINS = 4  # fixed output width; the survival objective depends on it


@dataclass(frozen=True)
class TransmilConfig:
    layers: int = 2
    heads: int = 8
    head_dim: int = 64
    landmarks: int = 256
    pinv_iterations: int = 6
    residual_kernel: int = 33

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    input_dim: int
    hidden_dim: int = 512
    attn_dim: int = 128  # ABMIL only
    bins: int = BINS
    dropout_rate: float = 0.25
    transmil: TransmilConfig = field(default_factory=TransmilConfig)

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.bins != BINS:
            raise ConfigurationError(f"bins is fixed at {BINS}, got {self.bins}")
        if min(self.input_dim, self.hidden_dim, self.attn_dim) < 1:
            raise ConfigurationError("head dimensions must be positive")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kind == "transmil":
            t = self.transmil
            if min(t.layers, t.heads, t.head_dim, t.landmarks, t.pinv_iterations) < 1:
                raise ConfigurationError("transmil sub-config values must be positive")
            if t.residual_kernel % 2 == 0:
                raise ConfigurationError("transmil residual kernel must be odd")


def parameter_count(config: HeadConfig) -> int:
    """Exact trainable-scalar count (weights, biases, norm affines, class
    token) for a head built from ``config``; pure arithmetic, no build."""
    d, h, b = config.input_dim, config.hidden_dim, config.bins
    embed = d * h + h
    classifier = h * b + b
    if config.kind in ("mean", "max"):
        return embed + classifier
    if config.kind == "abmil":
        a = config.attn_dim
        return embed + (h * a + a) + (a + 1) + classifier
    t = config.transmil
    inner = t.inner_dim
    per_layer = 2 * h + h * 3 * inner + (inner * h + h) + t.heads * t.residual_kernel
    ppeg = h * (7 * 7 + 5 * 5 + 3 * 3) + 3 * h
    return embed + h + t.layers * per_layer + ppeg + 2 * h + classifier


def build_head(config: HeadConfig, rng: Rng, dtype=np.float32) -> "MilHead":
    """Construct and initialize a head; deterministic for a given rng."""
    cls = {"mean": MeanMil, "max": MaxMil, "abmil": AbMil, "transmil": TransMil}[config.kind]
    return cls(config, rng, dtype)


# ---------------------------------------------------------------------------
# parameter initialization


def _uniform_param(rng: Rng, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def _zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class MilHead:
    """Base: an ordered parameter dict plus the forward contract.

    Parameters register in a fixed order so initialization draws, L1 sums,
    and checkpoint layout are deterministic.
    """

    def __init__(self, config: HeadConfig, rng: Rng, dtype):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._rng = rng
        self._build(rng)
        del self._rng

    # registration helpers -------------------------------------------------

    def _linear(self, name: str, fan_in: int, fan_out: int, rng: Rng, bias: bool = True):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{name}.weight"] = _uniform_param(rng, (fan_in, fan_out), bound, self.dtype)
        if bias:
            self.params[f"{name}.bias"] = _zeros_param((fan_out,), self.dtype)

    def _norm(self, name: str, width: int):
        self.params[f"{name}.gain"] = Tensor(np.ones(width, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.shift"] = _zeros_param((width,), self.dtype)

    def _conv(self, name: str, channels: int, kh: int, kw: int, rng: Rng, bias: bool):
        bound = 1.0 / np.sqrt(kh * kw)  # depthwise: one input channel per group
        self.params[f"{name}.weight"] = _uniform_param(rng, (channels, kh, kw), bound, self.dtype)
        if bias:
            self.params[f"{name}.bias"] = _zeros_param((channels,), self.dtype)

    def _build(self, rng: Rng):
        raise NotImplementedError

    # parameter access ------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def weight_tensors(self) -> list[Tensor]:
        """Linear/conv kernels only — the set the L1 penalty applies to."""
        return [t for n, t in self.params.items() if n.endswith(".weight")]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def _check_bag(self, bag: Tensor) -> None:
        if bag.ndim != 2 or bag.shape[1] != self.config.input_dim:
            raise ContractError(
                f"bag shape {bag.shape} does not match input_dim {self.config.input_dim}"
            )
        if bag.shape[0] < 1:
            raise ContractError("bag must contain at least one instance")

    def forward(self, bag, training: bool = False, rng: Rng | None = None,
                tape: Tape | None = None) -> Tensor:
        """Bag (m x D) to B logits; evaluation mode is deterministic."""
        raise NotImplementedError

    def __call__(self, bag, **kwargs) -> Tensor:
        return self.forward(bag, **kwargs)


class _PooledMil(MilHead):
    """Shared body of MeanMIL / MaxMIL: per-instance logits, then pooling."""

    pool_kind = ""

    def _build(self, rng: Rng):
        cfg = self.config
        self._linear("embed", cfg.input_dim, cfg.hidden_dim, rng)
        self._linear("classifier", cfg.hidden_dim, cfg.bins, rng)

    def forward(self, bag, training=False, rng=None, tape=None) -> Tensor:
        bag = ad.as_tensor(bag)
        self._check_bag(bag)
        p = self.params
        h = ad.relu(ad.linear(bag, p["embed.weight"], p["embed.bias"], tape), tape)
        h = ad.dropout(h, self.config.dropout_rate, rng, training, tape)
        inst_logits = ad.linear(h, p["classifier.weight"], p["classifier.bias"], tape)
        return ad.reduce(inst_logits, self.pool_kind, axis=0, tape=tape)


class MeanMil(_PooledMil):
    pool_kind = "mean"


class MaxMil(_PooledMil):
    pool_kind = "max"


class AbMil(MilHead):
    """Attention pooling: softmax-weighted sum of instance embeddings."""

    def _build(self, rng: Rng):
        cfg = self.config
        self._linear("embed", cfg.input_dim, cfg.hidden_dim, rng)
        self._linear("attn_hidden", cfg.hidden_dim, cfg.attn_dim, rng)
        self._linear("attn_score", cfg.attn_dim, 1, rng)
        self._linear("classifier", cfg.hidden_dim, cfg.bins, rng)

    def _embed(self, bag, training, rng, tape) -> Tensor:
        p = self.params
        h = ad.relu(ad.linear(bag, p["embed.weight"], p["embed.bias"], tape), tape)
        return ad.dropout(h, self.config.dropout_rate, rng, training, tape)

    def _scores(self, emb, tape) -> Tensor:
        p = self.params
        hid = ad.tanh(ad.linear(emb, p["attn_hidden.weight"], p["attn_hidden.bias"], tape), tape)
        return ad.linear(hid, p["attn_score.weight"], p["attn_score.bias"], tape)

    def instance_attention(self, bag) -> np.ndarray:
        """Evaluation-mode attention weights over instances (sums to 1)."""
        bag = ad.as_tensor(bag)
        self._check_bag(bag)
        emb = self._embed(bag, False, None, None)
        alpha = ad.softmax(self._scores(emb, None), axis=0, tape=None)
        return alpha.data.reshape(-1).copy()

    def forward(self, bag, training=False, rng=None, tape=None) -> Tensor:
        bag = ad.as_tensor(bag)
        self._check_bag(bag)
        p = self.params
        emb = self._embed(bag, training, rng, tape)
        alpha = ad.softmax(self._scores(emb, tape), axis=0, tape=tape)  # (m, 1)
        pooled = ad.matmul(ad.transpose(alpha, (1, 0), tape), emb, tape)  # (1, H)
        logits = ad.linear(pooled, p["classifier.weight"], p["classifier.bias"], tape)
        return ad.reshape(logits, (self.config.bins,), tape)


class TransMil(MilHead):
    """Two Nystrom-attention layers with a positional conv pyramid between
    them, classifying from a learnable class token.

    The instance sequence is padded to the next perfect square by cyclic
    repetition of its leading instances so non-class tokens can be laid out
    on a square grid for the positional convolutions. Output therefore
    depends on instance order (documented: not permutation invariant).
    """

    def _build(self, rng: Rng):
        cfg, t = self.config, self.config.transmil
        h = cfg.hidden_dim
        self._linear("embed", cfg.input_dim, h, rng)
        self.params["cls_token"] = Tensor(
            rng.uniform(-0.02, 0.02, (1, h)).astype(self.dtype), requires_grad=True
        )
        for i in range(t.layers):
            self._norm(f"layer{i}.norm", h)
            self._linear(f"layer{i}.attn.qkv", h, 3 * t.inner_dim, rng, bias=False)
            self._linear(f"layer{i}.attn.out", t.inner_dim, h, rng)
            self._conv(f"layer{i}.attn.res_conv", t.heads, t.residual_kernel, 1, rng, bias=False)
        for k in (7, 5, 3):
            self._conv(f"ppeg.conv{k}", h, k, k, rng, bias=True)
        self._norm("final_norm", h)
        self._linear("classifier", h, cfg.bins, rng)

    # pieces ---------------------------------------------------------------

    def _nystrom_attention(self, x: Tensor, layer: int, tape) -> Tensor:
        """Landmark-factorized softmax self-attention with an iterative
        pseudo-inverse and a depthwise residual convolution over values."""
        t = self.config.transmil
        p = self.params
        n = x.shape[0]
        landmarks = min(t.landmarks, n)
        seg = -(-n // landmarks)  # ceil: landmark segment length
        padded = seg * landmarks
        if padded != n:  # front-pad with zeros so segments divide evenly
            zeros = ad.as_tensor(np.zeros((padded - n, x.shape[1]), dtype=x.dtype))
            x = ad.concat([zeros, x], axis=0, tape=tape)

        qkv = ad.linear(x, p[f"layer{layer}.attn.qkv.weight"], None, tape)
        inner = t.inner_dim
        q = _to_heads(ad.slice_axis(qkv, 1, 0, inner, tape), t.heads, tape)
        k = _to_heads(ad.slice_axis(qkv, 1, inner, 2 * inner, tape), t.heads, tape)
        v = _to_heads(ad.slice_axis(qkv, 1, 2 * inner, 3 * inner, tape), t.heads, tape)
        q = ad.mul(q, float(t.head_dim) ** -0.5, tape)

        q_land = _segment_mean(q, landmarks, seg, tape)
        k_land = _segment_mean(k, landmarks, seg, tape)

        kt = ad.transpose(k, (0, 2, 1), tape)
        klt = ad.transpose(k_land, (0, 2, 1), tape)
        attn1 = ad.softmax(ad.matmul(q, klt, tape), axis=-1, tape=tape)       # (h, n', L)
        attn2 = ad.softmax(ad.matmul(q_land, klt, tape), axis=-1, tape=tape)  # (h, L, L)
        attn3 = ad.softmax(ad.matmul(q_land, kt, tape), axis=-1, tape=tape)   # (h, L, n')
        pinv = _iterative_pinv(attn2, t.pinv_iterations, tape)
        out = ad.matmul(ad.matmul(attn1, pinv, tape), ad.matmul(attn3, v, tape), tape)

        res_w = p[f"layer{layer}.attn.res_conv.weight"]  # (heads, kernel, 1) over sequence
        out = ad.add(out, ad.depthwise_conv2d(v, res_w, None, tape), tape)

        if padded != n:
            out = ad.slice_axis(out, 1, padded - n, padded, tape)
        merged = ad.reshape(ad.transpose(out, (1, 0, 2), tape), (n, inner), tape)
        return ad.linear(merged, p[f"layer{layer}.attn.out.weight"],
                         p[f"layer{layer}.attn.out.bias"], tape)

    def _translayer(self, seq: Tensor, layer: int, tape) -> Tensor:
        p = self.params
        normed = ad.layer_norm(seq, p[f"layer{layer}.norm.gain"],
                               p[f"layer{layer}.norm.shift"], tape=tape)
        return ad.add(seq, self._nystrom_attention(normed, layer, tape), tape)

    def _ppeg(self, seq: Tensor, grid: int, tape) -> Tensor:
        """Sum of 7x7 / 5x5 / 3x3 depthwise convolutions over the non-class
        tokens laid out on a grid x grid map, plus the identity."""
        p = self.params
        h = self.config.hidden_dim
        cls_tok = ad.slice_axis(seq, 0, 0, 1, tape)
        tokens = ad.slice_axis(seq, 0, 1, seq.shape[0], tape)
        fmap = ad.reshape(ad.transpose(tokens, (1, 0), tape), (h, grid, grid), tape)
        out = fmap
        for ksize in (7, 5, 3):
            conv = ad.depthwise_conv2d(fmap, p[f"ppeg.conv{ksize}.weight"],
                                       p[f"ppeg.conv{ksize}.bias"], tape)
            out = ad.add(out, conv, tape)
        flat = ad.transpose(ad.reshape(out, (h, grid * grid), tape), (1, 0), tape)
        return ad.concat([cls_tok, flat], axis=0, tape=tape)

    def forward(self, bag, training=False, rng=None, tape=None) -> Tensor:
        bag = ad.as_tensor(bag)
        self._check_bag(bag)
        p = self.params
        m = bag.shape[0]
        h = ad.relu(ad.linear(bag, p["embed.weight"], p["embed.bias"], tape), tape)
        h = ad.dropout(h, self.config.dropout_rate, rng, training, tape)

        grid = int(np.ceil(np.sqrt(m)))
        pad = grid * grid - m
        if pad:
            h = ad.concat([h, ad.take_rows(h, np.arange(pad) % m, tape)], axis=0, tape=tape)
        seq = ad.concat([p["cls_token"], h], axis=0, tape=tape)

        seq = self._translayer(seq, 0, tape)
        seq = self._ppeg(seq, grid, tape)
        seq = self._translayer(seq, 1, tape)
        seq = ad.layer_norm(seq, p["final_norm.gain"], p["final_norm.shift"], tape=tape)
        cls_out = ad.slice_axis(seq, 0, 0, 1, tape)
        logits = ad.linear(cls_out, p["classifier.weight"], p["classifier.bias"], tape)
        return ad.reshape(logits, (self.config.bins,), tape)


# ---------------------------------------------------------------------------
# attention helpers (module-level so they are reusable and testable)


def _to_heads(x: Tensor, heads: int, tape) -> Tensor:
    """(n, heads*dh) -> (heads, n, dh)."""
    n, inner = x.shape
    dh = inner // heads
    return ad.transpose(ad.reshape(x, (n, heads, dh), tape), (1, 0, 2), tape)


def _segment_mean(x: Tensor, landmarks: int, seg: int, tape) -> Tensor:
    """(h, L*seg, dh) -> (h, L, dh) by averaging consecutive segments."""
    hn, _, dh = x.shape
    if seg == 1:
        return x
    return ad.reduce_mean(ad.reshape(x, (hn, landmarks, seg, dh), tape), axis=2, tape=tape)


def _iterative_pinv(a: Tensor, iters: int, tape) -> Tensor:
    """Moore-Penrose pseudo-inverse of each (stacked) square matrix by
    Newton-Schulz iterations z <- z(13I - az(15I - az(7I - az)))/4,
    initialized z0 = a^T / (max row-sum * max col-sum) per matrix."""
    size = a.shape[-1]
    eye = np.eye(size, dtype=a.dtype)
    i7, i13, i15 = ad.as_tensor(7 * eye), ad.as_tensor(13 * eye), ad.as_tensor(15 * eye)
    absa = ad.absolute(a, tape)
    row = ad.reduce_max(ad.reduce_sum(absa, axis=-1, tape=tape), axis=-1, keepdims=True, tape=tape)
    col = ad.reduce_max(ad.reduce_sum(absa, axis=-2, tape=tape), axis=-1, keepdims=True, tape=tape)
    denom = ad.reshape(ad.mul(row, col, tape), (a.shape[0], 1, 1), tape)
    z = ad.div(ad.transpose(a, (0, 2, 1), tape), denom, tape)
    for _ in range(iters):
        az = ad.matmul(a, z, tape)
        inner = ad.sub(i15, ad.matmul(az, ad.sub(i7, az, tape), tape), tape)
        outer = ad.sub(i13, ad.matmul(az, inner, tape), tape)
        z = ad.mul(ad.matmul(z, outer, tape), 0.25, tape)
    return z


def nystrom_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact softmax attention (numpy, no tape) for consistency checks.
    q is expected pre-scaled, shapes (h, n, dh)."""
    sim = q @ np.swapaxes(k, -1, -2)
    sim = sim - sim.max(axis=-1, keepdims=True)
    attn = np.exp(sim)
    attn /= attn.sum(axis=-1, keepdims=True)
    return attn @ v


def nystrom_attention_single(q, k, v, landmarks: int, pinv_iterations: int = 6,
                             tape: Tape | None = None) -> Tensor:
    """Standalone landmark attention on (h, n, dh) tensors; used by the
    consistency checks against exact attention."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    n = q.shape[1]
    landmarks = min(landmarks, n)
    seg = -(-n // landmarks)
    padded = seg * landmarks
    if padded != n:
        zshape = (q.shape[0], padded - n, q.shape[2])
        zero = ad.as_tensor(np.zeros(zshape, dtype=q.dtype))
        q = ad.concat([zero, q], axis=1, tape=tape)
        k = ad.concat([zero, k], axis=1, tape=tape)
        v = ad.concat([zero, v], axis=1, tape=tape)
    q_land = _segment_mean(q, landmarks, seg, tape)
    k_land = _segment_mean(k, landmarks, seg, tape)
    kt = ad.transpose(k, (0, 2, 1), tape)
    klt = ad.transpose(k_land, (0, 2, 1), tape)
    attn1 = ad.softmax(ad.matmul(q, klt, tape), axis=-1, tape=tape)
    attn2 = ad.softmax(ad.matmul(q_land, klt, tape), axis=-1, tape=tape)
    attn3 = ad.softmax(ad.matmul(q_land, kt, tape), axis=-1, tape=tape)
    pinv = _iterative_pinv(attn2, pinv_iterations, tape)
    out = ad.matmul(ad.matmul(attn1, pinv, tape), ad.matmul(attn3, v, tape), tape)
    if padded != n:
        out = ad.slice_axis(out, 1, padded - n, padded, tape)
    return out


def head_config(kind: str, input_dim: int, **overrides) -> HeadConfig:
    """Convenience constructor used by the CLI and tests."""
    if "transmil" in overrides and isinstance(overrides["transmil"], dict):
        overrides["transmil"] = TransmilConfig(**overrides["transmil"])
    return HeadConfig(kind=kind, input_dim=input_dim, **overrides)
