"""Encoder-decoder Transformer that maps (context, query input) to (mu, sigma).

The context record is compressed into M = m/L patch embeddings by a small
RNN (one run per patch, zero initial state, last hidden state through a
square linear map), so encoder self-attention works over M positions instead
of m. The decoder consumes n_in initial-condition samples plus the remaining
query inputs, attends causally over itself and freely over the encoder
output, and a final linear head emits a Gaussian mean and standard deviation
for every query position after the initial conditions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamSet, Tensor, ops
from .datagen import Minibatch
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 12  # encoder depth and decoder depth, each
    n_heads: int = 4
    d_ff: int = None  # type: ignore[assignment]  # resolved to 4*d_model
    n_in: int = 10
    patch_len: int = 1  # L; 1 disables patching
    n_u: int = 1
    n_y: int = 1
    sigma_min: float = 1e-4
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model < 1 or self.n_layers < 1 or self.n_heads < 1 or self.d_ff < 1:
            raise ConfigError("d_model, n_layers, n_heads, d_ff must all be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.patch_len < 1:
            raise ConfigError(f"patch_len must be >= 1, got {self.patch_len}")
        if self.n_in < 1:
            raise ConfigError(f"n_in must be >= 1, got {self.n_in}")
        if self.n_u < 1 or self.n_y < 1:
            raise ConfigError("n_u and n_y must be >= 1")
        if self.sigma_min <= 0:
            raise ConfigError(f"sigma_min must be positive, got {self.sigma_min}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class PredDist:
    """Predicted Gaussian per query position past the initial conditions.

    mu and sigma have shape (b, N - n_in, n_y); sigma >= sigma_min everywhere.
    """

    mu: Tensor
    sigma: Tensor


def _attn_shapes(prefix: str, d: int):
    # No key bias: softmax is invariant to constant row shifts, so a key bias
    # has identically zero gradient and could never train.
    for name in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{name}", (d, d)
    for name in ("bq", "bv", "bo"):
        yield f"{prefix}.{name}", (d,)


def _block_shapes(prefix: str, d: int, d_ff: int, cross: bool):
    yield f"{prefix}.ln1.g", (d,)
    yield f"{prefix}.ln1.b", (d,)
    yield from _attn_shapes(f"{prefix}.self", d)
    yield f"{prefix}.ln2.g", (d,)
    yield f"{prefix}.ln2.b", (d,)
    if cross:
        yield from _attn_shapes(f"{prefix}.cross", d)
        yield f"{prefix}.ln3.g", (d,)
        yield f"{prefix}.ln3.b", (d,)
    yield f"{prefix}.ff.w1", (d, d_ff)
    yield f"{prefix}.ff.b1", (d_ff,)
    yield f"{prefix}.ff.w2", (d_ff, d)
    yield f"{prefix}.ff.b2", (d,)


def _param_shapes(cfg: ModelConfig):
    """Canonical (name, shape) enumeration; fixes parameter order everywhere."""
    d, d_ff = cfg.d_model, cfg.d_ff
    c_in = cfg.n_u + cfg.n_y
    if cfg.patch_len > 1:
        yield "patch_rnn.w_in", (c_in, d)
        yield "patch_rnn.w_rec", (d, d)
        yield "patch_rnn.bias", (d,)
        yield "patch_proj.w", (d, d)
        yield "patch_proj.b", (d,)
    else:
        yield "ctx_embed.w", (c_in, d)
        yield "ctx_embed.b", (d,)
    for i in range(cfg.n_layers):
        yield from _block_shapes(f"enc.{i}", d, d_ff, cross=False)
    yield "enc.norm.g", (d,)
    yield "enc.norm.b", (d,)
    yield "ic_embed.w", (c_in, d)
    yield "ic_embed.b", (d,)
    yield "qry_embed.w", (cfg.n_u, d)
    yield "qry_embed.b", (d,)
    for i in range(cfg.n_layers):
        yield from _block_shapes(f"dec.{i}", d, d_ff, cross=True)
    yield "dec.norm.g", (d,)
    yield "dec.norm.b", (d,)
    yield "head.w", (d, 2 * cfg.n_y)
    yield "head.b", (2 * cfg.n_y,)


def param_count(cfg: ModelConfig) -> int:
    """Exact number of trainable scalars for a configuration."""
    return int(sum(np.prod(shape, dtype=np.int64) for _, shape in _param_shapes(cfg)))


def positional_encoding(length: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal code: sin/cos pairs over geometrically spaced periods."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / d)
    pe = np.zeros((length, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(dtype)


class MetaModel:
    """The meta-model: parameters plus the forward computation."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        for name, shape in _param_shapes(cfg):
            self.params.add(name, self._init_value(name, shape, rng), dtype=dtype)
        self._pe_cache: dict = {}

    @staticmethod
    def _init_value(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",) or name.endswith("ln1.g") or name.endswith("ln2.g") or name.endswith("ln3.g"):
            return np.ones(shape)
        if leaf.startswith("b") or leaf == "bias":
            return np.zeros(shape)
        if name == "patch_rnn.w_rec":
            # Orthogonal recurrence keeps the short patch scan well conditioned.
            q, r = np.linalg.qr(rng.standard_normal(shape))
            return q * np.sign(np.diag(r))
        fan_in, fan_out = shape
        std = np.sqrt(2.0 / (fan_in + fan_out))
        return rng.normal(0.0, std, size=shape)

    # -- building blocks -------------------------------------------------

    def _pe(self, length: int) -> Tensor:
        key = (length, self.dtype)
        if key not in self._pe_cache:
            self._pe_cache[key] = Tensor(
                positional_encoding(length, self.cfg.d_model, dtype=self.dtype)
            )
        return self._pe_cache[key]

    def _attention(self, prefix: str, q_src: Tensor, kv_src: Tensor | None, causal: bool) -> Tensor:
        """One attention sublayer; kv_src=None means self-attention."""
        p = self.params
        if kv_src is None:
            kv_src = q_src
        q = ops.linear(q_src, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
        k = ops.matmul(kv_src, p[f"{prefix}.wk"])
        v = ops.linear(kv_src, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        return ops.multi_head_attention(
            q, k, v, p[f"{prefix}.wo"], p[f"{prefix}.bo"], self.cfg.n_heads, causal=causal
        )

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = ops.relu(ops.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return ops.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _maybe_dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        if train and self.cfg.dropout > 0.0:
            return ops.dropout(x, self.cfg.dropout, rng)
        return x

    def _as_tensor(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))

    # -- model stages ------------------------------------------------------

    def patch_embed(self, ctx_u, ctx_y) -> Tensor:
        """Compress the context into (b, M, d_model) patch vectors."""
        cu = np.asarray(ctx_u, dtype=self.dtype)
        cy = np.asarray(ctx_y, dtype=self.dtype)
        if cu.ndim == 1:
            cu, cy = cu[None], cy[None]
        if cu.shape != cy.shape:
            raise DimensionError(f"ctx_u shape {cu.shape} != ctx_y shape {cy.shape}")
        b, m = cu.shape
        L = self.cfg.patch_len
        if m % L != 0:
            raise ConfigError(f"context length {m} is not divisible by patch_len {L}")
        x = self._as_tensor(np.stack([cu, cy], axis=-1))  # (b, m, 2)
        if L == 1:
            return ops.linear(x, self.params["ctx_embed.w"], self.params["ctx_embed.b"])
        M = m // L
        xp = ops.reshape(x, (b * M, L, self.cfg.n_u + self.cfg.n_y))
        h0 = Tensor(np.zeros(self.cfg.d_model, dtype=self.dtype))
        h = ops.rnn_scan(
            xp,
            self.params["patch_rnn.w_in"],
            self.params["patch_rnn.w_rec"],
            self.params["patch_rnn.bias"],
            h0,
        )
        last = h[:, L - 1, :]
        proj = ops.linear(last, self.params["patch_proj.w"], self.params["patch_proj.b"])
        return ops.reshape(proj, (b, M, self.cfg.d_model))

    def encode(self, patches: Tensor, train: bool = False, rng=None) -> Tensor:
        """Bidirectional pre-norm encoder over the patch sequence."""
        M = patches.shape[1]
        x = patches + self._pe(M)
        for i in range(self.cfg.n_layers):
            pre = f"enc.{i}"
            a = self._attention(f"{pre}.self", self._ln(f"{pre}.ln1", x), None, causal=False)
            x = x + self._maybe_dropout(a, train, rng)
            f = self._ff(f"{pre}.ff", self._ln(f"{pre}.ln2", x))
            x = x + self._maybe_dropout(f, train, rng)
        return self._ln("enc.norm", x)

    def decode(self, zeta: Tensor, ic_u, ic_y, qry_u, train: bool = False, rng=None) -> PredDist:
        """Causal decoder with cross-attention to the encoded context.

        ic_u, ic_y: (b, n_in[, n_u|n_y]); qry_u: (b, N - n_in[, n_u]) holding
        the query inputs after the initial conditions.
        """
        cfg = self.cfg
        iu = np.asarray(ic_u, dtype=self.dtype)
        iy = np.asarray(ic_y, dtype=self.dtype)
        qu = np.asarray(qry_u, dtype=self.dtype)
        if iu.ndim == 2:
            iu = iu[..., None]
        if iy.ndim == 2:
            iy = iy[..., None]
        if qu.ndim == 2:
            qu = qu[..., None]
        if iu.shape[1] != cfg.n_in or iy.shape[1] != cfg.n_in:
            raise DimensionError(
                f"initial-condition length {iu.shape[1]}/{iy.shape[1]} != n_in={cfg.n_in}"
            )
        ic = self._as_tensor(np.concatenate([iu, iy], axis=-1))
        qe = self._as_tensor(qu)
        ice = ops.linear(ic, self.params["ic_embed.w"], self.params["ic_embed.b"])
        qee = ops.linear(qe, self.params["qry_embed.w"], self.params["qry_embed.b"])
        x = ops.concat([ice, qee], axis=1)  # (b, N, d)
        n_total = x.shape[1]
        x = x + self._pe(n_total)
        for i in range(cfg.n_layers):
            pre = f"dec.{i}"
            a = self._attention(f"{pre}.self", self._ln(f"{pre}.ln1", x), None, causal=True)
            x = x + self._maybe_dropout(a, train, rng)
            c = self._attention(f"{pre}.cross", self._ln(f"{pre}.ln2", x), zeta, causal=False)
            x = x + self._maybe_dropout(c, train, rng)
            f = self._ff(f"{pre}.ff", self._ln(f"{pre}.ln3", x))
            x = x + self._maybe_dropout(f, train, rng)
        x = self._ln("dec.norm", x)
        # Position n_in + j (0-based) predicts the target at time n_in + j + 1,
        # having seen inputs up to that same time through the causal mask.
        out = ops.linear(x[:, cfg.n_in :, :], self.params["head.w"], self.params["head.b"])
        mu = out[:, :, : cfg.n_y]
        sigma = ops.softplus(out[:, :, cfg.n_y :]) + cfg.sigma_min
        return PredDist(mu=mu, sigma=sigma)

    def forward(self, batch: Minibatch, train: bool = False, rng=None) -> PredDist:
        """Full pass over a minibatch; differentiable end to end."""
        if batch.n_in != self.cfg.n_in:
            raise DimensionError(f"batch n_in={batch.n_in} != model n_in={self.cfg.n_in}")
        patches = self.patch_embed(batch.ctx_u, batch.ctx_y)
        zeta = self.encode(patches, train=train, rng=rng)
        n_in = self.cfg.n_in
        return self.decode(
            zeta,
            batch.qry_u[:, :n_in],
            batch.qry_y[:, :n_in],
            batch.qry_u[:, n_in:],
            train=train,
            rng=rng,
        )

    def param_count(self) -> int:
        return self.params.n_params()
