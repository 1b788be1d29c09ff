"""In-context sequence model: selection layer, label embedder, decoder-only
causal transformer over interleaved (structure, label) tokens, output head,
and the masked sequence loss.

Structure tokens sit at even positions, label tokens at odd positions; the
model's output at each structure position is the prediction for that
example's (standardized) label. Outputs at label positions are computed but
never consumed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass(frozen=True)
class IclConfig:
    model_dim: int = 128
    n_layers: int = 12
    n_heads: int = 4
    max_positions: int = 20
    encoder_dim: int = 768
    use_layernorm: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.max_positions < 2:
            raise ValueError("max_positions must be >= 2")


@dataclass(frozen=True)
class Standardizer:
    """Per-channel encoding statistics and scalar label statistics, fit on
    the training split only."""

    enc_mean: np.ndarray
    enc_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, encodings, labels):
        X = np.asarray(encodings, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        enc_std = X.std(axis=0)
        enc_std = np.where(enc_std < 1e-12, 1.0, enc_std)
        y_std = float(y.std())
        return cls(X.mean(axis=0), enc_std, float(y.mean()), y_std if y_std > 1e-12 else 1.0)

    def encode_x(self, x):
        return (np.asarray(x) - self.enc_mean) / self.enc_std

    def encode_y(self, y):
        return (np.asarray(y) - self.y_mean) / self.y_std

    def decode_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def to_dict(self):
        return {
            "enc_mean": self.enc_mean.tolist(),
            "enc_std": self.enc_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["enc_mean"], dtype=np.float64),
                   np.asarray(d["enc_std"], dtype=np.float64),
                   float(d["y_mean"]), float(d["y_std"]))


@dataclass(frozen=True)
class TokenSequence:
    """Standardized alternating tokens. `encodings` is (n_structs, enc_dim);
    `labels` has n_structs entries or n_structs - 1 at inference."""

    encodings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.encodings)
        if len(self.labels) not in (n, n - 1):
            raise ValueError("labels must cover all pairs or all but the last")

    def __len__(self):
        return len(self.encodings) + len(self.labels)


def assemble_sequence(pairs, standardizer):
    """Build a TokenSequence from (encoding, label-or-None) pairs.

    Only the final pair may omit its label (inference); k full pairs give a
    2k-token sequence, a trailing unlabeled pair gives 2k - 1.
    """
    encs, labels = [], []
    for idx, (enc, label) in enumerate(pairs):
        encs.append(standardizer.encode_x(enc))
        if label is None:
            if idx != len(pairs) - 1:
                raise ValueError(f"missing label in non-final pair {idx}")
        else:
            labels.append(float(standardizer.encode_y(label)))
    return TokenSequence(np.asarray(encs), np.asarray(labels))


def init_icl_params(cfg, seed=0, precision="f32"):
    rng = np.random.default_rng(seed)
    dt = np.float32 if precision == "f32" else np.float64

    def w(*shape, scale=None):
        scale = scale if scale is not None else 1.0 / math.sqrt(shape[0])
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dt), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    d = cfg.model_dim
    params = {
        "select.w": w(cfg.encoder_dim, d),
        "select.b": zeros(d),
        "label_embed.w": w(1, d, scale=1.0),
        "label_embed.b": zeros(d),
        "pos_embed": w(cfg.max_positions, d, scale=0.02),
        "head.w": w(d, 1),
        "head.b": zeros(1),
    }
    for l in range(cfg.n_layers):
        params[f"layer{l}.ln1.g"] = ones(d)
        params[f"layer{l}.ln1.b"] = zeros(d)
        params[f"layer{l}.attn.qkv.w"] = w(d, 3 * d)
        params[f"layer{l}.attn.qkv.b"] = zeros(3 * d)
        params[f"layer{l}.attn.proj.w"] = w(d, d)
        params[f"layer{l}.attn.proj.b"] = zeros(d)
        params[f"layer{l}.ln2.g"] = ones(d)
        params[f"layer{l}.ln2.b"] = zeros(d)
        params[f"layer{l}.mlp.fc.w"] = w(d, 4 * d)
        params[f"layer{l}.mlp.fc.b"] = zeros(4 * d)
        params[f"layer{l}.mlp.proj.w"] = w(4 * d, d)
        params[f"layer{l}.mlp.proj.b"] = zeros(d)
    params["final_ln.g"] = ones(d)
    params["final_ln.b"] = zeros(d)
    return params


def select(enc, params):
    """Affine reduction of one concatenated encoding to the model dim."""
    enc = np.asarray(enc)
    w = params["select.w"]
    if enc.shape != (w.shape[0],):
        raise nc.DimensionError(f"select: expected ({w.shape[0]},), got {enc.shape}")
    return enc @ w.data + params["select.b"].data


def _token_embeddings(enc_batch, label_batch, params, cfg):
    """Interleave selected structure tokens and embedded label tokens.

    enc_batch: Tensor-compatible (B, n_structs, enc_dim) standardized;
    label_batch: (B, n_labels) standardized. Returns Tensor (B, T, d).
    """
    B, n_structs, _ = enc_batch.shape
    n_labels = label_batch.shape[1]
    T = n_structs + n_labels
    if T > cfg.max_positions:
        raise nc.DimensionError(f"sequence length {T} exceeds max positions {cfg.max_positions}")

    s_tok = nc.add(nc.matmul(enc_batch, params["select.w"]), params["select.b"])
    l_tok = nc.add(
        nc.matmul(nc.reshape(label_batch, (B, n_labels, 1)), params["label_embed.w"]),
        params["label_embed.b"],
    )
    # interleave: even positions structures, odd positions labels
    tok = nc.concat([s_tok, l_tok], axis=1)  # (B, n_structs + n_labels, d)
    order = np.empty(T, dtype=np.int64)
    order[0::2] = np.arange(n_structs)
    order[1::2] = n_structs + np.arange(n_labels)
    tok = nc.gather(nc.transpose(tok, (1, 0, 2)), order)  # (T, B, d)
    tok = nc.transpose(tok, (1, 0, 2))
    pos = nc.gather(params["pos_embed"], np.arange(T))
    return nc.add(tok, pos)


def _causal_mask(T, dtype):
    mask = np.full((T, T), -np.inf, dtype=np.float64)
    mask[np.tril_indices(T)] = 0.0
    return mask.astype(dtype)


def _maybe_ln(x, g, b, cfg):
    return nc.layer_norm(x, g, b) if cfg.use_layernorm else x


def forward_tokens(tok, params, cfg):
    """Pre-norm causal transformer over embedded tokens (B, T, d); returns
    head outputs (B, T)."""
    B, T, d = tok.shape
    if T > cfg.max_positions:
        raise nc.DimensionError(f"sequence length {T} exceeds max positions {cfg.max_positions}")
    nh, hd = cfg.n_heads, d // cfg.n_heads
    mask = _causal_mask(T, tok.dtype)
    x = tok
    for l in range(cfg.n_layers):
        h = _maybe_ln(x, params[f"layer{l}.ln1.g"], params[f"layer{l}.ln1.b"], cfg)
        qkv = nc.add(nc.matmul(h, params[f"layer{l}.attn.qkv.w"]), params[f"layer{l}.attn.qkv.b"])
        qkv = nc.reshape(qkv, (B, T, 3, nh, hd))
        qkv = nc.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, nh, T, hd)
        q = nc.reshape(nc.gather(qkv, [0]), (B, nh, T, hd))
        k = nc.reshape(nc.gather(qkv, [1]), (B, nh, T, hd))
        v = nc.reshape(nc.gather(qkv, [2]), (B, nh, T, hd))
        att = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2)))
        att = nc.mul(att, Tensor(np.asarray(1.0 / math.sqrt(hd), dtype=tok.dtype)))
        att = nc.softmax(att, mask=mask)
        o = nc.matmul(att, v)  # (B, nh, T, hd)
        o = nc.reshape(nc.transpose(o, (0, 2, 1, 3)), (B, T, d))
        o = nc.add(nc.matmul(o, params[f"layer{l}.attn.proj.w"]), params[f"layer{l}.attn.proj.b"])
        x = nc.add(x, o)
        h = _maybe_ln(x, params[f"layer{l}.ln2.g"], params[f"layer{l}.ln2.b"], cfg)
        h = nc.gelu(nc.add(nc.matmul(h, params[f"layer{l}.mlp.fc.w"]), params[f"layer{l}.mlp.fc.b"]))
        h = nc.add(nc.matmul(h, params[f"layer{l}.mlp.proj.w"]), params[f"layer{l}.mlp.proj.b"])
        x = nc.add(x, h)
    x = _maybe_ln(x, params["final_ln.g"], params["final_ln.b"], cfg)
    out = nc.add(nc.matmul(x, params["head.w"]), params["head.b"])
    return nc.reshape(out, (B, T))


def forward_icl_batch(enc_batch, label_batch, params, cfg):
    """Predictions (standardized) at every structure position: Tensor
    (B, n_structs)."""
    tok = _token_embeddings(enc_batch, label_batch, params, cfg)
    out = forward_tokens(tok, params, cfg)
    T = tok.shape[1]
    even = np.arange(0, T, 2)
    preds = nc.gather(nc.transpose(out, (1, 0)), even)  # (n_structs, B)
    return nc.transpose(preds, (1, 0))


def forward_icl(seq, params, cfg):
    """Predictions for one TokenSequence, one scalar per structure token
    (standardized units)."""
    n_structs = len(seq.encodings)
    enc = Tensor(seq.encodings[None, ...].astype(params["select.w"].dtype))
    lab = Tensor(np.asarray(seq.labels, dtype=params["select.w"].dtype)[None, ...])
    return forward_icl_batch(enc, lab, params, cfg).data[0, :n_structs]


def masked_loss(preds, labels, weights):
    """Weighted MSE: sum_i w_i (pred_i - label_i)^2 / sum_i w_i.

    Tensor-aware (for training) or plain arrays (for reporting).
    """
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total == 0:
        raise ValueError("weights must not all be zero")
    if isinstance(preds, Tensor):
        labels = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels, dtype=preds.dtype))
        wt = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=preds.dtype))
        err = nc.square(nc.sub(preds, labels))
        return nc.mul(nc.sum_(nc.mul(err, wt)), Tensor(np.asarray(1.0 / total, dtype=preds.dtype)))
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return float((w * (preds - labels) ** 2).sum() / total)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_icl_checkpoint(path, params, cfg, standardizer):
    nc.save_checkpoint(path, {k: v.data for k, v in params.items()})
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump({"config": asdict(cfg), "standardizer": standardizer.to_dict()}, f)


def load_icl_checkpoint(path, precision=None):
    with open(str(path) + ".json", encoding="utf-8") as f:
        side = json.load(f)
    cfg = IclConfig(**side["config"])
    standardizer = Standardizer.from_dict(side["standardizer"])
    tensors = nc.load_checkpoint(path)
    params = {}
    for k, arr in tensors.items():
        if precision is not None:
            arr = arr.astype(np.float32 if precision == "f32" else np.float64)
        params[k] = Tensor(arr, requires_grad=True)
    return params, cfg, standardizer
