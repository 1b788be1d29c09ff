"""Geometry-aware message-passing encoder.

Per block: a local message over bonded edges and a global message over all
atom pairs within a distance cutoff, both gated by Gaussian RBF expansions
of the pair distance; node states are sum-pooled after every block, giving
one graph vector per block. A per-block linear readout (pretraining only)
sums to the scalar energy prediction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

N_ELEMENTS = 10  # Z up to fluorine; QM9 range


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 6
    dim: int = 128
    rbf_size: int = 16
    local_cutoff: float = 3.0  # Å, covers covalent bond lengths
    global_cutoff: float = 5.0  # Å
    n_elements: int = N_ELEMENTS

    def __post_init__(self):
        if self.n_blocks < 1 or self.dim < 1 or self.rbf_size < 1:
            raise ValueError("n_blocks, dim and rbf_size must be >= 1")
        if self.local_cutoff <= 0 or self.global_cutoff <= 0:
            raise ValueError("cutoffs must be positive")

    @property
    def encoding_dim(self):
        return self.n_blocks * self.dim


def rbf_expand(dist, n_basis, cutoff):
    """Gaussian basis on [0, cutoff] with a smooth cosine cutoff envelope.

    phi_k(d) = exp(-gamma (d - mu_k)^2) * env(d), mu_k uniform on
    [0, cutoff], gamma = (n_basis / cutoff)^2; env(d) = 0 for d >= cutoff.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if np.any(dist < 0):
        raise ValueError("distances must be non-negative")
    mu = np.linspace(0.0, cutoff, n_basis)
    gamma = (n_basis / cutoff) ** 2
    env = np.where(dist < cutoff, 0.5 * (np.cos(np.pi * dist / cutoff) + 1.0), 0.0)
    return np.exp(-gamma * (dist[..., None] - mu) ** 2) * env[..., None]


def init_encoder_params(cfg, seed=0, precision="f32"):
    """Random parameter dict; keys are stable checkpoint names."""
    rng = np.random.default_rng(seed)
    dt = np.float32 if precision == "f32" else np.float64

    def w(*shape, scale=None):
        scale = scale if scale is not None else 1.0 / math.sqrt(shape[0])
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dt), requires_grad=True)

    params = {"embed": w(cfg.n_elements, cfg.dim, scale=1.0)}
    for b in range(cfg.n_blocks):
        params[f"block{b}.local_rbf.w"] = w(cfg.rbf_size, cfg.dim)
        params[f"block{b}.global_rbf.w"] = w(cfg.rbf_size, cfg.dim)
        params[f"block{b}.local_msg.w"] = w(cfg.dim, cfg.dim)
        params[f"block{b}.global_msg.w"] = w(cfg.dim, cfg.dim)
        params[f"block{b}.update.w"] = w(cfg.dim, cfg.dim)
        params[f"block{b}.update.b"] = Tensor(np.zeros(cfg.dim, dtype=dt), requires_grad=True)
        params[f"readout{b}.w"] = w(cfg.dim, 1)
        params[f"readout{b}.b"] = Tensor(np.zeros(1, dtype=dt), requires_grad=True)
    return params


def _pair_features(molecules, cfg, dtype):
    """Constant geometry tensors for a batch: padded RBF stacks and masks.

    Returns (z_index (B,N), node_mask (B,N), local_rbf (B,N,N,K),
    global_rbf (B,N,N,K)).
    """
    nmax = max(len(m.atoms) for m in molecules)
    B, K = len(molecules), cfg.rbf_size
    z_index = np.zeros((B, nmax), dtype=np.int64)
    node_mask = np.zeros((B, nmax), dtype=dtype)
    local = np.zeros((B, nmax, nmax, K), dtype=dtype)
    glob = np.zeros((B, nmax, nmax, K), dtype=dtype)
    for bi, m in enumerate(molecules):
        n = len(m.atoms)
        pos = np.array([p for _, p in m.atoms], dtype=np.float64)
        z_index[bi, :n] = [min(z, cfg.n_elements - 1) for z, _ in m.atoms]
        node_mask[bi, :n] = 1.0
        if n > 1:
            d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
            g = rbf_expand(d.reshape(-1), K, cfg.global_cutoff).reshape(n, n, K)
            np.einsum("iik->ik", g)[:] = 0.0  # no self messages
            glob[bi, :n, :n] = g
            lo = rbf_expand(d.reshape(-1), K, cfg.local_cutoff).reshape(n, n, K)
            bond_mask = np.zeros((n, n))
            for i, j, _ in m.bonds:
                bond_mask[i, j] = bond_mask[j, i] = 1.0
            local[bi, :n, :n] = lo * bond_mask[..., None]
    return z_index, node_mask, local.astype(dtype), glob.astype(dtype)


def encode_batch(molecules, params, cfg):
    """Differentiable batched encoding.

    Returns a Tensor of shape (B, n_blocks, dim): sum-pooled node states
    after every block.
    """
    dtype = params["embed"].dtype
    z_index, node_mask, local, glob = _pair_features(molecules, cfg, dtype)
    B, N = z_index.shape

    h = nc.gather(params["embed"], z_index.reshape(-1))  # (B*N, d)
    h = nc.reshape(h, (B, N, cfg.dim))
    mask = Tensor(node_mask[..., None])  # (B, N, 1) constant
    h = nc.mul(h, mask)

    local_t = Tensor(local.reshape(B, N * N, cfg.rbf_size))
    glob_t = Tensor(glob.reshape(B, N * N, cfg.rbf_size))

    pooled = []
    for b in range(cfg.n_blocks):
        g_loc = nc.reshape(nc.matmul(local_t, params[f"block{b}.local_rbf.w"]), (B, N, N, cfg.dim))
        g_glb = nc.reshape(nc.matmul(glob_t, params[f"block{b}.global_rbf.w"]), (B, N, N, cfg.dim))
        m_loc = nc.pair_mix(g_loc, nc.matmul(h, params[f"block{b}.local_msg.w"]))
        m_glb = nc.pair_mix(g_glb, nc.matmul(h, params[f"block{b}.global_msg.w"]))
        upd = nc.matmul(nc.add(m_loc, m_glb), params[f"block{b}.update.w"])
        upd = nc.add(upd, params[f"block{b}.update.b"])
        h = nc.add(h, nc.mul(nc.silu(upd), mask))
        pooled.append(nc.sum_(h, axis=1))  # (B, d)
    stack = nc.concat([nc.reshape(p, (B, 1, cfg.dim)) for p in pooled], axis=1)
    return stack  # (B, n_blocks, dim)


def encode(molecule, params, cfg):
    """BlockEncodings for one molecule: numpy array (n_blocks, dim)."""
    return encode_batch([molecule], params, cfg).data[0]


def concat_encoding(block_enc):
    """Concatenated form, length n_blocks * dim."""
    return np.asarray(block_enc).reshape(-1)


def pretrain_readout_batch(stack, params, cfg):
    """Sum of per-block linear readouts; stack (B, n_blocks, dim) Tensor."""
    terms = []
    B = stack.shape[0]
    for b in range(cfg.n_blocks):
        e_b = nc.reshape(nc.gather(nc.transpose(stack, (1, 0, 2)), [b]), (B, cfg.dim))
        terms.append(nc.add(nc.matmul(e_b, params[f"readout{b}.w"]), params[f"readout{b}.b"]))
    out = terms[0]
    for t in terms[1:]:
        out = nc.add(out, t)
    return nc.reshape(out, (B,))


def pretrain_readout(block_enc, params, cfg):
    """Scalar energy prediction (eV) from one molecule's BlockEncodings."""
    total = 0.0
    for b in range(cfg.n_blocks):
        w = params[f"readout{b}.w"].data.reshape(-1)
        c = float(params[f"readout{b}.b"].data.reshape(-1)[0])
        total += float(np.asarray(block_enc)[b] @ w) + c
    return total


def save_encoder_checkpoint(path, params, cfg):
    nc.save_checkpoint(path, {k: v.data for k, v in params.items()})
    from dataclasses import asdict

    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump({"config": asdict(cfg)}, f)


def load_encoder_checkpoint(path, precision=None):
    with open(str(path) + ".json", encoding="utf-8") as f:
        cfg = EncoderConfig(**json.load(f)["config"])
    params = {}
    for k, arr in nc.load_checkpoint(path).items():
        if precision is not None:
            arr = arr.astype(np.float32 if precision == "f32" else np.float64)
        params[k] = Tensor(arr, requires_grad=True)
    return params, cfg


# ---------------------------------------------------------------------------
# encodings cache file: checkpoint container + JSON index
# ---------------------------------------------------------------------------


def save_encodings(path, ids, encodings):
    """`encodings` maps molecule id -> concatenated vector (length B*d)."""
    dim = len(next(iter(encodings.values())))
    nc.save_checkpoint(path, {mid: np.asarray(encodings[mid]) for mid in ids})
    with open(str(path) + ".index.json", "w", encoding="utf-8") as f:
        json.dump({"ids": list(ids), "dim": dim}, f)


def load_encodings(path):
    with open(str(path) + ".index.json", encoding="utf-8") as f:
        index = json.load(f)
    tensors = nc.load_checkpoint(path)
    return {mid: tensors[mid] for mid in index["ids"]}, index["dim"]


class GraphEncoder:
    """Estimator-style wrapper: fit pretrains on (molecules, labels),
    transform yields concatenated encodings, predict applies the summed
    per-block readout."""

    def __init__(self, n_blocks=6, dim=128, rbf_size=16, local_cutoff=3.0,
                 global_cutoff=5.0, lr=1e-4, epochs=100, batch_size=64,
                 warmup_steps=100, ema_decay=0.999, seed=0, precision="f32"):
        self.n_blocks = n_blocks
        self.dim = dim
        self.rbf_size = rbf_size
        self.local_cutoff = local_cutoff
        self.global_cutoff = global_cutoff
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.ema_decay = ema_decay
        self.seed = seed
        self.precision = precision
        self.params_ = None
        self.config_ = None

    def get_params(self, deep=True):
        return {
            "n_blocks": self.n_blocks, "dim": self.dim, "rbf_size": self.rbf_size,
            "local_cutoff": self.local_cutoff, "global_cutoff": self.global_cutoff,
            "lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
            "warmup_steps": self.warmup_steps, "ema_decay": self.ema_decay,
            "seed": self.seed, "precision": self.precision,
        }

    def set_params(self, **kw):
        for k, v in kw.items():
            if not hasattr(self, k):
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def _config(self):
        return EncoderConfig(self.n_blocks, self.dim, self.rbf_size,
                             self.local_cutoff, self.global_cutoff)

    def fit(self, molecules, y=None):
        from .training import PretrainConfig, pretrain_encoder

        cfg = PretrainConfig(lr=self.lr, epochs=self.epochs,
                             batch_size=self.batch_size,
                             warmup_steps=self.warmup_steps,
                             ema_decay=self.ema_decay, seed=self.seed,
                             precision=self.precision)
        self.config_ = self._config()
        result = pretrain_encoder(molecules, self.config_, cfg)
        self.params_ = result.ema_params
        self.raw_params_ = result.params
        return self

    def _check_fitted(self):
        if self.params_ is None:
            raise RuntimeError("GraphEncoder is not fitted")

    def transform(self, molecules):
        self._check_fitted()
        stack = encode_batch(molecules, self.params_, self.config_)
        return stack.data.reshape(len(molecules), -1)

    def predict(self, molecules):
        self._check_fitted()
        stack = encode_batch(molecules, self.params_, self.config_)
        return pretrain_readout_batch(Tensor(stack.data), self.params_, self.config_).data
