"""Training loops and schedules: encoder pretraining (MAE, warmup, EMA),
in-context training (MSE, plateau LR decay), curriculum loss weights, and
permutation augmentation."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc_mod
from . import icl as icl_mod
from . import numcore as nc
from .mining import ContextSequence
from .numcore import Tensor


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CurriculumState:
    """Two-index loss-weight schedule.

    `last_ignored` starts at -5 and `first_full` at 0; both advance by one
    every `period` steps, capped at k-2 and k-1 respectively, so the final
    example always keeps full weight.
    """

    step: int = 0
    period: int = 600
    last_ignored_init: int = -5
    first_full_init: int = 0


def curriculum_weights(state, k):
    """Per-example weights in [0, 1]: zero up to the last-ignored index,
    one from the first-fully-considered index, linear ramp in between."""
    if k < 2:
        raise ValueError("context length k must be >= 2")
    inc = state.step // state.period
    last_ignored = min(state.last_ignored_init + inc, k - 2)
    first_full = min(state.first_full_init + inc, k - 1)
    w = np.empty(k, dtype=np.float64)
    for i in range(k):
        if i <= last_ignored:
            w[i] = 0.0
        elif i >= first_full:
            w[i] = 1.0
        else:
            w[i] = (i - last_ignored) / (first_full - last_ignored)
    return w


def shuffle_context(context, rng):
    """Uniform random permutation of a context's examples; input unchanged."""
    ids = list(context.molecule_ids)
    rng.shuffle(ids)
    return ContextSequence(context.pattern_id, tuple(ids))


class EmaState:
    """shadow_t = decay * shadow_{t-1} + (1 - decay) * param_t."""

    def __init__(self, params, decay):
        self.decay = decay
        self.shadow = {k: v.data.copy() for k, v in params.items()}

    def update(self, params):
        d = self.decay
        for k, v in params.items():
            self.shadow[k] *= d
            self.shadow[k] += (1.0 - d) * v.data

    def as_params(self):
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.shadow.items()}


class Adam:
    """Adaptive moment estimation with default moment coefficients."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# encoder pretraining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 64
    warmup_steps: int = 100
    ema_decay: float = 0.999
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class PretrainResult:
    params: dict
    ema_params: dict
    epoch_mae: list = field(default_factory=list)  # train MAE per epoch, eV


def pretrain_encoder(molecules, enc_cfg, cfg, log=None):
    """Minimize MAE of the summed per-block readout against label_u0.

    Linear warmup to cfg.lr over warmup_steps, then constant. EMA shadow
    updated every step; evaluation should use the EMA copy.
    """
    if not molecules:
        raise TrainingError("pretrain_encoder: empty dataset")
    params = enc_mod.init_encoder_params(enc_cfg, seed=cfg.seed, precision=cfg.precision)
    ema = EmaState(params, cfg.ema_decay)
    opt = Adam(params, cfg.lr)
    rng = random.Random(cfg.seed)
    labels = {m.id: m.label_u0 for m in molecules}
    order = list(range(len(molecules)))
    step = 0
    result = PretrainResult(params=params, ema_params=ema.as_params())
    dt = np.float32 if cfg.precision == "f32" else np.float64

    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        epoch_abs = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [molecules[i] for i in order[start:start + cfg.batch_size]]
            y = np.array([labels[m.id] for m in batch], dtype=dt)
            opt.zero_grad()
            stack = enc_mod.encode_batch(batch, params, enc_cfg)
            preds = enc_mod.pretrain_readout_batch(stack, params, enc_cfg)
            loss = nc.mean(nc.absolute(nc.sub(preds, Tensor(y))))
            lv = float(loss.data.reshape(()))
            if not math.isfinite(lv):
                raise TrainingError(f"pretrain_encoder: non-finite loss at step {step}")
            loss.backward()
            opt.lr = cfg.lr * min(1.0, (step + 1) / max(1, cfg.warmup_steps))
            opt.step()
            ema.update(params)
            epoch_abs += lv * len(batch)
            step += 1
        mae = epoch_abs / len(order)
        result.epoch_mae.append(mae)
        if log is not None:
            log(epoch=epoch, split="train", mae_ev=mae, lr=opt.lr)
    result.ema_params = ema.as_params()
    return result


# ---------------------------------------------------------------------------
# in-context training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IclTrainConfig:
    lr: float = 1e-3
    epochs: int = 2500
    batch_sequences: int = 16
    curriculum_period: int = 600
    patience_epochs: int = 100
    lr_floor: float = 1e-5
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_floor >= self.lr:
            raise ValueError("lr floor must be below lr")


@dataclass
class IclTrainResult:
    params: dict
    standardizer: icl_mod.Standardizer
    config: icl_mod.IclConfig
    lr_trace: list = field(default_factory=list)
    val_mae_trace: list = field(default_factory=list)  # eV, last-example MAE
    best_val_mae: float = math.inf


def _context_arrays(contexts, cache, standardizer, dt):
    """Stack standardized (encodings, labels) per context; cache maps
    molecule id -> (concatenated encoding, label)."""
    enc, lab = [], []
    for c in contexts:
        for mid in c.molecule_ids:
            if mid not in cache:
                raise TrainingError(f"encodings cache is missing molecule {mid!r}")
        enc.append([standardizer.encode_x(cache[mid][0]) for mid in c.molecule_ids])
        lab.append([float(standardizer.encode_y(cache[mid][1])) for mid in c.molecule_ids])
    return np.asarray(enc, dtype=dt), np.asarray(lab, dtype=dt)


def eval_last_example_mae(contexts, cache, params, icl_cfg, standardizer, batch=64):
    """MAE (eV) of last-example predictions, labels destandardized."""
    dt = next(iter(params.values())).dtype
    errs = []
    for start in range(0, len(contexts), batch):
        chunk = contexts[start:start + batch]
        X, Y = _context_arrays(chunk, cache, standardizer, dt)
        preds = icl_mod.forward_icl_batch(Tensor(X), Tensor(Y), params, icl_cfg).data
        pred_last = standardizer.decode_y(preds[:, -1].astype(np.float64))
        true_last = np.array([cache[c.molecule_ids[-1]][1] for c in chunk])
        errs.extend(np.abs(pred_last - true_last))
    return float(np.mean(errs))


def train_icl(contexts, cache, icl_cfg, cfg, val_contexts=None, log=None):
    """Curriculum-weighted masked-MSE training with permutation augmentation
    and plateau LR decay; returns the best-validation checkpoint."""
    if not contexts:
        raise TrainingError("train_icl: empty context list")
    for c in contexts:
        for mid in c.molecule_ids:
            if mid not in cache:
                raise TrainingError(f"encodings cache is missing molecule {mid!r}")
    k = len(contexts[0].molecule_ids)
    dt = np.float32 if cfg.precision == "f32" else np.float64

    train_enc = np.asarray(
        [cache[mid][0] for c in contexts for mid in c.molecule_ids], dtype=np.float64)
    train_y = np.asarray(
        [cache[mid][1] for c in contexts for mid in c.molecule_ids], dtype=np.float64)
    standardizer = icl_mod.Standardizer.fit(train_enc, train_y)

    params = icl_mod.init_icl_params(icl_cfg, seed=cfg.seed, precision=cfg.precision)
    opt = Adam(params, cfg.lr)
    rng = random.Random(cfg.seed)
    curriculum = CurriculumState(period=cfg.curriculum_period)
    val = val_contexts if val_contexts is not None else contexts

    result = IclTrainResult(params=params, standardizer=standardizer, config=icl_cfg)
    best = {k2: v.data.copy() for k2, v in params.items()}
    best_mae = math.inf
    epochs_since_best = 0
    lr = cfg.lr
    step = 0

    for epoch in range(cfg.epochs):
        order = list(range(len(contexts)))
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_sequences):
            batch = [shuffle_context(contexts[i], rng) for i in order[start:start + cfg.batch_sequences]]
            X, Y = _context_arrays(batch, cache, standardizer, dt)
            w = curriculum_weights(replace(curriculum, step=step), k)
            weights = np.broadcast_to(w, (len(batch), k)).astype(dt)
            opt.zero_grad()
            preds = icl_mod.forward_icl_batch(Tensor(X), Tensor(Y), params, icl_cfg)
            loss = icl_mod.masked_loss(preds, Tensor(Y), Tensor(weights.copy()))
            if not math.isfinite(float(loss.data.reshape(()))):
                raise TrainingError(f"train_icl: non-finite loss at step {step}")
            loss.backward()
            opt.lr = lr
            opt.step()
            step += 1

        val_mae = eval_last_example_mae(val, cache, params, icl_cfg, standardizer)
        result.val_mae_trace.append(val_mae)
        if log is not None:
            log(epoch=epoch, split="val", mae_ev=val_mae, lr=lr)
        if val_mae < best_mae:
            best_mae = val_mae
            best = {k2: v.data.copy() for k2, v in params.items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience_epochs:
                if lr <= cfg.lr_floor:
                    break
                lr = max(lr * 0.1, cfg.lr_floor)
                epochs_since_best = 0
        result.lr_trace.append(lr)

    result.params = {k2: Tensor(v, requires_grad=True) for k2, v in best.items()}
    result.best_val_mae = best_mae
    return result


class InContextRegressor:
    """Estimator-style wrapper over train_icl: fit on contexts plus an
    encodings cache, predict the last example of a context."""

    def __init__(self, model_dim=128, n_layers=12, n_heads=4, lr=1e-3,
                 epochs=2500, batch_sequences=16, curriculum_period=600,
                 patience_epochs=100, lr_floor=1e-5, seed=0, precision="f32",
                 use_layernorm=True):
        self.model_dim = model_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.lr = lr
        self.epochs = epochs
        self.batch_sequences = batch_sequences
        self.curriculum_period = curriculum_period
        self.patience_epochs = patience_epochs
        self.lr_floor = lr_floor
        self.seed = seed
        self.precision = precision
        self.use_layernorm = use_layernorm
        self.result_ = None

    def get_params(self, deep=True):
        return {
            "model_dim": self.model_dim, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "lr": self.lr, "epochs": self.epochs,
            "batch_sequences": self.batch_sequences,
            "curriculum_period": self.curriculum_period,
            "patience_epochs": self.patience_epochs, "lr_floor": self.lr_floor,
            "seed": self.seed, "precision": self.precision,
            "use_layernorm": self.use_layernorm,
        }

    def set_params(self, **kw):
        for k, v in kw.items():
            if not hasattr(self, k):
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def fit(self, contexts, cache, val_contexts=None):
        k = len(contexts[0].molecule_ids)
        enc_dim = len(next(iter(cache.values()))[0])
        icl_cfg = icl_mod.IclConfig(
            model_dim=self.model_dim, n_layers=self.n_layers,
            n_heads=self.n_heads, max_positions=2 * k, encoder_dim=enc_dim,
            use_layernorm=self.use_layernorm)
        cfg = IclTrainConfig(
            lr=self.lr, epochs=self.epochs, batch_sequences=self.batch_sequences,
            curriculum_period=self.curriculum_period,
            patience_epochs=self.patience_epochs, lr_floor=self.lr_floor,
            seed=self.seed, precision=self.precision)
        self.result_ = train_icl(contexts, cache, icl_cfg, cfg, val_contexts)
        return self

    def predict(self, contexts, cache):
        """Predicted label (eV) of the final example of each context; the
        final label in the cache is never read."""
        if self.result_ is None:
            raise RuntimeError("InContextRegressor is not fitted")
        r = self.result_
        dt = next(iter(r.params.values())).dtype
        out = []
        for c in contexts:
            encs = [cache[mid][0] for mid in c.molecule_ids]
            labels = [cache[mid][1] for mid in c.molecule_ids[:-1]]
            seq = icl_mod.assemble_sequence(
                [(e, l) for e, l in zip(encs, labels)] + [(encs[-1], None)],
                r.standardizer)
            preds = icl_mod.forward_icl(seq, r.params, r.config)
            out.append(float(r.standardizer.decode_y(preds[-1])))
        return np.asarray(out)
