"""Temporal-attention LSTM for heading prediction, written directly in numpy.

Data layout
-----------
A navigation record is cut into consecutive windows of ``T`` steps.  Each
step carries four features (north/east offset to the destination in meters,
declination and inclination offsets in degrees) and the heading flown from
that step.  Window ``n`` of an episode predicts the ``T`` headings of window
``n + 1``.

Per window the model does:

* local attention over the ``T`` steps, conditioned on the previous encoder
  state and on each step's features and teacher heading;
* one encoder LSTM step on the flattened, attention-weighted window;
* global attention over every encoder state of the episode so far;
* a fully connected fusion of the weighted window, the global context and the
  teacher headings, fed to one decoder LSTM step;
* a two-layer linear head on ``[h_dec, c_dec]`` giving the next window.

Headings are scaled by 1/180 inside the network and the squared error is taken
on the wrapped difference.  Recurrent state and the global-attention memory
are carried across the windows of an episode and reset between episodes.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from geomagnav.angles import angle_diff, wrap_deg

MAGIC = b"TALSTM1\x00"
FORMAT_VERSION = 1
HEADING_SCALE = 180.0

PARAM_NAMES = (
    "enc_W", "enc_b",
    "dec_W", "dec_b",
    "att_We", "att_Ue", "att_Ve", "att_be",
    "att_Wd", "att_Ud", "att_Vd", "att_bd",
    "fc_Wn", "fc_b",
    "out_Wy", "out_bw", "out_Vy", "out_by",
)


class ModelFormatError(ValueError):
    """A model file is malformed or does not match expectations."""


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class WindowSeries:
    """One window: ``inputs`` (T, 4), headings flown ``targets`` (T,).

    ``next_targets`` holds the following window's headings when known; only
    windows that have them contribute to the loss.
    """

    inputs: np.ndarray
    targets: np.ndarray
    index: int = 1
    episode: int = 0
    next_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.targets, dtype=float)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"window shapes disagree: inputs {x.shape}, targets {y.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("window contains non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        if self.next_targets is not None:
            nt = np.asarray(self.next_targets, dtype=float)
            if nt.shape != y.shape or not np.all(np.isfinite(nt)):
                raise ValueError("next_targets must be finite and match the window length")
            object.__setattr__(self, "next_targets", nt)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TaLstmModel:
    T: int
    n_features: int
    hidden: int
    attn: int
    dec_in: int
    params: dict
    x_mean: np.ndarray
    x_std: np.ndarray
    reference_samples: Optional[np.ndarray] = None
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def param_shapes(self) -> dict:
        return param_shapes(self.T, self.n_features, self.hidden, self.attn, self.dec_in)

    def copy(self) -> TaLstmModel:
        return copy.deepcopy(self)

    @property
    def loss_trace(self) -> list:
        return list(self.meta.get("loss_trace", []))


def param_shapes(T: int, F: int, H: int, A: int, P: int) -> dict:
    return {
        "enc_W": (4 * H, H + F * T), "enc_b": (4 * H,),
        "dec_W": (4 * H, H + P), "dec_b": (4 * H,),
        "att_We": (A, 2 * H), "att_Ue": (A, F + 1), "att_Ve": (A,), "att_be": (A,),
        "att_Wd": (A, 2 * H), "att_Ud": (A, H), "att_Vd": (A,), "att_bd": (A,),
        "fc_Wn": (P, F * T + H + T), "fc_b": (P,),
        "out_Wy": (H, 2 * H), "out_bw": (H,), "out_Vy": (T, H), "out_by": (T,),
    }


def init_model(T: int = 20, n_features: int = 4, hidden: int = 20, attn: Optional[int] = None,
               dec_in: Optional[int] = None, seed: int = 0, gain: float = 1.0) -> TaLstmModel:
    """Uniform(+-gain/sqrt(fan_in)) weights, forget-gate biases at +1."""
    attn = hidden if attn is None else attn
    dec_in = hidden if dec_in is None else dec_in
    rng = np.random.default_rng(seed)
    shapes = param_shapes(T, n_features, hidden, attn, dec_in)
    fan_in = {
        "enc": hidden + n_features * T, "dec": hidden + dec_in,
        "att_e": 2 * hidden + n_features + 1, "att_d": 3 * hidden,
        "fc": n_features * T + hidden + T, "out_Wy": 2 * hidden, "out_Vy": hidden,
    }
    group = {
        "enc_W": "enc", "enc_b": "enc", "dec_W": "dec", "dec_b": "dec",
        "att_We": "att_e", "att_Ue": "att_e", "att_Ve": "out_Vy", "att_be": "att_e",
        "att_Wd": "att_d", "att_Ud": "att_d", "att_Vd": "out_Vy", "att_bd": "att_d",
        "fc_Wn": "fc", "fc_b": "fc", "out_Wy": "out_Wy", "out_bw": "out_Wy",
        "out_Vy": "out_Vy", "out_by": "out_Vy",
    }
    params = {}
    for name in PARAM_NAMES:
        bound = gain / math.sqrt(fan_in[group[name]])
        params[name] = rng.uniform(-bound, bound, size=shapes[name])
    for name in ("enc_b", "dec_b"):
        params[name][:hidden] = 1.0
    return TaLstmModel(T, n_features, hidden, attn, dec_in, params,
                       np.zeros(n_features), np.ones(n_features))


# ---------------------------------------------------------------- primitives

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z, axis):
    z = z - np.max(z, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / np.sum(ez, axis=axis, keepdims=True)


def _wrap_unit(d):
    """Wrap scaled heading differences into [-1, 1]."""
    return d - 2.0 * np.round(d / 2.0)


def lstm_step(params: dict, x, h_prev, c_prev, prefix: str = ""):
    """One LSTM update; ``params`` holds ``W`` (4H, H+in) and ``b`` (4H,).

    Gate blocks are stacked forget, input, output, candidate.  Works on single
    vectors or on (batch, dim) arrays.
    """
    W = params[prefix + "W"] if prefix + "W" in params else params["W"]
    b = params[prefix + "b"] if prefix + "b" in params else params["b"]
    h, c, _ = _lstm_forward(W, b, np.atleast_2d(h_prev), np.atleast_2d(c_prev), np.atleast_2d(x))
    if np.ndim(x) == 1:
        return h[0], c[0]
    return h, c


def _lstm_forward(W, b, h_prev, c_prev, x):
    H = h_prev.shape[1]
    u = np.concatenate([h_prev, x], axis=1)
    z = u @ W.T + b
    f = _sigmoid(z[:, :H])
    i = _sigmoid(z[:, H:2 * H])
    o = _sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (u, f, i, o, g, c_prev, tc)


def _lstm_backward(W, cache, dh, dc):
    u, f, i, o, g, c_prev, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * c_prev * f * (1.0 - f),
        dc * g * i * (1.0 - i),
        do * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=1)
    return dz.T @ u, dz.sum(axis=0), dz @ W, dc * f


# ------------------------------------------------------------- window passes

def _encode(P, x, y, he, ce):
    """Local attention and encoder step for a batch of windows.

    x: (B, T, F) standardised inputs, y: (B, T) scaled teacher headings.
    """
    B, T, F = x.shape
    z = np.concatenate([x, y[:, :, None]], axis=2)
    s = np.concatenate([he, ce], axis=1)
    pre = (s @ P["att_We"].T)[:, None, :] + z @ P["att_Ue"].T + P["att_be"]
    te = np.tanh(pre)
    e = te @ P["att_Ve"]
    a = _softmax(e, axis=1)
    xbar = (a[:, :, None] * x).reshape(B, T * F)
    he_new, ce_new, lc = _lstm_forward(P["enc_W"], P["enc_b"], he, ce, xbar)
    return he_new, ce_new, dict(z=z, s=s, te=te, e=e, a=a, x=x, xbar=xbar, lc=lc)


def _decode(P, xbar, y, hist, hd, cd):
    """Global attention over ``hist`` (B, n, H), fusion layer and decoder step."""
    sd = np.concatenate([hd, cd], axis=1)
    pre = (sd @ P["att_Wd"].T)[:, None, :] + hist @ P["att_Ud"].T + P["att_bd"]
    td = np.tanh(pre)
    logits = td @ P["att_Vd"]
    beta = _softmax(logits, axis=1)
    ctx = np.einsum("bt,bth->bh", beta, hist)
    q = np.concatenate([xbar, ctx, y], axis=1)
    yp = q @ P["fc_Wn"].T + P["fc_b"]
    hd_new, cd_new, lc = _lstm_forward(P["dec_W"], P["dec_b"], hd, cd, yp)
    return hd_new, cd_new, dict(sd=sd, td=td, logits=logits, beta=beta, ctx=ctx, q=q, hist=hist, lc=lc)


def _head(P, hd, cd):
    r = np.concatenate([hd, cd], axis=1)
    w = r @ P["out_Wy"].T + P["out_bw"]
    return w @ P["out_Vy"].T + P["out_by"], dict(r=r, w=w)


def _forward(P, xs, ys):
    """Run episodes; xs (B, m, T, F), ys (B, m, T).  Returns outputs (B, m, T) and caches."""
    B, m = xs.shape[:2]
    H = P["enc_b"].shape[0] // 4
    he = np.zeros((B, H))
    ce = np.zeros((B, H))
    hd = np.zeros((B, H))
    cd = np.zeros((B, H))
    hist = np.zeros((B, m, H))
    outs = np.zeros(ys.shape)
    caches = []
    for n in range(m):
        he, ce, enc = _encode(P, xs[:, n], ys[:, n], he, ce)
        hist[:, n] = he
        hd, cd, dec = _decode(P, enc["xbar"], ys[:, n], hist[:, :n + 1], hd, cd)
        outs[:, n], head = _head(P, hd, cd)
        caches.append((enc, dec, head))
    return outs, caches


def _backward(P, caches, douts):
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    B, m, T = douts.shape
    H = P["enc_b"].shape[0] // 4
    TF = P["fc_Wn"].shape[1] - H - T
    dhist = np.zeros((B, m, H))
    dhe_next = np.zeros((B, H))
    dce_next = np.zeros((B, H))
    dhd_next = np.zeros((B, H))
    dcd_next = np.zeros((B, H))
    for n in reversed(range(m)):
        enc, dec, head = caches[n]
        dout = douts[:, n]
        grads["out_Vy"] += dout.T @ head["w"]
        grads["out_by"] += dout.sum(axis=0)
        dw = dout @ P["out_Vy"]
        grads["out_Wy"] += dw.T @ head["r"]
        grads["out_bw"] += dw.sum(axis=0)
        dr = dw @ P["out_Wy"]

        dW, db, du, dcd_prev = _lstm_backward(P["dec_W"], dec["lc"], dr[:, :H] + dhd_next, dr[:, H:] + dcd_next)
        grads["dec_W"] += dW
        grads["dec_b"] += db
        dhd_prev = du[:, :H]
        dyp = du[:, H:]
        grads["fc_Wn"] += dyp.T @ dec["q"]
        grads["fc_b"] += dyp.sum(axis=0)
        dq = dyp @ P["fc_Wn"]
        dxbar = dq[:, :TF].copy()
        dctx = dq[:, TF:TF + H]

        hist, beta, td = dec["hist"], dec["beta"], dec["td"]
        dhist[:, :n + 1] += beta[:, :, None] * dctx[:, None, :]
        dbeta = np.einsum("bh,bth->bt", dctx, hist)
        dlog = beta * (dbeta - np.sum(beta * dbeta, axis=1, keepdims=True))
        grads["att_Vd"] += np.einsum("bt,bta->a", dlog, td)
        dpre = dlog[:, :, None] * P["att_Vd"] * (1.0 - td * td)
        grads["att_bd"] += dpre.sum(axis=(0, 1))
        dpre_sum = dpre.sum(axis=1)
        grads["att_Wd"] += dpre_sum.T @ dec["sd"]
        dsd = dpre_sum @ P["att_Wd"]
        grads["att_Ud"] += np.einsum("bta,bth->ah", dpre, hist)
        dhist[:, :n + 1] += dpre @ P["att_Ud"]
        dhd_prev = dhd_prev + dsd[:, :H]
        dcd_prev = dcd_prev + dsd[:, H:]

        dW, db, du, dce_prev = _lstm_backward(P["enc_W"], enc["lc"], dhist[:, n] + dhe_next, dce_next)
        grads["enc_W"] += dW
        grads["enc_b"] += db
        dhe_prev = du[:, :H]
        dxbar += du[:, H:]
        x, a, te = enc["x"], enc["a"], enc["te"]
        da = np.sum(dxbar.reshape(x.shape) * x, axis=2)
        de = a * (da - np.sum(a * da, axis=1, keepdims=True))
        grads["att_Ve"] += np.einsum("bt,bta->a", de, te)
        dpre = de[:, :, None] * P["att_Ve"] * (1.0 - te * te)
        grads["att_be"] += dpre.sum(axis=(0, 1))
        grads["att_Ue"] += np.einsum("bta,btf->af", dpre, enc["z"])
        dpre_sum = dpre.sum(axis=1)
        grads["att_We"] += dpre_sum.T @ enc["s"]
        ds = dpre_sum @ P["att_We"]
        dhe_next = dhe_prev + ds[:, :H]
        dce_next = dce_prev + ds[:, H:]
        dhd_next, dcd_next = dhd_prev, dcd_prev
    return grads


# ------------------------------------------------------------------ batching

@dataclass(frozen=True)
class Batch:
    xs: np.ndarray      # (B, m, T, F) standardised
    ys: np.ndarray      # (B, m, T) scaled teacher headings
    tgt: np.ndarray     # (B, m, T) scaled next-window headings
    mask: np.ndarray    # (B, m) 1 where a target exists

    @property
    def n_windows(self) -> int:
        return int(self.mask.sum())


def group_episodes(windows: Iterable[WindowSeries]) -> list[list[WindowSeries]]:
    """Group windows by episode id, ordered by window index; checks contiguity."""
    by_ep: dict = {}
    for w in windows:
        by_ep.setdefault(w.episode, []).append(w)
    episodes = []
    for ep in sorted(by_ep):
        ws = sorted(by_ep[ep], key=lambda w: w.index)
        idx = [w.index for w in ws]
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ValueError(f"episode {ep} has non-consecutive window indices {idx}")
        episodes.append(ws)
    return episodes


def make_batch(model: TaLstmModel, episodes: Sequence[Sequence[WindowSeries]]) -> Batch:
    m = max(len(ep) for ep in episodes)
    B, T, F = len(episodes), model.T, model.n_features
    xs = np.zeros((B, m, T, F))
    ys = np.zeros((B, m, T))
    tgt = np.zeros((B, m, T))
    mask = np.zeros((B, m))
    for b, ep in enumerate(episodes):
        for n, w in enumerate(ep):
            if w.T != T or w.inputs.shape[1] != F:
                raise ValueError(f"window shape {w.inputs.shape} does not match model (T={T}, F={F})")
            xs[b, n] = (w.inputs - model.x_mean) / model.x_std
            ys[b, n] = w.targets / HEADING_SCALE
            if w.next_targets is not None:
                tgt[b, n] = w.next_targets / HEADING_SCALE
                mask[b, n] = 1.0
    return Batch(xs, ys, tgt, mask)


def loss_and_grads(model: TaLstmModel, batch: Batch, need_grads: bool = True):
    """Mean squared wrapped error over every target heading in the batch."""
    outs, caches = _forward(model.params, batch.xs, batch.ys)
    count = batch.mask.sum() * model.T
    if count == 0:
        raise ValueError("batch has no targets")
    diff = _wrap_unit(outs - batch.tgt) * batch.mask[:, :, None]
    loss = float(np.sum(diff * diff) / count)
    if not need_grads:
        return loss, None
    return loss, _backward(model.params, caches, 2.0 * diff / count)


def evaluate_loss(model: TaLstmModel, episodes: Sequence[Sequence[WindowSeries]]) -> float:
    eps = [ep for ep in episodes if any(w.next_targets is not None for w in ep)]
    if not eps:
        return math.nan
    return loss_and_grads(model, make_batch(model, eps), need_grads=False)[0]


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 20
    learning_rate: float = 0.005
    drop_factor: float = 0.9
    drop_period: int = 1
    train_ratio: float = 0.7
    validation_share: float = 0.2
    optimizer: str = "adam"
    clip_norm: float = 1.0
    # std of a per-window offset added to the teacher headings fed to the
    # network (targets untouched); 0 disables
    teacher_noise_deg: float = 0.0
    # per-feature std (raw units) of offsets added to the inputs; empty disables
    feature_noise: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("no training performed: epochs must be >= 1")
        if self.batch_size < 1 or self.drop_period < 1:
            raise ValueError("batch size and drop period must be >= 1")
        if not self.learning_rate > 0.0 or not 0.0 < self.drop_factor <= 1.0:
            raise ValueError("learning rate must be positive and drop factor in (0, 1]")
        if not 0.0 < self.train_ratio <= 1.0 or not 0.0 <= self.validation_share < 1.0:
            raise ValueError("train ratio must lie in (0, 1] and validation share in [0, 1)")
        if not self.teacher_noise_deg >= 0.0:
            raise ValueError("teacher noise must be >= 0")
        object.__setattr__(self, "feature_noise", tuple(float(v) for v in self.feature_noise))
        if any(not v >= 0.0 for v in self.feature_noise):
            raise ValueError("feature noise must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def split_episodes(episodes: list, cfg: TrainConfig, rng: np.random.Generator):
    """Shuffle, then train/validation/test split at episode granularity."""
    order = rng.permutation(len(episodes))
    shuffled = [episodes[i] for i in order]
    n_pool = max(1, int(round(cfg.train_ratio * len(shuffled))))
    pool, test = shuffled[:n_pool], shuffled[n_pool:]
    n_val = int(round(cfg.validation_share * len(pool))) if len(pool) > 1 else 0
    n_val = min(n_val, len(pool) - 1)
    return pool[n_val:], pool[:n_val], test


def _batches(episodes: list, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(episodes))
    batch, count = [], 0
    for i in order:
        batch.append(episodes[i])
        count += sum(w.next_targets is not None for w in episodes[i])
        if count >= batch_size:
            yield batch
            batch, count = [], 0
    if batch:
        yield batch


def _perturb(model: TaLstmModel, batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Training-time noise: a per-window offset plus smaller per-step jitter."""
    B, m, T = batch.ys.shape
    ys, xs = batch.ys, batch.xs
    if cfg.teacher_noise_deg > 0.0:
        s = cfg.teacher_noise_deg
        offset = rng.normal(0.0, s, size=(B, m, 1)) + rng.normal(0.0, s / 4.0, size=(B, m, T))
        ys = _wrap_unit(ys + offset / HEADING_SCALE)
    if any(cfg.feature_noise):
        if len(cfg.feature_noise) != model.n_features:
            raise ValueError(f"feature_noise needs {model.n_features} entries")
        s = np.asarray(cfg.feature_noise) / model.x_std
        F = model.n_features
        xs = xs + rng.normal(size=(B, m, 1, F)) * s + rng.normal(size=(B, m, T, F)) * (s / 4.0)
    return Batch(xs, ys, batch.tgt, batch.mask)


def fit_normalization(windows: Sequence[WindowSeries]) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([w.inputs for w in windows], axis=0)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def train(model: TaLstmModel, dataset: Sequence[WindowSeries], cfg: TrainConfig = TrainConfig()) -> TaLstmModel:
    """Fit a copy of ``model`` by BPTT; returns the trained copy.

    The loss trace (training split, evaluated after each epoch) and the
    validation trace are stored in ``meta``.  Anomaly-reference samples are
    collected from held-out episodes after training.
    """
    windows = list(dataset)
    if not windows:
        raise TrainingError("empty dataset")
    if any(w.T != model.T for w in windows):
        raise TrainingError(f"dataset windows do not all have T={model.T}")
    episodes = [ep for ep in group_episodes(windows) if any(w.next_targets is not None for w in ep)]
    if not episodes:
        raise TrainingError("dataset has no window with a following window to predict")

    rng = np.random.default_rng(cfg.seed)
    train_eps, val_eps, test_eps = split_episodes(episodes, cfg, rng)
    model = model.copy()
    model.x_mean, model.x_std = fit_normalization([w for ep in train_eps for w in ep])

    P = model.params
    m1 = {k: np.zeros_like(v) for k, v in P.items()}
    m2 = {k: np.zeros_like(v) for k, v in P.items()}
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    t = 0
    loss_trace, val_trace = [], []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.drop_factor ** (epoch // cfg.drop_period)
        for eps_batch in _batches(train_eps, cfg.batch_size, rng):
            batch = make_batch(model, eps_batch)
            if cfg.teacher_noise_deg > 0.0 or any(cfg.feature_noise):
                batch = _perturb(model, batch, cfg, rng)
            loss, grads = loss_and_grads(model, batch)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}; learning rate {lr} too high?")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = cfg.clip_norm / norm if cfg.clip_norm and norm > cfg.clip_norm else 1.0
            t += 1
            for k in PARAM_NAMES:
                g = grads[k] * scale
                if cfg.optimizer == "sgd":
                    P[k] -= lr * g
                else:
                    m1[k] = b1 * m1[k] + (1 - b1) * g
                    m2[k] = b2 * m2[k] + (1 - b2) * g * g
                    mhat = m1[k] / (1 - b1 ** t)
                    vhat = m2[k] / (1 - b2 ** t)
                    P[k] -= lr * mhat / (np.sqrt(vhat) + adam_eps)
        train_loss = evaluate_loss(model, train_eps)
        if not math.isfinite(train_loss):
            raise TrainingError(f"non-finite loss after epoch {epoch + 1}")
        loss_trace.append(train_loss)
        val_trace.append(evaluate_loss(model, val_eps) if val_eps else None)

    model.trained = True
    held_out = val_eps + test_eps or train_eps
    model.reference_samples = reference_discrepancies(model, held_out)
    model.meta = {
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate,
        "drop_factor": cfg.drop_factor, "drop_period": cfg.drop_period, "optimizer": cfg.optimizer,
        "clip_norm": cfg.clip_norm, "teacher_noise_deg": cfg.teacher_noise_deg,
        "feature_noise": list(cfg.feature_noise), "seed": cfg.seed, "train_ratio": cfg.train_ratio,
        "validation_share": cfg.validation_share,
        "n_train_episodes": len(train_eps), "n_val_episodes": len(val_eps), "n_test_episodes": len(test_eps),
        "loss_trace": loss_trace, "val_trace": val_trace,
    }
    return model


def reference_discrepancies(model: TaLstmModel, episodes: Sequence[Sequence[WindowSeries]]) -> np.ndarray:
    """Running-mean heading discrepancies |wrap(actual - predicted)| on clean episodes.

    For every predicted window the mean over its first k steps is recorded,
    k = 1..T, matching how the discrepancy is accumulated during a mission.
    """
    eps = [ep for ep in episodes if any(w.next_targets is not None for w in ep)]
    if not eps:
        return np.zeros(0)
    batch = make_batch(model, eps)
    outs, _ = _forward(model.params, batch.xs, batch.ys)
    err = np.abs(angle_diff(outs * HEADING_SCALE, batch.tgt * HEADING_SCALE))
    running = np.cumsum(err, axis=2) / np.arange(1, model.T + 1)
    return running[batch.mask.astype(bool)].ravel()


# ---------------------------------------------------------------- deployment

@dataclass(frozen=True)
class DeploymentContext:
    """Recurrent state carried between windows during a mission."""

    he: Optional[np.ndarray] = None
    ce: Optional[np.ndarray] = None
    hd: Optional[np.ndarray] = None
    cd: Optional[np.ndarray] = None
    history: tuple = ()


def encode_window(model: TaLstmModel, window: WindowSeries, ctx: DeploymentContext = DeploymentContext()):
    """Local attention + encoder step.  Returns (weighted inputs, h_e, c_e, attention weights)."""
    he, ce = _states(model, ctx.he), _states(model, ctx.ce)
    x = ((window.inputs - model.x_mean) / model.x_std)[None]
    y = (window.targets / HEADING_SCALE)[None]
    he_new, ce_new, cache = _encode(model.params, x, y, he, ce)
    return cache["xbar"][0].reshape(model.T, model.n_features), he_new[0], ce_new[0], cache["a"][0]


def decode_window(model: TaLstmModel, weighted_inputs, encoder_states, teacher,
                  hd=None, cd=None):
    """Global attention + decoder step.  Returns (h_d, c_d, context, beta)."""
    hist = np.atleast_2d(np.asarray(encoder_states, float))[None]
    if hist.shape[1] < 1:
        raise ValueError("need at least one encoder state")
    xbar = np.asarray(weighted_inputs, float).reshape(1, -1)
    y = (np.asarray(teacher, float) / HEADING_SCALE)[None]
    hd_new, cd_new, cache = _decode(model.params, xbar, y, hist, _states(model, hd), _states(model, cd))
    return hd_new[0], cd_new[0], cache["ctx"][0], cache["beta"][0]


def _states(model, v):
    return np.zeros((1, model.hidden)) if v is None else np.asarray(v, float).reshape(1, -1)


def predict_window(model: TaLstmModel, inputs, teacher, ctx: DeploymentContext = DeploymentContext()):
    """Predict the next window's headings (degrees, wrapped) from one window.

    ``teacher`` holds the headings flown during the window.  Returns
    (prediction, diagnostics, updated context); the input context is not
    modified.
    """
    x = np.asarray(inputs, float)
    y = np.asarray(teacher, float)
    if x.shape != (model.T, model.n_features) or y.shape != (model.T,):
        raise ValueError(f"expected inputs ({model.T}, {model.n_features}) and teacher ({model.T},)")
    P = model.params
    xs = ((x - model.x_mean) / model.x_std)[None]
    ys = (y / HEADING_SCALE)[None]
    he, ce, enc = _encode(P, xs, ys, _states(model, ctx.he), _states(model, ctx.ce))
    history = ctx.history + (he[0],)
    hist = np.stack(history)[None]
    hd, cd, dec = _decode(P, enc["xbar"], ys, hist, _states(model, ctx.hd), _states(model, ctx.cd))
    out, _ = _head(P, hd, cd)
    pred = wrap_deg(out[0] * HEADING_SCALE)
    diag = {"local_attention": enc["a"][0], "global_attention": dec["beta"][0]}
    return pred, diag, DeploymentContext(he[0], ce[0], hd[0], cd[0], history)


# ------------------------------------------------------------ gradient check

def _reference_loss(P: dict, batch: Batch):
    ld = np.longdouble
    outs, _ = _forward({k: v.astype(ld) for k, v in P.items()}, batch.xs.astype(ld), batch.ys.astype(ld))
    diff = _wrap_unit(outs - batch.tgt.astype(ld)) * batch.mask[:, :, None]
    return np.sum(diff * diff) / ld(batch.mask.sum() * outs.shape[2])


def gradient_check_fixture(seed: int = 0, T: int = 20, hidden: int = 20, n_windows: int = 5):
    """Seeded model and episode for gradient checks.

    Weights use a larger init gain and windows are offset from one another so
    that the attention weights are far from uniform and every tensor gets a
    resolvable gradient.
    """
    rng = np.random.default_rng(seed)
    model = init_model(T=T, hidden=hidden, seed=seed, gain=3.0)
    episode = [
        WindowSeries(rng.normal(size=(T, model.n_features)) + 2.0 * rng.normal(size=model.n_features),
                     rng.uniform(-90.0, 90.0, T), index=n + 1,
                     next_targets=rng.uniform(-90.0, 90.0, T))
        for n in range(n_windows)
    ]
    return model, episode


def gradient_check(model: TaLstmModel, episode: Sequence[WindowSeries], epsilon: float = 1e-5,
                   n_coords: int = 216, seed: int = 0, names: Optional[Sequence[str]] = None,
                   corrupt: Optional[dict] = None) -> float:
    """Max relative error between backprop and central-difference gradients.

    Coordinates are drawn from every tensor in ``names`` (default: all).  The
    perturbed losses are evaluated in extended precision where the platform
    has it, so the difference quotient is not swamped by float64 rounding for
    small attention gradients; the gradients under test are plain float64.
    ``corrupt`` maps tensor names to factors applied to the analytic gradient,
    for negative controls.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    names = list(PARAM_NAMES if names is None else names)
    batch = make_batch(model, [list(episode)])
    _, grads = loss_and_grads(model, batch)
    if corrupt:
        grads = {k: g * corrupt.get(k, 1.0) for k, g in grads.items()}
    rng = np.random.default_rng(seed)
    per = max(1, -(-n_coords // len(names)))
    worst = 0.0
    P = model.params
    for name in names:
        arr = P[name]
        flat_idx = rng.choice(arr.size, size=min(per, arr.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            old = arr[idx]
            arr[idx] = old + epsilon
            lp = _reference_loss(P, batch)
            arr[idx] = old - epsilon
            lm = _reference_loss(P, batch)
            arr[idx] = old
            num = float((lp - lm) / (2 * np.longdouble(epsilon)))
            ana = grads[name][idx]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            worst = max(worst, rel)
    return worst


# ------------------------------------------------------------ serialisation

def save_model(model: TaLstmModel, path: Union[str, Path]) -> None:
    """Write the model file.

    Layout: 8-byte magic ``TALSTM1\\0``; little-endian uint32 header length;
    UTF-8 JSON header (sorted keys) with dimensions, tensor names and shapes
    in storage order, and metadata; then every tensor as little-endian
    float64 in C order.
    """
    tensors = [(n, model.params[n]) for n in PARAM_NAMES]
    tensors += [("x_mean", model.x_mean), ("x_std", model.x_std)]
    if model.reference_samples is not None:
        tensors.append(("reference_samples", np.asarray(model.reference_samples, float)))
    header = {
        "format_version": FORMAT_VERSION,
        "T": model.T, "n_features": model.n_features, "hidden": model.hidden,
        "attn": model.attn, "dec_in": model.dec_in, "trained": bool(model.trained),
        "tensors": [[n, list(np.shape(a))] for n, a in tensors],
        "meta": model.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, allow_nan=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path: Union[str, Path], expected_T: Optional[int] = None) -> TaLstmModel:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not a TA-LSTM model file (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise ModelFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    if len(raw) < off + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from None
    off += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    T = int(header["T"])
    if expected_T is not None and T != expected_T:
        raise ModelFormatError(f"{path}: window length mismatch, file has T={T}, expected T={expected_T}")
    dims = [int(header[k]) for k in ("T", "n_features", "hidden", "attn", "dec_in")]
    shapes = param_shapes(*dims)
    arrays = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if len(raw) < off + nbytes:
            raise ModelFormatError(f"{path}: truncated while reading tensor {name}")
        arrays[name] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").astype(float).reshape(shape)
        off += nbytes
    if off != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - off} trailing bytes")
    for name in PARAM_NAMES:
        if name not in arrays:
            raise ModelFormatError(f"{path}: missing tensor {name}")
        if arrays[name].shape != shapes[name]:
            raise ModelFormatError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {shapes[name]}")
    return TaLstmModel(
        *dims,
        params={n: arrays[n] for n in PARAM_NAMES},
        x_mean=arrays["x_mean"], x_std=arrays["x_std"],
        reference_samples=arrays.get("reference_samples"),
        trained=bool(header.get("trained", False)),
        meta=header.get("meta", {}),
    )


# --------------------------------------------------------- dataset CSV files

DATASET_COLUMNS = ("n", "k", "l_x", "l_y", "D", "I", "theta", "episode", "label")


def save_dataset(windows: Sequence[WindowSeries], path: Union[str, Path]) -> None:
    """One row per step; ``episode`` groups windows from the same trajectory.

    ``label`` is the heading the model should predict for this step of the
    following window (``nan`` when there is none).
    """
    lines = [",".join(DATASET_COLUMNS)]
    for w in windows:
        for k in range(w.T):
            x = [float(v) for v in w.inputs[k]]
            lab = float("nan") if w.next_targets is None else float(w.next_targets[k])
            lines.append(f"{w.index},{k + 1},{x[0]!r},{x[1]!r},{x[2]!r},{x[3]!r},{float(w.targets[k])!r},"
                         f"{w.episode},{lab!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: Union[str, Path]) -> list[WindowSeries]:
    """Read a window CSV.

    Without a ``label`` column, the following window's ``theta`` of the same
    episode serves as next_targets.
    """
    import csv

    rows: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(DATASET_COLUMNS[:7]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        has_label = "label" in (reader.fieldnames or ())
        for lineno, r in enumerate(reader, start=2):
            try:
                key = (int(r.get("episode") or 0), int(r["n"]))
                vals = [float(r[c]) for c in ("l_x", "l_y", "D", "I", "theta")]
                vals.append(float(r["label"]) if has_label else math.nan)
                k = int(r["k"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}: line {lineno}: malformed row") from None
            rows.setdefault(key, []).append((k, vals))
    grouped = {}
    for (ep, n), steps in rows.items():
        steps.sort()
        if [k for k, _ in steps] != list(range(1, len(steps) + 1)):
            raise ValueError(f"{path}: window n={n} (episode {ep}) has missing or duplicate k")
        arr = np.array([v for _, v in steps])
        grouped[(ep, n)] = arr
    lengths = {a.shape[0] for a in grouped.values()}
    if len(lengths) > 1:
        raise ValueError(f"{path}: windows have different lengths {sorted(lengths)}")
    out = []
    for (ep, n), arr in sorted(grouped.items()):
        if has_label:
            nt = None if np.isnan(arr[:, 5]).all() else arr[:, 5]
        else:
            nxt = grouped.get((ep, n + 1))
            nt = None if nxt is None else nxt[:, 4]
        out.append(WindowSeries(arr[:, :4], arr[:, 4], index=n, episode=ep, next_targets=nt))
    return out
