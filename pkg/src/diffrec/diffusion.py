"""Diffusion recommender: denoiser MLP, ELBO terms, step sampling, training and inference.

The denoiser predicts the clean interaction vector ``x0`` from a corrupted
``x_t`` and the step ``t`` (x0-parameterisation). The step embedding is
concatenated to ``x_t`` at the input. Reverse inference is deterministic:
each step takes the posterior mean with the predicted ``x0`` plugged in, and
the final step returns the raw prediction.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .data import InteractionMatrix
from .errors import ConfigError, NumericalError, UsageError
from .schedule import NoiseSchedule, build_schedule, posterior_mean

log = logging.getLogger(__name__)

EMBED_DIM = 10


@dataclass
class TrainConfig:
    objective: str = "x0"          # x0 | eps
    steps: int = 5
    T_prime: int = 0
    noise_scale: float = 1e-4
    noise_min: float = 5e-4
    noise_max: float = 5e-3
    lr: float = 1e-4
    batch_size: int = 400
    epochs: int = 1000
    sampler: str = "importance"    # importance | uniform
    step_per: str = "batch"        # batch | row
    seed: int = 1
    hidden: Tuple[int, ...] = (200, 600)
    dropout: float = 0.5
    emb_dim: int = EMBED_DIM
    patience: int = 20
    val_k: int = 20

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.objective not in ("x0", "eps"):
            raise ConfigError(f"objective must be x0 or eps, got {self.objective!r}")
        if self.sampler not in ("importance", "uniform"):
            raise ConfigError(f"sampler must be importance or uniform, got {self.sampler!r}")
        if self.step_per not in ("batch", "row"):
            raise ConfigError(f"step_per must be batch or row, got {self.step_per!r}")
        if not 0 <= self.T_prime <= self.steps:
            raise ConfigError(f"need 0 <= T_prime <= steps, got T_prime={self.T_prime}, steps={self.steps}")
        if self.objective == "eps" and self.noise_scale == 0:
            raise ConfigError("eps objective needs a non-zero noise scale")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and lr > 0 required")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f"hidden dims must be positive, got {self.hidden}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.noise_scale, self.noise_min, self.noise_max, self.steps)

    def as_kv(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(h) for h in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: Mapping[str, str]) -> "TrainConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in kv.items():
            if k not in types:
                continue
            default = getattr(cls, k, None) if k != "hidden" else None
            if k == "hidden":
                kw[k] = tuple(int(x) for x in str(v).strip("[]()").split(",") if x.strip())
            elif isinstance(default, bool):
                kw[k] = str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[k] = int(v)
            elif isinstance(default, float):
                kw[k] = float(v)
            else:
                kw[k] = str(v)
        return cls(**kw)


def denoiser_dims(n_in: int, hidden: Sequence[int], emb_dim: int = EMBED_DIM) -> List[int]:
    """Layer widths: the hidden list read as the decoder side, mirrored for
    the encoder side. (200, 600) on n items gives n+10, 600, 200, 600, n."""
    hidden = list(hidden)
    return [n_in + emb_dim] + hidden[::-1] + hidden[1:] + [n_in]


@dataclass
class DenoiserNet:
    params: nn.ParamStore
    n_in: int
    hidden: Tuple[int, ...]
    emb_dim: int = EMBED_DIM
    dropout: float = 0.5
    prefix: str = "den"

    @classmethod
    def create(cls, n_in: int, hidden=(200, 600), rng=None, emb_dim: int = EMBED_DIM,
               dropout: float = 0.5, prefix: str = "den",
               params: Optional[nn.ParamStore] = None) -> "DenoiserNet":
        rng = rng if rng is not None else np.random.default_rng(0)
        params = params if params is not None else nn.ParamStore()
        nn.init_mlp(params, prefix, denoiser_dims(n_in, hidden, emb_dim), rng)
        return cls(params, n_in, tuple(hidden), emb_dim, dropout, prefix)

    @property
    def dims(self) -> List[int]:
        return denoiser_dims(self.n_in, self.hidden, self.emb_dim)

    def n_params(self) -> int:
        return nn.mlp_param_count(self.dims)


def denoise(net: DenoiserNet, x_t, t, train_mode: bool = False, rng=None, params=None) -> nn.Tensor:
    """Denoiser forward pass. ``t`` is one step for the whole batch or one per row."""
    params = net.params if params is None else params
    x_t = nn.as_tensor(x_t)
    if x_t.data.ndim != 2 or x_t.data.shape[1] != net.n_in:
        raise ConfigError(f"denoiser expects (batch, {net.n_in}) input, got {x_t.data.shape}")
    b = x_t.data.shape[0]
    emb = nn.timestep_embedding(t, net.emb_dim)
    emb = np.broadcast_to(emb, (b, net.emb_dim)) if emb.ndim == 1 else emb
    h = nn.dropout(x_t, net.dropout, train_mode, rng)
    h = nn.concat([h, emb], axis=1)
    return nn.mlp_forward(params, net.prefix, h)


# --------------------------------------------------------------------- losses

def _forward_sample(sched: NoiseSchedule, x0: nn.Tensor, t, eps: np.ndarray) -> nn.Tensor:
    sched.check_step(t)
    if eps.shape != x0.data.shape:
        raise ConfigError(f"eps shape {eps.shape} != x0 shape {x0.data.shape}")
    t = np.asarray(t)
    a = np.sqrt(sched.abar[t])
    b = np.sqrt(sched.one_minus_abar[t])
    if t.ndim == 1:
        a, b = a[:, None], b[:, None]
    return nn.add(nn.mul(x0, a), b * eps)


def row_losses(sched: NoiseSchedule, net: DenoiserNet, x0, t, eps, objective: str = "x0",
               train_mode: bool = False, rng=None, params=None) -> nn.Tensor:
    """Per-row ELBO terms, shape (batch,).

    x0 objective: ``w_t * ||x0_hat - x0||^2`` with ``w_t`` the step weight
    (1 at t = 1 and in the zero-noise mode). eps objective: ``||eps - eps_hat||^2``.
    """
    x0 = nn.as_tensor(x0)
    eps = np.asarray(eps, dtype=np.float64)
    if objective == "eps" and sched.degenerate:
        raise ConfigError("eps objective is undefined without noise (noise_scale = 0)")
    x_t = _forward_sample(sched, x0, t, eps)
    pred = denoise(net, x_t, t, train_mode, rng, params)
    if objective == "eps":
        return nn.sum_rows(nn.square(nn.sub(pred, eps)))
    if objective != "x0":
        raise ConfigError(f"unknown objective {objective!r}")
    w = sched.loss_weight(np.asarray(t))
    se = nn.sum_rows(nn.square(nn.sub(pred, x0)))
    return nn.mul(se, w if np.ndim(w) else float(w))


def loss_t(sched: NoiseSchedule, net: DenoiserNet, x0, t, eps, **kw) -> nn.Tensor:
    """Batch-mean x0-ELBO term at step(s) ``t``."""
    return nn.mean(row_losses(sched, net, x0, t, eps, "x0", **kw))


def loss_eps(sched: NoiseSchedule, net: DenoiserNet, x0, t, eps, **kw) -> nn.Tensor:
    """Batch-mean noise-prediction loss; the net's output is read as eps_hat."""
    if sched.degenerate:
        raise ConfigError("eps objective is undefined without noise (noise_scale = 0)")
    return nn.mean(row_losses(sched, net, x0, t, eps, "eps", **kw))


# ------------------------------------------------------------- step sampler

class ImportanceSampler:
    """Step sampler that switches from uniform to loss-aware sampling.

    Keeps the last ``history`` observed losses per step. Once every step
    has a full buffer, ``p_t`` is proportional to the root of the mean
    squared loss at that step.
    """

    def __init__(self, steps: int, history: int = 10, enabled: bool = True):
        if steps < 1:
            raise ConfigError("sampler needs at least one step")
        self.steps = steps
        self.history = history
        self.enabled = enabled
        self.buf = np.zeros((steps, history))
        self.count = np.zeros(steps, dtype=np.int64)

    @property
    def warm(self) -> bool:
        return bool(self.enabled and (self.count >= self.history).all())

    def record(self, t, values) -> None:
        for tt, v in zip(np.atleast_1d(t).tolist(), np.atleast_1d(values).tolist()):
            if not np.isfinite(v):
                raise NumericalError(f"non-finite loss recorded for step {tt}")
            k = tt - 1
            self.buf[k, self.count[k] % self.history] = v
            self.count[k] += 1

    def mean_sq(self) -> np.ndarray:
        return (self.buf ** 2).mean(axis=1)

    def probs(self) -> np.ndarray:
        if not self.warm:
            return np.full(self.steps, 1.0 / self.steps)
        root = np.sqrt(self.mean_sq())
        tot = root.sum()
        if not tot > 0:
            return np.full(self.steps, 1.0 / self.steps)
        return root / tot

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        """Returns (t, p_t); arrays when ``size`` is given. Steps are 1-based."""
        p = self.probs()
        if not self.warm:
            t = rng.integers(1, self.steps + 1, size=size)
        else:
            t = rng.choice(self.steps, size=size, p=p) + 1
        return t, p[np.asarray(t) - 1]


def sample_step(sampler: ImportanceSampler, rng, size=None):
    return sampler.sample(rng, size)


# ----------------------------------------------------------------- inference

def infer(net: DenoiserNet, sched: NoiseSchedule, x0, T_prime: int = 0,
          rng: Optional[np.random.Generator] = None, params=None,
          denoiser: Optional[Callable] = None) -> np.ndarray:
    """Deterministic reverse pass from ``x0`` (optionally corrupted for
    ``T_prime`` forward steps) down to the predicted clean vector.

    ``denoiser(x, t)`` replaces the network when given (used by tests).
    """
    if not 0 <= T_prime <= sched.steps:
        raise UsageError(f"T_prime must lie in 0..{sched.steps}, got {T_prime}")
    x = np.asarray(x0, dtype=np.float64)
    if denoiser is None:
        denoiser = lambda xx, tt: denoise(net, xx, tt, False, None, params).data
    if T_prime > 0 and not sched.degenerate:
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = rng.standard_normal(x.shape)
        x = np.sqrt(sched.abar[T_prime]) * x + np.sqrt(sched.one_minus_abar[T_prime]) * eps
    for t in range(sched.steps, 0, -1):
        x0_hat = denoiser(x, t)
        if t == 1 or sched.degenerate:
            x = x0_hat
        else:
            x = posterior_mean(sched, x, x0_hat, t)
    if not np.isfinite(x).all():
        raise NumericalError("non-finite scores from reverse pass")
    return x


def score_fn(net: DenoiserNet, sched: NoiseSchedule, T_prime: int = 0, seed: int = 0,
             transform: Optional[Callable] = None):
    """Callable ``(user_ids, history_rows) -> scores`` for the evaluator.

    The corruption draw (if ``T_prime > 0``) is seeded per user, so scores do
    not depend on batching. ``transform`` maps raw history rows to model input.
    """
    def fn(users, rows):
        x = transform(users, rows) if transform is not None else rows
        if T_prime == 0:
            return infer(net, sched, x, 0)
        out = np.empty_like(x)
        for k, u in enumerate(np.asarray(users).tolist()):
            out[k] = infer(net, sched, x[k:k + 1], T_prime, np.random.default_rng([seed, u]))[0]
        return out
    return fn


# ------------------------------------------------------------------ training

@dataclass
class EpochLog:
    epoch: int
    loss: float
    recall: float
    ndcg: float

    def line(self) -> str:
        return f"{self.epoch},{self.loss:.10g},{self.recall:.10g},{self.ndcg:.10g}"


@dataclass
class TrainResult:
    net: DenoiserNet
    sched: NoiseSchedule
    log: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    sampler: Optional[ImportanceSampler] = None


Validation = Tuple[InteractionMatrix, InteractionMatrix]


def validate(net, sched, cfg: TrainConfig, validation: Validation, transform=None) -> Tuple[float, float]:
    from .evaluate import evaluate_split
    hist, target = validation
    rep = evaluate_split(score_fn(net, sched, cfg.T_prime, cfg.seed, transform), hist, target,
                         ks=(cfg.val_k,), keep_per_user=False)
    return rep.recall[cfg.val_k], rep.ndcg[cfg.val_k]


def train(data: InteractionMatrix, cfg: TrainConfig, validation: Optional[Validation] = None,
          net: Optional[DenoiserNet] = None, on_epoch: Optional[Callable[[EpochLog], None]] = None,
          rng: Optional[np.random.Generator] = None) -> TrainResult:
    """Mini-batch training over users with at least one interaction.

    Per batch: draw ``t`` (one per batch, or per row with ``step_per=row``)
    and ``eps``, corrupt, evaluate the ELBO term (divided by ``p_t`` when
    importance sampling) and take an Adam step. With ``validation`` the
    best-Recall@K parameters are kept and training stops after ``patience``
    epochs without improvement.
    """
    cfg.validate()
    sched = cfg.schedule()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if net is None:
        net = DenoiserNet.create(data.n_items, cfg.hidden, rng, cfg.emb_dim, cfg.dropout)
    elif net.n_in != data.n_items:
        raise ConfigError(f"network expects {net.n_in} items, data has {data.n_items}")
    active = np.flatnonzero(data.degree() > 0)
    if len(active) == 0 and cfg.epochs > 0:
        raise ConfigError("training data has no interactions")
    X = data.csr()
    sampler = ImportanceSampler(cfg.steps, enabled=cfg.sampler == "importance")
    result = TrainResult(net, sched, sampler=sampler)
    best_recall, best_params, stale = -1.0, None, 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b, idx in enumerate(nn.iter_batches(len(active), cfg.batch_size, rng)):
            x0 = X[active[idx]].toarray()
            obj = _train_step(net, sched, cfg, sampler, x0, rng, epoch, b)
            losses.append(obj)
        rec, nd = validate(net, sched, cfg, validation) if validation is not None else (float("nan"),) * 2
        entry = EpochLog(epoch, float(np.mean(losses)), rec, nd)
        result.log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.info("epoch %d loss %.6g val r@%d %.4f n@%d %.4f (%.1fs)", epoch, entry.loss,
                 cfg.val_k, rec, cfg.val_k, nd, time.perf_counter() - t0)
        if validation is not None:
            if rec > best_recall:
                best_recall, best_params, stale = rec, net.params.copy(), 0
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
    if best_params is not None:
        net.params.clear()
        net.params.update(best_params)
        net.params.m, net.params.v, net.params.step = best_params.m, best_params.v, best_params.step
    elif cfg.epochs:
        result.best_epoch = len(result.log)
    return result


def _train_step(net, sched, cfg, sampler, x0, rng, epoch, batch) -> float:
    size = x0.shape[0] if cfg.step_per == "row" else None
    t, p = sampler.sample(rng, size)
    eps = rng.standard_normal(x0.shape)
    with nn.GradTape() as tape:
        w = tape.watch(net.params)
        rows = row_losses(sched, net, x0, t, eps, cfg.objective, True, rng, w)
        if cfg.sampler == "importance":
            per = nn.mul(rows, 1.0 / (p if np.ndim(p) else float(p)))
        else:
            per = rows
        obj = nn.mean(per)
    if not np.isfinite(obj.data):
        raise NumericalError(f"loss diverged at epoch {epoch}, batch {batch}, step {t}: {float(obj.data)}")
    grads = tape.gradient(obj, w)
    net.params.adam_step(grads, cfg.lr)
    if np.ndim(t):
        sampler.record(t, rows.data)
    else:
        sampler.record(t, rows.data.mean())
    return float(obj.data)
