"""Latent diffusion over clustered items.

Items are clustered with k-means on truncated-SVD embeddings of the training
matrix. Each cluster gets its own variational encoder/decoder; diffusion runs
on the concatenation of the per-cluster latents. Encoder, decoder and
denoiser parameters share one :class:`~diffrec.nn.ParamStore` so a single
Adam step updates all of them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import svds

from . import nn
from .data import InteractionMatrix
from .diffusion import (DenoiserNet, EpochLog, ImportanceSampler, TrainConfig, Validation,
                        denoiser_dims, infer, row_losses)
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 10.0


# ------------------------------------------------------------------ clustering

@dataclass
class ClusterModel:
    assignment: np.ndarray               # item -> category (0-based)
    latent_dims: List[int]

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        C = self.n_clusters
        if C < 1 or len(self.latent_dims) != C:
            raise ConfigError("latent_dims must have one entry per category")
        if any(s == 0 for s in self.sizes):
            raise ConfigError("every category must be non-empty")
        if min(self.latent_dims) < 1:
            raise ConfigError("each category needs at least one latent dimension")

    @property
    def n_clusters(self) -> int:
        return int(self.assignment.max()) + 1 if len(self.assignment) else 0

    @property
    def n_items(self) -> int:
        return len(self.assignment)

    @property
    def members(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.assignment == c) for c in range(self.n_clusters)]

    @property
    def sizes(self) -> List[int]:
        return np.bincount(self.assignment, minlength=self.n_clusters).tolist()

    @property
    def latent_total(self) -> int:
        return int(sum(self.latent_dims))

    def write(self, path, item_tokens: Optional[Sequence[str]] = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, c in enumerate(self.assignment.tolist()):
                tok = item_tokens[i] if item_tokens is not None else i
                fh.write(f"{tok}\t{c}\n")


def kmeans(emb: np.ndarray, n_clusters: int, seed: int = 0, max_iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding. Returns item -> cluster.

    An emptied cluster takes the point of the largest cluster that lies
    farthest from that cluster's centroid.
    """
    X = np.asarray(emb, dtype=np.float64)
    n = len(X)
    if n_clusters < 1:
        raise ConfigError("need at least one cluster")
    if n_clusters > n:
        raise ConfigError(f"cannot form {n_clusters} clusters from {n} items")
    rng = np.random.default_rng(seed)
    centers = np.empty((n_clusters, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        tot = d2.sum()
        pick = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers[c] = X[pick]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iters):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        new = _repair_empty(X, new, n_clusters)
        if np.array_equal(new, assign):
            break
        assign = new
        for c in range(n_clusters):
            centers[c] = X[assign == c].mean(axis=0)
    return assign


def _repair_empty(X, assign, n_clusters):
    assign = assign.copy()
    while True:
        counts = np.bincount(assign, minlength=n_clusters)
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return assign
        big = int(counts.argmax())
        idx = np.flatnonzero(assign == big)
        centroid = X[idx].mean(axis=0)
        far = idx[((X[idx] - centroid) ** 2).sum(axis=1).argmax()]
        assign[far] = empty[0]


def item_embeddings_svd(data, d: int = 64) -> np.ndarray:
    """Item rows of a rank-``d`` truncated SVD: right singular vectors scaled
    by singular values, ordered by decreasing singular value, with each
    vector's largest-magnitude entry made positive."""
    M = data.csr() if isinstance(data, InteractionMatrix) else sp.csr_matrix(data)
    M = M.astype(np.float64)
    if M.nnz == 0 or not np.any(M.data):
        raise DataError("cannot embed items from an all-zero interaction matrix")
    small = min(M.shape)
    if d < 1 or d > small:
        raise ConfigError(f"embedding size must lie in 1..{small}, got {d}")
    if d >= small - 1 or small <= 256:
        _, s, vt = np.linalg.svd(M.toarray(), full_matrices=False)
        s, vt = s[:d], vt[:d]
    else:
        v0 = np.full(small, 1.0 / np.sqrt(small))
        _, s, vt = svds(M, k=d, v0=v0, solver="arpack")
        order = np.argsort(-s, kind="stable")
        s, vt = s[order], vt[order]
    flip = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    flip[flip == 0] = 1.0
    vt = vt * flip[:, None]
    return (vt.T * s).copy()


def split_latent_dims(sizes: Sequence[int], total: int) -> List[int]:
    """Latent width per category proportional to its item count, largest
    remainder rounding, at least one each."""
    C = len(sizes)
    if total < C:
        raise ConfigError(f"latent_total {total} smaller than category count {C}")
    sizes = np.asarray(sizes, dtype=np.float64)
    exact = sizes / sizes.sum() * total
    dims = np.maximum(np.floor(exact).astype(int), 1)
    while dims.sum() > total:
        cand = np.flatnonzero(dims > 1)
        dims[cand[np.argmin((exact - dims)[cand])]] -= 1
    rest = total - dims.sum()
    for c in sorted(range(C), key=lambda c: (-(exact[c] - dims[c]), c))[:rest]:
        dims[c] += 1
    return dims.tolist()


def build_clusters(data: InteractionMatrix, n_clusters: int, latent_total: int = 300,
                   embed_dim: int = 64, seed: int = 0) -> ClusterModel:
    if n_clusters == 1:
        assign = np.zeros(data.n_items, dtype=np.int64)
    else:
        d = min(embed_dim, min(data.n_users, data.n_items))
        d = max(d, n_clusters) if n_clusters <= min(data.n_users, data.n_items) else d
        assign = kmeans(item_embeddings_svd(data, d), n_clusters, seed)
    sizes = np.bincount(assign, minlength=n_clusters)
    return ClusterModel(assign, split_latent_dims(sizes, latent_total))


# ------------------------------------------------------------------ the model

@dataclass
class LatentConfig(TrainConfig):
    clusters: int = 2
    latent_total: int = 300
    vae_hidden: int = 300
    lam: str = "auto"              # number, or "auto": match the two terms on the first batch
    gamma_max: float = 0.3
    anneal_steps: int = -1         # -1: 200 epochs worth of batches
    cluster_embed_dim: int = 64
    latent_dropout: float = 0.0

    def validate(self) -> None:
        super().validate()
        if self.clusters < 1 or self.latent_total < self.clusters:
            raise ConfigError("need clusters >= 1 and latent_total >= clusters")
        if self.gamma_max < 0:
            raise ConfigError("gamma_max must be non-negative")
        if self.lam != "auto":
            try:
                ok = float(self.lam) >= 0
            except ValueError:
                ok = False
            if not ok:
                raise ConfigError(f"lam must be a non-negative number or 'auto', got {self.lam!r}")

    @property
    def lam_auto(self) -> bool:
        return str(self.lam) == "auto"


@dataclass
class LatentModel:
    clusters: ClusterModel
    params: nn.ParamStore
    vae_hidden: List[int]
    denoiser: DenoiserNet

    @classmethod
    def create(cls, clusters: ClusterModel, hidden=(200, 600), vae_hidden_total: int = 300,
               rng=None, emb_dim: int = 10, dropout: float = 0.0) -> "LatentModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        params = nn.ParamStore()
        C = clusters.n_clusters
        width = max(1, int(round(vae_hidden_total / C)))
        widths = [width] * C
        for c, (n_c, l_c) in enumerate(zip(clusters.sizes, clusters.latent_dims)):
            nn.init_mlp(params, f"enc{c}", [n_c, width, 2 * l_c], rng)
            nn.init_mlp(params, f"dec{c}", [l_c, width, n_c], rng)
        den = DenoiserNet.create(clusters.latent_total, hidden, rng, emb_dim, dropout, "den", params)
        return cls(clusters, params, widths, den)


def encode(model: LatentModel, x0, rng=None, deterministic: bool = False, params=None):
    """Returns (z0, [(mu_c, logvar_c)]); z0 concatenates the per-category latents.

    Deterministic mode uses the means; otherwise ``z = mu + sigma * eps``.
    """
    params = model.params if params is None else params
    x0 = nn.as_tensor(x0)
    if x0.data.ndim != 2 or x0.data.shape[1] != model.clusters.n_items:
        raise ConfigError(f"expected (batch, {model.clusters.n_items}) input, got {x0.data.shape}")
    zs, stats = [], []
    for c, (idx, l_c) in enumerate(zip(model.clusters.members, model.clusters.latent_dims)):
        h = nn.mlp_forward(params, f"enc{c}", nn.take_cols(x0, idx))
        mu = nn.take_cols(h, slice(0, l_c))
        logvar = nn.clip(nn.take_cols(h, slice(l_c, 2 * l_c)), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        stats.append((mu, logvar))
        if deterministic:
            zs.append(mu)
        else:
            eps = rng.standard_normal(mu.data.shape)
            zs.append(nn.add(mu, nn.mul(nn.exp(nn.mul(logvar, 0.5)), eps)))
    return nn.concat(zs, axis=1), stats


def _split_latent(model: LatentModel, z):
    z = nn.as_tensor(z)
    if z.data.ndim != 2 or z.data.shape[1] != model.clusters.latent_total:
        raise ConfigError(f"expected (batch, {model.clusters.latent_total}) latent, got {z.data.shape}")
    bounds = np.cumsum([0] + model.clusters.latent_dims)
    return [nn.take_cols(z, slice(lo, hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]


def decode_parts(model: LatentModel, z, params=None) -> List[nn.Tensor]:
    params = model.params if params is None else params
    return [nn.mlp_forward(params, f"dec{c}", zc) for c, zc in enumerate(_split_latent(model, z))]


def decode(model: LatentModel, z, params=None) -> nn.Tensor:
    """Per-category logits scattered back to global item positions."""
    parts = decode_parts(model, z, params)
    stacked = nn.concat(parts, axis=1)
    order = np.concatenate(model.clusters.members)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    return nn.take_cols(stacked, inverse)


def gaussian_kl(mu: nn.Tensor, logvar: nn.Tensor) -> nn.Tensor:
    """Per-row KL(N(mu, diag(exp(logvar))) || N(0, I))."""
    inner = nn.sub(nn.add(nn.exp(logvar), nn.square(mu)), nn.add(logvar, 1.0))
    return nn.mul(nn.sum_rows(inner), 0.5)


def vae_terms(model: LatentModel, x0, rng, gamma: float, deterministic: bool = False, params=None):
    """(per-row negative ELBO, z0, nll rows, kl rows)."""
    x0 = nn.as_tensor(x0)
    z0, stats = encode(model, x0, rng, deterministic, params)
    parts = decode_parts(model, z0, params)
    nll = None
    kl = None
    for c, (idx, logits) in enumerate(zip(model.clusters.members, parts)):
        ll = nn.sum_rows(nn.mul(nn.log_softmax(logits), x0.data[:, idx]))
        k = gaussian_kl(*stats[c])
        nll = nn.mul(ll, -1.0) if nll is None else nn.sub(nll, ll)
        kl = k if kl is None else nn.add(kl, k)
    neg_elbo = nn.add(nll, nn.mul(kl, gamma)) if gamma else nll
    return neg_elbo, z0, nll, kl


def vae_loss(model: LatentModel, x0, rng, gamma_now: float, **kw) -> nn.Tensor:
    """Batch mean of ``-sum_c [log p(x0^c | z0^c) - gamma * KL_c]`` with a
    multinomial (per-category softmax) likelihood."""
    if gamma_now < 0:
        raise ConfigError("gamma must be non-negative")
    return nn.mean(vae_terms(model, x0, rng, gamma_now, **kw)[0])


def infer_latent(model: LatentModel, sched, x0, T_prime: int = 0, rng=None) -> np.ndarray:
    z0, _ = encode(model, x0, deterministic=True)
    z_hat = infer(model.denoiser, sched, z0.data, T_prime, rng)
    return decode(model, z_hat).data


def latent_score_fn(model: LatentModel, sched, T_prime: int = 0, seed: int = 0, transform=None):
    def fn(users, rows):
        x = transform(users, rows) if transform is not None else rows
        if T_prime == 0:
            return infer_latent(model, sched, x, 0)
        out = np.empty_like(x)
        for k, u in enumerate(np.asarray(users).tolist()):
            out[k] = infer_latent(model, sched, x[k:k + 1], T_prime, np.random.default_rng([seed, u]))[0]
        return out
    return fn


# ------------------------------------------------------------------ training

@dataclass
class LatentResult:
    model: LatentModel
    sched: object
    log: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    term_ratio: float = float("nan")
    lam: float = float("nan")


def gamma_at(step: int, gamma_max: float, anneal_steps: int) -> float:
    if anneal_steps <= 0:
        return gamma_max
    return gamma_max * min(1.0, step / anneal_steps)


def calibrate_lam(model: LatentModel, sched, cfg: LatentConfig, x0, rng) -> float:
    """lam such that ``lam * E_t[objective]`` equals the VAE term on ``x0``.

    The expectation is over a uniform step draw, evaluated exactly by
    looping over every step, so it does not depend on which ``t`` the first
    batch happens to draw.
    """
    neg_elbo, z0, _, _ = vae_terms(model, x0, rng, 0.0)
    eps = rng.standard_normal(z0.data.shape)
    per_t = [float(row_losses(sched, model.denoiser, z0.data, t, eps, cfg.objective).data.mean())
             for t in range(1, sched.steps + 1)]
    # importance mode divides by p_t = 1/T before warm-up
    expect = float(np.sum(per_t)) if cfg.sampler == "importance" else float(np.mean(per_t))
    v = abs(float(neg_elbo.data.mean()))
    if expect <= 0 or not np.isfinite(expect) or v == 0:
        return 0.1
    return v / expect


def train_latent(data: InteractionMatrix, cfg: LatentConfig, validation: Optional[Validation] = None,
                 model: Optional[LatentModel] = None, on_epoch=None, rng=None) -> LatentResult:
    """Joint optimisation of ``vae_loss + lam * diffusion_loss(z0)``."""
    cfg.validate()
    sched = cfg.schedule()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if model is None:
        clusters = build_clusters(data, cfg.clusters, cfg.latent_total, cfg.cluster_embed_dim, cfg.seed)
        model = LatentModel.create(clusters, cfg.hidden, cfg.vae_hidden, rng, cfg.emb_dim, cfg.latent_dropout)
    active = np.flatnonzero(data.degree() > 0)
    if len(active) == 0 and cfg.epochs > 0:
        raise ConfigError("training data has no interactions")
    X = data.csr()
    n_batches = max(1, -(-len(active) // cfg.batch_size))
    anneal = cfg.anneal_steps if cfg.anneal_steps >= 0 else 200 * n_batches
    sampler = ImportanceSampler(cfg.steps, enabled=cfg.sampler == "importance")
    result = LatentResult(model, sched)
    if cfg.lam_auto:
        x_first = X[active[: cfg.batch_size]].toarray()
        lam = calibrate_lam(model, sched, cfg, x_first, np.random.default_rng([cfg.seed, 7]))
    else:
        lam = float(cfg.lam)
    result.lam = lam
    log.info("lam = %.6g", lam)
    best, best_params, stale = -1.0, None, 0
    ratios = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b, idx in enumerate(nn.iter_batches(len(active), cfg.batch_size, rng)):
            x0 = X[active[idx]].toarray()
            gamma = gamma_at(model.params.step, cfg.gamma_max, anneal)
            t, p = sampler.sample(rng, x0.shape[0] if cfg.step_per == "row" else None)
            with nn.GradTape() as tape:
                w = tape.watch(model.params)
                neg_elbo, z0, _, _ = vae_terms(model, x0, rng, gamma, params=w)
                eps = rng.standard_normal(z0.data.shape)
                rows = row_losses(sched, model.denoiser, z0, t, eps, cfg.objective, True, rng, w)
                diff = nn.mul(rows, 1.0 / (p if np.ndim(p) else float(p))) if cfg.sampler == "importance" else rows
                v_mean, d_mean = nn.mean(neg_elbo), nn.mean(diff)
                total = nn.add(v_mean, nn.mul(d_mean, lam)) if lam else v_mean
            if not np.isfinite(total.data):
                raise NumericalError(f"loss diverged at epoch {epoch}, batch {b}")
            grads = tape.gradient(total, w)
            model.params.adam_step(grads, cfg.lr)
            sampler.record(t, rows.data if np.ndim(t) else rows.data.mean())
            losses.append(float(total.data))
            if epoch == 1 and abs(float(v_mean.data)) > 0:
                ratios.append(lam * float(d_mean.data) / float(v_mean.data))
        if epoch == 1 and ratios:
            result.term_ratio = float(np.mean(ratios))
            log.info("epoch 1: lam * diffusion / vae loss ratio = %.3g", result.term_ratio)
        rec = nd = float("nan")
        if validation is not None:
            from .evaluate import evaluate_split
            rep = evaluate_split(latent_score_fn(model, sched, cfg.T_prime, cfg.seed), validation[0],
                                 validation[1], ks=(cfg.val_k,), keep_per_user=False)
            rec, nd = rep.recall[cfg.val_k], rep.ndcg[cfg.val_k]
        entry = EpochLog(epoch, float(np.mean(losses)), rec, nd)
        result.log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.info("epoch %d loss %.6g val r@%d %.4f (%.1fs)", epoch, entry.loss, cfg.val_k, rec,
                 time.perf_counter() - t0)
        if validation is not None:
            if rec > best:
                best, best_params, stale, result.best_epoch = rec, model.params.copy(), 0, epoch
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_params is not None:
        model.params.clear()
        model.params.update(best_params)
        model.params.m, model.params.v, model.params.step = best_params.m, best_params.v, best_params.step
    elif cfg.epochs:
        result.best_epoch = len(result.log)
    return result


# ------------------------------------------------------------ parameter counts

def diffrec_param_count(n_items: int, hidden=(200, 600), emb_dim: int = 10) -> int:
    return nn.mlp_param_count(denoiser_dims(n_items, hidden, emb_dim))


def latent_param_counts(sizes: Sequence[int], latent_dims: Sequence[int], vae_hidden: Sequence[int],
                        hidden=(200, 600), emb_dim: int = 10) -> Dict[str, int]:
    enc = sum(nn.mlp_param_count([n, h, 2 * l]) for n, l, h in zip(sizes, latent_dims, vae_hidden))
    dec = sum(nn.mlp_param_count([l, h, n]) for n, l, h in zip(sizes, latent_dims, vae_hidden))
    den = nn.mlp_param_count(denoiser_dims(int(sum(latent_dims)), hidden, emb_dim))
    return {"encoders": enc, "decoders": dec, "denoiser": den, "total": enc + dec + den}


def count_params(model) -> Dict[str, int]:
    """Trainable scalar counts per component, read off the actual tensors."""
    if isinstance(model, LatentModel):
        p = model.params
        enc = sum(v.size for k, v in p.items() if k.startswith("enc"))
        dec = sum(v.size for k, v in p.items() if k.startswith("dec"))
        den = p.n_params(model.denoiser.prefix + ".")
        return {"encoders": int(enc), "decoders": int(dec), "denoiser": den, "total": int(enc + dec + den)}
    if isinstance(model, DenoiserNet):
        n = model.params.n_params(model.prefix + ".")
        return {"encoders": 0, "decoders": 0, "denoiser": n, "total": n}
    raise TypeError(f"cannot count parameters of {type(model).__name__}")
