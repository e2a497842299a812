"""Class-conditional Gaussian mixture density head.

Each class y gets its own mixture of full-covariance Gaussians

    q(z | y) = sum_k w_{y,k} N(z; mu_{y,k}, L_{y,k} L_{y,k}^T)

where L is lower-triangular with a softplus-transformed diagonal so the
covariance stays positive definite for any unconstrained parameter matrix.
Class priors p(y) are empirical frequencies, never trained by gradient.
Classification goes through Bayes rule on log densities:

    q(y | z) = q(z | y) p(y) / sum_c q(z | c) p(c)

Two implementations are kept in lockstep, one in plain numpy for evaluation
and one emitting autodiff nodes for training; they agree bit-for-bit because
they perform the identical arithmetic in the identical order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import optim
from . import rng as rngmod

LOG_2PI = float(np.log(2.0 * np.pi))
# softplus(x) = 1 at x = log(e - 1); used to initialize unit covariances.
INV_SOFTPLUS_ONE = float(np.log(np.e - 1.0))


@dataclass
class ClassConditionalMixture:
    n_classes: int
    n_components: int
    dim: int
    means: np.ndarray          # (C, K, r)
    chol_raw: np.ndarray       # (C, K, r, r), unconstrained
    weight_logits: np.ndarray  # (C, K)
    class_priors: np.ndarray   # (C,)


def mixture_init(n_classes: int, n_components: int, dim: int, seed: int,
                 mean_scale: float = 1.0) -> ClassConditionalMixture:
    """Seeded init: scattered means, identity covariances, equal weights and priors."""
    if n_classes < 1 or n_components < 1 or dim < 1:
        raise ValueError("mixture_init: n_classes, n_components and dim must be positive")
    gen = rngmod.stream(seed, rngmod.MIXTURE_INIT)
    means = gen.normal(size=(n_classes, n_components, dim)) * mean_scale
    chol_raw = np.zeros((n_classes, n_components, dim, dim))
    idx = np.arange(dim)
    chol_raw[:, :, idx, idx] = INV_SOFTPLUS_ONE
    return ClassConditionalMixture(
        n_classes=n_classes,
        n_components=n_components,
        dim=dim,
        means=means,
        chol_raw=chol_raw,
        weight_logits=np.zeros((n_classes, n_components)),
        class_priors=np.full(n_classes, 1.0 / n_classes),
    )


def chol_factor(raw: np.ndarray) -> np.ndarray:
    """Lower-triangular factor: strict lower part as-is, softplus on the diagonal."""
    l_fac = np.tril(raw, -1)
    idx = np.arange(raw.shape[-1])
    l_fac[..., idx, idx] = np.logaddexp(0.0, raw[..., idx, idx])
    return l_fac


def _as_points(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {z.shape}")
    return z


def _component_ll(mean: np.ndarray, raw: np.ndarray, z: np.ndarray) -> np.ndarray:
    """(N,) log N(z; mean, L L^T); mirrors the tape arithmetic exactly."""
    r = mean.shape[0]
    l_fac = chol_factor(raw)
    b = z - mean
    y = scipy.linalg.solve_triangular(l_fac, b.T, lower=True, check_finite=False)
    ssq = (y * y).sum(axis=0)
    sumlog = np.log(np.diagonal(l_fac)).sum()
    return (-0.5 * r * LOG_2PI) - (0.5 * ssq + sumlog)


def _logsumexp_vec(v: np.ndarray) -> float:
    shift = v.max()
    return float(np.log(np.exp(v - shift).sum()) + shift)


def _logsumexp_rows(m: np.ndarray) -> np.ndarray:
    shift = m.max(axis=1)
    return np.log(np.exp(m - shift[:, None]).sum(axis=1)) + shift


def class_log_density_matrix(m: ClassConditionalMixture, z) -> np.ndarray:
    """(N, C) of log q(z_i | y = c), no priors applied."""
    z = _as_points(z, m.dim)
    cols = []
    for c in range(m.n_classes):
        lls = np.stack([_component_ll(m.means[c, k], m.chol_raw[c, k], z)
                        for k in range(m.n_components)])  # (K, N)
        logw = m.weight_logits[c] - _logsumexp_vec(m.weight_logits[c])
        cols.append(_logsumexp_rows(lls.T.copy() + logw))
    return np.stack(cols).T.copy()


def mixture_log_density(m: ClassConditionalMixture, y: int, z) -> float:
    """log q(z | y) for one point."""
    z = _as_points(z, m.dim)
    if z.shape[0] != 1:
        raise ValueError("mixture_log_density: one point at a time")
    if not 0 <= y < m.n_classes:
        raise ValueError(f"label {y} out of range for {m.n_classes} classes")
    return float(class_log_density_matrix(m, z)[0, y])


def marginal_log_density(m: ClassConditionalMixture, z) -> np.ndarray:
    """(N,) of log q(z_i) = log sum_c q(z_i | c) p(c)."""
    cond = class_log_density_matrix(m, z)
    with np.errstate(divide="ignore"):
        return _logsumexp_rows(cond + np.log(m.class_priors))


def class_posterior(m: ClassConditionalMixture, z) -> np.ndarray:
    """Posterior q(y | z); (C,) for a single point, else (N, C)."""
    z_arr = np.asarray(z, dtype=np.float64)
    single = z_arr.ndim == 1
    cond = class_log_density_matrix(m, z_arr)
    with np.errstate(divide="ignore"):
        scored = cond + np.log(m.class_priors)
    log_post = scored - _logsumexp_rows(scored)[:, None]
    post = np.exp(log_post)
    return post[0] if single else post


def fit_priors(m: ClassConditionalMixture, labels) -> ClassConditionalMixture:
    """Replace class priors with empirical label frequencies."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("fit_priors: empty label set")
    counts = np.bincount(labels, minlength=m.n_classes).astype(np.float64)
    if counts.size > m.n_classes:
        raise ValueError("fit_priors: label out of range")
    return replace(m, class_priors=counts / counts.sum())


# ---------------------------------------------------------------------------
# tape construction


def mixture_param_arrays(m: ClassConditionalMixture) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for c in range(m.n_classes):
        for k in range(m.n_components):
            out[f"mix_mean_{c}_{k}"] = m.means[c, k]
            out[f"mix_chol_{c}_{k}"] = m.chol_raw[c, k]
        out[f"mix_logits_{c}"] = m.weight_logits[c]
    return out


def set_mixture_param_arrays(m: ClassConditionalMixture, values: dict[str, np.ndarray]) -> None:
    for c in range(m.n_classes):
        for k in range(m.n_components):
            m.means[c, k] = values[f"mix_mean_{c}_{k}"]
            m.chol_raw[c, k] = values[f"mix_chol_{c}_{k}"]
        m.weight_logits[c] = values[f"mix_logits_{c}"]


def make_mixture_nodes(tape: ad.Tape, m: ClassConditionalMixture) -> dict[str, ad.Node]:
    return {name: tape.leaf(arr) for name, arr in mixture_param_arrays(m).items()}


class DensityNodes(NamedTuple):
    class_cond: ad.Node    # (N, C) log q(z | c)
    marginal: ad.Node      # (N,)  log q(z)
    cond_own: ad.Node      # (N,)  log q(z_i | y_i)
    log_post_own: ad.Node  # (N,)  log q(y_i | z_i)


def density_nodes(tape: ad.Tape, pnodes: dict[str, ad.Node], m: ClassConditionalMixture,
                  z_node: ad.Node, labels) -> DensityNodes:
    """Tape twin of the numpy densities, differentiable in z and parameters."""
    labels = np.asarray(labels, dtype=np.int64)
    n = z_node.value.shape[0]
    r = m.dim
    strict_mask = np.tril(np.ones((r, r)), -1)
    const_half_log = tape.constant(-0.5 * r * LOG_2PI)

    class_cols = []
    for c in range(m.n_classes):
        comp_lls = []
        for k in range(m.n_components):
            mean = pnodes[f"mix_mean_{c}_{k}"]
            raw = pnodes[f"mix_chol_{c}_{k}"]
            l_fac = ad.add(ad.mul(raw, tape.constant(strict_mask)),
                           ad.diag_embed(ad.softplus(ad.diag_part(raw))))
            b = ad.sub(z_node, mean)
            y = ad.tri_solve(l_fac, ad.transpose(b))
            ssq = ad.sum_axis(ad.mul(y, y), 0)
            sumlog = ad.sum_all(ad.log(ad.diag_part(l_fac)))
            comp_lls.append(ad.sub(const_half_log, ad.add(ad.mul(0.5, ssq), sumlog)))
        logits = pnodes[f"mix_logits_{c}"]
        logw = ad.sub(logits, ad.logsumexp(logits))
        stacked = ad.transpose(ad.vstack(comp_lls))          # (N, K)
        class_cols.append(ad.logsumexp_rows(ad.add(stacked, logw)))
    class_cond = ad.transpose(ad.vstack(class_cols))         # (N, C)

    with np.errstate(divide="ignore"):
        log_priors = np.log(m.class_priors)
    scored = ad.add(class_cond, tape.constant(log_priors))
    marginal = ad.logsumexp_rows(scored)
    cond_own = ad.take_per_row(class_cond, labels)
    log_post_own = ad.sub(ad.take_per_row(scored, labels), marginal)
    return DensityNodes(class_cond, marginal, cond_own, log_post_own)


# ---------------------------------------------------------------------------
# maximum-likelihood fitting


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(np.maximum(y, 1e-3)))


def mle_fit(z, labels, n_classes: int, n_components: int, steps: int, seed: int,
            lr: float = 0.05, init: ClassConditionalMixture | None = None) -> ClassConditionalMixture:
    """Fit the mixture to features by gradient ascent on sum_i log q(z_i | y_i).

    Means start at the class sample mean plus a seeded jitter (symmetry
    breaking for K > 1), Cholesky diagonals at the per-dimension std.  Priors
    are set to empirical frequencies.  Deterministic in seed.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("mle_fit: expects a (n, dim) feature matrix")
    labels = np.asarray(labels, dtype=np.int64)
    r = z.shape[1]
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts < n_components):
        raise ValueError("mle_fit: every class needs at least n_components samples")

    if init is None:
        m = mixture_init(n_classes, n_components, r, seed)
        gen = rngmod.stream(seed, "mle-init")
        for c in range(n_classes):
            zc = z[labels == c]
            center = zc.mean(axis=0)
            std = zc.std(axis=0)
            scale = 0.25 * std.mean() + 1e-3
            for k in range(n_components):
                m.means[c, k] = center + scale * gen.normal(size=r)
                m.chol_raw[c, k] = np.zeros((r, r))
                m.chol_raw[c, k][np.arange(r), np.arange(r)] = _inv_softplus(np.maximum(std, 1e-2))
    else:
        m = replace(init, means=init.means.copy(), chol_raw=init.chol_raw.copy(),
                    weight_logits=init.weight_logits.copy(), class_priors=init.class_priors.copy())
    m = fit_priors(m, labels)

    params = {k: v.copy() for k, v in mixture_param_arrays(m).items()}
    state = optim.AdamState()
    for _ in range(steps):
        tape = ad.Tape()
        pnodes = {name: tape.leaf(arr) for name, arr in params.items()}
        dens = density_nodes(tape, pnodes, m, tape.constant(z), labels)
        loss = ad.neg(ad.mean_all(dens.cond_own))
        grads = ad.backward(loss, list(pnodes.values()))
        grad_dict = {name: grads[node] for name, node in pnodes.items()}
        params = optim.adam_step(params, grad_dict, state, lr)
    set_mixture_param_arrays(m, params)
    return m
