"""Multilayer perceptron with exact input Jacobians.

The network is a stack of hidden blocks (linear -> optional batchnorm ->
nonlinearity -> optional dropout) followed by a final linear layer.  Two
forward implementations are kept in lockstep:

* `forward_fast` runs plain numpy and is used for evaluation, metrics and
  Jacobian studies;
* `forward_nodes` builds the same arithmetic on an autodiff tape and is used
  by training losses.  Tests assert the two agree bit-for-bit.

Batchnorm statistics are treated as constants of the current batch when
differentiating (both with respect to inputs and weights).  That makes the
network a single deterministic map per step, so its per-sample Jacobian is
well defined and matches what the loss terms see.  Dropout masks are one
vector per hidden layer, shared across the batch, for the same reason.

The log-Jacobian J_f(x) = sqrt(det(Df Df^T)) requires output_dim <=
input_dim; Jacobian routines enforce this even though the config itself
allows wider outputs (a cross-entropy head may have more classes than input
features, it just cannot ask for Jacobians then).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngmod

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
JITTER_DEFAULT = 1e-12
JITTER_RETRY = 1e-8


class DegenerateJacobianError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    nonlinearity: str = "elu"
    dropout_rate: float = 0.0
    use_batchnorm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("MlpConfig: all dimensions must be positive")
        if self.nonlinearity not in ("elu", "identity"):
            raise ValueError(f"MlpConfig: unknown nonlinearity {self.nonlinearity!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("MlpConfig: dropout_rate must be in [0, 1)")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass
class MlpParams:
    config: MlpConfig
    weights: list[np.ndarray]   # (fan_out, fan_in) per layer
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray]  # gamma, one per hidden layer when batchnorm is on
    bn_shift: list[np.ndarray]  # beta
    bn_mean: list[np.ndarray]   # running statistics, not trained by gradient
    bn_var: list[np.ndarray]


@dataclass
class DropoutMask:
    """Per-hidden-layer keep masks, already scaled by 1/(1 - rate)."""

    masks: list[np.ndarray]


def mlp_init(config: MlpConfig, seed: int) -> MlpParams:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    weights, biases = [], []
    dims = config.layer_dims
    for li in range(len(dims) - 1):
        fan_in, fan_out = dims[li], dims[li + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        gen = rngmod.stream(seed, rngmod.INIT, li)
        weights.append(gen.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    bn_scale, bn_shift, bn_mean, bn_var = [], [], [], []
    if config.use_batchnorm:
        for h in config.hidden_dims:
            bn_scale.append(np.ones(h))
            bn_shift.append(np.zeros(h))
            bn_mean.append(np.zeros(h))
            bn_var.append(np.ones(h))
    return MlpParams(config, weights, biases, bn_scale, bn_shift, bn_mean, bn_var)


def sample_dropout_mask(config: MlpConfig, gen: np.random.Generator) -> DropoutMask:
    masks = []
    rate = config.dropout_rate
    for h in config.hidden_dims:
        if rate == 0.0:
            masks.append(np.ones(h))
        else:
            keep = (gen.random(h) >= rate).astype(np.float64)
            masks.append(keep / (1.0 - rate))
    return DropoutMask(masks)


def param_arrays(params: MlpParams) -> dict[str, np.ndarray]:
    """Trainable tensors in a fixed, documented order."""
    out: dict[str, np.ndarray] = {}
    n_layers = len(params.weights)
    for li in range(n_layers):
        out[f"w{li}"] = params.weights[li]
        out[f"b{li}"] = params.biases[li]
    for li in range(len(params.bn_scale)):
        out[f"bn_scale{li}"] = params.bn_scale[li]
        out[f"bn_shift{li}"] = params.bn_shift[li]
    return out


def set_param_arrays(params: MlpParams, values: dict[str, np.ndarray]) -> None:
    n_layers = len(params.weights)
    for li in range(n_layers):
        params.weights[li] = values[f"w{li}"]
        params.biases[li] = values[f"b{li}"]
    for li in range(len(params.bn_scale)):
        params.bn_scale[li] = values[f"bn_scale{li}"]
        params.bn_shift[li] = values[f"bn_shift{li}"]


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim == 2:
        return x
    raise ValueError(f"expected a sample or batch, got shape {x.shape}")


def _hidden_stats(params: MlpParams, li: int, z: np.ndarray, mode: str,
                  batch_stats, update_running: bool):
    """Mean and inverse std used to normalize hidden layer li."""
    if batch_stats is not None:
        return batch_stats[li]
    if mode == "train":
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        if update_running:
            params.bn_mean[li] = (1 - BN_MOMENTUM) * params.bn_mean[li] + BN_MOMENTUM * mean
            params.bn_var[li] = (1 - BN_MOMENTUM) * params.bn_var[li] + BN_MOMENTUM * var
    else:
        mean = params.bn_mean[li]
        var = params.bn_var[li]
    return mean, 1.0 / np.sqrt(var + BN_EPS)


def forward_fast(params: MlpParams, x, mode: str = "eval", dropout_mask: DropoutMask | None = None,
                 batch_stats=None, update_running: bool = False, return_stats: bool = False):
    """Plain numpy forward pass; returns (N, output_dim)."""
    cfg = params.config
    h = _as_batch(x)
    if h.shape[1] != cfg.input_dim:
        raise ValueError(f"forward: expected {cfg.input_dim} features, got {h.shape[1]}")
    stats_used = []
    for li in range(len(cfg.hidden_dims)):
        z = h @ params.weights[li].T + params.biases[li]
        if cfg.use_batchnorm:
            mean, invstd = _hidden_stats(params, li, z, mode, batch_stats, update_running)
            stats_used.append((mean, invstd))
            z = (z - mean) * np.broadcast_to(invstd, z.shape)
            z = z * np.tile(params.bn_scale[li], (z.shape[0], 1)) + params.bn_shift[li]
        if cfg.nonlinearity == "elu":
            z = np.where(z > 0, z, np.expm1(z))
        if dropout_mask is not None and cfg.dropout_rate > 0.0:
            z = z * np.broadcast_to(dropout_mask.masks[li], z.shape)
        h = z
    out = h @ params.weights[-1].T + params.biases[-1]
    if return_stats:
        return out, stats_used
    return out


def make_param_nodes(tape: ad.Tape, params: MlpParams) -> dict[str, ad.Node]:
    return {name: tape.leaf(arr) for name, arr in param_arrays(params).items()}


def _stat_nodes(tape: ad.Tape, params: MlpParams, li: int, z: ad.Node, mode: str,
                batch_stats, update_running: bool):
    """Batch statistics for the tape forward, as a pair of (width,) nodes.

    Freshly computed train-mode statistics are built from tape ops so that
    parameter gradients flow through the normalization.  Provided statistics
    (numpy pairs from forward_fast, or node pairs from an earlier tape pass)
    are reused as-is; eval mode reads the running averages as constants.
    """
    if batch_stats is not None:
        mean, invstd = batch_stats[li]
        if isinstance(mean, ad.Node):
            return mean, invstd
        return tape.constant(mean), tape.constant(invstd)
    if mode != "train":
        mean = params.bn_mean[li]
        return tape.constant(mean), tape.constant(1.0 / np.sqrt(params.bn_var[li] + BN_EPS))
    n = z.value.shape[0]
    mean_nd = ad.mul(1.0 / n, ad.sum_axis(z, 0))
    diff = ad.sub(z, ad.tile_rows(mean_nd, n))
    var_nd = ad.mul(1.0 / n, ad.sum_axis(ad.mul(diff, diff), 0))
    invstd_nd = ad.exp(ad.mul(-0.5, ad.log(ad.add(var_nd, float(BN_EPS)))))
    if update_running:
        params.bn_mean[li] = (1 - BN_MOMENTUM) * params.bn_mean[li] + BN_MOMENTUM * mean_nd.value
        params.bn_var[li] = (1 - BN_MOMENTUM) * params.bn_var[li] + BN_MOMENTUM * var_nd.value
    return mean_nd, invstd_nd


def forward_nodes(tape: ad.Tape, pnodes: dict[str, ad.Node], params: MlpParams, x_node: ad.Node,
                  mode: str = "eval", dropout_mask: DropoutMask | None = None,
                  batch_stats=None, update_running: bool = False):
    """Tape twin of forward_fast; returns (output node, batch stats used)."""
    cfg = params.config
    h = x_node
    n = h.value.shape[0]
    stats_used = []
    for li in range(len(cfg.hidden_dims)):
        z = ad.add(ad.matmul(h, ad.transpose(pnodes[f"w{li}"])), pnodes[f"b{li}"])
        if cfg.use_batchnorm:
            mean_nd, invstd_nd = _stat_nodes(tape, params, li, z, mode, batch_stats, update_running)
            stats_used.append((mean_nd, invstd_nd))
            zc = ad.sub(z, ad.tile_rows(mean_nd, n))
            zn = ad.mul(zc, ad.tile_rows(invstd_nd, n))
            z = ad.add(ad.mul(zn, ad.tile_rows(pnodes[f"bn_scale{li}"], n)), pnodes[f"bn_shift{li}"])
        if cfg.nonlinearity == "elu":
            z = ad.elu(z)
        if dropout_mask is not None and cfg.dropout_rate > 0.0:
            z = ad.mul(z, tape.constant(np.broadcast_to(dropout_mask.masks[li], z.value.shape).copy()))
        h = z
    out = ad.add(ad.matmul(h, ad.transpose(pnodes[f"w{len(cfg.hidden_dims)}"])),
                 pnodes[f"b{len(cfg.hidden_dims)}"])
    return out, stats_used


def _require_jacobian_shape(cfg: MlpConfig):
    if cfg.output_dim > cfg.input_dim:
        raise ValueError(
            f"Jacobian needs output_dim <= input_dim, got {cfg.output_dim} > {cfg.input_dim}"
        )


def jacobian_matrix(params: MlpParams, x, mode: str = "eval",
                    dropout_mask: DropoutMask | None = None, batch_stats=None) -> np.ndarray:
    """(output_dim, input_dim) Jacobian of one sample.

    Row i is the gradient of output coordinate i with respect to x, obtained
    by output_dim reverse passes over one shared forward tape.
    """
    _require_jacobian_shape(params.config)
    xb = _as_batch(x)
    if xb.shape[0] != 1:
        raise ValueError("jacobian_matrix: expects a single sample")
    tape = ad.Tape()
    pnodes = make_param_nodes(tape, params)
    x_leaf = tape.leaf(xb)
    out, _ = forward_nodes(tape, pnodes, params, x_leaf, mode=mode,
                           dropout_mask=dropout_mask, batch_stats=batch_stats)
    rows = []
    for i in range(params.config.output_dim):
        (g,) = ad.grad_nodes(ad.at(out, 0, i), [x_leaf])
        rows.append(np.zeros(xb.shape[1]) if g is None else g.value[0].copy())
    return np.stack(rows)


def jacobian_batch(params: MlpParams, x, mode: str = "eval",
                   dropout_mask: DropoutMask | None = None, batch_stats=None) -> np.ndarray:
    """(N, output_dim, input_dim) Jacobians, vectorized.

    Accumulates the chain product from the output side, so the peak
    intermediate is (N, output_dim, widest_hidden).  Agrees with
    jacobian_matrix to the last bit (tested), it is just faster.
    """
    _require_jacobian_shape(params.config)
    cfg = params.config
    xb = _as_batch(x)
    n = xb.shape[0]

    # Forward pass collecting the diagonal scale of each hidden block.
    h = xb
    scales = []
    for li in range(len(cfg.hidden_dims)):
        z = h @ params.weights[li].T + params.biases[li]
        s = np.ones_like(z)
        if cfg.use_batchnorm:
            mean, invstd = _hidden_stats(params, li, z, mode, batch_stats, False)
            z = (z - mean) * np.broadcast_to(invstd, z.shape)
            z = z * np.tile(params.bn_scale[li], (z.shape[0], 1)) + params.bn_shift[li]
            s = s * (invstd * params.bn_scale[li])
        if cfg.nonlinearity == "elu":
            s = s * np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
            z = np.where(z > 0, z, np.expm1(z))
        if dropout_mask is not None and cfg.dropout_rate > 0.0:
            mask = dropout_mask.masks[li]
            s = s * mask
            z = z * np.broadcast_to(mask, z.shape)
        scales.append(s)
        h = z

    jac = np.broadcast_to(params.weights[-1], (n, cfg.output_dim, cfg.hidden_dims[-1] if cfg.hidden_dims else cfg.input_dim)).copy()
    for li in reversed(range(len(cfg.hidden_dims))):
        jac = jac * scales[li][:, None, :]
        jac = jac @ params.weights[li]
    return jac


def _degenerate(sample_index):
    where = "" if sample_index is None else f" at sample index {sample_index}"
    return DegenerateJacobianError(f"degenerate Jacobian{where}")


def _half_logdet_gram(d: np.ndarray, jitter: float, sample_index=None) -> float:
    gram = d @ d.T
    r = gram.shape[0]
    if not np.isfinite(gram).all():
        raise _degenerate(sample_index)
    for attempt, jit in enumerate((jitter, max(jitter, JITTER_RETRY))):
        try:
            chol = np.linalg.cholesky(0.5 * (gram + gram.T) + jit * np.eye(r))
            return float(np.sum(np.log(np.diagonal(chol))))
        except np.linalg.LinAlgError:
            if attempt == 1 or jitter >= JITTER_RETRY:
                break
    raise _degenerate(sample_index)


def log_jacobian_determinant(params: MlpParams, x, jitter: float = JITTER_DEFAULT,
                             mode: str = "eval", dropout_mask: DropoutMask | None = None,
                             batch_stats=None, sample_index=None) -> float:
    """log J_f(x) = 0.5 * log det(Df Df^T + jitter I).

    On a Cholesky failure the jitter is retried once at 1e-8 before raising
    a degenerate-Jacobian error.
    """
    d = jacobian_matrix(params, x, mode=mode, dropout_mask=dropout_mask, batch_stats=batch_stats)
    return _half_logdet_gram(d, jitter, sample_index)


def log_jacobian_batch(params: MlpParams, x, jitter: float = JITTER_DEFAULT,
                       mode: str = "eval", dropout_mask: DropoutMask | None = None,
                       batch_stats=None) -> np.ndarray:
    """(N,) of log J_f values via the vectorized Jacobian path."""
    jac = jacobian_batch(params, x, mode=mode, dropout_mask=dropout_mask, batch_stats=batch_stats)
    return np.array([_half_logdet_gram(jac[i], jitter, sample_index=i) for i in range(jac.shape[0])])


def log_jacobian_nodes(tape: ad.Tape, pnodes: dict[str, ad.Node], params: MlpParams,
                       x_leaf: ad.Node, jitter: float = JITTER_DEFAULT, mode: str = "train",
                       dropout_mask: DropoutMask | None = None, batch_stats=None) -> list[ad.Node]:
    """Per-sample log J_f as tape nodes, differentiable with respect to weights.

    One forward pass is shared; output_dim reverse sweeps with respect to the
    input produce the Jacobian rows for every sample at once.  Rows of the
    batch do not interact because any batchnorm statistics come from the main
    pass (via batch_stats) or the running averages, never from x_leaf itself;
    parameter gradients still flow through statistics passed in as nodes.
    """
    _require_jacobian_shape(params.config)
    n = x_leaf.value.shape[0]
    r = params.config.output_dim
    out, _ = forward_nodes(tape, pnodes, params, x_leaf, mode=mode,
                           dropout_mask=dropout_mask, batch_stats=batch_stats)
    coord_grads = []
    for j in range(r):
        (g,) = ad.grad_nodes(ad.sum_all(ad.col(out, j)), [x_leaf])
        if g is None:
            g = tape.constant(np.zeros_like(x_leaf.value))
        coord_grads.append(g)

    eye = np.eye(r)
    logdets = []
    for i in range(n):
        d_i = ad.vstack([ad.row(coord_grads[j], i) for j in range(r)])
        gram = ad.matmul(d_i, ad.transpose(d_i))
        if not np.isfinite(gram.value).all():
            raise _degenerate(i)
        try:
            ld = ad.logdet_spd(ad.add(gram, tape.constant(jitter * eye)))
        except ad.NotPositiveDefiniteError:
            if jitter >= JITTER_RETRY:
                raise DegenerateJacobianError(f"degenerate Jacobian at sample index {i}") from None
            try:
                ld = ad.logdet_spd(ad.add(gram, tape.constant(JITTER_RETRY * eye)))
            except ad.NotPositiveDefiniteError:
                raise DegenerateJacobianError(f"degenerate Jacobian at sample index {i}") from None
        logdets.append(ad.mul(0.5, ld))
    return logdets


def amgm_slack(jac: np.ndarray, jitter: float = JITTER_DEFAULT) -> np.ndarray:
    """Slack of the trace/determinant inequality per sample, in log domain.

    For M = D D^T + jitter I the arithmetic-geometric mean inequality gives
    r*log(trace(M)/r) >= log det(M); the returned slack is the left side
    minus the right side and must be nonnegative up to round-off.
    """
    jac = np.asarray(jac)
    if jac.ndim == 2:
        jac = jac[None]
    r = jac.shape[1]
    gram = jac @ np.swapaxes(jac, 1, 2) + jitter * np.eye(r)
    trace = np.trace(gram, axis1=1, axis2=2)
    sign, logdet = np.linalg.slogdet(gram)
    slack = r * np.log(trace / r) - logdet
    slack[sign <= 0] = -np.inf
    return slack
