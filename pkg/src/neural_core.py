import numpy as np
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Any
from scipy.special import expit
from scipy.linalg import null_space
from sklearn.decomposition import PCA
from config import AUTOENCODER_CONFIG
from log_utils import setup_logger
from sim_types import BatchTooSmall, RankDeficient, ConfigError


@dataclass
class MlpSpec:
    """
    Fully connected network description

    The optional linear projections wrap the core: `input_projection` adds a leading
    Dense(input_dim -> width) and `output_projection` a trailing Dense(width -> output_dim).
    `skip` adds the core input (truncated or zero-padded) to the core output.
    """
    input_dim: int
    hidden: List[int]
    output_dim: int
    residual: bool = False
    batchnorm: bool = False
    input_projection: int = 0
    output_projection: int = 0
    skip: bool = False
    zero_init_output: bool = False

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        widths = [self.input_dim, self.output_dim] + self.hidden
        if any(w <= 0 for w in widths):
            raise ConfigError("All layer widths must be positive")
        if self.input_projection < 0 or self.output_projection < 0:
            raise ConfigError("Projection widths must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'input_dim': self.input_dim,
            'hidden': list(self.hidden),
            'output_dim': self.output_dim,
            'residual': self.residual,
            'batchnorm': self.batchnorm,
            'input_projection': self.input_projection,
            'output_projection': self.output_projection,
            'skip': self.skip,
            'zero_init_output': self.zero_init_output,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MlpSpec':
        return cls(**data)


@dataclass
class MlpWeights:
    """Trainable parameters and batch-norm running statistics, in declaration order"""
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    momentum: float = AUTOENCODER_CONFIG['bn_momentum']
    eps: float = AUTOENCODER_CONFIG['bn_eps']

    def copy(self) -> 'MlpWeights':
        return MlpWeights(
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            momentum=self.momentum,
            eps=self.eps,
        )

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# (op, layer name, fan in, fan out)
PlanEntry = Tuple[str, str, int, int]


def layer_plan(spec: MlpSpec) -> List[PlanEntry]:
    """Flatten a spec into the op sequence executed by forward/backward"""
    plan: List[PlanEntry] = []
    width = spec.input_dim
    if spec.input_projection:
        plan.append(('dense', 'in_proj', width, spec.input_projection))
        width = spec.input_projection
    core_in = width
    if spec.skip:
        plan.append(('skip_begin', 'skip', core_in, core_in))

    for i, h in enumerate(spec.hidden):
        if i > 0 and spec.residual and h == width:
            plan.append(('residual', f'res{i}', width, h))
        else:
            plan.append(('dense', f'dense{i}', width, h))
            if spec.batchnorm:
                plan.append(('bn', f'bn{i}', h, h))
            plan.append(('swish', f'act{i}', h, h))
        width = h

    core_out = spec.output_projection or spec.output_dim
    plan.append(('dense', 'dense_out', width, core_out))
    if spec.skip:
        plan.append(('skip_end', 'skip', core_in, core_out))
    if spec.output_projection:
        plan.append(('dense', 'out_proj', core_out, spec.output_dim))
    return plan


def swish(v: np.ndarray) -> np.ndarray:
    """x * sigmoid(x)"""
    return v * expit(v)


def _swish_grad(v: np.ndarray) -> np.ndarray:
    s = expit(v)
    return s * (1.0 + v * (1.0 - s))


def _match_width(v: np.ndarray, width: int) -> np.ndarray:
    """Truncate or zero-pad columns to `width` (its own adjoint)"""
    if v.shape[1] >= width:
        return v[:, :width]
    out = np.zeros((v.shape[0], width), dtype=v.dtype)
    out[:, :v.shape[1]] = v
    return out


def init_weights(spec: MlpSpec, seed: int = 0) -> MlpWeights:
    """
    Uniform Kaiming initialization, bound sqrt(6 / fan_in); zero biases; identity batch norm.

    With `zero_init_output` the last core dense layer starts at zero.
    """
    rng = np.random.default_rng(seed)
    weights = MlpWeights()

    def dense(name, fan_in, fan_out, zero=False):
        bound = np.sqrt(6.0 / fan_in)
        W = np.zeros((fan_in, fan_out)) if zero else rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.params[f'{name}.W'] = W
        weights.params[f'{name}.b'] = np.zeros(fan_out)

    def batchnorm(name, width):
        weights.params[f'{name}.gamma'] = np.ones(width)
        weights.params[f'{name}.beta'] = np.zeros(width)
        weights.buffers[f'{name}.running_mean'] = np.zeros(width)
        weights.buffers[f'{name}.running_var'] = np.ones(width)

    for op, name, fan_in, fan_out in layer_plan(spec):
        if op == 'dense':
            dense(name, fan_in, fan_out, zero=spec.zero_init_output and name == 'dense_out')
        elif op == 'bn':
            batchnorm(name, fan_out)
        elif op == 'residual':
            dense(f'{name}.dense_a', fan_in, fan_out)
            if spec.batchnorm:
                batchnorm(f'{name}.bn_a', fan_out)
            dense(f'{name}.dense_b', fan_out, fan_out)
            if spec.batchnorm:
                batchnorm(f'{name}.bn_b', fan_out)
    return weights


def cast_weights(weights: MlpWeights, dtype=np.float32) -> MlpWeights:
    """Copy of the weights in another float precision (inference path)"""
    return MlpWeights(
        params={k: v.astype(dtype) for k, v in weights.params.items()},
        buffers={k: v.astype(dtype) for k, v in weights.buffers.items()},
        momentum=weights.momentum,
        eps=weights.eps,
    )


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------

def _dense_forward(x, weights, name):
    return x @ weights.params[f'{name}.W'] + weights.params[f'{name}.b'], x


def _dense_backward(dy, x, weights, name, grads):
    grads[f'{name}.W'] = x.T @ dy
    grads[f'{name}.b'] = dy.sum(axis=0)
    return dy @ weights.params[f'{name}.W'].T


def _bn_forward(x, weights, name, train):
    gamma = weights.params[f'{name}.gamma']
    beta = weights.params[f'{name}.beta']
    running_mean = weights.buffers[f'{name}.running_mean']
    running_var = weights.buffers[f'{name}.running_var']
    if train:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        m = weights.momentum
        running_mean *= m
        running_mean += (1.0 - m) * mean
        running_var *= m
        running_var += (1.0 - m) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + weights.eps)
    x_hat = (x - mean) * inv_std
    return gamma * x_hat + beta, (x_hat, inv_std, train)


def _bn_backward(dy, cache, weights, name, grads):
    x_hat, inv_std, train = cache
    gamma = weights.params[f'{name}.gamma']
    grads[f'{name}.gamma'] = np.sum(dy * x_hat, axis=0)
    grads[f'{name}.beta'] = dy.sum(axis=0)
    dx_hat = dy * gamma
    if not train:
        return dx_hat * inv_std
    n = dy.shape[0]
    return (inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * np.sum(dx_hat * x_hat, axis=0))


def _residual_forward(x, weights, name, batchnorm, train):
    """Linear -> BN -> Swish -> Linear -> BN, add the input, Swish"""
    caches = {}
    h, caches['dense_a'] = _dense_forward(x, weights, f'{name}.dense_a')
    if batchnorm:
        h, caches['bn_a'] = _bn_forward(h, weights, f'{name}.bn_a', train)
    caches['act_a'] = h
    h = swish(h)
    h, caches['dense_b'] = _dense_forward(h, weights, f'{name}.dense_b')
    if batchnorm:
        h, caches['bn_b'] = _bn_forward(h, weights, f'{name}.bn_b', train)
    pre = h + x
    caches['act_out'] = pre
    return swish(pre), caches


def _residual_backward(dy, caches, weights, name, batchnorm, grads):
    d_pre = dy * _swish_grad(caches['act_out'])
    dh = d_pre
    if batchnorm:
        dh = _bn_backward(dh, caches['bn_b'], weights, f'{name}.bn_b', grads)
    dh = _dense_backward(dh, caches['dense_b'], weights, f'{name}.dense_b', grads)
    dh = dh * _swish_grad(caches['act_a'])
    if batchnorm:
        dh = _bn_backward(dh, caches['bn_a'], weights, f'{name}.bn_a', grads)
    dh = _dense_backward(dh, caches['dense_a'], weights, f'{name}.dense_a', grads)
    return dh + d_pre


# ---------------------------------------------------------------------------
# Network forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Intermediates recorded by forward() for the matching backward()"""
    spec: MlpSpec
    weights: MlpWeights
    entries: List[Tuple[str, str, Any]]


def forward(spec: MlpSpec, weights: MlpWeights, batch: np.ndarray,
            mode: str = 'train') -> Tuple[np.ndarray, ForwardCache]:
    """
    Run the network on a (B, input_dim) batch

    Args:
        mode: 'train' (batch statistics, running stats updated in place) or 'eval'

    Returns:
        Tuple of (output batch, cache for backward)
    """
    train = mode == 'train'
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
        raise ConfigError(f"Expected batch with {spec.input_dim} columns, got shape {batch.shape}")
    if train and spec.batchnorm and batch.shape[0] < 2:
        raise BatchTooSmall("Batch normalization in train mode needs at least 2 samples")

    h = batch
    skip_input = None
    entries = []
    for op, name, fan_in, fan_out in layer_plan(spec):
        if op == 'dense':
            h, cache = _dense_forward(h, weights, name)
        elif op == 'bn':
            h, cache = _bn_forward(h, weights, name, train)
        elif op == 'swish':
            cache = h
            h = swish(h)
        elif op == 'residual':
            h, cache = _residual_forward(h, weights, name, spec.batchnorm, train)
        elif op == 'skip_begin':
            skip_input = h
            cache = None
        else:  # skip_end
            h = h + _match_width(skip_input, fan_out)
            cache = None
        entries.append((op, name, cache))
    return h, ForwardCache(spec, weights, entries)


def backward(cache: ForwardCache, output_grad: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Reverse-mode pass through a recorded forward

    Returns:
        Tuple of (gradient w.r.t. the input batch, parameter gradients keyed like weights.params)
    """
    spec, weights = cache.spec, cache.weights
    grads: Dict[str, np.ndarray] = {}
    plan = layer_plan(spec)
    dh = np.asarray(output_grad)
    skip_grad = None
    for (op, name, fan_in, fan_out), (_, _, entry) in zip(reversed(plan), reversed(cache.entries)):
        if op == 'dense':
            dh = _dense_backward(dh, entry, weights, name, grads)
        elif op == 'bn':
            dh = _bn_backward(dh, entry, weights, name, grads)
        elif op == 'swish':
            dh = dh * _swish_grad(entry)
        elif op == 'residual':
            dh = _residual_backward(dh, entry, weights, name, spec.batchnorm, grads)
        elif op == 'skip_end':
            skip_grad = _match_width(dh, fan_in)
        else:  # skip_begin
            dh = dh + skip_grad
    ordered = {k: grads[k] for k in weights.params if k in grads}
    return dh, ordered


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moment buffers and hyperparameters for the parameters being optimized"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, weights: MlpWeights, lr: float = 1e-4) -> 'AdamState':
        return cls(
            m={k: np.zeros_like(v) for k, v in weights.params.items()},
            v={k: np.zeros_like(v) for k, v in weights.params.items()},
            lr=lr,
        )


def adam_step(weights: MlpWeights, grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[MlpWeights, AdamState]:
    """Bias-corrected Adam update of the parameters named in `grads` (in place)"""
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        weights.params[key] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return weights, state


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaBasis:
    """Mean, orthonormal basis columns and singular values of a PCA fit"""
    mean: np.ndarray
    basis: np.ndarray              # (D, k)
    singular_values: np.ndarray    # (k,)
    rank_deficient: bool = False

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.basis

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return coords @ self.basis.T + self.mean


def _sign_convention(basis: np.ndarray) -> np.ndarray:
    """Flip columns so each column's largest-magnitude entry is positive"""
    if basis.size == 0:
        return basis
    rows = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[rows, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def pca_fit(frames: np.ndarray, k: int) -> PcaBasis:
    """
    Mean-centred top-k principal directions with a deterministic sign convention

    Fewer than k nonzero singular values are padded with an orthonormal complement and
    the basis is flagged as rank deficient. k above the data dimension is an error.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, dim = frames.shape
    if k > dim:
        raise RankDeficient(f"Requested {k} components for {dim}-dimensional data")

    components = min(k, n, dim)
    pca = PCA(n_components=components, svd_solver='full')
    pca.fit(frames)
    singular = pca.singular_values_
    tol = singular.max() * max(n, dim) * np.finfo(float).eps if singular.size else 0.0
    keep = int(np.sum(singular > tol)) if singular.size and singular.max() > 0 else 0

    basis = pca.components_[:keep].T
    values = singular[:keep]
    rank_deficient = keep < k
    if rank_deficient:
        setup_logger('NeuralCore').warning(
            f"PCA rank deficient: {keep} nonzero singular values for k={k}; padding with complement"
        )
        complement = np.eye(dim) if keep == 0 else null_space(basis.T)
        basis = np.hstack([basis, complement[:, :k - keep]])
        values = np.concatenate([values, np.zeros(k - keep)])
    return PcaBasis(mean=pca.mean_.copy(), basis=_sign_convention(basis),
                    singular_values=values, rank_deficient=rank_deficient)
