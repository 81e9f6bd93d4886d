import numpy as np
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from config import INTEGRATOR_CONFIG, TRAINING_CONFIG
from log_utils import setup_logger
from sim_types import StateSequence, MaterialParams, DivergedLoss, ConfigError
from geometry import SimObject
from energy_model import total_incremental_potential
from neural_core import MlpSpec, MlpWeights, AdamState, init_weights, forward, backward, adam_step, cast_weights
from autoencoder import AutoencoderWeights, encode, decode, decoder_vjp
from checkpoint_io import (
    save_checkpoint, load_checkpoint, pack_weights, unpack_weights, pack_scaler, unpack_scaler
)
from train_report import TrainReport


@dataclass
class IntegratorWeights:
    """
    Latent integrator z_t = I(z_{t-1}, z_{t-2}, p_t, p_{t-1}, p_{t-2})

    Inputs are standardized by `input_scaler`; the network output is mapped back to
    latent units with `latent_scaler`.
    """
    spec: MlpSpec
    weights: MlpWeights
    input_scaler: StandardScaler
    latent_scaler: StandardScaler
    latent_dim: int
    bc_dim: int

    def __post_init__(self):
        if self.spec.input_dim != 2 * self.latent_dim + 3 * self.bc_dim or self.spec.output_dim != self.latent_dim:
            raise ConfigError("Integrator dimensions do not match latent_dim / bc_dim")

    def cast(self, dtype=np.float32) -> 'IntegratorWeights':
        return IntegratorWeights(self.spec, cast_weights(self.weights, dtype), self.input_scaler,
                                 self.latent_scaler, self.latent_dim, self.bc_dim)


def integrator_inputs(z_prev: np.ndarray, z_prev2: np.ndarray, p_t: np.ndarray,
                      p_prev: np.ndarray, p_prev2: np.ndarray) -> np.ndarray:
    """Concatenate (z_{t-1}, z_{t-2}, p_t, p_{t-1}, p_{t-2}) row-wise"""
    return np.concatenate([np.atleast_2d(a) for a in (z_prev, z_prev2, p_t, p_prev, p_prev2)], axis=1)


def predict(integrator: IntegratorWeights, z_prev: np.ndarray, z_prev2: np.ndarray,
            p_t: np.ndarray, p_prev: np.ndarray, p_prev2: np.ndarray,
            return_cache: bool = False):
    """One integrator step for a batch (or a single sample)"""
    single = np.ndim(z_prev) == 1
    inputs = integrator_inputs(z_prev, z_prev2, p_t, p_prev, p_prev2)
    dtype = integrator.weights.params['dense_out.W'].dtype
    normalized = ((inputs - integrator.input_scaler.mean_) / integrator.input_scaler.scale_).astype(dtype)
    output, cache = forward(integrator.spec, integrator.weights, normalized, 'eval')
    z = output * integrator.latent_scaler.scale_.astype(dtype) + integrator.latent_scaler.mean_.astype(dtype)
    if return_cache:
        return z, cache
    return z[0] if single else z


def balance_weight(x_prev: np.ndarray, x_prev2: np.ndarray, dt: float,
                   eps: float = INTEGRATOR_CONFIG['balance_eps']) -> np.ndarray:
    """
    1 / max(|v_bar|, eps) with v_bar the vertex-averaged velocity of the history

    Works on single frames (returns a float) or batches (returns (B,)).
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    x_prev2 = np.asarray(x_prev2, dtype=np.float64)
    velocity = (x_prev - x_prev2).reshape(x_prev.shape[:-1] + (-1, 3)) / dt
    mean_velocity = velocity.mean(axis=-2)
    weight = 1.0 / np.maximum(np.linalg.norm(mean_velocity, axis=-1), eps)
    return float(weight) if np.ndim(weight) == 0 else weight


def perturb_latents(z_prev: np.ndarray, z_prev2: np.ndarray, rng: np.random.Generator,
                    noise_scale: float = INTEGRATOR_CONFIG['noise_scale']) -> Tuple[np.ndarray, np.ndarray]:
    """
    Add uniform noise in [-s sigma_d, s sigma_d] per latent dimension d

    sigma_d is the standard deviation of dimension d over the stacked {z_{t-1}, z_{t-2}} batch.
    """
    stacked = np.concatenate([z_prev, z_prev2], axis=0)
    sigma = stacked.std(axis=0)
    bound = noise_scale * sigma
    noise_prev = rng.uniform(-1.0, 1.0, size=z_prev.shape) * bound
    noise_prev2 = rng.uniform(-1.0, 1.0, size=z_prev2.shape) * bound
    return z_prev + noise_prev, z_prev2 + noise_prev2


@dataclass
class LossContext:
    """Absolute-coordinate history and BC data for a batch of predictions at time t"""
    x_prev: np.ndarray              # (B, 3N)
    x_prev2: np.ndarray             # (B, 3N)
    reference_t: np.ndarray         # (B, K, 3) decode reference positions at t
    bc_indices: np.ndarray          # penalty vertices
    bc_targets: np.ndarray          # (B, K_bc, 3) penalty targets at t


def selfsup_loss(z_pred: np.ndarray, context: LossContext, ae: AutoencoderWeights,
                 sim_object: SimObject, params: Optional[MaterialParams], dt: float,
                 use_bc: bool = True, w_bc: float = 1e5) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """
    Incremental potential at the decoded prediction, per sample

    Returns:
        Tuple of (loss per sample (B,), dE/dz_pred (B, r), energy components per sample)
    """
    params = params or sim_object.material

    def energy(x):
        report = total_incremental_potential(
            x, context.x_prev, context.x_prev2, sim_object, params,
            (context.bc_indices, context.bc_targets) if use_bc else None, dt,
            w_bc if use_bc else 0.0)
        return np.atleast_1d(report.value), report.gradient, report.components

    values, dz, components = decoder_vjp(ae, np.atleast_2d(z_pred), context.reference_t, energy)
    return values, dz, components


def weighted_loss(values: np.ndarray, weights: Optional[np.ndarray]) -> float:
    """Batch mean of per-sample losses, each scaled by its balancing weight"""
    if weights is None:
        return float(np.mean(values))
    return float(np.mean(values * weights))


@dataclass
class TripleBatchData:
    """Ground-truth triples (t-2, t-1, t) flattened over all training sequences"""
    z: np.ndarray           # (F, r) latents of every frame
    p: np.ndarray           # (F, bc_dim)
    x: np.ndarray           # (F, 3N)
    triples: np.ndarray     # (M, 3) frame indices into the arrays above


def encode_dataset(sequences: List[StateSequence], ae: AutoencoderWeights) -> TripleBatchData:
    """Cache ground-truth latents once with the frozen encoder"""
    xs, ps, triples = [], [], []
    offset = 0
    for sequence in sequences:
        x = sequence.positions()
        xs.append(x)
        ps.append(sequence.bc_params())
        for t in range(2, len(sequence)):
            triples.append((offset + t - 2, offset + t - 1, offset + t))
        offset += len(sequence)
    x_all = np.concatenate(xs, axis=0)
    return TripleBatchData(z=encode(ae, x_all), p=np.concatenate(ps, axis=0), x=x_all,
                           triples=np.asarray(triples, dtype=np.int64).reshape(-1, 3))


class IntegratorTrainer:
    """
    Trains the latent integrator with the autoencoder frozen

    Self-supervised mode minimizes the incremental potential of the decoded prediction,
    with optional training noise on the latent history and velocity balancing.
    Supervised mode regresses ground-truth latents.
    """

    def __init__(self, config: Optional[Dict] = None):
        self.config = dict(INTEGRATOR_CONFIG)
        self.config.update(config or {})
        self.training_config = TRAINING_CONFIG
        self.logger = setup_logger('IntegratorTrainer', 'training.log')

    def initialize(self, data: TripleBatchData, latent_dim: int, bc_dim: int, hidden: List[int],
                   seed: int) -> IntegratorWeights:
        spec = MlpSpec(input_dim=2 * latent_dim + 3 * bc_dim, hidden=list(hidden), output_dim=latent_dim)
        i0, i1, i2 = data.triples[:, 0], data.triples[:, 1], data.triples[:, 2]
        inputs = integrator_inputs(data.z[i1], data.z[i0], data.p[i2], data.p[i1], data.p[i0])
        input_scaler = StandardScaler().fit(inputs)
        latent_scaler = StandardScaler().fit(data.z)
        weights = init_weights(spec, seed)
        weights.momentum = self.config['bn_momentum']
        weights.eps = self.config['bn_eps']
        return IntegratorWeights(spec, weights, input_scaler, latent_scaler, latent_dim, bc_dim)

    def train(self, sequences: List[StateSequence], ae: AutoencoderWeights, sim_object: SimObject,
              dt: float, hidden: List[int], epochs: Optional[int] = None, lr: Optional[float] = None,
              seed: int = 0, noise: bool = True, balancing: bool = True, supervised: bool = False,
              use_bc: bool = True, w_bc: float = 1e5, batch_size: Optional[int] = None,
              params: Optional[MaterialParams] = None) -> Tuple[IntegratorWeights, TrainReport]:
        """
        Train an integrator on consecutive triples of the training sequences

        Args:
            sequences: Training split (absolute positions)
            ae: Frozen autoencoder
            sim_object: Body whose incremental potential supervises the prediction
            dt: Timestep
            hidden: Integrator hidden widths
            noise / balancing: Ablation switches (self-supervised only)
            supervised: L2 regression on ground-truth latents instead
            use_bc / w_bc: Dirichlet penalty in the loss

        Returns:
            Tuple of (IntegratorWeights, TrainReport)
        """
        epochs = self.config['epochs'] if epochs is None else epochs
        lr = lr or self.config['learning_rate']
        batch_size = batch_size or self.config['batch_size']

        data = encode_dataset(sequences, ae)
        if len(data.triples) == 0:
            raise ConfigError("Integrator training needs sequences with at least 3 frames")
        bc_dim = data.p.shape[1]
        integrator = self.initialize(data, ae.latent_dim, bc_dim, hidden, seed)
        rng = np.random.default_rng(seed)
        state = AdamState.for_weights(integrator.weights, lr)
        kind = 'supervised' if supervised else 'selfsup'
        report = TrainReport(seed=seed, kind=kind)
        n = len(data.triples)
        num_batches = max(1, int(np.ceil(n / batch_size)))

        self.logger.info(f"Training {kind} integrator: {n} triples, latent {ae.latent_dim}, "
                         f"noise={noise}, balancing={balancing}, epochs {epochs}")
        progress = tqdm(range(epochs), desc=kind, disable=not self.training_config['show_progress'])
        for epoch in progress:
            order = rng.permutation(n)
            totals = {'total': 0.0, 'inertial': 0.0, 'elastic': 0.0, 'external': 0.0, 'bc': 0.0}
            for batch_idx in np.array_split(order, num_batches):
                triples = data.triples[batch_idx]
                if supervised:
                    loss, grads, components = self._supervised_batch(integrator, data, triples)
                else:
                    loss, grads, components = self._selfsup_batch(
                        integrator, data, triples, ae, sim_object, params, dt, rng,
                        noise, balancing, use_bc, w_bc)
                if not np.isfinite(loss):
                    raise DivergedLoss(f"Integrator loss became non-finite at epoch {epoch}", report=report)
                adam_step(integrator.weights, grads, state)
                share = len(batch_idx) / n
                totals['total'] += loss * share
                for name, value in components.items():
                    totals[name] += value * share
            report.record(epoch, **totals)
            if epoch % self.training_config['log_every'] == 0:
                self.logger.info(f"epoch {epoch}: loss {totals['total']:.6e}")
                progress.set_postfix(loss=f"{totals['total']:.3e}")
        return integrator, report

    def _network_step(self, integrator: IntegratorWeights, z_prev, z_prev2, p_t, p_prev, p_prev2):
        z_pred, cache = predict(integrator, z_prev, z_prev2, p_t, p_prev, p_prev2, return_cache=True)
        return z_pred, cache

    def _parameter_grads(self, integrator: IntegratorWeights, cache, dz: np.ndarray) -> Dict[str, np.ndarray]:
        _, grads = backward(cache, dz * integrator.latent_scaler.scale_)
        return grads

    def _supervised_batch(self, integrator, data, triples):
        i0, i1, i2 = triples[:, 0], triples[:, 1], triples[:, 2]
        z_pred, cache = self._network_step(integrator, data.z[i1], data.z[i0],
                                           data.p[i2], data.p[i1], data.p[i0])
        diff = z_pred - data.z[i2]
        values = np.sum(diff ** 2, axis=1)
        dz = 2.0 * diff / len(triples)
        return float(np.mean(values)), self._parameter_grads(integrator, cache, dz), {}

    def _selfsup_batch(self, integrator, data, triples, ae, sim_object, params, dt, rng,
                       noise, balancing, use_bc, w_bc):
        i0, i1, i2 = triples[:, 0], triples[:, 1], triples[:, 2]
        encoding = ae.encoding
        x_prev, x_prev2 = data.x[i1], data.x[i0]
        bc_indices = sim_object.dirichlet
        bc_targets = data.x[i2].reshape(len(triples), -1, 3)[:, bc_indices, :]
        context = LossContext(x_prev=x_prev, x_prev2=x_prev2,
                              reference_t=encoding.reference_positions(data.x[i2]),
                              bc_indices=bc_indices, bc_targets=bc_targets)
        weights = balance_weight(x_prev, x_prev2, dt, self.config['balance_eps']) if balancing else None
        p_t, p_prev, p_prev2 = data.p[i2], data.p[i1], data.p[i0]

        histories = [(data.z[i1], data.z[i0], context)]
        if noise:
            z_prev_noisy, z_prev2_noisy = perturb_latents(data.z[i1], data.z[i0], rng, self.config['noise_scale'])
            noisy_context = LossContext(
                x_prev=decode(ae, z_prev_noisy, encoding.reference_positions(x_prev)),
                x_prev2=decode(ae, z_prev2_noisy, encoding.reference_positions(x_prev2)),
                reference_t=context.reference_t, bc_indices=bc_indices, bc_targets=bc_targets)
            histories.append((z_prev_noisy, z_prev2_noisy, noisy_context))

        loss = 0.0
        grads: Dict[str, np.ndarray] = {}
        components: Dict[str, float] = {}
        for z_prev, z_prev2, ctx in histories:
            z_pred, cache = self._network_step(integrator, z_prev, z_prev2, p_t, p_prev, p_prev2)
            values, dz, parts = selfsup_loss(z_pred, ctx, ae, sim_object, params, dt, use_bc, w_bc)
            scale = np.ones(len(values)) if weights is None else weights
            loss += weighted_loss(values, weights)
            dz = dz * (scale / len(values))[:, None]
            for key, g in self._parameter_grads(integrator, cache, dz).items():
                grads[key] = grads[key] + g if key in grads else g
            for name, value in parts.items():
                components[name] = components.get(name, 0.0) + float(np.mean(value))
        return loss, grads, components


def train_integrator_selfsup(sequences: List[StateSequence], ae: AutoencoderWeights,
                             sim_object: SimObject, dt: float, hidden: List[int],
                             epochs: int = INTEGRATOR_CONFIG['epochs'],
                             lr: float = INTEGRATOR_CONFIG['learning_rate'], seed: int = 0,
                             noise: bool = True, balancing: bool = True, use_bc: bool = True,
                             w_bc: float = 1e5, batch_size: int = INTEGRATOR_CONFIG['batch_size']
                             ) -> Tuple[IntegratorWeights, TrainReport]:
    return IntegratorTrainer().train(sequences, ae, sim_object, dt, hidden, epochs, lr, seed,
                                     noise=noise, balancing=balancing, use_bc=use_bc,
                                     w_bc=w_bc, batch_size=batch_size)


def train_integrator_supervised(sequences: List[StateSequence], ae: AutoencoderWeights,
                                sim_object: SimObject, dt: float, hidden: List[int],
                                epochs: int = INTEGRATOR_CONFIG['epochs'],
                                lr: float = INTEGRATOR_CONFIG['learning_rate'], seed: int = 0,
                                batch_size: int = INTEGRATOR_CONFIG['batch_size']
                                ) -> Tuple[IntegratorWeights, TrainReport]:
    return IntegratorTrainer().train(sequences, ae, sim_object, dt, hidden, epochs, lr, seed,
                                     supervised=True, batch_size=batch_size)


def save_integrator(path: str, integrator: IntegratorWeights, metadata: Optional[Dict] = None):
    arrays = pack_weights('integrator', integrator.weights)
    arrays.update(pack_scaler('input_scaler', integrator.input_scaler))
    arrays.update(pack_scaler('latent_scaler', integrator.latent_scaler))
    header = {
        'kind': 'integrator',
        'spec': integrator.spec.to_dict(),
        'latent_dim': integrator.latent_dim,
        'bc_dim': integrator.bc_dim,
        'bn_momentum': integrator.weights.momentum,
        'bn_eps': integrator.weights.eps,
    }
    header.update(metadata or {})
    save_checkpoint(path, arrays, header)


def load_integrator(path: str) -> IntegratorWeights:
    arrays, metadata = load_checkpoint(path)
    if metadata.get('kind') != 'integrator':
        raise ConfigError(f"{path} is not an integrator checkpoint")
    return IntegratorWeights(
        spec=MlpSpec.from_dict(metadata['spec']),
        weights=unpack_weights('integrator', arrays,
                               metadata.get('bn_momentum', INTEGRATOR_CONFIG['bn_momentum']),
                               metadata.get('bn_eps', INTEGRATOR_CONFIG['bn_eps'])),
        input_scaler=unpack_scaler('input_scaler', arrays),
        latent_scaler=unpack_scaler('latent_scaler', arrays),
        latent_dim=metadata['latent_dim'],
        bc_dim=metadata['bc_dim'],
    )
