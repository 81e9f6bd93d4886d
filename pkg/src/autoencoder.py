import numpy as np
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from config import AUTOENCODER_CONFIG, TRAINING_CONFIG
from log_utils import setup_logger
from sim_types import StateSequence, DivergedLoss, ConfigError, BatchTooSmall
from neural_core import (
    MlpSpec, MlpWeights, PcaBasis, AdamState, init_weights, forward, backward,
    adam_step, pca_fit, cast_weights
)
from relative_encoding import RelativeEncoding
from checkpoint_io import (
    save_checkpoint, load_checkpoint, pack_weights, unpack_weights, pack_scaler, unpack_scaler
)
from train_report import TrainReport


@dataclass
class AutoencoderWeights:
    """Encoder / decoder networks with the PCA basis and input normalization they wrap"""
    encoder_spec: MlpSpec
    encoder: MlpWeights
    decoder_spec: MlpSpec
    decoder: MlpWeights
    pca: PcaBasis
    latent_dim: int
    scaler: StandardScaler
    encoding: RelativeEncoding

    def __post_init__(self):
        if self.encoder_spec.output_dim != self.latent_dim or self.decoder_spec.input_dim != self.latent_dim:
            raise ConfigError("Encoder output and decoder input must both equal latent_dim")

    def copy(self) -> 'AutoencoderWeights':
        return AutoencoderWeights(self.encoder_spec, self.encoder.copy(), self.decoder_spec,
                                  self.decoder.copy(), self.pca, self.latent_dim, self.scaler,
                                  self.encoding)

    def cast(self, dtype=np.float32) -> 'AutoencoderWeights':
        """Inference copy in another precision"""
        return AutoencoderWeights(self.encoder_spec, cast_weights(self.encoder, dtype),
                                  self.decoder_spec, cast_weights(self.decoder, dtype), self.pca,
                                  self.latent_dim, self.scaler, self.encoding)


def build_specs(input_dim: int, latent_dim: int, hidden: List[int],
                pca_dim: int) -> Tuple[MlpSpec, MlpSpec]:
    """Symmetric residual encoder/decoder specs around a PCA layer of width pca_dim"""
    encoder = MlpSpec(input_dim=input_dim, hidden=list(hidden), output_dim=latent_dim,
                      residual=True, batchnorm=True, input_projection=pca_dim,
                      skip=True, zero_init_output=True)
    decoder = MlpSpec(input_dim=latent_dim, hidden=list(hidden)[::-1], output_dim=input_dim,
                      residual=True, batchnorm=True, output_projection=pca_dim,
                      skip=True, zero_init_output=True)
    return encoder, decoder


def _set_pca_layers(encoder: MlpWeights, decoder: MlpWeights, pca: PcaBasis):
    """First encoder layer projects onto the basis, last decoder layer expands from it"""
    encoder.params['in_proj.W'] = pca.basis.copy()
    encoder.params['in_proj.b'] = -pca.mean @ pca.basis
    decoder.params['out_proj.W'] = pca.basis.T.copy()
    decoder.params['out_proj.b'] = pca.mean.copy()


def _stack_frames(dataset: Union[List[StateSequence], np.ndarray]) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return np.atleast_2d(dataset)
    return np.concatenate([sequence.positions() for sequence in dataset], axis=0)


class AutoencoderTrainer:
    """
    PCA-initialized autoencoder training on relative-encoded frames

    The loss is the mean squared reconstruction error in relative coordinates (meters).
    """

    def __init__(self, config: Optional[Dict] = None):
        self.config = dict(AUTOENCODER_CONFIG)
        self.config.update(config or {})
        self.training_config = TRAINING_CONFIG
        self.logger = setup_logger('AutoencoderTrainer', 'training.log')

    def initialize(self, relative_frames: np.ndarray, encoding: RelativeEncoding, latent_dim: int,
                   hidden: List[int], seed: int) -> AutoencoderWeights:
        """Fit normalization and PCA, then build networks that start as the rank-r PCA map"""
        input_dim = relative_frames.shape[1]
        if latent_dim > input_dim:
            raise ConfigError(f"latent_dim {latent_dim} exceeds input dimension {input_dim}")
        pca_dim = max(min(self.config['pca_dim'], input_dim), latent_dim)

        scaler = StandardScaler()
        normalized = scaler.fit_transform(relative_frames)
        pca = pca_fit(normalized, pca_dim)

        encoder_spec, decoder_spec = build_specs(input_dim, latent_dim, hidden, pca_dim)
        encoder = init_weights(encoder_spec, seed)
        decoder = init_weights(decoder_spec, seed + 1)
        encoder.momentum = decoder.momentum = self.config['bn_momentum']
        encoder.eps = decoder.eps = self.config['bn_eps']
        _set_pca_layers(encoder, decoder, pca)
        return AutoencoderWeights(encoder_spec, encoder, decoder_spec, decoder, pca,
                                  latent_dim, scaler, encoding)

    def train(self, dataset: Union[List[StateSequence], np.ndarray], encoding: RelativeEncoding,
              latent_dim: int, hidden: List[int], epochs: Optional[int] = None,
              batch_size: Optional[int] = None, lr: Optional[float] = None,
              seed: int = 0) -> Tuple[AutoencoderWeights, TrainReport]:
        """
        Train an autoencoder

        Args:
            dataset: Training sequences (absolute positions) or a (F, 3N) frame matrix
            encoding: Relative encoding applied before the network
            latent_dim: Bottleneck width r
            hidden: Encoder hidden widths (decoder mirrors them)

        Returns:
            Tuple of (AutoencoderWeights, TrainReport)
        """
        epochs = self.config['epochs'] if epochs is None else epochs
        batch_size = batch_size or self.config['batch_size']
        lr = lr or self.config['learning_rate']

        frames = _stack_frames(dataset)
        if frames.shape[0] < 2:
            raise BatchTooSmall("Autoencoder training needs at least 2 frames")
        relative = encoding.encode(frames)
        ae = self.initialize(relative, encoding, latent_dim, hidden, seed)
        normalized = ae.scaler.transform(relative)
        scale = ae.scaler.scale_

        rng = np.random.default_rng(seed)
        encoder_state = AdamState.for_weights(ae.encoder, lr)
        decoder_state = AdamState.for_weights(ae.decoder, lr)
        report = TrainReport(seed=seed, kind='autoencoder')
        n = normalized.shape[0]
        num_batches = max(1, int(np.ceil(n / batch_size)))
        if n // num_batches < 2:
            num_batches = max(1, n // 2)

        self.logger.info(f"Training autoencoder: {n} frames, dim {relative.shape[1]}, "
                         f"latent {latent_dim}, pca {ae.pca.k}, epochs {epochs}")
        progress = tqdm(range(epochs), desc='autoencoder', disable=not self.training_config['show_progress'])
        for epoch in progress:
            order = rng.permutation(n)
            epoch_loss = 0.0
            for batch_idx in np.array_split(order, num_batches):
                target = normalized[batch_idx]
                z, encoder_cache = forward(ae.encoder_spec, ae.encoder, target, 'train')
                output, decoder_cache = forward(ae.decoder_spec, ae.decoder, z, 'train')
                residual = (output - target) * scale
                loss = float(np.mean(residual ** 2))
                if not np.isfinite(loss):
                    raise DivergedLoss(f"Autoencoder loss became non-finite at epoch {epoch}", report=report)
                d_output = 2.0 * residual * scale / residual.size
                dz, decoder_grads = backward(decoder_cache, d_output)
                _, encoder_grads = backward(encoder_cache, dz)
                adam_step(ae.decoder, decoder_grads, decoder_state)
                adam_step(ae.encoder, encoder_grads, encoder_state)
                epoch_loss += loss * len(batch_idx)
            epoch_loss /= n
            report.record(epoch, total=epoch_loss)
            if epoch % self.training_config['log_every'] == 0:
                self.logger.info(f"epoch {epoch}: reconstruction mse {epoch_loss:.6e}")
                progress.set_postfix(loss=f"{epoch_loss:.3e}")
        return ae, report


def train_autoencoder(dataset: Union[List[StateSequence], np.ndarray], encoding: RelativeEncoding,
                      latent_dim: int, hidden: List[int], epochs: int = AUTOENCODER_CONFIG['epochs'],
                      batch: int = AUTOENCODER_CONFIG['batch_size'],
                      lr: float = AUTOENCODER_CONFIG['learning_rate'],
                      seed: int = 0) -> Tuple[AutoencoderWeights, TrainReport]:
    return AutoencoderTrainer().train(dataset, encoding, latent_dim, hidden, epochs, batch, lr, seed)


def encode(ae: AutoencoderWeights, x: np.ndarray) -> np.ndarray:
    """Absolute positions (3N,) or (B, 3N) -> latents (eval mode)"""
    x = np.asarray(x)
    single = x.ndim == 1
    relative = ae.encoding.encode(np.atleast_2d(x))
    normalized = (relative - ae.scaler.mean_) / ae.scaler.scale_
    z, _ = forward(ae.encoder_spec, ae.encoder, normalized.astype(x.dtype, copy=False), 'eval')
    return z[0] if single else z


def decode_relative(ae: AutoencoderWeights, z: np.ndarray) -> np.ndarray:
    """Latents -> relative coordinates (eval mode)"""
    z = np.asarray(z)
    single = z.ndim == 1
    normalized, _ = forward(ae.decoder_spec, ae.decoder, np.atleast_2d(z), 'eval')
    relative = normalized * ae.scaler.scale_.astype(normalized.dtype) + ae.scaler.mean_.astype(normalized.dtype)
    return relative[0] if single else relative


def decode(ae: AutoencoderWeights, z: np.ndarray, bc_values: np.ndarray) -> np.ndarray:
    """
    Latents -> absolute positions

    Args:
        z: (r,) or (B, r) latents
        bc_values: Reference vertex positions (K, 3) or (B, K, 3)
    """
    return ae.encoding.decode(decode_relative(ae, z), bc_values)


def decoder_vjp(ae: AutoencoderWeights, z: np.ndarray, bc_values: np.ndarray,
                full_gradient_fn) -> Tuple[np.ndarray, np.ndarray, object]:
    """
    Decode a batch and pull a full-space gradient back to latent space

    Args:
        z: (B, r) latents
        bc_values: (B, K, 3) reference positions
        full_gradient_fn: Callable x -> (values, gradient (B, 3N), extra)

    Returns:
        Tuple of (values, dE/dz (B, r), extra)
    """
    normalized, cache = forward(ae.decoder_spec, ae.decoder, z, 'eval')
    relative = normalized * ae.scaler.scale_ + ae.scaler.mean_
    x = ae.encoding.decode(relative, bc_values)
    values, gradient, extra = full_gradient_fn(x)
    d_normalized = ae.encoding.pullback(gradient) * ae.scaler.scale_
    dz, _ = backward(cache, d_normalized)
    return values, dz, extra


def save_autoencoder(path: str, ae: AutoencoderWeights):
    arrays = pack_weights('encoder', ae.encoder)
    arrays.update(pack_weights('decoder', ae.decoder))
    arrays.update(pack_scaler('scaler', ae.scaler))
    arrays['pca.mean'] = ae.pca.mean
    arrays['pca.basis'] = ae.pca.basis
    arrays['pca.singular_values'] = ae.pca.singular_values
    metadata = {
        'kind': 'autoencoder',
        'encoder_spec': ae.encoder_spec.to_dict(),
        'decoder_spec': ae.decoder_spec.to_dict(),
        'latent_dim': ae.latent_dim,
        'encoding': ae.encoding.to_dict(),
        'pca_rank_deficient': ae.pca.rank_deficient,
        'bn_momentum': ae.encoder.momentum,
        'bn_eps': ae.encoder.eps,
    }
    save_checkpoint(path, arrays, metadata)


def load_autoencoder(path: str) -> AutoencoderWeights:
    arrays, metadata = load_checkpoint(path)
    if metadata.get('kind') != 'autoencoder':
        raise ConfigError(f"{path} is not an autoencoder checkpoint")
    momentum, eps = metadata['bn_momentum'], metadata['bn_eps']
    pca = PcaBasis(mean=arrays['pca.mean'], basis=arrays['pca.basis'],
                   singular_values=arrays['pca.singular_values'],
                   rank_deficient=metadata['pca_rank_deficient'])
    return AutoencoderWeights(
        encoder_spec=MlpSpec.from_dict(metadata['encoder_spec']),
        encoder=unpack_weights('encoder', arrays, momentum, eps),
        decoder_spec=MlpSpec.from_dict(metadata['decoder_spec']),
        decoder=unpack_weights('decoder', arrays, momentum, eps),
        pca=pca,
        latent_dim=metadata['latent_dim'],
        scaler=unpack_scaler('scaler', arrays),
        encoding=RelativeEncoding.from_dict(metadata['encoding']),
    )
