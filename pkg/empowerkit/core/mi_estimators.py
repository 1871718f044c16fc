"""
Empowerkit - Conditional mutual information estimators

Trains and evaluates the three variational lower bounds on I(X; Y | Z):

  VLB  E[log q(x|y,z) - log q(x|z)] with diagonal-Gaussian heads
  KLD  sup_T E_joint[T] - E_neg[exp(T - 1)]
  JSD  sup_T E_joint[-sp(-T)] - E_neg[sp(T)] + log 4

Negative samples pair a fresh x~ drawn from p(x|z) with the joint (y, z),
which represents the product of conditional marginals. The JSD bound is the
mutual information between a sample and a binary indicator of which of the
two distributions it came from; its critic optimum is the log density ratio,
so the joint mean of T also reads out the KL mutual information.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from django.db import models

from .exceptions import CheckpointError, ContractViolation, EstimatorDivergence, NonFiniteActivation
from .numerics import AdamState, Network, NormalizerState, adam_step, load_network, save_network, sigmoid, softplus

logger = logging.getLogger(__name__)

LOG2 = math.log(2.0)
LOG4 = 2.0 * LOG2
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# A held-out I_JS estimate above log 2 + this margin means the critic overfits.
JSD_OVERFIT_MARGIN = 0.05


class EstimatorKind(models.TextChoices):
    VLB = 'vlb', 'VLB'
    KLD = 'kld', 'KLD'
    JSD = 'jsd', 'JSD'


@dataclass
class CmiSample:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def as_batch(self):
        return CmiBatch(np.atleast_1d(self.x)[None, :], np.atleast_1d(self.y)[None, :], np.atleast_1d(self.z)[None, :])


@dataclass
class CmiBatch:
    """Row-aligned (x, y, z) samples, each of shape (n, dim)."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2 or self.z.ndim != 2:
            raise ContractViolation("CmiBatch arrays must be 2-D (n, dim)")
        if not (len(self.x) == len(self.y) == len(self.z)):
            raise ContractViolation("CmiBatch arrays must have the same number of rows")

    def __len__(self):
        return len(self.x)

    @property
    def dims(self):
        return self.x.shape[1], self.y.shape[1], self.z.shape[1]

    def take(self, indices):
        return CmiBatch(self.x[indices], self.y[indices], self.z[indices])

    def critic_input(self, x=None):
        return np.hstack([self.x if x is None else x, self.y, self.z])


# A negative sampler maps (batch, rng) to x~ with batch.x's shape, drawn from
# p(x|z) for each row's z and independent of that row's y.
NegativeSampler = Callable[[CmiBatch, np.random.Generator], np.ndarray]


def joint_negative_sampler(batch, rng):
    """Return the joint x itself. Only useful for checking estimator wiring."""
    return batch.x.copy()


def shuffled_negative_sampler(batch, rng):
    """Permute x across the batch (valid when x is independent of z)."""
    return batch.x[rng.permutation(len(batch))]


@dataclass
class EstimatorConfig:
    hidden: tuple = (256,)
    activation: str = 'relu'
    glu_layers: int = 0
    glu_width: int = 256
    lr: float = 1e-3
    batch_size: int = 256
    holdout_fraction: float = 0.1
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    kld_clamp: float = 30.0
    zero_output: bool = True

    def to_dict(self):
        data = asdict(self)
        data['hidden'] = list(self.hidden)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['hidden'] = tuple(data.get('hidden', (256,)))
        return cls(**data)


@dataclass
class EstimatorHandle:
    """
    A conditional-MI estimator. For KLD/JSD ``critic`` is T(x, y, z); for VLB
    ``critic`` is the conditional head q(x|y,z) and ``prior_head`` is q(x|z),
    both emitting [mean, log_std] over x.
    """

    kind: str
    x_dim: int
    y_dim: int
    z_dim: int
    critic: Network
    prior_head: Optional[Network] = None
    config: EstimatorConfig = field(default_factory=EstimatorConfig)
    normalizer: NormalizerState = field(default_factory=NormalizerState)
    critic_opt: Optional[AdamState] = None
    prior_opt: Optional[AdamState] = None

    def __post_init__(self):
        if self.critic_opt is None:
            self.critic_opt = AdamState.for_params(self.critic.params, lr=self.config.lr)
        if self.prior_head is not None and self.prior_opt is None:
            self.prior_opt = AdamState.for_params(self.prior_head.params, lr=self.config.lr)

    @property
    def networks(self):
        return (self.critic,) if self.prior_head is None else (self.critic, self.prior_head)


def build_estimator(kind, x_dim, y_dim, z_dim, rng, config=None):
    """Create an untrained estimator for samples with the given dimensions."""
    kind = EstimatorKind(kind)
    config = config or EstimatorConfig()
    common = dict(
        activation=config.activation,
        glu_layers=config.glu_layers,
        glu_width=config.glu_width,
        zero_output=config.zero_output,
    )
    if kind == EstimatorKind.VLB:
        critic = Network.build(y_dim + z_dim, config.hidden, 2 * x_dim, rng, **common)
        prior = Network.build(z_dim, config.hidden, 2 * x_dim, rng, **common)
        return EstimatorHandle(kind.value, x_dim, y_dim, z_dim, critic, prior, config)
    critic = Network.build(x_dim + y_dim + z_dim, config.hidden, 1, rng, **common)
    return EstimatorHandle(kind.value, x_dim, y_dim, z_dim, critic, None, config)


@dataclass
class LossResult:
    """Loss to minimize, the bound it negates, per-sample values and per-network grads."""

    loss: float
    pointwise: np.ndarray
    grads: tuple
    prior_nll: float = None

    @property
    def bound(self):
        return -self.loss


def _gaussian_head(out, x_dim, config):
    mean = out[:, :x_dim]
    raw = out[:, x_dim:]
    log_std = np.clip(raw, config.log_std_min, config.log_std_max)
    inside = (raw >= config.log_std_min) & (raw <= config.log_std_max)
    if np.any(raw < config.log_std_min):
        logger.debug(
            "VLB head std clamped at floor %.4g for %d entries",
            math.exp(config.log_std_min), int(np.sum(raw < config.log_std_min)),
        )
    return mean, log_std, inside


def _gaussian_log_prob(x, mean, log_std):
    """Diagonal-Gaussian log density and its derivatives w.r.t. mean and log_std."""
    inv_std = np.exp(-log_std)
    zs = (x - mean) * inv_std
    log_prob = np.sum(-0.5 * zs * zs - log_std - HALF_LOG_2PI, axis=1)
    return log_prob, zs * inv_std, zs * zs - 1.0


def _check_dims(handle, batch):
    if batch.dims != (handle.x_dim, handle.y_dim, handle.z_dim):
        raise ContractViolation(
            f"batch dims {batch.dims} do not match estimator dims "
            f"{(handle.x_dim, handle.y_dim, handle.z_dim)}"
        )


def vlb_loss(batch, critic, prior_head, config=None):
    """
    Loss -mean[log q(x|y,z) - log q(x|z)] and gradients for both heads.

    The conditional head descends that loss. The prior head is fitted on its
    own negative log-likelihood -mean log q(x|z), returned as ``prior_nll``.
    The per-sample log-ratio is returned in ``pointwise`` for reward use.
    """
    config = config or EstimatorConfig()
    n = len(batch)
    x_dim = batch.x.shape[1]
    cond_out, cond_cache = critic.forward_with_cache(np.hstack([batch.y, batch.z]))
    prior_out, prior_cache = prior_head.forward_with_cache(batch.z)

    cond_mean, cond_log_std, cond_inside = _gaussian_head(cond_out, x_dim, config)
    prior_mean, prior_log_std, prior_inside = _gaussian_head(prior_out, x_dim, config)
    cond_lp, cond_dmean, cond_dls = _gaussian_log_prob(batch.x, cond_mean, cond_log_std)
    prior_lp, prior_dmean, prior_dls = _gaussian_log_prob(batch.x, prior_mean, prior_log_std)

    pointwise = cond_lp - prior_lp
    loss = -float(np.mean(pointwise))

    cond_up = np.hstack([-cond_dmean, -cond_dls * cond_inside]) / n
    prior_up = -np.hstack([prior_dmean, prior_dls * prior_inside]) / n
    cond_grads, _ = critic.backward(cond_cache, cond_up)
    prior_grads, _ = prior_head.backward(prior_cache, prior_up)
    return LossResult(loss, pointwise, (cond_grads, prior_grads), -float(np.mean(prior_lp)))


def kld_loss(batch, negatives, critic, config=None):
    """
    Loss -(mean_joint[T] - mean_neg[exp(T - 1)]) and its gradient.

    ``negatives`` is the x~ array paired with the batch's (y, z). T on
    negatives is clamped at ``kld_clamp`` before exponentiation.
    """
    config = config or EstimatorConfig()
    t_joint, joint_cache = critic.forward_with_cache(batch.critic_input())
    t_neg, neg_cache = critic.forward_with_cache(batch.critic_input(negatives))
    t_joint = t_joint[:, 0]
    t_neg = t_neg[:, 0]

    over = t_neg > config.kld_clamp
    if np.any(over):
        logger.debug("KLD exponent clamped at %.1f for %d negatives", config.kld_clamp, int(np.sum(over)))
    expo = np.exp(np.minimum(t_neg, config.kld_clamp) - 1.0)
    loss = -(float(np.mean(t_joint)) - float(np.mean(expo)))

    joint_grads, _ = critic.backward(joint_cache, np.full((len(t_joint), 1), -1.0 / len(t_joint)))
    neg_grads, _ = critic.backward(neg_cache, (expo * ~over)[:, None] / len(t_neg))
    return LossResult(loss, t_joint, (joint_grads + neg_grads,))


def jsd_loss(batch, negatives, critic, config=None):
    """
    Loss mean_joint[sp(-T)] + mean_neg[sp(T)] - log 4 and its gradient.

    At the optimal critic the negated loss equals twice the Jensen-Shannon
    mutual information, so it never exceeds log 4; ``js_information`` halves it.
    """
    t_joint, joint_cache = critic.forward_with_cache(batch.critic_input())
    t_neg, neg_cache = critic.forward_with_cache(batch.critic_input(negatives))
    t_joint = t_joint[:, 0]
    t_neg = t_neg[:, 0]

    loss = float(np.mean(softplus(-t_joint))) + float(np.mean(softplus(t_neg))) - LOG4

    joint_grads, _ = critic.backward(joint_cache, (-sigmoid(-t_joint) / len(t_joint))[:, None])
    neg_grads, _ = critic.backward(neg_cache, (sigmoid(t_neg) / len(t_neg))[:, None])
    return LossResult(loss, t_joint, (joint_grads + neg_grads,))


def estimator_loss(handle, batch, negatives=None):
    """Dispatch to the loss of ``handle.kind``."""
    _check_dims(handle, batch)
    if handle.kind == EstimatorKind.VLB:
        return vlb_loss(batch, handle.critic, handle.prior_head, handle.config)
    if negatives is None:
        raise ContractViolation(f"{handle.kind} loss needs negative samples")
    if handle.kind == EstimatorKind.KLD:
        return kld_loss(batch, negatives, handle.critic, handle.config)
    return jsd_loss(batch, negatives, handle.critic, handle.config)


def apply_gradients(handle, grads):
    adam_step(handle.critic_opt, handle.critic.params, grads[0])
    if handle.prior_head is not None:
        adam_step(handle.prior_opt, handle.prior_head.params, grads[1])


@dataclass
class TrainingReport:
    heldout: list = field(default_factory=list)
    in_sample: list = field(default_factory=list)
    overfit_flagged: bool = False

    @property
    def final_heldout(self):
        return self.heldout[-1] if self.heldout else None


def split_holdout(data, fraction, rng):
    """Shuffle and split into (train, held-out); at least one row on each side."""
    n = len(data)
    if n < 2:
        raise ContractViolation("need at least two samples to hold some out")
    n_hold = min(max(1, int(round(n * fraction))), n - 1)
    order = rng.permutation(n)
    return data.take(order[n_hold:]), data.take(order[:n_hold])


def _needs_negatives(handle):
    return handle.kind != EstimatorKind.VLB


def fit_epoch(handle, data, negatives, rng):
    """
    One shuffled pass of minibatch Adam steps over ``data``.

    Returns:
        Mean in-sample bound over the minibatches
    """
    order = rng.permutation(len(data))
    bounds = []
    for start in range(0, len(data), handle.config.batch_size):
        minibatch = data.take(order[start:start + handle.config.batch_size])
        neg = negatives(minibatch, rng) if _needs_negatives(handle) else None
        result = estimator_loss(handle, minibatch, neg)
        apply_gradients(handle, result.grads)
        bounds.append(result.bound)
    return float(np.mean(bounds))


def train_estimator(handle, data, negatives, epochs, rng):
    """
    Minibatch Adam ascent on the handle's bound.

    Args:
        handle: EstimatorHandle, trained in place
        data: CmiBatch of i.i.d. samples; ``holdout_fraction`` of it is held out
        negatives: NegativeSampler (ignored for VLB)
        epochs: number of passes over the training split
        rng: numpy Generator

    Returns:
        (handle, TrainingReport) with one held-out and one in-sample bound
        value per epoch
    """
    if epochs < 0:
        raise ContractViolation("epochs must be non-negative")
    report = TrainingReport()
    if epochs == 0:
        return handle, report
    _check_dims(handle, data)
    train, heldout = split_holdout(data, handle.config.holdout_fraction, rng)
    heldout_neg = negatives(heldout, rng) if _needs_negatives(handle) else None

    for epoch in range(epochs):
        try:
            in_sample = fit_epoch(handle, train, negatives, rng)
            held = estimator_loss(handle, heldout, heldout_neg).bound
        except NonFiniteActivation as exc:
            raise EstimatorDivergence(handle.kind, epoch, report.heldout) from exc
        if not math.isfinite(held):
            raise EstimatorDivergence(handle.kind, epoch, report.heldout + [held])
        report.heldout.append(held)
        report.in_sample.append(in_sample)
        logger.debug("%s epoch %d: held-out bound %.4f, in-sample %.4f", handle.kind, epoch, held, report.in_sample[-1])

    if handle.kind == EstimatorKind.JSD and js_information(report.heldout[-1]) > LOG2 + JSD_OVERFIT_MARGIN:
        report.overfit_flagged = True
        logger.warning(
            "held-out I_JS estimate %.4f exceeds log 2 + %.2f; critic is overfitting",
            js_information(report.heldout[-1]), JSD_OVERFIT_MARGIN,
        )
    return handle, report


def js_information(jsd_bound):
    """I_JS estimate from a JSD bound value."""
    return 0.5 * jsd_bound


def estimate_batch(handle, batch):
    """
    Pointwise statistics for every row: log q(x|y,z) - log q(x|z) for VLB,
    T(x, y, z) for KLD and JSD. Pure function of (params, batch).
    """
    _check_dims(handle, batch)
    if handle.kind == EstimatorKind.VLB:
        x_dim = handle.x_dim
        cond_mean, cond_log_std, _ = _gaussian_head(
            handle.critic.forward(np.hstack([batch.y, batch.z])), x_dim, handle.config)
        prior_mean, prior_log_std, _ = _gaussian_head(
            handle.prior_head.forward(batch.z), x_dim, handle.config)
        cond_lp, _, _ = _gaussian_log_prob(batch.x, cond_mean, cond_log_std)
        prior_lp, _, _ = _gaussian_log_prob(batch.x, prior_mean, prior_log_std)
        return cond_lp - prior_lp
    return handle.critic.forward(batch.critic_input())[:, 0]


def estimate_pointwise(handle, sample):
    return float(estimate_batch(handle, sample.as_batch())[0])


def bound_value(handle, batch, negatives=None):
    """The plug-in bound on ``batch`` (twice the I_JS estimate for JSD)."""
    return estimator_loss(handle, batch, negatives).bound


def estimate_mi(handle, batch, sampler=None, rng=None):
    """
    Scalar conditional-MI readout on ``batch``.

    VLB: mean pointwise log-ratio. KLD: plug-in bound with negatives from
    ``sampler``. JSD: mean critic value over the joint samples; the plug-in
    I_JS value is ``js_information(bound_value(handle, batch, negatives))``.
    """
    if handle.kind == EstimatorKind.KLD:
        if sampler is None or rng is None:
            raise ContractViolation("KLD readout needs a negative sampler and a generator")
        return bound_value(handle, batch, sampler(batch, rng))
    return float(np.mean(estimate_batch(handle, batch)))


def save_estimator(directory, handle):
    """Write critic.ekp, prior.ekp (VLB only) and the estimator.json sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_network(directory / 'critic.ekp', handle.critic)
    if handle.prior_head is not None:
        save_network(directory / 'prior.ekp', handle.prior_head)
    sidecar = {
        'kind': handle.kind,
        'dims': [handle.x_dim, handle.y_dim, handle.z_dim],
        'config': handle.config.to_dict(),
        'normalizer': asdict(handle.normalizer),
    }
    (directory / 'estimator.json').write_text(json.dumps(sidecar, indent=2, sort_keys=True) + '\n')


def load_estimator(directory):
    directory = Path(directory)
    try:
        sidecar = json.loads((directory / 'estimator.json').read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read estimator sidecar in {directory}: {exc}") from exc
    critic, _ = load_network(directory / 'critic.ekp')
    prior = None
    if sidecar['kind'] == EstimatorKind.VLB:
        prior, _ = load_network(directory / 'prior.ekp')
    x_dim, y_dim, z_dim = sidecar['dims']
    handle = EstimatorHandle(
        sidecar['kind'], x_dim, y_dim, z_dim, critic, prior,
        EstimatorConfig.from_dict(sidecar['config']),
        NormalizerState(**sidecar.get('normalizer', {})),
    )
    expected_in = y_dim + z_dim if handle.kind == EstimatorKind.VLB else x_dim + y_dim + z_dim
    if critic.input_dim != expected_in:
        raise CheckpointError(f"critic in {directory} expects {critic.input_dim} inputs, sidecar implies {expected_in}")
    return handle
