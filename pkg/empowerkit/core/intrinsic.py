"""
Empowerkit - Intrinsic rewards

ICM (forward-model prediction error), ensemble disagreement and one-step
empowerment, plus the adaptive ICM/empowerment blend. Every signal looks
only at the extrinsic part of the next state; the full current state and
the action are the inputs.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.db import models

from .exceptions import ContractViolation
from .mi_estimators import (
    CmiBatch,
    EstimatorConfig,
    EstimatorKind,
    build_estimator,
    estimate_batch,
    fit_epoch,
    load_estimator,
    save_estimator,
)
from .numerics import AdamState, Network, NormalizerState, adam_step, load_network, normalize_many, save_network, spawn_rngs

logger = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = ['step', 'w_icm', 'w_emp', 'raw_icm', 'norm_icm', 'raw_emp', 'norm_emp', 'extrinsic', 'combined']

FETCH_CRITIC_HIDDEN = (512, 512, 216, 128, 64, 32)
GLU_HEAD_HIDDEN = (128, 64)


class TrainMode(models.TextChoices):
    NONE = 'none', 'PPO only'
    ICM = 'icm', 'ICM'
    DISAGREEMENT = 'disagreement', 'Disagreement'
    EMPOWERMENT_WITH_ICM = 'empowerment_with_icm', 'Empowerment with ICM'


class ThresholdSource(models.TextChoices):
    RAW = 'raw', 'Raw forward loss'
    NORMALIZED = 'normalized', 'Normalized forward loss'


class RewardOrder(models.TextChoices):
    TRAIN_THEN_REWARD = 'train_then_reward', 'Train models, then score the rollout'
    REWARD_THEN_TRAIN = 'reward_then_train', 'Score the rollout, then train models'


class ForwardModel:
    """f(s_t, a_t) -> predicted s^ex_{t+1}, one hidden layer by default."""

    def __init__(self, state_dim, action_dim, extrinsic_dim, rng, hidden=(256,), lr=2e-4, activation='relu',
                 zero_output=False):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = Network.build(
            state_dim + action_dim, hidden, extrinsic_dim, rng, activation=activation, zero_output=zero_output)
        self.opt = AdamState.for_params(self.net.params, lr=lr)

    @property
    def extrinsic_dim(self):
        return self.net.output_dim

    def predict(self, states, actions):
        return self.net.forward(np.hstack([np.atleast_2d(states), np.atleast_2d(actions)]))

    def loss_and_grads(self, states, actions, s_ex_next):
        out, cache = self.net.forward_with_cache(np.hstack([states, actions]))
        err = out - s_ex_next
        loss = float(np.mean(0.5 * np.sum(err * err, axis=1)))
        grads, _ = self.net.backward(cache, err / len(err))
        return loss, grads

    def fit(self, states, actions, s_ex_next, epochs, batch_size, rng):
        """Minibatch Adam on the forward loss; returns the mean loss of each epoch."""
        losses = []
        for _ in range(epochs):
            order = rng.permutation(len(states))
            epoch_losses = []
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                loss, grads = self.loss_and_grads(states[idx], actions[idx], s_ex_next[idx])
                adam_step(self.opt, self.net.params, grads)
                epoch_losses.append(loss)
            losses.append(float(np.mean(epoch_losses)))
        return losses


def icm_forward_loss(model, s_t, a_t, s_ex_next):
    """
    0.5 * ||f(s_t, a_t) - s^ex_{t+1}||^2, also the raw ICM reward.

    Returns a float for a single transition and an array for a batch.
    """
    single = np.ndim(s_t) == 1
    err = model.predict(s_t, a_t) - np.atleast_2d(s_ex_next)
    loss = 0.5 * np.sum(err * err, axis=1)
    return float(loss[0]) if single else loss


class ForwardEnsemble:
    """Forward models differing only by init seed and minibatch order."""

    def __init__(self, state_dim, action_dim, extrinsic_dim, seed, size=5, hidden=(256,), lr=2e-4):
        if size < 2:
            raise ContractViolation("an ensemble needs at least two members")
        rngs = spawn_rngs(seed, 2 * size)
        self.members = [
            ForwardModel(state_dim, action_dim, extrinsic_dim, rngs[k], hidden, lr) for k in range(size)
        ]
        self.order_rngs = rngs[size:]

    def __len__(self):
        return len(self.members)

    def predict_all(self, states, actions):
        return np.stack([member.predict(states, actions) for member in self.members])

    def fit(self, states, actions, s_ex_next, epochs, batch_size):
        """Train on the summed forward losses; returns the summed loss per epoch."""
        per_member = [
            member.fit(states, actions, s_ex_next, epochs, batch_size, rng)
            for member, rng in zip(self.members, self.order_rngs)
        ]
        return [float(sum(values)) for values in zip(*per_member)]


def prediction_variance(predictions):
    """Population variance across members (axis 0), averaged over state dims."""
    return np.var(np.asarray(predictions, dtype=np.float64), axis=0).mean(axis=-1)


def disagreement_reward(ensemble, s_t, a_t):
    single = np.ndim(s_t) == 1
    reward = prediction_variance(ensemble.predict_all(s_t, a_t))
    return float(reward[0]) if single else reward


@dataclass
class EmpowermentConfig:
    """One-step empowerment over (x = a_t, y = s^ex_{t+1}, z = s_t)."""

    estimator: object
    bound: str = EstimatorKind.JSD
    horizon: int = 1

    def __post_init__(self):
        if self.horizon != 1:
            raise ContractViolation("empowerment is computed over a single action step")
        if self.bound not in (EstimatorKind.VLB, EstimatorKind.JSD):
            raise ContractViolation("empowerment rewards use the VLB or JSD bound")
        if self.estimator.kind != self.bound:
            raise ContractViolation(f"estimator kind {self.estimator.kind} != bound {self.bound}")


def empowerment_batch(s_t, a_t, s_ex_next):
    return CmiBatch(np.atleast_2d(a_t), np.atleast_2d(s_ex_next), np.atleast_2d(s_t))


def empowerment_reward(cfg, s_t, a_t, s_ex_next):
    """
    Pointwise empowerment: log q(a|s', s) - log q(a|s) for VLB, T(a, s, s^ex')
    for JSD. Pure function of (estimator params, transition).
    """
    single = np.ndim(s_t) == 1
    reward = estimate_batch(cfg.estimator, empowerment_batch(s_t, a_t, s_ex_next))
    return float(reward[0]) if single else reward


def blend_weights(mean_icm_raw, threshold=0.12, slope=200.0):
    """w_icm = 0.5 (1 - tanh(slope (r - threshold))), w_emp = 1 - w_icm."""
    w_icm = 0.5 * (1.0 - np.tanh(slope * (np.asarray(mean_icm_raw, dtype=np.float64) - threshold)))
    w_emp = 1.0 - w_icm
    if w_icm.ndim == 0:
        return float(w_icm), float(w_emp)
    return w_icm, w_emp


def combined_reward(w_icm, w_emp, r_icm_norm, r_emp_norm, r_extrinsic, coef=0.01):
    return coef * (w_icm * r_icm_norm + w_emp * r_emp_norm) + r_extrinsic


def pure_icm_reward(r_icm_norm, r_extrinsic, coef=0.01):
    return coef * r_icm_norm + r_extrinsic


def pure_disagreement_reward(r_dis_norm, r_extrinsic, coef=0.01):
    return coef * r_dis_norm + r_extrinsic


@dataclass
class BlendState:
    threshold: float = 0.12
    slope: float = 200.0
    source: str = ThresholdSource.RAW
    mean_icm_raw: float = 0.0

    def weights(self, mean_icm):
        return blend_weights(mean_icm, self.threshold, self.slope)


@dataclass
class IntrinsicConfig:
    mode: str = TrainMode.EMPOWERMENT_WITH_ICM
    forward_hidden: tuple = (256,)
    forward_lr: float = 2e-4
    ensemble_size: int = 5
    emp_bound: str = EstimatorKind.JSD
    emp_hidden: tuple = FETCH_CRITIC_HIDDEN
    emp_glu_layers: int = 0
    emp_lr: float = 2e-4
    coef: float = 0.01
    epochs: int = 1
    minibatch: int = 256
    blend_threshold: float = 0.12
    blend_slope: float = 200.0
    threshold_source: str = ThresholdSource.RAW


def empowerment_estimator_config(config):
    """
    Estimator settings for the empowerment critic. With GLU layers enabled
    and the flat-state widths left at their default, the dense part shrinks
    to (128, 64) behind the gates.
    """
    hidden = tuple(config.emp_hidden)
    if config.emp_glu_layers and hidden == FETCH_CRITIC_HIDDEN:
        hidden = GLU_HEAD_HIDDEN
    return EstimatorConfig(
        hidden=hidden,
        activation='relu',
        glu_layers=config.emp_glu_layers,
        lr=config.emp_lr,
        batch_size=config.minibatch,
    )


@dataclass
class RewardBreakdown:
    """Per-(step, env) reward components; weights are per step."""

    extrinsic: np.ndarray
    combined: np.ndarray
    raw_icm: np.ndarray
    norm_icm: np.ndarray
    raw_dis: np.ndarray
    norm_dis: np.ndarray
    raw_emp: np.ndarray
    norm_emp: np.ndarray
    w_icm: np.ndarray
    w_emp: np.ndarray

    def diagnostics(self, start_step=0):
        """One row per step with env-averaged components."""
        rows = []
        for t in range(self.extrinsic.shape[0]):
            rows.append({
                'step': start_step + t,
                'w_icm': float(self.w_icm[t]),
                'w_emp': float(self.w_emp[t]),
                'raw_icm': float(self.raw_icm[t].mean()),
                'norm_icm': float(self.norm_icm[t].mean()),
                'raw_emp': float(self.raw_emp[t].mean()),
                'norm_emp': float(self.norm_emp[t].mean()),
                'extrinsic': float(self.extrinsic[t].mean()),
                'combined': float(self.combined[t].mean()),
            })
        return rows


def write_diagnostics_csv(path, rows, append=False):
    path = Path(path)
    write_header = not append or not path.exists()
    with path.open('a' if append else 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS, lineterminator='\n')
        if write_header:
            writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] if key == 'step' else f"{row[key]:.6f}" for key in DIAGNOSTIC_COLUMNS})


class IntrinsicStack:
    """
    The models, normalizers and blend behind one training mode.

    Inputs to ``compute_rewards`` and ``train_models`` are shaped
    (steps, envs, dim); blend weights use the per-step mean over envs.
    """

    def __init__(self, config, state_dim, action_dim, extrinsic_dim, seed=0):
        self.config = config
        self.mode = TrainMode(config.mode).value
        self.dims = (state_dim, action_dim, extrinsic_dim)
        seed = [int(v) for v in np.atleast_1d(seed)]
        rngs = spawn_rngs(seed, 3)
        self.forward_model = None
        self.ensemble = None
        self.empowerment = None
        if self.mode in (TrainMode.ICM, TrainMode.EMPOWERMENT_WITH_ICM):
            self.forward_model = ForwardModel(
                state_dim, action_dim, extrinsic_dim, rngs[0], config.forward_hidden, config.forward_lr,
                zero_output=True)  # initial loss is 0.5 ||s_ex'||^2, under the blend threshold
        if self.mode == TrainMode.DISAGREEMENT:
            self.ensemble = ForwardEnsemble(
                state_dim, action_dim, extrinsic_dim, seed + [1], config.ensemble_size,
                config.forward_hidden, config.forward_lr)
        if self.mode == TrainMode.EMPOWERMENT_WITH_ICM:
            handle = build_estimator(
                config.emp_bound, action_dim, extrinsic_dim, state_dim, rngs[1], empowerment_estimator_config(config))
            self.empowerment = EmpowermentConfig(handle, EstimatorKind(config.emp_bound).value)
        self.blend = BlendState(config.blend_threshold, config.blend_slope, ThresholdSource(config.threshold_source).value)
        self.icm_stats = NormalizerState()
        self.dis_stats = NormalizerState()
        self.emp_stats = NormalizerState()
        self.rng = rngs[2]

    @property
    def enabled(self):
        return self.mode != TrainMode.NONE

    def train_models(self, states, actions, s_ex_next, negatives=None):
        """
        Fit the active models on a batch of transitions.

        ``negatives`` draws alternative actions for the JSD critic (fresh
        policy samples at the same states).

        Returns:
            dict of final epoch losses / bounds
        """
        states, actions, s_ex_next = (np.reshape(a, (-1, np.shape(a)[-1])) for a in (states, actions, s_ex_next))
        cfg = self.config
        out = {}
        if self.forward_model is not None:
            out['forward_loss'] = self.forward_model.fit(
                states, actions, s_ex_next, cfg.epochs, cfg.minibatch, self.rng)[-1] if cfg.epochs else None
        if self.ensemble is not None:
            losses = self.ensemble.fit(states, actions, s_ex_next, cfg.epochs, cfg.minibatch)
            out['ensemble_loss'] = losses[-1] if losses else None
        if self.empowerment is not None:
            handle = self.empowerment.estimator
            if handle.kind != EstimatorKind.VLB and negatives is None:
                raise ContractViolation("training the empowerment critic needs a negative action sampler")
            data = empowerment_batch(states, actions, s_ex_next)
            bound = None
            for _ in range(cfg.epochs):
                bound = fit_epoch(handle, data, negatives, self.rng)
            out['empowerment_bound'] = bound
        return out

    def compute_rewards(self, states, actions, s_ex_next, extrinsic, update_stats=True):
        """
        Raw, normalized, blended and combined rewards for (T, N) transitions.

        With ``update_stats`` False the normalizers are only read, which keeps
        the result a pure function of the current parameters.
        """
        extrinsic = np.asarray(extrinsic, dtype=np.float64)
        if extrinsic.ndim != 2:
            raise ContractViolation("extrinsic rewards must be shaped (steps, envs)")
        shape = extrinsic.shape
        flat = lambda a: np.reshape(a, (shape[0] * shape[1], -1))
        s, a, nxt = flat(states), flat(actions), flat(s_ex_next)
        zeros = np.zeros(shape)
        raw_icm = norm_icm = raw_dis = norm_dis = raw_emp = norm_emp = zeros
        w_icm = np.zeros(shape[0])
        w_emp = np.zeros(shape[0])

        def standardize(stats, raw):
            values = normalize_many(stats, raw.reshape(-1)) if update_stats else stats.apply(raw.reshape(-1))
            return np.asarray(values).reshape(shape)

        if self.forward_model is not None:
            raw_icm = icm_forward_loss(self.forward_model, s, a, nxt).reshape(shape)
            norm_icm = standardize(self.icm_stats, raw_icm)
        if self.ensemble is not None:
            raw_dis = disagreement_reward(self.ensemble, s, a).reshape(shape)
            norm_dis = standardize(self.dis_stats, raw_dis)
        if self.empowerment is not None:
            raw_emp = empowerment_reward(self.empowerment, s, a, nxt).reshape(shape)
            norm_emp = standardize(self.emp_stats, raw_emp)

        coef = self.config.coef
        if self.mode == TrainMode.ICM:
            combined = pure_icm_reward(norm_icm, extrinsic, coef)
            w_icm = np.ones(shape[0])
        elif self.mode == TrainMode.DISAGREEMENT:
            combined = pure_disagreement_reward(norm_dis, extrinsic, coef)
        elif self.mode == TrainMode.EMPOWERMENT_WITH_ICM:
            source = raw_icm if self.blend.source == ThresholdSource.RAW else norm_icm
            mean_icm = source.mean(axis=1)
            w_icm, w_emp = self.blend.weights(mean_icm)
            if update_stats:
                self.blend.mean_icm_raw = float(raw_icm.mean())
            combined = combined_reward(w_icm[:, None], w_emp[:, None], norm_icm, norm_emp, extrinsic, coef)
        else:
            combined = extrinsic.copy()
        return RewardBreakdown(extrinsic, combined, raw_icm, norm_icm, raw_dis, norm_dis,
                               raw_emp, norm_emp, np.asarray(w_icm), np.asarray(w_emp))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        if self.forward_model is not None:
            save_network(directory / 'forward.ekp', self.forward_model.net)
        if self.ensemble is not None:
            for index, member in enumerate(self.ensemble.members):
                save_network(directory / f'ensemble_{index}.ekp', member.net)
        if self.empowerment is not None:
            save_estimator(directory / 'empowerment', self.empowerment.estimator)

    def load(self, directory):
        directory = Path(directory)
        if self.forward_model is not None:
            self.forward_model.net.params[:] = load_network(directory / 'forward.ekp')[0].params
        if self.ensemble is not None:
            for index, member in enumerate(self.ensemble.members):
                member.net.params[:] = load_network(directory / f'ensemble_{index}.ekp')[0].params
        if self.empowerment is not None:
            loaded = load_estimator(directory / 'empowerment')
            handle = self.empowerment.estimator
            handle.critic.params[:] = loaded.critic.params
            if handle.prior_head is not None:
                handle.prior_head.params[:] = loaded.prior_head.params
