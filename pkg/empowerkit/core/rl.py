"""
Empowerkit - Reinforcement learning

PPO with generalized advantage estimation over vectorized PlanarLift
environments. Rewards come from the intrinsic stack; stored transitions keep
only raw features so intrinsic rewards are always recomputed with the current
model parameters when drawn.
"""
import csv
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import ACTION_BOUNDS, EnvConfig, PlanarLift, VecPlanarLift, split_vector
from .exceptions import (
    CheckpointError,
    ContractViolation,
    EstimatorDivergence,
    NonFiniteActivation,
    TrainingAborted,
)
from .intrinsic import IntrinsicConfig, IntrinsicStack, RewardOrder, write_diagnostics_csv
from .numerics import AdamState, Network, adam_step, load_network, save_network, spawn_rngs

logger = logging.getLogger(__name__)

POLICY_HIDDEN = (128, 64, 32)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SUCCESS_REWARD = 0.5
EPISODE_WINDOW = 100
ADVANTAGE_STD_FLOOR = 1e-12

METRIC_COLUMNS = [
    'iteration', 'env_steps', 'mean_extrinsic_return', 'success_rate', 'w_icm',
    'mean_norm_icm', 'mean_norm_emp', 'policy_loss', 'value_loss', 'wall_seconds',
]


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs_per_update: int = 10
    minibatch: int = 256
    lr: float = 2e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    horizon: int = 128
    n_envs: int = 60

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ContractViolation("gamma must lie in (0, 1] and lam in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ContractViolation("clip_eps must be positive")
        if min(self.epochs_per_update, self.minibatch, self.horizon, self.n_envs) < 1:
            raise ContractViolation("epochs, minibatch, horizon and n_envs must be positive")


def gaussian_log_prob(actions, mean, log_std):
    """Diagonal Gaussian log density, summed over the action dimensions."""
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


class PolicyValueNets:
    """
    Gaussian policy with a state-independent log-std, plus a value network.

    Actions live in normalized units; the environment sees them multiplied by
    ACTION_BOUNDS and clipped.
    """

    def __init__(self, policy, value, log_std, lr=2e-4):
        self.policy = policy
        self.value = value
        self.log_std = np.array(log_std, dtype=np.float64).reshape(-1)
        if self.log_std.size != policy.output_dim or value.output_dim != 1:
            raise ContractViolation("log_std must match the action dim and the value head must be scalar")
        if policy.input_dim != value.input_dim:
            raise ContractViolation("policy and value networks must read the same state")
        self.clamp_log_std()
        self.policy_opt = AdamState.for_params(self.policy.params, lr=lr)
        self.log_std_opt = AdamState.for_params(self.log_std, lr=lr)
        self.value_opt = AdamState.for_params(self.value.params, lr=lr)

    @classmethod
    def build(cls, state_dim, action_dim, rng, hidden=POLICY_HIDDEN, lr=2e-4, init_log_std=0.0):
        policy = Network.build(state_dim, hidden, action_dim, rng, activation='tanh', output_gain=0.01)
        value = Network.build(state_dim, hidden, 1, rng, activation='tanh', output_gain=1.0)
        return cls(policy, value, np.full(action_dim, init_log_std), lr)

    @property
    def state_dim(self):
        return self.policy.input_dim

    @property
    def action_dim(self):
        return self.policy.output_dim

    def clamp_log_std(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def distribution(self, obs):
        return self.policy.forward(np.atleast_2d(obs)), self.log_std

    def value_of(self, obs):
        return self.value.forward(np.atleast_2d(obs))[:, 0]

    def act(self, obs, rng, deterministic=False):
        """
        Returns:
            (actions, log_probs, values) for a batch of states
        """
        mean, log_std = self.distribution(obs)
        if deterministic:
            actions = mean
        else:
            actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return actions, gaussian_log_prob(actions, mean, log_std), self.value_of(obs)

    def entropy(self):
        return float(np.sum(self.log_std + 0.5 + HALF_LOG_2PI))

    def copy(self):
        clone = PolicyValueNets(self.policy.copy(), self.value.copy(), self.log_std.copy(), self.policy_opt.lr)
        clone.policy_opt = self.policy_opt.copy()
        clone.log_std_opt = self.log_std_opt.copy()
        clone.value_opt = self.value_opt.copy()
        return clone

    def restore(self, snapshot):
        """Copy parameters and optimizer moments back from ``snapshot`` in place."""
        self.policy.params[:] = snapshot.policy.params
        self.value.params[:] = snapshot.value.params
        self.log_std[:] = snapshot.log_std
        self.policy_opt = snapshot.policy_opt.copy()
        self.log_std_opt = snapshot.log_std_opt.copy()
        self.value_opt = snapshot.value_opt.copy()


def effective_actions(actions):
    """The normalized action the environment actually applies."""
    return np.clip(actions, -1.0, 1.0)


class EpisodeTracker:
    """Running returns per env slot and a window of finished episodes."""

    def __init__(self, n_envs, window=EPISODE_WINDOW):
        self.returns = np.zeros(n_envs)
        self.succeeded = np.zeros(n_envs, dtype=bool)
        self.finished = deque(maxlen=window)
        self.episodes = 0

    def record(self, rewards, dones):
        self.returns += rewards
        self.succeeded |= rewards > SUCCESS_REWARD
        for slot in np.flatnonzero(dones):
            self.finished.append((float(self.returns[slot]), bool(self.succeeded[slot])))
            self.returns[slot] = 0.0
            self.succeeded[slot] = False
            self.episodes += 1

    @property
    def mean_return(self):
        return float(np.mean([r for r, _ in self.finished])) if self.finished else 0.0

    @property
    def success_rate(self):
        return float(np.mean([s for _, s in self.finished])) if self.finished else 0.0


@dataclass
class RolloutBatch:
    """A horizon x n_envs block of on-policy experience."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    extrinsic: np.ndarray
    dones: np.ndarray
    next_obs: np.ndarray
    last_values: np.ndarray
    rewards: np.ndarray = None
    breakdown: object = None
    advantages: np.ndarray = None
    returns: np.ndarray = None
    model_losses: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.extrinsic.shape

    def transitions(self):
        """Flattened (states, effective actions, s^ex_{t+1}, extrinsic) rows."""
        steps = self.shape[0] * self.shape[1]
        return (
            self.obs.reshape(steps, -1),
            effective_actions(self.actions).reshape(steps, -1),
            split_vector(self.next_obs)[1].reshape(steps, -1),
            self.extrinsic.reshape(steps),
        )


def collect_rollout(nets, vec_env, obs, horizon, rng, stack=None, reward_order=RewardOrder.TRAIN_THEN_REWARD,
                    negatives=None, tracker=None, deterministic=False):
    """
    Step every environment ``horizon`` times under the current policy and
    score the block with ``stack``.

    Returns:
        (RolloutBatch, observations to continue from)
    """
    n_envs = vec_env.n_envs
    state_dim = np.shape(obs)[1]
    buf_obs = np.zeros((horizon, n_envs, state_dim))
    buf_next = np.zeros((horizon, n_envs, state_dim))
    buf_actions = np.zeros((horizon, n_envs, nets.action_dim))
    buf_logp = np.zeros((horizon, n_envs))
    buf_values = np.zeros((horizon, n_envs))
    buf_rewards = np.zeros((horizon, n_envs))
    buf_dones = np.zeros((horizon, n_envs), dtype=bool)

    for t in range(horizon):
        actions, log_probs, values = nets.act(obs, rng, deterministic)
        result = vec_env.step(actions * ACTION_BOUNDS)
        buf_obs[t] = obs
        buf_actions[t] = actions
        buf_logp[t] = log_probs
        buf_values[t] = values
        buf_rewards[t] = result.rewards
        buf_dones[t] = result.dones
        buf_next[t] = result.next_obs
        if tracker is not None:
            tracker.record(result.rewards, result.dones)
        obs = result.obs

    batch = RolloutBatch(buf_obs, buf_actions, buf_logp, buf_values, buf_rewards, buf_dones, buf_next,
                         nets.value_of(obs))
    score_rollout(batch, stack, reward_order, negatives)
    return batch, obs


def score_rollout(batch, stack, reward_order=RewardOrder.TRAIN_THEN_REWARD, negatives=None, train_data=None):
    """
    Train the intrinsic models and fill ``batch.rewards`` with combined rewards.

    ``train_data`` replaces the fresh transitions as the model training set,
    which is how replayed experience joins the update.
    """
    if stack is None or not stack.enabled:
        batch.rewards = batch.extrinsic.copy()
        return batch
    states, actions, s_ex_next, _ = batch.transitions()
    if train_data is None:
        train_data = (states, actions, s_ex_next)
    steps, n_envs = batch.shape
    scored = (states.reshape(steps, n_envs, -1), actions.reshape(steps, n_envs, -1),
              s_ex_next.reshape(steps, n_envs, -1))
    if RewardOrder(reward_order) == RewardOrder.TRAIN_THEN_REWARD:
        batch.model_losses = stack.train_models(*train_data, negatives=negatives)
    batch.breakdown = stack.compute_rewards(*scored, batch.extrinsic)
    if RewardOrder(reward_order) == RewardOrder.REWARD_THEN_TRAIN:
        batch.model_losses = stack.train_models(*train_data, negatives=negatives)
    batch.rewards = batch.breakdown.combined
    return batch


def gae(rewards, values, dones, last_values=None, gamma=0.99, lam=0.95):
    """
    Generalized advantage estimation over (steps, envs) arrays.

    A done at step t marks s_{t+1} as terminal, so its bootstrap value is
    dropped. 1-D inputs are treated as a single environment.

    Returns:
        (advantages, returns) with returns = advantages + values
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    single = rewards.ndim == 1
    rewards = rewards.reshape(len(rewards), -1)
    values = np.asarray(values, dtype=np.float64).reshape(rewards.shape)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64).reshape(rewards.shape)
    if last_values is None:
        last_values = np.zeros(rewards.shape[1])
    next_value = np.asarray(last_values, dtype=np.float64).reshape(rewards.shape[1])

    advantages = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1])
    for t in reversed(range(len(rewards))):
        delta = rewards[t] + gamma * next_value * not_done[t] - values[t]
        running = delta + gamma * lam * not_done[t] * running
        advantages[t] = running
        next_value = values[t]
    returns = advantages + values
    if single:
        return advantages[:, 0], returns[:, 0]
    return advantages, returns


def normalize_advantages(advantages):
    advantages = np.asarray(advantages, dtype=np.float64)
    centered = advantages - advantages.mean()
    std = centered.std()
    if std < ADVANTAGE_STD_FLOOR:
        return centered
    return centered / std


def clipped_surrogate(ratio, advantages, eps=0.2):
    """
    Per-sample PPO objective min(r A, clip(r, 1-eps, 1+eps) A) and its
    derivative with respect to the log-probability of the action.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    objective = np.minimum(unclipped, clipped)
    d_log_prob = np.where(unclipped <= clipped, unclipped, 0.0)
    return objective, d_log_prob


@dataclass
class PpoLoss:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    grads: tuple = ()


@dataclass
class PpoDiagnostics:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_fraction: float = 0.0


def ppo_loss(nets, obs, actions, old_log_probs, advantages, returns, config):
    """
    Total loss policy_loss - entropy_coef * entropy + value_coef * value_loss
    with gradients for (policy params, log_std, value params).
    """
    n = len(obs)
    mean, cache = nets.policy.forward_with_cache(obs)
    log_std = nets.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    log_probs = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(log_probs - old_log_probs)
    objective, d_objective = clipped_surrogate(ratio, advantages, config.clip_eps)
    policy_loss = -float(np.mean(objective))

    d_log_prob = -d_objective / n
    policy_grads, _ = nets.policy.backward(cache, d_log_prob[:, None] * diff * inv_var)
    log_std_grads = np.sum(d_log_prob[:, None] * (diff * diff * inv_var - 1.0), axis=0)
    log_std_grads -= config.entropy_coef

    values, value_cache = nets.value.forward_with_cache(obs)
    value_err = values[:, 0] - returns
    value_loss = float(np.mean(value_err * value_err))
    value_grads, _ = nets.value.backward(value_cache, (config.value_coef * 2.0 * value_err / n)[:, None])

    entropy = nets.entropy()
    loss = policy_loss - config.entropy_coef * entropy + config.value_coef * value_loss
    return PpoLoss(
        loss,
        policy_loss,
        value_loss,
        entropy,
        float(np.mean(old_log_probs - log_probs)),
        float(np.mean(np.abs(ratio - 1.0) > config.clip_eps)),
        (policy_grads, log_std_grads, value_grads),
    )


def ppo_update(nets, batch, config, rng):
    """
    ``epochs_per_update`` passes of shuffled minibatch Adam steps on the
    clipped surrogate. Advantages are normalized over the whole batch first.

    Raises:
        TrainingAborted: a minibatch loss went non-finite; parameters and
            optimizer state are restored to their pre-update values
    """
    n = batch.shape[0] * batch.shape[1]
    obs = batch.obs.reshape(n, -1)
    actions = batch.actions.reshape(n, -1)
    old_log_probs = batch.log_probs.reshape(n)
    advantages = normalize_advantages(batch.advantages.reshape(n))
    returns = batch.returns.reshape(n)

    snapshot = nets.copy()
    history = []
    for epoch in range(config.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = order[start:start + config.minibatch]
            try:
                result = ppo_loss(nets, obs[idx], actions[idx], old_log_probs[idx], advantages[idx], returns[idx], config)
            except NonFiniteActivation as exc:
                nets.restore(snapshot)
                raise TrainingAborted(f"PPO update hit {exc} in epoch {epoch}") from exc
            if not math.isfinite(result.loss):
                nets.restore(snapshot)
                raise TrainingAborted(f"non-finite PPO loss in epoch {epoch}; parameters restored")
            policy_grads, log_std_grads, value_grads = result.grads
            adam_step(nets.policy_opt, nets.policy.params, policy_grads)
            adam_step(nets.log_std_opt, nets.log_std, log_std_grads)
            adam_step(nets.value_opt, nets.value.params, value_grads)
            nets.clamp_log_std()
            history.append(result)

    return PpoDiagnostics(
        float(np.mean([r.policy_loss for r in history])),
        float(np.mean([r.value_loss for r in history])),
        nets.entropy(),
        float(np.mean([r.approx_kl for r in history])),
        float(np.mean([r.clip_fraction for r in history])),
    )


class ReplayStore:
    """
    FIFO ring buffer of raw transitions (s, a, s^ex', r^e). Intrinsic rewards
    are never stored.
    """

    def __init__(self, capacity, state_dim, action_dim, extrinsic_dim):
        if capacity < 1:
            raise ContractViolation("replay capacity must be at least 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.s_ex_next = np.zeros((capacity, extrinsic_dim))
        self.extrinsic = np.zeros(capacity)
        self.position = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, states, actions, s_ex_next, extrinsic):
        states = np.atleast_2d(states)
        count = len(states)
        rows = slice(max(0, count - self.capacity), count)
        slots = (self.position + np.arange(count)[rows] - rows.start) % self.capacity
        self.states[slots] = states[rows]
        self.actions[slots] = np.atleast_2d(actions)[rows]
        self.s_ex_next[slots] = np.atleast_2d(s_ex_next)[rows]
        self.extrinsic[slots] = np.reshape(extrinsic, -1)[rows]
        stored = rows.stop - rows.start
        self.position = (self.position + stored) % self.capacity
        self.size = min(self.capacity, self.size + stored)

    def ordered_indices(self):
        """Slot indices from oldest to newest."""
        start = self.position if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def sample_indices(self, count, rng):
        if self.size == 0:
            raise ContractViolation("cannot sample from an empty replay store")
        return np.sort(rng.choice(self.size, size=min(count, self.size), replace=False))

    def get(self, indices):
        return self.states[indices], self.actions[indices], self.s_ex_next[indices], self.extrinsic[indices]


def recompute_intrinsic(store, stack, indices=None, count=None, rng=None):
    """
    Rewards for stored transitions under the current model parameters.

    Normalizer statistics are read, not updated, so two calls with the same
    parameters return identical vectors. The draw is blended as one step.
    """
    if indices is None:
        if count is None or rng is None:
            raise ContractViolation("pass indices, or a count and a generator")
        indices = store.sample_indices(count, rng)
    states, actions, s_ex_next, extrinsic = store.get(indices)
    return stack.compute_rewards(states[None], actions[None], s_ex_next[None], extrinsic[None], update_stats=False)


def policy_negative_sampler(nets):
    """Negative actions for the empowerment critic: fresh policy samples at z."""

    def sample(batch, rng):
        mean, log_std = nets.distribution(batch.z)
        return effective_actions(mean + np.exp(log_std) * rng.standard_normal(mean.shape))

    return sample


@dataclass
class TrainConfig:
    steps: int = 300000
    seed: int = 0
    ppo: PpoConfig = field(default_factory=PpoConfig)
    intrinsic: IntrinsicConfig = field(default_factory=IntrinsicConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    policy_hidden: tuple = POLICY_HIDDEN
    reward_order: str = RewardOrder.TRAIN_THEN_REWARD
    checkpoint_every: int = 10
    replay_capacity: int = 100000
    record_timing: bool = False

    @property
    def iterations(self):
        per_iteration = self.ppo.horizon * self.ppo.n_envs
        return max(1, math.ceil(self.steps / per_iteration))


@dataclass
class TrainResult:
    nets: PolicyValueNets
    stack: IntrinsicStack
    metrics: list
    tracker: EpisodeTracker


def save_policy(directory, nets):
    directory = Path(directory)
    meta = {'log_std': [float(v) for v in nets.log_std]}
    save_network(directory / 'policy.ekp', nets.policy, meta)
    save_network(directory / 'value.ekp', nets.value)


def load_policy(directory, lr=2e-4):
    directory = Path(directory)
    policy, meta = load_network(directory / 'policy.ekp')
    value, _ = load_network(directory / 'value.ekp')
    if 'log_std' not in meta:
        raise CheckpointError(f"{directory / 'policy.ekp'} carries no log_std")
    try:
        return PolicyValueNets(policy, value, meta['log_std'], lr)
    except ContractViolation as exc:
        raise CheckpointError(f"inconsistent policy checkpoint in {directory}: {exc}") from exc


def save_checkpoint(directory, nets, stack):
    save_policy(directory, nets)
    stack.save(Path(directory) / 'intrinsic')
    logger.debug("checkpoint written to %s", directory)


def evaluate_policy(nets, env_config=None, episodes=100, seed=0):
    """
    Roll out ``episodes`` episodes with the mean action.

    Returns:
        dict with episodes, mean_return, success_rate and per-episode returns
    """
    env_config = env_config or EnvConfig()
    if nets.state_dim != env_config.state_dim:
        raise CheckpointError(
            f"policy expects {nets.state_dim}-dim states, environment produces {env_config.state_dim}")
    returns, successes = [], []
    for rng in spawn_rngs(seed, episodes):
        env = PlanarLift(env_config, rng=rng)
        state = env.reset()
        total, success, done = 0.0, False, False
        while not done:
            mean, _ = nets.distribution(state.as_vector())
            state, reward, done = env.step(mean[0] * ACTION_BOUNDS)
            total += reward
            success |= reward > SUCCESS_REWARD
        returns.append(total)
        successes.append(success)
    return {
        'episodes': episodes,
        'mean_return': float(np.mean(returns)) if returns else None,
        'success_rate': float(np.mean(successes)) if successes else None,
        'returns': [round(r, 6) for r in returns],
    }


def _format_metrics(row):
    return {key: row[key] if key in ('iteration', 'env_steps') else f"{row[key]:.6f}" for key in METRIC_COLUMNS}


def train(config, mode=None, seed=None, out_dir=None):
    """
    Full loop: collect, train intrinsic models, score, GAE, PPO update.

    With ``out_dir`` set, metrics.csv and diagnostics.csv are appended each
    iteration and checkpoints land in ``out_dir/ckpt``.

    Raises:
        TrainingAborted: any component failed; a checkpoint of the last good
            parameters is written to ckpt/aborted first
    """
    if mode is not None:
        config = replace(config, intrinsic=replace(config.intrinsic, mode=mode))
    if seed is not None:
        config = replace(config, seed=seed)
    ppo = config.ppo
    env_config = config.env
    rngs = spawn_rngs(config.seed, 5)
    vec_env = VecPlanarLift(ppo.n_envs, env_config, rngs=spawn_rngs([config.seed, 1], ppo.n_envs))
    state_dim = env_config.state_dim
    action_dim = len(ACTION_BOUNDS)
    nets = PolicyValueNets.build(state_dim, action_dim, rngs[0], config.policy_hidden, ppo.lr)
    stack = IntrinsicStack(config.intrinsic, state_dim, action_dim, env_config.extrinsic_dim, seed=[config.seed, 2])
    store = ReplayStore(config.replay_capacity, state_dim, action_dim, env_config.extrinsic_dim) \
        if config.replay_capacity and stack.enabled else None
    tracker = EpisodeTracker(ppo.n_envs)
    negatives = policy_negative_sampler(nets)

    metrics_path = diagnostics_path = ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / 'metrics.csv'
        diagnostics_path = out_dir / 'diagnostics.csv'
        ckpt_dir = out_dir / 'ckpt'
        with metrics_path.open('w', newline='') as fh:
            csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator='\n').writeheader()
        write_diagnostics_csv(diagnostics_path, [])

    logger.info("training mode=%s seed=%s for %d iterations of %d steps",
                stack.mode, config.seed, config.iterations, ppo.horizon * ppo.n_envs)
    obs = vec_env.reset()
    metrics = []
    env_steps = 0
    for iteration in range(1, config.iterations + 1):
        started = time.perf_counter()
        try:
            batch, obs = collect_rollout(nets, vec_env, obs, ppo.horizon, rngs[1], tracker=tracker)
            states, actions, s_ex_next, extrinsic = batch.transitions()
            train_data = (states, actions, s_ex_next)
            if store is not None and len(store):
                drawn = store.sample_indices(len(states), rngs[2])
                replayed = store.get(drawn)
                train_data = tuple(np.concatenate([fresh, old]) for fresh, old in zip(train_data, replayed[:3]))
            score_rollout(batch, stack, config.reward_order, negatives, train_data)
            if store is not None and len(store):
                replay_reward = float(recompute_intrinsic(store, stack, indices=drawn).combined.mean())
                batch.model_losses['replay_reward'] = replay_reward
                logger.debug("replayed %d transitions, mean recomputed reward %.5f", len(drawn), replay_reward)
            if store is not None:
                store.add(states, actions, s_ex_next, extrinsic)
            batch.advantages, batch.returns = gae(
                batch.rewards, batch.values, batch.dones, batch.last_values, ppo.gamma, ppo.lam)
            diagnostics = ppo_update(nets, batch, ppo, rngs[3])
        except (TrainingAborted, EstimatorDivergence, NonFiniteActivation) as exc:
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / 'aborted', nets, stack)
            logger.error("training aborted at iteration %d: %s", iteration, exc)
            raise TrainingAborted(f"iteration {iteration}: {exc}") from exc

        env_steps += ppo.horizon * ppo.n_envs
        elapsed = time.perf_counter() - started
        breakdown = batch.breakdown
        row = {
            'iteration': iteration,
            'env_steps': env_steps,
            'mean_extrinsic_return': tracker.mean_return,
            'success_rate': tracker.success_rate,
            'w_icm': float(np.mean(breakdown.w_icm)) if breakdown is not None else 0.0,
            'mean_norm_icm': float(np.mean(breakdown.norm_icm)) if breakdown is not None else 0.0,
            'mean_norm_emp': float(np.mean(breakdown.norm_emp)) if breakdown is not None else 0.0,
            'policy_loss': diagnostics.policy_loss,
            'value_loss': diagnostics.value_loss,
            'wall_seconds': elapsed if config.record_timing else 0.0,
            'replay_reward': batch.model_losses.get('replay_reward'),
        }
        metrics.append(row)
        logger.info(
            "iter %d steps %d return %.4f success %.2f w_icm %.3f policy %.4f value %.4f (%.1fs)",
            iteration, env_steps, row['mean_extrinsic_return'], row['success_rate'], row['w_icm'],
            row['policy_loss'], row['value_loss'], elapsed,
        )
        if metrics_path is not None:
            with metrics_path.open('a', newline='') as fh:
                csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator='\n').writerow(_format_metrics(row))
            if breakdown is not None:
                write_diagnostics_csv(diagnostics_path, breakdown.diagnostics((iteration - 1) * ppo.horizon), append=True)
            if config.checkpoint_every and iteration % config.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f'iter_{iteration:05d}', nets, stack)

    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / 'final', nets, stack)
    return TrainResult(nets, stack, metrics, tracker)
