"""Group-relative policy optimization over the latent scene-corruption
space: synchronized-noise groups, group-normalized advantages, a clipped
truncated surrogate with a KL anchor to the pretrained policy, and an EMA
shadow of the live parameters.

The generator is the SDE sampler from .policy; a rollout's terminal sample
decodes into a corrupted rendered pair whose score is the trajectory's
(sparse, terminal) reward.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyMaskError, TrainingError
from .policy import (
    SamplerConfig,
    VelocityPolicy,
    params_vector,
    rollout,
    transition_logprob,
    transition_mean,
    velocity_grad,
    with_params,
)
from .reward import RewardConfig, score_pair
from .runtime import ordered_map
from .synth import decode_latent


@dataclass(frozen=True)
class TrainerConfig:
    """Optimizer settings. grad_window is the number of leading SDE steps
    (highest t, largest sigma) that receive gradient; later steps are
    sampled but never differentiated through."""

    group_size: int = 4
    steps: int = 10
    grad_window: int = 5
    clip_eps: float = 1e-3
    kl_beta: float = 0.004
    lr: float = 0.05
    ema_decay: float = 0.99
    iterations: int = 200
    seed: int = 0
    sync_noise: bool = True
    noise_scale: float = 0.7

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if self.steps < 2:
            raise ConfigError(f"steps must be >= 2, got {self.steps}")
        if self.grad_window < 1:
            raise ConfigError(f"grad_window must be >= 1, got {self.grad_window}")
        if self.grad_window > self.steps:
            raise ConfigError(
                f"grad_window exceeds steps ({self.grad_window} > {self.steps})"
            )
        if self.clip_eps <= 0:
            raise ConfigError(f"clip_eps must be > 0, got {self.clip_eps}")
        if self.kl_beta < 0:
            raise ConfigError(f"kl_beta must be >= 0, got {self.kl_beta}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale must be >= 0, got {self.noise_scale}")

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(steps=self.steps, noise_scale=self.noise_scale)


@dataclass
class PolicySnapshot:
    """Flat parameter vectors for the four policy roles, plus a blueprint
    instance that fixes the layer shapes. theta_ref is the frozen KL
    anchor; theta_ema only ever moves by the EMA rule."""

    theta: np.ndarray
    theta_old: np.ndarray
    theta_ref: np.ndarray
    theta_ema: np.ndarray
    blueprint: VelocityPolicy

    @classmethod
    def from_policy(cls, policy: VelocityPolicy):
        v = params_vector(policy)
        return cls(
            theta=v.copy(),
            theta_old=v.copy(),
            theta_ref=v.copy(),
            theta_ema=v.copy(),
            blueprint=policy,
        )

    def policy_old(self) -> VelocityPolicy:
        return with_params(self.blueprint, self.theta_old)


@dataclass
class GroupRollout:
    """One sampled group: initial noise per member, frozen trajectories
    under theta_old, terminal latents, and their rewards/advantages."""

    eps_init: list
    trajectories: list
    x0s: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray


def latent_reward(z, template, seed=0, reward_config=None):
    """Decode a latent and score the resulting pair; the trainer's reward."""
    pair = decode_latent(z, template, seed=seed)
    score = score_pair(
        pair.image_a,
        pair.image_b,
        pair.depth_a,
        pair.depth_b,
        pair.intrinsics,
        pair.intrinsics,
        pair.pose_a,
        pair.pose_b,
        pair.flow_fwd,
        pair.flow_bwd,
        reward_config,
        confidence_a=pair.confidence,
        confidence_b=pair.confidence,
    )
    return float(score.r_pair)


def group_advantages(rewards):
    """Standardize within the group (population std); a spread below 1e-9
    means the group carries no ranking signal, so advantages are zeroed
    rather than amplified out of numerical noise."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError(f"need a flat group of >= 2 rewards, got shape {r.shape}")
    sigma = float(r.std())
    if sigma < 1e-9:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def sample_group(snapshot: PolicySnapshot, template, config: TrainerConfig, rng, reward_config=None):
    """Roll out one group under theta_old and score the terminal decodes.

    eps_init is drawn from rng first (one shared draw when sync_noise, G
    draws otherwise); per-member SDE noise then comes from rng.spawn(G), so
    serial and threaded execution consume identical streams.
    """
    g = config.group_size
    policy_old = snapshot.policy_old()
    sampler = config.sampler()
    d = policy_old.dim
    if config.sync_noise:
        shared = rng.standard_normal(d)
        eps_init = [shared.copy() for _ in range(g)]
    else:
        eps_init = [rng.standard_normal(d) for _ in range(g)]
    streams = rng.spawn(g)

    results = ordered_map(
        lambda i: rollout(policy_old, eps_init[i], sampler, streams[i]), range(g)
    )
    x0s = np.stack([x0 for _, x0 in results])
    try:
        rewards = np.array(
            ordered_map(
                lambda x0: latent_reward(
                    x0, template, seed=config.seed, reward_config=reward_config
                ),
                list(x0s),
            )
        )
    except EmptyMaskError as exc:
        raise TrainingError(f"degenerate decode left no valid pixels to score: {exc}")
    return GroupRollout(
        eps_init=eps_init,
        trajectories=[steps for steps, _ in results],
        x0s=x0s,
        rewards=rewards,
        advantages=group_advantages(rewards),
    )


def importance_ratio(policy, step, policy_old=None):
    """Per-step ratio pi_theta(x_next | x_t) / pi_theta_old(x_next | x_t).

    The theta-density re-derives its mean from the stored (x_t, t, dt,
    sigma) through transition_mean, the exact code path the sampler used,
    so theta == theta_old yields exactly 1.0. The old density uses the
    stored behavior mean unless policy_old is supplied.
    """
    mean_new = transition_mean(policy, step.x_t, step.t, step.dt, step.sigma)
    if policy_old is None:
        mean_old = step.mean
    else:
        mean_old = transition_mean(policy_old, step.x_t, step.t, step.dt, step.sigma)
    lp_new = transition_logprob(step.x_next, mean_new, step.sigma_step)
    lp_old = transition_logprob(step.x_next, mean_old, step.sigma_step)
    return float(np.exp(lp_new - lp_old))


def _window_batch(group, window):
    """Flatten the first `window` steps of every trajectory into arrays."""
    rows = [
        (s.x_t, s.t, s.dt, s.sigma, s.sigma_step, s.x_next, s.mean, adv)
        for traj, adv in zip(group.trajectories, group.advantages)
        for s in traj[:window]
    ]
    xs, ts, dts, sigmas, sig_steps, x_nexts, means_old, advs = zip(*rows)
    return (
        np.stack(xs),
        np.array(ts),
        np.array(dts),
        np.array(sigmas),
        np.array(sig_steps),
        np.stack(x_nexts),
        np.stack(means_old),
        np.array(advs),
    )


def _batch_means(policy, xs, ts, dts, sigmas):
    # Per-row transition_mean, not a fused batch: bit-identity with the
    # sampler's stored means matters more than speed on a tiny window.
    return np.stack(
        [transition_mean(policy, x, t, dt, s) for x, t, dt, s in zip(xs, ts, dts, sigmas)]
    )


def _gauss_logp(x, mean, sigma_step):
    d = x.shape[-1]
    sq = ((x - mean) ** 2).sum(axis=-1)
    return -0.5 * d * np.log(2.0 * np.pi * sigma_step * sigma_step) - sq / (
        2.0 * sigma_step * sigma_step
    )


def surrogate_loss(policy, policy_ref, group, config: TrainerConfig):
    """Clipped surrogate restricted to the leading grad_window steps.

    loss = -mean_{i, k < M} min(r Â_i, clip(r, 1 ± eps) Â_i)
           + kl_beta · mean ‖mu_theta − mu_ref‖² / (2 sigma_step²)

    The behavior density comes from the stored step means; the theta and
    reference densities are re-derived. Returns (loss, grad, stats) with
    stats = {"kl", "clip_fraction"}. The clipped-and-worse branch of the
    min contributes zero gradient; gradient reaches the parameters only
    through v_theta at the stored (x_t, t), via the drift factor
    dmean/dv = -dt (1 + sigma² (1 - t) / (2t)).
    """
    xs, ts, dts, sigmas, sig_steps, x_nexts, means_old, advs = _window_batch(
        group, config.grad_window
    )
    if np.any(sig_steps <= 0):
        raise TrainingError("surrogate needs stochastic steps; noise_scale is 0")
    n = xs.shape[0]

    mean_new = _batch_means(policy, xs, ts, dts, sigmas)
    mean_ref = _batch_means(policy_ref, xs, ts, dts, sigmas)

    lp_new = _gauss_logp(x_nexts, mean_new, sig_steps)
    lp_old = _gauss_logp(x_nexts, means_old, sig_steps)
    ratio = np.exp(lp_new - lp_old)
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)

    term_plain = ratio * advs
    term_clip = clipped * advs
    objective = np.minimum(term_plain, term_clip)
    unclipped = term_plain <= term_clip

    var_step = sig_steps * sig_steps
    kl_per = ((mean_new - mean_ref) ** 2).sum(axis=1) / (2.0 * var_step)
    kl = float(kl_per.mean())
    loss = float(-objective.mean() + config.kl_beta * kl)

    # d loss / d mean_new, both terms.
    up_mean = np.zeros_like(mean_new)
    coeff = -(advs[unclipped] * ratio[unclipped]) / (n * var_step[unclipped])
    up_mean[unclipped] = coeff[:, None] * (x_nexts[unclipped] - mean_new[unclipped])
    up_mean += (config.kl_beta / n) * (mean_new - mean_ref) / var_step[:, None]

    g_coef = -dts * (1.0 + sigmas * sigmas * (1.0 - ts) / (2.0 * ts))
    grad = velocity_grad(policy, xs, ts, up_mean * g_coef[:, None])

    stats = {"kl": kl, "clip_fraction": float(np.mean(term_clip < term_plain))}
    return loss, grad, stats


@dataclass
class TrainResult:
    """Final + EMA policies and the per-iteration metric rows."""

    policy: VelocityPolicy
    ema_policy: VelocityPolicy
    metrics: list = field(default_factory=list)


def train(config: TrainerConfig, pretrained: VelocityPolicy, template, reward_config=None):
    """Run the full loop: per iteration snapshot theta_old <- theta, sample
    one group, take one gradient step, update the EMA. Deterministic in
    (config, pretrained, template). A non-finite loss or gradient aborts
    with the last finite policy attached to the error.
    """
    snap = PolicySnapshot.from_policy(pretrained)
    rc = reward_config if reward_config is not None else RewardConfig()
    ref_policy = with_params(pretrained, snap.theta_ref)
    metrics = []
    for it in range(config.iterations):
        rng = np.random.default_rng([config.seed, it])
        snap.theta_old = snap.theta.copy()
        policy_old = snap.policy_old()
        group = sample_group(snap, template, config, rng, reward_config=rc)
        loss, grad, stats = surrogate_loss(policy_old, ref_policy, group, config)
        grad_norm = float(np.linalg.norm(grad))
        row = {
            "iter": it,
            "reward_mean": float(group.rewards.mean()),
            "reward_std": float(group.rewards.std()),
            "kl": stats["kl"],
            "clip_fraction": stats["clip_fraction"],
            "grad_norm": grad_norm,
        }
        metrics.append(row)
        if not (np.isfinite(loss) and np.isfinite(grad_norm)):
            raise TrainingError(
                f"non-finite surrogate at iteration {it}",
                last_good=with_params(pretrained, snap.theta_old),
                metrics=metrics,
            )
        snap.theta = snap.theta - config.lr * grad
        snap.theta_ema = config.ema_decay * snap.theta_ema + (1.0 - config.ema_decay) * snap.theta
    return TrainResult(
        policy=with_params(pretrained, snap.theta),
        ema_policy=with_params(pretrained, snap.theta_ema),
        metrics=metrics,
    )
