"""Soft actor-critic over the continuous action space.

Squashed-Gaussian policy (tanh of a reparameterized Gaussian), twin critics
with the elementwise minimum, target networks with soft replacement, and
the standard maximum-entropy losses:

    critic:  0.5 * mean[(Q_i(s,a) - y)^2],
             y = r + gamma * (min Qbar(s', a') - beta * log pi(a'|s'))
             (y = r on terminal transitions)
    policy:  mean[beta * log pi(f(eps,s)|s) - min Q(s, f(eps,s))]

A soft-updated target policy is maintained alongside the critic targets and
can optionally be used when sampling target actions (`use_target_policy`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .nn_core import AdamState, MlpSpec, ParamSet

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_PROB_GUARD = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class AgentConfig:
    """SAC hyperparameters (network dims come from the environment).

    Defaults are tuned for the surrogate benchmark regime: a fast critic
    relative to the policy, and bootstrap actions drawn from the soft-updated
    target policy, which keeps the critic targets stationary enough for the
    deterministic exploitation phase to lock onto one architecture.
    """

    beta: float = 0.05          # entropy temperature
    gamma: float = 0.99
    tau: float = 0.01
    lr_policy: float = 3e-4
    lr_critic: float = 3e-3
    batch_size: int = 64
    hidden_dims: tuple[int, ...] = (128, 128)
    twin_q: bool = True
    use_target_policy: bool = True  # sample bootstrap actions from the target policy

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.beta < 0 or not 0 <= self.gamma <= 1 or not 0 <= self.tau <= 1:
            raise ValueError("beta >= 0, gamma in [0,1], tau in [0,1] required")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TransitionBatch:
    """Vectorized minibatch: states are the normalized network inputs."""

    states: np.ndarray       # (B, state_dim)
    actions: np.ndarray      # (B, action_dim)
    rewards: np.ndarray      # (B,)
    next_states: np.ndarray  # (B, state_dim)
    dones: np.ndarray        # (B,) of bool

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass
class AgentParams:
    policy: ParamSet
    policy_target: ParamSet
    q1: ParamSet
    q2: ParamSet
    q1_target: ParamSet
    q2_target: ParamSet
    adam_policy: AdamState
    adam_q1: AdamState
    adam_q2: AdamState


class SacAgent:
    """One agent instance; single-threaded, owns its RNG stream."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        cfg: AgentConfig = AgentConfig(),
        rng: np.random.Generator | None = None,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.cfg = cfg
        self.beta = cfg.beta  # live temperature; callers may anneal it
        self.policy_lr_scale = 1.0  # live multiplier on lr_policy
        self.rng = rng if rng is not None else np.random.default_rng(0)
        policy_spec = MlpSpec(state_dim, cfg.hidden_dims, 2 * action_dim)
        q_spec = MlpSpec(state_dim + action_dim, cfg.hidden_dims, 1)
        policy = nn_core.init_params(policy_spec, self.rng)
        q1 = nn_core.init_params(q_spec, self.rng)
        q2 = nn_core.init_params(q_spec, self.rng)
        self.params = AgentParams(
            policy=policy,
            policy_target=policy.copy(),
            q1=q1,
            q2=q2,
            q1_target=q1.copy(),
            q2_target=q2.copy(),
            adam_policy=nn_core.adam_init(policy),
            adam_q1=nn_core.adam_init(q1),
            adam_q2=nn_core.adam_init(q2),
        )

    # -- policy --------------------------------------------------------------

    def policy_dist(self, states: np.ndarray, params: ParamSet | None = None):
        """Mean, clamped log-std, and the clamp pass-through mask for a state batch."""
        params = params if params is not None else self.params.policy
        raw = nn_core.forward(params, states)
        mean = raw[..., : self.action_dim]
        raw_ls = raw[..., self.action_dim :]
        log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
        mask = (raw_ls > LOG_STD_MIN) & (raw_ls < LOG_STD_MAX)
        return mean, log_std, mask

    @staticmethod
    def _squash(mean, log_std, eps):
        std = np.exp(log_std)
        u = mean + std * eps
        # keep components strictly inside (-1, 1) even where tanh saturates
        # to 1.0 at float precision
        a = np.clip(np.tanh(u), -1.0 + 1e-12, 1.0 - 1e-12)
        one_m_a2 = 1.0 - a * a
        guard = one_m_a2 + _LOG_PROB_GUARD
        log_prob = np.sum(
            -0.5 * eps * eps - log_std - 0.5 * _LOG_2PI - np.log(guard), axis=-1
        )
        return a, log_prob, u, std, one_m_a2, guard

    def sample_action(
        self,
        state_vec: np.ndarray,
        deterministic: bool = False,
        noise: np.ndarray | None = None,
    ) -> tuple[np.ndarray, float]:
        """One action for one state. Stochastic mode draws (or takes) Gaussian
        noise and returns the squashed sample with its log-probability;
        deterministic mode returns tanh(mean) with log_prob fixed at 0."""
        state_vec = np.asarray(state_vec, dtype=np.float64)
        if state_vec.shape != (self.state_dim,):
            raise nn_core.ShapeError(
                f"state must have shape ({self.state_dim},), got {state_vec.shape}"
            )
        if not np.all(np.isfinite(state_vec)):
            raise ValueError("state vector must be finite")
        mean, log_std, _ = self.policy_dist(state_vec[None, :])
        if deterministic:
            return np.clip(np.tanh(mean[0]), -1.0 + 1e-12, 1.0 - 1e-12), 0.0
        eps = self.rng.standard_normal(self.action_dim) if noise is None else (
            np.asarray(noise, dtype=np.float64)
        )
        if eps.shape != (self.action_dim,):
            raise nn_core.ShapeError(
                f"noise must have shape ({self.action_dim},), got {eps.shape}"
            )
        a, log_prob, *_ = self._squash(mean[0], log_std[0], eps)
        return a, float(log_prob)

    def _sample_batch(self, states: np.ndarray, params: ParamSet):
        mean, log_std, _ = self.policy_dist(states, params)
        eps = self.rng.standard_normal(mean.shape)
        a, log_prob, *_ = self._squash(mean, log_std, eps)
        return a, log_prob

    # -- critics -------------------------------------------------------------

    def _q_values(self, params: ParamSet, states: np.ndarray, actions: np.ndarray):
        return nn_core.forward(params, np.concatenate([states, actions], axis=1))[:, 0]

    def min_q(self, states: np.ndarray, actions: np.ndarray, target: bool = False):
        p = self.params
        qin = np.concatenate([states, actions], axis=1)
        q1 = nn_core.forward(p.q1_target if target else p.q1, qin)[:, 0]
        if not self.cfg.twin_q:
            return q1
        q2 = nn_core.forward(p.q2_target if target else p.q2, qin)[:, 0]
        return np.minimum(q1, q2)

    def critic_targets(self, batch: TransitionBatch) -> np.ndarray:
        """Soft-Bellman targets; terminal transitions bootstrap nothing."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        policy = (
            self.params.policy_target if self.cfg.use_target_policy else self.params.policy
        )
        next_a, next_logp = self._sample_batch(batch.next_states, policy)
        q_next = self.min_q(batch.next_states, next_a, target=True)
        y = batch.rewards + self.cfg.gamma * (q_next - self.beta * next_logp)
        return np.where(batch.dones, batch.rewards, y)

    def critic_loss(self, states, actions, targets) -> float:
        losses = []
        for q in (self.params.q1, self.params.q2) if self.cfg.twin_q else (self.params.q1,):
            err = self._q_values(q, states, actions) - targets
            losses.append(0.5 * float(np.mean(err * err)))
        return float(np.mean(losses))

    def update_critics(self, batch: TransitionBatch, targets: np.ndarray | None = None) -> float:
        """One Adam step per critic against shared targets; returns pre-step loss."""
        y = self.critic_targets(batch) if targets is None else targets
        qin = np.concatenate([batch.states, batch.actions], axis=1)
        n = len(batch)
        critics = [(self.params.q1, self.params.adam_q1)]
        if self.cfg.twin_q:
            critics.append((self.params.q2, self.params.adam_q2))
        losses = []
        for params, adam in critics:
            pred, acts = nn_core.forward_cached(params, qin)
            err = pred[:, 0] - y
            losses.append(0.5 * float(np.mean(err * err)))
            grads, _ = nn_core.backward(params, qin, (err / n)[:, None], acts=acts)
            nn_core.adam_step(params, grads, adam, self.cfg.lr_critic)
        return float(np.mean(losses))

    # -- policy update -------------------------------------------------------

    def policy_loss(self, states: np.ndarray, eps: np.ndarray) -> float:
        """Reparameterized policy objective for fixed noise (no update)."""
        mean, log_std, _ = self.policy_dist(states)
        a, log_prob, *_ = self._squash(mean, log_std, eps)
        q = self.min_q(states, a)
        return float(np.mean(self.beta * log_prob - q))

    def _policy_grads(self, states: np.ndarray, eps: np.ndarray):
        beta = self.beta
        n = states.shape[0]
        raw, policy_acts = nn_core.forward_cached(self.params.policy, states)
        mean = raw[:, : self.action_dim]
        raw_ls = raw[:, self.action_dim :]
        log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
        clip_mask = (raw_ls > LOG_STD_MIN) & (raw_ls < LOG_STD_MAX)
        a, log_prob, u, std, one_m_a2, guard = self._squash(mean, log_std, eps)

        qin = np.concatenate([states, a], axis=1)
        q1, acts1 = nn_core.forward_cached(self.params.q1, qin)
        q1 = q1[:, 0]
        if self.cfg.twin_q:
            q2, acts2 = nn_core.forward_cached(self.params.q2, qin)
            q2 = q2[:, 0]
            q = np.minimum(q1, q2)
            use_q1 = q1 <= q2
        else:
            q = q1
            use_q1 = np.ones(n, dtype=bool)
        loss = float(np.mean(beta * log_prob - q))

        # dL/da via the active critic's input gradient (critic params frozen).
        up1 = (-(use_q1.astype(np.float64)) / n)[:, None]
        _, in_grad1 = nn_core.backward(self.params.q1, qin, up1, acts=acts1)
        g_a = in_grad1[:, self.state_dim :]
        if self.cfg.twin_q:
            up2 = (-((~use_q1).astype(np.float64)) / n)[:, None]
            _, in_grad2 = nn_core.backward(self.params.q2, qin, up2, acts=acts2)
            g_a = g_a + in_grad2[:, self.state_dim :]

        # log pi terms: d log pi / du comes from the tanh correction only.
        dlogp_du = 2.0 * a * one_m_a2 / guard
        g_mean = (beta / n) * dlogp_du + g_a * one_m_a2
        dstd = dlogp_du * eps * std
        g_log_std = (beta / n) * (-1.0 + dstd) + g_a * one_m_a2 * eps * std
        g_log_std = g_log_std * clip_mask  # clamped components pass no gradient

        upstream = np.concatenate([g_mean, g_log_std], axis=1)
        grads, _ = nn_core.backward(self.params.policy, states, upstream, acts=policy_acts)
        return loss, grads

    def update_policy(self, batch: TransitionBatch) -> float:
        """One Adam step on the reparameterized objective with fresh noise."""
        eps = self.rng.standard_normal((len(batch), self.action_dim))
        loss, grads = self._policy_grads(batch.states, eps)
        nn_core.adam_step(
            self.params.policy, grads, self.params.adam_policy,
            self.cfg.lr_policy * self.policy_lr_scale,
        )
        return loss

    # -- targets -------------------------------------------------------------

    def update_targets(self) -> None:
        p, tau = self.params, self.cfg.tau
        nn_core.soft_update(p.q1_target, p.q1, tau)
        nn_core.soft_update(p.q2_target, p.q2, tau)
        nn_core.soft_update(p.policy_target, p.policy, tau)

    def update(self, batch: TransitionBatch) -> tuple[float, float]:
        """One full update: critics, policy, then soft target replacement."""
        critic_loss = self.update_critics(batch)
        policy_loss = self.update_policy(batch)
        self.update_targets()
        return critic_loss, policy_loss

    # -- persistence ---------------------------------------------------------

    _NETS = ("policy", "policy_target", "q1", "q2", "q1_target", "q2_target")
    _ADAMS = (("adam_policy", "policy"), ("adam_q1", "q1"), ("adam_q2", "q2"))

    def checkpoint_sections(self, config_hash: str = "") -> list[tuple[str, dict, bytes]]:
        meta = {
            "kind": "sac_agent",
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "config_hash": config_hash,
        }
        sections = [("agent", meta, b"")]
        for name in self._NETS:
            sections.append(nn_core.params_section(f"net/{name}", getattr(self.params, name)))
        for name, _ in self._ADAMS:
            sections.append(nn_core.adam_section(f"opt/{name}", getattr(self.params, name)))
        return sections

    def save(self, path, config_hash: str = "") -> None:
        nn_core.write_container(path, self.checkpoint_sections(config_hash))

    def restore_sections(self, sections: list[tuple[str, dict, bytes]]) -> None:
        by_name = {name: (meta, payload) for name, meta, payload in sections}
        for name in self._NETS:
            meta, payload = by_name[f"net/{name}"]
            setattr(self.params, name, nn_core.params_from_section(meta, payload))
        for name, net in self._ADAMS:
            meta, payload = by_name[f"opt/{name}"]
            setattr(
                self.params, name,
                nn_core.adam_from_section(meta, payload, getattr(self.params, net)),
            )

    def load(self, path) -> None:
        self.restore_sections(nn_core.read_container(path))
