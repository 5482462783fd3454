"""Policy/value networks, classic returns, and the A2C update.

The policy is a small ReLU MLP with a softmax head; the value net is an
identical stack with a scalar head. Both are fed the environment's
normalized coordinate encoding. Returns here are the classic
exponentially discounted suffix sums; the learned alternative lives in
the rgm module and plugs into the same update through the ``returns``
argument.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape
from .env import Trajectory, rollout


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss or gradient shows up mid-update."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros((len(indices), depth))
    out[np.arange(len(indices)), indices] = 1.0
    return out


class PolicyNet:
    """MLP policy: obs -> logits -> softmax action distribution."""

    def __init__(self, rng: np.random.Generator, obs_dim: int, n_actions: int,
                 hidden=(64, 64, 64), name: str = "policy"):
        dims = [obs_dim, *hidden, n_actions]
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.layers = [
            nn.Linear(f"{name}/l{i}", dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)
        ]

    def params(self) -> list[nn.Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, binding: nn.Binding, x, collect=None):
        return nn.mlp_forward(binding, self.layers, x, collect=collect)

    def probs_np(self, obs: np.ndarray) -> np.ndarray:
        logits = nn.mlp_forward_np(self.layers, obs)
        return ad.softmax_np(logits, axis=-1)

    def policy_fn(self):
        return lambda obs: self.probs_np(obs)

    def greedy_fn(self):
        def fn(obs):
            p = self.probs_np(obs)
            out = np.zeros_like(p)
            out[int(np.argmax(p))] = 1.0
            return out
        return fn


class ValueNet:
    """MLP state-value estimator with a scalar head."""

    def __init__(self, rng: np.random.Generator, obs_dim: int,
                 hidden=(64, 64, 64), name: str = "value"):
        dims = [obs_dim, *hidden, 1]
        self.obs_dim = obs_dim
        self.layers = [
            nn.Linear(f"{name}/l{i}", dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)
        ]

    def params(self) -> list[nn.Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, binding: nn.Binding, x):
        """Returns a flat [T] tensor of values."""
        out = nn.mlp_forward(binding, self.layers, x)  # [T x 1]
        return ad.matmul(out, binding.tape.constant(np.ones(1)))

    def values_np(self, obs: np.ndarray) -> np.ndarray:
        return nn.mlp_forward_np(self.layers, obs)[..., 0]


def discounted_return(rewards, gamma: float) -> np.ndarray:
    """Suffix-recursive discounted returns: G_t = r_t + gamma * G_{t+1}."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ValueError("discounted_return: need a nonempty 1-D reward sequence")
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def selected_action_probs(probs, actions: np.ndarray, n_actions: int):
    """Tape op: pick each row's taken-action probability -> [T]."""
    onehot = probs.tape.constant(one_hot(actions, n_actions))
    return ad.sum_(ad.mul(probs, onehot), axis=1)


def policy_gradient_estimate(policy: PolicyNet, traj: Trajectory, targets,
                             baseline=None) -> dict[str, np.ndarray]:
    """Gradient of sum_t log pi(a_t|s_t) * (target_t - baseline_t) over theta.

    This is the ascent-direction estimator; callers negate for losses.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (len(traj),):
        raise ValueError(f"targets length {targets.shape} != trajectory length {len(traj)}")
    advantage = targets if baseline is None else targets - np.asarray(baseline)
    tape = Tape()
    binding = nn.Binding(tape)
    x = tape.constant(traj.obs)
    logits = policy.forward(binding, x)
    probs = ad.softmax(logits, axis=1)
    logp = ad.log(selected_action_probs(probs, traj.actions, policy.n_actions))
    objective = ad.sum_(ad.mul(logp, tape.constant(advantage)))
    grads = ad.backward(objective, binding.tensors())
    return binding.grads_by_name(grads)


def entropy_of(probs):
    """Tape op: per-row entropy of a [T x A] distribution -> [T]."""
    return ad.scalar_mul(ad.sum_(ad.mul(probs, ad.log(probs)), axis=1), -1.0)


def a2c_update(policy: PolicyNet, value: ValueNet, policy_opt: nn.Optimizer,
               value_opt: nn.Optimizer, traj: Trajectory, returns,
               entropy_coef: float = 0.01, value_coef: float = 0.5) -> dict:
    """One synchronous actor-critic step on a single trajectory.

    Policy ascends mean_t log pi(a_t|s_t) * (G_t - V(s_t)) plus the
    entropy bonus; the value net descends the squared error to the
    return targets. The advantage baseline is detached.
    """
    returns = np.asarray(returns, dtype=np.float64)
    if returns.shape != (len(traj),):
        raise ValueError(f"returns length {returns.shape} != trajectory length {len(traj)}")

    tape = Tape()
    binding = nn.Binding(tape)
    x = tape.constant(traj.obs)

    logits = policy.forward(binding, x)
    probs = ad.softmax(logits, axis=1)
    logp = ad.log(selected_action_probs(probs, traj.actions, policy.n_actions))
    v = value.forward(binding, x)

    advantage = returns - v.data  # baseline detached
    policy_term = ad.mean(ad.mul(logp, tape.constant(advantage)))
    entropy_term = ad.mean(entropy_of(probs))
    diff = ad.sub(v, tape.constant(returns))
    value_term = ad.mean(ad.mul(diff, diff))

    loss = ad.add(
        ad.scalar_mul(ad.add(policy_term, ad.scalar_mul(entropy_term, entropy_coef)), -1.0),
        ad.scalar_mul(value_term, value_coef),
    )
    stats = {
        "policy_term": policy_term.item(),
        "entropy": entropy_term.item(),
        "value_loss": value_term.item(),
    }
    if not np.isfinite(loss.item()):
        raise TrainingAborted("non-finite A2C loss", stats)

    grads = binding.grads_by_name(ad.backward(loss, binding.tensors()))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for {name}", stats)
    policy_opt.step(policy.params(), grads, direction="descent")
    value_opt.step(value.params(), grads, direction="descent")
    return stats


def mc_value_estimate(env, start_cell, policy_fn, return_fn, n_rollouts: int,
                      seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate of a return functional from one start state.

    ``return_fn`` maps a trajectory to its scalar return-from-start, so
    the same estimator serves both the classic discounted value and any
    learned return. Returns (mean, standard error).
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    samples = np.empty(n_rollouts)
    for i in range(n_rollouts):
        traj = rollout(env, policy_fn, rng, start_cell=start_cell)
        samples[i] = float(return_fn(traj))
    mean = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return mean, stderr
