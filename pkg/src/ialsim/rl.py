"""Policy-gradient trainer with finite-memory feedforward policies.

Policies consume a stack of the last ``obs_stack`` observations (zero-padded
at episode starts) and output action logits plus a scalar value from a
shared trunk. Updates use the clipped-ratio surrogate with generalized
advantage estimation; training on a simulator is interleaved with periodic
greedy evaluations on a reference environment, producing a learning curve
of (wall-clock seconds, env steps, mean return, stderr) rows.

Wall-clock values are measured on a monotonic clock and can be offset by
the time spent building the simulator's influence predictor, so curves of
surrogate-trained and directly-trained agents share a time axis.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .core import Bits, Simulator, derive_seed, make_rng
from .neural import (
    Adam,
    AdamConfig,
    Dense,
    Mlp,
    assign_params,
    clip_grads_,
    clipped_surrogate_loss,
    load_checkpoint,
    log_softmax,
    save_checkpoint,
    softmax,
)


@dataclass
class RlConfig:
    obs_stack: int = 8
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    vf_coef: float = 0.5
    epochs: int = 4
    minibatch: int = 64
    horizon: int = 2048
    max_grad_norm: float = 0.5
    eval_every: int = 10_000
    eval_episodes: int = 10
    normalize_advantages: bool = True


class PolicyNet:
    """Shared tanh trunk with action-logit and value heads."""

    def __init__(self, obs_width: int, action_count: int, config: RlConfig,
                 seed: int = 0):
        self.obs_width = obs_width
        self.action_count = action_count
        self.config = config
        self.in_dim = obs_width * config.obs_stack
        rng = make_rng(seed, "policy-init")
        self.trunk = Mlp([self.in_dim, *config.hidden], hidden_activation="tanh",
                         output_activation="tanh", rng=rng, name="trunk")
        self.pi = Dense(config.hidden[-1], action_count, "identity", rng, name="pi")
        self.v = Dense(config.hidden[-1], 1, "identity", rng, name="v")

    def forward(self, x: np.ndarray, train: bool = False):
        h = self.trunk.forward(x, train=train)
        return self.pi.forward(h, train=train), self.v.forward(h, train=train)[:, 0]

    def backward(self, dlogits: np.ndarray, dvalues: np.ndarray) -> None:
        dh = self.pi.backward(dlogits) + self.v.backward(dvalues[:, None])
        self.trunk.backward(dh)

    def act(self, stacked: np.ndarray, rng: np.random.Generator):
        logits, value = self.forward(stacked[None, :])
        logp_all = log_softmax(logits)[0]
        cum = np.cumsum(np.exp(logp_all))
        action = int(np.searchsorted(cum, rng.random()))
        action = min(action, self.action_count - 1)
        return action, float(logp_all[action]), float(value[0])

    def greedy(self, stacked: np.ndarray) -> int:
        logits, _ = self.forward(stacked[None, :])
        return int(np.argmax(logits[0]))

    def params(self):
        return {**self.trunk.params(), **self.pi.params(), **self.v.params()}

    def grads(self):
        return {**self.trunk.grads(), **self.pi.grads(), **self.v.grads()}

    def zero_grads(self):
        self.trunk.zero_grads()
        self.pi.zero_grads()
        self.v.zero_grads()

    def save(self, path: str | Path, meta: dict) -> None:
        arch = {"obs_width": self.obs_width, "action_count": self.action_count,
                "obs_stack": self.config.obs_stack,
                "hidden": list(self.config.hidden)}
        save_checkpoint(path, "policy", arch, self.params(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "PolicyNet":
        doc = load_checkpoint(path)
        if doc["kind"] != "policy":
            raise ValueError(f"{path} is not a policy checkpoint")
        arch = doc["arch"]
        config = RlConfig(obs_stack=arch["obs_stack"], hidden=tuple(arch["hidden"]))
        net = cls(arch["obs_width"], arch["action_count"], config)
        assign_params(net.params(), doc["params"])
        return net


class ObsStacker:
    """Flat concatenation of the last k observations, zero-padded."""

    def __init__(self, obs_width: int, k: int):
        self.obs_width = obs_width
        self.k = k
        self._frames: deque[Bits] = deque(maxlen=k)

    def reset(self, obs: Bits) -> np.ndarray:
        self._frames.clear()
        return self.push(obs)

    def push(self, obs: Bits) -> np.ndarray:
        self._frames.append(np.asarray(obs, dtype=np.float64))
        out = np.zeros(self.k * self.obs_width)
        for i, frame in enumerate(reversed(self._frames)):
            out[(self.k - 1 - i) * self.obs_width:
                (self.k - i) * self.obs_width] = frame
        return out


@dataclass
class RolloutBatch:
    stacked_obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)


def compute_gae(batch: RolloutBatch, last_value: float, gamma: float,
                lam: float) -> None:
    """Generalized advantage estimation in place; returns = adv + values."""
    n = len(batch.rewards)
    adv = np.zeros(n)
    carry = 0.0
    next_value = last_value
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - batch.dones[t]
        delta = batch.rewards[t] + gamma * next_value * nonterminal - batch.values[t]
        carry = delta + gamma * lam * nonterminal * carry
        adv[t] = carry
        next_value = batch.values[t]
    batch.advantages = adv
    batch.returns = adv + batch.values


@dataclass
class LearningCurve:
    rows: list[tuple[float, int, float, float]]  # wall_clock_s, steps, mean, stderr
    metadata: dict

    def save(self, path: str | Path) -> None:
        lines = ["wall_clock_s,env_steps,mean_return,stderr"]
        for wall, steps, mean, err in self.rows:
            lines.append(f"{wall!r},{steps},{mean!r},{err!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LearningCurve":
        lines = Path(path).read_text().strip().splitlines()
        rows = []
        for line in lines[1:]:
            wall, steps, mean, err = line.split(",")
            rows.append((float(wall), int(steps), float(mean), float(err)))
        return cls(rows, {})


def aggregate_curves(curves: list[LearningCurve]) -> list[tuple[float, int, float, float]]:
    """Mean/std across seeds at aligned step counts; wall-clock is averaged."""
    steps = [tuple(r[1] for r in c.rows) for c in curves]
    if len(set(steps)) != 1:
        raise ValueError("curves are not step-aligned")
    out = []
    for i in range(len(curves[0].rows)):
        wall = float(np.mean([c.rows[i][0] for c in curves]))
        means = np.array([c.rows[i][2] for c in curves])
        out.append((wall, curves[0].rows[i][1], float(means.mean()),
                    float(means.std())))
    return out


def save_aggregate(rows, path: str | Path) -> None:
    lines = ["wall_clock_s,env_steps,mean_across_seeds,std_across_seeds"]
    for wall, steps, mean, std in rows:
        lines.append(f"{wall!r},{steps},{mean!r},{std!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(policy: PolicyNet, env: Simulator, episodes: int,
             seed: int) -> tuple[float, float]:
    """Greedy-policy mean episode return and its standard error."""
    if episodes <= 0:
        raise ValueError("need at least one evaluation episode")
    returns = []
    stacker = ObsStacker(env.descriptor.obs_width, policy.config.obs_stack)
    for ep in range(episodes):
        obs = env.reset(derive_seed(seed, "eval-episode", ep))
        stacked = stacker.reset(obs)
        total = 0.0
        done = False
        while not done:
            obs, reward, done = env.step(policy.greedy(stacked))
            stacked = stacker.push(obs)
            total += reward
        returns.append(total)
    arr = np.array(returns)
    stderr = float(arr.std() / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(arr.mean()), stderr


def evaluate_random(env: Simulator, episodes: int, seed: int) -> tuple[float, float]:
    """Uniform-random action baseline on the same protocol."""
    if episodes <= 0:
        raise ValueError("need at least one evaluation episode")
    returns = []
    rng = make_rng(seed, "random-baseline")
    for ep in range(episodes):
        env.reset(derive_seed(seed, "eval-episode", ep))
        total = 0.0
        done = False
        while not done:
            _, reward, done = env.step(int(rng.integers(0, env.descriptor.action_count)))
            total += reward
        returns.append(total)
    arr = np.array(returns)
    stderr = float(arr.std() / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(arr.mean()), stderr


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_policy(sim: Simulator, total_steps: int, eval_env: Simulator,
                 seed: int, config: RlConfig | None = None,
                 time_offset: float = 0.0):
    """Clipped-surrogate training on ``sim`` with periodic greedy
    evaluations on ``eval_env``; returns (policy, LearningCurve).

    The evaluation environment must expose the same observation and action
    widths as the training simulator. ``time_offset`` shifts the curve's
    wall-clock axis, used to account for predictor preparation time.
    """
    config = config or RlConfig()
    d_sim, d_eval = sim.descriptor, eval_env.descriptor
    if (d_sim.obs_width, d_sim.action_count) != (d_eval.obs_width, d_eval.action_count):
        raise ValueError("training and evaluation environments are incompatible")

    policy = PolicyNet(d_sim.obs_width, d_sim.action_count, config, seed=seed)
    opt = Adam(policy.params(), AdamConfig(lr=config.lr))
    act_rng = make_rng(seed, "action-sampling")
    shuffle_rng = make_rng(seed, "ppo-shuffle")

    start = time.monotonic()
    rows = []

    def record_eval(steps_done: int):
        mean, err = evaluate(policy, eval_env, config.eval_episodes,
                             derive_seed(seed, "eval-round", len(rows)))
        rows.append((time_offset + (time.monotonic() - start), steps_done,
                     mean, err))

    record_eval(0)

    episode = 0
    obs = sim.reset(derive_seed(seed, "train-episode", episode))
    stacker = ObsStacker(d_sim.obs_width, config.obs_stack)
    stacked = stacker.reset(obs)
    steps_done = 0
    next_eval = config.eval_every

    while steps_done < total_steps:
        horizon = min(config.horizon, total_steps - steps_done)
        buf_obs = np.zeros((horizon, policy.in_dim))
        buf_actions = np.zeros(horizon, dtype=np.int64)
        buf_rewards = np.zeros(horizon)
        buf_dones = np.zeros(horizon)
        buf_logp = np.zeros(horizon)
        buf_values = np.zeros(horizon)
        for i in range(horizon):
            action, logp, value = policy.act(stacked, act_rng)
            nobs, reward, done = sim.step(action)
            buf_obs[i] = stacked
            buf_actions[i] = action
            buf_rewards[i] = reward
            buf_dones[i] = float(done)
            buf_logp[i] = logp
            buf_values[i] = value
            if done:
                episode += 1
                nobs = sim.reset(derive_seed(seed, "train-episode", episode))
                stacked = stacker.reset(nobs)
            else:
                stacked = stacker.push(nobs)
        batch = RolloutBatch(buf_obs, buf_actions, buf_rewards, buf_dones,
                             buf_logp, buf_values)
        _, last_value = policy.forward(stacked[None, :])
        compute_gae(batch, float(last_value[0]), config.gamma, config.lam)
        _ppo_update(policy, opt, batch, config, shuffle_rng)
        steps_done += horizon

        if steps_done >= next_eval or steps_done >= total_steps:
            record_eval(steps_done)
            while next_eval <= steps_done:
                next_eval += config.eval_every

    curve = LearningCurve(rows, {
        "sim": d_sim.env_id, "eval_env": d_eval.env_id, "seed": seed,
        "total_steps": total_steps, "config": asdict(config),
        "time_offset": time_offset})
    return policy, curve


def _ppo_update(policy: PolicyNet, opt: Adam, batch: RolloutBatch,
                config: RlConfig, rng: np.random.Generator) -> None:
    adv = batch.advantages
    if config.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(batch.actions)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = order[start:start + config.minibatch]
            policy.zero_grads()
            logits, values = policy.forward(batch.stacked_obs[idx], train=True)
            loss, dlogits, dvalues, _ = clipped_surrogate_loss(
                logits, values, batch.actions[idx], batch.log_probs[idx],
                adv[idx], batch.returns[idx], config.clip, config.vf_coef,
                config.entropy_coef)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite loss in policy update")
            policy.backward(dlogits, dvalues)
            grads = policy.grads()
            clip_grads_(grads, config.max_grad_norm)
            opt.step(grads)


# ---------------------------------------------------------------------------
# Multi-seed experiment arm
# ---------------------------------------------------------------------------


def run_experiment_arm(sim_factory, eval_factory, seeds: list[int],
                       total_steps: int, config: RlConfig, out_dir: str | Path,
                       arm_name: str, time_offsets: dict[int, float] | None = None,
                       final_eval_episodes: int = 30):
    """Train one simulator arm across seeds; writes one curve file per seed
    plus a step-aligned aggregate, returns a summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = []
    finals = []
    total_wall = 0.0
    for s in seeds:
        sim = sim_factory(s)
        eval_env = eval_factory(s)
        offset = (time_offsets or {}).get(s, 0.0)
        t0 = time.monotonic()
        policy, curve = train_policy(sim, total_steps, eval_env, s, config,
                                     time_offset=offset)
        total_wall += time.monotonic() - t0 + offset
        curve.save(out_dir / f"curve_seed{s}.csv")
        policy.save(out_dir / f"policy_seed{s}.json",
                    {"seed": s, "arm": arm_name, "steps": total_steps})
        final_mean, final_err = evaluate(policy, eval_factory(s),
                                         final_eval_episodes,
                                         derive_seed(s, "final-eval"))
        finals.append(final_mean)
        curves.append(curve)
    agg = aggregate_curves(curves)
    save_aggregate(agg, out_dir / "aggregate.csv")
    return {
        "arm": arm_name,
        "seeds": seeds,
        "final_returns": finals,
        "final_mean": float(np.mean(finals)),
        "final_std": float(np.std(finals)),
        "total_wall_clock_s": total_wall,
        "curve_files": [str(out_dir / f"curve_seed{s}.csv") for s in seeds],
        "aggregate_file": str(out_dir / "aggregate.csv"),
    }
