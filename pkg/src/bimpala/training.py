"""Imitation and policy-gradient training for MiniBimpala, plus seeded evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import maze as mz
from .linalg import make_rng
from .network import NetConfig, PolicyNetwork, init_network, network_backward, network_forward, softmax

log = logging.getLogger(__name__)

# evaluation mazes come from a seed range training never samples from
EVAL_SEED_BASE = 1_000_000_000
TRAIN_SEED_LIMIT = EVAL_SEED_BASE


def eval_seeds(n: int, offset: int = 0) -> list[int]:
    return [EVAL_SEED_BASE + offset + i for i in range(n)]


@dataclass
class TrainConfig:
    mode: str = "imitation"  # "imitation" | "policy_gradient"
    batch_size: int = 64
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 16_000
    states_per_maze: int = 8
    path_fraction: float = 1.0
    lr_schedule: str = "cosine"  # "constant" | "cosine" (decays to zero at total_steps)
    compute_dtype: str = "float32"  # forward/backward precision; Adam state stays float64
    eval_seeds: list[int] = field(default_factory=lambda: eval_seeds(20))
    eval_every: int = 1000
    step_cap: int = 100
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    # policy-gradient knobs
    pg_envs: int = 16
    pg_gamma: float = 0.97
    pg_clip: float = 0.2
    pg_epochs: int = 2
    pg_entropy: float = 0.01
    pg_value_coef: float = 0.5

    def validate(self) -> None:
        if self.mode not in ("imitation", "policy_gradient"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("batch_size", "states_per_maze", "eval_every", "step_cap", "pg_envs", "pg_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.total_steps < 0:
            raise ValueError("learning_rate and total_steps must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError(f"compute_dtype must be float32 or float64, got {self.compute_dtype!r}")
        if not 0.0 <= self.path_fraction <= 1.0:
            raise ValueError("path_fraction must lie in [0, 1]")
        if self.batch_size % self.states_per_maze:
            raise ValueError("batch_size must be a multiple of states_per_maze")
        if any(s < TRAIN_SEED_LIMIT for s in self.eval_seeds):
            raise ValueError(f"eval seeds must be >= {TRAIN_SEED_LIMIT} to stay disjoint from training seeds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d


@dataclass
class IntervalRecord:
    step: int
    loss: float
    accuracy: float
    expected_return: float
    average_entropy: float
    explained_variance: float
    eval_success_rate: float
    mean_steps_to_solve: float
    wall_seconds: float


@dataclass
class TrainMetrics:
    records: list[IntervalRecord] = field(default_factory=list)
    wall_seconds: float = 0.0

    COLUMNS = tuple(IntervalRecord.__dataclass_fields__)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, net: PolicyNetwork, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        if self.lr == 0:
            return
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1**self.t
        corr2 = 1 - b2**self.t
        for k, p in net.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.lr * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + self.eps)
        net.touch()


def entropy(probs: np.ndarray) -> np.ndarray:
    """-sum p ln p along the last axis (0 ln 0 = 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE loss and its gradient w.r.t. logits."""
    p = softmax(logits)
    n = len(labels)
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def explained_variance(pred: np.ndarray, target: np.ndarray) -> float:
    var = np.var(target)
    if var == 0:
        return float("nan")
    return float(1.0 - np.var(target - pred) / var)


def imitation_batch(rng: np.random.Generator, batch_size: int, states_per_maze: int, path_fraction: float = 0.0):
    obs, acts = [], []
    for _ in range(batch_size // states_per_maze):
        seed = int(rng.integers(TRAIN_SEED_LIMIT))
        o, a = mz.sample_training_states(seed, states_per_maze, rng, path_fraction)
        obs.append(o)
        acts.append(a)
    return np.concatenate(obs), np.concatenate(acts)


# --- evaluation ------------------------------------------------------------

ActionSource = Callable[[np.ndarray], np.ndarray]  # [B,3,16,16] -> logits [B,4]


def network_source(net: PolicyNetwork, **overrides) -> ActionSource:
    def source(obs: np.ndarray) -> np.ndarray:
        return network_forward(net, obs, **overrides)[0]

    return source


def oracle_source(obs: np.ndarray) -> np.ndarray:
    """Logits that put all mass on the BFS-optimal action (reads the maze back from obs)."""
    out = np.zeros((obs.shape[0], 4))
    for i, o in enumerate(obs):
        walls = o[0, : mz.GRID, : mz.GRID] > 0.5
        mouse = tuple(int(v) for v in np.argwhere(o[1] > 0.5)[0])
        cheese = tuple(int(v) for v in np.argwhere(o[2] > 0.5)[0])
        m = mz.Maze(walls=walls, mouse=mouse, cheese=cheese)
        out[i, mz.bfs_optimal_action(m)] = 1.0
    return out


@dataclass
class EvalResult:
    success_rate: float
    mean_steps: float
    per_seed: list[tuple[int, bool, int]]

    @property
    def mean_steps_solved(self) -> float:
        solved = [s for _, ok, s in self.per_seed if ok]
        return float(np.mean(solved)) if solved else float("nan")


def evaluate_policy(
    source: PolicyNetwork | ActionSource,
    seeds: list[int],
    step_cap: int = 100,
    cheese: str | tuple[int, int] = "random",
) -> EvalResult:
    """Greedy rollouts, one per seed, stepped in lockstep as a batch.

    Ties in the logits go to the lowest action index.  ``mean_steps`` counts
    failed episodes at the cap.
    """
    if not seeds:
        raise ValueError("evaluate_policy needs at least one seed")
    if isinstance(source, PolicyNetwork):
        source = network_source(source)
    states = [mz.reset(mz.generate_maze(s, cheese), step_cap) for s in seeds]
    while True:
        active = [i for i, st in enumerate(states) if not st.done]
        if not active:
            break
        obs = np.stack([mz.render_observation(states[i].maze) for i in active])
        logits = source(obs)
        for i, lg in zip(active, logits):
            states[i], _ = mz.step(states[i], int(np.argmax(lg)))
    per_seed = [(s, st.success, st.steps_taken) for s, st in zip(seeds, states)]
    return EvalResult(
        success_rate=float(np.mean([ok for _, ok, _ in per_seed])),
        mean_steps=float(np.mean([n for _, _, n in per_seed])),
        per_seed=per_seed,
    )


# --- training ---------------------------------------------------------------


def learning_rate_at(config: TrainConfig, step: int) -> float:
    """Learning rate for 1-based ``step``."""
    if config.lr_schedule == "constant":
        return config.learning_rate
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * (step - 1) / max(config.total_steps, 1)))


def _check_finite(loss: float, step: int) -> None:
    if not math.isfinite(loss):
        raise FloatingPointError(f"training diverged at step {step}: loss={loss}")


def train_imitation(
    config: TrainConfig,
    net: PolicyNetwork | None = None,
    progress: Callable[[IntervalRecord], None] | None = None,
) -> tuple[PolicyNetwork, TrainMetrics]:
    """Cross-entropy imitation of the BFS oracle on freshly sampled mazes."""
    config.validate()
    if config.mode != "imitation":
        raise ValueError("train_imitation requires mode == 'imitation'")
    net = net or init_network(config.net, config.seed)
    rng = make_rng(config.seed + 1)
    opt = Adam(net.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    metrics = TrainMetrics()
    t0 = time.perf_counter()
    losses, accs, ents = [], [], []
    for step in range(1, config.total_steps + 1):
        obs, labels = imitation_batch(rng, config.batch_size, config.states_per_maze, config.path_fraction)
        logits, _, cache = network_forward(net, obs, dtype=config.compute_dtype)
        logits = logits.astype(np.float64)
        loss, dlogits = cross_entropy(logits, labels)
        _check_finite(loss, step)
        grads = network_backward(net, cache, dlogits)
        opt.lr = learning_rate_at(config, step)
        opt.step(net, grads)
        losses.append(loss)
        accs.append(float(np.mean(np.argmax(logits, axis=1) == labels)))
        ents.append(float(np.mean(entropy(softmax(logits)))))
        if step % config.eval_every == 0 or step == config.total_steps:
            ev = evaluate_policy(net, config.eval_seeds, config.step_cap)
            rec = IntervalRecord(
                step=step,
                loss=float(np.mean(losses)),
                accuracy=float(np.mean(accs)),
                expected_return=ev.success_rate,
                average_entropy=float(np.mean(ents)),
                explained_variance=float("nan"),
                eval_success_rate=ev.success_rate,
                mean_steps_to_solve=ev.mean_steps,
                wall_seconds=time.perf_counter() - t0,
            )
            metrics.records.append(rec)
            log.info("step %d loss %.4f acc %.3f eval %.2f", step, rec.loss, rec.accuracy, rec.eval_success_rate)
            if progress:
                progress(rec)
            losses, accs, ents = [], [], []
    metrics.wall_seconds = time.perf_counter() - t0
    return net, metrics


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    returns: np.ndarray
    values: np.ndarray
    episode_returns: list[float]


def collect_rollouts(net: PolicyNetwork, rng: np.random.Generator, n_envs: int, step_cap: int, gamma: float):
    """Sample one episode per env with the stochastic policy; discounted returns-to-go."""
    states = [mz.reset(mz.generate_maze(int(rng.integers(TRAIN_SEED_LIMIT))), step_cap) for _ in range(n_envs)]
    traj = [[] for _ in range(n_envs)]
    while True:
        active = [i for i, st in enumerate(states) if not st.done]
        if not active:
            break
        obs = np.stack([mz.render_observation(states[i].maze) for i in active])
        logits, values, _ = network_forward(net, obs)
        probs = softmax(logits)
        for j, i in enumerate(active):
            a = int(rng.choice(4, p=probs[j]))
            states[i], r = mz.step(states[i], a)
            traj[i].append((obs[j], a, math.log(probs[j, a] + 1e-300), r, values[j]))
    obs, acts, logp, rets, vals, ep_ret = [], [], [], [], [], []
    for t in traj:
        g = 0.0
        back = []
        for o, a, lp, r, v in reversed(t):
            g = r + gamma * g
            back.append((o, a, lp, g, v))
        for o, a, lp, g, v in reversed(back):
            obs.append(o)
            acts.append(a)
            logp.append(lp)
            rets.append(g)
            vals.append(v)
        ep_ret.append(sum(step[3] for step in t))
    return RolloutBatch(
        np.stack(obs), np.array(acts), np.array(logp), np.array(rets), np.array(vals), ep_ret
    )


def ppo_gradients(net: PolicyNetwork, batch_obs, actions, old_logp, advantages, returns, config: TrainConfig):
    """Clipped-ratio actor-critic loss and its parameter gradients."""
    logits, values, cache = network_forward(net, batch_obs, dtype=config.compute_dtype)
    logits, values = logits.astype(np.float64), values.astype(np.float64)
    p = softmax(logits)
    n = len(actions)
    idx = np.arange(n)
    logp = np.log(p[idx, actions] + 1e-300)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1 - config.pg_clip, 1 + config.pg_clip)
    use_unclipped = ratio * advantages <= clipped * advantages
    surrogate = np.minimum(ratio * advantages, clipped * advantages)
    ent = entropy(p)
    vloss = (values - returns) ** 2
    loss = -surrogate.mean() - config.pg_entropy * ent.mean() + config.pg_value_coef * vloss.mean()
    # d(-surrogate)/dlogits: only the unclipped branch carries gradient
    coef = np.where(use_unclipped, -advantages * ratio, 0.0) / n
    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    dlogits = coef[:, None] * (onehot - p)
    # d(-H)/dlogits = p * (log p + H)
    logp_all = np.log(p + 1e-300)
    dlogits += config.pg_entropy * p * (logp_all + ent[:, None]) / n
    dvalue = config.pg_value_coef * 2.0 * (values - returns) / n
    grads = network_backward(net, cache, dlogits, dvalue)
    return float(loss), grads, float(ent.mean())


def train_policy_gradient(
    config: TrainConfig,
    net: PolicyNetwork | None = None,
    progress: Callable[[IntervalRecord], None] | None = None,
) -> tuple[PolicyNetwork, TrainMetrics]:
    """PPO-lite: on-policy episodes, value baseline, clipped ratio, a few epochs per batch."""
    config.validate()
    if config.mode != "policy_gradient":
        raise ValueError("train_policy_gradient requires mode == 'policy_gradient'")
    net = net or init_network(config.net, config.seed)
    rng = make_rng(config.seed + 1)
    opt = Adam(net.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    metrics = TrainMetrics()
    t0 = time.perf_counter()
    losses, rets, ents, evs = [], [], [], []
    for step in range(1, config.total_steps + 1):
        ro = collect_rollouts(net, rng, config.pg_envs, config.step_cap, config.pg_gamma)
        adv = ro.returns - ro.values
        evs.append(explained_variance(ro.values, ro.returns))
        for _ in range(config.pg_epochs):
            perm = rng.permutation(len(adv))
            for start in range(0, len(perm), config.batch_size):
                sl = perm[start : start + config.batch_size]
                loss, grads, ent = ppo_gradients(
                    net, ro.obs[sl], ro.actions[sl], ro.old_logp[sl], adv[sl], ro.returns[sl], config
                )
                _check_finite(loss, step)
                opt.step(net, grads)
                losses.append(loss)
                ents.append(ent)
        rets.append(float(np.mean(ro.episode_returns)))
        if step % config.eval_every == 0 or step == config.total_steps:
            ev = evaluate_policy(net, config.eval_seeds, config.step_cap)
            rec = IntervalRecord(
                step=step,
                loss=float(np.mean(losses)),
                accuracy=float("nan"),
                expected_return=float(np.mean(rets)),
                average_entropy=float(np.mean(ents)),
                explained_variance=float(np.nanmean(evs)) if not all(np.isnan(evs)) else float("nan"),
                eval_success_rate=ev.success_rate,
                mean_steps_to_solve=ev.mean_steps,
                wall_seconds=time.perf_counter() - t0,
            )
            metrics.records.append(rec)
            if progress:
                progress(rec)
            losses, rets, ents, evs = [], [], [], []
    metrics.wall_seconds = time.perf_counter() - t0
    return net, metrics


def train(config: TrainConfig, progress=None) -> tuple[PolicyNetwork, TrainMetrics]:
    if config.mode == "imitation":
        return train_imitation(config, progress=progress)
    return train_policy_gradient(config, progress=progress)
