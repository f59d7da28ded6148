"""High-level max-value candidate selection, low-level PPO and joint
multi-agent training on one shared parameter set."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, minimum, no_grad
from .dynamics import GoalTarget
from .geometry import nqc_to_global
from .environment import Cause, EnvConfig, StepOutcome, TrajectoryLog, World
from .perception import Observation
from .policy_net import (CandidateFeatures, SHRLNet, StateFeatures, candidate_features, entropy,
                         squashed_log_prob, transform_goal)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    clip: float = 0.2
    horizon: int = 128
    epochs: int = 4
    lr: float = 3e-4
    c_v: float = 0.5
    c_h: float = 0.01
    normalize_advantage: bool = True
    max_grad_norm: float | None = 0.5
    epsilon_greedy: bool = False
    eps_start: float = 0.3
    eps_end: float = 0.01
    eps_anneal_steps: int = 100_000
    hold_k: int = 1
    max_env_steps: int = 200_000
    max_episodes: int | None = None
    stop_moving_avg: float | None = None
    n_envs: int = 1
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.clip <= 0:
            raise ValueError("clip epsilon must be positive")
        if self.horizon < 1 or self.epochs < 1 or self.hold_k < 1 or self.n_envs < 1:
            raise ValueError("horizon, epochs, hold_k and n_envs must be at least 1")
        if self.lr < 0 or self.c_v < 0 or self.c_h < 0:
            raise ValueError("lr, c_v and c_h must be non-negative")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        return self


@dataclass
class Transition:
    state: StateFeatures
    cand: CandidateFeatures
    a: np.ndarray
    z: np.ndarray
    log_prob: float
    r: float = 0.0
    terminal: bool = False


@dataclass
class RolloutBatch:
    transitions: list[Transition]
    terminal_state: StateFeatures | None = None
    terminal_candidates: list[CandidateFeatures] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].terminal


# ---------------------------------------------------------------- high level

def candidate_values(net: SHRLNet, state: StateFeatures, cands: list[CandidateFeatures]):
    with no_grad():
        v1, v2 = net.values(net.encode_candidates(state, cands))
    return v1.data, v2.data


def argmax_candidate(values: np.ndarray, cands: list[CandidateFeatures]) -> int:
    """Index of the largest value; exact ties go to the lowest
    ``(mode, rear station)``."""
    assert len(cands) > 0, "candidate set is never empty"
    best = np.flatnonzero(values == values.max())
    return int(min(best, key=lambda i: (cands[i].b, cands[i].rear_station)))


def select_candidate(net: SHRLNet, state: StateFeatures, cands: list[CandidateFeatures],
                     rng: np.random.Generator | None = None, eps: float = 0.0) -> int:
    if eps > 0 and rng is not None and rng.random() < eps:
        return int(rng.integers(len(cands)))
    v1, _ = candidate_values(net, state, cands)
    return argmax_candidate(v1, cands)


def bootstrap_value(net: SHRLNet, state: StateFeatures, cands: list[CandidateFeatures]) -> float:
    """Critic 2 evaluated at critic 1's best candidate."""
    v1, v2 = candidate_values(net, state, cands)
    return float(v2[argmax_candidate(v1, cands)])


def compute_returns(rewards, terminal: bool, v_boot: float | None, gamma: float) -> np.ndarray:
    """Discounted returns with a bootstrap after the last step, zero on terminal."""
    if not terminal and v_boot is None:
        raise TrainingError("non-terminal batch needs a bootstrap value")
    g = 0.0 if terminal else float(v_boot)
    out = np.empty(len(rewards))
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def batch_returns(net: SHRLNet, batch: RolloutBatch, gamma: float) -> np.ndarray:
    rewards = [tr.r for tr in batch.transitions]
    if batch.terminal:
        return compute_returns(rewards, True, None, gamma)
    if batch.terminal_state is None or not batch.terminal_candidates:
        raise TrainingError("non-terminal batch is missing its final candidate set")
    return compute_returns(rewards, False, bootstrap_value(net, batch.terminal_state, batch.terminal_candidates), gamma)


# ---------------------------------------------------------------- low level

@dataclass
class LossReport:
    loss: float
    surrogate: float
    critic: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    advantages: np.ndarray | None = None


def ppo_loss(net: SHRLNet, batch: RolloutBatch, returns: np.ndarray, cfg: TrainConfig,
             advantages: np.ndarray | None = None):
    """Total PPO loss as a graph node, plus diagnostics.

    The advantage baseline carries no gradient.  ``advantages`` overrides the
    (possibly normalized) ``returns - V1`` estimate, e.g. to hold it fixed
    while probing the loss numerically.
    """
    trs = batch.transitions
    e = net.encode([t.state for t in trs], [t.cand for t in trs])
    v1, v2 = net.values(e)
    mu = net.actor_mean(e, [t.cand for t in trs])
    z = np.stack([t.z for t in trs])
    old = np.array([t.log_prob for t in trs])
    lp = squashed_log_prob(mu, net.actor.log_std, z, net.cfg.sigmoid_coef)
    ratio = (lp - Tensor(old)).exp()
    if advantages is None:
        adv = returns - v1.data
        if cfg.normalize_advantage and len(trs) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    else:
        adv = np.asarray(advantages, dtype=float)
    A = Tensor(adv)
    surrogate = minimum(ratio * A, ratio.clip(1.0 - cfg.clip, 1.0 + cfg.clip) * A).mean()
    G = Tensor(returns)
    d1, d2 = v1 - G, v2 - G
    critic = (d1 * d1).mean() + (d2 * d2).mean()
    ent = entropy(net.actor.log_std)
    loss = -surrogate + critic * cfg.c_v - ent * cfg.c_h
    w = ratio.data
    report = LossReport(float(loss.data), float(surrogate.data), float(critic.data), float(ent.data),
                        float(np.mean(old - lp.data)), float(np.mean(np.abs(w - 1.0) > cfg.clip)), adv)
    return loss, report


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, max_norm: float | None = None):
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if max_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > max_norm:
                grads = {k: g * (max_norm / norm) for k, g in grads.items()}
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def ppo_update(net: SHRLNet, opt: Adam, batch: RolloutBatch, cfg: TrainConfig) -> LossReport:
    """Returns are computed once from the pre-update critics; then the
    configured number of full-batch gradient epochs follow."""
    returns = batch_returns(net, batch, cfg.gamma)
    report = None
    for _ in range(cfg.epochs):
        loss, rep = ppo_loss(net, batch, returns, cfg)
        if not math.isfinite(rep.loss):
            raise TrainingError(f"non-finite PPO loss: {rep}")
        report = report or rep
        opt.zero_grad()
        loss.backward()
        opt.step(cfg.max_grad_norm)
    return report


# ---------------------------------------------------------------- acting

@dataclass
class Decision:
    index: int
    state: StateFeatures
    cands: list[CandidateFeatures]
    a: np.ndarray
    z: np.ndarray
    log_prob: float
    target: GoalTarget


def decide(net: SHRLNet, obs: Observation, rng: np.random.Generator, greedy: bool = False, eps: float = 0.0) -> Decision:
    state = StateFeatures.from_observation(obs)
    cands = candidate_features(obs)
    with no_grad():
        e = net.encode_candidates(state, cands)
        v1 = net.critic1(e).data
    if eps > 0 and rng.random() < eps:
        k = int(rng.integers(len(cands)))
    else:
        k = argmax_candidate(v1, cands)
    a, z, lp = net.sample_action(e[[k]], cands[k], rng, greedy=greedy)
    g, psi = transform_goal(a, obs.candidates[k].o)
    return Decision(k, state, cands, a, z, lp, GoalTarget((float(g[0]), float(g[1])), psi))


def scripted_target(world: World, vid: int, ahead: float = 20.0) -> GoalTarget:
    """Naive sub-goal: the center of the current lane ``ahead`` meters on."""
    st = world.vehicles[vid].state
    loc = world.locate(st.position)
    lm = world.lane_map
    if loc is None:
        return GoalTarget((st.x + ahead * math.cos(st.psi), st.y + ahead * math.sin(st.psi)), st.psi)
    lane, q, _, v = loc
    s = lm.station(lane, q, v) + ahead
    end = lm.cum[lane][-1]
    q2, v2 = lm.at_station(lane, min(s, end))
    p = nqc_to_global(lm.quad(lane, q2), 0.5, v2)
    d = lm.direction(lane, q2)
    if s > end:
        p = p + (s - end) * d
    return GoalTarget((float(p[0]), float(p[1])), math.atan2(d[1], d[0]))


# ---------------------------------------------------------------- joint training

LOG_FIELDS = ["episode", "agent", "return", "moving_avg", "steps", "cause"]


@dataclass
class EpisodeRecord:
    episode: int
    agent: str
    ret: float
    moving_avg: float
    steps: int
    cause: str


@dataclass
class TrainingLog:
    rows: list[EpisodeRecord] = field(default_factory=list)
    env_steps: int = 0
    updates: int = 0

    @property
    def moving_avg(self) -> float:
        return self.rows[-1].moving_avg if self.rows else 0.0

    def add(self, agent: str, ret: float, steps: int, cause: str) -> EpisodeRecord:
        m = 0.9 * self.moving_avg + 0.1 * ret
        rec = EpisodeRecord(len(self.rows), agent, ret, m, steps, cause)
        self.rows.append(rec)
        return rec

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(LOG_FIELDS) + "\n")
        for r in self.rows:
            buf.write(f"{r.episode},{r.agent},{r.ret!r},{r.moving_avg!r},{r.steps},{r.cause}\n")
        return buf.getvalue()


def moving_average(returns, alpha: float = 0.1) -> np.ndarray:
    m, out = 0.0, []
    for r in returns:
        m = (1.0 - alpha) * m + alpha * r
        out.append(m)
    return np.array(out)


@dataclass
class AgentMemory:
    transitions: list[Transition] = field(default_factory=list)
    pending: Transition | None = None
    decision: Decision | None = None
    hold: int = 0
    ret: float = 0.0
    steps: int = 0


def _cause_label(out: StepOutcome) -> str:
    if out.cause is not Cause.NONE:
        return out.cause.value
    return "truncated" if out.truncated else "none"


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """Named sub-streams of one seed.  Keys 0 and 1 are used by the world."""
    root = np.random.SeedSequence(seed)
    spawn, goal, policy, init = root.spawn(4)
    return {"spawn": spawn, "goal": goal, "policy": policy, "init": init}


class JointTrainer:
    """Single-threaded schedule: environments and agents are visited in a
    fixed order and every update is applied immediately to the shared net."""

    def __init__(self, env_cfg: EnvConfig, net: SHRLNet, cfg: TrainConfig, on_checkpoint=None):
        cfg.validate()
        self.env_cfg, self.net, self.cfg = env_cfg, net, cfg
        streams = seed_streams(cfg.seed)
        self.rng = np.random.default_rng(streams["policy"])
        self.worlds = [World(_env_seeded(env_cfg, cfg.seed + i)) for i in range(cfg.n_envs)]
        self.memories: list[dict[int, AgentMemory]] = [{} for _ in self.worlds]
        self.obs: list[dict[int, Observation]] = [{} for _ in self.worlds]
        self.opt = Adam(net.parameters(), cfg.lr)
        self.log = TrainingLog()
        self.on_checkpoint = on_checkpoint
        self.losses: list[LossReport] = []

    def epsilon(self) -> float:
        c = self.cfg
        if not c.epsilon_greedy:
            return 0.0
        frac = min(self.log.env_steps / max(c.eps_anneal_steps, 1), 1.0)
        return c.eps_start + frac * (c.eps_end - c.eps_start)

    def _update(self, mem: AgentMemory, terminal: bool, obs: Observation | None):
        if not mem.transitions:
            return
        batch = RolloutBatch(mem.transitions)
        if not terminal:
            batch.terminal_state = StateFeatures.from_observation(obs)
            batch.terminal_candidates = candidate_features(obs)
        self.losses.append(ppo_update(self.net, self.opt, batch, self.cfg))
        self.log.updates += 1
        mem.transitions = []

    def _close_pending(self, mem: AgentMemory, terminal: bool):
        if mem.pending is not None:
            mem.pending.terminal = terminal
            mem.transitions.append(mem.pending)
            mem.pending = None

    def tick(self, w: int) -> list[EpisodeRecord]:
        world, mems, obs = self.worlds[w], self.memories[w], self.obs[w]
        eps = self.epsilon()
        actions = {}
        for vid in world.active_ids():
            mem = mems.setdefault(vid, AgentMemory())
            if mem.hold == 0:
                self._close_pending(mem, False)
                if len(mem.transitions) >= self.cfg.horizon:
                    self._update(mem, False, obs[vid])
                d = decide(self.net, obs[vid], self.rng, eps=eps)
                mem.decision = d
                mem.pending = Transition(d.state, d.cands[d.index], d.a, d.z, d.log_prob)
                mem.hold = self.cfg.hold_k
            mem.hold -= 1
            actions[vid] = mem.decision.target
        outcomes, new_obs, _ = world.step(actions)
        self.log.env_steps += 1
        finished = []
        for vid, out in sorted(outcomes.items()):
            mem = mems[vid]
            mem.pending.r += out.reward
            mem.ret += out.reward
            mem.steps += 1
            if out.terminal or out.truncated:
                self._close_pending(mem, out.terminal)
                self._update(mem, out.terminal, new_obs.get(vid))
                finished.append(self.log.add(f"{w}:{vid}", mem.ret, mem.steps, _cause_label(out)))
                del mems[vid]
                if self.cfg.checkpoint_every and self.on_checkpoint and len(self.log.rows) % self.cfg.checkpoint_every == 0:
                    self.on_checkpoint(self.net, len(self.log.rows))
        self.obs[w] = {vid: o for vid, o in new_obs.items() if vid in world.vehicles and vid in set(world.active_ids())}
        return finished

    def done(self) -> bool:
        c = self.cfg
        if self.log.env_steps >= c.max_env_steps:
            return True
        if c.max_episodes is not None and len(self.log.rows) >= c.max_episodes:
            return True
        return c.stop_moving_avg is not None and bool(self.log.rows) and self.log.moving_avg > c.stop_moving_avg

    def run(self, progress=None) -> TrainingLog:
        while not self.done():
            for w in range(len(self.worlds)):
                for rec in self.tick(w):
                    if progress:
                        progress(rec, self.log)
        return self.log


def _env_seeded(cfg: EnvConfig, seed: int) -> EnvConfig:
    return replace(cfg, seed=seed)


def joint_train(env_cfg: EnvConfig, net: SHRLNet, cfg: TrainConfig, progress=None, on_checkpoint=None) -> TrainingLog:
    return JointTrainer(env_cfg, net, cfg, on_checkpoint).run(progress)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalSummary:
    episodes: int = 0
    success_rate: float = float("nan")
    collision_rate: float = float("nan")
    mean_return: float = float("nan")
    mean_travel_time: float = float("nan")
    returns: list[float] = field(default_factory=list)
    causes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        """Summary fields; undefined rates and means become ``None``."""
        raw = {"episodes": self.episodes, "success_rate": self.success_rate, "collision_rate": self.collision_rate,
               "mean_return": self.mean_return, "mean_travel_time": self.mean_travel_time}
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in raw.items()}


def evaluate(env_cfg: EnvConfig, episodes: int, net: SHRLNet | None = None, policy: str = "greedy",
             seed: int = 0, max_ticks: int = 100_000, trajectory: TrajectoryLog | None = None) -> EvalSummary:
    """Run episodes until ``episodes`` agents have finished.

    ``policy`` is ``"greedy"`` (argmax candidate, mean action), ``"sample"``
    or ``"scripted"`` (lane-center go-straight stub, ignores ``net``).
    """
    if episodes <= 0:
        return EvalSummary()
    if policy != "scripted" and net is None:
        raise ValueError("a network is required unless the policy is scripted")
    world = World(_env_seeded(env_cfg, seed))
    rng = np.random.default_rng(seed_streams(seed)["policy"])
    obs: dict[int, Observation] = {}
    rets: dict[int, float] = {}
    ages: dict[int, int] = {}
    returns, causes, times = [], [], []
    for _ in range(max_ticks):
        actions = {}
        for vid in world.active_ids():
            if policy == "scripted":
                actions[vid] = scripted_target(world, vid)
            else:
                actions[vid] = decide(net, obs[vid], rng, greedy=(policy == "greedy")).target
        outcomes, new_obs, _ = world.step(actions, observe=(policy != "scripted"))
        if trajectory is not None:
            trajectory.record(world, outcomes)
        for vid, out in sorted(outcomes.items()):
            rets[vid] = rets.get(vid, 0.0) + out.reward
            ages[vid] = ages.get(vid, 0) + 1
            if out.terminal or out.truncated:
                returns.append(rets.pop(vid))
                causes.append(_cause_label(out))
                t = ages.pop(vid)
                if out.cause is Cause.GOAL:
                    times.append(t * env_cfg.dt)
        obs = new_obs
        if len(returns) >= episodes:
            break
    returns, causes = returns[:episodes], causes[:episodes]
    n = len(returns)
    if n == 0:
        return EvalSummary()
    return EvalSummary(n, causes.count(Cause.GOAL.value) / n, causes.count(Cause.COLLISION.value) / n,
                       float(np.mean(returns)), float(np.mean(times)) if times else float("nan"), returns, causes)
