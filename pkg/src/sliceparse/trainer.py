"""Policy optimization: demonstration pretraining plus live rollouts.

The critic learns a one-step bootstrapped value with periodically hard-copied
target networks.  The actor descends the negated critic value plus a
behavior-cloning term that is gated per sample: cloning applies only where
the critic scores the teacher's action above the policy's own (the filter
keeps the teacher from dragging down states the policy already handles
better).  Two pools feed every update step, one of teacher episodes and one
of the agent's own, and a teacher episode is replaced when the agent beats
its return on the same shape.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np

from . import geom
from .env import CutAction, CutEnv, EnvConfig
from .expert import expert_action, shape_fingerprint
from .geom import VoxelGrid
from .neural import ActorNet, CriticNet, NetConfig, clone_params, encode_batch
from .replay import BufferKind, ReplayBuffer, Transition, split_episodes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    batch_size: int = 64
    bc_weight: float = 1.0
    target_period: int = 100
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    momentum: float = 0.9
    pretrain_iters: int = 5000
    env_steps: int = 2000
    noise_sigma: float = 0.1
    demo_capacity: int = 50_000
    agent_capacity: int = 100_000
    refresh_demos: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.batch_size < 1 or self.target_period < 1:
            raise ValueError("batch_size and target_period must be >= 1")
        if self.bc_weight < 0 or self.noise_sigma < 0:
            raise ValueError("bc_weight and noise_sigma must be >= 0")


@dataclass
class EpisodeRecord:
    episode: int
    env_steps: int
    shape: int
    episode_return: float
    surface_iou: float
    chamfer_l1: float


@dataclass
class TrainReport:
    pretrain_losses: list[tuple[int, float, float]] = field(default_factory=list)
    episodes: list[EpisodeRecord] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {
                "episode": r.episode,
                "env_steps": r.env_steps,
                "shape": r.shape,
                "return": r.episode_return,
                "surface_iou": r.surface_iou,
                "chamfer_l1": r.chamfer_l1,
            }
            for r in self.episodes
        ]


class _Momentum:
    def __init__(self, size: int, lr: float, momentum: float, dtype):
        self.v = np.zeros(size, dtype=dtype)
        self.lr = lr
        self.momentum = momentum

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.v = self.momentum * self.v - self.lr * grad
        return params + self.v


class Trainer:
    """Owns the four networks and their update rules."""

    def __init__(self, net_cfg: NetConfig, cfg: TrainerConfig, zero_projections: bool = False):
        self.net_cfg = net_cfg
        self.cfg = cfg
        self.zero_projections = zero_projections
        self.actor = ActorNet(net_cfg)
        self.critic = CriticNet(dc_replace(net_cfg, seed=net_cfg.seed + 1))
        self.target_actor = ActorNet(net_cfg)
        self.target_critic = CriticNet(dc_replace(net_cfg, seed=net_cfg.seed + 1))
        self.copy_targets()
        self.opt_actor = _Momentum(self.actor.param_count(), cfg.lr_actor, cfg.momentum, self.actor.dtype)
        self.opt_critic = _Momentum(self.critic.param_count(), cfg.lr_critic, cfg.momentum, self.critic.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        self._warned: set[str] = set()

    # -- plumbing -----------------------------------------------------------

    def copy_targets(self) -> None:
        clone_params(self.actor, self.target_actor)
        clone_params(self.critic, self.target_critic)

    def _encode(self, states):
        return encode_batch(states, self.net_cfg, zero_projections=self.zero_projections)

    def _actions(self, batch, expert: bool) -> np.ndarray:
        key = "expert_action" if expert else "action"
        return np.asarray(
            [getattr(t, key).as_array() for t in batch], dtype=self.actor.dtype
        )

    # -- losses and updates ---------------------------------------------------

    def td_target(self, batch) -> np.ndarray:
        """One-step bootstrapped target from the target networks."""
        images, feats = self._encode([t.next_state for t in batch])
        next_actions = self.target_actor.forward(images, feats)
        next_q = self.target_critic.forward(images, feats, next_actions)
        r = np.array([t.reward for t in batch], dtype=np.float64)
        live = np.array([0.0 if t.done else 1.0 for t in batch])
        return r + self.cfg.gamma * live * next_q

    def critic_update(self, batch) -> float:
        """One squared-error step toward the bootstrapped targets; returns the
        pre-step loss."""
        y = self.td_target(batch)
        images, feats = self._encode([t.state for t in batch])
        q = self.critic.forward(images, feats, self._actions(batch, expert=False))
        err = q - y
        loss = float(np.mean(err**2))
        grads, _ = self.critic.backward(2.0 * err / len(batch))
        self.critic.set_params(self.opt_critic.step(self.critic.get_params(), grads))
        return loss

    def bc_loss(self, batch) -> float:
        """Summed squared distance to the teacher's actions over the samples
        where the critic prefers the teacher."""
        usable = [t for t in batch if t.expert_action is not None]
        if not usable:
            return 0.0
        loss, _, _, _ = self._bc_terms(usable)
        return loss

    def _bc_terms(self, batch):
        images, feats = self._encode([t.state for t in batch])
        pi = self.actor.forward(images, feats)
        a_h = self._actions(batch, expert=True)
        q_h = self.critic.forward(images, feats, a_h)
        q_pi = self.critic.forward(images, feats, pi)
        mask = (q_h > q_pi).astype(np.float64)
        diff = pi.astype(np.float64) - a_h.astype(np.float64)
        loss = float((mask * (diff**2).sum(axis=1)).sum())
        return loss, pi, mask, diff

    def actor_update(self, batch) -> float:
        """One step on -mean(Q(s, pi(s))) plus the weighted cloning term;
        returns the pre-step objective."""
        has_expert = all(t.expert_action is not None for t in batch)
        images, feats = self._encode([t.state for t in batch])
        pi = self.actor.forward(images, feats)
        q_pi = self.critic.forward(images, feats, pi)
        _, dq_da = self.critic.backward(np.ones(len(batch)))
        d_pi = -dq_da.astype(np.float64) / len(batch)
        objective = -float(np.mean(q_pi))
        if has_expert and self.cfg.bc_weight > 0:
            a_h = self._actions(batch, expert=True)
            q_h = self.critic.forward(images, feats, a_h)
            mask = (q_h > q_pi).astype(np.float64)
            diff = pi.astype(np.float64) - a_h.astype(np.float64)
            objective += self.cfg.bc_weight * float((mask * (diff**2).sum(axis=1)).sum())
            d_pi = d_pi + self.cfg.bc_weight * 2.0 * mask[:, None] * diff
        # re-run the actor forward so its caches match the differentiated path
        self.actor.forward(images, feats)
        grads = self.actor.backward(d_pi.astype(self.actor.dtype))
        self.actor.set_params(self.opt_actor.step(self.actor.get_params(), grads))
        return objective

    def _update_from(self, buffer: ReplayBuffer, label: str) -> None:
        if len(buffer) < self.cfg.batch_size:
            if label not in self._warned:
                log.warning("%s pool holds %d < %d transitions; skipping its updates",
                            label, len(buffer), self.cfg.batch_size)
                self._warned.add(label)
            return
        batch = buffer.sample(self.rng, self.cfg.batch_size)
        self.critic_update(batch)
        self.actor_update(batch)

    # -- phases ---------------------------------------------------------------

    def pretrain(self, demo_buffer: ReplayBuffer, iters: int | None = None) -> list[tuple[int, float, float]]:
        """Teacher-only phase: both nets updated from demonstration samples,
        hard target copies on the usual period."""
        iters = self.cfg.pretrain_iters if iters is None else iters
        losses = []
        for t in range(1, iters + 1):
            if len(demo_buffer) < self.cfg.batch_size:
                log.warning("demonstration pool too small to pretrain (%d < %d)",
                            len(demo_buffer), self.cfg.batch_size)
                break
            batch = demo_buffer.sample(self.rng, self.cfg.batch_size)
            closs = self.critic_update(batch)
            aloss = self.actor_update(batch)
            if t % 50 == 0 or t == 1:
                losses.append((t, closs, aloss))
            if t % self.cfg.target_period == 0:
                self.copy_targets()
        return losses

    def train(
        self,
        shapes: list[VoxelGrid],
        env_cfg: EnvConfig,
        demo_buffer: ReplayBuffer | None = None,
        report: TrainReport | None = None,
        progress: bool = False,
    ) -> TrainReport:
        """Rollout phase: explore with Gaussian action noise, label every
        visited state with the teacher, and update from both pools each step."""
        report = report or TrainReport()
        agent_buffer = ReplayBuffer(BufferKind.AGENT, self.cfg.agent_capacity)
        demo_returns: dict[str, float] = {}
        if demo_buffer is not None:
            for ep in split_episodes(demo_buffer.items()):
                key = shape_fingerprint(ep[0].state)
                demo_returns[key] = sum(t.reward for t in ep)

        gt_meshes: dict[int, object] = {}
        env = CutEnv(env_cfg)
        t_global = 0
        episode = 0
        t0 = time.time()
        while t_global < self.cfg.env_steps:
            shape_idx = int(self.rng.integers(len(shapes)))
            shape = shapes[shape_idx]
            state = env.reset(shape)
            key = shape_fingerprint(state)
            ep_transitions: list[Transition] = []
            ep_return = 0.0
            part_union = np.zeros(shape.dims, dtype=bool)
            while not env.done and t_global < self.cfg.env_steps:
                base = self.actor.act(state, zero_projections=self.zero_projections).as_array()
                noisy = np.clip(base + self.rng.normal(0.0, self.cfg.noise_sigma, 5), 0.0, 1.0)
                action = CutAction.from_array(noisy)
                teacher = expert_action(state, env_cfg.slice_axis)
                result = env.step(action)
                tr = Transition(state, action, result.reward, result.next_state,
                                result.done, expert_action=teacher)
                agent_buffer.add(tr)
                ep_transitions.append(tr)
                ep_return += result.reward
                if env._last_part_grid is not None:
                    part_union |= env._last_part_grid.occupancy
                state = result.next_state
                t_global += 1
                if demo_buffer is not None:
                    self._update_from(demo_buffer, "demonstration")
                self._update_from(agent_buffer, "agent")
                if t_global % self.cfg.target_period == 0:
                    self.copy_targets()
            tail = env.remainder_part()
            if tail is not None:
                _, tail_mesh, tail_grid = tail
                if not tail_mesh.is_empty():
                    part_union |= geom.voxelize_like(tail_mesh, shape).occupancy
            recon = shape.with_occupancy(part_union)
            if shape_idx not in gt_meshes:
                gt_meshes[shape_idx] = geom.grid_to_mesh(shape)
            recon_mesh = geom.grid_to_mesh(recon)
            chamfer = (
                geom.chamfer_l1(recon_mesh, gt_meshes[shape_idx], 2048)
                if not recon_mesh.is_empty()
                else float("inf")
            )
            report.episodes.append(
                EpisodeRecord(
                    episode=episode,
                    env_steps=t_global,
                    shape=shape_idx,
                    episode_return=ep_return,
                    surface_iou=geom.surface_iou(recon, shape),
                    chamfer_l1=chamfer,
                )
            )
            if (
                self.cfg.refresh_demos
                and demo_buffer is not None
                and key in demo_returns
                and ep_return > demo_returns[key]
                and ep_transitions
                and ep_transitions[-1].done
            ):
                demo_buffer.replace_group(key, ep_transitions)
                demo_returns[key] = ep_return
            episode += 1
            if progress and episode % 20 == 0:
                recent = report.episodes[-20:]
                log.info(
                    "episode %d (%d steps, %.0fs): return %.2f, surface overlap %.3f",
                    episode, t_global, time.time() - t0,
                    float(np.mean([r.episode_return for r in recent])),
                    float(np.mean([r.surface_iou for r in recent])),
                )
        return report


def demo_buffer_from_transitions(transitions: list[Transition], capacity: int) -> ReplayBuffer:
    """Demonstration pool grouped per episode by shape fingerprint."""
    buf = ReplayBuffer(BufferKind.DEMO, capacity)
    for ep in split_episodes(transitions):
        buf.extend(ep, group=shape_fingerprint(ep[0].state))
    return buf


# ---------------------------------------------------------------------------
# key=value config files


def parse_config_text(text: str) -> dict[str, object]:
    """Flat ``key = value`` lines; '#' starts a comment.  Values become int,
    float, or bool when they parse as one."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if value.lower() in ("true", "false"):
            out[key] = value.lower() == "true"
            continue
        for cast in (int, float):
            try:
                out[key] = cast(value)
                break
            except ValueError:
                continue
        else:
            out[key] = value
    return out


def load_config_file(path) -> dict[str, object]:
    return parse_config_text(Path(path).read_text())
