"""Masked conditional noise-prediction training.

Each sample draws a step t uniformly from 1..T, Gaussian noise, and a pair of
block masks according to the masking regime; the network sees
``(x_t | m_p * past, m_f * future, t / T)`` and is regressed onto the noise.

All randomness of step ``n`` is derived from ``(seed, n)``, so a run resumed
from a checkpoint replays exactly the same draws as an uninterrupted one.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import CheckpointState, save_checkpoint
from .denoiser import Denoiser, DenoiserConfig
from .masking import MaskingRegime, regime_capabilities, sample_mask_batch
from .schedule import NoiseSchedule, build_schedule, q_sample

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


class DivergenceError(NumericError):
    pass


@dataclass
class TrainConfig:
    p_mask: float = 0.5
    masking_regime: MaskingRegime = MaskingRegime.PAST_FUTURE
    batch_size: int = 8
    steps: int = 5000
    lr: float = 2e-4
    optimizer: str = "adam"
    grad_clip: float = 1.0
    use_ema: bool = True
    ema_decay: float = 0.999
    seed: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 500

    def __post_init__(self):
        self.masking_regime = MaskingRegime(self.masking_regime)
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError("p_mask must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["masking_regime"] = self.masking_regime.value
        return d


@dataclass
class LossDraws:
    t: np.ndarray       # (B,) step indices in 1..T
    eps: torch.Tensor   # same shape as the current block
    masks: np.ndarray   # (B, 2) columns m_p, m_f


def regime_mask_batch(cfg: TrainConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    masks = sample_mask_batch(cfg.p_mask, n, rng)
    if cfg.masking_regime is MaskingRegime.NONE:
        masks[:] = 1
    elif cfg.masking_regime is MaskingRegime.PAST_ONLY:
        masks[:, 1] = 1
    return masks


def draw_loss_inputs(current: torch.Tensor, sched: NoiseSchedule, cfg: TrainConfig,
                     rng: np.random.Generator) -> LossDraws:
    B = current.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = torch.from_numpy(rng.standard_normal(tuple(current.shape))).to(current.dtype)
    return LossDraws(t, eps, regime_mask_batch(cfg, B, rng))


def per_sample_loss(model: nn.Module, batch: dict, draws: LossDraws, sched: NoiseSchedule) -> torch.Tensor:
    x0 = batch["current"]
    xt = q_sample(x0, draws.t, draws.eps, sched)
    shape = (-1, 1, 1, 1, 1)
    m_p = torch.as_tensor(draws.masks[:, 0], dtype=x0.dtype).reshape(shape)
    m_f = torch.as_tensor(draws.masks[:, 1], dtype=x0.dtype).reshape(shape)
    t_level = torch.as_tensor(draws.t / sched.T, dtype=torch.float64)
    pred = model(xt, batch["past"] * m_p, batch["future"] * m_f, t_level)
    return (draws.eps - pred).pow(2).flatten(1).mean(1)


def loss_step(batch: dict, model: nn.Module, sched: NoiseSchedule, cfg: TrainConfig,
              rng: np.random.Generator) -> torch.Tensor:
    """Mean squared noise-prediction error over batch and elements."""
    draws = draw_loss_inputs(batch["current"], sched, cfg, rng)
    losses = per_sample_loss(model, batch, draws, sched)
    bad = (~torch.isfinite(losses)).nonzero()
    if len(bad):
        raise NumericError(f"non-finite loss at batch index {int(bad[0])}")
    return losses.mean()


def to_torch_batch(arrays: dict, dtype=torch.float32) -> dict:
    return {k: torch.as_tensor(np.ascontiguousarray(v)).to(dtype) for k, v in arrays.items()}


def config_fingerprint(*docs: dict) -> str:
    raw = json.dumps(docs, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()


class Trainer:
    """Owns the model, optimizer and EMA copy; the single writer of parameters."""

    def __init__(self, model: Denoiser, sched: NoiseSchedule, cfg: TrainConfig, data: dict,
                 run_config: dict | None = None):
        lay = model.cfg.layout
        if cfg.masking_regime is MaskingRegime.PAST_ONLY and lay.f > 0:
            raise ValueError("the PastOnly regime has no future conditioning; set f = 0")
        self.model, self.sched, self.cfg = model, sched, cfg
        self.data = to_torch_batch(data)
        self.n = self.data["current"].shape[0]
        if self.n < 1:
            raise ValueError("empty training set")
        self.run_config = run_config or {}
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, foreach=False)
        self.ema = OrderedDict((k, v.detach().clone()) for k, v in model.named_parameters())
        self.step = 0
        self.initial_loss: float | None = None
        self._over = 0

    # randomness ---------------------------------------------------------
    def batch_indices(self, step: int) -> np.ndarray:
        """Indices for ``step``: consecutive slices of per-epoch permutations."""
        B, n = self.cfg.batch_size, self.n
        start = step * B
        out = []
        while len(out) < B:
            epoch, offset = divmod(start, n)
            perm = np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(n)
            take = perm[offset:offset + B - len(out)]
            out.extend(take.tolist())
            start += len(take)
        return np.asarray(out)

    def step_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, 0, step])

    # optimization -------------------------------------------------------
    def train_step(self) -> float:
        idx = torch.as_tensor(self.batch_indices(self.step))
        batch = {k: v[idx] for k, v in self.data.items()}
        self.model.train()
        loss = loss_step(batch, self.model, self.sched, self.cfg, self.step_rng(self.step))
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip, foreach=False)
        self.opt.step()
        with torch.no_grad():
            # warm-up keeps early averages from being dominated by the initial weights
            d = min(self.cfg.ema_decay, (1.0 + self.step) / (10.0 + self.step))
            for k, p in self.model.named_parameters():
                self.ema[k].mul_(d).add_(p.detach(), alpha=1.0 - d)
        self.step += 1
        value = float(loss.detach())
        self._watch_divergence(value)
        return value

    def _watch_divergence(self, value: float):
        if self.initial_loss is None:
            self.initial_loss = value
            return
        self._over = self._over + 1 if value > 10.0 * self.initial_loss else 0
        if self._over >= 100:
            raise DivergenceError(
                f"loss {value:.4g} above 10x the initial {self.initial_loss:.4g} for 100 steps (step {self.step})")

    def run(self, steps: int, checkpoint_path=None, callback: Callable[[int, float], None] | None = None) -> list[float]:
        losses = []
        for _ in range(steps):
            value = self.train_step()
            losses.append(value)
            if callback is not None:
                callback(self.step, value)
            if self.cfg.log_interval and self.step % self.cfg.log_interval == 0:
                log.info("step %d loss %.5f", self.step, float(np.mean(losses[-self.cfg.log_interval:])))
            if checkpoint_path and self.cfg.checkpoint_interval and self.step % self.cfg.checkpoint_interval == 0:
                save_checkpoint(checkpoint_path, self.state())
        return losses

    @torch.no_grad()
    def eval_loss(self, batch: dict | None = None, seed: int = 12345) -> float:
        """Loss on fixed draws, for tracking progress independently of training noise."""
        batch = self.data if batch is None else to_torch_batch(batch)
        self.model.eval()
        return float(loss_step(batch, self.model, self.sched, self.cfg, np.random.default_rng(seed)))

    def sampling_model(self) -> Denoiser:
        """The EMA weights when enabled, else the live ones."""
        if not self.cfg.use_ema:
            return self.model
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.ema)
        return m.eval()

    # checkpointing -------------------------------------------------------
    def metadata(self) -> dict:
        mcfg = self.model.cfg
        caps = regime_capabilities(self.cfg.masking_regime, self.cfg.p_mask, mcfg.layout)
        model_doc, train_doc, sched_doc = mcfg.to_dict(), self.cfg.to_dict(), self.sched.to_dict()
        steps = [float(self.opt.state[p]["step"]) if p in self.opt.state else 0.0 for p in self.model.parameters()]
        return {
            "format": "mcvd-checkpoint",
            "model": model_doc,
            "train": train_doc,
            "schedule": sched_doc,
            "run_config": self.run_config,
            "fingerprint": config_fingerprint(model_doc, train_doc, sched_doc),
            "masking_regime": self.cfg.masking_regime.value,
            "capabilities": sorted(c.value for c in caps),
            "rng": {"seed": self.cfg.seed, "counter": self.step},
            "adam_steps": steps,
            "initial_loss": self.initial_loss,
            "divergence_count": self._over,
        }

    def state(self) -> CheckpointState:
        opt = OrderedDict()
        for name, p in self.model.named_parameters():
            st = self.opt.state.get(p)
            if st:
                opt["exp_avg." + name] = st["exp_avg"].detach().clone()
                opt["exp_avg_sq." + name] = st["exp_avg_sq"].detach().clone()
        params = OrderedDict((k, v.detach().clone()) for k, v in self.model.named_parameters())
        ema = OrderedDict((k, v.clone()) for k, v in self.ema.items()) if self.cfg.use_ema else OrderedDict()
        return CheckpointState(self.step, params, self.metadata(), opt, ema)

    @classmethod
    def from_checkpoint(cls, state: CheckpointState, data: dict, cfg: TrainConfig | None = None) -> "Trainer":
        meta = state.metadata
        model = model_from_checkpoint(state, use_ema=False)
        sched = schedule_from_metadata(meta)
        cfg = cfg or TrainConfig(**meta["train"])
        tr = cls(model, sched, cfg, data, meta.get("run_config"))
        tr.step = state.step
        tr.initial_loss = meta.get("initial_loss")
        tr._over = meta.get("divergence_count", 0)
        if state.ema:
            tr.ema = OrderedDict((k, v.clone()) for k, v in state.ema.items())
        for name, p, step in zip(dict(model.named_parameters()), model.parameters(), meta.get("adam_steps", [])):
            if "exp_avg." + name in state.optimizer:
                tr.opt.state[p] = {
                    "step": torch.tensor(step),
                    "exp_avg": state.optimizer["exp_avg." + name].clone(),
                    "exp_avg_sq": state.optimizer["exp_avg_sq." + name].clone(),
                }
        return tr


def schedule_from_metadata(meta: dict) -> NoiseSchedule:
    s = meta["schedule"]
    return build_schedule(s["T"], s["beta_start"], s["beta_end"], s["kind"])


def model_from_checkpoint(state: CheckpointState, use_ema: bool = True) -> Denoiser:
    model = Denoiser(DenoiserConfig.from_dict(state.metadata["model"]))
    weights = state.ema if (use_ema and state.ema) else state.params
    model.load_state_dict(weights)
    return model.eval()


def train(data: dict, cfg: TrainConfig, model_cfg: DenoiserConfig, sched: NoiseSchedule,
          checkpoint_path=None, run_config: dict | None = None) -> CheckpointState:
    """Train from scratch for ``cfg.steps`` steps and return the final state.

    ``data`` maps past/current/future to ``(N, frames, C, H, W)`` arrays.
    """
    trainer = Trainer(Denoiser(model_cfg), sched, cfg, data, run_config)
    trainer.run(cfg.steps, checkpoint_path)
    state = trainer.state()
    if checkpoint_path:
        save_checkpoint(Path(checkpoint_path), state)
    return state


def grad_check(model: nn.Module, batch: dict, sched: NoiseSchedule, cfg: TrainConfig,
               n_coords: int = 256, h: float = 1e-4, seed: int = 0, floor: float = 1e-6,
               details: bool = False):
    """Max relative error between autograd and central finite differences.

    Runs on a float64 copy of ``model`` with one fixed draw of (t, eps,
    masks). Relative error per coordinate is |a - n| / max(|a|, |n|, floor).
    """
    m = copy.deepcopy(model).double()
    b = to_torch_batch(batch, torch.float64)
    rng = np.random.default_rng(seed)
    draws = draw_loss_inputs(b["current"], sched, cfg, rng)

    def loss() -> torch.Tensor:
        return per_sample_loss(m, b, draws, sched).mean()

    params = [p for p in m.parameters() if p.requires_grad]
    analytic = torch.autograd.grad(loss(), params)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    picks = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, n_coords, replace=False))
    offsets = np.cumsum([0] + sizes)

    worst, rows = 0.0, []
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            view = params[i].view(-1)
            orig = view[j].item()
            view[j] = orig + h
            up = loss().item()
            view[j] = orig - h
            down = loss().item()
            view[j] = orig
            num = (up - down) / (2.0 * h)
            ana = analytic[i].view(-1)[j].item()
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            rows.append((i, j, ana, num, rel))
    return (worst, rows) if details else worst


def tiny_denoiser_config(layout, mode="concat", seed: int = 0) -> DenoiserConfig:
    """A U-Net small enough (< 5000 parameters) for exhaustive-ish gradient checks."""
    return DenoiserConfig(layout, mode, base_width=2, channel_multipliers=(1, 2), attention_resolutions=(layout.height // 2,),
                          num_res_blocks=1, embedding_dim=8, groups=2, cond_width=4,
                          zero_init_output=False, seed=seed)
