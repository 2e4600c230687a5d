"""Adam optimisation, the training loop, and split evaluation.

Everything downstream of a (seed, config) pair is deterministic: parameter
init, shuffling, gate noise, and therefore the whole loss trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .bleu import corpus_bleu
from .data import Dataset, Example, random_image_for
from .errors import ConfigError, TrainingError
from .gumbel import GateMode, NoiseSource
from .model import MMTModel

# stream tags for the per-purpose RNGs derived from the training seed
_NOISE_STREAM = 1
_SHUFFLE_STREAM = 2


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    batch_size: int = 16
    epochs: int = 4
    clip_norm: float = 1.0          # <= 0 disables clipping
    tau: float = 1.0
    tau_end: float = 1.0            # linear per-step anneal from tau to tau_end
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in (0,1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.tau <= 0 or self.tau_end <= 0:
            raise ConfigError("temperatures must be positive")

    def tau_at(self, step: int, total_steps: int) -> float:
        if total_steps <= 1:
            return self.tau
        frac = min(step / (total_steps - 1), 1.0)
        return self.tau + (self.tau_end - self.tau) * frac


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def global_grad_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        total += float((p.tensor.grad ** 2).sum())
    return float(np.sqrt(total))


def adam_step(params: list[Parameter], state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place, after global-norm clipping.

    Aborts on any non-finite gradient, naming the offending parameter.
    """
    for p in params:
        if not np.isfinite(p.tensor.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    clip = 1.0
    if cfg.clip_norm > 0:
        norm = global_grad_norm(params)
        if norm > cfg.clip_norm:
            clip = cfg.clip_norm / norm
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for p in params:
        g = p.tensor.grad * clip
        m = state.m.setdefault(p.name, np.zeros_like(g))
        v = state.v.setdefault(p.name, np.zeros_like(g))
        m += (1.0 - cfg.beta1) * (g - m)
        v += (1.0 - cfg.beta2) * (g * g - v)
        p.tensor.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass
class Metrics:
    bleu: float
    token_accuracy: float
    ambiguous_token_accuracy: float | None
    mean_gate_open_rate: float | None
    relevant_open_rate: float | None = None
    noise_open_rate: float | None = None


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_bleu: float
    val_amb_acc: float | None
    gate_open_rate: float | None
    alpha_eff: float
    mean_train_gate: float | None


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def _image_for(model: MMTModel, ex: Example, seed: int) -> np.ndarray | None:
    cfg = model.cfg
    if cfg.ablation.text_only:
        return None
    if cfg.ablation.random_image:
        return random_image_for(ex, seed, cfg.n_regions, cfg.d_image)
    return ex.image


def teacher_forced_loss(model: MMTModel, split: list[Example], seed: int) -> float:
    """Mean deterministic (infer-mode gates) loss over a split."""
    total = 0.0
    with ad.no_grad():
        for ex in split:
            loss, _ = model.loss(ex.src_ids, ex.tgt_ids, _image_for(model, ex, seed),
                                 None, GateMode.infer(model.cfg.gate_threshold))
            total += loss.item()
    return total / len(split)


def evaluate(model: MMTModel, split: list[Example], seed: int = 0,
             max_len: int | None = None) -> Metrics:
    """Greedy-decode every example with thresholded gates and aggregate
    BLEU, token accuracy, ambiguous-token accuracy, and gate open rates."""
    if not split:
        raise ConfigError("evaluate on empty split")
    if max_len is None:
        max_len = max(len(ex.tgt_ids) for ex in split) + 2
    hyps, refs = [], []
    amb_total = amb_correct = 0
    tok_accs = []
    gate_open = gate_count = 0.0
    rel_open = rel_count = noise_open = noise_count = 0.0
    for ex in split:
        decoded, enc = model.greedy_decode(ex.src_ids, _image_for(model, ex, seed), max_len)
        ref = ex.tgt_ids[1:-1]
        hyps.append(decoded)
        refs.append(ref)
        matches = sum(1 for i in range(min(len(decoded), len(ref))) if decoded[i] == ref[i])
        tok_accs.append(matches / len(ref) if ref else 1.0)
        if ex.meta.amb_tgt_pos >= 0:
            amb_total += 1
            pos = ex.meta.amb_tgt_pos
            if pos < len(decoded) and decoded[pos] == ref[pos]:
                amb_correct += 1
        if enc.gates:
            for gm in enc.gates:
                a = gm.alpha.data
                gate_open += a.sum()
                gate_count += a.size
                if ex.meta.relevant_regions:
                    mask = np.zeros(a.shape[1], dtype=bool)
                    mask[ex.meta.relevant_regions] = True
                    rel_open += a[:, mask].sum()
                    rel_count += a[:, mask].size
                    noise_open += a[:, ~mask].sum()
                    noise_count += a[:, ~mask].size
    return Metrics(
        bleu=corpus_bleu(hyps, refs),
        token_accuracy=float(np.mean(tok_accs)),
        ambiguous_token_accuracy=amb_correct / amb_total if amb_total else None,
        mean_gate_open_rate=gate_open / gate_count if gate_count else None,
        relevant_open_rate=rel_open / rel_count if rel_count else None,
        noise_open_rate=noise_open / noise_count if noise_count else None,
    )


def train(model: MMTModel, dataset: Dataset, cfg: TrainConfig, *,
          start_epoch: int = 0, adam_state: AdamState | None = None,
          noise: NoiseSource | None = None,
          on_epoch_end: Callable[[int, EpochStats, AdamState, NoiseSource], None] | None = None,
          ) -> TrainLog:
    """Seeded epoch loop: shuffle, accumulate batch gradients example by
    example, clip, Adam step.  Gates are stochastic (fresh noise per forward
    pass); validation metrics use deterministic thresholded gates."""
    if not dataset.train:
        raise TrainingError("training split is empty")
    params = model.named_parameters()
    state = adam_state if adam_state is not None else AdamState()
    src = noise if noise is not None else NoiseSource([cfg.seed, _NOISE_STREAM])
    log = TrainLog()
    n = len(dataset.train)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    best_bleu = -1.0

    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, _SHUFFLE_STREAM, epoch]).permutation(n)
        epoch_losses = []
        gate_means = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size: (b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            step = epoch * steps_per_epoch + b
            tau = cfg.tau_at(step, total_steps)
            ad.zero_grads(params)
            batch_loss = 0.0
            for i in idx:
                ex = dataset.train[int(i)]
                ad.reset_tape()
                loss, enc = model.loss(ex.src_ids, ex.tgt_ids, _image_for(model, ex, cfg.seed),
                                       src, GateMode.train(), tau)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at step {step}")
                ad.backward(loss)
                batch_loss += value
                mg = enc.mean_gate()
                if mg is not None:
                    gate_means.append(mg)
            ad.reset_tape()
            inv = 1.0 / idx.size
            for p in params:
                p.tensor.grad *= inv
            adam_step(params, state, cfg)
            epoch_losses.append(batch_loss * inv)
            log.step_losses.append(batch_loss * inv)

        val = evaluate(model, dataset.val, seed=cfg.seed)
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            val_loss=teacher_forced_loss(model, dataset.val, cfg.seed),
            val_bleu=val.bleu,
            val_amb_acc=val.ambiguous_token_accuracy,
            gate_open_rate=val.mean_gate_open_rate,
            alpha_eff=model.alpha_eff(),
            mean_train_gate=float(np.mean(gate_means)) if gate_means else None,
        )
        log.epochs.append(stats)
        if val.bleu > best_bleu:
            best_bleu = val.bleu
            log.best_epoch = epoch
        if on_epoch_end is not None:
            on_epoch_end(epoch, stats, state, src)
    return log
