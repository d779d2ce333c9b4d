"""Multi-strategy visual processing.

Two encoding strategies over the frozen visual encoder — plain features, or
unit-normalized features plus a small gradient-blocked residual copy — routed
by a learnable difficulty score estimated from the batch feature
distribution.  Emits the batch features to the coordinator and a pooled
visual context vector to the text agent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .bus import (
    AgentId,
    AgentMemory,
    FeatureBlock,
    MailboxError,
    Message,
    Metadata,
    StrategyTag,
    update_ema,
)

STANDARD = "standard"
ROBUST = "robust"


@dataclass(frozen=True)
class ImageAgentConfig:
    alpha: float = 0.1  # residual coefficient in the robust encoding
    difficulty_threshold: float = 0.5
    difficulty_hidden_dim: int | None = None  # defaults to embed_dim // 2
    difficulty_mode: str = "batch_mean"  # or "per_sample"
    disable_robust: bool = False  # ablation: never route to the robust path
    disable_difficulty: bool = False  # ablation: skip estimation entirely

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not 0.0 < self.difficulty_threshold < 1.0:
            raise ValueError(f"threshold {self.difficulty_threshold} outside (0, 1)")
        if self.difficulty_mode not in ("batch_mean", "per_sample"):
            raise ValueError(f"unknown difficulty_mode {self.difficulty_mode!r}")


class DifficultyEstimator:
    """Two-layer sigmoid scorer of batch (or per-sample) processing difficulty."""

    def __init__(self, embed_dim: int, hidden_dim: int, rng: np.random.Generator):
        half_width = 1.0 / np.sqrt(embed_dim)
        u = lambda shape: rng.uniform(-half_width, half_width, size=shape)
        self.w1 = Tensor(u((embed_dim, hidden_dim)), requires_grad=True, name="difficulty.w1")
        self.b1 = Tensor(u(hidden_dim), requires_grad=True, name="difficulty.b1")
        self.w2 = Tensor(u((hidden_dim, 1)), requires_grad=True, name="difficulty.w2")
        self.b2 = Tensor(u(1), requires_grad=True, name="difficulty.b2")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def estimate(self, features: Tensor, mode: str = "batch_mean") -> Tensor:
        """Difficulty in (0, 1): one scalar for the batch-mean feature, or one
        value per sample when applied row-wise."""
        if mode == "batch_mean":
            m = ad.mean_rows(features)
            h = ad.relu(ad.add(ad.matmul(m, self.w1), self.b1))
            return ad.sigmoid(ad.add(ad.matmul(h, self.w2), self.b2))
        if mode == "per_sample":
            h = ad.relu(ad.add(ad.matmul(features, self.w1), self.b1))
            scores = ad.sigmoid(ad.add(ad.matmul(h, self.w2), self.b2))  # (N, 1)
            n = scores.shape[0]
            return ad.pick_per_row(scores, np.zeros(n, dtype=int))
        raise ValueError(f"unknown difficulty mode {mode!r}")


def select_strategy(difficulty: float, threshold: float) -> str:
    """Route a batch: standard below the threshold, robust at or above it."""
    if not 0.0 < difficulty < 1.0:
        raise ValueError(f"difficulty {difficulty} outside (0, 1)")
    return STANDARD if difficulty < threshold else ROBUST


class ImageAgent:
    agent_id = AgentId.IMAGE

    def __init__(
        self,
        frozen_visual: np.ndarray,  # (P, D) encoder matrix
        config: ImageAgentConfig,
        rng: np.random.Generator,
    ):
        self.config = config
        self.frozen_visual = Tensor(frozen_visual, name="frozen_visual")
        d = frozen_visual.shape[1]
        hidden = config.difficulty_hidden_dim or max(1, d // 2)
        self.estimator = DifficultyEstimator(d, hidden, rng)

    # -- encodings ------------------------------------------------------------

    def encode_standard(self, images: Tensor) -> Tensor:
        """Frozen encoder output, unchanged."""
        if images.data.ndim != 2 or images.shape[0] < 1:
            raise ShapeError(f"encode_standard: need a nonempty batch, got {images.shape}")
        if images.shape[1] != self.frozen_visual.shape[0]:
            raise ShapeError(
                f"encode_standard: raw dim {images.shape[1]} != {self.frozen_visual.shape[0]}"
            )
        return ad.matmul(images, self.frozen_visual)

    def encode_robust(self, images: Tensor, alpha: float | None = None) -> Tensor:
        """Unit-normalized features plus a gradient-blocked scaled residual."""
        a = self.config.alpha if alpha is None else alpha
        feats = self.encode_standard(images)
        return ad.add(ad.l2_normalize_rows(feats), ad.scale(ad.detach(feats), a))

    def estimate_difficulty(self, features: Tensor, mode: str | None = None) -> Tensor:
        return self.estimator.estimate(features, mode or self.config.difficulty_mode)

    @staticmethod
    def emit_visual_context(features: Tensor) -> Tensor:
        """Pooled context for the text agent: column-wise mean of the batch."""
        return ad.mean_rows(features)

    # -- round protocol ---------------------------------------------------------

    def open_round(self, memory: AgentMemory) -> list[Message]:
        return []

    def step(self, messages, batch, memory: AgentMemory):
        for msg in messages:
            if not isinstance(msg.content, Metadata):
                raise MailboxError(f"image agent cannot handle {msg}")
        images = Tensor(batch.images)
        standard = self.encode_standard(images)
        if self.config.disable_difficulty:
            difficulty = 0.5  # neutral score when estimation is ablated
        else:
            d = self.estimate_difficulty(standard)
            difficulty = float(d.data.mean())
        if self.config.disable_robust:
            strategy = STANDARD
        else:
            strategy = select_strategy(difficulty, self.config.difficulty_threshold)
        features = standard if strategy == STANDARD else self.encode_robust(images)
        context = self.emit_visual_context(features)
        outputs = [
            Message(AgentId.IMAGE, AgentId.TEXT, FeatureBlock(context, "visual_context")),
            Message(
                AgentId.IMAGE, AgentId.COORDINATOR, FeatureBlock(features, "image_features")
            ),
            Message(
                AgentId.IMAGE,
                AgentId.COORDINATOR,
                Metadata({"difficulty": repr(difficulty), "strategy": strategy}),
            ),
            Message(AgentId.IMAGE, AgentId.COORDINATOR, StrategyTag(strategy)),
        ]
        new_memory = replace(
            memory,
            difficulty_ema=update_ema(memory.difficulty_ema, difficulty),
            step_count=memory.step_count + 1,
        )
        return outputs, new_memory
