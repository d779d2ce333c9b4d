"""One training session: four agents, a bus, an optimizer, and a world.

The session owns everything learnable (name embeddings, context fusion,
difficulty estimator, coordinator scalars and head), builds per-epoch batches
of image-prompt pairs with template rotation, runs fixed-schedule bus rounds
under a gradient tape, and evaluates by cosine retrieval against per-class
text features.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tape, Tensor, backward
from .bus import (
    AgentId,
    AgentMemory,
    FeatureBlock,
    MailboxError,
    Message,
    MessageBus,
    Metadata,
    StrategyTag,
    run_round,
)
from .coordinator import (
    TAU_BAND,
    Adam,
    CoordinatorConfig,
    CoordinatorParams,
    LossBreakdown,
    total_loss,
)
from .image_agent import ImageAgent, ImageAgentConfig
from .name_agent import NameAgent, NameEmbeddingTable, context_exchange_augment, init_name_embeddings
from .text_agent import TextAgent, TextAgentConfig
from .world import World


class TrainingDivergedError(RuntimeError):
    """The loss left the finite range; the cell should be marked failed."""


@dataclass(frozen=True)
class SessionSettings:
    alpha: float = 0.1
    difficulty_threshold: float = 0.5
    difficulty_mode: str = "batch_mean"
    difficulty_hidden_dim: int | None = None
    lambda_mix: float = 0.7
    text_hidden_dim: int | None = None
    learnable_lambda: bool = False
    context_gradient: bool = False
    n_name_vectors: int = 1
    name_init: str = "vocab_mean"
    exchange_k: int = 2
    exchange_weight: float = 1.0
    literal_tau_cancellation: bool = False
    contextual_eval: bool = True
    disable_image_agent_robust: bool = False
    disable_text_context: bool = False
    disable_name_agent: bool = False
    disable_coordinator_dynamics: bool = False
    disable_context_exchange: bool = False
    simple_concat_fusion: bool = False
    disable_difficulty: bool = False
    disable_dynamic_balancing: bool = False


@dataclass
class Batch:
    """One full-batch training round: image-prompt pairs plus the plan
    mapping each pair to its rendered prompt."""

    images: np.ndarray  # (N, P)
    concept_ids: np.ndarray  # (N,) world concept ids
    class_labels: np.ndarray  # (N,) classification-head indices
    prompt_plan: list[tuple[int, str]]  # per pair: (concept_id, template_id)
    training: bool = True

    @property
    def size(self) -> int:
        return len(self.images)

    @property
    def match_index(self) -> np.ndarray:
        return np.arange(self.size)

    @property
    def distinct_prompts(self) -> list[tuple[int, str]]:
        seen: dict[tuple[int, str], None] = {}
        for key in self.prompt_plan:
            seen.setdefault(key)
        return list(seen)


@dataclass
class CoordinatorRound:
    """What the coordinator collected and computed in one round."""

    image_features: Tensor
    text_features: dict[tuple[int, str], Tensor]
    difficulty: float
    strategy: str
    total: Tensor | None
    breakdown: LossBreakdown | None


class CoordinatorAgent:
    agent_id = AgentId.COORDINATOR

    def __init__(self, params: CoordinatorParams, config: CoordinatorConfig):
        self.params = params
        self.config = config
        self.last_round: CoordinatorRound | None = None

    def open_round(self, memory: AgentMemory) -> list[Message]:
        if self.config.dynamic_temperature:
            tau = float(np.clip(self.params.tau_param.data, *TAU_BAND))
        else:
            tau = 1.0
        directives = Metadata(
            {
                "tau": repr(tau),
                "w_con": repr(float(self.params.w_con_param.data)),
                "w_cls": repr(float(self.params.w_cls_param.data)),
            }
        )
        return [
            Message(AgentId.COORDINATOR, target, directives)
            for target in (AgentId.IMAGE, AgentId.NAME, AgentId.TEXT)
        ]

    def step(self, messages, batch: Batch, memory: AgentMemory):
        image_features: Tensor | None = None
        text_features: dict[tuple[int, str], Tensor] = {}
        difficulty = 0.5
        strategy = "standard"
        for msg in messages:
            c = msg.content
            if isinstance(c, StrategyTag):
                strategy = c.name
            elif isinstance(c, Metadata):
                if "difficulty" in c.entries:
                    difficulty = float(c.entries["difficulty"])
            elif isinstance(c, FeatureBlock) and c.label == "image_features":
                image_features = c.tensor
            elif isinstance(c, FeatureBlock) and c.label.startswith("text|"):
                _, cid, tid, _ = c.label.split("|")
                text_features[(int(cid), tid)] = c.tensor
            else:
                raise MailboxError(f"coordinator cannot handle {msg}")
        if image_features is None:
            raise MailboxError("coordinator round ended without image features")
        total = None
        breakdown = None
        if batch.training:
            from . import autodiff as ad

            txt_rows = ad.stack_rows([text_features[key] for key in batch.prompt_plan])
            total, breakdown = total_loss(
                image_features,
                txt_rows,
                batch.match_index,
                batch.class_labels,
                self.params,
                self.config,
            )
        self.last_round = CoordinatorRound(
            image_features, text_features, difficulty, strategy, total, breakdown
        )
        return [], replace(memory, step_count=memory.step_count + 1)


@dataclass
class StepRecord:
    step: int
    breakdown: LossBreakdown
    lr: float


class TrainingSession:
    """Owns the agents, their learnables, and the train/evaluate loops."""

    def __init__(self, world: World, settings: SessionSettings = SessionSettings(), seed: int = 0):
        self.world = world
        self.settings = settings
        self.seed = seed
        ss = np.random.SeedSequence([seed, world.config.seed, 0xA6E57])
        name_rng, difficulty_rng, fusion_rng, exchange_ss = ss.spawn(4)

        self.table = NameEmbeddingTable(world.config.embed_dim)
        if not settings.disable_name_agent:
            rng = np.random.default_rng(name_rng)
            for cid in world.ood_ids:
                init_name_embeddings(
                    self.table,
                    world.concept(cid),
                    settings.n_name_vectors,
                    settings.name_init,
                    world.vocab,
                    world.oov_token,
                    rng,
                )

        self.image_agent = ImageAgent(
            world.gen_map,
            ImageAgentConfig(
                alpha=settings.alpha,
                difficulty_threshold=settings.difficulty_threshold,
                difficulty_hidden_dim=settings.difficulty_hidden_dim,
                difficulty_mode=settings.difficulty_mode,
                disable_robust=settings.disable_image_agent_robust,
                disable_difficulty=settings.disable_difficulty,
            ),
            np.random.default_rng(difficulty_rng),
        )
        self.text_agent = TextAgent(
            world.vocab,
            (world.mixer_in, world.mixer_in_bias, world.mixer_out, world.mixer_out_bias),
            TextAgentConfig(
                lambda_mix=settings.lambda_mix,
                hidden_dim=settings.text_hidden_dim,
                fusion="linear" if settings.simple_concat_fusion else "two_layer",
                learnable_lambda=settings.learnable_lambda,
                context_gradient=settings.context_gradient,
                disable_context=settings.disable_text_context,
            ),
            np.random.default_rng(fusion_rng),
        )
        self.name_agent = NameAgent(
            {c.id: c for c in world.concepts},
            world.templates,
            world.canonical_template,
            self.table,
            world.vocab,
            frozen_names=settings.disable_name_agent,
        )
        self.coordinator_params = CoordinatorParams(
            world.config.embed_dim, len(world.ood_ids)
        )
        self.coordinator_config = CoordinatorConfig(
            dynamic_temperature=not settings.disable_coordinator_dynamics,
            dynamic_balancing=not (
                settings.disable_coordinator_dynamics or settings.disable_dynamic_balancing
            ),
            literal_tau_cancellation=settings.literal_tau_cancellation,
        )
        self.coordinator = CoordinatorAgent(self.coordinator_params, self.coordinator_config)

        self.bus = MessageBus()
        for agent in (self.image_agent, self.name_agent, self.text_agent, self.coordinator):
            self.bus.register(agent)

        self.ood_index = {cid: i for i, cid in enumerate(world.ood_ids)}
        self.prompt_pools = self._build_prompt_pools(exchange_ss)
        self.step_records: list[StepRecord] = []

    # -- setup ----------------------------------------------------------------

    def _build_prompt_pools(self, exchange_ss) -> dict[int, list[str]]:
        """Per-concept rotation of template ids: one native plus K exchanged,
        exchanged entries repeated per the configured weight."""
        k = 0 if self.settings.disable_context_exchange else self.settings.exchange_k
        repeats = max(0, int(round(self.settings.exchange_weight)))
        exchange_seed = int(exchange_ss.generate_state(1)[0])
        pools: dict[int, list[str]] = {}
        for cid in self.world.ood_ids:
            aug = context_exchange_augment(
                self.world.concept(cid),
                self.world.templates,
                k,
                seed=exchange_seed,
                table=None if self.settings.disable_name_agent else self.table,
                frozen_names=self.settings.disable_name_agent,
            )
            pool = [tid for tid, _, origin in aug.entries if origin == "native"]
            for tid, _, origin in aug.entries:
                if origin == "exchanged":
                    pool += [tid] * repeats
            pools[cid] = pool
        return pools

    def trainable_parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if not self.settings.disable_name_agent:
            params += self.table.parameters()
        if not self.settings.disable_text_context:
            params += self.text_agent.parameters()
        if not self.settings.disable_difficulty:
            params += self.image_agent.estimator.parameters()
        params += self.coordinator_params.parameters(self.coordinator_config)
        return params

    # -- training ----------------------------------------------------------------

    def build_batch(self, shots_by_class: dict[int, np.ndarray], epoch: int) -> Batch:
        images, concept_ids, labels, plan = [], [], [], []
        for cid in sorted(shots_by_class):
            pool = self.prompt_pools[cid]
            for j, image in enumerate(shots_by_class[cid]):
                images.append(image)
                concept_ids.append(cid)
                labels.append(self.ood_index[cid])
                plan.append((cid, pool[(j + epoch) % len(pool)]))
        return Batch(
            images=np.stack(images),
            concept_ids=np.asarray(concept_ids),
            class_labels=np.asarray(labels),
            prompt_plan=plan,
        )

    def train_step(self, batch: Batch, optimizer: Adam, lr: float) -> LossBreakdown:
        with Tape() as tape:
            result = run_round(self.bus, batch)
        round_info = result.coordinator_round
        total = round_info.total
        if not np.isfinite(total.data):
            raise TrainingDivergedError(f"loss became {float(total.data)!r}")
        backward(tape, total)
        optimizer.step()
        optimizer.zero_grad()
        record = StepRecord(len(self.step_records) + 1, round_info.breakdown, lr)
        self.step_records.append(record)
        return round_info.breakdown

    def train(
        self, shots_by_class: dict[int, np.ndarray], epochs: int, lr: float
    ) -> list[LossBreakdown]:
        optimizer = Adam(self.trainable_parameters(), lr)
        history = []
        for epoch in range(epochs):
            batch = self.build_batch(shots_by_class, epoch)
            history.append(self.train_step(batch, optimizer, lr))
        return history

    def training_token_audit(self) -> set[int]:
        """Every frozen vocabulary id embedded by renderings so far."""
        ids: set[int] = set()
        for rendered in self.name_agent.render_log:
            ids.update(rendered.frozen_token_ids)
        return ids

    def write_step_log(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,l_con,l_cls,w_con,w_cls,tau,total,lr\n")
            for rec in self.step_records:
                b = rec.breakdown
                fh.write(
                    f"{rec.step},{b.l_con:.9g},{b.l_cls:.9g},{b.w_con:.9g},"
                    f"{b.w_cls:.9g},{b.tau:.9g},{b.total:.9g},{rec.lr:.9g}\n"
                )

    # -- evaluation ----------------------------------------------------------------

    def _eval_image_features(self, images: np.ndarray) -> np.ndarray:
        """Mirror the image agent's routing, in plain value mode."""
        feats = self.world.encode_images(images)
        cfg = self.image_agent.config
        if cfg.disable_robust:
            return feats
        if cfg.disable_difficulty:
            difficulty = 0.5
        else:
            d = self.image_agent.estimate_difficulty(Tensor(feats))
            difficulty = float(d.data.mean())
        if difficulty < cfg.difficulty_threshold:
            return feats
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / norms + cfg.alpha * feats

    def class_text_features(
        self, class_ids: list[int], context: np.ndarray | None
    ) -> np.ndarray:
        """Per-class text features from the canonical prompt, with the trained
        name embeddings and (when enabled) context fusion applied."""
        use_context = (
            context is not None
            and self.settings.contextual_eval
            and not self.settings.disable_text_context
            and self.settings.lambda_mix < 1.0
        )
        rows = []
        for cid in class_ids:
            rendered = self.name_agent.render(
                cid, self.world.canonical_template.template_id
            )
            standard = self.text_agent.encode_matrix(self.name_agent.embed(rendered))
            if use_context:
                feature = self.text_agent.contextual_from_standard(
                    standard, Tensor(context)
                )
            else:
                feature = standard
            rows.append(feature.data)
        return np.stack(rows)

    def evaluate(
        self, images: np.ndarray, labels: np.ndarray, class_ids: list[int]
    ) -> dict[str, float]:
        """Cosine-retrieval accuracy over a label space, reported per split."""
        feats = self._eval_image_features(images)
        context = feats.mean(axis=0)
        text = self.class_text_features(class_ids, context)
        fn = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        tn = text / np.linalg.norm(text, axis=1, keepdims=True)
        pred = np.asarray(class_ids)[np.argmax(fn @ tn.T, axis=1)]
        correct = pred == labels
        split_of = {c.id: c.split for c in self.world.concepts}
        is_seen = np.asarray([split_of[int(y)] == "seen" for y in labels])
        out = {"overall": float(np.mean(correct))}
        if np.any(is_seen):
            out["seen"] = float(np.mean(correct[is_seen]))
        if np.any(~is_seen):
            out["ood"] = float(np.mean(correct[~is_seen]))
        return out
