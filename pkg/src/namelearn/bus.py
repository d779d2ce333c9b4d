"""Structured message passing between the four cooperating agents.

One bus per training session, single-threaded within a round.  Messages carry
feature tensors, strategy tags, or string metadata; delivery is FIFO per
(sender, receiver) pair.  Every send is appended to an immutable log whose
value snapshots support deterministic replay of agent-memory trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Protocol, runtime_checkable

import numpy as np

from .autodiff import Tensor


class AgentId(Enum):
    IMAGE = "Image"
    TEXT = "Text"
    NAME = "Name"
    COORDINATOR = "Coordinator"


ROUND_ORDER = (AgentId.IMAGE, AgentId.NAME, AgentId.TEXT, AgentId.COORDINATOR)


class SelfSendError(ValueError):
    """An agent addressed a message to itself."""


class UnregisteredAgentError(RuntimeError):
    """run_round needs all four agents registered."""


class MailboxError(TypeError):
    """An agent received content it has no schema for; names the message."""


class EmptyBatchError(ValueError):
    """A round was started on a zero-sample batch."""


class ProtocolError(RuntimeError):
    """A round ended with undelivered messages."""


@dataclass(frozen=True)
class FeatureBlock:
    """A tensor payload plus a semantic label (e.g. 'visual_context')."""

    tensor: Tensor
    label: str

    @property
    def feature_dim(self) -> int:
        return self.tensor.shape[-1]


@dataclass(frozen=True)
class StrategyTag:
    name: str


@dataclass(frozen=True)
class Metadata:
    entries: dict


Content = FeatureBlock | StrategyTag | Metadata


def content_tag(content: Content) -> str:
    if isinstance(content, FeatureBlock):
        return "feature"
    if isinstance(content, StrategyTag):
        return "strategy"
    if isinstance(content, Metadata):
        return "metadata"
    raise MailboxError(f"unknown content type {type(content).__name__}")


@dataclass(frozen=True)
class Message:
    sender: AgentId
    receiver: AgentId
    content: Content

    def __post_init__(self):
        if self.sender == self.receiver:
            raise SelfSendError(f"{self.sender.value} cannot message itself")


@dataclass(frozen=True)
class AgentMemory:
    """State carried by an agent across rounds."""

    context_vector: np.ndarray | None = None
    difficulty_ema: float = 0.5
    step_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.difficulty_ema <= 1.0:
            raise ValueError(f"difficulty_ema {self.difficulty_ema} outside [0, 1]")
        if self.step_count < 0:
            raise ValueError("step_count must be nonnegative")


def update_ema(ema: float, difficulty: float) -> float:
    """Shared memory-update rule: slow exponential average of batch difficulty."""
    return 0.9 * ema + 0.1 * difficulty


@dataclass(frozen=True)
class LogRecord:
    """One delivered message, with a value snapshot for replay."""

    round_index: int
    sender: AgentId
    receiver: AgentId
    tag: str
    label: str | None = None
    values: np.ndarray | None = None
    metadata: dict | None = None
    strategy: str | None = None

    def summary(self) -> dict:
        if self.tag == "feature":
            flat = self.values.reshape(-1)
            payload = {
                "shape": list(self.values.shape),
                "first": [float(v) for v in flat[:4]],
            }
        elif self.tag == "strategy":
            payload = {"tag": self.strategy}
        else:
            payload = {"keys": sorted(self.metadata)}
        return {
            "round": self.round_index,
            "sender": self.sender.value,
            "receiver": self.receiver.value,
            "content_tag": self.tag,
            "payload_summary": payload,
        }


@runtime_checkable
class Agent(Protocol):
    agent_id: AgentId

    def open_round(self, memory: AgentMemory) -> list[Message]:
        ...

    def step(self, messages: list[Message], batch, memory: AgentMemory):
        ...


class MessageBus:
    """FIFO mailboxes, registration, delivery accounting, and the log."""

    def __init__(self):
        self.mailboxes: dict[AgentId, list[Message]] = {a: [] for a in AgentId}
        self.agents: dict[AgentId, Agent] = {}
        self.memories: dict[AgentId, AgentMemory] = {}
        self.log: list[LogRecord] = []
        self.round_index = 0
        self.sent_count = 0
        self.drained_count = 0

    def register(self, agent: Agent, memory: AgentMemory | None = None) -> None:
        self.agents[agent.agent_id] = agent
        self.memories[agent.agent_id] = memory or AgentMemory()

    def send(self, msg: Message) -> None:
        if msg.sender == msg.receiver:
            raise SelfSendError(f"{msg.sender.value} cannot message itself")
        self.mailboxes[msg.receiver].append(msg)
        self.sent_count += 1
        self.log.append(self._record(msg))

    def drain(self, agent_id: AgentId) -> list[Message]:
        out = self.mailboxes[agent_id]
        self.mailboxes[agent_id] = []
        self.drained_count += len(out)
        return out

    def _record(self, msg: Message) -> LogRecord:
        c = msg.content
        tag = content_tag(c)
        return LogRecord(
            round_index=self.round_index,
            sender=msg.sender,
            receiver=msg.receiver,
            tag=tag,
            label=c.label if tag == "feature" else None,
            values=c.tensor.data.copy() if tag == "feature" else None,
            metadata=dict(c.entries) if tag == "metadata" else None,
            strategy=c.name if tag == "strategy" else None,
        )

    def serialize_log(self, path) -> None:
        """Line-delimited JSON: one record per delivered message."""
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec.summary(), sort_keys=True) + "\n")


@dataclass
class RoundResult:
    outputs: dict[AgentId, list[Message]]
    coordinator_round: object | None  # set by the coordinator agent when training


def run_round(bus: MessageBus, batch) -> RoundResult:
    """One fixed-schedule round: Image, Name, Text, then Coordinator.

    The coordinator's strategy directives go out before the first step; every
    mailbox must be empty when the round ends.
    """
    missing = [a.value for a in AgentId if a not in bus.agents]
    if missing:
        raise UnregisteredAgentError(f"agents not registered: {missing}")
    if batch.size == 0:
        raise EmptyBatchError("round started on an empty batch")
    bus.round_index += 1
    coordinator = bus.agents[AgentId.COORDINATOR]
    for msg in coordinator.open_round(bus.memories[AgentId.COORDINATOR]):
        bus.send(msg)
    outputs: dict[AgentId, list[Message]] = {}
    for agent_id in ROUND_ORDER:
        agent = bus.agents[agent_id]
        inbox = bus.drain(agent_id)
        out, memory = agent.step(inbox, batch, bus.memories[agent_id])
        if memory.step_count != bus.memories[agent_id].step_count + 1:
            raise ProtocolError(f"{agent_id.value} did not advance step_count by 1")
        bus.memories[agent_id] = memory
        outputs[agent_id] = out
        for msg in out:
            bus.send(msg)
    stuck = {a.value: len(m) for a, m in bus.mailboxes.items() if m}
    if stuck:
        raise ProtocolError(f"mailboxes not empty at round end: {stuck}")
    return RoundResult(outputs, getattr(coordinator, "last_round", None))


def replay_memory_trajectories(
    log: list[LogRecord], initial: dict[AgentId, AgentMemory]
) -> dict[AgentId, list[AgentMemory]]:
    """Reconstruct every agent's memory trajectory from a message log.

    Applies the documented update rules: the text agent's context vector is
    the last visual-context block it received in a round; the image agent's
    difficulty average follows the difficulty it reported to the coordinator;
    step counts advance once per round.
    """
    rounds = sorted({rec.round_index for rec in log})
    current = dict(initial)
    trajectories: dict[AgentId, list[AgentMemory]] = {a: [] for a in AgentId}
    for r in rounds:
        records = [rec for rec in log if rec.round_index == r]
        context = None
        difficulty = None
        for rec in records:
            if (
                rec.tag == "feature"
                and rec.sender == AgentId.IMAGE
                and rec.receiver == AgentId.TEXT
                and rec.label == "visual_context"
            ):
                context = rec.values
            if (
                rec.tag == "metadata"
                and rec.sender == AgentId.IMAGE
                and rec.receiver == AgentId.COORDINATOR
                and "difficulty" in rec.metadata
            ):
                difficulty = float(rec.metadata["difficulty"])
        for agent_id in ROUND_ORDER:
            mem = current[agent_id]
            if agent_id == AgentId.IMAGE and difficulty is not None:
                mem = replace(
                    mem,
                    difficulty_ema=update_ema(mem.difficulty_ema, difficulty),
                    step_count=mem.step_count + 1,
                )
            elif agent_id == AgentId.TEXT and context is not None:
                mem = replace(
                    mem, context_vector=context.copy(), step_count=mem.step_count + 1
                )
            else:
                mem = replace(mem, step_count=mem.step_count + 1)
            current[agent_id] = mem
            trajectories[agent_id].append(mem)
    return trajectories
