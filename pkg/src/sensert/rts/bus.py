"""In-process event bus: the shared message-box for all verticles.

There is one bus per server rather than one mailbox per actor; per-subscriber
isolation comes from each subscription's own bounded queue. ``publish`` is a
plain synchronous enqueue and never executes subscriber code inline, so its
cost is independent of how slow any consumer is. Staleness (timeliness) is
enforced at delivery time, when the consumer's bound is known.
"""

from __future__ import annotations

import asyncio
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Literal

from .. import wire


def now_ms() -> int:
    return time.time_ns() // 1_000_000


# Extensible vocabulary for derived events.
EVENT_TYPES: set[str] = {
    "pot-removed",
    "new-pot",
    "pot-poured",
    "pot-empty",
    "coffee-grinding",
    "coffee-level",
    "threshold-crossed",
    "threshold-cleared",
    "deadletter",
    "filer-error",
}


def register_event_type(name: str) -> None:
    EVENT_TYPES.add(name)


@dataclass(frozen=True)
class DerivedEvent:
    event_type: str
    device_id: str
    ts: int  # epoch ms
    attributes: dict[str, Any] = field(default_factory=dict)
    source_verticle: str = ""

    def __post_init__(self):
        if self.event_type not in EVENT_TYPES:
            raise ValueError(f"unregistered event type {self.event_type!r}")
        if self.ts <= 0:
            raise ValueError("event ts must be positive")

    def to_jsonable(self) -> dict[str, Any]:
        return {
            "event_type": self.event_type,
            "device_id": self.device_id,
            "ts": self.ts,
            "attributes": self.attributes,
            "source_verticle": self.source_verticle,
        }


@dataclass(frozen=True)
class BusEnvelope:
    address: str
    body: Any  # NormalizedMessage | DerivedEvent | DeadLetter
    published_at: int  # epoch ms
    seq: int  # strictly increasing per publisher
    publisher: str = "anonymous"
    stale: bool = False


Overflow = Literal["drop_oldest", "drop_newest"]
StaleAction = Literal["drop_counted", "deliver_flagged"]


@dataclass
class SubscriptionPolicy:
    queue_capacity: int = 1024
    overflow: Overflow = "drop_oldest"
    timeliness_bound_s: float | None = None
    stale_action: StaleAction = "drop_counted"

    def __post_init__(self):
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.overflow not in ("drop_oldest", "drop_newest"):
            raise ValueError(f"bad overflow policy {self.overflow!r}")
        if self.stale_action not in ("drop_counted", "deliver_flagged"):
            raise ValueError(f"bad stale action {self.stale_action!r}")


class Subscription:
    """Async message source for one filter; owned by exactly one consumer."""

    def __init__(self, bus: "EventBus", filter_raw: str, policy: SubscriptionPolicy,
                 owner: str = ""):
        self.bus = bus
        self.filter = filter_raw
        self.filter_levels = wire.validate_filter(filter_raw)
        self.policy = policy
        self.owner = owner
        self._q: deque[BusEnvelope] = deque()
        self._wake = asyncio.Event()
        self.matched = 0
        self.delivered = 0
        self.drops = 0
        self.stale_drops = 0
        self.active = True

    # called by the bus, synchronously, on the publisher's task
    def _offer(self, env: BusEnvelope) -> None:
        self.matched += 1
        if len(self._q) >= self.policy.queue_capacity:
            if self.policy.overflow == "drop_oldest":
                self._q.popleft()
                self._q.append(env)
            self.drops += 1
        else:
            self._q.append(env)
        self._wake.set()

    def _apply_timeliness(self, env: BusEnvelope) -> BusEnvelope | None:
        bound = self.policy.timeliness_bound_s
        if bound is not None and (now_ms() - env.published_at) / 1000.0 > bound:
            if self.policy.stale_action == "drop_counted":
                self.stale_drops += 1
                return None
            env = replace(env, stale=True)
        self.delivered += 1
        return env

    async def get(self) -> BusEnvelope:
        while True:
            while not self._q:
                self._wake.clear()
                await self._wake.wait()
            env = self._apply_timeliness(self._q.popleft())
            if env is not None:
                return env

    def get_nowait(self) -> BusEnvelope | None:
        while self._q:
            env = self._apply_timeliness(self._q.popleft())
            if env is not None:
                return env
        return None

    def pending(self) -> int:
        return len(self._q)

    def stats(self) -> dict[str, int]:
        return {
            "matched": self.matched,
            "delivered": self.delivered,
            "drops": self.drops,
            "stale_drops": self.stale_drops,
            "pending": len(self._q),
        }

    def conserved(self) -> bool:
        return self.matched == self.delivered + self.drops + self.stale_drops + len(self._q)


# Observer sees every accepted envelope, synchronously, before fan-out.
PublishObserver = Callable[[BusEnvelope], None]


class EventBus:
    def __init__(self, publish_observer: PublishObserver | None = None):
        self._subs: list[Subscription] = []
        self._seq: dict[str, int] = {}
        self._observer = publish_observer
        self.published = 0

    def publish(self, address: str, body: Any, publisher: str = "anonymous") -> BusEnvelope:
        """Enqueue to every matching subscription; never waits on consumers."""
        addr_levels = wire.validate_topic(address)
        seq = self._seq.get(publisher, 0) + 1
        self._seq[publisher] = seq
        env = BusEnvelope(address=address, body=body, published_at=now_ms(),
                          seq=seq, publisher=publisher)
        self.published += 1
        if self._observer is not None:
            self._observer(env)
        for sub in self._subs:
            if wire.topic_matches(sub.filter_levels, addr_levels):
                sub._offer(env)
        return env

    def subscribe(self, filter_raw: str, policy: SubscriptionPolicy | None = None,
                  owner: str = "") -> Subscription:
        sub = Subscription(self, filter_raw, policy or SubscriptionPolicy(), owner=owner)
        self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.active = False
        try:
            self._subs.remove(sub)
        except ValueError:
            pass

    def subscriptions(self) -> list[Subscription]:
        return list(self._subs)

    def audit(self) -> list[dict]:
        """Per-subscription conservation snapshot."""
        return [
            {"owner": s.owner, "filter": s.filter, **s.stats(), "conserved": s.conserved()}
            for s in self._subs
        ]
