"""Real-time server: shared event bus plus stream-processor verticles."""

from .bus import (
    BusEnvelope,
    DerivedEvent,
    EventBus,
    Subscription,
    SubscriptionPolicy,
)
from .coffee import CoffeeConfig, CoffeeState, coffee_step
from .server import RealTimeServer, Verticle

__all__ = [
    "BusEnvelope",
    "CoffeeConfig",
    "CoffeeState",
    "DerivedEvent",
    "EventBus",
    "RealTimeServer",
    "Subscription",
    "SubscriptionPolicy",
    "Verticle",
    "coffee_step",
]
