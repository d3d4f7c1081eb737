"""Coffee-pot event detection over weight and plug-power readings.

A deterministic state machine fed one reading at a time. Weight is smoothed
with a median of the last three raw samples. The five recognised events:

* ``coffee-grinding`` -- grinder power rising edge above the threshold,
  sustained for two samples.
* ``new-pot`` -- weight rose at least 1.0 kg above the level captured when
  the brewer switched on, while the brewer was active within the last 600 s.
* ``pot-poured`` -- the settled weight dropped by one-cup magnitude
  (0.15..0.6 kg) while the pot is present.
* ``pot-removed`` -- presence lost for two consecutive samples.
* ``pot-empty`` -- transition into (pot on the scale and weight within
  0.1 kg of the bare pot).

A ``coffee-level`` event carries the fill fraction whenever it moves by at
least 0.05. The step function is pure: replaying a trace reproduces the
exact event list.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace

from ..decoders import NormalizedMessage
from .bus import DerivedEvent


@dataclass(frozen=True)
class CoffeeConfig:
    pot_kg: float = 0.5
    full_coffee_kg: float = 2.0
    presence_kg: float = 0.25
    power_threshold_w: float = 40.0
    pour_min_kg: float = 0.15
    pour_max_kg: float = 0.6
    empty_margin_kg: float = 0.1
    new_pot_rise_kg: float = 1.0
    brew_window_s: float = 600.0
    grind_debounce: int = 2
    absent_debounce: int = 2
    settle_eps_kg: float = 0.05
    level_step: float = 0.05


DEFAULT_CONFIG = CoffeeConfig()


@dataclass(frozen=True)
class CoffeeState:
    raw_weights: tuple[float, ...] = ()
    smoothed: tuple[float, ...] = ()
    present: bool | None = None
    absent_run: int = 0
    grinder_run: int = 0
    grind_latched: bool = False
    brewer_active: bool = False
    brew_baseline_kg: float | None = None
    last_brew_ms: int | None = None
    new_pot_fired: bool = False
    settled_kg: float | None = None
    empty_cond: bool | None = None
    level_emitted: float | None = None


def coffee_step(
    state: CoffeeState,
    msg: NormalizedMessage,
    config: CoffeeConfig = DEFAULT_CONFIG,
    source: str = "rtcoffee",
) -> tuple[CoffeeState, list[DerivedEvent]]:
    """Advance the detector by one reading; non-coffee messages are ignored."""
    if msg.family != "coffee":
        return state, []
    cooked = msg.cooked
    if not all(k in cooked for k in ("weight_kg", "grinder_w", "brewer_w")):
        return state, []

    events: list[DerivedEvent] = []

    def emit(event_type: str, **attributes):
        events.append(DerivedEvent(
            event_type=event_type, device_id=msg.device_id, ts=msg.ts,
            attributes=attributes, source_verticle=source))

    raw3 = (state.raw_weights + (float(cooked["weight_kg"]),))[-3:]
    w = statistics.median(raw3)
    smooth3 = (state.smoothed + (w,))[-3:]

    # grinder rising edge, sustained
    grinder_on = float(cooked["grinder_w"]) > config.power_threshold_w
    grinder_run = state.grinder_run + 1 if grinder_on else 0
    grind_latched = state.grind_latched and grinder_on
    if grinder_run >= config.grind_debounce and not grind_latched:
        emit("coffee-grinding", grinder_w=float(cooked["grinder_w"]))
        grind_latched = True

    # brewer bookkeeping for the new-pot rule
    brewer_active = float(cooked["brewer_w"]) > config.power_threshold_w
    brew_baseline = state.brew_baseline_kg
    new_pot_fired = state.new_pot_fired
    last_brew_ms = state.last_brew_ms
    if brewer_active:
        if not state.brewer_active:
            brew_baseline = w
            new_pot_fired = False
        last_brew_ms = msg.ts

    # presence, with debounce on loss
    present_now = w >= config.presence_kg
    present = state.present
    absent_run = state.absent_run
    settled = state.settled_kg
    if present is None:
        present = present_now
        absent_run = 0
    elif present:
        if present_now:
            absent_run = 0
        else:
            absent_run += 1
            if absent_run >= config.absent_debounce:
                present = False
                absent_run = 0
                settled = None
                emit("pot-removed")
    else:
        if present_now:
            present = True
        absent_run = 0

    # new pot: weight rise vs pre-brew baseline, gated on recent brewing
    if (
        brew_baseline is not None
        and not new_pot_fired
        and last_brew_ms is not None
        and msg.ts - last_brew_ms <= config.brew_window_s * 1000
        and w - brew_baseline >= config.new_pot_rise_kg
    ):
        emit("new-pot", weight_kg=round(w, 3))
        new_pot_fired = True

    # settled-weight tracking and pour detection
    if present and len(smooth3) == 3 and max(smooth3) - min(smooth3) <= config.settle_eps_kg:
        plateau = statistics.fmean(smooth3)
        if settled is None:
            settled = plateau
        else:
            drop = settled - plateau
            if config.pour_min_kg <= drop <= config.pour_max_kg:
                emit("pot-poured", amount_kg=round(drop, 3))
                settled = plateau
            elif abs(drop) >= config.settle_eps_kg:
                settled = plateau

    # empty: transition into (instantaneous presence and near-bare-pot weight)
    cond = present_now and (w - config.pot_kg) <= config.empty_margin_kg
    if state.empty_cond is not None and cond and not state.empty_cond:
        emit("pot-empty")

    # fill level on meaningful change
    level = min(max((w - config.pot_kg) / config.full_coffee_kg, 0.0), 1.0)
    level_emitted = state.level_emitted
    if level_emitted is None or abs(level - level_emitted) >= config.level_step:
        emit("coffee-level", level=round(level, 3))
        level_emitted = level

    new_state = replace(
        state,
        raw_weights=raw3,
        smoothed=smooth3,
        present=present,
        absent_run=absent_run,
        grinder_run=grinder_run,
        grind_latched=grind_latched,
        brewer_active=brewer_active,
        brew_baseline_kg=brew_baseline,
        last_brew_ms=last_brew_ms,
        new_pot_fired=new_pot_fired,
        settled_kg=settled,
        empty_cond=cond,
        level_emitted=level_emitted,
    )
    return new_state, events


COFFEE_EVENT_VOCABULARY = ("coffee-grinding", "new-pot", "pot-poured", "pot-removed", "pot-empty")


def replay(readings, config: CoffeeConfig = DEFAULT_CONFIG) -> list[DerivedEvent]:
    """Run a whole trace through the detector; returns all emitted events."""
    state = CoffeeState()
    out: list[DerivedEvent] = []
    for msg in readings:
        state, events = coffee_step(state, msg, config)
        out.extend(events)
    return out
