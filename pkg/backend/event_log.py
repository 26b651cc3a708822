"""
Behavior Event Log
Timestamped (user, item, feedback) records stored as JSON lines
"""

import json
import logging
from collections import defaultdict

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import MalformedRecordError
from records import write_text_atomic

logger = logging.getLogger(__name__)

QUALIFYING_PLAYTIME_S = 10.0


class BehaviorEvent(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    user_id: int
    item_id: int
    event_index: int = Field(ge=0)
    playtime_s: float = Field(0.0, ge=0.0)
    finished: bool = False
    interacted: bool = False


def is_qualifying(event):
    """playtime >= 10s, a finish, or any interaction (upvote/share/follow/comment)"""
    return event.finished or event.interacted or event.playtime_s >= QUALIFYING_PLAYTIME_S


def write_event_log(events, path):
    ordered = sorted(events, key=lambda e: (e.event_index, e.user_id))
    text = "".join(e.model_dump_json() + "\n" for e in ordered)
    write_text_atomic(path, text)
    logger.info(f"💾 Saved {len(ordered)} events to {path}")


def read_event_log(path):
    events = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                events.append(BehaviorEvent.model_validate(json.loads(line)))
            except (json.JSONDecodeError, ValidationError) as e:
                raise MalformedRecordError(path, number, f"bad event record: {e}") from None
    logger.info(f"📦 Loaded {len(events)} events from {path}")
    return events


def events_by_user(events):
    """user_id -> events in stream order"""
    grouped = defaultdict(list)
    for event in sorted(events, key=lambda e: e.event_index):
        grouped[event.user_id].append(event)
    return dict(grouped)


def summarize(events):
    users = set()
    qualifying = 0
    for event in events:
        users.add(event.user_id)
        qualifying += is_qualifying(event)
    return {
        "total_events": len(events),
        "users": len(users),
        "qualifying_events": qualifying,
        "last_event_index": max((e.event_index for e in events), default=-1),
    }
