"""Remote language-model backend for regional coordination.

Prompts are assembled deterministically from the region state, sent over a
chat-completions style HTTP API, and the reply is parsed back into a
``RegionalDecision``. Transcripts of prompt/response pairs can be recorded
and replayed for offline runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence
from urllib.parse import urlparse

import httpx

from ccma.coord import (
    REASONS,
    ActionScores,
    CommMessage,
    MemberDecision,
    Region,
    RegionalDecision,
    rule_oracle_scores,
    decide_from_scores,
)
from ccma.errors import (
    BackendRequestError,
    BackendUnavailable,
    ConfigError,
    DecisionParseError,
    DecisionValidationError,
)
from ccma.reward import DEFAULT_WEIGHTS, RewardWeights
from ccma.sim.observe import dist_to_ramp_end
from ccma.sim.types import ACTIONS, MetaAction, WorldState

log = logging.getLogger(__name__)

ENV_ENDPOINT = "CCMA_LM_ENDPOINT"
ENV_MODEL = "CCMA_LM_MODEL"
ENV_API_KEY = "CCMA_LM_API_KEY"

CALL_BUDGET = 64
BACKOFF_BASE = 0.5
TAU_RANK = 0.25
ACTION_NAMES = tuple(a.name for a in ACTIONS)

ROLE_DESC = (
    "You coordinate connected automated vehicles around a highway on-ramp. "
    "You see every vehicle in one region and choose a meta-action for each."
)
TASK_DESC = (
    "Get the ramp vehicles into the right main lane before the ramp ends without any collision. "
    "Main-lane vehicles may slow down or move left to open a gap."
)
TOOL_DESC = (
    "Actions: LANE_LEFT, IDLE, LANE_RIGHT, FASTER, SLOWER. FASTER and SLOWER change the target speed "
    "by 5 m/s. Lane 0 is the leftmost lane; the ramp is the highest lane index. "
    'Reply with one JSON object: {"region": int, "source": "remote_lm", '
    '"decisions": [{"id": int, "action": str, "reason": str}], '
    '"messages": [{"sender": int, "tick": int, "intent": str, "reason": str, "target": int|null}]}.'
)
STEPS = ("Observation", "Action Analysis", "Critical Thinking")
FEW_SHOT = (
    'Observation: ramp vehicle 0 is in the merge zone; vehicle 5 is 8 m behind it in lane 1.\n'
    'Action Analysis: a merge now would force vehicle 5 to brake hard.\n'
    'Critical Thinking: vehicle 5 can move to lane 0, so it yields left while 0 holds speed.\n'
    '{"region": 0, "source": "remote_lm", "decisions": [{"id": 0, "action": "IDLE", "reason": "wait"}, '
    '{"id": 5, "action": "LANE_LEFT", "reason": "yield"}], "messages": []}',
)


def _dump(obj) -> str:
    """JSON text with every float rendered as 2-decimal fixed point."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return f"{obj:.2f}"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, Mapping):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_dump(v)}" for k, v in obj.items()) + "}"
    return "[" + ",".join(_dump(x) for x in obj) + "]"


@dataclass(frozen=True)
class PromptBundle:
    role_desc: str
    task_desc: str
    tool_desc: str
    observation_json: str
    anomaly_note: Optional[str] = None
    steps: tuple[str, ...] = STEPS
    few_shot: tuple[str, ...] = FEW_SHOT

    def __post_init__(self) -> None:
        if len(self.few_shot) > 2:
            raise ValueError("at most two worked examples")

    def system_text(self) -> str:
        return "\n\n".join((self.role_desc, self.task_desc, self.tool_desc))

    def user_text(self) -> str:
        parts = []
        for i, ex in enumerate(self.few_shot, 1):
            parts.append(f"Example {i}:\n{ex}")
        parts.append("State:\n" + self.observation_json)
        if self.anomaly_note:
            parts.append("Note: " + self.anomaly_note)
        parts.append("Answer in three sections, in order: " + ", ".join(self.steps)
                     + ". Finish with the JSON decision.")
        return "\n\n".join(parts)

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.system_text()},
                {"role": "user", "content": self.user_text()}]

    def key(self) -> str:
        h = hashlib.sha256()
        h.update(self.system_text().encode())
        h.update(b"\0")
        h.update(self.user_text().encode())
        return h.hexdigest()


def build_prompt(region: Region, world: WorldState, inbox: Sequence[CommMessage] = (),
                 anomaly_note: Optional[str] = None) -> PromptBundle:
    vehicles = []
    for vid in sorted(region.member_ids):
        v = world.get(vid)
        if v is None:
            continue
        d = dist_to_ramp_end(world, v)
        vehicles.append({
            "id": v.id,
            "kind": v.kind.value,
            "lane": v.lane,
            "pos": float(v.pos),
            "speed": float(v.speed),
            "lat": float(v.lat),
            "accel": float(v.accel),
            "merged": v.merged,
            "dist_to_ramp_end": None if d is None else float(d),
        })
    state = {
        "time": float(world.time),
        "tick": world.tick // 10,
        "region": region.center_id,
        "vehicles": vehicles,
        "inbox": [m.to_dict() for m in inbox],
    }
    return PromptBundle(ROLE_DESC, TASK_DESC, TOOL_DESC, _dump(state), anomaly_note)


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str
    model_name: str = "default"
    temperature: float = 0.0
    timeout: float = 10.0
    max_retries: int = 2
    api_key: Optional[str] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        u = urlparse(self.endpoint)
        if u.scheme not in ("http", "https") or not u.netloc:
            raise ConfigError(f"malformed endpoint URL {self.endpoint!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature must lie in [0, 2]")
        if not 0 <= self.max_retries <= 3:
            raise ConfigError("max_retries must lie in [0, 3]")
        if not self.timeout > 0:
            raise ConfigError("timeout must be > 0")

    @classmethod
    def from_env(cls, env: Optional[Mapping[str, str]] = None, **overrides) -> "BackendConfig":
        env = os.environ if env is None else env
        endpoint = env.get(ENV_ENDPOINT)
        if not endpoint:
            raise ConfigError(f"{ENV_ENDPOINT} is not set")
        kw = {"endpoint": endpoint, "model_name": env.get(ENV_MODEL, "default"),
              "api_key": env.get(ENV_API_KEY) or None}
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        # the key is deliberately left out
        return {"endpoint": self.endpoint, "model_name": self.model_name, "temperature": self.temperature,
                "timeout": self.timeout, "max_retries": self.max_retries}


def query_backend(cfg: BackendConfig, prompt: PromptBundle, *, client: Optional[httpx.Client] = None,
                  sleep: Callable[[float], None] = time.sleep) -> str:
    body = {"model": cfg.model_name, "messages": prompt.messages(), "temperature": cfg.temperature}
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"
    own = client is None
    if own:
        client = httpx.Client(timeout=cfg.timeout)
    try:
        last = "no attempt made"
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                sleep(BACKOFF_BASE * 2 ** (attempt - 1))
            try:
                resp = client.post(cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout)
            except httpx.TimeoutException:
                last = "timeout"
                log.warning("backend timeout (attempt %d)", attempt + 1)
                continue
            except httpx.TransportError as exc:
                last = f"transport error: {type(exc).__name__}"
                log.warning("backend %s (attempt %d)", last, attempt + 1)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                log.warning("backend %s (attempt %d)", last, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendRequestError(f"HTTP {resp.status_code} from backend")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendRequestError(f"unexpected response shape: {exc}") from exc
        raise BackendUnavailable(f"backend unavailable after {cfg.max_retries + 1} attempts ({last})")
    finally:
        if own:
            client.close()


# ---------------------------------------------------------------- parsing

def _iter_objects(text: str):
    dec = json.JSONDecoder()
    i = text.find("{")
    while i != -1:
        try:
            obj, end = dec.raw_decode(text, i)
        except json.JSONDecodeError:
            i = text.find("{", i + 1)
            continue
        if isinstance(obj, dict):
            yield obj
        i = text.find("{", i + 1)


def _conforms(obj: dict) -> bool:
    decs = obj.get("decisions")
    if not isinstance(decs, list):
        return False
    for d in decs:
        if not isinstance(d, dict) or "id" not in d or "action" not in d:
            return False
    msgs = obj.get("messages", [])
    return isinstance(msgs, list)


def _as_int(x, what: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise DecisionValidationError(f"{what} must be an integer, got {x!r}")
    return x


def parse_decision(text: str, region: Region) -> RegionalDecision:
    """First schema-conforming JSON object in ``text``, validated against ``region``."""
    if not isinstance(text, str):
        raise DecisionParseError("response is not text")
    obj = next((o for o in _iter_objects(text) if _conforms(o)), None)
    if obj is None:
        raise DecisionParseError("no JSON object with a decisions list found")
    decisions, seen = [], set()
    for d in obj["decisions"]:
        vid = _as_int(d["id"], "decision id")
        if vid not in region.member_ids:
            raise DecisionValidationError(f"id {vid} is not a member of region {region.center_id}")
        if vid in seen:
            raise DecisionValidationError(f"id {vid} decided twice")
        seen.add(vid)
        name = d["action"]
        if name not in ACTION_NAMES:
            raise DecisionValidationError(f"unknown action {name!r}")
        reason = d.get("reason", "")
        decisions.append(MemberDecision(vid, MetaAction[name], str(reason)))
    messages = []
    for m in obj.get("messages", []):
        if not isinstance(m, dict):
            raise DecisionValidationError("message is not an object")
        try:
            sender = _as_int(m["sender"], "message sender")
            tick = _as_int(m.get("tick", 0), "message tick")
            intent = m["intent"]
            reason = m["reason"]
        except KeyError as exc:
            raise DecisionValidationError(f"message missing field {exc}") from None
        if sender not in region.member_ids:
            raise DecisionValidationError(f"message sender {sender} outside region")
        if intent not in ACTION_NAMES:
            raise DecisionValidationError(f"unknown intent {intent!r}")
        if reason not in REASONS:
            raise DecisionValidationError(f"unknown message reason {reason!r}")
        target = m.get("target")
        if target is not None:
            target = _as_int(target, "message target")
        messages.append(CommMessage(sender, tick, MetaAction[intent], reason, target))
    decisions.sort(key=lambda d: d.id)
    return RegionalDecision(region.center_id, "remote_lm", decisions, messages)


def lm_scores(decision: RegionalDecision, region: Region, tau_rank: float = TAU_RANK) -> ActionScores:
    """Chosen action gets logit 1/tau_rank, all others 0; absent members stay uniform."""
    chosen = {d.id: d for d in decision.decisions}
    rows, tags = {}, {}
    for vid in sorted(region.member_ids):
        row = [0.0] * len(ACTIONS)
        if vid in chosen:
            row[chosen[vid].action.value] = 1.0 / tau_rank
            tags[vid] = chosen[vid].reason
        rows[vid] = tuple(row)
    return ActionScores(rows, tags)


# ---------------------------------------------------------------- clients

class TranscriptWriter:
    """Appends prompt/response pairs as JSON lines (never the API key)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")

    def write(self, prompt: PromptBundle, response: str) -> None:
        rec = {"key": prompt.key(), "system": prompt.system_text(), "user": prompt.user_text(),
               "response": response}
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class _DecidingClient:
    """Shared decide loop: prompt, answer, parse, one repair re-prompt."""

    def __init__(self, budget: int = CALL_BUDGET, recorder: Optional[TranscriptWriter] = None):
        self.budget = budget
        self.calls = 0
        self.recorder = recorder

    def reset(self) -> None:
        self.calls = 0

    def _answer(self, prompt: PromptBundle, region: Region, world: WorldState) -> str:
        raise NotImplementedError

    def _ask(self, prompt: PromptBundle, region: Region, world: WorldState) -> str:
        if self.calls >= self.budget:
            raise BackendUnavailable(f"per-episode call budget of {self.budget} exhausted")
        self.calls += 1
        text = self._answer(prompt, region, world)
        if self.recorder is not None:
            self.recorder.write(prompt, text)
        return text

    def decide(self, region: Region, world: WorldState, inbox: Sequence[CommMessage] = ()) -> RegionalDecision:
        prompt = build_prompt(region, world, inbox)
        text = self._ask(prompt, region, world)
        try:
            return parse_decision(text, region)
        except (DecisionParseError, DecisionValidationError) as exc:
            log.info("rejected reply for region %d: %s", region.center_id, exc)
            repair = build_prompt(region, world, inbox,
                                  anomaly_note=f"Your previous reply was rejected ({exc}). "
                                               "Return only the JSON object.")
            return parse_decision(self._ask(repair, region, world), region)


class LMClient(_DecidingClient):
    def __init__(self, cfg: BackendConfig, *, http: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep, budget: int = CALL_BUDGET,
                 recorder: Optional[TranscriptWriter] = None):
        super().__init__(budget, recorder)
        self.cfg = cfg
        self.http = http
        self.sleep = sleep

    def _answer(self, prompt, region, world):
        return query_backend(self.cfg, prompt, client=self.http, sleep=self.sleep)


class OracleTeacher(_DecidingClient):
    """Offline stand-in that answers every prompt with the rule-oracle decision."""

    def __init__(self, weights: RewardWeights = DEFAULT_WEIGHTS, budget: int = CALL_BUDGET,
                 recorder: Optional[TranscriptWriter] = None):
        super().__init__(budget, recorder)
        self.weights = weights

    def _answer(self, prompt, region, world):
        dec = decide_from_scores(region, world, rule_oracle_scores(region, world, self.weights), "remote_lm")
        return json.dumps(dec.to_dict())


class ReplayClient(_DecidingClient):
    """Serves recorded responses keyed by the exact prompt text."""

    def __init__(self, path: str | Path, budget: int = CALL_BUDGET):
        super().__init__(budget, None)
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"transcript not found: {p}")
        self.table: dict[str, deque] = defaultdict(deque)
        self._source: dict[str, list[str]] = defaultdict(list)
        for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                self._source[rec["key"]].append(rec["response"])
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{p}:{n}: bad transcript line ({exc})") from None
        self.reset()

    def reset(self) -> None:
        super().reset()
        self.table = defaultdict(deque, {k: deque(v) for k, v in self._source.items()})

    def _answer(self, prompt, region, world):
        q = self.table.get(prompt.key())
        if not q:
            raise BackendUnavailable("prompt not present in transcript")
        return q.popleft()
