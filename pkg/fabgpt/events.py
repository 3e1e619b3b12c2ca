import json
import logging
import os
import threading
from typing import Callable, Dict, List, Optional

Subscriber = Callable[[Dict], None]


class EventHub:
    """
    In-process event hub.
    - Services publish JSON-serialisable dicts keyed by run id.
    - Sinks subscribe per run (or with run_id=None for every run).
    A failing sink never breaks the publisher.
    """

    def __init__(self):
        self._subs: Dict[Optional[str], List[Subscriber]] = {}
        self._lock = threading.Lock()

    def subscribe(self, run_id: Optional[str], fn: Subscriber) -> Subscriber:
        with self._lock:
            self._subs.setdefault(run_id, []).append(fn)
        return fn

    def unsubscribe(self, run_id: Optional[str], fn: Subscriber) -> None:
        with self._lock:
            subs = self._subs.get(run_id)
            if subs and fn in subs:
                subs.remove(fn)
            if subs is not None and not subs:
                self._subs.pop(run_id, None)

    def publish(self, run_id: str, payload: Dict) -> None:
        with self._lock:
            targets = list(self._subs.get(run_id, [])) + list(self._subs.get(None, []))
        for fn in targets:
            try:
                fn(payload)
            except Exception:
                pass


class JsonlSink:
    """Appends each payload of a given type as one JSON line."""

    def __init__(self, path: str, types: Optional[set] = None):
        self.path = path
        self.types = types
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        # truncate: one log per run
        open(path, "w").close()

    def __call__(self, payload: Dict) -> None:
        if self.types is not None and payload.get("type") not in self.types:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(payload, sort_keys=True) + "\n")


class ConsoleSink:
    """Forwards run events to the `fabgpt.run` logger; level filtering is the logging config's."""

    def __init__(self, logger: Optional[logging.Logger] = None):
        self.log = logger or logging.getLogger("fabgpt.run")

    def __call__(self, payload: Dict) -> None:
        run_id = payload.get("run_id")
        kind = payload.get("type")
        if kind == "step":
            terms = " ".join(f"{k}={v:.4f}" for k, v in sorted(payload.get("losses", {}).items()))
            level = logging.DEBUG if payload.get("step", 0) % 50 else logging.INFO
            self.log.log(level, "[%s] step %s %s lr=%.2e %s", run_id, payload.get("step"),
                         payload.get("tag"), payload.get("lr"), terms)
        elif kind == "status":
            self.log.info("[%s] %s: %s", run_id, payload.get("status"), payload.get("message") or "")
        else:
            level = logging.getLevelName(str(payload.get("level", "INFO")).upper())
            self.log.log(level if isinstance(level, int) else logging.INFO,
                         "[%s] %s", run_id, payload.get("log", ""))


# instantiate hub
events = EventHub()
