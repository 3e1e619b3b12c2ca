import json
import os
import uuid
from datetime import datetime, timezone
from typing import Dict, Optional

from fabgpt.events import ConsoleSink, JsonlSink, events
from fabgpt.schemas.run import RunRecord, RunStatus

# one RunRecord per output directory, keyed by run id
_records: Dict[str, RunRecord] = {}
_paths: Dict[str, str] = {}
_sinks: Dict[str, list] = {}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _publish(run_id: str, payload: Dict):
    try:
        events.publish(run_id, payload)
    except Exception:
        pass


def atomic_write_json(path: str, data, *, indent: int = 2) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(data, f, indent=indent, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def start_run(command: str, seed: int, config: Dict, out_dir: Optional[str] = None,
              *, log_file: Optional[str] = None, console: bool = True) -> str:
    """Register a run, attach its sinks and write the pending record to <out_dir>/run.json."""
    run_id = f"{command}-{uuid.uuid4().hex[:8]}"
    _records[run_id] = RunRecord(run_id=run_id, command=command, seed=seed, config=config, created_at=_now())
    sinks = []
    if console:
        sinks.append(events.subscribe(run_id, ConsoleSink()))
    if log_file:
        sinks.append(events.subscribe(run_id, JsonlSink(log_file, types={"step"})))
    _sinks[run_id] = sinks
    if out_dir:
        _paths[run_id] = os.path.join(out_dir, "run.json")
        _flush(run_id)
    return run_id


def _flush(run_id: str) -> None:
    path = _paths.get(run_id)
    rec = _records.get(run_id)
    if path and rec:
        atomic_write_json(path, rec.model_dump(mode="json"))


def append_log(run_id: str, text: str, *, level: str = "INFO", progress: Optional[float] = None,
               message: Optional[str] = None):
    payload = {"run_id": run_id, "type": "log", "ts": _now(), "log": text, "level": level}
    if progress is not None: payload["progress"] = progress
    if message is not None:  payload["message"] = message
    _publish(run_id, payload)


def log_step(run_id: str, step: int, tag: str, lr: float, losses: Dict[str, float], **extra):
    payload = {"run_id": run_id, "type": "step", "ts": _now(), "step": step, "tag": tag,
               "lr": lr, "losses": losses}
    payload.update(extra)
    _publish(run_id, payload)


def set_status(run_id: str, status: RunStatus, *, progress: Optional[float] = None,
               message: Optional[str] = None):
    rec = _records.get(run_id)
    if rec is not None:
        rec.status = status
        if progress is not None: rec.progress = progress
        if message is not None:  rec.message = message
        if status in (RunStatus.success, RunStatus.failed) and rec.finished_at is None:
            rec.finished_at = _now()
        _flush(run_id)
    _publish(run_id, {"run_id": run_id, "type": "status", "status": status.value,
                      "progress": progress, "message": message})


def finish_run(run_id: str) -> Optional[RunRecord]:
    for fn in _sinks.pop(run_id, []):
        events.unsubscribe(run_id, fn)
    _paths.pop(run_id, None)
    return _records.pop(run_id, None)
