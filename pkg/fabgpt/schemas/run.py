import enum
from typing import Dict, Optional

from pydantic import BaseModel


class RunStatus(str, enum.Enum):
    pending = "pending"
    running = "running"
    success = "success"
    failed = "failed"


class RunRecord(BaseModel):
    run_id: str
    command: str
    status: RunStatus = RunStatus.pending
    progress: Optional[float] = None
    message: Optional[str] = None
    seed: int
    config: Dict
    created_at: str
    finished_at: Optional[str] = None
