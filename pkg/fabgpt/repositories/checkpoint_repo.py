"""
Checkpoint file layout:

    b"FABGPTCK" | uint32 LE header length | JSON header | raw tensor bytes

The header lists every tensor (name, dtype, shape, offset, nbytes) with
offsets relative to the start of the data section. Tensors are stored
row-major, little-endian. Names are namespaced: `frozen/`, `enhancement/`,
`detection/`, `modulation/`, `qa/` for model state and `optim/` for the
optimizer moments.
"""
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from fabgpt.core.errors import FormatError

MAGIC = b"FABGPTCK"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class TrainState:
    step: int = 0
    config: Dict = field(default_factory=dict)
    vocabulary: List[str] = field(default_factory=list)
    # optimizer moments keyed by parameter name
    optim_params: List[str] = field(default_factory=list)
    optim_steps: Dict[str, float] = field(default_factory=dict)
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)
    param_groups: List[Dict] = field(default_factory=list)
    checkpoint_id: Optional[str] = None


def to_namespaced(state_dict: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """`enhancement.pm.proj.weight` -> `enhancement/pm.proj.weight`."""
    return {k.replace(".", "/", 1): v for k, v in state_dict.items()}


def from_namespaced(params: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {k.replace("/", ".", 1): v for k, v in params.items()}


def optimizer_to_state(optimizer: torch.optim.Optimizer, names: List[str], state: TrainState) -> TrainState:
    sd = optimizer.state_dict()
    state.optim_params = list(names)
    state.param_groups = [{k: v for k, v in g.items() if k != "params"} for g in sd["param_groups"]]
    state.optim_steps, state.exp_avg, state.exp_avg_sq = {}, {}, {}
    for idx, name in enumerate(names):
        s = sd["state"].get(idx)
        if not s:
            continue
        state.optim_steps[name] = float(s["step"])
        state.exp_avg[name] = s["exp_avg"]
        state.exp_avg_sq[name] = s["exp_avg_sq"]
    return state


def state_to_optimizer(optimizer: torch.optim.Optimizer, state: TrainState) -> None:
    sd = optimizer.state_dict()
    if len(state.optim_params) != sum(len(g["params"]) for g in sd["param_groups"]):
        raise FormatError("checkpoint optimizer does not match the model's trainable parameters")
    moments = {}
    for idx, name in enumerate(state.optim_params):
        if name in state.exp_avg:
            moments[idx] = {"step": torch.tensor(state.optim_steps[name]),
                            "exp_avg": state.exp_avg[name].clone(),
                            "exp_avg_sq": state.exp_avg_sq[name].clone()}
    groups = []
    for g, saved in zip(sd["param_groups"], state.param_groups or sd["param_groups"]):
        merged = dict(g)
        merged.update({k: (tuple(v) if isinstance(v, list) else v) for k, v in saved.items() if k != "params"})
        groups.append(merged)
    optimizer.load_state_dict({"state": moments, "param_groups": groups})


def _tensor_table(params: Dict[str, torch.Tensor], state: TrainState) -> Dict[str, torch.Tensor]:
    table = dict(params)
    for name, t in state.exp_avg.items():
        table[f"optim/exp_avg/{name}"] = t
    for name, t in state.exp_avg_sq.items():
        table[f"optim/exp_avg_sq/{name}"] = t
    return table


def save_checkpoint(params: Dict[str, torch.Tensor], state: TrainState, path: str) -> str:
    """Write atomically; returns the checkpoint id (sha256 prefix of the file)."""
    entries, chunks, offset = [], [], 0
    for name, t in _tensor_table(params, state).items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            raise FormatError(f"tensor {name} has unsupported dtype {t.dtype}")
        raw = t.contiguous().numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": state.step,
        "config": state.config,
        "vocabulary": state.vocabulary,
        "optim_params": state.optim_params,
        "optim_steps": state.optim_steps,
        "param_groups": state.param_groups,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()[:16]


def load_checkpoint(path: str) -> Tuple[Dict[str, torch.Tensor], TrainState]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}")
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header does not parse: {e}")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")

    data = memoryview(blob)[start + n:]
    table: Dict[str, torch.Tensor] = {}
    for e in header.get("tensors", []):
        end = e["offset"] + e["nbytes"]
        if end > len(data):
            raise FormatError(f"{path}: truncated data for tensor {e['name']}")
        if e["dtype"] not in _TORCH:
            raise FormatError(f"{path}: unknown dtype {e['dtype']} for {e['name']}")
        arr = np.frombuffer(data[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        table[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))

    state = TrainState(
        step=int(header.get("step", 0)),
        config=header.get("config", {}),
        vocabulary=header.get("vocabulary", []),
        optim_params=header.get("optim_params", []),
        optim_steps=header.get("optim_steps", {}),
        param_groups=header.get("param_groups", []),
        checkpoint_id=hashlib.sha256(blob).hexdigest()[:16],
    )
    params = {}
    for name, t in table.items():
        if name.startswith("optim/exp_avg_sq/"):
            state.exp_avg_sq[name[len("optim/exp_avg_sq/"):]] = t
        elif name.startswith("optim/exp_avg/"):
            state.exp_avg[name[len("optim/exp_avg/"):]] = t
        else:
            params[name] = t
    return params, state
