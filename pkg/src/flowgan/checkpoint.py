"""Binary checkpoints.

Layout::

    b"FLOWGAN1"
    uint64 LE   header length in bytes
    header      UTF-8 JSON: config text, iteration, RNG states, Adam
                timesteps and the ordered block index [(name, shape), ...]
    payload     every block's values as float64 little-endian, in index order

Parameters round-trip bit for bit; the trailing payload size is checked
against the index before anything is decoded.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import AdamState
from .training import TrainState

MAGIC = b"FLOWGAN1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def _blocks(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [(f"flow/{k}", v) for k, v in state.flow_params.items()]
    out += [(f"critic/{k}", v) for k, v in state.critic_params.items()]
    for group, st in state.optim.items():
        out += [(f"adam/{group}/m/{i}", a) for i, a in enumerate(st.m)]
        out += [(f"adam/{group}/v/{i}", a) for i, a in enumerate(st.v)]
    return out


def save_checkpoint(path, state: TrainState, config_text: str = "") -> None:
    blocks = _blocks(state)
    header = {
        "config": config_text,
        "iteration": int(state.iteration),
        "rng_states": state.rng_states,
        "adam_t": {k: int(s.t) for k, s in state.optim.items()},
        "blocks": [[name, list(np.shape(a))] for name, a in blocks],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for _, a in blocks:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_header(path) -> dict:
    return _parse(Path(path).read_bytes(), path)[0]


def _parse(buf: bytes, path) -> tuple[dict, int]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r}")
    off = len(MAGIC)
    if len(buf) < off + _LEN.size:
        raise CheckpointError(f"{path}: truncated before header length at byte {off}")
    (n,) = _LEN.unpack_from(buf, off)
    off += _LEN.size
    if len(buf) < off + n:
        raise CheckpointError(f"{path}: header needs {n} bytes at offset {off}, file has {len(buf) - off}")
    try:
        header = json.loads(buf[off:off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable header: {err}") from None
    return header, off + n


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None) -> tuple[TrainState, str]:
    """Returns (state, config_text).

    ``expected_shapes`` maps ``flow/...`` and ``critic/...`` block names to the
    shapes the current config builds; any disagreement is a load error.
    """
    buf = Path(path).read_bytes()
    header, off = _parse(buf, path)
    index = [(name, tuple(shape)) for name, shape in header["blocks"]]
    need = sum(8 * int(np.prod(s, dtype=np.int64)) for _, s in index)
    if len(buf) - off != need:
        raise CheckpointError(f"{path}: payload is {len(buf) - off} bytes, index describes {need}")
    values = {}
    for name, shape in index:
        count = int(np.prod(shape, dtype=np.int64))
        values[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if expected_shapes is not None:
        have = {k: v.shape for k, v in values.items() if not k.startswith("adam/")}
        if set(have) != set(expected_shapes):
            missing = sorted(set(expected_shapes) - set(have))
            extra = sorted(set(have) - set(expected_shapes))
            raise CheckpointError(f"{path}: parameter names differ from config (missing {missing}, extra {extra})")
        for k, shape in expected_shapes.items():
            if have[k] != tuple(shape):
                raise CheckpointError(f"{path}: {k} has shape {have[k]}, config expects {tuple(shape)}")
    optim = {}
    for group, t in header["adam_t"].items():
        m = _numbered(values, f"adam/{group}/m/")
        v = _numbered(values, f"adam/{group}/v/")
        optim[group] = AdamState(m, v, int(t))
    state = TrainState(
        iteration=int(header["iteration"]),
        flow_params={k[5:]: v for k, v in values.items() if k.startswith("flow/")},
        critic_params={k[7:]: v for k, v in values.items() if k.startswith("critic/")},
        optim=optim,
        rng_states=header["rng_states"],
    )
    return state, header["config"]


def _numbered(values: dict, prefix: str) -> list[np.ndarray]:
    items = [(int(k[len(prefix):]), v) for k, v in values.items() if k.startswith(prefix)]
    return [v for _, v in sorted(items)]
