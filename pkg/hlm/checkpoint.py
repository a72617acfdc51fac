"""Binary checkpoint container.

Layout::

    b"HLM1" | u32 format version | u64 manifest length | manifest (UTF-8 JSON)
    | raw little-endian tensor payloads

The manifest lists every tensor (name, shape, dtype code, byte offset into
the payload area, byte length) next to the run metadata. JSON is written with
sorted keys and fixed separators, so save -> load -> save is byte-identical.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Literal, NamedTuple

import numpy as np

from hlm.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from hlm.errors import ContractError, DataError
from hlm.model import Parameters
from hlm.optim import OptimizerState
from hlm.settings import ModelConfig
from hlm.tokenizer import TokenizerModel

logger = logging.getLogger(__name__)

Stage = Literal["pretrained_vanilla", "pretrained_headless", "head_recovered"]
STAGES: tuple[Stage, ...] = ("pretrained_vanilla", "pretrained_headless", "head_recovered")

DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

HEADER = struct.Struct("<4sIQ")
OPT_M, OPT_V = "opt.m.", "opt.v."


class Checkpoint(NamedTuple):
    stage: Stage
    model_config: ModelConfig
    params: Parameters
    step: int
    seed: int
    train_config: dict[str, Any]
    train_config_digest: str
    tokenizer: str
    optimizer: OptimizerState | None = None

    @property
    def has_head(self) -> bool:
        return self.params.head is not None

    def load_tokenizer(self) -> TokenizerModel:
        if not self.tokenizer:
            raise DataError("checkpoint carries no tokenizer")
        return TokenizerModel.loads(self.tokenizer)


def _tensor_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = list(ckpt.params.arrays().items())
    if ckpt.optimizer is not None:
        entries += [(OPT_M + n, a) for n, a in ckpt.optimizer.m.items()]
        entries += [(OPT_V + n, a) for n, a in ckpt.optimizer.v.items()]
    return entries


def to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.stage not in STAGES:
        raise ContractError(f"unknown checkpoint stage {ckpt.stage!r}")
    tensors, payloads, offset = [], [], 0
    for name, arr in _tensor_entries(ckpt):
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        if le.dtype not in DTYPE_CODES:
            raise ContractError(f"cannot store dtype {arr.dtype} of {name}")
        raw = le.tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(le.shape),
                "dtype": DTYPE_CODES[le.dtype],
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    manifest = {
        "stage": ckpt.stage,
        "step": ckpt.step,
        "rng": {"seed": ckpt.seed},
        "model_config": ckpt.model_config.model_dump(mode="json"),
        "train_config": ckpt.train_config,
        "train_config_digest": ckpt.train_config_digest,
        "tokenizer": ckpt.tokenizer,
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer is not None else None,
        "tensors": tensors,
    }
    body = json.dumps(
        manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
    header = HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(body))
    return b"".join([header, body, *payloads])


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < HEADER.size:
        raise DataError("truncated checkpoint")
    magic, version, manifest_len = HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint format version {version}")
    start = HEADER.size + manifest_len
    try:
        manifest = json.loads(raw[HEADER.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataError(f"corrupt checkpoint manifest: {err}")

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        begin = start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(raw):
            raise DataError(f"truncated payload for {entry['name']}")
        dtype = CODE_DTYPES[entry["dtype"]]
        arrays[entry["name"]] = (
            np.frombuffer(raw[begin:end], dtype=dtype)
            .reshape(entry["shape"])
            .astype(dtype.newbyteorder("="))
        )

    params = {n: a for n, a in arrays.items() if not n.startswith(("opt.",))}
    optimizer = None
    if manifest["optimizer_step"] is not None:
        optimizer = OptimizerState(
            m={n[len(OPT_M) :]: a for n, a in arrays.items() if n.startswith(OPT_M)},
            v={n[len(OPT_V) :]: a for n, a in arrays.items() if n.startswith(OPT_V)},
            step=manifest["optimizer_step"],
        )
    return Checkpoint(
        stage=manifest["stage"],
        model_config=ModelConfig(**manifest["model_config"]),
        params=Parameters.from_arrays(params),
        step=manifest["step"],
        seed=manifest["rng"]["seed"],
        train_config=manifest["train_config"],
        train_config_digest=manifest["train_config_digest"],
        tokenizer=manifest["tokenizer"],
        optimizer=optimizer,
    )


def save(ckpt: Checkpoint, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    logger.info("saved %s checkpoint at step %d to %s", ckpt.stage, ckpt.step, path)
    return path


def load(path: Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err}")
    return from_bytes(raw)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
