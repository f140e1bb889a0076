"""Binary persistence: model checkpoints and crop archives.

Checkpoint layout (all integers little-endian):

    magic     6 bytes  b"NSLGC1"
    version   u32
    config    u32 length + canonical JSON of the model configuration
    epoch     u64
    params    u32 count, then per parameter:
                name (u16 length + utf-8), ndim u8, dims u32 each,
                values as little-endian float32
    buffers   u32 count, same encoding (batch-norm running stats)
    checksum  32 bytes: SHA-256 of everything before it

Crop archive layout:

    magic     7 bytes  b"NSCROP1"
    version   u32
    count     u32, size u32 (cube side S)
    cubes     count x S^3 little-endian float32, C order
    metadata  u32 length + JSON: per-crop records (id, patient, rank,
              label or null) and optional patient records (id, label)
    checksum  32 bytes: SHA-256 of everything before it

Parameters are stored in 32-bit precision, so a load restores values to
within one float32 rounding step; reloading and saving again is
byte-stable because the stored values are already exactly representable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict

import numpy as np

from nslgc.aggregate import PatientCase
from nslgc.model import ModelConfig, ModelState, build_model
from nslgc.preprocess import NoduleCrop

CHECKPOINT_MAGIC = b"NSLGC1"
CHECKPOINT_VERSION = 1
ARCHIVE_MAGIC = b"NSCROP1"
ARCHIVE_VERSION = 1


class PersistError(RuntimeError):
    """Base class for malformed persisted files."""


class CheckpointMagicError(PersistError):
    """The file does not start with the checkpoint magic string."""


class CheckpointVersionError(PersistError):
    """The checkpoint was written by an incompatible format version."""


class CheckpointChecksumError(PersistError):
    """The checkpoint content does not match its checksum (corrupt/truncated)."""


class ArchiveFormatError(PersistError):
    """The crop archive is malformed."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long to persist ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, error_cls: type[PersistError]):
        self.data = data
        self.pos = 0
        self.error_cls = error_cls

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise self.error_cls("unexpected end of file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")


def _pack_array(name: str, values: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(values, dtype=np.float64).astype("<f4")
    parts = [_pack_str(name), struct.pack("<B", arr.ndim)]
    parts.extend(struct.pack("<I", d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def _read_array(reader: _Reader) -> tuple[str, np.ndarray]:
    name = reader.string()
    ndim = reader.u8()
    shape = tuple(reader.u32() for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = reader.take(4 * count)
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    return name, values


def save_checkpoint(state: ModelState, path: str) -> None:
    """Write the model's architecture, parameters (as float32), BN stats, and epoch."""
    config_json = json.dumps(asdict(state.config), sort_keys=True, separators=(",", ":"))
    body = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_json.encode())),
        config_json.encode(),
        struct.pack("<Q", state.epoch),
    ]
    params = state.parameters()
    body.append(struct.pack("<I", len(params)))
    for name, p in params:
        body.append(_pack_array(name, p.data))
    buffers = state.bn_buffers()
    body.append(struct.pack("<I", len(buffers)))
    for name, buf in buffers:
        body.append(_pack_array(name, buf))
    payload = b"".join(body)
    with open(path, "wb") as fh:
        fh.write(payload + hashlib.sha256(payload).digest())


def load_checkpoint(path: str) -> ModelState:
    """Rebuild the model from a checkpoint; verifies magic, version, checksum."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointMagicError(f"{path}: not a model checkpoint (bad magic)")
    reader = _Reader(data, CheckpointChecksumError)
    reader.take(len(CHECKPOINT_MAGIC))
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 32 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointChecksumError(f"{path}: checksum mismatch (corrupt or truncated file)")
    payload_end = len(data) - 32

    config_raw = reader.take(reader.u32()).decode("utf-8")
    config_dict = json.loads(config_raw)
    config_dict["dropout_rates"] = tuple(config_dict["dropout_rates"])
    state = build_model(ModelConfig(**config_dict))
    state.epoch = reader.u64()

    n_params = reader.u32()
    params = dict(state.parameters())
    seen = []
    for _ in range(n_params):
        name, values = _read_array(reader)
        if name not in params:
            raise PersistError(f"{path}: unknown parameter {name!r} in checkpoint")
        if params[name].data.shape != values.shape:
            raise PersistError(
                f"{path}: parameter {name!r} has shape {values.shape}, expected {params[name].data.shape}"
            )
        params[name].data = values
        seen.append(name)
    if len(seen) != len(params):
        raise PersistError(f"{path}: checkpoint holds {len(seen)} parameters, model has {len(params)}")

    n_buffers = reader.u32()
    buffers = dict(state.bn_buffers())
    for _ in range(n_buffers):
        name, values = _read_array(reader)
        if name not in buffers or buffers[name].shape != values.shape:
            raise PersistError(f"{path}: unexpected running-stat buffer {name!r}")
        buffers[name][...] = values
    if reader.pos != payload_end:
        raise PersistError(f"{path}: {payload_end - reader.pos} trailing bytes in payload")
    return state


def save_crop_archive(
    path: str,
    crops: list[NoduleCrop],
    labels: dict[str, float] | None = None,
    cases: list[PatientCase] | None = None,
) -> None:
    """Write crops (float32 cubes) plus per-crop labels and patient grouping.

    ``labels`` maps crop id -> target for labeled sets; ``cases`` records
    patient membership and patient labels for cohort archives. Crops listed
    in ``cases`` must appear in ``crops``.
    """
    if not crops:
        raise ValueError("cannot write an empty crop archive")
    size = crops[0].volume.shape[0]
    ids = [c.crop_id for c in crops]
    if len(set(ids)) != len(ids):
        raise ValueError("crop ids must be unique within an archive")
    for c in crops:
        if c.volume.shape != (size, size, size):
            raise ValueError(f"crop {c.crop_id!r} has shape {c.volume.shape}, expected {(size,) * 3}")
    labels = labels or {}
    crop_meta = [
        {
            "crop_id": c.crop_id,
            "patient_id": c.patient_id,
            "detection_rank": c.detection_rank,
            "label": labels.get(c.crop_id),
        }
        for c in crops
    ]
    id_set = set(ids)
    patient_meta = []
    for case in cases or []:
        for crop in case.crops:
            if crop.crop_id not in id_set:
                raise ValueError(f"case {case.patient_id!r} references crop {crop.crop_id!r} not in archive")
        patient_meta.append(
            {"patient_id": case.patient_id, "label": case.label, "crop_ids": [c.crop_id for c in case.crops]}
        )
    meta_json = json.dumps({"crops": crop_meta, "patients": patient_meta}, sort_keys=True, separators=(",", ":"))

    body = [
        ARCHIVE_MAGIC,
        struct.pack("<I", ARCHIVE_VERSION),
        struct.pack("<II", len(crops), size),
    ]
    for c in crops:
        body.append(np.ascontiguousarray(c.volume, dtype=np.float64).astype("<f4").tobytes())
    body.append(struct.pack("<I", len(meta_json.encode())))
    body.append(meta_json.encode())
    payload = b"".join(body)
    with open(path, "wb") as fh:
        fh.write(payload + hashlib.sha256(payload).digest())


def load_crop_archive(path: str) -> tuple[list[NoduleCrop], dict[str, float], list[PatientCase]]:
    """Read (crops, crop labels, patient cases) back from an archive."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(ARCHIVE_MAGIC) or not data.startswith(ARCHIVE_MAGIC):
        raise ArchiveFormatError(f"{path}: not a crop archive (bad magic)")
    reader = _Reader(data, ArchiveFormatError)
    reader.take(len(ARCHIVE_MAGIC))
    version = reader.u32()
    if version != ARCHIVE_VERSION:
        raise ArchiveFormatError(f"{path}: archive format version {version}, expected {ARCHIVE_VERSION}")
    if len(data) < 32 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise ArchiveFormatError(f"{path}: checksum mismatch (corrupt or truncated file)")

    count = reader.u32()
    size = reader.u32()
    cube_bytes = 4 * size**3
    volumes = [
        np.frombuffer(reader.take(cube_bytes), dtype="<f4").astype(np.float64).reshape(size, size, size)
        for _ in range(count)
    ]
    meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    if len(meta["crops"]) != count:
        raise ArchiveFormatError(f"{path}: metadata lists {len(meta['crops'])} crops, header says {count}")

    crops = []
    labels: dict[str, float] = {}
    for volume, record in zip(volumes, meta["crops"]):
        crops.append(
            NoduleCrop(
                crop_id=record["crop_id"],
                volume=volume,
                patient_id=record["patient_id"],
                detection_rank=record["detection_rank"],
            )
        )
        if record["label"] is not None:
            labels[record["crop_id"]] = float(record["label"])
    by_id = {c.crop_id: c for c in crops}
    cases = []
    for record in meta["patients"]:
        case_crops = [by_id[cid] for cid in record["crop_ids"]]
        cases.append(PatientCase(patient_id=record["patient_id"], crops=case_crops, label=record["label"]))
    return crops, labels, cases
