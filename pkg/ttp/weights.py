"""Bit-exact weight container ("TTPW") plus a JSON model card next to it.

Layout, little-endian: magic "TTPW", u32 version, u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 rank, rank x u32
dims, raw f32 data; trailing u32 CRC32 of everything before it.
"""

import hashlib
import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict

from ttp.config import LossSwitches
from ttp.errors import BadMagic, ChecksumMismatch, IoFailure, VersionMismatch
from ttp.models import Discriminator, build_discriminator, build_generator

log = logging.getLogger(__name__)

MAGIC = b"TTPW"
VERSION = 1
DTYPE_F32 = 0


def write_tensors(path: Path, tensors: Dict[str, torch.Tensor]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, t in tensors.items():
        encoded = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        buf += struct.pack("<H", len(encoded)) + encoded
        buf += struct.pack("<BB", DTYPE_F32, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(buf) & 0xFFFFFFFF)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(bytes(buf))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_tensors(path: Path) -> Dict[str, torch.Tensor]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    if len(raw) < 4:
        raise IoFailure(f"{path}: truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise IoFailure(f"{path}: truncated ({len(raw)} bytes)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, this build reads {VERSION}")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")

    out: Dict[str, torch.Tensor] = {}
    off = 12
    end = len(raw) - 4
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            dtype, rank = struct.unpack_from("<BB", raw, off)
            off += 2
            if dtype != DTYPE_F32:
                raise IoFailure(f"{path}: tensor {name!r} has unsupported dtype code {dtype}")
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            numel = int(np.prod(dims)) if rank else 1
            if off + 4 * numel > end:
                raise IoFailure(f"{path}: tensor {name!r} runs past the end of the file")
            arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=off).reshape(dims)
            out[name] = torch.from_numpy(arr.astype(np.float32))
            off += 4 * numel
    except (struct.error, UnicodeDecodeError) as e:
        raise IoFailure(f"{path}: corrupt tensor table: {e}") from e
    if off != end:
        raise IoFailure(f"{path}: {end - off} trailing bytes after {count} tensors")
    return out


class ModelCard(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["generator", "discriminator"]
    arch: str
    in_channels: int
    num_classes: Optional[int] = None
    batch_norm: bool = True
    hparams: Dict[str, int] = {}
    tag: str = ""
    feature_layer: Literal["logits", "penultimate"] = "logits"
    accuracy: Optional[float] = None
    # generator provenance
    target_class: Optional[int] = None
    eps: Optional[float] = None
    surrogates: List[str] = []
    epoch: Optional[int] = None
    seed: Optional[int] = None
    smooth: bool = True
    loss: Optional[LossSwitches] = None


def card_path(path: Path) -> Path:
    return Path(f"{path}.json")


def card_for(model: nn.Module, **extra) -> ModelCard:
    if isinstance(model, Discriminator):
        bn = any(isinstance(m, nn.BatchNorm2d) for m in model.modules())
        fields = dict(
            kind="discriminator",
            arch=model.arch,
            in_channels=model.in_channels,
            num_classes=model.num_classes,
            batch_norm=bn,
            tag=model.tag,
            feature_layer=model.feature_layer,
        )
    else:
        fields = dict(kind="generator", arch=model.kind, in_channels=model.in_channels, hparams=dict(model.hparams))
    fields.update(extra)
    return ModelCard(**fields)


def save_weights(model: nn.Module, path: Path, card: Optional[ModelCard] = None) -> ModelCard:
    card = card or card_for(model)
    write_tensors(path, model.state_dict())
    try:
        card_path(path).write_text(card.model_dump_json(indent=2))
    except OSError as e:
        raise IoFailure(f"cannot write {card_path(path)}: {e}") from e
    log.info("event=weights_saved path=%s kind=%s arch=%s", path, card.kind, card.arch)
    return card


def load_card(path: Path) -> ModelCard:
    try:
        return ModelCard.model_validate_json(card_path(path).read_text())
    except OSError as e:
        raise IoFailure(f"missing model card {card_path(path)}: {e}") from e


def load_weights(path: Path) -> nn.Module:
    """Rebuild the module described by the card and load its tensors bit-exactly.

    Discriminators come back frozen; generators come back in eval mode.
    """
    card = load_card(path)
    tensors = read_tensors(path)
    if card.kind == "discriminator":
        model: nn.Module = build_discriminator(card.arch, card.in_channels, card.num_classes or 10, card.batch_norm)
        model.tag = card.tag or Path(path).stem
        model.feature_layer = card.feature_layer
    else:
        model = build_generator(card.arch, card.in_channels, **card.hparams)
    model.load_state_dict(tensors, strict=True)
    model.card = card
    if isinstance(model, Discriminator):
        model.freeze()
    else:
        model.eval()
    return model


def weights_fingerprint(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

