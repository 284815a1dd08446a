"""Artifact persistence: raw saliency containers, PNG export, run manifests, config files."""
from __future__ import annotations

import configparser
import datetime as _dt
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from . import __version__
from .errors import ConfigurationError

SALIENCY_MAGIC = b"SCNS"
SALIENCY_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, height, width: 16 bytes
OVERLAY_CMAP = "viridis"


def _as_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


# -- raw float container ----------------------------------------------------------

def encode_saliency(saliency) -> bytes:
    arr = _as_numpy(saliency)
    if arr.ndim != 2:
        raise ValueError(f"saliency must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _HEADER.pack(SALIENCY_MAGIC, SALIENCY_VERSION, h, w) + body


def decode_saliency(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ValueError("saliency container is truncated")
    magic, version, h, w = _HEADER.unpack_from(blob)
    if magic != SALIENCY_MAGIC:
        raise ValueError(f"bad saliency magic {magic!r}")
    if version != SALIENCY_VERSION:
        raise ValueError(f"unsupported saliency container version {version}")
    expected = _HEADER.size + 4 * h * w
    if len(blob) != expected:
        raise ValueError(f"saliency container has {len(blob)} bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


def write_saliency(path: str | Path, saliency) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_saliency(saliency))
    return path


def read_saliency(path: str | Path) -> np.ndarray:
    return decode_saliency(Path(path).read_bytes())


# -- PNG export -------------------------------------------------------------------

def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_grayscale_png(path: str | Path, saliency) -> Path:
    """8-bit grayscale PNG of a [0, 1] map (0 -> black, 1 -> white)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(_as_numpy(saliency)), mode="L").save(path)
    return path


def save_image_png(path: str | Path, image) -> Path:
    """RGB PNG of a ``[3, S, S]`` image in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = _as_numpy(image)
    Image.fromarray(_to_uint8(arr.transpose(1, 2, 0)), mode="RGB").save(path)
    return path


def overlay(image, saliency, weight: float = 0.5) -> np.ndarray:
    """Blend a viridis-coloured saliency map over an image; returns ``[S, S, 3]`` in [0, 1]."""
    img = _as_numpy(image).transpose(1, 2, 0).astype(np.float64)
    sal = np.clip(_as_numpy(saliency).astype(np.float64), 0.0, 1.0)
    heat = colormaps[OVERLAY_CMAP](sal)[..., :3]
    return (1.0 - weight) * img + weight * heat


def save_overlay_png(path: str | Path, image, saliency, weight: float = 0.5) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(overlay(image, saliency, weight)), mode="RGB").save(path)
    return path


# -- manifests --------------------------------------------------------------------

def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Everything needed to re-run a command: its name, resolved config and seed.

    ``artifacts`` maps each output path to its SHA-256 so a rerun can be
    checked byte-for-byte.
    """

    command: str
    config: dict
    seed: int | None
    artifacts: dict[str, str] = field(default_factory=dict)
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    entries: list[dict] = field(default_factory=list)

    def add_artifact(self, path: str | Path, root: str | Path | None = None) -> None:
        """Record ``path`` (keyed relative to ``root`` when given) with its digest."""
        key = Path(path).relative_to(root).as_posix() if root is not None else str(path)
        self.artifacts[key] = file_digest(path)

    def finish(self) -> None:
        self.finished = _now()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read manifest {path}: {exc}") from exc
        if "command" not in data or "config" not in data:
            raise ConfigurationError(f"{path} is not a run manifest")
        return cls(**data)


# -- config files -----------------------------------------------------------------

def read_config(path: str | Path, section: str) -> dict[str, str]:
    """Key/value pairs from ``[section]`` (plus ``[DEFAULT]``) of an INI-style file."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if section in parser:
        return dict(parser[section])
    return dict(parser.defaults())


def write_config(path: str | Path, section: str, values: dict) -> Path:
    parser = configparser.ConfigParser()
    parser[section] = {k: "" if v is None else str(v) for k, v in values.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)
    return path
