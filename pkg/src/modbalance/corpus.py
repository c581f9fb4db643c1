"""Corpus layout on disk.

corpus/
  manifest.json              format version, protocol, scene spec, realized
                             missing rates, ordered sample ids
  samples/<sample_id>/
    modality_00.raw ...      H*W little-endian float32 planes
    label.raw                H*W uint8 plane
    sample.json              shapes, presence row, sample id

Raw planes are written little-endian regardless of platform, so round-trips
are bit-exact everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .presence import IDT, PDT, MissingProtocol, PresenceMatrix, sample_presence
from .scenes import ModalitySample, SceneSpec, default_scene_spec, render_sample

FORMAT_VERSION = 1
IMAGE_DTYPE = "<f4"
LABEL_DTYPE = "u1"


class CorpusError(RuntimeError):
    pass


def generate_corpus(
    spec: SceneSpec,
    protocol: MissingProtocol,
    n_samples: int,
    seed: Optional[int] = None,
) -> Tuple[List[ModalitySample], PresenceMatrix]:
    """Sample an availability matrix once, then render every sample.

    Each sample renders from its own child RNG stream, so rendering is
    order-independent and parallelizable.
    """
    presence = sample_presence(protocol, n_samples, spec.n_modalities)
    root_seed = protocol.seed if seed is None else seed
    streams = np.random.default_rng(root_seed).spawn(n_samples)
    samples = [
        render_sample(spec, presence.row(i), streams[i], sample_id=f"sample_{i:04d}")
        for i in range(n_samples)
    ]
    return samples, presence


def write_corpus(
    samples: Sequence[ModalitySample],
    presence: PresenceMatrix,
    path,
    protocol: MissingProtocol,
    spec: SceneSpec,
) -> dict:
    """Write samples and manifest; returns the manifest dict."""
    root = Path(path)
    if len(samples) != presence.n_samples:
        raise CorpusError("sample count does not match the presence matrix")
    (root / "samples").mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        if not np.array_equal(sample.presence, presence.row(i)):
            raise CorpusError(f"sample {sample.sample_id}: presence row disagrees with matrix")
        sdir = root / "samples" / sample.sample_id
        sdir.mkdir(parents=True, exist_ok=True)
        for m in range(presence.n_modalities):
            (sdir / f"modality_{m:02d}.raw").write_bytes(
                sample.images[m].astype(IMAGE_DTYPE).tobytes()
            )
        (sdir / "label.raw").write_bytes(sample.label.astype(LABEL_DTYPE).tobytes())
        sidecar = {
            "sample_id": sample.sample_id,
            "height": int(sample.label.shape[0]),
            "width": int(sample.label.shape[1]),
            "n_modalities": int(presence.n_modalities),
            "presence": [int(v) for v in sample.presence],
            "image_dtype": IMAGE_DTYPE,
            "label_dtype": LABEL_DTYPE,
        }
        (sdir / "sample.json").write_text(json.dumps(sidecar, indent=1))
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_samples": presence.n_samples,
        "n_modalities": presence.n_modalities,
        "n_classes": spec.n_classes,
        "image_size": list(spec.image_size),
        "mode": protocol.mode,
        "target_rates": list(protocol.target_rates),
        "seed": protocol.seed,
        "realized_missing_rates": presence.missing_rates().tolist(),
        "sample_ids": [s.sample_id for s in samples],
        "scene_spec": spec.to_dict(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CorpusError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CorpusError(f"corrupt manifest at {mpath}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CorpusError(
            f"manifest format version {version!r} unsupported; this reader expects {FORMAT_VERSION}"
        )
    return manifest


def _read_plane(path: Path, dtype: str, shape: Tuple[int, int], sample_id: str) -> np.ndarray:
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise CorpusError(f"sample {sample_id}: missing plane file {path.name}") from e
    if len(raw) != expected:
        raise CorpusError(
            f"sample {sample_id}: {path.name} holds {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_corpus(path) -> Tuple[List[ModalitySample], PresenceMatrix, dict]:
    """Load all samples in manifest order; returns (samples, presence, manifest)."""
    root = Path(path)
    manifest = read_manifest(root)
    h, w = manifest["image_size"]
    n_mod = manifest["n_modalities"]
    samples = []
    rows = []
    for sid in manifest["sample_ids"]:
        sdir = root / "samples" / sid
        sidecar_path = sdir / "sample.json"
        if not sidecar_path.exists():
            raise CorpusError(f"sample {sid}: missing sample.json")
        sidecar = json.loads(sidecar_path.read_text())
        if (sidecar["height"], sidecar["width"]) != (h, w) or sidecar["n_modalities"] != n_mod:
            raise CorpusError(f"sample {sid}: sidecar shape disagrees with manifest")
        images = np.stack(
            [
                _read_plane(sdir / f"modality_{m:02d}.raw", sidecar["image_dtype"], (h, w), sid)
                for m in range(n_mod)
            ]
        )
        label = _read_plane(sdir / "label.raw", sidecar["label_dtype"], (h, w), sid)
        presence_row = np.asarray(sidecar["presence"], dtype=np.int8)
        samples.append(
            ModalitySample(images=images, label=label, presence=presence_row, sample_id=sid)
        )
        rows.append(presence_row)
    presence = PresenceMatrix(np.stack(rows))
    return samples, presence, manifest
