"""VAE checkpoints: networks in the autodiff text format plus metadata and a checksum."""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .autodiff import DenseNetwork
from .vae import VaeModel

FORMAT = "harmonic-vae-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def _checksum(body: dict) -> str:
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_checkpoint(model: VaeModel, path, metadata: dict | None = None) -> None:
    body = {
        "format": FORMAT,
        "version": VERSION,
        "latent_dim": model.latent_dim,
        "data_dim": model.data_dim,
        "likelihood_scale": repr(float(model.likelihood_scale)),
        "fixed_sigma_phi": None if model.fixed_sigma_phi is None
        else [repr(float(v)) for v in model.fixed_sigma_phi],
        "networks": {
            "encoder_mean": model.encoder_mean.to_dict(),
            "decoder": model.decoder.to_dict(),
            "encoder_scale": None if model.encoder_scale is None else model.encoder_scale.to_dict(),
        },
        "metadata": metadata or {},
    }
    doc = {"checksum": _checksum(body), **body}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path, with_metadata: bool = False):
    """Load a model (and its metadata dict when ``with_metadata`` is true)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    if doc.get("version") != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {doc.get('version')!r}, expected {VERSION}")
    stored = doc.pop("checksum", None)
    if stored != _checksum(doc):
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    nets = doc["networks"]
    fixed = doc["fixed_sigma_phi"]
    model = VaeModel(
        encoder_mean=DenseNetwork.from_dict(nets["encoder_mean"]),
        decoder=DenseNetwork.from_dict(nets["decoder"]),
        encoder_scale=None if nets["encoder_scale"] is None else DenseNetwork.from_dict(nets["encoder_scale"]),
        fixed_sigma_phi=None if fixed is None else np.array([float(v) for v in fixed]),
        likelihood_scale=float(doc["likelihood_scale"]),
    )
    return (model, doc["metadata"]) if with_metadata else model
