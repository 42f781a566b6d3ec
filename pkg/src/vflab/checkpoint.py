"""Versioned binary checkpoints keyed by (run_id, epoch, participant_id).

The same format stores participant bottoms, the server top, and the attack
artifacts (surrogate, generator, discriminator), which use string ids.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .validation import ValidationError

FORMAT_VERSION = 1


def _path(root, run_id, epoch, participant_id):
    return Path(root) / str(run_id) / f"epoch{int(epoch):04d}_{participant_id}.ckpt"


def save_checkpoint(root, run_id, epoch, participant_id, payload):
    """Persist a state-dict payload; returns the written path."""
    path = _path(root, run_id, epoch, participant_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "run_id": str(run_id),
            "epoch": int(epoch),
            "participant_id": participant_id,
            "payload": payload,
        },
        path,
    )
    return path


def load_checkpoint(root, run_id, epoch, participant_id):
    """Load a payload saved by :func:`save_checkpoint`, validating key and version."""
    path = _path(root, run_id, epoch, participant_id)
    if not path.is_file():
        raise FileNotFoundError(path)
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"checkpoint {path} has format_version {blob.get('format_version')}, "
            f"expected {FORMAT_VERSION}"
        )
    key = (blob.get("run_id"), blob.get("epoch"), blob.get("participant_id"))
    if key != (str(run_id), int(epoch), participant_id):
        raise ValidationError(f"checkpoint {path} carries mismatched key {key}")
    return blob["payload"]
