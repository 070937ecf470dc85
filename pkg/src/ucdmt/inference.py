"""Test-time translation: assemble encoder and decoder only.

The discriminator is never evaluated here; translation is agnostic to the
input modality (the optional source code in a request is bookkeeping only
and does not reach the network).
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from ucdmt import autodiff as ad
from ucdmt.data import (ModalityCode, extract_valid_slices,
                        load_subject_volumes, save_volume_raw)
from ucdmt.errors import InvalidCode, IoFailure, MissingSubject
from ucdmt.models import dec_forward, enc_forward


@dataclass
class TranslationRequest:
    x: np.ndarray                  # image in [-1, 1], (H, W) or (1, H, W)
    m_y: ModalityCode
    m_x: ModalityCode = None       # bookkeeping only


def _code_of(code, m=4):
    if isinstance(code, ModalityCode):
        return code
    if isinstance(code, str):
        return ModalityCode.from_name(code, m)
    if isinstance(code, (int, np.integer)):
        return ModalityCode.from_index(int(code), m)
    arr = np.asarray(code)
    if arr.ndim == 1:
        return ModalityCode(tuple(int(b) for b in arr))
    raise InvalidCode(f"cannot interpret modality code {code!r}")


def translate_batch(bundle, images, m_y_index):
    """Translate a stack (N, 1, H, W) to one target modality, no graph."""
    m = bundle.config.m
    codes = np.zeros((images.shape[0], m), dtype=np.float32)
    codes[:, m_y_index] = 1.0
    with ad.no_grad():
        z = enc_forward(bundle, ad.Tensor(np.asarray(images, dtype=np.float32)))
        out = dec_forward(bundle, z, codes)
    return out.data


def translate(bundle, request: TranslationRequest) -> np.ndarray:
    """x_to_y = Dec(Enc(x), m_y); returns (1, H, W) in [-1, 1]."""
    m_y = _code_of(request.m_y, bundle.config.m)
    x = np.asarray(request.x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    return translate_batch(bundle, x[None], m_y.index)[0]


def synthesize_complementary(bundle, x, m_x):
    """Translate to every modality except m_x, in fixed modality order."""
    m_x = _code_of(m_x, bundle.config.m)
    outputs = []
    for i in range(bundle.config.m):
        if i == m_x.index:
            continue
        outputs.append(translate(bundle, TranslationRequest(
            x=x, m_y=ModalityCode.from_index(i, bundle.config.m), m_x=m_x)))
    return outputs


def checkpoint_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def translate_volume(bundle, manifest, subject_id, m_x, m_y, out_dir,
                     ckpt_hash=None):
    """Translate every retained slice of one subject; write the volume in
    the dataset raw format plus a provenance sidecar JSON."""
    records = [s for s in manifest.subjects if s.subject_id == subject_id]
    if not records:
        raise MissingSubject(f"subject {subject_id!r} not in manifest")
    record = records[0]
    m_x = _code_of(m_x, manifest.m)
    m_y = _code_of(m_y, manifest.m)

    volumes = load_subject_volumes(manifest, record)
    slices = extract_valid_slices(volumes, manifest.threshold())
    if not slices:
        raise MissingSubject(f"subject {subject_id!r} has no slices above the filter")
    inputs = np.stack([s.images[m_x.index] for s in slices])[:, None]
    outputs = translate_batch(bundle, inputs, m_y.index)  # (D', 1, H, W)
    volume = np.ascontiguousarray(outputs[:, 0].transpose(1, 2, 0))

    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out_dir}: {e}") from e
    stem = f"{subject_id}_{m_x.name}_to_{m_y.name}"
    raw_path = os.path.join(out_dir, stem + ".raw")
    save_volume_raw(raw_path, volume)
    meta = {
        "subject_id": subject_id,
        "from": m_x.name,
        "to": m_y.name,
        "shape": list(volume.shape),
        "slice_indices": [s.slice_index for s in slices],
        "checkpoint_hash": ckpt_hash,
    }
    with open(os.path.join(out_dir, stem + ".json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    return raw_path
