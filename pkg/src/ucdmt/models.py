"""The three networks: modality-agnostic encoder, modality-conditioned
decoder, and a discriminator with realism and modality-classification heads.

The encoder never sees a modality code; conditioning happens by spatially
replicating the target one-hot code and concatenating it to the encoder
feature map at the decoder input. One parameter bundle serves every
(source, target) modality pair.

Backbone (small, CPU-trainable):
    Enc: 7x7 conv (1->32) -> two stride-2 4x4 convs (32->64->64)
         -> 2 residual blocks @64, instance norm + ReLU, downsampling x4
    Dec: [z | code] -> 2 residual blocks @(64+M) -> two stride-2 4x4
         transposed convs (->32->16) -> 7x7 conv -> tanh
    Dis: stride-2 4x4 convs 1->32->64->128, leaky ReLU 0.2;
         adv head 1x1 conv -> patch grid; mc head GAP -> linear -> M logits
"""

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from ucdmt import autodiff as ad
from ucdmt.errors import CorruptCheckpoint, InvalidCode, ShapeMismatch

CHECKPOINT_MAGIC = b"UCDMT1"

# instrumentation: bumped on every discriminator forward; lets tests prove
# that inference never evaluates Dis
dis_call_count = 0


@dataclass
class ArchConfig:
    m: int = 4                 # number of modalities
    base_channels: int = 32    # encoder stem width
    latent_channels: int = 64  # channels of z
    spatial_scale: int = 4     # encoder downsampling factor

    def to_dict(self):
        return {"m": self.m, "base_channels": self.base_channels,
                "latent_channels": self.latent_channels,
                "spatial_scale": self.spatial_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LatentFeatureMap:
    values: np.ndarray         # (C, h, w)
    spatial_scale: int = 4


@dataclass
class DiscriminatorOutput:
    adv_map: np.ndarray        # (h, w) raw (pre-sigmoid) patch scores
    modality_logits: np.ndarray  # (M,)


@dataclass
class ModelBundle:
    enc_params: dict
    dec_params: dict
    dis_params: dict
    config: ArchConfig
    train_mode: bool = True

    def all_params(self):
        out = {}
        for prefix, group in (("enc", self.enc_params),
                              ("dec", self.dec_params),
                              ("dis", self.dis_params)):
            for name, p in group.items():
                out[f"{prefix}.{name}"] = p
        return out

    def gen_params(self):
        out = {}
        for prefix, group in (("enc", self.enc_params), ("dec", self.dec_params)):
            for name, p in group.items():
                out[f"{prefix}.{name}"] = p
        return out

    def param_count(self):
        return sum(p.data.size for p in self.all_params().values())


# ---------------------------------------------------------------------------
# initialization

def _conv_weight(rng, co, ci, k):
    return ad.Tensor(rng.normal(0.0, 0.02, (co, ci, k, k)).astype(np.float32),
                     requires_grad=True)


def _convt_weight(rng, ci, co, k):
    return ad.Tensor(rng.normal(0.0, 0.02, (ci, co, k, k)).astype(np.float32),
                     requires_grad=True)


def _bias(c):
    return ad.Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)


def _norm_pair(params, name, c):
    params[f"{name}.g"] = ad.Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
    params[f"{name}.b"] = _bias(c)


def _res_params(params, rng, prefix, c):
    params[f"{prefix}.c1.w"] = _conv_weight(rng, c, c, 3)
    _norm_pair(params, f"{prefix}.in1", c)
    params[f"{prefix}.c2.w"] = _conv_weight(rng, c, c, 3)
    _norm_pair(params, f"{prefix}.in2", c)


def init_bundle(config: ArchConfig, seed_or_rng=0) -> ModelBundle:
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    b, cz, m = config.base_channels, config.latent_channels, config.m

    enc = {}
    enc["c1.w"] = _conv_weight(rng, b, 1, 7)
    _norm_pair(enc, "in1", b)
    enc["c2.w"] = _conv_weight(rng, cz, b, 4)
    _norm_pair(enc, "in2", cz)
    enc["c3.w"] = _conv_weight(rng, cz, cz, 4)
    _norm_pair(enc, "in3", cz)
    _res_params(enc, rng, "r1", cz)
    _res_params(enc, rng, "r2", cz)

    cc = cz + m  # conditioned width
    dec = {}
    _res_params(dec, rng, "r1", cc)
    _res_params(dec, rng, "r2", cc)
    dec["d1.w"] = _convt_weight(rng, cc, b, 4)
    _norm_pair(dec, "in1", b)
    dec["d2.w"] = _convt_weight(rng, b, b // 2, 4)
    _norm_pair(dec, "in2", b // 2)
    dec["out.w"] = _conv_weight(rng, 1, b // 2, 7)
    dec["out.b"] = _bias(1)

    dis = {}
    dis["c1.w"] = _conv_weight(rng, b, 1, 4)
    dis["c1.b"] = _bias(b)
    dis["c2.w"] = _conv_weight(rng, 2 * b, b, 4)
    dis["c2.b"] = _bias(2 * b)
    dis["c3.w"] = _conv_weight(rng, 4 * b, 2 * b, 4)
    dis["c3.b"] = _bias(4 * b)
    dis["adv.w"] = _conv_weight(rng, 1, 4 * b, 1)
    dis["adv.b"] = _bias(1)
    dis["mc.w"] = ad.Tensor(rng.normal(0.0, 0.02, (m, 4 * b)).astype(np.float32),
                            requires_grad=True)
    dis["mc.b"] = _bias(m)

    return ModelBundle(enc, dec, dis, config)


# ---------------------------------------------------------------------------
# tape-level forward passes (batched)

def _resblock(p, prefix, x):
    h = ad.conv2d(x, p[f"{prefix}.c1.w"], stride=1, pad=1)
    h = ad.relu(ad.instance_norm2d(h, p[f"{prefix}.in1.g"], p[f"{prefix}.in1.b"]))
    h = ad.conv2d(h, p[f"{prefix}.c2.w"], stride=1, pad=1)
    h = ad.instance_norm2d(h, p[f"{prefix}.in2.g"], p[f"{prefix}.in2.b"])
    return ad.add(x, h)


def enc_forward(bundle, x):
    """x: Tensor (N, 1, H, W) with H, W divisible by 4. No code input."""
    p = bundle.enc_params
    _check_image(x.data, bundle.config.spatial_scale)
    h = ad.conv2d(x, p["c1.w"], stride=1, pad=3)
    h = ad.relu(ad.instance_norm2d(h, p["in1.g"], p["in1.b"]))
    h = ad.conv2d(h, p["c2.w"], stride=2, pad=1)
    h = ad.relu(ad.instance_norm2d(h, p["in2.g"], p["in2.b"]))
    h = ad.conv2d(h, p["c3.w"], stride=2, pad=1)
    h = ad.relu(ad.instance_norm2d(h, p["in3.g"], p["in3.b"]))
    h = _resblock(p, "r1", h)
    return _resblock(p, "r2", h)


def cond_concat(z, codes):
    """Spatially replicate one-hot rows (N, M) and append as channels."""
    n, _, h, w = z.data.shape
    _validate_onehot_rows(codes)
    planes = np.ascontiguousarray(
        np.broadcast_to(codes[:, :, None, None], (n, codes.shape[1], h, w)))
    return ad.concat_channels(z, planes)


def dec_forward(bundle, z, codes):
    """z: Tensor (N, Cz, h, w); codes: numpy one-hot rows (N, M)."""
    p = bundle.dec_params
    h = cond_concat(z, codes)
    h = _resblock(p, "r1", h)
    h = _resblock(p, "r2", h)
    h = ad.conv_transpose2d(h, p["d1.w"], stride=2, pad=1)
    h = ad.relu(ad.instance_norm2d(h, p["in1.g"], p["in1.b"]))
    h = ad.conv_transpose2d(h, p["d2.w"], stride=2, pad=1)
    h = ad.relu(ad.instance_norm2d(h, p["in2.g"], p["in2.b"]))
    h = ad.conv2d(h, p["out.w"], p["out.b"], stride=1, pad=3)
    return ad.tanh(h)


def dis_forward(bundle, x):
    """x: Tensor (N, 1, H, W), H, W divisible by 8. Returns (adv, logits)."""
    global dis_call_count
    dis_call_count += 1
    p = bundle.dis_params
    _check_image(x.data, 8)
    h = ad.leaky_relu(ad.conv2d(x, p["c1.w"], p["c1.b"], stride=2, pad=1))
    h = ad.leaky_relu(ad.conv2d(h, p["c2.w"], p["c2.b"], stride=2, pad=1))
    h = ad.leaky_relu(ad.conv2d(h, p["c3.w"], p["c3.b"], stride=2, pad=1))
    adv = ad.conv2d(h, p["adv.w"], p["adv.b"], stride=1, pad=0)
    logits = ad.linear(ad.global_avg_pool2d(h), p["mc.w"], p["mc.b"])
    return adv, logits


def _check_image(arr, divisor):
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeMismatch(f"expected (N, 1, H, W) image batch, got {arr.shape}")
    if arr.shape[2] % divisor or arr.shape[3] % divisor:
        raise ShapeMismatch(
            f"spatial size {arr.shape[2:]} not divisible by {divisor}")


def _validate_onehot_rows(codes):
    codes = np.asarray(codes)
    ok = np.all(np.isin(codes, (0, 1))) and np.all(codes.sum(axis=-1) == 1)
    if not ok:
        raise InvalidCode(f"modality codes must be one-hot rows, got {codes!r}")


# ---------------------------------------------------------------------------
# single-image convenience ops (numpy in / numpy out, no graph)

def _as_batch(x):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[None]
    return x


def encode(bundle, x) -> LatentFeatureMap:
    """Map one image (H, W) or (1, H, W) to its latent feature map."""
    with ad.no_grad():
        z = enc_forward(bundle, ad.Tensor(_as_batch(x)))
    return LatentFeatureMap(z.data[0], bundle.config.spatial_scale)


def replicate_and_concat(z: LatentFeatureMap, code) -> np.ndarray:
    """Append M constant planes carrying the one-hot code to z (C, h, w)."""
    bits = np.asarray(code, dtype=np.float32)
    _validate_onehot_rows(bits[None])
    c, h, w = z.values.shape
    planes = np.broadcast_to(bits[:, None, None], (bits.shape[0], h, w))
    return np.concatenate([z.values, planes], axis=0)


def decode(bundle, z: LatentFeatureMap, code) -> np.ndarray:
    """Decode a latent map to an image (1, H, W) in [-1, 1]."""
    bits = np.asarray(code, dtype=np.float32)
    with ad.no_grad():
        img = dec_forward(bundle, ad.Tensor(z.values[None]), bits[None])
    return img.data[0]


def discriminate(bundle, x) -> DiscriminatorOutput:
    """Score one image: patch realism map plus modality logits."""
    with ad.no_grad():
        adv, logits = dis_forward(bundle, ad.Tensor(_as_batch(x)))
    return DiscriminatorOutput(adv.data[0, 0], logits.data[0])


# ---------------------------------------------------------------------------
# binary container (shared by checkpoints)

def write_container(path, header: dict, blobs: dict):
    """magic + u32 header length + JSON header + f32-LE blobs, in order."""
    directory = []
    payload = io.BytesIO()
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        directory.append({"name": name, "shape": list(arr.shape)})
        payload.write(arr.astype("<f4").tobytes())
    header = dict(header)
    header["blobs"] = directory
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(payload.getvalue())


def read_container(path):
    """Return (header dict, blobs dict); raises CorruptCheckpoint."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic string")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 4:
        raise CorruptCheckpoint(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + hlen:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable header ({e})") from e
    off += hlen
    blobs = {}
    for entry in header.get("blobs", []):
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if len(raw) < off + nbytes:
            raise CorruptCheckpoint(f"{path}: truncated blob {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=max(1, int(np.prod(shape, dtype=np.int64))),
                            offset=off).reshape(shape)
        blobs[entry["name"]] = arr.astype(np.float32)
        off += nbytes
    if off != len(raw):
        raise CorruptCheckpoint(f"{path}: trailing bytes after blobs")
    return header, blobs
