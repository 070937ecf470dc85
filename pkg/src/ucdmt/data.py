"""Volume ingestion, preprocessing, paired-slice indexing, balanced batch
sampling, and a deterministic synthetic multimodal phantom generator.

Dataset directory layout (also written by the phantom generator):

    <root>/<subject_id>/<modality>.raw   32-bit IEEE-754 little-endian,
                                         row-major, slices outermost (D, H, W)
    <root>/manifest.json                 M, modality names in fixed order,
                                         per-subject shapes [H, W, D], split
                                         assignments, generator seed

Modality order is fixed everywhere: t1, t1ce, t2, flair. Axial slices are
taken along the third volume axis; a slice is kept when the brain-pixel
count (nonzero voxels of the reference t1 volume, before intensity scaling)
reaches the filter threshold. Phantom manifests carry an area-scaled
threshold so that the 2000-pixel rule, stated for 240x240 acquisitions,
keeps its meaning at desk-scale image sizes.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ucdmt.errors import (IndivisibleBatch, InvalidCode, IoFailure,
                          MissingModality, MissingSubject, ShapeMismatch)

MODALITY_NAMES = ("t1", "t1ce", "t2", "flair")
DEFAULT_SLICE_THRESHOLD = 2000   # pixels, defined at 240x240 resolution
REFERENCE_AREA = 240 * 240
SPLITS = ("train_translator", "test", "train_segmentor")


def scaled_threshold(height, width):
    """2000-pixel rule rescaled to another slice area (min 1 pixel)."""
    return max(1, round(DEFAULT_SLICE_THRESHOLD * (height * width) / REFERENCE_AREA))


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class ModalityCode:
    """One-hot modality identifier; bits has exactly one 1."""
    bits: tuple

    def __post_init__(self):
        if sum(self.bits) != 1 or any(b not in (0, 1) for b in self.bits):
            raise InvalidCode(f"not a one-hot vector: {self.bits}")

    @classmethod
    def from_index(cls, index, m=4):
        if not 0 <= index < m:
            raise InvalidCode(f"modality index {index} out of range for M={m}")
        return cls(tuple(1 if i == index else 0 for i in range(m)))

    @classmethod
    def from_name(cls, name, m=4):
        try:
            return cls.from_index(MODALITY_NAMES.index(name), m)
        except ValueError:
            raise InvalidCode(f"unknown modality {name!r}; expected one of {MODALITY_NAMES}")

    @property
    def m(self):
        return len(self.bits)

    @property
    def index(self):
        return self.bits.index(1)

    @property
    def name(self):
        return MODALITY_NAMES[self.index]

    def onehot(self, dtype=np.float32):
        return np.asarray(self.bits, dtype=dtype)


@dataclass
class Volume:
    """One subject's 3-D scan for one modality, (H, W, D)."""
    voxels: np.ndarray
    subject_id: str
    modality: ModalityCode

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeMismatch(f"volume must be 3-D, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError(f"volume {self.subject_id}/{self.modality.name} has non-finite voxels")


@dataclass
class PairedSlice:
    """One axial slice with all M co-registered modality images in [-1, 1]."""
    subject_id: str
    slice_index: int
    images: np.ndarray        # (M, H, W) float32
    brain_pixel_count: int


@dataclass
class SubjectRecord:
    subject_id: str
    files: dict               # modality name -> path relative to root
    shape: tuple              # (H, W, D)
    split: str


@dataclass
class DatasetManifest:
    root_path: str
    subjects: list
    m: int = 4
    modality_names: tuple = MODALITY_NAMES
    seed: int = None
    slice_filter_threshold: int = None

    def subjects_in(self, split=None):
        return [s for s in self.subjects if split is None or s.split == split]

    def threshold(self):
        return (self.slice_filter_threshold if self.slice_filter_threshold is not None
                else DEFAULT_SLICE_THRESHOLD)

    def save(self, path=None):
        path = path or os.path.join(self.root_path, "manifest.json")
        doc = {
            "m": self.m,
            "modalities": list(self.modality_names),
            "seed": self.seed,
            "slice_filter_threshold": self.slice_filter_threshold,
            "subjects": [
                {"id": s.subject_id, "files": s.files,
                 "shape": list(s.shape), "split": s.split}
                for s in self.subjects
            ],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
        return path

    @classmethod
    def load(cls, root_or_path):
        path = (root_or_path if root_or_path.endswith(".json")
                else os.path.join(root_or_path, "manifest.json"))
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        subjects = [SubjectRecord(d["id"], d["files"], tuple(d["shape"]), d["split"])
                    for d in doc["subjects"]]
        return cls(root_path=os.path.dirname(os.path.abspath(path)),
                   subjects=subjects, m=doc["m"],
                   modality_names=tuple(doc["modalities"]),
                   seed=doc.get("seed"),
                   slice_filter_threshold=doc.get("slice_filter_threshold"))


@dataclass
class PhantomSpec:
    """Desk-scale synthetic dataset: shared anatomy, M contrast transfers."""
    n_subjects: int = 14
    image_size: int = 64
    slices_per_subject: int = 8
    lesion_probability: float = 0.5
    noise_sigma: float = 0.02
    seed: int = 7

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")


# ---------------------------------------------------------------------------
# raw volume I/O

def save_volume_raw(path, voxels):
    """float32 LE, row-major, slices outermost: file order is (D, H, W)."""
    arr = np.ascontiguousarray(np.transpose(voxels, (2, 0, 1)), dtype="<f4")
    try:
        with open(path, "wb") as f:
            f.write(arr.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_volume_raw(path, shape):
    """Read a (H, W, D) volume written by save_volume_raw."""
    h, w, d = shape
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise MissingModality(f"cannot read {path}: {e}") from e
    if raw.size != h * w * d:
        raise IoFailure(f"{path}: expected {h * w * d} voxels, found {raw.size}")
    return np.ascontiguousarray(raw.reshape(d, h, w).transpose(1, 2, 0))


def load_subject_volumes(manifest, record):
    """All M volumes of a subject, ordered by modality index."""
    volumes = []
    for i, name in enumerate(manifest.modality_names):
        rel = record.files.get(name)
        if rel is None:
            raise MissingModality(f"subject {record.subject_id} lacks modality {name}")
        path = os.path.join(manifest.root_path, rel)
        if not os.path.exists(path):
            raise MissingModality(f"subject {record.subject_id}: missing file {path}")
        volumes.append(Volume(load_volume_raw(path, record.shape),
                              record.subject_id,
                              ModalityCode.from_index(i, manifest.m)))
    return volumes


# ---------------------------------------------------------------------------
# preprocessing

def scale_intensities(volume: Volume) -> Volume:
    """Linearly map voxel intensities to [-1, 1] per volume.

    Constant volumes map to all zeros (the scale is undefined; zero is the
    neutral value of the target range).
    """
    v = volume.voxels
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        scaled = np.zeros_like(v)
    else:
        scaled = (2.0 * (v - lo) / (hi - lo) - 1.0).astype(np.float32)
    return Volume(scaled, volume.subject_id, volume.modality)


def brain_pixel_counts(reference: Volume) -> np.ndarray:
    """Nonzero-voxel count of each axial slice, before any scaling."""
    return np.count_nonzero(reference.voxels, axis=(0, 1))


def extract_valid_slices(volumes, threshold=DEFAULT_SLICE_THRESHOLD):
    """Slice M co-registered volumes axially, keeping slices whose brain
    area (nonzero pixels of the reference modality, i.e. index 0, before
    scaling) reaches ``threshold``. Kept slices carry all M images scaled
    to [-1, 1].
    """
    shapes = {v.voxels.shape for v in volumes}
    if len(shapes) != 1:
        raise ShapeMismatch(f"modality volumes disagree in shape: {sorted(shapes)}")
    counts = brain_pixel_counts(volumes[0])
    scaled = [scale_intensities(v).voxels for v in volumes]
    out = []
    for d in range(volumes[0].voxels.shape[2]):
        if counts[d] >= threshold:
            images = np.stack([s[:, :, d] for s in scaled]).astype(np.float32)
            out.append(PairedSlice(volumes[0].subject_id, d, images, int(counts[d])))
    return out


def build_paired_index(manifest: DatasetManifest, split=None):
    """Load every subject (optionally one split) into a flat slice index."""
    index = []
    for record in manifest.subjects_in(split):
        volumes = load_subject_volumes(manifest, record)
        index.extend(extract_valid_slices(volumes, manifest.threshold()))
    return index


# ---------------------------------------------------------------------------
# balanced batch sampling

@dataclass
class Batch:
    x: np.ndarray        # (B, 1, H, W) input images
    m_x: np.ndarray      # (B,) input modality indices
    x_y: np.ndarray      # (B, 1, H, W) co-registered targets
    m_y: np.ndarray      # (B,) target modality indices


def sample_training_batch(index, batch_size, rng, m=4) -> Batch:
    """Draw a batch with exactly batch_size/M samples per input modality.

    Target modalities are uniform over all M (self-translation included);
    the target image is the co-registered slice of the drawn modality.
    Deterministic given the generator state.
    """
    if batch_size % m:
        raise IndivisibleBatch(f"batch_size {batch_size} not divisible by M={m}")
    if not index:
        raise ValueError("empty slice index")
    per = batch_size // m
    xs, mxs, ys, mys = [], [], [], []
    for mx in range(m):
        picks = rng.integers(0, len(index), size=per)
        targets = rng.integers(0, m, size=per)
        for slot, my in zip(picks, targets):
            images = index[slot].images
            xs.append(images[mx])
            ys.append(images[my])
            mxs.append(mx)
            mys.append(my)
    x = np.stack(xs)[:, None].astype(np.float32)
    x_y = np.stack(ys)[:, None].astype(np.float32)
    return Batch(x, np.asarray(mxs), x_y, np.asarray(mys))


# ---------------------------------------------------------------------------
# phantom generator

def _smooth_texture(rng, size, depth):
    noise = rng.standard_normal((size, size, depth))
    tex = ndimage.gaussian_filter(noise, sigma=(size / 10.0, size / 10.0, 1.0))
    tex -= tex.min()
    peak = tex.max()
    if peak > 0:
        tex /= peak
    return tex


def _ellipse_mask(size, cx, cy, rx, ry, theta):
    yy, xx = np.mgrid[0:size, 0:size]
    xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    return (xr / rx) ** 2 + (yr / ry) ** 2 <= 1.0


def _subject_anatomy(rng, spec):
    """Shared anatomy field a in [0, 1] plus a lesion mask, both (S, S, K)."""
    s, k = spec.image_size, spec.slices_per_subject
    cx = s / 2 + rng.uniform(-0.03, 0.03) * s
    cy = s / 2 + rng.uniform(-0.03, 0.03) * s
    rx = rng.uniform(0.32, 0.42) * s
    ry = rng.uniform(0.32, 0.42) * s
    theta = rng.uniform(0, np.pi)
    tex = _smooth_texture(rng, s, k)
    # head narrows toward the first/last slices, like an ellipsoid
    centers = (np.arange(k) - (k - 1) / 2) / max(k / 2, 1)
    fade = np.sqrt(np.clip(1.0 - 0.35 * centers ** 2, 0.0, 1.0))

    has_lesion = rng.uniform() < spec.lesion_probability
    lr = rng.uniform(0.06, 0.12) * s
    phi = rng.uniform(0, 2 * np.pi)
    rho = rng.uniform(0, 0.5)
    lx = cx + rho * rx * np.cos(phi)
    ly = cy + rho * ry * np.sin(phi)
    ld = rng.uniform(0.25, 0.75) * (k - 1)
    lz = rng.uniform(0.2, 0.45) * k

    anatomy = np.zeros((s, s, k), dtype=np.float64)
    lesion = np.zeros((s, s, k), dtype=np.float64)
    yy, xx = np.mgrid[0:s, 0:s]
    for d in range(k):
        mask = _ellipse_mask(s, cx, cy, rx * fade[d], ry * fade[d], theta)
        anatomy[:, :, d] = mask * (0.25 + 0.7 * tex[:, :, d])
        if has_lesion:
            r2 = (((xx - lx) / lr) ** 2 + ((yy - ly) / lr) ** 2
                  + ((d - ld) / lz) ** 2)
            lesion[:, :, d] = mask * np.exp(-1.5 * r2)
    return anatomy, lesion


def modality_transfer(anatomy, lesion, modality_index):
    """Fixed per-modality appearance maps over shared anatomy a in [0, 1]."""
    a = anatomy
    if modality_index == 0:
        return 2.0 * a - 1.0
    if modality_index == 1:
        return np.clip(2.0 * a - 1.0 + 0.6 * lesion, -1.0, 1.0)
    if modality_index == 2:
        return 1.0 - 2.0 * a
    if modality_index == 3:
        return 2.0 * a ** 2 - 1.0
    raise InvalidCode(f"phantom supports 4 modalities, got index {modality_index}")


def generate_phantom_dataset(spec: PhantomSpec, output_dir) -> DatasetManifest:
    """Write a complete phantom dataset; byte-identical for equal specs."""
    rng = np.random.default_rng(spec.seed)
    try:
        os.makedirs(output_dir, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {output_dir}: {e}") from e
    if not os.access(output_dir, os.W_OK):
        raise IoFailure(f"output directory {output_dir} is not writable")

    n_train = int(round(0.7 * spec.n_subjects)) if spec.n_subjects > 1 else spec.n_subjects
    subjects = []
    for si in range(spec.n_subjects):
        sid = f"s{si:03d}"
        anatomy, lesion = _subject_anatomy(rng, spec)
        subject_dir = os.path.join(output_dir, sid)
        os.makedirs(subject_dir, exist_ok=True)
        files = {}
        for mi, name in enumerate(MODALITY_NAMES):
            clean = modality_transfer(anatomy, lesion, mi)
            noisy = clean + rng.normal(0.0, spec.noise_sigma, clean.shape)
            img = np.clip(noisy, -1.0, 1.0).astype(np.float32)
            rel = os.path.join(sid, f"{name}.raw")
            save_volume_raw(os.path.join(output_dir, rel), img)
            files[name] = rel
        split = "train_translator" if si < n_train else "test"
        subjects.append(SubjectRecord(
            sid, files, (spec.image_size, spec.image_size, spec.slices_per_subject),
            split))

    manifest = DatasetManifest(
        root_path=os.path.abspath(output_dir), subjects=subjects,
        m=len(MODALITY_NAMES), modality_names=MODALITY_NAMES, seed=spec.seed,
        slice_filter_threshold=scaled_threshold(spec.image_size, spec.image_size))
    manifest.save()
    return manifest
