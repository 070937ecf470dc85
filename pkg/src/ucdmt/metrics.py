"""Evaluation metrics: mean L1 error, SSIM, PSNR, inception score, and the
full cross-direction dataset evaluation report.

Conventions
- metric inputs are images in [-1, 1] as produced by the pipeline;
  metric_l1 rescales internally ([0,255] "byte" scale by default, which is
  how MR synthesis papers usually quote L1), SSIM/PSNR expect the caller to
  map to [0, 1] (evaluate_dataset does).
- SSIM: single-scale, 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03,
  data range 1.0.
- PSNR: data range 1.0, capped at 100 dB below MSE 1e-10.
- Inception score uses a pluggable M-way modality classifier trained on
  real images (same trunk as the discriminator). With M=4 classes IS lives
  in [1, 4]: the reported numbers are NOT comparable to inception scores
  computed with a 1000-class natural-image network.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from ucdmt import autodiff as ad
from ucdmt import losses as L
from ucdmt.data import build_paired_index
from ucdmt.errors import (EmptySet, ImageTooSmall, InvalidDistribution,
                          ShapeMismatch)
from ucdmt.inference import translate_batch
from ucdmt.models import ArchConfig, dis_forward, init_bundle
from ucdmt.training import AdamState, _prefixed, adam_step

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def metric_l1(pred, target, scale="byte"):
    """Mean absolute error after mapping [-1, 1] to [0, 1] or [0, 255]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(pred, target)
    if scale not in ("unit", "byte"):
        raise ValueError(f"scale must be 'unit' or 'byte', got {scale!r}")
    factor = 0.5 if scale == "unit" else 127.5  # (x+1)/2 resp. 255*(x+1)/2
    return float(np.mean(np.abs(pred - target)) * factor)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def metric_ssim(a, b):
    """Single-scale SSIM over valid sliding windows; inputs in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    a = np.squeeze(a)
    b = np.squeeze(b)
    if a.ndim != 2:
        raise ShapeMismatch(f"SSIM expects a single 2-D image, got {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"image {a.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kern = gaussian_window()
    wa = np.lib.stride_tricks.sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = np.lib.stride_tricks.sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = np.tensordot(wa, kern, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, kern, axes=([2, 3], [0, 1]))
    ea2 = np.tensordot(wa * wa, kern, axes=([2, 3], [0, 1]))
    eb2 = np.tensordot(wb * wb, kern, axes=([2, 3], [0, 1]))
    eab = np.tensordot(wa * wb, kern, axes=([2, 3], [0, 1]))
    var_a = ea2 - mu_a ** 2
    var_b = eb2 - mu_b ** 2
    cov = eab - mu_a * mu_b
    c1 = SSIM_K1 ** 2  # data range 1.0
    c2 = SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def metric_psnr(a, b):
    """10 log10(1 / MSE) in dB on [0, 1]-mapped images, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * math.log10(1.0 / mse))


def inception_score(images, classifier, splits=10):
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std).

    ``classifier`` maps a stack of images to (N, M) probability rows.
    """
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise EmptySet("inception score over an empty image set")
    probs = np.asarray(classifier(images), dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != images.shape[0]:
        raise InvalidDistribution(f"classifier returned shape {probs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-5):
        raise InvalidDistribution("classifier rows are not probability vectors")
    splits = max(1, min(splits, probs.shape[0]))
    scores = []
    for chunk in np.array_split(probs, splits):
        marginal = chunk.mean(axis=0)
        logp = np.where(chunk > 0, np.log(np.where(chunk > 0, chunk, 1.0)), 0.0)
        logm = np.log(marginal, out=np.zeros_like(marginal), where=marginal > 0)
        kl = (chunk * (logp - logm)).sum(axis=1)
        scores.append(math.exp(max(0.0, float(kl.mean()))))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# pluggable modality classifier (for the inception score)

@dataclass
class ModalityClassifier:
    """Discriminator-trunk classifier with a softmax head; callable on a
    stack of images (N, 1, H, W) -> (N, M) probabilities."""
    bundle: object
    batch: int = 64

    def __call__(self, images):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[:, None]
        outs = []
        with ad.no_grad():
            for start in range(0, images.shape[0], self.batch):
                _, logits = dis_forward(self.bundle, ad.Tensor(images[start:start + self.batch]))
                z = logits.data - logits.data.max(axis=1, keepdims=True)
                ez = np.exp(z)
                outs.append(ez / ez.sum(axis=1, keepdims=True))
        return np.concatenate(outs, axis=0)


def train_modality_classifier(manifest, split="train_translator", steps=300,
                              batch_size=32, lr=1e-3, seed=0) -> ModalityClassifier:
    """Fit the M-way classifier on real images of one split."""
    index = build_paired_index(manifest, split)
    if not index:
        raise EmptySet(f"no slices in split {split!r}")
    m = manifest.m
    rng = np.random.default_rng(seed)
    bundle = init_bundle(ArchConfig(m=m), rng)
    params = _prefixed(bundle.dis_params, "dis")
    opt = AdamState.for_params(params)
    for _ in range(steps):
        picks = rng.integers(0, len(index), size=batch_size)
        labels = rng.integers(0, m, size=batch_size)
        x = np.stack([index[i].images[lab] for i, lab in zip(picks, labels)])[:, None]
        for p in params.values():
            p.grad = None
        _, logits = dis_forward(bundle, ad.Tensor(x))
        loss = L.modality_classification_loss(logits, labels)
        loss.backward()
        adam_step(params, opt, lr, 0.9)
    bundle.train_mode = False
    return ModalityClassifier(bundle)


# ---------------------------------------------------------------------------
# dataset evaluation

def _mean_stderr(values):
    arr = np.asarray(values, dtype=np.float64)
    n = arr.size
    stderr = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"mean": float(arr.mean()), "stderr": stderr, "n": int(n)}


@dataclass
class MetricsReport:
    directions: dict
    aggregate: dict
    aggregate_self: dict
    baseline: dict
    n_samples: int
    checkpoint_hash: str
    config: dict

    def to_dict(self):
        return {"directions": self.directions, "aggregate": self.aggregate,
                "aggregate_self": self.aggregate_self, "baseline": self.baseline,
                "n_samples": self.n_samples,
                "checkpoint_hash": self.checkpoint_hash, "config": self.config}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
        return path


def _to_unit(img):
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def _per_slice_metrics(fakes, gts):
    l1s, ssims, psnrs = [], [], []
    for f, g in zip(fakes, gts):
        l1s.append(metric_l1(f, g, "byte"))
        ssims.append(metric_ssim(_to_unit(f), _to_unit(g)))
        psnrs.append(metric_psnr(_to_unit(f), _to_unit(g)))
    return l1s, ssims, psnrs


def evaluate_dataset(bundle, manifest, split, report_path=None, classifier=None,
                     include_self=True, is_splits=4, batch=32, workers=1,
                     ckpt_hash=None, classifier_steps=300, progress=None) -> MetricsReport:
    """Translate every slice of ``split`` along all cross-modality directions
    (and self-directions unless disabled), aggregate L1/SSIM/PSNR/IS with
    their dispersions, and include the copy-input baseline for reference.

    ``workers`` > 1 shards directions across threads; the final aggregation
    order is fixed, so reports are identical for any worker count.
    """
    index = build_paired_index(manifest, split)
    if not index:
        raise EmptySet(f"no slices in split {split!r}")
    m = manifest.m
    names = manifest.modality_names
    if classifier is None:
        classifier = train_modality_classifier(manifest, "train_translator",
                                               steps=classifier_steps, seed=0)

    def one_direction(pair):
        a, b = pair
        inputs = np.stack([s.images[a] for s in index])[:, None]
        gts = np.stack([s.images[b] for s in index])[:, None]
        fakes = np.concatenate(
            [translate_batch(bundle, inputs[i:i + batch], b)
             for i in range(0, inputs.shape[0], batch)], axis=0)
        fwd = _per_slice_metrics(fakes[:, 0], gts[:, 0])
        base = _per_slice_metrics(inputs[:, 0], gts[:, 0])
        is_mean, is_std = inception_score(fakes, classifier, splits=is_splits)
        _assert_is_range(is_mean, m)
        if progress is not None:
            progress(f"{names[a]}→{names[b]}")
        return fwd, base, (is_mean, is_std), fakes

    pairs = [(a, b) for a in range(m) for b in range(m)
             if a != b or include_self]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_direction, pairs))
    else:
        results = [one_direction(p) for p in pairs]

    directions, baseline_dirs = {}, {}
    cross = {"l1": [], "ssim": [], "psnr": []}
    base_cross = {"l1": [], "ssim": [], "psnr": []}
    self_vals = {"l1": [], "ssim": [], "psnr": []}
    cross_fakes = []
    for (a, b), ((l1s, ssims, psnrs), (bl1, bssim, bpsnr),
                 (is_mean, is_std), fakes) in zip(pairs, results):
        key = f"{names[a]}→{names[b]}"
        directions[key] = {"l1": _mean_stderr(l1s), "ssim": _mean_stderr(ssims),
                           "psnr": _mean_stderr(psnrs),
                           "is": {"mean": is_mean, "std": is_std},
                           "n": len(index)}
        baseline_dirs[key] = {"l1": _mean_stderr(bl1), "ssim": _mean_stderr(bssim),
                              "psnr": _mean_stderr(bpsnr), "n": len(index)}
        sink = self_vals if a == b else cross
        sink["l1"].extend(l1s)
        sink["ssim"].extend(ssims)
        sink["psnr"].extend(psnrs)
        if a != b:
            cross_fakes.append(fakes)
            base_cross["l1"].extend(bl1)
            base_cross["ssim"].extend(bssim)
            base_cross["psnr"].extend(bpsnr)

    agg_is_mean, agg_is_std = inception_score(
        np.concatenate(cross_fakes, axis=0), classifier, splits=is_splits)
    _assert_is_range(agg_is_mean, m)
    aggregate = {k: _mean_stderr(v) for k, v in cross.items()}
    aggregate["is"] = {"mean": agg_is_mean, "std": agg_is_std}
    aggregate_self = ({k: _mean_stderr(v) for k, v in self_vals.items()}
                      if include_self else None)
    report = MetricsReport(
        directions=directions,
        aggregate=aggregate,
        aggregate_self=aggregate_self,
        baseline={"directions": baseline_dirs,
                  "aggregate": {k: _mean_stderr(v) for k, v in base_cross.items()}},
        n_samples=len(index),
        checkpoint_hash=ckpt_hash,
        config={"split": split, "include_self": include_self,
                "is_splits": is_splits, "m": m})
    if report_path:
        report.save(report_path)
    return report


def _assert_is_range(value, m):
    if not (1.0 - 1e-9 <= value <= m + 1e-6):
        raise InvalidDistribution(f"inception score {value} outside [1, {m}]")


def write_sample_grid(path, inputs, outputs, gts, max_rows=8):
    """PNG grid of (input, output, ground-truth) triplets, one row each."""
    from PIL import Image

    rows = min(len(inputs), max_rows)
    tiles = []
    for i in range(rows):
        row = [np.squeeze(inputs[i]), np.squeeze(outputs[i]), np.squeeze(gts[i])]
        tiles.append(np.concatenate([_to_unit(t) for t in row], axis=1))
    grid = np.concatenate(tiles, axis=0)
    img = Image.fromarray((np.clip(grid, 0, 1) * 255).astype(np.uint8), mode="L")
    img.save(path)
    return path
