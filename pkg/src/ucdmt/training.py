"""Alternating adversarial training with the cycle built by recalling the
single conditioned autoencoder twice, plus seeding, logging, checkpointing.

Schedule: one discriminator update then one generator update per batch.
Runs are bit-reproducible for a fixed seed in single-threaded mode; the
checkpoint round trip (parameters, Adam moments, counters, sampler rng) is
lossless, so a resumed run continues exactly where the original would have.
"""

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from ucdmt import autodiff as ad
from ucdmt import losses as L
from ucdmt.data import Batch, build_paired_index, sample_training_batch
from ucdmt.errors import ConfigError, CorruptCheckpoint, NonFiniteLoss
from ucdmt.models import (ArchConfig, ModelBundle, dec_forward, dis_forward,
                          enc_forward, init_bundle, read_container,
                          write_container)

ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    disen_off: bool = False
    gan_mode: str = "nonsaturating"
    dmc_on_fakes: bool = True
    lr_gen: float = 1e-3
    lr_dis: float = 1e-4
    momentum_beta1: float = 0.5
    batch_size: int = 64
    epochs: int = 100
    seed: int = 7
    log_every: int = 20
    checkpoint_every: int = 500

    def validate(self):
        self.weights.validate()
        if self.lr_gen <= 0 or self.lr_dis <= 0:
            raise ValueError("learning rates must be > 0")
        if self.gan_mode not in L.GAN_MODES:
            raise ValueError(f"gan_mode must be one of {L.GAN_MODES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        return self

    def to_dict(self):
        d = asdict(self)
        return d


_WEIGHT_KEYS = ("alpha", "beta", "lambda1", "lambda2", "w_disen")
_TOP_KEYS = ("weights", "disen_off", "gan_mode", "dmc_on_fakes", "lr_gen",
             "lr_dis", "momentum_beta1", "batch_size", "epochs", "seed",
             "log_every", "checkpoint_every")


def config_from_dict(doc) -> TrainConfig:
    """Strict parse: unknown keys rejected, missing keys take the defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    wdoc = doc.get("weights", {})
    if not isinstance(wdoc, dict):
        raise ConfigError("weights: must be an object")
    for key in wdoc:
        if key not in _WEIGHT_KEYS:
            raise ConfigError(f"unknown config key weights.{key!r}")
    try:
        weights = L.LossWeights(**{k: float(v) for k, v in wdoc.items()})
        cfg = TrainConfig(weights=weights,
                          **{k: v for k, v in doc.items() if k != "weights"})
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params, state, lr, beta1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """In-place Adam update from the .grad fields of ``params``."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainState:
    bundle: ModelBundle
    adam_gen: AdamState
    adam_dis: AdamState
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = None
    config_echo: dict = None  # train config of the producing run, if known


def init_train_state(config: TrainConfig, arch: ArchConfig = None) -> TrainState:
    arch = arch or ArchConfig()
    ss_init, ss_batch = np.random.SeedSequence(config.seed).spawn(2)
    bundle = init_bundle(arch, np.random.default_rng(ss_init))
    return TrainState(
        bundle=bundle,
        adam_gen=AdamState.for_params(bundle.gen_params()),
        adam_dis=AdamState.for_params(_prefixed(bundle.dis_params, "dis")),
        rng=np.random.default_rng(ss_batch))


def _prefixed(group, prefix):
    return {f"{prefix}.{k}": p for k, p in group.items()}


def _onehot(indices, m):
    out = np.zeros((len(indices), m), dtype=np.float32)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def _zero_grads(bundle):
    for p in bundle.all_params().values():
        p.grad = None


# ---------------------------------------------------------------------------
# forward passes and update steps

def forward_cycle(bundle, x, m_x, m_y):
    """Run the autoencoder twice with one parameter set.

    z_real = Enc(x); x_to_y = Dec(z_real, m_y); z_fake = Enc(x_to_y);
    x_back = Dec(z_fake, m_x). Accepts a Tensor (graph is recorded) or a
    numpy batch (pure evaluation). Codes are index arrays or one-hot rows.
    """
    m = bundle.config.m
    codes_x = m_x if np.asarray(m_x).ndim == 2 else _onehot(np.atleast_1d(m_x), m)
    codes_y = m_y if np.asarray(m_y).ndim == 2 else _onehot(np.atleast_1d(m_y), m)
    tape = isinstance(x, ad.Tensor)
    xt = x if tape else ad.Tensor(np.asarray(x, dtype=np.float32))

    def run():
        z_real = enc_forward(bundle, xt)
        x_to_y = dec_forward(bundle, z_real, codes_y)
        z_fake = enc_forward(bundle, x_to_y)
        x_back = dec_forward(bundle, z_fake, codes_x)
        return x_to_y, x_back, z_real, z_fake

    if tape:
        return run()
    with ad.no_grad():
        outs = run()
    return tuple(o.data for o in outs)


def train_discriminator_step(state: TrainState, batch: Batch, config: TrainConfig):
    """One Adam update of Dis only; fakes are generated without a graph."""
    bundle = state.bundle
    m = bundle.config.m
    codes_y = _onehot(batch.m_y, m)
    with ad.no_grad():
        z = enc_forward(bundle, ad.Tensor(batch.x))
        fake = dec_forward(bundle, z, codes_y).data

    _zero_grads(bundle)
    adv_real, _ = dis_forward(bundle, ad.Tensor(batch.x_y))
    adv_fake, logits_fake = dis_forward(bundle, ad.Tensor(fake))
    _, logits_real = dis_forward(bundle, ad.Tensor(batch.x))

    adv_d = L.adversarial_loss_d(adv_real, adv_fake)
    mc_d = L.modality_classification_loss(logits_real, batch.m_x)
    if config.dmc_on_fakes:
        mc_d = ad.add(mc_d, L.modality_classification_loss(logits_fake, batch.m_y))
    total = L.discriminator_objective(adv_d, mc_d, config.weights)

    scalars = {"adv_d": adv_d.item(), "mc_d": mc_d.item(), "total_d": total.item()}
    _check_finite(scalars, state.step)
    total.backward()
    adam_step(_prefixed(bundle.dis_params, "dis"), state.adam_dis,
              config.lr_dis, config.momentum_beta1)
    return scalars


def train_generator_step(state: TrainState, batch: Batch, config: TrainConfig):
    """One Adam update of Enc+Dec; returns the loss breakdown."""
    bundle = state.bundle
    m = bundle.config.m

    _zero_grads(bundle)
    x = ad.Tensor(batch.x)
    x_to_y, x_back, z_real, z_fake = forward_cycle(bundle, x, batch.m_x, batch.m_y)
    adv_fake, logits_fake = dis_forward(bundle, x_to_y)

    l1 = L.translation_l1(x_to_y, ad.Tensor(batch.x_y))
    cyc = L.cycle_reconstruction_loss(x_back, x)
    adv_g = L.adversarial_loss_g(adv_fake, config.gan_mode)
    mc_g = L.modality_classification_loss(logits_fake, batch.m_y)
    # the real-image classification term is constant w.r.t. Enc/Dec: add its
    # value for the reported loss but skip its (generator-zero) gradient
    with ad.no_grad():
        _, logits_real = dis_forward(bundle, ad.Tensor(batch.x))
    mc_real = L.modality_classification_loss(logits_real, batch.m_x).item()
    mc_g = mc_g + mc_real
    disen = L.disentanglement_loss(z_fake, z_real)

    total, breakdown = L.generator_objective(
        l1, cyc, adv_g, mc_g, disen, config.weights, config.disen_off)
    _check_finite({"total_g": breakdown.total, "l1": breakdown.l1_translation,
                   "cycle": breakdown.l1_cycle, "adv_g": breakdown.adv,
                   "mc_g": breakdown.mc, "disen": breakdown.disen}, state.step)
    total.backward()
    adam_step(bundle.gen_params(), state.adam_gen,
              config.lr_gen, config.momentum_beta1)
    return breakdown


def _check_finite(scalars, step):
    bad = {k: v for k, v in scalars.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteLoss(f"non-finite loss at step {step}: {bad}")


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(state: TrainState, path, train_config: TrainConfig = None):
    bundle = state.bundle
    blobs = {}
    for name, p in bundle.all_params().items():
        blobs[f"param.{name}"] = p.data
    for group, opt in (("gen", state.adam_gen), ("dis", state.adam_dis)):
        for name, arr in opt.m.items():
            blobs[f"adam.{group}.m.{name}"] = arr
        for name, arr in opt.v.items():
            blobs[f"adam.{group}.v.{name}"] = arr
    header = {
        "format": "UCDMT1",
        "arch": bundle.config.to_dict(),
        "m": bundle.config.m,
        "step": state.step,
        "epoch": state.epoch,
        "adam_t": {"gen": state.adam_gen.t, "dis": state.adam_dis.t},
        "rng_state": state.rng.bit_generator.state if state.rng is not None else None,
    }
    echo = train_config.to_dict() if train_config is not None else state.config_echo
    if echo is not None:
        header["train_config"] = echo
    write_container(path, header, blobs)
    return path


def load_checkpoint(path) -> TrainState:
    header, blobs = read_container(path)
    arch = ArchConfig.from_dict(header["arch"])
    bundle = init_bundle(arch, np.random.default_rng(0))
    for name, p in bundle.all_params().items():
        key = f"param.{name}"
        if key not in blobs:
            raise CorruptCheckpoint(f"{path}: missing parameter blob {key}")
        if blobs[key].shape != p.data.shape:
            raise CorruptCheckpoint(
                f"{path}: blob {key} has shape {blobs[key].shape}, expected {p.data.shape}")
        p.data = np.ascontiguousarray(blobs[key])

    def opt_for(group, params):
        opt = AdamState.for_params(params)
        opt.t = header.get("adam_t", {}).get(group, 0)
        for name in params:
            mk, vk = f"adam.{group}.m.{name}", f"adam.{group}.v.{name}"
            if mk in blobs:
                opt.m[name] = np.ascontiguousarray(blobs[mk])
            if vk in blobs:
                opt.v[name] = np.ascontiguousarray(blobs[vk])
        return opt

    rng = None
    if header.get("rng_state") is not None:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = header["rng_state"]
    state = TrainState(
        bundle=bundle,
        adam_gen=opt_for("gen", bundle.gen_params()),
        adam_dis=opt_for("dis", _prefixed(bundle.dis_params, "dis")),
        step=header.get("step", 0),
        epoch=header.get("epoch", 0),
        rng=rng,
        config_echo=header.get("train_config"))
    return state


def load_bundle(path) -> ModelBundle:
    """Inference-side convenience: parameters only, eval mode."""
    state = load_checkpoint(path)
    state.bundle.train_mode = False
    return state.bundle


# ---------------------------------------------------------------------------
# the loop

def steps_per_epoch(n_slices, m, batch_size):
    """Batches per epoch: every retained slice seen once per input modality
    in expectation."""
    return max(1, math.ceil(n_slices * m / batch_size))


def run_training(config: TrainConfig, manifest, out_dir, resume_from=None,
                 progress=None) -> TrainState:
    """Train on the manifest's train_translator split.

    Writes the resolved config, a JSONL loss log, periodic checkpoints and
    final.ckpt into out_dir. On a non-finite loss a diagnostic dump and an
    abort checkpoint are written before the error propagates.
    """
    config.validate()
    m = manifest.m
    if config.batch_size % m:
        raise ConfigError(f"batch_size {config.batch_size} not divisible by M={m}")
    index = build_paired_index(manifest, "train_translator")
    if not index:
        raise ConfigError("train_translator split has no usable slices")

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2)

    state = load_checkpoint(resume_from) if resume_from else init_train_state(config)
    spe = steps_per_epoch(len(index), m, config.batch_size)
    total_steps = spe * config.epochs

    log_path = os.path.join(out_dir, "train_log.jsonl")
    log_f = open(log_path, "a", encoding="utf-8")
    try:
        while state.step < total_steps:
            batch = sample_training_batch(index, config.batch_size, state.rng, m)
            d_scalars = train_discriminator_step(state, batch, config)
            g_break = train_generator_step(state, batch, config)
            state.step += 1
            state.epoch = state.step // spe
            if config.log_every and state.step % config.log_every == 0:
                log_f.write(json.dumps({
                    "step": state.step,
                    "l1": g_break.l1_translation,
                    "cycle": g_break.l1_cycle,
                    "adv_g": g_break.adv,
                    "adv_d": d_scalars["adv_d"],
                    "mc_g": g_break.mc,
                    "mc_d": d_scalars["mc_d"],
                    "disen": g_break.disen,
                    "total_g": g_break.total,
                    "total_d": d_scalars["total_d"],
                }) + "\n")
                log_f.flush()
            if config.checkpoint_every and state.step % config.checkpoint_every == 0 \
                    and state.step < total_steps:
                save_checkpoint(state, os.path.join(out_dir, f"ckpt_{state.step:06d}.ckpt"),
                                config)
            if progress is not None:
                progress(state.step, total_steps, g_break)
    except NonFiniteLoss as e:
        save_checkpoint(state, os.path.join(out_dir, "abort.ckpt"), config)
        with open(os.path.join(out_dir, "non_finite_dump.json"), "w") as f:
            json.dump({"step": state.step, "error": str(e)}, f, indent=2)
        raise
    finally:
        log_f.close()

    save_checkpoint(state, os.path.join(out_dir, "final.ckpt"), config)
    return state
