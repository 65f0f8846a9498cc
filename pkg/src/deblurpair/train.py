"""Training procedure: Adam optimization in a fixed three-phase step order
(denoise, discriminator, generator), epoch loop with deterministic
shuffling and augmentation, and lossless checkpointing.

Determinism contract: with a fixed seed and the single-worker loader, all
randomness derives from (seed, epoch), so an interrupted run resumed from
an epoch checkpoint reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from . import datagen, imgproc, losses, nets
from .datagen import ImageTriple
from .losses import LossWeights
from .nets import NetConfig

CHECKPOINT_MAGIC = b"DBLRPAIR-CKPT-1\n"


class DivergedTrainingError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, message, record=None, last_checkpoint=None):
        super().__init__(message)
        self.record = record
        self.last_checkpoint = last_checkpoint


class UnsupportedCheckpointError(RuntimeError):
    """Raised when a checkpoint file does not carry the expected header."""


@dataclass
class TrainConfig:
    model: str = "rnn"
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    crop: int = 256
    batch_size: int = 4
    init_std: float = 0.02
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    data_root: str = ""
    checkpoint_dir: str = ""
    net: NetConfig = field(default_factory=NetConfig)
    dc_patch: int = losses.DEFAULT_DC_PATCH
    flip_augment: bool = True
    use_true_exposure: bool = True
    non_saturating_adv: bool = False
    lr_decay: bool = False

    def __post_init__(self):
        if self.model not in ("rnn", "merger"):
            raise ValueError(f"model must be 'rnn' or 'merger', got {self.model!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.beta1 < 1:
            raise ValueError("beta1 must be in [0, 1)")
        if self.crop % self.net.size_divisor:
            raise ValueError(
                f"crop {self.crop} not divisible by 2^encoder_depth "
                f"({self.net.size_divisor})"
            )


class Batch(NamedTuple):
    noisy: torch.Tensor   # exposure pre-scaled
    blurry: torch.Tensor
    sharp: torch.Tensor


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _all_finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(np.asarray(x)).all())


def adam_update(param, grad, moments, step, lr, beta1=0.5, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; works on tensors, arrays or scalars.

    step is the 1-based update count.  Returns (new parameter, new moments).
    """
    if not _all_finite(grad):
        raise DivergedTrainingError("non-finite gradient")
    m, v = moments
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return param - lr * m_hat / (v_hat**0.5 + eps), (m, v)


class Adam:
    """Adam over a fixed dict of named parameters, moments kept per name."""

    def __init__(self, params: dict[str, nn.Parameter], lr, beta1=0.5,
                 beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            new_p, (m, v) = adam_update(
                p, p.grad, (self.m[k], self.v[k]), self.t,
                self.lr, self.beta1, self.beta2, self.eps,
            )
            p.copy_(new_p)
            self.m[k] = m
            self.v[k] = v


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _burn_in_sn_u(layer, max_iters: int = 1000, tol: float = 1e-12):
    """Run the power iteration to convergence so the stored u estimate
    starts at the top singular vector of the freshly drawn weight."""
    w = layer.weight.detach().double()
    if getattr(layer, "transposed", False):
        w = w.transpose(0, 1)
    w = w.reshape(w.shape[0], -1)
    u = layer.sn_u.double()
    prev = None
    for _ in range(max_iters):
        v = nets.l2_normalize(w.t().mv(u))
        u = nets.l2_normalize(w.mv(v))
        sigma = float(u.dot(w.mv(v)))
        if prev is not None and abs(sigma - prev) <= tol * max(abs(sigma), 1e-12):
            break
        prev = sigma
    layer.sn_u.copy_(u.to(layer.sn_u.dtype))


def init_weights(module: nn.Module, seed: int, std: float = 0.02) -> nn.Module:
    """Gaussian init: conv/affine weights N(0, std^2), biases zero, batch
    norm scale 1 / shift 0, spectral-norm u from a normalized unit Gaussian
    (then iterated to convergence)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, m in module.named_modules():
            if isinstance(m, (nets.SNConv2d, nets.SNLinear)):
                m.weight.normal_(0.0, std, generator=g)
                m.bias.zero_()
                if m.spectral:
                    u = torch.randn(m.sn_u.shape, generator=g, dtype=m.sn_u.dtype)
                    m.sn_u.copy_(nets.l2_normalize(u))
                    _burn_in_sn_u(m)
            elif isinstance(m, nn.Conv2d):
                m.weight.normal_(0.0, std, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return module


# ---------------------------------------------------------------------------
# train state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: nn.Module
    disc: nn.Module
    opt_denoise: Optional[Adam]
    opt_gen: Adam
    opt_disc: Adam
    step: int
    epoch: int          # completed epochs
    config: TrainConfig


def init_state(config: TrainConfig) -> TrainState:
    model = nets.build_generator(config.model, config.net)
    disc = nets.Discriminator(config.net, input_size=config.crop)
    init_weights(model, config.seed, config.init_std)
    init_weights(disc, config.seed + 1, config.init_std)

    lr, b1, b2, eps = (config.learning_rate, config.beta1, config.beta2,
                       config.adam_eps)
    if config.model == "rnn":
        opt_denoise = Adam(
            {n: p for n, p in model.named_parameters() if n.startswith("denoise.")},
            lr, b1, b2, eps,
        )
        gen_params = {n: p for n, p in model.named_parameters() if n.startswith("deblur.")}
    else:
        opt_denoise = None
        gen_params = dict(model.named_parameters())
    return TrainState(
        model=model,
        disc=disc,
        opt_denoise=opt_denoise,
        opt_gen=Adam(gen_params, lr, b1, b2, eps),
        opt_disc=Adam(dict(disc.named_parameters()), lr, b1, b2, eps),
        step=0,
        epoch=0,
        config=config,
    )


def _require_finite(value: torch.Tensor, what: str, record=None):
    if not torch.isfinite(value).all():
        raise DivergedTrainingError(f"{what} is non-finite", record=record)


def train_step(state: TrainState, batch: Batch, config: Optional[TrainConfig] = None,
               phase_hook: Optional[Callable[[str], None]] = None):
    """One optimization iteration in strict phase order.

    DeblurRNN: denoising net on its content objective, then the
    discriminator on real/fake pairs (fake detached), then the deblurring
    generator on the combined objective with the discriminator frozen.
    DeblurMerger skips the first phase.
    """
    config = config or state.config
    model, disc = state.model, state.disc
    model.train()
    disc.train()
    noisy, blurry, sharp = batch
    w = config.loss_weights

    l_denoise = 0.0
    if isinstance(model, nets.DeblurRNN):
        denoised, lstm_state = model.denoise(noisy)
        dn_loss = losses.denoise_loss(denoised, sharp, w.lambda_c1)
        _require_finite(dn_loss, "denoise loss")
        state.opt_denoise.zero_grad()
        dn_loss.backward()
        state.opt_denoise.step()
        l_denoise = float(dn_loss.detach())
        if phase_hook:
            phase_hook("denoise")
        handoff = nets.RecurrentState(
            hidden=lstm_state.hidden.detach(), cell=lstm_state.cell.detach()
        )
        fake, _ = model.deblur(
            torch.cat([denoised.detach(), blurry], dim=1), handoff
        )
    else:
        fake = model(noisy, blurry)

    d_real = disc(sharp, blurry)
    d_fake = disc(fake.detach(), blurry)
    d_loss = losses.adversarial_loss_discriminator(d_real, d_fake)
    _require_finite(d_loss, "discriminator loss")
    state.opt_disc.zero_grad()
    d_loss.backward()
    state.opt_disc.step()
    if phase_hook:
        phase_hook("discriminator")

    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        d_fake_updated = disc(fake, blurry)
        breakdown = losses.total_deblur_loss(
            d_fake_updated, fake, sharp, w,
            patch=config.dc_patch, non_saturating=config.non_saturating_adv,
        )
        _require_finite(breakdown.total, "generator loss")
        state.opt_gen.zero_grad()
        breakdown.total.backward()
        state.opt_gen.step()
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)
    if phase_hook:
        phase_hook("generator")

    state.step += 1
    record = {
        "step": state.step,
        "L_denoise": l_denoise,
        "L_D": float(d_loss.detach()),
        "L_G_adv": breakdown.adv,
        "L_content": breakdown.content,
        "L_grad": breakdown.grad,
        "L_dc": breakdown.dark_channel,
        "L_total": float(breakdown.total.detach()),
    }
    return state, record


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _derive_seed(seed: int, epoch: int, tag: str) -> int:
    ss = np.random.SeedSequence([seed, epoch, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def exposure_ratio_for(triple: ImageTriple, use_true: bool) -> float:
    if use_true and triple.params is not None:
        return 1.0 / triple.params.f_scale
    return datagen.estimate_exposure_ratio(triple.noisy, triple.blurry)


def prepare_example(triple: ImageTriple, config: TrainConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Crop, optionally flip, and exposure-correct one training example."""
    ratio = exposure_ratio_for(triple, config.use_true_exposure)
    if triple.sharp.shape[0] > config.crop or triple.sharp.shape[1] > config.crop:
        triple = datagen.random_crop_triple(triple, config.crop, rng)
    noisy, blurry, sharp = triple.noisy, triple.blurry, triple.sharp
    if config.flip_augment and rng.random() < 0.5:
        noisy, blurry, sharp = (np.ascontiguousarray(a[:, ::-1]) for a in (noisy, blurry, sharp))
    noisy = imgproc.scale_exposure(noisy, ratio)
    return noisy, blurry, sharp


def make_batch(triples: list[ImageTriple], config: TrainConfig,
               rng: np.random.Generator) -> Batch:
    prepared = [prepare_example(t, config, rng) for t in triples]
    return Batch(
        noisy=torch.stack([_to_tensor(p[0]) for p in prepared]),
        blurry=torch.stack([_to_tensor(p[1]) for p in prepared]),
        sharp=torch.stack([_to_tensor(p[2]) for p in prepared]),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _collect_arrays(state: TrainState) -> dict[str, torch.Tensor]:
    arrays = {}
    for key, tensor in state.model.state_dict().items():
        arrays[f"model/{key}"] = tensor
    for key, tensor in state.disc.state_dict().items():
        arrays[f"disc/{key}"] = tensor
    opts = {"denoise": state.opt_denoise, "gen": state.opt_gen, "disc": state.opt_disc}
    for opt_name, opt in opts.items():
        if opt is None:
            continue
        for key, tensor in opt.m.items():
            arrays[f"opt/{opt_name}/m/{key}"] = tensor
        for key, tensor in opt.v.items():
            arrays[f"opt/{opt_name}/v/{key}"] = tensor
    return arrays


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a versioned, byte-deterministic archive of the whole state."""
    path = Path(path)
    arrays = _collect_arrays(state)
    config = asdict(state.config)
    # run locations are not training state; keeping them out makes
    # checkpoints byte-comparable and portable across directories
    config["data_root"] = ""
    config["checkpoint_dir"] = ""
    meta = {
        "step": state.step,
        "epoch": state.epoch,
        "config": config,
        "opt_t": {
            name: opt.t
            for name, opt in (("denoise", state.opt_denoise),
                              ("gen", state.opt_gen), ("disc", state.opt_disc))
            if opt is not None
        },
    }
    index = []
    blobs = []
    for key in sorted(arrays):
        a = arrays[key].detach().cpu().numpy()
        index.append({"key": key, "dtype": a.dtype.name, "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a).tobytes())
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)
    return path


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["loss_weights"] = LossWeights(**d["loss_weights"])
    net = dict(d["net"])
    net["channel_schedule"] = tuple(net["channel_schedule"])
    d["net"] = NetConfig(**net)
    return TrainConfig(**d)


def load_checkpoint(path) -> TrainState:
    """Rebuild the exact training state from a checkpoint archive."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise UnsupportedCheckpointError(
                f"{path} does not start with the expected header "
                f"{CHECKPOINT_MAGIC!r}"
            )
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()

    config = _config_from_dict(header["meta"]["config"])
    state = init_state(config)
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        flat = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        arrays[entry["key"]] = torch.from_numpy(
            flat.reshape(entry["shape"]).copy()
        )
        offset += nbytes

    model_sd = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    disc_sd = {k[len("disc/"):]: v for k, v in arrays.items() if k.startswith("disc/")}
    state.model.load_state_dict(model_sd)
    state.disc.load_state_dict(disc_sd)
    opts = {"denoise": state.opt_denoise, "gen": state.opt_gen, "disc": state.opt_disc}
    for name, opt in opts.items():
        if opt is None:
            continue
        opt.t = header["meta"]["opt_t"][name]
        for key in opt.m:
            opt.m[key] = arrays[f"opt/{name}/m/{key}"]
            opt.v[key] = arrays[f"opt/{name}/v/{key}"]
    state.step = header["meta"]["step"]
    state.epoch = header["meta"]["epoch"]
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _training_records(data_root: Path) -> list[dict]:
    manifest = data_root / "manifest.jsonl"
    if not manifest.exists():
        raise ValueError(f"no manifest at {manifest}")
    records = [
        r for r in datagen.read_manifest(manifest)
        if "error" not in r and r["split"] == "train"
    ]
    if not records:
        raise ValueError(f"manifest {manifest} holds no training triples")
    return records


def train(config: TrainConfig) -> Path:
    """Run the full epoch loop; returns the path of the final checkpoint.

    Resumes from <checkpoint_dir>/latest when present.  One checkpoint is
    written per epoch; the loss log is appended one JSON record per step.
    """
    data_root = Path(config.data_root)
    records = _training_records(data_root)
    ck_dir = Path(config.checkpoint_dir)
    ck_dir.mkdir(parents=True, exist_ok=True)
    latest = ck_dir / "latest"

    if latest.exists():
        state = load_checkpoint(ck_dir / latest.read_text().strip())
        if state.config.model != config.model or state.config.net != config.net:
            raise ValueError(
                "checkpoint architecture does not match the requested config"
            )
        # the caller's config governs the continued run; moments and weights
        # come from the checkpoint
        state.config = config
        for opt in (state.opt_denoise, state.opt_gen, state.opt_disc):
            if opt is not None:
                opt.lr = config.learning_rate
                opt.beta1 = config.beta1
                opt.beta2 = config.beta2
                opt.eps = config.adam_eps
    else:
        state = init_state(config)

    log_path = ck_dir / "loss_log.jsonl"
    steps_per_epoch = (len(records) + config.batch_size - 1) // config.batch_size
    total_steps = steps_per_epoch * config.epochs
    base_lr = config.learning_rate

    for epoch in range(state.epoch, config.epochs):
        torch.manual_seed(_derive_seed(config.seed, epoch, "torch"))
        data_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch, zlib.crc32(b"data")])
        )
        order = data_rng.permutation(len(records))
        with open(log_path, "a") as log:
            for start in range(0, len(order), config.batch_size):
                if config.lr_decay:
                    frac = state.step / total_steps
                    factor = min(1.0, max(0.0, 2.0 * (1.0 - frac)))
                    for opt in (state.opt_denoise, state.opt_gen, state.opt_disc):
                        if opt is not None:
                            opt.lr = base_lr * factor
                batch_ids = order[start : start + config.batch_size]
                triples = [datagen.load_triple(data_root, records[i]) for i in batch_ids]
                batch = make_batch(triples, config, data_rng)
                try:
                    state, record = train_step(state, batch, config)
                except DivergedTrainingError as e:
                    e.last_checkpoint = (
                        str(ck_dir / latest.read_text().strip()) if latest.exists() else None
                    )
                    raise
                log.write(json.dumps(record) + "\n")
        state.epoch = epoch + 1
        name = f"epoch_{state.epoch}.ckpt"
        save_checkpoint(state, ck_dir / name)
        latest.write_text(name)

    return ck_dir / latest.read_text().strip()


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_SCALAR_FIELDS = {
    "model": str,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "epochs": int,
    "crop": int,
    "batch_size": int,
    "init_std": float,
    "seed": int,
    "data_root": str,
    "checkpoint_dir": str,
    "dc_patch": int,
    "flip_augment": bool,
    "use_true_exposure": bool,
    "non_saturating_adv": bool,
    "lr_decay": bool,
    "lambda_c1": float,
    "lambda_c2": float,
    "lambda_grad": float,
    "lambda_dc": float,
    "encoder_depth": int,
    "base_channels": int,
    "lstm_channels": int,
    "dropout_rate": float,
    "dropout_layers": int,
    "leaky_slope": float,
    "use_spectral_norm": bool,
}


def parse_config_file(path) -> dict:
    """Read a flat `key = value` file into typed values."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in _SCALAR_FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        typ = _SCALAR_FIELDS[key]
        if typ is bool:
            values[key] = val.lower() in ("1", "true", "yes", "on")
        else:
            values[key] = typ(val)
    return values


def config_from_values(values: dict) -> TrainConfig:
    """Assemble a TrainConfig from flat key/value pairs."""
    loss_keys = {"lambda_c1", "lambda_c2", "lambda_grad", "lambda_dc"}
    net_keys = {"encoder_depth", "base_channels", "lstm_channels",
                "dropout_rate", "dropout_layers", "leaky_slope",
                "use_spectral_norm"}
    weights = LossWeights(**{k: v for k, v in values.items() if k in loss_keys})
    net = NetConfig(**{k: v for k, v in values.items() if k in net_keys})
    rest = {k: v for k, v in values.items() if k not in loss_keys | net_keys}
    return TrainConfig(loss_weights=weights, net=net, **rest)
