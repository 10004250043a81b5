"""Encoder classifier and U-Net for 64x64 ball crops, with training loops.

Layer geometry is declared in ``ENCODER_LAYERS`` / ``DECODER_LAYERS`` and the
torch modules are built from those declarations.  ``trace_shapes`` runs a
forward pass and reports what each named layer actually produced, so the
two can be compared.

Inputs are uint8 crops scaled to [0, 1].  Networks return logits; use
``torch.sigmoid`` (or ``predict_*``) for probabilities.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

INPUT_SIZE = 64


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | pool | upsample | concat | dense
    kernel: int | None
    stride: int | None
    shape: tuple[int, int, int]  # (h, w, c)
    skip: str | None = None


def _enc():
    rows = [
        ("conv1", 64, 32), ("pool1", 32, 32),
        ("conv2", 32, 64), ("pool2", 16, 64),
        ("conv3", 16, 64), ("pool3", 8, 64),
        ("conv4", 8, 64), ("pool4", 4, 64),
        ("conv5", 4, 128), ("pool5", 2, 128),
        ("conv6", 2, 256), ("pool6", 1, 256),
        ("conv7", 1, 512),
    ]  # fmt: skip
    return tuple(
        LayerSpec(n, "conv", 3, 1, (s, s, c)) if n.startswith("conv") else LayerSpec(n, "pool", 2, 2, (s, s, c))
        for n, s, c in rows
    )


def _dec():
    # (upsample out, conv-after-upsample out, skip source, concat out, conv out)
    blocks = [
        ((2, 512), 256, "conv6", 512, 256),
        ((4, 256), 128, "conv5", 256, 128),
        ((8, 128), 64, "conv4", 128, 64),
        ((16, 64), 64, "conv3", 128, 64),
        ((32, 64), 64, "conv2", 128, 64),
        ((64, 64), 32, "conv1", 64, 32),
    ]
    out, conv = [], 8
    for b, ((s, cu), c1, skip, cc, c2) in enumerate(blocks, start=1):
        out += [
            LayerSpec(f"upsample{b}", "upsample", 2, 2, (s, s, cu)),
            LayerSpec(f"conv{conv}", "conv", 3, 1, (s, s, c1)),
            LayerSpec(f"concat{b}", "concat", None, None, (s, s, cc), skip),
            LayerSpec(f"conv{conv + 1}", "conv", 3, 1, (s, s, c2)),
        ]
        conv += 2
    out.append(LayerSpec("conv20", "conv", 3, 1, (64, 64, 1)))
    return tuple(out)


ENCODER_LAYERS = _enc()
DECODER_LAYERS = _dec()


def build_encoder() -> list[LayerSpec]:
    return list(ENCODER_LAYERS)


def build_decoder() -> list[LayerSpec]:
    return list(DECODER_LAYERS)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


def _init_conv(conv: nn.Conv2d, relu: bool = True):
    if relu:
        nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    else:
        nn.init.xavier_normal_(conv.weight)
    nn.init.zeros_(conv.bias)


class Encoder(nn.Module):
    """Conv1..Conv7 with 2x2 max pools after Conv1..Conv6.

    With ``batch_norm`` each conv is followed by batch normalisation before
    its ReLU.
    """

    def __init__(self, batch_norm: bool = True):
        super().__init__()
        self.batch_norm = batch_norm
        self.convs = nn.ModuleDict()
        self.norms = nn.ModuleDict()
        cin = 1
        for spec in ENCODER_LAYERS:
            if spec.kind == "conv":
                conv = nn.Conv2d(cin, spec.shape[2], spec.kernel, padding=spec.kernel // 2)
                _init_conv(conv)
                self.convs[spec.name] = conv
                if batch_norm:
                    self.norms[spec.name] = nn.BatchNorm2d(spec.shape[2])
                cin = spec.shape[2]

    def forward(self, x, trace: dict | None = None):
        skips = {}
        for spec in ENCODER_LAYERS:
            if spec.kind == "conv":
                x = self.convs[spec.name](x)
                if self.batch_norm:
                    x = self.norms[spec.name](x)
                x = F.relu(x)
                skips[spec.name] = x
            else:
                x = F.max_pool2d(x, spec.kernel, spec.stride)
            if trace is not None:
                trace[spec.name] = tuple(x.shape[2:]) + (x.shape[1],)
        return x, skips


class VoidClassifier(nn.Module):
    """Encoder followed by flatten -> dense(512 -> 1)."""

    stage = "classifier"

    def __init__(self, batch_norm: bool = True):
        super().__init__()
        self.encoder = Encoder(batch_norm)
        self.fc = nn.Linear(ENCODER_LAYERS[-1].shape[2], 1)
        nn.init.xavier_normal_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x, trace: dict | None = None):
        feat, _ = self.encoder(x, trace)
        logit = self.fc(feat.flatten(1)).squeeze(1)
        if trace is not None:
            trace["fc"] = (1,)
        return logit


class UNet(nn.Module):
    """Encoder plus six upsample/conv/concat/conv decoder blocks and Conv20."""

    stage = "unet"

    def __init__(self, batch_norm: bool = True):
        super().__init__()
        self.batch_norm = batch_norm
        self.encoder = Encoder(batch_norm)
        self.decoder = nn.ModuleDict()
        self.norms = nn.ModuleDict()
        cin = ENCODER_LAYERS[-1].shape[2]
        for spec in DECODER_LAYERS:
            if spec.kind == "upsample":
                pass
            elif spec.kind == "concat":
                skip = next(s for s in ENCODER_LAYERS if s.name == spec.skip)
                cin += skip.shape[2]
            else:
                conv = nn.Conv2d(cin, spec.shape[2], spec.kernel, padding=spec.kernel // 2)
                _init_conv(conv, relu=spec.name != "conv20")
                self.decoder[spec.name] = conv
                if batch_norm and spec.name != "conv20":
                    self.norms[spec.name] = nn.BatchNorm2d(spec.shape[2])
                cin = spec.shape[2]

    def forward(self, x, trace: dict | None = None):
        x, skips = self.encoder(x, trace)
        for spec in DECODER_LAYERS:
            if spec.kind == "upsample":
                x = F.interpolate(x, scale_factor=spec.stride, mode="nearest")
            elif spec.kind == "concat":
                x = torch.cat([x, skips[spec.skip]], dim=1)
            elif spec.name == "conv20":
                x = self.decoder[spec.name](x)
            else:
                x = self.decoder[spec.name](x)
                if self.batch_norm:
                    x = self.norms[spec.name](x)
                x = F.relu(x)
            if trace is not None:
                trace[spec.name] = tuple(x.shape[2:]) + (x.shape[1],)
        return x


def _seeded(cls, seed: int, **kw):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(**kw)


def build_classifier_head(seed: int = 0, batch_norm: bool = True) -> VoidClassifier:
    return _seeded(VoidClassifier, seed, batch_norm=batch_norm)


def build_unet(encoder_state: dict | None = None, seed: int = 0, batch_norm: bool = True) -> UNet:
    """Fresh U-Net; encoder weights copied from ``encoder_state`` when given.

    ``encoder_state`` may be a classifier state dict (``encoder.*`` keys are
    picked out) or an encoder state dict.
    """
    net = _seeded(UNet, seed, batch_norm=batch_norm)
    if encoder_state is not None:
        enc = {k[len("encoder."):]: v for k, v in encoder_state.items() if k.startswith("encoder.")}
        net.encoder.load_state_dict(enc or encoder_state)
    return net


def trace_shapes(net: nn.Module) -> dict[str, tuple]:
    """Name -> (h, w, c) actually produced by each layer for a 64x64 input."""
    trace: dict[str, tuple] = {}
    was_training = net.training
    net.eval()
    with torch.no_grad():
        net(torch.zeros(1, 1, INPUT_SIZE, INPUT_SIZE), trace)
    net.train(was_training)
    return trace


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 10
    target_val_loss: float | None = None  # stop once reached
    max_minutes: float | None = None
    batch_norm: bool = True
    precision: str = "auto"  # auto | bf16 | fp32
    bn_calibration: int = 1024  # training samples used to refresh BN statistics; 0 = off

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.bn_calibration < 0:
            raise ValueError("bn_calibration must be >= 0")
        if self.precision not in ("auto", "bf16", "fp32"):
            raise ValueError(f"precision must be auto, bf16 or fp32, got {self.precision!r}")


def bf16_supported() -> bool:
    """True when the CPU has native bfloat16 matrix support (via oneDNN)."""
    try:
        return bool(torch.ops.mkldnn._is_mkldnn_bf16_supported())
    except (AttributeError, RuntimeError):
        return False


def _autocast(precision: str):
    use = precision == "bf16" or (precision == "auto" and bf16_supported())
    return torch.autocast("cpu", dtype=torch.bfloat16, enabled=use)


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict]
    best_epoch: int
    meta: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [h["train_loss"] for h in self.history]


def to_tensor(images) -> torch.Tensor:
    """uint8 (N, H, W) or (H, W) -> float (N, 1, H, W) in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (INPUT_SIZE, INPUT_SIZE):
        raise ValueError(f"expected crops of shape (N, {INPUT_SIZE}, {INPUT_SIZE}), got {arr.shape}")
    t = torch.from_numpy(arr.astype(np.float32) / 255.0)[:, None]
    return t.contiguous(memory_format=torch.channels_last)


def _targets(y, pixelwise: bool) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(y, dtype=np.float32))
    if pixelwise:
        t = t[:, None].contiguous(memory_format=torch.channels_last)
    return t


@torch.no_grad()
def _mean_loss(model, x, y, batch_size, precision="fp32") -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    for i in range(0, len(x), batch_size):
        with _autocast(precision):
            out = model(x[i : i + batch_size])
        total += F.binary_cross_entropy_with_logits(out.float(), y[i : i + batch_size], reduction="sum").item()
    model.train(was_training)
    return total / y.numel()


@torch.no_grad()
def recalibrate_batch_norm(model: nn.Module, x, batch_size: int, precision: str = "fp32") -> bool:
    """Replace BatchNorm running statistics by plain averages over ``x``.

    Exponential running averages trail the weights while they move quickly,
    which makes eval-mode losses jump from epoch to epoch.  Returns False
    (and changes nothing) when the model has no BatchNorm or ``x`` has fewer
    than two samples.
    """
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms or len(x) < 2:
        return False
    was_training = model.training
    momenta = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    model.train()
    for i, j in _batches(len(x), batch_size):
        with _autocast(precision):
            model(x[i:j])
    for m, mom in zip(norms, momenta):
        m.momentum = mom
    model.train(was_training)
    return True


def _split(n: int, fraction: float, seed: int):
    if fraction <= 0 or n < 2:
        idx = np.arange(n)
        return idx, idx[:0]
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_val = max(1, int(round(n * fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batches(n: int, size: int) -> list[tuple[int, int]]:
    """Batch bounds; a trailing single sample joins the previous batch
    (batch statistics need at least two samples)."""
    bounds = [(i, min(i + size, n)) for i in range(0, n, size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], n)]
    return bounds


def fit(model: nn.Module, x, y, cfg: TrainConfig, val=None, pixelwise: bool = False, log_path=None) -> TrainResult:
    """Adam + binary cross-entropy; returns the best-validation-loss weights.

    ``x`` are uint8 crops and ``y`` class labels (N,) or masks (N, 64, 64).
    ``val`` is an optional (x_val, y_val) pair; otherwise ``val_fraction`` of
    the data is held out.  With no validation data the training loss picks
    the best epoch.  History row 0 is the loss before any update.
    """
    x_all, y_all = to_tensor(x), _targets(y, pixelwise)
    if val is None:
        tr, va = _split(len(x_all), cfg.val_fraction, cfg.seed)
        x_tr, y_tr, x_va, y_va = x_all[tr], y_all[tr], x_all[va], y_all[va]
    else:
        x_tr, y_tr = x_all, y_all
        x_va, y_va = to_tensor(val[0]), _targets(val[1], pixelwise)
    if len(x_tr) < 2 and getattr(getattr(model, "encoder", None), "batch_norm", False):
        raise TrainingError("batch-normalised training needs at least 2 training samples")
    model = model.to(memory_format=torch.channels_last)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    has_val = len(x_va) > 0

    k = min(cfg.bn_calibration, len(x_tr))
    x_cal = x_tr[np.sort(np.random.default_rng([cfg.seed, 11]).permutation(len(x_tr))[:k])]

    def calibrate():
        if k:
            recalibrate_batch_norm(model, x_cal, cfg.batch_size, cfg.precision)

    def evaluate():
        calibrate()
        tl = _mean_loss(model, x_tr, y_tr, cfg.batch_size, cfg.precision)
        vl = _mean_loss(model, x_va, y_va, cfg.batch_size, cfg.precision) if has_val else tl
        return tl, vl

    t0 = time.perf_counter()
    history = []
    log_fh = open(log_path, "a") if log_path else None

    def record(epoch, tl, vl):
        row = {"epoch": epoch, "train_loss": tl, "val_loss": vl, "wall_time": round(time.perf_counter() - t0, 3)}
        history.append(row)
        if log_fh:
            log_fh.write(json.dumps(row) + "\n")
            log_fh.flush()
        log.info("epoch %d train %.4f val %.4f", epoch, tl, vl)

    tl, vl = evaluate()
    record(0, tl, vl)
    best, best_epoch, best_state = vl, 0, copy.deepcopy(model.state_dict())
    n = len(x_tr)
    model.train()
    try:
        for epoch in range(1, cfg.epochs + 1):
            perm = torch.from_numpy(np.random.default_rng([cfg.seed, epoch]).permutation(n))
            running = 0.0
            for i, j in _batches(n, cfg.batch_size):
                idx = perm[i:j]
                opt.zero_grad(set_to_none=True)
                with _autocast(cfg.precision):
                    out = model(x_tr[idx])
                loss = F.binary_cross_entropy_with_logits(out.float(), y_tr[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
                loss.backward()
                opt.step()
                running += loss.item() * len(idx)
            calibrate()
            vl = _mean_loss(model, x_va, y_va, cfg.batch_size, cfg.precision) if has_val else running / n
            record(epoch, running / n, vl)
            if vl < best:
                best, best_epoch, best_state = vl, epoch, copy.deepcopy(model.state_dict())
            if epoch - best_epoch >= cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break
            if cfg.target_val_loss is not None and vl <= cfg.target_val_loss:
                break
            if cfg.max_minutes is not None and time.perf_counter() - t0 > 60 * cfg.max_minutes:
                log.info("time budget reached at epoch %d", epoch)
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    meta = {
        "stage": getattr(model, "stage", type(model).__name__),
        "epoch": best_epoch,
        "epochs_run": history[-1]["epoch"],
        "seed": cfg.seed,
        "loss_history": history,
        "parameter_count": parameter_count(model),
        "train_config": asdict(cfg),
        "n_train": int(len(x_tr)),
        "n_val": int(len(x_va)),
        "batch_norm": bool(getattr(getattr(model, "encoder", None), "batch_norm", False)),
    }
    return TrainResult(model, history, best_epoch, meta)


def train_classifier(images, labels, cfg: TrainConfig | None = None, val=None, log_path=None) -> TrainResult:
    cfg = cfg or TrainConfig()
    labels = np.asarray(labels, dtype=np.float32)
    if len(np.unique(labels)) < 2:
        raise TrainingError("classifier training needs both void and non-void samples")
    model = build_classifier_head(cfg.seed, cfg.batch_norm)
    return fit(model, images, labels, cfg, val=val, log_path=log_path)


def train_unet(images, masks, cfg: TrainConfig | None = None, encoder_state=None, val=None, log_path=None) -> TrainResult:
    """Per-pixel BCE training of the U-Net; encoder optionally pretrained."""
    cfg = cfg or TrainConfig(epochs=60)
    masks = np.asarray(masks)
    if masks.shape != np.asarray(images).shape:
        raise ValueError(f"mask array {masks.shape} does not match images {np.asarray(images).shape}")
    if encoder_state is None:
        log.warning("training U-Net from a random encoder (no classifier weights given)")
    model = build_unet(encoder_state, cfg.seed, cfg.batch_norm)
    res = fit(model, images, masks.astype(np.float32), cfg, val=val, pixelwise=True, log_path=log_path)
    res.meta["encoder_init"] = "classifier" if encoder_state is not None else "random"
    return res


# ---------------------------------------------------------------------------
# Inference and checkpoints
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_mask(model: nn.Module, crops, batch_size: int = 256) -> np.ndarray:
    """Void probability maps, (N, 64, 64) float32 in [0, 1] (or (64, 64))."""
    single = np.asarray(crops).ndim == 2
    x = to_tensor(crops)
    model.eval()
    outs = [torch.sigmoid(model(x[i : i + batch_size]))[:, 0] for i in range(0, len(x), batch_size)]
    probs = torch.cat(outs).numpy()
    return probs[0] if single else probs


@torch.no_grad()
def predict_void_probability(model: VoidClassifier, crops, batch_size: int = 256) -> np.ndarray:
    single = np.asarray(crops).ndim == 2
    x = to_tensor(crops)
    model.eval()
    p = torch.cat([torch.sigmoid(model(x[i : i + batch_size])) for i in range(0, len(x), batch_size)]).numpy()
    return p[0] if single else p


def save_checkpoint(model: nn.Module, path, meta: dict | None = None) -> Path:
    """Write ``<path>.npz`` (tensors keyed by layer name) and ``<path>.json``."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path.with_suffix(".npz"), **state)
    meta = dict(meta or {})
    meta.setdefault("stage", getattr(model, "stage", type(model).__name__))
    meta["parameter_count"] = parameter_count(model)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return path.with_suffix(".npz")


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    path = Path(path).with_suffix("")
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with np.load(path.with_suffix(".npz")) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    stage = meta.get("stage") or ("unet" if any(k.startswith("decoder.") for k in state) else "classifier")
    bn = any(".norms." in k or k.startswith("norms.") for k in state)
    model = UNet(bn) if stage == "unet" else VoidClassifier(bn)
    model.load_state_dict(state)
    model.eval()
    return model, meta


def bce_floor(p: float) -> float:
    """Entropy of a Bernoulli(p) target, the best achievable mean BCE."""
    if p <= 0 or p >= 1:
        return 0.0
    return -(p * math.log(p) + (1 - p) * math.log(1 - p))
