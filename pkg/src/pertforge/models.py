"""Victim networks: a latent-zone autoencoder, a Y-shaped segmentation
autoencoder sharing the same latent-zone mechanism, and a small plain CNN
classifier. All take 3x64x64 images with pixel values in [0, 255] (divided
by 255 internally) and expose losses differentiable down to the input.
"""

from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CapabilityError, ContractError, DataError, NumericsError, ShapeError
from .errors import ConvergenceWarning
from .serialize import load_tensor, save_tensor

INPUT_SHAPE = (3, 64, 64)
PIXEL_SCALE = 255.0


# ---------------------------------------------------------------------------
# latent-zone primitives

def activation_energy(latent, zone):
    """Mean absolute value of one latent zone (zone 0 = first half)."""
    if zone not in (0, 1):
        raise ContractError(f"zone must be 0 or 1, got {zone!r}")
    flat = ag.reshape(latent, (1, latent.size)) if latent.data.ndim == 1 else latent
    m = flat.data.shape[1]
    if m % 2 != 0:
        raise ShapeError(f"latent length {m} is odd; cannot split into two zones")
    k = m // 2
    zone_t = ag.slice_cols(flat, zone * k, zone * k + k)
    return ag.mean_all(ag.absolute(zone_t))


def activation_loss(latent, label):
    """|a_1 - l| + |a_0 - (1 - l)| for a single latent vector."""
    label = float(label)
    a1 = activation_energy(latent, 1)
    a0 = activation_energy(latent, 0)
    t1 = Tensor(np.float32(label))
    t0 = Tensor(np.float32(1.0 - label))
    return ag.add(ag.absolute(ag.sub(a1, t1)), ag.absolute(ag.sub(a0, t0)))


def select_zone(latent, keep):
    """Zero the off-class zone; gradient flows only through the kept zone.

    `keep` is a single zone index or a per-sample array for batched latents.
    """
    flat = ag.reshape(latent, (1, latent.size)) if latent.data.ndim == 1 else latent
    n, m = flat.data.shape
    if m % 2 != 0:
        raise ShapeError(f"latent length {m} is odd; cannot split into two zones")
    k = m // 2
    keep_arr = np.broadcast_to(np.asarray(keep, dtype=np.intp), (n,))
    mask = np.zeros((n, m), dtype=np.float32)
    for c in (0, 1):
        rows = keep_arr == c
        mask[rows, c * k:c * k + k] = 1.0
    out = ag.mul(flat, Tensor(mask))
    if latent.data.ndim == 1:
        out = ag.reshape(out, (m,))
    return out


def segmentation_loss(logits, mask):
    """Mean per-pixel 2-class cross-entropy against a binary mask."""
    md = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if not np.isin(md, (0, 1)).all():
        raise DataError("segmentation mask must be binary")
    lt = logits
    if lt.data.ndim == 3:
        lt = ag.reshape(lt, (1,) + lt.data.shape)
        md = md.reshape((1,) + md.shape)
    return ag.softmax_xent_pixels(lt, md)


def zone_energies(latent):
    """Batched (N, 2K) latent -> per-sample energy tensors (a0, a1)."""
    m = latent.data.shape[1]
    k = m // 2
    a0 = ag.mean_abs_rows(ag.slice_cols(latent, 0, k))
    a1 = ag.mean_abs_rows(ag.slice_cols(latent, k, m))
    return a0, a1


def batched_activation_loss(latent, labels):
    """Mean over the batch of |a_1 - l| + |a_0 - (1 - l)|."""
    a0, a1 = zone_energies(latent)
    l = Tensor(np.asarray(labels, dtype=np.float32))
    one_minus = Tensor(1.0 - np.asarray(labels, dtype=np.float32))
    per_sample = ag.add(ag.absolute(ag.sub(a1, l)), ag.absolute(ag.sub(a0, one_minus)))
    return ag.mean_all(per_sample)


# ---------------------------------------------------------------------------
# layers

class Conv:
    def __init__(self, rng, cin, cout, stride=1, ksize=3):
        scale = np.sqrt(2.0 / (cin * ksize * ksize))
        self.w = Tensor(rng.normal(0.0, scale, (cout, cin, ksize, ksize)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.pad = ksize // 2

    def __call__(self, x):
        return ag.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self):
        return [self.w, self.b]


class Linear:
    def __init__(self, rng, nin, nout):
        scale = np.sqrt(2.0 / nin)
        self.w = Tensor(rng.normal(0.0, scale, (nout, nin)), requires_grad=True)
        self.b = Tensor(np.zeros(nout), requires_grad=True)

    def __call__(self, x):
        return ag.linear(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


def _flatten(x):
    n = x.data.shape[0]
    return ag.reshape(x, (n, x.data.size // n))


def _as_batch(image):
    t = image if isinstance(image, Tensor) else Tensor(image)
    if t.data.ndim == 3:
        t = ag.reshape(t, (1,) + t.data.shape)
    if t.data.shape[1:] != INPUT_SHAPE:
        raise ShapeError(f"expected {INPUT_SHAPE} images, got {t.data.shape}")
    return t


# ---------------------------------------------------------------------------
# victim models

class _ZoneModelBase:
    """Shared encoder/selection machinery for the two autoencoder victims."""

    has_zones = True

    def encode(self, x):
        """Pixel-unit image batch -> (N, 2K) latent."""
        h = ag.mul_scalar(_as_batch(x), 1.0 / PIXEL_SCALE)
        for conv in self.enc_convs:
            h = ag.leaky_relu(conv(h), 0.2)
        return self.enc_fc(_flatten(h))

    def classify_batch(self, images):
        latent = self.encode(Tensor(np.asarray(images, np.float32)))
        a0, a1 = zone_energies(latent)
        return (a1.data > a0.data).astype(np.intp)  # tie -> class 0

    def adversarial_loss(self, x, labels):
        """Activation loss of a batch against (possibly fractional) labels."""
        return batched_activation_loss(self.encode(x), labels)

    def _decode_stack(self, latent, fc, convs, head):
        n = latent.data.shape[0]
        h = ag.leaky_relu(fc(latent), 0.2)
        h = ag.reshape(h, (n, self.c_bottom, 4, 4))
        for conv in convs:
            h = ag.leaky_relu(conv(ag.upsample2(h)), 0.2)
        return head(h)


class LatentZoneAE(_ZoneModelBase):
    """Autoencoder whose latent splits into a 'fake' zone and a 'real' zone;
    classification reads the zone activation energies."""

    arch = "latent_zone_ae"
    has_segmentation = False

    def __init__(self, k=64, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAE]))
        self.k = k
        chans = [3, 8, 16, 32, 64]
        self.c_bottom = chans[-1]
        self.enc_convs = [Conv(rng, chans[i], chans[i + 1], stride=2) for i in range(4)]
        self.enc_fc = Linear(rng, self.c_bottom * 16, 2 * k)
        self.dec_fc = Linear(rng, 2 * k, self.c_bottom * 16)
        dchans = [64, 48, 32, 16]
        self.dec_convs = [Conv(rng, dchans[i], dchans[i + 1] if i + 1 < 4 else 16)
                          for i in range(4)]
        self.dec_head = Conv(rng, 16, 3)

    def decode(self, latent):
        """Selection-filtered latent -> reconstructed image in [0, 1]."""
        return ag.sigmoid(self._decode_stack(latent, self.dec_fc, self.dec_convs,
                                             self.dec_head))

    def layers(self):
        return (self.enc_convs + [self.enc_fc, self.dec_fc]
                + self.dec_convs + [self.dec_head])

    def training_loss(self, images, labels, masks=None):
        x = Tensor(images)
        latent = self.encode(x)
        act = batched_activation_loss(latent, labels)
        recon = self.decode(select_zone(latent, np.asarray(labels, np.intp)))
        target = ag.mul_scalar(x, 1.0 / PIXEL_SCALE)
        rec = ag.l1_norm_mean(ag.sub(recon, target))
        return ag.add(act, rec)


class YShapedNet(_ZoneModelBase):
    """Deeper latent-zone autoencoder with a two-pronged decoder: one branch
    emits per-pixel real/tampered logits, the other reconstructs the image."""

    arch = "y_shaped_net"
    has_segmentation = True

    def __init__(self, k=64, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x15]))
        self.k = k
        chans = [3, 8, 12, 16, 24, 32, 64]
        strides = [2, 1, 2, 1, 2, 2]
        self.c_bottom = chans[-1]
        self.enc_convs = [Conv(rng, chans[i], chans[i + 1], stride=strides[i])
                          for i in range(6)]
        self.enc_fc = Linear(rng, self.c_bottom * 16, 2 * k)
        dchans = [64, 48, 32, 16]
        self.seg_fc = Linear(rng, 2 * k, self.c_bottom * 16)
        self.seg_convs = [Conv(rng, dchans[i], dchans[i + 1] if i + 1 < 4 else 16)
                          for i in range(4)]
        self.seg_head = Conv(rng, 16, 2)
        self.rec_fc = Linear(rng, 2 * k, self.c_bottom * 16)
        self.rec_convs = [Conv(rng, dchans[i], dchans[i + 1] if i + 1 < 4 else 16)
                          for i in range(4)]
        self.rec_head = Conv(rng, 16, 3)

    def decode_seg(self, latent):
        return self._decode_stack(latent, self.seg_fc, self.seg_convs, self.seg_head)

    def decode_recon(self, latent):
        return ag.sigmoid(self._decode_stack(latent, self.rec_fc, self.rec_convs,
                                             self.rec_head))

    def segment_batch(self, images):
        """Images -> predicted binary masks (argmax over the 2 logits),
        using energy-based zone selection as at inference."""
        latent = self.encode(Tensor(np.asarray(images, np.float32)))
        a0, a1 = zone_energies(latent)
        keep = (a1.data > a0.data).astype(np.intp)
        logits = self.decode_seg(select_zone(latent, keep))
        return np.argmax(logits.data, axis=1).astype(np.uint8)

    def segmentation_objective(self, x, mask):
        """Differentiable segmentation loss of a batch against binary masks,
        decoding through the energy-selected latent."""
        latent = self.encode(x)
        a0, a1 = zone_energies(latent)
        keep = (a1.data > a0.data).astype(np.intp)
        logits = self.decode_seg(select_zone(latent, keep))
        return segmentation_loss(logits, mask)

    def layers(self):
        return (self.enc_convs + [self.enc_fc, self.seg_fc] + self.seg_convs
                + [self.seg_head, self.rec_fc] + self.rec_convs + [self.rec_head])

    def training_loss(self, images, labels, masks):
        x = Tensor(images)
        latent = self.encode(x)
        act = batched_activation_loss(latent, labels)
        filtered = select_zone(latent, np.asarray(labels, np.intp))
        seg = segmentation_loss(self.decode_seg(filtered), masks)
        recon = self.decode_recon(filtered)
        target = ag.mul_scalar(x, 1.0 / PIXEL_SCALE)
        rec = ag.l1_norm_mean(ag.sub(recon, target))
        return ag.add(ag.add(act, seg), rec)


class MesoLite(_ZoneModelBase):
    """Plain CNN classifier: four stride-2 conv layers and two fully
    connected layers ending in a single sigmoid p(real)."""

    arch = "meso_lite"
    has_zones = False
    has_segmentation = False

    def __init__(self, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3E]))
        chans = [3, 8, 16, 32, 32]
        self.convs = [Conv(rng, chans[i], chans[i + 1], stride=2) for i in range(4)]
        self.fc1 = Linear(rng, 32 * 16, 64)
        self.fc2 = Linear(rng, 64, 1)

    def logit(self, x):
        h = ag.mul_scalar(_as_batch(x), 1.0 / PIXEL_SCALE)
        for conv in self.convs:
            h = ag.leaky_relu(conv(h), 0.2)
        h = ag.leaky_relu(self.fc1(_flatten(h)), 0.2)
        return ag.reshape(self.fc2(h), (h.data.shape[0],))

    def p_real(self, x):
        return ag.sigmoid(self.logit(x))

    def classify_batch(self, images):
        p = self.p_real(Tensor(np.asarray(images, np.float32)))
        return (p.data > 0.5).astype(np.intp)

    def encode(self, x):
        raise CapabilityError("meso_lite has no latent zones")

    def adversarial_loss(self, x, labels):
        return ag.sigmoid_xent(self.logit(x), np.asarray(labels, np.float32))

    def layers(self):
        return self.convs + [self.fc1, self.fc2]

    def training_loss(self, images, labels, masks=None):
        return self.adversarial_loss(Tensor(images), labels)


def classify(model, image):
    """Single-image class decision: 0 'fake', 1 'real'."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return int(model.classify_batch(arr)[0])


ARCHS = {
    "latent_zone_ae": LatentZoneAE,
    "y_shaped_net": YShapedNet,
    "meso_lite": MesoLite,
}


def build_model(arch, seed=0, k=64):
    if arch not in ARCHS:
        raise ContractError(f"unknown architecture {arch!r}")
    if arch == "meso_lite":
        return MesoLite(seed=seed)
    return ARCHS[arch](k=k, seed=seed)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainLog:
    epoch_losses: list = field(default_factory=list)
    val_accuracy: float | None = None
    val_iou: float | None = None
    converged: bool = True
    notes: list = field(default_factory=list)


def _model_params(model):
    out = []
    for layer in model.layers():
        out.extend(layer.params())
    return out


def accuracy(model, images, labels, batch_size=128):
    preds = []
    for i in range(0, len(images), batch_size):
        preds.append(model.classify_batch(images[i:i + batch_size]))
    preds = np.concatenate(preds)
    return float((preds == np.asarray(labels)).mean())


def mean_iou(model, images, masks, batch_size=128):
    """Mean IoU of predicted vs reference masks (empty vs empty counts as 1)."""
    from .metrics import iou

    scores = []
    for i in range(0, len(images), batch_size):
        pred = model.segment_batch(images[i:i + batch_size])
        for p, m in zip(pred, masks[i:i + batch_size]):
            scores.append(iou(p, m))
    return float(np.mean(scores))


def train(model, dataset, epochs=30, lr=1e-2, momentum=0.9, batch_size=32,
          seed=0, val=None, target_accuracy=0.90, target_iou=None):
    """Minibatch SGD with momentum on the model's composite loss.

    Returns a TrainLog; emits ConvergenceWarning (and flags the log) if the
    held-out target is missed.
    """
    images = np.asarray(dataset.images, np.float32)
    labels = np.asarray(dataset.labels, np.float32)
    masks = np.asarray(dataset.masks)
    if len(images) == 0:
        raise ContractError("train: empty dataset")

    params = _model_params(model)
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7124]))
    log = TrainLog()

    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, nb = 0.0, 0
        for start in range(0, len(images), batch_size):
            idx = order[start:start + batch_size]
            loss = model.training_loss(images[idx], labels[idx], masks[idx])
            val_ = loss.item()
            if not np.isfinite(val_):
                raise NumericsError(f"NaN loss at epoch {epoch}, batch {nb}")
            ag.backward(loss)
            if lr:
                for p, v in zip(params, velocity):
                    v *= momentum
                    v += p.grad
                    p.data -= np.float32(lr) * v
            for p in params:
                p.grad = None
            total += val_
            nb += 1
        log.epoch_losses.append(total / nb)

    if val is not None:
        log.val_accuracy = accuracy(model, val.images, val.labels)
        if log.val_accuracy < target_accuracy:
            log.converged = False
            log.notes.append(f"held-out accuracy {log.val_accuracy:.3f} "
                             f"below target {target_accuracy}")
        if target_iou is not None and model.has_segmentation:
            fake = np.asarray(val.labels) == 0
            log.val_iou = mean_iou(model, np.asarray(val.images)[fake],
                                   np.asarray(val.masks)[fake])
            if log.val_iou < target_iou:
                log.converged = False
                log.notes.append(f"held-out IoU {log.val_iou:.3f} below target {target_iou}")
        if not log.converged:
            warnings.warn("; ".join(log.notes), ConvergenceWarning)
    return log


# ---------------------------------------------------------------------------
# checkpoints

def _named_params(model):
    names = []
    for li, layer in enumerate(model.layers()):
        for pi, p in enumerate(layer.params()):
            names.append((f"layer{li:02d}_p{pi}", p))
    return names


def save_checkpoint(model, path):
    os.makedirs(path, exist_ok=True)
    lines = [f"arch={model.arch}", f"pixel_scale={int(PIXEL_SCALE)}",
             "input=3x64x64"]
    if model.has_zones:
        lines.append(f"k={model.k}")
    for name, p in _named_params(model):
        save_tensor(os.path.join(path, name + ".pft"), p)
        lines.append(f"{name}={'x'.join(str(d) for d in p.data.shape)}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest at {manifest}")
    kv = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, val = line.split("=", 1)
                kv[key] = val
    model = build_model(kv["arch"], seed=0, k=int(kv.get("k", 64)))
    for name, p in _named_params(model):
        t = load_tensor(os.path.join(path, name + ".pft"))
        if t.data.shape != p.data.shape:
            raise ShapeError(f"checkpoint param {name}: shape {t.data.shape} "
                             f"!= model {p.data.shape}")
        p.data = t.data
    return model


def checkpoint_hash(path):
    """SHA-256 over the manifest and all parameter files, for sidecars."""
    digest = hashlib.sha256()
    for fname in sorted(os.listdir(path)):
        with open(os.path.join(path, fname), "rb") as fh:
            digest.update(fname.encode())
            digest.update(fh.read())
    return digest.hexdigest()
