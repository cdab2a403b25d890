"""The three attacks plus the uniform-noise baseline.

Individual perturbations follow the iterative raw-gradient update
    delta <- Clip_eps(delta - alpha * grad_x loss(x + delta, target)),
starting from zero. Universal perturbations are crafted data-free by
over-firing one latent zone on the perturbation-only forward pass, starting
from uniform noise. Updates clip only the perturbation; adversarial images
are clamped to the valid pixel range at evaluation time, not here.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CapabilityError, ContractError, NumericsError
from .models import INPUT_SHAPE, batched_activation_loss, segmentation_loss, select_zone, zone_energies
from .serialize import load_tensor, save_tensor


@dataclass
class PerturbationBudget:
    epsilon: float = 2.5
    alpha: float = 1.0
    max_iters: int = 20

    def __post_init__(self):
        if self.epsilon <= 0 or self.alpha <= 0:
            raise ContractError("epsilon and alpha must be positive")
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")


@dataclass
class Perturbation:
    delta: np.ndarray
    kind: str                      # "IAP" | "UAP" | "URN"
    meta: dict = field(default_factory=dict)


def worker_count():
    """Worker-pool cap from PERTFORGE_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("PERTFORGE_THREADS", "1")))
    except ValueError:
        return 1


def clip_eps(delta, epsilon):
    """Elementwise projection onto the inf-norm ball of radius epsilon."""
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    arr = delta.data if isinstance(delta, Tensor) else np.asarray(delta, np.float32)
    return np.clip(arr, -epsilon, epsilon).astype(np.float32)


def _per_sample_grad(model, x, l_adv, loss_fn):
    """Gradient of the per-sample loss w.r.t. each input image. The batched
    loss averages over samples, so the grad is rescaled by the batch size."""
    xt = Tensor(x, requires_grad=True)
    loss = loss_fn(model, xt, l_adv)
    if not np.isfinite(loss.data).all():
        raise NumericsError("attack loss became non-finite")
    ag.backward(loss)
    g = xt.grad * np.float32(len(x))
    if not np.isfinite(g).all():
        raise NumericsError("attack gradient became non-finite")
    return g


def _classification_loss(model, xt, l_adv):
    return model.adversarial_loss(xt, l_adv)


def iap_classification_batch(model, images, l_adv, budget):
    """Per-image classification IAPs with early exit on the first flip.

    l_adv may be a scalar or per-image array of adversarial labels.
    Returns a list of Perturbation, one per image, in input order.
    """
    x = np.asarray(images, np.float32)
    if x.ndim == 3:
        x = x[None]
    n = len(x)
    l_adv = np.broadcast_to(np.asarray(l_adv, np.float32), (n,)).copy()
    target = np.rint(l_adv).astype(np.intp)
    delta = np.zeros_like(x)
    iters = np.zeros(n, dtype=np.intp)
    active = model.classify_batch(x + delta) != target

    for it in range(budget.max_iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        g = _per_sample_grad(model, x[idx] + delta[idx], l_adv[idx],
                             _classification_loss)
        delta[idx] = clip_eps(delta[idx] - budget.alpha * g, budget.epsilon)
        iters[idx] = it + 1
        active[idx] = model.classify_batch(x[idx] + delta[idx]) != target[idx]

    return [Perturbation(delta[i], "IAP",
                         {"target_label": float(l_adv[i]),
                          "iterations": int(iters[i]),
                          "epsilon": budget.epsilon, "alpha": budget.alpha,
                          "flipped": bool(not active[i])})
            for i in range(n)]


def iap_classification(model, image, l_adv, budget):
    """The single-image form of the classification IAP."""
    return iap_classification_batch(model, np.asarray(image, np.float32)[None],
                                    l_adv, budget)[0]


def _segmentation_attack_loss(model, xt, l_adv, m_adv, lam):
    latent = model.encode(xt)
    act = batched_activation_loss(latent, l_adv)
    if lam == 0.0:
        return act
    a0, a1 = zone_energies(latent)
    keep = (a1.data > a0.data).astype(np.intp)
    logits = model.decode_seg(select_zone(latent, keep))
    seg = segmentation_loss(logits, m_adv)
    return ag.add(act, ag.mul_scalar(seg, lam))


def iap_segmentation_batch(model, images, m_adv, budget, lam=1.8, l_adv=0.45):
    """Segmentation-fabricating IAPs: weighted activation + cross-entropy
    objective, iterated for exactly max_iters (no early exit)."""
    if not getattr(model, "has_segmentation", False):
        raise CapabilityError(f"{model.arch} has no segmentation branch")
    x = np.asarray(images, np.float32)
    if x.ndim == 3:
        x = x[None]
    n = len(x)
    masks = np.asarray(m_adv)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (n,) + masks.shape)
    l_vec = np.broadcast_to(np.asarray(l_adv, np.float32), (n,)).copy()
    delta = np.zeros_like(x)

    for _ in range(budget.max_iters):
        g = _per_sample_grad(
            model, x + delta, l_vec,
            lambda m, xt, la: _segmentation_attack_loss(m, xt, la, masks, lam))
        delta = clip_eps(delta - budget.alpha * g, budget.epsilon)

    return [Perturbation(delta[i], "IAP",
                         {"target_label": float(l_vec[i]), "lambda": lam,
                          "iterations": budget.max_iters,
                          "epsilon": budget.epsilon, "alpha": budget.alpha,
                          "target_mask_area": float(masks[i].mean())})
            for i in range(n)]


def iap_segmentation(model, image, m_adv, budget, lam=1.8, l_adv=0.45):
    return iap_segmentation_batch(model, np.asarray(image, np.float32)[None],
                                  m_adv, budget, lam=lam, l_adv=l_adv)[0]


def uap_overfire_loss(model, perturbation, zone, kappa=2.0):
    """Over-firing objective on the perturbation-only forward pass:
    exp(kappa * a_other / a_zone) - a_zone, with a_zone floored at 1e-6."""
    if not getattr(model, "has_zones", False):
        raise CapabilityError(f"{model.arch} has no latent zones")
    if zone not in (0, 1):
        raise ContractError(f"zone must be 0 or 1, got {zone!r}")
    if kappa <= 1.0:
        raise ContractError("kappa must exceed 1.0")
    xt = perturbation if isinstance(perturbation, Tensor) else Tensor(perturbation)
    if xt.data.ndim == 3:
        xt = ag.reshape(xt, (1,) + xt.data.shape)
    latent = model.encode(xt)
    energies = zone_energies(latent)
    a_zone, a_other = energies[zone], energies[1 - zone]
    ratio = ag.div(a_other, ag.clamp_min(a_zone, 1e-6))
    return ag.mean_all(ag.sub(ag.exp(ag.mul_scalar(ratio, kappa)), a_zone))


def craft_uap(model, zone, budget, kappa=2.0, iters=280, seed=0):
    """Data-free universal perturbation that over-fires one latent zone.

    Starts from seeded uniform noise in [-eps, eps]; sees only the model,
    never any sample.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), zone, 0xF1]))
    xi = rng.uniform(-budget.epsilon, budget.epsilon, INPUT_SHAPE).astype(np.float32)

    def energy(arr):
        latent = model.encode(Tensor(arr[None]))
        return float(zone_energies(latent)[zone].data[0])

    initial_energy = energy(xi)
    for _ in range(iters):
        xt = Tensor(xi, requires_grad=True)
        loss = uap_overfire_loss(model, xt, zone, kappa)
        if not np.isfinite(loss.data).all():
            raise NumericsError("over-firing loss became non-finite")
        ag.backward(loss)
        xi = clip_eps(xi - budget.alpha * xt.grad, budget.epsilon)

    return Perturbation(xi, "UAP",
                        {"zone": zone, "kappa": kappa, "iterations": iters,
                         "seed": int(seed), "epsilon": budget.epsilon,
                         "alpha": budget.alpha,
                         "initial_energy": initial_energy,
                         "final_energy": energy(xi)})


def craft_uap_pair(model, budget, kappa=2.0, iters=280, seed=0):
    """One UAP per zone, crafted separately."""
    return {zone: craft_uap(model, zone, budget, kappa=kappa, iters=iters, seed=seed)
            for zone in (0, 1)}


def urn_baseline(budget, seed, shape=INPUT_SHAPE):
    """Uniform random noise at the same inf-norm strength."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x03B]))
    noise = rng.uniform(-budget.epsilon, budget.epsilon, shape).astype(np.float32)
    return Perturbation(noise, "URN",
                        {"seed": int(seed), "epsilon": budget.epsilon})


def run_chunked(fn, images, *arrays, chunk=64):
    """Apply a batch attack in chunks, optionally fanned out over the
    PERTFORGE_THREADS worker pool. Results keep input order."""
    spans = [(i, min(i + chunk, len(images))) for i in range(0, len(images), chunk)]
    workers = min(worker_count(), len(spans)) or 1

    def one(span):
        lo, hi = span
        return fn(images[lo:hi], *[a[lo:hi] for a in arrays])

    if workers == 1:
        batches = [one(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(one, spans))
    return [p for batch in batches for p in batch]


# ---------------------------------------------------------------------------
# persistence

def save_perturbation(prefix, pert):
    save_tensor(prefix + ".pft", Tensor(pert.delta))
    lines = [f"kind={pert.kind}"]
    for key in sorted(pert.meta):
        lines.append(f"{key}={pert.meta[key]}")
    with open(prefix + ".meta", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_perturbation(prefix):
    delta = load_tensor(prefix + ".pft").data
    meta = {}
    kind = "IAP"
    with open(prefix + ".meta") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, val = line.split("=", 1)
            if key == "kind":
                kind = val
            else:
                meta[key] = val
    return Perturbation(delta, kind, meta)


def export_png(path, pert):
    """Min-max scaled 8-bit view for display; lossy, never re-imported."""
    from PIL import Image

    arr = pert.delta
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    img = (scaled * 255.0).round().astype(np.uint8)
    if img.ndim == 3:
        img = img.transpose(1, 2, 0)
    Image.fromarray(img).save(path)
