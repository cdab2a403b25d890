"""pertforge: adversarial perturbation toolkit for toy forgery-forensics
models.

The package bundles a from-scratch reverse-mode autodiff engine
(:mod:`pertforge.autograd`), three small victim architectures
(:mod:`pertforge.models`), a procedural dataset generator
(:mod:`pertforge.synthdata`), per-image and universal attack crafting
(:mod:`pertforge.attacks`), an evaluation harness
(:mod:`pertforge.metrics`), and a reproducible experiment CLI
(:mod:`pertforge.cli`).
"""

__version__ = "0.1.0"

from . import attacks, autograd, metrics, models, synthdata  # noqa: F401
