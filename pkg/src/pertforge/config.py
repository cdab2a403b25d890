"""Line-oriented key=value run configuration with # comments and
command-line overrides. Defaults follow the published attack settings."""

from __future__ import annotations

import os

from .errors import ConfigError

DEFAULTS = {
    "seed": "0",
    "styles": "A,B,C",
    "n_train": "600",
    "n_test": "200",
    "arch": "y_shaped_net",
    "k": "64",
    "epochs": "30",
    "lr": "0.01",
    "momentum": "0.9",
    "batch_size": "32",
    "epsilon": "2.5",
    "alpha": "1.0",
    "lambda": "1.8",
    "l_adv": "0.45",
    "kappa": "2.0",
    "uap_iters": "280",
    "iap_iters": "20",
    "seg_iters": "500",
    "attack": "iap",
    "out": "runs/out",
}


class RunConfig:
    def __init__(self, values):
        self.values = dict(DEFAULTS)
        self.values.update(values)

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {}
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path) as fh:
                for ln, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
                    key, val = line.split("=", 1)
                    values[key.strip()] = val.strip()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, val = item.split("=", 1)
            values[key.strip()] = val.strip()
        return cls(values)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def _typed(self, key, cast, kind):
        if key not in self.values:
            raise ConfigError(f"missing config key {key!r}")
        try:
            return cast(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: expected {kind}, "
                              f"got {self.values[key]!r}") from exc

    def get_int(self, key):
        return self._typed(key, int, "integer")

    def get_float(self, key):
        return self._typed(key, float, "float")

    def styles(self):
        return [s.strip() for s in self.values["styles"].split(",") if s.strip()]

    def echo(self, out_dir):
        """Write the fully resolved configuration into the output directory."""
        os.makedirs(out_dir, exist_ok=True)
        lines = [f"{k}={self.values[k]}" for k in sorted(self.values)]
        with open(os.path.join(out_dir, "resolved.cfg"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
