"""Run configuration: every tunable default in one flat, typed key=value map.

The text form is canonical (sorted keys, repr-formatted values) so config
hashes are stable. Any key can be overridden by an environment variable
named DMWM_<KEY> with '.' spelled as '__' (e.g. DMWM_WDP__GAMMA_KAPPA).
"""

from __future__ import annotations

import hashlib
import os

from .errors import RejectedInput

ENV_PREFIX = "DMWM_"

DEFAULTS = {
    # global
    "run.seed": 0,
    "run.image_size": 16,
    # schedule
    "schedule.T": 100,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.06,
    # synthetic dataset
    "data.n_train": 48,
    "data.n_heldout": 16,
    # diffusion training
    "diffusion.hidden": 32,
    "diffusion.steps": 2000,
    "diffusion.batch_size": 8,
    "diffusion.lr": 1e-3,
    # model watermark
    "wdp.gamma_kappa": 0.7,
    "wdp.gamma_eps": 1.0,
    "wdp.key_seed": 500,
    "wdp.key_mean": 2.0,
    "wdp.steps": 2000,
    "wdp.batch_size": 16,
    "wdp.lr": 2e-3,
    "wdp.accept_threshold": 0.9,
    "wdp.matrix_side": 16,
    "wdp.replication": 1,
    "wdp.record": "ip=10.0.0.1 ts=1700000000 id=01010202",
    # image watermark
    "imagewm.k": 48,
    "imagewm.alpha": 0.1,
    "imagewm.lambda_img": 0.7,
    "imagewm.lambda_rec": 1.0,
    "imagewm.extractor_steps": 3000,
    "imagewm.decoder_steps": 1500,
    "imagewm.autoencoder_steps": 1500,
    "imagewm.batch_size": 8,
    "imagewm.lr": 1e-3,
    "imagewm.n_conditions": 2,
    "imagewm.messages": "first origin tag|second origin tag",
    # dynamic transform
    "transform.lambda_cos": 1.0,
    "transform.lambda_ssim": 1.0,
    "transform.budget": 200,
    "transform.restarts": 4,
    "transform.feature_seed": 2024,
    # detection
    "detect.alpha_level": 1e-3,
    # attacks: comma-separated parseable specs
    "attack.grid": "identity,rotation:10,blur:1.0:5,texture:0.8,compress:50,crop:0.8,flip:h",
}


class RunConfig:
    """Typed view over the flat key=value map."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        if values:
            for key, val in values.items():
                if key not in DEFAULTS:
                    raise RejectedInput(f"unknown config key '{key}'")
                self.values[key] = _coerce(key, val)
        self._apply_env()

    def _apply_env(self):
        for key in self.values:
            env_name = ENV_PREFIX + key.replace(".", "__").upper()
            if env_name in os.environ:
                self.values[key] = _coerce(key, os.environ[env_name])

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def canonical(self) -> str:
        lines = [f"{k}={_format(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.canonical())

    @staticmethod
    def load(path) -> "RunConfig":
        values = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise RejectedInput(f"malformed config line: '{line}'")
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
        return RunConfig(values)


def _coerce(key: str, val):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(val, bool):
            return val
        return str(val).lower() in ("1", "true", "yes")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(val)
    if isinstance(default, float):
        return float(val)
    return str(val)


def _format(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
