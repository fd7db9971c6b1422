"""Run configuration: a flat ``key = value`` file with dotted keys.

Lines starting with ``#`` are comments. Unknown keys are rejected, as are
values that do not parse as the key's type. Booleans accept on/off,
true/false, yes/no, 1/0.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


# key: (parser, default, description)
SCHEMA: dict[str, tuple] = {
    # classifier topology
    "model.layers": (int, 8, "residual ConvTrans layers"),
    "model.heads": (int, 8, "attention heads"),
    "model.d_model": (int, 64, "embedding width"),
    "model.ffn_dim": (int, 256, "feed-forward width"),
    "model.L": (int, 16, "segment length"),
    "model.conv_kernel": (int, 3, "input convolution width"),
    "model.dropout": (float, 0.0, "dropout rate"),
    "model.skip": (_bool, True, "extra per-layer skip path"),
    "model.tape": (_bool, True, "tAPE absolute encoding"),
    "model.erpe": (_bool, True, "eRPE relative attention weights"),
    # classifier optimizer
    "optimizer.kind": (_choice("AdamW", "Adam", "RAdam"), "RAdam", "classifier optimizer"),
    "optimizer.lr": (float, 1e-3, "classifier base learning rate"),
    "optimizer.beta1": (float, 0.9, ""),
    "optimizer.beta2": (float, 0.999, ""),
    "optimizer.weight_decay": (float, 0.0, "decoupled decay (AdamW only)"),
    "optimizer.eps": (float, 1e-8, ""),
    "optimizer.schedule": (_choice("constant", "cosine"), "constant", "classifier lr schedule"),
    "optimizer.total_steps": (int, 0, "cosine horizon in steps, 0 means the whole run"),
    "optimizer.warmup": (int, 0, "warmup steps"),
    "optimizer.grad_clip": (float, 0.0, "global gradient-norm cap, 0 disables"),
    # autoencoder
    "mae.ratio": (float, 0.9, "masking ratio"),
    "mae.frames": (int, 16, "frames per clip segment"),
    "mae.height": (int, 32, ""),
    "mae.width": (int, 32, ""),
    "mae.channels": (int, 1, ""),
    "mae.t_patch": (int, 2, "tubelet temporal extent"),
    "mae.s_patch": (int, 8, "tubelet spatial extent"),
    "mae.d_enc": (int, 32, "encoder width (= extracted feature dimension)"),
    "mae.enc_layers": (int, 2, ""),
    "mae.enc_heads": (int, 4, ""),
    "mae.enc_ffn": (int, 64, ""),
    "mae.d_dec": (int, 32, ""),
    "mae.dec_layers": (int, 1, ""),
    "mae.dec_heads": (int, 4, ""),
    "mae.dec_ffn": (int, 64, ""),
    "mae.loss": (_choice("l2", "mse"), "l2", "per-token L2 norm or mean squared error"),
    "mae.optimizer": (_choice("AdamW", "Adam", "RAdam"), "AdamW", "pretraining optimizer"),
    "mae.lr": (float, 1.5e-4, "pretraining base learning rate"),
    "mae.beta1": (float, 0.9, ""),
    "mae.beta2": (float, 0.95, ""),
    "mae.weight_decay": (float, 0.05, ""),
    "mae.steps": (int, 300, "pretraining steps (cosine decay spans them)"),
    "mae.warmup": (int, 0, ""),
    "mae.batch_size": (int, 8, ""),
    "mae.synthetic_clips": (int, 64, "clip count for --synthetic"),
    # data
    "data.train_path": (str, "", "FSEQ directory for training"),
    "data.val_path": (str, "", "optional FSEQ directory for validation"),
    "data.clips_path": (str, "", "directory of .npy clips"),
    "data.stride": (int, 0, "window stride, 0 means L"),
    "data.tail_policy": (_choice("drop", "pad_repeat_last"), "drop", ""),
    # run
    "run.seed": (int, 0, "master seed"),
    "run.epochs": (int, 200, ""),
    "run.batch_size": (int, 16, ""),
    "run.precision": (_choice("double", "single"), "double", ""),
}


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: spec[1] for k, spec in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value, line: int | None = None, path: str | None = None) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line, path)
        parser = SCHEMA[key][0]
        try:
            if parser is _bool and isinstance(value, bool):
                self.values[key] = value
            else:
                self.values[key] = parser(str(value) if parser is _bool else value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}", line, path) from None

    def __getitem__(self, key: str):
        return self.values[key]

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def parse(cls, text: str, path: str | None = None) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value, lineno, path)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls.parse(text, str(p))

    def dump(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.to_dict().items())


def _render(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)
