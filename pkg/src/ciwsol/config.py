"""Flat dotted-key configuration with documented defaults.

Files hold one `key = value` assignment per line; `#` starts a comment.
Every key has a typed default below, unknown keys are rejected, and the
resolved configuration (defaults plus overrides) serializes back to the same
format, so parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

from .errors import ValidationError

# key -> (default, help)
DEFAULTS = {
    "dataset.root": (".", "directory containing the dataset"),
    "dataset.manifest": ("manifest.tsv", "manifest path, relative to dataset.root"),
    "dataset.input_size": (64, "square network input resolution"),

    "schedule.base": (2, "classes in the first task"),
    "schedule.increment": (2, "classes added per later task"),
    "schedule.seed": (0, "seed for the class-order permutation"),

    "memory.budget": (200, "total exemplar images kept; 0 disables replay"),

    "loss.alpha1": (1.0, "foreground classification weight"),
    "loss.alpha2": (1.0, "background suppression weight"),
    "loss.alpha3": (1.0, "area constraint weight"),
    "loss.alpha4": (1.0, "score distillation weight"),
    "loss.alpha5": (1.0, "mask distillation weight"),
    "loss.alpha6": (0.5, "classifier-tap feature distillation weight"),
    "loss.alpha7": (0.5, "localizer-tap feature distillation weight"),
    "loss.beta": (1.0, "activation-map term weight in compensation training"),
    "loss.epsilon": (1e-8, "division guard in the suppression ratio"),

    "model.backbone_channels": ("64,128,256,256", "backbone block widths"),
    "model.backbone_strides": ("2,2,2,1", "backbone block strides"),
    "model.classifier_channels": ("128,128,128,128", "classifier hidden widths"),
    "model.classifier_kernel": (1, "classifier hidden kernel size (1 keeps scores local)"),
    "model.cosine_head": (True, "cosine-normalized final classifier layer"),
    "model.scale_init": (10.0, "initial value of the cosine score scale"),

    "fdc.enabled": (True, "train and apply drift compensation"),
    "fdc.hidden": (128, "hidden width of the compensation modules"),

    "train.epochs_base": (30, "epochs for the first task"),
    "train.epochs_incr": (30, "epochs per incremental task"),
    "train.fdc_epochs": (3, "compensation training epochs per task"),
    "train.lr": (0.05, "SGD learning rate"),
    "train.momentum": (0.9, "SGD momentum"),
    "train.batch_size": (64, "training batch size"),
    "train.lr_decay": (0.1, "learning-rate factor applied at 2/3 of the epochs"),

    "eval.iou_thresh": (0.5, "IoU needed for a localization hit"),
    "eval.tau": (0.5, "foreground binarization threshold"),
    "eval.batch_size": (100, "evaluation batch size"),

    "run.name": ("run", "run directory name"),
    "run.out_dir": ("runs", "parent directory for run outputs"),
    "run.seed": (0, "master seed for weights and shuffling"),
}


class Config:
    """Resolved configuration: defaults overlaid with file/dict overrides."""

    def __init__(self, overrides: dict | None = None):
        self._values = {k: d for k, (d, _) in DEFAULTS.items()}
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ValidationError(f"unknown configuration key '{key}'")
            self._values[key] = _coerce(key, value)

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ValidationError(f"unknown configuration key '{key}'") from None

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    def with_overrides(self, pairs: dict) -> "Config":
        merged = dict(self._values)
        merged.update(pairs)
        return Config(merged)

    def int_tuple(self, key: str) -> tuple:
        return tuple(int(p) for p in str(self[key]).split(","))

    def serialize(self) -> str:
        lines = [f"{key} = {_format(self._values[key])}" for key in DEFAULTS]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.serialize())


def _coerce(key: str, value):
    default = DEFAULTS[key][0]
    if isinstance(value, str):
        text = value.strip()
        try:
            if isinstance(default, bool):
                if text.lower() not in ("true", "false"):
                    raise ValueError("expected true/false")
                return text.lower() == "true"
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
            return text
        except ValueError as exc:
            raise ValidationError(f"bad value for '{key}': {value!r} ({exc})") from exc
    if isinstance(default, bool) != isinstance(value, bool):
        raise ValidationError(f"bad value for '{key}': {value!r}")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if not isinstance(value, type(default)):
        raise ValidationError(f"bad value for '{key}': {value!r}")
    return value


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> Config:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ValidationError(f"config line {lineno}: unknown key '{key}'")
        overrides[key] = value
    return Config(overrides)


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
