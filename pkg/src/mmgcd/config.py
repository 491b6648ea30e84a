"""Flat ``key = value`` pipeline configuration with dotted namespaces.

Example::

    # comments and blank lines are ignored
    seed = 0
    split.old_class_count = 4
    tes.token_count = 7
    train.epsilon = 1.0

Every key has a documented default (see :data:`SCHEMA`); unknown keys and
bad values are collected and reported together in one :class:`ConfigError`.
Defaults marked *baseline-inherited* follow the common settings of
parametric GCD baselines rather than values tuned here.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .exceptions import ConfigError


@dataclass(frozen=True)
class Field:
    kind: type
    default: object
    doc: str
    choices: tuple = ()
    minimum: float = None
    positive: bool = False


def _f(kind, default, doc, **kw):
    return Field(kind, default, doc, **kw)


SCHEMA = {
    "seed": _f(int, 0, "training seed shared by both stages"),
    # dataset
    "data.manifest": _f(str, "", "JSON-lines manifest; empty selects the synthetic generator"),
    "data.class_names": _f(str, "", "text file with one class name per line (line c names class c)"),
    "data.seed": _f(int, 0, "synthetic generator seed"),
    "data.num_classes": _f(int, 8, "synthetic class count", minimum=2),
    "data.per_class": _f(int, 20, "synthetic instances per class", minimum=1),
    "data.visual_dim": _f(int, 16, "synthetic visual latent dimension", minimum=1),
    "data.text_dim": _f(int, 8, "synthetic text latent dimension", minimum=1),
    "data.class_margin": _f(float, 0.5, "minimum anchor separation", positive=True),
    "data.view_noise": _f(float, 0.05, "augmentation radius per view", minimum=0),
    "data.instance_noise": _f(float, 0.15, "instance scatter around the class anchor", minimum=0),
    "data.visual_share": _f(int, 1, "classes per shared visual anchor", minimum=1),
    "data.text_visibility": _f(float, 1.0, "image-encoder gain on the text latent", positive=True),
    "data.visual_noise_scale": _f(float, 1.0, "extra instance-noise factor on the visual latent", minimum=0),
    # split
    "split.old_class_count": _f(int, 4, "number of old (labeled) classes", minimum=1),
    "split.labeled_fraction": _f(float, 0.5, "labeled share of each old class", minimum=0),
    "split.seed": _f(int, 0, "seed for drawing old classes and labeled instances"),
    "split.first_n_old": _f(bool, False, "use the lowest class ids as old classes"),
    # encoders
    "encoder.backend": _f(str, "synthetic", "encoder backend", choices=("synthetic", "pretrained")),
    "encoder.weights_path": _f(str, "", "CLIP weights directory for the pretrained backend"),
    "encoder.backbone_dim": _f(int, 48, "synthetic backbone width", minimum=1),
    "encoder.joint_dim": _f(int, 32, "synthetic joint-space width", minimum=1),
    "encoder.token_dim": _f(int, 32, "synthetic token width", minimum=1),
    # stage 1
    "tes.token_count": _f(int, 7, "pseudo tokens per image", minimum=1),
    "tes.tau_a": _f(float, 0.01, "align-loss temperature", positive=True),
    "tes.epochs": _f(int, 200, "stage-1 epochs", minimum=0),
    "tes.batch_size": _f(int, 128, "stage-1 batch size", minimum=2),
    "tes.learning_rate": _f(float, 0.1, "stage-1 initial learning rate", positive=True),
    "tes.momentum": _f(float, 0.9, "stage-1 SGD momentum", minimum=0),
    "tes.weight_decay": _f(float, 0.0, "stage-1 weight decay", minimum=0),
    "tes.distill_include_positive": _f(bool, False, "conventional softmax in the distill loss"),
    # stage 2
    "train.n_classes": _f(int, 0, "total class count; 0 uses the dataset's class count", minimum=0),
    "train.lambda_balance": _f(float, 0.35, "supervised/unsupervised balance (baseline-inherited)", minimum=0),
    "train.lambda_cico": _f(float, 1.0, "cross-modal consistency weight", minimum=0),
    "train.epsilon": _f(float, 1.0, "mean-entropy weight (baseline-inherited)", minimum=0),
    "train.tau_c": _f(float, 0.07, "contrastive temperature (baseline-inherited)", positive=True),
    "train.tau_s": _f(float, 0.1, "student temperature (baseline-inherited)", positive=True),
    "train.tau_t": _f(float, 0.04, "final teacher temperature (baseline-inherited)", positive=True),
    "train.tau_t_warmup": _f(float, 0.07, "initial teacher temperature (baseline-inherited)", positive=True),
    "train.tau_t_warmup_epochs": _f(int, 30, "teacher warmup epochs (baseline-inherited)", minimum=0),
    "train.epochs": _f(int, 200, "stage-2 epochs", minimum=0),
    "train.batch_size": _f(int, 128, "stage-2 batch size", minimum=2),
    "train.learning_rate": _f(float, 0.1, "stage-2 initial learning rate", positive=True),
    "train.momentum": _f(float, 0.9, "stage-2 SGD momentum", minimum=0),
    "train.weight_decay": _f(float, 5e-5, "stage-2 weight decay (baseline-inherited)", minimum=0),
    "train.projection_dim": _f(int, 256, "projector output width (baseline-inherited)", minimum=1),
    "train.projector_hidden": _f(int, 256, "projector hidden width", minimum=1),
    "train.share_projector": _f(bool, False, "one projector for both branches"),
    "train.finetune_projector": _f(bool, False, "also fine-tune the visual joint projection"),
    "train.exclude_positive": _f(bool, False, "drop the positive from the self-contrastive denominator"),
    "train.prototype_init": _f(str, "ss-kmeans", "classifier initialisation", choices=("ss-kmeans", "random")),
    "train.probe_size": _f(int, 128, "fixed probe batch size for consistency tracking", minimum=1),
    # evaluation
    "eval.k_min": _f(int, 4, "smallest class count tried by estimate-k", minimum=1),
    "eval.k_max": _f(int, 16, "largest class count tried by estimate-k", minimum=1),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, field, raw, errors):
    if not isinstance(raw, str):
        value = raw
        if field.kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if field.kind is bool and not isinstance(value, bool):
            errors.append(f"{key}: expected a boolean, got {raw!r}")
            return None
        if field.kind is int and (isinstance(value, bool) or not isinstance(value, int)):
            errors.append(f"{key}: expected an integer, got {raw!r}")
            return None
        if field.kind is float and not isinstance(value, float):
            errors.append(f"{key}: expected a number, got {raw!r}")
            return None
        if field.kind is str and not isinstance(value, str):
            errors.append(f"{key}: expected a string, got {raw!r}")
            return None
        return value
    text = raw.strip()
    try:
        if field.kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if field.kind is int:
            return int(text)
        if field.kind is float:
            return float(text)
    except ValueError:
        errors.append(f"{key}: cannot parse {text!r} as {field.kind.__name__}")
        return None
    return text


def _check_range(key, field, value, errors):
    if field.choices and value not in field.choices:
        errors.append(f"{key}: {value!r} is not one of {', '.join(field.choices)}")
    if field.kind in (int, float):
        if field.positive and not value > 0:
            errors.append(f"{key}: must be > 0, got {value}")
        if field.minimum is not None and value < field.minimum:
            errors.append(f"{key}: must be >= {field.minimum}, got {value}")


class PipelineConfig:
    """Validated configuration values, addressed by dotted key."""

    def __init__(self, values=None, base_dir="."):
        values = dict(values or {})
        errors = []
        resolved = {}
        for key in values:
            if key not in SCHEMA:
                errors.append(f"unknown key {key!r}")
        for key, field in SCHEMA.items():
            if key in values:
                value = _coerce(key, field, values[key], errors)
                if value is None:
                    continue
            else:
                value = field.default
            _check_range(key, field, value, errors)
            resolved[key] = value
        self._values = resolved
        self.base_dir = str(base_dir)
        errors.extend(self._cross_checks(resolved))
        if errors:
            raise ConfigError(errors)
        for key in ("data.manifest", "data.class_names", "encoder.weights_path"):
            if resolved.get(key):
                resolved[key] = self._resolve(resolved[key])

    def _resolve(self, path):
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def _cross_checks(self, v):
        errors = []
        if "split.labeled_fraction" in v and v["split.labeled_fraction"] > 1:
            errors.append(f"split.labeled_fraction: must be <= 1, got {v['split.labeled_fraction']}")
        if {"eval.k_min", "eval.k_max"} <= v.keys() and v["eval.k_min"] > v["eval.k_max"]:
            errors.append("eval.k_min must not exceed eval.k_max")
        for key in ("train.tau_t", "train.tau_t_warmup"):
            if key in v and "train.tau_s" in v and v[key] > v["train.tau_s"]:
                errors.append(f"{key}: teacher temperature must not exceed train.tau_s")
        if "train.lambda_balance" in v and v["train.lambda_balance"] > 1:
            errors.append("train.lambda_balance: must be <= 1")
        if v.get("data.manifest") and not os.path.isfile(self._resolve(v["data.manifest"])):
            errors.append(f"data.manifest: file {v['data.manifest']!r} does not exist")
        if v.get("data.class_names") and not os.path.isfile(self._resolve(v["data.class_names"])):
            errors.append(f"data.class_names: file {v['data.class_names']!r} does not exist")
        if v.get("encoder.backend") == "pretrained":
            path = v.get("encoder.weights_path")
            if not path:
                errors.append("encoder.weights_path is required for the pretrained backend")
            elif not os.path.exists(self._resolve(path)):
                errors.append(f"encoder.weights_path: {path!r} does not exist")
            for key in ("data.manifest", "data.class_names"):
                if not v.get(key):
                    errors.append(f"{key} is required for the pretrained backend")
        return errors

    # -- access ---------------------------------------------------------

    def __getitem__(self, key):
        return self._values[key]

    def section(self, prefix):
        """Values under ``prefix.`` with the prefix stripped."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self._values.items() if k.startswith(head)}

    def to_dict(self):
        return dict(sorted(self._values.items()))

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    def replace(self, **updates):
        """Copy with dotted-key overrides (pass ``{"a.b": v}`` via ``**``)."""
        merged = self.to_dict()
        merged.update(updates)
        return PipelineConfig(merged, self.base_dir)

    def __eq__(self, other):
        return isinstance(other, PipelineConfig) and self._values == other._values

    def __repr__(self):
        return f"PipelineConfig({len(self._values)} keys)"

    @classmethod
    def from_text(cls, text, base_dir="."):
        values, errors = parse_text(text)
        try:
            config = cls(values, base_dir)
        except ConfigError as exc:
            raise ConfigError(errors + exc.errors) from None
        if errors:
            raise ConfigError(errors)
        return config

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from None
        return cls.from_text(text, base_dir=os.path.dirname(os.path.abspath(path)))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_text(text):
    """Split ``key = value`` lines; returns ``(values, syntax_errors)``."""
    values, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
            continue
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            errors.append(f"line {lineno}: missing key")
            continue
        if key in values:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        values[key] = value
    return values, errors


def default_config_text():
    """Every key with its default and documentation, as a config file."""
    lines = []
    for key, field in SCHEMA.items():
        lines.append(f"# {field.doc}")
        lines.append(f"{key} = {_format(field.default)}")
    return "\n".join(lines) + "\n"
